mod common;

use candle_core::{DType, Device};
use ovseg::model::SegModel;
use ovseg::training::checkpoint_dir;

#[test]
fn frozen_backbone_is_untouched_by_training() {
    let (model, rep) = common::train_tiny("frozen/frozen/frozen", 100, 0, None);
    assert_eq!(rep.steps.len(), 100);
    assert_eq!(rep.initial_backbone_checksum, rep.final_backbone_checksum);
    assert_eq!(model.backbone_checksum().unwrap(), rep.initial_backbone_checksum);
    let fresh = SegModel::new(model.config.clone(), DType::F32, &Device::Cpu).unwrap();
    assert_ne!(fresh.checksum().unwrap(), rep.final_checksum, "decoder should have moved");
}

#[test]
fn trainable_backbone_changes() {
    let (_, rep) = common::train_tiny("trainable/trainable/trainable", 20, 0, None);
    assert_ne!(rep.initial_backbone_checksum, rep.final_backbone_checksum);
}

#[test]
fn training_is_deterministic_under_seed() {
    let (_, a) = common::train_tiny("frozen/frozen/frozen", 6, 3, None);
    let (_, b) = common::train_tiny("frozen/frozen/frozen", 6, 3, None);
    assert_eq!(a.final_checksum, b.final_checksum);
    let losses = |r: &ovseg::training::TrainReport| r.steps.iter().map(|s| s.loss.total).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    let (_, c) = common::train_tiny("frozen/frozen/frozen", 6, 4, None);
    assert_ne!(a.final_checksum, c.final_checksum);
}

#[test]
fn optimizer_groups_follow_the_preset() {
    let frozen = SegModel::new(common::tiny_model_config("frozen/frozen/frozen"), DType::F32, &Device::Cpu).unwrap();
    let trainable = SegModel::new(common::tiny_model_config("trainable/trainable/trainable"), DType::F32, &Device::Cpu).unwrap();
    let (fb, fr) = frozen.trainable_var_groups();
    let (tb, tr) = trainable.trainable_var_groups();
    assert!(fb.is_empty());
    assert!(!tb.is_empty());
    assert_eq!(fr.len(), tr.len());
}

#[test]
fn outputs_land_in_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (model, rep) = common::train_tiny("frozen/frozen/frozen", 8, 0, Some(dir.path()));
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), rep.steps.len());
    // 16 images in batches of 4: one epoch every 4 steps
    assert!(checkpoint_dir(dir.path(), 1).join("model.safetensors").exists());
    assert!(checkpoint_dir(dir.path(), 2).join("model.safetensors").exists());
    let loaded = SegModel::load(dir.path(), DType::F32, &Device::Cpu).unwrap();
    assert_eq!(loaded.checksum().unwrap(), model.checksum().unwrap());
}
