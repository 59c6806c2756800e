//! Command-line front end: `train`, `eval`, `predict`, `sweep`, `kmeans`, `generate`.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::backbone::{Backbone, ToyBackbone};
use crate::classifiers::EnsembleMethod;
use crate::config::{self, ConfigSnapshot, DataSource, RunConfig};
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::inference::PanopticMap;
use crate::kmeans::kmeans_feature_map;
use crate::model::SegModel;
use crate::nn::ParamStore;
use crate::pipeline::{self, EvalReport, TestResize, VocabSetup};
use crate::raster::Image;
use crate::training::{self, TrainSet};
use crate::util::fnv1a;
use crate::vocab::{self, Category, ToyTextEncoder, Vocabulary};

/// Environment variable naming the directory under which default output directories go.
pub const OUTPUT_ROOT_ENV: &str = "OVSEG_OUTPUT_ROOT";
/// Categories seen in training, stored next to a trained model.
pub const TRAIN_CATEGORIES_FILE: &str = "train_categories.jsonl";

#[derive(Debug, Parser)]
#[command(name = "ovseg", version, about = "Open-vocabulary panoptic segmentation with a frozen convolutional backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory; defaults to `$OVSEG_OUTPUT_ROOT/<command>` (or `runs/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write it, its metrics log and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for the all-frozen (`true`) or all-trainable (`false`) preset.
        #[arg(long, value_name = "BOOL", action = ArgAction::Set)]
        frozen: Option<bool>,
        /// Arm preset such as `trainable/trainable/frozen`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Evaluate a trained model on the configured evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
        /// Restrict each image's vocabulary to its ground-truth categories.
        #[arg(long)]
        grounding: bool,
        /// Also write per-proposal class scores to `scores.jsonl`.
        #[arg(long)]
        dump_scores: bool,
    },
    /// Segment individual images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "image", required = true)]
        images: Vec<PathBuf>,
        /// Category file (JSON lines) to use as the vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Restrict the vocabulary to the categories listed in `--gt`.
        #[arg(long)]
        grounding: bool,
        /// Category file with the ground-truth categories, for `--grounding`.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        ensemble: EnsembleArgs,
    },
    /// Evaluate the ensemble grid with both combination rules.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Cluster backbone features of one image at several input resolutions.
    Kmeans {
        /// Take the backbone from a trained model instead of the constructed one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Pyramid level, 0 (stride 4) to 3 (stride 32).
        #[arg(long, default_value_t = 1)]
        level: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256])]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write the configured synthetic splits as panoptic datasets.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// `geometric` or `arithmetic`.
    #[arg(long)]
    pub method: Option<EnsembleMethod>,
}

impl EnsembleArgs {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(a) = self.alpha {
            o.push(format!("eval.ensemble.alpha={a}"));
        }
        if let Some(b) = self.beta {
            o.push(format!("eval.ensemble.beta={b}"));
        }
        if let Some(m) = self.method {
            o.push(format!("eval.ensemble.method=\"{m}\""));
        }
        o
    }
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, frozen, preset } => {
            let mut extra = Vec::new();
            if let Some(f) = frozen {
                extra.push(config::frozen_override(f));
            }
            if let Some(p) = preset {
                extra.push(format!("model.preset=\"{p}\""));
            }
            let snap = resolve(&cfg, None, &extra)?;
            cmd_train(&snap, &out_dir(&cfg, "train"))
        }
        Command::Eval {
            checkpoint,
            cfg,
            ensemble,
            grounding,
            dump_scores,
        } => {
            let snap = resolve(&cfg, Some(&checkpoint), &ensemble.overrides())?;
            cmd_eval(&snap, &checkpoint, &out_dir(&cfg, "eval"), grounding, dump_scores).map(|_| ())
        }
        Command::Predict {
            checkpoint,
            images,
            vocab,
            grounding,
            gt,
            cfg,
            ensemble,
        } => {
            let gt = match (grounding, gt) {
                (true, None) => return Err(Error::config("--gt", "grounding mode needs a ground-truth category file")),
                (true, Some(p)) => Some(p),
                (false, _) => None,
            };
            let snap = resolve(&cfg, Some(&checkpoint), &ensemble.overrides())?;
            cmd_predict(&snap, &checkpoint, &images, vocab.as_deref(), gt.as_deref(), &out_dir(&cfg, "predict"))
        }
        Command::Sweep { checkpoint, cfg } => {
            let snap = resolve(&cfg, Some(&checkpoint), &[])?;
            cmd_sweep(&snap, &checkpoint, &out_dir(&cfg, "sweep")).map(|_| ())
        }
        Command::Kmeans {
            checkpoint,
            image,
            k,
            level,
            resolutions,
            seed,
            cfg,
        } => {
            let snap = resolve(&cfg, checkpoint.as_deref(), &[])?;
            cmd_kmeans(&snap, checkpoint.as_deref(), &image, k, level, &resolutions, seed, &out_dir(&cfg, "kmeans"))
                .map(|_| ())
        }
        Command::Generate { cfg } => {
            let snap = resolve(&cfg, None, &[])?;
            cmd_generate(&snap, &out_dir(&cfg, "generate"))
        }
    }
}

fn out_dir(cfg: &ConfigArgs, command: &str) -> PathBuf {
    match &cfg.out {
        Some(p) => p.clone(),
        None => std::env::var_os(OUTPUT_ROOT_ENV)
            .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
            .join(command),
    }
}

/// Base table: `--config` if given, else the checkpoint's recorded config, else defaults.
fn resolve(cfg: &ConfigArgs, checkpoint: Option<&Path>, extra: &[String]) -> Result<ConfigSnapshot> {
    let base = match (&cfg.config, checkpoint) {
        (Some(path), _) => config::load_table(path)?,
        (None, Some(ck)) => match config::read_snapshot(ck)? {
            Some(snap) => config::to_table(&snap.config)?,
            None => toml::Table::new(),
        },
        (None, None) => toml::Table::new(),
    };
    let mut overrides = extra.to_vec();
    overrides.extend(cfg.overrides.iter().cloned());
    config::resolve(base, cfg.config.as_deref(), &overrides)
}

pub fn text_encoder(cfg: &RunConfig) -> Result<ToyTextEncoder> {
    ToyTextEncoder::new(cfg.model.text_dim, cfg.text.seed)
}

pub fn templates(cfg: &RunConfig) -> Result<Vec<String>> {
    match &cfg.text.templates {
        Some(p) => vocab::load_templates(p),
        None => Ok(vocab::default_templates()),
    }
}

pub fn train_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => data::generate(&cfg.data.generator, Split::Train, cfg.data.seed, cfg.data.train_count),
        DataSource::Coco => data::load_coco_panoptic_dir(required(&cfg.data.train_path, "data.train_path")?),
    }
}

pub fn eval_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => {
            data::generate(&cfg.data.generator, cfg.data.eval_split, cfg.data.seed, cfg.data.eval_count)
        }
        DataSource::Coco => data::load_coco_panoptic_dir(required(&cfg.data.eval_path, "data.eval_path")?),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, field: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::config(field, "missing"))
}

/// Training vocabulary and the map from dataset category ids to it.
pub fn training_vocab(cfg: &RunConfig, train: &Dataset) -> Result<VocabSetup> {
    let enc = text_encoder(cfg)?;
    let train_ids: Vec<usize> = match cfg.data.source {
        DataSource::Synthetic => cfg.data.generator.train_category_ids(),
        DataSource::Coco => (0..train.categories.len()).collect(),
    };
    pipeline::vocab_setup(&train.categories, &train_ids, &enc, &templates(cfg)?)
}

/// Vocabulary over `categories` with the seen/unseen partition taken from the
/// checkpoint's training categories (all seen when none are recorded).
pub fn test_vocab(cfg: &RunConfig, categories: &[Category], checkpoint: &Path) -> Result<Vocabulary> {
    let enc = text_encoder(cfg)?;
    let tpl = templates(cfg)?;
    let full = vocab::build_vocabulary(categories.to_vec(), &enc, &tpl)?;
    let train_path = checkpoint.join(TRAIN_CATEGORIES_FILE);
    if !train_path.exists() {
        log::warn!("{} not found; treating every category as seen", train_path.display());
        return Ok(full);
    }
    let train = vocab::build_vocabulary(vocab::load_categories(&train_path)?, &enc, &tpl)?;
    let seen = vocab::partition_seen_unseen(&full, &train);
    full.with_seen_mask(seen)
}

fn resize_of(cfg: &RunConfig) -> TestResize {
    TestResize {
        short: cfg.eval.test_size,
        max_long: cfg.eval.max_size,
    }
}

pub fn load_model(checkpoint: &Path) -> Result<SegModel> {
    if !checkpoint.join("model.json").exists() {
        return Err(Error::config("--checkpoint", format!("no model found in {}", checkpoint.display())));
    }
    SegModel::load(checkpoint, DType::F32, &Device::Cpu)
}

pub fn cmd_train(snap: &ConfigSnapshot, out: &Path) -> Result<()> {
    let cfg = &snap.config;
    config::write_snapshot(out, snap)?;
    let train = train_dataset(cfg)?;
    let vs = training_vocab(cfg, &train)?;
    let mut model = SegModel::new(cfg.model.clone(), DType::F32, &Device::Cpu)?;
    vocab::save_categories(&out.join(TRAIN_CATEGORIES_FILE), &vs.train.categories)?;
    let set = TrainSet::new(&model, &train, &vs.class_of)?;
    log::info!(
        "training {} on {} images for {} epochs",
        cfg.model.preset,
        train.len(),
        cfg.train.epochs
    );
    let report = training::train(&mut model, &set, &vs.train, &cfg.train, Some(out))?;
    let last = report.steps.last().map_or(f64::NAN, |s| s.loss.total);
    std::fs::write(
        out.join("train_summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "steps": report.steps.len(),
            "final_loss": last,
            "seconds": report.seconds,
            "initial_backbone_checksum": report.initial_backbone_checksum,
            "final_backbone_checksum": report.final_backbone_checksum,
        }))?,
    )?;
    println!(
        "trained {} steps in {:.1}s, final loss {last:.4}; model written to {}",
        report.steps.len(),
        report.seconds,
        out.display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreRecord<'a> {
    image_id: usize,
    proposal: usize,
    scores: &'a [f64],
}

pub fn cmd_eval(snap: &ConfigSnapshot, checkpoint: &Path, out: &Path, grounding: bool, dump_scores: bool) -> Result<EvalReport> {
    let cfg = &snap.config;
    let model = load_model(checkpoint)?;
    config::write_snapshot(out, snap)?;
    let data = eval_dataset(cfg)?;
    let vocab = test_vocab(cfg, &data.categories, checkpoint)?;
    let raws = pipeline::predict_dataset(&model, &data, &vocab, resize_of(cfg), cfg.eval.batch_size)?;
    let settings = cfg.eval.settings();
    let report = pipeline::evaluate_raw(&raws, &data, &vocab, &settings, grounding)?;
    if dump_scores {
        let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("scores.jsonl"))?);
        for (raw, s) in raws.iter().zip(&data.samples) {
            let scores = raw.scores(&vocab, &settings.ensemble)?;
            for i in 0..scores.rows {
                let rec = ScoreRecord {
                    image_id: s.image_id,
                    proposal: i,
                    scores: scores.row(i),
                };
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
        }
        f.flush()?;
    }
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let summary = format_report(&report, &vocab);
    std::fs::write(out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

pub fn format_report(r: &EvalReport, vocab: &Vocabulary) -> String {
    let mut s = format!(
        "PQ {:.2}  SQ {:.2}  RQ {:.2}  PQ_seen {}  PQ_unseen {}  mIoU {:.2}  AP {:.2}  AP50 {:.2}\n",
        100.0 * r.pq,
        100.0 * r.sq,
        100.0 * r.rq,
        opt(r.pq_seen),
        opt(r.pq_unseen),
        100.0 * r.miou,
        100.0 * r.ap,
        100.0 * r.ap50
    );
    s.push_str(&format!("{:<16} {:>6} {:>6} {:>6} {:>6}  seen\n", "category", "PQ", "SQ", "RQ", "IoU"));
    for (j, c) in vocab.categories.iter().enumerate() {
        let stat = &r.panoptic.per_class[j];
        let (pq, sq, rq) = if stat.tp + stat.fp + stat.fn_ > 0 {
            let (a, b, c) = stat.quality();
            (Some(a), Some(b), Some(c))
        } else {
            (None, None, None)
        };
        s.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>6}  {}\n",
            c.display_name(),
            opt(pq),
            opt(sq),
            opt(rq),
            opt(r.semantic.per_class[j]),
            if vocab.seen_mask[j] { "yes" } else { "no" }
        ));
    }
    s
}

pub fn cmd_sweep(snap: &ConfigSnapshot, checkpoint: &Path, out: &Path) -> Result<Vec<pipeline::SweepRecord>> {
    let cfg = &snap.config;
    let model = load_model(checkpoint)?;
    config::write_snapshot(out, snap)?;
    let data = eval_dataset(cfg)?;
    let vocab = test_vocab(cfg, &data.categories, checkpoint)?;
    let raws = pipeline::predict_dataset(&model, &data, &vocab, resize_of(cfg), cfg.eval.batch_size)?;
    let records = pipeline::sweep(&raws, &data, &vocab, cfg.eval.thresholds, &pipeline::SWEEP_GRID)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out.join("sweep.jsonl"))?);
    for r in &records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    f.flush()?;
    let mut table = format!("{:<14} {:>10} {:>10}\n", "(alpha, beta)", "arithmetic", "geometric");
    for pair in records.chunks(2) {
        let get = |m: EnsembleMethod| pair.iter().find(|r| r.method == m).map_or(f64::NAN, |r| 100.0 * r.pq);
        table.push_str(&format!(
            "({:.1}, {:.1})     {:>10.2} {:>10.2}\n",
            pair[0].alpha,
            pair[0].beta,
            get(EnsembleMethod::Arithmetic),
            get(EnsembleMethod::Geometric)
        ));
    }
    std::fs::write(out.join("sweep.txt"), &table)?;
    print!("{table}");
    Ok(records)
}

/// Deterministic display color of a segment id.
pub fn segment_color(id: u32) -> [u8; 3] {
    let h = fnv1a(&id.to_le_bytes());
    [(h & 0xff) as u8, ((h >> 8) & 0xff) as u8, ((h >> 16) & 0xff) as u8]
}

/// Half-and-half blend of `image` with segment colors; void pixels keep the image.
pub fn overlay(image: &Image, map: &PanopticMap) -> Result<Image> {
    if image.width != map.width || image.height != map.height {
        return Err(Error::Shape("overlay size mismatch".into()));
    }
    let mut out = image.clone();
    for y in 0..map.height {
        for x in 0..map.width {
            let id = map.segment_ids[y * map.width + x];
            if id == 0 {
                continue;
            }
            let (a, b) = (image.pixel(x, y), segment_color(id));
            out.set_pixel(x, y, std::array::from_fn(|c| ((a[c] as u16 + b[c] as u16) / 2) as u8));
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct PredictedSegment {
    id: u32,
    category_id: usize,
    category: String,
    is_thing: bool,
    score: f64,
    area: usize,
}

pub fn cmd_predict(
    snap: &ConfigSnapshot,
    checkpoint: &Path,
    images: &[PathBuf],
    vocab_file: Option<&Path>,
    gt_file: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = &snap.config;
    let categories = match vocab_file {
        Some(p) => vocab::load_categories(p)?,
        None => match cfg.data.source {
            DataSource::Synthetic => cfg.data.generator.categories(),
            DataSource::Coco => eval_dataset(cfg)?.categories,
        },
    };
    let vocab = test_vocab(cfg, &categories, checkpoint)?;
    let gt_ids = match gt_file {
        Some(p) => {
            let gt = vocab::load_categories(p)?;
            let mut ids = Vec::with_capacity(gt.len());
            for c in &gt {
                let id = c
                    .names
                    .iter()
                    .find_map(|n| vocab.find(n))
                    .ok_or_else(|| Error::config("--gt", format!("category {:?} is not in the vocabulary", c.display_name())))?;
                ids.push(id);
            }
            Some(ids)
        }
        None => None,
    };
    let model = load_model(checkpoint)?;
    config::write_snapshot(out, snap)?;
    let settings = cfg.eval.settings();
    for path in images {
        let image = Image::load(path)?;
        let resized = resize_of(cfg).apply(&image)?;
        let raw = pipeline::predict_raw(&model, std::slice::from_ref(&resized), &vocab, 1)?.remove(0);
        let result = match &gt_ids {
            Some(ids) => pipeline::grounding_predict(&raw, image.height, image.width, &vocab, ids, &settings)?,
            None => pipeline::postprocess(&raw, image.height, image.width, &vocab, &settings)?,
        };
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let map = &result.panoptic;
        data::encode_id_map(map).save(&out.join(format!("{stem}.panoptic.png")))?;
        overlay(&image, map)?.save(&out.join(format!("{stem}.overlay.png")))?;
        let areas = map.areas();
        let table: Vec<PredictedSegment> = map
            .segments
            .iter()
            .map(|(&id, s)| PredictedSegment {
                id,
                category_id: s.category_id,
                category: vocab.categories[s.category_id].display_name().to_string(),
                is_thing: s.is_thing,
                score: s.score,
                area: areas.get(&id).copied().unwrap_or(0),
            })
            .collect();
        std::fs::write(out.join(format!("{stem}.segments.json")), serde_json::to_string_pretty(&table)?)?;
        println!("{}: {} segments", path.display(), table.len());
    }
    Ok(())
}

/// Label colors for cluster maps.
fn cluster_color(label: usize) -> [u8; 3] {
    let c = crate::color::PALETTE[label % crate::color::PALETTE.len()].rgb;
    c.map(|v| (v * 255.0).round() as u8)
}

/// Writes `kmeans_<res>.png` per resolution (cluster map upsampled to the input size)
/// and returns the file paths.
#[allow(clippy::too_many_arguments)]
pub fn cmd_kmeans(
    snap: &ConfigSnapshot,
    checkpoint: Option<&Path>,
    image: &Path,
    k: usize,
    level: usize,
    resolutions: &[usize],
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    if let Some(r) = resolutions.iter().find(|&&r| r == 0 || r % 32 != 0) {
        return Err(Error::config("--resolutions", format!("{r} is not a positive multiple of 32")));
    }
    if level > 3 {
        return Err(Error::config("--level", "must be 0, 1, 2 or 3"));
    }
    if k == 0 {
        return Err(Error::config("--k", "must be at least 1"));
    }
    let cfg = &snap.config;
    let img = Image::load(image)?;
    let model;
    let fresh;
    let backbone: &dyn Backbone = match checkpoint {
        Some(ck) => {
            model = load_model(ck)?;
            &model.backbone
        }
        None => {
            let ps = ParamStore::new(cfg.model.seed, DType::F32, Device::Cpu);
            fresh = ToyBackbone::new(&ps, "backbone.", &cfg.model.backbone, cfg.model.text_dim, cfg.model.seed)?;
            &fresh
        }
    };
    config::write_snapshot(out, snap)?;
    kmeans_outputs(backbone, &img, k, level, resolutions, seed, out)
}

fn kmeans_outputs(
    backbone: &dyn Backbone,
    img: &Image,
    k: usize,
    level: usize,
    resolutions: &[usize],
    seed: u64,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(resolutions.len());
    for &r in resolutions {
        let resized = img.resize(r, r)?;
        let t = Image::batch_tensor(&[&resized], DType::F32, &Device::Cpu)?;
        let pyr = backbone.forward(&t)?;
        let (h, w, res) = kmeans_feature_map(&pyr, level, k, seed)?;
        let mut label_img = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                label_img.set_pixel(x, y, cluster_color(res.labels[y * w + x]));
            }
        }
        let up = nearest_upsample(&label_img, r, r);
        let p = out.join(format!("kmeans_{r}.png"));
        up.save(&p)?;
        paths.push(p);
    }
    Ok(paths)
}

fn nearest_upsample(img: &Image, width: usize, height: usize) -> Image {
    let mut out = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            out.set_pixel(x, y, img.pixel(x * img.width / width, y * img.height / height));
        }
    }
    out
}

pub fn cmd_generate(snap: &ConfigSnapshot, out: &Path) -> Result<()> {
    let cfg = &snap.config;
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::config("data.source", "generate needs the synthetic source"));
    }
    config::write_snapshot(out, snap)?;
    for (name, ds) in [("train", train_dataset(cfg)?), ("eval", eval_dataset(cfg)?)] {
        data::save_coco_panoptic(&ds, &out.join(name))?;
        println!("{name}: {} images", ds.len());
    }
    Ok(())
}
