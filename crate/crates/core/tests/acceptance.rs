//! Acceptance suite: one PASS/FAIL line per criterion. The desk-scale runs train six
//! full models (three seeds, frozen and trainable backbones) and take about an hour on
//! one core.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device};
use ovseg::classifiers::{ensemble, mask_pool, EnsembleMethod, EnsembleParams, ScoreMatrix};
use ovseg::cli::{eval_dataset, train_dataset, training_vocab};
use ovseg::config::RunConfig;
use ovseg::data::Split;
use ovseg::inference::{merge, MergeThresholds, PanopticMap, Segment, IGNORE};
use ovseg::matching::hungarian;
use ovseg::metrics::{instance_ap, mean_iou, panoptic_quality};
use ovseg::model::SegModel;
use ovseg::pipeline::{evaluate_raw, predict_dataset, sweep, EvalReport, SweepRecord, TestResize, SWEEP_GRID};
use ovseg::training::{train, TrainSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HUNGARIAN_CASES: usize = 200;
const HUNGARIAN_BUDGET_SECS: f64 = 10.0;
const HUNGARIAN_REAL_TOL: f64 = 1e-12;
const POOL_CASES: usize = 100;
const POOL_TOL: f64 = 1e-6;
const ENSEMBLE_FIXED_TOL: f64 = 1e-12;
const SCALAR_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-3;
const FROZEN_STEPS: usize = 100;
const METRIC_CASES: usize = 300;
const METRIC_TOL: f64 = 1e-12;
const PQ_PRODUCT_TOL: f64 = 1e-9;
const MERGE_CASES: usize = 200;
const SANITY_PQ: f64 = 0.5;
const SANITY_BUDGET_SECS: f64 = 15.0 * 60.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const SEEN_REL_GAP: f64 = 0.2;
/// Images are upscaled to this shorter side before prediction in the desk-scale runs.
const TEST_SIZE: usize = 128;

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn report(id: usize, name: &str, (pass, detail): Outcome, failures: &mut usize) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} [{id:>2}] {name}: {detail}");
    let _ = std::io::stdout().flush();
    if !pass {
        *failures += 1;
    }
}

/// Integer-valued costs are compared exactly; real-valued ones up to summation order.
fn hungarian_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(1);
    let (mut int_worst, mut real_worst) = (0.0f64, 0.0f64);
    for i in 0..HUNGARIAN_CASES {
        let integer = i % 2 == 0;
        let cost = common::random_cost(&mut r, 6, integer);
        let err = (hungarian(&cost).unwrap().total_cost(&cost) - common::brute_force_min_cost(&cost)).abs();
        if integer {
            int_worst = int_worst.max(err);
        } else {
            real_worst = real_worst.max(err);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    (
        int_worst == 0.0 && real_worst < HUNGARIAN_REAL_TOL && secs < HUNGARIAN_BUDGET_SECS,
        format!(
            "{HUNGARIAN_CASES} matrices, integer costs max err {int_worst:e}, real costs max err {real_worst:e}, {secs:.2}s"
        ),
    )
}

fn pooling_oracle() -> Outcome {
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..POOL_CASES {
        let f = common::random_features(&mut r, 16, 16, 6);
        let logits = common::random_mask_logits(&mut r, 256);
        let got = mask_pool(&f, &logits, 16, 16);
        let want = common::brute_mask_pool(&f, &logits);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    (worst < POOL_TOL, format!("{POOL_CASES} 16x16 instances, max abs err {worst:e}"))
}

fn random_scores(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> ScoreMatrix {
    let mut p: Vec<f64> = (0..rows * cols).map(|_| r.random_range(0.01..1.0)).collect();
    for row in p.chunks_mut(cols) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    ScoreMatrix::new(rows, cols, p).unwrap()
}

fn ensemble_identities() -> Outcome {
    let mut r = rng(3);
    let mut ok = true;
    let mut worst_fixed = 0.0f64;
    for _ in 0..20 {
        let x = random_scores(&mut r, 4, 6);
        let y = random_scores(&mut r, 4, 6);
        let seen: Vec<bool> = (0..6).map(|j| j % 2 == 0).collect();
        for method in [EnsembleMethod::Geometric, EnsembleMethod::Arithmetic] {
            let p = |a: f64, b: f64| EnsembleParams::new(a, b, method).unwrap();
            ok &= ensemble(&x, &y, &seen, &p(0.0, 0.0)).unwrap() == x;
            ok &= ensemble(&x, &y, &seen, &p(1.0, 1.0)).unwrap() == y;
            for ai in 0..5 {
                for bi in 0..5 {
                    let fixed = ensemble(&x, &x, &seen, &p(ai as f64 / 4.0, bi as f64 / 4.0)).unwrap();
                    for (u, v) in fixed.probs.iter().zip(&x.probs) {
                        worst_fixed = worst_fixed.max((u - v).abs());
                    }
                }
            }
        }
    }
    // one seen class with in-vocabulary 0.8 and out-of-vocabulary 0.2 at alpha 0.4
    let inp = ScoreMatrix::new(1, 2, vec![0.8, 0.2]).unwrap();
    let out = ScoreMatrix::new(1, 2, vec![0.2, 0.8]).unwrap();
    let g = ensemble(&inp, &out, &[true, false], &EnsembleParams::new(0.4, 0.8, EnsembleMethod::Geometric).unwrap())
        .unwrap();
    let want = 0.8f64.powf(0.6) * 0.2f64.powf(0.4);
    let scalar_err = (g.get(0, 0) - want).abs();
    (
        ok && worst_fixed < ENSEMBLE_FIXED_TOL && scalar_err < SCALAR_TOL,
        format!("endpoints exact: {ok}, fixed-point max err {worst_fixed:e} on 5x5 grid, scalar err {scalar_err:e}"),
    )
}

fn gradient_checks() -> Outcome {
    let rep = common::gradient_check(0, 2);
    let unmatched = common::gradient_check(1, 0);
    let nonzero = rep.probes.iter().filter(|p| p.2.abs() > 1e-8).count();
    let queries = rep.probes.iter().any(|p| p.0 == "mask_decoder.query_feat");
    let pass = rep.max_rel_err < GRAD_REL_TOL
        && queries
        && nonzero * 2 > rep.probes.len()
        && unmatched.unmatched_rows > 0
        && unmatched.unmatched_autodiff_zero
        && unmatched.unmatched_fd_zero
        && unmatched.matched_nonzero;
    (
        pass,
        format!(
            "{} probes ({nonzero} nonzero), max rel err {:.2e}; {} unmatched rows, zero by autodiff {} and by perturbation {}",
            rep.probes.len(),
            rep.max_rel_err,
            unmatched.unmatched_rows,
            unmatched.unmatched_autodiff_zero,
            unmatched.unmatched_fd_zero
        ),
    )
}

fn frozen_invariance() -> Outcome {
    let (model, frozen) = common::train_tiny("frozen/frozen/frozen", FROZEN_STEPS, 0, None);
    let (_, trainable) = common::train_tiny("trainable/trainable/trainable", FROZEN_STEPS, 0, None);
    let same = frozen.initial_backbone_checksum == frozen.final_backbone_checksum
        && model.backbone_checksum().unwrap() == frozen.initial_backbone_checksum;
    let moved = trainable.initial_backbone_checksum != trainable.final_backbone_checksum;
    (
        same && moved && frozen.steps.len() == FROZEN_STEPS,
        format!(
            "{FROZEN_STEPS} steps: frozen {:016x} -> {:016x}, trainable {:016x} -> {:016x}",
            frozen.initial_backbone_checksum,
            frozen.final_backbone_checksum,
            trainable.initial_backbone_checksum,
            trainable.final_backbone_checksum
        ),
    )
}

fn hand_pq_case() -> bool {
    let seg = |c| Segment { category_id: c, is_thing: true, score: 1.0 };
    let mut gt = PanopticMap::void(1, 8);
    gt.segment_ids = vec![1, 1, 1, 1, 1, 2, 2, 0];
    gt.segments = BTreeMap::from([(1, seg(0)), (2, seg(0))]);
    let mut pred = PanopticMap::void(1, 8);
    pred.segment_ids = vec![7, 7, 7, 0, 0, 0, 0, 0];
    pred.segments = BTreeMap::from([(7, seg(0))]);
    let (pq, sq, rq) = panoptic_quality(&pred, &gt, &[true]).unwrap().per_class[0].quality();
    (pq - 0.4).abs() < METRIC_TOL && (sq - 0.6).abs() < METRIC_TOL && (rq - 2.0 / 3.0).abs() < METRIC_TOL
}

fn metric_oracles() -> Outcome {
    let mut r = rng(6);
    let classes = 3;
    let (mut pq_ok, mut product_err) = (true, 0.0f64);
    for _ in 0..METRIC_CASES {
        let gt = common::random_panoptic(&mut r, 6, 6, 4, classes);
        let pred = if r.random_bool(0.7) {
            common::perturb_panoptic(&mut r, &gt, classes)
        } else {
            common::random_panoptic(&mut r, 6, 6, 4, classes)
        };
        let rep = panoptic_quality(&pred, &gt, &vec![true; classes]).unwrap();
        for (c, (tp, fp, fn_, iou)) in common::pq_oracle(&pred, &gt, classes).into_iter().enumerate() {
            let got = rep.per_class[c];
            pq_ok &= (got.tp, got.fp, got.fn_) == (tp, fp, fn_) && (got.iou_sum - iou).abs() < METRIC_TOL;
            let (pq, sq, rq) = got.quality();
            product_err = product_err.max((pq - sq * rq).abs());
        }
    }
    let mut miou_err = 0.0f64;
    let mut ap_err = 0.0f64;
    for _ in 0..METRIC_CASES {
        let gt: Vec<usize> = (0..40).map(|_| if r.random_bool(0.1) { IGNORE } else { r.random_range(0..4) }).collect();
        let pred: Vec<usize> = (0..40).map(|_| r.random_range(0..4)).collect();
        miou_err = miou_err.max((mean_iou(&pred, &gt, 4).unwrap().miou - common::miou_oracle(&pred, &gt, 4, IGNORE).1).abs());
        let (preds, gts) = common::random_ap_case(&mut r, 2, 12, 2);
        ap_err = ap_err.max((instance_ap(&preds, &gts, 2).unwrap().ap - common::ap_oracle(&preds, &gts, 2)).abs());
    }
    let hand = hand_pq_case();
    (
        pq_ok && hand && product_err < PQ_PRODUCT_TOL && miou_err < METRIC_TOL && ap_err < METRIC_TOL,
        format!(
            "PQ counts match exhaustive matcher: {pq_ok}; hand case: {hand}; max |PQ-SQ*RQ| {product_err:e}; \
             mIoU err {miou_err:e}; AP err {ap_err:e}"
        ),
    )
}

fn merge_well_formed() -> Outcome {
    let mut r = rng(7);
    let vocab = common::small_vocab();
    let mut bad = Vec::new();
    for i in 0..MERGE_CASES {
        let n = r.random_range(0..8);
        let (probs, scores) = common::random_proposals(&mut r, n, 9, 7, vocab.len());
        let th = MergeThresholds { object: r.random_range(0.0..0.6), overlap: r.random_range(0.0..1.0) };
        let map = merge(&probs, &scores, &vocab, &th).unwrap();
        if let Err(e) = map.validate().map_err(|e| e.to_string()).and_then(|_| common::panoptic_well_formed(&map, &vocab)) {
            bad.push(format!("case {i}: {e}"));
        }
    }
    (bad.is_empty(), format!("{MERGE_CASES} proposal sets, {} malformed {:?}", bad.len(), bad.first()))
}

/// Results of one desk-scale training run.
struct Run {
    seconds: f64,
    default: EvalReport,
    grounding: EvalReport,
    sweep: Vec<SweepRecord>,
    seen_split_pq: f64,
}

fn desk_run(preset: &str, seed: u64) -> Run {
    let mut cfg = RunConfig::default();
    cfg.model.preset = preset.parse().unwrap();
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.eval.test_size = TEST_SIZE;
    cfg.validate().unwrap();
    let train_set = train_dataset(&cfg).unwrap();
    let vs = training_vocab(&cfg, &train_set).unwrap();
    let mut model = SegModel::new(cfg.model.clone(), DType::F32, &Device::Cpu).unwrap();
    let set = TrainSet::new(&model, &train_set, &vs.class_of).unwrap();
    let t0 = Instant::now();
    let rep = train(&mut model, &set, &vs.train, &cfg.train, None).unwrap();
    let seconds = t0.elapsed().as_secs_f64();
    let resize = TestResize { short: cfg.eval.test_size, max_long: cfg.eval.max_size };
    let settings = cfg.eval.settings();

    let eval = eval_dataset(&cfg).unwrap();
    let raws = predict_dataset(&model, &eval, &vs.full, resize, cfg.eval.batch_size).unwrap();
    let default = evaluate_raw(&raws, &eval, &vs.full, &settings, false).unwrap();
    let grounding = evaluate_raw(&raws, &eval, &vs.full, &settings, true).unwrap();
    let sweep = sweep(&raws, &eval, &vs.full, settings.thresholds, &SWEEP_GRID).unwrap();

    let mut seen_cfg = cfg.clone();
    seen_cfg.data.eval_split = Split::SeenEval;
    let seen = eval_dataset(&seen_cfg).unwrap();
    let seen_raws = predict_dataset(&model, &seen, &vs.full, resize, cfg.eval.batch_size).unwrap();
    let seen_split_pq = evaluate_raw(&seen_raws, &seen, &vs.full, &settings, false).unwrap().pq;
    eprintln!(
        "{preset} seed {seed}: {} steps in {seconds:.0}s, final loss {:.3}; PQ {:.3} seen {:.3} unseen {:.3}; \
         mIoU open {:.3} grounding {:.3}; seen split PQ {seen_split_pq:.3}",
        rep.steps.len(),
        rep.steps.last().map_or(f64::NAN, |s| s.loss.total),
        default.pq,
        default.pq_seen.unwrap_or(f64::NAN),
        default.pq_unseen.unwrap_or(f64::NAN),
        default.miou,
        grounding.miou,
    );
    Run { seconds, default, grounding, sweep, seen_split_pq }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn sanity(frozen: &[Run]) -> Outcome {
    let r = &frozen[0];
    (
        r.seen_split_pq >= SANITY_PQ && r.seconds < SANITY_BUDGET_SECS,
        format!("seed 0 seen-colour PQ {:.3} (need >= {SANITY_PQ}), trained in {:.0}s", r.seen_split_pq, r.seconds),
    )
}

fn freeze_direction(frozen: &[Run], trainable: &[Run]) -> Outcome {
    let unseen = |rs: &[Run]| mean(rs.iter().map(|r| r.default.pq_unseen.unwrap_or(0.0)));
    let seen = |rs: &[Run]| mean(rs.iter().map(|r| r.default.pq_seen.unwrap_or(0.0)));
    let (fu, tu, fs, ts) = (unseen(frozen), unseen(trainable), seen(frozen), seen(trainable));
    let gap = (fs - ts).abs() / fs.max(ts).max(f64::MIN_POSITIVE);
    (
        fu > tu && gap <= SEEN_REL_GAP,
        format!("PQ unseen frozen {fu:.3} vs trainable {tu:.3}; PQ seen {fs:.3} vs {ts:.3} (rel gap {gap:.3})"),
    )
}

fn ensemble_direction(frozen: &[Run]) -> Outcome {
    let n = frozen[0].sweep.len();
    let avg: Vec<(f64, f64, EnsembleMethod, f64)> = (0..n)
        .map(|i| {
            let r = &frozen[0].sweep[i];
            (r.alpha, r.beta, r.method, mean(frozen.iter().map(|f| f.sweep[i].pq)))
        })
        .collect();
    let best = avg.iter().copied().max_by(|a, b| a.3.total_cmp(&b.3)).unwrap();
    let best_of = |m: EnsembleMethod, interior: bool| {
        avg.iter()
            .filter(|c| c.2 == m && (!interior || (c.0 > 0.0 && c.0 < 1.0)))
            .map(|c| c.3)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (geo, arith) = (best_of(EnsembleMethod::Geometric, false), best_of(EnsembleMethod::Arithmetic, false));
    let (geo_in, arith_in) = (best_of(EnsembleMethod::Geometric, true), best_of(EnsembleMethod::Arithmetic, true));
    (
        best.0 <= 0.5 && best.1 >= 0.5 && geo >= arith,
        format!(
            "best PQ {:.3} at ({}, {}, {}); best geometric {geo:.3} vs arithmetic {arith:.3} \
             (mixed cells only: {geo_in:.3} vs {arith_in:.3})",
            best.3, best.0, best.1, best.2
        ),
    )
}

fn grounding_never_lower(runs: &[(&str, u64, &Run)]) -> Outcome {
    let worst = runs
        .iter()
        .map(|(p, s, r)| (r.grounding.miou - r.default.miou, *p, *s))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    (
        worst.0 >= 0.0,
        format!("{} paired runs, smallest grounding - open mIoU {:+.3} ({} seed {})", runs.len(), worst.0, worst.1, worst.2),
    )
}

fn main() -> ExitCode {
    let mut failures = 0;
    report(1, "hungarian matches brute force", hungarian_oracle(), &mut failures);
    report(2, "mask pooling matches brute force", pooling_oracle(), &mut failures);
    report(3, "ensemble identities", ensemble_identities(), &mut failures);
    report(4, "gradient checks", gradient_checks(), &mut failures);
    report(5, "frozen backbone invariance", frozen_invariance(), &mut failures);
    report(6, "metric oracles", metric_oracles(), &mut failures);
    report(7, "merge output well formed", merge_well_formed(), &mut failures);

    let frozen: Vec<Run> = SEEDS.iter().map(|&s| desk_run("frozen/frozen/frozen", s)).collect();
    report(8, "desk-scale sanity", sanity(&frozen), &mut failures);
    let trainable: Vec<Run> = SEEDS.iter().map(|&s| desk_run("trainable/trainable/trainable", s)).collect();
    report(9, "frozen beats trainable on unseen colours", freeze_direction(&frozen, &trainable), &mut failures);
    report(10, "ensemble sweep direction", ensemble_direction(&frozen), &mut failures);
    let paired: Vec<(&str, u64, &Run)> = SEEDS
        .iter()
        .zip(&frozen)
        .map(|(&s, r)| ("frozen", s, r))
        .chain(SEEDS.iter().zip(&trainable).map(|(&s, r)| ("trainable", s, r)))
        .collect();
    report(11, "grounding does not lower mIoU", grounding_never_lower(&paired), &mut failures);

    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
