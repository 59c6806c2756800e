//! Brute-force oracles and random instance generators shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use ovseg::classifiers::{FeatureMap, ScoreMatrix};
use ovseg::inference::{Instance, MaskProbs, PanopticMap, Segment};
use ovseg::matching::CostMatrix;
use ovseg::vocab::{build_vocabulary, Category, ToyTextEncoder, Vocabulary};
use rand::Rng;

/// Minimum total cost over every injective assignment of size `min(rows, cols)`.
pub fn brute_force_min_cost(cost: &CostMatrix) -> f64 {
    fn rec(cost: &CostMatrix, row: usize, used: &mut [bool], left: usize) -> f64 {
        if left == 0 {
            return 0.0;
        }
        if cost.rows - row < left {
            return f64::INFINITY;
        }
        let mut best = rec(cost, row + 1, used, left);
        for c in 0..cost.cols {
            if !used[c] {
                used[c] = true;
                best = best.min(cost.get(row, c) + rec(cost, row + 1, used, left - 1));
                used[c] = false;
            }
        }
        best
    }
    rec(cost, 0, &mut vec![false; cost.cols], cost.rows.min(cost.cols))
}

pub fn random_cost(rng: &mut impl Rng, max_side: usize, integer: bool) -> CostMatrix {
    let rows = rng.random_range(1..=max_side);
    let cols = rng.random_range(1..=max_side);
    let data = (0..rows * cols)
        .map(|_| if integer { rng.random_range(0..20) as f64 } else { rng.random_range(-5.0..5.0) })
        .collect();
    CostMatrix::new(rows, cols, data).unwrap()
}

/// Per-pixel weighted average of `features` under logits given at feature resolution:
/// pixels with `sigmoid(l) >= 0.5` weigh 1, others 0.
pub fn brute_mask_pool(features: &FeatureMap, logits: &[f32]) -> Vec<f64> {
    let mut out = vec![0.0; features.dim];
    let mut total = 0.0;
    for y in 0..features.height {
        for x in 0..features.width {
            let p = y * features.width + x;
            let prob = 1.0 / (1.0 + (-(logits[p] as f64)).exp());
            let w = if prob >= 0.5 { 1.0 } else { 0.0 };
            total += w;
            for c in 0..features.dim {
                out[c] += w * features.data[p * features.dim + c] as f64;
            }
        }
    }
    out.iter().map(|v| v / total).collect()
}

pub fn random_features(rng: &mut impl Rng, h: usize, w: usize, dim: usize) -> FeatureMap {
    FeatureMap {
        height: h,
        width: w,
        dim,
        data: (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    }
}

/// Random logits with at least one nonnegative entry.
pub fn random_mask_logits(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    let mut l: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let k = rng.random_range(0..n);
    l[k] = l[k].abs();
    l
}

/// Per-class `(tp, fp, fn, iou_sum)` by exhaustive search over one-to-one matchings of
/// same-class segments with IoU > 0.5, keeping the one with the most pairs.
pub fn pq_oracle(pred: &PanopticMap, gt: &PanopticMap, num_classes: usize) -> Vec<(usize, usize, usize, f64)> {
    let count = |f: &dyn Fn(usize) -> bool| (0..gt.segment_ids.len()).filter(|&p| f(p)).count();
    let mut out = vec![(0, 0, 0, 0.0); num_classes];
    for class in 0..num_classes {
        let gts: Vec<u32> = gt.segments.iter().filter(|(_, s)| s.category_id == class).map(|(&id, _)| id).collect();
        let preds: Vec<u32> = pred.segments.iter().filter(|(_, s)| s.category_id == class).map(|(&id, _)| id).collect();
        let iou = |g: u32, p: u32| -> f64 {
            let inter = count(&|i| gt.segment_ids[i] == g && pred.segment_ids[i] == p);
            let union = count(&|i| {
                let in_p = pred.segment_ids[i] == p && gt.segment_ids[i] != 0;
                in_p || gt.segment_ids[i] == g
            });
            inter as f64 / union as f64
        };
        let table: Vec<Vec<f64>> = gts.iter().map(|&g| preds.iter().map(|&p| iou(g, p)).collect()).collect();

        fn search(table: &[Vec<f64>], g: usize, used: &mut Vec<bool>, acc: (usize, f64), best: &mut (usize, f64, Vec<bool>)) {
            if g == table.len() {
                if acc.0 > best.0 {
                    *best = (acc.0, acc.1, used.clone());
                }
                return;
            }
            search(table, g + 1, used, acc, best);
            for p in 0..used.len() {
                if !used[p] && table[g][p] > 0.5 {
                    used[p] = true;
                    search(table, g + 1, used, (acc.0 + 1, acc.1 + table[g][p]), best);
                    used[p] = false;
                }
            }
        }
        let mut best = (0, 0.0, vec![false; preds.len()]);
        search(&table, 0, &mut vec![false; preds.len()], (0, 0.0), &mut best);
        let (tp, iou_sum, used) = best;
        let fp = preds
            .iter()
            .zip(&used)
            .filter(|(&p, &u)| {
                if u {
                    return false;
                }
                let area = count(&|i| pred.segment_ids[i] == p);
                let in_void = count(&|i| pred.segment_ids[i] == p && gt.segment_ids[i] == 0);
                !(area > 0 && in_void * 2 > area)
            })
            .count();
        out[class] = (tp, fp, gts.len() - tp, iou_sum);
    }
    out
}

/// Per-class IoU from direct pixel counts; `None` where the class is absent from both.
pub fn miou_oracle(pred: &[usize], gt: &[usize], num_classes: usize, ignore: usize) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let valid = |i: &usize| gt[*i] != ignore;
            let idx: Vec<usize> = (0..gt.len()).filter(valid).collect();
            let inter = idx.iter().filter(|&&i| gt[i] == c && pred[i] == c).count();
            let union = idx.iter().filter(|&&i| gt[i] == c || pred[i] == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per.iter().flatten().copied().collect();
    let m = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per, m)
}

fn bool_iou(a: &[bool], b: &[bool]) -> f64 {
    let i = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let u = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// Mask AP by definition: per class and IoU threshold, detections in descending score
/// order each claim the best still-free ground truth; precision at recall level r is the
/// best precision reached at any rank whose recall is at least r, averaged over 101 levels.
pub fn ap_oracle(preds: &[Vec<Instance>], gts: &[Vec<Instance>], num_classes: usize) -> f64 {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_threshold = vec![Vec::new(); thresholds.len()];
    for c in 0..num_classes {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.category_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (img, ps) in preds.iter().enumerate() {
            for (k, p) in ps.iter().enumerate() {
                if p.category_id == c {
                    dets.push((p.score, img, k));
                }
            }
        }
        // stable sort keeps (image, index) order among equal scores
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        for (t, &thr) in thresholds.iter().enumerate() {
            let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let mut points = Vec::new();
            let mut tp = 0usize;
            for (rank, &(_, img, k)) in dets.iter().enumerate() {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts[img].iter().enumerate() {
                    if g.category_id != c || taken[img][gi] {
                        continue;
                    }
                    let iou = bool_iou(&preds[img][k].mask, &g.mask);
                    if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, _)) = best {
                    taken[img][gi] = true;
                    tp += 1;
                }
                points.push((tp as f64 / num_gt as f64, tp as f64 / (rank + 1) as f64));
            }
            let mut sum = 0.0;
            for r in 0..=100 {
                let level = r as f64 / 100.0;
                sum += points
                    .iter()
                    .filter(|(rec, _)| *rec >= level - 1e-12)
                    .map(|(_, prec)| *prec)
                    .fold(0.0, f64::max);
            }
            per_threshold[t].push(sum / 101.0);
        }
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    per_threshold.iter().map(mean).sum::<f64>() / thresholds.len() as f64
}

/// Every pixel is void or carries a listed id, every listed id is painted somewhere,
/// id 0 is never listed and each stuff class owns at most one segment.
pub fn panoptic_well_formed(map: &PanopticMap, vocab: &Vocabulary) -> Result<(), String> {
    if map.segment_ids.len() != map.height * map.width {
        return Err("pixel count".into());
    }
    if map.segments.contains_key(&0) {
        return Err("void id listed".into());
    }
    for (i, &s) in map.segment_ids.iter().enumerate() {
        if s != 0 && !map.segments.contains_key(&s) {
            return Err(format!("pixel {i} has unlisted id {s}"));
        }
    }
    for (&id, seg) in &map.segments {
        if !map.segment_ids.contains(&id) {
            return Err(format!("segment {id} has no pixels"));
        }
        if seg.category_id >= vocab.len() {
            return Err(format!("segment {id} has category {}", seg.category_id));
        }
        if seg.is_thing != vocab.is_thing(seg.category_id) {
            return Err(format!("segment {id} thing flag disagrees with its category"));
        }
    }
    for c in 0..vocab.len() {
        let n = map.segments.values().filter(|s| s.category_id == c).count();
        if !vocab.is_thing(c) && n > 1 {
            return Err(format!("stuff class {c} has {n} segments"));
        }
    }
    Ok(())
}

/// Per-pixel `argmax_j Σ_i s_ij p_i` with ties to the lowest class.
pub fn semantic_oracle(probs: &MaskProbs, scores: &ScoreMatrix) -> Vec<usize> {
    let npx = probs.height * probs.width;
    (0..npx)
        .map(|p| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for j in 0..scores.cols {
                let v: f64 = (0..probs.n).map(|i| scores.get(i, j) * probs.data[i * npx + p] as f64).sum();
                if v > best.1 {
                    best = (j, v);
                }
            }
            best.0
        })
        .collect()
}

/// Three things and two stuff classes embedded by the toy encoder.
pub fn small_vocab() -> Vocabulary {
    let enc = ToyTextEncoder::new(ovseg::color::PROTOTYPE_DIM, 0).unwrap();
    let cats = vec![
        Category::new(0, &["red"], true),
        Category::new(1, &["green"], true),
        Category::new(2, &["blue"], true),
        Category::new(3, &["gray"], false),
        Category::new(4, &["black"], false),
    ];
    build_vocabulary(cats, &enc, &["{}".to_string()]).unwrap()
}

/// Random proposals in `[0, 1]` and random (unnormalized) class scores.
pub fn random_proposals(rng: &mut impl Rng, n: usize, h: usize, w: usize, classes: usize) -> (MaskProbs, ScoreMatrix) {
    let mut data = Vec::with_capacity(n * h * w);
    for _ in 0..n {
        // a random rectangle of high probability over low-probability noise
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
        for y in 0..h {
            for x in 0..w {
                let inside = (y0..=y1).contains(&y) && (x0..=x1).contains(&x);
                data.push(if inside { rng.random_range(0.4..1.0) } else { rng.random_range(0.0..0.6) });
            }
        }
    }
    let probs = MaskProbs { n, height: h, width: w, data };
    let scores = ScoreMatrix::new(n, classes, (0..n * classes).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    (probs, scores)
}

/// A random panoptic map on `h×w` whose segments are unions of random blocks.
pub fn random_panoptic(rng: &mut impl Rng, h: usize, w: usize, max_segments: usize, classes: usize) -> PanopticMap {
    let n = rng.random_range(0..=max_segments);
    let mut map = PanopticMap::void(h, w);
    let mut segments = BTreeMap::new();
    for k in 0..n {
        let id = k as u32 + 1;
        segments.insert(id, Segment { category_id: rng.random_range(0..classes), is_thing: true, score: 1.0 });
    }
    for p in map.segment_ids.iter_mut() {
        if n > 0 && rng.random_bool(0.85) {
            *p = rng.random_range(1..=n as u32);
        }
    }
    // smooth into blocky regions so that large overlaps occur
    let mut blocky = map.segment_ids.clone();
    for y in 0..h {
        for x in 0..w {
            blocky[y * w + x] = map.segment_ids[(y / 2 * 2) * w + x / 2 * 2];
        }
    }
    map.segment_ids = blocky;
    segments.retain(|id, _| map.segment_ids.contains(id));
    map.segments = segments;
    map
}

/// `pred` derived from `gt` by relabeling a few pixels, so that matches are frequent.
pub fn perturb_panoptic(rng: &mut impl Rng, gt: &PanopticMap, classes: usize) -> PanopticMap {
    let mut pred = gt.clone();
    let extra = gt.segments.keys().max().copied().unwrap_or(0) + 1;
    for p in pred.segment_ids.iter_mut() {
        if rng.random_bool(0.2) {
            *p = if rng.random_bool(0.5) { 0 } else { extra };
        }
    }
    pred.segments.insert(extra, Segment { category_id: rng.random_range(0..classes), is_thing: true, score: 1.0 });
    for s in pred.segments.values_mut() {
        if rng.random_bool(0.2) {
            s.category_id = rng.random_range(0..classes);
        }
    }
    let present: Vec<u32> = pred.segments.keys().copied().filter(|id| pred.segment_ids.contains(id)).collect();
    pred.segments.retain(|id, _| present.contains(id));
    pred
}

pub fn random_instances(rng: &mut impl Rng, npx: usize, max: usize, classes: usize, scored: bool) -> Vec<Instance> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| Instance {
            mask: (0..npx).map(|_| rng.random_bool(0.5)).collect(),
            category_id: rng.random_range(0..classes),
            score: if scored { (rng.random_range(0..8) as f64) / 8.0 } else { 1.0 },
        })
        .collect()
}

/// Ground truth for AP tests plus predictions that copy and corrupt some of it.
pub fn random_ap_case(rng: &mut impl Rng, images: usize, npx: usize, classes: usize) -> (Vec<Vec<Instance>>, Vec<Vec<Instance>>) {
    let gts: Vec<Vec<Instance>> = (0..images).map(|_| random_instances(rng, npx, 4, classes, false)).collect();
    let preds = gts
        .iter()
        .map(|g| {
            let mut out = Vec::new();
            for inst in g {
                if !rng.random_bool(0.7) {
                    continue;
                }
                out.push(Instance {
                    mask: inst.mask.iter().map(|&b| if rng.random_bool(0.15) { !b } else { b }).collect(),
                    category_id: inst.category_id,
                    score: (rng.random_range(0..8) as f64) / 8.0,
                });
            }
            out.extend(random_instances(rng, npx, 2, classes, true));
            out.truncate(4);
            out
        })
        .collect();
    (preds, gts)
}

/// Desk-scale generator settings scaled down to `size × size` canvases.
pub fn scaled_generator(size: usize) -> ovseg::data::GeneratorConfig {
    let mut g = ovseg::data::GeneratorConfig::default();
    let f = size as f32 / g.size as f32;
    g.min_radius *= f;
    g.max_radius *= f;
    g.min_area = ((g.min_area as f32) * f * f).round() as usize;
    g.size = size;
    g
}

/// A small decoder, enough to exercise every layer type.
pub fn tiny_model_config(preset: &str) -> ovseg::model::ModelConfig {
    let mut c = ovseg::model::ModelConfig::default();
    c.preset = preset.parse().unwrap();
    c.generator.num_queries = 6;
    c.generator.hidden_dim = 16;
    c.generator.heads = 2;
    c.generator.ffn_dim = 32;
    c.generator.pixel_decoder_layers = 1;
    c.generator.mask_decoder_layers = 2;
    c.backbone.generic_widths = [4, 4, 8, 8];
    c
}

#[derive(Debug)]
pub struct GradientReport {
    /// `(parameter, flat index, analytic, numeric)` for every probed entry.
    pub probes: Vec<(String, usize, f64, f64)>,
    pub max_rel_err: f64,
    /// Every unmatched proposal row of every level has an exactly zero gradient.
    pub unmatched_autodiff_zero: bool,
    /// Perturbing an unmatched row leaves the loss bitwise unchanged.
    pub unmatched_fd_zero: bool,
    /// Some matched row has a nonzero gradient, so the zero check is not vacuous.
    pub matched_nonzero: bool,
    pub unmatched_rows: usize,
}

pub const GRAD_EPS: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite differences of the total loss, with matches fixed at the base point,
/// against autodiff on a 32×32 synthetic image, in f64.
pub fn gradient_check(seed: u64, probes_per_param: usize) -> GradientReport {
    use candle_core::{DType, Device, Tensor, Var};
    use ovseg::backbone::STRIDES;
    use ovseg::data::{generate, Split};
    use ovseg::matching::{LossWeights, Targets};
    use ovseg::model::SegModel;
    use ovseg::pipeline::vocab_setup;
    use ovseg::raster::Image;
    use ovseg::training::{compute_loss, match_batch};
    use ovseg::vocab::default_templates;

    let dev = Device::Cpu;
    let mut cfg = tiny_model_config("frozen/frozen/frozen");
    cfg.seed = seed;
    let model = SegModel::new(cfg, DType::F64, &dev).unwrap();
    let gen = scaled_generator(32);
    let data = generate(&gen, Split::Train, seed, 1).unwrap();
    let enc = ToyTextEncoder::new(model.config.text_dim, 0).unwrap();
    let vs = vocab_setup(&gen.categories(), &gen.train_category_ids(), &enc, &default_templates()).unwrap();
    let targets = vec![Targets::from_panoptic(&data.samples[0].gt, STRIDES[0], &vs.class_of).unwrap()];
    let text = model.text_tensor(&vs.train).unwrap();
    let pyr = model.pyramid(&Image::batch_tensor(&[&data.samples[0].image], DType::F64, &dev).unwrap()).unwrap();
    let w = LossWeights::default();

    let base = model.forward(&pyr, Some(&text)).unwrap();
    let matches = match_batch(&base.proposals.layer_logits, &base.class_logits, &targets, &w).unwrap();
    let loss_at = || -> (Tensor, f64) {
        let out = model.forward(&pyr, Some(&text)).unwrap();
        let (t, parts) = compute_loss(&out.proposals.layer_logits, &out.class_logits, &targets, &matches, &w).unwrap();
        (t, parts.total)
    };

    let (loss, _) = loss_at();
    let grads = loss.backward().unwrap();
    let mut r = ChaCha8RngWrap::new(seed);
    let mut probes = Vec::new();
    let mut names: Vec<(String, Var)> = model
        .params
        .all_vars()
        .into_iter()
        .filter(|(n, _)| n.starts_with("mask_decoder."))
        .collect();
    names.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, var) in names {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let orig = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let shape = var.as_tensor().shape().clone();
        let count = if name.ends_with("query_feat") || name.ends_with("query_pos") { orig.len().min(24) } else { probes_per_param };
        for k in 0..count {
            let idx = if count >= orig.len() { k } else { r.below(orig.len()) };
            let eval = |delta: f64| {
                let mut v = orig.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, shape.clone(), &dev).unwrap()).unwrap();
                loss_at().1
            };
            let numeric = (eval(GRAD_EPS) - eval(-GRAD_EPS)) / (2.0 * GRAD_EPS);
            var.set(&Tensor::from_vec(orig.clone(), shape.clone(), &dev).unwrap()).unwrap();
            probes.push((name.clone(), idx, g[idx], numeric));
        }
    }
    let max_rel_err = probes.iter().map(|p| rel_err(p.2, p.3)).fold(0.0, f64::max);

    // Unmatched rows: take the outputs as leaves.
    let mask_leaves: Vec<Var> = base.proposals.layer_logits.iter().map(|t| Var::from_tensor(&t.detach()).unwrap()).collect();
    let cls_leaves: Vec<Var> = base.class_logits.iter().map(|t| Var::from_tensor(&t.detach()).unwrap()).collect();
    let leaf_loss = |m: &[Var], c: &[Var]| {
        let mt: Vec<Tensor> = m.iter().map(|v| v.as_tensor().clone()).collect();
        let ct: Vec<Tensor> = c.iter().map(|v| v.as_tensor().clone()).collect();
        compute_loss(&mt, &ct, &targets, &matches, &w).unwrap()
    };
    let (l, base_parts) = leaf_loss(&mask_leaves, &cls_leaves);
    let g = l.backward().unwrap();
    let (mut zero, mut fd_zero, mut nonzero, mut unmatched_rows) = (true, true, false, 0);
    for (level, m) in matches.iter().enumerate() {
        let gm = g.get(mask_leaves[level].as_tensor()).unwrap().get(0).unwrap().flatten_from(1).unwrap().to_vec2::<f64>().unwrap();
        let gc = g.get(cls_leaves[level].as_tensor()).unwrap().get(0).unwrap().to_vec2::<f64>().unwrap();
        for &row in &m[0].unmatched_proposals {
            unmatched_rows += 1;
            zero &= gm[row].iter().chain(&gc[row]).all(|&v| v == 0.0);
            // push the whole row far away and check the loss does not move
            let leaf = mask_leaves[level].as_tensor();
            let mut v = leaf.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let (_, n, h, wd) = leaf.dims4().unwrap();
            for p in 0..h * wd {
                v[row * h * wd + p] += 3.0;
            }
            let moved = Var::from_tensor(&Tensor::from_vec(v, (1, n, h, wd), &dev).unwrap()).unwrap();
            let mut ms = mask_leaves.clone();
            ms[level] = moved;
            let (_, parts) = leaf_loss(&ms, &cls_leaves);
            fd_zero &= parts.total == base_parts.total;
        }
        for &(row, _) in &m[0].pairs {
            nonzero |= gm[row].iter().any(|&v| v != 0.0);
        }
    }
    GradientReport {
        probes,
        max_rel_err,
        unmatched_autodiff_zero: zero,
        unmatched_fd_zero: fd_zero,
        matched_nonzero: nonzero,
        unmatched_rows,
    }
}

/// Minimal index sampler so the helper does not depend on a particular `Rng` import.
struct ChaCha8RngWrap(rand_chacha::ChaCha8Rng);

impl ChaCha8RngWrap {
    fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Self(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

/// Trains a tiny model on 32×32 synthetic images for `steps` optimizer steps.
pub fn train_tiny(preset: &str, steps: usize, seed: u64, out_dir: Option<&std::path::Path>) -> (ovseg::model::SegModel, ovseg::training::TrainReport) {
    use candle_core::{DType, Device};
    use ovseg::data::{generate, Split};
    use ovseg::model::SegModel;
    use ovseg::pipeline::vocab_setup;
    use ovseg::training::{train, TrainConfig, TrainSet};
    use ovseg::vocab::default_templates;

    let mut cfg = tiny_model_config(preset);
    cfg.seed = seed;
    let mut model = SegModel::new(cfg, DType::F32, &Device::Cpu).unwrap();
    let gen = scaled_generator(32);
    let data = generate(&gen, Split::Train, seed, 16).unwrap();
    let enc = ToyTextEncoder::new(model.config.text_dim, 0).unwrap();
    let vs = vocab_setup(&gen.categories(), &gen.train_category_ids(), &enc, &default_templates()).unwrap();
    let set = TrainSet::new(&model, &data, &vs.class_of).unwrap();
    let tc = TrainConfig {
        epochs: 1000,
        batch_size: 4,
        seed,
        max_steps: Some(steps),
        checkpoint_every: 1,
        ..TrainConfig::default()
    };
    let rep = train(&mut model, &set, &vs.train, &tc, out_dir).unwrap();
    (model, rep)
}
