//! Synthetic colour-world scenes and COCO-panoptic style storage.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::lookup;
use crate::error::{Error, Result};
use crate::inference::{PanopticMap, Segment};
use crate::raster::Image;
use crate::util::fnv1a;
use crate::vocab::{split_synonyms, Category};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Disk { cx: f32, cy: f32, r: f32 },
    Rectangle { x0: f32, y0: f32, x1: f32, y1: f32 },
    Triangle { pts: [[f32; 2]; 3] },
}

impl Shape {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rectangle { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Triangle { pts } => {
                let edge = |a: [f32; 2], b: [f32; 2]| (b[0] - a[0]) * (y - a[1]) - (b[1] - a[1]) * (x - a[0]);
                let d0 = edge(pts[0], pts[1]);
                let d1 = edge(pts[1], pts[2]);
                let d2 = edge(pts[2], pts[0]);
                let neg = d0 < 0.0 || d1 < 0.0 || d2 < 0.0;
                let pos = d0 > 0.0 || d1 > 0.0 || d2 > 0.0;
                !(neg && pos)
            }
        }
    }

    /// Pixel `(x, y)` is covered when its centre is inside the shape.
    pub fn covers_pixel(&self, x: usize, y: usize) -> bool {
        self.contains(x as f32 + 0.5, y as f32 + 0.5)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: Shape,
    pub color: String,
}

/// Shapes are painted in list order, so later shapes occlude earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: String,
    pub shapes: Vec<PlacedShape>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image_id: usize,
    pub file_name: String,
    pub image: Image,
    /// Category ids index the owning dataset's category list.
    pub gt: PanopticMap,
}

impl Sample {
    /// Sorted distinct categories present in the ground truth.
    pub fn category_ids(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.gt.segments.values().map(|s| s.category_id).collect();
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Shapes use training colours only.
    Train,
    /// Fresh scenes with training colours only.
    SeenEval,
    /// Shapes use training and held-out colours.
    Eval,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::SeenEval => "seen_eval",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "seen_eval" => Ok(Split::SeenEval),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_radius: f32,
    pub max_radius: f32,
    /// Minimum visible pixels per segment; scenes violating it are redrawn.
    pub min_area: usize,
    /// Uniform per-channel noise amplitude in [0, 1] units.
    pub noise: f32,
    pub train_colors: Vec<String>,
    pub held_out_colors: Vec<String>,
    pub stuff_colors: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_shapes: 1,
            max_shapes: 4,
            min_radius: 7.0,
            max_radius: 15.0,
            min_area: 64,
            noise: 0.03,
            train_colors: strings(&["red", "green", "blue", "yellow", "magenta", "orange"]),
            held_out_colors: strings(&["cyan", "purple", "lime"]),
            stuff_colors: strings(&["gray", "black"]),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(32) {
            return Err(Error::config("data.generator.size", "must be a positive multiple of 32"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::config("data.generator.min_shapes", "need 1 <= min_shapes <= max_shapes"));
        }
        let things = self.train_colors.len() + self.held_out_colors.len();
        if self.max_shapes > self.train_colors.len() {
            return Err(Error::config("data.generator.max_shapes", "cannot exceed the number of training colours"));
        }
        if !(self.min_radius > 0.0 && self.min_radius <= self.max_radius) {
            return Err(Error::config("data.generator.min_radius", "need 0 < min_radius <= max_radius"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("data.generator.noise", "must lie in [0, 1]"));
        }
        if self.train_colors.is_empty() {
            return Err(Error::config("data.generator.train_colors", "must not be empty"));
        }
        if self.stuff_colors.is_empty() {
            return Err(Error::config("data.generator.stuff_colors", "must not be empty"));
        }
        let mut seen = BTreeSet::new();
        for (field, list) in [
            ("data.generator.train_colors", &self.train_colors),
            ("data.generator.held_out_colors", &self.held_out_colors),
            ("data.generator.stuff_colors", &self.stuff_colors),
        ] {
            for c in list {
                if lookup(c).is_none() {
                    return Err(Error::config(field, format!("unknown colour {c:?}")));
                }
                if !seen.insert(c.as_str()) {
                    return Err(Error::config(field, format!("colour {c:?} appears in more than one set")));
                }
            }
        }
        debug_assert!(things > 0);
        Ok(())
    }

    /// Training thing colours, then held-out thing colours, then stuff colours.
    pub fn categories(&self) -> Vec<Category> {
        let things = self.train_colors.iter().chain(&self.held_out_colors).map(|c| (c, true));
        let stuff = self.stuff_colors.iter().map(|c| (c, false));
        things
            .chain(stuff)
            .enumerate()
            .map(|(id, (c, is_thing))| Category::new(id, &[c.as_str()], is_thing))
            .collect()
    }

    /// Category ids that appear in the training split.
    pub fn train_category_ids(&self) -> Vec<usize> {
        let n_train = self.train_colors.len();
        let first_stuff = n_train + self.held_out_colors.len();
        (0..n_train).chain(first_stuff..first_stuff + self.stuff_colors.len()).collect()
    }
}

fn sample_shape(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Shape {
    let s = cfg.size as f32;
    let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let cx = rng.random_range(r * 0.5..s - r * 0.5);
    let cy = rng.random_range(r * 0.5..s - r * 0.5);
    match rng.random_range(0..3) {
        0 => Shape::Disk { cx, cy, r },
        1 => {
            let hw = r * rng.random_range(0.7f32..1.2);
            let hh = r * rng.random_range(0.7f32..1.2);
            Shape::Rectangle {
                x0: cx - hw,
                y0: cy - hh,
                x1: cx + hw,
                y1: cy + hh,
            }
        }
        _ => {
            let rot = rng.random_range(0.0..std::f32::consts::TAU);
            let r = r * 1.3;
            let pts = [0.0f32, 1.0, 2.0].map(|k| {
                let a = rot + k * std::f32::consts::TAU / 3.0;
                [cx + r * a.cos(), cy + r * a.sin()]
            });
            Shape::Triangle { pts }
        }
    }
}

fn sample_scene(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig, thing_colors: &[String]) -> SceneSpec {
    let n = rng.random_range(cfg.min_shapes..=cfg.max_shapes).min(thing_colors.len());
    let mut pool: Vec<&String> = thing_colors.iter().collect();
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let color = pool.swap_remove(rng.random_range(0..pool.len())).clone();
        shapes.push(PlacedShape {
            shape: sample_shape(rng, cfg),
            color,
        });
    }
    SceneSpec {
        width: cfg.size,
        height: cfg.size,
        background: cfg.stuff_colors[rng.random_range(0..cfg.stuff_colors.len())].clone(),
        shapes,
    }
}

/// Per-pixel owner of a scene: 0 for the background, `k + 1` for shape `k`.
pub fn rasterize_owners(scene: &SceneSpec) -> Vec<usize> {
    let mut owner = vec![0usize; scene.width * scene.height];
    for (k, s) in scene.shapes.iter().enumerate() {
        for y in 0..scene.height {
            for x in 0..scene.width {
                if s.shape.covers_pixel(x, y) {
                    owner[y * scene.width + x] = k + 1;
                }
            }
        }
    }
    owner
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders the scene and its panoptic ground truth. Returns `None` when some segment
/// would be smaller than `min_area`. `category_of` maps colour words to category ids.
pub fn render_scene(
    scene: &SceneSpec,
    category_of: &dyn Fn(&str) -> Option<usize>,
    min_area: usize,
    noise: f32,
    rng: &mut ChaCha8Rng,
) -> Result<Option<(Image, PanopticMap)>> {
    let owner = rasterize_owners(scene);
    let mut areas = vec![0usize; scene.shapes.len() + 1];
    for &o in &owner {
        areas[o] += 1;
    }
    if areas.iter().any(|&a| a < min_area.max(1)) {
        return Ok(None);
    }
    let color_of = |name: &str| lookup(name).ok_or_else(|| Error::InvalidArgument(format!("unknown colour {name:?}")));
    let mut rgbs = vec![color_of(&scene.background)?.rgb];
    let mut segments = BTreeMap::new();
    let cat = |name: &str| category_of(name).ok_or_else(|| Error::InvalidArgument(format!("colour {name:?} has no category")));
    segments.insert(
        1,
        Segment {
            category_id: cat(&scene.background)?,
            is_thing: false,
            score: 1.0,
        },
    );
    for (k, s) in scene.shapes.iter().enumerate() {
        rgbs.push(color_of(&s.color)?.rgb);
        segments.insert(
            k as u32 + 2,
            Segment {
                category_id: cat(&s.color)?,
                is_thing: true,
                score: 1.0,
            },
        );
    }
    let mut image = Image::new(scene.width, scene.height);
    for (p, &o) in owner.iter().enumerate() {
        let rgb = rgbs[o];
        let px = [0, 1, 2].map(|c| {
            let n = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            to_u8(rgb[c] + n)
        });
        image.set_pixel(p % scene.width, p / scene.width, px);
    }
    let gt = PanopticMap {
        height: scene.height,
        width: scene.width,
        segment_ids: owner.iter().map(|&o| o as u32 + 1).collect(),
        segments,
    };
    Ok(Some((image, gt)))
}

const MAX_REDRAWS: usize = 1000;

/// Deterministic scene for one index of a split. Each image draws from its own RNG
/// stream, so generation order does not matter.
pub fn generate_scene(cfg: &GeneratorConfig, split: Split, seed: u64, index: usize) -> Result<(SceneSpec, Sample)> {
    let thing_colors: Vec<String> = match split {
        Split::Train | Split::SeenEval => cfg.train_colors.clone(),
        Split::Eval => cfg.train_colors.iter().chain(&cfg.held_out_colors).cloned().collect(),
    };
    let categories = cfg.categories();
    let category_of = |name: &str| categories.iter().position(|c| c.names[0] == name);
    let stream = fnv1a(format!("{seed}/{}/{index}", split.tag()).as_bytes());
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    for _ in 0..MAX_REDRAWS {
        let scene = sample_scene(&mut rng, cfg, &thing_colors);
        if let Some((image, gt)) = render_scene(&scene, &category_of, cfg.min_area, cfg.noise, &mut rng)? {
            let sample = Sample {
                image_id: index,
                file_name: format!("{}_{index:06}", split.tag()),
                image,
                gt,
            };
            return Ok((scene, sample));
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not place shapes with min_area {} on a {}px canvas",
        cfg.min_area, cfg.size
    )))
}

/// `count` scenes of one split.
pub fn generate(cfg: &GeneratorConfig, split: Split, seed: u64, count: usize) -> Result<Dataset> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    let samples = (0..count)
        .map(|i| generate_scene(cfg, split, seed, i).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        categories: cfg.categories(),
        samples,
    })
}

/// Segment id encoded as `R + 256·G + 256²·B`.
pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

pub fn id_to_rgb(id: u32) -> [u8; 3] {
    [(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, ((id >> 16) & 0xff) as u8]
}

pub fn encode_id_map(map: &PanopticMap) -> Image {
    let mut img = Image::new(map.width, map.height);
    for (p, &s) in map.segment_ids.iter().enumerate() {
        img.set_pixel(p % map.width, p / map.width, id_to_rgb(s));
    }
    img
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ImageRecord {
    id: usize,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: u32,
    pub category_id: usize,
    pub area: usize,
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: usize,
    file_name: String,
    segments_info: Vec<SegmentRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    name: String,
    isthing: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PanopticFile {
    #[serde(default)]
    images: Vec<ImageRecord>,
    annotations: Vec<AnnotationRecord>,
    categories: Vec<CategoryRecord>,
}

/// Segment table of a map in annotation-file form.
pub fn segment_records(map: &PanopticMap, with_scores: bool) -> Vec<SegmentRecord> {
    let areas = map.areas();
    map.segments
        .iter()
        .map(|(&id, s)| SegmentRecord {
            id,
            category_id: s.category_id,
            area: areas.get(&id).copied().unwrap_or(0),
            iscrowd: 0,
            score: with_scores.then_some(s.score),
        })
        .collect()
}

/// Writes `images/<name>.png`, `panoptic/<name>.png` and `annotations.json` under `dir`.
pub fn save_coco_panoptic(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("panoptic"))?;
    let mut file = PanopticFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: dataset
            .categories
            .iter()
            .map(|c| CategoryRecord {
                id: c.id,
                name: c.names.join(", "),
                isthing: c.is_thing as u8,
            })
            .collect(),
    };
    for s in &dataset.samples {
        let png = format!("{}.png", s.file_name);
        s.image.save(&dir.join("images").join(&png))?;
        encode_id_map(&s.gt).save(&dir.join("panoptic").join(&png))?;
        file.images.push(ImageRecord {
            id: s.image_id,
            file_name: png.clone(),
            width: s.image.width,
            height: s.image.height,
        });
        file.annotations.push(AnnotationRecord {
            image_id: s.image_id,
            file_name: png,
            segments_info: segment_records(&s.gt, false),
        });
    }
    std::fs::write(dir.join("annotations.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Reads a dataset written by [`save_coco_panoptic`] or any file of the same layout.
/// Category ids are remapped to contiguous indices in ascending id order. Table
/// entries whose id never occurs in the pixels are dropped with a warning; pixels whose
/// id is missing from the table become void.
pub fn load_coco_panoptic(images_dir: &Path, panoptic_dir: &Path, annotations: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(annotations)?;
    let file: PanopticFile = serde_json::from_str(&text)?;
    let mut cats = file.categories;
    cats.sort_by_key(|c| c.id);
    let index_of: BTreeMap<usize, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
    let categories: Vec<Category> = cats
        .iter()
        .enumerate()
        .map(|(i, c)| Category {
            id: i,
            names: split_synonyms(&c.name),
            is_thing: c.isthing != 0,
        })
        .collect();

    let mut samples = Vec::with_capacity(file.annotations.len());
    for ann in file.annotations {
        let stem = Path::new(&ann.file_name)
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad file name {:?}", ann.file_name)))?
            .to_string();
        let image_path = images_dir.join(format!("{stem}.png"));
        if !image_path.exists() {
            return Err(Error::InvalidArgument(format!("missing image file {}", image_path.display())));
        }
        let image = Image::load(&image_path)?;
        let ids_img = Image::load(&panoptic_dir.join(&ann.file_name))?;
        if (ids_img.width, ids_img.height) != (image.width, image.height) {
            return Err(Error::Shape(format!("id map of {stem} does not match its image size")));
        }
        let mut segment_ids: Vec<u32> = (0..ids_img.height)
            .flat_map(|y| (0..ids_img.width).map(move |x| (x, y)))
            .map(|(x, y)| rgb_to_id(ids_img.pixel(x, y)))
            .collect();
        let present: BTreeSet<u32> = segment_ids.iter().copied().collect();
        let mut segments = BTreeMap::new();
        for rec in ann.segments_info {
            if rec.id == 0 || !present.contains(&rec.id) {
                log::warn!("{stem}: segment {} has no pixels; dropped", rec.id);
                continue;
            }
            let Some(&category_id) = index_of.get(&rec.category_id) else {
                log::warn!("{stem}: segment {} has unknown category {}; dropped", rec.id, rec.category_id);
                continue;
            };
            segments.insert(
                rec.id,
                Segment {
                    category_id,
                    is_thing: categories[category_id].is_thing,
                    score: rec.score.unwrap_or(1.0),
                },
            );
        }
        for s in segment_ids.iter_mut() {
            if *s != 0 && !segments.contains_key(s) {
                *s = 0;
            }
        }
        if present.iter().any(|id| *id != 0 && !segments.contains_key(id)) {
            log::warn!("{stem}: pixels with ids missing from the table were set to void");
        }
        samples.push(Sample {
            image_id: ann.image_id,
            file_name: stem,
            gt: PanopticMap {
                height: image.height,
                width: image.width,
                segment_ids,
                segments,
            },
            image,
        });
    }
    Ok(Dataset { categories, samples })
}

/// Loads `<dir>/images`, `<dir>/panoptic` and `<dir>/annotations.json`.
pub fn load_coco_panoptic_dir(dir: &Path) -> Result<Dataset> {
    load_coco_panoptic(&dir.join("images"), &dir.join("panoptic"), &dir.join("annotations.json"))
}
