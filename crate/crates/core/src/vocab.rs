//! Category vocabularies, prompt-templated text embeddings and the seen/unseen split.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::color;
use crate::error::{Error, Result};
use crate::util::fnv1a;

pub const PLACEHOLDER: &str = "{}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: usize,
    /// Synonyms; the first entry is the display name.
    pub names: Vec<String>,
    pub is_thing: bool,
}

impl Category {
    pub fn new(id: usize, names: &[&str], is_thing: bool) -> Self {
        Self {
            id,
            names: names.iter().map(|s| s.to_string()).collect(),
            is_thing,
        }
    }

    pub fn display_name(&self) -> &str {
        &self.names[0]
    }
}

/// Maps a piece of text to a fixed-length embedding. Must be deterministic.
pub trait TextEncoder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

/// Offline stand-in for a pretrained text tower.
///
/// Any text containing palette color words embeds to the normalized sum of those
/// colors' prototypes (see [`color::prototype`]) in the leading dimensions; the
/// remaining words act as stop words. Text without a color word gets a unit vector
/// drawn from a generator seeded by the hash of its normalized form.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < color::PROTOTYPE_DIM {
            return Err(Error::InvalidArgument(format!(
                "toy text encoder needs dim >= {}, got {dim}",
                color::PROTOTYPE_DIM
            )));
        }
        Ok(Self { dim, seed })
    }

    /// Palette index of a color word.
    pub fn color_index(name: &str) -> Option<usize> {
        color::palette_index(name)
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let norm = normalize_name(text);
        let mut v = vec![0.0f32; self.dim];
        let mut hit = false;
        for word in norm.split(' ') {
            if let Some(k) = Self::color_index(word) {
                for (x, p) in v.iter_mut().zip(color::prototype(k)) {
                    *x += p;
                }
                hit = true;
            }
        }
        if !hit {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(norm.as_bytes()));
            for x in v.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        l2_normalize(&mut v);
        v
    }
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    pub categories: Vec<Category>,
    /// Row-major `|C| × dim`, unit-norm rows.
    pub embeddings: Vec<f32>,
    pub dim: usize,
    pub seen_mask: Vec<bool>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    pub fn embedding(&self, j: usize) -> &[f32] {
        &self.embeddings[j * self.dim..(j + 1) * self.dim]
    }

    pub fn is_thing(&self, j: usize) -> bool {
        self.categories[j].is_thing
    }

    pub fn with_seen_mask(mut self, seen: Vec<bool>) -> Result<Self> {
        if seen.len() != self.len() {
            return Err(Error::Shape(format!(
                "seen mask has length {}, vocabulary has {} categories",
                seen.len(),
                self.len()
            )));
        }
        self.seen_mask = seen;
        Ok(self)
    }

    /// Index of the category whose normalized synonyms contain `name`.
    pub fn find(&self, name: &str) -> Option<usize> {
        let n = normalize_name(name);
        self.categories
            .iter()
            .position(|c| c.names.iter().any(|s| normalize_name(s) == n))
    }

    /// Sub-vocabulary over `ids` (in the given order), re-indexed from 0. The returned
    /// vector maps new ids back to ids of `self`.
    pub fn restrict(&self, ids: &[usize]) -> Result<(Vocabulary, Vec<usize>)> {
        if ids.is_empty() {
            return Err(Error::InvalidArgument("cannot restrict to an empty category list".into()));
        }
        let mut seen_ids = HashSet::new();
        let mut categories = Vec::with_capacity(ids.len());
        let mut embeddings = Vec::with_capacity(ids.len() * self.dim);
        let mut seen_mask = Vec::with_capacity(ids.len());
        for (new_id, &old) in ids.iter().enumerate() {
            if old >= self.len() || !seen_ids.insert(old) {
                return Err(Error::InvalidArgument(format!("bad or duplicate category id {old}")));
            }
            let mut c = self.categories[old].clone();
            c.id = new_id;
            categories.push(c);
            embeddings.extend_from_slice(self.embedding(old));
            seen_mask.push(self.seen_mask[old]);
        }
        Ok((
            Vocabulary {
                categories,
                embeddings,
                dim: self.dim,
                seen_mask,
            },
            ids.to_vec(),
        ))
    }
}

/// Lowercase, strip punctuation, trim and collapse internal whitespace.
pub fn normalize_name(s: &str) -> String {
    let cleaned: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn l2_normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if n > 1e-12 {
        for x in v.iter_mut() {
            *x = (*x as f64 / n) as f32;
        }
    }
}

fn validate_categories(categories: &[Category]) -> Result<()> {
    if categories.is_empty() {
        return Err(Error::InvalidArgument("empty category list".into()));
    }
    for (i, c) in categories.iter().enumerate() {
        if c.id != i {
            return Err(Error::InvalidArgument(format!(
                "category ids must be contiguous from 0; position {i} has id {}",
                c.id
            )));
        }
        if c.names.is_empty() || c.names.iter().any(|n| normalize_name(n).is_empty()) {
            return Err(Error::InvalidArgument(format!("category {i} has an empty name")));
        }
    }
    Ok(())
}

/// Embeds every (template × synonym) string, takes the flat mean per category and
/// renormalizes to unit length. Every category starts out marked as seen.
pub fn build_vocabulary(
    categories: Vec<Category>,
    encoder: &dyn TextEncoder,
    templates: &[String],
) -> Result<Vocabulary> {
    validate_categories(&categories)?;
    if templates.is_empty() {
        return Err(Error::InvalidArgument("no prompt templates".into()));
    }
    for t in templates {
        if t.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::InvalidArgument(format!(
                "template {t:?} must contain exactly one `{PLACEHOLDER}` placeholder"
            )));
        }
    }
    let dim = encoder.dim();
    let mut embeddings = Vec::with_capacity(categories.len() * dim);
    for c in &categories {
        let mut acc = vec![0.0f64; dim];
        let mut count = 0usize;
        for t in templates {
            for name in &c.names {
                let e = encoder.embed(&t.replace(PLACEHOLDER, name.trim()));
                if e.len() != dim {
                    return Err(Error::Shape(format!(
                        "encoder returned {} values, expected {dim}",
                        e.len()
                    )));
                }
                for (a, x) in acc.iter_mut().zip(&e) {
                    *a += *x as f64;
                }
                count += 1;
            }
        }
        let norm = acc.iter().map(|a| (a / count as f64).powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::NonFinite(format!(
                "mean text embedding of {:?} has zero norm",
                c.display_name()
            )));
        }
        embeddings.extend(acc.iter().map(|a| (a / count as f64 / norm) as f32));
    }
    let n = categories.len();
    Ok(Vocabulary {
        categories,
        embeddings,
        dim,
        seen_mask: vec![true; n],
    })
}

/// Entry `j` is true iff some normalized synonym of test category `j` equals some
/// normalized synonym of a training category.
pub fn partition_seen_unseen(test_vocab: &Vocabulary, train_vocab: &Vocabulary) -> Vec<bool> {
    let train: HashSet<String> = train_vocab
        .categories
        .iter()
        .flat_map(|c| c.names.iter().map(|n| normalize_name(n)))
        .collect();
    test_vocab
        .categories
        .iter()
        .map(|c| c.names.iter().any(|n| train.contains(&normalize_name(n))))
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryRecord {
    id: usize,
    names: String,
    is_thing: bool,
}

/// Reads one JSON record per line: `{"id": 0, "names": "cat, kitty", "is_thing": true}`.
pub fn load_categories(path: &Path) -> Result<Vec<Category>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CategoryRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(Category {
            id: rec.id,
            names: split_synonyms(&rec.names),
            is_thing: rec.is_thing,
        });
    }
    out.sort_by_key(|c| c.id);
    validate_categories(&out)?;
    Ok(out)
}

pub fn save_categories(path: &Path, categories: &[Category]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in categories {
        let rec = CategoryRecord {
            id: c.id,
            names: c.names.join(", "),
            is_thing: c.is_thing,
        };
        writeln!(f, "{}", serde_json::to_string(&rec)?)?;
    }
    f.flush()?;
    Ok(())
}

pub fn split_synonyms(names: &str) -> Vec<String> {
    names
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// One template per line; blank lines and `#` comments are skipped.
pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

pub fn default_templates() -> Vec<String> {
    vec![
        "{}".to_string(),
        "a photo of a {}.".to_string(),
        "a {} shape.".to_string(),
        "there is a {} in the scene.".to_string(),
    ]
}
