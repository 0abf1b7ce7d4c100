//! Text-prior plumbing: degradation categories, embedding providers (a
//! deterministic stub plus a precomputed-embedding file loader) and
//! text-conditioned loss-weight resolution.
//!
//! The stub replaces an external vision-language pipeline: it derives a
//! unit vector from SHA-256(category) expanded through ChaCha12 and a
//! standard-normal draw, so embeddings are byte-identical across runs and
//! platforms. Real embeddings computed offline drop in through the file
//! loader (default width 512, matching CLIP's text encoder).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossWeights;

pub const DEFAULT_TEXT_DIM: usize = 512;

/// Fixed-length embedding plus its degradation-category tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f32>,
    pub category: String,
}

impl TextEmbedding {
    pub fn l2_norm(&self) -> f64 {
        self.vector
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cosine(&self, other: &TextEmbedding) -> f64 {
        let dot: f64 = self
            .vector
            .iter()
            .zip(other.vector.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        dot / (self.l2_norm() * other.l2_norm())
    }
}

/// Deterministic pseudo-random unit embedding for a category.
pub fn stub_encode(category: &str, text_dim: usize) -> Result<TextEmbedding> {
    if category.is_empty() {
        return Err(Error::EmptyCategory);
    }
    let digest = Sha256::digest(category.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..text_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(TextEmbedding {
        vector: raw.iter().map(|v| (v / norm) as f32).collect(),
        category: category.to_string(),
    })
}

/// Source of text embeddings for a degradation category.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, category: &str) -> Result<TextEmbedding>;
    fn text_dim(&self) -> usize;
}

/// Hash-seeded deterministic embeddings; no external model involved.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub text_dim: usize,
}

impl Default for StubEncoder {
    fn default() -> Self {
        Self {
            text_dim: DEFAULT_TEXT_DIM,
        }
    }
}

impl EmbeddingProvider for StubEncoder {
    fn embed(&self, category: &str) -> Result<TextEmbedding> {
        stub_encode(category, self.text_dim)
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }
}

/// Embeddings precomputed offline and loaded from a file.
#[derive(Debug, Clone)]
pub struct FileEmbeddings {
    map: BTreeMap<String, TextEmbedding>,
    text_dim: usize,
}

impl FileEmbeddings {
    pub fn load(path: &Path, text_dim: usize) -> Result<Self> {
        Ok(Self {
            map: load_embeddings(path, text_dim)?,
            text_dim,
        })
    }
}

impl EmbeddingProvider for FileEmbeddings {
    fn embed(&self, category: &str) -> Result<TextEmbedding> {
        self.map
            .get(category)
            .cloned()
            .ok_or_else(|| Error::UnknownCategory(category.to_string()))
    }

    fn text_dim(&self) -> usize {
        self.text_dim
    }
}

/// Parses the embedding file format: one record per line, category, a tab,
/// then `text_dim` comma-separated decimal floats. `#` lines are comments.
pub fn load_embeddings(path: &Path, text_dim: usize) -> Result<BTreeMap<String, TextEmbedding>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut map = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (category, rest) = trimmed.split_once('\t').ok_or(Error::MalformedEmbedding {
            line: lineno,
            msg: "missing tab separator".into(),
        })?;
        if category.is_empty() {
            return Err(Error::EmptyCategory);
        }
        let vector: Vec<f32> = rest
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::MalformedEmbedding {
                line: lineno,
                msg: e.to_string(),
            })?;
        if vector.len() != text_dim {
            return Err(Error::EmbeddingDim {
                expected: text_dim,
                got: vector.len(),
                entry: category.to_string(),
            });
        }
        map.insert(
            category.to_string(),
            TextEmbedding {
                vector,
                category: category.to_string(),
            },
        );
    }
    Ok(map)
}

/// Writes embeddings in the same format; floats use the shortest
/// round-trippable decimal form, so load(save(x)) is bit-exact.
pub fn save_embeddings(path: &Path, map: &BTreeMap<String, TextEmbedding>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (category, emb) in map {
        let vals: Vec<String> = emb.vector.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{category}\t{}", vals.join(","))?;
    }
    Ok(())
}

/// Multiplicative adjustments applied to the base loss weights for one
/// category; `delta_ir` replaces the base value outright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightFactors {
    pub f_int: f64,
    pub f_ssim: f64,
    pub f_grad: f64,
    pub f_color: f64,
    pub delta_ir: f64,
}

impl WeightFactors {
    pub fn identity() -> Self {
        Self {
            f_int: 1.0,
            f_ssim: 1.0,
            f_grad: 1.0,
            f_color: 1.0,
            delta_ir: 1.0,
        }
    }
}

/// Category-to-factor table. The stock table is a stand-in policy, fully
/// overridable: identity factors everywhere, except `noise`, which halves
/// the infrared SSIM weight (a noisy thermal channel is trusted less).
#[derive(Debug, Clone)]
pub struct WeightTable {
    entries: BTreeMap<String, WeightFactors>,
}

impl Default for WeightTable {
    fn default() -> Self {
        let mut entries = BTreeMap::new();
        for cat in ["clean", "low_light", "low_contrast", "blur"] {
            entries.insert(cat.to_string(), WeightFactors::identity());
        }
        entries.insert(
            "noise".to_string(),
            WeightFactors {
                delta_ir: 0.5,
                ..WeightFactors::identity()
            },
        );
        Self { entries }
    }
}

impl WeightTable {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, category: &str, factors: WeightFactors) {
        self.entries.insert(category.to_string(), factors);
    }

    pub fn get(&self, category: &str) -> Option<&WeightFactors> {
        self.entries.get(category)
    }
}

/// Applies a category's factors to the base weights; unknown categories
/// leave the base untouched.
pub fn resolve_weights(category: &str, base: &LossWeights, table: &WeightTable) -> LossWeights {
    match table.get(category) {
        None => *base,
        Some(f) => LossWeights {
            lambda_int: base.lambda_int * f.f_int,
            lambda_ssim: base.lambda_ssim * f.f_ssim,
            lambda_grad: base.lambda_grad * f.f_grad,
            lambda_color: base.lambda_color * f.f_color,
            delta_ir: f.delta_ir,
            alpha: base.alpha,
        },
    }
}
