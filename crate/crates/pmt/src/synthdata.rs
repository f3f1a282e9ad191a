//! Deterministic synthetic 2D segmentation data: star-convex blobs on a
//! noisy, bias-shaded background, plus the on-disk dataset format and the
//! train/test/labeled split.
//!
//! Each sample is generated from its own RNG stream seeded by
//! `(seed, sample_id)`, so any subset is reproducible independently of
//! generation order. Masks are rasterized from a radial function
//! `r(phi) = r0 + truncated Fourier series`, which is star-convex by
//! construction; masks whose foreground fraction falls outside
//! `[0.02, 0.6]` are regenerated so the boundary metrics stay meaningful.
//!
//! On-disk layout: a `meta.json` (config echo, counts, format version) next
//! to one binary file per sample — magic `SEGV1`, u32 height, u32 width,
//! little-endian f32 image, u8 mask. Round trips are byte-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{derive, tag};

pub const FORMAT_VERSION: u32 = 1;
pub const SAMPLE_MAGIC: &[u8; 5] = b"SEGV1";
/// Acceptable foreground fraction for a generated mask.
pub const FG_FRACTION: (f64, f64) = (0.02, 0.6);
/// Fraction of the dataset held out as the test set.
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("sample {sample_id}: no feasible mask after {attempts} attempts")]
    Infeasible { sample_id: usize, attempts: usize },
    #[error("invalid data config: {0}")]
    InvalidConfig(String),
    #[error("split would produce {labeled} labeled samples; need at least 1")]
    TooFewLabeled { labeled: usize },
    #[error("{path}: bad magic (not a SEGV1 sample file)")]
    BadMagic { path: String },
    #[error("{path}: dimension overflow ({h} x {w})")]
    DimensionOverflow { path: String, h: u64, w: u64 },
    #[error("{path}: truncated ({got} bytes, expected {expected})")]
    Truncated {
        path: String,
        got: usize,
        expected: usize,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("meta.json error: {0}")]
    Meta(String),
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataGenConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub labeled_fraction: f64,
    pub noise_sigma: f64,
    pub bias_field_amp: f64,
    /// Number of Fourier modes perturbing the blob radius.
    pub blob_complexity: usize,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            count: 200,
            height: 64,
            width: 64,
            labeled_fraction: 0.1,
            noise_sigma: 0.15,
            bias_field_amp: 0.2,
            blob_complexity: 4,
            seed: 42,
        }
    }
}

impl DataGenConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.count < 2 {
            return Err(DataError::InvalidConfig("count must be >= 2".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(DataError::InvalidConfig("dims must be positive".into()));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(DataError::InvalidConfig(
                "labeled_fraction must be in (0, 1]".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.bias_field_amp < 0.0 {
            return Err(DataError::InvalidConfig(
                "noise_sigma and bias_field_amp must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One image/mask pair. Images are standardized to zero mean, unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub h: usize,
    pub w: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub is_labeled: bool,
}

impl Sample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.mask.len() as f64
    }
}

/// Generates the whole dataset. Samples are independent; see
/// [`generate_sample`] for the per-sample construction.
pub fn generate(cfg: &DataGenConfig) -> Result<Vec<Sample>, DataError> {
    cfg.validate()?;
    (0..cfg.count).map(|id| generate_sample(cfg, id)).collect()
}

/// Generates sample `id` from its own `(seed, id)`-derived RNG stream.
pub fn generate_sample(cfg: &DataGenConfig, id: usize) -> Result<Sample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, tag::SAMPLE, id as u64));
    let (h, w) = (cfg.height, cfg.width);
    let attempts = 100;
    for _ in 0..attempts {
        let mask = draw_mask(cfg, &mut rng);
        let fg = mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / (h * w) as f64;
        if !(FG_FRACTION.0..=FG_FRACTION.1).contains(&fg) {
            continue;
        }
        let image = draw_image(cfg, &mask, &mut rng);
        return Ok(Sample {
            id,
            h,
            w,
            image,
            mask,
            is_labeled: false,
        });
    }
    Err(DataError::Infeasible {
        sample_id: id,
        attempts,
    })
}

fn draw_mask(cfg: &DataGenConfig, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let cx = w * rng.gen_range(0.35..0.65);
    let cy = h * rng.gen_range(0.35..0.65);
    let r0 = h.min(w) * rng.gen_range(0.12..0.32);
    let modes: Vec<(f64, f64)> = (1..=cfg.blob_complexity)
        .map(|k| {
            let scale = 0.25 * r0 / k as f64;
            (
                rng.gen_range(-1.0..1.0) * scale,
                rng.gen_range(-1.0..1.0) * scale,
            )
        })
        .collect();
    let mut mask = vec![0u8; cfg.height * cfg.width];
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let phi = dy.atan2(dx);
            let mut r = r0;
            for (k, (a, b)) in modes.iter().enumerate() {
                let kf = (k + 1) as f64;
                r += a * (kf * phi).cos() + b * (kf * phi).sin();
            }
            r = r.max(1.0);
            if dx * dx + dy * dy <= r * r {
                mask[y * cfg.width + x] = 1;
            }
        }
    }
    mask
}

fn draw_image(cfg: &DataGenConfig, mask: &[u8], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    // low-order polynomial shading field over normalized [-1,1] coords
    let coeffs: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * cfg.bias_field_amp);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let u = 2.0 * (x as f64 + 0.5) / w as f64 - 1.0;
            let v = 2.0 * (y as f64 + 0.5) / h as f64 - 1.0;
            let base = if mask[y * w + x] == 1 { 0.7 } else { 0.3 };
            let bias = coeffs[0]
                + coeffs[1] * u
                + coeffs[2] * v
                + coeffs[3] * u * v
                + coeffs[4] * u * u
                + coeffs[5] * v * v;
            let n = if cfg.noise_sigma > 0.0 {
                cfg.noise_sigma * noise.sample(rng)
            } else {
                0.0
            };
            img[y * w + x] = base + bias + n;
        }
    }
    standardize(&img)
}

/// Zero-mean unit-variance normalization, computed in double precision.
fn standardize(img: &[f64]) -> Vec<f32> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    img.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

/// Index-level train/test/labeled split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub test: Vec<usize>,
}

fn round_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction + 0.5).floor() as usize
}

/// Deterministic shuffle, then 80/20 train/test, then the first
/// `labeled_fraction` of the train side marked labeled.
pub fn split(count: usize, labeled_fraction: f64, seed: u64) -> Result<DatasetSplit, DataError> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(DataError::InvalidConfig(
            "labeled_fraction must be in (0, 1]".into(),
        ));
    }
    let mut ids: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, tag::SPLIT, 0));
    // Fisher-Yates
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_test = round_count(count, TEST_FRACTION);
    let n_train = count - n_test;
    let n_labeled = round_count(n_train, labeled_fraction);
    if n_labeled == 0 {
        return Err(DataError::TooFewLabeled { labeled: 0 });
    }
    let mut labeled: Vec<usize> = ids[..n_labeled].to_vec();
    let mut unlabeled: Vec<usize> = ids[n_labeled..n_train].to_vec();
    let mut test: Vec<usize> = ids[n_train..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    test.sort_unstable();
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct MetaSampleEntry {
    id: usize,
    labeled: bool,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: DataGenConfig,
    count: usize,
    samples: Vec<MetaSampleEntry>,
}

fn sample_path(dir: &Path, id: usize) -> std::path::PathBuf {
    dir.join(format!("sample_{id:05}.segv1"))
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `meta.json` plus one SEGV1 binary per sample.
pub fn write_dataset(dir: &Path, cfg: &DataGenConfig, samples: &[Sample]) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        count: samples.len(),
        samples: samples
            .iter()
            .map(|s| MetaSampleEntry {
                id: s.id,
                labeled: s.is_labeled,
            })
            .collect(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| DataError::Meta(e.to_string()))?;
    fs::write(&meta_path, json).map_err(|e| io_err(&meta_path, e))?;
    for s in samples {
        let path = sample_path(dir, s.id);
        let mut buf = Vec::with_capacity(5 + 8 + s.image.len() * 4 + s.mask.len());
        buf.extend_from_slice(SAMPLE_MAGIC);
        buf.extend_from_slice(&(s.h as u32).to_le_bytes());
        buf.extend_from_slice(&(s.w as u32).to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&s.mask);
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(&buf).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Reads one SEGV1 sample file.
pub fn read_sample(path: &Path, id: usize, labeled: bool) -> Result<Sample, DataError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    let disp = path.display().to_string();
    if bytes.len() < 13 || &bytes[..5] != SAMPLE_MAGIC {
        return Err(DataError::BadMagic { path: disp });
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as u64;
    let numel = h.checked_mul(w).filter(|&n| n > 0 && n <= (1 << 28));
    let Some(numel) = numel else {
        return Err(DataError::DimensionOverflow { path: disp, h, w });
    };
    let numel = numel as usize;
    let expected = 13 + numel * 5;
    if bytes.len() != expected {
        return Err(DataError::Truncated {
            path: disp,
            got: bytes.len(),
            expected,
        });
    }
    let image: Vec<f32> = bytes[13..13 + numel * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = bytes[13 + numel * 4..].to_vec();
    Ok(Sample {
        id,
        h: h as usize,
        w: w as usize,
        image,
        mask,
        is_labeled: labeled,
    })
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DataGenConfig, Vec<Sample>), DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| DataError::Meta(e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(DataError::Meta(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    let samples = meta
        .samples
        .iter()
        .map(|e| read_sample(&sample_path(dir, e.id), e.id, e.labeled))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((meta.config, samples))
}
