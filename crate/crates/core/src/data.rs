//! Procedural real/fake image dataset, augmentation and on-disk export.
//!
//! Real images are smooth multi-scale colour fields around a shared radial structure.
//! A fake starts from a real image and receives a soft-edged rectangular patch of a
//! higher-frequency field (local artifact) plus a small per-channel colour shift (global
//! artifact), both scaled by the manipulation strength.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use dtn_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::DataConfig;
use crate::error::{config_err, DtnError, Result};

pub const REAL: usize = 0;
pub const FAKE: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    /// 0 = real, 1 = fake.
    pub label: usize,
    /// `[channels × h × w]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Cached teacher logits for distillation.
    pub soft_label: Option<[f64; 2]>,
    pub seed: u64,
}

impl Sample {
    pub fn hard_label(&self) -> [f64; 2] {
        let mut y = [0.0; 2];
        y[self.label] = 1.0;
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub seed: u64,
    pub strength: f64,
}

impl DatasetSplit {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, which: Split) -> &mut Vec<Sample> {
        match which {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// (real, fake) counts of one split.
    pub fn class_counts(&self, which: Split) -> [usize; 2] {
        let mut c = [0; 2];
        for s in self.split(which) {
            c[s.label] += 1;
        }
        c
    }
}

fn sample_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Sum of randomly oriented plane waves with frequencies in `freq` cycles per image.
struct WaveField {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl WaveField {
    fn random(rng: &mut ChaCha8Rng, count: usize, freq: (f64, f64), amp: (f64, f64)) -> Self {
        let waves = (0..count)
            .map(|_| {
                let f = rng.gen_range(freq.0..freq.1);
                let dir = rng.gen_range(0.0..2.0 * PI);
                let a = rng.gen_range(amp.0..amp.1);
                let phase = rng.gen_range(0.0..2.0 * PI);
                (f * dir.cos(), f * dir.sin(), a, phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(fx, fy, a, ph)| a * (2.0 * PI * (fx * u + fy * v) + ph).sin())
            .sum()
    }
}

fn real_image(rng: &mut ChaCha8Rng, channels: usize, h: usize, w: usize) -> Vec<f64> {
    let coarse = WaveField::random(rng, 3, (0.3, 1.0), (0.04, 0.08));
    let fine = WaveField::random(rng, 3, (1.0, 2.0), (0.01, 0.03));
    let (cx, cy) = (rng.gen_range(0.4..0.6), rng.gen_range(0.4..0.6));
    let radius = rng.gen_range(0.25..0.35);
    let tint: Vec<f64> = (0..channels).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let gain: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.8..1.2)).collect();
    let mut out = vec![0.0; channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let r2 = (u - cx).powi(2) + (v - cy).powi(2);
            let blob = 0.15 * (-r2 / (2.0 * radius * radius)).exp();
            let field = coarse.at(u, v) + fine.at(u, v);
            for c in 0..channels {
                out[(c * h + y) * w + x] = 0.4 + tint[c] + blob + gain[c] * field;
            }
        }
    }
    out
}

fn smoothstep(e: f64) -> f64 {
    let t = e.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn manipulate(rng: &mut ChaCha8Rng, img: &mut [f64], channels: usize, h: usize, w: usize, strength: f64) {
    let ph = rng.gen_range(h / 4..=h / 2).max(1);
    let pw = rng.gen_range(w / 4..=w / 2).max(1);
    let y0 = rng.gen_range(0..=h - ph);
    let x0 = rng.gen_range(0..=w - pw);
    let texture = WaveField::random(rng, 4, (3.0, 6.0), (0.06, 0.12));
    let level = rng.gen_range(0.35..0.65);
    let shift: Vec<f64> = (0..channels)
        .map(|_| if rng.gen_bool(0.5) { 0.06 } else { -0.06 })
        .collect();
    // Alpha ramps up over a two-pixel border for a blended boundary.
    let ramp = 2.0;
    for y in 0..h {
        for x in 0..w {
            let inside_y = (y as f64 - y0 as f64 + 0.5).min((y0 + ph) as f64 - y as f64 - 0.5);
            let inside_x = (x as f64 - x0 as f64 + 0.5).min((x0 + pw) as f64 - x as f64 - 0.5);
            let alpha = strength * smoothstep((inside_y.min(inside_x) + 0.5) / ramp);
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let patch = level + texture.at(u, v);
            for (c, s) in shift.iter().enumerate() {
                let p = &mut img[(c * h + y) * w + x];
                *p = (1.0 - alpha) * *p + alpha * patch + strength * s;
            }
        }
    }
}

/// Generates one sample; fully determined by `(seed, id)`.
pub fn generate_sample(
    seed: u64,
    id: u64,
    label: usize,
    channels: usize,
    h: usize,
    w: usize,
    strength: f64,
) -> Result<Sample> {
    let mut rng = sample_rng(seed, id);
    let mut img = real_image(&mut rng, channels, h, w);
    if label == FAKE {
        manipulate(&mut rng, &mut img, channels, h, w, strength);
    }
    let data = img.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok(Sample {
        id,
        label,
        image: Tensor::new(&[channels, h, w], data)?,
        soft_label: None,
        seed,
    })
}

/// Balanced train/val/test splits with disjoint, consecutive sample ids.
pub fn generate_dataset(cfg: &DataConfig, channels: usize, h: usize, w: usize, seed: u64) -> Result<DatasetSplit> {
    if channels == 0 || h < 4 || w < 4 {
        return config_err(format!("image must be at least 1x4x4, got {channels}x{h}x{w}"));
    }
    if !(0.0..=1.0).contains(&cfg.strength) {
        return config_err("strength must lie in [0, 1]");
    }
    for n in [cfg.n_train, cfg.n_val, cfg.n_test] {
        if n % 2 != 0 {
            return config_err("split sizes must be even for class balance");
        }
    }
    let make = |start: u64, n: usize| -> Result<Vec<Sample>> {
        (start..start + n as u64)
            .into_par_iter()
            .map(|id| generate_sample(seed, id, (id % 2) as usize, channels, h, w, cfg.strength))
            .collect()
    };
    let (a, b) = (cfg.n_train as u64, (cfg.n_train + cfg.n_val) as u64);
    Ok(DatasetSplit {
        train: make(0, cfg.n_train)?,
        val: make(a, cfg.n_val)?,
        test: make(b, cfg.n_test)?,
        seed,
        strength: cfg.strength,
    })
}

/// Label-preserving augmentation steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentOp {
    HFlip { p: f64 },
    GaussianNoise { sigma: f64 },
    UniformNoise { half_width: f64 },
    Brightness { max_delta: f64 },
}

pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let w = s[s.len() - 1];
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(img.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Applies `policy` in order; pixel values are clamped back to `[0, 1]`.
pub fn augment(sample: &Sample, rng: &mut impl Rng, policy: &[AugmentOp]) -> Sample {
    let mut out = sample.clone();
    for op in policy {
        match *op {
            AugmentOp::HFlip { p } => {
                if rng.gen_bool(p.clamp(0.0, 1.0)) {
                    out.image = hflip(&out.image);
                }
            }
            AugmentOp::GaussianNoise { sigma } => {
                for v in out.image.data_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v = (*v as f64 + sigma * z).clamp(0.0, 1.0) as f32;
                }
            }
            AugmentOp::UniformNoise { half_width } => {
                for v in out.image.data_mut() {
                    let z = rng.gen_range(-1.0..=1.0) * half_width;
                    *v = (*v as f64 + z).clamp(0.0, 1.0) as f32;
                }
            }
            AugmentOp::Brightness { max_delta } => {
                let d = rng.gen_range(-1.0..=1.0) * max_delta;
                for v in out.image.data_mut() {
                    *v = (*v as f64 + d).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: u64,
    label: usize,
    split: Split,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetIndex {
    format: String,
    seed: u64,
    strength: f64,
    shape: Vec<usize>,
    samples: Vec<IndexEntry>,
}

const DATA_FORMAT: &str = "dtn-dataset-v1";
const INDEX_FILE: &str = "index.json";
const IMAGES_FILE: &str = "images.bin";

/// Writes `index.json` plus `images.bin` (little-endian f32, samples back to back).
pub fn export_dataset(data: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let shape = data.train.first().map(|s| s.image.shape().to_vec()).unwrap_or_default();
    let mut blob = Vec::new();
    let mut samples = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        for s in data.split(split) {
            samples.push(IndexEntry {
                id: s.id,
                label: s.label,
                split,
                offset: blob.len(),
            });
            for v in s.image.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let index = DatasetIndex {
        format: DATA_FORMAT.into(),
        seed: data.seed,
        strength: data.strength,
        shape,
        samples,
    };
    fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
    fs::write(dir.join(IMAGES_FILE), blob)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    let index: DatasetIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
    if index.format != DATA_FORMAT {
        return Err(DtnError::Checkpoint(format!("unknown dataset format {}", index.format)));
    }
    let blob = fs::read(dir.join(IMAGES_FILE))?;
    let numel: usize = index.shape.iter().product();
    let mut out = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        seed: index.seed,
        strength: index.strength,
    };
    for e in index.samples {
        let bytes = blob
            .get(e.offset..e.offset + numel * 4)
            .ok_or_else(|| DtnError::Checkpoint(format!("sample {} out of range", e.id)))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.split_mut(e.split).push(Sample {
            id: e.id,
            label: e.label,
            image: Tensor::new(&index.shape, data)?,
            soft_label: None,
            seed: index.seed,
        });
    }
    Ok(out)
}
