//! Procedural "bitewing" and "lung-like" images with exact masks, the random
//! affine augmentation, and PGM + `index.json` dataset storage.

mod affine;
mod io;
#[cfg(test)]
mod tests;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::rng::{derive, seeded, Rng};
use crate::tensor::Tensor;

pub use affine::{apply_affine, random_affine, sample_affine, AffineParams};
pub use io::{load_dataset, read_pgm, save_dataset, write_pgm};

pub const BITEWING_CLASSES: usize = 6;
pub const LUNGLIKE_CLASSES: usize = 4;

pub const BACKGROUND: u8 = 0;
pub const ENAMEL: u8 = 1;
pub const DENTINE: u8 = 2;
pub const PULP: u8 = 3;
pub const BONE: u8 = 4;
pub const OTHER: u8 = 5;

const NOISE_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Bitewing,
    Lunglike,
}

impl DataKind {
    pub fn num_classes(self) -> usize {
        match self {
            DataKind::Bitewing => BITEWING_CLASSES,
            DataKind::Lunglike => LUNGLIKE_CLASSES,
        }
    }
}

impl std::str::FromStr for DataKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bitewing" => Ok(DataKind::Bitewing),
            "lunglike" => Ok(DataKind::Lunglike),
            _ => bail!(Config, "unknown dataset kind {s:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
}

/// Integer label map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            bail!(Dimension, "mask {height}x{width} given {} labels", labels.len());
        }
        Ok(Mask { height, width, labels })
    }

    pub fn classes_present(&self, num_classes: usize) -> Vec<bool> {
        let mut seen = vec![false; num_classes];
        for &l in &self.labels {
            if (l as usize) < num_classes {
                seen[l as usize] = true;
            }
        }
        seen
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `[1, H, W]`, values in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub mask: Option<Mask>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn labels(&self) -> Result<&Mask> {
        match &self.mask {
            Some(m) => Ok(m),
            None => bail!(Contract, "sample {} has no mask", self.id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub sample: SegSample,
    pub split: Split,
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub entries: Vec<Entry>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SegSample> {
        self.entries.iter().filter(|e| e.split == split).map(|e| &e.sample).collect()
    }

    pub fn split_owned(&self, split: Split) -> Vec<SegSample> {
        self.split(split).into_iter().cloned().collect()
    }

    pub fn ids(&self, split: Split) -> Vec<String> {
        self.split(split).into_iter().map(|s| s.id.clone()).collect()
    }

    pub fn labeled_split(&self) -> DatasetSplit {
        DatasetSplit {
            train: self.ids(Split::Train),
            val: self.ids(Split::Val),
            test: self.ids(Split::Test),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    /// Seeded shuffle of `ids` into the first `n_train`, next `n_val`, rest.
    pub fn assign(ids: &[String], n_train: usize, n_val: usize, seed: u64) -> Result<Self> {
        if n_train + n_val > ids.len() {
            bail!(Config, "{} ids cannot fill {n_train} train + {n_val} val", ids.len());
        }
        let mut order = ids.to_vec();
        order.shuffle(&mut seeded(seed));
        let test = order.split_off(n_train + n_val);
        let val = order.split_off(n_train);
        Ok(DatasetSplit { train: order, val, test })
    }
}

/// Sizes of the default benchmark: unlabeled pool plus 10/5/85 labeled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkSpec {
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub size: usize,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec { n_pretrain: 2500, n_train: 10, n_val: 5, n_test: 85, size: 32 }
    }
}

/// Unlabeled pool (ids `pre-*`) and labeled pool (ids `lab-*`) drawn from
/// separate random streams, so the two never share a sample.
pub fn make_benchmark(kind: DataKind, spec: &BenchmarkSpec, seed: u64) -> Result<Dataset> {
    let pool = generate_kind(kind, spec.n_pretrain, spec.size, derive(seed, 1).random())?;
    let n_lab = spec.n_train + spec.n_val + spec.n_test;
    let labeled = generate_kind(kind, n_lab, spec.size, derive(seed, 2).random())?;
    let mut entries = Vec::with_capacity(pool.len() + labeled.len());
    for mut s in pool {
        s.id = format!("pre-{}", s.id);
        s.mask = None;
        entries.push(Entry { sample: s, split: Split::Pretrain, generated: false });
    }
    let labeled: Vec<SegSample> = labeled
        .into_iter()
        .map(|mut s| {
            s.id = format!("lab-{}", s.id);
            s
        })
        .collect();
    let ids: Vec<String> = labeled.iter().map(|s| s.id.clone()).collect();
    let split = DatasetSplit::assign(&ids, spec.n_train, spec.n_val, derive(seed, 3).random())?;
    let rank = |id: &String| -> (Split, usize) {
        for (sp, list) in [(Split::Train, &split.train), (Split::Val, &split.val), (Split::Test, &split.test)] {
            if let Some(p) = list.iter().position(|x| x == id) {
                return (sp, p);
            }
        }
        unreachable!()
    };
    let mut lab: Vec<(Split, usize, SegSample)> = labeled
        .into_iter()
        .map(|s| {
            let (sp, p) = rank(&s.id);
            (sp, p, s)
        })
        .collect();
    // Train order is the shuffled order, so k-shot subsets are prefixes.
    lab.sort_by_key(|(sp, p, _)| (*sp as u8, *p));
    entries.extend(lab.into_iter().map(|(split, _, sample)| Entry { sample, split, generated: false }));
    Ok(Dataset { num_classes: kind.num_classes(), entries })
}

pub fn generate_kind(kind: DataKind, n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    match kind {
        DataKind::Bitewing => generate_synthetic(n, size, BITEWING_CLASSES, seed),
        DataKind::Lunglike => generate_lunglike(n, size, seed),
    }
}

/// `x / 127.5 - 1`.
pub fn normalize(raw: &Tensor<f32>) -> Result<Tensor<f32>> {
    if let Some(v) = raw.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
        bail!(Contract, "raw intensity {v} outside [0, 255]");
    }
    Ok(raw.map(|v| v / 127.5 - 1.0))
}

/// Inverse of [`normalize`] with rounding, clamped to the byte range.
pub fn quantize(image: &Tensor<f32>) -> Vec<u8> {
    image.data().iter().map(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8).collect()
}

fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Result<Tensor<f32>> {
    normalize(&Tensor::from_vec(&[1, h, w], bytes.iter().map(|&b| b as f32).collect())?)
}

/// Renders per-pixel intensities in `[0, 1]`: band value plus noise and a
/// planar illumination ramp, quantized to bytes, then normalized.
fn render(
    size: usize,
    labels: &[u8],
    band: impl Fn(u8, usize, usize) -> f64,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    let angle = rng.random_range(0.0..2.0 * PI);
    let strength = rng.random_range(0.0..0.08);
    let (gx, gy) = (angle.cos() * strength, angle.sin() * strength);
    let c = (size as f64 - 1.0) / 2.0;
    let mut bytes = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = StandardNormal.sample(rng);
            let ramp = (gx * (x as f64 - c) + gy * (y as f64 - c)) / size as f64;
            let v = band(labels[y * size + x], y, x) + ramp + NOISE_SIGMA * noise;
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    from_bytes(&bytes, size, size)
}

/// Smoothly perturbed radius: `1 + Σ a_k cos(kθ + φ_k)`.
struct Wobble {
    terms: Vec<(f64, f64, f64)>,
}

impl Wobble {
    fn new(rng: &mut Rng, amp: f64) -> Self {
        let terms = (2..=4).map(|k| (k as f64, rng.random_range(-amp..amp), rng.random_range(0.0..2.0 * PI))).collect();
        Wobble { terms }
    }

    fn at(&self, theta: f64) -> f64 {
        1.0 + self.terms.iter().map(|(k, a, p)| a * (k * theta + p).cos()).sum::<f64>()
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    wobble: Wobble,
}

impl Blob {
    /// Normalized radius: `< 1` inside the boundary.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        (dx * dx + dy * dy).sqrt() / self.wobble.at(dy.atan2(dx))
    }
}

fn bitewing_band(class: u8, y: usize, x: usize, phase: (f64, f64)) -> f64 {
    match class {
        BACKGROUND => 0.1,
        PULP => 0.3,
        BONE => 0.45 + 0.04 * ((x as f64 * 1.3 + phase.0).sin() * (y as f64 * 0.9 + phase.1).cos()),
        DENTINE => 0.55,
        ENAMEL => 0.8,
        _ => 0.95,
    }
}

/// Bitewing-like scenes: 2-4 teeth (enamel ring, dentine body, pulp core)
/// over a textured bone band, occasional bright restorations.
pub fn generate_synthetic(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<SegSample>> {
    if num_classes != BITEWING_CLASSES {
        bail!(Config, "bitewing generator has {BITEWING_CLASSES} classes, asked for {num_classes}");
    }
    if size < 16 {
        bail!(Config, "bitewing images need at least 16 pixels per side, got {size}");
    }
    (0..n)
        .map(|i| {
            let mut rng = derive(seed, i as u64);
            let (labels, phase) = bitewing_geometry(size, &mut rng);
            let image = render(size, &labels, |c, y, x| bitewing_band(c, y, x, phase), &mut rng)?;
            Ok(SegSample { id: format!("{i:05}"), image, mask: Some(Mask::new(size, size, labels)?) })
        })
        .collect()
}

fn bitewing_geometry(size: usize, rng: &mut Rng) -> (Vec<u8>, (f64, f64)) {
    let s = size as f64;
    let mut labels = vec![BACKGROUND; size * size];

    // Bone: band across the lower part with wavy upper and lower edges.
    let top = s * rng.random_range(0.55..0.68);
    let bottom = s * rng.random_range(0.85..1.05);
    let (wa, wf, wp) = (rng.random_range(0.5..2.0), rng.random_range(0.15..0.4), rng.random_range(0.0..2.0 * PI));
    for y in 0..size {
        for x in 0..size {
            let off = wa * (wf * x as f64 + wp).sin();
            let yf = y as f64;
            if yf >= top + off && yf < bottom - off {
                labels[y * size + x] = BONE;
            }
        }
    }

    // Teeth: evenly spaced crowns/roots partly embedded in the bone.
    let teeth = rng.random_range(2..=4usize);
    let slot = s / teeth as f64;
    let blobs: Vec<Blob> = (0..teeth)
        .map(|k| Blob {
            cx: slot * (k as f64 + 0.5) + rng.random_range(-0.08..0.08) * slot,
            cy: s * rng.random_range(0.42..0.55),
            rx: slot * rng.random_range(0.36..0.46),
            ry: s * rng.random_range(0.3..0.4),
            wobble: Wobble::new(rng, 0.06),
        })
        .collect();
    let pulp_edge = rng.random_range(0.3..0.42);
    let dentine_edge = rng.random_range(0.72..0.82);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let rho = blobs.iter().map(|b| b.rho(xf, yf)).fold(f64::INFINITY, f64::min);
            if rho < 1.0 {
                labels[y * size + x] = if rho < pulp_edge {
                    PULP
                } else if rho < dentine_edge {
                    DENTINE
                } else {
                    ENAMEL
                };
            }
        }
    }

    // Restorations: small bright blobs on some crowns.
    if rng.random_bool(0.6) {
        for _ in 0..rng.random_range(1..=2) {
            let b = &blobs[rng.random_range(0..blobs.len())];
            let art = Blob {
                cx: b.cx + rng.random_range(-0.5..0.5) * b.rx,
                cy: b.cy - b.ry * rng.random_range(0.4..0.8),
                rx: rng.random_range(1.0..2.2) * s / 32.0,
                ry: rng.random_range(1.0..2.2) * s / 32.0,
                wobble: Wobble::new(rng, 0.1),
            };
            for y in 0..size {
                for x in 0..size {
                    if art.rho(x as f64, y as f64) < 1.0 {
                        labels[y * size + x] = OTHER;
                    }
                }
            }
        }
    }
    let phase = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    (labels, phase)
}

/// Chest-like scenes with 4 classes: background, body, two lung lobes,
/// and a mediastinal blob between them.
pub fn generate_lunglike(n: usize, size: usize, seed: u64) -> Result<Vec<SegSample>> {
    if size < 16 {
        bail!(Config, "lung-like images need at least 16 pixels per side, got {size}");
    }
    (0..n)
        .map(|i| {
            let mut rng = derive(seed, i as u64);
            let s = size as f64;
            let c = s / 2.0;
            let body = Blob {
                cx: c + rng.random_range(-0.03..0.03) * s,
                cy: c + rng.random_range(-0.03..0.03) * s,
                rx: s * rng.random_range(0.42..0.48),
                ry: s * rng.random_range(0.4..0.47),
                wobble: Wobble::new(&mut rng, 0.03),
            };
            let gap = s * rng.random_range(0.2..0.26);
            let lobes: Vec<Blob> = [-1.0, 1.0]
                .iter()
                .map(|side| Blob {
                    cx: body.cx + side * gap,
                    cy: body.cy + rng.random_range(-0.04..0.02) * s,
                    rx: s * rng.random_range(0.12..0.17),
                    ry: s * rng.random_range(0.26..0.33),
                    wobble: Wobble::new(&mut rng, 0.07),
                })
                .collect();
            let heart = Blob {
                cx: body.cx + rng.random_range(-0.02..0.05) * s,
                cy: body.cy + s * rng.random_range(0.08..0.16),
                rx: s * rng.random_range(0.09..0.13),
                ry: s * rng.random_range(0.1..0.14),
                wobble: Wobble::new(&mut rng, 0.05),
            };
            let mut labels = vec![0u8; size * size];
            for y in 0..size {
                for x in 0..size {
                    let (xf, yf) = (x as f64, y as f64);
                    let l = &mut labels[y * size + x];
                    if body.rho(xf, yf) < 1.0 {
                        *l = 1;
                    }
                    if lobes.iter().any(|b| b.rho(xf, yf) < 1.0) {
                        *l = 2;
                    }
                    if heart.rho(xf, yf) < 1.0 {
                        *l = 3;
                    }
                }
            }
            let band = |c: u8, _: usize, _: usize| [0.05, 0.6, 0.25, 0.8][c as usize];
            let image = render(size, &labels, band, &mut rng)?;
            Ok(SegSample { id: format!("{i:05}"), image, mask: Some(Mask::new(size, size, labels)?) })
        })
        .collect()
}
