//! DDPM-MLP comparison method: activations of the frozen noise model at
//! several timesteps and blocks, upsampled to pixel resolution, feed a
//! per-pixel MLP classifier.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, DiffusionSchedule};
use crate::error::{bail, Result};
use crate::metrics::ConfusionMatrix;
use crate::rng::{derive, normal, seeded, Rng};
use crate::segdata::SegSample;
use crate::tensor::{Tape, Tensor};
use crate::train::{AdamHyper, OptimState};
use crate::unet::{BlockId, HeadMode, UnetModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub timesteps: Vec<usize>,
    pub blocks: Vec<BlockId>,
    /// `(H, W)`.
    pub target: (usize, usize),
}

impl FeatureSpec {
    /// The 1000-step choices {50, 150, 250} rescaled to `steps`, tapping
    /// the middle block and the two coarsest decoder levels.
    pub fn default_for(model: &UnetModel<f32>, size: usize) -> Self {
        let steps = model.config().diffusion_steps;
        let timesteps = [50usize, 150, 250].iter().map(|t| (t * steps / 1000).clamp(1, steps)).collect();
        let levels = model.config().levels();
        let mut blocks = vec![BlockId::Middle];
        blocks.extend((0..levels).rev().take(2).map(BlockId::Decoder));
        FeatureSpec { timesteps, blocks, target: (size, size) }
    }

    pub fn validate(&self, model: &UnetModel<f32>) -> Result<()> {
        if self.timesteps.is_empty() || self.blocks.is_empty() {
            bail!(Config, "feature spec needs at least one timestep and one block");
        }
        let steps = model.config().diffusion_steps;
        if let Some(t) = self.timesteps.iter().find(|&&t| t == 0 || t > steps) {
            bail!(Config, "feature timestep {t} outside 1..={steps}");
        }
        for &b in &self.blocks {
            model.config().block_channels(b)?;
        }
        Ok(())
    }

    /// Feature width `Σ channels(block) · |timesteps|`.
    pub fn width(&self, model: &UnetModel<f32>) -> Result<usize> {
        let per: usize = self.blocks.iter().map(|&b| model.config().block_channels(b)).sum::<Result<usize>>()?;
        Ok(per * self.timesteps.len())
    }
}

/// Per-pixel features `[N·H·W, D]` for images `x: [N, 1, H, W]`; rows in
/// `(n, y, x)` order, columns grouped by timestep then block.
pub fn extract_features(
    model: &UnetModel<f32>,
    x: &Tensor<f32>,
    spec: &FeatureSpec,
    sched: &DiffusionSchedule,
    rng: &mut Rng,
) -> Result<Tensor<f32>> {
    if model.head() != HeadMode::Noise {
        bail!(Mode, "feature extraction uses the noise-prediction model");
    }
    spec.validate(model)?;
    let n = x.shape()[0];
    let (th, tw) = spec.target;
    let d = spec.width(model)?;
    let pixels = th * tw;
    let mut out = vec![0f32; n * pixels * d];
    let mut col = 0;
    for &t in &spec.timesteps {
        let eps: Tensor<f32> = normal(x.shape(), rng);
        let xt = q_sample(x, t, &eps, sched)?;
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let (_, taps) = bound.forward_capture(tape.constant(xt), &vec![t; n], &spec.blocks)?;
        for tap in taps {
            let v = tap.value();
            let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
            if th % h != 0 || tw % w != 0 {
                bail!(Config, "block resolution {h}x{w} does not divide target {th}x{tw}");
            }
            let data = v.data();
            for img in 0..n {
                for y in 0..th {
                    let sy = y * h / th;
                    for xx in 0..tw {
                        let sx = xx * w / tw;
                        let row = &mut out[((img * pixels) + y * tw + xx) * d + col..][..c];
                        for (ch, r) in row.iter_mut().enumerate() {
                            *r = data[((img * c + ch) * h + sy) * w + sx];
                        }
                    }
                }
            }
            col += c;
        }
    }
    Tensor::from_vec(&[n * pixels, d], out)
}

/// Raw little-endian f32 rows plus a `<path>.json` sidecar with the dims.
pub fn dump_features(path: &Path, features: &Tensor<f32>) -> Result<()> {
    let bytes: Vec<u8> = features.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let side = serde_json::json!({ "rows": features.shape()[0], "cols": features.shape()[1], "dtype": "f32" });
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    fs::write(name, serde_json::to_vec_pretty(&side)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_rows: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { hidden: vec![128, 128], epochs: 8, batch_rows: 256, lr: 1e-3, seed: 0 }
    }
}

/// Standardizes inputs with training statistics, then `Linear → SiLU`
/// per hidden layer and a final linear layer to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelClassifier {
    mean: Vec<f32>,
    inv_std: Vec<f32>,
    layers: Vec<Tensor<f32>>,
    classes: usize,
}

impl PixelClassifier {
    fn standardize(&self, features: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.mean.len();
        if features.rank() != 2 || features.shape()[1] != d {
            bail!(Dimension, "classifier expects [rows, {d}] features, got {:?}", features.shape());
        }
        let mut out = features.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        Ok(out)
    }

    fn logits<'t>(&self, tape: &'t Tape<f32>, params: &[crate::Var<'t, f32>], x: Tensor<f32>) -> Result<crate::Var<'t, f32>> {
        let mut h = tape.constant(x);
        let depth = params.len() / 2;
        for l in 0..depth {
            h = h.linear(params[2 * l], Some(params[2 * l + 1]))?;
            if l + 1 < depth {
                h = h.silu()?;
            }
        }
        Ok(h)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Per-row argmax, ties to the lowest class.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<u8>> {
        let x = self.standardize(features)?;
        let tape = Tape::new();
        let params: Vec<_> = self.layers.iter().map(|p| tape.constant(p.clone())).collect();
        let logits = self.logits(&tape, &params, x)?.value();
        let c = self.classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect())
    }
}

pub fn train_pixel_classifier(features: &Tensor<f32>, labels: &[u8], classes: usize, cfg: &MlpConfig) -> Result<PixelClassifier> {
    if features.rank() != 2 {
        bail!(Dimension, "features must be [rows, D], got {:?}", features.shape());
    }
    let (rows, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != rows {
        bail!(Contract, "{} labels for {rows} feature rows", labels.len());
    }
    if cfg.batch_rows == 0 {
        bail!(Config, "batch_rows must be positive");
    }
    let mut mean = vec![0f64; d];
    let mut sq = vec![0f64; d];
    for row in features.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            mean[j] += v as f64;
            sq[j] += (v as f64) * (v as f64);
        }
    }
    let inv_std: Vec<f32> = (0..d)
        .map(|j| {
            let m = mean[j] / rows as f64;
            let var = (sq[j] / rows as f64 - m * m).max(0.0);
            if var.sqrt() < 1e-6 {
                0.0
            } else {
                (1.0 / var.sqrt()) as f32
            }
        })
        .collect();
    let mean: Vec<f32> = mean.iter().map(|m| (m / rows as f64) as f32).collect();

    let mut rng = seeded(cfg.seed);
    let mut widths = vec![d];
    widths.extend(&cfg.hidden);
    widths.push(classes);
    let mut layers = Vec::new();
    for w in widths.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        layers.push(Tensor::from_fn(&[w[1], w[0]], |_| rng.random_range(-bound..bound) as f32));
        layers.push(Tensor::from_fn(&[w[1]], |_| rng.random_range(-bound..bound) as f32));
    }
    let mut clf = PixelClassifier { mean, inv_std, layers, classes };
    let x = clf.standardize(features)?;
    let mut opt = OptimState::new(&clf.layers, AdamHyper::default());
    let mut order: Vec<usize> = (0..rows).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut derive(cfg.seed, epoch as u64));
        for chunk in order.chunks(cfg.batch_rows) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &r in chunk {
                xb.extend_from_slice(&x.data()[r * d..(r + 1) * d]);
            }
            let targets: Vec<usize> = chunk.iter().map(|&r| labels[r] as usize).collect();
            let tape = Tape::new();
            let params: Vec<_> = clf.layers.iter().map(|p| tape.param(p.clone())).collect();
            let loss = clf.logits(&tape, &params, Tensor::from_vec(&[chunk.len(), d], xb)?)?.cross_entropy(&targets)?;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = params.iter().map(|&p| g.take(p)).collect();
            opt.update(&mut clf.layers, &grads, cfg.lr)?;
        }
    }
    Ok(clf)
}

/// Feature extractor plus classifier, fitted on labeled images.
#[derive(Debug, Clone)]
pub struct DdpmMlp {
    pub spec: FeatureSpec,
    pub classifier: PixelClassifier,
    feature_seed: u64,
}

impl DdpmMlp {
    pub fn fit(
        model: &UnetModel<f32>,
        train: &[&SegSample],
        spec: FeatureSpec,
        sched: &DiffusionSchedule,
        mlp: &MlpConfig,
        seed: u64,
    ) -> Result<Self> {
        if train.is_empty() {
            bail!(Config, "DDPM-MLP needs at least one labeled sample");
        }
        let (feats, labels) = Self::features_for(model, train, &spec, sched, seed, true)?;
        let classifier = train_pixel_classifier(&feats, &labels, model.config().num_classes, mlp)?;
        Ok(DdpmMlp { spec, classifier, feature_seed: seed })
    }

    fn features_for(
        model: &UnetModel<f32>,
        samples: &[&SegSample],
        spec: &FeatureSpec,
        sched: &DiffusionSchedule,
        seed: u64,
        with_labels: bool,
    ) -> Result<(Tensor<f32>, Vec<u8>)> {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut d = 0;
        for (i, s) in samples.iter().enumerate() {
            let x = Tensor::stack(&[&s.image])?;
            let f = extract_features(model, &x, spec, sched, &mut derive(seed, i as u64))?;
            d = f.shape()[1];
            rows.extend_from_slice(f.data());
            if with_labels {
                labels.extend_from_slice(&s.labels()?.labels);
            }
        }
        Ok((Tensor::from_vec(&[rows.len() / d, d], rows)?, labels))
    }

    pub fn predict(&self, model: &UnetModel<f32>, sample: &SegSample, sched: &DiffusionSchedule, index: u64) -> Result<Vec<u8>> {
        let x = Tensor::stack(&[&sample.image])?;
        let stream = (1 << 32) + index;
        let f = extract_features(model, &x, &self.spec, sched, &mut derive(self.feature_seed, stream))?;
        self.classifier.predict(&f)
    }

    pub fn evaluate(&self, model: &UnetModel<f32>, samples: &[&SegSample], sched: &DiffusionSchedule) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(self.classifier.classes());
        for (i, s) in samples.iter().enumerate() {
            cm.accumulate(&self.predict(model, s, sched, i as u64)?, &s.labels()?.labels)?;
        }
        Ok(cm)
    }
}
