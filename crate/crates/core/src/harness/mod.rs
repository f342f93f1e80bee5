//! Experiment orchestration: one pre-training run per work directory, then
//! label-efficiency, timestep and saturation sweeps over fine-tune seeds.
//!
//! Every (method, init, shots, timestep, seed) fine-tune is a cached point
//! under `<work>/points/`, so sweeps share runs, and an interrupted sweep
//! resumes by computing only the missing points.

mod report;
#[cfg(test)]
mod tests;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::{DdpmMlp, FeatureSpec, MlpConfig};
use crate::diffusion::{generate, DiffusionSchedule};
use crate::error::{bail, Result};
use crate::rng::{derive, seeded};
use crate::segdata::{
    load_dataset, make_benchmark, quantize, save_dataset, BenchmarkSpec, DataKind, Dataset, Entry, Mask, SegSample, Split,
};
use crate::tensor::Tensor;
use crate::train::{checkpoint_path, evaluate, finetune, pretrain, FinetuneResult, TrainConfig};
use crate::unet::{load_checkpoint, BlockId, HeadMode, UnetConfig, UnetModel};

pub use report::{ExperimentReport, PointSummary, ReportRow};

const INIT_STREAM: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    /// Load this dataset instead of generating one.
    pub dir: Option<PathBuf>,
    pub seed: u64,
    pub sizes: BenchmarkSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { kind: DataKind::Bitewing, dir: None, seed: 0, sizes: BenchmarkSpec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct BaselineConfig {
    /// Defaults to the rescaled {50, 150, 250}.
    pub timesteps: Option<Vec<usize>>,
    /// Defaults to the middle block and the two coarsest decoder levels.
    pub blocks: Option<Vec<BlockId>>,
    pub mlp: MlpConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub shots: Vec<usize>,
    /// Shots at which the random-init and DDPM-MLP references also run in
    /// the label sweep; empty means every entry of `shots`.
    pub reference_shots: Vec<usize>,
    pub include_ddpm_mlp: bool,
    /// Defaults to `[1, T]`.
    pub timesteps: Option<Vec<usize>>,
    /// Defaults to `0` (random init) plus every pre-training checkpoint.
    pub checkpoint_iters: Option<Vec<usize>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seeds: vec![0, 1, 2],
            shots: vec![1, 2, 5, 10],
            reference_shots: Vec::new(),
            include_ddpm_mlp: true,
            timesteps: None,
            checkpoint_iters: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub unet: UnetConfig,
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    /// TOML for `.toml` paths, JSON otherwise.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| crate::Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.train.validate()?;
        if self.unet.diffusion_steps != self.train.diffusion_steps {
            bail!(Config, "unet.diffusion_steps {} != train.diffusion_steps {}", self.unet.diffusion_steps, self.train.diffusion_steps);
        }
        if self.unet.num_classes != self.data.kind.num_classes() {
            bail!(Config, "unet.num_classes {} but {:?} data has {}", self.unet.num_classes, self.data.kind, self.data.kind.num_classes());
        }
        if !self.data.sizes.size.is_multiple_of(self.unet.downsample_factor()) {
            bail!(Config, "image size {} not divisible by {}", self.data.sizes.size, self.unet.downsample_factor());
        }
        if self.sweep.seeds.is_empty() {
            bail!(Config, "at least one sweep seed is needed");
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, hex.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of the parts that determine cached points (not the sweep axes).
    fn work_hash(&self) -> String {
        hash_json(&(&self.data, &self.unet, &self.train, &self.baseline))
    }

    fn timesteps(&self) -> Vec<usize> {
        self.sweep.timesteps.clone().unwrap_or_else(|| vec![1, self.train.diffusion_steps])
    }

    fn pretrain_iters(&self) -> Vec<usize> {
        let mut its: Vec<usize> =
            self.train.checkpoint_iters.iter().copied().filter(|&i| i <= self.train.pretrain_iters).collect();
        its.push(self.train.pretrain_iters);
        its.sort_unstable();
        its.dedup();
        its
    }
}

fn hash_json(v: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Initialization of a fine-tune run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Random,
    Pretrained(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointResult {
    pub miou: f64,
    pub wallclock_s: f64,
    pub best_val_miou: Option<f64>,
}

pub struct Harness {
    cfg: ExperimentConfig,
    work: PathBuf,
    data: Dataset,
}

impl Harness {
    /// Opens (or creates) a work directory bound to `cfg`. A directory
    /// created for a different data/model/training configuration is
    /// rejected so cached points never mix.
    pub fn open(cfg: ExperimentConfig, work: &Path) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(work.join("points"))?;
        let stamp = work.join("work.json");
        let hash = cfg.work_hash();
        if stamp.exists() {
            let prev: serde_json::Value = serde_json::from_slice(&fs::read(&stamp)?)?;
            if prev["hash"] != hash.as_str() {
                bail!(Config, "work directory {} was created for a different configuration", work.display());
            }
        } else {
            let body = serde_json::json!({ "hash": hash, "config": &cfg });
            fs::write(&stamp, serde_json::to_vec_pretty(&body)?)?;
        }
        let data = match &cfg.data.dir {
            Some(dir) => load_dataset(dir)?,
            None => make_benchmark(cfg.data.kind, &cfg.data.sizes, cfg.data.seed)?,
        };
        if data.num_classes != cfg.unet.num_classes {
            bail!(Config, "dataset has {} classes, model {}", data.num_classes, cfg.unet.num_classes);
        }
        Ok(Harness { cfg, work: work.to_path_buf(), data })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.work.join("pretrain")
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig { checkpoint_iters: self.cfg.pretrain_iters(), ..self.cfg.train.clone() }
    }

    /// Runs (or resumes) pre-training on the unlabeled pool.
    pub fn pretrain(&self) -> Result<()> {
        let last = self.cfg.train.pretrain_iters;
        if checkpoint_path(&self.pretrain_dir(), last).exists() {
            return Ok(());
        }
        let pool: Vec<&Tensor<f32>> = self.data.split(Split::Pretrain).into_iter().map(|s| &s.image).collect();
        let mut model = UnetModel::<f32>::new(self.cfg.unet.clone(), &mut seeded(self.cfg.train.seed))?;
        let start = Instant::now();
        pretrain(&self.train_cfg(), &pool, &mut model, Some(&self.pretrain_dir()))?;
        let total = self.pretrain_wallclock() + start.elapsed().as_secs_f64();
        fs::write(self.pretrain_dir().join("wallclock_s"), format!("{total}\n"))?;
        Ok(())
    }

    /// Seconds spent pre-training so far, summed over resumed sessions.
    pub fn pretrain_wallclock(&self) -> f64 {
        fs::read_to_string(self.pretrain_dir().join("wallclock_s"))
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(0.0)
    }

    pub fn checkpoint(&self, iter: usize) -> Result<UnetModel<f32>> {
        let path = checkpoint_path(&self.pretrain_dir(), iter);
        if !path.exists() {
            bail!(Config, "missing pre-training checkpoint {}", path.display());
        }
        load_checkpoint(&path)
    }

    fn initial_model(&self, init: Init, seed: u64) -> Result<UnetModel<f32>> {
        match init {
            Init::Random | Init::Pretrained(0) => {
                UnetModel::new(self.cfg.unet.clone(), &mut derive(seed, INIT_STREAM))
            }
            Init::Pretrained(it) => self.checkpoint(it),
        }
    }

    /// First `shots` training samples (nested across shot counts).
    pub fn train_subset(&self, shots: usize) -> Result<Vec<&SegSample>> {
        let train = self.data.split(Split::Train);
        if shots == 0 || shots > train.len() {
            bail!(Config, "{shots}-shot needs 1..={} training samples", train.len());
        }
        Ok(train[..shots].to_vec())
    }

    /// Fine-tunes from `init` on a `shots` subset at timestep `t`.
    pub fn finetune_run(&self, init: Init, shots: usize, t: usize, seed: u64) -> Result<FinetuneResult> {
        let cfg = TrainConfig { seed, finetune_timestep: t, ..self.cfg.train.clone() };
        cfg.validate()?;
        let model = self.initial_model(init, seed)?;
        finetune(&cfg, model, &self.train_subset(shots)?, &self.data.split(Split::Val))
    }

    pub fn test_miou(&self, model: &UnetModel<f32>, t: usize) -> Result<f64> {
        evaluate(model, &self.data.split(Split::Test), t, self.cfg.unet.num_classes)?.miou()
    }

    fn cached(&self, key: &str, run: impl FnOnce() -> Result<(f64, Option<f64>)>) -> Result<PointResult> {
        let path = self.work.join("points").join(format!("{key}.json"));
        if path.exists() {
            return Ok(serde_json::from_slice(&fs::read(&path)?)?);
        }
        let start = Instant::now();
        let (miou, best_val_miou) = run()?;
        let point = PointResult { miou, wallclock_s: start.elapsed().as_secs_f64(), best_val_miou };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&point)?)?;
        fs::rename(&tmp, &path)?;
        Ok(point)
    }

    /// Test mIoU of a segmentation fine-tune, cached.
    pub fn finetune_point(&self, init: Init, shots: usize, t: usize, seed: u64) -> Result<PointResult> {
        if t == 0 || t > self.cfg.train.diffusion_steps {
            bail!(Config, "timestep {t} outside 1..={}", self.cfg.train.diffusion_steps);
        }
        let key = match init {
            Init::Random | Init::Pretrained(0) => format!("random-k{shots}-t{t}-s{seed}"),
            Init::Pretrained(it) => format!("ptdr-i{it}-k{shots}-t{t}-s{seed}"),
        };
        if let Init::Pretrained(it) = init {
            if it > 0 {
                self.checkpoint(it)?;
            }
        }
        self.cached(&key, || {
            let out = self.finetune_run(init, shots, t, seed)?;
            Ok((self.test_miou(&out.model, t)?, out.best_val_miou()))
        })
    }

    pub fn feature_spec(&self, model: &UnetModel<f32>) -> FeatureSpec {
        let mut spec = FeatureSpec::default_for(model, self.cfg.data.sizes.size);
        if let Some(t) = &self.cfg.baseline.timesteps {
            spec.timesteps = t.clone();
        }
        if let Some(b) = &self.cfg.baseline.blocks {
            spec.blocks = b.clone();
        }
        spec
    }

    /// Test mIoU of the DDPM-MLP baseline on the final checkpoint, cached.
    pub fn ddpm_mlp_point(&self, shots: usize, seed: u64) -> Result<PointResult> {
        let it = self.cfg.train.pretrain_iters;
        let model = self.checkpoint(it)?;
        self.cached(&format!("mlp-i{it}-k{shots}-s{seed}"), || {
            let sched = self.cfg.train.schedule()?;
            let spec = self.feature_spec(&model);
            let mlp = MlpConfig { seed, ..self.cfg.baseline.mlp.clone() };
            let fitted = DdpmMlp::fit(&model, &self.train_subset(shots)?, spec, &sched, &mlp, seed)?;
            Ok((fitted.evaluate(&model, &self.data.split(Split::Test), &sched)?.miou()?, None))
        })
    }

    fn report(&self, kind: &str) -> ExperimentReport {
        ExperimentReport::new(kind, self.cfg.sweep.seeds.clone(), self.cfg.hash())
    }

    /// PTDR at every shot count; random-init and DDPM-MLP references at
    /// `reference_shots`.
    pub fn label_efficiency_sweep(&self, shots: &[usize], seeds: &[u64]) -> Result<ExperimentReport> {
        let last = self.cfg.train.pretrain_iters;
        self.checkpoint(last)?;
        let t = self.cfg.train.finetune_timestep;
        let refs = if self.cfg.sweep.reference_shots.is_empty() { shots.to_vec() } else { self.cfg.sweep.reference_shots.clone() };
        let mut rep = self.report("labels");
        for &k in shots {
            for &s in seeds {
                rep.push("labels/ptdr", k, s, self.finetune_point(Init::Pretrained(last), k, t, s)?);
            }
        }
        for &k in &refs {
            for &s in seeds {
                rep.push("labels/random", k, s, self.finetune_point(Init::Random, k, t, s)?);
                if self.cfg.sweep.include_ddpm_mlp {
                    rep.push("labels/ddpm-mlp", k, s, self.ddpm_mlp_point(k, s)?);
                }
            }
        }
        Ok(rep)
    }

    pub fn timestep_sweep(&self, timesteps: &[usize], seeds: &[u64]) -> Result<ExperimentReport> {
        let last = self.cfg.train.pretrain_iters;
        if let Some(t) = timesteps.iter().find(|&&t| t == 0 || t > self.cfg.train.diffusion_steps) {
            bail!(Config, "timestep {t} outside 1..={}", self.cfg.train.diffusion_steps);
        }
        self.checkpoint(last)?;
        let k = self.max_shots();
        let mut rep = self.report("timestep");
        for &t in timesteps {
            for &s in seeds {
                rep.push("timestep/ptdr", t, s, self.finetune_point(Init::Pretrained(last), k, t, s)?);
            }
        }
        Ok(rep)
    }

    /// `0` in `iters` stands for random initialization.
    pub fn saturation_sweep(&self, iters: &[usize], seeds: &[u64]) -> Result<ExperimentReport> {
        for &it in iters.iter().filter(|&&i| i > 0) {
            self.checkpoint(it)?;
        }
        let k = self.max_shots();
        let t = self.cfg.train.finetune_timestep;
        let mut rep = self.report("saturation");
        for &it in iters {
            for &s in seeds {
                rep.push("saturation/ptdr", it, s, self.finetune_point(Init::Pretrained(it), k, t, s)?);
            }
        }
        Ok(rep)
    }

    fn max_shots(&self) -> usize {
        self.cfg.sweep.shots.iter().copied().max().unwrap_or(1).min(self.data.split(Split::Train).len())
    }

    pub fn run_sweep(&self, kind: SweepKind) -> Result<ExperimentReport> {
        let seeds = self.cfg.sweep.seeds.clone();
        match kind {
            SweepKind::Labels => self.label_efficiency_sweep(&self.cfg.sweep.shots.clone(), &seeds),
            SweepKind::Timestep => self.timestep_sweep(&self.cfg.timesteps(), &seeds),
            SweepKind::Saturation => {
                let iters = self.cfg.sweep.checkpoint_iters.clone().unwrap_or_else(|| {
                    let mut v = vec![0];
                    v.extend(self.cfg.pretrain_iters());
                    v
                });
                self.saturation_sweep(&iters, &seeds)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepKind {
    Labels,
    Timestep,
    Saturation,
}

impl std::str::FromStr for SweepKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "labels" => Ok(SweepKind::Labels),
            "timestep" => Ok(SweepKind::Timestep),
            "saturation" => Ok(SweepKind::Saturation),
            _ => bail!(Config, "unknown sweep {s:?} (labels, timestep, saturation)"),
        }
    }
}

/// Samples `n` images from the noise model, labels each with the
/// segmenter's argmax at `t`, and writes them as a dataset flagged
/// `generated`. Images are quantized before labeling so the stored pair
/// is exactly what was segmented.
#[allow(clippy::too_many_arguments)]
pub fn generate_dataset(
    noise: &UnetModel<f32>,
    seg: &UnetModel<f32>,
    n: usize,
    size: usize,
    t: usize,
    seed: u64,
    sched: &DiffusionSchedule,
    out: Option<&Path>,
) -> Result<Dataset> {
    if noise.head() != HeadMode::Noise {
        bail!(Mode, "image sampling needs a noise-prediction checkpoint");
    }
    if seg.head() != HeadMode::Segmentation {
        bail!(Mode, "labeling needs a segmentation checkpoint");
    }
    let mut entries = Vec::with_capacity(n);
    let batch = 8;
    for start in (0..n).step_by(batch) {
        let m = batch.min(n - start);
        let x = generate(noise, sched, &[m, 1, size, size], &mut derive(seed, start as u64))?;
        let q = quantize(&x);
        let x = crate::segdata::normalize(&Tensor::from_vec(x.shape(), q.iter().map(|&b| b as f32).collect())?)?;
        let labels = seg.segment(&x, t)?;
        let per = size * size;
        for j in 0..m {
            let image = Tensor::from_vec(&[1, size, size], x.data()[j * per..(j + 1) * per].to_vec())?;
            let mask = Mask::new(size, size, labels[j * per..(j + 1) * per].to_vec())?;
            let sample = SegSample { id: format!("gen-{:05}", start + j), image, mask: Some(mask) };
            entries.push(Entry { sample, split: Split::Train, generated: true });
        }
    }
    let data = Dataset { num_classes: seg.config().num_classes, entries };
    if let Some(dir) = out {
        save_dataset(dir, &data)?;
    }
    Ok(data)
}
