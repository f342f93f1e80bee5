//! Adam, the cosine schedule, and the two training loops: noise-prediction
//! pre-training and segmentation fine-tuning.

mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddpm_loss, DiffusionSchedule, ScheduleKind};
use crate::error::{bail, Result};
use crate::metrics::ConfusionMatrix;
use crate::rng::{derive, Rng};
use crate::segdata::{random_affine, SegSample};
use crate::tensor::{Tape, Tensor, Var};
use crate::unet::{load_checkpoint, save_checkpoint, HeadMode, UnetModel};

pub use optim::{cosine_lr, AdamHyper, OptimState};

/// Offset separating fine-tune streams from pre-training streams.
const FINETUNE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_iters: usize,
    pub finetune_epochs: usize,
    /// Lower bound on batches per fine-tune epoch.
    pub min_batches_per_epoch: usize,
    pub lr: f64,
    /// Pre-training learning rate; `lr` when unset.
    pub pretrain_lr: Option<f64>,
    pub weight_decay: f64,
    pub diffusion_steps: usize,
    pub schedule: ScheduleKind,
    pub finetune_timestep: usize,
    pub seed: u64,
    pub checkpoint_iters: Vec<usize>,
    pub augment: bool,
    pub checked: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            pretrain_iters: 5000,
            finetune_epochs: 200,
            min_batches_per_epoch: 16,
            lr: 1e-4,
            pretrain_lr: None,
            weight_decay: 1e-4,
            diffusion_steps: 100,
            schedule: ScheduleKind::Linear,
            finetune_timestep: 1,
            seed: 0,
            checkpoint_iters: vec![250, 1000, 2500, 5000],
            augment: true,
            checked: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.diffusion_steps == 0 || self.min_batches_per_epoch == 0 {
            bail!(Config, "batch size, diffusion steps and batches per epoch must be positive");
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.pretrain_lr.is_none_or(|lr| lr >= 0.0)) {
            bail!(Config, "lr and weight decay must be non-negative");
        }
        if self.finetune_timestep == 0 || self.finetune_timestep > self.diffusion_steps {
            bail!(Config, "finetune timestep {} outside 1..={}", self.finetune_timestep, self.diffusion_steps);
        }
        if self.checkpoint_iters.contains(&0) {
            bail!(Config, "checkpoint iterations must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        match self.schedule {
            ScheduleKind::Linear => DiffusionSchedule::linear_default(self.diffusion_steps),
            ScheduleKind::Cosine => DiffusionSchedule::new(self.diffusion_steps, ScheduleKind::Cosine, 0.0, 0.0),
        }
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper { weight_decay: self.weight_decay, ..AdamHyper::default() }
    }

    pub fn batches_per_epoch(&self, n_train: usize) -> usize {
        n_train.max(self.min_batches_per_epoch)
    }

    fn tape(&self) -> Tape<f32> {
        if self.checked {
            Tape::checked()
        } else {
            Tape::new()
        }
    }
}

/// Mean pixel cross-entropy of `[N, C, H, W]` logits against `[N, H, W]` labels.
pub fn cross_entropy<'t>(logits: Var<'t, f32>, mask: &[u8]) -> Result<Var<'t, f32>> {
    let targets: Vec<usize> = mask.iter().map(|&m| m as usize).collect();
    logits.cross_entropy(&targets)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainLog {
    pub rows: Vec<LossRow>,
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub resumed_from: Option<usize>,
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("ckpt-{iter:06}.ptdr"))
}

fn optim_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("ckpt-{iter:06}.opt"))
}

fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "iter,loss,lr")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.iter, r.loss, r.lr)?;
    }
    out.flush()?;
    Ok(())
}

fn read_loss_csv(path: &Path, upto: usize) -> Result<Vec<LossRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| s.parse::<f64>().map_err(|_| crate::Error::Format(format!("bad loss row {line:?}")));
        if f.len() != 3 {
            bail!(Format, "bad loss row {line:?}");
        }
        let iter = parse(f[0])? as usize;
        if iter <= upto {
            rows.push(LossRow { iter, loss: parse(f[1])?, lr: parse(f[2])? });
        }
    }
    Ok(rows)
}

/// Pool images `[1, H, W]` stacked by index.
fn batch_of(pool: &[&Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
    let items: Vec<&Tensor<f32>> = idx.iter().map(|&i| pool[i]).collect();
    Tensor::stack(&items)
}

/// `k` indices out of `n`: distinct when `n >= k`, with replacement otherwise.
fn draw_batch(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    }
}

/// Noise-prediction training. Iteration `i` draws its batch, timesteps and
/// noise from stream `i` of `cfg.seed`, so a run resumed from a checkpoint
/// replays the uninterrupted run exactly. With `out`, writes `loss.csv`,
/// checkpoints and optimizer state at `cfg.checkpoint_iters`, and resumes
/// from the latest checkpoint already present there.
pub fn pretrain(cfg: &TrainConfig, pool: &[&Tensor<f32>], model: &mut UnetModel<f32>, out: Option<&Path>) -> Result<PretrainLog> {
    pretrain_until(cfg, pool, model, out, cfg.pretrain_iters)
}

/// [`pretrain`] that stops after iteration `stop` while keeping the
/// learning-rate schedule of the full `cfg.pretrain_iters` run.
pub fn pretrain_until(
    cfg: &TrainConfig,
    pool: &[&Tensor<f32>],
    model: &mut UnetModel<f32>,
    out: Option<&Path>,
    stop: usize,
) -> Result<PretrainLog> {
    cfg.validate()?;
    let stop = stop.min(cfg.pretrain_iters);
    if model.head() != HeadMode::Noise {
        bail!(Mode, "pre-training needs the noise head");
    }
    if model.config().diffusion_steps != cfg.diffusion_steps {
        bail!(Config, "model embeds {} steps, training uses {}", model.config().diffusion_steps, cfg.diffusion_steps);
    }
    if pool.is_empty() {
        bail!(Config, "empty pre-training pool");
    }
    let sched = cfg.schedule()?;
    let mut opt = OptimState::new(model.params().tensors(), cfg.adam());
    opt.checked = cfg.checked;
    let mut log = PretrainLog::default();
    let mut start = 0;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let mut done: Vec<usize> = cfg.checkpoint_iters.iter().copied().filter(|&i| i <= stop).collect();
        done.sort_unstable();
        for &it in done.iter().rev() {
            if checkpoint_path(dir, it).exists() && optim_path(dir, it).exists() && dir.join("loss.csv").exists() {
                *model = load_checkpoint(&checkpoint_path(dir, it))?;
                opt = OptimState::load(&optim_path(dir, it))?;
                opt.checked = cfg.checked;
                log.rows = read_loss_csv(&dir.join("loss.csv"), it)?;
                start = it;
                log.resumed_from = Some(it);
                break;
            }
        }
        for &it in done.iter().filter(|&&i| i <= start) {
            log.checkpoints.push((it, checkpoint_path(dir, it)));
        }
    }
    for i in start..stop {
        let mut rng = derive(cfg.seed, i as u64);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..pool.len())).collect();
        let x0 = batch_of(pool, &idx)?;
        let lr = cosine_lr(i, cfg.pretrain_iters, cfg.pretrain_lr.unwrap_or(cfg.lr));
        let tape = cfg.tape();
        let grads = {
            let bound = model.bind(&tape, true);
            let loss = ddpm_loss(&bound, &tape, &x0, &sched, &mut rng)?;
            log.rows.push(LossRow { iter: i + 1, loss: loss.value().item()?.into(), lr });
            let mut g = tape.backward(loss)?;
            bound.collect_grads(&mut g)
        };
        opt.update(model.params_mut().tensors_mut(), &grads, lr)?;
        if let Some(dir) = out {
            if cfg.checkpoint_iters.contains(&(i + 1)) {
                save_checkpoint(model, &checkpoint_path(dir, i + 1))?;
                opt.save(&optim_path(dir, i + 1))?;
                write_loss_csv(&dir.join("loss.csv"), &log.rows)?;
                log.checkpoints.push((i + 1, checkpoint_path(dir, i + 1)));
            }
        }
    }
    if let Some(dir) = out {
        write_loss_csv(&dir.join("loss.csv"), &log.rows)?;
    }
    Ok(log)
}

/// Confusion matrix of `model`'s argmax predictions at timestep `t`.
pub fn evaluate(model: &UnetModel<f32>, samples: &[&SegSample], t: usize, num_classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for chunk in samples.chunks(8) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let pred = model.segment(&Tensor::stack(&images)?, t)?;
        let per = pred.len() / chunk.len();
        for (s, p) in chunk.iter().zip(pred.chunks(per)) {
            cm.accumulate(p, &s.labels()?.labels)?;
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: UnetModel<f32>,
    /// Validation mIoU after each epoch (empty without a validation set).
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
    pub epoch_losses: Vec<f64>,
}

impl FinetuneResult {
    pub fn best_val_miou(&self) -> Option<f64> {
        self.val_history.get(self.best_epoch.checked_sub(1)?).copied()
    }

    pub fn final_val_miou(&self) -> Option<f64> {
        self.val_history.last().copied()
    }
}

/// Segmentation fine-tuning of every trunk parameter plus the segmentation
/// head, at the fixed timestep `cfg.finetune_timestep`. Returns the
/// parameters of the epoch with the best validation mIoU (the last epoch
/// when `val` is empty).
pub fn finetune(
    cfg: &TrainConfig,
    mut model: UnetModel<f32>,
    train: &[&SegSample],
    val: &[&SegSample],
) -> Result<FinetuneResult> {
    cfg.validate()?;
    if train.is_empty() {
        bail!(Config, "fine-tuning needs at least one labeled sample");
    }
    if model.config().diffusion_steps != cfg.diffusion_steps {
        bail!(Config, "model embeds {} steps, training uses {}", model.config().diffusion_steps, cfg.diffusion_steps);
    }
    model.set_head(HeadMode::Segmentation);
    let classes = model.config().num_classes;
    let per_epoch = cfg.batches_per_epoch(train.len());
    let total = per_epoch * cfg.finetune_epochs;
    let mut opt = OptimState::new(model.params().tensors(), cfg.adam());
    opt.checked = cfg.checked;
    let t = cfg.finetune_timestep;
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let mut result = FinetuneResult { model: model.clone(), val_history: Vec::new(), best_epoch: 0, epoch_losses: Vec::new() };
    for epoch in 0..cfg.finetune_epochs {
        let mut loss_sum = 0.0;
        for b in 0..per_epoch {
            let step = epoch * per_epoch + b;
            let mut rng = derive(cfg.seed, FINETUNE_STREAM + step as u64);
            let idx = draw_batch(train.len(), cfg.batch_size, &mut rng);
            let batch: Vec<SegSample> = idx
                .iter()
                .map(|&i| if cfg.augment { random_affine(train[i], &mut rng) } else { train[i].clone() })
                .collect();
            let images: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.image).collect();
            let x = Tensor::stack(&images)?;
            let mut labels = Vec::with_capacity(x.numel());
            for s in &batch {
                labels.extend_from_slice(&s.labels()?.labels);
            }
            let lr = cosine_lr(step, total, cfg.lr);
            let tape = cfg.tape();
            let grads = {
                let bound = model.bind(&tape, true);
                let logits = bound.forward(tape.constant(x), &vec![t; batch.len()])?;
                let loss = cross_entropy(logits, &labels)?;
                loss_sum += f64::from(loss.value().item()?);
                let mut g = tape.backward(loss)?;
                bound.collect_grads(&mut g)
            };
            opt.update(model.params_mut().tensors_mut(), &grads, lr)?;
        }
        result.epoch_losses.push(loss_sum / per_epoch as f64);
        if !val.is_empty() {
            let score = evaluate(&model, val, t, classes)?.miou()?;
            result.val_history.push(score);
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params().tensors().to_vec()));
                result.best_epoch = epoch + 1;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().tensors_mut().clone_from_slice(&params);
    } else {
        result.best_epoch = cfg.finetune_epochs;
    }
    result.model = model;
    Ok(result)
}
