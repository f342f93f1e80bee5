use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ptdr::harness::{generate_dataset, ExperimentConfig, Harness, SweepKind};
use ptdr::rng::seeded;
use ptdr::segdata::{load_dataset, make_benchmark, save_dataset, BenchmarkSpec, DataKind, Dataset, SegSample, Split};
use ptdr::train::{evaluate, finetune, TrainConfig};
use ptdr::unet::{load_checkpoint, save_checkpoint, UnetModel};
use ptdr::Result;

#[derive(Parser)]
#[command(name = "ptdr", version, about = "Diffusion pre-training and few-shot segmentation fine-tuning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic benchmark (PGM images and masks plus index.json).
    MakeData {
        #[arg(long, default_value = "bitewing")]
        kind: String,
        /// Total number of samples, unlabeled plus labeled.
        #[arg(short, long, default_value_t = 2600)]
        n: usize,
        /// Labeled samples among `n`; 10 train and 5 val, the rest test.
        #[arg(long, default_value_t = 100)]
        labeled: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train the noise predictor; resumes from the latest checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "work")]
        work: PathBuf,
    },
    /// Fine-tune for segmentation from a checkpoint (random init if omitted).
    Finetune {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        timestep: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-class IoU and mIoU of a segmentation checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        timestep: Option<usize>,
    },
    /// Run a sweep and write `<out>` (rows) and `<out>.json` (summary).
    Sweep {
        #[arg(value_enum)]
        kind: SweepArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "work")]
        work: PathBuf,
    },
    /// Sample images from a noise checkpoint and label them with a
    /// segmentation checkpoint.
    Generate {
        #[arg(long)]
        noise_ckpt: PathBuf,
        #[arg(long)]
        seg_ckpt: PathBuf,
        #[arg(short, long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Labels,
    Timestep,
    Saturation,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset> {
    match dir.or(cfg.data.dir.as_deref()) {
        Some(d) => load_dataset(d),
        None => make_benchmark(cfg.data.kind, &cfg.data.sizes, cfg.data.seed),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::MakeData { kind, n, labeled, size, seed, out } => {
            let kind: DataKind = kind.parse()?;
            if labeled < 16 || labeled > n {
                return Err(ptdr::Error::Config(format!("need 16..={n} labeled samples (10 train, 5 val, at least 1 test)")));
            }
            let spec = BenchmarkSpec { n_pretrain: n - labeled, n_train: 10, n_val: 5, n_test: labeled - 15, size };
            let data = make_benchmark(kind, &spec, seed)?;
            save_dataset(&out, &data)?;
            println!("wrote {} samples to {}", data.entries.len(), out.display());
        }
        Cmd::Pretrain { config, work } => {
            let h = Harness::open(load_config(config.as_deref())?, &work)?;
            h.pretrain()?;
            println!("checkpoints in {}", h.pretrain_dir().display());
        }
        Cmd::Finetune { ckpt, shots, config, data, seed, timestep, out } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&cfg, data.as_deref())?;
            let model = match &ckpt {
                Some(p) => load_checkpoint(p)?,
                None => UnetModel::<f32>::new(cfg.unet.clone(), &mut seeded(seed))?,
            };
            let t = timestep.unwrap_or(cfg.train.finetune_timestep);
            let tc = TrainConfig { seed, finetune_timestep: t, diffusion_steps: model.config().diffusion_steps, ..cfg.train.clone() };
            let train = data.split(Split::Train);
            if shots == 0 || shots > train.len() {
                return Err(ptdr::Error::Config(format!("{shots}-shot needs 1..={} training samples", train.len())));
            }
            let res = finetune(&tc, model, &train[..shots], &data.split(Split::Val))?;
            let test = evaluate(&res.model, &data.split(Split::Test), t, data.num_classes)?;
            println!("best epoch {} val mIoU {:.4}", res.best_epoch, res.best_val_miou().unwrap_or(f64::NAN));
            println!("test mIoU {:.4}", test.miou()?);
            if let Some(out) = out {
                save_checkpoint(&res.model, &out)?;
            }
        }
        Cmd::Eval { ckpt, split, config, data, timestep } => {
            let cfg = load_config(config.as_deref())?;
            let data = load_data(&cfg, data.as_deref())?;
            let model: UnetModel<f32> = load_checkpoint(&ckpt)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Val => Split::Val,
                SplitArg::Test => Split::Test,
            };
            let samples: Vec<&SegSample> = data.split(split);
            let cm = evaluate(&model, &samples, timestep.unwrap_or(cfg.train.finetune_timestep), data.num_classes)?;
            cm.write_csv(std::io::stdout().lock())?;
        }
        Cmd::Sweep { kind, config, out, work } => {
            let h = Harness::open(load_config(config.as_deref())?, &work)?;
            h.pretrain()?;
            let kind = match kind {
                SweepArg::Labels => SweepKind::Labels,
                SweepArg::Timestep => SweepKind::Timestep,
                SweepArg::Saturation => SweepKind::Saturation,
            };
            let rep = h.run_sweep(kind)?;
            rep.write_csv(&out)?;
            rep.write_json(&out.with_extension("json"))?;
            for p in rep.summary() {
                println!("{:<18} {:>6}  {:.4} ± {:.4}  (n={})", p.experiment, p.axis, p.mean, p.std, p.n);
            }
        }
        Cmd::Generate { noise_ckpt, seg_ckpt, n, out, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            let noise: UnetModel<f32> = load_checkpoint(&noise_ckpt)?;
            let seg: UnetModel<f32> = load_checkpoint(&seg_ckpt)?;
            let sched = TrainConfig { diffusion_steps: noise.config().diffusion_steps, ..cfg.train.clone() }.schedule()?;
            let data = generate_dataset(&noise, &seg, n, cfg.data.sizes.size, cfg.train.finetune_timestep, seed, &sched, Some(&out))?;
            println!("wrote {} generated samples to {}", data.entries.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
