use super::*;
use crate::unet::HeadMode;

pub(crate) fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig { sizes: BenchmarkSpec { n_pretrain: 6, n_train: 3, n_val: 2, n_test: 3, size: 16 }, ..DataConfig::default() },
        unet: UnetConfig {
            in_channels: 1,
            base_width: 4,
            channel_mults: vec![1, 2],
            num_res_blocks: 1,
            attention_levels: vec![1],
            time_embed_dim: 8,
            out_channels_noise: 1,
            num_classes: 6,
            diffusion_steps: 20,
            norm_groups: 2,
        },
        train: TrainConfig {
            pretrain_iters: 4,
            finetune_epochs: 1,
            min_batches_per_epoch: 2,
            lr: 1e-3,
            diffusion_steps: 20,
            checkpoint_iters: vec![2, 4],
            ..TrainConfig::default()
        },
        baseline: BaselineConfig { mlp: MlpConfig { hidden: vec![8], epochs: 1, ..MlpConfig::default() }, ..BaselineConfig::default() },
        sweep: SweepConfig { seeds: vec![0, 1], shots: vec![1, 3], reference_shots: vec![3], ..SweepConfig::default() },
    }
}

#[test]
fn config_round_trips_through_toml_and_json() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let tp = dir.path().join("c.toml");
    fs::write(&tp, toml::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&tp).unwrap(), cfg);
    let jp = dir.path().join("c.json");
    fs::write(&jp, serde_json::to_vec(&cfg).unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&jp).unwrap(), cfg);
    fs::write(&tp, "[train]\nbogus = 1\n").unwrap();
    assert!(matches!(ExperimentConfig::load(&tp), Err(crate::Error::Config(_))));
    assert_eq!(cfg.hash(), tiny_config().hash());
    assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
}

#[test]
fn config_validation_catches_mismatches() {
    assert!(ExperimentConfig::default().validate().is_ok());
    let mut c = tiny_config();
    c.train.diffusion_steps = 30;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.data.kind = DataKind::Lunglike;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.sweep.seeds.clear();
    assert!(c.validate().is_err());
}

#[test]
fn sweeps_need_checkpoints_and_valid_timesteps() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(tiny_config(), dir.path()).unwrap();
    assert!(matches!(h.timestep_sweep(&[1], &[0]), Err(crate::Error::Config(_))));
    assert!(matches!(h.saturation_sweep(&[0, 2], &[0]), Err(crate::Error::Config(_))));
    h.pretrain().unwrap();
    assert!(matches!(h.timestep_sweep(&[0], &[0]), Err(crate::Error::Config(_))));
    assert!(matches!(h.timestep_sweep(&[21], &[0]), Err(crate::Error::Config(_))));
    assert!(matches!(h.saturation_sweep(&[3], &[0]), Err(crate::Error::Config(_))));
    let mut other = tiny_config();
    other.train.lr = 2e-3;
    assert!(matches!(Harness::open(other, dir.path()), Err(crate::Error::Config(_))));
}

#[test]
fn single_timestep_sweep_equals_direct_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(tiny_config(), dir.path()).unwrap();
    h.pretrain().unwrap();
    let rep = h.timestep_sweep(&[1], &[0]).unwrap();
    assert_eq!(rep.rows.len(), 1);
    let out = h.finetune_run(Init::Pretrained(4), 3, 1, 0).unwrap();
    assert_eq!(rep.rows[0].miou, h.test_miou(&out.model, 1).unwrap());

    let rep = h.timestep_sweep(&[20, 1, 7], &[0]).unwrap();
    assert_eq!(rep.rows.iter().map(|r| r.axis).collect::<Vec<_>>(), vec![20, 1, 7]);
}

#[test]
fn sweeps_resume_and_share_points() {
    let dir = tempfile::tempdir().unwrap();
    let h = Harness::open(tiny_config(), dir.path()).unwrap();
    h.pretrain().unwrap();
    let sat = h.saturation_sweep(&[0, 2, 4], &[0, 1]).unwrap();
    let labels = h.label_efficiency_sweep(&[1, 3], &[0, 1]).unwrap();
    assert_eq!(labels.values("labels/ptdr", 3), sat.values("saturation/ptdr", 4));
    assert_eq!(labels.values("labels/random", 3), sat.values("saturation/ptdr", 0));
    assert_eq!(labels.values("labels/ddpm-mlp", 3).len(), 2);
    assert!(labels.values("labels/random", 1).is_empty());

    // Drop one cached point: a rerun recomputes it and matches bit for bit.
    let points = dir.path().join("points");
    fs::remove_file(points.join("ptdr-i2-k3-t1-s1.json")).unwrap();
    let before: Vec<_> = fs::read_dir(&points).unwrap().map(|e| e.unwrap().path()).collect();
    let again = h.saturation_sweep(&[0, 2, 4], &[0, 1]).unwrap();
    let after: Vec<_> = fs::read_dir(&points).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(after.len(), before.len() + 1);
    let m = |r: &ExperimentReport| r.rows.iter().map(|x| x.miou).collect::<Vec<_>>();
    assert_eq!(m(&again), m(&sat));

    let csv = dir.path().join("r.csv");
    sat.write_csv(&csv).unwrap();
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("experiment,axis,seed,miou,wallclock_s\n"));
    assert_eq!(ExperimentReport::read_csv(&csv).unwrap(), sat.rows);
    let summary = sat.summary();
    assert_eq!(summary.len(), 3);
    assert!(summary.iter().all(|p| p.n == 2));
    sat.write_json(&dir.path().join("r.json")).unwrap();
}

#[test]
fn generated_dataset_checks_heads_and_round_trips() {
    let cfg = tiny_config();
    let sched = cfg.train.schedule().unwrap();
    let noise = UnetModel::<f32>::new(cfg.unet.clone(), &mut seeded(1)).unwrap();
    let mut seg = noise.clone();
    seg.set_head(HeadMode::Segmentation);
    assert!(matches!(generate_dataset(&seg, &seg, 2, 16, 1, 0, &sched, None), Err(crate::Error::Mode(_))));
    assert!(matches!(generate_dataset(&noise, &noise, 2, 16, 1, 0, &sched, None), Err(crate::Error::Mode(_))));
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&noise, &seg, 3, 16, 1, 5, &sched, Some(dir.path())).unwrap();
    assert_eq!(data.entries.len(), 3);
    assert!(data.entries.iter().all(|e| e.generated && e.sample.mask.is_some()));
    assert_eq!(load_dataset(dir.path()).unwrap(), data);
    let again = generate_dataset(&noise, &seg, 3, 16, 1, 5, &sched, None).unwrap();
    assert_eq!(again, data);
}
