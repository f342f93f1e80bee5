use std::path::Path;
use std::process::Command;

use ptdr::harness::ExperimentReport;
use ptdr::segdata::{load_dataset, Split};

const CONFIG: &str = r#"
[data]
kind = "bitewing"
seed = 3

[data.sizes]
n_pretrain = 8
n_train = 3
n_val = 2
n_test = 3
size = 16

[unet]
base_width = 4
channel_mults = [1, 2]
num_res_blocks = 1
attention_levels = [1]
time_embed_dim = 8
diffusion_steps = 20
norm_groups = 2

[train]
pretrain_iters = 4
finetune_epochs = 1
min_batches_per_epoch = 2
diffusion_steps = 20
checkpoint_iters = [2, 4]

[sweep]
seeds = [0, 1]
shots = [1, 3]
include_ddpm_mlp = false
"#;

fn ptdr(dir: &Path, args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ptdr")).current_dir(dir).args(args).output().unwrap();
    (out.status.success(), format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr)))
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (success, text) = ptdr(dir, args);
    assert!(success, "ptdr {args:?} failed: {text}");
    text
}

#[test]
fn make_data_writes_loadable_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["make-data", "--kind", "lunglike", "-n", "26", "--labeled", "20", "--size", "16", "--out", "lung"]);
    let data = load_dataset(&dir.path().join("lung")).unwrap();
    assert_eq!(data.num_classes, 4);
    assert_eq!(data.split(Split::Pretrain).len(), 6);
    assert_eq!(data.split(Split::Test).len(), 5);
    let (success, text) = ptdr(dir.path(), &["make-data", "--kind", "chest", "--out", "x"]);
    assert!(!success && text.contains("unknown dataset kind"), "{text}");
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), CONFIG).unwrap();

    ok(d, &["pretrain", "--config", "c.toml", "--work", "w"]);
    assert!(d.join("w/pretrain/ckpt-000004.ptdr").exists());
    assert!(d.join("w/pretrain/loss.csv").exists());

    let text = ok(d, &["finetune", "--config", "c.toml", "--ckpt", "w/pretrain/ckpt-000004.ptdr", "--shots", "3", "--out", "seg.ptdr"]);
    assert!(text.contains("test mIoU"), "{text}");
    let eval = ok(d, &["eval", "--config", "c.toml", "--ckpt", "seg.ptdr", "--split", "test"]);
    assert!(eval.starts_with("class,iou\n") && eval.contains("miou,"), "{eval}");

    ok(d, &["sweep", "timestep", "--config", "c.toml", "--work", "w", "--out", "t.csv"]);
    let rows = ExperimentReport::read_csv(&d.join("t.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| (r.axis, r.seed)).collect::<Vec<_>>(), vec![(1, 0), (1, 1), (20, 0), (20, 1)]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 2);

    // Same config in a fresh work directory gives the same mIoU values.
    ok(d, &["sweep", "timestep", "--config", "c.toml", "--work", "w2", "--out", "t2.csv"]);
    let again = ExperimentReport::read_csv(&d.join("t2.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.miou).collect::<Vec<_>>(), again.iter().map(|r| r.miou).collect::<Vec<_>>());

    ok(d, &["generate", "--config", "c.toml", "--noise-ckpt", "w/pretrain/ckpt-000004.ptdr", "--seg-ckpt", "seg.ptdr", "-n", "3", "--out", "gen"]);
    let generated = load_dataset(&d.join("gen")).unwrap();
    assert_eq!(generated.entries.len(), 3);
    assert!(generated.entries.iter().all(|e| e.generated));
    assert!(generated.entries.iter().all(|e| e.sample.mask.as_ref().unwrap().labels.iter().all(|&c| c < 6)));

    let (success, text) = ptdr(d, &["generate", "--config", "c.toml", "--noise-ckpt", "seg.ptdr", "--seg-ckpt", "seg.ptdr", "-n", "1", "--out", "bad"]);
    assert!(!success && text.contains("mode"), "{text}");
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nlearning_rate = 1.0\n").unwrap();
    let (success, text) = ptdr(dir.path(), &["pretrain", "--config", "c.toml"]);
    assert!(!success && text.contains("configuration error"), "{text}");
    let (success, _) = ptdr(dir.path(), &["eval", "--ckpt", "missing.ptdr"]);
    assert!(!success);
}
