use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bevtraj::checkpoint::Checkpoint;
use bevtraj::config::{Preset, RunConfig};
use bevtraj::eval::ReportRecord;
use bevtraj::manifest::{plan, Manifest, Split};
use bevtraj::render::{MODE_COLORS, CELL_PX};
use bevtraj::train::{read_jsonl, EpochRecord, NonFinite};
use tempfile::TempDir;

const SMALL: &str = r#"
seed = 3
[data]
train_samples = 8
eval_samples = 4
[train]
batch_size = 4
microbatch = 2
epochs = 3
eval_every = 1
checkpoint_every = 1
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_bevtraj"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Builds the small dataset under `<tmp>/data` and returns its manifest.
fn dataset(tmp: &TempDir, config: &str) -> PathBuf {
    let data = tmp.path().join("data");
    ok(&["build-dataset", "--config", config, "--out", s(&data)]);
    data.join("manifest.jsonl")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir).into_iter().map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap())).collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn dataset_build_is_deterministic_and_counts_match() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "seed = 11\n[data]\ntrain_samples = 100\neval_samples = 0\n");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["build-dataset", "--config", &cfg, "--out", s(&a)]);
    ok(&["build-dataset", "--config", &cfg, "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));
    let m = Manifest::load(&a.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 100);
    assert_eq!(m.load_split(Split::Train).unwrap().len(), 100);
    let c = tmp.path().join("c");
    ok(&["build-dataset", "--config", &cfg, "--seed", "12", "--out", s(&c)]);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn kind_fractions_set_entry_counts() {
    let cfg = RunConfig::from_toml("[data]\ntrain_samples = 200\neval_samples = 0\n[data.kinds]\nfork = 0.5\nstraight = 0.25\ncurve = 0.25\n", None).unwrap();
    let records = plan(&cfg).unwrap();
    assert_eq!(records.len(), 200);
    assert_eq!(records.iter().filter(|r| r.kind == "fork").count(), 100);
}

#[test]
fn failed_build_leaves_no_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "[data]\ntrain_samples = 3\neval_samples = 0\n");
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    // A directory where a sample file must go makes the write fail.
    std::fs::create_dir_all(out.join("samples/train_00001.casp")).unwrap();
    let res = run(&["build-dataset", "--config", &cfg, "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(!out.join("manifest.jsonl").exists());
    assert!(!out.join("manifest.jsonl.partial").exists());
}

#[test]
fn training_is_deterministic_across_runs_and_worker_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let manifest = dataset(&tmp, &cfg);
    let log = |dir: &str, threads: &str| {
        let out = tmp.path().join(dir);
        let res = bin().env("CASP_THREADS", threads).args(["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&out)]).output().unwrap();
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        std::fs::read(out.join("loss.jsonl")).unwrap()
    };
    let a = log("a", "1");
    assert_eq!(a, log("b", "1"));
    assert_eq!(a, log("c", "3"));
    let records: Vec<EpochRecord> = read_jsonl(&tmp.path().join("a/loss.jsonl")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert_eq!(records[2].steps, 6);
    assert!(tmp.path().join("a/metrics.jsonl").exists());
    assert!(tmp.path().join("a/timing.jsonl").exists());
}

#[test]
fn resuming_from_a_checkpoint_reproduces_the_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let manifest = dataset(&tmp, &cfg);
    let full = tmp.path().join("full");
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&full)]);
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--resume", s(&full.join("epoch-0001.ckpt")), "--manifest", s(&manifest), "--out", s(&resumed)]);
    let a: Vec<EpochRecord> = read_jsonl(&full.join("loss.jsonl")).unwrap();
    let b: Vec<EpochRecord> = read_jsonl(&resumed.join("loss.jsonl")).unwrap();
    assert_eq!(b, a[1..].to_vec());
    assert_eq!(std::fs::read(full.join("checkpoint.ckpt")).unwrap(), std::fs::read(resumed.join("checkpoint.ckpt")).unwrap());

    // Resuming in place drops the log records after the checkpoint first.
    ok(&["train", "--resume", s(&full.join("epoch-0002.ckpt")), "--manifest", s(&manifest), "--out", s(&full)]);
    let again: Vec<EpochRecord> = read_jsonl(&full.join("loss.jsonl")).unwrap();
    assert_eq!(again, a);

    let other = write_config(tmp.path(), "other.toml", &format!("{SMALL}\n[optim]\nlr = 0.01\n"));
    let res = run(&["train", "--config", &other, "--resume", s(&full.join("epoch-0001.ckpt")), "--manifest", s(&manifest), "--out", s(&resumed)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("hash mismatch"));
}

#[test]
fn evaluation_is_repeatable_and_traceable() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let manifest = dataset(&tmp, &cfg);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&run_dir)]);
    let ck = run_dir.join("checkpoint.ckpt");
    let (r1, r2) = (tmp.path().join("r1.jsonl"), tmp.path().join("r2.jsonl"));
    ok(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&r1)]);
    ok(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--config", &cfg, "--out", s(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let records: Vec<ReportRecord> = read_jsonl(&r1).unwrap();
    let hash = Checkpoint::load(&ck).unwrap().config_hash();
    let names: Vec<(&str, Option<usize>)> = records.iter().map(|r| (r.metric.as_str(), r.k)).collect();
    assert_eq!(names, vec![("min_ade", Some(5)), ("min_fde", Some(1)), ("miss_rate", Some(5)), ("offroad_rate", None)]);
    assert!(records.iter().all(|r| r.config_hash == hash && r.n_samples == 4 && r.value.is_finite()));

    let res = run(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--config", &cfg, "--seed", "99", "--out", s(&r2)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("config hash mismatch"));

    let paper = write_config(tmp.path(), "p.toml", "preset = \"paper\"\n[data]\ntrain_samples = 0\neval_samples = 1\n");
    let paper_data = tmp.path().join("paper");
    ok(&["build-dataset", "--config", &paper, "--out", s(&paper_data)]);
    let res = run(&["eval", "--checkpoint", s(&ck), "--manifest", s(&paper_data.join("manifest.jsonl")), "--out", s(&r2)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("grid"));
}

#[test]
fn non_finite_loss_aborts_with_a_dump() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{SMALL}\n[optim]\nlr = 1e30\nweight_decay = 0.0\n"));
    let manifest = dataset(&tmp, &cfg);
    let out = tmp.path().join("run");
    let res = run(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("non-finite"));
    let dump: NonFinite = serde_json::from_slice(&std::fs::read(out.join("nan_dump.json")).unwrap()).unwrap();
    assert_eq!(dump.sample_indices.len(), 4);
    assert_eq!(dump.epoch, 1);
}

#[test]
fn render_writes_a_deterministic_ppm() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", SMALL);
    let manifest = dataset(&tmp, &cfg);
    let m = Manifest::load(&manifest).unwrap();
    let sample = m.sample_path(&m.records[0]);
    let run_dir = tmp.path().join("run");
    ok(&["train", "--config", &cfg, "--manifest", s(&manifest), "--out", s(&run_dir)]);
    let (a, b, empty) = (tmp.path().join("a.ppm"), tmp.path().join("b.ppm"), tmp.path().join("e.ppm"));
    let ck = run_dir.join("checkpoint.ckpt");
    ok(&["render", "--sample", s(&sample), "--checkpoint", s(&ck), "--out", s(&a)]);
    ok(&["render", "--sample", s(&sample), "--checkpoint", s(&ck), "--out", s(&b)]);
    ok(&["render", "--sample", s(&sample), "--out", s(&empty)]);
    let (a, e) = (std::fs::read(&a).unwrap(), std::fs::read(&empty).unwrap());
    assert_eq!(a, std::fs::read(&b).unwrap());
    let header = format!("P6\n{} {}\n255\n", 48 * CELL_PX, 76 * CELL_PX);
    assert!(a.starts_with(header.as_bytes()) && e.starts_with(header.as_bytes()));
    let pixels = |bytes: &[u8]| bytes[header.len()..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<[u8; 3]>>();
    assert!(MODE_COLORS.iter().all(|c| !pixels(&e).contains(c)));
    assert!(MODE_COLORS.iter().any(|c| pixels(&a).contains(c)));
    assert_ne!(a, e);
}

#[test]
fn invalid_configs_are_rejected_before_any_work() {
    let tmp = TempDir::new().unwrap();
    for (i, text) in ["learning_rate = 0.1", "[model]\nheads = 3", "[train]\nbatch_size = 0", "[model]\nvariant = \"tiny\""].iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.toml"), text);
        let out = tmp.path().join(format!("out{i}"));
        let res = run(&["build-dataset", "--config", &cfg, "--out", s(&out)]);
        assert!(!res.status.success(), "{text:?} was accepted");
        assert!(!out.exists());
    }
    let res = run(&["build-dataset", "--variant", "no-backbone", "--out", s(&tmp.path().join("x"))]);
    assert!(!res.status.success());
    let res = bin().env("CASP_THREADS", "0").args(["build-dataset", "--out", s(&tmp.path().join("y"))]).output().unwrap();
    assert!(!res.status.success());
}

#[test]
fn presets_select_grid_sizes() {
    assert_eq!(RunConfig::preset(Preset::Paper).grid.height, 152);
    assert_eq!(RunConfig::preset(Preset::Desk).grid.height, 76);
}
