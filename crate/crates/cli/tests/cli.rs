use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = r#"
seed = 3
[corpus]
archetypes = 2
utterances_per_style = 16
min_len = 6
max_len = 10
[denoiser]
residual_layers = 2
hidden_channels = 8
time_embedding_dim = 8
condition_dim = 8
dilation_cycle = [1, 2]
[style]
token_count = 4
token_dim = 8
heads = 2
reference_channels = 8
reference_layers = 1
[schedule]
steps = 10
[guidance]
steps = 10
[optimizer]
steps = 4
batch_size = 4
checkpoint_every = 2
[eval]
etas = [1.0, 3.0, 5.0, 7.0]
sweep_seeds = [0]
sweep_utterances = 2
repeats = 1
samples_per_token = 3
transfer_etas = [0.5, 1.0]
svg = true
"#;

fn prosody(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prosody")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = prosody(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(args: &[&str]) -> String {
    let out = prosody(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let line = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
    assert!(v["error"]["message"].is_string());
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.dir.path().join("tiny.toml")
    }
    fn corpus(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn checkpoint(&self) -> PathBuf {
        self.dir.path().join("run/model.ckpt")
    }
    fn utterance(&self, n: usize) -> PathBuf {
        let mut files: Vec<PathBuf> = fs::read_dir(self.corpus().join("utterances"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files[n].clone()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: TempDir::new().unwrap() };
        fs::write(f.config(), TINY).unwrap();
        let cfg = f.config();
        ok(&["gen-data", "--config", s(&cfg), "--out", s(&f.corpus())]);
        let run = f.dir.path().join("run");
        ok(&["train", "--config", s(&cfg), "--corpus", s(&f.corpus()), "--out", s(&run)]);
        f
    })
}

/// Every file under `dir` except the archived config, keyed by relative path.
fn outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.toml" {
                found.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    found.sort();
    found
}

fn rerun_matches(args: &[&str], out: &Path) {
    let again = out.with_extension("rerun");
    ok(&[args[0], "--config", s(&out.join("config.toml")), "--out", s(&again)]);
    let (a, b) = (outputs(out), outputs(&again));
    assert!(!a.is_empty());
    assert_eq!(a.len(), b.len());
    for ((pa, da), (pb, db)) in a.iter().zip(&b) {
        assert_eq!(pa, pb);
        assert!(da == db, "{} differs on rerun", pa.display());
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn default_corpus_has_one_file_per_utterance() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    ok(&["gen-data", "--out", s(&a), "--seed", "11"]);
    assert_eq!(fs::read_dir(a.join("utterances")).unwrap().count(), 1000);
    rerun_matches(&["gen-data"], &a);
}

#[test]
fn every_command_reruns_bit_exactly_from_its_archive() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let (cfg, corpus, ckpt) = (f.config(), f.corpus(), f.checkpoint());

    let train = root.path().join("train");
    ok(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&train)]);
    rerun_matches(&["train"], &train);

    let sample = root.path().join("sample");
    ok(&[
        "sample", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&sample),
        "--seeds", "1,2", "--diagnostics", "--eta", "3",
    ]);
    rerun_matches(&["sample"], &sample);

    let eval = root.path().join("eval");
    ok(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--corpus", s(&corpus), "--out", s(&eval)]);
    rerun_matches(&["eval"], &eval);

    let sched = root.path().join("schedule");
    ok(&["schedule", "--config", s(&cfg), "--out", s(&sched)]);
    rerun_matches(&["schedule"], &sched);

    let plot = root.path().join("plot");
    let loss = train.join("loss.csv");
    ok(&["plot", "--input", s(&loss), "--out", s(&plot)]);
    rerun_matches(&["plot"], &plot);
    assert!(fs::read_to_string(plot.join("loss.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn loss_log_is_ordered_and_resume_continues() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let (cfg, corpus) = (f.config(), f.corpus());
    let full = root.path().join("full");
    ok(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&full), "--train-steps", "6"]);
    let rows = csv_rows(&full.join("loss.csv"));
    let steps: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
    assert!(full.join("checkpoints/step_0000004.ckpt").exists());

    let part = root.path().join("part");
    ok(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&part), "--train-steps", "4"]);
    let resume = part.join("checkpoints/step_0000004.ckpt");
    ok(&[
        "train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&part), "--train-steps", "6", "--resume",
        s(&resume),
    ]);
    assert_eq!(fs::read(full.join("loss.csv")).unwrap(), fs::read(part.join("loss.csv")).unwrap());
    assert_eq!(fs::read(full.join("model.ckpt")).unwrap(), fs::read(part.join("model.ckpt")).unwrap());
}

#[test]
fn resume_with_other_settings_is_rejected() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let kind = error_kind(&[
        "train", "--config", s(&f.config()), "--corpus", s(&f.corpus()), "--out", s(root.path()), "--resume",
        s(&f.checkpoint()), "--seed", "99",
    ]);
    assert_eq!(kind, "config_mismatch");
}

#[test]
fn scaling_factors_multiply_raw_channels() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let (text, ckpt) = (f.utterance(0), f.checkpoint());
    let base = [
        "sample", "--checkpoint", s(&ckpt), "--mode", "control", "--token", "1", "--text", s(&text),
        "--seeds", "5",
    ];
    let run = |name: &str, extra: &[&str]| {
        let out = root.path().join(name);
        let mut args = base.to_vec();
        args.extend(["--out", s(&out)]);
        args.extend(extra);
        ok(&args);
        out
    };
    let plain = run("plain", &[]);
    let unit = run("unit", &["--scale", "1,1,1"]);
    let double = run("double", &["--scale", "2,1,1"]);
    for file in ["sample_seed5.csv", "sample_seed5_raw.csv"] {
        assert_eq!(fs::read(plain.join(file)).unwrap(), fs::read(unit.join(file)).unwrap());
    }
    let a = csv_rows(&plain.join("sample_seed5_raw.csv"));
    let b = csv_rows(&double.join("sample_seed5_raw.csv"));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        let (pa, pb): (f64, f64) = (ra[1].parse().unwrap(), rb[1].parse().unwrap());
        assert_eq!(pb, 2.0 * pa);
        assert_eq!(ra[2..], rb[2..]);
    }
}

#[test]
fn control_is_deterministic_per_seed() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let text = f.utterance(3);
    let files: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = root.path().join(n);
            ok(&[
                "sample", "--checkpoint", s(&f.checkpoint()), "--mode", "control", "--token", "2", "--text", s(&text),
                "--seeds", "9", "--out", s(&out),
            ]);
            fs::read(out.join("sample_seed9.csv")).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
}

#[test]
fn sample_argument_errors() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let (ckpt, text, out) = (f.checkpoint(), f.utterance(0), root.path().to_path_buf());
    let common = ["sample", "--checkpoint", s(&ckpt), "--text", s(&text), "--out", s(&out)];
    let with = |extra: &[&str]| {
        let mut a = common.to_vec();
        a.extend(extra);
        error_kind(&a)
    };
    assert_eq!(with(&["--mode", "control", "--token", "4"]), "out_of_range");
    assert_eq!(with(&["--mode", "control"]), "missing_argument");
    assert_eq!(with(&["--mode", "transfer"]), "missing_argument");
    assert_eq!(with(&["--mode", "control", "--token", "1", "--weights", "1,0,0,0"]), "missing_argument");
    assert_eq!(with(&["--mode", "control", "--weights", "1,0"]), "shape_mismatch");
    assert_eq!(error_kind(&["sample", "--checkpoint", s(&out.join("none.ckpt"))]), "io");
    assert_eq!(error_kind(&["no-such-command"]), "usage");
}

#[test]
fn transfer_and_weighted_control_write_style_weights() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let transfer = root.path().join("transfer");
    ok(&[
        "sample", "--checkpoint", s(&f.checkpoint()), "--mode", "transfer", "--reference", s(&f.utterance(1)),
        "--text", s(&f.utterance(20)), "--out", s(&transfer),
    ]);
    let w = csv_rows(&transfer.join("style_weights.csv"));
    assert_eq!(w.len(), 4);
    let total: f64 = w.iter().map(|r| r[1].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-12);

    let raw = root.path().join("raw");
    ok(&[
        "sample", "--checkpoint", s(&f.checkpoint()), "--mode", "control", "--raw-weights", "1.5,-0.5,0,0",
        "--phonemes", "1,2,3,4,5", "--out", s(&raw), "--unconditional",
    ]);
    assert_eq!(csv_rows(&raw.join("sample_seed7.csv")).len(), 5);
}

#[test]
fn eval_report_shape_and_ranges() {
    let f = fixture();
    let root = TempDir::new().unwrap();
    let out = root.path().join("eval");
    ok(&[
        "eval", "--config", s(&f.config()), "--checkpoint", s(&f.checkpoint()), "--corpus", s(&f.corpus()), "--out",
        s(&out),
    ]);
    let sweep = csv_rows(&out.join("eta_sweep.csv"));
    let etas: Vec<f64> = sweep.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(etas, [1.0, 3.0, 5.0, 7.0]);
    assert!(sweep.iter().all(|r| r.len() == 4));
    let report = csv_rows(&out.join("report.csv"));
    let js: Vec<f64> = report
        .iter()
        .filter(|r| r[0].starts_with("js_"))
        .map(|r| r[2].parse().unwrap())
        .collect();
    assert_eq!(js.len(), 6);
    assert!(js.iter().all(|v| (0.0..=std::f64::consts::LN_2).contains(v)));
    assert!(out.join("js.svg").exists() && out.join("eta_sweep.svg").exists());

    let empty = root.path().join("empty.toml");
    fs::write(&empty, TINY.replace("etas = [1.0, 3.0, 5.0, 7.0]", "etas = []")).unwrap();
    let kind = error_kind(&[
        "eval", "--config", s(&empty), "--checkpoint", s(&f.checkpoint()), "--corpus", s(&f.corpus()), "--out",
        s(&root.path().join("e2")),
    ]);
    assert_eq!(kind, "empty_sweep");
}

#[test]
fn schedule_dump_matches_table_layout() {
    let root = TempDir::new().unwrap();
    ok(&["schedule", "--steps", "50", "--out", s(root.path())]);
    let rows = csv_rows(&root.path().join("schedule.csv"));
    assert_eq!(rows.len(), 50);
    let mut prev = 1.0;
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        let ab: f64 = r[3].parse().unwrap();
        assert!(ab < prev);
        prev = ab;
    }
}
