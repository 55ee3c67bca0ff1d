use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use har_uq::bundle::Bundle;

const SMALL: &str = r#"
[generator]
classes = 3
subjects = 3
windows_per_pair = 12
foreign_windows_per_pair = 2
class_freqs_hz = [0.9, 1.3, 2.0]
class_amplitudes = [0.8, 0.9, 1.2]

[split]
held_out_class = 2
held_out_subject = 2

[pretrain]
epochs = 2

[head]
epochs = 3

[detectors]
group_frames = 16
mc_passes = 5
"#;

const VERDICT_HEADER: &str =
    "window_index,predicted_class,max_prob,flag,stage_reached,rec_score,dist_score,mcd_score";

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn out(&self) -> PathBuf {
        self.path("out")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_har-uq"))
            .args(args)
            .arg("--config")
            .arg(self.path("run.toml"))
            .env("HARUQ_OUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn trained(config: &str) -> Self {
        let env = Self::new(config);
        for cmd in ["pretrain", "train-head", "calibrate"] {
            env.ok(&[cmd]);
        }
        env
    }
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

fn bundle(env: &Env) -> Bundle {
    Bundle::load(&env.out().join("bundle.haruq")).unwrap()
}

#[test]
fn pretrain_writes_bundle_and_one_curve_row_per_epoch() {
    let env = Env::new(SMALL);
    let stdout = env.ok(&["pretrain"]);
    assert!(stdout.contains("initial train loss"));
    let curve = lines(&env.out().join("pretrain_curve.csv"));
    assert_eq!(curve[0], "epoch,train_loss,validation_loss");
    assert_eq!(curve.len() - 1, 2);
    let b = bundle(&env);
    assert!(b.head.is_none() && b.detectors.is_none());
}

#[test]
fn train_head_leaves_the_autoencoder_untouched() {
    let env = Env::new(SMALL);
    env.ok(&["pretrain"]);
    let before = bundle(&env).mae_checksum().unwrap();
    let stdout = env.ok(&["train-head"]);
    assert!(stdout.contains("validation accuracy"));
    let after = bundle(&env);
    assert_eq!(after.mae_checksum().unwrap(), before);
    assert!(after.head.is_some());
    assert_eq!(lines(&env.out().join("head_curve.csv")).len() - 1, 3);
}

#[test]
fn calibrate_requires_a_head() {
    let env = Env::new(SMALL);
    env.ok(&["pretrain"]);
    let out = env.run(&["calibrate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_writes_all_reports() {
    let env = Env::trained(SMALL);
    let stdout = env.ok(&["evaluate"]);
    assert!(stdout.contains("cascade"));
    let report = lines(&env.out().join("report.csv"));
    assert_eq!(report[0], "method,split,ua,red_rate,accuracy,n");
    assert_eq!(report.len() - 1, 16);
    assert_eq!(lines(&env.out().join("stage_stats.csv")).len() - 1, 4);
    assert!(env.out().join("report.txt").exists());
    let hists = fs::read_dir(env.out().join("histograms")).unwrap().count();
    assert_eq!(hists, 12);
}

#[test]
fn evaluate_fails_on_an_empty_split() {
    let no_subject: String = SMALL
        .lines()
        .filter(|l| !l.starts_with("held_out_subject"))
        .collect::<Vec<_>>()
        .join("\n");
    let env = Env::trained(&no_subject);
    let out = env.run(&["evaluate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unseen_subject"));
}

#[test]
fn infer_emits_one_verdict_row_per_window() {
    let env = Env::trained(SMALL);
    let input = env.path("in.csv");
    env.ok(&[
        "generate",
        "--split",
        "unseen_dataset",
        "--out",
        input.to_str().unwrap(),
    ]);

    let stdout = env.ok(&["infer", "--input", input.to_str().unwrap(), "--cascade"]);
    let rows: Vec<&str> = stdout.lines().collect();
    assert_eq!(rows[0], VERDICT_HEADER);
    let windows = rows.len() - 1;
    assert!(windows > 0);
    for (i, row) in rows[1..].iter().enumerate() {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0], i.to_string());
        assert!(cells[3] == "red" || cells[3] == "green");
        // the reconstruction stage always runs
        assert!(!cells[5].is_empty());
        if cells[4] == "passed_all" {
            assert_eq!(cells[3], "green");
        } else {
            assert_eq!(cells[3], "red");
        }
    }

    let out = env.path("verdicts.csv");
    env.ok(&[
        "infer",
        "--input",
        input.to_str().unwrap(),
        "--detector",
        "distance",
        "--output",
        out.to_str().unwrap(),
    ]);
    let single = lines(&out);
    assert_eq!(single.len() - 1, windows);
    for row in &single[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert!(cells[5].is_empty() && !cells[6].is_empty() && cells[7].is_empty());
    }
}

#[test]
fn infer_accepts_files_without_id_columns() {
    let env = Env::trained(SMALL);
    let full = env.path("full.csv");
    env.ok(&[
        "generate",
        "--split",
        "validation",
        "--out",
        full.to_str().unwrap(),
    ]);
    let bare: String = lines(&full)
        .iter()
        .map(|l| l.split(',').take(7).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    let input = env.path("bare.csv");
    fs::write(&input, bare).unwrap();
    let stdout = env.ok(&[
        "infer",
        "--input",
        input.to_str().unwrap(),
        "--detector",
        "mcdropout",
    ]);
    assert!(stdout.lines().count() > 1);
}

#[test]
fn infer_names_the_malformed_row() {
    let env = Env::trained(SMALL);
    let full = env.path("full.csv");
    env.ok(&[
        "generate",
        "--split",
        "validation",
        "--out",
        full.to_str().unwrap(),
    ]);
    let mut rows = lines(&full);
    let mut cells: Vec<String> = rows[4].split(',').map(String::from).collect();
    cells[1] = "abc".into();
    rows[4] = cells.join(",");
    let input = env.path("bad.csv");
    fs::write(&input, rows.join("\n")).unwrap();
    let out = env.run(&["infer", "--input", input.to_str().unwrap(), "--cascade"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 5"), "{err}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let env = Env::new(SMALL);
    // usage
    let out = env.run(&["infer", "--input", "x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    let out = env.run(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
    // missing bundle is a data error
    assert_eq!(env.run(&["evaluate"]).status.code(), Some(2));
    // broken configuration
    let bad = Env::new("bogus = [");
    assert_eq!(bad.run(&["pretrain"]).status.code(), Some(1));
    // divergence
    let div = Env::new(&SMALL.replace("epochs = 2\n", "epochs = 2\nlr = 1e30\n"));
    let out = div.run(&["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn help_exits_zero() {
    let out = Command::new(env!("CARGO_BIN_EXE_har-uq"))
        .arg("--help")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    let out = Command::new(env!("CARGO_BIN_EXE_har-uq"))
        .args(["init-config", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = har_uq::config::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, har_uq::config::RunConfig::default());
}

#[test]
fn timing_reports_every_method() {
    let env = Env::trained(SMALL);
    env.ok(&["timing", "--n", "64"]);
    let rows = lines(&env.out().join("timing.csv"));
    assert_eq!(rows[0], "method,n,seconds");
    for m in [
        "encode",
        "reconstruction",
        "distance",
        "mcdropout",
        "cascade",
    ] {
        assert!(rows.iter().any(|r| r.starts_with(&format!("{m},"))), "{m}");
    }
}
