use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hashparse::treebank::parse_sexpr;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hashparse"));
    cmd.env_remove("PARSER_SEED").env("RUST_LOG", "warn");
    cmd
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    /// A 30-sentence treebank and a 10-step config.
    fn new(bits: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let train: String = fs::read_to_string(fixture("synthetic_train.txt"))
            .unwrap()
            .lines()
            .take(30)
            .map(|l| format!("{l}\n"))
            .collect();
        fs::write(dir.path().join("train.txt"), train).unwrap();
        fs::write(
            dir.path().join("run.cfg"),
            format!(
                "# tiny run\nbits = {bits}\ndim = 8\nlayers = 1\nspan_budget = 60\nwarmup_steps = 2\ntrain_steps = 10\neval_every = 5\n"
            ),
        )
        .unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        bin()
            .arg("train")
            .arg("--config")
            .arg(self.path("run.cfg"))
            .arg("--train")
            .arg(self.path("train.txt"))
            .arg("--dev")
            .arg(self.path("train.txt"))
            .arg("--out")
            .arg(self.path(out))
            .args(extra)
            .output()
            .unwrap()
    }
}

#[test]
fn usage_errors_exit_with_2() {
    let out = bin().args(["train", "--train", "x", "--out", "y"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    let out = bin().args(["selfcheck", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_faults_exit_with_1() {
    let ws = Workspace::new(4);
    let out = bin()
        .args(["parse", "--input", "none.txt", "--ckpt"])
        .arg(ws.path("missing.bin"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    fs::write(ws.path("bad.cfg"), "bits = banana\n").unwrap();
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(ws.path("bad.cfg"))
        .arg("--train")
        .arg(ws.path("train.txt"))
        .arg("--out")
        .arg(ws.path("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_parse_eval_inspect() {
    let ws = Workspace::new(4);
    let out = ws.train("run", &["--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.path("run/checkpoint.bin").exists());
    let metrics = fs::read_to_string(ws.path("run/metrics.tsv")).unwrap();
    let rows: Vec<&str> = metrics
        .lines()
        .filter(|l| l.split('\t').next().unwrap().parse::<u64>().is_ok())
        .collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(metrics.lines().filter(|l| l.starts_with("dev\t")).count(), 2);
    assert!(stdout(&out).contains("mean\t"));

    fs::write(
        ws.path("input.txt"),
        "the dog saw a cat\n\nshe\nthe unseen-word liked it\n",
    )
    .unwrap();
    let ckpt = ws.path("run/checkpoint.bin");
    let parse = |format: &str| {
        let out = bin()
            .arg("parse")
            .arg("--ckpt")
            .arg(&ckpt)
            .arg("--input")
            .arg(ws.path("input.txt"))
            .args(["--format", format])
            .output()
            .unwrap();
        assert!(out.status.success());
        stdout(&out)
    };
    let brackets = parse("brackets");
    let lines: Vec<&str> = brackets.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], "");
    let reparsed = parse_sexpr(lines[0]).unwrap();
    assert_eq!(reparsed[0].words(), vec!["the", "dog", "saw", "a", "cat"]);
    // a binary tree over 5 words has 9 distinct spans
    assert_eq!(reparsed[0].gold.spans.len(), 9);

    let codes = parse("codes");
    let single = codes.lines().nth(2).unwrap();
    assert_eq!(single.len(), "(X she)".len());
    assert!(single.starts_with('(') && single.ends_with(" she)"));
    assert!(single[1..2]
        .chars()
        .all(|c| c.is_ascii_hexdigit() && !c.is_ascii_lowercase()));

    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test")
        .arg(ws.path("train.txt"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = stdout(&out);
    assert!(report.starts_with("sentence\tf1\n"));
    assert!(report.contains("# mean\t") && report.contains("# right_branching\t"));

    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test")
        .arg(ws.path("train.txt"))
        .args(["--bits", "8"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config hash mismatch"));
    let out = bin()
        .arg("eval")
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--test")
        .arg(ws.path("train.txt"))
        .arg("--config")
        .arg(ws.path("run.cfg"))
        .arg("--report")
        .arg(ws.path("report.tsv"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(fs::read_to_string(ws.path("report.tsv")).unwrap().contains("# oracle"));

    let out = bin().arg("inspect").arg("--ckpt").arg(&ckpt).output().unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("bits = 4"));
    let out = bin()
        .arg("inspect")
        .arg("--ckpt")
        .arg(&ckpt)
        .args(["--sentence", "the dog barked"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(stdout(&out).contains("split marginals:"));
}

#[test]
fn multi_seed_summary_and_seed_override() {
    let ws = Workspace::new(2);
    let out = ws.train("multi", &["--seeds", "2", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = fs::read_to_string(ws.path("multi/summary.txt")).unwrap();
    assert!(summary.contains("seed\t7\t") && summary.contains("seed\t8\t"));
    assert!(summary.contains("mean\t") && summary.contains("max\t"));
    assert!(ws.path("multi/seed_8/checkpoint.bin").exists());

    let run = |out_dir: &str, seed: &str| {
        let out = bin()
            .env("PARSER_SEED", "11")
            .arg("train")
            .arg("--config")
            .arg(ws.path("run.cfg"))
            .arg("--train")
            .arg(ws.path("train.txt"))
            .arg("--out")
            .arg(ws.path(out_dir))
            .args(["--seed", seed])
            .output()
            .unwrap();
        assert!(out.status.success());
        fs::read(ws.path(out_dir).join("metrics.tsv")).unwrap()
    };
    assert_eq!(run("a", "1"), run("b", "2"));
}

#[test]
fn selfcheck_passes() {
    let out = bin()
        .args(["selfcheck", "--n", "5", "--k", "2", "--trials", "50"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stdout(&out));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("ok")).count(), 8);
}
