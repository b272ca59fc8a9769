use std::path::{Path, PathBuf};
use std::process::Command;

use divtod::io;
use tempfile::TempDir;

const TINY: &str = r#"
seed = 3

[corpus]
synthetic_dev = 12
synthetic_test = 12

[pretrain.encoder]
hidden_dim = 16
layers = 1
heads = 2
max_len = 128

[pretrain.train]
batch_size = 4
lr = 1e-3
max_steps = 6
eval_every = 3

[downstream.all]
max_steps = 4
eval_every_steps = 2
"#;

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("c.toml"), config).unwrap();
        Run { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn divtod(&self, args: &[&str]) -> i32 {
        Command::new(env!("CARGO_BIN_EXE_divtod"))
            .args(args)
            .arg("--config")
            .arg(self.dir.path().join("c.toml"))
            .arg("--out-dir")
            .arg(self.out())
            .env("RUST_LOG", "off")
            .status()
            .unwrap()
            .code()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        assert_eq!(self.divtod(args), 0, "divtod {args:?}");
    }
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn exit_codes() {
    let r = Run::new(TINY);
    assert_eq!(r.divtod(&["diversify", "--input", "/nonexistent.jsonl"]), 2);
    assert_eq!(r.divtod(&["finetune", "nope"]), 2);
    assert_eq!(r.divtod(&["ingest", "--synthetic", "0"]), 2);

    let bad = Run::new("[pretrain.train]\nbatch_sise = 3\n");
    assert_eq!(bad.divtod(&["ingest", "--synthetic", "4"]), 2);

    let script = r.dir.path().join("down.jsonl");
    std::fs::write(&script, "{\"error\": \"unavailable\"}\n").unwrap();
    let dead = Run::new(&format!("{TINY}\n[gateway]\nmock_script = {:?}\n", script.to_str().unwrap()));
    dead.ok(&["ingest", "--synthetic", "4"]);
    assert_eq!(dead.divtod(&["diversify"]), 1);
}

#[test]
fn always_false_leaves_corpus_untouched() {
    let r = Run::new(&format!("{TINY}\n[gateway]\nmock_script = \"always_false\"\n"));
    r.ok(&["ingest", "--synthetic", "10"]);
    r.ok(&["diversify"]);
    let original = io::load_corpus(&r.out().join("corpus/train.jsonl")).unwrap();
    let generated = io::load_corpus(&r.out().join("diversify/generated.jsonl")).unwrap();
    assert_eq!(original.len(), generated.len());
    for (a, b) in original.dialogues().iter().zip(generated.dialogues()) {
        assert!(a.same_text(b), "{}", a.id());
    }
}

#[test]
fn reruns_are_byte_identical() {
    let runs: Vec<Run> = (0..2).map(|_| Run::new(TINY)).collect();
    for (i, r) in runs.iter().enumerate() {
        let workers = if i == 0 { "1" } else { "3" };
        r.ok(&["ingest", "--synthetic", "12"]);
        r.ok(&["diversify", "--workers", workers]);
        r.ok(&["merge"]);
        r.ok(&["pretrain"]);
        r.ok(&["finetune", "intent"]);
    }
    for f in ["corpus/train.jsonl", "tasks/intent_train.jsonl", "diversify/generated.jsonl", "diversify/records.jsonl", "corpus/merged.jsonl", "pretrain/weights.bin", "pretrain/train_log.csv", "finetune/intent/weights.bin"] {
        assert_eq!(bytes(&runs[0].out().join(f)), bytes(&runs[1].out().join(f)), "{f}");
    }
}

#[test]
fn mismatched_hashes_are_refused() {
    let r = Run::new(TINY);
    r.ok(&["ingest", "--synthetic", "12"]);
    r.ok(&["pretrain"]);
    assert_eq!(r.divtod(&["finetune", "act", "--seed", "9"]), 2);
    r.ok(&["finetune", "act", "--seed", "9", "--force"]);
    r.ok(&["evaluate", "act", "--seed", "9"]);
    r.ok(&["analyze-diversity"]);

    // act artifacts now carry a different hash from the checkpoint
    assert_eq!(r.divtod(&["report"]), 2);
    r.ok(&["report", "--force"]);
    let md = std::fs::read_to_string(r.out().join("report/report.md")).unwrap();
    assert!(md.contains('+'), "{md}");
}
