use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use setdino::pipeline::{file_hash, AblationRow, RunManifest, ABLATION_JSON};
use setdino::profiles::EmbeddingTable;
use setdino::synthgen::WorldSpec;

const TINY: &str = r#"
seed = 3
[world]
n_genes = 12
guides_per_gene = 2
n_ntc_guides = 2
n_batches = 6
n_modules = 2
module_size = 3
image_size = 32
n_decoy_edges = 2
[dataset]
cells_per_guide_per_batch = 4
[train]
epochs = 2
steps_per_epoch = 2
warmup_epochs = 1
n = 2
cells_per_minibatch = 16
[train.model]
image_size = 16
embed_dim = 16
depth = 2
n_heads = 2
n_prototypes = 32
projector_hidden_dim = 16
bottleneck_dim = 8
[train.multicrop]
n_local = 2
global_size = 16
local_size = 8
"#;

struct Ws {
    dir: tempfile::TempDir,
}

impl Ws {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Ws { dir }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_setdino"))
            .current_dir(self.dir.path())
            .env("RUST_LOG", "warn")
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn tiny(&self, args: &[&str]) -> Output {
        let mut all = vec!["-c", "tiny.toml"];
        all.extend_from_slice(args);
        self.ok(&all)
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn hashes(dir: &Path, names: &[&str]) -> Vec<String> {
    names.iter().map(|n| file_hash(&dir.join(n)).unwrap()).collect()
}

#[test]
fn default_synth_has_64_genes_and_is_reproducible() {
    let ws = Ws::new();
    ws.ok(&["synth", "--out", "a"]);
    let world: WorldSpec = serde_json::from_slice(&std::fs::read(ws.p("a/world.json")).unwrap()).unwrap();
    assert_eq!(world.n_genes, 64);
    ws.ok(&["synth", "--out", "b"]);
    let files = ["world.json", "manifest.jsonl", "truth_full.csv", "truth_curated.csv"];
    assert_eq!(hashes(&ws.p("a"), &files), hashes(&ws.p("b"), &files));
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let ws = Ws::new();
    let out = ws.run(&["--set", "world.n_genes=0", "synth", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("world.n_genes"), "{}", stderr(&out));

    let out = ws.run(&["--set", "train.epoch=3", "synth", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("train.epoch"));

    std::fs::write(ws.p("plain_file"), "").unwrap();
    let out = ws.run(&["-c", "tiny.toml", "synth", "--out", "plain_file/data"]);
    assert_eq!(code(&out), 5, "{}", stderr(&out));

    ws.tiny(&["--set", "world.n_batches=1", "synth", "--out", "one"]);
    let out = ws.run(&[
        "-c",
        "tiny.toml",
        "--set",
        "world.n_batches=1",
        "--set",
        "train.splits=['train']",
        "train",
        "--data",
        "one",
        "--out",
        "t",
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("no perturbation can be sampled"));

    let env_out = Command::new(env!("CARGO_BIN_EXE_setdino"))
        .current_dir(ws.dir.path())
        .env("SETDINO__WORLD__N_GENES", "1")
        .args(["synth", "--out", "y"])
        .output()
        .unwrap();
    assert_eq!(code(&env_out), 2);
}

#[test]
fn full_pipeline_with_skip_resume_and_reruns() {
    let ws = Ws::new();
    ws.tiny(&["synth", "--out", "data"]);
    let synth_manifest = std::fs::read(ws.p("data/run.json")).unwrap();
    // Up-to-date stages are skipped and their manifest left untouched.
    ws.tiny(&["synth", "--out", "data"]);
    assert_eq!(std::fs::read(ws.p("data/run.json")).unwrap(), synth_manifest);

    // Interrupted then resumed training equals an uninterrupted run.
    ws.tiny(&["train", "--data", "data", "--out", "full"]);
    ws.tiny(&["train", "--data", "data", "--out", "split", "--stop-after", "1"]);
    let m = RunManifest::load(&ws.p("split")).unwrap().unwrap();
    assert_eq!(m.stages["train"].finished_unix, None);
    ws.tiny(&["train", "--data", "data", "--out", "split"]);
    assert_eq!(
        std::fs::read(ws.p("full/checkpoint.bin")).unwrap(),
        std::fs::read(ws.p("split/checkpoint.bin")).unwrap()
    );
    let history = std::fs::read_to_string(ws.p("full/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 1 + 4);

    ws.tiny(&["embed", "--data", "data", "--checkpoint", "full/checkpoint.bin", "--out", "tables"]);
    let single = EmbeddingTable::read(&ws.p("tables"), "single_cell").unwrap();
    let manifest = std::fs::read_to_string(ws.p("data/manifest.jsonl")).unwrap();
    let test_cells = manifest.lines().filter(|l| l.contains(r#""split":"test""#)).count();
    assert_eq!(single.len(), test_cells);
    for name in ["batch_guide", "batch_gene", "consensus"] {
        EmbeddingTable::read(&ws.p("tables"), name).unwrap();
    }

    let eval = |out: &str| {
        ws.tiny(&[
            "--force",
            "evaluate",
            "--tables",
            "tables",
            "--truth",
            "data/truth_full.csv",
            "--curated",
            "data/truth_curated.csv",
            "--out",
            out,
        ]);
    };
    eval("eval");
    let first = std::fs::read(ws.p("eval/report.json")).unwrap();
    eval("eval");
    assert_eq!(std::fs::read(ws.p("eval/report.json")).unwrap(), first);
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["headline"].as_object().unwrap().len(), 8);
    for f in ["pr_curve.csv", "pr_curve.svg", "pca_sweep.csv", "adjacency.svg", "adjacency_predicted.csv"] {
        assert!(ws.p("eval").join(f).exists(), "{f}");
    }

    std::fs::write(ws.p("empty.csv"), "gene_a,gene_b\n").unwrap();
    let out = ws.run(&["evaluate", "--tables", "tables", "--truth", "empty.csv", "--out", "e"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("undefined"), "{}", stderr(&out));

    ws.ok(&["report", "--out", "summary.md", "eval"]);
    assert!(std::fs::read_to_string(ws.p("summary.md")).unwrap().contains("curated R@5%"));
}

#[test]
fn missing_controls_fail_embedding() {
    let ws = Ws::new();
    ws.tiny(&["synth", "--out", "data"]);
    ws.tiny(&["train", "--data", "data", "--out", "t"]);
    let manifest = std::fs::read_to_string(ws.p("data/manifest.jsonl")).unwrap();
    let kept: String = manifest
        .lines()
        .filter(|l| !l.contains(r#""gene":"NTC""#))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(kept.len() < manifest.len());
    std::fs::write(ws.p("data/manifest.jsonl"), kept).unwrap();
    let out = ws.run(&[
        "-c",
        "tiny.toml",
        "embed",
        "--data",
        "data",
        "--checkpoint",
        "t/checkpoint.bin",
        "--normalization",
        "ntc_zscore",
        "--out",
        "tables",
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("missing controls"), "{}", stderr(&out));
}

#[test]
fn ablation_grid_records_every_arm() {
    let ws = Ws::new();
    let grid = r#"
[train]
epochs = 1
[ablate]
seeds = [0]
[[ablate.arms]]
strategy = "same_cells"
n = 1
[[ablate.arms]]
strategy = "same_cells"
n = 2
[[ablate.arms]]
strategy = "within_batch"
n = 2
[[ablate.arms]]
strategy = "cross_batch"
n = 2
[[ablate.arms]]
strategy = "within_batch"
n = 100
"#;
    let cfg = format!("{TINY}\n{}", grid.replace("[train]\nepochs = 1\n", ""));
    let cfg = cfg.replace("epochs = 2", "epochs = 1").replace("warmup_epochs = 1", "warmup_epochs = 0");
    std::fs::write(ws.p("grid.toml"), cfg).unwrap();
    ws.ok(&["-c", "grid.toml", "ablate", "--out", "abl"]);
    let rows: Vec<AblationRow> = serde_json::from_slice(&std::fs::read(ws.p("abl").join(ABLATION_JSON)).unwrap()).unwrap();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0].label, "standard DINO baseline");
    assert!(rows[1..].iter().all(|r| r.label != "standard DINO baseline"));
    assert!(rows.iter().all(|r| r.dataset_hash == rows[0].dataset_hash));
    assert!(rows[..4].iter().all(|r| r.status == "ok" && r.collapse_final.is_some()));
    assert!(rows[4].status.starts_with("error"), "{}", rows[4].status);
    let csv = std::fs::read_to_string(ws.p("abl/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}
