use std::path::{Path, PathBuf};
use std::process::Command;

use eisam_core::data::{generate_zipf_dataset, load_frequency_dump, load_interactions, load_sequences, ZipfConfig};
use eisam_core::model::ModelParams;

fn eisam(out: &Path, args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_eisam"))
        .args(["--profile", "smoke", "--output-dir"])
        .arg(out)
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&o.stdout).to_string() + &String::from_utf8_lossy(&o.stderr);
    (o.status.code().unwrap_or(-1), text)
}

fn run_dir(out: &Path, cmd: &str, tag: &str) -> PathBuf {
    out.join(cmd).join(tag)
}

#[test]
fn gen_data_files_reload_losslessly() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = eisam(tmp.path(), &["gen-data", "--seed", "3"]);
    assert_eq!(code, 0, "{text}");
    let dir = run_dir(tmp.path(), "gen-data", "default");
    let cfg = ZipfConfig {
        n_items: 50,
        n_sequences: 2000,
        n_clusters: 10,
        affinity: 0.9,
        seed: 3,
        ..Default::default()
    };
    let (log, ds, table) = generate_zipf_dataset(&cfg).unwrap();
    assert_eq!(load_interactions(&dir.join("interactions.tsv")).unwrap(), log);
    assert_eq!(load_frequency_dump(&dir.join("frequencies.json")).unwrap(), table);
    let seqs = load_sequences(&dir.join("sequences.jsonl"), ds.max_len).unwrap();
    assert_eq!(seqs.len(), ds.len());
    for (a, b) in seqs.examples.iter().zip(&ds.examples) {
        assert_eq!((&a.prefix, a.target), (&b.prefix, b.target));
    }
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["seed"], 3);
}

#[test]
fn seed_changes_generated_data() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(eisam(tmp.path(), &["gen-data", "--tag", "a", "--seed", "1"]).0, 0);
    assert_eq!(eisam(tmp.path(), &["gen-data", "--tag", "b", "--seed", "2"]).0, 0);
    let read = |t| std::fs::read(run_dir(tmp.path(), "gen-data", t).join("interactions.tsv")).unwrap();
    assert_ne!(read("a"), read("b"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for bad in ["data.n_items=1", "optimizer.nosuch=1", "optimizer.variant=LAMB"] {
        let (code, text) = eisam(tmp.path(), &["gen-data", "--set", bad]);
        assert_eq!(code, 2, "{bad}: {text}");
    }
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"d_emb": 8, "depth": 2}}"#).unwrap();
    let (code, _) = eisam(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 2);
    let (code, _) = eisam(tmp.path(), &["eval", "--checkpoint", "/no/such/file.json"]);
    assert_eq!(code, 2);
    let (code, _) = eisam(tmp.path(), &["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"optimizer": {"epochs": 0, "variant": "SAM"}}"#).unwrap();
    let (code, text) = eisam(
        tmp.path(),
        &["train", "--config", cfg.to_str().unwrap(), "--set", "model.d_emb=4", "--jobs", "1"],
    );
    assert_eq!(code, 0, "{text}");
    let dir = run_dir(tmp.path(), "train", "default");
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["optimizer"]["variant"], "SAM");
    assert_eq!(echoed["model"]["d_emb"], 4);
    assert_eq!(echoed["data"]["n_items"], 50);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = eisam(tmp.path(), &["train", "--set", "optimizer.epochs=0", "--seed", "5"]);
    assert_eq!(code, 0, "{text}");
    let p = ModelParams::load(&run_dir(tmp.path(), "train", "default").join("checkpoint.json")).unwrap();
    assert_eq!(p.params, ModelParams::init(p.n_items, 8, 5).params);
}

#[test]
fn eisam_training_lowers_the_loss_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    for tag in ["a", "b"] {
        assert_eq!(eisam(tmp.path(), &["train", "--tag", tag]).0, 0);
    }
    let dir = |t| run_dir(tmp.path(), "train", t);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir("a").join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "EISAM");
    assert!(summary["final_loss"].as_f64().unwrap() < summary["initial_loss"].as_f64().unwrap());
    for f in ["checkpoint.json", "summary.json"] {
        assert_eq!(std::fs::read(dir("a").join(f)).unwrap(), std::fs::read(dir("b").join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(dir("a").join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn analysis_commands_on_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(eisam(tmp.path(), &["train"]).0, 0);
    let ckpt = run_dir(tmp.path(), "train", "default").join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();

    let (code, text) = eisam(tmp.path(), &["landscape", "--checkpoint", ckpt, "--set", "analysis.resolution=3"]);
    assert_eq!(code, 0, "{text}");
    let csv = std::fs::read_to_string(run_dir(tmp.path(), "landscape", "default").join("landscape.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("alpha,beta,loss"));
    assert_eq!(csv.lines().count(), 1 + 9);
    let (code, _) = eisam(tmp.path(), &["landscape", "--checkpoint", ckpt, "--set", "analysis.resolution=4"]);
    assert_eq!(code, 2);

    let (code, text) = eisam(tmp.path(), &["bound", "--checkpoint", ckpt, "--set", "optimizer.lambda=0"]);
    assert_eq!(code, 0, "{text}");
    let b: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir(tmp.path(), "bound", "default").join("bound.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(b["curvature_bonus"], 0.0);
    assert_eq!(b["complexity"], 0.0);
    assert!(text.contains("curvature 0.000000"));

    assert_eq!(eisam(tmp.path(), &["trace", "--checkpoint", ckpt]).0, 0);
    let t: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(run_dir(tmp.path(), "trace", "default").join("trace.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(t["scope"], "tail");
    assert_eq!(t["n_probes"], 5);

    assert_eq!(eisam(tmp.path(), &["eval", "--checkpoint", ckpt]).0, 0);
    let m = std::fs::read_to_string(run_dir(tmp.path(), "eval", "default").join("metrics.csv")).unwrap();
    assert_eq!(m.lines().count(), 4);

    let (code, _) = eisam(tmp.path(), &["bound", "--checkpoint", ckpt, "--set", "analysis.delta=1.5"]);
    assert_eq!(code, 1);
}

#[test]
fn gradcheck_and_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = eisam(tmp.path(), &["gradcheck"]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("max relative error"));
    let (code, text) = eisam(tmp.path(), &["gradcheck", "--set", "analysis.gradcheck_step=0.5", "--tag", "coarse"]);
    assert_eq!(code, 1, "{text}");
    assert_eq!(eisam(tmp.path(), &["weights"]).0, 0);
    let w = std::fs::read_to_string(run_dir(tmp.path(), "weights", "default").join("weights.csv")).unwrap();
    assert_eq!(w.lines().next(), Some("rank,item_id,q,weight"));
    assert_eq!(w.lines().count(), 51);
}

#[test]
fn experiment_writes_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, text) = eisam(
        tmp.path(),
        &["experiment", "--set", "eval.seeds=[0]", "--set", "optimizer.epochs=1", "--set", "eval.trace=true"],
    );
    assert_eq!(code, 0, "{text}");
    let dir = run_dir(tmp.path(), "experiment", "default");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert!(r["cells"]["EISAM"]["0"]["metrics"]["tail"]["ndcg_at_k"].is_number());
    assert!(r["cells"]["SAM"]["0"]["tail_trace"]["estimate"].is_number());
    assert!(r["summary"]["relative_improvement"]["tail"].is_object());
    let t: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("timing.json")).unwrap()).unwrap();
    assert_eq!(t["ratio_to_sam"]["SAM"], 1.0);
    let csv = std::fs::read_to_string(dir.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}
