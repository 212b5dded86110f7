use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[dataset]
source = "synthetic"

[dataset.synthetic]
classes = 4
shape = [3, 8, 8]
n_per_class = 20
n_test_per_class = 10

[partition]
scheme = "pathological"
classes_per_client = 2
clients = 2
holdout_clients = 1
min_samples = 1

[model]
architecture = "mlp-tiny"
hidden = 8

[prompt]
size = 2

[train]
algorithms = ["pfedpt", "fedavg", "fedrep", "local"]
rounds = 1
sample_fraction = 1.0
backbone_epochs = 1
prompt_epochs = 1

[output]
finetune = true
finetune_budget = 10
finetune_epochs = 2
probe_images = 8
embeddings = true
embedding_samples = 4
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn pfedpt(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pfedpt"));
    cmd.args(args);
    if args[0] != "check" {
        cmd.args(["--log-level", "warn"]);
    }
    cmd.output().unwrap()
}

fn run_into(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "-c", config.to_str().unwrap(), "-o", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    pfedpt(&args)
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn trivial_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    assert_ok(&run_into(&cfg, &out, &[]));

    for f in ["manifest.json", "summary.json", "shards.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    for f in [
        "rounds.csv",
        "drift.csv",
        "similarity.csv",
        "finetune.csv",
        "embeddings.csv",
        "global.bin",
        "prompts/client_0.bin",
        "prompts/client_1.bin",
    ] {
        assert!(out.join("pfedpt").join(f).is_file(), "missing pfedpt/{f}");
    }
    assert!(!out.join("fedavg/drift.csv").exists());
    assert!(out.join("fedrep/heads/client_1.bin").is_file());
    assert!(out.join("local/models/client_0.bin").is_file());

    let rounds = fs::read_to_string(out.join("pfedpt/rounds.csv")).unwrap();
    let mut lines = rounds.lines();
    assert_eq!(
        lines.next().unwrap(),
        "round,client_id,train_loss,test_acc,weighted_acc,prompt_drift,wall_ms"
    );
    assert_eq!(lines.count(), 2);

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["complete"], true);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"]["root"], 3);

    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["algorithms"].as_array().unwrap().len(), 4);
    let comparison = summary["comparison"].as_array().unwrap();
    assert_eq!(comparison.len(), 3);
    for c in comparison {
        assert_eq!(c["algorithm"], "pfedpt");
        assert!(c["best_gap"].as_f64().unwrap().abs() <= 1.0);
    }
}

#[test]
fn reruns_are_byte_identical_across_worker_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("rounds = 1", "rounds = 3"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_ok(&run_into(&cfg, &a, &[]));
    assert_ok(&run_into(&cfg, &b, &["--workers", "3"]));
    for f in ["pfedpt/rounds.csv", "fedrep/rounds.csv", "pfedpt/drift.csv", "shards.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let hash = |dir: &Path| -> String {
        let m: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        m["config_sha256"].as_str().unwrap().to_owned()
    };
    assert_eq!(hash(&a), hash(&b));
}

#[test]
fn non_empty_output_needs_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join("stale.txt"), "x").unwrap();

    let refused = run_into(&cfg, &out, &[]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("overwrite"));
    assert!(out.join("stale.txt").exists());

    assert_ok(&run_into(&cfg, &out, &["--overwrite"]));
    assert!(!out.join("stale.txt").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn invalid_config_exits_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &TINY.replace("clients = 2", "clients = 2\nalpha = -1.0"));
    let o = run_into(&cfg, &tmp.path().join("out"), &[]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("partition.alpha"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn check_prints_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let o = pfedpt(&["check", "-c", cfg.to_str().unwrap()]);
    assert_ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("prompt_lr = 1.0"), "{text}");
    assert!(text.contains("template = \"padding\""), "{text}");
}

fn sweep_rows(out: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["template", "size", "best_weighted_acc", "best_round", "final_weighted_acc", "error"]
    );
    r.records().map(|r| r.unwrap()).collect()
}

#[test]
fn single_point_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[sweep]\ntemplates = [\"patch-random\"]\nsizes = [2]\n");
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    assert_ok(&pfedpt(&["sweep", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]));
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "patch-random");
    assert_eq!(&rows[0][5], "");
    assert!(out.join("sweep/patch-random_p2/rounds.csv").is_file());
}

#[test]
fn full_grid_sweep_continues_past_invalid_points() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!(
        "{TINY}\n[sweep]\ntemplates = [\"padding\", \"patch-fixed\", \"patch-random\"]\nsizes = [2, 4, 8]\n"
    );
    let cfg = write_config(tmp.path(), &text);
    let out = tmp.path().join("out");
    assert_ok(&pfedpt(&["sweep", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()]));
    let rows = sweep_rows(&out);
    assert_eq!(rows.len(), 9);
    let failed: Vec<(String, String)> = rows
        .iter()
        .filter(|r| !r[5].is_empty())
        .map(|r| (r[0].to_owned(), r[1].to_owned()))
        .collect();
    // 8x8 images leave no interior for padding at p >= 4 and no room for an 8x8 patch
    assert!(failed.contains(&("padding".into(), "4".into())), "{failed:?}");
    assert!(failed.contains(&("padding".into(), "8".into())), "{failed:?}");
    assert!(rows.iter().any(|r| r[5].is_empty()));
    for r in rows.iter().filter(|r| r[5].is_empty()) {
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
