//! End-to-end runs of the `driftcomp` binary on seconds-scale configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use driftcomp::model::resnet20_cifar;
use driftcomp::ModelSpec;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftcomp"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny() -> String {
    fixture("tiny.toml").display().to_string()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn malformed_config_exits_2() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "bad.toml", "seed = \"three\"\n[data\n");
    let o = run(&["validate", "--config", &cfg], d.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("bad.toml"));
}

#[test]
fn unknown_key_exits_2() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "c.toml", "[scheduler]\nthreshold = 0.5\n");
    let o = run(&["cost", "--config", &cfg], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("threshold"), "{}", stderr(&o));
}

#[test]
fn out_of_range_values_exit_2() {
    let d = TempDir::new().unwrap();
    for (name, text) in [
        ("bits.toml", "[cost.settings]\nbits_comp = 12\n"),
        ("drift.toml", "[drift]\nmodel = \"lognormal\"\n"),
        ("times.toml", "[sweep]\ntimes = [0.5]\n"),
    ] {
        let cfg = write(d.path(), name, text);
        let o = run(&["cost", "--config", &cfg], d.path());
        assert_eq!(code(&o), 2, "{name}: {}", stderr(&o));
    }
}

#[test]
fn missing_backbone_exits_2() {
    let d = TempDir::new().unwrap();
    let o = run(&["sweep", "--config", &tiny()], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("backbone.ckpt"));
}

#[test]
fn measured_table_with_bad_row_exits_2() {
    let d = TempDir::new().unwrap();
    let table = write(d.path(), "t.csv", "# reference_time_s=10\ng_level_uS,mu_uS,sigma_uS\n5,0.1,0.1\n10,abc,0.1\n");
    let cfg = write(d.path(), "c.toml", &format!("[drift]\nmodel = \"measured:{table}\"\n"));
    let o = run(&["validate", "--config", &cfg], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("t.csv"), "{}", stderr(&o));
}

#[test]
fn untrained_backbone_round_trips_and_validates() {
    let d = TempDir::new().unwrap();
    let o = run(&["pretrain", "--config", &tiny(), "--epochs", "0"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = d.path().join("backbone.ckpt");
    let b = driftcomp::Backbone::read(&ckpt).unwrap();
    assert_eq!(driftcomp::Backbone::from_bytes(&b.to_bytes().unwrap(), &ckpt).unwrap(), b);

    let o = run(&["validate", "--config", &tiny()], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(d.path().join("validate.json").exists());
}

#[test]
fn corrupted_checkpoint_fails_validation_naming_the_file() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", &tiny(), "--epochs", "0"], d.path())), 0);
    let ckpt = d.path().join("backbone.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ckpt, &bytes).unwrap();

    let o = run(&["validate", "--config", &tiny()], d.path());
    assert_eq!(code(&o), 1);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("backbone.ckpt"), "{stdout}");

    std::fs::write(&ckpt, &bytes[..10]).unwrap();
    let o = run(&["sweep", "--config", &tiny()], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("backbone.ckpt"));
}

fn cost_rows(dir: &Path) -> Vec<Vec<String>> {
    let text = std::fs::read_to_string(dir.join("cost.csv")).unwrap();
    text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn cost_orders_variants_on_both_topologies() {
    for topology in ["toy", "resnet20"] {
        let d = TempDir::new().unwrap();
        let o = run(&["cost", "--topology", topology], d.path());
        assert_eq!(code(&o), 0, "{topology}: {}", stderr(&o));
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.path().join("cost.json")).unwrap()).unwrap();
        let reports = json["reports"].as_array().unwrap();
        assert_eq!(reports.len(), cost_rows(d.path()).len());
        for chunk in reports.chunks(3) {
            let p: Vec<u64> = chunk.iter().map(|r| r["params_comp"].as_u64().unwrap()).collect();
            let s: Vec<f64> = chunk.iter().map(|r| r["storage_comp_bytes"].as_f64().unwrap()).collect();
            assert_eq!(chunk[2]["variant"], "vera-plus");
            assert!(p[2] < p[1] && p[1] < p[0], "{topology}: {p:?}");
            assert!(s[2] < s[1] && s[1] < s[0], "{topology}: {s:?}");
        }
    }
}

#[test]
fn shipped_resnet20_manifest_matches_builtin_topology() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../manifests/resnet20.json");
    let spec: ModelSpec = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(spec, resnet20_cifar(10));

    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(code(&run(&["cost", "--topology", "resnet20"], a.path())), 0);
    assert_eq!(code(&run(&["cost", "--topology", &path.display().to_string()], b.path())), 0);
    assert_eq!(cost_rows(a.path()), cost_rows(b.path()));
}

#[test]
fn unreachable_threshold_keeps_only_the_initial_set() {
    let d = TempDir::new().unwrap();
    assert_eq!(code(&run(&["pretrain", "--config", &tiny()], d.path())), 0);
    let o = run(&["schedule", "--config", &tiny(), "--a-thr", "0.0001"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("schedule.json")).unwrap()).unwrap();
    assert_eq!(doc["drift_points"], serde_json::json!([1.0]));
    assert!(doc["steps"].as_array().unwrap().iter().all(|s| s["triggered"] == false));
    let archive = driftcomp::CompensationArchive::read(&d.path().join("sets.dca")).unwrap();
    assert_eq!(archive.sets.len(), 1);
    assert!(archive.sets[0].layers.iter().all(|l| l.b_vec.iter().all(|b| *b == 0.0)));
}

#[test]
fn schedule_rejects_non_vera_plus_variant() {
    let d = TempDir::new().unwrap();
    let cfg = write(d.path(), "c.toml", "[compensation]\nvariant = \"lora\"\n");
    let o = run(&["schedule", "--config", &cfg], d.path());
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn pipeline(dir: &Path, threads: &str) {
    let cfg = tiny();
    for verb in [
        vec!["pretrain"],
        vec!["schedule", "--a-thr-drop", "1"],
        vec!["sweep"],
    ] {
        let mut args = verb.clone();
        args.extend(["--config", &cfg, "--threads", threads]);
        let o = run(&args, dir);
        assert_eq!(code(&o), 0, "{verb:?}: {}", stderr(&o));
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_outputs_are_byte_identical_across_runs_and_thread_counts() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    pipeline(a.path(), "1");
    pipeline(b.path(), "3");
    let (fa, fb) = (files(a.path()), files(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["backbone.ckpt", "sets.dca", "schedule.json", "sweep.csv", "train_log.csv"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between runs");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for (d, seed) in [(&a, "3"), (&b, "4")] {
        assert_eq!(code(&run(&["pretrain", "--config", &tiny(), "--seed", seed], d.path())), 0);
    }
    let read = |d: &TempDir| std::fs::read(d.path().join("backbone.ckpt")).unwrap();
    assert_ne!(read(&a), read(&b));
    let doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.path().join("pretrain.json")).unwrap()).unwrap();
    assert_eq!(doc["provenance"]["seed"], 4);
}
