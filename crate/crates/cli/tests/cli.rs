use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BLOBS: &str = r#"
seed = 3

[data]
kind = "blobs"
n = 200

[model]
arch = "mlp"
hidden = [16]

[train]
epochs = 2
warmup = 5
ramp = 10

[eval]
eps = [0.05]
"#;

fn certcomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_certcomp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn setup(dir: &Path, config: &str) -> (String, String) {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    (cfg.display().to_string(), dir.join("out").display().to_string())
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
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
fn train_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), BLOBS);
    ok(certcomp(&["train", "--config", &cfg, "--out", &out]));
    let out_dir = Path::new(&out);
    for f in ["metrics.csv", "epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let ckpt = out_dir.join("final.ckpt").display().to_string();
    let table = ok(certcomp(&["eval", &ckpt, "--config", &cfg, "--out", &out, "--variant", "none", "--variant", "lul1:0.5"]));
    assert!(table.contains("lul1:0.5"));
    let rows = csv_rows(&out_dir.join("eval.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "none");
    assert_eq!(rows[0][3], "200");
}

#[test]
fn quantize_then_eval_equals_int8_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), BLOBS);
    ok(certcomp(&["train", "--config", &cfg, "--out", &out]));
    let out_dir = Path::new(&out);
    let ckpt = out_dir.join("final.ckpt").display().to_string();
    ok(certcomp(&["eval", &ckpt, "--config", &cfg, "--out", &out, "--variant", "int8"]));
    let direct = csv_rows(&out_dir.join("eval.csv"));

    ok(certcomp(&["quantize", &ckpt, "--bits", "8", "--config", &cfg, "--out", &out]));
    let q = out_dir.join("quantized.ckpt").display().to_string();
    ok(certcomp(&["eval", &q, "--config", &cfg, "--out", &out, "--variant", "none"]));
    let via_file = csv_rows(&out_dir.join("eval.csv"));
    // same counts, different variant label
    assert_eq!(direct[0][3..], via_file[0][3..]);
}

#[test]
fn prune_writes_a_sparse_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), BLOBS);
    ok(certcomp(&["train", "--config", &cfg, "--out", &out]));
    let out_dir = Path::new(&out);
    let ckpt = out_dir.join("final.ckpt").display().to_string();
    ok(certcomp(&["eval", &ckpt, "--config", &cfg, "--out", &out, "--variant", "lul1:0.6"]));
    let direct = csv_rows(&out_dir.join("eval.csv"));
    ok(certcomp(&["prune", &ckpt, "--method", "lul1", "--ratio", "0.6", "--config", &cfg, "--out", &out]));
    let p = out_dir.join("pruned.ckpt").display().to_string();
    ok(certcomp(&["eval", &p, "--config", &cfg, "--out", &out, "--variant", "none"]));
    assert_eq!(direct[0][3..], csv_rows(&out_dir.join("eval.csv"))[0][3..]);
}

#[test]
fn zero_radius_certification_is_correctness() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), BLOBS);
    ok(certcomp(&["train", "--config", &cfg, "--out", &out]));
    let out_dir = Path::new(&out);
    let ckpt = out_dir.join("final.ckpt").display().to_string();
    ok(certcomp(&["certify", &ckpt, "--eps", "0", "--config", &cfg, "--out", &out]));
    let rows = csv_rows(&out_dir.join("certify.csv"));
    assert_eq!(rows.len(), 200);
    for r in rows {
        let correct = r[1] == r[2];
        assert_eq!(r[3] == "1", correct, "row {r:?}");
    }
}

#[test]
fn resume_reproduces_the_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), &BLOBS.replace("epochs = 2", "epochs = 3"));
    let whole = dir.path().join("whole").display().to_string();
    ok(certcomp(&["train", "--config", &cfg, "--out", &whole]));
    ok(certcomp(&["train", "--config", &cfg, "--out", &out, "--stop-after", "1"]));
    let first = Path::new(&out).join("epoch_001.ckpt").display().to_string();
    ok(certcomp(&["train", "--config", &cfg, "--out", &out, "--resume", &first]));
    let read = |d: &str, f: &str| fs::read(Path::new(d).join(f)).unwrap();
    assert_eq!(read(&whole, "metrics.csv"), read(&out, "metrics.csv"));
    assert_eq!(read(&whole, "final.ckpt"), read(&out, "final.ckpt"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = setup(dir.path(), BLOBS);
    assert_eq!(certcomp(&["--help"]).status.code(), Some(0));
    assert_eq!(certcomp(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(certcomp(&["train", "--config", "/nonexistent/run.toml"]).status.code(), Some(2));
    let missing = dir.path().join("missing.ckpt").display().to_string();
    assert_eq!(certcomp(&["eval", &missing, "--config", &cfg, "--out", &out]).status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nepochz = 3\n").unwrap();
    let bad = bad.display().to_string();
    let res = certcomp(&["train", "--config", &bad, "--out", &out]);
    assert_eq!(res.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&res.stderr).contains("epochz"));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let garbage = garbage.display().to_string();
    assert_eq!(certcomp(&["certify", &garbage, "--config", &cfg, "--out", &out]).status.code(), Some(2));
}
