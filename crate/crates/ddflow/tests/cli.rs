//! End-to-end tests of the `ddf` binary: every subcommand run as a child
//! process against real files, checking exit codes, printed numbers, and
//! byte-level artifacts.

use std::path::Path;
use std::process::Command;

fn ddf(args: &[&str]) -> (bool, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ddf"))
        .args(args)
        .env("DDF_THREADS", "4")
        .output()
        .expect("ddf runs");
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ddf_ok(args: &[&str]) -> String {
    let (ok, stdout, stderr) = ddf(args);
    assert!(ok, "ddf {args:?} failed\nstdout:\n{stdout}\nstderr:\n{stderr}");
    stdout
}

/// Pulls the first float following `prefix` on any stdout line.
fn number_after(stdout: &str, prefix: &str) -> f64 {
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix(prefix))
        .unwrap_or_else(|| panic!("no line starts with {prefix:?} in:\n{stdout}"));
    line.split_whitespace()
        .next()
        .expect("value after prefix")
        .parse()
        .expect("parses as a float")
}

fn write_toy_spec(path: &Path, epochs: usize) {
    let spec = format!(
        r#"{{
            "k": 91,
            "shape": [2],
            "epochs": {epochs},
            "batch": 64,
            "seed": 5,
            "blocks": [
                {{"type": "coupling", "h": 91, "net": {{"kind": "mlp", "hidden": 32, "layers": 2}}}}
            ]
        }}"#
    );
    std::fs::write(path, spec).unwrap();
}

#[test]
fn gen_toy_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ddf_ok(&["gen-toy", "-n", "300", "--seed", "7", "--out", a.to_str().unwrap()]);
    ddf_ok(&["gen-toy", "-n", "300", "--seed", "7", "--out", b.to_str().unwrap()]);
    ddf_ok(&["gen-toy", "-n", "300", "--seed", "8", "--out", b.to_str().unwrap()]);
    let first = std::fs::read(a.join("toy-n300-seed7.ddfg")).unwrap();
    let second = std::fs::read(b.join("toy-n300-seed7.ddfg")).unwrap();
    let other = std::fs::read(b.join("toy-n300-seed8.ddfg")).unwrap();
    assert_eq!(first, second);
    assert_ne!(first, other);
}

#[test]
fn train_eval_compress_decompress_agree_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.json");
    write_toy_spec(&spec, 2);
    ddf_ok(&["gen-toy", "-n", "1500", "--seed", "1", "--out", root.to_str().unwrap()]);
    let data = root.join("toy-n1500-seed1.ddfg");
    let run = root.join("run");

    let train_out = ddf_ok(&[
        "train",
        "--spec",
        spec.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let final_bpd = number_after(&train_out, "final BPD ");
    let model = run.join("model.ddfm");
    assert!(model.exists());
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert!(report.starts_with("epoch,layer,train_nats,valid_nats\n"));

    // The standalone evaluator reproduces the training report's number.
    let eval_out = ddf_ok(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let eval_bpd = number_after(&eval_out, "mean BPD ");
    assert!(
        (eval_bpd - final_bpd).abs() < 1e-6,
        "train said {final_bpd}, eval said {eval_bpd}"
    );
    let per_sample = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(per_sample.starts_with("index,bpd\n"));
    assert_eq!(per_sample.lines().count(), 1 + 1500);

    // Lossless round trip through the compressed stream, byte for byte.
    ddf_ok(&[
        "compress",
        "--model",
        model.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    ddf_ok(&[
        "decompress",
        "--model",
        model.to_str().unwrap(),
        "--data",
        run.join("compressed.ddfs").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let original = std::fs::read(&data).unwrap();
    let recovered = std::fs::read(run.join("decompressed.ddfg")).unwrap();
    assert_eq!(original, recovered);
}

#[test]
fn sampling_writes_grids_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.json");
    write_toy_spec(&spec, 1);
    ddf_ok(&["gen-toy", "-n", "400", "--seed", "2", "--out", root.to_str().unwrap()]);
    ddf_ok(&[
        "train",
        "--spec",
        spec.to_str().unwrap(),
        "--data",
        root.join("toy-n400-seed2.ddfg").to_str().unwrap(),
        "--out",
        root.join("run").to_str().unwrap(),
    ]);
    let stdout = ddf_ok(&[
        "sample",
        "--model",
        root.join("run/model.ddfm").to_str().unwrap(),
        "-n",
        "6",
        "--seed",
        "9",
        "--out",
        root.join("samples").to_str().unwrap(),
    ]);
    assert!(stdout.contains("6 samples"));
    assert!(root.join("samples/samples.ddfg").exists());
    for i in 0..6 {
        assert!(root.join(format!("samples/sample-{i:03}.ppm")).exists());
    }
    // Same seed, same samples.
    ddf_ok(&[
        "sample",
        "--model",
        root.join("run/model.ddfm").to_str().unwrap(),
        "-n",
        "6",
        "--seed",
        "9",
        "--out",
        root.join("samples2").to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(root.join("samples/samples.ddfg")).unwrap(),
        std::fs::read(root.join("samples2/samples.ddfg")).unwrap()
    );
}

#[test]
fn density_plot_accounts_for_all_probability() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let spec = root.join("spec.json");
    write_toy_spec(&spec, 1);
    ddf_ok(&["gen-toy", "-n", "500", "--seed", "3", "--out", root.to_str().unwrap()]);
    ddf_ok(&[
        "train",
        "--spec",
        spec.to_str().unwrap(),
        "--data",
        root.join("toy-n500-seed3.ddfg").to_str().unwrap(),
        "--out",
        root.join("run").to_str().unwrap(),
    ]);
    let stdout = ddf_ok(&[
        "plot-density",
        "--model",
        root.join("run/model.ddfm").to_str().unwrap(),
        "--out",
        root.join("plots").to_str().unwrap(),
    ]);
    let total = number_after(&stdout, "total probability ");
    assert!((total - 1.0).abs() < 1e-6, "total probability {total}");
    let ppm = std::fs::read(root.join("plots/density.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n91 91\n255\n"));
}

#[test]
fn verify_passes_at_reduced_scale() {
    let stdout = ddf_ok(&["verify", "-n", "25"]);
    assert!(stdout.contains("all suites passed"), "stdout:\n{stdout}");
    assert!(stdout.matches("\nok ").count() >= 7, "stdout:\n{stdout}");
}

#[test]
fn failures_exit_nonzero_with_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ddfm");
    let (ok, _, stderr) = ddf(&[
        "eval",
        "--model",
        missing.to_str().unwrap(),
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(stderr.starts_with("error: "), "stderr:\n{stderr}");

    let (ok, _, _) = ddf(&["definitely-not-a-subcommand"]);
    assert!(!ok);

    // A grids file with the wrong magic is refused with a clear message.
    let junk = dir.path().join("junk.ddfg");
    std::fs::write(&junk, b"JUNKJUNKJUNK").unwrap();
    let (ok, _, stderr) = ddf(&[
        "eval",
        "--model",
        missing.to_str().unwrap(),
        "--data",
        junk.to_str().unwrap(),
    ]);
    assert!(!ok);
    assert!(stderr.starts_with("error: "), "stderr:\n{stderr}");
}
