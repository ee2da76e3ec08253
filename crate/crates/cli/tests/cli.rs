use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_ventseq");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train"][..],
        &["train", "--synth", "4", "--units", "3,4"],
        &["train", "--synth", "0"],
        &["frobnicate"],
        &["params", "--units", "0"],
    ] {
        assert_eq!(run(args, dir.path()).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn params_reports_desk_total_and_census() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["params"], dir.path());
    assert!(out.status.success());
    let s = text(&out);
    assert!(s.contains("total 49957"));
    assert!(s.contains("bilstm=7 bigru=5 multiply=4 batchnorm=5"));
    assert!(s.contains("block3.bigru"));
}

#[test]
fn paper_scale_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["params", "--paper-scale"], dir.path());
    assert!(text(&out).contains("total 54731529"));
}

#[test]
fn missing_checkpoint_and_bad_csv_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.csv"), "id,breath_id,R\n1,1,20\n").unwrap();
    let out = run(
        &["eval", "--checkpoint", "nope.vseq", "--data", "bad.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(run(
        &[
            "synth",
            "--out",
            "d.csv",
            "--breaths",
            "2",
            "--seq-len",
            "10"
        ],
        dir.path()
    )
    .status
    .success());
    let out = run(
        &[
            "train",
            "--data",
            "bad.csv",
            "--epochs",
            "1",
            "--checkpoint",
            "m.vseq",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("missing column"));
}

#[test]
fn train_eval_predict_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(run(
        &[
            "synth",
            "--out",
            "train.csv",
            "--breaths",
            "10",
            "--seq-len",
            "16"
        ],
        d
    )
    .status
    .success());
    assert!(run(
        &[
            "synth",
            "--out",
            "test.csv",
            "--breaths",
            "3",
            "--seq-len",
            "16",
            "--seed",
            "5",
            "--unlabeled"
        ],
        d
    )
    .status
    .success());
    let train = run(
        &[
            "train",
            "--data",
            "train.csv",
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--units",
            "3",
            "--dense-hidden",
            "4",
            "--mask-inspiratory",
            "--checkpoint",
            "m.vseq",
            "--metrics-out",
            "metrics.csv",
        ],
        d,
    );
    assert!(train.status.success(), "{}", text(&train));
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,train_mae,train_mse,val_mae,val_mse,seconds")
    );
    assert_eq!(metrics.lines().count(), 3);

    let eval = run(
        &[
            "eval",
            "--checkpoint",
            "m.vseq",
            "--data",
            "train.csv",
            "--pred-out",
            "pred.csv",
        ],
        d,
    );
    assert!(eval.status.success(), "{}", text(&eval));
    assert!(text(&eval).contains("cmH2O"));
    let pred = std::fs::read_to_string(d.join("pred.csv")).unwrap();
    assert_eq!(
        pred.lines().next(),
        Some("breath_id,time_step,actual,predicted")
    );
    assert_eq!(pred.lines().count(), 1 + 160);

    let predict = run(
        &[
            "predict",
            "--checkpoint",
            "m.vseq",
            "--test-data",
            "test.csv",
            "--pred-out",
            "sub.csv",
        ],
        d,
    );
    assert!(predict.status.success(), "{}", text(&predict));
    let sub = std::fs::read_to_string(d.join("sub.csv")).unwrap();
    let ids: Vec<u64> = sub
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(ids, (1..=48).collect::<Vec<_>>());

    let labeled = run(
        &[
            "predict",
            "--checkpoint",
            "m.vseq",
            "--test-data",
            "train.csv",
            "--pred-out",
            "x.csv",
        ],
        d,
    );
    assert!(labeled.status.success());
    assert!(text(&labeled).contains("pressure column"));
}

#[test]
fn gradcheck_fault_names_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--inject-fault"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("dense ("));
}

#[test]
fn bad_thread_count_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN)
        .args(["params"])
        .current_dir(dir.path())
        .env("VENTSEQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
