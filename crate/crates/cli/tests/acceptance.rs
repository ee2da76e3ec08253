//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line to stderr (uncaptured) and the test fails if any criterion does.

use std::io::Write as _;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ventseq::cells::{gru_step, lstm_step};
use ventseq::data::{apply_scaler, fit_scaler, Column, VentRecord};
use ventseq::model::{count_params, lstm_param_count, HybridModel, Layer, ModelConfig};
use ventseq::{checkpoint, CellState, GruParams, LstmParams, Mode, Parameters, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_ventseq");

type Criterion = (&'static str, fn() -> Verdict);

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn report(id: usize, title: &str, v: &Verdict) {
    let tag = if v.passed { "PASS" } else { "FAIL" };
    // Written to the raw handle so the line survives libtest output capture.
    let _ = writeln!(
        std::io::stderr(),
        "acceptance [{id}] {tag} {title}: {}",
        v.detail
    );
}

fn ventseq(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ventseq")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gradient_correctness() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let ok = ventseq(&["gradcheck", "--seed", "11"], dir.path());
    let elapsed = started.elapsed();
    let text = stdout(&ok);
    let expected = [
        ("lstm_step", 1e-5),
        ("gru_step", 1e-5),
        ("bidirectional_lstm", 1e-5),
        ("bidirectional_gru", 1e-5),
        ("multiply", 1e-5),
        ("batchnorm", 1e-5),
        ("dense", 1e-5),
        ("losses", 1e-5),
        ("full_graph", 1e-4),
    ];
    let mut worst = Vec::new();
    let mut all = ok.status.code() == Some(0);
    for (name, tol) in expected {
        let err = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(name))
            .and_then(|l| l.split_whitespace().nth(1))
            .and_then(|v| v.parse::<f64>().ok());
        match err {
            Some(e) if e <= tol => worst.push(format!("{name}={e:.1e}")),
            Some(e) => {
                all = false;
                worst.push(format!("{name}={e:.1e}>{tol:.0e}"));
            }
            None => {
                all = false;
                worst.push(format!("{name}=missing"));
            }
        }
    }
    let fault = ventseq(&["gradcheck", "--seed", "11", "--inject-fault"], dir.path());
    let named = String::from_utf8_lossy(&fault.stderr).contains(".w");
    let fault_ok = fault.status.code() == Some(1) && named;
    let fast = elapsed < Duration::from_secs(120);
    verdict(
        all && fault_ok && fast,
        format!(
            "{} in {:.1}s; injected fault exit {:?}, tensor named {named}",
            worst.join(" "),
            elapsed.as_secs_f64(),
            fault.status.code()
        ),
    )
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `w` is row-major `[rows, cols]`.
fn row_dot(w: &[f64], row: usize, cols: usize, v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..cols {
        acc += w[row * cols + j] * v[j];
    }
    acc
}

fn lstm_oracle(p: &LstmParams<f64>, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = (p.hidden(), p.input());
    let mut h_out = vec![0.0; n];
    let mut c_out = vec![0.0; n];
    for k in 0..n {
        let gate = |wh: &Tensor<f64>, wx: &Tensor<f64>, b: &Tensor<f64>| {
            row_dot(wh.data(), k, n, h) + row_dot(wx.data(), k, m, x) + b.data()[k]
        };
        let f = sigmoid(gate(&p.w_fh, &p.w_fx, &p.b_f));
        let i = sigmoid(gate(&p.w_ih, &p.w_ix, &p.b_i));
        let g = gate(&p.w_ch, &p.w_cx, &p.b_c).tanh();
        let o = sigmoid(gate(&p.w_oh, &p.w_ox, &p.b_o));
        c_out[k] = f * c[k] + i * g;
        h_out[k] = o * c_out[k].tanh();
    }
    (h_out, c_out)
}

fn gru_oracle(p: &GruParams<f64>, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (n, m) = (p.hidden(), p.input());
    let hx: Vec<f64> = h.iter().chain(x).copied().collect();
    let r: Vec<f64> = (0..n)
        .map(|k| sigmoid(row_dot(p.w_r.data(), k, n + m, &hx) + p.b_r.data()[k]))
        .collect();
    let z: Vec<f64> = (0..n)
        .map(|k| sigmoid(row_dot(p.w_z.data(), k, n + m, &hx) + p.b_z.data()[k]))
        .collect();
    let rhx: Vec<f64> = (0..n)
        .map(|k| r[k] * h[k])
        .chain(x.iter().copied())
        .collect();
    (0..n)
        .map(|k| {
            let cand = (row_dot(p.w_h.data(), k, n + m, &rhx) + p.b_h.data()[k]).tanh();
            (1.0 - z[k]) * h[k] + z[k] * cand
        })
        .collect()
}

fn cell_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let batch = rng.random_range(1..=4);
        let hidden = rng.random_range(1..=8);
        let input = rng.random_range(1..=6);
        let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0));
        let x = draw(&[batch, input]);
        let h = draw(&[batch, hidden]);
        let c = draw(&[batch, hidden]);
        let lp = LstmParams::<f64>::init(input, hidden, &mut rng);
        let gp = GruParams::<f64>::init(input, hidden, &mut rng);

        let ls = lstm_step(
            &x,
            &CellState {
                h: h.clone(),
                c: Some(c.clone()),
            },
            &lp,
        )
        .unwrap();
        let gs = gru_step(
            &x,
            &CellState {
                h: h.clone(),
                c: None,
            },
            &gp,
        )
        .unwrap();
        for b in 0..batch {
            let rows = |t: &Tensor<f64>, w: usize| t.data()[b * w..(b + 1) * w].to_vec();
            let (xb, hb, cb) = (rows(&x, input), rows(&h, hidden), rows(&c, hidden));
            let (h_ref, c_ref) = lstm_oracle(&lp, &xb, &hb, &cb);
            let g_ref = gru_oracle(&gp, &xb, &hb);
            let ls_c = ls.c.as_ref().unwrap();
            for k in 0..hidden {
                worst = worst
                    .max((ls.h.get(&[b, k]) - h_ref[k]).abs())
                    .max((ls_c.get(&[b, k]) - c_ref[k]).abs())
                    .max((gs.h.get(&[b, k]) - g_ref[k]).abs());
            }
        }
    }
    verdict(
        worst <= 1e-12,
        format!("max |Δ| over 100 cases = {worst:.2e} (tol 1e-12)"),
    )
}

fn metric_column(csv: &str, epoch: usize) -> Option<f64> {
    csv.lines()
        .nth(epoch)
        .and_then(|l| l.split(',').nth(1))
        .and_then(|v| v.parse().ok())
}

fn tiny_overfit() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    #[rustfmt::skip]
    let train = ventseq(
        &[
            "train", "--synth", "32", "--seq-len", "80", "--epochs", "200", "--loss", "mae",
            "--batch-size", "32", "--lr", "1e-2", "--scale-rc", "--val-fraction", "0",
            "--seed", "7", "--checkpoint", "m.vseq", "--metrics-out", "metrics.csv",
        ],
        dir.path(),
    );
    if !train.status.success() {
        return verdict(
            false,
            format!("train failed: {}", String::from_utf8_lossy(&train.stderr)),
        );
    }
    let synth = ventseq(
        &[
            "synth",
            "--out",
            "train.csv",
            "--breaths",
            "32",
            "--seq-len",
            "80",
            "--seed",
            "7",
        ],
        dir.path(),
    );
    assert!(synth.status.success());
    let eval = ventseq(
        &["eval", "--checkpoint", "m.vseq", "--data", "train.csv"],
        dir.path(),
    );
    let elapsed = started.elapsed();
    let final_mae = stdout(&eval)
        .split_whitespace()
        .nth(1)
        .and_then(|v| v.parse::<f64>().ok())
        .unwrap_or(f64::INFINITY);
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let (e1, e10) = (
        metric_column(&csv, 1).unwrap(),
        metric_column(&csv, 10).unwrap(),
    );
    let passed = final_mae < 0.05 && e10 < e1 && elapsed < Duration::from_secs(300);
    verdict(
        passed,
        format!(
            "final train MAE {final_mae:.4} (< 0.05), epoch 1 {e1:.4} > epoch 10 {e10:.4}, {:.0}s (< 300s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn census() -> Verdict {
    let model = HybridModel::<f64>::build(&ModelConfig::desk()).unwrap();
    let mut counts = [0usize; 4];
    for node in model.nodes() {
        match node.layer {
            Layer::BiLstm(_) => counts[0] += 1,
            Layer::BiGru(_) => counts[1] += 1,
            Layer::Multiply => counts[2] += 1,
            Layer::BatchNorm(_) => counts[3] += 1,
            Layer::Dense(_) => {}
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let cli = stdout(&ventseq(&["params"], dir.path()));
    let line = "bilstm=7 bigru=5 multiply=4 batchnorm=5";
    let passed = counts == [7, 5, 4, 5] && cli.lines().any(|l| l == line);
    verdict(
        passed,
        format!(
            "graph walk {counts:?}, params prints `{line}`: {}",
            cli.contains(line)
        ),
    )
}

fn parameter_accounting() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut notes = Vec::new();
    let mut passed = true;
    for seed in 0..5u64 {
        let mut w = || rng.random_range(1..=12);
        let cfg = ModelConfig {
            input_features: 5,
            stem_units: w(),
            block_units: [w(), w(), w(), w()],
            tail_units: w(),
            dense_hidden: rng.random_range(0..=10),
            seed,
        };
        let model = HybridModel::<f64>::build(&cfg).unwrap();
        let enumerated: usize = model.tensors().iter().map(|t| t.len()).sum();
        let flat = model.flatten_params().len();
        let closed = count_params(&cfg);
        passed &= closed == enumerated && closed == flat;
        notes.push(closed.to_string());
    }
    let lstm = LstmParams::<f64>::zeros(8, 16);
    let lstm_enum: usize = lstm.tensors().iter().map(|t| t.len()).sum();
    passed &= lstm_enum == 1600 && lstm_param_count(8, 16) == 1600;
    verdict(
        passed,
        format!(
            "configs {} match; LSTM(8→16) = {lstm_enum}",
            notes.join(",")
        ),
    )
}

/// Linear-interpolation quantile, written independently of the library.
fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

fn record(id: u64, pressure: f64) -> VentRecord {
    VentRecord {
        id,
        breath_id: 1,
        r: 20.0,
        c: 10.0,
        time_step: id as f64 * 0.03,
        u_in: 1.0,
        u_out: 0.0,
        pressure: Some(pressure),
    }
}

fn scaler() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let recs: Vec<VentRecord> = (0..1001)
        .map(|i| record(i, rng.random_range(-3.0..60.0)))
        .collect();
    let s = fit_scaler(&recs, &[Column::Pressure]).unwrap();
    let scaled: Vec<f64> = apply_scaler(recs, &s)
        .unwrap()
        .iter()
        .map(|r| r.pressure.unwrap())
        .collect();
    let med = quantile(&scaled, 0.5).abs();
    let iqr = (quantile(&scaled, 0.75) - quantile(&scaled, 0.25) - 1.0).abs();

    let five: Vec<VentRecord> = (1..=5).map(|i| record(i, i as f64)).collect();
    let s5 = fit_scaler(&five, &[Column::Pressure]).unwrap();
    let mapped: Vec<f64> = apply_scaler(five, &s5)
        .unwrap()
        .iter()
        .map(|r| r.pressure.unwrap())
        .collect();
    let exact = mapped == [-1.0, -0.5, 0.0, 0.5, 1.0];
    verdict(
        med <= 1e-12 && iqr <= 1e-12 && exact,
        format!("|median| {med:.1e}, |IQR-1| {iqr:.1e}, [1..5] -> {mapped:?}"),
    )
}

fn determinism() -> Verdict {
    #[rustfmt::skip]
    let args = [
        "train", "--synth", "12", "--seq-len", "24", "--epochs", "3", "--batch-size", "4",
        "--seed", "3", "--checkpoint", "m.vseq", "--metrics-out", "metrics.csv",
    ];
    let run = |threads: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = Command::new(BIN)
            .args(args)
            .current_dir(dir.path())
            .env("RUST_LOG", "warn")
            .env("VENTSEQ_THREADS", threads)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
        (read("metrics.csv"), read("m.vseq"))
    };
    let a = run("1");
    let b = run("1");
    let c = run("3");
    let same = a == b;
    let across_threads = a == c;
    verdict(
        same && across_threads,
        format!("repeat identical {same}, 1 vs 3 threads identical {across_threads}"),
    )
}

fn checkpoint_round_trip() -> Verdict {
    let cfg = ModelConfig::desk();
    let mut model = HybridModel::<f64>::build(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn(&[3, 20, cfg.input_features], |_| {
        rng.random_range(-1.5..1.5)
    });
    // Train-mode passes move the batchnorm running statistics.
    for _ in 0..3 {
        model.forward(&x, Mode::Train).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.vseq");
    checkpoint::save(&model, &path).unwrap();
    let loaded = checkpoint::load::<f64>(&path).unwrap();
    let a = model.infer(&x).unwrap();
    let b = loaded.infer(&x).unwrap();
    let bits = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits());
    let resaved = checkpoint::to_bytes(&loaded).unwrap() == std::fs::read(&path).unwrap();
    verdict(
        bits && resaved,
        format!("forward bit-identical {bits}, re-save identical {resaved}"),
    )
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", gradient_correctness),
        ("cell oracle", cell_oracle),
        ("tiny overfit", tiny_overfit),
        ("layer census", census),
        ("parameter accounting", parameter_accounting),
        ("robust scaler", scaler),
        ("training determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failed = Vec::new();
    for (i, (title, check)) in criteria.into_iter().enumerate() {
        let v = check();
        report(i + 1, title, &v);
        if !v.passed {
            failed.push(title);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
