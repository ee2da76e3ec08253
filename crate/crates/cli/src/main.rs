use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use ventseq::checkpoint;
use ventseq::data::{
    self, group_breaths, split_by_breath, stack_features, summarize, synth_records, BreathSequence,
    Column, Preprocessor, SynthConfig, VentRecord, DEFAULT_SCALED_COLUMNS,
};
use ventseq::gradcheck::{run_suite, SuiteOptions};
use ventseq::model::{
    count_params, HybridModel, ModelConfig, PAPER_SCALE_DENSE, PAPER_SCALE_UNITS,
};
use ventseq::train::{evaluate, fit, FitOptions, LossKind, ADAM_LR};
use ventseq::Error;

#[derive(Parser)]
#[command(
    name = "ventseq",
    version,
    about = "Hybrid Bi-LSTM/Bi-GRU ventilator pressure forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ventilator CSV
    Synth(SynthArgs),
    /// Fit a model and write a checkpoint and per-epoch metrics
    Train(TrainArgs),
    /// Report MAE and MSE of a checkpoint on labeled data
    Eval(EvalArgs),
    /// Predict pressures for unlabeled data
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences
    Gradcheck(GradcheckArgs),
    /// Print the parameter count and per-layer breakdown
    Params(ModelArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Recurrent widths: one value for every layer, or six (stem, four blocks, tail)
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    units: Option<Vec<usize>>,
    /// Width of the SELU layer before the output; 0 drops it
    #[arg(long)]
    dense_hidden: Option<usize>,
    /// Use the ~54.7M-parameter configuration (needs explicit opt-in)
    #[arg(long, conflicts_with_all = ["units", "dense_hidden"])]
    paper_scale: bool,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> anyhow::Result<ModelConfig> {
        if self.paper_scale {
            return Ok(ModelConfig::uniform(
                PAPER_SCALE_UNITS,
                PAPER_SCALE_DENSE,
                seed,
            ));
        }
        let desk = ModelConfig::desk();
        let dense_hidden = self.dense_hidden.unwrap_or(desk.dense_hidden);
        let cfg = match self.units.as_deref() {
            None => ModelConfig {
                dense_hidden,
                seed,
                ..desk
            },
            Some(&[u]) => ModelConfig::uniform(u, dense_hidden, seed),
            Some(&[stem, b1, b2, b3, b4, tail]) => ModelConfig {
                stem_units: stem,
                block_units: [b1, b2, b3, b4],
                tail_units: tail,
                dense_hidden,
                seed,
                ..desk
            },
            Some(other) => {
                return Err(Error::Usage(format!(
                    "--units takes 1 or 6 values, got {}",
                    other.len()
                ))
                .into())
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    breaths: usize,
    #[arg(long = "seq-len", default_value_t = 80)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Omit the pressure column, like a test split
    #[arg(long)]
    unlabeled: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled training CSV
    #[arg(long, required_unless_present = "synth", conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Train on N generated breaths instead of a file
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
    /// Steps per generated breath
    #[arg(long = "seq-len", default_value_t = 80)]
    seq_len: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Breaths per batch
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value = "mae", value_parser = ["mae", "mse"])]
    loss: String,
    #[arg(long, default_value_t = ADAM_LR)]
    lr: f64,
    /// Seeds weights, generated data and shuffling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stop after this many epochs without validation improvement
    #[arg(long)]
    patience: Option<usize>,
    /// Fraction of breaths, highest ids first, held out for validation
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    /// Also robust-scale R and C
    #[arg(long)]
    scale_rc: bool,
    /// Compute loss and metrics on inspiratory steps only (u_out = 0)
    #[arg(long)]
    mask_inspiratory: bool,
    #[arg(long, default_value = "model.vseq")]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Fill the seconds column of the metrics file (makes it non-reproducible)
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV
    #[arg(long)]
    data: PathBuf,
    /// Write breath_id,time_step,actual,predicted
    #[arg(long)]
    pred_out: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long)]
    mask_inspiratory: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Unlabeled CSV
    #[arg(long = "test-data", alias = "data")]
    test_data: PathBuf,
    /// Write id,pressure in input row order
    #[arg(long)]
    pred_out: PathBuf,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one analytic gradient; the run must then fail
    #[arg(long)]
    inject_fault: bool,
    /// Sampled entries per parameter tensor in the full-network check
    #[arg(long, default_value_t = 2)]
    probes_per_tensor: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Usage(_))))
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("VENTSEQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Usage(format!(
            "VENTSEQ_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the thread pool")?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Params(a) => cmd_params(a),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<ExitCode> {
    if a.breaths == 0 || a.seq_len < 2 {
        return Err(Error::Usage("synth needs --breaths ≥ 1 and --seq-len ≥ 2".into()).into());
    }
    let mut recs = synth_records(a.breaths, a.seq_len, a.seed, &SynthConfig::default());
    if a.unlabeled {
        recs.iter_mut().for_each(|r| r.pressure = None);
    }
    data::save_csv(&recs, &a.out)?;
    println!(
        "wrote {} rows ({} breaths × {}) to {}",
        recs.len(),
        a.breaths,
        a.seq_len,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn load_labeled(path: &Path) -> anyhow::Result<Vec<VentRecord>> {
    let recs = data::load_csv(path).with_context(|| format!("reading {}", path.display()))?;
    if !data::has_pressure(&recs) {
        return Err(Error::Schema(format!("{} has no pressure column", path.display())).into());
    }
    for w in data::reference_warnings(&summarize(&recs)) {
        warn!("{w}");
    }
    Ok(recs)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(Error::Usage(format!(
            "--val-fraction must be in [0, 1), got {}",
            a.val_fraction
        ))
        .into());
    }
    let config = a.model.config(a.seed)?;
    let records = match (&a.data, a.synth) {
        (Some(path), _) => load_labeled(path)?,
        (None, Some(n)) => {
            if n == 0 || a.seq_len < 2 {
                return Err(Error::Usage("--synth needs N ≥ 1 and --seq-len ≥ 2".into()).into());
            }
            synth_records(n, a.seq_len, a.seed, &SynthConfig::default())
        }
        (None, None) => return Err(Error::Usage("train needs --data or --synth".into()).into()),
    };
    let (train_recs, val_recs) = split_by_breath(records, a.val_fraction);
    let mut columns = DEFAULT_SCALED_COLUMNS.to_vec();
    if a.scale_rc {
        columns.extend([Column::R, Column::C]);
    }
    let pre = Preprocessor::fit(&train_recs, &columns)?;
    let train = group_breaths::<f64>(&pre.apply(train_recs)?)?;
    let val = group_breaths::<f64>(&pre.apply(val_recs)?)?;
    info!(
        "{} training and {} validation breaths of {} steps",
        train.len(),
        val.len(),
        train[0].steps()
    );

    let mut model = HybridModel::<f64>::build(&config)?;
    model.imputer = Some(pre.imputer.clone());
    model.scaler = Some(pre.scaler.clone());
    let iqr = pre.scaler.target().map_or(1.0, |c| c.iqr);
    info!(
        "model with {} parameters, {}",
        model.num_scalars(),
        model.census()
    );
    let opts = FitOptions {
        epochs: a.epochs,
        batch_size: a.batch_size,
        loss: a.loss.parse::<LossKind>()?,
        seed: a.seed,
        early_stop_patience: a.patience,
        lr: a.lr,
        mask_inspiratory: a.mask_inspiratory,
        target_iqr: iqr,
    };
    let report = fit(&mut model, &train, &val, &opts)?;

    checkpoint::save(&model, &a.checkpoint)?;
    if let Some(path) = &a.metrics_out {
        report.save_metrics_csv(path, a.timing)?;
    }
    if let Some(last) = report.last() {
        println!(
            "final train MAE {:.6} MSE {:.6} (scaled); {:.6} cmH2O, {:.6} cmH2O^2",
            last.train_mae,
            last.train_mse,
            report.unscaled_mae(last.train_mae),
            report.unscaled_mse(last.train_mse)
        );
        if let (Some(m), Some(s)) = (last.val_mae, last.val_mse) {
            println!(
                "final val MAE {m:.6} MSE {s:.6} (scaled); {:.6} cmH2O, {:.6} cmH2O^2",
                report.unscaled_mae(m),
                report.unscaled_mse(s)
            );
        }
        if let Some(best) = report.best_epoch {
            println!("checkpoint holds epoch {best}");
        }
    }
    println!("saved {}", a.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> anyhow::Result<(HybridModel<f64>, Preprocessor)> {
    let model =
        checkpoint::load::<f64>(path).with_context(|| format!("loading {}", path.display()))?;
    let (Some(imputer), Some(scaler)) = (model.imputer.clone(), model.scaler.clone()) else {
        return Err(Error::Format(format!(
            "{} carries no preprocessing parameters",
            path.display()
        ))
        .into());
    };
    Ok((model, Preprocessor { imputer, scaler }))
}

fn predict_all(
    model: &HybridModel<f64>,
    seqs: &[BreathSequence<f64>],
    batch_size: usize,
) -> anyhow::Result<Vec<Vec<f64>>> {
    let refs: Vec<&BreathSequence<f64>> = seqs.iter().collect();
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in refs.chunks(batch_size.max(1)) {
        let pred = model.infer(&stack_features(chunk)?)?;
        let steps = chunk[0].steps();
        out.extend(pred.data().chunks(steps).map(|c| c.to_vec()));
    }
    Ok(out)
}

fn invert(pre: &Preprocessor, col: Column, v: f64) -> f64 {
    pre.scaler.get(col).map_or(v, |c| c.invert(v))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let (model, pre) = load_model(&a.checkpoint)?;
    let raw = load_labeled(&a.data)?;
    let seqs = group_breaths::<f64>(&pre.apply(raw.clone())?)?;
    let sums = evaluate(&model, &seqs, a.batch_size, a.mask_inspiratory)?;
    let iqr = pre.scaler.target().map_or(1.0, |c| c.iqr);
    println!(
        "MAE {:.6} MSE {:.6} (scaled); {:.6} cmH2O, {:.6} cmH2O^2",
        sums.mae(),
        sums.mse(),
        sums.mae() * iqr,
        sums.mse() * iqr * iqr
    );
    if let Some(path) = &a.pred_out {
        let preds = predict_all(&model, &seqs, a.batch_size)?;
        let mut by_id: HashMap<u64, &VentRecord> = raw.iter().map(|r| (r.id, r)).collect();
        let mut text = String::from("breath_id,time_step,actual,predicted\n");
        for (s, p) in seqs.iter().zip(&preds) {
            for (id, &v) in s.ids.iter().zip(p) {
                let r = by_id.remove(id).expect("grouped ids come from the input");
                let actual = r.pressure.unwrap_or(f64::NAN);
                let predicted = invert(&pre, Column::Pressure, v);
                writeln!(text, "{},{},{actual},{predicted}", s.breath_id, r.time_step)?;
            }
        }
        write_file(path, &text)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<ExitCode> {
    let (model, pre) = load_model(&a.checkpoint)?;
    let mut recs = data::load_csv(&a.test_data)
        .with_context(|| format!("reading {}", a.test_data.display()))?;
    if data::has_pressure(&recs) {
        warn!(
            "{} has a pressure column; predicting from features only",
            a.test_data.display()
        );
        recs.iter_mut().for_each(|r| r.pressure = None);
    }
    let order: Vec<u64> = recs.iter().map(|r| r.id).collect();
    let seqs = group_breaths::<f64>(&pre.apply(recs)?)?;
    let preds = predict_all(&model, &seqs, a.batch_size)?;
    let mut by_id: HashMap<u64, f64> = HashMap::with_capacity(order.len());
    for (s, p) in seqs.iter().zip(&preds) {
        for (&id, &v) in s.ids.iter().zip(p) {
            by_id.insert(id, invert(&pre, Column::Pressure, v));
        }
    }
    let mut text = String::from("id,pressure\n");
    for id in &order {
        writeln!(text, "{id},{}", by_id[id])?;
    }
    write_file(&a.pred_out, &text)?;
    println!(
        "wrote {} predictions to {}",
        order.len(),
        a.pred_out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut f =
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let opts = SuiteOptions {
        seed: a.seed,
        inject_fault: a.inject_fault,
        graph_probes_per_tensor: a.probes_per_tensor,
        ..SuiteOptions::default()
    };
    let started = std::time::Instant::now();
    let results = run_suite(&opts)?;
    println!(
        "{:<20} {:>12} {:>10} {:>7}  status",
        "component", "max_rel_err", "tolerance", "probes"
    );
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<20} {:>12.3e} {:>10.0e} {:>7}  {status}",
            r.name, r.max_rel_error, r.tolerance, r.probes
        );
        if !r.passed() {
            failed.push(format!("{} ({})", r.name, r.worst_tensor));
        }
    }
    info!("gradcheck took {:.1}s", started.elapsed().as_secs_f64());
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

fn cmd_params(a: ModelArgs) -> anyhow::Result<ExitCode> {
    let config = a.config(0)?;
    // f32 halves the memory of the paper-scale build; counts are identical.
    let model = HybridModel::<f32>::build(&config)?;
    println!(
        "{:<20} {:<10} {:>7} {:>12}",
        "layer", "kind", "width", "params"
    );
    for l in model.layer_summary() {
        println!(
            "{:<20} {:<10} {:>7} {:>12}",
            l.name,
            l.kind.name(),
            l.output_width,
            l.params
        );
    }
    let total = count_params(&config);
    let flat = model.num_scalars();
    println!("total {total}");
    println!("{}", model.census());
    if total != flat {
        bail!("closed-form count {total} differs from the built model's {flat} parameters");
    }
    Ok(ExitCode::SUCCESS)
}
