//! Losses, the Adam optimizer and the epoch loop.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{stack_features, stack_inspiratory_mask, stack_targets, BreathSequence};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::HybridModel;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum LossKind {
    #[default]
    Mae,
    Mse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mae" => Ok(LossKind::Mae),
            "mse" => Ok(LossKind::Mse),
            _ => Err(Error::Usage(format!(
                "unknown loss `{s}`, expected mae or mse"
            ))),
        }
    }
}

fn check_pair<T: Scalar>(
    pred: &Tensor<T>,
    actual: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<()> {
    if pred.shape() != actual.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            actual.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != pred.shape() {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match prediction {:?}",
                m.shape(),
                pred.shape()
            )));
        }
    }
    Ok(())
}

/// Sums of absolute and squared errors and the total weight, in f64.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorSums {
    pub abs: f64,
    pub sq: f64,
    pub weight: f64,
}

impl ErrorSums {
    pub fn of<T: Scalar>(
        pred: &Tensor<T>,
        actual: &Tensor<T>,
        mask: Option<&Tensor<T>>,
    ) -> Result<Self> {
        check_pair(pred, actual, mask)?;
        let mut s = ErrorSums::default();
        for (k, (&p, &a)) in pred.data().iter().zip(actual.data()).enumerate() {
            let w = mask.map_or(1.0, |m| m.data()[k].as_f64());
            let d = p.as_f64() - a.as_f64();
            s.abs += w * d.abs();
            s.sq += w * d * d;
            s.weight += w;
        }
        Ok(s)
    }

    pub fn merge(&mut self, other: ErrorSums) {
        self.abs += other.abs;
        self.sq += other.sq;
        self.weight += other.weight;
    }

    pub fn mae(&self) -> f64 {
        if self.weight > 0.0 {
            self.abs / self.weight
        } else {
            0.0
        }
    }

    pub fn mse(&self) -> f64 {
        if self.weight > 0.0 {
            self.sq / self.weight
        } else {
            0.0
        }
    }

    pub fn get(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::Mae => self.mae(),
            LossKind::Mse => self.mse(),
        }
    }
}

/// Mean absolute error over all elements.
pub fn mae<T: Scalar>(pred: &Tensor<T>, actual: &Tensor<T>) -> Result<f64> {
    Ok(ErrorSums::of(pred, actual, None)?.mae())
}

/// Mean squared error over all elements.
pub fn mse<T: Scalar>(pred: &Tensor<T>, actual: &Tensor<T>) -> Result<f64> {
    Ok(ErrorSums::of(pred, actual, None)?.mse())
}

/// Loss over the elements where `mask` is 1, or over all elements.
pub fn loss<T: Scalar>(
    kind: LossKind,
    pred: &Tensor<T>,
    actual: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<f64> {
    Ok(ErrorSums::of(pred, actual, mask)?.get(kind))
}

/// Gradient of [`loss`] w.r.t. `pred`. The absolute-value subgradient at
/// zero is taken as 0.
pub fn loss_backward<T: Scalar>(
    kind: LossKind,
    pred: &Tensor<T>,
    actual: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_pair(pred, actual, mask)?;
    let weight = mask.map_or(pred.len() as f64, |m| {
        m.data().iter().map(|v| v.as_f64()).sum()
    });
    if weight <= 0.0 {
        return Ok(Tensor::zeros_like(pred));
    }
    let inv_n = T::lit(1.0 / weight);
    let two = T::lit(2.0);
    let data = pred
        .data()
        .iter()
        .zip(actual.data())
        .enumerate()
        .map(|(k, (&p, &a))| {
            let d = p - a;
            let g = match kind {
                LossKind::Mse => two * d * inv_n,
                LossKind::Mae if d > T::zero() => inv_n,
                LossKind::Mae if d < T::zero() => -inv_n,
                LossKind::Mae => T::zero(),
            };
            mask.map_or(g, |m| g * m.data()[k])
        })
        .collect();
    Tensor::new(pred.shape(), data)
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Used in error messages.
    pub names: Vec<String>,
}

pub const ADAM_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

impl<T: Scalar> AdamState<T> {
    /// Zero moments shaped like `params`, default hyperparameters.
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let names = (0..params.len()).map(|k| format!("tensor {k}")).collect();
        Self::with_names(params, names)
    }

    pub fn with_names(params: &[&Tensor<T>], names: Vec<String>) -> Self {
        AdamState {
            lr: ADAM_LR,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            names,
        }
    }

    pub fn for_model(model: &HybridModel<T>) -> Self {
        Self::with_names(&model.tensors(), model.param_names())
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (k, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[k].shape() != p.shape() {
            return Err(Error::Dimension(format!(
                "adam: gradient {:?} does not mirror parameter {} {:?}",
                g.shape(),
                state.names[k],
                p.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Training(format!(
                "non-finite gradient for {}",
                state.names[k]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(state.beta1), T::lit(state.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::lit(1.0 - state.beta1.powi(t));
    let bc2 = T::lit(1.0 - state.beta2.powi(t));
    let lr = T::lit(state.lr);
    let eps = T::lit(state.epsilon);
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k].data();
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + c1 * g[j];
            v[j] = b2 * v[j] + c2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub epochs: usize,
    /// Breaths per batch.
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
    /// Stop after this many epochs without improvement of the monitored MAE.
    pub early_stop_patience: Option<usize>,
    pub lr: f64,
    /// Restrict loss and metrics to inspiratory steps (`u_out == 0`).
    pub mask_inspiratory: bool,
    /// IQR of the target, used to report metrics in cmH2O.
    pub target_iqr: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            epochs: 10,
            batch_size: 512,
            loss: LossKind::Mae,
            seed: 0,
            early_stop_patience: None,
            lr: ADAM_LR,
            mask_inspiratory: false,
            target_iqr: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Batch-weighted averages over the epoch's training steps, scaled units.
    pub train_mae: f64,
    pub train_mse: f64,
    /// Inference-mode metrics on the validation set, scaled units.
    pub val_mae: Option<f64>,
    pub val_mse: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters the model holds after [`fit`].
    pub best_epoch: Option<usize>,
    pub target_iqr: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.history.last()
    }

    /// MAE in target units (cmH2O when the target was robust-scaled).
    pub fn unscaled_mae(&self, scaled: f64) -> f64 {
        scaled * self.target_iqr
    }

    pub fn unscaled_mse(&self, scaled: f64) -> f64 {
        scaled * self.target_iqr * self.target_iqr
    }

    /// Writes `epoch,train_mae,train_mse,val_mae,val_mse,seconds`. Empty
    /// cells stand for a missing validation set, and for wall-clock time
    /// unless `with_seconds` is set, keeping the file reproducible.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W, with_seconds: bool) -> std::io::Result<()> {
        writeln!(w, "epoch,train_mae,train_mse,val_mae,val_mse,seconds")?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.history {
            let secs = if with_seconds {
                format!("{:.3}", e.seconds)
            } else {
                String::new()
            };
            writeln!(
                w,
                "{},{},{},{},{},{}",
                e.epoch,
                e.train_mae,
                e.train_mse,
                opt(e.val_mae),
                opt(e.val_mse),
                secs
            )?;
        }
        Ok(())
    }

    pub fn save_metrics_csv(&self, path: impl AsRef<Path>, with_seconds: bool) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_metrics_csv(&mut w, with_seconds)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

struct Batch<T> {
    x: Tensor<T>,
    y: Tensor<T>,
    mask: Option<Tensor<T>>,
}

fn make_batch<T: Scalar>(seqs: &[&BreathSequence<T>], masked: bool) -> Result<Batch<T>> {
    Ok(Batch {
        x: stack_features(seqs)?,
        y: stack_targets(seqs)?,
        mask: if masked {
            Some(stack_inspiratory_mask(seqs)?)
        } else {
            None
        },
    })
}

/// Inference-mode error sums over `seqs`, in fixed batch order.
pub fn evaluate<T: Scalar>(
    model: &HybridModel<T>,
    seqs: &[BreathSequence<T>],
    batch_size: usize,
    mask_inspiratory: bool,
) -> Result<ErrorSums> {
    let refs: Vec<&BreathSequence<T>> = seqs.iter().collect();
    let mut sums = ErrorSums::default();
    for chunk in refs.chunks(batch_size.max(1)) {
        let b = make_batch(chunk, mask_inspiratory)?;
        let pred = model.infer(&b.x)?;
        sums.merge(ErrorSums::of(&pred, &b.y, b.mask.as_ref())?);
    }
    Ok(sums)
}

/// Mini-batch training with Adam. Each epoch shuffles whole breaths with a
/// generator seeded by `opts.seed`. When a validation set is given, the
/// model ends holding the parameters of the epoch with the lowest
/// validation MAE; otherwise it keeps the last epoch's parameters.
pub fn fit<T: Scalar>(
    model: &mut HybridModel<T>,
    train: &[BreathSequence<T>],
    val: &[BreathSequence<T>],
    opts: &FitOptions,
) -> Result<TrainReport> {
    if opts.batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    if !(opts.lr >= 0.0 && opts.lr.is_finite()) {
        return Err(Error::Usage(format!(
            "learning rate must be finite and non-negative, got {}",
            opts.lr
        )));
    }
    let mut report = TrainReport {
        history: Vec::new(),
        best_epoch: None,
        target_iqr: opts.target_iqr,
        stopped_early: false,
    };
    if opts.epochs == 0 {
        return Ok(report);
    }
    if train.is_empty() {
        return Err(Error::Usage("training set is empty".into()));
    }

    let mut adam = AdamState::for_model(model);
    adam.lr = opts.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Vec<T>, Vec<T>)> = None;
    let mut since_best = 0;

    for epoch in 1..=opts.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = ErrorSums::default();
        for (b, idx) in order.chunks(opts.batch_size).enumerate() {
            let seqs: Vec<&BreathSequence<T>> = idx.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&seqs, opts.mask_inspiratory)?;
            let pred = model.forward(&batch.x, Mode::Train)?;
            let batch_sums = ErrorSums::of(&pred, &batch.y, batch.mask.as_ref())?;
            let value = batch_sums.get(opts.loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite {} loss at epoch {epoch}, batch {b}",
                    opts.loss
                )));
            }
            sums.merge(batch_sums);
            let grad = loss_backward(opts.loss, &pred, &batch.y, batch.mask.as_ref())?;
            let grads = model.backward(&grad)?;
            adam_step(&mut model.tensors_mut(), &grads.params, &mut adam).map_err(|e| match e {
                Error::Training(msg) => {
                    Error::Training(format!("{msg} at epoch {epoch}, batch {b}"))
                }
                other => other,
            })?;
        }
        let val_sums = if val.is_empty() {
            None
        } else {
            Some(evaluate(
                model,
                val,
                opts.batch_size,
                opts.mask_inspiratory,
            )?)
        };
        let metrics = EpochMetrics {
            epoch,
            train_mae: sums.mae(),
            train_mse: sums.mse(),
            val_mae: val_sums.map(|s| s.mae()),
            val_mse: val_sums.map(|s| s.mse()),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train mae {:.6} mse {:.6}{}",
            metrics.train_mae,
            metrics.train_mse,
            metrics
                .val_mae
                .map(|v| format!(", val mae {v:.6} mse {:.6}", metrics.val_mse.unwrap()))
                .unwrap_or_default()
        );
        let monitored = metrics.val_mae.unwrap_or(metrics.train_mae);
        report.history.push(metrics);

        if best.as_ref().is_none_or(|(score, ..)| monitored < *score) {
            let snapshot = if val.is_empty() {
                (Vec::new(), Vec::new())
            } else {
                (model.flatten_params(), model.running_stats())
            };
            best = Some((monitored, epoch, snapshot.0, snapshot.1));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if opts.early_stop_patience.is_some_and(|p| since_best >= p) {
            report.stopped_early = epoch < opts.epochs;
            break;
        }
    }

    match best {
        Some((_, epoch, params, stats)) if !val.is_empty() => {
            model.set_flat_params(&params)?;
            model.set_running_stats(&stats)?;
            report.best_epoch = Some(epoch);
        }
        _ => report.best_epoch = report.history.last().map(|e| e.epoch),
    }
    Ok(report)
}
