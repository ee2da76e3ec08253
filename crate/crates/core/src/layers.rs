//! Sequence-level layers over `[batch, time, feature]` tensors.
//!
//! Every layer exposes a forward pass that returns its output together
//! with whatever the backward pass needs, and a backward pass that
//! consumes that cache. Bidirectional layers concatenate the forward and
//! backward directions per timestep as `[fwd ‖ bwd]`, so their output is
//! twice the hidden width.

use std::fmt::Debug;

use rand::Rng;

use crate::activations::Activation;
use crate::cells::{
    gru_step_backward_into, gru_step_cached, lstm_step_backward_into, lstm_step_cached, CellState,
    GruCache, GruParams, LstmCache, LstmParams,
};
use crate::error::{Error, Result};
use crate::params::{uniform, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// A recurrence that can be unrolled over a sequence.
pub trait RecurrentCell<T: Scalar>: Clone + Debug + PartialEq + Send + Sync + 'static {
    type Params: Parameters<T> + Clone + Debug + PartialEq + Send + Sync;
    type Cache: Send + Sync;

    fn zeros(input: usize, hidden: usize) -> Self::Params;
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self::Params;
    fn hidden(p: &Self::Params) -> usize;
    fn input(p: &Self::Params) -> usize;
    fn initial_state(batch: usize, hidden: usize) -> CellState<T>;
    fn step(
        p: &Self::Params,
        x: &Tensor<T>,
        state: &CellState<T>,
    ) -> Result<(CellState<T>, Self::Cache)>;

    /// Returns `(grad_x, grad_state_prev)`, adding parameter gradients into `grads`.
    fn step_backward(
        p: &Self::Params,
        cache: &Self::Cache,
        grad_state: &CellState<T>,
        grads: &mut Self::Params,
    ) -> Result<(Tensor<T>, CellState<T>)>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Lstm;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Gru;

impl<T: Scalar> RecurrentCell<T> for Lstm {
    type Params = LstmParams<T>;
    type Cache = LstmCache<T>;

    fn zeros(input: usize, hidden: usize) -> Self::Params {
        LstmParams::zeros(input, hidden)
    }

    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self::Params {
        LstmParams::init(input, hidden, rng)
    }

    fn hidden(p: &Self::Params) -> usize {
        p.hidden()
    }

    fn input(p: &Self::Params) -> usize {
        p.input()
    }

    fn initial_state(batch: usize, hidden: usize) -> CellState<T> {
        CellState::zeros_lstm(batch, hidden)
    }

    fn step(
        p: &Self::Params,
        x: &Tensor<T>,
        state: &CellState<T>,
    ) -> Result<(CellState<T>, Self::Cache)> {
        lstm_step_cached(x, state, p)
    }

    fn step_backward(
        p: &Self::Params,
        cache: &Self::Cache,
        grad_state: &CellState<T>,
        grads: &mut Self::Params,
    ) -> Result<(Tensor<T>, CellState<T>)> {
        let (dx, dh, dc) =
            lstm_step_backward_into(p, cache, &grad_state.h, grad_state.c.as_ref(), grads)?;
        Ok((dx, CellState { h: dh, c: Some(dc) }))
    }
}

impl<T: Scalar> RecurrentCell<T> for Gru {
    type Params = GruParams<T>;
    type Cache = GruCache<T>;

    fn zeros(input: usize, hidden: usize) -> Self::Params {
        GruParams::zeros(input, hidden)
    }

    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self::Params {
        GruParams::init(input, hidden, rng)
    }

    fn hidden(p: &Self::Params) -> usize {
        p.hidden()
    }

    fn input(p: &Self::Params) -> usize {
        p.input()
    }

    fn initial_state(batch: usize, hidden: usize) -> CellState<T> {
        CellState::zeros_gru(batch, hidden)
    }

    fn step(
        p: &Self::Params,
        x: &Tensor<T>,
        state: &CellState<T>,
    ) -> Result<(CellState<T>, Self::Cache)> {
        gru_step_cached(x, state, p)
    }

    fn step_backward(
        p: &Self::Params,
        cache: &Self::Cache,
        grad_state: &CellState<T>,
        grads: &mut Self::Params,
    ) -> Result<(Tensor<T>, CellState<T>)> {
        let (dx, dh) = gru_step_backward_into(p, cache, &grad_state.h, grads)?;
        Ok((dx, CellState { h: dh, c: None }))
    }
}

fn check_sequence<T: Scalar>(seq: &Tensor<T>, input: usize, what: &str) -> Result<(usize, usize)> {
    if seq.rank() != 3 || seq.shape()[2] != input {
        return Err(Error::Dimension(format!(
            "{what}: expected [batch, time, {input}], got {:?}",
            seq.shape()
        )));
    }
    Ok((seq.shape()[0], seq.shape()[1]))
}

/// Unrolls `C` from a zero state over `t = 0..T`. Returns `[batch, T, hidden]`.
pub fn run_sequence<T: Scalar, C: RecurrentCell<T>>(
    p: &C::Params,
    seq: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<C::Cache>)> {
    let (batch, steps) = check_sequence(seq, C::input(p), "recurrent layer")?;
    let hidden = C::hidden(p);
    let mut out = Tensor::zeros(&[batch, steps, hidden]);
    let mut caches = Vec::with_capacity(steps);
    let mut state = C::initial_state(batch, hidden);
    for t in 0..steps {
        let (next, cache) = C::step(p, &seq.time_slice(t), &state)?;
        out.write_time_slice(t, 0, &next.h);
        caches.push(cache);
        state = next;
    }
    Ok((out, caches))
}

/// BPTT for [`run_sequence`]. Returns `(grad_seq, grad_params)`.
pub fn run_sequence_backward<T: Scalar, C: RecurrentCell<T>>(
    p: &C::Params,
    caches: &[C::Cache],
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, C::Params)> {
    let hidden = C::hidden(p);
    let input = C::input(p);
    let (batch, steps) = check_sequence(grad_out, hidden, "recurrent backward")?;
    if steps != caches.len() {
        return Err(Error::Usage(format!(
            "recurrent backward: gradient spans {steps} steps but cache holds {}",
            caches.len()
        )));
    }
    let mut grads = C::zeros(input, hidden);
    let mut grad_seq = Tensor::zeros(&[batch, steps, input]);
    let mut carry = C::initial_state(batch, hidden);
    for t in (0..steps).rev() {
        carry.h.add_assign(&grad_out.time_slice(t))?;
        let (dx, prev) = C::step_backward(p, &caches[t], &carry, &mut grads)?;
        grad_seq.write_time_slice(t, 0, &dx);
        carry = prev;
    }
    Ok((grad_seq, grads))
}

pub struct BidirectionalCache<T: Scalar, C: RecurrentCell<T>> {
    fwd: Vec<C::Cache>,
    bwd: Vec<C::Cache>,
}

/// Runs `fwd` over `t = 1..T` and `bwd` over `t = T..1`, both from zero
/// state, and concatenates per timestep into `[batch, T, 2·hidden]`.
pub fn bidirectional_forward<T: Scalar, C: RecurrentCell<T>>(
    seq: &Tensor<T>,
    fwd: &C::Params,
    bwd: &C::Params,
) -> Result<(Tensor<T>, BidirectionalCache<T, C>)> {
    let hidden = C::hidden(fwd);
    if C::hidden(bwd) != hidden || C::input(bwd) != C::input(fwd) {
        return Err(Error::Dimension(
            "bidirectional layer: forward and backward cells differ in shape".into(),
        ));
    }
    let reversed = seq.reverse_time();
    let (f, b) = rayon::join(
        || run_sequence::<T, C>(fwd, seq),
        || run_sequence::<T, C>(bwd, &reversed),
    );
    let (f_out, f_cache) = f?;
    let (b_out, b_cache) = b?;
    let b_out = b_out.reverse_time();
    let (batch, steps) = (seq.shape()[0], seq.shape()[1]);
    let mut out = Tensor::zeros(&[batch, steps, 2 * hidden]);
    for t in 0..steps {
        out.write_time_slice(t, 0, &f_out.time_slice(t));
        out.write_time_slice(t, hidden, &b_out.time_slice(t));
    }
    Ok((
        out,
        BidirectionalCache {
            fwd: f_cache,
            bwd: b_cache,
        },
    ))
}

/// Returns `(grad_seq, grad_fwd_params, grad_bwd_params)`.
pub fn bidirectional_backward<T: Scalar, C: RecurrentCell<T>>(
    fwd: &C::Params,
    bwd: &C::Params,
    cache: &BidirectionalCache<T, C>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, C::Params, C::Params)> {
    let hidden = C::hidden(fwd);
    let (batch, steps) = check_sequence(grad_out, 2 * hidden, "bidirectional backward")?;
    let mut g_fwd = Tensor::zeros(&[batch, steps, hidden]);
    let mut g_bwd = Tensor::zeros(&[batch, steps, hidden]);
    for t in 0..steps {
        g_fwd.write_time_slice(t, 0, &grad_out.read_time_slice(t, 0, hidden));
        g_bwd.write_time_slice(t, 0, &grad_out.read_time_slice(t, hidden, hidden));
    }
    let g_bwd = g_bwd.reverse_time();
    let (f, b) = rayon::join(
        || run_sequence_backward::<T, C>(fwd, &cache.fwd, &g_fwd),
        || run_sequence_backward::<T, C>(bwd, &cache.bwd, &g_bwd),
    );
    let (mut grad_seq, grad_fwd) = f?;
    let (grad_rev, grad_bwd) = b?;
    grad_seq.add_assign(&grad_rev.reverse_time())?;
    Ok((grad_seq, grad_fwd, grad_bwd))
}

/// Bidirectional wrapper owning both directions' parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Bidirectional<T: Scalar, C: RecurrentCell<T>> {
    pub fwd: C::Params,
    pub bwd: C::Params,
}

impl<T: Scalar, C: RecurrentCell<T>> Bidirectional<T, C> {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let fwd = C::init(input, hidden, rng);
        let bwd = C::init(input, hidden, rng);
        Bidirectional { fwd, bwd }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Bidirectional {
            fwd: C::zeros(input, hidden),
            bwd: C::zeros(input, hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        C::hidden(&self.fwd)
    }

    pub fn input(&self) -> usize {
        C::input(&self.fwd)
    }

    pub fn output_width(&self) -> usize {
        2 * self.hidden()
    }

    pub fn forward(&self, seq: &Tensor<T>) -> Result<(Tensor<T>, BidirectionalCache<T, C>)> {
        bidirectional_forward::<T, C>(seq, &self.fwd, &self.bwd)
    }

    pub fn backward(
        &self,
        cache: &BidirectionalCache<T, C>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Self)> {
        let (g, f, b) = bidirectional_backward::<T, C>(&self.fwd, &self.bwd, cache, grad_out)?;
        Ok((g, Bidirectional { fwd: f, bwd: b }))
    }

    pub fn param_names(&self) -> Vec<String> {
        let names = self.fwd.names();
        names
            .iter()
            .map(|n| format!("fwd.{n}"))
            .chain(names.iter().map(|n| format!("bwd.{n}")))
            .collect()
    }
}

impl<T: Scalar, C: RecurrentCell<T>> Parameters<T> for Bidirectional<T, C> {
    /// Names of one direction; see [`Bidirectional::param_names`] for both.
    fn names(&self) -> &'static [&'static str] {
        self.fwd.names()
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = self.fwd.tensors();
        v.extend(self.bwd.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.fwd.tensors_mut();
        v.extend(self.bwd.tensors_mut());
        v
    }
}

/// Elementwise fusion of two equally shaped branches.
pub fn multiply_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.mul(b)
}

/// Returns `(grad_a, grad_b) = (grad_out ⊙ b, grad_out ⊙ a)`.
pub fn multiply_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    Ok((grad_out.mul(b)?, grad_out.mul(a)?))
}

/// Per-feature normalization over the flattened batch and time axes.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    /// Weight kept by the running statistics on each update.
    pub momentum: T,
    pub epsilon: T,
}

pub const BATCHNORM_MOMENTUM: f64 = 0.9;
pub const BATCHNORM_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    mode: Mode,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[features]),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::ones(&[features]),
            momentum: T::lit(BATCHNORM_MOMENTUM),
            epsilon: T::lit(BATCHNORM_EPSILON),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn rows(&self, x: &Tensor<T>) -> Result<usize> {
        let f = self.features();
        if x.rank() < 2 || *x.shape().last().unwrap() != f {
            return Err(Error::Dimension(format!(
                "batchnorm over {f} features got input {:?}",
                x.shape()
            )));
        }
        Ok(x.len() / f)
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// statistics; infer mode uses the running statistics and leaves `self`
    /// untouched.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let f = self.features();
        let rows = self.rows(x)?;
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::Usage(
                        "batchnorm in train mode needs batch×time ≥ 2 to estimate variance".into(),
                    ));
                }
                let (mean, var) = batch_moments(x.data(), rows, f);
                let keep = self.momentum;
                let take = T::one() - keep;
                for k in 0..f {
                    let rm = &mut self.running_mean.data_mut()[k];
                    *rm = keep * *rm + take * mean[k];
                    let rv = &mut self.running_var.data_mut()[k];
                    *rv = keep * *rv + take * var[k];
                }
                (mean, var)
            }
            Mode::Infer => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let (out, cache) = self.normalize(x, rows, &mean, &var, mode)?;
        Ok((out, cache))
    }

    /// Inference with running statistics, without touching any state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let rows = self.rows(x)?;
        let (out, _) = self.normalize(
            x,
            rows,
            self.running_mean.data(),
            self.running_var.data(),
            Mode::Infer,
        )?;
        Ok(out)
    }

    fn normalize(
        &self,
        x: &Tensor<T>,
        rows: usize,
        mean: &[T],
        var: &[T],
        mode: Mode,
    ) -> Result<(Tensor<T>, BatchNormCache<T>)> {
        let f = self.features();
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + self.epsilon).sqrt())
            .collect();
        let mut x_hat = Vec::with_capacity(x.len());
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            for k in 0..f {
                let xh = (x.data()[r * f + k] - mean[k]) * inv_std[k];
                x_hat.push(xh);
                out.push(self.gamma.data()[k] * xh + self.beta.data()[k]);
            }
        }
        let cache = BatchNormCache {
            mode,
            x_hat,
            inv_std,
            shape: x.shape().to_vec(),
        };
        Ok((Tensor::new(x.shape(), out)?, cache))
    }

    /// Returns `(grad_x, grad_gamma, grad_beta)`, including the dependence of
    /// the batch statistics on `x`.
    pub fn backward(
        &self,
        cache: &BatchNormCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        if cache.mode != Mode::Train {
            return Err(Error::Usage(
                "batchnorm backward needs a train-mode forward cache".into(),
            ));
        }
        if grad_out.shape() != cache.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "batchnorm backward: gradient {:?} does not match input {:?}",
                grad_out.shape(),
                cache.shape
            )));
        }
        let f = self.features();
        let rows = grad_out.len() / f;
        let g = grad_out.data();
        let mut d_gamma = vec![T::zero(); f];
        let mut d_beta = vec![T::zero(); f];
        for r in 0..rows {
            for k in 0..f {
                d_beta[k] += g[r * f + k];
                d_gamma[k] += g[r * f + k] * cache.x_hat[r * f + k];
            }
        }
        // dx = γ/(N·σ) · (N·dy − Σdy − x̂·Σ(dy⊙x̂))
        let n = T::lit(rows as f64);
        let mut dx = Vec::with_capacity(g.len());
        for r in 0..rows {
            for k in 0..f {
                let scale = self.gamma.data()[k] * cache.inv_std[k] / n;
                let v = n * g[r * f + k] - d_beta[k] - cache.x_hat[r * f + k] * d_gamma[k];
                dx.push(scale * v);
            }
        }
        Ok((
            Tensor::new(grad_out.shape(), dx)?,
            Tensor::new(&[f], d_gamma)?,
            Tensor::new(&[f], d_beta)?,
        ))
    }
}

/// Per-feature mean and biased variance of a `[rows, f]` block.
fn batch_moments<T: Scalar>(data: &[T], rows: usize, f: usize) -> (Vec<T>, Vec<T>) {
    let n = T::lit(rows as f64);
    let mut mean = vec![T::zero(); f];
    for r in 0..rows {
        for k in 0..f {
            mean[k] += data[r * f + k];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![T::zero(); f];
    for r in 0..rows {
        for k in 0..f {
            let d = data[r * f + k] - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

impl<T: Scalar> Parameters<T> for BatchNorm<T> {
    fn names(&self) -> &'static [&'static str] {
        &["gamma", "beta"]
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

/// Time-distributed affine map with an optional activation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `[out, in]`
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub act: Activation,
}

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    x: Tensor<T>,
    pre: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    /// Weights from `uniform(-1/√in, 1/√in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        act: Activation,
        rng: &mut R,
    ) -> Self {
        let k = 1.0 / (input as f64).sqrt();
        Dense {
            w: uniform(rng, &[output, input], k),
            b: Tensor::zeros(&[output]),
            act,
        }
    }

    pub fn input(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn output(&self) -> usize {
        self.w.shape()[0]
    }

    fn preact(&self, x: &Tensor<T>) -> Result<(Vec<T>, Vec<usize>)> {
        let (input, output) = (self.input(), self.output());
        if x.rank() < 2 || *x.shape().last().unwrap() != input {
            return Err(Error::Dimension(format!(
                "dense layer [{output}, {input}] got input {:?}",
                x.shape()
            )));
        }
        let rows = x.len() / input;
        let mut pre: Vec<T> = self
            .b
            .data()
            .iter()
            .copied()
            .cycle()
            .take(rows * output)
            .collect();
        gemm_nt_acc(x.data(), self.w.data(), rows, input, output, &mut pre);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = output;
        Ok((pre, shape))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, DenseCache<T>)> {
        let (pre, shape) = self.preact(x)?;
        let out = Tensor::new(&shape, pre.iter().map(|&v| self.act.apply(v)).collect())?;
        Ok((out, DenseCache { x: x.clone(), pre }))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (pre, shape) = self.preact(x)?;
        Tensor::new(&shape, pre.into_iter().map(|v| self.act.apply(v)).collect())
    }

    /// Returns `(grad_x, grad_w, grad_b)`.
    pub fn backward(
        &self,
        cache: &DenseCache<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (input, output) = (self.input(), self.output());
        if grad_out.len() != cache.pre.len() || *grad_out.shape().last().unwrap() != output {
            return Err(Error::Dimension(format!(
                "dense backward: gradient {:?} does not match output width {output}",
                grad_out.shape()
            )));
        }
        let rows = cache.pre.len() / output;
        let d_pre: Vec<T> = grad_out
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(&g, &p)| g * self.act.derivative(p))
            .collect();
        let mut dx = vec![T::zero(); rows * input];
        gemm_nn_acc(&d_pre, self.w.data(), rows, output, input, &mut dx);
        let mut dw = vec![T::zero(); output * input];
        gemm_tn_acc(&d_pre, cache.x.data(), rows, output, input, &mut dw);
        let mut db = vec![T::zero(); output];
        for r in 0..rows {
            for (o, &v) in db.iter_mut().zip(&d_pre[r * output..][..output]) {
                *o += v;
            }
        }
        Ok((
            Tensor::new(cache.x.shape(), dx)?,
            Tensor::new(&[output, input], dw)?,
            Tensor::new(&[output], db)?,
        ))
    }
}

impl<T: Scalar> Parameters<T> for Dense<T> {
    fn names(&self) -> &'static [&'static str] {
        &["w", "b"]
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.w, &mut self.b]
    }
}
