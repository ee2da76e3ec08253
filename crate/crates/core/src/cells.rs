//! Single-timestep LSTM and GRU recurrences with analytic backward passes.
//!
//! LSTM gates use separate hidden-side and input-side matrices:
//!
//! ```text
//! f = σ(W_fh·h + W_fx·x + b_f)      i = σ(W_ih·h + W_ix·x + b_i)
//! g = tanh(W_ch·h + W_cx·x + b_c)   o = σ(W_oh·h + W_ox·x + b_o)
//! c' = f⊙c + i⊙g                    h' = o⊙tanh(c')
//! ```
//!
//! GRU gates use one matrix over the concatenation `[h, x]`:
//!
//! ```text
//! r = σ(W_r·[h, x] + b_r)           z = σ(W_z·[h, x] + b_z)
//! h̃ = tanh(W_h·[r⊙h, x] + b_h)      h' = (1 - z)⊙h + z⊙h̃
//! ```

use rand::Rng;

use crate::activations::sigmoid;
use crate::error::{Error, Result};
use crate::params::{uniform, Parameters};
use crate::scalar::Scalar;
use crate::tensor::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub w_fh: Tensor<T>,
    pub w_ih: Tensor<T>,
    pub w_ch: Tensor<T>,
    pub w_oh: Tensor<T>,
    pub w_fx: Tensor<T>,
    pub w_ix: Tensor<T>,
    pub w_cx: Tensor<T>,
    pub w_ox: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_i: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let wh = || Tensor::zeros(&[hidden, hidden]);
        let wx = || Tensor::zeros(&[hidden, input]);
        let b = || Tensor::zeros(&[hidden]);
        LstmParams {
            w_fh: wh(),
            w_ih: wh(),
            w_ch: wh(),
            w_oh: wh(),
            w_fx: wx(),
            w_ix: wx(),
            w_cx: wx(),
            w_ox: wx(),
            b_f: b(),
            b_i: b(),
            b_c: b(),
            b_o: b(),
        }
    }

    /// Every entry drawn from `uniform(-1/√hidden, 1/√hidden)`.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let k = 1.0 / (hidden as f64).sqrt();
        for t in p.tensors_mut() {
            *t = uniform(rng, t.shape(), k);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_f.len()
    }

    pub fn input(&self) -> usize {
        self.w_fx.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let i = self.input();
        let ok = [&self.w_fh, &self.w_ih, &self.w_ch, &self.w_oh]
            .iter()
            .all(|w| w.shape() == [h, h])
            && [&self.w_fx, &self.w_ix, &self.w_cx, &self.w_ox]
                .iter()
                .all(|w| w.shape() == [h, i])
            && [&self.b_f, &self.b_i, &self.b_c, &self.b_o]
                .iter()
                .all(|b| b.shape() == [h]);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "inconsistent LSTM parameter shapes for hidden={h}, input={i}"
            )))
        }
    }
}

impl<T: Scalar> Parameters<T> for LstmParams<T> {
    fn names(&self) -> &'static [&'static str] {
        &[
            "w_fh", "w_ih", "w_ch", "w_oh", "w_fx", "w_ix", "w_cx", "w_ox", "b_f", "b_i", "b_c",
            "b_o",
        ]
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.w_fh, &self.w_ih, &self.w_ch, &self.w_oh, &self.w_fx, &self.w_ix, &self.w_cx,
            &self.w_ox, &self.b_f, &self.b_i, &self.b_c, &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.w_fh,
            &mut self.w_ih,
            &mut self.w_ch,
            &mut self.w_oh,
            &mut self.w_fx,
            &mut self.w_ix,
            &mut self.w_cx,
            &mut self.w_ox,
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<T> {
    /// `[hidden, hidden + input]`, columns ordered `[h, x]`.
    pub w_r: Tensor<T>,
    pub w_z: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(&[hidden, hidden + input]);
        let b = || Tensor::zeros(&[hidden]);
        GruParams {
            w_r: w(),
            w_z: w(),
            w_h: w(),
            b_r: b(),
            b_z: b(),
            b_h: b(),
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden);
        let k = 1.0 / (hidden as f64).sqrt();
        for t in p.tensors_mut() {
            *t = uniform(rng, t.shape(), k);
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_r.len()
    }

    pub fn input(&self) -> usize {
        self.w_r.shape()[1] - self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        let cols = self.w_r.shape()[1];
        let ok = cols > h
            && [&self.w_r, &self.w_z, &self.w_h]
                .iter()
                .all(|w| w.shape() == [h, cols])
            && [&self.b_r, &self.b_z, &self.b_h]
                .iter()
                .all(|b| b.shape() == [h]);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "inconsistent GRU parameter shapes for hidden={h}"
            )))
        }
    }
}

impl<T: Scalar> Parameters<T> for GruParams<T> {
    fn names(&self) -> &'static [&'static str] {
        &["w_r", "w_z", "w_h", "b_r", "b_z", "b_h"]
    }

    fn tensors(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.w_r, &self.w_z, &self.w_h, &self.b_r, &self.b_z, &self.b_h,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.w_r,
            &mut self.w_z,
            &mut self.w_h,
            &mut self.b_r,
            &mut self.b_z,
            &mut self.b_h,
        ]
    }
}

/// Recurrent state carried between timesteps. `c` is only present for LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState<T> {
    pub h: Tensor<T>,
    pub c: Option<Tensor<T>>,
}

impl<T: Scalar> CellState<T> {
    pub fn zeros_lstm(batch: usize, hidden: usize) -> Self {
        CellState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Some(Tensor::zeros(&[batch, hidden])),
        }
    }

    pub fn zeros_gru(batch: usize, hidden: usize) -> Self {
        CellState {
            h: Tensor::zeros(&[batch, hidden]),
            c: None,
        }
    }
}

/// Gradients produced by one backward step.
#[derive(Clone, Debug)]
pub struct StepGradients<T, P> {
    pub grad_x: Tensor<T>,
    pub grad_state: CellState<T>,
    pub grad_params: P,
}

/// Forward values kept for the LSTM backward step.
#[derive(Clone, Debug)]
pub struct LstmCache<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    f: Vec<T>,
    i: Vec<T>,
    g: Vec<T>,
    o: Vec<T>,
    tanh_c: Vec<T>,
}

impl<T: Scalar> LstmCache<T> {
    pub fn forget_gate(&self) -> &[T] {
        &self.f
    }

    pub fn output_gate(&self) -> &[T] {
        &self.o
    }

    pub fn tanh_cell(&self) -> &[T] {
        &self.tanh_c
    }
}

fn check_step_shapes(
    x: &Tensor<impl Scalar>,
    h: &Tensor<impl Scalar>,
    input: usize,
    hidden: usize,
    what: &str,
) -> Result<usize> {
    if x.rank() != 2 || x.shape()[1] != input {
        return Err(Error::Dimension(format!(
            "{what}: input must be [batch, {input}], got {:?}",
            x.shape()
        )));
    }
    let batch = x.shape()[0];
    if h.shape() != [batch, hidden] {
        return Err(Error::Dimension(format!(
            "{what}: hidden state must be [{batch}, {hidden}], got {:?}",
            h.shape()
        )));
    }
    Ok(batch)
}

/// Bias row broadcast over `batch`, then `+= x·Wxᵀ`, then `+= h·Whᵀ`.
fn lstm_preact<T: Scalar>(
    x: &Tensor<T>,
    wx: &Tensor<T>,
    h: &Tensor<T>,
    wh: &Tensor<T>,
    b: &Tensor<T>,
) -> Vec<T> {
    let batch = x.shape()[0];
    let hidden = b.len();
    let input = x.shape()[1];
    let mut out: Vec<T> = b
        .data()
        .iter()
        .copied()
        .cycle()
        .take(batch * hidden)
        .collect();
    gemm_nt_acc(x.data(), wx.data(), batch, input, hidden, &mut out);
    gemm_nt_acc(h.data(), wh.data(), batch, hidden, hidden, &mut out);
    out
}

pub fn lstm_step<T: Scalar>(
    x: &Tensor<T>,
    state: &CellState<T>,
    p: &LstmParams<T>,
) -> Result<CellState<T>> {
    lstm_step_cached(x, state, p).map(|(s, _)| s)
}

pub fn lstm_step_cached<T: Scalar>(
    x: &Tensor<T>,
    state: &CellState<T>,
    p: &LstmParams<T>,
) -> Result<(CellState<T>, LstmCache<T>)> {
    let hidden = p.hidden();
    let batch = check_step_shapes(x, &state.h, p.input(), hidden, "lstm_step")?;
    let c_prev = state
        .c
        .as_ref()
        .ok_or_else(|| Error::Usage("lstm_step needs a cell memory in the state".into()))?;
    if c_prev.shape() != state.h.shape() {
        return Err(Error::Dimension(format!(
            "lstm_step: cell memory {:?} does not match hidden state {:?}",
            c_prev.shape(),
            state.h.shape()
        )));
    }
    let h = &state.h;
    let mut f = lstm_preact(x, &p.w_fx, h, &p.w_fh, &p.b_f);
    let mut i = lstm_preact(x, &p.w_ix, h, &p.w_ih, &p.b_i);
    let mut g = lstm_preact(x, &p.w_cx, h, &p.w_ch, &p.b_c);
    let mut o = lstm_preact(x, &p.w_ox, h, &p.w_oh, &p.b_o);
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    g.iter_mut().for_each(|v| *v = v.tanh());
    o.iter_mut().for_each(|v| *v = sigmoid(*v));

    let n = batch * hidden;
    let mut c = Vec::with_capacity(n);
    let mut tanh_c = Vec::with_capacity(n);
    let mut h_new = Vec::with_capacity(n);
    for k in 0..n {
        let ck = f[k] * c_prev.data()[k] + i[k] * g[k];
        let tk = ck.tanh();
        c.push(ck);
        tanh_c.push(tk);
        h_new.push(o[k] * tk);
    }
    let shape = [batch, hidden];
    let next = CellState {
        h: Tensor::new(&shape, h_new)?,
        c: Some(Tensor::new(&shape, c)?),
    };
    let cache = LstmCache {
        x: x.clone(),
        h_prev: h.clone(),
        c_prev: c_prev.clone(),
        f,
        i,
        g,
        o,
        tanh_c,
    };
    Ok((next, cache))
}

/// Backward through one LSTM step, adding parameter gradients into `grads`.
///
/// Returns `(grad_x, grad_h_prev, grad_c_prev)`.
pub fn lstm_step_backward_into<T: Scalar>(
    p: &LstmParams<T>,
    cache: &LstmCache<T>,
    grad_h: &Tensor<T>,
    grad_c: Option<&Tensor<T>>,
    grads: &mut LstmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let hidden = p.hidden();
    let input = p.input();
    let batch = cache.x.shape()[0];
    let shape = [batch, hidden];
    if grad_h.shape() != shape || grad_c.is_some_and(|g| g.shape() != shape) {
        return Err(Error::Dimension(format!(
            "lstm_step_backward: upstream gradients must be {shape:?}"
        )));
    }
    let n = batch * hidden;
    let one = T::one();
    let (mut da_f, mut da_i, mut da_g, mut da_o) = (
        vec![T::zero(); n],
        vec![T::zero(); n],
        vec![T::zero(); n],
        vec![T::zero(); n],
    );
    let mut dc_prev = vec![T::zero(); n];
    for k in 0..n {
        let dh = grad_h.data()[k];
        let (f, i, g, o, tc) = (
            cache.f[k],
            cache.i[k],
            cache.g[k],
            cache.o[k],
            cache.tanh_c[k],
        );
        let mut dc = dh * o * (one - tc * tc);
        if let Some(gc) = grad_c {
            dc += gc.data()[k];
        }
        da_o[k] = dh * tc * o * (one - o);
        da_f[k] = dc * cache.c_prev.data()[k] * f * (one - f);
        da_i[k] = dc * g * i * (one - i);
        da_g[k] = dc * i * (one - g * g);
        dc_prev[k] = dc * f;
    }

    let mut dx = vec![T::zero(); batch * input];
    let mut dh_prev = vec![T::zero(); n];
    let gates = [
        (&da_f, &p.w_fx, &p.w_fh),
        (&da_i, &p.w_ix, &p.w_ih),
        (&da_g, &p.w_cx, &p.w_ch),
        (&da_o, &p.w_ox, &p.w_oh),
    ];
    for (da, wx, wh) in gates {
        gemm_nn_acc(da, wx.data(), batch, hidden, input, &mut dx);
        gemm_nn_acc(da, wh.data(), batch, hidden, hidden, &mut dh_prev);
    }
    let grad_gates = [
        (&da_f, &mut grads.w_fx, &mut grads.w_fh, &mut grads.b_f),
        (&da_i, &mut grads.w_ix, &mut grads.w_ih, &mut grads.b_i),
        (&da_g, &mut grads.w_cx, &mut grads.w_ch, &mut grads.b_c),
        (&da_o, &mut grads.w_ox, &mut grads.w_oh, &mut grads.b_o),
    ];
    for (da, gwx, gwh, gb) in grad_gates {
        gemm_tn_acc(da, cache.x.data(), batch, hidden, input, gwx.data_mut());
        gemm_tn_acc(
            da,
            cache.h_prev.data(),
            batch,
            hidden,
            hidden,
            gwh.data_mut(),
        );
        add_column_sums(da, batch, hidden, gb.data_mut());
    }
    Ok((
        Tensor::new(&[batch, input], dx)?,
        Tensor::new(&shape, dh_prev)?,
        Tensor::new(&shape, dc_prev)?,
    ))
}

/// Backward through one LSTM step. `grad_c` is the gradient arriving at the
/// new cell memory from later timesteps, if any.
pub fn lstm_step_backward<T: Scalar>(
    p: &LstmParams<T>,
    cache: &LstmCache<T>,
    grad_h: &Tensor<T>,
    grad_c: Option<&Tensor<T>>,
) -> Result<StepGradients<T, LstmParams<T>>> {
    let mut grads = LstmParams::zeros(p.input(), p.hidden());
    let (dx, dh, dc) = lstm_step_backward_into(p, cache, grad_h, grad_c, &mut grads)?;
    Ok(StepGradients {
        grad_x: dx,
        grad_state: CellState { h: dh, c: Some(dc) },
        grad_params: grads,
    })
}

fn add_column_sums<T: Scalar>(m: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&m[r * cols..][..cols]) {
            *o += v;
        }
    }
}

/// Forward values kept for the GRU backward step.
#[derive(Clone, Debug)]
pub struct GruCache<T> {
    batch: usize,
    input: usize,
    h_prev: Vec<T>,
    hx: Vec<T>,
    rhx: Vec<T>,
    r: Vec<T>,
    z: Vec<T>,
    cand: Vec<T>,
}

impl<T: Scalar> GruCache<T> {
    pub fn update_gate(&self) -> &[T] {
        &self.z
    }

    pub fn candidate(&self) -> &[T] {
        &self.cand
    }
}

fn concat_rows<T: Scalar>(left: &[T], right: &[T], rows: usize, lw: usize, rw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * (lw + rw));
    for r in 0..rows {
        out.extend_from_slice(&left[r * lw..][..lw]);
        out.extend_from_slice(&right[r * rw..][..rw]);
    }
    out
}

fn gru_preact<T: Scalar>(cat: &[T], w: &Tensor<T>, b: &Tensor<T>, batch: usize) -> Vec<T> {
    let hidden = b.len();
    let cols = w.shape()[1];
    let mut out: Vec<T> = b
        .data()
        .iter()
        .copied()
        .cycle()
        .take(batch * hidden)
        .collect();
    gemm_nt_acc(cat, w.data(), batch, cols, hidden, &mut out);
    out
}

pub fn gru_step<T: Scalar>(
    x: &Tensor<T>,
    state: &CellState<T>,
    p: &GruParams<T>,
) -> Result<CellState<T>> {
    gru_step_cached(x, state, p).map(|(s, _)| s)
}

pub fn gru_step_cached<T: Scalar>(
    x: &Tensor<T>,
    state: &CellState<T>,
    p: &GruParams<T>,
) -> Result<(CellState<T>, GruCache<T>)> {
    let hidden = p.hidden();
    let input = p.input();
    let batch = check_step_shapes(x, &state.h, input, hidden, "gru_step")?;
    let h_prev = state.h.data();
    let hx = concat_rows(h_prev, x.data(), batch, hidden, input);
    let mut r = gru_preact(&hx, &p.w_r, &p.b_r, batch);
    let mut z = gru_preact(&hx, &p.w_z, &p.b_z, batch);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    let gated: Vec<T> = r.iter().zip(h_prev).map(|(&a, &b)| a * b).collect();
    let rhx = concat_rows(&gated, x.data(), batch, hidden, input);
    let mut cand = gru_preact(&rhx, &p.w_h, &p.b_h, batch);
    cand.iter_mut().for_each(|v| *v = v.tanh());
    let h: Vec<T> = (0..batch * hidden)
        .map(|k| (T::one() - z[k]) * h_prev[k] + z[k] * cand[k])
        .collect();
    let next = CellState {
        h: Tensor::new(&[batch, hidden], h)?,
        c: None,
    };
    let cache = GruCache {
        batch,
        input,
        h_prev: h_prev.to_vec(),
        hx,
        rhx,
        r,
        z,
        cand,
    };
    Ok((next, cache))
}

/// Backward through one GRU step, adding parameter gradients into `grads`.
///
/// Returns `(grad_x, grad_h_prev)`.
pub fn gru_step_backward_into<T: Scalar>(
    p: &GruParams<T>,
    cache: &GruCache<T>,
    grad_h: &Tensor<T>,
    grads: &mut GruParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let hidden = p.hidden();
    let (batch, input) = (cache.batch, cache.input);
    let cols = hidden + input;
    if grad_h.shape() != [batch, hidden] {
        return Err(Error::Dimension(format!(
            "gru_step_backward: upstream gradient must be [{batch}, {hidden}], got {:?}",
            grad_h.shape()
        )));
    }
    let n = batch * hidden;
    let one = T::one();
    let mut dh_prev = vec![T::zero(); n];
    let mut da_z = vec![T::zero(); n];
    let mut da_h = vec![T::zero(); n];
    for k in 0..n {
        let dh = grad_h.data()[k];
        let (z, cand, hp) = (cache.z[k], cache.cand[k], cache.h_prev[k]);
        dh_prev[k] = dh * (one - z);
        da_z[k] = dh * (cand - hp) * z * (one - z);
        da_h[k] = dh * z * (one - cand * cand);
    }

    // candidate branch: d[r⊙h, x]
    let mut d_rhx = vec![T::zero(); batch * cols];
    gemm_nn_acc(&da_h, p.w_h.data(), batch, hidden, cols, &mut d_rhx);
    gemm_tn_acc(&da_h, &cache.rhx, batch, hidden, cols, grads.w_h.data_mut());
    add_column_sums(&da_h, batch, hidden, grads.b_h.data_mut());

    let mut dx = vec![T::zero(); batch * input];
    let mut da_r = vec![T::zero(); n];
    for b in 0..batch {
        for j in 0..hidden {
            let k = b * hidden + j;
            let d_gated = d_rhx[b * cols + j];
            dh_prev[k] += d_gated * cache.r[k];
            let r = cache.r[k];
            da_r[k] = d_gated * cache.h_prev[k] * r * (one - r);
        }
        for j in 0..input {
            dx[b * input + j] += d_rhx[b * cols + hidden + j];
        }
    }

    // gate branch: d[h, x]
    let mut d_hx = vec![T::zero(); batch * cols];
    gemm_nn_acc(&da_z, p.w_z.data(), batch, hidden, cols, &mut d_hx);
    gemm_nn_acc(&da_r, p.w_r.data(), batch, hidden, cols, &mut d_hx);
    gemm_tn_acc(&da_z, &cache.hx, batch, hidden, cols, grads.w_z.data_mut());
    gemm_tn_acc(&da_r, &cache.hx, batch, hidden, cols, grads.w_r.data_mut());
    add_column_sums(&da_z, batch, hidden, grads.b_z.data_mut());
    add_column_sums(&da_r, batch, hidden, grads.b_r.data_mut());
    for b in 0..batch {
        for j in 0..hidden {
            dh_prev[b * hidden + j] += d_hx[b * cols + j];
        }
        for j in 0..input {
            dx[b * input + j] += d_hx[b * cols + hidden + j];
        }
    }
    Ok((
        Tensor::new(&[batch, input], dx)?,
        Tensor::new(&[batch, hidden], dh_prev)?,
    ))
}

pub fn gru_step_backward<T: Scalar>(
    p: &GruParams<T>,
    cache: &GruCache<T>,
    grad_h: &Tensor<T>,
) -> Result<StepGradients<T, GruParams<T>>> {
    let mut grads = GruParams::zeros(p.input(), p.hidden());
    let (dx, dh) = gru_step_backward_into(p, cache, grad_h, &mut grads)?;
    Ok(StepGradients {
        grad_x: dx,
        grad_state: CellState { h: dh, c: None },
        grad_params: grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        uniform(rng, shape, 1.0)
    }

    #[test]
    fn lstm_zero_params_zero_state() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let x = Tensor::from_fn(&[2, 2], |k| k as f64 - 1.5);
        let (s, cache) = lstm_step_cached(&x, &CellState::zeros_lstm(2, 3), &p).unwrap();
        assert!(cache
            .f
            .iter()
            .chain(&cache.i)
            .chain(&cache.o)
            .all(|&v| v == 0.5));
        assert!(cache.g.iter().all(|&v| v == 0.0));
        assert!(s.h.data().iter().all(|&v| v == 0.0));
        assert!(s.c.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_zero_params_unit_memory() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let state = CellState {
            h: Tensor::zeros(&[1, 3]),
            c: Some(Tensor::ones(&[1, 3])),
        };
        let s = lstm_step(&Tensor::ones(&[1, 2]), &state, &p).unwrap();
        // c = 0.5·1 + 0.5·0, h = 0.5·tanh(0.5)
        for &c in s.c.unwrap().data() {
            assert_eq!(c, 0.5);
        }
        for &h in s.h.data() {
            assert!((h - 0.231_058_578_630_004_87).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_shape_errors() {
        let p = LstmParams::<f64>::zeros(2, 3);
        let state = CellState::zeros_lstm(2, 3);
        assert!(matches!(
            lstm_step(&Tensor::zeros(&[2, 4]), &state, &p),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            lstm_step(&Tensor::zeros(&[3, 2]), &state, &p),
            Err(Error::Dimension(_))
        ));
        let no_memory = CellState::zeros_gru(2, 3);
        assert!(lstm_step(&Tensor::zeros(&[2, 2]), &no_memory, &p).is_err());
    }

    #[test]
    fn gru_zero_params() {
        let p = GruParams::<f64>::zeros(2, 3);
        let h_prev = Tensor::from_fn(&[2, 3], |k| k as f64 - 2.0);
        let state = CellState {
            h: h_prev.clone(),
            c: None,
        };
        let (s, cache) = gru_step_cached(&Tensor::ones(&[2, 2]), &state, &p).unwrap();
        assert!(cache.r.iter().chain(&cache.z).all(|&v| v == 0.5));
        assert!(cache.cand.iter().all(|&v| v == 0.0));
        assert_eq!(s.h, h_prev.scale(0.5));

        let s = gru_step(&Tensor::ones(&[2, 2]), &CellState::zeros_gru(2, 3), &p).unwrap();
        assert!(s.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::<f64>::init(2, 3, &mut rng);
        let state = CellState {
            h: random_tensor(&mut rng, &[2, 3]),
            c: Some(random_tensor(&mut rng, &[2, 3])),
        };
        let x = random_tensor(&mut rng, &[2, 2]);
        let (_, cache) = lstm_step_cached(&x, &state, &p).unwrap();
        let g = lstm_step_backward(
            &p,
            &cache,
            &Tensor::zeros(&[2, 3]),
            Some(&Tensor::zeros(&[2, 3])),
        )
        .unwrap();
        assert_eq!(g.grad_x.max_abs(), 0.0);
        assert_eq!(g.grad_state.h.max_abs(), 0.0);
        assert!(g.grad_params.tensors().iter().all(|t| t.max_abs() == 0.0));

        let gp = GruParams::<f64>::init(2, 3, &mut rng);
        let (_, gcache) = gru_step_cached(
            &x,
            &CellState {
                h: state.h.clone(),
                c: None,
            },
            &gp,
        )
        .unwrap();
        let g = gru_step_backward(&gp, &gcache, &Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(g.grad_x.max_abs(), 0.0);
        assert_eq!(g.grad_state.h.max_abs(), 0.0);
        assert!(g.grad_params.tensors().iter().all(|t| t.max_abs() == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn lstm_bias_gradient_is_batch_sum_of_output_preactivation_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = LstmParams::<f64>::init(3, 4, &mut rng);
        let state = CellState {
            h: random_tensor(&mut rng, &[3, 4]),
            c: Some(random_tensor(&mut rng, &[3, 4])),
        };
        let x = random_tensor(&mut rng, &[3, 3]);
        let dh = random_tensor(&mut rng, &[3, 4]);
        let (_, cache) = lstm_step_cached(&x, &state, &p).unwrap();
        let g = lstm_step_backward(&p, &cache, &dh, None).unwrap();
        // dL/da_o = dh ⊙ tanh(c) ⊙ o(1-o), checked against perturbing b_o directly
        let mut want = [0.0; 4];
        for b in 0..3 {
            for j in 0..4 {
                let k = b * 4 + j;
                let o = cache.o[k];
                want[j] += dh.data()[k] * cache.tanh_c[k] * o * (1.0 - o);
            }
        }
        for j in 0..4 {
            assert!((g.grad_params.b_o.data()[j] - want[j]).abs() < 1e-14);
            let numeric = numeric_gradient(
                |bo: &Tensor<f64>| {
                    let mut q = p.clone();
                    q.b_o = bo.clone();
                    let s = lstm_step(&x, &state, &q).unwrap();
                    s.h.data().iter().zip(dh.data()).map(|(a, b)| a * b).sum()
                },
                &p.b_o,
                1e-6,
            );
            assert!(relative_error(want[j], numeric.data()[j]) < 1e-7);
        }
    }

    #[test]
    fn gru_hidden_state_gradient_matches_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = GruParams::<f64>::init(2, 3, &mut rng);
        let x = random_tensor(&mut rng, &[2, 2]);
        let h_prev = random_tensor(&mut rng, &[2, 3]);
        let w = random_tensor(&mut rng, &[2, 3]);
        let (_, cache) = gru_step_cached(
            &x,
            &CellState {
                h: h_prev.clone(),
                c: None,
            },
            &p,
        )
        .unwrap();
        let g = gru_step_backward(&p, &cache, &w).unwrap();
        let numeric = numeric_gradient(
            |h: &Tensor<f64>| {
                let s = gru_step(
                    &x,
                    &CellState {
                        h: h.clone(),
                        c: None,
                    },
                    &p,
                )
                .unwrap();
                s.h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
            &h_prev,
            1e-6,
        );
        for (a, n) in g.grad_state.h.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n) < 1e-7, "{a} vs {n}");
        }
    }

    #[test]
    fn steps_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = LstmParams::<f64>::init(3, 5, &mut rng);
        let gp = GruParams::<f64>::init(3, 5, &mut rng);
        let x = random_tensor(&mut rng, &[4, 3]);
        let s = CellState {
            h: random_tensor(&mut rng, &[4, 5]),
            c: Some(random_tensor(&mut rng, &[4, 5])),
        };
        assert_eq!(
            lstm_step(&x, &s, &p).unwrap(),
            lstm_step(&x, &s, &p).unwrap()
        );
        let gs = CellState {
            h: s.h.clone(),
            c: None,
        };
        assert_eq!(
            gru_step(&x, &gs, &gp).unwrap(),
            gru_step(&x, &gs, &gp).unwrap()
        );
    }

    #[test]
    fn f32_cells_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::<f32>::init(2, 3, &mut rng);
        let s = lstm_step(&Tensor::ones(&[1, 2]), &CellState::zeros_lstm(1, 3), &p).unwrap();
        assert!(s.h.is_finite());
    }
}
