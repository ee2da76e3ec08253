//! Central finite-difference gradient checks, including the self-contained
//! suite behind the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::cells::{
    gru_step, gru_step_backward, gru_step_cached, lstm_step, lstm_step_backward, lstm_step_cached,
    CellState, GruParams, LstmParams,
};
use crate::error::Result;
use crate::layers::{
    multiply_backward, multiply_forward, BatchNorm, Bidirectional, Dense, Gru, Lstm, Mode,
    RecurrentCell,
};
use crate::model::{HybridModel, ModelConfig};
use crate::params::Parameters;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{loss, loss_backward, mse, LossKind};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

pub const DEFAULT_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central-difference gradient of a scalar function of a tensor.
pub fn numeric_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    h: f64,
) -> Tensor<T> {
    let mut probe = x.clone();
    let step = T::lit(h);
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let up = f(&probe);
        probe.data_mut()[k] = orig - step;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        grad.push(T::lit((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape(), grad).expect("gradient shares input shape")
}

/// Central difference of `f` at entry `k` of `x`.
pub fn numeric_partial<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    k: usize,
    h: f64,
) -> f64 {
    let mut probe = x.clone();
    let orig = probe.data()[k];
    probe.data_mut()[k] = orig + T::lit(h);
    let up = f(&probe);
    probe.data_mut()[k] = orig - T::lit(h);
    let down = f(&probe);
    (up - down) / (2.0 * h)
}

/// Largest relative error between `analytic` and the numeric gradient of `f` at `x`.
pub fn check_function<T: Scalar>(
    f: impl FnMut(&Tensor<T>) -> f64,
    x: &Tensor<T>,
    analytic: &Tensor<T>,
    h: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "analytic gradient shape");
    let numeric = numeric_gradient(f, x, h);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a.as_f64(), n.as_f64()))
        .fold(0.0, f64::max)
}

/// Largest relative error per checked layer kind must stay below this.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Tolerance for sampled entries of the whole network.
pub const GRAPH_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentResult {
    pub name: &'static str,
    pub max_rel_error: f64,
    /// Tensor holding the worst entry.
    pub worst_tensor: String,
    pub tolerance: f64,
    /// Number of scalar entries compared.
    pub probes: usize,
}

impl ComponentResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Corrupts one analytic gradient entry of the dense check so the suite
    /// must fail; used to test the harness itself.
    pub inject_fault: bool,
    /// Network checked end to end; the seed field is overridden by `seed`.
    pub graph: ModelConfig,
    pub graph_probes_per_tensor: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            inject_fault: false,
            graph: ModelConfig::desk(),
            graph_probes_per_tensor: 2,
        }
    }
}

/// Named tensors a scalar loss depends on, with their analytic gradients.
struct Case {
    names: Vec<String>,
    values: Vec<Tensor<f64>>,
    analytic: Vec<Tensor<f64>>,
}

impl Case {
    /// Compares every entry, or `per_tensor` random entries of each tensor.
    fn compare(
        &self,
        name: &'static str,
        tolerance: f64,
        mut loss: impl FnMut(&[Tensor<f64>]) -> f64,
        sample: Option<(usize, &mut ChaCha8Rng)>,
    ) -> ComponentResult {
        let mut worst = (0.0f64, String::new());
        let mut probes = 0;
        let mut values = self.values.clone();
        let mut sample = sample;
        for k in 0..values.len() {
            let len = values[k].len();
            let entries: Vec<usize> = match sample.as_mut() {
                Some((n, rng)) => (0..*n).map(|_| rng.random_range(0..len)).collect(),
                None => (0..len).collect(),
            };
            for j in entries {
                let orig = values[k].data()[j];
                values[k].data_mut()[j] = orig + DEFAULT_STEP;
                let up = loss(&values);
                values[k].data_mut()[j] = orig - DEFAULT_STEP;
                let down = loss(&values);
                values[k].data_mut()[j] = orig;
                let numeric = (up - down) / (2.0 * DEFAULT_STEP);
                let err = relative_error(self.analytic[k].data()[j], numeric);
                probes += 1;
                if err > worst.0 || err.is_nan() {
                    worst = (
                        if err.is_nan() { f64::INFINITY } else { err },
                        self.names[k].clone(),
                    );
                }
            }
        }
        ComponentResult {
            name,
            max_rel_error: worst.0,
            worst_tensor: worst.1,
            tolerance,
            probes,
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn assign<P: Parameters<f64>>(p: &mut P, ts: &[Tensor<f64>]) {
    for (dst, src) in p.tensors_mut().into_iter().zip(ts) {
        dst.data_mut().copy_from_slice(src.data());
    }
}

fn named<P: Parameters<f64>>(prefix: &str, p: &P) -> Vec<String> {
    p.names().iter().map(|n| format!("{prefix}{n}")).collect()
}

fn owned(ts: Vec<&Tensor<f64>>) -> Vec<Tensor<f64>> {
    ts.into_iter().cloned().collect()
}

const BATCH: usize = 3;
const INPUT: usize = 4;
const HIDDEN: usize = 3;
const STEPS: usize = 5;

fn check_lstm_step(rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let p = LstmParams::<f64>::init(INPUT, HIDDEN, rng);
    let x = random(rng, &[BATCH, INPUT]);
    let state = CellState {
        h: random(rng, &[BATCH, HIDDEN]),
        c: Some(random(rng, &[BATCH, HIDDEN])),
    };
    let (wh, wc) = (random(rng, &[BATCH, HIDDEN]), random(rng, &[BATCH, HIDDEN]));
    let (_, cache) = lstm_step_cached(&x, &state, &p)?;
    let g = lstm_step_backward(&p, &cache, &wh, Some(&wc))?;
    let mut names: Vec<String> = vec!["x".into(), "h_prev".into(), "c_prev".into()];
    names.extend(named("", &p));
    let mut values = vec![x, state.h.clone(), state.c.clone().unwrap()];
    values.extend(owned(p.tensors()));
    let mut analytic = vec![g.grad_x, g.grad_state.h, g.grad_state.c.unwrap()];
    analytic.extend(owned(g.grad_params.tensors()));
    let case = Case {
        names,
        values,
        analytic,
    };
    let mut probe = p.clone();
    Ok(case.compare(
        "lstm_step",
        LAYER_TOLERANCE,
        |v| {
            assign(&mut probe, &v[3..]);
            let s = CellState {
                h: v[1].clone(),
                c: Some(v[2].clone()),
            };
            let out = lstm_step(&v[0], &s, &probe).expect("shapes fixed");
            dot(&out.h, &wh) + dot(out.c.as_ref().unwrap(), &wc)
        },
        None,
    ))
}

fn check_gru_step(rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let p = GruParams::<f64>::init(INPUT, HIDDEN, rng);
    let x = random(rng, &[BATCH, INPUT]);
    let h = random(rng, &[BATCH, HIDDEN]);
    let wh = random(rng, &[BATCH, HIDDEN]);
    let (_, cache) = gru_step_cached(
        &x,
        &CellState {
            h: h.clone(),
            c: None,
        },
        &p,
    )?;
    let g = gru_step_backward(&p, &cache, &wh)?;
    let mut names: Vec<String> = vec!["x".into(), "h_prev".into()];
    names.extend(named("", &p));
    let mut values = vec![x, h];
    values.extend(owned(p.tensors()));
    let mut analytic = vec![g.grad_x, g.grad_state.h];
    analytic.extend(owned(g.grad_params.tensors()));
    let case = Case {
        names,
        values,
        analytic,
    };
    let mut probe = p.clone();
    Ok(case.compare(
        "gru_step",
        LAYER_TOLERANCE,
        |v| {
            assign(&mut probe, &v[2..]);
            let out = gru_step(
                &v[0],
                &CellState {
                    h: v[1].clone(),
                    c: None,
                },
                &probe,
            )
            .expect("shapes fixed");
            dot(&out.h, &wh)
        },
        None,
    ))
}

fn check_bidirectional<C: RecurrentCell<f64>>(
    name: &'static str,
    rng: &mut ChaCha8Rng,
) -> Result<ComponentResult> {
    let layer = Bidirectional::<f64, C>::init(INPUT, HIDDEN, rng);
    let seq = random(rng, &[BATCH, STEPS, INPUT]);
    let w = random(rng, &[BATCH, STEPS, 2 * HIDDEN]);
    let (_, cache) = layer.forward(&seq)?;
    let (dseq, grads) = layer.backward(&cache, &w)?;
    let mut names = vec!["seq".to_string()];
    names.extend(layer.param_names());
    let mut values = vec![seq];
    values.extend(owned(layer.tensors()));
    let mut analytic = vec![dseq];
    analytic.extend(owned(grads.tensors()));
    let case = Case {
        names,
        values,
        analytic,
    };
    let mut probe = layer.clone();
    Ok(case.compare(
        name,
        LAYER_TOLERANCE,
        |v| {
            assign(&mut probe, &v[1..]);
            dot(&probe.forward(&v[0]).expect("shapes fixed").0, &w)
        },
        None,
    ))
}

fn check_multiply(rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let a = random(rng, &[BATCH, STEPS, INPUT]);
    let b = random(rng, &[BATCH, STEPS, INPUT]);
    let w = random(rng, &[BATCH, STEPS, INPUT]);
    let (da, db) = multiply_backward(&a, &b, &w)?;
    let case = Case {
        names: vec!["a".into(), "b".into()],
        values: vec![a, b],
        analytic: vec![da, db],
    };
    Ok(case.compare(
        "multiply",
        LAYER_TOLERANCE,
        |v| dot(&multiply_forward(&v[0], &v[1]).expect("shapes fixed"), &w),
        None,
    ))
}

fn check_batchnorm(rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let mut bn = BatchNorm::<f64>::new(INPUT);
    bn.gamma = random(rng, &[INPUT]);
    bn.beta = random(rng, &[INPUT]);
    let x = random(rng, &[BATCH, STEPS, INPUT]);
    let w = random(rng, &[BATCH, STEPS, INPUT]);
    let template = bn.clone();
    let (_, cache) = bn.forward(&x, Mode::Train)?;
    let (dx, dg, db) = bn.backward(&cache, &w)?;
    let case = Case {
        names: vec!["x".into(), "gamma".into(), "beta".into()],
        values: vec![x, template.gamma.clone(), template.beta.clone()],
        analytic: vec![dx, dg, db],
    };
    Ok(case.compare(
        "batchnorm",
        LAYER_TOLERANCE,
        |v| {
            let mut probe = template.clone();
            assign(&mut probe, &v[1..]);
            dot(
                &probe.forward(&v[0], Mode::Train).expect("shapes fixed").0,
                &w,
            )
        },
        None,
    ))
}

fn check_dense(rng: &mut ChaCha8Rng, fault: bool) -> Result<ComponentResult> {
    let mut worst: Option<ComponentResult> = None;
    for act in [Activation::Selu, Activation::Linear, Activation::Tanh] {
        let layer = Dense::<f64>::init(INPUT, HIDDEN, act, rng);
        let x = random(rng, &[BATCH, STEPS, INPUT]);
        let w = random(rng, &[BATCH, STEPS, HIDDEN]);
        let (_, cache) = layer.forward(&x)?;
        let (dx, mut dw, db) = layer.backward(&cache, &w)?;
        if fault {
            dw.data_mut()[0] += 1e-2;
        }
        let case = Case {
            names: vec![
                "x".into(),
                format!("{act:?}.w").to_lowercase(),
                format!("{act:?}.b").to_lowercase(),
            ],
            values: vec![x, layer.w.clone(), layer.b.clone()],
            analytic: vec![dx, dw, db],
        };
        let mut probe = layer.clone();
        let r = case.compare(
            "dense",
            LAYER_TOLERANCE,
            |v| {
                assign(&mut probe, &v[1..]);
                dot(&probe.infer(&v[0]).expect("shapes fixed"), &w)
            },
            None,
        );
        if worst
            .as_ref()
            .is_none_or(|b| r.max_rel_error > b.max_rel_error)
        {
            worst = Some(r);
        }
    }
    Ok(worst.expect("three activations checked"))
}

fn check_losses(rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let mut worst: Option<ComponentResult> = None;
    for kind in [LossKind::Mae, LossKind::Mse] {
        let pred = random(rng, &[BATCH, STEPS, 1]);
        let actual = random(rng, &[BATCH, STEPS, 1]);
        let g = loss_backward(kind, &pred, &actual, None)?;
        let case = Case {
            names: vec![format!("{kind}.pred")],
            values: vec![pred],
            analytic: vec![g],
        };
        let r = case.compare(
            "losses",
            LAYER_TOLERANCE,
            |v| loss(kind, &v[0], &actual, None).expect("shapes fixed"),
            None,
        );
        if worst
            .as_ref()
            .is_none_or(|b| r.max_rel_error > b.max_rel_error)
        {
            worst = Some(r);
        }
    }
    Ok(worst.expect("two losses checked"))
}

fn check_graph(opts: &SuiteOptions, rng: &mut ChaCha8Rng) -> Result<ComponentResult> {
    let config = ModelConfig {
        seed: opts.seed,
        ..opts.graph.clone()
    };
    let base = HybridModel::<f64>::build(&config)?;
    let x = random(rng, &[2, 6, config.input_features]);
    let target = random(rng, &[2, 6, 1]);
    let mut m = base.clone();
    let pred = m.forward(&x, Mode::Train)?;
    let g = m.backward(&loss_backward(LossKind::Mse, &pred, &target, None)?)?;
    let case = Case {
        names: base.param_names(),
        values: owned(base.tensors()),
        analytic: g.params,
    };
    let mut probe = base.clone();
    Ok(case.compare(
        "full_graph",
        GRAPH_TOLERANCE,
        |v| {
            for (dst, src) in probe.tensors_mut().into_iter().zip(v) {
                dst.data_mut().copy_from_slice(src.data());
            }
            let pred = probe.forward(&x, Mode::Train).expect("shapes fixed");
            mse(&pred, &target).expect("shapes fixed")
        },
        Some((opts.graph_probes_per_tensor.max(1), rng)),
    ))
}

/// Finite-difference checks of every layer kind, the losses and the whole
/// network, in a fixed order.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(vec![
        check_lstm_step(&mut rng)?,
        check_gru_step(&mut rng)?,
        check_bidirectional::<Lstm>("bidirectional_lstm", &mut rng)?,
        check_bidirectional::<Gru>("bidirectional_gru", &mut rng)?,
        check_multiply(&mut rng)?,
        check_batchnorm(&mut rng)?,
        check_dense(&mut rng, opts.inject_fault)?,
        check_losses(&mut rng)?,
        check_graph(opts, &mut rng)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SuiteOptions {
        SuiteOptions {
            graph: ModelConfig::uniform(3, 2, 0),
            ..SuiteOptions::default()
        }
    }

    #[test]
    fn suite_passes() {
        for r in run_suite(&small()).unwrap() {
            assert!(r.passed(), "{r:?}");
            assert!(r.probes > 0);
        }
    }

    #[test]
    fn injected_fault_is_caught_and_named() {
        let results = run_suite(&SuiteOptions {
            inject_fault: true,
            ..small()
        })
        .unwrap();
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert_eq!(failed.len(), 1);
        assert_eq!(failed[0].name, "dense");
        assert!(
            failed[0].worst_tensor.ends_with(".w"),
            "{}",
            failed[0].worst_tensor
        );
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(1e-6, 0.0), 1e-3);
    }
}
