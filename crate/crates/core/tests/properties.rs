use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ventseq::cells::{gru_step, lstm_step};
use ventseq::data::{fit_scaler, group_breaths, synth_records, Column, SynthConfig};
use ventseq::model::{count_params, HybridModel, ModelConfig};
use ventseq::{CellState, GruParams, LstmParams, Mode, Tensor};

fn tensor(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| values[i % values.len()])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lstm_hidden_state_is_bounded(
        seed in any::<u64>(),
        batch in 1usize..4,
        hidden in 1usize..6,
        xs in prop::collection::vec(-50.0f64..50.0, 1..16),
        cs in prop::collection::vec(-10.0f64..10.0, 1..16),
    ) {
        let p = LstmParams::<f64>::init(3, hidden, &mut ChaCha8Rng::seed_from_u64(seed));
        let state = CellState { h: tensor(&[batch, hidden], &cs), c: Some(tensor(&[batch, hidden], &cs)) };
        let next = lstm_step(&tensor(&[batch, 3], &xs), &state, &p).unwrap();
        prop_assert!(next.h.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn gru_output_lies_between_previous_state_and_candidate_range(
        seed in any::<u64>(),
        hidden in 1usize..6,
        xs in prop::collection::vec(-5.0f64..5.0, 1..8),
        hs in prop::collection::vec(-0.99f64..0.99, 1..8),
    ) {
        // h' is a convex mix of h and a tanh candidate, so |h'| ≤ max(|h|, 1).
        let p = GruParams::<f64>::init(2, hidden, &mut ChaCha8Rng::seed_from_u64(seed));
        let h = tensor(&[1, hidden], &hs);
        let next = gru_step(&tensor(&[1, 2], &xs), &CellState { h: h.clone(), c: None }, &p).unwrap();
        for (a, b) in next.h.data().iter().zip(h.data()) {
            prop_assert!(a.abs() <= b.abs().max(1.0));
        }
    }

    #[test]
    fn closed_form_count_matches_built_model(
        units in prop::collection::vec(1usize..7, 6),
        dense_hidden in 0usize..6,
    ) {
        let cfg = ModelConfig {
            input_features: 5,
            stem_units: units[0],
            block_units: [units[1], units[2], units[3], units[4]],
            tail_units: units[5],
            dense_hidden,
            seed: 0,
        };
        let m = HybridModel::<f64>::build(&cfg).unwrap();
        prop_assert_eq!(m.num_scalars(), count_params(&cfg));
        prop_assert_eq!(m.flatten_params().len(), count_params(&cfg));
    }
}

#[test]
fn gru_with_closed_update_gate_keeps_state() {
    let mut p = GruParams::<f64>::zeros(2, 3);
    p.b_z = Tensor::full(&[3], -1e3);
    let h = tensor(&[2, 3], &[0.3, -0.7, 0.1]);
    let next = gru_step(
        &tensor(&[2, 2], &[4.0, -2.0]),
        &CellState {
            h: h.clone(),
            c: None,
        },
        &p,
    )
    .unwrap();
    assert_eq!(next.h, h);
}

#[test]
fn model_output_is_one_value_per_step() {
    let cfg = ModelConfig::uniform(3, 4, 1);
    let mut m = HybridModel::<f64>::build(&cfg).unwrap();
    let recs = synth_records(3, 12, 4, &SynthConfig::default());
    let scaler = fit_scaler(&recs, &[Column::TimeStep, Column::UIn, Column::Pressure]).unwrap();
    let seqs = group_breaths::<f64>(&ventseq::data::apply_scaler(recs, &scaler).unwrap()).unwrap();
    let refs: Vec<_> = seqs.iter().collect();
    let x = ventseq::data::stack_features(&refs).unwrap();
    assert_eq!(m.forward(&x, Mode::Train).unwrap().shape(), &[3, 12, 1]);
    assert_eq!(m.infer(&x).unwrap().shape(), &[3, 12, 1]);
}

#[test]
fn f32_and_f64_models_agree_loosely() {
    let cfg = ModelConfig::uniform(4, 3, 2);
    let m64 = HybridModel::<f64>::build(&cfg).unwrap();
    let m32: HybridModel<f32> = m64.cast();
    let x = Tensor::from_fn(&[2, 7, 5], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    let a = m64.infer(&x).unwrap();
    let b = m32.infer(&x.cast::<f32>()).unwrap();
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((p - *q as f64).abs() < 1e-4, "{p} vs {q}");
    }
}
