//! Shapes, positivity, statefulness and gradients of the three architectures.

mod support;

use drf_core::model::{Arch, DropoutMode, EncoderOutput, Model, ModelConfig, SequenceInput};
use drf_core::nn::{Tape, Tensor};
use drf_core::pendulum::{generate_sequence, Sequence, DEFAULT_DT};
use support::{model_gradcheck, random_input, rng, tiny_config};

fn model(arch: Arch) -> Model {
    Model::new(ModelConfig::new(arch), 1).unwrap()
}

fn seqs(n: usize, len: usize) -> Vec<Sequence> {
    (0..n as u64)
        .map(|s| generate_sequence(100 + s, len, 0.5, DEFAULT_DT).unwrap())
        .collect()
}

fn outputs(m: &Model, input: &SequenceInput) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let out = m.forward(&tape, &p, input, &mut DropoutMode::Off).unwrap();
    (
        tape.value(out.decoded.y).data.clone(),
        tape.value(out.decoded.sigma).data.clone(),
    )
}

#[test]
fn encoder_dims_positivity_and_determinism() {
    let m = model(Arch::Drf);
    let input = random_input(3, 2, 4);
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let imgs = tape.constant(input.images.clone());
    let a = m.encode(&tape, &p, imgs).unwrap();
    let b = m.encode(&tape, &p, imgs).unwrap();
    assert_eq!(tape.shape(a.w), vec![8, 30]);
    let r = tape.value(a.r_diag.unwrap());
    assert_eq!(r.shape, vec![8, 30]);
    assert!(r.data.iter().all(|v| *v > 0.0));
    assert_eq!(tape.value(a.w).data, tape.value(b.w).data);

    let wrong = tape.constant(Tensor::zeros(&[2, 1, 20, 24]));
    assert!(m.encode(&tape, &p, wrong).is_err());
}

#[test]
fn transition_starts_near_identity_with_positive_noise() {
    let m = model(Arch::Drf);
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let mut r = rng(2);
    let z = tape.constant(support::rand_tensor(&mut r, &[3, 30], 1.0));
    let state = m.initial_state(&tape, 3).unwrap();
    let tr = m.transition(&tape, &p, z, state).unwrap();
    let f = tape.value(tr.transition);
    assert_eq!(f.shape, vec![3, 30, 30]);
    let mut worst_row = 0.0f64;
    for b in 0..3 {
        for i in 0..30 {
            let row: f64 = (0..30)
                .map(|j| {
                    let eye = if i == j { 1.0 } else { 0.0 };
                    (f.data[b * 900 + i * 30 + j] - eye).abs()
                })
                .sum();
            worst_row = worst_row.max(row);
        }
    }
    assert!(worst_row < 0.1, "||F - I||_inf = {worst_row}");
    assert!(tape.value(tr.q_diag).data.iter().all(|v| *v > 0.0));
}

#[test]
fn transition_varies_over_time() {
    let m = model(Arch::Drf);
    let s = seqs(2, 75);
    let input = SequenceInput::from_sequences(&s.iter().collect::<Vec<_>>()).unwrap();
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let out = m.forward(&tape, &p, &input, &mut DropoutMode::Off).unwrap();
    assert_eq!(out.transitions.len(), 74);
    let moved = out.transitions.windows(2).any(|w| {
        let (a, b) = (tape.value(w[0]), tape.value(w[1]));
        a.data.iter().zip(&b.data).any(|(x, y)| x != y)
    });
    assert!(moved);
}

#[test]
fn decoder_dropout_modes() {
    let m = model(Arch::Drf);
    let mut r = rng(9);
    let rows = support::rand_tensor(&mut r, &[4, 60], 1.0);
    let run = |mode: &mut DropoutMode| {
        let tape = Tape::inference();
        let p = m.bind_decoder(&tape);
        let x = tape.constant(rows.clone());
        let out = m.decode(&tape, &p, x, mode).unwrap();
        assert!(tape.value(out.sigma).data.iter().all(|v| *v > 0.0));
        tape.value(out.y).data.clone()
    };
    assert_eq!(run(&mut DropoutMode::Off), run(&mut DropoutMode::Off));
    let mut g = rng(10);
    let first = run(&mut DropoutMode::On(&mut g));
    let differs = (0..10).any(|_| run(&mut DropoutMode::On(&mut g)) != first);
    assert!(differs);
}

#[test]
fn every_arch_handles_one_step_and_emits_one_row_per_frame() {
    for arch in Arch::ALL {
        let m = model(arch);
        for steps in [1, 5] {
            let input = random_input(4, 3, steps);
            let (y, sigma) = outputs(&m, &input);
            assert_eq!(y.len(), steps * 3 * 2, "{arch}");
            assert!(sigma.iter().all(|v| *v > 0.0), "{arch}");
        }
    }
}

#[test]
fn single_step_filter_is_update_only() {
    let m = model(Arch::Drf);
    let input = random_input(5, 2, 1);
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let out = m.forward(&tape, &p, &input, &mut DropoutMode::Off).unwrap();
    assert!(out.transitions.is_empty());
    assert_eq!(out.steps.len(), 1);
}

fn reversed(s: &Sequence) -> Sequence {
    let mut r = s.clone();
    r.frames.reverse();
    r
}

#[test]
fn no_dynamics_is_frame_local_and_lstm_is_not() {
    let s = seqs(2, 6);
    let fwd: Vec<&Sequence> = s.iter().collect();
    let rev_owned: Vec<Sequence> = s.iter().map(reversed).collect();
    let rev: Vec<&Sequence> = rev_owned.iter().collect();
    let a = SequenceInput::from_sequences(&fwd).unwrap();
    let b = SequenceInput::from_sequences(&rev).unwrap();

    let (ya, _) = outputs(&model(Arch::NoDynamics), &a);
    let (yb, _) = outputs(&model(Arch::NoDynamics), &b);
    for t in 0..6 {
        for bi in 0..2 {
            let (i, j) = (a.row(t, bi), b.row(5 - t, bi));
            assert_eq!(ya[i * 2..i * 2 + 2], yb[j * 2..j * 2 + 2]);
        }
    }

    let (la, _) = outputs(&model(Arch::Lstm), &a);
    let (lb, _) = outputs(&model(Arch::Lstm), &b);
    let changed = (0..6).any(|t| {
        let (i, j) = (a.row(t, 0), b.row(5 - t, 0));
        la[i * 2..i * 2 + 2] != lb[j * 2..j * 2 + 2]
    });
    assert!(changed);
}

#[test]
fn temporal_stacks_are_comparable_in_size() {
    let drf = model(Arch::Drf).temporal_param_count() as f64;
    let lstm = model(Arch::Lstm).temporal_param_count() as f64;
    let ratio = drf.max(lstm) / drf.min(lstm);
    assert!(ratio <= 2.0, "drf {drf} lstm {lstm}");
    assert_eq!(model(Arch::NoDynamics).temporal_param_count(), 0);
}

#[test]
fn huge_observation_noise_follows_transition() {
    let m = model(Arch::Drf);
    let (batch, steps, d) = (2, 6, 30);
    let tape = Tape::inference();
    let p = m.bind(&tape);
    let mut r = rng(6);
    let w = tape.constant(support::rand_tensor(&mut r, &[batch * steps, d], 1.0));
    let huge = tape.constant(Tensor::filled(&[batch * steps, d], 1e9));
    let enc = EncoderOutput {
        w,
        r_diag: Some(huge),
    };
    let (records, transitions) = m.filter(&tape, &p, &enc, batch, steps).unwrap();
    for t in 1..steps {
        let f = tape.value(transitions[t - 1]);
        let prev = tape.value(records[t - 1].belief.mean);
        let cur = tape.value(records[t].belief.mean);
        for b in 0..batch {
            for i in 0..d {
                let pred: f64 = (0..d)
                    .map(|j| f.data[b * d * d + i * d + j] * prev.data[b * d + j])
                    .sum();
                let got = cur.data[b * d + i];
                assert!(
                    (got - pred).abs() <= 1e-3 * pred.abs().max(1e-3),
                    "t {t}: {got} vs {pred}"
                );
            }
        }
    }
}

#[test]
fn gradient_reaches_encoder_through_long_recursion() {
    let mut m = model(Arch::Drf);
    let s = seqs(2, 75);
    let input = SequenceInput::from_sequences(&s.iter().collect::<Vec<_>>()).unwrap();
    let tape = Tape::new();
    let p = m.bind(&tape);
    let out = m.forward(&tape, &p, &input, &mut DropoutMode::Off).unwrap();
    let loss = m.loss(&tape, &out, &input).unwrap();
    let grads = tape.backward(loss).unwrap();
    drop(p);
    grads.accumulate_into(&mut m.params);
    let conv = m.params.by_name("encoder.conv1.weight").unwrap();
    let norm: f64 = conv
        .tensor
        .grad
        .as_ref()
        .unwrap()
        .iter()
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    assert!(norm > 0.0 && norm.is_finite());
}

#[test]
fn end_to_end_gradient_small_filter() {
    let m = Model::new(tiny_config(4), 21).unwrap();
    let input = random_input(22, 2, 3);
    let err = model_gradcheck(&m, &input, 1e-5, None);
    assert!(err < 1e-4, "relative error {err:e}");
}

#[test]
fn forward_is_deterministic() {
    let m = model(Arch::Drf);
    let input = random_input(8, 2, 5);
    assert_eq!(outputs(&m, &input), outputs(&m, &input));
    let again = model(Arch::Drf);
    assert_eq!(outputs(&m, &input), outputs(&again, &input));
}
