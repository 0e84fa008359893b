//! Test-only oracles shared by integration tests.
#![allow(dead_code)]

pub mod classical;
pub mod grad_suite;

use drf_core::nn::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Relative error `|a - n| / max(|a|, |n|)` between analytic and numeric
/// gradient vectors (0 when both vanish).
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(n)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Central finite-difference gradient check.
///
/// `f` builds a scalar loss from the leaf variables on the given tape. The
/// analytic gradient comes from one backward pass; the numeric one from
/// `(f(x + h e_i) - f(x - h e_i)) / 2h` evaluated on fresh tapes. Returns
/// the worst relative error over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let l = f(&tape, &vs);
        tape.value(l).item()
    };

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let numeric: Vec<f64> = (0..t.len())
            .map(|i| {
                let mut xs = inputs.to_vec();
                xs[k].data[i] = t.data[i] + h;
                let fp = eval(&xs);
                xs[k].data[i] = t.data[i] - h;
                let fm = eval(&xs);
                (fp - fm) / (2.0 * h)
            })
            .collect();
        worst = worst.max(rel_err(&analytic[k], &numeric));
    }
    worst
}

/// Reduce any tensor to a scalar with a fixed random projection so every
/// output element carries a distinct weight.
pub fn project(tape: &Tape, y: Var, seed: u64) -> Var {
    let shape = tape.shape(y);
    let mut r = rng(seed ^ 0x9e37_79b9);
    let c = tape.constant(rand_tensor(&mut r, &shape, 1.0));
    let prod = tape.mul(y, c).unwrap();
    tape.sum(prod)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

/// Small recursive-filter model for end-to-end gradient checks.
pub fn tiny_config(latent_dim: usize) -> drf_core::model::ModelConfig {
    use drf_core::model::{Arch, ModelConfig, Widths};
    ModelConfig {
        latent_dim,
        widths: Widths {
            feature: 6,
            recurrent: 5,
            decoder: 5,
        },
        transition_init_gain: 0.5,
        ..ModelConfig::new(Arch::Drf)
    }
}

/// Random images in `[0, 1]` and targets on the unit circle.
pub fn random_input(seed: u64, batch: usize, steps: usize) -> drf_core::model::SequenceInput {
    let mut r = rng(seed);
    let n = batch * steps;
    let images = Tensor::new(
        &[n, 1, 24, 24],
        (0..n * 576).map(|_| r.random::<f64>()).collect(),
    )
    .unwrap();
    let targets = Tensor::new(
        &[n, 2],
        (0..n)
            .flat_map(|_| {
                let a: f64 = r.random_range(-3.0..3.0);
                [a.cos(), a.sin()]
            })
            .collect(),
    )
    .unwrap();
    drf_core::model::SequenceInput {
        images,
        targets,
        batch,
        steps,
    }
}

/// Central-difference check of the end-to-end training loss with respect
/// to every model parameter. With `coords = Some(k)` only `k` randomly
/// chosen parameter coordinates are perturbed. Returns the relative error
/// between the analytic and numeric gradient vectors.
pub fn model_gradcheck(
    model: &drf_core::model::Model,
    input: &drf_core::model::SequenceInput,
    h: f64,
    coords: Option<(usize, u64)>,
) -> f64 {
    use drf_core::model::DropoutMode;
    use drf_core::nn::layers::Bound;

    let loss_of = |tape: &Tape, vars: Vec<Var>| -> Var {
        let p = Bound::from_vars(vars);
        let out = model
            .forward(tape, &p, input, &mut DropoutMode::Off)
            .unwrap();
        model.loss(tape, &out, input).unwrap()
    };
    let base: Vec<Tensor> = model.params.iter().map(|p| p.tensor.clone()).collect();

    let tape = Tape::new();
    let vars: Vec<Var> = base
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = loss_of(&tape, vars.clone());
    let grads = tape.backward(loss).unwrap();

    let mut all: Vec<(usize, usize)> = base
        .iter()
        .enumerate()
        .flat_map(|(k, t)| (0..t.len()).map(move |i| (k, i)))
        .collect();
    if let Some((n, seed)) = coords {
        use rand::seq::SliceRandom;
        all.shuffle(&mut rng(seed));
        all.truncate(n);
    }
    let eval = |k: usize, i: usize, delta: f64| -> f64 {
        let mut xs = base.clone();
        xs[k].data[i] += delta;
        let tape = Tape::new();
        let vs: Vec<Var> = xs.into_iter().map(|t| tape.leaf(t)).collect();
        let l = loss_of(&tape, vs);
        tape.value(l).item()
    };
    let mut analytic = Vec::with_capacity(all.len());
    let mut numeric = Vec::with_capacity(all.len());
    for &(k, i) in &all {
        analytic.push(grads.wrt(vars[k]).map_or(0.0, |g| g[i]));
        numeric.push((eval(k, i, h) - eval(k, i, -h)) / (2.0 * h));
    }
    rel_err(&analytic, &numeric)
}
