//! Finite-difference checks for every differentiable op.

use drf_core::nn::layers::{Bound, LstmCell, RecurrentCellState};
use drf_core::nn::{ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, project, rand_tensor, rng};

const H: f64 = 1e-5;

/// Worst relative error of one op over `n` random instances.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < self.tol
    }
}

fn check_op<S, F>(out: &mut Vec<OpCheck>, n: u64, name: &'static str, tol: f64, shapes: S, f: F)
where
    S: Fn(u64) -> Vec<(Vec<usize>, f64)>,
    F: Fn(&Tape, &[Var]) -> Var + Copy,
{
    let mut worst = 0.0f64;
    for seed in 0..n {
        let mut r = rng(seed);
        let inputs: Vec<Tensor> = shapes(seed)
            .iter()
            .map(|(s, scale)| rand_tensor(&mut r, s, *scale))
            .collect();
        let err = gradcheck(&inputs, H, |t, v| {
            let y = f(t, v);
            if t.shape(y).is_empty() {
                y
            } else {
                project(t, y, seed)
            }
        });
        worst = worst.max(err);
    }
    out.push(OpCheck { name, worst, tol });
}

pub fn linear_grad(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "linear",
        1e-6,
        |s| {
            let (b, i, o) = (
                1 + (s % 3) as usize,
                2 + (s % 4) as usize,
                1 + (s % 5) as usize,
            );
            vec![(vec![b, i], 1.0), (vec![i, o], 1.0), (vec![o], 1.0)]
        },
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
    );
}

pub fn conv2d_grad(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "conv2d",
        1e-6,
        |s| {
            let k = 2 + (s % 2) as usize;
            vec![
                (vec![2, 2, 6, 5], 1.0),
                (vec![3, 2, k, k], 1.0),
                (vec![3], 1.0),
            ]
        },
        |t, v| {
            let stride = 1 + (t.shape(v[1])[2] % 2);
            t.conv2d(v[0], v[1], Some(v[2]), stride).unwrap()
        },
    );
}

pub fn activation_grads(out: &mut Vec<OpCheck>, n: u64) {
    let shapes = |_| vec![(vec![3, 4], 2.0)];
    check_op(out, n, "relu", 1e-4, shapes, |t, v| t.relu(v[0]));
    check_op(out, n, "elu", 1e-4, shapes, |t, v| t.elu(v[0]));
    check_op(out, n, "elu_plus_one", 1e-4, shapes, |t, v| {
        t.elu_plus_one(v[0])
    });
    check_op(out, n, "tanh", 1e-4, shapes, |t, v| t.tanh(v[0]));
    check_op(out, n, "sigmoid", 1e-4, shapes, |t, v| t.sigmoid(v[0]));
    check_op(out, n, "scale", 1e-4, shapes, |t, v| t.scale(v[0], -1.7));
    check_op(out, n, "add_scalar", 1e-4, shapes, |t, v| {
        t.add_scalar(v[0], 0.3)
    });
}

pub fn dropout_grad_with_fixed_mask(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "dropout",
        1e-4,
        |_| vec![(vec![4, 5], 1.0)],
        |t, v| {
            // same seed on every evaluation keeps the mask fixed
            let mut r = ChaCha8Rng::seed_from_u64(77);
            t.dropout(v[0], 0.3, true, &mut r).unwrap()
        },
    );
}

pub fn layer_norm_grad(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "layer_norm",
        1e-4,
        |_| vec![(vec![3, 6], 1.0), (vec![6], 1.0), (vec![6], 1.0)],
        |t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

pub fn binary_elementwise_grads(out: &mut Vec<OpCheck>, n: u64) {
    let shapes = |_| vec![(vec![2, 3], 1.0), (vec![2, 3], 1.0)];
    check_op(out, n, "add", 1e-4, shapes, |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check_op(out, n, "sub", 1e-4, shapes, |t, v| {
        t.sub(v[0], v[1]).unwrap()
    });
    check_op(out, n, "mul", 1e-4, shapes, |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
}

pub fn matmul_grads(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "matmul 2d",
        1e-4,
        |_| vec![(vec![3, 4], 1.0), (vec![4, 2], 1.0)],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
    );
    check_op(
        out,
        n,
        "matmul batched",
        1e-4,
        |_| vec![(vec![2, 3, 4], 1.0), (vec![2, 4, 2], 1.0)],
        |t, v| t.matmul(v[0], v[1]).unwrap(),
    );
    check_op(
        out,
        n,
        "matmul transposed",
        1e-4,
        |_| vec![(vec![2, 4, 3], 1.0), (vec![2, 2, 4], 1.0)],
        |t, v| t.matmul_t(v[0], true, v[1], true).unwrap(),
    );
    check_op(
        out,
        n,
        "transpose",
        1e-4,
        |_| vec![(vec![2, 3, 4], 1.0)],
        |t, v| t.transpose(v[0]).unwrap(),
    );
}

pub fn matrix_structure_grads(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "diag_embed",
        1e-4,
        |_| vec![(vec![2, 3], 1.0)],
        |t, v| t.diag_embed(v[0]).unwrap(),
    );
    check_op(
        out,
        n,
        "diag",
        1e-4,
        |_| vec![(vec![2, 3, 3], 1.0)],
        |t, v| t.diag(v[0]).unwrap(),
    );
    check_op(
        out,
        n,
        "add_diag",
        1e-4,
        |_| vec![(vec![2, 3, 3], 1.0), (vec![2, 3], 1.0)],
        |t, v| t.add_diag(v[0], v[1]).unwrap(),
    );
    check_op(
        out,
        n,
        "add_eye",
        1e-4,
        |_| vec![(vec![2, 3, 3], 1.0)],
        |t, v| t.add_eye(v[0], 2.0).unwrap(),
    );
    check_op(
        out,
        n,
        "symmetrize",
        1e-4,
        |_| vec![(vec![2, 3, 3], 1.0)],
        |t, v| t.symmetrize(v[0]).unwrap(),
    );
}

pub fn solve_spd_grad(out: &mut Vec<OpCheck>, n: u64) {
    // A = M M^T + I keeps the input symmetric positive-definite under
    // perturbation of M.
    check_op(
        out,
        n,
        "solve_spd",
        1e-4,
        |s| {
            let d = 2 + (s % 4) as usize;
            vec![(vec![2, d, d], 1.0), (vec![2, d, 3], 1.0)]
        },
        |t, v| {
            let mm = t.matmul_t(v[0], false, v[0], true).unwrap();
            let a = t.add_eye(mm, 1.0).unwrap();
            t.solve_spd(a, v[1]).unwrap()
        },
    );
}

pub fn shape_op_grads(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "reshape",
        1e-4,
        |_| vec![(vec![2, 6], 1.0)],
        |t, v| t.reshape(v[0], &[3, 4]).unwrap(),
    );
    check_op(
        out,
        n,
        "slice_rows",
        1e-4,
        |_| vec![(vec![5, 2], 1.0)],
        |t, v| t.slice_rows(v[0], 1, 3).unwrap(),
    );
    check_op(
        out,
        n,
        "slice_cols",
        1e-4,
        |_| vec![(vec![3, 5], 1.0)],
        |t, v| t.slice_cols(v[0], 2, 2).unwrap(),
    );
    check_op(
        out,
        n,
        "concat_rows",
        1e-4,
        |_| vec![(vec![2, 3], 1.0), (vec![1, 3], 1.0)],
        |t, v| t.concat_rows(&[v[0], v[1], v[0]]).unwrap(),
    );
    check_op(
        out,
        n,
        "concat_cols",
        1e-4,
        |_| vec![(vec![2, 3], 1.0), (vec![2, 1], 1.0)],
        |t, v| t.concat_cols(&[v[0], v[1]]).unwrap(),
    );
}

pub fn reduction_grads(out: &mut Vec<OpCheck>, n: u64) {
    check_op(
        out,
        n,
        "sum",
        1e-4,
        |_| vec![(vec![3, 2], 1.0)],
        |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.sum(sq)
        },
    );
    check_op(
        out,
        n,
        "mean",
        1e-4,
        |_| vec![(vec![3, 2], 1.0)],
        |t, v| {
            let sq = t.mul(v[0], v[0]).unwrap();
            t.mean(sq)
        },
    );
    check_op(
        out,
        n,
        "gaussian_nll",
        1e-4,
        |_| vec![(vec![4, 2], 1.0), (vec![4, 2], 0.5), (vec![4, 2], 1.0)],
        |t, v| {
            // keep sigma away from zero
            let sigma = t.add_scalar(v[1], 1.0);
            t.gaussian_nll(v[0], sigma, v[2]).unwrap()
        },
    );
}

pub fn lstm_unrolled_five_steps(out: &mut Vec<OpCheck>, n: u64) {
    let mut worst = 0.0f64;
    for seed in 0..n {
        let mut store = ParamStore::new();
        let mut r = rng(seed);
        LstmCell::new(&mut store, "lstm", 3, 4, &mut r).unwrap();
        let inputs: Vec<Tensor> = std::iter::once(rand_tensor(&mut r, &[2, 5 * 3], 1.0))
            .chain(store.iter().map(|p| p.tensor.clone()))
            .collect();
        let err = gradcheck(&inputs, H, |t, v| {
            // same ids as `store`; values come from the leaves
            let mut st = ParamStore::new();
            let mut rr = rng(seed);
            let cell = LstmCell::new(&mut st, "lstm", 3, 4, &mut rr).unwrap();
            let bound = Bound::from_vars(v[1..].to_vec());
            let mut state = RecurrentCellState::zeros(t, 2, 4);
            let mut outs = Vec::new();
            for step in 0..5 {
                let x = t.slice_cols(v[0], step * 3, 3).unwrap();
                let (h, s) = cell.forward(t, &bound, x, state).unwrap();
                state = s;
                outs.push(h);
            }
            let all = t.concat_cols(&outs).unwrap();
            project(t, all, seed)
        });
        worst = worst.max(err);
    }
    out.push(OpCheck {
        name: "lstm unrolled",
        worst,
        tol: 1e-5,
    });
}

/// Every op group at `n` instances each.
pub fn op_suite(n: u64) -> Vec<OpCheck> {
    let mut out = Vec::new();
    linear_grad(&mut out, n);
    conv2d_grad(&mut out, n);
    activation_grads(&mut out, n);
    dropout_grad_with_fixed_mask(&mut out, n);
    layer_norm_grad(&mut out, n);
    binary_elementwise_grads(&mut out, n);
    matmul_grads(&mut out, n);
    matrix_structure_grads(&mut out, n);
    solve_spd_grad(&mut out, n);
    shape_op_grads(&mut out, n);
    reduction_grads(&mut out, n);
    lstm_unrolled_five_steps(&mut out, n);
    out
}
