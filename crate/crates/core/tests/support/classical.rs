//! Dense textbook Kalman filter used as an oracle.

use drf_core::kalman::{filter_step, init_belief, LatentBelief, Observation};
use drf_core::nn::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use super::rng;

pub type Mat = Vec<Vec<f64>>;

pub fn eye(d: usize) -> Mat {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| {
            (0..m)
                .map(|j| (0..k).map(|l| a[i][l] * b[l][j]).sum())
                .collect()
        })
        .collect()
}

pub fn tr(a: &Mat) -> Mat {
    (0..a[0].len())
        .map(|j| (0..a.len()).map(|i| a[i][j]).collect())
        .collect()
}

pub fn mv(a: &Mat, v: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|r| r.iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn inv(a: &Mat) -> Mat {
    let d = a.len();
    let mut m: Mat = a
        .iter()
        .zip(eye(d))
        .map(|(r, e)| [r.clone(), e].concat())
        .collect();
    for c in 0..d {
        let p = (c..d)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, p);
        let piv = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= piv);
        for r in 0..d {
            if r != c {
                let f = m[r][c];
                let row_c = m[c].clone();
                m[r].iter_mut().zip(&row_c).for_each(|(v, x)| *v -= f * x);
            }
        }
    }
    m.into_iter().map(|r| r[d..].to_vec()).collect()
}

pub fn sym(a: &Mat) -> Mat {
    let d = a.len();
    (0..d)
        .map(|i| (0..d).map(|j| 0.5 * (a[i][j] + a[j][i])).collect())
        .collect()
}

pub struct Classical {
    pub z: Vec<f64>,
    pub p: Mat,
}

impl Classical {
    /// Returns the gain.
    pub fn step(&mut self, f: &Mat, q: &[f64], r: &[f64], h: &Mat, w: &[f64]) -> Mat {
        let d = self.z.len();
        let z = mv(f, &self.z);
        let mut p = mm(&mm(f, &self.p), &tr(f));
        for i in 0..d {
            p[i][i] += q[i];
        }
        let p = sym(&p);
        let hz = mv(h, &z);
        let y: Vec<f64> = w.iter().zip(&hz).map(|(a, b)| a - b).collect();
        let mut s = mm(&mm(h, &p), &tr(h));
        for i in 0..d {
            s[i][i] += r[i];
        }
        let k = mm(&mm(&p, &tr(h)), &inv(&s));
        let ky = mv(&k, &y);
        self.z = z.iter().zip(&ky).map(|(a, b)| a + b).collect();
        let kh = mm(&k, h);
        let ikh: Mat = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { 1.0 } else { 0.0 } - kh[i][j])
                    .collect()
            })
            .collect();
        self.p = sym(&mm(&ikh, &p));
        k
    }
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn to_var(tape: &Tape, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(Tensor::new(shape, data).unwrap())
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn random_system(seed: u64, d: usize, identity_h: bool) -> (Mat, Mat, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let mut g = |s: f64| -> f64 { s * r.sample::<f64, _>(StandardNormal) };
    let f: Mat = (0..d)
        .map(|i| {
            (0..d)
                .map(|j| if i == j { 0.9 } else { 0.0 } + g(0.05))
                .collect()
        })
        .collect();
    let h = if identity_h {
        eye(d)
    } else {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { 1.0 } else { 0.0 } + g(0.3))
                    .collect()
            })
            .collect()
    };
    let mut r2 = rng(seed + 1000);
    let q: Vec<f64> = (0..d).map(|_| r2.random_range(0.01..0.2)).collect();
    let rv: Vec<f64> = (0..d).map(|_| r2.random_range(0.1..2.0)).collect();
    (f, h, q, rv)
}

/// Worst deviation of mean, covariance and gain from the classical filter
/// over a 100-step rollout of a random stable system.
pub fn run_against_oracle(seed: u64, d: usize, identity_h: bool) -> f64 {
    let (f, h, q, rv) = random_system(seed, d, identity_h);
    let mut r = rng(seed + 7);
    let mut x: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let mut worst = 0.0f64;

    let tape = Tape::inference();
    let fv = to_var(&tape, &[1, d, d], flat(&f));
    let qv = to_var(&tape, &[1, d], q.clone());
    let rvv = to_var(&tape, &[1, d], rv.clone());
    let obs = if identity_h {
        Observation::Identity
    } else {
        Observation::Matrix(to_var(&tape, &[1, d, d], flat(&h)))
    };

    let w0 = mv(&h, &x);
    let mut oracle = Classical {
        z: w0.clone(),
        p: eye(d),
    };
    let mut belief: LatentBelief = init_belief(&tape, to_var(&tape, &[1, d], w0)).unwrap();
    for step in 1..=100 {
        x = mv(&f, &x)
            .into_iter()
            .map(|v| v + 0.2 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let w: Vec<f64> = mv(&h, &x)
            .into_iter()
            .map(|v| v + 0.5 * r.sample::<f64, _>(StandardNormal))
            .collect();
        let k = oracle.step(&f, &q, &rv, &h, &w);
        let wv = to_var(&tape, &[1, d], w);
        let (post, params) = filter_step(&tape, &belief, wv, fv, qv, rvv, obs, step).unwrap();
        belief = post;
        worst = worst
            .max(max_diff(&tape.value(belief.mean).data, &oracle.z))
            .max(max_diff(&tape.value(belief.cov).data, &flat(&oracle.p)))
            .max(max_diff(&tape.value(params.gain).data, &flat(&k)));
    }
    worst
}
