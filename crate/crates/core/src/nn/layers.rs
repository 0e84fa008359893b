//! Parameterized layers. Each layer owns `ParamId`s into a shared
//! [`ParamStore`] and reads their tape variables through a [`Bound`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::{ParamId, ParamStore, Tensor};

/// Tape variables for every parameter of a store, recorded once per forward.
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn new(tape: &Tape, store: &ParamStore) -> Self {
        Self::with_prefix(tape, store, "")
    }

    /// Record only the parameters whose name starts with `prefix`.
    pub fn with_prefix(tape: &Tape, store: &ParamStore, prefix: &str) -> Self {
        let vars = store
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.name
                    .starts_with(prefix)
                    .then(|| tape.param(store, ParamId(i)))
            })
            .collect();
        Bound { vars }
    }

    /// Bind parameter ids to arbitrary variables, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound {
            vars: vars.into_iter().map(Some).collect(),
        }
    }

    /// Panics if the parameter was not bound.
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0].unwrap_or_else(|| panic!("parameter {} not bound on this tape", id.0))
    }
}

fn glorot<R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    n: usize,
    gain: f64,
) -> Vec<f64> {
    let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

/// Square orthogonal matrix from modified Gram-Schmidt on a Gaussian draw.
pub fn orthogonal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let dot: f64 = done[k].iter().zip(&rest[0]).map(|(a, b)| a * b).sum();
            rest[0]
                .iter_mut()
                .zip(&done[k])
                .for_each(|(v, q)| *v -= dot * q);
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    // row-major matrix whose columns are the orthonormal vectors
    let mut m = vec![0.0; n * n];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..n {
            m[i * n + j] = c[i];
        }
    }
    m
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_gain(store, name, in_dim, out_dim, 1.0, rng)
    }

    /// Glorot-uniform weights scaled by `gain`; zero bias.
    pub fn with_gain<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = glorot(rng, in_dim, out_dim, in_dim * out_dim, gain);
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(&[in_dim, out_dim], w)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.get(self.weight), p.get(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = out_ch * in_ch * k * k;
        let w = glorot(rng, in_ch * k * k, out_ch * k * k, n, 1.0);
        let kernel = store.add(
            format!("{name}.weight"),
            Tensor::new(&[out_ch, in_ch, k, k], w)?,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?;
        Ok(Conv2d {
            kernel,
            bias,
            stride,
        })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.kernel), Some(p.get(self.bias)), self.stride)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta))
    }
}

/// Hidden and cell state of one recurrent layer, `[B, H]` each.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentCellState {
    pub hidden: Var,
    pub cell: Var,
}

impl RecurrentCellState {
    pub fn zeros(tape: &Tape, batch: usize, hidden: usize) -> Self {
        RecurrentCellState {
            hidden: tape.constant(Tensor::zeros(&[batch, hidden])),
            cell: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// LSTM cell with gate order (input, forget, candidate, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let h = hidden_dim;
        let wx = glorot(rng, input_dim, 4 * h, input_dim * 4 * h, 1.0);
        let mut wh = vec![0.0; h * 4 * h];
        for gate in 0..4 {
            let q = orthogonal(rng, h);
            for i in 0..h {
                for j in 0..h {
                    wh[i * 4 * h + gate * h + j] = q[i * h + j];
                }
            }
        }
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].fill(1.0);
        let w_input = store.add(
            format!("{name}.w_input"),
            Tensor::new(&[input_dim, 4 * h], wx)?,
        )?;
        let w_hidden = store.add(format!("{name}.w_hidden"), Tensor::new(&[h, 4 * h], wh)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::new(&[4 * h], b)?)?;
        Ok(LstmCell {
            w_input,
            w_hidden,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    /// One recurrent step; returns the new hidden output and state.
    pub fn forward(
        &self,
        tape: &Tape,
        p: &Bound,
        x: Var,
        state: RecurrentCellState,
    ) -> Result<(Var, RecurrentCellState)> {
        let h = self.hidden_dim;
        let hs = tape.shape(state.hidden);
        let cs = tape.shape(state.cell);
        if hs != cs || hs.get(1) != Some(&h) {
            return Err(crate::error::DrfError::dim("lstm_cell", &hs, &cs));
        }
        let gx = tape.linear(x, p.get(self.w_input), p.get(self.bias))?;
        let gh = tape.matmul(state.hidden, p.get(self.w_hidden))?;
        let gates = tape.add(gx, gh)?;
        let i = tape.sigmoid(tape.slice_cols(gates, 0, h)?);
        let f = tape.sigmoid(tape.slice_cols(gates, h, h)?);
        let g = tape.tanh(tape.slice_cols(gates, 2 * h, h)?);
        let o = tape.sigmoid(tape.slice_cols(gates, 3 * h, h)?);
        let keep = tape.mul(f, state.cell)?;
        let write = tape.mul(i, g)?;
        let cell = tape.add(keep, write)?;
        let hidden = tape.mul(o, tape.tanh(cell))?;
        Ok((hidden, RecurrentCellState { hidden, cell }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 16;
        let q = orthogonal(&mut rng, n);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[k * n + i] * q[k * n + j]).sum();
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lstm_gives_zero_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        for p in store.iter_mut() {
            p.tensor.data.fill(0.0);
        }
        let tape = Tape::new();
        let b = Bound::new(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let st = RecurrentCellState::zeros(&tape, 2, 4);
        let (h, st2) = cell.forward(&tape, &b, x, st).unwrap();
        assert!(tape.value(h).data.iter().all(|v| *v == 0.0));
        assert!(tape.value(st2.cell).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_rejects_bad_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = LstmCell::new(&mut store, "lstm", 3, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let b = Bound::new(&tape, &store);
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let st = RecurrentCellState::zeros(&tape, 2, 5);
        assert!(cell.forward(&tape, &b, x, st).is_err());
    }
}
