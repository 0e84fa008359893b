//! Differentiable operations recorded on a [`Tape`].
//!
//! Batched matrices are `[B, m, n]`; 2-D inputs are treated as a batch of one.

use std::rc::Rc;

use rand::Rng;

use crate::error::{DrfError, Result};
use crate::nn::linalg::{cholesky_solve_in_place, cholesky_with_jitter, gemm};
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::par::for_each_chunk;

/// `(batch, rows, cols)` view of a rank-2 or rank-3 shape.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [m, n] => Some((1, m, n)),
        [b, m, n] => Some((b, m, n)),
        _ => None,
    }
}

fn out(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor {
        shape,
        data,
        grad: None,
        requires_grad: false,
    }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(DrfError::dim(op, &ta.shape, &tb.shape));
        }
        Ok((ta, tb))
    }

    // ---------------------------------------------------------------------
    // elementwise

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("add", a, b)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        Ok(self.push(
            out(ta.shape.clone(), data),
            &[a, b],
            Box::new(move |g, s| {
                s.add(a, g);
                s.add(b, g);
            }),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("sub", a, b)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        Ok(self.push(
            out(ta.shape.clone(), data),
            &[a, b],
            Box::new(move |g, s| {
                s.add(a, g);
                if let Some(gb) = s.slot(b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = self.same_shape("mul", a, b)?;
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        Ok(self.push(
            out(ta.shape.clone(), data),
            &[a, b],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = s.slot(b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += gi * ai;
                    }
                }
            }),
        ))
    }

    pub fn scale(&self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * k).collect();
        self.push(
            out(ta.shape.clone(), data),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }),
        )
    }

    pub fn add_scalar(&self, a: Var, k: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x + k).collect();
        self.push(
            out(ta.shape.clone(), data),
            &[a],
            Box::new(move |g, s| s.add(a, g)),
        )
    }

    fn unary<F, D>(&self, a: Var, f: F, df: D) -> Var
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let ta = self.value(a);
        let y: Vec<f64> = ta.data.iter().map(|&x| f(x)).collect();
        if !self.any_requires_grad(&[a]) {
            return self.push(out(ta.shape.clone(), y), &[a], Box::new(|_, _| {}));
        }
        let yv = Rc::new(y.clone());
        self.push(
            out(ta.shape.clone(), y),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * df(ta.data[i], yv[i]);
                    }
                }
            }),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// ELU with alpha = 1.
    pub fn elu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    /// `elu(x) + 1`, strictly positive for finite `x`.
    pub fn elu_plus_one(&self, a: Var) -> Var {
        let e = self.elu(a);
        self.add_scalar(e, 1.0)
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout<R: Rng + ?Sized>(
        &self,
        a: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(DrfError::Parameter(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let ta = self.value(a);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..ta.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let data = ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        Ok(self.push(
            out(ta.shape.clone(), data),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    for ((x, gi), m) in ga.iter_mut().zip(g).zip(&mask) {
                        *x += gi * m;
                    }
                }
            }),
        ))
    }

    /// Normalize the last dimension to zero mean and unit variance, then
    /// apply `gamma * x + beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-10;
        let tx = self.value(x);
        let n = *tx.shape.last().unwrap_or(&0);
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if n == 0 || tg.shape != [n] || tb.shape != [n] {
            return Err(DrfError::dim("layer_norm", &tx.shape, &tg.shape));
        }
        let rows = tx.len() / n;
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                y[r * n + j] = h * tg.data[j] + tb.data[j];
            }
        }
        Ok(self.push(
            out(tx.shape.clone(), y),
            &[x, gamma, beta],
            Box::new(move |g, s| {
                if let Some(gg) = s.slot(gamma) {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                }
                if let Some(gb) = s.slot(beta) {
                    for r in 0..rows {
                        for j in 0..n {
                            gb[j] += g[r * n + j];
                        }
                    }
                }
                if let Some(gx) = s.slot(x) {
                    let mut gh = vec![0.0; n];
                    for r in 0..rows {
                        let xr = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            gh[j] = g[r * n + j] * tg.data[j];
                            m1 += gh[j];
                            m2 += gh[j] * xr[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for j in 0..n {
                            gx[r * n + j] += inv_std[r] * (gh[j] - m1 - xr[j] * m2);
                        }
                    }
                }
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // dense layers

    /// `y = x W + b` for `x: [B, I]`, `W: [I, O]`, `b: [O]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (&[bs, i], &[wi, o]) = (tx.shape.as_slice(), tw.shape.as_slice()) else {
            return Err(DrfError::dim("linear", &tx.shape, &tw.shape));
        };
        if i != wi {
            return Err(DrfError::dim("linear", &tx.shape, &tw.shape));
        }
        if tb.shape != [o] {
            return Err(DrfError::dim("linear(bias)", &tw.shape, &tb.shape));
        }
        let mut y = Vec::with_capacity(bs * o);
        for _ in 0..bs {
            y.extend_from_slice(&tb.data);
        }
        gemm(bs, i, o, 1.0, &tx.data, false, &tw.data, false, 1.0, &mut y);
        Ok(self.push(
            out(vec![bs, o], y),
            &[x, w, b],
            Box::new(move |g, s| {
                if let Some(gx) = s.slot(x) {
                    gemm(bs, o, i, 1.0, g, false, &tw.data, true, 1.0, gx);
                }
                if let Some(gw) = s.slot(w) {
                    gemm(i, bs, o, 1.0, &tx.data, true, g, false, 1.0, gw);
                }
                if let Some(gb) = s.slot(b) {
                    for r in 0..bs {
                        for j in 0..o {
                            gb[j] += g[r * o + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Valid (unpadded) cross-correlation. `x: [N, C, H, W]`,
    /// `kernel: [O, C, K, K]`, optional `bias: [O]`.
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (tx.shape.as_slice(), tk.shape.as_slice()) else {
            return Err(DrfError::dim("conv2d", &tx.shape, &tk.shape));
        };
        if kc != c || kh != kw || kh > h || kw > w || stride == 0 {
            return Err(DrfError::dim("conv2d", &tx.shape, &tk.shape));
        }
        let tbias = match bias {
            Some(b) => {
                let tb = self.value(b);
                if tb.shape != [o] {
                    return Err(DrfError::dim("conv2d(bias)", &tk.shape, &tb.shape));
                }
                Some(tb)
            }
            None => None,
        };
        let k = kh;
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let ckk = c * k * k;
        let hw = ho * wo;
        // im2col per sample: [ckk, hw]
        let mut cols = vec![0.0; n * ckk * hw];
        let xd: &[f64] = &tx.data;
        for_each_chunk(self.exec, &mut cols, ckk * hw, |s, col| {
            let img = &xd[s * c * h * w..(s + 1) * c * h * w];
            for ci in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = (ci * k + ki) * k + kj;
                        for oy in 0..ho {
                            let iy = oy * stride + ki;
                            for ox in 0..wo {
                                let ix = ox * stride + kj;
                                col[row * hw + oy * wo + ox] = img[(ci * h + iy) * w + ix];
                            }
                        }
                    }
                }
            }
        });
        let mut y = vec![0.0; n * o * hw];
        let bias_data: Option<&[f64]> = tbias.as_ref().map(|t| t.data.as_slice());
        let kd: &[f64] = &tk.data;
        for_each_chunk(self.exec, &mut y, o * hw, |s, ys| {
            if let Some(bd) = bias_data {
                for oc in 0..o {
                    ys[oc * hw..(oc + 1) * hw].fill(bd[oc]);
                }
            }
            gemm(
                o,
                ckk,
                hw,
                1.0,
                kd,
                false,
                &cols[s * ckk * hw..],
                false,
                1.0,
                ys,
            );
        });
        let parents: Vec<Var> = [x, kernel].into_iter().chain(bias).collect();
        let cols = Rc::new(cols);
        Ok(self.push(
            out(vec![n, o, ho, wo], y),
            &parents,
            Box::new(move |g, s| {
                if let Some(gk) = s.slot(kernel) {
                    for smp in 0..n {
                        gemm(
                            o,
                            hw,
                            ckk,
                            1.0,
                            &g[smp * o * hw..],
                            false,
                            &cols[smp * ckk * hw..],
                            true,
                            1.0,
                            gk,
                        );
                    }
                }
                if let Some(b) = bias {
                    if let Some(gb) = s.slot(b) {
                        for smp in 0..n {
                            for oc in 0..o {
                                let base = (smp * o + oc) * hw;
                                gb[oc] += g[base..base + hw].iter().sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gx) = s.slot(x) {
                    let mut dcol = vec![0.0; ckk * hw];
                    for smp in 0..n {
                        gemm(
                            ckk,
                            o,
                            hw,
                            1.0,
                            &tk.data,
                            true,
                            &g[smp * o * hw..],
                            false,
                            0.0,
                            &mut dcol,
                        );
                        let gimg = &mut gx[smp * c * h * w..(smp + 1) * c * h * w];
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let row = (ci * k + ki) * k + kj;
                                    for oy in 0..ho {
                                        let iy = oy * stride + ki;
                                        for ox in 0..wo {
                                            let ix = ox * stride + kj;
                                            gimg[(ci * h + iy) * w + ix] +=
                                                dcol[row * hw + oy * wo + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // matrices

    /// Matrix product of rank-2 operands or batch-matched rank-3 operands.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) @ op(b)` where `ta`/`tb` transpose the last two axes.
    pub fn matmul_t(&self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let err = || DrfError::dim("matmul", &va.shape, &vb.shape);
        let (ba, ra, ca) = mat_dims(&va.shape).ok_or_else(err)?;
        let (bb, rb, cb) = mat_dims(&vb.shape).ok_or_else(err)?;
        if va.rank() != vb.rank() || ba != bb {
            return Err(err());
        }
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != k2 {
            return Err(err());
        }
        let batch = ba;
        let mut y = vec![0.0; batch * m * n];
        let (ad, bd): (&[f64], &[f64]) = (&va.data, &vb.data);
        for_each_chunk(self.exec, &mut y, m * n, |i, c| {
            gemm(
                m,
                k,
                n,
                1.0,
                &ad[i * m * k..],
                ta,
                &bd[i * k * n..],
                tb,
                0.0,
                c,
            );
        });
        let shape = if va.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let exec = self.exec;
        Ok(self.push(
            out(shape, y),
            &[a, b],
            Box::new(move |g, s| {
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G
                let (ad, bd): (&[f64], &[f64]) = (&va.data, &vb.data);
                if let Some(ga) = s.slot(a) {
                    for_each_chunk(exec, ga, m * k, |i, gai| {
                        let gi = &g[i * m * n..];
                        let bi = &bd[i * k * n..];
                        if ta {
                            // dA (k x m) = op(B) G^T
                            gemm(k, n, m, 1.0, bi, tb, gi, true, 1.0, gai);
                        } else {
                            gemm(m, n, k, 1.0, gi, false, bi, !tb, 1.0, gai);
                        }
                    });
                }
                if let Some(gb) = s.slot(b) {
                    for_each_chunk(exec, gb, k * n, |i, gbi| {
                        let gi = &g[i * m * n..];
                        let ai = &ad[i * m * k..];
                        if tb {
                            // dB (n x k) = G^T op(A)
                            gemm(n, m, k, 1.0, gi, true, ai, ta, 1.0, gbi);
                        } else {
                            gemm(k, m, n, 1.0, ai, !ta, gi, false, 1.0, gbi);
                        }
                    });
                }
            }),
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (batch, m, n) =
            mat_dims(&va.shape).ok_or_else(|| DrfError::dim("transpose", &va.shape, &[]))?;
        let tr = move |src: &[f64], dst: &mut [f64], rows: usize, cols: usize| {
            for bi in 0..batch {
                let (s, d) = (&src[bi * rows * cols..], &mut dst[bi * rows * cols..]);
                for i in 0..rows {
                    for j in 0..cols {
                        d[j * rows + i] += s[i * cols + j];
                    }
                }
            }
        };
        let mut y = vec![0.0; va.len()];
        tr(&va.data, &mut y, m, n);
        let mut shape = va.shape.clone();
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        Ok(self.push(
            out(shape, y),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    tr(g, ga, n, m);
                }
            }),
        ))
    }

    /// `(A + A^T) / 2` for square (batched) matrices.
    pub fn symmetrize(&self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (batch, m, n) = mat_dims(&va.shape)
            .filter(|(_, m, n)| m == n)
            .ok_or_else(|| DrfError::dim("symmetrize", &va.shape, &[]))?;
        let d = m;
        let sym = move |src: &[f64], dst: &mut [f64]| {
            for bi in 0..batch {
                let (s, t) = (&src[bi * d * d..], &mut dst[bi * d * d..]);
                for i in 0..d {
                    for j in 0..d {
                        t[i * d + j] += 0.5 * (s[i * d + j] + s[j * d + i]);
                    }
                }
            }
        };
        debug_assert_eq!(m, n);
        let mut y = vec![0.0; va.len()];
        sym(&va.data, &mut y);
        Ok(self.push(
            out(va.shape.clone(), y),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    sym(g, ga);
                }
            }),
        ))
    }

    /// Diagonal matrices from vectors: `[B, d] -> [B, d, d]`.
    pub fn diag_embed(&self, v: Var) -> Result<Var> {
        let tv = self.value(v);
        let &[batch, d] = tv.shape.as_slice() else {
            return Err(DrfError::dim("diag_embed", &tv.shape, &[]));
        };
        let mut y = vec![0.0; batch * d * d];
        for bi in 0..batch {
            for i in 0..d {
                y[bi * d * d + i * d + i] = tv.data[bi * d + i];
            }
        }
        Ok(self.push(
            out(vec![batch, d, d], y),
            &[v],
            Box::new(move |g, s| {
                if let Some(gv) = s.slot(v) {
                    for bi in 0..batch {
                        for i in 0..d {
                            gv[bi * d + i] += g[bi * d * d + i * d + i];
                        }
                    }
                }
            }),
        ))
    }

    /// Diagonals of batched square matrices: `[B, d, d] -> [B, d]`.
    pub fn diag(&self, m: Var) -> Result<Var> {
        let tm = self.value(m);
        let &[batch, d, d2] = tm.shape.as_slice() else {
            return Err(DrfError::dim("diag", &tm.shape, &[]));
        };
        if d != d2 {
            return Err(DrfError::dim("diag", &tm.shape, &[]));
        }
        let y = (0..batch)
            .flat_map(|bi| (0..d).map(move |i| (bi, i)))
            .map(|(bi, i)| tm.data[bi * d * d + i * d + i])
            .collect();
        Ok(self.push(
            out(vec![batch, d], y),
            &[m],
            Box::new(move |g, s| {
                if let Some(gm) = s.slot(m) {
                    for bi in 0..batch {
                        for i in 0..d {
                            gm[bi * d * d + i * d + i] += g[bi * d + i];
                        }
                    }
                }
            }),
        ))
    }

    /// `M + diag(v)` for `M: [B, d, d]`, `v: [B, d]`.
    pub fn add_diag(&self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (&[batch, d, _], &[vb, vd]) = (tm.shape.as_slice(), tv.shape.as_slice()) else {
            return Err(DrfError::dim("add_diag", &tm.shape, &tv.shape));
        };
        if vb != batch || vd != d || tm.shape[2] != d {
            return Err(DrfError::dim("add_diag", &tm.shape, &tv.shape));
        }
        let mut y = tm.data.clone();
        for bi in 0..batch {
            for i in 0..d {
                y[bi * d * d + i * d + i] += tv.data[bi * d + i];
            }
        }
        Ok(self.push(
            out(tm.shape.clone(), y),
            &[m, v],
            Box::new(move |g, s| {
                s.add(m, g);
                if let Some(gv) = s.slot(v) {
                    for bi in 0..batch {
                        for i in 0..d {
                            gv[bi * d + i] += g[bi * d * d + i * d + i];
                        }
                    }
                }
            }),
        ))
    }

    /// `M + k I` for square (batched) matrices.
    pub fn add_eye(&self, m: Var, k: f64) -> Result<Var> {
        let tm = self.value(m);
        let (batch, d, _) = mat_dims(&tm.shape)
            .filter(|(_, a, b)| a == b)
            .ok_or_else(|| DrfError::dim("add_eye", &tm.shape, &[]))?;
        let mut y = tm.data.clone();
        for bi in 0..batch {
            for i in 0..d {
                y[bi * d * d + i * d + i] += k;
            }
        }
        Ok(self.push(
            out(tm.shape.clone(), y),
            &[m],
            Box::new(move |g, s| s.add(m, g)),
        ))
    }

    /// Solve `A X = B` for symmetric positive-definite `A`.
    ///
    /// `A` is read through its symmetric part `(A + A^T)/2`. Shapes are
    /// `[d, d]`/`[d, n]` or `[B, d, d]`/`[B, d, n]`. If plain Cholesky fails a
    /// single diagonal jitter of `1e-6 * trace(A)/d` is tried before giving up.
    pub fn solve_spd(&self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let err = || DrfError::dim("solve_spd", &ta.shape, &tb.shape);
        let (batch, d, d2) = mat_dims(&ta.shape).ok_or_else(err)?;
        let (bb, rb, n) = mat_dims(&tb.shape).ok_or_else(err)?;
        if d != d2 || bb != batch || rb != d || ta.rank() != tb.rank() {
            return Err(err());
        }
        let scale = ta.data.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for bi in 0..batch {
            let asym = crate::nn::linalg::max_asymmetry(&ta.data[bi * d * d..(bi + 1) * d * d], d);
            if asym > 1e-8 * scale {
                return Err(DrfError::Domain(format!(
                    "solve_spd input not symmetric (max asymmetry {asym:e})"
                )));
            }
        }
        let mut factors = vec![0.0; batch * d * d];
        let mut x = tb.data.clone();
        let mut ok = true;
        for bi in 0..batch {
            let blk = &ta.data[bi * d * d..(bi + 1) * d * d];
            let mut sym = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    sym[i * d + j] = 0.5 * (blk[i * d + j] + blk[j * d + i]);
                }
            }
            match cholesky_with_jitter(&sym, d) {
                Some(l) => {
                    cholesky_solve_in_place(&l, d, &mut x[bi * d * n..(bi + 1) * d * n], n);
                    factors[bi * d * d..(bi + 1) * d * d].copy_from_slice(&l);
                }
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            return Err(DrfError::SingularMatrix { step: None });
        }
        let xv = Rc::new(x.clone());
        Ok(self.push(
            out(tb.shape.clone(), x),
            &[a, b],
            Box::new(move |g, s| {
                // gB = A^{-1} G ; gA = -sym(gB X^T)
                let mut gbv = g.to_vec();
                for bi in 0..batch {
                    cholesky_solve_in_place(
                        &factors[bi * d * d..(bi + 1) * d * d],
                        d,
                        &mut gbv[bi * d * n..(bi + 1) * d * n],
                        n,
                    );
                }
                if let Some(ga) = s.slot(a) {
                    let mut outer = vec![0.0; d * d];
                    for bi in 0..batch {
                        gemm(
                            d,
                            n,
                            d,
                            1.0,
                            &gbv[bi * d * n..],
                            false,
                            &xv[bi * d * n..],
                            true,
                            0.0,
                            &mut outer,
                        );
                        let gab = &mut ga[bi * d * d..(bi + 1) * d * d];
                        for i in 0..d {
                            for j in 0..d {
                                gab[i * d + j] -= 0.5 * (outer[i * d + j] + outer[j * d + i]);
                            }
                        }
                    }
                }
                s.add(b, &gbv);
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // shape plumbing

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().product::<usize>() != ta.len() {
            return Err(DrfError::dim("reshape", &ta.shape, shape));
        }
        Ok(self.push(
            out(shape.to_vec(), ta.data.clone()),
            &[a],
            Box::new(move |g, s| s.add(a, g)),
        ))
    }

    /// Rows `start..start+len` along the first axis.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let rows = *ta.shape.first().unwrap_or(&0);
        if start + len > rows {
            return Err(DrfError::dim("slice_rows", &ta.shape, &[start, len]));
        }
        let stride = ta.len() / rows.max(1);
        let data = ta.data[start * stride..(start + len) * stride].to_vec();
        let mut shape = ta.shape.clone();
        shape[0] = len;
        Ok(self.push(
            out(shape, data),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    for (x, y) in ga[start * stride..(start + len) * stride].iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }),
        ))
    }

    /// Concatenate along the first axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = vals.first() else {
            return Err(DrfError::dim("concat_rows", &[], &[]));
        };
        let tail = first.shape[1..].to_vec();
        let mut rows = 0;
        for v in &vals {
            if v.shape.is_empty() || v.shape[1..] != tail[..] {
                return Err(DrfError::dim("concat_rows", &first.shape, &v.shape));
            }
            rows += v.shape[0];
        }
        let mut data = Vec::with_capacity(vals.iter().map(|v| v.len()).sum());
        let mut offsets = Vec::with_capacity(vals.len());
        for v in &vals {
            offsets.push((data.len(), v.len()));
            data.extend_from_slice(&v.data);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let parts_v = parts.to_vec();
        Ok(self.push(
            out(shape, data),
            parts,
            Box::new(move |g, s| {
                for (p, &(off, len)) in parts_v.iter().zip(&offsets) {
                    s.add(*p, &g[off..off + len]);
                }
            }),
        ))
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let &[rows, cols] = ta.shape.as_slice() else {
            return Err(DrfError::dim("slice_cols", &ta.shape, &[start, len]));
        };
        if start + len > cols {
            return Err(DrfError::dim("slice_cols", &ta.shape, &[start, len]));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push(
            out(vec![rows, len], data),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }),
        ))
    }

    /// Concatenate rank-2 tensors along the last axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let Some(first) = vals.first() else {
            return Err(DrfError::dim("concat_cols", &[], &[]));
        };
        let rows = first.shape.first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(vals.len());
        for v in &vals {
            if v.rank() != 2 || v.shape[0] != rows {
                return Err(DrfError::dim("concat_cols", &first.shape, &v.shape));
            }
            widths.push(v.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &wd) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data[r * wd..(r + 1) * wd]);
            }
        }
        let parts_v = parts.to_vec();
        Ok(self.push(
            out(vec![rows, total], data),
            parts,
            Box::new(move |g, s| {
                let mut off = 0;
                for (p, &wd) in parts_v.iter().zip(&widths) {
                    if let Some(gp) = s.slot(*p) {
                        for r in 0..rows {
                            for j in 0..wd {
                                gp[r * wd + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += wd;
                }
            }),
        ))
    }

    // ---------------------------------------------------------------------
    // reductions and losses

    pub fn sum(&self, a: Var) -> Var {
        let total = self.value(a).data.iter().sum();
        self.push(
            out(vec![], vec![total]),
            &[a],
            Box::new(move |g, s| {
                if let Some(ga) = s.slot(a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }),
        )
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean Gaussian negative log-likelihood over all elements:
    /// `ln(sqrt(2 pi sigma^2)) + (y - y_hat)^2 / (2 sigma^2)`.
    pub fn gaussian_nll(&self, y_hat: Var, sigma: Var, y: Var) -> Result<Var> {
        let (th, ts) = self.same_shape("gaussian_nll", y_hat, sigma)?;
        let (_, ty) = self.same_shape("gaussian_nll", y_hat, y)?;
        if let Some(bad) = ts.data.iter().find(|v| !(**v > 0.0)) {
            return Err(DrfError::Domain(format!(
                "sigma must be positive, got {bad}"
            )));
        }
        let n = th.len() as f64;
        let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
        let mut total = 0.0;
        for i in 0..th.len() {
            let r = ty.data[i] - th.data[i];
            let sg = ts.data[i];
            total += sg.ln() + half_ln_2pi + r * r / (2.0 * sg * sg);
        }
        Ok(self.push(
            out(vec![], vec![total / n]),
            &[y_hat, sigma, y],
            Box::new(move |g, s| {
                let k = g[0] / n;
                let len = th.len();
                if let Some(gh) = s.slot(y_hat) {
                    for i in 0..len {
                        let sg = ts.data[i];
                        gh[i] -= k * (ty.data[i] - th.data[i]) / (sg * sg);
                    }
                }
                if let Some(gy) = s.slot(y) {
                    for i in 0..len {
                        let sg = ts.data[i];
                        gy[i] += k * (ty.data[i] - th.data[i]) / (sg * sg);
                    }
                }
                if let Some(gs) = s.slot(sigma) {
                    for i in 0..len {
                        let sg = ts.data[i];
                        let r = ty.data[i] - th.data[i];
                        gs[i] += k * (1.0 / sg - r * r / (sg * sg * sg));
                    }
                }
            }),
        ))
    }
}
