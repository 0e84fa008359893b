//! Differentiable Kalman predict/update over batched latent beliefs.
//!
//! Means are `[B, d]`, covariances `[B, d, d]`. Diagonal noise
//! covariances are passed as their diagonals `[B, d]`.

use crate::error::{DrfError, Result};
use crate::nn::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct LatentBelief {
    pub mean: Var,
    pub cov: Var,
}

/// Observation matrix of the update step.
#[derive(Debug, Clone, Copy)]
pub enum Observation {
    Identity,
    Matrix(Var),
}

/// Learned matrices of one filter step plus the quantities the update
/// computes from them.
#[derive(Debug, Clone, Copy)]
pub struct StepFilterParams {
    pub transition: Var,
    pub process_noise: Var,
    pub obs_noise: Var,
    pub observation: Observation,
    pub gain: Var,
    pub innovation: Var,
    pub innovation_cov: Var,
}

/// Outputs of [`update`] besides the posterior.
#[derive(Debug, Clone, Copy)]
pub struct UpdateTerms {
    pub gain: Var,
    pub innovation: Var,
    pub innovation_cov: Var,
}

fn mat_vec(tape: &Tape, m: Var, v: Var) -> Result<Var> {
    let s = tape.shape(v);
    let col = tape.reshape(v, &[s[0], s[1], 1])?;
    let y = tape.matmul(m, col)?;
    tape.reshape(y, &s)
}

fn check_belief(tape: &Tape, b: &LatentBelief) -> Result<(usize, usize)> {
    let ms = tape.shape(b.mean);
    let cs = tape.shape(b.cov);
    match (ms.as_slice(), cs.as_slice()) {
        (&[bm, d], &[bc, r, c]) if bm == bc && r == d && c == d => Ok((bm, d)),
        _ => Err(DrfError::dim("belief", &ms, &cs)),
    }
}

fn check_shape(tape: &Tape, op: &'static str, v: Var, want: &[usize]) -> Result<()> {
    let s = tape.shape(v);
    if s != want {
        return Err(DrfError::dim(op, &s, want));
    }
    Ok(())
}

/// `z0 = w0`, `P0 = I`.
pub fn init_belief(tape: &Tape, w0: Var) -> Result<LatentBelief> {
    let s = tape.shape(w0);
    let &[batch, d] = s.as_slice() else {
        return Err(DrfError::dim("init_belief", &s, &[]));
    };
    Ok(LatentBelief {
        mean: w0,
        cov: tape.constant(Tensor::eye(d, Some(batch))),
    })
}

/// `z' = F z`, `P' = sym(F P F^T + diag(q))`.
pub fn predict(
    tape: &Tape,
    prior: &LatentBelief,
    transition: Var,
    process_noise: Var,
) -> Result<LatentBelief> {
    let (b, d) = check_belief(tape, prior)?;
    check_shape(tape, "predict.transition", transition, &[b, d, d])?;
    check_shape(tape, "predict.process_noise", process_noise, &[b, d])?;
    let mean = mat_vec(tape, transition, prior.mean)?;
    let fp = tape.matmul(transition, prior.cov)?;
    let fpf = tape.matmul_t(fp, false, transition, true)?;
    let cov = tape.symmetrize(tape.add_diag(fpf, process_noise)?)?;
    Ok(LatentBelief { mean, cov })
}

/// Measurement update with embedding `w` and diagonal noise `obs_noise`.
///
/// The gain is formed as `K^T = S^{-1} (H P')` through an SPD solve; the
/// posterior covariance is `sym(P' - K H P')`. `step` tags a singular
/// innovation covariance in the returned error.
pub fn update(
    tape: &Tape,
    pred: &LatentBelief,
    w: Var,
    obs_noise: Var,
    observation: Observation,
    step: usize,
) -> Result<(LatentBelief, UpdateTerms)> {
    let (b, d) = check_belief(tape, pred)?;
    check_shape(tape, "update.observation", w, &[b, d])?;
    check_shape(tape, "update.obs_noise", obs_noise, &[b, d])?;
    // hp = H P', hz = H z'
    let (hp, hz, hph) = match observation {
        Observation::Identity => (pred.cov, pred.mean, pred.cov),
        Observation::Matrix(h) => {
            check_shape(tape, "update.h", h, &[b, d, d])?;
            let hp = tape.matmul(h, pred.cov)?;
            let hph = tape.matmul_t(hp, false, h, true)?;
            (hp, mat_vec(tape, h, pred.mean)?, hph)
        }
    };
    let innovation = tape.sub(w, hz)?;
    let innovation_cov = tape.symmetrize(tape.add_diag(hph, obs_noise)?)?;
    let gain_t = tape
        .solve_spd(innovation_cov, hp)
        .map_err(|e| e.at_step(step))?;
    let gain = tape.transpose(gain_t)?;
    let mean = tape.add(pred.mean, mat_vec(tape, gain, innovation)?)?;
    let khp = tape.matmul(gain, hp)?;
    let cov = tape.symmetrize(tape.sub(pred.cov, khp)?)?;
    Ok((
        LatentBelief { mean, cov },
        UpdateTerms {
            gain,
            innovation,
            innovation_cov,
        },
    ))
}

/// Predict then update; bundles everything into [`StepFilterParams`].
#[allow(clippy::too_many_arguments)]
pub fn filter_step(
    tape: &Tape,
    prior: &LatentBelief,
    w: Var,
    transition: Var,
    process_noise: Var,
    obs_noise: Var,
    observation: Observation,
    step: usize,
) -> Result<(LatentBelief, StepFilterParams)> {
    let pred = predict(tape, prior, transition, process_noise)?;
    let (post, t) = update(tape, &pred, w, obs_noise, observation, step)?;
    Ok((
        post,
        StepFilterParams {
            transition,
            process_noise,
            obs_noise,
            observation,
            gain: t.gain,
            innovation: t.innovation,
            innovation_cov: t.innovation_cov,
        },
    ))
}

/// Per-sample `trace(K) / d` of a batched gain `[B, d, d]`.
pub fn gain_trace_ratio(gain: &Tensor) -> Vec<f64> {
    let (b, d) = (gain.shape[0], gain.shape[1]);
    (0..b)
        .map(|i| {
            (0..d)
                .map(|j| gain.data[i * d * d + j * d + j])
                .sum::<f64>()
                / d as f64
        })
        .collect()
}
