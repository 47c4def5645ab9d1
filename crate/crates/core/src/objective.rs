//! Training objective: best-mode Laplace regression plus soft
//! cross-entropy over mode probabilities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, fabs, log, sqrt};

use crate::tensor::{Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Floor applied to probabilities before the logarithm.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossConfig {
    /// Normalize the likelihood targets across modes to sum to 1. When off,
    /// raw likelihoods are used as weights.
    pub normalize_targets: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { normalize_targets: true }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub regression: Var,
    pub classification: Var,
}

fn dims(mu: &[usize], gt: &[usize]) -> Result<(usize, usize, usize)> {
    if mu.len() != 4 || mu[3] != 2 || gt.len() != 3 || gt[0] != mu[0] || gt[1] != mu[2] || gt[2] != 2 {
        return Err(Error::Input(format!("prediction {mu:?} and ground truth {gt:?} are inconsistent")));
    }
    Ok((mu[0], mu[1], mu[2]))
}

/// Index of the mode with the smallest time-averaged l2 distance to the
/// ground truth, per sample, with its score. Ties go to the lowest index.
pub fn best_mode<T: Real>(mu: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<(usize, f64)>> {
    let (b, m, t) = dims(mu.shape(), gt.shape())?;
    let (mu, gt) = (mu.data(), gt.data());
    Ok((0..b)
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for k in 0..m {
                let mut s = 0.0;
                for j in 0..t {
                    let a = ((i * m + k) * t + j) * 2;
                    let g = (i * t + j) * 2;
                    let dx = mu[a].as_f64() - gt[g].as_f64();
                    let dy = mu[a + 1].as_f64() - gt[g + 1].as_f64();
                    s += sqrt(dx * dx + dy * dy);
                }
                let s = s / t as f64;
                if s < best.1 {
                    best = (k, s);
                }
            }
            best
        })
        .collect())
}

/// Per-axis Laplace negative log-likelihood of the best mode, averaged over
/// time and batch. `mu`, `b`: `[B, M, T, 2]`; `gt`: `[B, T, 2]`.
pub fn regression_loss<T: Real>(tape: &mut Tape<T>, mu: Var, b: Var, gt: Var, best: &[usize]) -> Result<Var> {
    let (bs, m, _) = dims(tape.shape(mu), tape.shape(gt))?;
    if best.len() != bs || best.iter().any(|&k| k >= m) || tape.shape(b) != tape.shape(mu) {
        return Err(Error::Input("best-mode indices or scale shape inconsistent with prediction".into()));
    }
    let mut select = Tensor::zeros(&[bs, m, 1, 1]);
    for (i, &k) in best.iter().enumerate() {
        select.set(&[i, k, 0, 0], T::one());
    }
    let select = tape.constant(select);
    let pick = |tape: &mut Tape<T>, v: Var| -> Result<Var> {
        let masked = tape.mul(v, select)?;
        Ok(tape.sum_axis(masked, 1, false)?)
    };
    let mu_k = pick(tape, mu)?;
    let b_k = pick(tape, b)?;
    let two_b = tape.scale(b_k, T::of(2.0))?;
    let log_term = tape.log(two_b)?;
    let err = tape.sub(gt, mu_k)?;
    let err = tape.abs(err)?;
    let ratio = tape.div(err, b_k)?;
    let nll = tape.add(log_term, ratio)?;
    let per_step = tape.sum_axis(nll, 2, false)?;
    Ok(tape.mean(per_step)?)
}

/// Log-likelihood of the final ground-truth point under each mode's final
/// Laplace, from detached values, `[B][M]`.
pub fn endpoint_log_likelihood<T: Real>(mu: &Tensor<T>, b: &Tensor<T>, gt: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let (bs, m, t) = dims(mu.shape(), gt.shape())?;
    Ok((0..bs)
        .map(|i| {
            (0..m)
                .map(|k| {
                    let a = ((i * m + k) * t + t - 1) * 2;
                    let g = (i * t + t - 1) * 2;
                    (0..2)
                        .map(|c| {
                            let s = b.data()[a + c].as_f64();
                            -(log(2.0 * s) + fabs(gt.data()[g + c].as_f64() - mu.data()[a + c].as_f64()) / s)
                        })
                        .sum()
                })
                .collect()
        })
        .collect())
}

/// Likelihood weights per mode: a softmax of the log-likelihoods when
/// normalized, the raw likelihoods otherwise.
pub fn target_weights(log_lik: &[f64], normalize: bool) -> Vec<f64> {
    if normalize {
        let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = log_lik.iter().map(|l| exp(l - max)).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    } else {
        log_lik.iter().map(|&l| exp(l)).collect()
    }
}

/// `-(1/M) Σ_k w(k) log π(k)` averaged over the batch, with targets `w`
/// computed from detached `mu`, `b` so no gradient reaches them.
pub fn classification_loss<T: Real>(tape: &mut Tape<T>, pi: Var, mu: Var, b: Var, gt: Var, cfg: &LossConfig) -> Result<Var> {
    let (bs, m, _) = dims(tape.shape(mu), tape.shape(gt))?;
    if tape.shape(pi) != [bs, m] {
        return Err(Error::Input(format!("probabilities {:?} do not match {bs} x {m}", tape.shape(pi))));
    }
    let log_lik = endpoint_log_likelihood(tape.value(mu), tape.value(b), tape.value(gt))?;
    let mut weights = vec![T::zero(); bs * m];
    let mut clamped = 0;
    for (i, ll) in log_lik.iter().enumerate() {
        for (k, w) in target_weights(ll, cfg.normalize_targets).into_iter().enumerate() {
            weights[i * m + k] = T::of(w);
            if w > 0.0 && tape.value(pi).data()[i * m + k].as_f64() < PROB_EPSILON {
                clamped += 1;
            }
        }
    }
    tape.diagnostics_mut().log_prob_clamps += clamped;
    let w = tape.constant(Tensor::from_vec(vec![bs, m], weights)?);
    let p = tape.clamp(pi, T::of(PROB_EPSILON), T::one())?;
    let lp = tape.log(p)?;
    let wl = tape.mul(lp, w)?;
    let s = tape.mean(wl)?;
    Ok(tape.neg(s)?)
}

/// `L_reg + L_cls` with best-mode selection from detached values.
pub fn total_loss<T: Real>(tape: &mut Tape<T>, mu: Var, b: Var, pi: Var, gt: Var, cfg: &LossConfig) -> Result<LossTerms> {
    let best: Vec<usize> = best_mode(tape.value(mu), tape.value(gt))?.into_iter().map(|(k, _)| k).collect();
    let regression = regression_loss(tape, mu, b, gt, &best)?;
    let classification = classification_loss(tape, pi, mu, b, gt, cfg)?;
    let total = tape.add(regression, classification)?;
    Ok(LossTerms { total, regression, classification })
}
