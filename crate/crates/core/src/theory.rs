//! Closed-form bounds: honest-majority budget, evasion and perturbation
//! bounds, momentum smoothing and the non-convex momentum-SGD constants.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::StageParams;
use crate::numerics::{self, SimRng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub b_max: f64,
    /// The closed form was negative and has been clamped to zero.
    pub vacuous: bool,
}

/// `dp/2 - p sqrt((d/2) ln(p/eps))`, clamped at zero. The log term is taken
/// as zero once `eps >= p`.
pub fn honest_majority_budget(d: usize, p: usize, eps: f64) -> Result<Budget> {
    if d == 0 || p == 0 || !(eps > 0.0) {
        return Err(Error::InvalidParameter("budget needs d, p >= 1 and eps > 0"));
    }
    let (d, p) = (d as f64, p as f64);
    let log = libm::log(p / eps).max(0.0);
    let b = d * p / 2.0 - p * libm::sqrt(d / 2.0 * log);
    Ok(if b < 0.0 { Budget { b_max: 0.0, vacuous: true } } else { Budget { b_max: b, vacuous: false } })
}

/// Fraction of `trials` uniform placements of `b` malicious workers over a
/// `p x d` grid in which some stage holds at least `d/2` of them.
pub fn monte_carlo_majority(d: usize, p: usize, b: usize, trials: usize, rng: &mut SimRng) -> Result<f64> {
    if d == 0 || p == 0 || trials == 0 {
        return Err(Error::InvalidParameter("monte carlo needs d, p, trials >= 1"));
    }
    let n = d * p;
    if b > n {
        return Err(Error::InvalidParameter("more malicious workers than slots"));
    }
    let mut failures = 0usize;
    let mut counts = alloc::vec![0usize; p];
    for _ in 0..trials {
        counts.iter_mut().for_each(|c| *c = 0);
        for slot in rng.sample_indices(n, b) {
            counts[slot / d] += 1;
        }
        if counts.iter().any(|&c| 2 * c >= d) {
            failures += 1;
        }
    }
    Ok(failures as f64 / trials as f64)
}

/// Largest perturbation that stays under the threshold: `tau / (L_omega (1 + gamma))`.
pub fn evasion_bound(tau: f64, l_omega: f64, gamma: f64) -> Result<f64> {
    if !(l_omega > 0.0) {
        return Err(Error::InvalidParameter("L_omega must be positive"));
    }
    if !(tau >= 0.0) || !(gamma >= 0.0) {
        return Err(Error::InvalidParameter("tau and gamma must be non-negative"));
    }
    Ok(tau / (l_omega * (1.0 + gamma)))
}

/// `G_s = L_theta^(s) * prod_{j > s} L_f^(j)`
pub fn amplification_factor(l_theta: f64, l_f_downstream: &[f64]) -> Result<f64> {
    if !(l_theta > 0.0) || l_f_downstream.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidParameter("Lipschitz constants must be positive"));
    }
    Ok(l_f_downstream.iter().fold(l_theta, |acc, l| acc * l))
}

/// `gamma * G_s * evasion_bound(tau, L_omega, gamma)`
pub fn gradient_perturbation_bound(gamma: f64, g_s: f64, tau: f64, l_omega: f64) -> Result<f64> {
    Ok(gamma * g_s * evasion_bound(tau, l_omega, gamma)?)
}

/// `gamma * eps`, or `(1 - beta) gamma eps` for the change within one step.
pub fn momentum_deviation_bound(gamma: f64, eps: f64, single_step: bool, beta: f64) -> f64 {
    let cumulative = gamma * eps;
    if single_step {
        (1.0 - beta) * cumulative
    } else {
        cumulative
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConstants {
    pub eta: f64,
    pub beta: f64,
    pub l_smooth: f64,
    pub c_lyap: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    /// Clamp `1 - beta - beta / (4 eps3)` in `C2` at zero.
    pub c2_abs_inner: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceConstants {
    pub alpha: f64,
    pub c1: f64,
    pub c2: f64,
    pub d: f64,
    pub alpha_positive: bool,
    pub c1_negative: bool,
}

/// `beta / x` with the `beta = 0` case read as zero, so that `eps -> 0+`
/// is usable when there is no momentum.
fn beta_over(beta: f64, x: f64) -> f64 {
    if beta == 0.0 {
        0.0
    } else {
        beta / x
    }
}

pub fn convergence_constants(k: &OptimizerConstants) -> Result<ConvergenceConstants> {
    let OptimizerConstants { eta, beta, l_smooth, c_lyap: c, eps1, eps2, eps3, c2_abs_inner } = *k;
    if !(eta > 0.0) || !(0.0..1.0).contains(&beta) || !(l_smooth >= 0.0) || !(c >= 0.0) {
        return Err(Error::InvalidParameter("optimizer constants out of range"));
    }
    if !(eps2 > 0.0) || !(eps1 >= 0.0) || !(eps3 >= 0.0) {
        return Err(Error::InvalidParameter("epsilon constants out of range"));
    }
    let q = eta * eta * l_smooth / 2.0 + c;
    let alpha = eta
        * (1.0 - beta)
        * (1.0
            - eps2
            - beta_over(beta, 4.0 * eps1 * (1.0 - beta))
            - 2.0 / eta * q * (1.0 - beta + beta_over(beta, 4.0 * eps1)));
    let c1 = eta * beta * eps1 + q * beta * (beta + 2.0 * (1.0 - beta) * (eps1 + eps3)) - c;
    let mut inner = 1.0 - beta - beta_over(beta, 4.0 * eps3);
    if c2_abs_inner {
        inner = inner.max(0.0);
    }
    let c2 = eta * (1.0 - beta) / (4.0 * eps2) + 2.0 * q * (1.0 - beta) * inner;
    let d = q * (1.0 - beta) * (1.0 - beta);
    Ok(ConvergenceConstants { alpha, c1, c2, d, alpha_positive: alpha > 0.0, c1_negative: c1 < 0.0 })
}

/// `(L0 - L*) / (alpha T) + (C2 zeta^2 + D sigma^2) / alpha`
pub fn convergence_bound(
    k: &ConvergenceConstants,
    zeta: f64,
    sigma: f64,
    loss0: f64,
    loss_star: f64,
    horizon: u64,
) -> Result<f64> {
    if !(k.alpha > 0.0) {
        return Err(Error::InfeasibleConstants);
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be positive"));
    }
    Ok((loss0 - loss_star) / (k.alpha * horizon as f64) + (k.c2 * zeta * zeta + k.d * sigma * sigma) / k.alpha)
}

const LIPSCHITZ_SAMPLES: usize = 100;
const POWER_STEPS: usize = 20;

/// `1 - tanh(z)^2` per output unit for the row input `x`, or ones for an
/// identity stage.
fn slopes(st: &StageParams, x: &[f64]) -> Result<Vec<f64>> {
    let row = Matrix::from_vec(1, x.len(), x.to_vec())?;
    let mut z = row.matmul(&st.weights)?.into_vec();
    for (v, b) in z.iter_mut().zip(&st.bias) {
        *v += b;
    }
    Ok(match st.activation {
        crate::model::Activation::Tanh => z
            .iter()
            .map(|v| {
                let a = libm::tanh(*v);
                1.0 - a * a
            })
            .collect(),
        crate::model::Activation::Identity => alloc::vec![1.0; z.len()],
    })
}

/// Largest input-Jacobian spectral norm of a stage over random Gaussian
/// inputs scaled by `input_scale`, by power iteration.
pub fn estimate_input_lipschitz(st: &StageParams, input_scale: f64, rng: &mut SimRng) -> Result<f64> {
    let (n_in, n_out) = (st.input_dim(), st.output_dim());
    let w = &st.weights;
    let mut best = 0.0_f64;
    for _ in 0..LIPSCHITZ_SAMPLES {
        let x: Vec<f64> = rng.normal_vec(n_in).into_iter().map(|v| v * input_scale).collect();
        let dz = slopes(st, &x)?;
        let mut v = rng.unit_vector(n_in);
        let mut sigma = 0.0;
        for _ in 0..POWER_STEPS {
            // J v = (v W) * dz, then J^T u = (u * dz) W^T.
            let mut u = alloc::vec![0.0; n_out];
            for (i, vi) in v.iter().enumerate() {
                for (j, uj) in u.iter_mut().enumerate() {
                    *uj += vi * w.get(i, j);
                }
            }
            u.iter_mut().zip(&dz).for_each(|(a, b)| *a *= b);
            sigma = numerics::norm(&u);
            let mut back = alloc::vec![0.0; n_in];
            for (i, bi) in back.iter_mut().enumerate() {
                *bi = (0..n_out).map(|j| u[j] * dz[j] * w.get(i, j)).sum();
            }
            let n = numerics::norm(&back);
            if n < 1e-300 {
                break;
            }
            v = back.into_iter().map(|b| b / n).collect();
        }
        best = best.max(sigma);
    }
    Ok(best)
}

/// Largest parameter-Jacobian norm of a stage over the same kind of samples.
/// For `f = act(x W + b)` it is `sqrt(||x||^2 + 1) * max |act'|`.
pub fn estimate_param_lipschitz(st: &StageParams, input_scale: f64, rng: &mut SimRng) -> Result<f64> {
    let mut best = 0.0_f64;
    for _ in 0..LIPSCHITZ_SAMPLES {
        let x: Vec<f64> = rng.normal_vec(st.input_dim()).into_iter().map(|v| v * input_scale).collect();
        let dz = slopes(st, &x)?;
        let peak = dz.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        best = best.max(libm::sqrt(numerics::dot(&x, &x) + 1.0) * peak);
    }
    Ok(best)
}

/// Everything the bounds report needs in one place.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryInputs {
    pub d: usize,
    pub p: usize,
    pub eps_prob: f64,
    pub tau: f64,
    pub l_omega: f64,
    pub gamma: f64,
    pub eps_pert: f64,
    /// Per stage, one-based order.
    pub l_theta: Vec<f64>,
    pub l_f: Vec<f64>,
    pub optimizer: OptimizerConstants,
    pub sigma: f64,
    pub loss0: f64,
    pub loss_star: f64,
    pub horizon: u64,
}

impl Default for TheoryInputs {
    fn default() -> Self {
        Self {
            d: 64,
            p: 8,
            eps_prob: 0.05,
            tau: 1.0,
            l_omega: 1.0,
            gamma: 0.25,
            eps_pert: 1.0,
            l_theta: alloc::vec![1.0; 8],
            l_f: alloc::vec![1.0; 8],
            optimizer: OptimizerConstants {
                eta: 0.1,
                beta: 0.0,
                l_smooth: 1.0,
                c_lyap: 0.0,
                eps1: 0.0,
                eps2: 0.5,
                eps3: 0.0,
                c2_abs_inner: false,
            },
            sigma: 0.0,
            loss0: 1.0,
            loss_star: 0.0,
            horizon: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub budget: Budget,
    pub eps_max: f64,
    /// `G_s` per stage.
    pub amplification: Vec<f64>,
    /// `zeta_s` per stage.
    pub perturbation: Vec<f64>,
    /// Worst stage, used in the convergence bound.
    pub zeta: f64,
    pub momentum_cumulative: f64,
    pub momentum_single_step: f64,
    pub constants: ConvergenceConstants,
    /// `None` when `alpha <= 0`.
    pub bound: Option<f64>,
}

pub fn bounds_report(inp: &TheoryInputs) -> Result<BoundsReport> {
    if inp.l_theta.len() != inp.l_f.len() {
        return Err(Error::ShapeMismatch);
    }
    let budget = honest_majority_budget(inp.d, inp.p, inp.eps_prob)?;
    let eps_max = evasion_bound(inp.tau, inp.l_omega, inp.gamma)?;
    let amplification: Vec<f64> = (0..inp.l_theta.len())
        .map(|s| amplification_factor(inp.l_theta[s], &inp.l_f[s + 1..]))
        .collect::<Result<_>>()?;
    let perturbation: Vec<f64> = amplification
        .iter()
        .map(|g| gradient_perturbation_bound(inp.gamma, *g, inp.tau, inp.l_omega))
        .collect::<Result<_>>()?;
    let zeta = perturbation.iter().copied().fold(0.0, f64::max);
    let constants = convergence_constants(&inp.optimizer)?;
    let bound = match convergence_bound(&constants, zeta, inp.sigma, inp.loss0, inp.loss_star, inp.horizon) {
        Ok(b) => Some(b),
        Err(Error::InfeasibleConstants) => None,
        Err(e) => return Err(e),
    };
    Ok(BoundsReport {
        budget,
        eps_max,
        amplification,
        perturbation,
        zeta,
        momentum_cumulative: momentum_deviation_bound(inp.gamma, inp.eps_pert, false, inp.optimizer.beta),
        momentum_single_step: momentum_deviation_bound(inp.gamma, inp.eps_pert, true, inp.optimizer.beta),
        constants,
        bound,
    })
}
