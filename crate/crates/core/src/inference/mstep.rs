//! M-step: perturbation/slope learning from the quadratic (Gauss-Newton)
//! model of the residual energies, then the prior updates.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::state::{Hyperparams, InferenceState};
use crate::channel::SystemConfig;
use crate::error::{invalid, Error, Result};
use crate::factors::{
    beam_matrices, delay_matrices, doppler_matrices, GridSpec, PerturbationLimits, Perturbations,
};
use crate::priors::{update_bg, update_gamma, BgPrior, GammaRule, SnsPrior};
use crate::tensor::{Matrix, ModeOrder, Tensor};

/// Relative tolerance of the non-increase check on the objective.
pub const TRUST_TOL: f64 = 1e-8;
/// Maximum number of step halvings before falling back to the expansion point.
pub const MAX_HALVINGS: usize = 30;
/// Ridge scale: `ε_reg = RIDGE · trace(Π) / dim(Π)`.
pub const RIDGE: f64 = 1e-8;

/// Point around which the factor matrices are linearized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Expansion {
    /// The previous estimate.
    #[default]
    Previous,
    /// Zero perturbation and zero slope.
    Zero,
}

impl std::str::FromStr for Expansion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "previous" => Ok(Self::Previous),
            "zero" => Ok(Self::Zero),
            _ => Err(invalid(format!("unknown expansion point {s:?}"))),
        }
    }
}

/// Quadratic model `J(x) ≈ xᵀ Re{Π} x − 2 Re{μ}ᵀ x + const`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub pi: Matrix,
    pub mu: Vec<Complex64>,
}

/// Per-domain summary of one perturbation update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub j_before: f64,
    pub j_after: f64,
    pub halvings: usize,
    /// Eigenvalue ratio of the regularized `Re{Π}`.
    pub condition: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MStepReport {
    pub tau: StepReport,
    pub nu: StepReport,
    pub phi_eta: StepReport,
}

fn add(grid: &[f64], delta: &[f64]) -> Vec<f64> {
    grid.iter().zip(delta).map(|(g, d)| g + d).collect()
}

/// Sum of a tensor over every mode except `mode`.
fn sum_except(t: &Tensor, mode: usize) -> Result<Vec<Complex64>> {
    let m = t.matricize(mode)?;
    Ok((0..m.rows())
        .map(|r| (0..m.cols()).map(|c| m[(r, c)]).sum())
        .collect())
}

/// Generic coefficients for a residual `r` along `mode`, derivative matrix
/// `d` (`N × K`) and fiber weights `wts` (size `K` along `mode`):
/// `Π = (DᴴD)* ⊙ (W ×₋mode W*)`, `μ = Σ_n diag(w_n)ᴴ Dᴴ r_n`.
pub fn quadratic_from(r: &Tensor, wts: &Tensor, d: &Matrix, mode: usize) -> Result<Quadratic> {
    let gram = d.conj_transpose().matmul(d)?.conj();
    let cross = wts.contract_except(&wts.conj(), mode)?;
    let pi = gram.hadamard(&cross)?;
    let proj = r.mode_product(&d.conj_transpose(), mode)?;
    let mu = sum_except(&proj.hadamard(&wts.conj())?, mode)?;
    Ok(Quadratic { pi, mu })
}

/// `J_{τ,ν} = ‖Ĥ − Ŵ ×₂ B ×₃ C‖²`.
pub fn objective_tau_nu(h: &Tensor, w: &Tensor, b: &Matrix, c: &Matrix) -> Result<f64> {
    let fit = w.multi_mode_product(&[(b, 1), (c, 2)], ModeOrder::SizeAware)?;
    Ok(h.sub(&fit)?.norm_sq())
}

/// `J_{φ,η} = ‖Ŵ − Ĝ ×₁ A‖²`.
pub fn objective_phi_eta(w: &Tensor, g: &Tensor, a: &Matrix) -> Result<f64> {
    Ok(w.sub(&g.mode_product(a, 0)?)?.norm_sq())
}

/// `A_SS(φ, η) ⊙ S` and its derivatives, masked by `S`.
fn masked_beam(beams: &[f64], slopes: &[f64], s: &crate::tensor::RealMatrix, cfg: &SystemConfig) -> Result<(Matrix, Matrix, Matrix)> {
    let (a_ss, dphi, deta) = beam_matrices(beams, slopes, cfg);
    let sc = s.to_complex();
    Ok((a_ss.hadamard(&sc)?, dphi.hadamard(&sc)?, deta.hadamard(&sc)?))
}

/// `J_τ` as a function of absolute delays; `C` fixed.
pub fn j_tau(h: &Tensor, w: &Tensor, c: &Matrix, delays: &[f64], cfg: &SystemConfig) -> Result<f64> {
    objective_tau_nu(h, w, &delay_matrices(delays, cfg).0, c)
}

/// `J_ν` as a function of absolute Doppler shifts; `B` fixed.
pub fn j_nu(h: &Tensor, w: &Tensor, b: &Matrix, dopplers: &[f64], cfg: &SystemConfig) -> Result<f64> {
    objective_tau_nu(h, w, b, &doppler_matrices(dopplers, cfg).0)
}

/// `J_{φ,η}` as a function of absolute direction cosines and slopes.
pub fn j_phi_eta(
    w: &Tensor,
    g: &Tensor,
    s: &crate::tensor::RealMatrix,
    beams: &[f64],
    slopes: &[f64],
    cfg: &SystemConfig,
) -> Result<f64> {
    objective_phi_eta(w, g, &masked_beam(beams, slopes, s, cfg)?.0)
}

/// Coefficients of `J_τ` around the delays `delays`, with `W_τ = Ŵ ×₃ C`.
pub fn quadratic_tau(h: &Tensor, w: &Tensor, c: &Matrix, delays: &[f64], cfg: &SystemConfig) -> Result<Quadratic> {
    let (b0, db) = delay_matrices(delays, cfg);
    let w_tau = w.mode_product(c, 2)?;
    let r = h.sub(&w_tau.mode_product(&b0, 1)?)?;
    quadratic_from(&r, &w_tau, &db, 1)
}

/// Coefficients of `J_ν` around `dopplers`, with `W_ν = Ŵ ×₂ B`.
pub fn quadratic_nu(h: &Tensor, w: &Tensor, b: &Matrix, dopplers: &[f64], cfg: &SystemConfig) -> Result<Quadratic> {
    let (c0, dc) = doppler_matrices(dopplers, cfg);
    let w_nu = w.mode_product(b, 1)?;
    let r = h.sub(&w_nu.mode_product(&c0, 2)?)?;
    quadratic_from(&r, &w_nu, &dc, 2)
}

/// Coefficients of `J_{φ,η}` in `χ = [Δφ; η]` around `(beams, slopes)`.
pub fn quadratic_phi_eta(
    w: &Tensor,
    g: &Tensor,
    s: &crate::tensor::RealMatrix,
    beams: &[f64],
    slopes: &[f64],
    cfg: &SystemConfig,
) -> Result<Quadratic> {
    let (a0, dphi, deta) = masked_beam(beams, slopes, s, cfg)?;
    let kb = a0.cols();
    let r = w.sub(&g.mode_product(&a0, 0)?)?;
    let mut cols: Vec<Vec<Complex64>> = (0..kb).map(|k| dphi.column(k).to_vec()).collect();
    cols.extend((0..kb).map(|k| deta.column(k).to_vec()));
    let d = Matrix::from_columns(&cols)?;
    // 1₂ ⊗ ĝ_n: stack Ĝ twice along the beam mode
    let mut shape = g.shape().to_vec();
    shape[0] = 2 * kb;
    let stacked = Tensor::from_fn(&shape, |idx| {
        let mut i = idx.to_vec();
        i[0] %= kb;
        g.get(&i)
    })?;
    quadratic_from(&r, &stacked, &d, 0)
}

/// Solves `(Re{Π} + ε_reg I) x = Re{μ}`; returns `(x, condition)`.
pub fn solve_quadratic(q: &Quadratic) -> Result<(Vec<f64>, f64)> {
    solve_quadratic_active(q, 0.0)
}

/// [`solve_quadratic`] restricted to the coordinates whose diagonal
/// `Re{Π_kk}` is at least `active_rel · max_k Re{Π_kk}`; the others get a
/// zero step.
pub fn solve_quadratic_active(q: &Quadratic, active_rel: f64) -> Result<(Vec<f64>, f64)> {
    let n = q.mu.len();
    if q.pi.rows() != n || q.pi.cols() != n {
        return Err(Error::ShapeMismatch("quadratic model dimensions".into()));
    }
    let trace: f64 = (0..n).map(|i| q.pi[(i, i)].re).sum();
    if !(trace > 0.0) || !trace.is_finite() {
        return Ok((vec![0.0; n], 1.0));
    }
    let dmax = (0..n).map(|i| q.pi[(i, i)].re).fold(0.0, f64::max);
    let keep: Vec<usize> = (0..n).filter(|&i| q.pi[(i, i)].re >= active_rel * dmax).collect();
    let eps = RIDGE * trace / n as f64;
    let na = keep.len();
    let m = DMatrix::from_fn(na, na, |a, b| {
        let (i, j) = (keep[a], keep[b]);
        // symmetrize against rounding
        0.5 * (q.pi[(i, j)].re + q.pi[(j, i)].re) + if i == j { eps } else { 0.0 }
    });
    let rhs = nalgebra::DVector::from_iterator(na, keep.iter().map(|&i| q.mu[i].re));
    let eig = m.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e.abs()), hi.max(e.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    let x = match m.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| invalid("singular quadratic system"))?,
    };
    let mut full = vec![0.0; n];
    for (a, &i) in keep.iter().enumerate() {
        full[i] = x[a];
    }
    Ok((full, condition))
}

/// Takes `start + step`, clamps via `project`, halves the step until the
/// objective does not exceed its value at `start`.
fn trusted_step(
    start: &[f64],
    step: &[f64],
    project: impl Fn(&mut [f64]),
    objective: impl Fn(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, StepReport)> {
    let j0 = objective(start)?;
    let mut scale = 1.0;
    for halvings in 0..=MAX_HALVINGS {
        let mut cand: Vec<f64> = start.iter().zip(step).map(|(s, d)| s + scale * d).collect();
        project(&mut cand);
        let j = objective(&cand)?;
        if j.is_finite() && j <= j0 * (1.0 + TRUST_TOL) + f64::MIN_POSITIVE {
            return Ok((
                cand,
                StepReport {
                    j_before: j0,
                    j_after: j,
                    halvings,
                    condition: 0.0,
                },
            ));
        }
        scale *= 0.5;
    }
    Ok((
        start.to_vec(),
        StepReport {
            j_before: j0,
            j_after: j0,
            halvings: MAX_HALVINGS + 1,
            condition: 0.0,
        },
    ))
}

/// Updates `Δτ`, then `Δν`, then `(Δφ, η)`, each from its quadratic model
/// with the box limits and the non-increase check.
pub fn m_step_perturbations(
    state: &InferenceState,
    hyper: &Hyperparams,
    grids: &GridSpec,
    limits: &PerturbationLimits,
    expansion: Expansion,
    active_rel: f64,
    cfg: &SystemConfig,
) -> Result<(Perturbations, MStepReport)> {
    let prev = &hyper.pert;
    prev.check_dims(grids)?;
    let zeros = Perturbations::zeros(grids);
    let origin = match expansion {
        Expansion::Previous => prev,
        Expansion::Zero => &zeros,
    };
    let mut out = prev.clone();
    let mut report = MStepReport::default();
    let (h, w, g) = (&state.h, &state.w, &state.g);

    // delay
    let c = doppler_matrices(&add(&grids.doppler, &prev.doppler), cfg).0;
    let q = quadratic_tau(h, w, &c, &add(&grids.delay, &origin.delay), cfg)?;
    let (x, cond) = solve_quadratic_active(&q, active_rel)?;
    let lim = limits.delay;
    let (d, mut rep) = trusted_step(
        &origin.delay,
        &x,
        |v| v.iter_mut().for_each(|e| *e = e.clamp(-lim, lim)),
        |v| j_tau(h, w, &c, &add(&grids.delay, v), cfg),
    )?;
    rep.condition = cond;
    out.delay = d;
    report.tau = rep;

    // Doppler, with the refreshed delays
    let b = delay_matrices(&add(&grids.delay, &out.delay), cfg).0;
    let q = quadratic_nu(h, w, &b, &add(&grids.doppler, &origin.doppler), cfg)?;
    let (x, cond) = solve_quadratic_active(&q, active_rel)?;
    let lim = limits.doppler;
    let (d, mut rep) = trusted_step(
        &origin.doppler,
        &x,
        |v| v.iter_mut().for_each(|e| *e = e.clamp(-lim, lim)),
        |v| j_nu(h, w, &b, &add(&grids.doppler, v), cfg),
    )?;
    rep.condition = cond;
    out.doppler = d;
    report.nu = rep;

    // beam perturbation and slope, stacked as χ = [Δφ; η]
    let kb = grids.beam.len();
    let q = quadratic_phi_eta(w, g, &state.s, &add(&grids.beam, &origin.beam), &origin.slope, cfg)?;
    let (x, cond) = solve_quadratic_active(&q, active_rel)?;
    let start: Vec<f64> = origin.beam.iter().chain(&origin.slope).copied().collect();
    let (lb, smax) = (limits.beam, limits.slope_max);
    let (chi, mut rep) = trusted_step(
        &start,
        &x,
        |v| {
            let (phi, eta) = v.split_at_mut(kb);
            phi.iter_mut().for_each(|e| *e = e.clamp(-lb, lb));
            eta.iter_mut().for_each(|e| *e = e.clamp(0.0, smax));
        },
        |v| j_phi_eta(w, g, &state.s, &add(&grids.beam, &v[..kb]), &v[kb..], cfg),
    )?;
    rep.condition = cond;
    out.beam = chi[..kb].to_vec();
    out.slope = chi[kb..].to_vec();
    report.phi_eta = rep;
    Ok((out, report))
}

/// Refreshed `(M̂, V̂)` and `Γ̂` from the current posteriors.
pub fn m_step_priors(state: &InferenceState, hyper: &Hyperparams, rule: GammaRule) -> Result<(BgPrior, SnsPrior)> {
    let bg = update_bg(&hyper.bg, &state.g_lik, &state.e_g_lik, &state.g, &state.e_g)?;
    let sns = SnsPrior {
        gamma: update_gamma(&state.s, rule),
    };
    Ok((bg, sns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_system() {
        let q = Quadratic {
            pi: Matrix::identity(3),
            mu: vec![Complex64::new(0.5, 2.0), Complex64::new(-1.0, 0.0), Complex64::new(0.0, 1.0)],
        };
        let (x, _) = solve_quadratic(&q).unwrap();
        for (a, b) in x.iter().zip([0.5, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_residual_gives_zero_step() {
        let q = Quadratic {
            pi: Matrix::identity(2),
            mu: vec![Complex64::new(0.0, 0.0); 2],
        };
        assert_eq!(solve_quadratic(&q).unwrap().0, vec![0.0, 0.0]);
    }

    #[test]
    fn singular_pi_is_ridged() {
        let mut pi = Matrix::zeros(2, 2);
        pi[(0, 0)] = Complex64::new(1.0, 0.0);
        let q = Quadratic {
            pi,
            mu: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)],
        };
        let (x, cond) = solve_quadratic(&q).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-6 && x[1].abs() < 1e-12);
        assert!(cond > 1e6);
    }
}
