use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::estep::{e_step, Trace};
use super::mstep::{m_step_perturbations, m_step_priors, objective_phi_eta, objective_tau_nu, Expansion};
use super::predict::predict;
use super::state::{czeros, floor_var, floor_var_matrix, Factors, Hyperparams, InferenceState};
use crate::baselines::nmse;
use crate::channel::SystemConfig;
use crate::error::{invalid, Error, Result};
use crate::factors::{GridSpec, PerturbationLimits, Perturbations};
use crate::priors::{BgPrior, GammaRule, SnsPrior};
use crate::tensor::{Matrix, ModeOrder, RealMatrix, RealTensor, Tensor};

/// Starting value of `Ŵ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WInit {
    /// `Y ×₂ Bᴴ ×₃ Cᴴ / (N_sc N_sym)`.
    BackProjection,
    /// The back-projection rescaled to the least-squares fit of `Y`.
    #[default]
    Scaled,
}

impl std::str::FromStr for WInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "back_projection" => Ok(Self::BackProjection),
            "scaled" => Ok(Self::Scaled),
            _ => Err(invalid(format!("unknown w_init {s:?}"))),
        }
    }
}

/// Controls of the EM loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// `T_M`, outer EM iterations.
    pub outer_iters: usize,
    /// `T_E`, E-step inner iterations per outer iteration.
    pub inner_iters: usize,
    /// Damping weight on the new E-step candidate.
    pub damp: f64,
    /// Weight on the freshly learned `(M̂, V̂)`; the rest keeps the old values.
    pub prior_damp: f64,
    /// Perturbation updates only move atoms whose curvature is at least this
    /// fraction of the largest one.
    pub active_rel: f64,
    pub w_init: WInit,
    /// Early stop when the relative change of the reconstruction falls below
    /// `tol`; zero disables it.
    pub tol: f64,
    pub gamma_rule: GammaRule,
    pub expansion: Expansion,
    pub learn_perturbations: bool,
    /// Outer iterations run before perturbation learning starts.
    pub pert_warmup: usize,
    pub learn_priors: bool,
    /// Outer iterations run before `(M̂, V̂, Γ̂)` learning starts.
    pub prior_warmup: usize,
    /// Lower bound on scatterer distance; sets the slope limit.
    pub r_min: f64,
    pub m_init: f64,
    pub gamma_init: f64,
    pub s_init: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            outer_iters: 30,
            inner_iters: 1,
            damp: 0.2,
            prior_damp: 0.1,
            active_rel: 0.1,
            w_init: WInit::Scaled,
            tol: 1e-6,
            gamma_rule: GammaRule::Ratio,
            expansion: Expansion::Previous,
            learn_perturbations: true,
            pert_warmup: 0,
            learn_priors: true,
            prior_warmup: 20,
            r_min: 10.0,
            m_init: 0.1,
            gamma_init: 0.5,
            s_init: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inner_iters == 0 {
            return Err(invalid("inner_iters must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.damp) {
            return Err(invalid("damp must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.prior_damp) {
            return Err(invalid("prior_damp must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.active_rel) {
            return Err(invalid("active_rel must lie in [0, 1]"));
        }
        if !(self.tol >= 0.0) {
            return Err(invalid("tol must be non-negative"));
        }
        if !(self.r_min > 0.0) {
            return Err(invalid("r_min must be positive"));
        }
        if !(self.m_init > 0.0 && self.m_init < 1.0) {
            return Err(invalid("m_init must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.s_init) {
            return Err(invalid("s_init must lie in [0, 1]"));
        }
        if !self.gamma_init.is_finite() {
            return Err(invalid("gamma_init must be finite"));
        }
        Ok(())
    }
}

/// Noise variance used by the loop is at least this fraction of the mean
/// observation power.
pub const NOISE_FLOOR_REL: f64 = 1e-6;

/// Floor of the damping after repeated guard rejections.
pub const MIN_DAMP: f64 = 0.01;

/// `w·new + (1 − w)·old` for both `M̂` and `V̂`.
pub fn blend_bg(new: &BgPrior, old: &BgPrior, w: f64) -> Result<BgPrior> {
    let mix = |a: &RealTensor, b: &RealTensor| -> Result<RealTensor> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch("BG prior blend".into()));
        }
        let v = a.data().iter().zip(b.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
        RealTensor::from_vec(a.shape(), v)
    };
    Ok(BgPrior {
        m: mix(&new.m, &old.m)?,
        v: mix(&new.v, &old.v)?,
    })
}

/// Ground truth used only for diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct Truth<'a> {
    /// In-frame channel `H`.
    pub channel: Option<&'a Tensor>,
    /// Channel over the prediction horizon; its third dimension is the horizon.
    pub future: Option<&'a Tensor>,
}

/// One row of the per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iteration: usize,
    pub inner: usize,
    pub nmse_fit: Option<f64>,
    pub nmse_pred: Option<f64>,
    /// Variance entries clamped during this iteration.
    pub floor_hits: usize,
    pub j_tau_nu: f64,
    pub j_phi_eta: f64,
    /// Relative change of the Tucker reconstruction `Ĝ ×₁ Â ×₂ B ×₃ C`.
    pub rel_change: f64,
    /// E-step damping in force after this iteration.
    pub damp: f64,
    /// The iterate was rejected by the divergence guard.
    pub reverted: bool,
}

#[derive(Debug, Clone)]
pub struct EmOutput {
    pub state: InferenceState,
    pub hyper: Hyperparams,
    pub diagnostics: Vec<IterRecord>,
    /// `false` when `T_M` iterations ran without meeting the tolerance; the
    /// state is then the final iterate.
    pub converged: bool,
    pub iterations: usize,
}

/// Initial state and hyperparameters.
///
/// `M̂ = m_init`, `V̂ = P_y / (m_init · K_be K_de K_do)` with `P_y` the mean
/// power of `Y`, `Γ̂ = gamma_init`, `Ŝ = s_init`, `Ĝ = 0` with variance
/// `M̂ ⊙ V̂`, `Ŵ` from [`WInit`], residuals zero. The stored noise variance
/// is floored at `NOISE_FLOOR_REL · P_y`.
pub fn initialize(
    y: &Tensor,
    noise_var: f64,
    cfg: &SystemConfig,
    grids: &GridSpec,
    icfg: &InferenceConfig,
) -> Result<(InferenceState, Hyperparams)> {
    cfg.validate()?;
    grids.validate()?;
    icfg.validate()?;
    if y.shape() != cfg.sft_shape() {
        return Err(Error::ShapeMismatch(format!(
            "observation is {:?}, expected {:?}",
            y.shape(),
            cfg.sft_shape()
        )));
    }
    if !(noise_var >= 0.0) {
        return Err(invalid("noise variance must be non-negative"));
    }
    let [kb, kd, kn] = grids.dims();
    let p_y = y.norm_sq() / y.len() as f64;
    if !(p_y > 0.0) {
        return Err(Error::ZeroNorm);
    }
    // exact zero noise lets every variance collapse onto its floor
    let noise_var = noise_var.max(NOISE_FLOOR_REL * p_y);
    let v0 = p_y / (icfg.m_init * (kb * kd * kn) as f64);
    let gshape = [kb, kd, kn];
    let hyper = Hyperparams {
        pert: Perturbations::zeros(grids),
        bg: BgPrior::uniform(&gshape, icfg.m_init, v0)?,
        sns: SnsPrior::uniform(cfg.n_antennas, kb, icfg.gamma_init),
        noise_var,
    };
    let f = Factors::new(grids, &hyper.pert, cfg)?;
    let mut hits = 0;
    let s = RealMatrix::from_fn(cfg.n_antennas, kb, |_, _| icfg.s_init);
    let a = Matrix::from_fn(cfg.n_antennas, kb, |n, k| f.a_ss[(n, k)] * s[(n, k)]);
    let sigma_a = floor_var_matrix(
        RealMatrix::from_fn(cfg.n_antennas, kb, |n, k| {
            f.a_ss[(n, k)].norm_sqr() * s[(n, k)] * (1.0 - s[(n, k)])
        }),
        &mut hits,
    );
    let e_g = hyper.bg.variance();
    let a_pow = RealMatrix::from_fn(a.rows(), a.cols(), |n, k| a[(n, k)].norm_sqr() + sigma_a[(n, k)]);
    let e_w = floor_var(e_g.mode_product(&a_pow, 0)?, &mut hits);
    let w0 = y
        .multi_mode_product(&[(&f.b.conj_transpose(), 1), (&f.c.conj_transpose(), 2)], ModeOrder::SizeAware)?
        .scale(1.0 / (cfg.n_subcarriers * cfg.n_symbols) as f64);
    let w = match icfg.w_init {
        WInit::BackProjection => w0,
        WInit::Scaled => {
            // an oversampled dictionary makes the back-projection overshoot
            let back = w0.multi_mode_product(&[(&f.b, 1), (&f.c, 2)], ModeOrder::SizeAware)?;
            let num: Complex64 = back.data().iter().zip(y.data()).map(|(b, y)| b.conj() * y).sum();
            let den = back.norm_sq();
            if den > 0.0 {
                w0.scale(num.re / den)
            } else {
                w0
            }
        }
    };
    let e_h_pri = floor_var(
        e_w.multi_mode_product(&[(&f.b.abs_sq(), 1), (&f.c.abs_sq(), 2)], ModeOrder::SizeAware)?,
        &mut hits,
    );
    let e_h = e_h_pri.map(|e| e * noise_var / (e + noise_var));
    let e_h_res = e_h_pri.map(|e| 1.0 / (e + noise_var));
    let hshape = y.shape().to_vec();
    let wshape = w.shape().to_vec();
    let state = InferenceState {
        h: y.clone(),
        e_h,
        h_pri: czeros(&hshape)?,
        e_h_pri,
        h_res: czeros(&hshape)?,
        e_h_res,
        w_lik: w.clone(),
        e_w_lik: e_w.clone(),
        w_pri: czeros(&wshape)?,
        e_w_pri: e_w.clone(),
        w_res: czeros(&wshape)?,
        e_w_res: e_w.recip(crate::tensor::DIV_FLOOR),
        w,
        e_w,
        g: czeros(&gshape)?,
        g_lik: czeros(&gshape)?,
        e_g_lik: e_g.clone(),
        g_support: RealTensor::filled(&gshape, icfg.m_init)?,
        e_g,
        a_lik: a.clone(),
        sigma_a_lik: sigma_a.clone(),
        a,
        sigma_a,
        s,
        floor_hits: hits,
    };
    Ok((state, hyper))
}

/// EM loop: `T_M` rounds of E-step, perturbation learning and prior learning.
/// `trace`, when given, receives the line outputs of the first E-step.
pub fn em_loop(
    y: &Tensor,
    noise_var: f64,
    cfg: &SystemConfig,
    grids: &GridSpec,
    icfg: &InferenceConfig,
    truth: Option<&Truth>,
    mut trace: Option<&mut Trace>,
) -> Result<EmOutput> {
    let (mut state, mut hyper) = initialize(y, noise_var, cfg, grids, icfg)?;
    let limits = PerturbationLimits::new(grids, icfg.r_min);
    let mut factors = Factors::new(grids, &hyper.pert, cfg)?;
    let mut diagnostics = Vec::with_capacity(icfg.outer_iters);
    let mut converged = false;
    let mut iterations = 0;
    let p_y = y.norm_sq();
    let mut damp = icfg.damp;
    let mut fit = super::estep::tucker(&state.g, &state.a, &factors.b, &factors.c)?;
    for it in 1..=icfg.outer_iters {
        let hits_before = state.floor_hits;
        let saved = (state.clone(), hyper.clone(), factors.clone());
        let tr = if it == 1 { trace.take() } else { None };
        state = e_step(&state, y, &hyper, &factors, icfg.inner_iters, damp, tr)?;

        let (j_tau_nu, j_phi_eta);
        if icfg.learn_perturbations && it > icfg.pert_warmup {
            let (pert, rep) =
                m_step_perturbations(&state, &hyper, grids, &limits, icfg.expansion, icfg.active_rel, cfg)?;
            hyper.pert = pert;
            factors = Factors::new(grids, &hyper.pert, cfg)?;
            state.refresh_spatial(&factors.a_ss);
            j_tau_nu = rep.nu.j_after;
            j_phi_eta = rep.phi_eta.j_after;
        } else {
            j_tau_nu = objective_tau_nu(&state.h, &state.w, &factors.b, &factors.c)?;
            j_phi_eta = objective_phi_eta(&state.w, &state.g, &state.a)?;
        }
        if icfg.learn_priors && it > icfg.prior_warmup {
            let (bg, sns) = m_step_priors(&state, &hyper, icfg.gamma_rule)?;
            hyper.bg = blend_bg(&bg, &hyper.bg, icfg.prior_damp)?;
            hyper.sns = sns;
        }

        // divergence guard: an iterate that fits worse than the zero estimate
        // is dropped and the damping halved
        let new_fit = super::estep::tucker(&state.g, &state.a, &factors.b, &factors.c)?;
        let misfit = y.sub(&new_fit)?.norm_sq();
        let reverted = !(misfit <= p_y);
        if reverted {
            (state, hyper, factors) = saved;
            damp = (damp * 0.5).max(MIN_DAMP);
        } else {
            drop(saved);
        }
        let denom = fit.fro_norm();
        let rel_change = if reverted {
            f64::INFINITY
        } else if denom > 0.0 {
            new_fit.sub(&fit)?.fro_norm() / denom
        } else {
            f64::INFINITY
        };
        if !reverted {
            fit = new_fit;
        }
        let nmse_fit = match truth.and_then(|t| t.channel) {
            Some(h) => {
                Some(nmse(&fit, h)?)
            }
            None => None,
        };
        let nmse_pred = match truth.and_then(|t| t.future) {
            Some(f) => Some(nmse(&predict(&state, &hyper, grids, cfg, f.shape()[2])?, f)?),
            None => None,
        };
        diagnostics.push(IterRecord {
            iteration: it,
            inner: icfg.inner_iters,
            nmse_fit,
            nmse_pred,
            floor_hits: state.floor_hits - hits_before,
            j_tau_nu,
            j_phi_eta,
            rel_change,
            damp,
            reverted,
        });
        iterations = it;
        if icfg.tol > 0.0 && rel_change < icfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmOutput {
        state,
        hyper,
        diagnostics,
        converged,
        iterations,
    })
}
