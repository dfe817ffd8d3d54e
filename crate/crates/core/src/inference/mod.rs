//! Bi-layer E-step, M-step hyperparameter learning, the EM loop and
//! Doppler-domain prediction.

mod em;
mod estep;
mod mstep;
mod predict;
mod state;

pub use em::{blend_bg, em_loop, initialize, EmOutput, InferenceConfig, IterRecord, Truth, WInit, MIN_DAMP, NOISE_FLOOR_REL};
pub use estep::{bilinear_module, e_step, linear_module, tucker, Trace, TraceValue};
pub use mstep::{
    j_nu, j_phi_eta, j_tau, m_step_perturbations, m_step_priors, objective_phi_eta, objective_tau_nu,
    quadratic_from, quadratic_nu, quadratic_phi_eta, quadratic_tau, solve_quadratic, Expansion,
    MStepReport, Quadratic, StepReport, MAX_HALVINGS, RIDGE, TRUST_TOL,
};
pub use predict::{fitted, predict};
pub use state::{Factors, Hyperparams, InferenceState, VAR_FLOOR};
