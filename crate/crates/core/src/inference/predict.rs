use super::estep::tucker;
use super::state::{Factors, Hyperparams, InferenceState};
use crate::channel::SystemConfig;
use crate::error::Result;
use crate::factors::{prediction_doppler_matrix, GridSpec};
use crate::tensor::{Matrix, Tensor};

/// `Ĝ ×₁ A(φ̄+Δφ̂, η̂, Ŝ) ×₂ B(τ̄+Δτ̂) ×₃ C̃(ν̄+Δν̂)` for `n_cp = 1..=horizon`.
/// `Ŝ` enters as soft probabilities.
pub fn predict(
    state: &InferenceState,
    hyper: &Hyperparams,
    grids: &GridSpec,
    cfg: &SystemConfig,
    horizon: usize,
) -> Result<Tensor> {
    if horizon == 0 {
        return Tensor::empty(&[cfg.n_antennas, cfg.n_subcarriers, 0]);
    }
    let f = Factors::new(grids, &hyper.pert, cfg)?;
    let a = Matrix::from_fn(f.a_ss.rows(), f.a_ss.cols(), |n, k| f.a_ss[(n, k)] * state.s[(n, k)]);
    let c_pred = prediction_doppler_matrix(grids, &hyper.pert, horizon, cfg);
    tucker(&state.g, &a, &f.b, &c_pred)
}

/// In-frame Tucker reconstruction `Ĝ ×₁ Â ×₂ B ×₃ C`.
pub fn fitted(state: &InferenceState, hyper: &Hyperparams, grids: &GridSpec, cfg: &SystemConfig) -> Result<Tensor> {
    let f = Factors::new(grids, &hyper.pert, cfg)?;
    let a = Matrix::from_fn(f.a_ss.rows(), f.a_ss.cols(), |n, k| f.a_ss[(n, k)] * state.s[(n, k)]);
    tucker(&state.g, &a, &f.b, &f.c)
}
