use num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::factors::{beam_matrices, delay_matrices, doppler_matrices, GridSpec, Perturbations};
use crate::channel::SystemConfig;
use crate::priors::{BgPrior, SnsPrior};
use crate::tensor::{Matrix, RealMatrix, RealTensor, Tensor};

/// Floor applied to every variance tensor of the E-step.
pub const VAR_FLOOR: f64 = 1e-12;

/// Floors `x` at [`VAR_FLOOR`], counting the entries that were clamped.
pub(crate) fn floor_var(x: RealTensor, hits: &mut usize) -> RealTensor {
    *hits += x.data().iter().filter(|v| !(**v >= VAR_FLOOR)).count();
    x.map(|v| if v >= VAR_FLOOR { v } else { VAR_FLOOR })
}

pub(crate) fn floor_var_matrix(x: RealMatrix, hits: &mut usize) -> RealMatrix {
    *hits += x.data().iter().filter(|v| !(**v >= VAR_FLOOR)).count();
    x.map(|v| if v >= VAR_FLOOR { v } else { VAR_FLOOR })
}

/// Every intermediate of the bi-layer E-step.
///
/// Shapes: `H`-type tensors are `N_an × N_sc × N_sym`, `W`-type
/// `N_an × K_de × K_do`, `G`-type `K_be × K_de × K_do`, and the spatial
/// factor quantities `N_an × K_be`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceState {
    pub h: Tensor,
    pub e_h: RealTensor,
    pub w: Tensor,
    pub e_w: RealTensor,
    pub g: Tensor,
    pub e_g: RealTensor,
    /// `Â = A_SS ⊙ Ŝ`.
    pub a: Matrix,
    pub sigma_a: RealMatrix,
    pub s: RealMatrix,
    pub h_res: Tensor,
    pub e_h_res: RealTensor,
    pub w_res: Tensor,
    pub e_w_res: RealTensor,
    pub h_pri: Tensor,
    pub e_h_pri: RealTensor,
    pub w_lik: Tensor,
    pub e_w_lik: RealTensor,
    pub w_pri: Tensor,
    pub e_w_pri: RealTensor,
    pub g_lik: Tensor,
    pub e_g_lik: RealTensor,
    pub a_lik: Matrix,
    pub sigma_a_lik: RealMatrix,
    /// Posterior support probability of each core-tensor entry.
    pub g_support: RealTensor,
    /// Running count of variance entries clamped at [`VAR_FLOOR`].
    pub floor_hits: usize,
}

fn blend_t<T: crate::tensor::Scalar>(new: &Tensor<T>, old: &Tensor<T>, w: f64) -> Tensor<T> {
    new.zip_map(old, |a, b| a.scale(w) + b.scale(1.0 - w))
        .expect("damped tensors share a shape")
}

fn blend_m<T: crate::tensor::Scalar>(new: &Matrix<T>, old: &Matrix<T>, w: f64) -> Matrix<T> {
    assert_eq!((new.rows(), new.cols()), (old.rows(), old.cols()));
    Matrix::from_fn(new.rows(), new.cols(), |r, c| {
        new[(r, c)].scale(w) + old[(r, c)].scale(1.0 - w)
    })
}

impl InferenceState {
    /// Field-wise convex combination `damp · self + (1 − damp) · old`.
    /// `damp = 1` keeps `self`, `damp = 0` returns `old`.
    pub fn damped(&self, old: &Self, damp: f64) -> Self {
        if damp == 1.0 {
            return self.clone();
        }
        if damp == 0.0 {
            return Self {
                floor_hits: self.floor_hits,
                ..old.clone()
            };
        }
        Self {
            h: blend_t(&self.h, &old.h, damp),
            e_h: blend_t(&self.e_h, &old.e_h, damp),
            w: blend_t(&self.w, &old.w, damp),
            e_w: blend_t(&self.e_w, &old.e_w, damp),
            g: blend_t(&self.g, &old.g, damp),
            e_g: blend_t(&self.e_g, &old.e_g, damp),
            a: blend_m(&self.a, &old.a, damp),
            sigma_a: blend_m(&self.sigma_a, &old.sigma_a, damp),
            s: blend_m(&self.s, &old.s, damp),
            h_res: blend_t(&self.h_res, &old.h_res, damp),
            e_h_res: blend_t(&self.e_h_res, &old.e_h_res, damp),
            w_res: blend_t(&self.w_res, &old.w_res, damp),
            e_w_res: blend_t(&self.e_w_res, &old.e_w_res, damp),
            h_pri: blend_t(&self.h_pri, &old.h_pri, damp),
            e_h_pri: blend_t(&self.e_h_pri, &old.e_h_pri, damp),
            w_lik: blend_t(&self.w_lik, &old.w_lik, damp),
            e_w_lik: blend_t(&self.e_w_lik, &old.e_w_lik, damp),
            w_pri: blend_t(&self.w_pri, &old.w_pri, damp),
            e_w_pri: blend_t(&self.e_w_pri, &old.e_w_pri, damp),
            g_lik: blend_t(&self.g_lik, &old.g_lik, damp),
            e_g_lik: blend_t(&self.e_g_lik, &old.e_g_lik, damp),
            a_lik: blend_m(&self.a_lik, &old.a_lik, damp),
            sigma_a_lik: blend_m(&self.sigma_a_lik, &old.sigma_a_lik, damp),
            g_support: blend_t(&self.g_support, &old.g_support, damp),
            floor_hits: self.floor_hits,
        }
    }

    /// Re-derives `Â` from `Ŝ` after `A_SS` changed. `Σ_A_post` is kept:
    /// steering entries have unit modulus, so it does not depend on `A_SS`.
    pub fn refresh_spatial(&mut self, a_ss: &Matrix) {
        self.a = Matrix::from_fn(a_ss.rows(), a_ss.cols(), |r, c| a_ss[(r, c)] * self.s[(r, c)]);
    }
}

/// Hyperparameters learned by the M-step, plus the known noise variance.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub pert: Perturbations,
    pub bg: BgPrior,
    pub sns: SnsPrior,
    pub noise_var: f64,
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_var > 0.0) {
            return Err(invalid("noise variance must be positive"));
        }
        self.bg.validate()?;
        self.sns.validate()
    }
}

/// Factor matrices at the current perturbations: `A_SS`, `B`, `C`.
#[derive(Debug, Clone)]
pub struct Factors {
    pub a_ss: Matrix,
    pub b: Matrix,
    pub c: Matrix,
}

impl Factors {
    pub fn new(grids: &GridSpec, pert: &Perturbations, cfg: &SystemConfig) -> Result<Self> {
        pert.check_dims(grids)?;
        let beams: Vec<f64> = grids.beam.iter().zip(&pert.beam).map(|(g, d)| g + d).collect();
        let delays: Vec<f64> = grids.delay.iter().zip(&pert.delay).map(|(g, d)| g + d).collect();
        let dopplers: Vec<f64> = grids.doppler.iter().zip(&pert.doppler).map(|(g, d)| g + d).collect();
        let (a_ss, _, _) = beam_matrices(&beams, &pert.slope, cfg);
        let (b, _) = delay_matrices(&delays, cfg);
        let (c, _) = doppler_matrices(&dopplers, cfg);
        Ok(Self { a_ss, b, c })
    }
}

/// Zero complex tensor helper.
pub(crate) fn czeros(shape: &[usize]) -> Result<Tensor> {
    Tensor::filled(shape, Complex64::new(0.0, 0.0))
}
