//! Steering vectors, BDD-domain grids, perturbations and the factor matrices
//! `A(φ̄+Δφ, η, S)`, `B(τ̄+Δτ)`, `C(ν̄+Δν)` with their analytic derivatives.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::SystemConfig;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Matrix, RealMatrix};

fn cis(phase: f64) -> Complex64 {
    Complex64::from_polar(1.0, phase)
}

/// Spatial chirp `[a_SS(φ, η)]_n = exp(j2π n d (φ − n d η) / λ)` for `n = 0..N_an`.
pub fn steer_beam(phi: f64, eta: f64, cfg: &SystemConfig) -> Vec<Complex64> {
    let d = cfg.antenna_spacing();
    let lambda = cfg.wavelength();
    (0..cfg.n_antennas)
        .map(|n| {
            let nd = n as f64 * d;
            cis(2.0 * PI * nd * (phi - nd * eta) / lambda)
        })
        .collect()
}

/// `[b(τ)]_n = exp(−j2π n Δf̄ τ)`.
pub fn steer_delay(tau: f64, cfg: &SystemConfig) -> Vec<Complex64> {
    let df = cfg.pilot_freq_spacing();
    (0..cfg.n_subcarriers)
        .map(|n| cis(-2.0 * PI * n as f64 * df * tau))
        .collect()
}

/// `[c(ν)]_n = exp(j2π n ΔT̄ ν)`.
pub fn steer_doppler(nu: f64, cfg: &SystemConfig) -> Vec<Complex64> {
    let dt = cfg.pilot_period();
    (0..cfg.n_symbols)
        .map(|n| cis(2.0 * PI * n as f64 * dt * nu))
        .collect()
}

/// Prediction-time temporal steering `[c̃(ν)]_{n_cp} = exp(j2π(T₀ + n_cp ΔT)ν)`,
/// `n_cp = 1..=horizon`, with the origin `T₀ = (N_sym − 1) ΔT̄` at the last pilot.
pub fn steer_doppler_pred(nu: f64, horizon: usize, cfg: &SystemConfig) -> Vec<Complex64> {
    let t0 = cfg.prediction_origin();
    let dt = cfg.symbol_period();
    (1..=horizon)
        .map(|n_cp| cis(2.0 * PI * (t0 + n_cp as f64 * dt) * nu))
        .collect()
}

/// Fixed uniform grids of the beam, delay and Doppler domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Direction cosines, `K_be` points of the periodic grid `−1 + 2k/K_be`.
    pub beam: Vec<f64>,
    /// Delays in seconds, `K_de` points spanning `[0, ΔT_cp]`.
    pub delay: Vec<f64>,
    /// Doppler shifts in Hz, `K_do` points spanning `[−ν_max, ν_max]`.
    pub doppler: Vec<f64>,
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.5 * (lo + hi)];
    }
    let step = (hi - lo) / (k - 1) as f64;
    (0..k).map(|i| lo + step * i as f64).collect()
}

fn step_of(grid: &[f64], fallback: f64) -> f64 {
    if grid.len() > 1 {
        grid[1] - grid[0]
    } else {
        fallback
    }
}

impl GridSpec {
    /// Uniform grids for `K_be`, `K_de`, `K_do` points; `max_doppler` is `v_MT f_c / c`.
    pub fn uniform(
        cfg: &SystemConfig,
        k_beam: usize,
        k_delay: usize,
        k_doppler: usize,
        max_doppler: f64,
    ) -> Result<Self> {
        if k_beam == 0 || k_delay == 0 || k_doppler == 0 {
            return Err(invalid("grid counts must be >= 1"));
        }
        if !(max_doppler >= 0.0) {
            return Err(invalid("maximum Doppler must be non-negative"));
        }
        let beam = (0..k_beam)
            .map(|k| -1.0 + 2.0 * k as f64 / k_beam as f64)
            .collect();
        let delay = linspace(0.0, cfg.cp_duration_s, k_delay);
        if max_doppler == 0.0 && k_doppler > 1 {
            return Err(invalid("a multi-point Doppler grid needs a positive span"));
        }
        let doppler = linspace(-max_doppler, max_doppler, k_doppler);
        Ok(Self {
            beam,
            delay,
            doppler,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.beam.len(), self.delay.len(), self.doppler.len()]
    }

    pub fn beam_step(&self) -> f64 {
        step_of(&self.beam, 2.0)
    }

    pub fn delay_step(&self) -> f64 {
        step_of(&self.delay, f64::INFINITY)
    }

    pub fn doppler_step(&self) -> f64 {
        step_of(&self.doppler, f64::INFINITY)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("beam", &self.beam),
            ("delay", &self.delay),
            ("doppler", &self.doppler),
        ] {
            if g.is_empty() {
                return Err(invalid(format!("{name} grid is empty")));
            }
            if g.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(invalid(format!("{name} grid is not strictly increasing")));
            }
        }
        Ok(())
    }
}

/// Learnable off-grid corrections: `Δφ`, `η` (per beam), `Δτ`, `Δν`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbations {
    pub beam: Vec<f64>,
    pub slope: Vec<f64>,
    pub delay: Vec<f64>,
    pub doppler: Vec<f64>,
}

/// Box constraints for [`Perturbations`]: half a grid step per domain and
/// `0 <= η <= η_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationLimits {
    pub beam: f64,
    pub delay: f64,
    pub doppler: f64,
    pub slope_max: f64,
}

impl PerturbationLimits {
    /// `η_max = 1 / (2 r_min)`.
    pub fn new(grids: &GridSpec, r_min: f64) -> Self {
        Self {
            beam: 0.5 * grids.beam_step(),
            delay: 0.5 * grids.delay_step(),
            doppler: 0.5 * grids.doppler_step(),
            slope_max: 1.0 / (2.0 * r_min),
        }
    }
}

impl Perturbations {
    /// All-zero perturbations; `η = 0` is the far-field start.
    pub fn zeros(grids: &GridSpec) -> Self {
        let [kb, kd, kn] = grids.dims();
        Self {
            beam: vec![0.0; kb],
            slope: vec![0.0; kb],
            delay: vec![0.0; kd],
            doppler: vec![0.0; kn],
        }
    }

    pub fn clamp(&mut self, lim: &PerturbationLimits) {
        for x in &mut self.beam {
            *x = x.clamp(-lim.beam, lim.beam);
        }
        for x in &mut self.delay {
            *x = x.clamp(-lim.delay, lim.delay);
        }
        for x in &mut self.doppler {
            *x = x.clamp(-lim.doppler, lim.doppler);
        }
        for x in &mut self.slope {
            *x = x.clamp(0.0, lim.slope_max);
        }
    }

    pub fn check_dims(&self, grids: &GridSpec) -> Result<()> {
        let [kb, kd, kn] = grids.dims();
        if self.beam.len() != kb
            || self.slope.len() != kb
            || self.delay.len() != kd
            || self.doppler.len() != kn
        {
            return Err(Error::ShapeMismatch(
                "perturbation lengths do not match the grids".into(),
            ));
        }
        Ok(())
    }
}

/// Factor matrices at the perturbed grid and their first derivatives.
#[derive(Debug, Clone)]
pub struct FactorSet {
    /// `A = A_SS ⊙ S`, `N_an × K_be`.
    pub a: Matrix,
    /// Spatially stationary part, unit-modulus entries.
    pub a_ss: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// `∂A/∂φ_k` stacked column-wise (column `k` only depends on `φ_k`).
    pub da_phi: Matrix,
    pub da_eta: Matrix,
    pub db: Matrix,
    pub dc: Matrix,
}

/// `A_SS` and its derivatives with respect to `φ` and `η`.
pub fn beam_matrices(
    beam: &[f64],
    slope: &[f64],
    cfg: &SystemConfig,
) -> (Matrix, Matrix, Matrix) {
    let d = cfg.antenna_spacing();
    let lambda = cfg.wavelength();
    let cols: Vec<Vec<Complex64>> = beam
        .iter()
        .zip(slope)
        .map(|(&phi, &eta)| steer_beam(phi, eta, cfg))
        .collect();
    let a_ss = Matrix::from_columns(&cols).expect("equal-length steering vectors");
    let d_phi = Matrix::from_fn(a_ss.rows(), a_ss.cols(), |n, k| {
        Complex64::new(0.0, 2.0 * PI * n as f64 * d / lambda) * a_ss[(n, k)]
    });
    let d_eta = Matrix::from_fn(a_ss.rows(), a_ss.cols(), |n, k| {
        let nd = n as f64 * d;
        Complex64::new(0.0, -2.0 * PI * nd * nd / lambda) * a_ss[(n, k)]
    });
    (a_ss, d_phi, d_eta)
}

/// `B(τ)` and `∂B/∂τ`.
pub fn delay_matrices(delays: &[f64], cfg: &SystemConfig) -> (Matrix, Matrix) {
    let df = cfg.pilot_freq_spacing();
    let cols: Vec<Vec<Complex64>> = delays.iter().map(|&t| steer_delay(t, cfg)).collect();
    let b = Matrix::from_columns(&cols).expect("equal-length steering vectors");
    let db = Matrix::from_fn(b.rows(), b.cols(), |n, k| {
        Complex64::new(0.0, -2.0 * PI * n as f64 * df) * b[(n, k)]
    });
    (b, db)
}

/// `C(ν)` and `∂C/∂ν`.
pub fn doppler_matrices(dopplers: &[f64], cfg: &SystemConfig) -> (Matrix, Matrix) {
    let dt = cfg.pilot_period();
    let cols: Vec<Vec<Complex64>> = dopplers.iter().map(|&v| steer_doppler(v, cfg)).collect();
    let c = Matrix::from_columns(&cols).expect("equal-length steering vectors");
    let dc = Matrix::from_fn(c.rows(), c.cols(), |n, k| {
        Complex64::new(0.0, 2.0 * PI * n as f64 * dt) * c[(n, k)]
    });
    (c, dc)
}

fn perturbed(grid: &[f64], delta: &[f64]) -> Vec<f64> {
    grid.iter().zip(delta).map(|(g, d)| g + d).collect()
}

impl FactorSet {
    /// Builds all factor matrices. `s` holds SnS values (binary or posterior
    /// probabilities), `N_an × K_be`.
    pub fn build(
        grids: &GridSpec,
        pert: &Perturbations,
        s: &RealMatrix,
        cfg: &SystemConfig,
    ) -> Result<Self> {
        pert.check_dims(grids)?;
        let [kb, _, _] = grids.dims();
        if s.rows() != cfg.n_antennas || s.cols() != kb {
            return Err(Error::ShapeMismatch(format!(
                "SnS matrix is {}x{}, expected {}x{kb}",
                s.rows(),
                s.cols(),
                cfg.n_antennas
            )));
        }
        let (a_ss, da_ss_phi, da_ss_eta) =
            beam_matrices(&perturbed(&grids.beam, &pert.beam), &pert.slope, cfg);
        let s_c = s.to_complex();
        let a = a_ss.hadamard(&s_c)?;
        let da_phi = da_ss_phi.hadamard(&s_c)?;
        let da_eta = da_ss_eta.hadamard(&s_c)?;
        let (b, db) = delay_matrices(&perturbed(&grids.delay, &pert.delay), cfg);
        let (c, dc) = doppler_matrices(&perturbed(&grids.doppler, &pert.doppler), cfg);
        Ok(Self {
            a,
            a_ss,
            b,
            c,
            da_phi,
            da_eta,
            db,
            dc,
        })
    }
}

/// `C̃(ν̄ + Δν)`, `horizon × K_do`.
pub fn prediction_doppler_matrix(
    grids: &GridSpec,
    pert: &Perturbations,
    horizon: usize,
    cfg: &SystemConfig,
) -> Matrix {
    let cols: Vec<Vec<Complex64>> = perturbed(&grids.doppler, &pert.doppler)
        .iter()
        .map(|&v| steer_doppler_pred(v, horizon, cfg))
        .collect();
    Matrix::from_columns(&cols).expect("equal-length steering vectors")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_an: usize) -> SystemConfig {
        SystemConfig {
            n_antennas: n_an,
            n_subcarriers: 8,
            n_symbols: 10,
            ..SystemConfig::table_one()
        }
    }

    #[test]
    fn broadside_far_field_is_all_ones() {
        let c = cfg(16);
        for v in steer_beam(0.0, 0.0, &c) {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn far_field_degeneracy() {
        let c = cfg(16);
        let phi = 0.37;
        let a = steer_beam(phi, 0.0, &c);
        for (n, v) in a.iter().enumerate() {
            let want = cis(2.0 * PI * n as f64 * c.antenna_spacing() * phi / c.wavelength());
            assert!((v - want).norm() < 1e-12);
        }
    }

    #[test]
    fn near_field_phase_formula() {
        // d = λ/2: phase_n = π n [φ − n (λ/2) η]
        let c = cfg(4);
        let (phi, eta) = (0.5, 0.01);
        let lambda = c.wavelength();
        let a = steer_beam(phi, eta, &c);
        for (n, v) in a.iter().enumerate() {
            let n = n as f64;
            let want = cis(PI * n * (phi - n * (lambda / 2.0) * eta));
            assert!((v - want).norm() < 1e-12, "n={n}");
            assert!((v.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn delay_and_doppler_vectors() {
        let c = cfg(4);
        assert!(steer_delay(0.0, &c).iter().all(|v| (v - 1.0).norm() < 1e-15));
        let tau = 3.3e-7;
        let p = steer_delay(tau, &c);
        let m = steer_delay(-tau, &c);
        for (x, y) in p.iter().zip(&m) {
            assert!((x * y - 1.0).norm() < 1e-12);
        }
        // one full cycle across the frame
        let nu = 1.0 / (c.n_symbols as f64 * c.pilot_period());
        let v = steer_doppler(nu, &c);
        let steps: Vec<f64> = v.windows(2).map(|w| (w[1] / w[0]).arg()).collect();
        let total: f64 = steps.iter().sum();
        assert!((total - 2.0 * PI * (c.n_symbols - 1) as f64 / c.n_symbols as f64).abs() < 1e-9);
        assert!((v[0] - 1.0).norm() < 1e-15);
    }

    #[test]
    fn prediction_steering_phase() {
        let c = cfg(4);
        assert!(steer_doppler_pred(0.0, 5, &c)
            .iter()
            .all(|v| (v - 1.0).norm() < 1e-15));
        // ΔT = 17.84 µs, ΔT̄ = 14 ΔT = 249.76 µs
        assert!((c.symbol_period() - 17.84e-6).abs() < 1e-15);
        assert!((c.pilot_period() - 249.76e-6).abs() < 1e-12);
        let v = steer_doppler_pred(100.0, 1, &c);
        let phase = 2.0 * PI * 100.0 * (9.0 * 249.76e-6 + 17.84e-6);
        assert!((v[0] - cis(phase)).norm() < 1e-9);
        // n_cp = N_IS lands on the next pilot: continues c(ν)
        let nu = 123.0;
        let pred = steer_doppler_pred(nu, c.pilot_symbol_interval, &c);
        let next = cis(2.0 * PI * c.n_symbols as f64 * c.pilot_period() * nu);
        assert!((pred[c.pilot_symbol_interval - 1] - next).norm() < 1e-9);
    }

    #[test]
    fn build_with_ones_and_zero_perturbation() {
        let c = cfg(8);
        let g = GridSpec::uniform(&c, 8, 4, 6, 800.0).unwrap();
        g.validate().unwrap();
        let p = Perturbations::zeros(&g);
        let s = RealMatrix::from_fn(8, 8, |_, _| 1.0);
        let f = FactorSet::build(&g, &p, &s, &c).unwrap();
        assert_eq!(f.a, f.a_ss);
        for k in 0..8 {
            let want = steer_beam(g.beam[k], 0.0, &c);
            for n in 0..8 {
                assert!((f.a[(n, k)] - want[n]).norm() < 1e-15);
            }
        }
        let bad = RealMatrix::zeros(7, 8);
        assert!(FactorSet::build(&g, &p, &bad, &c).is_err());
    }

    #[test]
    fn derivative_phi_closed_form() {
        let c = cfg(8);
        let g = GridSpec::uniform(&c, 8, 4, 6, 800.0).unwrap();
        let mut p = Perturbations::zeros(&g);
        p.slope[3] = 0.02;
        let s = RealMatrix::from_fn(8, 8, |n, k| if (n + k) % 3 == 0 { 0.0 } else { 0.7 });
        let f = FactorSet::build(&g, &p, &s, &c).unwrap();
        let d = c.antenna_spacing();
        for n in 0..8 {
            let want = Complex64::new(0.0, 2.0 * PI * n as f64 * d / c.wavelength())
                * f.a_ss[(n, 3)]
                * s[(n, 3)];
            assert!((f.da_phi[(n, 3)] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn clamping() {
        let c = cfg(8);
        let g = GridSpec::uniform(&c, 8, 5, 5, 800.0).unwrap();
        let lim = PerturbationLimits::new(&g, 10.0);
        let mut p = Perturbations::zeros(&g);
        p.beam[0] = 1.0;
        p.slope[0] = -1.0;
        p.slope[1] = 1.0;
        p.delay[0] = -1.0;
        p.doppler[0] = 1e6;
        p.clamp(&lim);
        assert_eq!(p.beam[0], 0.125);
        assert_eq!(p.slope[0], 0.0);
        assert_eq!(p.slope[1], 0.05);
        assert!((p.delay[0] + c.cp_duration_s / 8.0).abs() < 1e-18);
        assert!((p.doppler[0] - 200.0).abs() < 1e-9);
    }
}
