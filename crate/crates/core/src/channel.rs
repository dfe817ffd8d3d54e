//! Synthetic ray-traced SFT channel with near-field phase, spatial
//! non-stationarity (SnS) and Doppler evolution, plus the noisy pilot
//! observation.
//!
//! # Seed-to-stream mapping
//!
//! Every random draw comes from `ChaCha8Rng::seed_from_u64(seed)` with a fixed
//! stream id: [`STREAM_PATHS`] for path parameters, [`STREAM_VISIBILITY`] for
//! SnS masks and [`STREAM_NOISE`] for observation noise. Path parameters are
//! therefore identical for equal seeds whatever the SnS fraction, which gives
//! paired SnS / non-SnS scenes.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::factors::{steer_beam, steer_delay, steer_doppler, steer_doppler_pred};
use crate::tensor::Tensor;

/// Speed of light used throughout, m/s.
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

pub const STREAM_PATHS: u64 = 0;
pub const STREAM_VISIBILITY: u64 = 1;
pub const STREAM_NOISE: u64 = 2;

/// Generator for stream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// OFDM numerology and array geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub carrier_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub symbol_duration_s: f64,
    pub cp_duration_s: f64,
    /// `N_IS`, symbols between pilots.
    pub pilot_symbol_interval: usize,
    /// `N_TC`, subcarriers between pilots.
    pub comb_spacing: usize,
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    pub n_symbols: usize,
    /// Inter-antenna spacing; half a wavelength when `None`.
    pub antenna_spacing_m: Option<f64>,
}

impl SystemConfig {
    /// Full-scale scenario: 15 GHz, 128 antennas, 128 pilot subcarriers.
    pub fn table_one() -> Self {
        Self {
            carrier_hz: 15e9,
            subcarrier_spacing_hz: 60e3,
            symbol_duration_s: 16.67e-6,
            cp_duration_s: 1.17e-6,
            pilot_symbol_interval: 14,
            comb_spacing: 4,
            n_antennas: 128,
            n_subcarriers: 128,
            n_symbols: 10,
            antenna_spacing_m: None,
        }
    }

    /// Reduced array and band for desk-scale experiments.
    pub fn desk_scale() -> Self {
        Self {
            n_antennas: 32,
            n_subcarriers: 32,
            ..Self::table_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0
            || self.n_subcarriers == 0
            || self.n_symbols == 0
            || self.pilot_symbol_interval == 0
            || self.comb_spacing == 0
        {
            return Err(invalid("all counts must be >= 1"));
        }
        for (name, v) in [
            ("carrier", self.carrier_hz),
            ("subcarrier spacing", self.subcarrier_spacing_hz),
            ("symbol duration", self.symbol_duration_s),
            ("cp duration", self.cp_duration_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        if let Some(d) = self.antenna_spacing_m {
            if !(d > 0.0) {
                return Err(invalid("antenna spacing must be positive"));
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn antenna_spacing(&self) -> f64 {
        self.antenna_spacing_m.unwrap_or(0.5 * self.wavelength())
    }

    /// `ΔT = ΔT_sym + ΔT_cp`.
    pub fn symbol_period(&self) -> f64 {
        self.symbol_duration_s + self.cp_duration_s
    }

    /// `ΔT̄ = N_IS ΔT`.
    pub fn pilot_period(&self) -> f64 {
        self.pilot_symbol_interval as f64 * self.symbol_period()
    }

    /// `Δf̄ = N_TC Δf`.
    pub fn pilot_freq_spacing(&self) -> f64 {
        self.comb_spacing as f64 * self.subcarrier_spacing_hz
    }

    /// `T₀ = (N_sym − 1) ΔT̄`, the time of the last observed pilot symbol.
    pub fn prediction_origin(&self) -> f64 {
        (self.n_symbols - 1) as f64 * self.pilot_period()
    }

    /// `v f_c / c`.
    pub fn max_doppler(&self, speed_mps: f64) -> f64 {
        speed_mps * self.carrier_hz / SPEED_OF_LIGHT
    }

    pub fn sft_shape(&self) -> [usize; 3] {
        [self.n_antennas, self.n_subcarriers, self.n_symbols]
    }

    /// Array aperture `(N_an − 1) d`.
    pub fn aperture(&self) -> f64 {
        (self.n_antennas.max(1) - 1) as f64 * self.antenna_spacing()
    }
}

/// Minimum distances above which the phase-only, second-order wavefront
/// model holds: `(amplitude, phase)` in metres for amplitude threshold `zeta`.
pub fn validity_distances(cfg: &SystemConfig, zeta: f64) -> (f64, f64) {
    let d = cfg.aperture();
    let amplitude = zeta * d / (2.0 * (1.0 - zeta * zeta).sqrt());
    let phase = d.powf(4.0 / 3.0) / (2.0 * cfg.wavelength().powf(1.0 / 3.0));
    (amplitude, phase)
}

/// Physical parameters of one propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub gain: Complex64,
    /// Direction cosine `φ̃ ∈ [−1, 1]` at the first antenna.
    pub direction_cosine: f64,
    /// Distance to the last-hop scatterer; `None` for a far-field path.
    pub distance_m: Option<f64>,
    /// `η̃ = (1 − φ̃²) / (2 r̃)`, zero in the far field.
    pub slope: f64,
    pub delay_s: f64,
    pub doppler_hz: f64,
    /// Per-antenna visibility, entries 0 or 1.
    pub visibility: Vec<u8>,
}

impl PathParams {
    pub fn near_field(
        gain: Complex64,
        direction_cosine: f64,
        distance_m: f64,
        delay_s: f64,
        doppler_hz: f64,
        visibility: Vec<u8>,
    ) -> Self {
        Self {
            gain,
            direction_cosine,
            distance_m: Some(distance_m),
            slope: (1.0 - direction_cosine * direction_cosine) / (2.0 * distance_m),
            delay_s,
            doppler_hz,
            visibility,
        }
    }

    pub fn far_field(
        gain: Complex64,
        direction_cosine: f64,
        delay_s: f64,
        doppler_hz: f64,
        visibility: Vec<u8>,
    ) -> Self {
        Self {
            gain,
            direction_cosine,
            distance_m: None,
            slope: 0.0,
            delay_s,
            doppler_hz,
            visibility,
        }
    }

    pub fn visibility_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.visibility.iter().map(|&s| s as f64)
    }
}

/// A fixed set of paths, constant over the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub paths: Vec<PathParams>,
    pub seed: u64,
}

impl Scene {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Controls for [`sample_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_paths: usize,
    pub r_min: f64,
    /// `r_max = r_max_factor · r_min`.
    pub r_max_factor: f64,
    /// Terminal speed, m/s.
    pub speed_mps: f64,
    /// Probability that a path has a partial visibility region.
    pub sns_fraction: f64,
    /// Path powers follow `exp(−power_decay · l)`, normalized to unit sum.
    pub power_decay: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_paths: 4,
            r_min: 10.0,
            r_max_factor: 10.0,
            speed_mps: 60.0 / 3.6,
            sns_fraction: 0.0,
            power_decay: 0.5,
        }
    }
}

fn complex_gaussian<R: Rng>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (0.5 * variance).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

/// Draws a random scene. See the module docs for the stream layout.
pub fn sample_scene(cfg: &SystemConfig, spec: &SceneSpec, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    if spec.n_paths < 1 {
        return Err(invalid("at least one path is required"));
    }
    if !(spec.r_min > 0.0) {
        return Err(invalid("r_min must be positive"));
    }
    if !(spec.r_max_factor >= 1.0) {
        return Err(invalid("r_max_factor must be >= 1"));
    }
    if !(0.0..=1.0).contains(&spec.sns_fraction) {
        return Err(invalid("sns_fraction must lie in [0, 1]"));
    }
    let mut rng = stream_rng(seed, STREAM_PATHS);
    let mut vis_rng = stream_rng(seed, STREAM_VISIBILITY);
    let weights: Vec<f64> = (0..spec.n_paths)
        .map(|l| (-spec.power_decay * l as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let nu_max = cfg.max_doppler(spec.speed_mps);
    let r_max = spec.r_min * spec.r_max_factor;
    let n_an = cfg.n_antennas;
    let min_len = n_an.div_ceil(4).max(1);

    let paths = weights
        .iter()
        .map(|w| {
            let phi = rng.random_range(-1.0..=1.0);
            let r = if r_max > spec.r_min {
                rng.random_range(spec.r_min..=r_max)
            } else {
                spec.r_min
            };
            let tau = rng.random_range(0.0..=0.8 * cfg.cp_duration_s);
            let angle: f64 = rng.random_range(0.0..2.0 * PI);
            let nu = nu_max * angle.cos();
            let gain = complex_gaussian(&mut rng, w / total);

            let partial = vis_rng.random::<f64>() < spec.sns_fraction && n_an > min_len;
            let visibility = if partial {
                let len = vis_rng.random_range(min_len..n_an);
                let start = vis_rng.random_range(0..=n_an - len);
                (0..n_an)
                    .map(|n| u8::from(n >= start && n < start + len))
                    .collect()
            } else {
                vec![1; n_an]
            };
            PathParams::near_field(gain, phi, r, tau, nu, visibility)
        })
        .collect();
    Ok(Scene { paths, seed })
}

/// Delay difference `Δτ̃ = [−n d φ̃ + n² d² η̃] / c` of antenna `n` (zero-based)
/// relative to the first antenna.
pub fn delay_offset(p: &PathParams, antenna: usize, cfg: &SystemConfig) -> f64 {
    let nd = antenna as f64 * cfg.antenna_spacing();
    (-nd * p.direction_cosine + nd * nd * p.slope) / SPEED_OF_LIGHT
}

fn assemble(scene: &Scene, cfg: &SystemConfig, temporal: impl Fn(&PathParams) -> Vec<Complex64>, n_t: usize) -> Result<Tensor> {
    let shape = [cfg.n_antennas, cfg.n_subcarriers, n_t];
    let mut h = Tensor::zeros(&shape)?;
    let (n_an, n_sc) = (cfg.n_antennas, cfg.n_subcarriers);
    for p in &scene.paths {
        if p.visibility.len() != n_an {
            return Err(invalid("visibility length differs from the antenna count"));
        }
        let a: Vec<Complex64> = steer_beam(p.direction_cosine, p.slope, cfg)
            .into_iter()
            .zip(p.visibility_f64())
            .map(|(v, s)| v * s * p.gain)
            .collect();
        let b = steer_delay(p.delay_s, cfg);
        let c = temporal(p);
        let data = h.data_mut();
        for (t, &ct) in c.iter().enumerate() {
            for (f, &bf) in b.iter().enumerate() {
                let bc = bf * ct;
                let base = n_an * (f + n_sc * t);
                for (x, &an) in data[base..base + n_an].iter_mut().zip(&a) {
                    *x += an * bc;
                }
            }
        }
    }
    Ok(h)
}

/// SFT-domain channel `Σ_l β_l (s̃_l ⊙ a_SS) ∘ b(τ̃_l) ∘ c(ν̃_l)`,
/// `N_an × N_sc × N_sym`.
pub fn assemble_sft(scene: &Scene, cfg: &SystemConfig) -> Result<Tensor> {
    assemble(scene, cfg, |p| steer_doppler(p.doppler_hz, cfg), cfg.n_symbols)
}

/// True channel of the `horizon` symbols following the last pilot,
/// `N_an × N_sc × horizon`.
pub fn ground_truth_prediction(scene: &Scene, cfg: &SystemConfig, horizon: usize) -> Result<Tensor> {
    if horizon == 0 {
        return Err(invalid("horizon must be >= 1"));
    }
    assemble(
        scene,
        cfg,
        |p| steer_doppler_pred(p.doppler_hz, horizon, cfg),
        horizon,
    )
}

/// `Y = H + Z` with i.i.d. `CN(0, σ²)` noise drawn from [`STREAM_NOISE`].
pub fn observe(h: &Tensor, noise_var: f64, seed: u64) -> Result<Tensor> {
    if !(noise_var >= 0.0) {
        return Err(invalid("noise variance must be non-negative"));
    }
    if noise_var == 0.0 {
        return Ok(h.clone());
    }
    let mut rng = stream_rng(seed, STREAM_NOISE);
    let mut y = h.clone();
    for x in y.data_mut() {
        *x += complex_gaussian(&mut rng, noise_var);
    }
    Ok(y)
}

/// Noise variance giving `SNR = ‖H‖² / (N σ²)`.
pub fn noise_variance_for_snr(h: &Tensor, snr_db: f64) -> f64 {
    h.norm_sq() / (h.len() as f64 * 10f64.powf(snr_db / 10.0))
}
