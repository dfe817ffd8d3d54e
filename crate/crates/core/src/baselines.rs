//! NMSE metric and two reference predictors: an aging-unaware stale-CSI
//! predictor and a far-field OMP + single-pole Prony predictor.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::SystemConfig;
use crate::error::{invalid, Error, Result};
use crate::factors::{beam_matrices, delay_matrices};
use crate::tensor::{Matrix, Tensor};

/// Largest allowed Prony pole modulus before it is pulled onto the unit circle.
pub const PRONY_POLE_LIMIT: f64 = 1.05;

/// `‖Ĥ − H‖²_F / ‖H‖²_F`.
pub fn nmse(estimate: &Tensor, truth: &Tensor) -> Result<f64> {
    let den = truth.norm_sq();
    if !(den > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(estimate.sub(truth)?.norm_sq() / den)
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// NMSE of every slice along the last mode.
pub fn per_horizon_nmse(estimate: &Tensor, truth: &Tensor) -> Result<Vec<f64>> {
    if estimate.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let last = truth.order() - 1;
    let slice = truth.len() / truth.shape()[last].max(1);
    (0..truth.shape()[last])
        .map(|t| {
            let (e, h) = (
                &estimate.data()[t * slice..(t + 1) * slice],
                &truth.data()[t * slice..(t + 1) * slice],
            );
            let den: f64 = h.iter().map(|x| x.norm_sqr()).sum();
            if !(den > 0.0) {
                return Err(Error::ZeroNorm);
            }
            Ok(e.iter().zip(h).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>() / den)
        })
        .collect()
}

/// Output of a reference predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub method: &'static str,
    /// `N_an × N_sc × horizon`.
    pub prediction: Tensor,
    /// In-frame reconstruction, when the method builds one.
    pub fitted: Option<Tensor>,
}

impl BaselineResult {
    pub fn per_horizon_nmse(&self, truth: &Tensor) -> Result<Vec<f64>> {
        per_horizon_nmse(&self.prediction, truth)
    }
}

fn last_slice(y: &Tensor) -> Vec<Complex64> {
    let s = y.shape();
    let n = s[0] * s[1];
    y.data()[n * (s[2] - 1)..].to_vec()
}

fn repeat_slices(shape01: [usize; 2], slices: impl Fn(usize) -> Vec<Complex64>, horizon: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(shape01[0] * shape01[1] * horizon);
    for t in 0..horizon {
        data.extend(slices(t));
    }
    Tensor::from_vec(&[shape01[0], shape01[1], horizon], data)
}

/// Last pilot slice after a global MMSE shrink `P̂ / (P̂ + σ²)`, with
/// `P̂ = max(mean|Y|² − σ², 0)`, held over the horizon.
pub fn stale_csi(y: &Tensor, noise_var: f64, horizon: usize) -> Result<BaselineResult> {
    if y.order() != 3 {
        return Err(invalid("observation must be an order-3 tensor"));
    }
    if !(noise_var >= 0.0) {
        return Err(invalid("noise variance must be non-negative"));
    }
    if horizon == 0 {
        return Err(invalid("horizon must be >= 1"));
    }
    let p = (y.norm_sq() / y.len() as f64 - noise_var).max(0.0);
    let alpha = if p + noise_var > 0.0 { p / (p + noise_var) } else { 0.0 };
    let last: Vec<Complex64> = last_slice(y).into_iter().map(|x| x * alpha).collect();
    let s = y.shape();
    let prediction = repeat_slices([s[0], s[1]], |_| last.clone(), horizon)?;
    Ok(BaselineResult {
        method: "stale_csi",
        prediction,
        fitted: None,
    })
}

/// Dictionary sizes and sparsity of [`omp_prony`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmpConfig {
    pub n_angles: usize,
    pub n_delays: usize,
    pub sparsity: usize,
}

/// `(z, c)` minimizing `Σ |x[n] − c zⁿ|²` with `z` from the one-step
/// linear prediction `Σ x[n+1] x[n]* / Σ |x[n]|²`.
pub fn prony_single_pole(x: &[Complex64]) -> (Complex64, Complex64) {
    if x.len() < 2 {
        return (Complex64::new(1.0, 0.0), x.first().copied().unwrap_or_default());
    }
    let num: Complex64 = x.windows(2).map(|w| w[1] * w[0].conj()).sum();
    let den: f64 = x[..x.len() - 1].iter().map(|v| v.norm_sqr()).sum();
    let mut z = if den > 0.0 { num / den } else { Complex64::new(1.0, 0.0) };
    if !(z.norm() > 0.0) {
        z = Complex64::new(1.0, 0.0);
    }
    if z.norm() > PRONY_POLE_LIMIT {
        z /= z.norm();
    }
    let powers: Vec<Complex64> = (0..x.len()).map(|n| z.powu(n as u32)).collect();
    let num: Complex64 = x.iter().zip(&powers).map(|(a, p)| a * p.conj()).sum();
    let den: f64 = powers.iter().map(|p| p.norm_sqr()).sum();
    (z, num / den)
}

/// `c · z^u` for a real exponent `u`, in polar form.
pub fn prony_eval(z: Complex64, c: Complex64, u: f64) -> Complex64 {
    c * Complex64::from_polar(z.norm().powf(u), z.arg() * u)
}

fn solve_complex(g: &DMatrix<Complex64>, rhs: &DVector<Complex64>) -> Result<DVector<Complex64>> {
    g.clone()
        .lu()
        .solve(rhs)
        .ok_or_else(|| invalid("singular OMP Gram matrix"))
}

/// OMP over the far-field Kronecker angle-delay dictionary on the first pilot
/// symbol, per-symbol least-squares tap refit, one Prony pole per tap,
/// extrapolation to `n_cp = 1..=horizon`. With `horizon = 0` the prediction
/// is empty and only the least-squares refit is returned.
pub fn omp_prony(y: &Tensor, cfg: &SystemConfig, omp: &OmpConfig, horizon: usize) -> Result<BaselineResult> {
    cfg.validate()?;
    if y.shape() != cfg.sft_shape() {
        return Err(Error::ShapeMismatch("observation shape".into()));
    }
    if omp.sparsity == 0 || omp.n_angles == 0 || omp.n_delays == 0 {
        return Err(invalid("OMP sizes must be >= 1"));
    }
    let (n_an, n_sc, n_sym) = (cfg.n_antennas, cfg.n_subcarriers, cfg.n_symbols);
    let angles: Vec<f64> = (0..omp.n_angles)
        .map(|k| -1.0 + 2.0 * k as f64 / omp.n_angles as f64)
        .collect();
    let delays: Vec<f64> = if omp.n_delays == 1 {
        vec![0.0]
    } else {
        (0..omp.n_delays)
            .map(|k| cfg.cp_duration_s * k as f64 / (omp.n_delays - 1) as f64)
            .collect()
    };
    let (a_dict, _, _) = beam_matrices(&angles, &vec![0.0; angles.len()], cfg);
    let (b_dict, _) = delay_matrices(&delays, cfg);
    let slice = |t: usize| Matrix::from_col_major(n_an, n_sc, y.data()[t * n_an * n_sc..(t + 1) * n_an * n_sc].to_vec());

    // correlations <a_i ⊗ b_j, R> = (Aᴴ R B̄)_{ij}
    let a_h = a_dict.conj_transpose();
    let b_bar = b_dict.conj();
    let corr = |r: &Matrix| -> Result<Matrix> { a_h.matmul(r)?.matmul(&b_bar) };
    let atom_inner = |p: (usize, usize), q: (usize, usize)| -> Complex64 {
        let aa: Complex64 = a_dict.column(p.0).iter().zip(a_dict.column(q.0)).map(|(x, y)| x.conj() * y).sum();
        let bb: Complex64 = b_dict.column(p.1).iter().zip(b_dict.column(q.1)).map(|(x, y)| x.conj() * y).sum();
        aa * bb
    };

    let y0 = slice(0)?;
    let energy0 = y0.fro_norm().powi(2);
    let mut support: Vec<(usize, usize)> = Vec::new();
    let mut residual = y0.clone();
    let mut coef = DVector::<Complex64>::zeros(0);
    let gram_of = |s: &[(usize, usize)]| DMatrix::from_fn(s.len(), s.len(), |i, j| atom_inner(s[i], s[j]));
    let max_atoms = omp.sparsity.min(omp.n_angles * omp.n_delays);
    while support.len() < max_atoms {
        if residual.fro_norm().powi(2) <= 1e-12 * energy0 {
            break;
        }
        let c = corr(&residual)?;
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for j in 0..c.cols() {
            for i in 0..c.rows() {
                let v = c[(i, j)].norm_sqr();
                if v > best_v && !support.contains(&(i, j)) {
                    best_v = v;
                    best = (i, j);
                }
            }
        }
        support.push(best);
        let cy = corr(&y0)?;
        let rhs = DVector::from_iterator(support.len(), support.iter().map(|&(i, j)| cy[(i, j)]));
        coef = solve_complex(&gram_of(&support), &rhs)?;
        residual = y0.clone();
        for (p, &(i, j)) in support.iter().enumerate() {
            let (a, b) = (a_dict.column(i), b_dict.column(j));
            for f in 0..n_sc {
                for n in 0..n_an {
                    residual[(n, f)] -= coef[p] * a[n] * b[f];
                }
            }
        }
    }
    let _ = coef;

    // per-symbol least-squares tap refit
    let gram = gram_of(&support);
    let mut taps = vec![vec![Complex64::new(0.0, 0.0); n_sym]; support.len()];
    for t in 0..n_sym {
        let cy = corr(&slice(t)?)?;
        let rhs = DVector::from_iterator(support.len(), support.iter().map(|&(i, j)| cy[(i, j)]));
        let x = if support.is_empty() { rhs } else { solve_complex(&gram, &rhs)? };
        for (p, v) in x.iter().enumerate() {
            taps[p][t] = *v;
        }
    }
    let synth = |weights: &dyn Fn(usize) -> Complex64| -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); n_an * n_sc];
        for (p, &(i, j)) in support.iter().enumerate() {
            let w = weights(p);
            let (a, b) = (a_dict.column(i), b_dict.column(j));
            for f in 0..n_sc {
                let wb = w * b[f];
                for n in 0..n_an {
                    out[n + n_an * f] += a[n] * wb;
                }
            }
        }
        out
    };
    let fitted = repeat_slices([n_an, n_sc], |t| synth(&|p| taps[p][t]), n_sym)?;

    let poles: Vec<(Complex64, Complex64)> = taps.iter().map(|x| prony_single_pole(x)).collect();
    let prediction = if horizon == 0 {
        Tensor::empty(&[n_an, n_sc, 0])?
    } else {
        let (t0, dt, dtp) = (cfg.prediction_origin(), cfg.symbol_period(), cfg.pilot_period());
        repeat_slices(
            [n_an, n_sc],
            |h| {
                let u = (t0 + (h + 1) as f64 * dt) / dtp;
                synth(&|p| prony_eval(poles[p].0, poles[p].1, u))
            },
            horizon,
        )?
    };
    Ok(BaselineResult {
        method: "omp_prony",
        prediction,
        fitted: Some(fitted),
    })
}
