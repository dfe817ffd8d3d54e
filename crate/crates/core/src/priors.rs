//! Bernoulli-Gaussian core-tensor prior, Bernoulli SnS prior, their scalar
//! posteriors and the M-step update rules.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::{RealMatrix, RealTensor, Tensor};

/// Floor on `M̂` in the `V̂` update.
pub const M_FLOOR: f64 = 1e-6;

/// Clamp applied to `Ŝ` before taking a logit.
pub const S_CLAMP: f64 = 1e-9;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Posterior of one Bernoulli-Gaussian entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgMoments {
    pub mean: Complex64,
    pub var: f64,
    /// Posterior support probability `π`.
    pub support: f64,
}

/// `ln [N(x; 0, v+e) / N(x; 0, e)]` for circular complex Gaussians.
fn log_evidence_ratio(x: Complex64, v: f64, e: f64) -> f64 {
    let p = x.norm_sqr();
    (e / (v + e)).ln() + p / e - p / (v + e)
}

/// Log of the on/off evidence ratio `R = m N(x;0,v+e) / ((1−m) N(x;0,e))`.
pub fn log_support_ratio(m: f64, v: f64, x: Complex64, e: f64) -> f64 {
    m.ln() - (1.0 - m).ln() + log_evidence_ratio(x, v, e)
}

/// Moments of `BG(g; m, 0, v) · CN(ĝ_lik; g, e_lik)`, normalized.
pub fn bg_posterior(m: f64, v: f64, g_lik: Complex64, e_lik: f64) -> Result<BgMoments> {
    if !(v > 0.0) || !(e_lik > 0.0) {
        return Err(invalid(format!(
            "BG posterior needs positive variances, got v={v}, e={e_lik}"
        )));
    }
    if !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("sparsity probability {m} outside [0, 1]")));
    }
    if m == 0.0 {
        return Ok(BgMoments {
            mean: Complex64::new(0.0, 0.0),
            var: 0.0,
            support: 0.0,
        });
    }
    let support = if m == 1.0 {
        1.0
    } else {
        sigmoid(log_support_ratio(m, v, g_lik, e_lik))
    };
    let cond_mean = g_lik * (v / (v + e_lik));
    let cond_var = v * e_lik / (v + e_lik);
    let mean = cond_mean * support;
    let var = (support * (cond_var + cond_mean.norm_sqr()) - mean.norm_sqr()).max(0.0);
    Ok(BgMoments { mean, var, support })
}

/// SnS posterior for one antenna/beam entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnsMoments {
    /// `Ŝ = P(s = 1 | ·)`.
    pub prob: f64,
    pub mean: Complex64,
    pub var: f64,
}

/// Posterior of binary `s` given the extrinsic message `CN(â_lik; a_ss·s, σ_lik)`
/// and the prior `P(s) ∝ exp(γ s)`.
pub fn sns_posterior(a_lik: Complex64, sigma_lik: f64, a_ss: Complex64, gamma: f64) -> Result<SnsMoments> {
    if !(sigma_lik > 0.0) {
        return Err(invalid(format!("SnS likelihood variance {sigma_lik} must be positive")));
    }
    let llr = (2.0 * (a_lik.conj() * a_ss).re - a_ss.norm_sqr()) / sigma_lik;
    let prob = sigmoid(gamma + llr);
    Ok(SnsMoments {
        prob,
        mean: a_ss * prob,
        var: a_ss.norm_sqr() * prob * (1.0 - prob),
    })
}

/// Learning rule for the SnS prior weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GammaRule {
    /// `Γ̂ = Ŝ ⊘ (1 + Ŝ)`.
    #[default]
    Ratio,
    /// `Γ̂ = ln(Ŝ ⊘ (1 − Ŝ))`.
    Logit,
}

impl std::str::FromStr for GammaRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ratio" => Ok(Self::Ratio),
            "logit" => Ok(Self::Logit),
            _ => Err(invalid(format!("unknown gamma rule {s:?}"))),
        }
    }
}

pub fn update_gamma_scalar(s: f64, rule: GammaRule) -> f64 {
    match rule {
        GammaRule::Ratio => s / (1.0 + s),
        GammaRule::Logit => {
            let s = s.clamp(S_CLAMP, 1.0 - S_CLAMP);
            (s / (1.0 - s)).ln()
        }
    }
}

pub fn update_gamma(s_hat: &RealMatrix, rule: GammaRule) -> RealMatrix {
    s_hat.map(|s| update_gamma_scalar(s, rule))
}

/// Element-wise Bernoulli-Gaussian prior of the BDD core tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BgPrior {
    /// Sparsity probabilities `M̂`.
    pub m: RealTensor,
    /// Active-entry variances `V̂`.
    pub v: RealTensor,
}

impl BgPrior {
    pub fn uniform(shape: &[usize], m: f64, v: f64) -> Result<Self> {
        let p = Self {
            m: RealTensor::filled(shape, m)?,
            v: RealTensor::filled(shape, v)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m.shape() != self.v.shape() {
            return Err(Error::ShapeMismatch("M and V shapes differ".into()));
        }
        if self.m.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(invalid("M entries must lie in [0, 1]"));
        }
        if self.v.data().iter().any(|v| !(*v > 0.0)) {
            return Err(invalid("V entries must be positive"));
        }
        Ok(())
    }

    /// Prior variance `M ⊙ V` of each entry.
    pub fn variance(&self) -> RealTensor {
        self.m.zip_map(&self.v, |m, v| m * v).expect("validated shapes")
    }
}

/// Bernoulli prior of the SnS matrix, `P(S) ∝ exp(⟨Γ, S⟩)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SnsPrior {
    pub gamma: RealMatrix,
}

impl SnsPrior {
    pub fn uniform(n_antennas: usize, k_beam: usize, gamma: f64) -> Self {
        Self {
            gamma: RealMatrix::from_fn(n_antennas, k_beam, |_, _| gamma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma.data().iter().any(|g| !g.is_finite()) {
            return Err(invalid("SnS weights must be finite"));
        }
        Ok(())
    }
}

/// Element-wise BG posterior over whole tensors: returns `(Ĝ, E_G_post, π)`.
pub fn bg_posterior_tensor(
    prior: &BgPrior,
    g_lik: &Tensor,
    e_lik: &RealTensor,
) -> Result<(Tensor, RealTensor, RealTensor)> {
    if g_lik.shape() != prior.m.shape() || e_lik.shape() != prior.m.shape() {
        return Err(Error::ShapeMismatch("BG posterior operands".into()));
    }
    let n = g_lik.len();
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    for i in 0..n {
        let r = bg_posterior(prior.m.data()[i], prior.v.data()[i], g_lik.data()[i], e_lik.data()[i])?;
        mean.push(r.mean);
        var.push(r.var);
        support.push(r.support);
    }
    let shape = g_lik.shape();
    Ok((
        Tensor::from_vec(shape, mean)?,
        RealTensor::from_vec(shape, var)?,
        RealTensor::from_vec(shape, support)?,
    ))
}

/// `(M̂', V̂')` from the evidence ratio `R_G` and the posterior second moments.
pub fn update_bg(
    prior: &BgPrior,
    g_lik: &Tensor,
    e_g_lik: &RealTensor,
    g_post: &Tensor,
    e_g_post: &RealTensor,
) -> Result<BgPrior> {
    let shape = prior.m.shape();
    for s in [g_lik.shape(), e_g_lik.shape(), g_post.shape(), e_g_post.shape()] {
        if s != shape {
            return Err(Error::ShapeMismatch("BG update operands".into()));
        }
    }
    let n = prior.m.len();
    let mut m_new = Vec::with_capacity(n);
    let mut v_new = Vec::with_capacity(n);
    for i in 0..n {
        let (m, v, e) = (prior.m.data()[i], prior.v.data()[i], e_g_lik.data()[i]);
        if !(v > 0.0) || !(e > 0.0) || !(e_g_post.data()[i] >= 0.0) {
            return Err(invalid("BG update needs positive variances"));
        }
        let m1 = match m {
            m if m <= 0.0 => 0.0,
            m if m >= 1.0 => 1.0,
            m => sigmoid(log_support_ratio(m, v, g_lik.data()[i], e)),
        };
        let second = e_g_post.data()[i] + g_post.data()[i].norm_sqr();
        m_new.push(m1);
        // a vanishing second moment would make V̂ zero; keep the old value
        v_new.push(if second > 0.0 { second / m1.max(M_FLOOR) } else { v });
    }
    Ok(BgPrior {
        m: RealTensor::from_vec(shape, m_new)?,
        v: RealTensor::from_vec(shape, v_new)?,
    })
}
