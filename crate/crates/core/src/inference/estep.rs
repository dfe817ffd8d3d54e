//! Bi-layer E-step: linear GAMP module (`W → H`), bilinear BiGAMP module
//! (`G, A → W`) and SnS detection.
//!
//! Residual variances use the positive convention
//! `E_res = (E_pri − E_post) ⊘ E_pri^⊙2`, so the extrinsic likelihood
//! variances `1 ⊘ (E_res × ...)` stay positive.

use super::state::{floor_var, floor_var_matrix, Factors, Hyperparams, InferenceState};
use crate::error::{invalid, Result};
use crate::priors::{bg_posterior_tensor, sns_posterior, BgPrior};
use crate::tensor::{Matrix, ModeOrder, RealMatrix, RealTensor, Tensor, DIV_FLOOR};

/// A single traced value.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceValue {
    Complex(Tensor),
    Real(RealTensor),
    Matrix(Matrix),
    RealMatrix(RealMatrix),
}

/// Outputs of every E-step line in execution order, keyed `"<line>:<name>"`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub entries: Vec<(String, TraceValue)>,
}

impl Trace {
    pub fn get(&self, key: &str) -> Option<&TraceValue> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    fn push(&mut self, key: &str, v: TraceValue) {
        self.entries.push((key.to_string(), v));
    }
}

fn record(trace: &mut Option<&mut Trace>, key: &str, v: impl FnOnce() -> TraceValue) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(key, v());
    }
}

fn prod2(x: &Tensor, b: &Matrix, c: &Matrix) -> Result<Tensor> {
    x.multi_mode_product(&[(b, 1), (c, 2)], ModeOrder::SizeAware)
}

fn prod2_real(x: &RealTensor, b: &RealMatrix, c: &RealMatrix) -> Result<RealTensor> {
    x.multi_mode_product(&[(b, 1), (c, 2)], ModeOrder::SizeAware)
}

fn recip(x: &RealTensor) -> RealTensor {
    x.recip(DIV_FLOOR)
}

fn recip_m(x: &RealMatrix) -> RealMatrix {
    x.map(|v| 1.0 / crate::tensor::floored(v, DIV_FLOOR))
}

/// Lines 2–8: posterior of `H` and the extrinsic message to `W`.
pub fn linear_module(
    state: &InferenceState,
    y: &Tensor,
    noise_var: f64,
    b: &Matrix,
    c: &Matrix,
    mut trace: Option<&mut Trace>,
) -> Result<InferenceState> {
    if !(noise_var >= 0.0) {
        return Err(invalid("noise variance must be non-negative"));
    }
    let mut st = state.clone();
    let hits = &mut st.floor_hits;
    let (b2, c2) = (b.abs_sq(), c.abs_sq());

    // line 2
    st.e_h_pri = floor_var(prod2_real(&state.e_w, &b2, &c2)?, hits);
    record(&mut trace, "2:e_h_pri", || TraceValue::Real(st.e_h_pri.clone()));

    // line 3
    st.h_pri = prod2(&state.w, b, c)?.sub(&state.h_res.mul_real(&st.e_h_pri)?)?;
    record(&mut trace, "3:h_pri", || TraceValue::Complex(st.h_pri.clone()));

    // line 4
    if noise_var == 0.0 {
        st.h = y.clone();
        st.e_h = floor_var(RealTensor::zeros(y.shape())?, hits);
    } else {
        let e_pri = &st.e_h_pri;
        let num = y.mul_real(e_pri)?.add(&st.h_pri.scale(noise_var))?;
        let den = e_pri.map(|e| e + noise_var);
        st.h = num.div_real(&den, DIV_FLOOR)?;
        st.e_h = floor_var(e_pri.map(|e| e * noise_var / (e + noise_var)), hits);
    }
    record(&mut trace, "4:h", || TraceValue::Complex(st.h.clone()));
    record(&mut trace, "4:e_h", || TraceValue::Real(st.e_h.clone()));

    // line 5
    st.e_h_res = floor_var(
        st.e_h_pri.zip_map(&st.e_h, |p, q| (p - q) / (p * p))?,
        hits,
    );
    record(&mut trace, "5:e_h_res", || TraceValue::Real(st.e_h_res.clone()));

    // line 6
    st.h_res = st.h.sub(&st.h_pri)?.div_real(&st.e_h_pri, DIV_FLOOR)?;
    record(&mut trace, "6:h_res", || TraceValue::Complex(st.h_res.clone()));

    // line 7
    st.e_w_lik = floor_var(
        recip(&prod2_real(&st.e_h_res, &b2.transpose(), &c2.transpose())?),
        hits,
    );
    record(&mut trace, "7:e_w_lik", || TraceValue::Real(st.e_w_lik.clone()));

    // line 8
    let back = prod2(&st.h_res, &b.conj_transpose(), &c.conj_transpose())?;
    st.w_lik = state.w.add(&back.mul_real(&st.e_w_lik)?)?;
    record(&mut trace, "8:w_lik", || TraceValue::Complex(st.w_lik.clone()));
    Ok(st)
}

/// Lines 9–19 plus SnS detection.
pub fn bilinear_module(
    state: &InferenceState,
    prior: &BgPrior,
    a_ss: &Matrix,
    gamma: &RealMatrix,
    mut trace: Option<&mut Trace>,
) -> Result<InferenceState> {
    let mut st = state.clone();
    let hits = &mut st.floor_hits;
    let a = &state.a;
    let a2 = a.abs_sq();
    let sig = &state.sigma_a;

    // line 9
    let e_w_plug = state
        .e_g
        .mode_product(&a2, 0)?
        .add(&state.g.abs_sq().mode_product(sig, 0)?)?;
    record(&mut trace, "9:e_w_plug", || TraceValue::Real(e_w_plug.clone()));

    // line 10
    st.w_pri = state
        .g
        .mode_product(a, 0)?
        .sub(&state.w_res.mul_real(&e_w_plug)?)?;
    record(&mut trace, "10:w_pri", || TraceValue::Complex(st.w_pri.clone()));

    // line 11
    st.e_w_pri = floor_var(e_w_plug.add(&state.e_g.mode_product(sig, 0)?)?, hits);
    record(&mut trace, "11:e_w_pri", || TraceValue::Real(st.e_w_pri.clone()));

    // line 12: product of the prior and likelihood Gaussians of W
    let prec = st
        .e_w_pri
        .zip_map(&st.e_w_lik, |p, l| 1.0 / p + 1.0 / l)?;
    st.e_w = floor_var(recip(&prec), hits);
    let info = st
        .w_pri
        .div_real(&st.e_w_pri, DIV_FLOOR)?
        .add(&st.w_lik.div_real(&st.e_w_lik, DIV_FLOOR)?)?;
    st.w = info.mul_real(&st.e_w)?;
    record(&mut trace, "12:w", || TraceValue::Complex(st.w.clone()));
    record(&mut trace, "12:e_w", || TraceValue::Real(st.e_w.clone()));

    // line 13
    st.e_w_res = floor_var(
        st.e_w_pri.zip_map(&st.e_w, |p, q| (p - q) / (p * p))?,
        hits,
    );
    record(&mut trace, "13:e_w_res", || TraceValue::Real(st.e_w_res.clone()));

    // line 14
    st.w_res = st.w.sub(&st.w_pri)?.div_real(&st.e_w_pri, DIV_FLOOR)?;
    record(&mut trace, "14:w_res", || TraceValue::Complex(st.w_res.clone()));

    // line 15
    st.e_g_lik = floor_var(recip(&st.e_w_res.mode_product(&a2.transpose(), 0)?), hits);
    record(&mut trace, "15:e_g_lik", || TraceValue::Real(st.e_g_lik.clone()));

    // line 16
    let onsager = st.e_w_res.mode_product(&sig.transpose(), 0)?;
    let corr = st.e_g_lik.zip_map(&onsager, |e, o| e * o)?;
    let back = st.w_res.mode_product(&a.conj_transpose(), 0)?;
    st.g_lik = state
        .g
        .sub(&state.g.mul_real(&corr)?)?
        .add(&back.mul_real(&st.e_g_lik)?)?;
    record(&mut trace, "16:g_lik", || TraceValue::Complex(st.g_lik.clone()));

    // line 17
    let (g, e_g, support) = bg_posterior_tensor(prior, &st.g_lik, &st.e_g_lik)?;
    st.g = g;
    st.e_g = floor_var(e_g, hits);
    st.g_support = support;
    record(&mut trace, "17:g", || TraceValue::Complex(st.g.clone()));
    record(&mut trace, "17:e_g", || TraceValue::Real(st.e_g.clone()));

    // line 18
    let g2 = st.g.abs_sq();
    st.sigma_a_lik = floor_var_matrix(recip_m(&st.e_w_res.contract_except(&g2, 0)?), hits);
    record(&mut trace, "18:sigma_a_lik", || TraceValue::RealMatrix(st.sigma_a_lik.clone()));

    // line 19
    let onsager_a = st.e_w_res.contract_except(&st.e_g, 0)?;
    let back_a = st.w_res.contract_except(&st.g.conj(), 0)?;
    st.a_lik = Matrix::from_fn(a.rows(), a.cols(), |n, k| {
        let s = st.sigma_a_lik[(n, k)];
        a[(n, k)] - a[(n, k)] * (s * onsager_a[(n, k)]) + back_a[(n, k)] * s
    });
    record(&mut trace, "19:a_lik", || TraceValue::Matrix(st.a_lik.clone()));

    // SnS detection
    let (rows, cols) = (a.rows(), a.cols());
    let mut s_hat = RealMatrix::zeros(rows, cols);
    let mut a_hat = Matrix::zeros(rows, cols);
    let mut sig_post = RealMatrix::zeros(rows, cols);
    for k in 0..cols {
        for n in 0..rows {
            let p = sns_posterior(st.a_lik[(n, k)], st.sigma_a_lik[(n, k)], a_ss[(n, k)], gamma[(n, k)])?;
            s_hat[(n, k)] = p.prob;
            a_hat[(n, k)] = p.mean;
            sig_post[(n, k)] = p.var;
        }
    }
    st.s = s_hat;
    st.a = a_hat;
    st.sigma_a = floor_var_matrix(sig_post, hits);
    record(&mut trace, "20:s", || TraceValue::RealMatrix(st.s.clone()));
    record(&mut trace, "20:a", || TraceValue::Matrix(st.a.clone()));
    record(&mut trace, "20:sigma_a", || TraceValue::RealMatrix(st.sigma_a.clone()));
    Ok(st)
}

/// `t_e` inner iterations of both modules, damped after each.
pub fn e_step(
    state: &InferenceState,
    y: &Tensor,
    hyper: &Hyperparams,
    factors: &Factors,
    t_e: usize,
    damp: f64,
    mut trace: Option<&mut Trace>,
) -> Result<InferenceState> {
    if t_e == 0 {
        return Err(invalid("the E-step needs at least one inner iteration"));
    }
    if !(0.0..=1.0).contains(&damp) {
        return Err(invalid(format!("damping {damp} outside [0, 1]")));
    }
    let mut st = state.clone();
    for _ in 0..t_e {
        let lin = linear_module(&st, y, hyper.noise_var, &factors.b, &factors.c, trace.as_deref_mut())?;
        let cand = bilinear_module(&lin, &hyper.bg, &factors.a_ss, &hyper.sns.gamma, trace.as_deref_mut())?;
        st = cand.damped(&st, damp);
    }
    Ok(st)
}

/// `Ĝ ×₁ Â ×₂ B ×₃ C`, the Tucker-form channel of the current state.
pub fn tucker(g: &Tensor, a: &Matrix, b: &Matrix, c: &Matrix) -> Result<Tensor> {
    g.multi_mode_product(&[(a, 0), (b, 1), (c, 2)], ModeOrder::SizeAware)
}
