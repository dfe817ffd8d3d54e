mod common;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use tsbli::channel::{assemble_sft, observe, sample_scene, SceneSpec, SystemConfig};
use tsbli::factors::{steer_beam, GridSpec, PerturbationLimits, Perturbations};
use tsbli::inference::{
    bilinear_module, e_step, em_loop, fitted, initialize, j_nu, j_phi_eta, j_tau, linear_module,
    m_step_perturbations, predict, quadratic_nu, quadratic_phi_eta, quadratic_tau, Expansion, Factors,
    Hyperparams, InferenceConfig, InferenceState, Trace, TraceValue, TRUST_TOL, VAR_FLOOR,
};
use tsbli::priors::bg_posterior;
use tsbli::tensor::{Matrix, RealMatrix, RealTensor, Tensor};

type C = Complex64;

fn tiny() -> SystemConfig {
    SystemConfig {
        n_antennas: 4,
        n_subcarriers: 4,
        n_symbols: 2,
        ..SystemConfig::table_one()
    }
}

fn small() -> SystemConfig {
    SystemConfig {
        n_antennas: 8,
        n_subcarriers: 8,
        n_symbols: 4,
        ..SystemConfig::table_one()
    }
}

fn grids_for(cfg: &SystemConfig, k: [usize; 3]) -> GridSpec {
    GridSpec::uniform(cfg, k[0], k[1], k[2], cfg.max_doppler(60.0 / 3.6)).unwrap()
}

fn problem(cfg: &SystemConfig, seed: u64, snr_db: f64) -> (Tensor, f64) {
    let scene = sample_scene(cfg, &SceneSpec { n_paths: 2, sns_fraction: 0.5, ..SceneSpec::default() }, seed).unwrap();
    let h = assemble_sft(&scene, cfg).unwrap();
    let nv = tsbli::channel::noise_variance_for_snr(&h, snr_db);
    (observe(&h, nv, seed).unwrap(), nv)
}

/// A state with nonzero residuals and uneven SnS beliefs.
fn warm_state(cfg: &SystemConfig, grids: &GridSpec, seed: u64) -> (InferenceState, Hyperparams, Factors, Tensor) {
    let (y, nv) = problem(cfg, seed, 15.0);
    let icfg = InferenceConfig::default();
    let (mut st, mut hyper) = initialize(&y, nv, cfg, grids, &icfg).unwrap();
    let f = Factors::new(grids, &hyper.pert, cfg).unwrap();
    st = e_step(&st, &y, &hyper, &f, 2, 0.7, None).unwrap();
    let mut r = rng(seed + 100);
    use rand::Rng;
    hyper.sns.gamma = RealMatrix::from_fn(cfg.n_antennas, grids.beam.len(), |_, _| r.random_range(-1.0..1.0));
    hyper.bg.m = rand_real_tensor(&mut r, hyper.bg.m.shape(), 0.05, 0.9);
    (st, hyper, f, y)
}

fn fl(x: f64) -> f64 {
    if x >= VAR_FLOOR {
        x
    } else {
        VAR_FLOOR
    }
}

/// One pass of the bi-layer E-step written with explicit index loops.
fn reference_pass(
    st: &InferenceState,
    y: &Tensor,
    hyper: &Hyperparams,
    f: &Factors,
) -> Vec<(&'static str, Vec<f64>)> {
    let (b, cm, a_ss) = (&f.b, &f.c, &f.a_ss);
    let nv = hyper.noise_var;
    let [n_an, n_sc, n_t] = [y.shape()[0], y.shape()[1], y.shape()[2]];
    let [kb, kd, kn] = [st.g.shape()[0], st.g.shape()[1], st.g.shape()[2]];
    let hs = [n_an, n_sc, n_t];
    let ws = [n_an, kd, kn];
    let gs = [kb, kd, kn];
    let rt = |shape: &[usize], f: &dyn Fn(usize, usize, usize) -> f64| {
        RealTensor::from_fn(shape, |i| f(i[0], i[1], i[2])).unwrap()
    };
    let ct = |shape: &[usize], f: &dyn Fn(usize, usize, usize) -> C| {
        Tensor::from_fn(shape, |i| f(i[0], i[1], i[2])).unwrap()
    };
    let mut out: Vec<(&'static str, Vec<f64>)> = Vec::new();
    let mut push_r = |k: &'static str, t: &RealTensor| out.push((k, t.data().to_vec()));
    let flat = |t: &Tensor| t.data().iter().flat_map(|z| [z.re, z.im]).collect::<Vec<_>>();

    // linear module
    let e_h_pri = rt(&hs, &|n, fq, t| {
        let mut s = 0.0;
        for d in 0..kd {
            for v in 0..kn {
                s += st.e_w.get(&[n, d, v]) * b[(fq, d)].norm_sqr() * cm[(t, v)].norm_sqr();
            }
        }
        fl(s)
    });
    let h_pri = ct(&hs, &|n, fq, t| {
        let mut s = C::new(0.0, 0.0);
        for d in 0..kd {
            for v in 0..kn {
                s += st.w.get(&[n, d, v]) * b[(fq, d)] * cm[(t, v)];
            }
        }
        s - st.h_res.get(&[n, fq, t]) * e_h_pri.get(&[n, fq, t])
    });
    let h = ct(&hs, &|n, fq, t| {
        let (p, hp) = (e_h_pri.get(&[n, fq, t]), h_pri.get(&[n, fq, t]));
        (y.get(&[n, fq, t]) * p + hp * nv) / (p + nv)
    });
    let e_h = rt(&hs, &|n, fq, t| {
        let p = e_h_pri.get(&[n, fq, t]);
        fl(p * nv / (p + nv))
    });
    let e_h_res = rt(&hs, &|n, fq, t| {
        let p = e_h_pri.get(&[n, fq, t]);
        fl((p - e_h.get(&[n, fq, t])) / (p * p))
    });
    let h_res = ct(&hs, &|n, fq, t| (h.get(&[n, fq, t]) - h_pri.get(&[n, fq, t])) / e_h_pri.get(&[n, fq, t]));
    let e_w_lik = rt(&ws, &|n, d, v| {
        let mut s = 0.0;
        for fq in 0..n_sc {
            for t in 0..n_t {
                s += e_h_res.get(&[n, fq, t]) * b[(fq, d)].norm_sqr() * cm[(t, v)].norm_sqr();
            }
        }
        fl(1.0 / s)
    });
    let w_lik = ct(&ws, &|n, d, v| {
        let mut s = C::new(0.0, 0.0);
        for fq in 0..n_sc {
            for t in 0..n_t {
                s += h_res.get(&[n, fq, t]) * b[(fq, d)].conj() * cm[(t, v)].conj();
            }
        }
        st.w.get(&[n, d, v]) + s * e_w_lik.get(&[n, d, v])
    });
    push_r("2:e_h_pri", &e_h_pri);
    out.push(("3:h_pri", flat(&h_pri)));
    out.push(("4:h", flat(&h)));
    out.push(("4:e_h", e_h.data().to_vec()));
    out.push(("5:e_h_res", e_h_res.data().to_vec()));
    out.push(("6:h_res", flat(&h_res)));
    out.push(("7:e_w_lik", e_w_lik.data().to_vec()));
    out.push(("8:w_lik", flat(&w_lik)));

    // bilinear module; Â, Σ_A, Ĝ, E_G come from the input state
    let (a, sig) = (&st.a, &st.sigma_a);
    let e_w_plug = rt(&ws, &|n, d, v| {
        (0..kb)
            .map(|k| st.e_g.get(&[k, d, v]) * a[(n, k)].norm_sqr() + st.g.get(&[k, d, v]).norm_sqr() * sig[(n, k)])
            .sum()
    });
    let w_pri = ct(&ws, &|n, d, v| {
        let s: C = (0..kb).map(|k| st.g.get(&[k, d, v]) * a[(n, k)]).sum();
        s - st.w_res.get(&[n, d, v]) * e_w_plug.get(&[n, d, v])
    });
    let e_w_pri = rt(&ws, &|n, d, v| {
        let s: f64 = (0..kb).map(|k| st.e_g.get(&[k, d, v]) * sig[(n, k)]).sum();
        fl(e_w_plug.get(&[n, d, v]) + s)
    });
    let e_w = rt(&ws, &|n, d, v| fl(1.0 / (1.0 / e_w_pri.get(&[n, d, v]) + 1.0 / e_w_lik.get(&[n, d, v]))));
    let w = ct(&ws, &|n, d, v| {
        let i = [n, d, v];
        (w_pri.get(&i) / e_w_pri.get(&i) + w_lik.get(&i) / e_w_lik.get(&i)) * e_w.get(&i)
    });
    let e_w_res = rt(&ws, &|n, d, v| {
        let p = e_w_pri.get(&[n, d, v]);
        fl((p - e_w.get(&[n, d, v])) / (p * p))
    });
    let w_res = ct(&ws, &|n, d, v| (w.get(&[n, d, v]) - w_pri.get(&[n, d, v])) / e_w_pri.get(&[n, d, v]));
    let e_g_lik = rt(&gs, &|k, d, v| {
        let s: f64 = (0..n_an).map(|n| e_w_res.get(&[n, d, v]) * a[(n, k)].norm_sqr()).sum();
        fl(1.0 / s)
    });
    let g_lik = ct(&gs, &|k, d, v| {
        let g0 = st.g.get(&[k, d, v]);
        let e = e_g_lik.get(&[k, d, v]);
        let ons: f64 = (0..n_an).map(|n| e_w_res.get(&[n, d, v]) * sig[(n, k)]).sum();
        let back: C = (0..n_an).map(|n| w_res.get(&[n, d, v]) * a[(n, k)].conj()).sum();
        g0 - g0 * e * ons + back * e
    });
    let post: Vec<_> = (0..g_lik.len())
        .map(|i| bg_posterior(hyper.bg.m.data()[i], hyper.bg.v.data()[i], g_lik.data()[i], e_g_lik.data()[i]).unwrap())
        .collect();
    let g = Tensor::from_vec(&gs, post.iter().map(|p| p.mean).collect()).unwrap();
    let e_g = RealTensor::from_vec(&gs, post.iter().map(|p| fl(p.var)).collect()).unwrap();
    let sigma_a_lik = RealMatrix::from_fn(n_an, kb, |n, k| {
        let mut s = 0.0;
        for d in 0..kd {
            for v in 0..kn {
                s += e_w_res.get(&[n, d, v]) * g.get(&[k, d, v]).norm_sqr();
            }
        }
        fl(1.0 / s)
    });
    let a_lik = Matrix::from_fn(n_an, kb, |n, k| {
        let (mut ons, mut back) = (0.0, C::new(0.0, 0.0));
        for d in 0..kd {
            for v in 0..kn {
                ons += e_w_res.get(&[n, d, v]) * e_g.get(&[k, d, v]);
                back += w_res.get(&[n, d, v]) * g.get(&[k, d, v]).conj();
            }
        }
        let s = sigma_a_lik[(n, k)];
        a[(n, k)] - a[(n, k)] * s * ons + back * s
    });
    // SnS by two-point enumeration
    let mut s_hat = RealMatrix::zeros(n_an, kb);
    let mut a_hat = Matrix::zeros(n_an, kb);
    let mut sig_post = RealMatrix::zeros(n_an, kb);
    for n in 0..n_an {
        for k in 0..kb {
            let (al, sl, ass) = (a_lik[(n, k)], sigma_a_lik[(n, k)], a_ss[(n, k)]);
            let l0 = -al.norm_sqr() / sl;
            let l1 = hyper.sns.gamma[(n, k)] - (al - ass).norm_sqr() / sl;
            let p = 1.0 / (1.0 + (l0 - l1).exp());
            s_hat[(n, k)] = p;
            a_hat[(n, k)] = ass * p;
            sig_post[(n, k)] = fl(ass.norm_sqr() * p * (1.0 - p));
        }
    }
    let flat_m = |m: &Matrix| m.data().iter().flat_map(|z| [z.re, z.im]).collect::<Vec<_>>();
    out.push(("9:e_w_plug", e_w_plug.data().to_vec()));
    out.push(("10:w_pri", flat(&w_pri)));
    out.push(("11:e_w_pri", e_w_pri.data().to_vec()));
    out.push(("12:w", flat(&w)));
    out.push(("12:e_w", e_w.data().to_vec()));
    out.push(("13:e_w_res", e_w_res.data().to_vec()));
    out.push(("14:w_res", flat(&w_res)));
    out.push(("15:e_g_lik", e_g_lik.data().to_vec()));
    out.push(("16:g_lik", flat(&g_lik)));
    out.push(("17:g", flat(&g)));
    out.push(("17:e_g", e_g.data().to_vec()));
    out.push(("18:sigma_a_lik", sigma_a_lik.data().to_vec()));
    out.push(("19:a_lik", flat_m(&a_lik)));
    out.push(("20:s", s_hat.data().to_vec()));
    out.push(("20:a", flat_m(&a_hat)));
    out.push(("20:sigma_a", sig_post.data().to_vec()));
    out
}

fn trace_flat(v: &TraceValue) -> Vec<f64> {
    let cx = |d: &[C]| d.iter().flat_map(|z| [z.re, z.im]).collect();
    match v {
        TraceValue::Complex(t) => cx(t.data()),
        TraceValue::Real(t) => t.data().to_vec(),
        TraceValue::Matrix(m) => cx(m.data()),
        TraceValue::RealMatrix(m) => m.data().to_vec(),
    }
}

#[test]
fn e_step_lines_match_loop_reference() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    for seed in [1, 2, 3] {
        let (st, hyper, f, y) = warm_state(&cfg, &grids, seed);
        let mut trace = Trace::default();
        let lin = linear_module(&st, &y, hyper.noise_var, &f.b, &f.c, Some(&mut trace)).unwrap();
        bilinear_module(&lin, &hyper.bg, &f.a_ss, &hyper.sns.gamma, Some(&mut trace)).unwrap();
        let want = reference_pass(&st, &y, &hyper, &f);
        assert_eq!(trace.entries.len(), want.len());
        for ((key, got), (wkey, wv)) in trace.entries.iter().zip(&want) {
            assert_eq!(key, wkey);
            let got = trace_flat(got);
            assert_eq!(got.len(), wv.len(), "{key}");
            assert!(rel_err_real(&got, wv) <= 1e-10, "{key}: {}", rel_err_real(&got, wv));
        }
    }
}

#[test]
fn e_step_trace_comes_from_first_em_iteration() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    let (y, nv) = problem(&cfg, 4, 10.0);
    let icfg = InferenceConfig { outer_iters: 3, ..InferenceConfig::default() };
    let mut trace = Trace::default();
    em_loop(&y, nv, &cfg, &grids, &icfg, None, Some(&mut trace)).unwrap();
    let (st, hyper) = initialize(&y, nv, &cfg, &grids, &icfg).unwrap();
    let f = Factors::new(&grids, &hyper.pert, &cfg).unwrap();
    let mut direct = Trace::default();
    e_step(&st, &y, &hyper, &f, icfg.inner_iters, icfg.damp, Some(&mut direct)).unwrap();
    assert_eq!(trace, direct);
    assert!(trace.get("16:g_lik").is_some());
}

#[test]
fn damping_is_a_convex_combination() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    let (old, hyper, f, y) = warm_state(&cfg, &grids, 5);
    let new = e_step(&old, &y, &hyper, &f, 1, 1.0, None).unwrap();
    assert_eq!(new.damped(&old, 1.0), new);
    let zero = new.damped(&old, 0.0);
    assert_eq!((zero.g.clone(), zero.w.clone(), zero.s.clone()), (old.g.clone(), old.w.clone(), old.s.clone()));
    let half = new.damped(&old, 0.5);
    for i in 0..new.g.len() {
        let mid = (new.g.data()[i] + old.g.data()[i]) * 0.5;
        assert!((half.g.data()[i] - mid).norm() <= 1e-15 * mid.norm().max(1.0));
    }
    for i in 0..new.e_w.len() {
        let mid = 0.5 * (new.e_w.data()[i] + old.e_w.data()[i]);
        assert!((half.e_w.data()[i] - mid).abs() <= 1e-15 * mid);
    }
    // the damped E-step equals the convex combination of an undamped pass
    let damped = e_step(&old, &y, &hyper, &f, 1, 0.3, None).unwrap();
    let mix = new.damped(&old, 0.3);
    assert!(rel_err(damped.g.data(), mix.g.data()) <= 1e-14);
    assert!(e_step(&old, &y, &hyper, &f, 1, 1.5, None).is_err());
    assert!(e_step(&old, &y, &hyper, &f, 0, 0.5, None).is_err());
}

#[test]
fn zero_outer_iterations_return_the_initialization() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    let (y, nv) = problem(&cfg, 6, 10.0);
    let icfg = InferenceConfig { outer_iters: 0, ..InferenceConfig::default() };
    let out = em_loop(&y, nv, &cfg, &grids, &icfg, None, None).unwrap();
    let (st, hyper) = initialize(&y, nv, &cfg, &grids, &icfg).unwrap();
    assert_eq!(out.state, st);
    assert_eq!(out.hyper, hyper);
    assert_eq!(out.iterations, 0);
    assert!(out.diagnostics.is_empty());
}

#[test]
fn noiseless_linear_module_passes_observation_through() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    let (st, _, f, y) = warm_state(&cfg, &grids, 7);
    let out = linear_module(&st, &y, 0.0, &f.b, &f.c, None).unwrap();
    assert_eq!(out.h, y);
    assert!(out.e_h.data().iter().all(|&v| v == VAR_FLOOR));
    assert!(linear_module(&st, &y, -1.0, &f.b, &f.c, None).is_err());
}

#[test]
fn em_is_deterministic() {
    let cfg = small();
    let grids = grids_for(&cfg, [8, 4, 6]);
    let (y, nv) = problem(&cfg, 8, 10.0);
    let icfg = InferenceConfig { outer_iters: 8, tol: 0.0, ..InferenceConfig::default() };
    let a = em_loop(&y, nv, &cfg, &grids, &icfg, None, None).unwrap();
    let b = em_loop(&y, nv, &cfg, &grids, &icfg, None, None).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.hyper, b.hyper);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn learned_priors_stay_valid_over_long_runs() {
    let cfg = small();
    let grids = grids_for(&cfg, [8, 4, 6]);
    for seed in [9, 10] {
        let (y, nv) = problem(&cfg, seed, 5.0);
        let icfg = InferenceConfig { outer_iters: 50, tol: 0.0, ..InferenceConfig::default() };
        let out = em_loop(&y, nv, &cfg, &grids, &icfg, None, None).unwrap();
        assert_eq!(out.diagnostics.len(), 50);
        assert!(out.hyper.bg.m.data().iter().all(|m| (0.0..=1.0).contains(m)));
        assert!(out.hyper.bg.v.data().iter().all(|v| *v > 0.0 && v.is_finite()));
        assert!(out.state.s.data().iter().all(|s| (0.0..=1.0).contains(s)));
        let lim = PerturbationLimits::new(&grids, icfg.r_min);
        let p = &out.hyper.pert;
        assert!(p.delay.iter().all(|d| d.abs() <= lim.delay));
        assert!(p.doppler.iter().all(|d| d.abs() <= lim.doppler));
        assert!(p.beam.iter().all(|d| d.abs() <= lim.beam));
        assert!(p.slope.iter().all(|e| (0.0..=lim.slope_max).contains(e)));
        // accepted iterates never fit worse than the zero estimate
        let fit = fitted(&out.state, &out.hyper, &grids, &cfg).unwrap();
        assert!(y.sub(&fit).unwrap().norm_sq() <= y.norm_sq());
    }
}

#[test]
fn prediction_lands_on_the_next_pilot() {
    let cfg = small();
    let grids = grids_for(&cfg, [8, 4, 6]);
    let (y, nv) = problem(&cfg, 11, 20.0);
    let icfg = InferenceConfig { outer_iters: 5, ..InferenceConfig::default() };
    let out = em_loop(&y, nv, &cfg, &grids, &icfg, None, None).unwrap();
    let mut hyper = out.hyper.clone();
    hyper.pert.doppler = (0..6).map(|i| 3.0 * i as f64 - 7.0).collect();
    // one symbol interval past the last pilot of this frame is the pilot
    // that a one-longer frame would hold
    let n_is = cfg.pilot_symbol_interval;
    let pred = predict(&out.state, &hyper, &grids, &cfg, n_is).unwrap();
    let longer = SystemConfig { n_symbols: cfg.n_symbols + 1, ..cfg.clone() };
    let fit = fitted(&out.state, &hyper, &grids, &longer).unwrap();
    let slice = |t: &Tensor, k: usize| -> Vec<C> {
        (0..8).flat_map(|f| (0..8).map(move |n| (n, f))).map(|(n, f)| t.get(&[n, f, k])).collect()
    };
    assert!(rel_err(&slice(&pred, n_is - 1), &slice(&fit, cfg.n_symbols)) <= 1e-10);
    // and the in-frame fit agrees with the first frame slices
    let fit0 = fitted(&out.state, &hyper, &grids, &cfg).unwrap();
    for k in 0..cfg.n_symbols {
        assert!(rel_err(&slice(&fit0, k), &slice(&fit, k)) <= 1e-12);
    }
    assert_eq!(predict(&out.state, &hyper, &grids, &cfg, 0).unwrap().len(), 0);
}

fn fd_grad(j: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: &[f64]) -> Vec<f64> {
    (0..x0.len())
        .map(|k| {
            let (mut p, mut m) = (x0.to_vec(), x0.to_vec());
            p[k] += h[k];
            m[k] -= h[k];
            (j(&p) - j(&m)) / (2.0 * h[k])
        })
        .collect()
}

fn fd_hess(j: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x0.len();
    let mut out = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            let at = |sa: f64, sb: f64| {
                let mut x = x0.to_vec();
                x[a] += sa * h[a];
                x[b] += sb * h[b];
                j(&x)
            };
            out[a + n * b] = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * h[a] * h[b]);
        }
    }
    out
}

fn model_hess(pi: &Matrix) -> Vec<f64> {
    pi.data().iter().map(|z| 2.0 * z.re).collect()
}

const GRAD_TOL: f64 = 1e-4;
const HESS_TOL: f64 = 1e-3;

#[test]
fn delay_and_doppler_models_match_finite_differences() {
    let cfg = small();
    let grids = grids_for(&cfg, [8, 4, 3]);
    let mut r = rng(31);
    let w = rand_tensor(&mut r, &[8, 4, 3]);
    let delays: Vec<f64> = grids.delay.iter().map(|d| d + 1e-8).collect();
    let dopplers: Vec<f64> = grids.doppler.iter().map(|d| d + 5.0).collect();
    let b = tsbli::factors::delay_matrices(&delays, &cfg).0;
    let c = tsbli::factors::doppler_matrices(&dopplers, &cfg).0;
    let noise = rand_tensor(&mut r, &[8, 8, 4]);
    let exact = w.mode_product(&b, 1).unwrap().mode_product(&c, 2).unwrap();

    // gradient with a nonzero residual, curvature at a zero residual
    for (h, check_hess) in [(exact.add(&noise).unwrap(), false), (exact.clone(), true)] {
        let q = quadratic_tau(&h, &w, &c, &delays, &cfg).unwrap();
        let j = |x: &[f64]| {
            let d: Vec<f64> = delays.iter().zip(x).map(|(a, b)| a + b).collect();
            j_tau(&h, &w, &c, &d, &cfg).unwrap()
        };
        let x0 = vec![0.0; delays.len()];
        let steps = vec![2e-12; delays.len()];
        let g: Vec<f64> = q.mu.iter().map(|m| -2.0 * m.re).collect();
        if check_hess {
            assert!(rel_err_real(&fd_hess(&j, &x0, &steps), &model_hess(&q.pi)) <= HESS_TOL);
        } else {
            assert!(rel_err_real(&fd_grad(&j, &x0, &steps), &g) <= GRAD_TOL);
        }

        let q = quadratic_nu(&h, &w, &b, &dopplers, &cfg).unwrap();
        let j = |x: &[f64]| {
            let d: Vec<f64> = dopplers.iter().zip(x).map(|(a, b)| a + b).collect();
            j_nu(&h, &w, &b, &d, &cfg).unwrap()
        };
        let x0 = vec![0.0; dopplers.len()];
        let steps = vec![1e-2; dopplers.len()];
        let g: Vec<f64> = q.mu.iter().map(|m| -2.0 * m.re).collect();
        if check_hess {
            assert!(rel_err_real(&fd_hess(&j, &x0, &steps), &model_hess(&q.pi)) <= HESS_TOL);
        } else {
            assert!(rel_err_real(&fd_grad(&j, &x0, &steps), &g) <= GRAD_TOL);
        }
    }
}

#[test]
fn beam_model_matches_finite_differences() {
    let cfg = small();
    let kb = 8;
    let grids = grids_for(&cfg, [kb, 3, 2]);
    let mut r = rng(32);
    let g = rand_tensor(&mut r, &[kb, 3, 2]);
    let s = RealMatrix::from_fn(8, kb, |n, k| if n + k % 3 < 7 { 1.0 } else { 0.0 });
    let beams: Vec<f64> = grids.beam.iter().map(|b| b + 0.01).collect();
    let slopes: Vec<f64> = (0..kb).map(|k| 0.002 * k as f64).collect();
    let a0 = Matrix::from_fn(8, kb, |n, k| steer_beam(beams[k], slopes[k], &cfg)[n] * s[(n, k)]);
    let exact = g.mode_product(&a0, 0).unwrap();
    let noise = rand_tensor(&mut r, &[8, 3, 2]);
    let j_of = |w: &Tensor| {
        let w = w.clone();
        let (b, sl, s, g) = (beams.clone(), slopes.clone(), s.clone(), g.clone());
        move |x: &[f64]| {
            let phi: Vec<f64> = b.iter().zip(&x[..kb]).map(|(a, d)| a + d).collect();
            let eta: Vec<f64> = sl.iter().zip(&x[kb..]).map(|(a, d)| a + d).collect();
            j_phi_eta(&w, &g, &s, &phi, &eta, &small()).unwrap()
        }
    };
    let x0 = vec![0.0; 2 * kb];
    let steps: Vec<f64> = (0..2 * kb).map(|i| if i < kb { 1e-6 } else { 1e-7 }).collect();

    let w = exact.add(&noise).unwrap();
    let q = quadratic_phi_eta(&w, &g, &s, &beams, &slopes, &cfg).unwrap();
    let grad: Vec<f64> = q.mu.iter().map(|m| -2.0 * m.re).collect();
    assert!(rel_err_real(&fd_grad(&j_of(&w), &x0, &steps), &grad) <= GRAD_TOL);

    let q = quadratic_phi_eta(&exact, &g, &s, &beams, &slopes, &cfg).unwrap();
    assert!(rel_err_real(&fd_hess(&j_of(&exact), &x0, &steps), &model_hess(&q.pi)) <= HESS_TOL);
}

#[test]
fn expansion_point_choice_is_respected() {
    let cfg = tiny();
    let grids = grids_for(&cfg, [4, 3, 2]);
    let (st, mut hyper, _, _) = warm_state(&cfg, &grids, 12);
    let lim = PerturbationLimits::new(&grids, 10.0);
    hyper.pert.delay = vec![0.3 * lim.delay; 3];
    for e in [Expansion::Previous, Expansion::Zero] {
        let (p, rep) = m_step_perturbations(&st, &hyper, &grids, &lim, e, 0.0, &cfg).unwrap();
        assert!(rep.tau.j_after <= rep.tau.j_before * (1.0 + TRUST_TOL) + f64::MIN_POSITIVE);
        p.check_dims(&grids).unwrap();
    }
    let _ = Perturbations::zeros(&grids);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn trust_check_never_increases_objectives(seed in 0u64..1000, active in 0.0f64..0.5) {
        let cfg = tiny();
        let grids = grids_for(&cfg, [4, 3, 2]);
        let (st, hyper, _, _) = warm_state(&cfg, &grids, seed);
        let lim = PerturbationLimits::new(&grids, 10.0);
        let (p, rep) = m_step_perturbations(&st, &hyper, &grids, &lim, Expansion::Previous, active, &cfg).unwrap();
        for r in [rep.tau, rep.nu, rep.phi_eta] {
            prop_assert!(r.j_after <= r.j_before * (1.0 + TRUST_TOL) + f64::MIN_POSITIVE);
        }
        prop_assert!(p.delay.iter().all(|d| d.abs() <= lim.delay));
        prop_assert!(p.slope.iter().all(|e| (0.0..=lim.slope_max).contains(e)));
    }
}
