mod common;

use std::f64::consts::PI;

use common::*;
use num_complex::Complex64;
use proptest::prelude::*;
use tsbli::channel::{
    assemble_sft, ground_truth_prediction, noise_variance_for_snr, observe, sample_scene, PathParams, Scene,
    SceneSpec, SystemConfig,
};
use tsbli::factors::{
    beam_matrices, delay_matrices, doppler_matrices, steer_beam, steer_doppler, FactorSet, GridSpec, Perturbations,
};
use tsbli::tensor::{Matrix, ModeOrder, RealMatrix, Tensor};

const C0: f64 = 3.0e8;

fn small() -> SystemConfig {
    SystemConfig {
        n_antennas: 8,
        n_subcarriers: 6,
        n_symbols: 4,
        ..SystemConfig::table_one()
    }
}

fn cis(x: f64) -> Complex64 {
    Complex64::from_polar(1.0, x)
}

/// Per-entry channel value written from the physical delays.
fn oracle_entry(p: &PathParams, cfg: &SystemConfig, n: usize, f: usize, t_s: f64) -> Complex64 {
    let lambda = C0 / cfg.carrier_hz;
    let d = lambda / 2.0;
    let x = n as f64 * d;
    // extra propagation delay of antenna n relative to antenna 0
    let dtau = (-x * p.direction_cosine + x * x * p.slope) / C0;
    let df = cfg.comb_spacing as f64 * cfg.subcarrier_spacing_hz;
    p.gain
        * p.visibility[n] as f64
        * cis(-2.0 * PI * cfg.carrier_hz * dtau)
        * cis(-2.0 * PI * f as f64 * df * p.delay_s)
        * cis(2.0 * PI * t_s * p.doppler_hz)
}

fn oracle(scene: &Scene, cfg: &SystemConfig, times: &[f64]) -> Tensor {
    let shape = [cfg.n_antennas, cfg.n_subcarriers, times.len()];
    Tensor::from_fn(&shape, |i| {
        scene
            .paths
            .iter()
            .map(|p| oracle_entry(p, cfg, i[0], i[1], times[i[2]]))
            .sum()
    })
    .unwrap()
}

fn pilot_times(cfg: &SystemConfig) -> Vec<f64> {
    let dt = cfg.pilot_symbol_interval as f64 * (cfg.symbol_duration_s + cfg.cp_duration_s);
    (0..cfg.n_symbols).map(|t| t as f64 * dt).collect()
}

fn future_times(cfg: &SystemConfig, horizon: usize) -> Vec<f64> {
    let ts = cfg.symbol_duration_s + cfg.cp_duration_s;
    let t0 = (cfg.n_symbols - 1) as f64 * cfg.pilot_symbol_interval as f64 * ts;
    (1..=horizon).map(|h| t0 + h as f64 * ts).collect()
}

#[test]
fn assemble_matches_loop_oracle() {
    let cfg = small();
    for seed in 0..10 {
        let spec = SceneSpec {
            sns_fraction: 0.5,
            ..SceneSpec::default()
        };
        let scene = sample_scene(&cfg, &spec, seed).unwrap();
        let h = assemble_sft(&scene, &cfg).unwrap();
        let want = oracle(&scene, &cfg, &pilot_times(&cfg));
        assert!(rel_err(h.data(), want.data()) <= 1e-12);
    }
}

#[test]
fn prediction_matches_loop_oracle() {
    let cfg = small();
    let scene = sample_scene(&cfg, &SceneSpec::default(), 3).unwrap();
    for horizon in [1, 5, 14] {
        let h = ground_truth_prediction(&scene, &cfg, horizon).unwrap();
        let want = oracle(&scene, &cfg, &future_times(&cfg, horizon));
        assert_eq!(h.shape(), &[8, 6, horizon]);
        assert!(rel_err(h.data(), want.data()) <= 1e-12);
    }
    assert!(ground_truth_prediction(&scene, &cfg, 0).is_err());
}

#[test]
fn tucker_form_is_exact_on_true_grids() {
    let cfg = small();
    let spec = SceneSpec {
        n_paths: 3,
        sns_fraction: 1.0,
        ..SceneSpec::default()
    };
    let scene = sample_scene(&cfg, &spec, 11).unwrap();
    let l = scene.n_paths();
    let grids = GridSpec {
        beam: scene.paths.iter().map(|p| p.direction_cosine).collect(),
        delay: scene.paths.iter().map(|p| p.delay_s).collect(),
        doppler: scene.paths.iter().map(|p| p.doppler_hz).collect(),
    };
    let mut pert = Perturbations::zeros(&grids);
    pert.slope = scene.paths.iter().map(|p| p.slope).collect();
    let s = RealMatrix::from_fn(cfg.n_antennas, l, |n, k| scene.paths[k].visibility[n] as f64);
    let f = FactorSet::build(&grids, &pert, &s, &cfg).unwrap();
    let g = Tensor::from_fn(&[l, l, l], |i| {
        if i[0] == i[1] && i[1] == i[2] {
            scene.paths[i[0]].gain
        } else {
            c(0.0, 0.0)
        }
    })
    .unwrap();
    let t = g
        .multi_mode_product(&[(&f.a, 0), (&f.b, 1), (&f.c, 2)], ModeOrder::SizeAware)
        .unwrap();
    let h = assemble_sft(&scene, &cfg).unwrap();
    assert!(rel_err(t.data(), h.data()) <= 1e-10);
}

#[test]
fn orthogonal_paths_add_energy() {
    let cfg = small();
    let n = (cfg.n_antennas * cfg.n_subcarriers * cfg.n_symbols) as f64;
    let gains = [c(0.8, 0.1), c(-0.3, 0.5), c(0.2, -0.2)];
    // distinct DFT beams in the far field are mutually orthogonal
    let paths: Vec<PathParams> = gains
        .iter()
        .zip([0usize, 2, 5])
        .map(|(&g, k)| {
            let phi = -1.0 + 2.0 * k as f64 / cfg.n_antennas as f64;
            PathParams::far_field(g, phi, 1e-7, 300.0, vec![1; cfg.n_antennas])
        })
        .collect();
    let scene = Scene { paths, seed: 0 };
    let h = assemble_sft(&scene, &cfg).unwrap();
    let want: f64 = gains.iter().map(|g| g.norm_sqr()).sum::<f64>() * n;
    assert!((h.norm_sq() - want).abs() <= 1e-10 * want);
}

#[test]
fn steering_phase_examples() {
    let cfg = SystemConfig::table_one();
    // 15 GHz: λ = 2 cm, d = 1 cm; antenna 3 sits at 3 cm
    let a = steer_beam(0.5, 0.01, &cfg);
    let turns: f64 = 0.03 * (0.5 - 0.03 * 0.01) / 0.02;
    assert!((turns - 0.74955).abs() <= 1e-12);
    assert!((a[3] - cis(2.0 * PI * 0.74955)).norm() <= 1e-12);
    assert!((a[0] - c(1.0, 0.0)).norm() <= 1e-15);

    // pilot period 14 × 17.84 µs = 249.76 µs; 100 Hz gives 0.024976 turns per pilot
    let cv = steer_doppler(100.0, &cfg);
    assert!((cfg.pilot_period() - 249.76e-6).abs() <= 1e-15);
    for (n, z) in cv.iter().enumerate() {
        assert!((z - cis(2.0 * PI * 0.024976 * n as f64)).norm() <= 1e-12);
    }

    // 100 km/h at 15 GHz
    let nu = cfg.max_doppler(100.0 / 3.6);
    assert!((nu - 1388.888_888_888_889).abs() <= 1e-9);
}

fn central<F: Fn(f64) -> Matrix>(f: F, x: f64, h: f64) -> Matrix {
    let (p, m) = (f(x + h), f(x - h));
    Matrix::from_fn(p.rows(), p.cols(), |i, j| (p[(i, j)] - m[(i, j)]) / (2.0 * h))
}

#[test]
fn factor_derivatives_match_finite_differences() {
    let cfg = SystemConfig {
        n_antennas: 16,
        n_subcarriers: 16,
        ..SystemConfig::table_one()
    };
    let tol = 1e-5;

    let (phi, eta) = (0.3, 0.02);
    let (_, d_phi, d_eta) = beam_matrices(&[phi], &[eta], &cfg);
    let fd_phi = central(|x| beam_matrices(&[x], &[eta], &cfg).0, phi, 1e-7);
    let fd_eta = central(|x| beam_matrices(&[phi], &[x], &cfg).0, eta, 1e-8);
    assert!(rel_err(d_phi.data(), fd_phi.data()) <= tol);
    assert!(rel_err(d_eta.data(), fd_eta.data()) <= tol);

    let tau = 3.3e-7;
    let (_, db) = delay_matrices(&[tau], &cfg);
    let fd_tau = central(|x| delay_matrices(&[x], &cfg).0, tau, 1e-13);
    assert!(rel_err(db.data(), fd_tau.data()) <= tol);

    let nu = 420.0;
    let (_, dc) = doppler_matrices(&[nu], &cfg);
    let fd_nu = central(|x| doppler_matrices(&[x], &cfg).0, nu, 1e-4);
    assert!(rel_err(dc.data(), fd_nu.data()) <= tol);
}

#[test]
fn sns_masks_factor_rows() {
    let cfg = small();
    let grids = GridSpec::uniform(&cfg, 4, 3, 2, 1000.0).unwrap();
    let pert = Perturbations::zeros(&grids);
    let s = RealMatrix::from_fn(8, 4, |n, k| if (n + k) % 3 == 0 { 0.0 } else { 1.0 });
    let f = FactorSet::build(&grids, &pert, &s, &cfg).unwrap();
    for n in 0..8 {
        for k in 0..4 {
            assert_eq!(f.a[(n, k)], f.a_ss[(n, k)] * s[(n, k)]);
            assert!((f.a_ss[(n, k)].norm() - 1.0).abs() <= 1e-14);
        }
    }
}

#[test]
fn sampled_scenes_respect_ranges() {
    let cfg = SystemConfig::desk_scale();
    let spec = SceneSpec {
        n_paths: 6,
        sns_fraction: 0.5,
        ..SceneSpec::default()
    };
    let nu_max = cfg.max_doppler(spec.speed_mps);
    for seed in 0..50 {
        let s = sample_scene(&cfg, &spec, seed).unwrap();
        assert_eq!(s, sample_scene(&cfg, &spec, seed).unwrap());
        let power: f64 = s.paths.iter().map(|p| p.gain.norm_sqr()).sum();
        assert!(power > 0.0);
        for p in &s.paths {
            assert!((-1.0..=1.0).contains(&p.direction_cosine));
            assert!(p.slope >= 0.0 && p.slope <= 1.0 / (2.0 * spec.r_min) + 1e-15);
            assert!(p.delay_s >= 0.0 && p.delay_s <= cfg.cp_duration_s);
            assert!(p.doppler_hz.abs() <= nu_max + 1e-9);
            // one contiguous visible block
            let on: Vec<usize> = (0..cfg.n_antennas).filter(|&n| p.visibility[n] == 1).collect();
            assert!(!on.is_empty());
            assert_eq!(on.last().unwrap() - on[0] + 1, on.len());
        }
    }
}

#[test]
fn noise_matches_requested_snr() {
    let cfg = SystemConfig::desk_scale();
    let scene = sample_scene(&cfg, &SceneSpec::default(), 5).unwrap();
    let h = assemble_sft(&scene, &cfg).unwrap();
    let nv = noise_variance_for_snr(&h, 10.0);
    assert!((h.norm_sq() / (h.len() as f64 * nv) - 10.0).abs() <= 1e-9);
    let y = observe(&h, nv, 5).unwrap();
    let z = y.sub(&h).unwrap();
    let emp = z.norm_sq() / z.len() as f64;
    // 10240 complex samples: the sample variance is within a few percent
    assert!((emp / nv - 1.0).abs() <= 0.05);
    assert_eq!(y, observe(&h, nv, 5).unwrap());
    assert_eq!(observe(&h, 0.0, 5).unwrap(), h);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assembly_is_linear_in_gains(seed in any::<u64>(), scale in -3.0f64..3.0) {
        let cfg = small();
        let scene = sample_scene(&cfg, &SceneSpec::default(), seed).unwrap();
        let mut scaled = scene.clone();
        for p in &mut scaled.paths {
            p.gain *= scale;
        }
        let h = assemble_sft(&scene, &cfg).unwrap();
        let hs = assemble_sft(&scaled, &cfg).unwrap();
        prop_assert!(hs.sub(&h.scale(scale)).unwrap().fro_norm() <= 1e-12 * h.fro_norm().max(1.0));
    }

    #[test]
    fn steering_entries_have_unit_modulus(phi in -1.0f64..1.0, eta in 0.0f64..0.05, tau in 0.0f64..1e-6, nu in -2e3f64..2e3) {
        let cfg = small();
        let ok = |v: &[Complex64]| v.iter().all(|z| (z.norm() - 1.0).abs() <= 1e-12);
        prop_assert!(ok(&steer_beam(phi, eta, &cfg)));
        prop_assert!(ok(&tsbli::factors::steer_delay(tau, &cfg)));
        prop_assert!(ok(&steer_doppler(nu, &cfg)));
    }
}
