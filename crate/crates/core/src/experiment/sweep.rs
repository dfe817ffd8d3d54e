//! Monte-Carlo sweeps over one axis and their CSV output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, Method, SweepAxis};
use crate::baselines::{nmse, omp_prony, per_horizon_nmse, stale_csi, to_db};
use crate::channel::{assemble_sft, ground_truth_prediction, noise_variance_for_snr, observe, sample_scene, SystemConfig};
use crate::error::Result;
use crate::factors::GridSpec;
use crate::inference::{em_loop, predict, InferenceConfig, IterRecord, Trace, Truth};
use crate::tensor::Tensor;

/// One CSV row. `trial` is the trial index or `mean`; `horizon` is the
/// predicted symbol index (1-based) or `all` for the whole horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub axis: &'static str,
    pub sweep_value: f64,
    pub method: &'static str,
    pub trial: String,
    pub seed: Option<u64>,
    pub horizon: String,
    /// Linear NMSE; the mean over successful trials in summary rows.
    pub nmse: Option<f64>,
    /// NMSE in dB; the mean of the per-trial dB values in summary rows.
    pub nmse_db: Option<f64>,
    pub runtime_ms: Option<f64>,
    pub iterations: Option<usize>,
    pub status: String,
}

/// Per-iteration EM record of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub axis: &'static str,
    pub sweep_value: f64,
    pub trial: usize,
    pub seed: u64,
    pub iteration: usize,
    pub inner: usize,
    pub nmse_fit_db: Option<f64>,
    pub nmse_pred_db: Option<f64>,
    pub floor_hits: usize,
    pub j_tau_nu: f64,
    pub j_phi_eta: f64,
    pub rel_change: f64,
    pub damp: f64,
    pub reverted: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<MetricRow>,
    pub diagnostics: Vec<DiagRow>,
}

impl SweepResult {
    /// Summary row of `method` at `value` over the whole horizon.
    pub fn mean_db(&self, value: f64, method: Method) -> Option<f64> {
        self.summary(value, method, "all")
    }

    /// Summary row of `method` at `value` for one horizon label.
    pub fn summary(&self, value: f64, method: Method, horizon: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.trial == "mean" && r.sweep_value == value && r.method == method.name() && r.horizon == horizon)
            .and_then(|r| r.nmse_db)
    }

    /// Per-trial whole-horizon dB values of `method` at `value`, by trial.
    pub fn trial_db(&self, value: f64, method: Method) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .filter(|r| r.trial != "mean" && r.sweep_value == value && r.method == method.name() && r.horizon == "all")
            .map(|r| r.nmse_db)
            .collect()
    }
}

/// Settings of one sweep point.
#[derive(Debug, Clone)]
pub struct Point {
    pub system: SystemConfig,
    pub grids: GridSpec,
    pub inference: InferenceConfig,
    pub snr_db: f64,
    pub horizon: usize,
}

/// Applies sweep value `v` to the base config.
pub fn point(cfg: &ExperimentConfig, v: f64) -> Result<Point> {
    let mut system = cfg.system.clone();
    let mut inference = cfg.inference.clone();
    let (mut snr_db, mut horizon) = (cfg.snr_db, cfg.horizon);
    match cfg.sweep.axis {
        SweepAxis::Snr => snr_db = v,
        SweepAxis::Horizon => horizon = v as usize,
        SweepAxis::Carrier => system.carrier_hz = v * 1e9,
        SweepAxis::Iterations => inference.outer_iters = v as usize,
    }
    let g = cfg.grid;
    let grids = GridSpec::uniform(&system, g.beam, g.delay, g.doppler, system.max_doppler(cfg.scene.speed_mps))?;
    Ok(Point {
        system,
        grids,
        inference,
        snr_db,
        horizon,
    })
}

/// Trial inputs: observation, its noise variance and the future channel.
pub struct TrialData {
    pub seed: u64,
    pub channel: Tensor,
    pub y: Tensor,
    pub noise_var: f64,
    pub future: Tensor,
}

pub fn trial_data(cfg: &ExperimentConfig, p: &Point, seed: u64) -> Result<TrialData> {
    let scene = sample_scene(&p.system, &cfg.scene, seed)?;
    let channel = assemble_sft(&scene, &p.system)?;
    let future = ground_truth_prediction(&scene, &p.system, p.horizon)?;
    let noise_var = noise_variance_for_snr(&channel, p.snr_db);
    let y = observe(&channel, noise_var, seed)?;
    Ok(TrialData {
        seed,
        channel,
        y,
        noise_var,
        future,
    })
}

struct MethodOutcome {
    method: Method,
    result: Result<(Tensor, Option<usize>)>,
    runtime_ms: f64,
}

struct TrialOutcome {
    trial: usize,
    seed: u64,
    truth: Result<Tensor>,
    methods: Vec<MethodOutcome>,
    diagnostics: Vec<IterRecord>,
}

fn run_method(
    cfg: &ExperimentConfig,
    p: &Point,
    d: &TrialData,
    m: Method,
    diag: &mut Vec<IterRecord>,
) -> Result<(Tensor, Option<usize>)> {
    match m {
        Method::Tsbli => {
            let truth = Truth {
                channel: Some(&d.channel),
                future: Some(&d.future),
            };
            let t = cfg.diagnostics.then_some(&truth);
            let out = em_loop(&d.y, d.noise_var, &p.system, &p.grids, &p.inference, t, None)?;
            *diag = out.diagnostics;
            let pred = predict(&out.state, &out.hyper, &p.grids, &p.system, p.horizon)?;
            Ok((pred, Some(out.iterations)))
        }
        Method::StaleCsi => Ok((stale_csi(&d.y, d.noise_var, p.horizon)?.prediction, None)),
        Method::OmpProny => Ok((omp_prony(&d.y, &p.system, &cfg.omp, p.horizon)?.prediction, None)),
    }
}

fn run_trial(cfg: &ExperimentConfig, p: &Point, trial: usize) -> TrialOutcome {
    let seed = cfg.base_seed + trial as u64;
    let mut diagnostics = Vec::new();
    let data = trial_data(cfg, p, seed);
    let methods = cfg
        .methods
        .iter()
        .map(|&m| {
            let t0 = Instant::now();
            let result = match &data {
                Ok(d) => run_method(cfg, p, d, m, &mut diagnostics),
                Err(e) => Err(crate::error::invalid(format!("scene: {e}"))),
            };
            MethodOutcome {
                method: m,
                result,
                runtime_ms: t0.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect();
    TrialOutcome {
        trial,
        seed,
        truth: data.map(|d| d.future),
        methods,
        diagnostics,
    }
}

fn status_of(e: &crate::Error) -> String {
    format!("error: {e}").replace(['\n', '\r'], " ")
}

/// Runs every (sweep value, trial) pair in parallel; rows come out sorted by
/// sweep value, then trial, then method, then horizon, with each value's
/// summary rows after its trials.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let points: Vec<Point> = cfg.sweep.values.iter().map(|&v| point(cfg, v)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|i| (0..cfg.trials).map(move |t| (i, t)))
        .collect();
    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|&(i, t)| run_trial(cfg, &points[i], t))
        .collect();

    let axis = cfg.sweep.axis.name();
    let mut res = SweepResult::default();
    for (i, p) in points.iter().enumerate() {
        let value = cfg.sweep.values[i];
        // collect keeps job order, so each point owns a contiguous block
        let mine = &outcomes[i * cfg.trials..(i + 1) * cfg.trials];
        // per method, per horizon label: (linear, dB, runtime) of successful trials
        let labels: Vec<String> = (1..=p.horizon).map(|h| h.to_string()).chain(["all".to_string()]).collect();
        let mut acc = vec![vec![Vec::<(f64, f64, f64)>::new(); labels.len()]; cfg.methods.len()];
        for o in mine {
            for (mi, mo) in o.methods.iter().enumerate() {
                let scored = match (&mo.result, &o.truth) {
                    (Ok((pred, _)), Ok(truth)) => per_horizon_nmse(pred, truth).and_then(|mut v| {
                        v.push(nmse(pred, truth)?);
                        Ok(v)
                    }),
                    (Err(e), _) => Err(crate::error::invalid(e.to_string())),
                    (_, Err(e)) => Err(crate::error::invalid(e.to_string())),
                };
                let iterations = mo.result.as_ref().ok().and_then(|r| r.1);
                let runtime_ms = cfg.record_runtime.then_some(mo.runtime_ms);
                match scored {
                    Ok(v) => {
                        for (li, (label, x)) in labels.iter().zip(v).enumerate() {
                            acc[mi][li].push((x, to_db(x), mo.runtime_ms));
                            res.rows.push(MetricRow {
                                axis,
                                sweep_value: value,
                                method: mo.method.name(),
                                trial: o.trial.to_string(),
                                seed: Some(o.seed),
                                horizon: label.clone(),
                                nmse: Some(x),
                                nmse_db: Some(to_db(x)),
                                runtime_ms,
                                iterations,
                                status: "ok".into(),
                            });
                        }
                    }
                    Err(e) => res.rows.push(MetricRow {
                        axis,
                        sweep_value: value,
                        method: mo.method.name(),
                        trial: o.trial.to_string(),
                        seed: Some(o.seed),
                        horizon: "all".into(),
                        nmse: None,
                        nmse_db: None,
                        runtime_ms,
                        iterations: None,
                        status: status_of(&e),
                    }),
                }
            }
            if cfg.diagnostics {
                res.diagnostics.extend(o.diagnostics.iter().map(|r| DiagRow {
                    axis,
                    sweep_value: value,
                    trial: o.trial,
                    seed: o.seed,
                    iteration: r.iteration,
                    inner: r.inner,
                    nmse_fit_db: r.nmse_fit.map(to_db),
                    nmse_pred_db: r.nmse_pred.map(to_db),
                    floor_hits: r.floor_hits,
                    j_tau_nu: r.j_tau_nu,
                    j_phi_eta: r.j_phi_eta,
                    rel_change: r.rel_change,
                    damp: r.damp,
                    reverted: r.reverted,
                }));
            }
        }
        for (mi, m) in cfg.methods.iter().enumerate() {
            for (li, label) in labels.iter().enumerate() {
                let ok = &acc[mi][li];
                let n = ok.len() as f64;
                let mean = |f: fn(&(f64, f64, f64)) -> f64| (n > 0.0).then(|| ok.iter().map(f).sum::<f64>() / n);
                res.rows.push(MetricRow {
                    axis,
                    sweep_value: value,
                    method: m.name(),
                    trial: "mean".into(),
                    seed: None,
                    horizon: label.clone(),
                    nmse: mean(|r| r.0),
                    nmse_db: mean(|r| r.1),
                    runtime_ms: if cfg.record_runtime { mean(|r| r.2) } else { None },
                    iterations: None,
                    status: format!("{}/{} ok", ok.len(), cfg.trials),
                });
            }
        }
    }
    Ok(res)
}

pub fn write_rows<W: std::io::Write, R: Serialize>(rows: &[R], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> crate::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => crate::Error::Io(io),
        other => crate::error::invalid(format!("csv: {other:?}")),
    }
}

/// `results.csv` → `results.diag.csv`.
pub fn diagnostics_path(output: &Path) -> PathBuf {
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    output.with_file_name(format!("{stem}.diag.csv"))
}

/// Writes the metric CSV, plus the diagnostics sidecar when requested.
pub fn write_result(res: &SweepResult, output: &Path, diagnostics: bool) -> Result<()> {
    let ctx = |p: &Path, e: std::io::Error| crate::Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display())));
    let f = std::fs::File::create(output).map_err(|e| ctx(output, e))?;
    write_rows(&res.rows, std::io::BufWriter::new(f))?;
    if diagnostics {
        let dp = diagnostics_path(output);
        let f = std::fs::File::create(&dp).map_err(|e| ctx(&dp, e))?;
        write_rows(&res.diagnostics, std::io::BufWriter::new(f))?;
    }
    Ok(())
}

/// Traces the first E-step of trial 0 at the first sweep value.
pub fn trace_first(cfg: &ExperimentConfig) -> Result<Trace> {
    cfg.validate()?;
    let p = point(cfg, cfg.sweep.values[0])?;
    let d = trial_data(cfg, &p, cfg.base_seed)?;
    let icfg = InferenceConfig {
        outer_iters: 1,
        ..p.inference.clone()
    };
    let mut trace = Trace::default();
    em_loop(&d.y, d.noise_var, &p.system, &p.grids, &icfg, None, Some(&mut trace))?;
    Ok(trace)
}
