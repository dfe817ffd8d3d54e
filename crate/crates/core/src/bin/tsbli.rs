use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use tsbli::experiment::{parse_methods, run_sweep, trace_first, write_result, ExperimentConfig, Profile};
use tsbli::inference::TraceValue;

/// Runs a Monte-Carlo sweep and writes per-trial NMSE rows as CSV.
#[derive(Debug, Parser)]
#[command(name = "tsbli", version)]
struct Args {
    /// Experiment config (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// CSV output path; overrides `run.output`. Without one, rows go to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Starting profile: desk or stretch.
    #[arg(long)]
    profile: Option<Profile>,
    /// Base seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of tsbli, stale_csi, omp_prony.
    #[arg(long)]
    methods: Option<String>,
    /// Dump every line output of the first E-step of trial 0 as JSON.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Shorthand for `--profile stretch`.
    #[arg(long, conflicts_with = "profile")]
    stretch: bool,
    /// Write the per-iteration EM sidecar next to the output.
    #[arg(long)]
    diagnostics: bool,
}

fn trace_json(v: &TraceValue) -> serde_json::Value {
    let cplx = |d: &[num_complex::Complex64]| {
        (
            d.iter().map(|z| z.re).collect::<Vec<_>>(),
            d.iter().map(|z| z.im).collect::<Vec<_>>(),
        )
    };
    match v {
        TraceValue::Complex(t) => {
            let (re, im) = cplx(t.data());
            json!({ "shape": t.shape(), "re": re, "im": im })
        }
        TraceValue::Real(t) => json!({ "shape": t.shape(), "re": t.data() }),
        TraceValue::Matrix(m) => {
            let (re, im) = cplx(m.data());
            json!({ "shape": [m.rows(), m.cols()], "re": re, "im": im })
        }
        TraceValue::RealMatrix(m) => json!({ "shape": [m.rows(), m.cols()], "re": m.data() }),
    }
}

fn run(args: Args) -> tsbli::Result<()> {
    let profile = if args.stretch { Some(Profile::Stretch) } else { args.profile };
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p, profile)?,
        None => ExperimentConfig::profile(profile.unwrap_or_default()),
    };
    if let Some(s) = args.seed {
        cfg.base_seed = s;
    }
    if let Some(m) = &args.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(o) = args.output {
        cfg.output = Some(o);
    }
    cfg.diagnostics |= args.diagnostics;
    cfg.validate()?;

    if let Some(path) = &args.trace {
        let trace = trace_first(&cfg)?;
        let entries: Vec<_> = trace
            .entries
            .iter()
            .map(|(k, v)| json!({ "key": k, "value": trace_json(v) }))
            .collect();
        std::fs::write(path, serde_json::to_string(&entries)?)?;
    }

    let res = run_sweep(&cfg)?;
    match &cfg.output {
        Some(path) => {
            write_result(&res, path, cfg.diagnostics)?;
            for r in res.rows.iter().filter(|r| r.trial == "mean" && r.horizon == "all") {
                let db = r.nmse_db.map_or("n/a".to_string(), |x| format!("{x:.2} dB"));
                eprintln!("{} = {} {:>10}: {} ({})", r.axis, r.sweep_value, r.method, db, r.status);
            }
        }
        None => tsbli::experiment::write_rows(&res.rows, std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
