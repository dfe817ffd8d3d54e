//! Flat `section.key = value` experiment configuration.
//!
//! Blank lines and text after `#` are ignored. A `profile = desk|stretch`
//! line selects the starting values; every other key overrides one field.

use std::path::{Path, PathBuf};

use crate::baselines::OmpConfig;
use crate::channel::{SceneSpec, SystemConfig};
use crate::error::{invalid, Error, Result};
use crate::inference::InferenceConfig;

/// Starting values before key overrides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    /// 32 antennas, 32 pilot subcarriers, 10 pilot symbols.
    #[default]
    Desk,
    /// The full 128 × 128 × 10 scenario.
    Stretch,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "stretch" => Ok(Self::Stretch),
            _ => Err(invalid(format!("unknown profile {s:?}"))),
        }
    }
}

/// Quantity varied across a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// SNR in dB.
    Snr,
    /// Number of predicted symbols.
    Horizon,
    /// Carrier frequency in GHz.
    Carrier,
    /// Outer EM iterations.
    Iterations,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Snr => "snr_db",
            Self::Horizon => "horizon",
            Self::Carrier => "carrier_ghz",
            Self::Iterations => "iterations",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" | "snr_db" => Ok(Self::Snr),
            "horizon" => Ok(Self::Horizon),
            "carrier" | "carrier_ghz" => Ok(Self::Carrier),
            "iterations" => Ok(Self::Iterations),
            _ => Err(invalid(format!("unknown sweep axis {s:?}"))),
        }
    }
}

/// A predictor compared in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Tsbli,
    StaleCsi,
    OmpProny,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Tsbli, Method::StaleCsi, Method::OmpProny];

    pub fn name(self) -> &'static str {
        match self {
            Self::Tsbli => "tsbli",
            Self::StaleCsi => "stale_csi",
            Self::OmpProny => "omp_prony",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsbli" => Ok(Self::Tsbli),
            "stale_csi" | "stale" => Ok(Self::StaleCsi),
            "omp_prony" | "omp" => Ok(Self::OmpProny),
            _ => Err(invalid(format!("unknown method {s:?}"))),
        }
    }
}

/// Parses a comma-separated method list, dropping duplicates.
pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m = part.parse()?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(invalid("method list is empty"));
    }
    Ok(out)
}

/// Beam, delay and Doppler grid counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCounts {
    pub beam: usize,
    pub delay: usize,
    pub doppler: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub scene: SceneSpec,
    pub grid: GridCounts,
    pub inference: InferenceConfig,
    pub omp: OmpConfig,
    pub sweep: Sweep,
    pub trials: usize,
    /// Trial `t` uses seed `base_seed + t` at every sweep value.
    pub base_seed: u64,
    /// SNR when it is not the swept quantity.
    pub snr_db: f64,
    /// Predicted symbols when the horizon is not swept.
    pub horizon: usize,
    pub methods: Vec<Method>,
    /// Wall-clock times make the CSV non-reproducible, so they are opt-in.
    pub record_runtime: bool,
    /// Also write per-iteration EM records.
    pub diagnostics: bool,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn profile(p: Profile) -> Self {
        let (system, grid, trials) = match p {
            Profile::Desk => (
                SystemConfig {
                    n_symbols: 10,
                    ..SystemConfig::desk_scale()
                },
                GridCounts {
                    beam: 32,
                    delay: 16,
                    doppler: 20,
                },
                20,
            ),
            Profile::Stretch => {
                let s = SystemConfig::table_one();
                let g = GridCounts {
                    beam: s.n_antennas,
                    delay: s.n_subcarriers / 2,
                    doppler: 2 * s.n_symbols,
                };
                (s, g, 20)
            }
        };
        let scene = SceneSpec::default();
        Self {
            omp: OmpConfig {
                n_angles: grid.beam,
                n_delays: grid.delay,
                sparsity: 2 * scene.n_paths,
            },
            horizon: system.pilot_symbol_interval,
            system,
            scene,
            grid,
            inference: InferenceConfig::default(),
            sweep: Sweep {
                axis: SweepAxis::Snr,
                values: vec![0.0, 10.0, 20.0],
            },
            trials,
            base_seed: 0,
            snr_db: 10.0,
            methods: Method::ALL.to_vec(),
            record_runtime: false,
            diagnostics: false,
            output: None,
        }
    }

    /// Parses config text. `profile_override` wins over a `profile` line.
    pub fn parse(text: &str, profile_override: Option<Profile>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut profile = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                msg: "expected key = value".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if k == "profile" {
                profile = Some(v.parse().map_err(|e: Error| at(line_no, e))?);
            } else {
                entries.push((line_no, k.to_string(), v.to_string()));
            }
        }
        let mut cfg = Self::profile(profile_override.or(profile).unwrap_or_default());
        for (line, k, v) in entries {
            cfg.set(&k, &v).map_err(|e| at(line, e))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile_override: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::parse(&text, profile_override)
    }

    /// Overrides one field by its `section.key` name.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let s = &mut self.system;
        let sc = &mut self.scene;
        let inf = &mut self.inference;
        match key {
            "system.carrier_hz" => s.carrier_hz = num(v)?,
            "system.subcarrier_spacing_hz" => s.subcarrier_spacing_hz = num(v)?,
            "system.symbol_duration_s" => s.symbol_duration_s = num(v)?,
            "system.cp_duration_s" => s.cp_duration_s = num(v)?,
            "system.pilot_symbol_interval" => s.pilot_symbol_interval = num(v)?,
            "system.comb_spacing" => s.comb_spacing = num(v)?,
            "system.n_antennas" => s.n_antennas = num(v)?,
            "system.n_subcarriers" => s.n_subcarriers = num(v)?,
            "system.n_symbols" => s.n_symbols = num(v)?,
            "system.antenna_spacing_m" => s.antenna_spacing_m = Some(num(v)?),
            "scene.n_paths" => sc.n_paths = num(v)?,
            "scene.r_min" => sc.r_min = num(v)?,
            "scene.r_max_factor" => sc.r_max_factor = num(v)?,
            "scene.speed_kmh" => sc.speed_mps = num::<f64>(v)? / 3.6,
            "scene.sns_fraction" => sc.sns_fraction = num(v)?,
            "scene.power_decay" => sc.power_decay = num(v)?,
            "grid.k_beam" => self.grid.beam = num(v)?,
            "grid.k_delay" => self.grid.delay = num(v)?,
            "grid.k_doppler" => self.grid.doppler = num(v)?,
            "inference.outer_iters" => inf.outer_iters = num(v)?,
            "inference.inner_iters" => inf.inner_iters = num(v)?,
            "inference.damp" => inf.damp = num(v)?,
            "inference.prior_damp" => inf.prior_damp = num(v)?,
            "inference.active_rel" => inf.active_rel = num(v)?,
            "inference.w_init" => inf.w_init = v.parse()?,
            "inference.tol" => inf.tol = num(v)?,
            "inference.gamma_rule" => inf.gamma_rule = v.parse()?,
            "inference.expansion" => inf.expansion = v.parse()?,
            "inference.learn_perturbations" => inf.learn_perturbations = flag(v)?,
            "inference.pert_warmup" => inf.pert_warmup = num(v)?,
            "inference.prior_warmup" => inf.prior_warmup = num(v)?,
            "inference.learn_priors" => inf.learn_priors = flag(v)?,
            "inference.r_min" => inf.r_min = num(v)?,
            "inference.m_init" => inf.m_init = num(v)?,
            "inference.gamma_init" => inf.gamma_init = num(v)?,
            "inference.s_init" => inf.s_init = num(v)?,
            "omp.n_angles" => self.omp.n_angles = num(v)?,
            "omp.n_delays" => self.omp.n_delays = num(v)?,
            "omp.sparsity" => self.omp.sparsity = num(v)?,
            "sweep.axis" => self.sweep.axis = v.parse()?,
            "sweep.values" => {
                self.sweep.values = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(num)
                    .collect::<Result<_>>()?
            }
            "run.trials" => self.trials = num(v)?,
            "run.seed" => self.base_seed = num(v)?,
            "run.snr_db" => self.snr_db = num(v)?,
            "run.horizon" => self.horizon = num(v)?,
            "run.methods" => self.methods = parse_methods(v)?,
            "run.record_runtime" => self.record_runtime = flag(v)?,
            "run.diagnostics" => self.diagnostics = flag(v)?,
            "run.output" => self.output = Some(PathBuf::from(v)),
            _ => return Err(invalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.inference.validate()?;
        if self.sweep.values.is_empty() {
            return Err(invalid("sweep values must be non-empty"));
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("sweep values must be finite"));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be >= 1"));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods selected"));
        }
        let g = self.grid;
        if g.beam == 0 || g.delay == 0 || g.doppler == 0 {
            return Err(invalid("grid counts must be >= 1"));
        }
        if self.omp.n_angles == 0 || self.omp.n_delays == 0 || self.omp.sparsity == 0 {
            return Err(invalid("OMP sizes must be >= 1"));
        }
        if self.scene.n_paths == 0 {
            return Err(invalid("scene needs at least one path"));
        }
        if !(0.0..=1.0).contains(&self.scene.sns_fraction) {
            return Err(invalid("sns_fraction must lie in [0, 1]"));
        }
        let check_horizon = |h: f64| h >= 1.0 && h.fract() == 0.0;
        match self.sweep.axis {
            SweepAxis::Horizon if !self.sweep.values.iter().all(|&h| check_horizon(h)) => {
                return Err(invalid("horizon sweep values must be positive integers"))
            }
            SweepAxis::Iterations if !self.sweep.values.iter().all(|&t| t >= 0.0 && t.fract() == 0.0) => {
                return Err(invalid("iteration sweep values must be non-negative integers"))
            }
            SweepAxis::Carrier if !self.sweep.values.iter().all(|&f| f > 0.0) => {
                return Err(invalid("carrier sweep values must be positive"))
            }
            _ => {}
        }
        if self.sweep.axis != SweepAxis::Horizon && self.horizon == 0 {
            return Err(invalid("horizon must be >= 1"));
        }
        Ok(())
    }
}

fn at(line: usize, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config {
            line,
            msg: other.to_string(),
        },
    }
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid(format!("cannot parse {v:?}")))
}

fn flag(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(format!("expected a boolean, got {v:?}"))),
    }
}
