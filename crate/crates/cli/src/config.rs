//! Configuration resolution: defaults ← config file ← command-line flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use qsteer::steering::TrajectoryBudget;
use qsteer::ModelParams;
use serde::Serialize;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl From<qsteer::Error> for ConfigError {
    fn from(e: qsteer::Error) -> Self {
        ConfigError(e.to_string())
    }
}

/// Command-line overrides; every field is optional so the config file and
/// defaults can fill the gaps.
#[derive(clap::Args, Debug, Default, Clone)]
pub struct Overrides {
    /// damping rate γ
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// drive amplitude ω
    #[arg(long, global = true)]
    pub omega: Option<f64>,
    /// collision duration δt
    #[arg(long, global = true)]
    pub dt: Option<f64>,
    /// environment polarization η ∈ [−1, 0)
    #[arg(long, global = true)]
    pub eta: Option<f64>,
    /// measurement scenario: x | y | z | adaptive | nonlocal
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// collisions per trajectory
    #[arg(long, global = true)]
    pub steps: Option<u64>,
    /// trajectories per ensemble
    #[arg(long, global = true)]
    pub trajectories: Option<u32>,
    /// minimum collisions before the endpoint counts as mixed
    #[arg(long, global = true)]
    pub burn_in: Option<u64>,
    /// master seed (generated and echoed when absent)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// worker threads (0 = all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// output path base; writes <out>.csv / <out>.json as applicable
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// CI preset: 10⁴ collisions with matching burn-in
    #[arg(long, global = true)]
    pub fast: bool,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub params: ModelParams,
    pub scenario: Option<String>,
    pub steps: u64,
    pub steps_given: bool,
    pub trajectories: u32,
    pub burn_in: u64,
    pub seed: u64,
    pub seed_given: bool,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub fast: bool,
    extras: BTreeMap<String, String>,
}

/// The part of the configuration echoed into every JSON report.
#[derive(Clone, Debug, Serialize)]
pub struct ConfigEcho {
    pub gamma: f64,
    pub omega: f64,
    pub dt: f64,
    pub eta: f64,
    pub scenario: Option<String>,
    pub steps: u64,
    pub trajectories: u32,
    pub burn_in: u64,
    pub workers: usize,
    pub fast: bool,
}

fn parse_file(path: &Path) -> Result<BTreeMap<String, String>, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
    let mut kv = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError(format!(
                "{}:{}: expected key=value, got '{raw}'",
                path.display(),
                lineno + 1
            )));
        };
        kv.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(kv)
}

fn parsed<T: std::str::FromStr>(
    kv: &BTreeMap<String, String>,
    key: &str,
) -> Result<Option<T>, ConfigError> {
    match kv.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| ConfigError(format!("config key {key}: cannot parse '{raw}'"))),
    }
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, o: &Overrides) -> Result<Self, ConfigError> {
        let kv = match file {
            Some(p) => parse_file(p)?,
            None => BTreeMap::new(),
        };
        let fast = o.fast || parsed::<bool>(&kv, "fast")?.unwrap_or(false);
        let gamma = o.gamma.or(parsed(&kv, "gamma")?).unwrap_or(1.0);
        let omega = o.omega.or(parsed(&kv, "omega")?).unwrap_or(10.0);
        let dt = o.dt.or(parsed(&kv, "dt")?).unwrap_or(1e-3);
        let eta = o.eta.or(parsed(&kv, "eta")?).unwrap_or(-1.0);
        let params = ModelParams::new(gamma, omega, dt, eta)?;

        let default_steps = if fast { 10_000 } else { 1_000_000 };
        // 50 damping times by default, one mixing-time decade for --fast
        let default_burn_in = if fast { 10_000 } else { (50.0 / (gamma * dt)).round() as u64 };
        let steps_opt = o.steps.or(parsed(&kv, "steps")?);
        let steps_given = steps_opt.is_some();
        let steps = steps_opt.unwrap_or(default_steps);
        let trajectories = o
            .trajectories
            .or(parsed(&kv, "trajectories")?)
            .unwrap_or(1_000);
        let burn_in = o.burn_in.or(parsed(&kv, "burn_in")?).unwrap_or(default_burn_in);
        if trajectories == 0 {
            return Err(ConfigError("trajectories must be ≥ 1".into()));
        }

        let file_seed: Option<u64> = parsed(&kv, "seed")?;
        let (seed, seed_given) = match o.seed.or(file_seed) {
            Some(s) => (s, true),
            None => (rand::random::<u64>(), false),
        };
        let workers = o.workers.or(parsed(&kv, "workers")?).unwrap_or(0);
        let out = o
            .out
            .clone()
            .or_else(|| kv.get("out").map(PathBuf::from));

        Ok(Self {
            params,
            scenario: o.scenario.clone().or_else(|| kv.get("scenario").cloned()),
            steps,
            steps_given,
            trajectories,
            burn_in,
            seed,
            seed_given,
            workers,
            out,
            fast,
            extras: kv,
        })
    }

    pub fn budget(&self) -> Result<TrajectoryBudget, ConfigError> {
        Ok(TrajectoryBudget::new(self.trajectories, self.steps, self.burn_in)?)
    }

    pub fn extra_f64(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        Ok(parsed(&self.extras, key)?.unwrap_or(default))
    }

    pub fn extra_u64(&self, key: &str, default: u64) -> Result<u64, ConfigError> {
        Ok(parsed(&self.extras, key)?.unwrap_or(default))
    }

    pub fn extra_usize(&self, key: &str, default: usize) -> Result<usize, ConfigError> {
        Ok(parsed(&self.extras, key)?.unwrap_or(default))
    }

    pub fn extra_str(&self, key: &str) -> Option<&str> {
        self.extras.get(key).map(String::as_str)
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            gamma: self.params.gamma,
            omega: self.params.omega,
            dt: self.params.dt,
            eta: self.params.eta,
            scenario: self.scenario.clone(),
            steps: self.steps,
            trajectories: self.trajectories,
            burn_in: self.burn_in,
            workers: self.workers,
            fast: self.fast,
        }
    }

    /// Output base path for this subcommand; `<base>.csv`, `<base>.json` etc.
    pub fn out_base(&self, default_stem: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default_stem))
    }
}
