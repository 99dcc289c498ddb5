//! Run configuration: a TOML file with `[env]`, `[hawkes]`, `[sac]`,
//! `[calibration]`, `[lin_grid]`, `[backtest]` and `[paths]` sections.
//! Unknown keys are rejected and the whole configuration is validated before
//! any module sees it. `configs/default.toml` documents every key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{fingerprint, CancelTruncation, EnvConfig};
use crate::error::{Error, Result};
use crate::hawkes::HawkesParams;
use crate::lob::MarkParams;
use crate::sac::SacConfig;
use crate::strategies::{product_grid, LinParams};

/// The shipped default configuration.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    master_seed: u64,
    env: RawEnv,
    hawkes: RawHawkes,
    #[serde(default)]
    sac: SacConfig,
    #[serde(default)]
    calibration: CalibrationConfig,
    #[serde(default)]
    lin_grid: LinGridConfig,
    #[serde(default)]
    backtest: BacktestConfig,
    #[serde(default)]
    paths: PathsConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnv {
    dt: f64,
    horizon: f64,
    tick: f64,
    phi: f64,
    inventory_limit: i32,
    z1: f64,
    z2: f64,
    z3: f64,
    maker_fee: f64,
    taker_fee: f64,
    p0: f64,
    init_spread_ticks: f64,
    max_offset_ticks: i32,
    jump_loc_ticks: f64,
    jump_scale_ticks: f64,
    #[serde(default = "default_trunc")]
    cancel_truncation: CancelTruncation,
    #[serde(default)]
    round_jumps: bool,
    #[serde(default = "default_true")]
    agent_feedback: bool,
}

fn default_trunc() -> CancelTruncation {
    CancelTruncation::Spread
}

fn default_true() -> bool {
    true
}

/// A matrix given in full or as one value for every entry.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum MatrixOrScalar {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHawkes {
    mu: Vec<f64>,
    alpha: Vec<Vec<f64>>,
    beta: MatrixOrScalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub n_steps: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { n_steps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinGridConfig {
    pub theta0: Vec<f64>,
    pub theta1: Vec<f64>,
    pub n_episodes: usize,
}

impl Default for LinGridConfig {
    fn default() -> Self {
        Self {
            theta0: vec![0.0, 1.0, 2.0, 3.0, 4.0],
            theta1: vec![0.0, 0.5, 1.0, 1.5, 2.0],
            n_episodes: 200,
        }
    }
}

impl LinGridConfig {
    pub fn grid(&self) -> Result<Vec<LinParams>> {
        product_grid(&self.theta0, &self.theta1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub n_episodes: usize,
    pub noise_variances: Vec<f64>,
    pub maker_fees: Vec<f64>,
    /// Training steps for each per-fee retraining; 0 uses `sac.total_steps`.
    pub retrain_steps: u64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            n_episodes: 1000,
            noise_variances: vec![0.1, 0.2, 0.3],
            maker_fees: vec![0.0, 0.002, 0.004, 0.006],
            retrain_steps: 0,
        }
    }
}

/// File names, relative to the `--out` directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub norm_stats: PathBuf,
    pub checkpoint: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            norm_stats: "norm_stats.json".into(),
            checkpoint: "policy_best.ckpt".into(),
            out_dir: "runs".into(),
        }
    }
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub master_seed: u64,
    pub env: EnvConfig,
    pub sac: SacConfig,
    pub calibration: CalibrationConfig,
    pub lin_grid: LinGridConfig,
    pub backtest: BacktestConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_TOML).expect("shipped default config is valid")
    }
}

fn matrix(rows: &[Vec<f64>], n: usize, key: &str) -> Result<Vec<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::config(key, format!("must be a {n}x{n} matrix")));
    }
    Ok(rows.concat())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<string>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.into(),
            msg: e.to_string(),
        })?;
        let n = raw.hawkes.mu.len();
        let alpha = matrix(&raw.hawkes.alpha, n, "hawkes.alpha")?;
        let beta = match &raw.hawkes.beta {
            MatrixOrScalar::Scalar(b) => vec![*b; n * n],
            MatrixOrScalar::Matrix(m) => matrix(m, n, "hawkes.beta")?,
        };
        let hawkes = HawkesParams::new(raw.hawkes.mu.clone(), alpha, beta).map_err(|e| match e {
            Error::Unstable { radius } => Error::config(
                "hawkes.alpha",
                format!("branching spectral radius {radius:.6} must be < 1"),
            ),
            other => other,
        })?;
        let e = &raw.env;
        let env = EnvConfig {
            dt: e.dt,
            horizon: e.horizon,
            tick: e.tick,
            phi: e.phi,
            inventory_limit: e.inventory_limit,
            z1: e.z1,
            z2: e.z2,
            z3: e.z3,
            maker_fee: e.maker_fee,
            taker_fee: e.taker_fee,
            p0: e.p0,
            init_spread_ticks: e.init_spread_ticks,
            max_offset_ticks: e.max_offset_ticks,
            marks: MarkParams {
                loc: e.jump_loc_ticks,
                scale: e.jump_scale_ticks,
            },
            hawkes,
            cancel_trunc: e.cancel_truncation,
            round_jumps: e.round_jumps,
            agent_feedback: e.agent_feedback,
        };
        let cfg = Self {
            master_seed: raw.master_seed,
            env,
            sac: raw.sac,
            calibration: raw.calibration,
            lin_grid: raw.lin_grid,
            backtest: raw.backtest,
            paths: raw.paths,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.sac.validate()?;
        if self.calibration.n_steps < 2 {
            return Err(Error::config("calibration.n_steps", "must be >= 2"));
        }
        if self.lin_grid.theta0.is_empty() || self.lin_grid.theta1.is_empty() {
            return Err(Error::config("lin_grid", "grid must be non-empty"));
        }
        self.lin_grid
            .grid()
            .map_err(|e| Error::config("lin_grid", e.to_string()))?;
        if self.lin_grid.n_episodes < 2 {
            return Err(Error::config("lin_grid.n_episodes", "must be >= 2"));
        }
        if self.backtest.n_episodes < 2 {
            return Err(Error::config("backtest.n_episodes", "must be >= 2"));
        }
        if self.backtest.noise_variances.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("backtest.noise_variances", "must be finite and >= 0"));
        }
        if self.backtest.maker_fees.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("backtest.maker_fees", "must be finite and >= 0"));
        }
        Ok(())
    }

    /// Short content hash embedded in every output.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    /// Provenance line prefixed to CSV outputs.
    pub fn csv_header(&self) -> String {
        format!(
            "# config_hash={} master_seed={}\n",
            self.fingerprint(),
            self.master_seed
        )
    }

    /// `p` if absolute, else `p` below `out`.
    pub fn resolve(out: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out.join(p)
        }
    }
}
