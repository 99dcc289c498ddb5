//! Monte Carlo evaluation of controllers and the sensitivity sweeps.

use std::sync::OnceLock;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{EnvConfig, MarketEnv};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::stats;
use crate::strategies::Controller;

/// Outcome of one evaluation episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    /// Terminal wealth `W_T = I_T·P_T + X_T`.
    pub pnl: f64,
    /// Sum of step rewards.
    pub episode_return: f64,
    pub terminal_inventory: i32,
    /// Mean of `|I|` over step ends.
    pub map: f64,
    pub n_trades: u64,
    /// `φ·∫|I| dt`.
    pub penalty: f64,
    /// Sum of limit-fill prices.
    pub maker_notional: f64,
    /// Wealth after each step, when requested.
    pub wealth: Option<Vec<f64>>,
}

impl EpisodeRecord {
    /// `return = pnl − φ·∫|I|` up to round-off.
    pub fn identity_holds(&self) -> bool {
        let scale = self.pnl.abs().max(self.penalty).max(1.0);
        (self.episode_return - (self.pnl - self.penalty)).abs() <= 1e-9 * scale
    }
}

/// Runs one episode of `controller` from `seed` on a prepared environment.
pub fn run_episode(
    env: &mut MarketEnv,
    controller: &dyn Controller,
    seed: u64,
    keep_wealth: bool,
) -> Result<EpisodeRecord> {
    let mut obs = env.reset(seed);
    let (mut ret, mut abs_inv) = (0.0, 0.0);
    let mut wealth = keep_wealth.then(|| Vec::with_capacity(env.n_steps()));
    loop {
        let action = controller.act(&obs)?;
        let r = env.step(action)?;
        ret += r.reward;
        abs_inv += r.info.inventory.abs() as f64;
        if let Some(w) = wealth.as_mut() {
            w.push(r.info.wealth);
        }
        obs = r.obs;
        if r.done {
            break;
        }
    }
    let agent = env.agent();
    let rec = EpisodeRecord {
        seed,
        pnl: env.wealth(),
        episode_return: ret,
        terminal_inventory: agent.inventory,
        map: abs_inv / env.n_steps() as f64,
        n_trades: agent.n_trades(),
        penalty: env.config().phi * env.inventory_time(),
        maker_notional: agent.maker_notional,
        wealth,
    };
    if !rec.identity_holds() {
        return Err(Error::Contract(format!(
            "episode {seed}: return {} != pnl {} - penalty {}",
            rec.episode_return, rec.pnl, rec.penalty
        )));
    }
    Ok(rec)
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var("MM_SIM_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
    })
}

/// Baseline intensities perturbed by one Gaussian draw of variance
/// `variance` per dimension, clamped at zero.
pub fn perturbed_config(cfg: &EnvConfig, variance: f64, episode_seed: u64) -> Result<EnvConfig> {
    if variance == 0.0 {
        return Ok(cfg.clone());
    }
    if !(variance.is_finite() && variance > 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance must be >= 0, got {variance}")));
    }
    let mut rng = seed::rng(episode_seed, Stream::Noise);
    let sd = variance.sqrt();
    let mu: Vec<f64> = cfg
        .hawkes
        .mu()
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            (m + sd * z).max(0.0)
        })
        .collect();
    let mut out = cfg.clone();
    out.hawkes = cfg.hawkes.with_mu(mu)?;
    out.validate()?;
    Ok(out)
}

/// Runs `n_episodes` deterministic episodes with seeds `seed_base + i` and
/// returns the records in seed order. Parallel over `MM_SIM_THREADS`
/// workers (0 = one per core).
pub fn run_monte_carlo(
    cfg: &EnvConfig,
    controller: &dyn Controller,
    n_episodes: usize,
    seed_base: u64,
) -> Result<Vec<EpisodeRecord>> {
    run_monte_carlo_noisy(cfg, controller, n_episodes, seed_base, 0.0)
}

/// As [`run_monte_carlo`] with baseline-intensity noise of the given
/// variance, frozen within each episode.
pub fn run_monte_carlo_noisy(
    cfg: &EnvConfig,
    controller: &dyn Controller,
    n_episodes: usize,
    seed_base: u64,
    variance: f64,
) -> Result<Vec<EpisodeRecord>> {
    run_monte_carlo_with(cfg, controller, n_episodes, seed_base, variance, false)
}

/// The general form: noise variance and whether to keep per-step wealth.
pub fn run_monte_carlo_with(
    cfg: &EnvConfig,
    controller: &dyn Controller,
    n_episodes: usize,
    seed_base: u64,
    variance: f64,
    keep_wealth: bool,
) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    let run = || {
        (0..n_episodes as u64)
            .into_par_iter()
            .map_init(
                || None::<MarketEnv>,
                |slot, i| {
                    let seed = seed_base.wrapping_add(i);
                    if variance == 0.0 {
                        if slot.is_none() {
                            *slot = Some(MarketEnv::new(cfg.clone())?);
                        }
                        run_episode(slot.as_mut().unwrap(), controller, seed, keep_wealth)
                    } else {
                        let mut env = MarketEnv::new(perturbed_config(cfg, variance, seed)?)?;
                        run_episode(&mut env, controller, seed, keep_wealth)
                    }
                },
            )
            .collect::<Result<Vec<_>>>()
    };
    pool().install(run)
}

/// Location, spread, shape and tail statistics of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Distribution {
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub jarque_bera_p: f64,
    pub p10: f64,
    pub p20: f64,
    pub p80: f64,
    pub p90: f64,
}

impl Distribution {
    pub fn of(xs: &[f64]) -> Result<Self> {
        let jb = stats::jarque_bera(xs)?;
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: stats::mean(xs),
            std: stats::sample_std(xs),
            skew: stats::skewness(xs),
            excess_kurtosis: stats::excess_kurtosis(xs),
            jarque_bera: jb.statistic,
            jarque_bera_p: jb.p_value,
            p10: stats::percentile_sorted(&sorted, 10.0),
            p20: stats::percentile_sorted(&sorted, 20.0),
            p80: stats::percentile_sorted(&sorted, 80.0),
            p90: stats::percentile_sorted(&sorted, 90.0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub n_episodes: usize,
    pub mean_return: f64,
    pub pnl: Distribution,
    pub sharpe: f64,
    pub abs_mean_terminal_inventory: f64,
    pub inventory: Distribution,
    pub map: f64,
    pub pnl_over_map: f64,
    pub mean_trades: f64,
    pub mean_maker_notional: f64,
}

pub fn sharpe_ratio(mean_pnl: f64, std_pnl: f64) -> f64 {
    if std_pnl > 0.0 {
        mean_pnl / std_pnl
    } else {
        0.0
    }
}

pub fn pnl_over_map(mean_pnl: f64, map: f64) -> f64 {
    if map > 0.0 {
        mean_pnl / map
    } else {
        f64::INFINITY.copysign(mean_pnl)
    }
}

pub fn summarize(records: &[EpisodeRecord]) -> Result<MetricsSummary> {
    if records.len() < 2 {
        return Err(Error::InsufficientData {
            need: 2,
            got: records.len(),
        });
    }
    let pnl: Vec<f64> = records.iter().map(|r| r.pnl).collect();
    let inv: Vec<f64> = records.iter().map(|r| r.terminal_inventory as f64).collect();
    let col = |f: fn(&EpisodeRecord) -> f64| stats::mean(&records.iter().map(f).collect::<Vec<_>>());
    let pnl_d = Distribution::of(&pnl)?;
    let map = col(|r| r.map);
    Ok(MetricsSummary {
        n_episodes: records.len(),
        mean_return: col(|r| r.episode_return),
        sharpe: sharpe_ratio(pnl_d.mean, pnl_d.std),
        pnl: pnl_d,
        abs_mean_terminal_inventory: col(|r| r.terminal_inventory.abs() as f64),
        inventory: Distribution::of(&inv)?,
        map,
        pnl_over_map: pnl_over_map(pnl_d.mean, map),
        mean_trades: col(|r| r.n_trades as f64),
        mean_maker_notional: col(|r| r.maker_notional),
    })
}

impl MetricsSummary {
    /// Row labels and values in report order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        let (p, i) = (&self.pnl, &self.inventory);
        vec![
            ("Mean episode return", self.mean_return),
            ("Mean PnL", p.mean),
            ("Std PnL", p.std),
            ("Kurtosis PnL", p.excess_kurtosis),
            ("Skew PnL", p.skew),
            ("Jarque Bera PnL", p.jarque_bera),
            ("Jarque Bera PnL p-value", p.jarque_bera_p),
            ("10th percentile PnL", p.p10),
            ("20th percentile PnL", p.p20),
            ("80th percentile PnL", p.p80),
            ("90th percentile PnL", p.p90),
            ("Sharpe Ratio", self.sharpe),
            ("Abs. mean terminal inv.", self.abs_mean_terminal_inventory),
            ("Mean terminal inv.", i.mean),
            ("Std terminal inv.", i.std),
            ("Kurtosis inv.", i.excess_kurtosis),
            ("Skew inv.", i.skew),
            ("Jarque Bera inv.", i.jarque_bera),
            ("Jarque Bera inv. p-value", i.jarque_bera_p),
            ("10th percentile inv.", i.p10),
            ("20th percentile inv.", i.p20),
            ("80th percentile inv.", i.p80),
            ("90th percentile inv.", i.p90),
            ("Mean Absolute Position (MAP)", self.map),
            ("(Mean PnL)/MAP", self.pnl_over_map),
            ("Mean number of transactions", self.mean_trades),
        ]
    }
}

/// Fixed-width text table with one column per named summary.
pub fn text_report(columns: &[(String, MetricsSummary)], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(&format!("{:<32}", "Metric"));
    for (name, _) in columns {
        s.push_str(&format!("{name:>16}"));
    }
    s.push('\n');
    let labels: Vec<&str> = match columns.first() {
        Some((_, m)) => m.rows().iter().map(|r| r.0).collect(),
        None => Vec::new(),
    };
    for (k, label) in labels.iter().enumerate() {
        s.push_str(&format!("{label:<32}"));
        for (_, m) in columns {
            s.push_str(&format!("{:>16.4}", m.rows()[k].1));
        }
        s.push('\n');
    }
    s
}

/// JSON object keyed by report row names, one object per column.
pub fn json_report(
    columns: &[(String, MetricsSummary)],
    config_hash: &str,
    master_seed: u64,
) -> String {
    let mut root = serde_json::Map::new();
    root.insert("config_hash".into(), config_hash.into());
    root.insert("master_seed".into(), master_seed.into());
    let mut cols = serde_json::Map::new();
    for (name, m) in columns {
        let mut o = serde_json::Map::new();
        o.insert("n_episodes".into(), m.n_episodes.into());
        for (label, v) in m.rows() {
            o.insert(label.into(), json_number(v));
        }
        cols.insert(name.clone(), o.into());
    }
    root.insert("summaries".into(), cols.into());
    let mut s = serde_json::to_string_pretty(&serde_json::Value::Object(root)).expect("json");
    s.push('\n');
    s
}

fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

pub fn episodes_csv(records: &[EpisodeRecord], header: &str) -> String {
    let mut s = String::from(header);
    s.push_str("seed,pnl,return,terminal_inv,map,n_trades\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seed, r.pnl, r.episode_return, r.terminal_inventory, r.map, r.n_trades
        ));
    }
    s
}

/// Mean wealth over time with a normal 95% band for the mean:
/// `t,mean_pnl,std_pnl,ci_lo,ci_hi`.
pub fn pnl_path_csv(records: &[EpisodeRecord], dt: f64, header: &str) -> Result<String> {
    let paths: Vec<&Vec<f64>> = records
        .iter()
        .map(|r| r.wealth.as_ref().ok_or_else(|| Error::State("records lack wealth paths".into())))
        .collect::<Result<_>>()?;
    let mut s = String::from(header);
    s.push_str("t,mean_pnl,std_pnl,ci_lo,ci_hi\n");
    let steps = paths.first().map_or(0, |p| p.len());
    let n = paths.len() as f64;
    for k in 0..steps {
        let col: Vec<f64> = paths.iter().map(|p| p[k]).collect();
        let (m, sd) = (stats::mean(&col), stats::sample_std(&col));
        let half = 1.96 * sd / n.sqrt();
        s.push_str(&format!("{},{},{},{},{}\n", (k + 1) as f64 * dt, m, sd, m - half, m + half));
    }
    Ok(s)
}

/// One row of a sweep result table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub level: f64,
    pub summary: MetricsSummary,
}

/// Evaluates a fixed controller under each noise variance on the same
/// episode seeds.
pub fn sweep_noise(
    cfg: &EnvConfig,
    controller: &dyn Controller,
    variances: &[f64],
    n_episodes: usize,
    seed_base: u64,
) -> Result<Vec<SweepRow>> {
    variances
        .iter()
        .map(|&v| {
            let recs = run_monte_carlo_noisy(cfg, controller, n_episodes, seed_base, v)?;
            Ok(SweepRow {
                level: v,
                summary: summarize(&recs)?,
            })
        })
        .collect()
}

/// Evaluates a fixed controller under each maker fee on the same seeds.
pub fn sweep_fees(
    cfg: &EnvConfig,
    controller: &dyn Controller,
    maker_fees: &[f64],
    n_episodes: usize,
    seed_base: u64,
) -> Result<Vec<SweepRow>> {
    maker_fees
        .iter()
        .map(|&fee| {
            let c = EnvConfig {
                maker_fee: fee,
                ..cfg.clone()
            };
            let recs = run_monte_carlo(&c, controller, n_episodes, seed_base)?;
            Ok(SweepRow {
                level: fee,
                summary: summarize(&recs)?,
            })
        })
        .collect()
}

/// Smallest level at which the Sharpe ratio reaches zero, by linear
/// interpolation between adjacent rows; `None` if it stays positive.
pub fn sharpe_zero_crossing(rows: &[SweepRow]) -> Option<f64> {
    let first = rows.first()?;
    if first.summary.sharpe <= 0.0 {
        return Some(first.level);
    }
    rows.windows(2).find_map(|w| {
        let (a, b) = (&w[0], &w[1]);
        (b.summary.sharpe <= 0.0).then(|| {
            let (sa, sb) = (a.summary.sharpe, b.summary.sharpe);
            a.level + (b.level - a.level) * sa / (sa - sb)
        })
    })
}

pub fn sweep_csv(rows: &[(String, SweepRow)], level_name: &str, header: &str) -> String {
    let mut s = String::from(header);
    s.push_str(&format!(
        "controller,{level_name},mean_return,mean_pnl,std_pnl,sharpe,map,pnl_over_map,mean_trades\n"
    ));
    for (name, r) in rows {
        let m = &r.summary;
        s.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{}\n",
            r.level, m.mean_return, m.pnl.mean, m.pnl.std, m.sharpe, m.map, m.pnl_over_map, m.mean_trades
        ));
    }
    s
}
