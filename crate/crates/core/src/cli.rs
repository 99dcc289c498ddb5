//! Command-line surface: calibration, training, backtests, the LIN grid
//! search, the two sensitivity sweeps and single-episode simulation. Every
//! file written starts with (CSV) or contains (JSON) the configuration hash
//! and master seed; nothing time-dependent is written.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backtest::{
    episodes_csv, json_report, pnl_path_csv, run_monte_carlo, run_monte_carlo_with, sharpe_zero_crossing, summarize,
    sweep_csv, sweep_fees, sweep_noise, text_report, MetricsSummary, SweepRow,
};
use crate::config::RunConfig;
use crate::env::{calibrate_normalization, Action, EnvConfig, MarketEnv, NormStats};
use crate::error::{Error, Result};
use crate::nn::PolicyCheckpoint;
use crate::sac::{curve_csv, train, SacConfig, TrainOutcome};
use crate::seed::{self, Purpose};
use crate::strategies::{grid_search_lin, write_grid_csv, Controller, LinParams, Neural, Sym};

#[derive(Debug, Parser)]
#[command(name = "mmlab", version, about = "Hawkes LOB market-making laboratory")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); the shipped defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `master_seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of evaluation episodes; overrides the configured count.
    #[arg(long, global = true)]
    pub episodes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the spread/trend normalisation from a random-policy run.
    CalibrateNorm {
        /// Calibration length in environment steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the SAC policy; writes best and final checkpoints and the curve.
    Train {
        /// Training length in environment steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Monte Carlo backtest of one or more controllers on common seeds.
    Backtest(ControllerArgs),
    /// Grid search over the LIN family; writes the report and the selection.
    GridLin,
    /// Evaluate fixed controllers under baseline-intensity noise.
    SweepNoise(ControllerArgs),
    /// Evaluate controllers under each maker fee, optionally retraining.
    SweepFees {
        #[command(flatten)]
        controllers: ControllerArgs,
        /// Retrain the neural controller at each fee level.
        #[arg(long)]
        retrain: bool,
        /// Training steps per retraining; overrides `backtest.retrain_steps`.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Run one episode and write the event log and per-step trace.
    Simulate {
        /// Controller to quote with (default `sym`).
        #[arg(long)]
        controller: Option<String>,
        /// Episode index below the simulation seed.
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
}

#[derive(Debug, Args)]
pub struct ControllerArgs {
    /// `sym`, `lin` (the grid-selected parameters), `lin:θ0,θ1`, `drl`
    /// (the configured checkpoint) or a checkpoint path. Repeatable.
    #[arg(long = "controller")]
    pub controllers: Vec<String>,
}

/// Everything a command needs: the validated config and the output folder.
pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub episodes: Option<usize>,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.master_seed = s;
        }
        let out = common.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            cfg,
            out,
            episodes: common.episodes,
        })
    }

    fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        RunConfig::resolve(&self.out, p.as_ref())
    }

    fn write(&self, name: impl AsRef<Path>, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        eprintln!("wrote {}", p.display());
        Ok(p)
    }

    fn header(&self) -> String {
        self.cfg.csv_header()
    }

    fn n_episodes(&self) -> usize {
        self.episodes.unwrap_or(self.cfg.backtest.n_episodes)
    }

    fn backtest_seed(&self) -> u64 {
        seed::derive(self.cfg.master_seed, Purpose::Backtest)
    }

    fn norm_path(&self) -> PathBuf {
        self.path(&self.cfg.paths.norm_stats)
    }

    /// Loads the normalisation statistics, calibrating first when the file
    /// is missing. Stale statistics from another configuration are rejected.
    pub fn norm_stats(&self) -> Result<NormStats> {
        let p = self.norm_path();
        if !p.exists() {
            return self.calibrate(None);
        }
        let ns = NormStats::load(&p)?;
        let want = self.cfg.env.fingerprint();
        if ns.config_hash != want {
            return Err(Error::Calibration(format!(
                "{} was calibrated for config {} but the environment is {want}; rerun calibrate-norm",
                p.display(),
                ns.config_hash
            )));
        }
        Ok(ns)
    }

    fn calibrate(&self, steps: Option<u64>) -> Result<NormStats> {
        let n = steps.unwrap_or(self.cfg.calibration.n_steps);
        let ns = calibrate_normalization(&self.cfg.env, self.cfg.master_seed, n)?;
        self.write(&self.cfg.paths.norm_stats, &ns.to_json())?;
        Ok(ns)
    }

    fn lin_selected_path(&self) -> PathBuf {
        self.path("lin_selected.json")
    }

    /// The grid-selected LIN parameters, searching when none are stored.
    fn lin_selected(&self) -> Result<LinParams> {
        let p = self.lin_selected_path();
        if p.exists() {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let sel: LinSelection = serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.clone(),
                msg: e.to_string(),
            })?;
            if sel.config_hash == self.cfg.fingerprint() && sel.master_seed == self.cfg.master_seed {
                return Ok(sel.params);
            }
            eprintln!("{} is from another configuration; searching again", p.display());
        }
        self.grid_lin()
    }

    fn grid_lin(&self) -> Result<LinParams> {
        let g = &self.cfg.lin_grid;
        let seed_base = seed::derive(self.cfg.master_seed, Purpose::GridSearch);
        let (best, rows) = grid_search_lin(&self.cfg.env, &g.grid()?, g.n_episodes, seed_base)?;
        self.write("lin_grid.csv", &write_grid_csv(&rows, &self.header()))?;
        let sel = LinSelection {
            config_hash: self.cfg.fingerprint(),
            master_seed: self.cfg.master_seed,
            params: best,
        };
        self.write("lin_selected.json", &to_json(&sel))?;
        Ok(best)
    }

    fn load_policy(&self, path: &Path) -> Result<Neural> {
        let norm = self.norm_stats()?;
        let ck = PolicyCheckpoint::load(path, Some(&norm)).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!(
                "{}: {m} (normalisation file {})",
                path.display(),
                self.norm_path().display()
            )),
            e => e,
        })?;
        Ok(Neural::from_checkpoint(ck, &self.cfg.env))
    }

    /// Resolves a `--controller` value to a named controller.
    pub fn controller(&self, spec: &str) -> Result<Named> {
        let spec = spec.trim();
        if spec.eq_ignore_ascii_case("sym") {
            return Ok(Named::new("SYM", Box::new(Sym)));
        }
        if spec.eq_ignore_ascii_case("lin") {
            return Ok(Named::new("LIN", Box::new(self.lin_selected()?)));
        }
        if let Some(rest) = spec.strip_prefix("lin:") {
            let parts: Vec<&str> = rest.split(',').collect();
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad LIN parameters `{rest}`")))
            };
            if parts.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "expected lin:θ0,θ1, got `{spec}`"
                )));
            }
            let p = LinParams::new(parse(parts[0])?, parse(parts[1])?)?;
            return Ok(Named::new(&p.name(), Box::new(p)));
        }
        if spec.eq_ignore_ascii_case("drl") {
            let p = self.path(&self.cfg.paths.checkpoint);
            return Ok(Named::new("DRL", Box::new(self.load_policy(&p)?)));
        }
        let p = PathBuf::from(spec);
        if !p.exists() {
            return Err(Error::InvalidArgument(format!(
                "unknown controller `{spec}` (expected sym, lin, lin:θ0,θ1, drl or a checkpoint path)"
            )));
        }
        let name = p
            .file_stem()
            .map_or_else(|| "DRL".to_string(), |s| s.to_string_lossy().into_owned());
        Ok(Named::new(&name, Box::new(self.load_policy(&p)?)))
    }

    /// The requested controllers, or DRL (when a checkpoint exists), SYM and
    /// LIN by default.
    fn controllers(&self, specs: &[String]) -> Result<Vec<Named>> {
        let defaults: Vec<String> = if specs.is_empty() {
            let mut d = Vec::new();
            if self.path(&self.cfg.paths.checkpoint).exists() {
                d.push("drl".to_string());
            }
            d.extend(["sym".to_string(), "lin".to_string()]);
            d
        } else {
            specs.to_vec()
        };
        defaults.iter().map(|s| self.controller(s)).collect()
    }
}

/// Stored LIN grid-search result.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LinSelection {
    config_hash: String,
    master_seed: u64,
    params: LinParams,
}

/// A controller with its report label.
pub struct Named {
    pub name: String,
    pub controller: Box<dyn Controller>,
}

impl Named {
    fn new(name: &str, controller: Box<dyn Controller>) -> Self {
        Self {
            name: name.to_string(),
            controller,
        }
    }

    fn file_tag(&self) -> String {
        self.name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect::<String>()
            .trim_matches('_')
            .to_string()
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: String,
    master_seed: u64,
    total_steps: u64,
    maker_fee: f64,
    best_eval_return: Option<f64>,
    best_checkpoint: &'a str,
    final_checkpoint: &'a str,
}

/// Trains with progress on stderr and writes checkpoints, curve and summary
/// under names carrying `tag`.
fn run_training(ctx: &Context, env: &EnvConfig, steps: u64, tag: &str) -> Result<TrainOutcome> {
    let norm = ctx.norm_stats()?;
    let sac = SacConfig {
        total_steps: steps,
        ..ctx.cfg.sac.clone()
    };
    let best_name = format!("policy_best{tag}.ckpt");
    let final_name = format!("policy_final{tag}.ckpt");
    let diag = ctx.path(format!("policy_diagnostic{tag}.ckpt"));
    let start = Instant::now();
    let outcome = train(env, &sac, &norm, ctx.cfg.master_seed, Some(&diag), |r| {
        eprintln!(
            "step {:>8}  eval return {:>10.4}  eval pnl {:>10.4}  alpha {:.5}  [{:.0}s]",
            r.env_step,
            r.mean_eval_return,
            r.mean_eval_pnl,
            r.alpha,
            start.elapsed().as_secs_f64()
        );
    })?;
    outcome.best_policy.save(&ctx.path(&best_name))?;
    outcome.final_policy.save(&ctx.path(&final_name))?;
    ctx.write(format!("training_curve{tag}.csv"), &curve_csv(&outcome.curve, &ctx.header()))?;
    let summary = TrainSummary {
        config_hash: ctx.cfg.fingerprint(),
        master_seed: ctx.cfg.master_seed,
        total_steps: steps,
        maker_fee: env.maker_fee,
        best_eval_return: outcome.best_eval_return,
        best_checkpoint: &best_name,
        final_checkpoint: &final_name,
    };
    ctx.write(format!("train_summary{tag}.json"), &to_json(&summary))?;
    eprintln!("training took {:.1}s", start.elapsed().as_secs_f64());
    Ok(outcome)
}

fn backtest(ctx: &Context, specs: &[String]) -> Result<()> {
    let ctls = ctx.controllers(specs)?;
    let n = ctx.n_episodes();
    let mut columns: Vec<(String, MetricsSummary)> = Vec::new();
    for c in &ctls {
        let recs =
            run_monte_carlo_with(&ctx.cfg.env, c.controller.as_ref(), n, ctx.backtest_seed(), 0.0, true)?;
        let tag = c.file_tag();
        ctx.write(format!("episodes_{tag}.csv"), &episodes_csv(&recs, &ctx.header()))?;
        ctx.write(
            format!("pnl_path_{tag}.csv"),
            &pnl_path_csv(&recs, ctx.cfg.env.dt, &ctx.header())?,
        )?;
        columns.push((c.name.clone(), summarize(&recs)?));
    }
    let report = text_report(&columns, &ctx.header());
    ctx.write("summary.txt", &report)?;
    ctx.write(
        "summary.json",
        &json_report(&columns, &ctx.cfg.fingerprint(), ctx.cfg.master_seed),
    )?;
    print!("{report}");
    Ok(())
}

fn sweep_noise_cmd(ctx: &Context, specs: &[String]) -> Result<()> {
    let ctls = ctx.controllers(specs)?;
    let mut levels = vec![0.0];
    levels.extend(ctx.cfg.backtest.noise_variances.iter().copied().filter(|v| *v != 0.0));
    let mut rows = Vec::new();
    for c in &ctls {
        for r in sweep_noise(
            &ctx.cfg.env,
            c.controller.as_ref(),
            &levels,
            ctx.n_episodes(),
            ctx.backtest_seed(),
        )? {
            rows.push((c.name.clone(), r));
        }
    }
    let csv = sweep_csv(&rows, "noise_variance", &ctx.header());
    ctx.write("sweep_noise.csv", &csv)?;
    print!("{csv}");
    Ok(())
}

/// Fee at which the mean PnL (hence the Sharpe ratio) reaches zero. For a
/// fixed controller every limit fill pays `fee · price`, so PnL is affine
/// in the fee with slope `−maker_notional` and the crossing is exact.
pub fn exact_zero_crossing(base: &MetricsSummary) -> Option<f64> {
    (base.mean_maker_notional > 0.0).then(|| base.pnl.mean / base.mean_maker_notional)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn sweep_fees_cmd(ctx: &Context, specs: &[String], retrain: bool, steps: Option<u64>) -> Result<()> {
    let ctls = ctx.controllers(specs)?;
    let fees = &ctx.cfg.backtest.maker_fees;
    let mut rows = Vec::new();
    let mut crossings = ctx.header();
    crossings.push_str("controller,zero_crossing_fee_grid,zero_crossing_fee_exact\n");
    for c in &ctls {
        let base_cfg = EnvConfig {
            maker_fee: 0.0,
            ..ctx.cfg.env.clone()
        };
        let r = sweep_fees(&base_cfg, c.controller.as_ref(), fees, ctx.n_episodes(), ctx.backtest_seed())?;
        let base = match r.iter().find(|row| row.level == 0.0) {
            Some(row) => row.summary,
            None => summarize(&run_monte_carlo(
                &base_cfg,
                c.controller.as_ref(),
                ctx.n_episodes(),
                ctx.backtest_seed(),
            )?)?,
        };
        crossings.push_str(&format!(
            "{},{},{}\n",
            c.name,
            fmt_opt(sharpe_zero_crossing(&r)),
            fmt_opt(exact_zero_crossing(&base))
        ));
        rows.extend(r.into_iter().map(|row| (c.name.clone(), row)));
    }
    let csv = sweep_csv(&rows, "maker_fee", &ctx.header());
    ctx.write("sweep_fees.csv", &csv)?;
    ctx.write("sweep_fees_crossing.csv", &crossings)?;
    print!("{csv}{crossings}");
    if retrain {
        let steps = steps.unwrap_or(match ctx.cfg.backtest.retrain_steps {
            0 => ctx.cfg.sac.total_steps,
            s => s,
        });
        let mut rows = Vec::new();
        for &fee in fees {
            let env = EnvConfig {
                maker_fee: fee,
                ..ctx.cfg.env.clone()
            };
            eprintln!("retraining at maker fee {fee}");
            let out = run_training(ctx, &env, steps, &format!("_fee{fee}"))?;
            let ctl = Neural::from_checkpoint(out.best_policy, &env);
            let recs = run_monte_carlo(&env, &ctl, ctx.n_episodes(), ctx.backtest_seed())?;
            rows.push((
                "DRL-retrained".to_string(),
                SweepRow {
                    level: fee,
                    summary: summarize(&recs)?,
                },
            ));
        }
        let csv = sweep_csv(&rows, "maker_fee", &ctx.header());
        ctx.write("sweep_fees_retrain.csv", &csv)?;
        print!("{csv}");
    }
    Ok(())
}

fn simulate(ctx: &Context, spec: Option<&str>, index: u64) -> Result<()> {
    let ctl = ctx.controller(spec.unwrap_or("sym"))?;
    let mut env = MarketEnv::new(ctx.cfg.env.clone())?;
    env.set_recording(true);
    let ep_seed = seed::child(seed::derive(ctx.cfg.master_seed, Purpose::Simulation), index);
    let mut obs = env.reset(ep_seed);
    loop {
        let a: Action = ctl.controller.act(&obs)?;
        let r = env.step(a)?;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    let log = env.take_log();
    let mut ev = ctx.header();
    ev.push_str("time,etype,jump_ticks,source,bid,ask\n");
    for e in &log.events {
        ev.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.event.time,
            e.event.etype.name(),
            e.event.jump.map_or(String::new(), |j| j.to_string()),
            e.event.source.as_str(),
            e.bid,
            e.ask
        ));
    }
    ctx.write("events.csv", &ev)?;
    let mut tr = ctx.header();
    tr.push_str("t,I,X,bid,ask,off_a,off_b,fills,reward\n");
    for s in &log.steps {
        tr.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.t, s.inventory, s.cash, s.bid, s.ask, s.off_a, s.off_b, s.fills, s.reward
        ));
    }
    ctx.write("trace.csv", &tr)?;
    println!(
        "{}: {} events, {} trades, terminal wealth {}",
        ctl.name,
        log.events.len(),
        log.trades.len(),
        env.wealth()
    );
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let ctx = Context::new(&cli.common)?;
    match cli.command {
        Command::CalibrateNorm { steps } => {
            let ns = ctx.calibrate(steps)?;
            print!("{}", ns.to_json());
        }
        Command::Train { steps } => {
            let steps = steps.unwrap_or(ctx.cfg.sac.total_steps);
            run_training(&ctx, &ctx.cfg.env, steps, "")?;
        }
        Command::Backtest(c) => backtest(&ctx, &c.controllers)?,
        Command::GridLin => {
            let p = ctx.grid_lin()?;
            println!("selected LIN θ0={} θ1={}", p.theta0, p.theta1);
        }
        Command::SweepNoise(c) => sweep_noise_cmd(&ctx, &c.controllers)?,
        Command::SweepFees {
            controllers,
            retrain,
            steps,
        } => sweep_fees_cmd(&ctx, &controllers.controllers, retrain, steps)?,
        Command::Simulate { controller, index } => simulate(&ctx, controller.as_deref(), index)?,
    }
    Ok(())
}
