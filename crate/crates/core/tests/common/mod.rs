//! Independent oracles shared by the integration tests. Nothing here calls
//! the engine's own recursions: intensities are summed over the full
//! history, compensators are integrated with their own bookkeeping, and
//! gradients are central finite differences.

#![allow(dead_code)]

use mmlab::env::LoggedEvent;
use mmlab::hawkes::{HawkesParams, HawkesState, RawEvent};
use mmlab::lob::EventType;
use mmlab::seed::{self, Stream};

/// Simulates market events on `[0, horizon)` with the thinning engine.
pub fn simulate(params: &HawkesParams, seed: u64, horizon: f64) -> Vec<RawEvent> {
    let mut st = HawkesState::new(params);
    let mut rng = seed::rng(seed, Stream::Market);
    let mut out = Vec::new();
    while let Some(ev) = st.next_event(params, &mut rng, horizon).unwrap() {
        out.push(ev);
    }
    out
}

/// `λ_k(t) = μ_k + Σ_{s ≤ t} α_{k,l(s)} e^{−β_{k,l(s)} (t − s)}`, summed over
/// the whole history.
pub fn brute_intensity(params: &HawkesParams, history: &[RawEvent], t: f64) -> Vec<f64> {
    let n = params.dim();
    (0..n)
        .map(|k| {
            params.mu()[k]
                + history
                    .iter()
                    .filter(|e| e.time <= t)
                    .map(|e| params.alpha_at(k, e.dim) * (-params.beta_at(k, e.dim) * (t - e.time)).exp())
                    .sum::<f64>()
        })
        .collect()
}

/// Compensator increments `Λ_k(t_{i}) − Λ_k(t_{i−1})` between consecutive
/// events of dimension `k`, starting from 0. Each kernel sum is carried
/// between events and integrated in closed form over every gap.
pub fn compensator_increments(params: &HawkesParams, events: &[RawEvent], k: usize) -> Vec<f64> {
    let n = params.dim();
    // s[l] = Σ_{past events of dim l} exp(−β_{k,l}(t − s))
    let mut s = vec![0.0; n];
    let mut t = 0.0;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for e in events {
        let gap = e.time - t;
        acc += params.mu()[k] * gap;
        for l in 0..n {
            let b = params.beta_at(k, l);
            if s[l] != 0.0 {
                let a = params.alpha_at(k, l);
                acc += a / b * s[l] * (1.0 - (-b * gap).exp());
                s[l] *= (-b * gap).exp();
            }
        }
        t = e.time;
        if e.dim == k {
            out.push(acc);
            acc = 0.0;
        }
        s[e.dim] += 1.0;
    }
    out
}

pub fn exp1_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -(-x).exp_m1()
    }
}

/// Stationary rates by Gaussian elimination of `(I − A) λ = μ`.
pub fn stationary_by_elimination(params: &HawkesParams) -> Vec<f64> {
    let n = params.dim();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut row: Vec<f64> = (0..n)
                .map(|l| {
                    let a = params.alpha_at(k, l) / params.beta_at(k, l);
                    if k == l {
                        1.0 - a
                    } else {
                        -a
                    }
                })
                .collect();
            row.push(params.mu()[k]);
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs())).unwrap();
        m.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = m[r][c] / m[c][c];
                for j in c..=n {
                    m[r][j] -= f * m[c][j];
                }
            }
        }
    }
    (0..n).map(|k| m[k][n] / m[k][k]).collect()
}

/// Mid-price from the initial mid and the event log: every increasing
/// event adds and every decreasing one subtracts `J·δ/2`.
pub fn mid_from_events(p0: f64, tick: f64, events: &[LoggedEvent]) -> f64 {
    let mut signed = 0.0;
    for e in events {
        let j = e.event.jump.unwrap_or(0.0);
        match e.event.etype {
            EventType::MarketBuyAggressive | EventType::LimitBuyAggressive | EventType::CancelSellAggressive => {
                signed += j
            }
            EventType::MarketSellAggressive | EventType::LimitSellAggressive | EventType::CancelBuyAggressive => {
                signed -= j
            }
            _ => {}
        }
    }
    p0 + signed * tick / 2.0
}

/// Relative error with a floor on the scale for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
}

/// Central differences of `loss` around `params` for every coordinate whose
/// perturbation leaves `signature` unchanged (no ReLU kink, clamp or
/// min-selection switch inside `[θ − ε, θ + ε]`).
pub fn finite_difference_check<S: PartialEq>(
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
    mut signature: impl FnMut(&[f64]) -> S,
) -> GradCheck {
    let base = signature(params);
    let mut out = GradCheck::default();
    let mut p = params.to_vec();
    for i in 0..params.len() {
        p[i] = params[i] + eps;
        let (lp, sp) = (loss(&p), signature(&p));
        p[i] = params[i] - eps;
        let (lm, sm) = (loss(&p), signature(&p));
        p[i] = params[i];
        if sp != base || sm != base {
            out.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * eps);
        out.worst = out.worst.max(rel_err(analytic[i], fd, floor));
        out.checked += 1;
    }
    out
}

/// Finite-difference checks of the actor, critic and entropy-temperature
/// losses on `n_nets` random small networks.
pub fn loss_gradient_checks(n_nets: usize, seed: u64) -> [GradCheck; 3] {
    use mmlab::nn::{actor_forward, Mlp};
    use mmlab::sac::{actor_loss, alpha_loss, critic_input, critic_loss, policy_sample};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let mut rng = seed::rng(seed, Stream::Policy);
    let mut merged = [GradCheck::default(); 3];
    let mut merge = |slot: usize, g: GradCheck| {
        merged[slot].checked += g.checked;
        merged[slot].skipped += g.skipped;
        merged[slot].worst = merged[slot].worst.max(g.worst);
    };
    let (eps, floor) = (1e-5, 1e-6);
    for _ in 0..n_nets {
        let h = rng.random_range(3..=8);
        let batch = rng.random_range(2..=6);
        let actor = Mlp::new(&[3, h, h, 4], &mut rng);
        let q1 = Mlp::new(&[5, h, h, 1], &mut rng);
        let q2 = Mlp::new(&[5, h, h, 1], &mut rng);
        let obs: Vec<f64> = (0..batch * 3).map(|_| rng.sample(StandardNormal)).collect();
        let noise: Vec<f64> = (0..batch * 2).map(|_| rng.sample(StandardNormal)).collect();
        let alpha = rng.random_range(0.05..1.0);
        let sizes = actor.sizes().to_vec();

        // actor loss: kinks in the actor, both critics, the log-std clamp and
        // the min-of-two selection all enter the signature
        let analytic = actor_loss(&actor, &q1, &q2, &obs, &noise, alpha).unwrap();
        let g = finite_difference_check(
            actor.params(),
            &analytic.grad,
            eps,
            floor,
            |p| {
                let a = Mlp::from_params(&sizes, p.to_vec()).unwrap();
                actor_loss(&a, &q1, &q2, &obs, &noise, alpha).unwrap().loss
            },
            |p| {
                let a = Mlp::from_params(&sizes, p.to_vec()).unwrap();
                let out = actor_forward(&a, &obs, batch).unwrap();
                let mut sig: Vec<bool> = out.cache.pre[..out.cache.pre.len() - 1]
                    .iter()
                    .flatten()
                    .map(|z| *z > 0.0)
                    .collect();
                sig.extend(out.clamped.iter().copied());
                let pi = policy_sample(&a, &obs, &noise).unwrap();
                let x = critic_input(&obs, &pi.action);
                let (c1, c2) = (q1.forward(&x, batch).unwrap(), q2.forward(&x, batch).unwrap());
                for c in [&c1, &c2] {
                    sig.extend(c.pre[..c.pre.len() - 1].iter().flatten().map(|z| *z > 0.0));
                }
                sig.extend(c1.output().iter().zip(c2.output()).map(|(a, b)| a <= b));
                sig
            },
        );
        merge(0, g);

        // critic loss against fixed targets
        let actions: Vec<f64> = (0..batch * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = critic_input(&obs, &actions);
        let target: Vec<f64> = (0..batch).map(|_| rng.sample(StandardNormal)).collect();
        let csizes = q1.sizes().to_vec();
        let (_, cgrad) = critic_loss(&q1, &x, &target).unwrap();
        let g = finite_difference_check(
            q1.params(),
            &cgrad,
            eps,
            floor,
            |p| critic_loss(&Mlp::from_params(&csizes, p.to_vec()).unwrap(), &x, &target).unwrap().0,
            |p| {
                let q = Mlp::from_params(&csizes, p.to_vec()).unwrap();
                let c = q.forward(&x, batch).unwrap();
                c.pre[..c.pre.len() - 1].iter().flatten().map(|z| *z > 0.0).collect::<Vec<_>>()
            },
        );
        merge(1, g);

        // entropy temperature loss in log α
        let log_alpha: f64 = rng.random_range(-3.0..1.0);
        let (_, ga) = alpha_loss(log_alpha, &analytic.log_prob, -2.0);
        let g = finite_difference_check(
            &[log_alpha],
            &[ga],
            eps,
            floor,
            |p| alpha_loss(p[0], &analytic.log_prob, -2.0).0,
            |_| (),
        );
        merge(2, g);
    }
    merged
}

/// Replays one recorded episode and checks, to `tol`: the closed-form mid
/// against the book, the inventory identity, cash against the trade log
/// (with every fee recomputed), and wealth as realised edge plus
/// inventory-weighted mid moves. Returns the number of agent-sourced
/// price-moving events on success.
pub fn episode_identities(
    cfg: &mmlab::env::EnvConfig,
    ctl: &dyn mmlab::strategies::Controller,
    seed: u64,
    tol: f64,
) -> Result<usize, String> {
    use mmlab::env::{MarketEnv, Side, TradeKind};
    use mmlab::hawkes::Source;

    let mut env = MarketEnv::new(cfg.clone()).map_err(|e| e.to_string())?;
    env.set_recording(true);
    let mut obs = env.reset(seed);
    let p0 = env.book().mid();
    loop {
        let r = env.step(ctl.act(&obs).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        obs = r.obs;
        if r.done {
            break;
        }
    }
    let log = env.log().clone();
    let mid = mid_from_events(p0, cfg.tick, &log.events);
    if (mid - env.book().mid()).abs() > tol {
        return Err(format!("seed {seed}: closed-form mid {mid} vs book {}", env.book().mid()));
    }
    let a = env.agent();
    let (mut nb, mut na, mut mb, mut ms) = (0i64, 0i64, 0i64, 0i64);
    let mut cash = 0.0;
    let mut edge = 0.0;
    for t in &log.trades {
        let rate = match t.kind {
            TradeKind::LimitFill => cfg.maker_fee,
            TradeKind::Market => cfg.taker_fee,
        };
        let fee = rate * t.price;
        let flow = match t.side {
            Side::Bid => -(t.price + fee),
            Side::Ask => t.price - fee,
        };
        if (flow - t.cash_flow).abs() > tol {
            return Err(format!("seed {seed}: trade cash {} vs recomputed {flow}", t.cash_flow));
        }
        match (t.kind, t.side) {
            (TradeKind::LimitFill, Side::Bid) => nb += 1,
            (TradeKind::LimitFill, Side::Ask) => na += 1,
            (TradeKind::Market, Side::Bid) => mb += 1,
            (TradeKind::Market, Side::Ask) => ms += 1,
        }
        cash += flow;
        edge += flow
            + match t.side {
                Side::Bid => t.mid,
                Side::Ask => -t.mid,
            };
    }
    if a.inventory as i64 != nb - na + mb - ms || !a.inventory_identity_holds() {
        return Err(format!("seed {seed}: inventory {} vs {nb} - {na} + {mb} - {ms}", a.inventory));
    }
    if (cash - a.cash).abs() > tol {
        return Err(format!("seed {seed}: cash {} vs replay {cash}", a.cash));
    }
    let moves: f64 = log
        .events
        .iter()
        .map(|e| e.inventory as f64 * ((e.bid + e.ask) / 2.0 - e.mid_before))
        .sum();
    if (edge + moves - env.wealth()).abs() > tol {
        return Err(format!("seed {seed}: wealth {} vs edge {edge} + moves {moves}", env.wealth()));
    }
    Ok(log
        .events
        .iter()
        .filter(|e| e.event.source == Source::Agent && e.event.jump.is_some())
        .count())
}

/// The shipped default configuration with its expensive knobs scaled down
/// so that every CLI command finishes in seconds.
pub fn small_config_text() -> String {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let text = std::fs::read_to_string(path).unwrap();
    let swaps = [
        ("n_steps = 100000", "n_steps = 2000"),
        ("eval_interval = 10000", "eval_interval = 200"),
        ("eval_episodes = 20", "eval_episodes = 2"),
        ("n_episodes = 200 ", "n_episodes = 10 "),
        ("n_episodes = 1000", "n_episodes = 20"),
        ("retrain_steps = 0 ", "retrain_steps = 300 "),
    ];
    swaps.iter().fold(text, |t, (from, to)| {
        assert!(t.contains(from), "default config lacks `{from}`");
        t.replacen(from, to, 1)
    })
}

/// Runs the binary with `args`, returning (success, stdout, stderr).
pub fn run_cli(bin: &str, args: &[&str]) -> (bool, String, String) {
    let out = std::process::Command::new(bin)
        .args(args)
        .env("MM_SIM_THREADS", "1")
        .output()
        .unwrap();
    (
        out.status.success(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Every subcommand, in dependency order, as run by the determinism check.
pub const CLI_COMMANDS: [&[&str]; 7] = [
    &["calibrate-norm"],
    &["grid-lin"],
    &["train", "--steps", "600"],
    &["backtest", "--controller", "sym", "--controller", "lin", "--controller", "drl"],
    &["sweep-noise"],
    &["sweep-fees", "--retrain"],
    &["simulate", "--controller", "lin", "--index", "2"],
];

/// Runs every subcommand twice into two fresh output directories with the
/// same configuration and seed, then compares all files byte for byte.
/// Returns the number of files compared.
pub fn cli_determinism(bin: &str) -> Result<usize, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, small_config_text()).map_err(|e| e.to_string())?;
    let cfg = cfg.to_str().unwrap().to_string();
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let out = out.to_str().unwrap().to_string();
        for cmd in CLI_COMMANDS {
            let mut args: Vec<&str> = cmd.to_vec();
            args.extend(["--config", &cfg, "--seed", "7", "--out", &out]);
            let (ok, _, err) = run_cli(bin, &args);
            if !ok {
                return Err(format!("`{}` failed: {err}", cmd.join(" ")));
            }
        }
        let mut files: Vec<_> = std::fs::read_dir(&out)
            .map_err(|e| e.to_string())?
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        listings.push(files);
    }
    let names = |v: &Vec<std::path::PathBuf>| v.iter().map(|p| p.file_name().unwrap().to_owned()).collect::<Vec<_>>();
    if names(&listings[0]) != names(&listings[1]) {
        return Err(format!("file sets differ: {:?} vs {:?}", names(&listings[0]), names(&listings[1])));
    }
    for (a, b) in listings[0].iter().zip(&listings[1]) {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            return Err(format!("{} differs between runs", a.file_name().unwrap().to_string_lossy()));
        }
    }
    Ok(listings[0].len())
}

/// Quotes inside (and across) the spread to generate agent-side aggressive
/// events.
pub struct Aggressive;

impl mmlab::strategies::Controller for Aggressive {
    fn act(&self, obs: &mmlab::env::RawObs) -> mmlab::Result<mmlab::env::Action> {
        Ok(match obs.inventory.signum() {
            1 => mmlab::env::Action::new(-4.0, 3.0),
            -1 => mmlab::env::Action::new(3.0, -4.0),
            _ => mmlab::env::Action::new(-1.0, -1.0),
        })
    }

    fn name(&self) -> String {
        "AGG".into()
    }
}
