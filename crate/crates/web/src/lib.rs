//! Browser bindings for the simulator. Each export takes plain numbers,
//! runs synchronously on the calling thread and returns a JSON string that
//! `www/index.html` draws on a canvas.

use mmlab::backtest::run_episode;
use mmlab::env::{EnvConfig, MarketEnv, RawObs};
use mmlab::lob::{sample_jump, EventType, MarkParams};
use mmlab::seed::{self, Purpose, Stream};
use mmlab::strategies::{Controller, LinParams, Sym};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn controller(kind: &str, theta0: f64, theta1: f64) -> Result<Box<dyn Controller>, String> {
    match kind {
        "sym" => Ok(Box::new(Sym)),
        "lin" => Ok(Box::new(LinParams::new(theta0, theta1).map_err(|e| e.to_string())?)),
        other => Err(format!("unknown controller `{other}`")),
    }
}

#[derive(Debug, Serialize)]
pub struct EpisodeView {
    pub controller: String,
    pub t: Vec<f64>,
    pub bid: Vec<f64>,
    pub ask: Vec<f64>,
    pub inventory: Vec<i32>,
    pub wealth: Vec<f64>,
    /// Event-type names in intensity column order.
    pub event_types: Vec<&'static str>,
    /// Intensity vector at the end of every step.
    pub intensity: Vec<Vec<f64>>,
    pub n_trades: u64,
    pub pnl: f64,
}

/// One episode of SYM or LIN under the default market, step by step.
pub fn episode_view(kind: &str, theta0: f64, theta1: f64, seed_index: u32) -> Result<EpisodeView, String> {
    let ctl = controller(kind, theta0, theta1)?;
    let cfg = EnvConfig::default();
    let mut env = MarketEnv::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut obs: RawObs = env.reset(seed::child(seed::derive(0, Purpose::Simulation), seed_index.into()));
    let mut v = EpisodeView {
        controller: ctl.name(),
        t: vec![0.0],
        bid: vec![env.book().bid],
        ask: vec![env.book().ask],
        inventory: vec![0],
        wealth: vec![0.0],
        event_types: (0..8).filter_map(EventType::from_index).map(EventType::name).collect(),
        intensity: vec![env.hawkes().intensity(&cfg.hawkes).map_err(|e| e.to_string())?],
        n_trades: 0,
        pnl: 0.0,
    };
    loop {
        let r = env.step(ctl.act(&obs).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        v.t.push(env.time());
        v.bid.push(env.book().bid);
        v.ask.push(env.book().ask);
        v.inventory.push(r.info.inventory);
        v.wealth.push(r.info.wealth);
        v.intensity.push(env.hawkes().intensity(&cfg.hawkes).map_err(|e| e.to_string())?);
        obs = r.obs;
        if r.done {
            break;
        }
    }
    v.n_trades = env.agent().n_trades();
    v.pnl = env.wealth();
    Ok(v)
}

#[derive(Debug, Serialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub density: Vec<f64>,
    /// Shifted-exponential density at the bin centres.
    pub pdf: Vec<f64>,
    pub sample_mean: f64,
}

/// Histogram of `n` unbounded jump draws against their density.
pub fn jump_histogram_view(loc: f64, scale: f64, n: u32, bins: u32, seed_index: u32) -> Result<Histogram, String> {
    let marks = MarkParams::new(loc, scale).map_err(|e| e.to_string())?;
    if n == 0 || bins == 0 {
        return Err("n and bins must be positive".into());
    }
    let mut rng = seed::rng(seed_index.into(), Stream::Market);
    let draws: Vec<f64> = (0..n)
        .map(|_| sample_jump(&mut rng, marks, None))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    // cover the 99th percentile of the law
    let hi = loc + scale * 100f64.ln();
    let width = (hi - loc) / bins as f64;
    let mut counts = vec![0u32; bins as usize];
    for d in &draws {
        let k = ((d - loc) / width) as usize;
        if k < counts.len() {
            counts[k] += 1;
        }
    }
    let edges = (0..=bins).map(|k| loc + k as f64 * width).collect();
    let density = counts.iter().map(|&c| c as f64 / (n as f64 * width)).collect();
    let pdf = (0..bins)
        .map(|k| {
            let x = (k as f64 + 0.5) * width;
            (-x / scale).exp() / scale
        })
        .collect();
    Ok(Histogram {
        edges,
        density,
        pdf,
        sample_mean: draws.iter().sum::<f64>() / n as f64,
    })
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub controllers: Vec<String>,
    pub mean_pnl: Vec<f64>,
    pub map: Vec<f64>,
    pub mean_trades: Vec<f64>,
    /// Terminal PnL per episode, one list per controller.
    pub pnl: Vec<Vec<f64>>,
}

/// SYM against LIN(θ0, θ1) on the same `n` episode seeds.
pub fn compare_view(theta0: f64, theta1: f64, n: u32) -> Result<Comparison, String> {
    let lin = LinParams::new(theta0, theta1).map_err(|e| e.to_string())?;
    let ctls: [&dyn Controller; 2] = [&Sym, &lin];
    let mut env = MarketEnv::new(EnvConfig::default()).map_err(|e| e.to_string())?;
    let base = seed::derive(0, Purpose::Backtest);
    let mut out = Comparison {
        controllers: Vec::new(),
        mean_pnl: Vec::new(),
        map: Vec::new(),
        mean_trades: Vec::new(),
        pnl: Vec::new(),
    };
    for c in ctls {
        let recs = (0..n as u64)
            .map(|i| run_episode(&mut env, c, base + i, false))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let k = recs.len().max(1) as f64;
        out.controllers.push(c.name());
        out.mean_pnl.push(recs.iter().map(|r| r.pnl).sum::<f64>() / k);
        out.map.push(recs.iter().map(|r| r.map).sum::<f64>() / k);
        out.mean_trades.push(recs.iter().map(|r| r.n_trades as f64).sum::<f64>() / k);
        out.pnl.push(recs.iter().map(|r| r.pnl).collect());
    }
    Ok(out)
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(|e| JsError::new(&e.to_string()))
}

/// `kind` is `"sym"` or `"lin"`; the LIN parameters are ignored for SYM.
#[wasm_bindgen]
pub fn episode(kind: &str, theta0: f64, theta1: f64, seed_index: u32) -> Result<String, JsError> {
    to_json(&episode_view(kind, theta0, theta1, seed_index).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen]
pub fn jump_histogram(loc: f64, scale: f64, n: u32, bins: u32, seed_index: u32) -> Result<String, JsError> {
    to_json(&jump_histogram_view(loc, scale, n, bins, seed_index).map_err(|e| JsError::new(&e))?)
}

#[wasm_bindgen]
pub fn compare(theta0: f64, theta1: f64, n: u32) -> Result<String, JsError> {
    to_json(&compare_view(theta0, theta1, n).map_err(|e| JsError::new(&e))?)
}
