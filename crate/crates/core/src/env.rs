//! The market-making decision process.
//!
//! Each step of length `dt` runs, in order: cancellation of the agent's
//! outstanding quotes, interpretation of the new action (tick quantisation,
//! negative-spread and inventory-limit filters), agent market orders, agent
//! quotes that improve the best price, and finally the stream of market
//! events drawn from the Hawkes engine on `[t, t + dt)`, each of which may
//! fill a resting agent quote. Agent events feed back into the Hawkes state.
//!
//! Wealth is `W = I·mid + X`; the step reward is the wealth change minus
//! `φ·∫|I| ds` over the step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::hawkes::{HawkesParams, HawkesState, Source};
use crate::lob::{
    jump_from_uniform, BookTop, EventType, MarkParams, MarkedEvent, MIN_SPREAD_TICKS, PRICE_TOL_TICKS,
};
use crate::seed::{self, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CancelTruncation {
    /// Aggressive cancellation jumps are truncated at the current spread.
    Spread,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvConfig {
    pub dt: f64,
    pub horizon: f64,
    pub tick: f64,
    /// Running inventory penalty per unit of `|I|` per unit time.
    pub phi: f64,
    /// Inventory constraint `c`: `|I| ≤ c`.
    pub inventory_limit: i32,
    /// Probability that an agent market order is aggressive.
    pub z1: f64,
    /// Probability that cancelling a quote resting at the best is aggressive.
    pub z2: f64,
    /// Probability that a non-aggressive market order fills a quote at the best.
    pub z3: f64,
    /// Fraction of price charged on each limit fill.
    pub maker_fee: f64,
    /// Fraction of price charged on each agent market order.
    pub taker_fee: f64,
    pub p0: f64,
    pub init_spread_ticks: f64,
    /// Largest absolute quote offset, in ticks.
    pub max_offset_ticks: i32,
    pub marks: MarkParams,
    pub hawkes: HawkesParams,
    pub cancel_trunc: CancelTruncation,
    /// Round sampled jumps to whole ticks.
    pub round_jumps: bool,
    /// Inject agent-caused events into the Hawkes state.
    pub agent_feedback: bool,
}

/// Non-authoritative default kernel set in the fixed dimension order
/// `(M_b^a, M_s^a, L_b^a, L_s^a, C_b^a, C_s^a, M_b^n, M_s^n)`.
///
/// Buy/sell symmetric. Market orders self-excite and excite same-side market
/// flow; aggressive market orders and cancellations excite the limit orders
/// that refill the emptied side. Spectral radius ≈ 0.22.
pub fn default_hawkes() -> HawkesParams {
    let mu = vec![0.06, 0.06, 0.25, 0.25, 0.06, 0.06, 0.30, 0.30];
    #[rustfmt::skip]
    let alpha = vec![
        // M_b^a M_s^a L_b^a L_s^a C_b^a C_s^a M_b^n M_s^n
        0.60, 0.00, 0.00, 0.00, 0.00, 0.00, 0.20, 0.00, // M_b^a
        0.00, 0.60, 0.00, 0.00, 0.00, 0.00, 0.00, 0.20, // M_s^a
        0.00, 0.80, 0.30, 0.00, 0.60, 0.00, 0.00, 0.00, // L_b^a
        0.80, 0.00, 0.00, 0.30, 0.00, 0.60, 0.00, 0.00, // L_s^a
        0.00, 0.00, 0.00, 0.00, 0.30, 0.00, 0.00, 0.00, // C_b^a
        0.00, 0.00, 0.00, 0.00, 0.00, 0.30, 0.00, 0.00, // C_s^a
        0.40, 0.00, 0.00, 0.00, 0.00, 0.00, 0.60, 0.00, // M_b^n
        0.00, 0.40, 0.00, 0.00, 0.00, 0.00, 0.00, 0.60, // M_s^n
    ];
    let beta = vec![2.0; 64];
    HawkesParams::new(mu, alpha, beta).expect("default Hawkes parameters are stable")
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 1.0,
            horizon: 100.0,
            tick: 0.01,
            phi: 0.01,
            inventory_limit: 3,
            z1: 8.0 / 30.0,
            z2: 0.25,
            z3: 0.25,
            maker_fee: 0.0,
            taker_fee: 0.002,
            p0: 100.0,
            init_spread_ticks: 2.0,
            max_offset_ticks: 2,
            marks: MarkParams {
                loc: 1.0,
                scale: 8.0,
            },
            hawkes: default_hawkes(),
            cancel_trunc: CancelTruncation::Spread,
            round_jumps: false,
            agent_feedback: true,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, key: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be > 0, got {v}")))
            }
        };
        positive(self.dt, "env.dt")?;
        positive(self.horizon, "env.horizon")?;
        positive(self.tick, "env.tick")?;
        positive(self.p0, "env.p0")?;
        positive(self.init_spread_ticks, "env.init_spread_ticks")?;
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) || steps.round() < 1.0 {
            return Err(Error::config(
                "env.horizon",
                format!("must be a positive multiple of dt={}", self.dt),
            ));
        }
        if !(self.phi.is_finite() && self.phi >= 0.0) {
            return Err(Error::config("env.phi", "must be >= 0"));
        }
        if self.inventory_limit < 1 {
            return Err(Error::config("env.inventory_limit", "must be >= 1"));
        }
        for (v, key) in [(self.z1, "env.z1"), (self.z2, "env.z2"), (self.z3, "env.z3")] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("probability out of [0, 1]: {v}")));
            }
        }
        for (v, key) in [(self.maker_fee, "env.maker_fee"), (self.taker_fee, "env.taker_fee")] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be >= 0"));
            }
        }
        if self.max_offset_ticks < 1 {
            return Err(Error::config("env.max_offset_ticks", "must be >= 1"));
        }
        MarkParams::new(self.marks.loc, self.marks.scale)?;
        if self.hawkes.dim() != EventType::ALL.len() {
            return Err(Error::config(
                "hawkes.mu",
                format!("LOB model needs 8 dimensions, got {}", self.hawkes.dim()),
            ));
        }
        let radius = self.hawkes.spectral_radius();
        if !(radius < 1.0) {
            return Err(Error::config(
                "hawkes.alpha",
                format!("branching spectral radius {radius:.6} must be < 1"),
            ));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    /// Short content hash of the configuration.
    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }
}

pub(crate) fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serialises");
    let digest = Sha256::digest(&bytes);
    hex::encode(&digest[..8])
}

/// Quote offsets, in ticks, from the best ask and best bid. Positive values
/// quote behind the best price, negative values inside the spread or across.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub off_a: f64,
    pub off_b: f64,
}

impl Action {
    pub fn new(off_a: f64, off_b: f64) -> Self {
        Self { off_a, off_b }
    }
}

/// Round half away from zero to a whole number of ticks, then clamp.
pub fn quantize_offset(off: f64, max_offset: i32) -> f64 {
    off.round().clamp(-(max_offset as f64), max_offset as f64)
}

/// Un-normalised state `(I, Δ, α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawObs {
    pub inventory: i32,
    pub spread_ticks: f64,
    pub trend: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub inv_n: f64,
    pub spread_n: f64,
    pub trend_n: f64,
}

impl Observation {
    pub fn to_array(self) -> [f64; 3] {
        [self.inv_n, self.spread_n, self.trend_n]
    }
}

/// z-score statistics for the spread and trend features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean_spread: f64,
    pub std_spread: f64,
    pub mean_trend: f64,
    pub std_trend: f64,
    /// Length of the calibration trajectory.
    pub n_steps: u64,
    /// Fingerprint of the environment configuration calibrated on.
    pub config_hash: String,
    /// Master seed of the calibration run.
    pub seed: u64,
}

impl NormStats {
    pub fn normalize(&self, raw: &RawObs, inventory_limit: i32) -> Result<Observation> {
        if !(self.std_spread > 0.0 && self.std_trend > 0.0) {
            return Err(Error::Calibration("zero standard deviation in NormStats".into()));
        }
        Ok(Observation {
            inv_n: raw.inventory as f64 / inventory_limit as f64,
            spread_n: (raw.spread_ticks - self.mean_spread) / self.std_spread,
            trend_n: (raw.trend - self.mean_trend) / self.std_trend,
        })
    }

    /// Identity statistics, useful for tests and uncalibrated runs.
    pub fn identity() -> Self {
        Self {
            mean_spread: 0.0,
            std_spread: 1.0,
            mean_trend: 0.0,
            std_trend: 1.0,
            n_steps: 0,
            config_hash: String::new(),
            seed: 0,
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("norm stats serialise");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<norm stats>".into(),
            msg: e.to_string(),
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                path: path.into(),
                msg,
            },
            other => other,
        })
    }
}

/// `λ_{M_b^a} + λ_{M_b^n} − λ_{M_s^a} − λ_{M_s^n}` at the state's time.
pub fn trend_alpha(params: &HawkesParams, state: &HawkesState) -> Result<f64> {
    let lam = state.intensity(params)?;
    Ok(trend_from_intensity(&lam))
}

fn trend_from_intensity(lam: &[f64]) -> f64 {
    lam[EventType::MarketBuyAggressive.index()] + lam[EventType::MarketBuyNeutral.index()]
        - lam[EventType::MarketSellAggressive.index()]
        - lam[EventType::MarketSellNeutral.index()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Bid,
    Ask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quote {
    pub side: Side,
    pub price: f64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TradeKind {
    LimitFill,
    Market,
}

/// One agent execution. `side` is the agent's side: `Bid` means the agent
/// bought.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trade {
    pub time: f64,
    pub side: Side,
    pub kind: TradeKind,
    pub price: f64,
    pub fee: f64,
    /// Signed change of cash.
    pub cash_flow: f64,
    /// Mid at the instant the inventory changed.
    pub mid: f64,
    pub inventory_after: i32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentState {
    pub inventory: i32,
    pub cash: f64,
    pub bid: Option<Quote>,
    pub ask: Option<Quote>,
    /// Limit bid fills `N^b`.
    pub n_bid_fills: u64,
    /// Limit ask fills `N^a`.
    pub n_ask_fills: u64,
    /// Market buys `N^mb`.
    pub n_market_buys: u64,
    /// Market sells `N^ms`.
    pub n_market_sells: u64,
    /// Sum of limit-fill prices; the maker fee paid is `maker_fee` times this.
    pub maker_notional: f64,
}

impl AgentState {
    pub fn n_trades(&self) -> u64 {
        self.n_bid_fills + self.n_ask_fills + self.n_market_buys + self.n_market_sells
    }

    /// `I - I_0 = N^b - N^a + N^mb - N^ms` with `I_0 = 0`.
    pub fn inventory_identity_holds(&self) -> bool {
        self.inventory as i64
            == self.n_bid_fills as i64 - self.n_ask_fills as i64 + self.n_market_buys as i64
                - self.n_market_sells as i64
    }
}

/// A book-changing (or neutral) event together with its context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoggedEvent {
    pub event: MarkedEvent,
    pub mid_before: f64,
    pub bid: f64,
    pub ask: f64,
    /// Agent inventory while the price moved.
    pub inventory: i32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub t: f64,
    pub inventory: i32,
    pub cash: f64,
    pub bid: f64,
    pub ask: f64,
    pub off_a: f64,
    pub off_b: f64,
    pub fills: u32,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub events: Vec<LoggedEvent>,
    pub trades: Vec<Trade>,
    pub steps: Vec<StepTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    /// Agent executions during the step.
    pub fills: u32,
    /// `φ·∫|I| ds` over the step.
    pub penalty: f64,
    pub wealth: f64,
    pub market_events: u32,
    pub inventory: i32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub obs: RawObs,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

pub struct MarketEnv {
    cfg: EnvConfig,
    n_steps: usize,
    hawkes: HawkesState,
    book: BookTop,
    book0: BookTop,
    agent: AgentState,
    market_rng: ChaCha8Rng,
    agent_rng: ChaCha8Rng,
    step_idx: usize,
    t: f64,
    done: bool,
    inventory_time: f64,
    lam_buf: Vec<f64>,
    record: bool,
    log: EpisodeLog,
}

impl MarketEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let book0 = BookTop::centered(cfg.p0, cfg.init_spread_ticks, cfg.tick)?;
        let hawkes = HawkesState::new(&cfg.hawkes);
        Ok(Self {
            n_steps: cfg.n_steps(),
            lam_buf: vec![0.0; cfg.hawkes.dim()],
            hawkes,
            book: book0,
            book0,
            agent: AgentState::default(),
            market_rng: seed::rng(0, Stream::Market),
            agent_rng: seed::rng(0, Stream::Agent),
            step_idx: 0,
            t: 0.0,
            done: true,
            inventory_time: 0.0,
            record: false,
            log: EpisodeLog::default(),
            cfg,
        })
    }

    /// Keep a full event, trade and step log for the next episodes.
    pub fn set_recording(&mut self, on: bool) {
        self.record = on;
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn book(&self) -> &BookTop {
        &self.book
    }

    pub fn initial_book(&self) -> &BookTop {
        &self.book0
    }

    pub fn agent(&self) -> &AgentState {
        &self.agent
    }

    pub fn hawkes(&self) -> &HawkesState {
        &self.hawkes
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn take_log(&mut self) -> EpisodeLog {
        std::mem::take(&mut self.log)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// `∫_0^t |I| ds` so far.
    pub fn inventory_time(&self) -> f64 {
        self.inventory_time
    }

    pub fn wealth(&self) -> f64 {
        self.agent.inventory as f64 * self.book.mid() + self.agent.cash
    }

    /// Starts a new episode whose randomness is fully determined by `seed`.
    pub fn reset(&mut self, seed: u64) -> RawObs {
        self.hawkes = HawkesState::new(&self.cfg.hawkes);
        self.book = self.book0;
        self.agent = AgentState::default();
        self.market_rng = seed::rng(seed, Stream::Market);
        self.agent_rng = seed::rng(seed, Stream::Agent);
        self.step_idx = 0;
        self.t = 0.0;
        self.done = false;
        self.inventory_time = 0.0;
        self.log = EpisodeLog::default();
        self.observe()
    }

    pub fn observe(&mut self) -> RawObs {
        let lam = &mut self.lam_buf;
        for (k, slot) in lam.iter_mut().enumerate() {
            let n = self.cfg.hawkes.dim();
            *slot = self.cfg.hawkes.mu()[k]
                + self.hawkes.excitation()[k * n..(k + 1) * n].iter().sum::<f64>();
        }
        RawObs {
            inventory: self.agent.inventory,
            spread_ticks: self.book.spread_ticks(),
            trend: trend_from_intensity(lam),
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        if self.done {
            return Err(Error::State("step called on a finished episode".into()));
        }
        if !(action.off_a.is_finite() && action.off_b.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite action {action:?}")));
        }
        let t0 = self.t;
        let t1 = (self.step_idx + 1) as f64 * self.cfg.dt;
        let w0 = self.wealth();
        let trades0 = self.agent.n_trades();
        let mut inv_time = 0.0;

        self.cancel_quotes(t0)?;

        let off_a = quantize_offset(action.off_a, self.cfg.max_offset_ticks);
        let off_b = quantize_offset(action.off_b, self.cfg.max_offset_ticks);
        let tick = self.cfg.tick;
        let ask_px = self.book.ask + off_a * tick;
        let bid_px = self.book.bid - off_b * tick;
        // Zero-width own pairs are dropped along with crossed ones; they
        // cannot both rest inside the spread.
        if ask_px - bid_px > PRICE_TOL_TICKS * tick {
            let c = self.cfg.inventory_limit;
            let inv = self.agent.inventory;
            if inv < c {
                self.place(Side::Bid, bid_px, t0)?;
            }
            if inv > -c {
                self.place(Side::Ask, ask_px, t0)?;
            }
        }

        let mut last = t0;
        let mut market_events = 0u32;
        while let Some(raw) = self.hawkes.next_event(&self.cfg.hawkes, &mut self.market_rng, t1)? {
            market_events += 1;
            inv_time += self.agent.inventory.abs() as f64 * (raw.time - last);
            last = raw.time;
            let etype = EventType::from_index(raw.dim).expect("8-dim process");
            self.on_market_event(etype, raw.time)?;
        }
        inv_time += self.agent.inventory.abs() as f64 * (t1 - last);

        self.t = t1;
        self.step_idx += 1;
        self.done = self.step_idx >= self.n_steps;
        self.inventory_time += inv_time;
        let penalty = self.cfg.phi * inv_time;
        let wealth = self.wealth();
        let reward = wealth - w0 - penalty;
        let fills = (self.agent.n_trades() - trades0) as u32;
        debug_assert!(self.agent.inventory_identity_holds());
        debug_assert!(self.agent.inventory.abs() <= self.cfg.inventory_limit);
        if self.record {
            self.log.steps.push(StepTrace {
                t: t1,
                inventory: self.agent.inventory,
                cash: self.agent.cash,
                bid: self.book.bid,
                ask: self.book.ask,
                off_a,
                off_b,
                fills,
                reward,
            });
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.done,
            info: StepInfo {
                fills,
                penalty,
                wealth,
                market_events,
                inventory: self.agent.inventory,
            },
        })
    }

    fn at_best(&self, q: &Quote) -> bool {
        let tol = PRICE_TOL_TICKS * self.cfg.tick;
        match q.side {
            Side::Bid => q.price >= self.book.bid - tol,
            Side::Ask => q.price <= self.book.ask + tol,
        }
    }

    fn cancel_quotes(&mut self, t: f64) -> Result<()> {
        for side in [Side::Bid, Side::Ask] {
            let slot = match side {
                Side::Bid => self.agent.bid.take(),
                Side::Ask => self.agent.ask.take(),
            };
            let Some(q) = slot else { continue };
            if !q.active || !self.at_best(&q) {
                continue;
            }
            if self.agent_rng.random::<f64>() < self.cfg.z2 {
                let etype = match side {
                    Side::Bid => EventType::CancelBuyAggressive,
                    Side::Ask => EventType::CancelSellAggressive,
                };
                let bound = self.cancel_bound();
                let u: f64 = self.agent_rng.random();
                let jump = self.jump(u, bound);
                self.apply_and_inject(etype, t, jump, Source::Agent)?;
            }
        }
        Ok(())
    }

    fn cancel_bound(&self) -> Option<f64> {
        match self.cfg.cancel_trunc {
            CancelTruncation::Spread => Some(self.book.spread_ticks()),
            CancelTruncation::None => None,
        }
    }

    /// Jump mark for a uniform draw; `None` when the truncated support is
    /// empty, which demotes the event to a no-op on the book.
    fn jump(&self, u: f64, bound: Option<f64>) -> Option<f64> {
        let j = jump_from_uniform(u, self.cfg.marks, bound).ok()?;
        if !self.cfg.round_jumps {
            return Some(j);
        }
        let mut r = j.round().max(1.0);
        if let Some(s) = bound {
            while r >= s - PRICE_TOL_TICKS && r >= 1.0 {
                r -= 1.0;
            }
        }
        (r >= 1.0).then_some(r)
    }

    fn apply_and_inject(
        &mut self,
        etype: EventType,
        time: f64,
        jump: Option<f64>,
        source: Source,
    ) -> Result<()> {
        let ev = MarkedEvent {
            etype,
            time,
            jump,
            source,
        };
        let mid_before = self.book.mid();
        self.book = self.book.apply(&ev)?;
        if source == Source::Agent && self.cfg.agent_feedback {
            self.hawkes.inject_event(&self.cfg.hawkes, etype.index(), time)?;
        }
        if self.record {
            self.log.events.push(LoggedEvent {
                event: ev,
                mid_before,
                bid: self.book.bid,
                ask: self.book.ask,
                inventory: self.agent.inventory,
            });
        }
        Ok(())
    }

    fn place(&mut self, side: Side, price: f64, t: f64) -> Result<()> {
        // a quote that would leave less than the minimum spread trades
        let tol = MIN_SPREAD_TICKS * self.cfg.tick;
        let crosses = match side {
            Side::Bid => price >= self.book.ask - tol,
            Side::Ask => price <= self.book.bid + tol,
        };
        if crosses {
            return self.market_order(side, t);
        }
        let improvement = match side {
            Side::Bid => (price - self.book.bid) / self.cfg.tick,
            Side::Ask => (self.book.ask - price) / self.cfg.tick,
        };
        let mut price = price;
        if improvement > PRICE_TOL_TICKS {
            let etype = match side {
                Side::Bid => EventType::LimitBuyAggressive,
                Side::Ask => EventType::LimitSellAggressive,
            };
            self.apply_and_inject(etype, t, Some(improvement), Source::Agent)?;
            // the quote now defines the best price
            price = match side {
                Side::Bid => self.book.bid,
                Side::Ask => self.book.ask,
            };
        }
        let q = Some(Quote {
            side,
            price,
            active: true,
        });
        match side {
            Side::Bid => self.agent.bid = q,
            Side::Ask => self.agent.ask = q,
        }
        Ok(())
    }

    fn market_order(&mut self, side: Side, t: f64) -> Result<()> {
        let mid = self.book.mid();
        let (price, etype_aggr, etype_neutral) = match side {
            Side::Bid => (
                self.book.ask,
                EventType::MarketBuyAggressive,
                EventType::MarketBuyNeutral,
            ),
            Side::Ask => (
                self.book.bid,
                EventType::MarketSellAggressive,
                EventType::MarketSellNeutral,
            ),
        };
        let fee = self.cfg.taker_fee * price;
        let cash_flow = match side {
            Side::Bid => {
                self.agent.inventory += 1;
                self.agent.n_market_buys += 1;
                -(price + fee)
            }
            Side::Ask => {
                self.agent.inventory -= 1;
                self.agent.n_market_sells += 1;
                price - fee
            }
        };
        self.agent.cash += cash_flow;
        if self.record {
            self.log.trades.push(Trade {
                time: t,
                side,
                kind: TradeKind::Market,
                price,
                fee,
                cash_flow,
                mid,
                inventory_after: self.agent.inventory,
            });
        }
        if self.agent_rng.random::<f64>() < self.cfg.z1 {
            let u: f64 = self.agent_rng.random();
            let jump = self.jump(u, None);
            self.apply_and_inject(etype_aggr, t, jump, Source::Agent)
        } else {
            self.apply_and_inject(etype_neutral, t, None, Source::Agent)
        }
    }

    fn on_market_event(&mut self, etype: EventType, time: f64) -> Result<()> {
        let pre = self.book;
        let jump = if etype.is_aggressive() {
            // one uniform per aggressive event keeps the market stream aligned
            // across controllers regardless of truncation bounds
            let u: f64 = self.market_rng.random();
            let bound = match etype {
                EventType::LimitBuyAggressive | EventType::LimitSellAggressive => {
                    Some(pre.limit_jump_bound())
                }
                EventType::CancelBuyAggressive | EventType::CancelSellAggressive => {
                    self.cancel_bound()
                }
                _ => None,
            };
            self.jump(u, bound)
        } else {
            None
        };
        self.apply_and_inject(etype, time, jump, Source::Market)?;

        let tick = self.cfg.tick;
        match etype {
            EventType::MarketSellAggressive => {
                if let (Some(q), Some(j)) = (self.agent.bid, jump) {
                    if q.active && q.price > pre.bid - j * tick {
                        self.fill(Side::Bid, time)?;
                    }
                }
            }
            EventType::MarketBuyAggressive => {
                if let (Some(q), Some(j)) = (self.agent.ask, jump) {
                    if q.active && q.price < pre.ask + j * tick {
                        self.fill(Side::Ask, time)?;
                    }
                }
            }
            EventType::MarketSellNeutral => {
                if let Some(q) = self.agent.bid {
                    if q.active && self.at_best(&q) && self.agent_rng.random::<f64>() < self.cfg.z3
                    {
                        self.fill(Side::Bid, time)?;
                    }
                }
            }
            EventType::MarketBuyNeutral => {
                if let Some(q) = self.agent.ask {
                    if q.active && self.at_best(&q) && self.agent_rng.random::<f64>() < self.cfg.z3
                    {
                        self.fill(Side::Ask, time)?;
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn fill(&mut self, side: Side, time: f64) -> Result<()> {
        let slot = match side {
            Side::Bid => &mut self.agent.bid,
            Side::Ask => &mut self.agent.ask,
        };
        let q = slot
            .as_mut()
            .filter(|q| q.active)
            .ok_or_else(|| Error::Contract("fill on an inactive quote".into()))?;
        q.active = false;
        let price = q.price;
        let fee = self.cfg.maker_fee * price;
        self.agent.maker_notional += price;
        let cash_flow = match side {
            Side::Bid => {
                self.agent.inventory += 1;
                self.agent.n_bid_fills += 1;
                -(price + fee)
            }
            Side::Ask => {
                self.agent.inventory -= 1;
                self.agent.n_ask_fills += 1;
                price - fee
            }
        };
        self.agent.cash += cash_flow;
        if self.agent.inventory.abs() > self.cfg.inventory_limit {
            return Err(Error::Contract("inventory limit breached by a fill".into()));
        }
        if self.record {
            self.log.trades.push(Trade {
                time,
                side,
                kind: TradeKind::LimitFill,
                price,
                fee,
                cash_flow,
                mid: self.book.mid(),
                inventory_after: self.agent.inventory,
            });
        }
        Ok(())
    }
}

/// Streaming mean/variance (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }
}

/// Runs a uniformly random controller for `n_steps` environment steps and
/// returns the spread and trend z-score statistics. Randomness derives from
/// `master_seed` through the calibration purpose.
pub fn calibrate_normalization(cfg: &EnvConfig, master_seed: u64, n_steps: u64) -> Result<NormStats> {
    let seed = seed::derive(master_seed, seed::Purpose::Calibration);
    let mut env = MarketEnv::new(cfg.clone())?;
    let mut policy_rng = seed::rng(seed, Stream::Policy);
    let a_max = cfg.max_offset_ticks as f64;
    let (mut spread, mut trend) = (Welford::default(), Welford::default());
    let mut episode = 0u64;
    let mut obs = env.reset(seed::child(seed, episode));
    for _ in 0..n_steps {
        spread.push(obs.spread_ticks);
        trend.push(obs.trend);
        let action = Action::new(
            (policy_rng.random::<f64>() * 2.0 - 1.0) * a_max,
            (policy_rng.random::<f64>() * 2.0 - 1.0) * a_max,
        );
        let res = env.step(action)?;
        obs = if res.done {
            episode += 1;
            env.reset(seed::child(seed, episode))
        } else {
            res.obs
        };
    }
    let (std_spread, std_trend) = (spread.variance().sqrt(), trend.variance().sqrt());
    if !(std_spread > 1e-12) {
        return Err(Error::Calibration(format!(
            "spread variance is degenerate over {n_steps} steps"
        )));
    }
    if !(std_trend > 1e-12) {
        return Err(Error::Calibration(format!(
            "trend variance is degenerate over {n_steps} steps"
        )));
    }
    Ok(NormStats {
        mean_spread: spread.mean(),
        std_spread,
        mean_trend: trend.mean(),
        std_trend,
        n_steps,
        config_hash: cfg.fingerprint(),
        seed: master_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Config with no market activity at all.
    fn quiet_config() -> EnvConfig {
        EnvConfig {
            hawkes: HawkesParams::poisson(vec![0.0; 8]).unwrap(),
            ..EnvConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate().unwrap();
        assert_eq!(EnvConfig::default().n_steps(), 100);
    }

    #[test]
    fn invalid_configs() {
        let bad = EnvConfig {
            z3: 1.5,
            ..EnvConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "env.z3"));
        let bad = EnvConfig {
            horizon: 10.5,
            ..EnvConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn reset_is_flat_and_deterministic() {
        let mut env = MarketEnv::new(EnvConfig::default()).unwrap();
        let o1 = env.reset(3);
        assert_eq!(o1.inventory, 0);
        assert_eq!(env.wealth(), 0.0);
        let obs = NormStats::identity().normalize(&o1, 3).unwrap();
        assert_eq!(obs.inv_n, 0.0);
        let r1: Vec<_> = (0..20).map(|_| env.step(Action::new(0.0, 0.0)).unwrap()).collect();
        let o2 = env.reset(3);
        assert_eq!(o1, o2);
        let r2: Vec<_> = (0..20).map(|_| env.step(Action::new(0.0, 0.0)).unwrap()).collect();
        assert_eq!(r1, r2);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let cfg = EnvConfig {
            horizon: 2.0,
            ..quiet_config()
        };
        let mut env = MarketEnv::new(cfg).unwrap();
        env.reset(0);
        assert!(!env.step(Action::default()).unwrap().done);
        assert!(env.step(Action::default()).unwrap().done);
        assert!(matches!(env.step(Action::default()), Err(Error::State(_))));
    }

    #[test]
    fn penalty_only_reward() {
        // hold I = 2 through a quiet step: reward is -φ·2·dt
        let cfg = EnvConfig {
            taker_fee: 0.0,
            z1: 0.0,
            ..quiet_config()
        };
        let mut env = MarketEnv::new(cfg).unwrap();
        env.reset(0);
        env.step(Action::new(5.0, -5.0)).unwrap();
        env.step(Action::new(5.0, -5.0)).unwrap();
        assert_eq!(env.agent().inventory, 2);
        let w = env.wealth();
        let r = env.step(Action::new(5.0, 5.0)).unwrap();
        assert_eq!(r.info.fills, 0);
        assert!((env.wealth() - w).abs() < 1e-12);
        assert!((r.reward + 0.02).abs() < 1e-12, "{}", r.reward);
    }

    #[test]
    fn inventory_limit_drops_constrained_side() {
        let cfg = EnvConfig {
            z1: 0.0,
            ..quiet_config()
        };
        let mut env = MarketEnv::new(cfg).unwrap();
        env.reset(0);
        for _ in 0..3 {
            env.step(Action::new(5.0, -5.0)).unwrap();
        }
        assert_eq!(env.agent().inventory, 3);
        env.step(Action::new(1.0, 1.0)).unwrap();
        assert!(env.agent().bid.is_none());
        assert!(env.agent().ask.is_some_and(|q| q.active));
        // a crossing bid at the limit is ignored too
        env.step(Action::new(1.0, -5.0)).unwrap();
        assert_eq!(env.agent().inventory, 3);
    }

    #[test]
    fn crossed_own_quotes_are_ignored() {
        let mut env = MarketEnv::new(quiet_config()).unwrap();
        env.reset(0);
        let spread = env.book().spread_ticks();
        // off_a + off_b < -spread
        let r = env.step(Action::new(-2.0, -2.0)).unwrap();
        assert!(-4.0 < -spread);
        assert!(env.agent().bid.is_none() && env.agent().ask.is_none());
        assert_eq!(r.info.fills, 0);
        assert_eq!(env.book().spread_ticks(), spread);
    }

    #[test]
    fn improving_quote_moves_best_price() {
        let cfg = EnvConfig {
            init_spread_ticks: 4.0,
            ..quiet_config()
        };
        let mut env = MarketEnv::new(cfg).unwrap();
        env.reset(0);
        let b0 = *env.book();
        env.step(Action::new(3.0, -1.0)).unwrap();
        assert!((env.book().bid - (b0.bid + 0.01)).abs() < 1e-12);
        let q = env.agent().bid.unwrap();
        assert!(q.active && (q.price - env.book().bid).abs() < 1e-12);
        assert_eq!(env.hawkes().counts()[EventType::LimitBuyAggressive.index()], 1);
    }

    #[test]
    fn market_order_cash_includes_taker_fee() {
        let cfg = EnvConfig {
            z1: 0.0,
            ..quiet_config()
        };
        let mut env = MarketEnv::new(cfg).unwrap();
        env.reset(0);
        let ask = env.book().ask;
        env.step(Action::new(5.0, -5.0)).unwrap();
        assert!((env.agent().cash + ask * 1.002).abs() < 1e-12);
        assert_eq!(env.agent().n_market_buys, 1);
    }

    #[test]
    fn trend_symmetry_and_sign() {
        let p = default_hawkes();
        let mut s = HawkesState::new(&p);
        assert_eq!(trend_alpha(&p, &s).unwrap(), 0.0);
        s.inject_event(&p, EventType::MarketBuyAggressive.index(), 0.0).unwrap();
        let tr = trend_alpha(&p, &s).unwrap();
        assert!(tr > 0.0);
        let lam = s.intensity(&p).unwrap();
        assert_eq!(tr, lam[0] + lam[6] - lam[1] - lam[7]);
    }

    #[test]
    fn normalization_examples() {
        let ns = NormStats {
            mean_spread: 4.0,
            std_spread: 2.0,
            mean_trend: 0.1,
            std_trend: 0.5,
            ..NormStats::identity()
        };
        let o = ns
            .normalize(
                &RawObs {
                    inventory: -3,
                    spread_ticks: 4.0,
                    trend: 1.1,
                },
                3,
            )
            .unwrap();
        assert_eq!(o.inv_n, -1.0);
        assert_eq!(o.spread_n, 0.0);
        assert!((o.trend_n - 2.0).abs() < 1e-15);
        let zero = NormStats {
            std_trend: 0.0,
            ..ns
        };
        assert!(matches!(
            zero.normalize(&RawObs { inventory: 0, spread_ticks: 1.0, trend: 0.0 }, 3),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn calibration_of_quiet_book_is_degenerate() {
        assert!(matches!(
            calibrate_normalization(&quiet_config(), 1, 500),
            Err(Error::Calibration(_))
        ));
    }

    #[test]
    fn calibration_is_deterministic() {
        let cfg = EnvConfig::default();
        let a = calibrate_normalization(&cfg, 5, 3000).unwrap();
        let b = calibrate_normalization(&cfg, 5, 3000).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert!(a.std_spread > 0.0 && a.std_trend > 0.0);
    }

    #[test]
    fn quantization_rounds_half_away() {
        assert_eq!(quantize_offset(2.4, 5), 2.0);
        assert_eq!(quantize_offset(2.5, 5), 3.0);
        assert_eq!(quantize_offset(-2.5, 5), -3.0);
        assert_eq!(quantize_offset(7.2, 5), 5.0);
    }
}
