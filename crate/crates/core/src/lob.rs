//! Reduced-form top of book under weakly consistent event dynamics.
//!
//! Only aggressive events move prices. Each one shifts either the best bid or
//! the best ask by its jump `J` (in ticks), so the mid moves by `±J·δ/2` and
//! the mid at any time is the initial mid plus the signed sum of jumps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hawkes::Source;

/// Prices closer than this many ticks are treated as equal.
pub const PRICE_TOL_TICKS: f64 = 1e-7;

/// Narrowest spread an improving limit order may leave, in ticks.
pub const MIN_SPREAD_TICKS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventType {
    /// Aggressive market buy: lifts the ask.
    MarketBuyAggressive,
    /// Aggressive market sell: hits the bid down.
    MarketSellAggressive,
    /// Aggressive buy limit order: improves the bid.
    LimitBuyAggressive,
    /// Aggressive sell limit order: improves the ask.
    LimitSellAggressive,
    /// Cancellation at the best bid that empties the level.
    CancelBuyAggressive,
    /// Cancellation at the best ask that empties the level.
    CancelSellAggressive,
    MarketBuyNeutral,
    MarketSellNeutral,
}

/// Direction of an event's effect on the mid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MidEffect {
    Increase,
    Decrease,
    None,
}

impl EventType {
    /// Fixed dimension order shared with the Hawkes parameters.
    pub const ALL: [EventType; 8] = [
        EventType::MarketBuyAggressive,
        EventType::MarketSellAggressive,
        EventType::LimitBuyAggressive,
        EventType::LimitSellAggressive,
        EventType::CancelBuyAggressive,
        EventType::CancelSellAggressive,
        EventType::MarketBuyNeutral,
        EventType::MarketSellNeutral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EventType::MarketBuyAggressive => "M_b^a",
            EventType::MarketSellAggressive => "M_s^a",
            EventType::LimitBuyAggressive => "L_b^a",
            EventType::LimitSellAggressive => "L_s^a",
            EventType::CancelBuyAggressive => "C_b^a",
            EventType::CancelSellAggressive => "C_s^a",
            EventType::MarketBuyNeutral => "M_b^n",
            EventType::MarketSellNeutral => "M_s^n",
        }
    }

    pub fn is_aggressive(self) -> bool {
        !matches!(self, EventType::MarketBuyNeutral | EventType::MarketSellNeutral)
    }

    pub fn mid_effect(self) -> MidEffect {
        use EventType::*;
        match self {
            MarketBuyAggressive | LimitBuyAggressive | CancelSellAggressive => MidEffect::Increase,
            MarketSellAggressive | LimitSellAggressive | CancelBuyAggressive => MidEffect::Decrease,
            MarketBuyNeutral | MarketSellNeutral => MidEffect::None,
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown event type `{s}`")))
    }
}

/// A typed LOB event. `jump` is present exactly when the event moves a price;
/// aggressive events whose jump support was empty are kept with `jump: None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkedEvent {
    pub etype: EventType,
    pub time: f64,
    pub jump: Option<f64>,
    pub source: Source,
}

/// Shifted exponential jump-size law, both parameters in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkParams {
    pub loc: f64,
    pub scale: f64,
}

impl MarkParams {
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        if !(loc.is_finite() && loc > 0.0) {
            return Err(Error::config("env.jump_loc_ticks", "must be > 0"));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::config("env.jump_scale_ticks", "must be > 0"));
        }
        Ok(Self { loc, scale })
    }

    pub fn mean(&self) -> f64 {
        self.loc + self.scale
    }
}

/// Inverse-CDF jump for a given uniform draw `u ∈ [0, 1)`. With an upper
/// bound `s` the law is truncated to `(loc, s)`.
pub fn jump_from_uniform(u: f64, marks: MarkParams, upper: Option<f64>) -> Result<f64> {
    match upper {
        None => Ok(marks.loc - marks.scale * (-u).ln_1p()),
        Some(s) => {
            if !(s > marks.loc) {
                return Err(Error::DegenerateSupport {
                    bound: s,
                    loc: marks.loc,
                });
            }
            // mass of (loc, s) under the untruncated law
            let mass = -(-(s - marks.loc) / marks.scale).exp_m1();
            let j = marks.loc - marks.scale * (-u * mass).ln_1p();
            // u·mass < mass keeps j < s analytically; round-off can land on s
            Ok(j.min(s - (s - marks.loc) * 1e-9))
        }
    }
}

pub fn sample_jump<R: Rng + ?Sized>(
    rng: &mut R,
    marks: MarkParams,
    upper: Option<f64>,
) -> Result<f64> {
    let u: f64 = rng.random();
    jump_from_uniform(u, marks, upper)
}

/// Best bid and ask plus the tick size they are quoted in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BookTop {
    pub bid: f64,
    pub ask: f64,
    pub tick: f64,
}

impl BookTop {
    pub fn new(bid: f64, ask: f64, tick: f64) -> Result<Self> {
        if !(tick.is_finite() && tick > 0.0) {
            return Err(Error::config("env.tick", "must be > 0"));
        }
        if !(bid.is_finite() && ask.is_finite() && ask > bid) {
            return Err(Error::InvalidArgument(format!(
                "book requires ask > bid, got bid={bid} ask={ask}"
            )));
        }
        Ok(Self { bid, ask, tick })
    }

    /// A book centred on `mid` with the given spread in ticks.
    pub fn centered(mid: f64, spread_ticks: f64, tick: f64) -> Result<Self> {
        let half = 0.5 * spread_ticks * tick;
        Self::new(mid - half, mid + half, tick)
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.bid + self.ask)
    }

    pub fn spread_ticks(&self) -> f64 {
        (self.ask - self.bid) / self.tick
    }

    /// Upper truncation bound for improving limit-order jumps.
    pub fn limit_jump_bound(&self) -> f64 {
        self.spread_ticks() - MIN_SPREAD_TICKS
    }

    /// Applies one event and returns the updated book.
    pub fn apply(self, ev: &MarkedEvent) -> Result<Self> {
        let Some(j) = ev.jump else {
            return Ok(self);
        };
        if !ev.etype.is_aggressive() {
            return Err(Error::Contract(format!(
                "non-aggressive {} carries a jump",
                ev.etype
            )));
        }
        if !(j.is_finite() && j > 0.0) {
            return Err(Error::Contract(format!("jump must be positive, got {j}")));
        }
        let d = j * self.tick;
        let mut next = self;
        match ev.etype {
            EventType::MarketBuyAggressive | EventType::CancelSellAggressive => next.ask += d,
            EventType::MarketSellAggressive | EventType::CancelBuyAggressive => next.bid -= d,
            EventType::LimitBuyAggressive | EventType::LimitSellAggressive => {
                if j > self.spread_ticks() - PRICE_TOL_TICKS {
                    return Err(Error::Contract(format!(
                        "{} jump {j} would cross spread of {} ticks",
                        ev.etype,
                        self.spread_ticks()
                    )));
                }
                if ev.etype == EventType::LimitBuyAggressive {
                    next.bid += d;
                } else {
                    next.ask -= d;
                }
            }
            EventType::MarketBuyNeutral | EventType::MarketSellNeutral => unreachable!(),
        }
        if !(next.ask - next.bid > PRICE_TOL_TICKS * self.tick) {
            return Err(Error::Contract(format!(
                "spread collapsed after {} (bid={} ask={})",
                ev.etype, next.bid, next.ask
            )));
        }
        Ok(next)
    }
}

/// Closed-form mid implied by an event log.
pub fn mid_from_log(book0: &BookTop, log: &[MarkedEvent]) -> f64 {
    let signed: f64 = log
        .iter()
        .filter_map(|e| {
            let j = e.jump?;
            match e.etype.mid_effect() {
                MidEffect::Increase => Some(j),
                MidEffect::Decrease => Some(-j),
                MidEffect::None => None,
            }
        })
        .sum();
    book0.mid() + signed * book0.tick / 2.0
}

/// Whether `book_t` agrees with the closed-form mid of `log` to 1e-9.
pub fn mid_price_identity_check(log: &[MarkedEvent], book0: &BookTop, book_t: &BookTop) -> bool {
    (book_t.mid() - mid_from_log(book0, log)).abs() <= 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(etype: EventType, jump: Option<f64>) -> MarkedEvent {
        MarkedEvent {
            etype,
            time: 0.0,
            jump,
            source: Source::Market,
        }
    }

    fn book() -> BookTop {
        BookTop::new(99.99, 100.01, 0.01).unwrap()
    }

    #[test]
    fn partition_of_event_types() {
        use MidEffect::*;
        let inc: Vec<_> = EventType::ALL.iter().filter(|e| e.mid_effect() == Increase).collect();
        let dec: Vec<_> = EventType::ALL.iter().filter(|e| e.mid_effect() == Decrease).collect();
        assert_eq!(inc.len(), 3);
        assert_eq!(dec.len(), 3);
        assert_eq!(EventType::ALL.iter().filter(|e| !e.is_aggressive()).count(), 2);
        for (i, e) in EventType::ALL.iter().enumerate() {
            assert_eq!(e.index(), i);
            assert_eq!(e.name().parse::<EventType>().unwrap(), *e);
        }
    }

    #[test]
    fn shifted_exponential_median() {
        let m = MarkParams::new(0.01, 0.08).unwrap();
        let j = jump_from_uniform(0.5, m, None).unwrap();
        assert!((j - (0.01 + 0.08 * std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((j - 0.06545).abs() < 1e-5);
    }

    #[test]
    fn truncation_limits() {
        let m = MarkParams::new(0.01, 0.08).unwrap();
        for &u in &[0.0, 0.1, 0.5, 0.9, 0.999] {
            let free = jump_from_uniform(u, m, None).unwrap();
            let far = jump_from_uniform(u, m, Some(1e6)).unwrap();
            assert!((free - far).abs() < 1e-12);
        }
        assert!(matches!(
            jump_from_uniform(0.3, m, Some(0.01)),
            Err(Error::DegenerateSupport { .. })
        ));
        let tight = jump_from_uniform(1.0 - 1e-17, m, Some(0.0100001)).unwrap();
        assert!(tight > 0.01 && tight < 0.0100001);
    }

    #[test]
    fn sampled_jump_moments() {
        let m = MarkParams::new(1.0, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_jump(&mut rng, m, None).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - m.mean()).abs() / m.mean() < 0.02, "{mean}");
        for _ in 0..100_000 {
            let j = sample_jump(&mut rng, m, Some(2.5)).unwrap();
            assert!(j > 1.0 && j < 2.5);
        }
    }

    #[test]
    fn aggressive_market_buy_lifts_ask() {
        let b = book().apply(&ev(EventType::MarketBuyAggressive, Some(2.0))).unwrap();
        assert!((b.ask - 100.03).abs() < 1e-12);
        assert!((b.mid() - book().mid() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn neutral_leaves_book_unchanged() {
        assert_eq!(book().apply(&ev(EventType::MarketBuyNeutral, None)).unwrap(), book());
        assert_eq!(book().apply(&ev(EventType::LimitBuyAggressive, None)).unwrap(), book());
        assert!(book().apply(&ev(EventType::MarketSellNeutral, Some(1.0))).is_err());
    }

    #[test]
    fn cancel_at_bid_widens() {
        let b = book().apply(&ev(EventType::CancelBuyAggressive, Some(1.0))).unwrap();
        assert!((b.bid - 99.98).abs() < 1e-12);
        assert!((b.mid() - book().mid() + 0.005).abs() < 1e-12);
        assert!(b.spread_ticks() > book().spread_ticks());
    }

    #[test]
    fn limit_cannot_cross() {
        assert!(matches!(
            book().apply(&ev(EventType::LimitSellAggressive, Some(2.0))),
            Err(Error::Contract(_))
        ));
        let b = book().apply(&ev(EventType::LimitSellAggressive, Some(1.5))).unwrap();
        assert!(b.spread_ticks() > 0.0 && (b.spread_ticks() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn identity_on_small_logs() {
        let b0 = book();
        assert!(mid_price_identity_check(&[], &b0, &b0));
        let log = [
            ev(EventType::MarketBuyAggressive, Some(2.0)),
            ev(EventType::MarketSellAggressive, Some(2.0)),
        ];
        let bt = log.iter().try_fold(b0, |b, e| b.apply(e)).unwrap();
        assert!((bt.mid() - b0.mid()).abs() < 1e-12);
        assert!(mid_price_identity_check(&log, &b0, &bt));
    }

    #[test]
    fn random_log_identity_and_positivity() {
        let marks = MarkParams::new(1.0, 8.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b0 = BookTop::centered(100.0, 2.0, 0.01).unwrap();
        let mut b = b0;
        let mut log = Vec::new();
        for i in 0..1000 {
            let etype = EventType::ALL[rng.random_range(0..8)];
            let jump = match etype {
                EventType::LimitBuyAggressive | EventType::LimitSellAggressive => {
                    sample_jump(&mut rng, marks, Some(b.spread_ticks())).ok()
                }
                e if e.is_aggressive() => Some(sample_jump(&mut rng, marks, None).unwrap()),
                _ => None,
            };
            let e = MarkedEvent {
                etype,
                time: i as f64,
                jump,
                source: Source::Market,
            };
            b = b.apply(&e).unwrap();
            assert!(b.ask > b.bid);
            log.push(e);
        }
        assert!(mid_price_identity_check(&log, &b0, &b));
    }
}
