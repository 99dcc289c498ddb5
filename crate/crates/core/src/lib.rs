//! Market-making laboratory: a Hawkes-driven reduced-form limit order book,
//! a market-making environment on top of it, a Soft Actor-Critic trainer for
//! a small neural quoting policy, benchmark controllers and a Monte Carlo
//! backtesting harness.

pub mod backtest;
pub mod cli;
pub mod config;
pub mod env;
pub mod error;
pub mod hawkes;
pub mod lob;
pub mod nn;
pub mod sac;
pub mod seed;
pub mod stats;
pub mod strategies;

pub use error::{Error, Result};
