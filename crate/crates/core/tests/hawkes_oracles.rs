mod common;

use common::*;
use mmlab::env::default_hawkes;
use mmlab::hawkes::{HawkesParams, HawkesState};
use mmlab::stats::{ks_p_value, ks_statistic};

fn two_dim() -> HawkesParams {
    // branching matrix [[0.3, 0.2], [0.1, 0.4]] with unit decay
    HawkesParams::new(vec![0.5, 0.3], vec![0.3, 0.2, 0.1, 0.4], vec![1.0; 4]).unwrap()
}

#[test]
fn two_dim_rates_match_linear_solve() {
    let p = two_dim();
    let want = stationary_by_elimination(&p);
    // (I − A)^{-1} μ by hand: det = 0.7·0.6 − 0.2·0.1 = 0.4
    assert!((want[0] - (0.6 * 0.5 + 0.2 * 0.3) / 0.4).abs() < 1e-12);
    assert!((want[1] - (0.1 * 0.5 + 0.7 * 0.3) / 0.4).abs() < 1e-12);
    let engine = p.stationary_rates().unwrap();
    for k in 0..2 {
        assert!((engine[k] - want[k]).abs() < 1e-12);
    }
    for seed in [1u64, 2, 3] {
        let horizon = 50_000.0;
        let evs = simulate(&p, seed, horizon);
        for k in 0..2 {
            let rate = evs.iter().filter(|e| e.dim == k).count() as f64 / horizon;
            assert!((rate / want[k] - 1.0).abs() < 0.03, "seed {seed} dim {k}: {rate} vs {}", want[k]);
        }
    }
}

#[test]
fn poisson_counts_match_rate() {
    let p = HawkesParams::poisson(vec![2.0]).unwrap();
    for seed in [4u64, 5, 6] {
        let n = simulate(&p, seed, 10_000.0).len() as f64;
        assert!((n / 10_000.0 / 2.0 - 1.0).abs() < 0.02);
    }
}

#[test]
fn engine_intensity_matches_history_sum_between_events() {
    let p = default_hawkes();
    let evs = simulate(&p, 11, 400.0);
    let evs: Vec<_> = evs.into_iter().take(600).collect();
    // replay into a fresh state and query half-way between events
    let mut st = HawkesState::new(&p);
    for w in evs.windows(2) {
        st.inject_event(&p, w[0].dim, w[0].time).unwrap();
        let mid = 0.5 * (w[0].time + w[1].time);
        st.advance(&p, mid - st.time()).unwrap();
        let got = st.intensity(&p).unwrap();
        let want = brute_intensity(&p, &evs, mid);
        for k in 0..8 {
            assert!((got[k] - want[k]).abs() <= 1e-9 * want[k], "{k}: {} vs {}", got[k], want[k]);
        }
    }
}

#[test]
fn compensator_oracle_agrees_with_quadrature() {
    // the closed-form oracle against a midpoint-rule integral of the
    // brute-force intensity
    let p = two_dim();
    let evs = simulate(&p, 21, 60.0);
    let k = 0;
    let inc = compensator_increments(&p, &evs, k);
    let times: Vec<f64> = evs.iter().filter(|e| e.dim == k).map(|e| e.time).collect();
    let mut prev = 0.0;
    for (i, t) in times.iter().enumerate().take(5) {
        let n = 20_000;
        let h = (t - prev) / n as f64;
        let q: f64 = (0..n)
            .map(|j| brute_intensity(&p, &evs, prev + (j as f64 + 0.5) * h)[k] * h)
            .sum();
        assert!((q - inc[i]).abs() < 1e-3 * q.max(1.0), "{q} vs {}", inc[i]);
        prev = *t;
    }
}

#[test]
fn time_rescaled_two_dim_stream_is_unit_exponential() {
    let p = two_dim();
    let evs = simulate(&p, 31, 20_000.0);
    for k in 0..2 {
        let inc = compensator_increments(&p, &evs, k);
        let d = ks_statistic(&inc, exp1_cdf);
        let pv = ks_p_value(inc.len(), d);
        assert!(pv > 0.01, "dim {k}: D = {d}, p = {pv}");
    }
}

/// Fine-grid Bernoulli approximation of a 1-dim process: in each cell of
/// width `dt` an event occurs with probability `λ·dt`.
fn bernoulli_count(p: &HawkesParams, rng: &mut impl rand::Rng, horizon: f64, dt: f64) -> usize {
    let (mu, a, b) = (p.mu()[0], p.alpha()[0], p.beta()[0]);
    let decay = (-b * dt).exp();
    let mut excite = 0.0;
    let mut n = 0;
    for _ in 0..(horizon / dt).round() as usize {
        if rng.random::<f64>() < (mu + excite) * dt {
            n += 1;
            excite += a;
        }
        excite *= decay;
    }
    n
}

#[test]
fn thinning_counts_match_fine_grid_simulator() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let p = HawkesParams::new(vec![1.0], vec![0.8], vec![2.0]).unwrap();
    let (horizon, runs) = (1.0, 4000);
    let bins = 6;
    let mut counts = [vec![0f64; bins], vec![0f64; bins]];
    for r in 0..runs {
        let n = simulate(&p, 1000 + r as u64, horizon).len();
        counts[0][n.min(bins - 1)] += 1.0;
    }
    let mut rng = mmlab::seed::rng(99, mmlab::seed::Stream::Noise);
    for _ in 0..runs {
        let n = bernoulli_count(&p, &mut rng, horizon, 1e-4);
        counts[1][n.min(bins - 1)] += 1.0;
    }
    // two-sample chi-square homogeneity test on equal sample sizes
    let mut stat = 0.0;
    let mut df = 0;
    for k in 0..bins {
        let tot = counts[0][k] + counts[1][k];
        if tot > 0.0 {
            stat += (counts[0][k] - counts[1][k]).powi(2) / tot;
            df += 1;
        }
    }
    let pv = 1.0 - ChiSquared::new((df - 1) as f64).unwrap().cdf(stat);
    assert!(pv > 0.01, "chi2 = {stat}, p = {pv}, {counts:?}");
}

#[test]
fn intensity_never_below_baseline() {
    let p = default_hawkes();
    let evs = simulate(&p, 41, 300.0);
    for e in &evs {
        let l = brute_intensity(&p, &evs, e.time);
        assert!(l.iter().zip(p.mu()).all(|(l, m)| l >= m));
    }
}
