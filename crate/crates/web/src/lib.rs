//! Browser bindings. Every export takes plain numbers and returns a JSON
//! string; failures come back as `{"error": "..."}` so the page never has to
//! catch exceptions.

use serde::Serialize;
use serde_json::json;
use uldp_core::data::{self, SyntheticConfig};
use uldp_core::harness::{f1_score, l2_sq_error};
use uldp_core::heavy_hitter::{heavy_hitter, HeavyHitterParams};
use uldp_core::privacy::{Budget, BudgetLedger, Streams};
use uldp_core::private_mean::{mean_scalar, range_scalar, BinGrid};
use uldp_core::protocols::{two_round_slr, ProtocolConfig};
use uldp_core::Result;
use wasm_bindgen::prelude::*;

fn respond<T: Serialize>(r: Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| json!({ "error": e.to_string() }).to_string()),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

/// `n` users over a domain of size `d`; a `share` fraction of them hold
/// `hot` (1-based) and the rest are spread round-robin over the domain.
#[wasm_bindgen]
pub fn heavy_hitter_demo(n: usize, d: usize, hot: usize, share: f64, rho: f64, epsilon: f64, seed: u64) -> String {
    respond((|| {
        if hot == 0 || hot > d {
            return Err(uldp_core::Error::InvalidArgument(format!("hot index must be in 1..={d}")));
        }
        let eps = Budget::new(epsilon)?;
        let cut = (share.clamp(0.0, 1.0) * n as f64).round() as usize;
        let values: Vec<(usize, usize)> = (0..n)
            .map(|u| (u, if u < cut { hot - 1 } else { (u * 7 + 3) % d }))
            .collect();
        let mut params = HeavyHitterParams::new(rho);
        params.num_hashes = Some(1);
        let public = params.public_randomness(n, d, seed)?;
        let mut ledger = BudgetLedger::new(eps);
        let out = heavy_hitter(&values, eps, &params, d, &public, &Streams::new(seed), &mut ledger)?;
        let threshold = rho * n as f64;
        Ok(json!({
            "candidates": out.candidates.iter().map(|c| c + 1).collect::<Vec<_>>(),
            "estimates": out.estimates,
            "true_count": cut,
            "threshold": threshold,
            "levels": out.levels,
            "hash_range": out.hash_range,
            "budget_max": ledger.max_consumed(),
        }))
    })())
}

/// Private scalar mean of `n` values spread evenly over
/// `[center − spread, center + spread]`: bin vote with the first half of
/// the users, clipped Laplace mean with the second half.
#[wasm_bindgen]
pub fn range_mean_demo(n: usize, center: f64, spread: f64, half_width: f64, bins: usize, epsilon: f64, seed: u64) -> String {
    respond((|| {
        let eps = Budget::new(epsilon)?;
        let golden = 0.618_033_988_749_895_f64;
        let values: Vec<(usize, f64)> = (0..n)
            .map(|u| (u, center + spread * (2.0 * ((u as f64 * golden) % 1.0) - 1.0)))
            .collect();
        let grid = BinGrid::new(half_width, half_width / bins.max(1) as f64)?;
        let (g1, g2) = values.split_at(n / 2);
        let streams = Streams::new(seed);
        let mut ledger = BudgetLedger::new(eps);
        let range = range_scalar(g1, &grid, eps, &streams, 0, &mut ledger)?;
        let mean = mean_scalar(g2, &range.interval, eps, &streams, 1, &mut ledger)?;
        let truth = g2.iter().map(|v| v.1).sum::<f64>() / g2.len().max(1) as f64;
        Ok(json!({
            "bin_centers": (0..grid.bins).map(|j| grid.center(j)).collect::<Vec<_>>(),
            "histogram": range.histogram,
            "winner": range.winner,
            "interval": [range.interval.lo, range.interval.hi],
            "estimate": mean,
            "non_private_mean": truth,
            "budget_max": ledger.max_consumed(),
        }))
    })())
}

/// Full two-round regression on a synthetic population.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn regression_demo(n: usize, m: usize, d: usize, s_star: usize, coef_value: f64, epsilon: f64, max_candidates: usize, seed: u64) -> String {
    respond((|| {
        let (ds, truth) = data::generate_independent(&SyntheticConfig {
            n,
            m,
            d,
            s_star,
            coef_value,
            noise_std: 1.0,
            seed,
        })?;
        let cfg = ProtocolConfig {
            epsilon: Budget::new(epsilon)?,
            seed,
            max_candidates: (max_candidates > 0).then_some(max_candidates),
            ..ProtocolConfig::default()
        };
        let (est, tr) = two_round_slr(&ds, &cfg)?;
        Ok(json!({
            "beta": est.beta,
            "beta_star": truth.beta_star,
            "selected": est.selected.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "support": truth.support.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "l2_sq_error": l2_sq_error(&est.beta, &truth.beta_star)?,
            "f1": f1_score(&est.selected, &truth.support),
            "rounds": tr.rounds,
            "bits_total": tr.bits_total(),
            "budget_max": tr.budget_max(),
        }))
    })())
}
