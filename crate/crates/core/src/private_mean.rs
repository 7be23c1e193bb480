//! User-level private mean estimation.
//!
//! A scalar estimate takes two disjoint groups of users. The first votes, via
//! one Hadamard-response bit each, for the histogram bin that holds its value;
//! the winning bin widened by `3τ` on each side gives an interval. The second
//! group clips to that interval and adds Laplace noise scaled to its width.
//!
//! Vectors are handled coordinatewise after a random rotation
//! `U = H·Diag(w)/√s` that spreads mass evenly over the coordinates.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::privacy::hadamard::{fwht, next_pow2, sign};
use crate::privacy::{laplace_sample, randomized_response_sign, rr_debias_factor, Budget, BudgetLedger, Purpose, Streams};

/// Largest padded bin count accepted; anything bigger means `τ` is tiny
/// relative to `B` and is almost surely a configuration mistake.
const MAX_BINS: usize = 1 << 22;

/// `k = ⌈B/τ⌉` bins of width `2τ` starting at `−B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BinGrid {
    pub half_width: f64,
    pub tau: f64,
    pub bins: usize,
}

impl BinGrid {
    pub fn new(half_width: f64, tau: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) || !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("need B > 0 and τ > 0, got B = {half_width}, τ = {tau}")));
        }
        let bins = (half_width / tau).ceil() as usize;
        if next_pow2(bins) > MAX_BINS {
            return Err(Error::invalid(format!("B/τ = {} gives too many bins", half_width / tau)));
        }
        Ok(BinGrid {
            half_width,
            tau,
            bins: bins.max(1),
        })
    }

    /// Hadamard size: the bin count padded with empty bins.
    pub fn padded(&self) -> usize {
        next_pow2(self.bins)
    }

    pub fn center(&self, j: usize) -> f64 {
        -self.half_width + (2 * j + 1) as f64 * self.tau
    }

    /// Bin holding `y` after clipping to `[−B, B]`.
    pub fn bin_of(&self, y: f64) -> usize {
        let y = y.clamp(-self.half_width, self.half_width);
        (((y + self.half_width) / (2.0 * self.tau)).floor() as usize).min(self.bins - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConcentrationInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ConcentrationInterval {
    pub fn around(center: f64, tau: f64) -> Self {
        ConcentrationInterval {
            lo: center - 3.0 * tau,
            hi: center + 3.0 * tau,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, y: f64) -> bool {
        self.lo <= y && y <= self.hi
    }

    pub fn clip(&self, y: f64) -> f64 {
        y.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeOutcome {
    pub interval: ConcentrationInterval,
    pub winner: usize,
    /// Debiased vote count for every real bin.
    pub histogram: Vec<f64>,
}

/// Bin vote among `values = [(user_id, y)]`; each user is charged `ε`.
pub fn range_scalar(
    values: &[(usize, f64)],
    grid: &BinGrid,
    epsilon: Budget,
    streams: &Streams,
    round: u64,
    ledger: &mut BudgetLedger,
) -> Result<RangeOutcome> {
    if values.len() < 2 {
        return Err(Error::InsufficientUsers {
            stage: "range vote",
            needed: 2,
            got: values.len(),
        });
    }
    ledger.charge_all(values.iter().map(|&(u, _)| u), epsilon.epsilon())?;
    let k = grid.padded();
    // Each user sends (column, sign); the column is uniform and data-free.
    let reports = par::map(values, |&(u, y)| {
        let mut rng = streams.rng(u as u64, round, Purpose::Range);
        let col = rng.random_range(0..k);
        let bit = randomized_response_sign(sign(grid.bin_of(y), col), epsilon, &mut rng);
        (col, bit)
    });
    let mut votes = vec![0.0; k];
    for (col, bit) in reports {
        votes[col] += f64::from(bit);
    }
    fwht(&mut votes);
    let factor = rr_debias_factor(epsilon);
    let histogram: Vec<f64> = votes[..grid.bins].iter().map(|v| v * factor).collect();
    let winner = histogram
        .iter()
        .enumerate()
        .fold(0, |best, (j, &v)| if v > histogram[best] { j } else { best });
    Ok(RangeOutcome {
        interval: ConcentrationInterval::around(grid.center(winner), grid.tau),
        winner,
        histogram,
    })
}

/// Laplace scale used by [`mean_scalar`]: `|b − a| / ε` (0 when unbounded).
pub fn mean_noise_scale(interval: &ConcentrationInterval, epsilon: Budget) -> f64 {
    if epsilon.is_unbounded() {
        0.0
    } else {
        interval.width() / epsilon.epsilon()
    }
}

/// Clip to the interval, add Laplace noise, average. Each user is charged `ε`.
pub fn mean_scalar(
    values: &[(usize, f64)],
    interval: &ConcentrationInterval,
    epsilon: Budget,
    streams: &Streams,
    round: u64,
    ledger: &mut BudgetLedger,
) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InsufficientUsers {
            stage: "mean",
            needed: 1,
            got: 0,
        });
    }
    ledger.charge_all(values.iter().map(|&(u, _)| u), epsilon.epsilon())?;
    let scale = mean_noise_scale(interval, epsilon);
    let noisy = par::map(values, |&(u, y)| {
        let mut rng = streams.rng(u as u64, round, Purpose::Mean);
        interval.clip(y) + laplace_sample(scale, &mut rng)
    });
    Ok(noisy.iter().sum::<f64>() / noisy.len() as f64)
}

/// `U = H·Diag(w)/√s` on a power-of-two dimension `s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rotation {
    signs: Vec<f64>,
}

impl Rotation {
    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let s_pad = next_pow2(dim);
        Rotation {
            signs: (0..s_pad).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    /// `U β`, with `β` zero-padded to the rotation dimension.
    pub fn apply(&self, beta: &[f64]) -> Vec<f64> {
        assert!(beta.len() <= self.dim());
        let mut v = vec![0.0; self.dim()];
        for (i, b) in beta.iter().enumerate() {
            v[i] = b * self.signs[i];
        }
        fwht(&mut v);
        let norm = (self.dim() as f64).sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// `U⁻¹ z = Uᵀ z = Diag(w)·H·z/√s`.
    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim());
        let mut v = z.to_vec();
        fwht(&mut v);
        let norm = (self.dim() as f64).sqrt();
        v.iter().zip(&self.signs).map(|(x, w)| x * w / norm).collect()
    }

    /// Dense form, for checks.
    pub fn matrix(&self) -> DMatrix<f64> {
        let s = self.dim();
        let norm = (s as f64).sqrt();
        DMatrix::from_fn(s, s, |r, c| f64::from(sign(r, c)) * self.signs[c] / norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UldpMeanOutcome {
    pub estimate: Vec<f64>,
    pub s_pad: usize,
    /// Per rotated coordinate.
    pub intervals: Vec<ConcentrationInterval>,
    /// Share of second-group values that fell outside their interval.
    pub clipped_fraction: f64,
}

/// Private mean of user vectors of a common length `s`.
///
/// Group 1 runs one range vote per rotated coordinate at `ε/s_pad` each;
/// group 2 is dealt round-robin over the coordinates and each user releases
/// one clipped, noised coordinate at full `ε`.
pub fn uldp_mean(
    group1: &[(usize, Vec<f64>)],
    group2: &[(usize, Vec<f64>)],
    tau: f64,
    epsilon: Budget,
    half_width: f64,
    streams: &Streams,
    ledger: &mut BudgetLedger,
) -> Result<UldpMeanOutcome> {
    let s = group1
        .first()
        .or(group2.first())
        .map(|v| v.1.len())
        .ok_or_else(|| Error::invalid("mean estimation needs users"))?;
    if s == 0 {
        return Err(Error::invalid("vectors must be non-empty"));
    }
    if group1.iter().chain(group2).any(|v| v.1.len() != s) {
        return Err(Error::invalid("all vectors must share one length"));
    }
    let grid = BinGrid::new(half_width, tau)?;
    let rotation = Rotation::random(s, &mut streams.public(Purpose::Rotation, 0));
    let s_pad = rotation.dim();
    if group2.len() < s_pad {
        return Err(Error::InsufficientUsers {
            stage: "mean (one user per rotated coordinate)",
            needed: s_pad,
            got: group2.len(),
        });
    }
    if group1.len() < 2 {
        return Err(Error::InsufficientUsers {
            stage: "range vote",
            needed: 2,
            got: group1.len(),
        });
    }

    let rotated1 = par::map(group1, |(_, b)| rotation.apply(b));
    let per_coord = epsilon.split(s_pad);
    let mut intervals = Vec::with_capacity(s_pad);
    for l in 0..s_pad {
        let column: Vec<(usize, f64)> = group1.iter().zip(&rotated1).map(|((u, _), r)| (*u, r[l])).collect();
        intervals.push(range_scalar(&column, &grid, per_coord, streams, l as u64, ledger)?.interval);
    }

    let rotated2 = par::map(group2, |(_, b)| rotation.apply(b));
    let mut buckets: Vec<Vec<(usize, f64)>> = vec![Vec::new(); s_pad];
    for (idx, ((u, _), r)) in group2.iter().zip(&rotated2).enumerate() {
        let l = idx % s_pad;
        buckets[l].push((*u, r[l]));
    }
    let clipped = buckets
        .iter()
        .zip(&intervals)
        .map(|(b, iv)| b.iter().filter(|(_, y)| !iv.contains(*y)).count())
        .sum::<usize>();
    let mut z = Vec::with_capacity(s_pad);
    for (l, bucket) in buckets.iter().enumerate() {
        z.push(mean_scalar(bucket, &intervals[l], epsilon, streams, l as u64, ledger)?);
    }
    let mut estimate = rotation.invert(&z);
    estimate.truncate(s);
    Ok(UldpMeanOutcome {
        estimate,
        s_pad,
        intervals,
        clipped_fraction: clipped as f64 / group2.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::noise::laplace_density;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eps(e: f64) -> Budget {
        Budget::new(e).unwrap()
    }

    fn users(values: &[f64]) -> Vec<(usize, f64)> {
        values.iter().copied().enumerate().collect()
    }

    #[test]
    fn grid_tiles_the_domain() {
        let g = BinGrid::new(1.0, 0.1).unwrap();
        assert_eq!(g.bins, 10);
        assert_eq!(g.padded(), 16);
        assert!((g.center(0) + 0.9).abs() < 1e-12);
        assert!((g.center(9) - 0.9).abs() < 1e-12);
        assert_eq!(g.bin_of(0.3), 6);
        assert_eq!(g.bin_of(-1.0), 0);
        assert_eq!(g.bin_of(1.0), 9);
        assert_eq!(g.bin_of(50.0), 9);
        assert_eq!(g.bin_of(-50.0), 0);
        for j in 0..10 {
            assert_eq!(g.bin_of(g.center(j)), j);
        }
        // τ not dividing B: the last bin sticks out past B.
        let g = BinGrid::new(1.0, 0.3).unwrap();
        assert_eq!(g.bins, 4);
        assert_eq!(g.bin_of(0.99), 3);
        assert!(BinGrid::new(1.0, 0.0).is_err());
        assert!(BinGrid::new(-1.0, 0.1).is_err());
        assert!(BinGrid::new(1.0, 1e-9).is_err());
    }

    #[test]
    fn range_finds_concentrated_value() {
        let values = users(&vec![0.3; 10_000]);
        let grid = BinGrid::new(1.0, 0.1).unwrap();
        let hits = (0..30)
            .filter(|&seed| {
                let mut ledger = BudgetLedger::new(eps(4.0));
                let out = range_scalar(&values, &grid, eps(4.0), &Streams::new(seed), 0, &mut ledger).unwrap();
                assert!((out.interval.width() - 0.6).abs() < 1e-12);
                out.interval.contains(0.3)
            })
            .count();
        assert!(hits >= 28, "{hits}/30");
    }

    #[test]
    fn range_noiseless_plurality() {
        let mut v = vec![-0.55; 30];
        v.extend(vec![0.75; 10]);
        let grid = BinGrid::new(1.0, 0.1).unwrap();
        let mut ledger = BudgetLedger::new(eps(f64::INFINITY));
        let out = range_scalar(&users(&v), &grid, eps(f64::INFINITY), &Streams::new(1), 0, &mut ledger).unwrap();
        assert_eq!(out.winner, grid.bin_of(-0.55));
        // Without noise the debiased histogram is an exact count only in
        // expectation; the plurality bin must still dominate.
        assert!(out.histogram[out.winner] > 0.0);
    }

    #[test]
    fn range_histogram_is_unbiased_count() {
        let v: Vec<f64> = (0..4000).map(|i| if i % 4 == 0 { 0.5 } else { -0.5 }).collect();
        let grid = BinGrid::new(1.0, 0.25).unwrap();
        let runs = 200;
        let mut sum = vec![0.0; grid.bins];
        for seed in 0..runs {
            let mut ledger = BudgetLedger::new(eps(1.0));
            let out = range_scalar(&users(&v), &grid, eps(1.0), &Streams::new(seed), 0, &mut ledger).unwrap();
            sum.iter_mut().zip(&out.histogram).for_each(|(s, h)| *s += h);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / runs as f64).collect();
        // Per-run std ≈ coth(1/2)·√n ≈ 137, so the mean has se ≈ 10.
        let expected = [0.0, 3000.0, 0.0, 1000.0];
        for (m, e) in mean.iter().zip(expected) {
            assert!((m - e).abs() < 40.0, "{mean:?}");
        }
    }

    #[test]
    fn range_needs_two_users_and_charges_each() {
        let grid = BinGrid::new(1.0, 0.1).unwrap();
        let mut ledger = BudgetLedger::new(eps(1.0));
        assert!(range_scalar(&users(&[0.1]), &grid, eps(1.0), &Streams::new(0), 0, &mut ledger).is_err());
        range_scalar(&users(&[0.1, 0.2, 0.3]), &grid, eps(0.5), &Streams::new(0), 0, &mut ledger).unwrap();
        assert!(ledger.users().all(|(_, c)| c == 0.5));
        assert_eq!(ledger.len(), 3);
    }

    #[test]
    fn mean_limits() {
        let iv = ConcentrationInterval { lo: 0.0, hi: 1.0 };
        let mut ledger = BudgetLedger::new(eps(f64::INFINITY));
        let s = Streams::new(0);
        let inf = eps(f64::INFINITY);
        assert_eq!(mean_scalar(&users(&[0.4; 5]), &iv, inf, &s, 0, &mut ledger).unwrap(), 0.4);
        assert_eq!(mean_scalar(&users(&[10.0]), &iv, inf, &s, 0, &mut ledger).unwrap(), 1.0);
        assert_eq!(mean_scalar(&users(&[-3.0, 0.5]), &iv, inf, &s, 0, &mut ledger).unwrap(), 0.25);
        assert!(mean_scalar(&[], &iv, inf, &s, 0, &mut ledger).is_err());
    }

    #[test]
    fn mean_noise_scale_and_privacy_ratio() {
        let iv = ConcentrationInterval::around(0.2, 0.5);
        for e in [0.25, 1.0, 4.0] {
            let scale = mean_noise_scale(&iv, eps(e));
            assert!((scale - 3.0 / e).abs() < 1e-12);
            // Any two clipped inputs differ by at most the width, so the
            // output density ratio is bounded by e^ε everywhere.
            for &(x, x2) in &[(iv.lo, iv.hi), (iv.hi, iv.lo), (0.0, 0.4)] {
                for t in -40..=40 {
                    let out = 0.2 + t as f64 * 0.37;
                    let ratio = laplace_density(out - x, scale) / laplace_density(out - x2, scale);
                    assert!(ratio <= e.exp() * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn mean_is_unbiased_in_interval() {
        let v: Vec<f64> = (0..50).map(|i| 0.1 + 0.01 * i as f64).collect();
        let truth = v.iter().sum::<f64>() / v.len() as f64;
        let iv = ConcentrationInterval { lo: 0.0, hi: 1.0 };
        let runs = 2000;
        let draws: Vec<f64> = (0..runs)
            .map(|seed| {
                let mut ledger = BudgetLedger::new(eps(1.0));
                mean_scalar(&users(&v), &iv, eps(1.0), &Streams::new(seed), 0, &mut ledger).unwrap()
            })
            .collect();
        let mean = draws.iter().sum::<f64>() / runs as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        // Laplace(1) variance is 2, averaged over 50 users.
        assert!((var - 2.0 / 50.0).abs() < 0.2 * 2.0 / 50.0, "var {var}");
        assert!((mean - truth).abs() < 3.0 * (var / runs as f64).sqrt());
    }

    #[test]
    fn rotation_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for dim in [1usize, 2, 3, 8, 13, 64, 256] {
            let rot = Rotation::random(dim, &mut rng);
            assert_eq!(rot.dim(), next_pow2(dim));
            let u = rot.matrix();
            let err = (&u * u.transpose() - DMatrix::identity(rot.dim(), rot.dim())).abs().max();
            assert!(err < 1e-12, "dim {dim}: {err}");
            for _ in 0..10 {
                let beta: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
                let fast = rot.apply(&beta);
                let mut padded = beta.clone();
                padded.resize(rot.dim(), 0.0);
                let dense = &u * nalgebra::DVector::from_vec(padded);
                assert!(fast.iter().zip(dense.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
                let back = rot.invert(&fast);
                assert!(beta.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
                assert!(back[dim..].iter().all(|x| x.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn rotation_flattens_coordinates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tau, n) = (1.0, 1000.0);
        for s in [8usize, 64, 256] {
            let trials = 300;
            let bound = 2.0 * tau * ((s as f64 * n).ln() / s as f64).sqrt();
            let ok = (0..trials)
                .filter(|_| {
                    let rot = Rotation::random(s, &mut rng);
                    let mut beta: Vec<f64> = (0..s).map(|_| rng.random::<f64>() - 0.5).collect();
                    // Adversarially spiky half the time.
                    if rng.random::<bool>() {
                        beta.iter_mut().for_each(|b| *b = 0.0);
                        beta[0] = 1.0;
                    }
                    let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
                    beta.iter_mut().for_each(|b| *b *= tau / norm);
                    rot.apply(&beta).iter().all(|x| x.abs() <= bound)
                })
                .count();
            assert!(ok as f64 >= 0.99 * trials as f64, "s={s}: {ok}/{trials}");
        }
    }

    fn vectors(start: usize, count: usize, value: &[f64]) -> Vec<(usize, Vec<f64>)> {
        (start..start + count).map(|u| (u, value.to_vec())).collect()
    }

    #[test]
    fn uldp_mean_exact_without_noise() {
        let beta = [0.3, -0.2, 0.05, 0.7, -0.4];
        let g1 = vectors(0, 20, &beta);
        let g2 = vectors(20, 17, &beta);
        let mut ledger = BudgetLedger::new(eps(f64::INFINITY));
        let out = uldp_mean(&g1, &g2, 0.05, eps(f64::INFINITY), 2.0, &Streams::new(3), &mut ledger).unwrap();
        assert_eq!(out.s_pad, 8);
        assert_eq!(out.estimate.len(), 5);
        for (a, b) in out.estimate.iter().zip(&beta) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(out.clipped_fraction, 0.0);
        assert!(out.intervals.iter().all(|iv| (iv.width() - 0.3).abs() < 1e-12));
    }

    #[test]
    fn uldp_mean_budget_is_exact_per_user() {
        let beta = [0.1, 0.2, 0.3];
        let g1 = vectors(0, 10, &beta);
        let g2 = vectors(10, 9, &beta);
        let mut ledger = BudgetLedger::new(eps(2.0));
        uldp_mean(&g1, &g2, 0.2, eps(2.0), 1.0, &Streams::new(0), &mut ledger).unwrap();
        assert_eq!(ledger.len(), 19);
        for (u, c) in ledger.users() {
            assert!((c - 2.0).abs() < 1e-12, "user {u}: {c}");
        }
        assert!(ledger.is_sound());
    }

    #[test]
    fn uldp_mean_rejects_small_groups() {
        let beta = [0.1; 5];
        let mut ledger = BudgetLedger::new(eps(1.0));
        let s = Streams::new(0);
        assert!(uldp_mean(&vectors(0, 10, &beta), &vectors(10, 7, &beta), 0.2, eps(1.0), 1.0, &s, &mut ledger).is_err());
        assert!(uldp_mean(&vectors(0, 1, &beta), &vectors(10, 8, &beta), 0.2, eps(1.0), 1.0, &s, &mut ledger).is_err());
        let ragged = vec![(30, vec![0.1; 4])];
        assert!(uldp_mean(&ragged, &vectors(10, 8, &beta), 0.2, eps(1.0), 1.0, &s, &mut ledger).is_err());
    }
}
