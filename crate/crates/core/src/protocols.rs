//! End-to-end estimators.
//!
//! [`two_round_slr`] selects candidates with the heavy-hitter sweep and then
//! averages local fits with one range round and one mean round.
//! [`multi_round_slr`] replaces the averaging with private projected gradient
//! steps, each aggregating fresh users. [`sparse_mean`] runs the same
//! pipeline for sparse mean estimation.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;
use crate::clock::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SampleBlock, UserShard};
use crate::error::{Error, Result};
use crate::heavy_hitter::{heavy_hitter, index_bits, HeavyHitterOutcome, HeavyHitterParams};
use crate::linalg;
use crate::par;
use crate::privacy::hadamard::next_pow2;
use crate::privacy::{Budget, BudgetLedger, Purpose, Streams};
use crate::private_mean::{uldp_mean, UldpMeanOutcome};
use crate::selectors::{self, CdOptions, SelectorConfig};

/// Heavy-hitter retention threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoRule {
    Fixed(f64),
    /// `1 / (4 s_target)`.
    Target(usize),
    /// `α / (8 s*)` for an `α`-good selector.
    Alpha { alpha: f64, s_star: usize },
}

impl RhoRule {
    pub fn resolve(&self) -> Result<f64> {
        let rho = match *self {
            RhoRule::Fixed(r) => r,
            RhoRule::Target(s) if s > 0 => 1.0 / (4.0 * s as f64),
            RhoRule::Alpha { alpha, s_star } if s_star > 0 && alpha > 0.0 && alpha <= 1.0 => {
                alpha / (8.0 * s_star as f64)
            }
            other => return Err(Error::invalid(format!("bad threshold rule {other:?}"))),
        };
        if rho > 0.0 && rho < 1.0 {
            Ok(rho)
        } else {
            Err(Error::invalid(format!("rho must lie in (0, 1), got {rho}")))
        }
    }
}

/// Concentration radius of the range stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRule {
    Fixed(f64),
    /// `c·√(s ln n / m)`.
    Radius(f64),
    /// `c·ln n / √m`.
    LogSquared(f64),
    /// `c·L·√(ln n · ln(n ∨ m) · ln T / m)`, for gradient aggregation.
    Gradient(f64),
    /// `B / bins`.
    Bins(usize),
}

/// Quantities a [`TauRule`] may depend on.
#[derive(Debug, Clone, Copy)]
pub struct TauContext {
    pub s: usize,
    pub n: usize,
    pub m: usize,
    pub half_width: f64,
    pub lipschitz: f64,
    pub iterations: usize,
}

impl TauRule {
    pub fn resolve(&self, ctx: &TauContext) -> Result<f64> {
        let ln = |v: usize| (v.max(2) as f64).ln();
        let m = ctx.m.max(1) as f64;
        let tau = match *self {
            TauRule::Fixed(t) => t,
            TauRule::Radius(c) => c * (ctx.s as f64 * ln(ctx.n) / m).sqrt(),
            TauRule::LogSquared(c) => c * ln(ctx.n) / m.sqrt(),
            TauRule::Gradient(c) => {
                c * ctx.lipschitz * (ln(ctx.n) * ln(ctx.n.max(ctx.m)) * ln(ctx.iterations) / m).sqrt()
            }
            TauRule::Bins(k) if k > 0 => ctx.half_width / k as f64,
            TauRule::Bins(_) => return Err(Error::invalid("bin count must be positive")),
        };
        if tau > 0.0 && tau.is_finite() {
            Ok(tau)
        } else {
            Err(Error::invalid(format!("concentration radius must be positive, got {tau}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalFit {
    Ols,
    LassoOnSelected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaSchedule {
    /// `0.1 · ((1 + t)/2)^0.2`, `t` counted from 1.
    Practical,
    Constant(f64),
}

impl EtaSchedule {
    pub fn at(&self, t: usize) -> f64 {
        match *self {
            EtaSchedule::Practical => 0.1 * ((1.0 + t as f64) / 2.0).powf(0.2),
            EtaSchedule::Constant(eta) => eta,
        }
    }
}

/// Interpolation weight `γ_t⁻¹` between the current iterate and the running
/// aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    /// Weight `2/(t + 1)`, `t` counted from 1.
    Accelerated,
    /// Fixed `γ`; `γ = 1` is projected gradient descent.
    Constant(f64),
}

impl GammaSchedule {
    pub fn weight(&self, t: usize) -> f64 {
        match *self {
            GammaSchedule::Accelerated => 2.0 / (t as f64 + 1.0),
            GammaSchedule::Constant(g) => 1.0 / g,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lipschitz {
    Unit,
    /// `6 s³ ln n`.
    Theoretical,
    Fixed(f64),
}

impl Lipschitz {
    pub fn resolve(&self, s: usize, n: usize) -> f64 {
        match *self {
            Lipschitz::Unit => 1.0,
            Lipschitz::Theoretical => 6.0 * (s as f64).powi(3) * (n.max(2) as f64).ln(),
            Lipschitz::Fixed(l) => l,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoConfig {
    /// `None`: `⌈min(n, √(n m ε²))⌉`, reduced if needed so every batch has
    /// at least one user per rotated coordinate.
    pub iterations: Option<usize>,
    pub eta: EtaSchedule,
    pub gamma: GammaSchedule,
    pub lipschitz: Lipschitz,
    pub half_width: f64,
    pub tau: TauRule,
}

impl Default for ScoConfig {
    fn default() -> Self {
        ScoConfig {
            iterations: None,
            eta: EtaSchedule::Practical,
            gamma: GammaSchedule::Constant(1.0),
            lipschitz: Lipschitz::Unit,
            half_width: 3.0,
            tau: TauRule::Gradient(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub epsilon: Budget,
    pub seed: u64,
    pub rho: RhoRule,
    /// Keep at most this many candidates (largest estimated counts).
    pub max_candidates: Option<usize>,
    pub hh_hashes: Option<usize>,
    pub hh_range: Option<usize>,
    pub tau: TauRule,
    pub half_width: f64,
    pub selector: SelectorConfig,
    pub local_fit: LocalFit,
    /// Selection threshold multiplier for [`sparse_mean`]: a coordinate is
    /// eligible when `|mean| > c·σ̂·√(ln d / m)`.
    pub mean_threshold: f64,
    pub sco: ScoConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            epsilon: Budget::new(4.0).expect("valid budget"),
            seed: 0,
            rho: RhoRule::Target(16),
            max_candidates: None,
            hh_hashes: None,
            hh_range: None,
            tau: TauRule::Radius(1.0),
            half_width: 1.0,
            selector: SelectorConfig::default(),
            local_fit: LocalFit::Ols,
            mean_threshold: 2.0,
            sco: ScoConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        self.rho.resolve()?;
        self.selector.validate()?;
        self.heavy_hitter_params()?.validate()?;
        if !(self.half_width > 0.0) || !(self.sco.half_width > 0.0) {
            return Err(Error::invalid("range half-width B must be positive"));
        }
        if self.sco.iterations == Some(0) {
            return Err(Error::invalid("iteration count T must be >= 1"));
        }
        if let GammaSchedule::Constant(g) = self.sco.gamma {
            if !(g >= 1.0) {
                return Err(Error::invalid(format!("constant γ must be >= 1, got {g}")));
            }
        }
        if !(self.mean_threshold >= 0.0) {
            return Err(Error::invalid("mean selection threshold must be >= 0"));
        }
        Ok(())
    }

    pub fn heavy_hitter_params(&self) -> Result<HeavyHitterParams> {
        Ok(HeavyHitterParams {
            rho: self.rho.resolve()?,
            num_hashes: self.hh_hashes,
            hash_range: self.hh_range,
            cap: None,
            max_output: self.max_candidates,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub name: String,
    pub users: usize,
    pub rounds: usize,
    pub bits_per_user: u64,
    pub millis: f64,
}

/// Communication and privacy accounting of one protocol run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolTranscript {
    pub rounds: usize,
    /// `n ∧ √(n m ε²)` for the multi-round protocol.
    pub round_bound: Option<f64>,
    pub epsilon: f64,
    pub stages: Vec<StageRecord>,
    pub bits_per_user: BTreeMap<usize, u64>,
    pub budget_per_user: BTreeMap<usize, f64>,
}

impl ProtocolTranscript {
    fn new(epsilon: Budget) -> Self {
        ProtocolTranscript {
            rounds: 0,
            round_bound: None,
            epsilon: epsilon.epsilon(),
            stages: Vec::new(),
            bits_per_user: BTreeMap::new(),
            budget_per_user: BTreeMap::new(),
        }
    }

    fn record(&mut self, name: &str, users: impl IntoIterator<Item = usize>, rounds: usize, bits: u64, start: Instant) {
        let mut count = 0;
        for u in users {
            *self.bits_per_user.entry(u).or_insert(0) += bits;
            count += 1;
        }
        self.rounds += rounds;
        self.stages.push(StageRecord {
            name: name.to_string(),
            users: count,
            rounds,
            bits_per_user: bits,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    fn close(&mut self, ledger: &BudgetLedger) {
        self.budget_per_user = ledger.users().collect();
    }

    pub fn bits_total(&self) -> u64 {
        self.bits_per_user.values().sum()
    }

    pub fn budget_max(&self) -> f64 {
        self.budget_per_user.values().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct Diagnostics {
    pub heavy_hitter: Option<HeavyHitterOutcome>,
    pub tau: Option<f64>,
    pub clipped_fraction: Option<f64>,
    pub iterations: Option<usize>,
    pub iterations_theory: Option<usize>,
    pub batch_size: Option<usize>,
    pub lipschitz: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub beta: Vec<f64>,
    /// 0-based, ascending.
    pub selected: Vec<usize>,
    pub diagnostics: Diagnostics,
}

#[derive(Serialize)]
struct EstimateJson<'a> {
    beta: &'a [f64],
    selected: Vec<usize>,
    transcript: &'a ProtocolTranscript,
    diagnostics: &'a Diagnostics,
}

impl Estimate {
    fn embed(d: usize, selected: Vec<usize>, values: &[f64], diagnostics: Diagnostics) -> Self {
        let mut beta = vec![0.0; d];
        for (&j, &v) in selected.iter().zip(values) {
            beta[j] = v;
        }
        Estimate {
            beta,
            selected,
            diagnostics,
        }
    }

    /// `{beta, selected, transcript, diagnostics}` with 1-based `selected`.
    pub fn to_json(&self, transcript: &ProtocolTranscript) -> Result<String> {
        Ok(serde_json::to_string_pretty(&EstimateJson {
            beta: &self.beta,
            selected: self.selected.iter().map(|j| j + 1).collect(),
            transcript,
            diagnostics: &self.diagnostics,
        })?)
    }
}

/// Low-dimensional fit of one user's data on the candidate columns.
pub fn local_estimate(shard: &UserShard, selected: &[usize], method: LocalFit) -> Result<Vec<f64>> {
    if selected.is_empty() {
        return Err(Error::invalid("no selected variables"));
    }
    if let Some(&j) = selected.iter().find(|&&j| j >= shard.d()) {
        return Err(Error::invalid(format!("selected index {j} >= d = {}", shard.d())));
    }
    let x = shard.columns(selected);
    match method {
        LocalFit::Ols => {
            if shard.m() < selected.len() {
                return Err(Error::invalid(format!(
                    "user {} has m = {} < s = {} samples for OLS",
                    shard.user_id,
                    shard.m(),
                    selected.len()
                )));
            }
            Ok(linalg::ols(&x, &shard.y)?.iter().copied().collect())
        }
        LocalFit::LassoOnSelected => {
            let sigma = selectors::residual_scale(&x, &shard.y);
            let lambda = selectors::universal_lambda(sigma, selected.len(), shard.m());
            Ok(selectors::lasso_fit(&x, &shard.y, lambda, &CdOptions::default())?.coef)
        }
    }
}

/// Selection, range and mean user groups: `[0, n/2)`, `[n/2, 3n/4)`, `[3n/4, n)`.
pub fn split_groups(n: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    let (a, b) = (n / 2, 3 * n / 4);
    (0..a, a..b, b..n)
}

fn check_unique(ids: impl Iterator<Item = usize>) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::invalid(format!("user id {id} appears twice")));
        }
    }
    Ok(())
}

fn collect<T>(items: Vec<Result<T>>) -> Result<Vec<T>> {
    items.into_iter().collect()
}

/// Heavy-hitter aggregation of one nominated index per user.
fn select_candidates(
    nominations: &[(usize, usize)],
    d: usize,
    cfg: &ProtocolConfig,
    streams: &Streams,
    ledger: &mut BudgetLedger,
) -> Result<HeavyHitterOutcome> {
    let params = cfg.heavy_hitter_params()?;
    let public = params.public_randomness(nominations.len(), d, streams.child(Purpose::HashFamily, 0).key())?;
    let out = heavy_hitter(
        nominations,
        cfg.epsilon,
        &params,
        d,
        &public,
        &streams.child(Purpose::Report, 0),
        ledger,
    )?;
    if out.candidates.is_empty() {
        return Err(Error::invalid("heavy-hitter sweep returned no candidates"));
    }
    Ok(out)
}

struct Aggregation {
    values: Vec<f64>,
    tau: f64,
    outcome: UldpMeanOutcome,
}

/// Range + mean over two groups of local estimates.
#[allow(clippy::too_many_arguments)]
fn aggregate(
    group1: Vec<(usize, Vec<f64>)>,
    group2: Vec<(usize, Vec<f64>)>,
    s: usize,
    n: usize,
    m: usize,
    cfg: &ProtocolConfig,
    streams: &Streams,
    ledger: &mut BudgetLedger,
) -> Result<Aggregation> {
    let tau = cfg.tau.resolve(&TauContext {
        s,
        n,
        m,
        half_width: cfg.half_width,
        lipschitz: 1.0,
        iterations: 1,
    })?;
    let outcome = uldp_mean(&group1, &group2, tau, cfg.epsilon, cfg.half_width, streams, ledger)?;
    Ok(Aggregation {
        values: outcome.estimate.clone(),
        tau,
        outcome,
    })
}

fn nominate(shards: &[UserShard], cfg: &ProtocolConfig, streams: &Streams) -> Result<Vec<(usize, usize)>> {
    collect(par::map(shards, |s| {
        let mut rng = streams.rng(s.user_id as u64, 0, Purpose::Selector);
        selectors::select_one(s, &cfg.selector, &mut rng).map(|v| (s.user_id, v))
    }))
}

/// Two-round estimation: private candidate selection, then private averaging
/// of local fits on the candidates.
pub fn two_round_slr(dataset: &Dataset, cfg: &ProtocolConfig) -> Result<(Estimate, ProtocolTranscript)> {
    cfg.validate()?;
    let n = dataset.n();
    if n < 4 {
        return Err(Error::InsufficientUsers {
            stage: "two-round protocol",
            needed: 4,
            got: n,
        });
    }
    check_unique(dataset.shards.iter().map(|s| s.user_id))?;
    let streams = Streams::new(cfg.seed);
    let mut ledger = BudgetLedger::new(cfg.epsilon);
    let mut transcript = ProtocolTranscript::new(cfg.epsilon);
    let (sel, rng1, rng2) = split_groups(n);

    let start = Instant::now();
    let nominations = nominate(&dataset.shards[sel.clone()], cfg, &streams)?;
    let hh = select_candidates(&nominations, dataset.d, cfg, &streams, &mut ledger)?;
    transcript.record(
        "selection",
        nominations.iter().map(|e| e.0),
        index_bits(dataset.d),
        1,
        start,
    );
    let selected = hh.candidates.clone();
    let s = selected.len();

    let start = Instant::now();
    let est_users = &dataset.shards[rng1.start..];
    let estimates = collect(par::map(est_users, |sh| {
        local_estimate(sh, &selected, cfg.local_fit).map(|b| (sh.user_id, b))
    }))?;
    let m = est_users.iter().map(UserShard::m).min().unwrap_or(0);
    let mut group1 = estimates;
    let group2 = group1.split_off(rng1.len());
    let ids1: Vec<usize> = group1.iter().map(|e| e.0).collect();
    let ids2: Vec<usize> = group2.iter().map(|e| e.0).collect();
    let agg = aggregate(group1, group2, s, n, m, cfg, &streams.child(Purpose::Range, 0), &mut ledger)?;
    let s_pad = agg.outcome.s_pad as u64;
    transcript.record("range", ids1, 1, s_pad, start);
    // Range and mean run inside one aggregation call; its time is booked to range.
    transcript.record("mean", ids2, 1, 64, Instant::now());
    debug_assert_eq!(rng2.len(), transcript.stages[2].users);
    transcript.close(&ledger);

    let diagnostics = Diagnostics {
        heavy_hitter: Some(hh),
        tau: Some(agg.tau),
        clipped_fraction: Some(agg.outcome.clipped_fraction),
        ..Default::default()
    };
    Ok((Estimate::embed(dataset.d, selected, &agg.values, diagnostics), transcript))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoOutcome {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub iterations_theory: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lipschitz: f64,
    /// Aggregate iterate after each step.
    pub path: Vec<Vec<f64>>,
    /// User ids of the range and mean batch of each step.
    pub batches: Vec<(Vec<usize>, Vec<usize>)>,
}

/// `⌈min(n, √(n m ε²))⌉`.
pub fn theoretical_iterations(n: usize, m: usize, epsilon: Budget) -> usize {
    let n_f = n as f64;
    let bound = if epsilon.is_unbounded() {
        n_f
    } else {
        n_f.min((n_f * m as f64 * epsilon.epsilon().powi(2)).sqrt())
    };
    bound.ceil().max(1.0) as usize
}

/// Private projected (optionally accelerated) gradient descent on the
/// squared loss restricted to `selected`, over `‖β‖∞ ≤ 1`. Every step
/// spends two fresh, disjoint batches of users on one private mean of the
/// local gradients.
pub fn uldp_sco(
    shards: &[&UserShard],
    selected: &[usize],
    cfg: &ProtocolConfig,
    streams: &Streams,
    ledger: &mut BudgetLedger,
) -> Result<ScoOutcome> {
    let n = shards.len();
    let s = selected.len();
    if s == 0 {
        return Err(Error::invalid("no selected variables"));
    }
    let s_pad = next_pow2(s);
    let per_batch = s_pad.max(2);
    let m = shards.iter().map(|sh| sh.m()).min().unwrap_or(0);
    let theory = theoretical_iterations(n, m, cfg.epsilon);
    let iterations = match cfg.sco.iterations {
        Some(t) => {
            if n / (2 * t) < per_batch {
                return Err(Error::invalid(format!(
                    "T = {t} leaves {} users per batch but {per_batch} are needed; use T <= {}",
                    n / (2 * t),
                    n / (2 * per_batch)
                )));
            }
            t
        }
        None => theory.min(n / (2 * per_batch)),
    };
    if iterations == 0 {
        return Err(Error::InsufficientUsers {
            stage: "gradient steps",
            needed: 2 * per_batch,
            got: n,
        });
    }
    let batch = n / (2 * iterations);
    let lipschitz = cfg.sco.lipschitz.resolve(s, n);
    let tau = cfg.sco.tau.resolve(&TauContext {
        s,
        n,
        m,
        half_width: cfg.sco.half_width,
        lipschitz,
        iterations,
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut streams.public(Purpose::Batch, 0));
    let designs: Vec<DMatrix<f64>> = par::map(shards, |sh| sh.columns(selected));

    let mut beta = vec![0.0; s];
    let mut ag = vec![0.0; s];
    let mut path = Vec::with_capacity(iterations);
    let mut batches = Vec::with_capacity(iterations);
    for t in 0..iterations {
        let w = cfg.sco.gamma.weight(t + 1);
        let md: Vec<f64> = beta.iter().zip(&ag).map(|(b, a)| w * b + (1.0 - w) * a).collect();
        let md_v = DVector::from_column_slice(&md);
        let gradient = |i: usize| {
            let (x, y) = (&designs[i], &shards[i].y);
            let g = x.tr_mul(&(x * &md_v - y)) / (x.nrows() as f64 * lipschitz);
            (shards[i].user_id, g.iter().copied().collect::<Vec<f64>>())
        };
        let b1: Vec<usize> = order[2 * t * batch..(2 * t + 1) * batch].to_vec();
        let b2: Vec<usize> = order[(2 * t + 1) * batch..(2 * t + 2) * batch].to_vec();
        let g1 = par::map(&b1, |&i| gradient(i));
        let g2 = par::map(&b2, |&i| gradient(i));
        let step = uldp_mean(
            &g1,
            &g2,
            tau,
            cfg.epsilon,
            cfg.sco.half_width,
            &streams.child(Purpose::Stage, t as u64),
            ledger,
        )?;
        let eta = cfg.sco.eta.at(t + 1);
        beta = md
            .iter()
            .zip(&step.estimate)
            .map(|(m, g)| (m - eta * lipschitz * g).clamp(-1.0, 1.0))
            .collect();
        ag = beta.iter().zip(&ag).map(|(b, a)| w * b + (1.0 - w) * a).collect();
        path.push(ag.clone());
        batches.push((g1.into_iter().map(|e| e.0).collect(), g2.into_iter().map(|e| e.0).collect()));
    }
    Ok(ScoOutcome {
        beta: ag,
        iterations,
        iterations_theory: theory,
        batch_size: batch,
        tau,
        lipschitz,
        path,
        batches,
    })
}

/// Candidate selection as in [`two_round_slr`], then [`uldp_sco`] on the
/// remaining users.
pub fn multi_round_slr(dataset: &Dataset, cfg: &ProtocolConfig) -> Result<(Estimate, ProtocolTranscript)> {
    cfg.validate()?;
    let n = dataset.n();
    if n < 4 {
        return Err(Error::InsufficientUsers {
            stage: "multi-round protocol",
            needed: 4,
            got: n,
        });
    }
    check_unique(dataset.shards.iter().map(|s| s.user_id))?;
    let streams = Streams::new(cfg.seed);
    let mut ledger = BudgetLedger::new(cfg.epsilon);
    let mut transcript = ProtocolTranscript::new(cfg.epsilon);
    let (sel, rest, _) = split_groups(n);

    let start = Instant::now();
    let nominations = nominate(&dataset.shards[sel], cfg, &streams)?;
    let hh = select_candidates(&nominations, dataset.d, cfg, &streams, &mut ledger)?;
    transcript.record(
        "selection",
        nominations.iter().map(|e| e.0),
        index_bits(dataset.d),
        1,
        start,
    );
    let selected = hh.candidates.clone();

    let start = Instant::now();
    let users: Vec<&UserShard> = dataset.shards[rest.start..].iter().collect();
    let sco = uldp_sco(&users, &selected, cfg, &streams.child(Purpose::Stage, u64::MAX), &mut ledger)?;
    let s_pad = next_pow2(selected.len()) as u64;
    let bound = {
        let (n_f, m_f) = (users.len() as f64, dataset.min_m() as f64);
        let e = cfg.epsilon.epsilon();
        if cfg.epsilon.is_unbounded() {
            n_f
        } else {
            n_f.min((n_f * m_f * e * e).sqrt())
        }
    };
    // Each step is one range round (s_pad vote bits per user) and one mean
    // round (one 64-bit real per user).
    transcript.record("gradient steps", std::iter::empty(), 2 * sco.iterations, 0, start);
    for (range_ids, mean_ids) in &sco.batches {
        for &u in range_ids {
            *transcript.bits_per_user.entry(u).or_insert(0) += s_pad;
        }
        for &u in mean_ids {
            *transcript.bits_per_user.entry(u).or_insert(0) += 64;
        }
    }
    transcript.round_bound = Some(bound);
    transcript.close(&ledger);

    let diagnostics = Diagnostics {
        heavy_hitter: Some(hh),
        tau: Some(sco.tau),
        iterations: Some(sco.iterations),
        iterations_theory: Some(sco.iterations_theory),
        batch_size: Some(sco.batch_size),
        lipschitz: Some(sco.lipschitz),
        ..Default::default()
    };
    Ok((Estimate::embed(dataset.d, selected, &sco.beta, diagnostics), transcript))
}

/// Per-user nomination for sparse mean estimation: uniform over coordinates
/// whose sample mean exceeds `c·σ̂·√(ln d / m)`, else the largest one.
pub fn select_mean_coordinate<R: Rng + ?Sized>(block: &SampleBlock, threshold: f64, rng: &mut R) -> usize {
    let (m, d) = block.x.shape();
    let means: Vec<f64> = (0..d).map(|j| block.x.column(j).mean()).collect();
    let sigma = if m > 1 {
        (0..d)
            .map(|j| {
                let c = block.x.column(j);
                (c.map(|v| (v - means[j]).powi(2)).sum() / (m - 1) as f64).sqrt()
            })
            .sum::<f64>()
            / d as f64
    } else {
        0.0
    };
    let cut = threshold * sigma * ((d.max(2) as f64).ln() / m as f64).sqrt();
    let eligible: Vec<usize> = (0..d).filter(|&j| means[j].abs() > cut).collect();
    if eligible.is_empty() {
        (0..d).fold(0, |b, j| if means[j].abs() > means[b].abs() { j } else { b })
    } else {
        eligible[rng.random_range(0..eligible.len())]
    }
}

/// The two-round pipeline with sample means in place of regressions.
pub fn sparse_mean(blocks: &[SampleBlock], cfg: &ProtocolConfig) -> Result<(Estimate, ProtocolTranscript)> {
    cfg.validate()?;
    let n = blocks.len();
    if n < 4 {
        return Err(Error::InsufficientUsers {
            stage: "sparse mean",
            needed: 4,
            got: n,
        });
    }
    let d = blocks[0].x.ncols();
    if blocks.iter().any(|b| b.x.ncols() != d || b.x.nrows() == 0) {
        return Err(Error::invalid("all blocks need the same non-zero width and at least one row"));
    }
    check_unique(blocks.iter().map(|b| b.user_id))?;
    let streams = Streams::new(cfg.seed);
    let mut ledger = BudgetLedger::new(cfg.epsilon);
    let mut transcript = ProtocolTranscript::new(cfg.epsilon);
    let (sel, rng1, _) = split_groups(n);

    let start = Instant::now();
    let nominations = par::map(&blocks[sel], |b| {
        let mut rng = streams.rng(b.user_id as u64, 0, Purpose::Selector);
        (b.user_id, select_mean_coordinate(b, cfg.mean_threshold, &mut rng))
    });
    let hh = select_candidates(&nominations, d, cfg, &streams, &mut ledger)?;
    transcript.record("selection", nominations.iter().map(|e| e.0), index_bits(d), 1, start);
    let selected = hh.candidates.clone();

    let start = Instant::now();
    let est = &blocks[rng1.start..];
    let mut group1 = par::map(est, |b| {
        (b.user_id, selected.iter().map(|&j| b.x.column(j).mean()).collect::<Vec<f64>>())
    });
    let group2 = group1.split_off(rng1.len());
    let m = est.iter().map(|b| b.x.nrows()).min().unwrap_or(0);
    let ids1: Vec<usize> = group1.iter().map(|e| e.0).collect();
    let ids2: Vec<usize> = group2.iter().map(|e| e.0).collect();
    let agg = aggregate(group1, group2, selected.len(), n, m, cfg, &streams.child(Purpose::Range, 0), &mut ledger)?;
    transcript.record("range", ids1, 1, agg.outcome.s_pad as u64, start);
    // Range and mean run inside one aggregation call; its time is booked to range.
    transcript.record("mean", ids2, 1, 64, Instant::now());
    transcript.close(&ledger);

    let diagnostics = Diagnostics {
        heavy_hitter: Some(hh),
        tau: Some(agg.tau),
        clipped_fraction: Some(agg.outcome.clipped_fraction),
        ..Default::default()
    };
    Ok((Estimate::embed(d, selected, &agg.values, diagnostics), transcript))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_independent, generate_sparse_mean, SyntheticConfig};
    use proptest::prelude::*;

    fn synth(n: usize, m: usize, d: usize, s_star: usize, coef: f64, noise: f64, seed: u64) -> (Dataset, crate::data::GroundTruth) {
        generate_independent(&SyntheticConfig {
            n,
            m,
            d,
            s_star,
            coef_value: coef,
            noise_std: noise,
            seed,
        })
        .unwrap()
    }

    fn ctx() -> TauContext {
        TauContext {
            s: 8,
            n: 400,
            m: 100,
            half_width: 2.0,
            lipschitz: 1.0,
            iterations: 10,
        }
    }

    #[test]
    fn rules_resolve() {
        assert_eq!(RhoRule::Target(8).resolve().unwrap(), 1.0 / 32.0);
        assert_eq!(RhoRule::Alpha { alpha: 0.5, s_star: 4 }.resolve().unwrap(), 0.5 / 32.0);
        assert!(RhoRule::Fixed(1.5).resolve().is_err());
        assert!(RhoRule::Target(0).resolve().is_err());
        let c = ctx();
        let radius = TauRule::Radius(1.0).resolve(&c).unwrap();
        assert!((radius - (8.0 * 400f64.ln() / 100.0).sqrt()).abs() < 1e-12);
        assert!((TauRule::LogSquared(2.0).resolve(&c).unwrap() - 2.0 * 400f64.ln() / 10.0).abs() < 1e-12);
        assert_eq!(TauRule::Bins(8).resolve(&c).unwrap(), 0.25);
        assert!(TauRule::Bins(0).resolve(&c).is_err());
        assert!(TauRule::Fixed(-1.0).resolve(&c).is_err());
        let g = TauRule::Gradient(1.0).resolve(&c).unwrap();
        assert!((g - (400f64.ln() * 400f64.ln() * 10f64.ln() / 100.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        assert!((EtaSchedule::Practical.at(1) - 0.1).abs() < 1e-15);
        assert!((EtaSchedule::Practical.at(63) - 0.1 * 32f64.powf(0.2)).abs() < 1e-15);
        assert_eq!(GammaSchedule::Accelerated.weight(1), 1.0);
        assert_eq!(GammaSchedule::Accelerated.weight(3), 0.5);
        assert_eq!(GammaSchedule::Constant(1.0).weight(17), 1.0);
        assert_eq!(Lipschitz::Theoretical.resolve(2, 100), 48.0 * 100f64.ln());
        assert_eq!(theoretical_iterations(100, 50, Budget::new(1.0).unwrap()), 71);
        assert_eq!(theoretical_iterations(100, 50, Budget::new(4.0).unwrap()), 100);
    }

    proptest! {
        #[test]
        fn groups_partition_users(n in 4usize..5000) {
            let (a, b, c) = split_groups(n);
            prop_assert_eq!(a.start, 0);
            prop_assert_eq!(a.end, b.start);
            prop_assert_eq!(b.end, c.start);
            prop_assert_eq!(c.end, n);
            prop_assert!(!a.is_empty() && !b.is_empty() && !c.is_empty());
        }
    }

    #[test]
    fn local_ols_exact_on_noiseless_data() {
        let (data, truth) = synth(3, 40, 20, 3, 0.7, 0.0, 1);
        let mut selected = truth.support.clone();
        selected.push((0..20).find(|j| !truth.support.contains(j)).unwrap());
        selected.sort_unstable();
        for shard in &data.shards {
            let b = local_estimate(shard, &selected, LocalFit::Ols).unwrap();
            for (v, &j) in b.iter().zip(&selected) {
                assert!((v - truth.beta_star[j]).abs() < 1e-10);
            }
        }
        let lasso = local_estimate(&data.shards[0], &selected, LocalFit::LassoOnSelected).unwrap();
        assert_eq!(lasso.len(), selected.len());
        assert!(local_estimate(&data.shards[0], &[], LocalFit::Ols).is_err());
        assert!(local_estimate(&data.shards[0], &[25], LocalFit::Ols).is_err());
        let (small, _) = synth(1, 2, 20, 3, 0.7, 0.0, 1);
        assert!(local_estimate(&small.shards[0], &[0, 1, 2], LocalFit::Ols).is_err());
    }

    #[test]
    fn noiseless_large_population_recovers_truth() {
        // Enough selection users that the frequency oracle separates the
        // support from everything else; every later stage is then exact.
        let (data, truth) = synth(2000, 40, 16, 2, 0.5, 0.0, 7);
        let cfg = ProtocolConfig {
            epsilon: Budget::new(1e6).unwrap(),
            max_candidates: Some(2),
            tau: TauRule::Bins(16),
            // The universal penalty is 0 on noiseless data, which keeps every
            // screened column; a small fixed penalty isolates the support.
            selector: SelectorConfig {
                lambda: selectors::LambdaRule::Fixed(0.05),
                ..Default::default()
            },
            ..Default::default()
        };
        let (est, tr) = two_round_slr(&data, &cfg).unwrap();
        assert_eq!(est.selected, truth.support);
        let err: f64 = est.beta.iter().zip(&truth.beta_star).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err < 1e-4, "{err}");
        assert_eq!(tr.rounds, 4 + 2);
        assert!(tr.budget_max() <= 1e6);
    }

    #[test]
    fn two_round_accounting() {
        let (data, _) = synth(64, 30, 20, 2, 0.5, 1.0, 3);
        let cfg = ProtocolConfig {
            max_candidates: Some(4),
            ..Default::default()
        };
        let (est, tr) = two_round_slr(&data, &cfg).unwrap();
        assert_eq!(tr.rounds, 5 + 2);
        assert_eq!(tr.stages[0].users, 32);
        assert!((0..32).all(|u| tr.bits_per_user[&u] == 1));
        assert_eq!(tr.budget_per_user.len(), 64);
        assert!(tr.budget_per_user.values().all(|&c| (c - 4.0).abs() < 1e-9));
        assert!(est.beta.iter().enumerate().all(|(j, &b)| b == 0.0 || est.selected.contains(&j)));
        let json: serde_json::Value = serde_json::from_str(&est.to_json(&tr).unwrap()).unwrap();
        let sel: Vec<usize> = est.selected.iter().map(|j| j + 1).collect();
        assert_eq!(json["selected"], serde_json::json!(sel));
        assert_eq!(json["beta"].as_array().unwrap().len(), 20);
        assert_eq!(json["transcript"]["rounds"], 7);
    }

    #[test]
    fn runs_are_deterministic() {
        let (data, _) = synth(40, 30, 16, 2, 0.5, 1.0, 4);
        let cfg = ProtocolConfig {
            max_candidates: Some(2),
            seed: 9,
            ..Default::default()
        };
        let (a, _) = two_round_slr(&data, &cfg).unwrap();
        let (b, _) = two_round_slr(&data, &cfg).unwrap();
        assert_eq!(a.beta, b.beta);
        let (c, _) = two_round_slr(&data, &ProtocolConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.beta, c.beta);
    }

    #[test]
    fn too_few_users_is_an_error() {
        let (data, _) = synth(3, 30, 16, 2, 0.5, 1.0, 4);
        assert!(two_round_slr(&data, &ProtocolConfig::default()).is_err());
        // 16 users leave 4 for the mean group, fewer than 8 candidates.
        let (data, _) = synth(16, 30, 16, 2, 0.5, 1.0, 4);
        let cfg = ProtocolConfig {
            rho: RhoRule::Fixed(0.01),
            hh_hashes: Some(1),
            ..Default::default()
        };
        match two_round_slr(&data, &cfg) {
            Err(Error::InsufficientUsers { .. }) | Ok(_) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    fn quadratic_objective(shards: &[&UserShard], selected: &[usize], beta: &[f64]) -> f64 {
        let b = DVector::from_column_slice(beta);
        let (mut total, mut rows) = (0.0, 0);
        for s in shards {
            total += (&s.y - s.columns(selected) * &b).norm_squared();
            rows += s.m();
        }
        total / rows as f64
    }

    #[test]
    fn sco_converges_without_noise() {
        let (data, truth) = synth(1600, 30, 12, 8, 0.3, 0.0, 5);
        let users: Vec<&UserShard> = data.shards.iter().collect();
        let cfg = ProtocolConfig {
            epsilon: Budget::new(f64::INFINITY).unwrap(),
            sco: ScoConfig {
                iterations: Some(50),
                tau: TauRule::Fixed(0.2),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut ledger = BudgetLedger::new(cfg.epsilon);
        let out = uldp_sco(&users, &truth.support, &cfg, &Streams::new(1), &mut ledger).unwrap();
        // Pooled least squares on the support is β* itself here.
        let opt: Vec<f64> = truth.support.iter().map(|&j| truth.beta_star[j]).collect();
        let gap = quadratic_objective(&users, &truth.support, &out.beta) - quadratic_objective(&users, &truth.support, &opt);
        assert!(gap <= 1e-4, "gap {gap}");
        assert_eq!(out.iterations, 50);
        assert_eq!(out.batch_size, 16);
        // Mostly monotone descent of the objective along the path.
        let f: Vec<f64> = out.path.iter().map(|b| quadratic_objective(&users, &truth.support, b)).collect();
        let ups = f.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups * 10 <= f.len(), "{ups} increases");
        // Disjoint batches: 50 steps × 2 batches × 16 distinct users.
        assert_eq!(ledger.len(), 1600);
    }

    #[test]
    fn unit_gamma_is_projected_gradient() {
        let (data, truth) = synth(64, 30, 8, 2, 0.5, 1.0, 6);
        let users: Vec<&UserShard> = data.shards.iter().collect();
        let cfg = ProtocolConfig {
            epsilon: Budget::new(2.0).unwrap(),
            sco: ScoConfig {
                iterations: Some(4),
                gamma: GammaSchedule::Constant(1.0),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut ledger = BudgetLedger::new(cfg.epsilon);
        let out = uldp_sco(&users, &truth.support, &cfg, &Streams::new(2), &mut ledger).unwrap();
        // With weight 1 the aggregate is the last iterate, which is clipped.
        assert_eq!(out.path.last().unwrap(), &out.beta);
        assert!(out.path.iter().flatten().all(|b| b.abs() <= 1.0));
        assert_eq!(ledger.len(), 4 * 2 * 8);
        assert!(ledger.users().all(|(_, c)| (c - 2.0).abs() < 1e-9));
    }

    #[test]
    fn sco_rejects_oversized_t() {
        let (data, truth) = synth(40, 30, 8, 4, 0.5, 1.0, 6);
        let users: Vec<&UserShard> = data.shards.iter().collect();
        let cfg = ProtocolConfig {
            sco: ScoConfig {
                iterations: Some(10),
                ..Default::default()
            },
            ..Default::default()
        };
        let mut ledger = BudgetLedger::new(cfg.epsilon);
        assert!(uldp_sco(&users, &truth.support, &cfg, &Streams::new(2), &mut ledger).is_err());
        // The default T is clamped instead.
        let cfg = ProtocolConfig::default();
        let out = uldp_sco(&users, &truth.support, &cfg, &Streams::new(2), &mut ledger).unwrap();
        assert_eq!(out.iterations, 40 / (2 * 4));
        assert!(out.iterations_theory >= out.iterations);
    }

    #[test]
    fn multi_round_accounting() {
        let (data, _) = synth(200, 30, 16, 2, 0.5, 1.0, 8);
        let cfg = ProtocolConfig {
            max_candidates: Some(2),
            ..Default::default()
        };
        let (est, tr) = multi_round_slr(&data, &cfg).unwrap();
        let t = est.diagnostics.iterations.unwrap();
        assert_eq!(tr.rounds, 4 + 2 * t);
        assert_eq!(t, 100 / 4);
        assert!(tr.round_bound.unwrap() <= 100.0);
        assert!(tr.budget_max() <= 4.0 + 1e-9);
        assert!(est.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn sparse_mean_on_constant_data() {
        let (mut blocks, truth) = generate_sparse_mean(&SyntheticConfig {
            n: 4000,
            m: 10,
            d: 16,
            s_star: 2,
            coef_value: 0.5,
            noise_std: 0.0,
            seed: 3,
        })
        .unwrap();
        blocks.iter_mut().for_each(|b| b.x.iter_mut().for_each(|v| *v = (*v * 1e6).round() / 1e6));
        let cfg = ProtocolConfig {
            epsilon: Budget::new(1e6).unwrap(),
            max_candidates: Some(2),
            tau: TauRule::Bins(16),
            ..Default::default()
        };
        let (est, tr) = sparse_mean(&blocks, &cfg).unwrap();
        assert_eq!(est.selected, truth.support);
        for (a, b) in est.beta.iter().zip(&truth.beta_star) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(tr.rounds, 4 + 2);
    }

    #[test]
    fn mean_selector_prefers_large_coordinates() {
        let x = DMatrix::from_fn(50, 6, |r, c| if c == 4 { 1.0 + 0.01 * (r % 3) as f64 } else { 0.01 * ((r * 7 + c) % 5) as f64 - 0.02 });
        let block = SampleBlock { user_id: 0, x };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        for _ in 0..20 {
            assert_eq!(select_mean_coordinate(&block, 2.0, &mut rng), 4);
        }
    }
}
