//! Private heavy-hitter detection over a prefix tree.
//!
//! Every participating user holds one index in `[0, d)`. Indices are written
//! as `L = ⌈log₂ d⌉`-bit big-endian strings; the curator grows the set of
//! frequent prefixes one bit at a time. Public randomness pins each user to a
//! single `(level, hash, Hadamard row)` cell, so a user sends exactly one
//! randomized-response bit for the whole sweep, and that bit is reused for
//! every candidate queried at the user's level.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::par;
use crate::privacy::hadamard::{fwht, next_pow2, sign};
use crate::privacy::{randomized_response_sign, rr_debias_factor, Budget, BudgetLedger, PublicRandomness, Purpose, Streams};

/// Number of bits used to write an index in `[0, d)`.
pub fn index_bits(d: usize) -> usize {
    if d <= 1 {
        0
    } else {
        (usize::BITS - (d - 1).leading_zeros()) as usize
    }
}

/// Big-endian binary of the 0-based index `v`, zero padded to `⌈log₂ d⌉` bits.
pub fn encode_index(v: usize, d: usize) -> Result<String> {
    if v >= d {
        return Err(Error::invalid(format!("index {v} out of range for d = {d}")));
    }
    let bits = index_bits(d);
    Ok((0..bits).rev().map(|b| if v >> b & 1 == 1 { '1' } else { '0' }).collect())
}

pub fn decode_index(bits: &str, d: usize) -> Result<usize> {
    if bits.len() != index_bits(d) {
        return Err(Error::invalid(format!("expected {} bits for d = {d}, got {:?}", index_bits(d), bits)));
    }
    let mut v = 0usize;
    for ch in bits.chars() {
        v = v << 1
            | match ch {
                '0' => 0,
                '1' => 1,
                _ => return Err(Error::invalid(format!("not a bit string: {bits:?}"))),
            };
    }
    if v >= d {
        return Err(Error::invalid(format!("{bits:?} decodes to {v}, out of range for d = {d}")));
    }
    Ok(v)
}

/// Hash key of an `len`-bit prefix. The leading marker bit keeps prefixes of
/// different lengths distinct.
#[inline]
fn prefix_key(len: usize, bits: u64) -> u64 {
    (1u64 << len) | bits
}

/// Surviving prefixes after a level of the sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefixSet {
    pub level: usize,
    /// Each prefix as an integer `< 2^level`.
    pub prefixes: Vec<u64>,
}

impl PrefixSet {
    pub fn root() -> Self {
        PrefixSet {
            level: 0,
            prefixes: vec![0],
        }
    }

    pub fn strings(&self) -> Vec<String> {
        self.prefixes
            .iter()
            .map(|&p| (0..self.level).rev().map(|b| if p >> b & 1 == 1 { '1' } else { '0' }).collect())
            .collect()
    }

    /// Children whose subtree still contains an index `< d`.
    fn children(&self, total_bits: usize, d: usize) -> PrefixSet {
        let level = self.level + 1;
        let shift = total_bits - level;
        let prefixes = self
            .prefixes
            .iter()
            .flat_map(|&p| [p << 1, p << 1 | 1])
            .filter(|&c| ((c as u128) << shift) < d as u128)
            .collect();
        PrefixSet { level, prefixes }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreqList {
    pub level: usize,
    /// `(prefix, estimated count)`, in the order the prefixes were queried.
    pub entries: Vec<(u64, f64)>,
}

/// One user's only message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HHReport {
    pub user_id: usize,
    pub bit: i8,
}

/// The pre-noise sign `x = g(prefix) · W[row, h(prefix)]` for a user holding
/// `v`, at the cell public randomness assigned to `user_id`.
pub fn local_encode(v: usize, public: &PublicRandomness, user_id: usize) -> i8 {
    let a = public.assignment(user_id);
    let level = a.level + 1;
    let prefix = (v as u64) >> (public.levels() - level);
    let key = prefix_key(level, prefix);
    let hp = public.hash_pair(a.hash);
    hp.g(key) * sign(a.row, hp.h(key))
}

/// User side: encode, then randomize. Charging the budget is the caller's job
/// (see [`heavy_hitter`]), which keeps this function pure.
pub fn local_rnd<R: rand::Rng + ?Sized>(
    v: usize,
    epsilon: Budget,
    public: &PublicRandomness,
    user_id: usize,
    rng: &mut R,
) -> HHReport {
    HHReport {
        user_id,
        bit: randomized_response_sign(local_encode(v, public, user_id), epsilon, rng),
    }
}

/// Reports bucketed by `(level, hash)` cell. Each cell keeps
/// `A[c] = Σ_i y_i W[r_i, c]` for every column `c`, obtained with one
/// Walsh–Hadamard transform of the per-row sums.
#[derive(Debug, Clone)]
pub struct ReportTable {
    levels: usize,
    hashes: usize,
    participants: usize,
    counts: Vec<usize>,
    columns: Vec<Vec<f64>>,
}

impl ReportTable {
    pub fn new(reports: &[HHReport], public: &PublicRandomness) -> Self {
        let (levels, hashes, k) = (public.levels(), public.num_hashes(), public.k());
        let mut counts = vec![0usize; levels * hashes];
        let mut columns = vec![vec![0.0; k]; levels * hashes];
        for rep in reports {
            let a = public.assignment(rep.user_id);
            let cell = a.level * hashes + a.hash;
            counts[cell] += 1;
            columns[cell][a.row] += f64::from(rep.bit);
        }
        for col in &mut columns {
            fwht(col);
        }
        ReportTable {
            levels,
            hashes,
            participants: reports.len(),
            counts,
            columns,
        }
    }

    pub fn participants(&self) -> usize {
        self.participants
    }

    pub fn cell_size(&self, level: usize, hash: usize) -> usize {
        self.counts[(level - 1) * self.hashes + hash]
    }

    pub fn empty_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c == 0).count()
    }

    /// The `hash`-th estimate of how many participants hold `prefix` at
    /// `level` (1-based). Empty cells give 0.
    pub fn single_hash_estimate(
        &self,
        level: usize,
        prefix: u64,
        hash: usize,
        public: &PublicRandomness,
        epsilon: Budget,
    ) -> f64 {
        debug_assert!(level >= 1 && level <= self.levels);
        let cell = (level - 1) * self.hashes + hash;
        let size = self.counts[cell];
        if size == 0 {
            return 0.0;
        }
        let key = prefix_key(level, prefix);
        let hp = public.hash_pair(hash);
        let scale = self.participants as f64 / size as f64 * rr_debias_factor(epsilon);
        scale * f64::from(hp.g(key)) * self.columns[cell][hp.h(key)]
    }
}

/// Lower median; `values` must be non-empty.
fn lower_median(values: &mut [f64]) -> f64 {
    let mid = (values.len() - 1) / 2;
    values.select_nth_unstable_by(mid, f64::total_cmp);
    values[mid]
}

/// Median-of-hashes count estimate for every candidate prefix at `level`.
pub fn freq_oracle(
    level: usize,
    candidates: &PrefixSet,
    table: &ReportTable,
    public: &PublicRandomness,
    epsilon: Budget,
) -> Result<FreqList> {
    if level == 0 || level > table.levels || candidates.level != level {
        return Err(Error::invalid(format!(
            "level {level} does not match the candidates ({}) or the table (1..={})",
            candidates.level, table.levels
        )));
    }
    let mut buf = vec![0.0; table.hashes];
    let entries = candidates
        .prefixes
        .iter()
        .map(|&p| {
            for (j, slot) in buf.iter_mut().enumerate() {
                *slot = table.single_hash_estimate(level, p, j, public, epsilon);
            }
            (p, lower_median(&mut buf))
        })
        .collect();
    Ok(FreqList { level, entries })
}

/// Tuning knobs for [`heavy_hitter`]. `None` means "derive from the number of
/// participants".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeavyHitterParams {
    /// Retention threshold as a fraction of the participants.
    pub rho: f64,
    pub num_hashes: Option<usize>,
    pub hash_range: Option<usize>,
    /// Survivors kept per level; defaults to `⌈4/ρ⌉`.
    pub cap: Option<usize>,
    /// Keep only this many final candidates, by estimated count.
    pub max_output: Option<usize>,
}

impl HeavyHitterParams {
    pub fn new(rho: f64) -> Self {
        HeavyHitterParams {
            rho,
            num_hashes: None,
            hash_range: None,
            cap: None,
            max_output: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.num_hashes == Some(0) || self.cap == Some(0) || self.max_output == Some(0) {
            return Err(Error::invalid("hash count, cap and output size must be positive"));
        }
        if let Some(k) = self.hash_range {
            if k < 2 || !k.is_power_of_two() {
                return Err(Error::invalid(format!("hash range {k} must be a power of two >= 2")));
            }
        }
        Ok(())
    }

    /// `⌈3 ln n⌉`.
    pub fn resolved_hashes(&self, n: usize) -> usize {
        self.num_hashes
            .unwrap_or_else(|| (3.0 * (n.max(2) as f64).ln()).ceil() as usize)
            .max(1)
    }

    /// `next_pow2(⌈√(n / (3 ln n))⌉)`.
    pub fn resolved_range(&self, n: usize) -> usize {
        self.hash_range.unwrap_or_else(|| {
            let n = n.max(2) as f64;
            next_pow2((n / (3.0 * n.ln())).sqrt().ceil() as usize).max(2)
        })
    }

    pub fn resolved_cap(&self) -> usize {
        self.cap.unwrap_or((4.0 / self.rho).ceil() as usize)
    }

    /// Public randomness sized for `n` participants over `[0, d)`.
    pub fn public_randomness(&self, n: usize, d: usize, seed: u64) -> Result<PublicRandomness> {
        if d < 2 {
            return Err(Error::invalid(format!("heavy hitters need d >= 2, got {d}")));
        }
        PublicRandomness::new(seed, index_bits(d), self.resolved_hashes(n), self.resolved_range(n))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelTrace {
    pub level: usize,
    pub queried: usize,
    pub kept: usize,
    /// True when nothing cleared the threshold and the argmax was kept.
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeavyHitterOutcome {
    /// Detected indices, ascending, 0-based.
    pub candidates: Vec<usize>,
    /// Final-level estimates for the returned candidates, same order.
    pub estimates: Vec<f64>,
    pub levels: Vec<LevelTrace>,
    pub participants: usize,
    pub empty_cells: usize,
    pub num_hashes: usize,
    pub hash_range: usize,
}

fn rank_desc(entries: &mut [(u64, f64)]) {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Runs the full prefix-tree sweep over `values = [(user_id, index)]`.
///
/// Each user's report is generated once (from its own `Purpose::Report`
/// stream under `streams`) and the ledger is charged `ε` per user.
pub fn heavy_hitter(
    values: &[(usize, usize)],
    epsilon: Budget,
    params: &HeavyHitterParams,
    d: usize,
    public: &PublicRandomness,
    streams: &Streams,
    ledger: &mut BudgetLedger,
) -> Result<HeavyHitterOutcome> {
    params.validate()?;
    if values.is_empty() {
        return Err(Error::InsufficientUsers {
            stage: "heavy hitter",
            needed: 1,
            got: 0,
        });
    }
    let total_bits = index_bits(d);
    if total_bits == 0 || public.levels() != total_bits {
        return Err(Error::invalid(format!(
            "public randomness has {} levels, d = {d} needs {total_bits}",
            public.levels()
        )));
    }
    if let Some(&(u, v)) = values.iter().find(|&&(_, v)| v >= d) {
        return Err(Error::invalid(format!("user {u} holds index {v} >= d = {d}")));
    }

    ledger.charge_all(values.iter().map(|&(u, _)| u), epsilon.epsilon())?;
    let reports = par::map(values, |&(u, v)| {
        let mut rng = streams.rng(u as u64, 0, Purpose::Report);
        local_rnd(v, epsilon, public, u, &mut rng)
    });
    let table = ReportTable::new(&reports, public);

    let threshold = params.rho * values.len() as f64;
    let cap = params.resolved_cap();
    let mut survivors = PrefixSet::root();
    let mut last = Vec::new();
    let mut levels = Vec::with_capacity(total_bits);
    for level in 1..=total_bits {
        let queried = survivors.children(total_bits, d);
        let freq = freq_oracle(level, &queried, &table, public, epsilon)?;
        let mut ranked = freq.entries;
        rank_desc(&mut ranked);
        let mut kept: Vec<(u64, f64)> = ranked.iter().copied().filter(|e| e.1 >= threshold).collect();
        let forced = kept.is_empty();
        if forced {
            kept.push(ranked[0]);
        }
        kept.truncate(cap);
        levels.push(LevelTrace {
            level,
            queried: queried.prefixes.len(),
            kept: kept.len(),
            forced,
        });
        survivors = PrefixSet {
            level,
            prefixes: kept.iter().map(|e| e.0).collect(),
        };
        last = kept;
    }
    if let Some(limit) = params.max_output {
        last.truncate(limit);
    }
    last.sort_by_key(|e| e.0);
    Ok(HeavyHitterOutcome {
        candidates: last.iter().map(|e| e.0 as usize).collect(),
        estimates: last.iter().map(|e| e.1).collect(),
        levels,
        participants: values.len(),
        empty_cells: table.empty_cells(),
        num_hashes: public.num_hashes(),
        hash_range: public.k(),
    })
}
