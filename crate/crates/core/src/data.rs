//! Synthetic data generation, CSV ingestion and user sharding.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::privacy::{Purpose, Streams};

/// The sparse coefficient vector a dataset was generated from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta_star: Vec<f64>,
    /// Sorted, 0-based.
    pub support: Vec<usize>,
    pub s_star: usize,
    pub a_min: f64,
    pub noise_std: f64,
}

impl GroundTruth {
    pub fn from_support(d: usize, support: Vec<usize>, coef_value: f64, noise_std: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("support must be non-empty"));
        }
        if !(coef_value > 0.0 && coef_value <= 1.0) {
            return Err(Error::invalid(format!("coefficient value {coef_value} not in (0, 1]")));
        }
        let mut support = support;
        support.sort_unstable();
        support.dedup();
        if support.last().is_some_and(|&j| j >= d) {
            return Err(Error::invalid("support index out of range"));
        }
        let mut beta_star = vec![0.0; d];
        for &j in &support {
            beta_star[j] = coef_value;
        }
        Ok(GroundTruth {
            s_star: support.len(),
            a_min: coef_value,
            beta_star,
            support,
            noise_std,
        })
    }

    pub fn d(&self) -> usize {
        self.beta_star.len()
    }

    /// Checks the documented invariants; used by property tests.
    pub fn check(&self) -> bool {
        let nz: Vec<usize> = (0..self.d()).filter(|&j| self.beta_star[j] != 0.0).collect();
        let mags = self.support.iter().map(|&j| self.beta_star[j].abs());
        nz == self.support
            && self.support.len() == self.s_star
            && self.beta_star.iter().all(|b| b.abs() <= 1.0)
            && mags.fold(f64::INFINITY, f64::min) == self.a_min
            && self.a_min > 0.0
    }
}

/// One user's local sample block.
#[derive(Debug, Clone, PartialEq)]
pub struct UserShard {
    pub user_id: usize,
    /// `m × d` design.
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
}

impl UserShard {
    pub fn new(user_id: usize, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "shard {user_id}: {} rows but {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::invalid(format!("shard {user_id} is empty")));
        }
        Ok(UserShard { user_id, x, y })
    }

    pub fn m(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Copy of the design restricted to `columns` (in the given order).
    pub fn columns(&self, columns: &[usize]) -> DMatrix<f64> {
        self.x.select_columns(columns.iter())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Independent,
    Correlated { corr_dims: usize },
    External,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub shards: Vec<UserShard>,
    pub d: usize,
    pub design: Design,
}

impl Dataset {
    pub fn new(shards: Vec<UserShard>, design: Design) -> Result<Self> {
        let d = shards
            .first()
            .map(UserShard::d)
            .ok_or_else(|| Error::invalid("dataset has no shards"))?;
        if let Some(bad) = shards.iter().find(|s| s.d() != d) {
            return Err(Error::invalid(format!(
                "shard {} has {} columns, expected {d}",
                bad.user_id,
                bad.d()
            )));
        }
        Ok(Dataset { shards, d, design })
    }

    pub fn n(&self) -> usize {
        self.shards.len()
    }

    pub fn min_m(&self) -> usize {
        self.shards.iter().map(UserShard::m).min().unwrap_or(0)
    }

    /// All rows of all shards stacked in shard order.
    pub fn pooled(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rows: usize = self.shards.iter().map(UserShard::m).sum();
        let mut x = DMatrix::zeros(rows, self.d);
        let mut y = DVector::zeros(rows);
        let mut at = 0;
        for s in &self.shards {
            x.view_mut((at, 0), (s.m(), self.d)).copy_from(&s.x);
            y.rows_mut(at, s.m()).copy_from(&s.y);
            at += s.m();
        }
        (x, y)
    }
}

/// Parameters shared by the synthetic generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub s_star: usize,
    pub coef_value: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 400,
            m: 100,
            d: 256,
            s_star: 8,
            coef_value: 0.2,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::invalid("n, m and d must be positive"));
        }
        if self.s_star == 0 {
            return Err(Error::invalid("s_star must be positive"));
        }
        if self.s_star > self.d {
            return Err(Error::invalid(format!("s_star {} exceeds d {}", self.s_star, self.d)));
        }
        if !(self.coef_value > 0.0 && self.coef_value <= 1.0) {
            return Err(Error::invalid(format!("coef_value {} not in (0, 1]", self.coef_value)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be >= 0"));
        }
        Ok(())
    }
}

/// Source of the additive noise vector of one shard.
pub trait NoiseModel: Sync {
    fn draw(&self, rng: &mut ChaCha8Rng, m: usize) -> DVector<f64>;
}

/// i.i.d. `N(0, std²)` noise.
#[derive(Debug, Clone, Copy)]
pub struct IidGaussian(pub f64);

impl NoiseModel for IidGaussian {
    fn draw(&self, rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
        DVector::from_fn(m, |_, _| self.0 * rng.sample::<f64, _>(StandardNormal))
    }
}

fn random_support(streams: &Streams, pool: usize, s_star: usize) -> Vec<usize> {
    let mut rng = streams.public(Purpose::Truth, 0);
    let mut support = rand::seq::index::sample(&mut rng, pool, s_star).into_vec();
    support.sort_unstable();
    support
}

fn assemble(
    cfg: &SyntheticConfig,
    truth: &GroundTruth,
    design: Design,
    row_sampler: impl Fn(&mut ChaCha8Rng) -> Vec<f64> + Sync,
    noise: &dyn NoiseModel,
) -> Result<Dataset> {
    let streams = Streams::new(cfg.seed);
    let beta = DVector::from_column_slice(&truth.beta_star);
    let ids: Vec<usize> = (0..cfg.n).collect();
    let shards = par::map(&ids, |&user| {
        let mut rng = streams.rng(user as u64, 0, Purpose::Data);
        let mut x = DMatrix::zeros(cfg.m, cfg.d);
        for r in 0..cfg.m {
            let row = row_sampler(&mut rng);
            for (c, v) in row.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        let y = &x * &beta + noise.draw(&mut rng, cfg.m);
        UserShard { user_id: user, x, y }
    });
    Dataset::new(shards, design)
}

/// Independent standard-Gaussian design, `y = Xβ* + σ` per shard.
pub fn generate_independent(cfg: &SyntheticConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let truth = GroundTruth::from_support(
        cfg.d,
        random_support(&streams, cfg.d, cfg.s_star),
        cfg.coef_value,
        cfg.noise_std,
    )?;
    let d = cfg.d;
    let data = assemble(
        cfg,
        &truth,
        Design::Independent,
        |rng| (0..d).map(|_| rng.sample(StandardNormal)).collect(),
        &IidGaussian(cfg.noise_std),
    )?;
    Ok((data, truth))
}

/// Lower Cholesky factor of the Toeplitz covariance `Σ[k][k'] = 2^{-|k-k'|}`.
#[derive(Debug, Clone)]
pub struct ToeplitzFactor {
    lower: DMatrix<f64>,
}

impl ToeplitzFactor {
    pub fn covariance(dims: usize) -> DMatrix<f64> {
        DMatrix::from_fn(dims, dims, |i, j| 0.5f64.powi(i.abs_diff(j) as i32))
    }

    pub fn new(dims: usize) -> Result<Self> {
        let chol = Self::covariance(dims)
            .cholesky()
            .ok_or_else(|| Error::invalid("Toeplitz covariance is not positive definite"))?;
        Ok(ToeplitzFactor { lower: chol.l() })
    }

    pub fn dims(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> &DMatrix<f64> {
        &self.lower
    }
}

/// Correlated design: the first `corr_dims` coordinates have covariance
/// `2^{-|k-k'|}`, the rest are independent, and the support lies in the first
/// `corr_dims` coordinates.
pub fn generate_correlated(cfg: &SyntheticConfig, corr_dims: usize) -> Result<(Dataset, GroundTruth)> {
    generate_correlated_with_noise(cfg, corr_dims, &IidGaussian(cfg.noise_std))
}

pub fn generate_correlated_with_noise(
    cfg: &SyntheticConfig,
    corr_dims: usize,
    noise: &dyn NoiseModel,
) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    if corr_dims < cfg.s_star {
        return Err(Error::invalid(format!(
            "corr_dims {corr_dims} smaller than s_star {}",
            cfg.s_star
        )));
    }
    if corr_dims > cfg.d {
        return Err(Error::invalid(format!("corr_dims {corr_dims} exceeds d {}", cfg.d)));
    }
    let streams = Streams::new(cfg.seed);
    let truth = GroundTruth::from_support(
        cfg.d,
        random_support(&streams, corr_dims, cfg.s_star),
        cfg.coef_value,
        cfg.noise_std,
    )?;
    let factor = ToeplitzFactor::new(corr_dims)?;
    let d = cfg.d;
    let data = assemble(
        cfg,
        &truth,
        Design::Correlated { corr_dims },
        |rng| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let head = factor.lower() * DVector::from_column_slice(&z[..corr_dims]);
            head.iter().copied().chain(z[corr_dims..].iter().copied()).collect()
        },
        noise,
    )?;
    Ok((data, truth))
}

/// Observations without a response, for sparse mean estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub user_id: usize,
    pub x: DMatrix<f64>,
}

/// Rows `x = μ + N(0, noise_std² I)` with `μ` equal to `mean_value` on a random
/// `s_star`-subset.
pub fn generate_sparse_mean(cfg: &SyntheticConfig) -> Result<(Vec<SampleBlock>, GroundTruth)> {
    cfg.validate()?;
    let streams = Streams::new(cfg.seed);
    let truth = GroundTruth::from_support(
        cfg.d,
        random_support(&streams, cfg.d, cfg.s_star),
        cfg.coef_value,
        cfg.noise_std,
    )?;
    let ids: Vec<usize> = (0..cfg.n).collect();
    let blocks = par::map(&ids, |&user| {
        let mut rng = streams.rng(user as u64, 0, Purpose::Data);
        let x = DMatrix::from_fn(cfg.m, cfg.d, |_, c| {
            truth.beta_star[c] + cfg.noise_std * rng.sample::<f64, _>(StandardNormal)
        });
        SampleBlock { user_id: user, x }
    });
    Ok((blocks, truth))
}

/// How rows of a CSV file are grouped into users.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grouping {
    /// One shard per distinct value of this column.
    ByColumn(String),
    /// Shuffle rows and cut into chunks of this size; leftover rows join the
    /// last chunk.
    Chunks(usize),
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub target_column: String,
    pub grouping: Grouping,
    pub seed: u64,
}

impl CsvOptions {
    /// Mirrors the CLI: exactly one of `user_column` and `group_size`.
    pub fn new(
        target_column: impl Into<String>,
        user_column: Option<String>,
        group_size: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let grouping = match (user_column, group_size) {
            (Some(col), None) => Grouping::ByColumn(col),
            (None, Some(g)) => Grouping::Chunks(g),
            _ => {
                return Err(Error::invalid(
                    "exactly one of user_column and group_size must be given",
                ))
            }
        };
        Ok(CsvOptions {
            target_column: target_column.into(),
            grouping,
            seed,
        })
    }
}

/// Load a numeric CSV (header row required), standardize every feature column
/// over the whole file, and split the rows into user shards.
///
/// Constant feature columns cannot be standardized and are dropped.
pub fn load_csv(path: impl AsRef<Path>, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    load_csv_reader(&mut reader, opts)
}

pub fn load_csv_str(text: &str, opts: &CsvOptions) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    load_csv_reader(&mut reader, opts)
}

fn load_csv_reader<R: std::io::Read>(reader: &mut csv::Reader<R>, opts: &CsvOptions) -> Result<Dataset> {
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("column '{name}' not found in header")))
    };
    let target = find(&opts.target_column)?;
    let user_col = match &opts.grouping {
        Grouping::ByColumn(c) => Some(find(c)?),
        Grouping::Chunks(g) => {
            if *g < 2 {
                return Err(Error::Csv(format!("group size must be at least 2, got {g}")));
            }
            None
        }
    };
    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != target && Some(c) != user_col)
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::Csv("no feature columns".into()));
    }

    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    let mut keys = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != headers.len() {
            return Err(Error::Csv(format!(
                "line {line}: expected {} fields, found {}",
                headers.len(),
                rec.len()
            )));
        }
        let num = |c: usize| -> Result<f64> {
            let cell = rec[c].trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Csv(format!("line {line}, column '{}': non-numeric value '{cell}'", headers[c])))
        };
        targets.push(num(target)?);
        features.push(feature_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?);
        if let Some(u) = user_col {
            keys.push(rec[u].trim().to_string());
        }
    }
    let rows = features.len();
    if rows == 0 {
        return Err(Error::Csv("file has no data rows".into()));
    }

    // Standardize over the full file before sharding.
    let mut keep = Vec::new();
    let mut stats = Vec::new();
    for c in 0..feature_cols.len() {
        let mean = features.iter().map(|r| r[c]).sum::<f64>() / rows as f64;
        let var = features.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / rows as f64;
        if var > 0.0 {
            keep.push(c);
            stats.push((mean, var.sqrt()));
        }
    }
    if keep.is_empty() {
        return Err(Error::Csv("all feature columns are constant".into()));
    }
    let d = keep.len();

    let groups: Vec<Vec<usize>> = match &opts.grouping {
        Grouping::ByColumn(_) => {
            let mut order: Vec<String> = Vec::new();
            let mut members: HashMap<String, Vec<usize>> = HashMap::new();
            for (r, k) in keys.iter().enumerate() {
                members
                    .entry(k.clone())
                    .or_insert_with(|| {
                        order.push(k.clone());
                        Vec::new()
                    })
                    .push(r);
            }
            order.into_iter().map(|k| members.remove(&k).unwrap()).collect()
        }
        Grouping::Chunks(g) => {
            if rows < *g {
                return Err(Error::Csv(format!("{rows} rows cannot fill one group of {g}")));
            }
            let mut idx: Vec<usize> = (0..rows).collect();
            idx.shuffle(&mut Streams::new(opts.seed).public(Purpose::Shuffle, 0));
            let full = rows / g;
            let mut out: Vec<Vec<usize>> = idx.chunks(*g).take(full).map(<[usize]>::to_vec).collect();
            out.last_mut().unwrap().extend_from_slice(&idx[full * g..]);
            out
        }
    };

    let shards = groups
        .into_iter()
        .enumerate()
        .map(|(user, rs)| {
            let x = DMatrix::from_fn(rs.len(), d, |r, c| {
                let (mean, sd) = stats[c];
                (features[rs[r]][keep[c]] - mean) / sd
            });
            let y = DVector::from_iterator(rs.len(), rs.iter().map(|&r| targets[r]));
            UserShard::new(user, x, y)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(shards, Design::External)
}

/// Write a dataset as CSV with columns `user, y, x1..xd`. Reloading with
/// `user_column = "user"` recovers the shard structure.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["user".to_string(), "y".to_string()];
    header.extend((1..=data.d).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for s in &data.shards {
        for r in 0..s.m() {
            let mut rec = vec![s.user_id.to_string(), s.y[r].to_string()];
            rec.extend((0..data.d).map(|c| s.x[(r, c)].to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
