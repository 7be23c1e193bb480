//! Experiment runner: synthetic data sweeps, replication, metrics and
//! CSV/JSON output.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use crate::clock::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, GroundTruth, SyntheticConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::privacy::{derive_seed, Budget};
use crate::protocols::{self, ProtocolConfig, ProtocolTranscript, RhoRule, TauRule};
use crate::selectors::{self, CdOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TwoSlr,
    MSlr,
    LocalLasso,
    SparseMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    Independent,
    Correlated,
    SparseMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSpec {
    pub generator: Generator,
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub s_star: usize,
    pub coef_value: f64,
    pub noise_std: f64,
    /// Leading block with Toeplitz correlation, for the correlated design.
    pub corr_dims: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        DataSpec {
            generator: Generator::Independent,
            n: s.n,
            m: s.m,
            d: s.d,
            s_star: s.s_star,
            coef_value: s.coef_value,
            noise_std: s.noise_std,
            corr_dims: 50,
        }
    }
}

impl DataSpec {
    pub fn synthetic(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            n: self.n,
            m: self.m,
            d: self.d,
            s_star: self.s_star,
            coef_value: self.coef_value,
            noise_std: self.noise_std,
            seed,
        }
    }
}

/// Per-user Lasso with cross-validated penalty; users rely only on their own
/// samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSpec {
    pub folds: usize,
    pub lambdas: usize,
    /// Evaluate on the first this-many users; the reported error is the
    /// median over them.
    pub users: usize,
    /// Looser than the selector's solver: the small-penalty end of the path
    /// is underdetermined and slow to settle, and four digits are plenty.
    pub solver: CdOptions,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        BaselineSpec {
            folds: 5,
            lambdas: 300,
            users: 64,
            solver: CdOptions {
                tol: 1e-4,
                max_iter: 3000,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Epsilon,
    N,
    M,
    D,
    SStar,
    CoefValue,
    NoiseStd,
    Rho,
    Tau,
    Bins,
    HalfWidth,
    MaxCandidates,
    Iterations,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::Epsilon => "epsilon",
            SweepParam::N => "n",
            SweepParam::M => "m",
            SweepParam::D => "d",
            SweepParam::SStar => "s_star",
            SweepParam::CoefValue => "coef_value",
            SweepParam::NoiseStd => "noise_std",
            SweepParam::Rho => "rho",
            SweepParam::Tau => "tau",
            SweepParam::Bins => "bins",
            SweepParam::HalfWidth => "half_width",
            SweepParam::MaxCandidates => "max_candidates",
            SweepParam::Iterations => "iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub name: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub method: Method,
    pub replications: usize,
    pub seed: u64,
    pub data: DataSpec,
    pub protocol: ProtocolConfig,
    pub baseline: BaselineSpec,
    pub sweep: Option<Sweep>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::TwoSlr,
            replications: 30,
            seed: 0,
            data: DataSpec::default(),
            protocol: ProtocolConfig::default(),
            baseline: BaselineSpec::default(),
            sweep: None,
        }
    }
}

fn as_count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(Error::Config(format!("{what} must be a non-negative integer, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_value(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn from_toml_value(value: toml::Value) -> Result<Self> {
        let cfg: ExperimentConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::Config("replications must be >= 1".into()));
        }
        if let Some(sw) = &self.sweep {
            if sw.values.is_empty() {
                return Err(Error::Config("sweep values must be non-empty".into()));
            }
            for &v in &sw.values {
                self.with_sweep(sw.name, v)?;
            }
        } else {
            self.check_point()?;
        }
        Ok(())
    }

    fn check_point(&self) -> Result<()> {
        let mean_method = self.method == Method::SparseMean;
        let mean_data = self.data.generator == Generator::SparseMean;
        if mean_method != mean_data {
            return Err(Error::Config(
                "the sparse_mean method and the sparse_mean generator go together".into(),
            ));
        }
        self.protocol.validate()
    }

    /// This config with one sweep parameter set to `value`.
    pub fn with_sweep(&self, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
        let mut c = self.clone();
        match param {
            SweepParam::Epsilon => c.protocol.epsilon = Budget::new(value)?,
            SweepParam::N => c.data.n = as_count(value, "n")?,
            SweepParam::M => c.data.m = as_count(value, "m")?,
            SweepParam::D => c.data.d = as_count(value, "d")?,
            SweepParam::SStar => c.data.s_star = as_count(value, "s_star")?,
            SweepParam::CoefValue => c.data.coef_value = value,
            SweepParam::NoiseStd => c.data.noise_std = value,
            SweepParam::Rho => c.protocol.rho = RhoRule::Fixed(value),
            SweepParam::Tau => c.protocol.tau = TauRule::Fixed(value),
            SweepParam::Bins => c.protocol.tau = TauRule::Bins(as_count(value, "bins")?),
            SweepParam::HalfWidth => c.protocol.half_width = value,
            SweepParam::MaxCandidates => c.protocol.max_candidates = Some(as_count(value, "max_candidates")?),
            SweepParam::Iterations => c.protocol.sco.iterations = Some(as_count(value, "iterations")?),
        }
        c.sweep = None;
        c.check_point()?;
        Ok(c)
    }
}

/// Set a dotted key (`protocol.epsilon`, `data.n`, ...) in a parsed config.
/// The value is parsed as a TOML value when possible, else taken as a string.
pub fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {part} is not inside a table")))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    Err(Error::Config("empty override key".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub sweep_name: String,
    pub sweep_value: f64,
    pub rep: usize,
    pub l2_sq_error: f64,
    pub f1: f64,
    pub runtime_ms: f64,
    pub budget_max: f64,
    pub bits_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// `2PR/(P + R)`; 0 when nothing is selected or nothing is right.
pub fn f1_score(selected: &[usize], support: &[usize]) -> f64 {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let sup: BTreeSet<usize> = support.iter().copied().collect();
    let hit = sel.intersection(&sup).count() as f64;
    if sel.is_empty() || sup.is_empty() || hit == 0.0 {
        return 0.0;
    }
    let (p, r) = (hit / sel.len() as f64, hit / sup.len() as f64);
    2.0 * p * r / (p + r)
}

pub fn l2_sq_error(beta_hat: &[f64], beta_star: &[f64]) -> Result<f64> {
    if beta_hat.len() != beta_star.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            beta_hat.len(),
            beta_star.len()
        )));
    }
    Ok(beta_hat.iter().zip(beta_star).map(|(a, b)| (a - b).powi(2)).sum())
}

fn median(values: &mut [f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of the finite entries; NaN if none.
pub fn quantile(values: &mut [f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

struct Outcome {
    l2: f64,
    f1: f64,
    budget_max: f64,
    bits_total: u64,
}

fn from_protocol(beta: &[f64], selected: &[usize], tr: &ProtocolTranscript, truth: &GroundTruth) -> Result<Outcome> {
    Ok(Outcome {
        l2: l2_sq_error(beta, &truth.beta_star)?,
        f1: f1_score(selected, &truth.support),
        budget_max: tr.budget_max(),
        bits_total: tr.bits_total(),
    })
}

fn make_regression(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, GroundTruth)> {
    let syn = cfg.data.synthetic(seed);
    match cfg.data.generator {
        Generator::Independent => data::generate_independent(&syn),
        Generator::Correlated => data::generate_correlated(&syn, cfg.data.corr_dims),
        Generator::SparseMean => Err(Error::Config("regression methods need a regression generator".into())),
    }
}

/// Per-user cross-validated Lasso; medians over users of error and F1.
pub fn local_lasso(dataset: &Dataset, truth: &GroundTruth, spec: &BaselineSpec) -> Result<(f64, f64)> {
    let users = &dataset.shards[..spec.users.clamp(1, dataset.n())];
    let results = par::map(users, |sh| -> Result<(f64, f64)> {
        let (_, fit) = selectors::lasso_cv(&sh.x, &sh.y, spec.folds, spec.lambdas, &spec.solver)?;
        let support: Vec<usize> = (0..fit.coef.len()).filter(|&j| fit.coef[j] != 0.0).collect();
        Ok((l2_sq_error(&fit.coef, &truth.beta_star)?, f1_score(&support, &truth.support)))
    });
    let results: Vec<(f64, f64)> = results.into_iter().collect::<Result<_>>()?;
    let mut errs: Vec<f64> = results.iter().map(|r| r.0).collect();
    let mut f1s: Vec<f64> = results.iter().map(|r| r.1).collect();
    Ok((median(&mut errs), median(&mut f1s)))
}

fn run_point(cfg: &ExperimentConfig, data_seed: u64, protocol_seed: u64) -> Result<Outcome> {
    let mut protocol = cfg.protocol;
    protocol.seed = protocol_seed;
    match cfg.method {
        Method::TwoSlr => {
            let (ds, truth) = make_regression(cfg, data_seed)?;
            let (est, tr) = protocols::two_round_slr(&ds, &protocol)?;
            from_protocol(&est.beta, &est.selected, &tr, &truth)
        }
        Method::MSlr => {
            let (ds, truth) = make_regression(cfg, data_seed)?;
            let (est, tr) = protocols::multi_round_slr(&ds, &protocol)?;
            from_protocol(&est.beta, &est.selected, &tr, &truth)
        }
        Method::LocalLasso => {
            let (ds, truth) = make_regression(cfg, data_seed)?;
            let (l2, f1) = local_lasso(&ds, &truth, &cfg.baseline)?;
            Ok(Outcome {
                l2,
                f1,
                budget_max: 0.0,
                bits_total: 0,
            })
        }
        Method::SparseMean => {
            let (blocks, truth) = data::generate_sparse_mean(&cfg.data.synthetic(data_seed))?;
            let (est, tr) = protocols::sparse_mean(&blocks, &protocol)?;
            from_protocol(&est.beta, &est.selected, &tr, &truth)
        }
    }
}

/// Seeds of replication `rep` at `sweep_value`: (data, protocol).
pub fn replication_seeds(seed: u64, sweep_value: f64, rep: usize) -> (u64, u64) {
    let base = derive_seed(&[seed, sweep_value.to_bits(), rep as u64]);
    (derive_seed(&[base, 0]), derive_seed(&[base, 1]))
}

/// Every sweep value × replication, in that order. Failed replications
/// produce NaN metrics and carry the error message.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let (name, points): (String, Vec<(f64, ExperimentConfig)>) = match &cfg.sweep {
        Some(sw) => (
            sw.name.name().to_string(),
            sw.values
                .iter()
                .map(|&v| cfg.with_sweep(sw.name, v).map(|c| (v, c)))
                .collect::<Result<_>>()?,
        ),
        None => ("none".to_string(), vec![(0.0, cfg.clone())]),
    };
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.replications).map(move |r| (p, r)))
        .collect();
    Ok(par::map(&jobs, |&(p, rep)| {
        let (value, point) = &points[p];
        let (data_seed, protocol_seed) = replication_seeds(cfg.seed, *value, rep);
        let start = Instant::now();
        let outcome = run_point(point, data_seed, protocol_seed);
        let runtime_ms = start.elapsed().as_secs_f64() * 1e3;
        match outcome {
            Ok(o) => MetricsRecord {
                sweep_name: name.clone(),
                sweep_value: *value,
                rep,
                l2_sq_error: o.l2,
                f1: o.f1,
                runtime_ms,
                budget_max: o.budget_max,
                bits_total: o.bits_total,
                error: None,
            },
            Err(e) => MetricsRecord {
                sweep_name: name.clone(),
                sweep_value: *value,
                rep,
                l2_sq_error: f64::NAN,
                f1: f64::NAN,
                runtime_ms,
                budget_max: f64::NAN,
                bits_total: 0,
                error: Some(e.to_string()),
            },
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

/// CSV row layout: the record minus the error message.
#[derive(Serialize, Deserialize)]
struct CsvRow {
    sweep_name: String,
    sweep_value: f64,
    rep: usize,
    l2_sq_error: f64,
    f1: f64,
    runtime_ms: f64,
    budget_max: f64,
    bits_total: u64,
}

pub fn emit(records: &[MetricsRecord], format: Format, path: impl AsRef<Path>) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to write"));
    }
    let mut out = Vec::new();
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for r in records {
                w.serialize(CsvRow {
                    sweep_name: r.sweep_name.clone(),
                    sweep_value: r.sweep_value,
                    rep: r.rep,
                    l2_sq_error: r.l2_sq_error,
                    f1: r.f1,
                    runtime_ms: r.runtime_ms,
                    budget_max: r.budget_max,
                    bits_total: r.bits_total,
                })?;
            }
            w.flush()?;
        }
        Format::Json => {
            // JSON has no NaN; failed metrics become null.
            serde_json::to_writer_pretty(&mut out, records)?;
            out.push(b'\n');
        }
    }
    File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('[') {
        #[derive(Deserialize)]
        struct JsonRecord {
            sweep_name: String,
            sweep_value: f64,
            rep: usize,
            l2_sq_error: Option<f64>,
            f1: Option<f64>,
            runtime_ms: f64,
            budget_max: Option<f64>,
            bits_total: u64,
            error: Option<String>,
        }
        let rows: Vec<JsonRecord> = serde_json::from_str(&text)?;
        return Ok(rows
            .into_iter()
            .map(|r| MetricsRecord {
                sweep_name: r.sweep_name,
                sweep_value: r.sweep_value,
                rep: r.rep,
                l2_sq_error: r.l2_sq_error.unwrap_or(f64::NAN),
                f1: r.f1.unwrap_or(f64::NAN),
                runtime_ms: r.runtime_ms,
                budget_max: r.budget_max.unwrap_or(f64::NAN),
                bits_total: r.bits_total,
                error: r.error,
            })
            .collect());
    }
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    rd.deserialize::<CsvRow>()
        .map(|row| {
            let r = row?;
            Ok(MetricsRecord {
                sweep_name: r.sweep_name,
                sweep_value: r.sweep_value,
                rep: r.rep,
                l2_sq_error: r.l2_sq_error,
                f1: r.f1,
                runtime_ms: r.runtime_ms,
                budget_max: r.budget_max,
                bits_total: r.bits_total,
                error: None,
            })
        })
        .collect()
}

/// One line of the quantile table: 2.5 / 50 / 97.5 percentiles.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub sweep_name: String,
    pub sweep_value: f64,
    pub reps: usize,
    pub failures: usize,
    pub l2_q025: f64,
    pub l2_median: f64,
    pub l2_q975: f64,
    pub f1_mean: f64,
    pub f1_q025: f64,
    pub f1_median: f64,
    pub f1_q975: f64,
    pub runtime_ms_median: f64,
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, u64)> = Vec::new();
    for r in records {
        let k = (r.sweep_name.clone(), r.sweep_value.to_bits());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(name, bits)| {
            let group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.sweep_name == name && r.sweep_value.to_bits() == bits)
                .collect();
            let mut l2: Vec<f64> = group.iter().map(|r| r.l2_sq_error).collect();
            let mut f1: Vec<f64> = group.iter().map(|r| r.f1).collect();
            let mut rt: Vec<f64> = group.iter().map(|r| r.runtime_ms).collect();
            let finite_f1: Vec<f64> = f1.iter().copied().filter(|v| v.is_finite()).collect();
            SummaryRow {
                sweep_name: name,
                sweep_value: f64::from_bits(bits),
                reps: group.len(),
                failures: group.iter().filter(|r| !r.l2_sq_error.is_finite()).count(),
                l2_q025: quantile(&mut l2, 0.025),
                l2_median: quantile(&mut l2, 0.5),
                l2_q975: quantile(&mut l2, 0.975),
                f1_mean: if finite_f1.is_empty() {
                    f64::NAN
                } else {
                    finite_f1.iter().sum::<f64>() / finite_f1.len() as f64
                },
                f1_q025: quantile(&mut f1, 0.025),
                f1_median: quantile(&mut f1, 0.5),
                f1_q975: quantile(&mut f1, 0.975),
                runtime_ms_median: median(&mut rt),
            }
        })
        .collect()
}

pub fn write_summary(rows: &[SummaryRow], mut out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(&mut out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(value: f64, rep: usize, l2: f64, f1: f64) -> MetricsRecord {
        MetricsRecord {
            sweep_name: "epsilon".into(),
            sweep_value: value,
            rep,
            l2_sq_error: l2,
            f1,
            runtime_ms: 1.5,
            budget_max: 4.0,
            bits_total: 400,
            error: None,
        }
    }

    #[test]
    fn f1_examples() {
        let support: Vec<usize> = (1..=8).collect();
        assert_eq!(f1_score(&support, &support), 1.0);
        assert_eq!(f1_score(&[20, 21], &support), 0.0);
        assert_eq!(f1_score(&[], &support), 0.0);
        let sel: Vec<usize> = (1..=16).collect();
        assert!((f1_score(&sel, &support) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn l2_examples() {
        let star: Vec<f64> = (0..16).map(|j| if j < 8 { 0.2 } else { 0.0 }).collect();
        assert!((l2_sq_error(&[0.0; 16], &star).unwrap() - 0.32).abs() < 1e-12);
        assert_eq!(l2_sq_error(&star, &star).unwrap(), 0.0);
        assert_eq!(l2_sq_error(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(l2_sq_error(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn quantiles_interpolate() {
        let mut v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(quantile(&mut v, 0.5), 50.0);
        assert!((quantile(&mut v, 0.025) - 2.5).abs() < 1e-12);
        assert!((quantile(&mut v, 0.975) - 97.5).abs() < 1e-12);
        let mut bad = vec![f64::NAN, 3.0, 1.0];
        assert_eq!(quantile(&mut bad, 0.5), 2.0);
        assert!(quantile(&mut [f64::NAN], 0.5).is_nan());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig {
            sweep: Some(Sweep {
                name: SweepParam::Epsilon,
                values: vec![1.0, 2.0, 4.0, 8.0],
            }),
            ..ExperimentConfig::default()
        };
        cfg.protocol.max_candidates = Some(8);
        cfg.protocol.tau = TauRule::Bins(4);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn sparse_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"local_lasso\"\nreplications = 3\n[data]\nd = 64\n[protocol]\nepsilon = 2.0\ntau = { bins = 8 }\n",
        )
        .unwrap();
        assert_eq!(cfg.method, Method::LocalLasso);
        assert_eq!(cfg.data.d, 64);
        assert_eq!(cfg.data.n, 400);
        assert_eq!(cfg.protocol.epsilon.epsilon(), 2.0);
        assert_eq!(cfg.protocol.tau, TauRule::Bins(8));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ExperimentConfig::from_toml_str("replications = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\nname = \"epsilon\"\nvalues = []").is_err());
        assert!(ExperimentConfig::from_toml_str("[sweep]\nname = \"n\"\nvalues = [1.5]").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"sparse_mean\"").is_err());
        assert!(ExperimentConfig::from_toml_str("method = \"nope\"").is_err());
        assert!(ExperimentConfig::from_toml_str("[protocol]\nepsilon = -1.0").is_err());
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let mut v: toml::Value = toml::from_str("seed = 1\n[data]\nn = 10").unwrap();
        apply_override(&mut v, "data.n", "50").unwrap();
        apply_override(&mut v, "protocol.epsilon", "2.5").unwrap();
        apply_override(&mut v, "method", "m_slr").unwrap();
        apply_override(&mut v, "protocol.tau", "{ bins = 4 }").unwrap();
        let cfg = ExperimentConfig::from_toml_value(v).unwrap();
        assert_eq!(cfg.data.n, 50);
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.method, Method::MSlr);
        assert_eq!(cfg.protocol.epsilon.epsilon(), 2.5);
        assert_eq!(cfg.protocol.tau, TauRule::Bins(4));
        let mut v: toml::Value = toml::from_str("seed = 1").unwrap();
        assert!(apply_override(&mut v, "seed.x", "1").is_err());
    }

    #[test]
    fn sweep_applies_each_parameter() {
        let base = ExperimentConfig::default();
        assert_eq!(base.with_sweep(SweepParam::N, 200.0).unwrap().data.n, 200);
        assert_eq!(base.with_sweep(SweepParam::Bins, 8.0).unwrap().protocol.tau, TauRule::Bins(8));
        assert_eq!(base.with_sweep(SweepParam::Rho, 0.1).unwrap().protocol.rho, RhoRule::Fixed(0.1));
        assert_eq!(base.with_sweep(SweepParam::Iterations, 5.0).unwrap().protocol.sco.iterations, Some(5));
        assert!(base.with_sweep(SweepParam::Epsilon, 0.0).is_err());
        assert!(base.with_sweep(SweepParam::M, -1.0).is_err());
    }

    #[test]
    fn seeds_differ_across_replications_and_values() {
        let a = replication_seeds(1, 4.0, 0);
        assert_ne!(a, replication_seeds(1, 4.0, 1));
        assert_ne!(a, replication_seeds(1, 2.0, 0));
        assert_ne!(a.0, a.1);
        assert_eq!(a, replication_seeds(1, 4.0, 0));
    }

    #[test]
    fn emit_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let records: Vec<MetricsRecord> = (0..120).map(|i| record((i / 30) as f64, i % 30, 0.1 * i as f64 + 1e-17, 0.5)).collect();
        emit(&records, Format::Csv, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 121);
        assert_eq!(
            text.lines().next().unwrap(),
            "sweep_name,sweep_value,rep,l2_sq_error,f1,runtime_ms,budget_max,bits_total"
        );
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn emit_json_round_trip_with_failures() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let mut records = vec![record(1.0, 0, 0.25, 1.0), record(1.0, 1, f64::NAN, f64::NAN)];
        records[1].budget_max = f64::NAN;
        records[1].error = Some("boom".into());
        emit(&records, Format::Json, &path).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back[0], records[0]);
        assert!(back[1].l2_sq_error.is_nan());
        assert_eq!(back[1].error.as_deref(), Some("boom"));
    }

    #[test]
    fn emit_rejects_empty_and_bad_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        assert!(emit(&[], Format::Csv, &path).is_err());
        assert!(!path.exists());
        assert!(emit(&[record(1.0, 0, 0.1, 0.1)], Format::Csv, dir.path().join("no/such/dir.csv")).is_err());
    }

    #[test]
    fn summary_groups_by_sweep_value() {
        let mut records: Vec<MetricsRecord> = (0..40).map(|i| record((i / 20) as f64, i % 20, (i % 20) as f64, 0.5)).collect();
        records[3].l2_sq_error = f64::NAN;
        let rows = summarize(&records);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].reps, 20);
        assert_eq!(rows[0].failures, 1);
        assert_eq!(rows[1].failures, 0);
        assert_eq!(rows[1].l2_median, 9.5);
        assert_eq!(rows[1].f1_mean, 0.5);
        let mut buf = Vec::new();
        write_summary(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    #[test]
    fn small_experiment_is_deterministic() {
        let cfg = ExperimentConfig::from_toml_str(
            "replications = 2\nseed = 5\n[data]\nn = 40\nm = 30\nd = 16\ns_star = 2\ncoef_value = 0.5\n\
             [protocol]\nmax_candidates = 2\n[sweep]\nname = \"epsilon\"\nvalues = [1.0, 4.0]\n",
        )
        .unwrap();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        let strip = |r: &[MetricsRecord]| -> Vec<(f64, usize, u64, u64)> {
            r.iter().map(|m| (m.sweep_value, m.rep, m.l2_sq_error.to_bits(), m.bits_total)).collect()
        };
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.iter().map(|r| (r.sweep_value, r.rep)).collect::<Vec<_>>(), vec![(1.0, 0), (1.0, 1), (4.0, 0), (4.0, 1)]);
        assert!(a.iter().all(|r| r.error.is_none() && r.budget_max <= r.sweep_value + 1e-9));
    }

    #[test]
    fn failing_replications_are_recorded() {
        // 8 users leave 2 for the mean group: too few for 4 candidates.
        let cfg = ExperimentConfig::from_toml_str(
            "replications = 2\n[data]\nn = 8\nm = 30\nd = 16\ns_star = 2\ncoef_value = 0.5\n[protocol]\nmax_candidates = 4\nrho = { fixed = 0.01 }\n",
        )
        .unwrap();
        let recs = run_experiment(&cfg).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            if r.error.is_some() {
                assert!(r.l2_sq_error.is_nan());
            }
        }
    }

    #[test]
    fn baseline_and_sparse_mean_methods_run() {
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"local_lasso\"\nreplications = 1\n[data]\nn = 8\nm = 40\nd = 16\ns_star = 2\ncoef_value = 0.8\n[baseline]\nusers = 4\n",
        )
        .unwrap();
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.l2_sq_error < 2.0 * 0.64);
        assert_eq!(r.bits_total, 0);
        let cfg = ExperimentConfig::from_toml_str(
            "method = \"sparse_mean\"\nreplications = 1\n[data]\ngenerator = \"sparse_mean\"\nn = 64\nm = 20\nd = 16\ns_star = 2\ncoef_value = 0.5\n[protocol]\nmax_candidates = 2\n",
        )
        .unwrap();
        let r = &run_experiment(&cfg).unwrap()[0];
        assert!(r.error.is_none(), "{:?}", r.error);
        assert!(r.f1 >= 0.0 && r.f1 <= 1.0);
    }
}
