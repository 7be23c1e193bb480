use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use uldp_core::data::{self, CsvOptions};
use uldp_core::harness::{self, ExperimentConfig, Format, Generator};
use uldp_core::protocols::{self, ProtocolConfig};

#[derive(Parser)]
#[command(name = "uldp", version, about = "User-level locally private sparse regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum FitMethod {
    TwoSlr,
    MSlr,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a TOML config and write one record per replication.
    Run {
        /// Config file; omitted means all defaults.
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long)]
        method: Option<String>,
        /// Override any config key, e.g. `--set protocol.epsilon=2` or
        /// `--set data.n=800`. Repeatable; applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: OutFormat,
        /// Also print the quantile table to stdout.
        #[arg(long)]
        summary: bool,
    },
    /// Print the effective config (defaults plus file plus overrides) as TOML.
    ShowConfig {
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Write a synthetic dataset as CSV (columns user, y, x1..xd).
    GenData {
        #[arg(long, value_enum, default_value = "independent")]
        generator: GenKind,
        #[arg(long, default_value_t = 400)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        m: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        s_star: usize,
        #[arg(long, default_value_t = 0.2)]
        coef_value: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_std: f64,
        #[arg(long, default_value_t = 50)]
        corr_dims: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        /// Where to write the true coefficients as JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Quantile table (2.5 / 50 / 97.5 %) of a records file, per sweep value.
    Summarize {
        records: PathBuf,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Fit a CSV dataset privately and print the estimate as JSON.
    Fit {
        data: PathBuf,
        #[arg(long)]
        target: String,
        #[arg(long, conflicts_with = "group_size")]
        user_column: Option<String>,
        #[arg(long)]
        group_size: Option<usize>,
        #[arg(long, value_enum, default_value = "two-slr")]
        method: FitMethod,
        /// TOML holding a `[protocol]` table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenKind {
    Independent,
    Correlated,
}

fn load_value(config: Option<&PathBuf>, overrides: &[String]) -> Result<toml::Value> {
    let mut value = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    for o in overrides {
        let Some((key, raw)) = o.split_once('=') else {
            bail!("override `{o}` is not KEY=VALUE");
        };
        harness::apply_override(&mut value, key.trim(), raw.trim())?;
    }
    Ok(value)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            replications,
            method,
            mut overrides,
            out,
            format,
            summary,
        } => {
            if let Some(s) = seed {
                overrides.push(format!("seed={s}"));
            }
            if let Some(r) = replications {
                overrides.push(format!("replications={r}"));
            }
            if let Some(m) = method {
                overrides.push(format!("method=\"{m}\""));
            }
            let cfg = ExperimentConfig::from_toml_value(load_value(config.as_ref(), &overrides)?)?;
            let records = harness::run_experiment(&cfg)?;
            for r in &records {
                if let Some(e) = &r.error {
                    eprintln!("{} = {} rep {}: {e}", r.sweep_name, r.sweep_value, r.rep);
                }
            }
            let fmt = match format {
                OutFormat::Csv => Format::Csv,
                OutFormat::Json => Format::Json,
            };
            harness::emit(&records, fmt, &out).with_context(|| format!("writing {}", out.display()))?;
            if summary {
                harness::write_summary(&harness::summarize(&records), io::stdout().lock())?;
            }
        }
        Command::ShowConfig { config, overrides } => {
            let cfg = ExperimentConfig::from_toml_value(load_value(config.as_ref(), &overrides)?)?;
            print!("{}", cfg.to_toml()?);
        }
        Command::GenData {
            generator,
            n,
            m,
            d,
            s_star,
            coef_value,
            noise_std,
            corr_dims,
            seed,
            out,
            truth,
        } => {
            let spec = harness::DataSpec {
                generator: match generator {
                    GenKind::Independent => Generator::Independent,
                    GenKind::Correlated => Generator::Correlated,
                },
                n,
                m,
                d,
                s_star,
                coef_value,
                noise_std,
                corr_dims,
            };
            let syn = spec.synthetic(seed);
            let (ds, gt) = match generator {
                GenKind::Independent => data::generate_independent(&syn)?,
                GenKind::Correlated => data::generate_correlated(&syn, corr_dims)?,
            };
            data::write_csv(&ds, &out)?;
            if let Some(path) = truth {
                let support: Vec<usize> = gt.support.iter().map(|j| j + 1).collect();
                let body = serde_json::json!({ "beta_star": gt.beta_star, "support": support });
                std::fs::write(&path, serde_json::to_string_pretty(&body)? + "\n")?;
            }
        }
        Command::Summarize { records, out } => {
            let recs = harness::read_records(&records)?;
            if recs.is_empty() {
                bail!("{} holds no records", records.display());
            }
            let rows = harness::summarize(&recs);
            match out {
                Some(path) => harness::write_summary(&rows, std::fs::File::create(path)?)?,
                None => harness::write_summary(&rows, io::stdout().lock())?,
            }
        }
        Command::Fit {
            data: path,
            target,
            user_column,
            group_size,
            method,
            config,
            mut overrides,
            epsilon,
            seed,
        } => {
            if let Some(e) = epsilon {
                overrides.push(format!("protocol.epsilon={e}"));
            }
            overrides.push(format!("protocol.seed={seed}"));
            let value = load_value(config.as_ref(), &overrides)?;
            let protocol: ProtocolConfig = match value.get("protocol") {
                Some(p) => p.clone().try_into()?,
                None => ProtocolConfig::default(),
            };
            protocol.validate()?;
            let opts = CsvOptions::new(target, user_column, group_size, seed)?;
            let ds = data::load_csv(&path, &opts).with_context(|| format!("loading {}", path.display()))?;
            let (est, tr) = match method {
                FitMethod::TwoSlr => protocols::two_round_slr(&ds, &protocol)?,
                FitMethod::MSlr => protocols::multi_round_slr(&ds, &protocol)?,
            };
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{}", est.to_json(&tr)?)?;
        }
    }
    Ok(())
}
