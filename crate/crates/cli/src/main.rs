//! `uvm`: run single prices, N×P sweeps, and benchmark comparisons from a
//! config file.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure.

mod config;
mod output;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use uvm_core::bench::{
    bs_price, geo_outperformer_benchmark, geo_reduce, numeraire_reduce, uvm_tree_1d, BenchError,
    DividendRule, OptionKind, Payoff1d, Reduced1D,
};
use uvm_core::{price, EngineError, PayoffSpec, PriceReport};

use config::{ConfigError, ExperimentConfig, Format};
use output::{join, summary_table, write_records, Record, TimingRecord};

#[derive(Parser, Debug)]
#[command(name = "uvm", version, about = "Worst-case option prices under uncertain volatility")]
struct Cli {
    #[command(subcommand)]
    mode: Mode,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// TOML experiment file with dotted keys (model.*, payoff.*, algo.*, bench.*, output.*).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. --set algo.steps=[16,32]. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["csv", "json"])]
    format: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the per-point solves.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Mode {
    /// Price the first (N, P) cell of the config.
    Price(Common),
    /// Price every cell of the N-list × P-list grid.
    Sweep(Common),
    /// Price each cell and compare with the applicable benchmark.
    Bench(Common),
}

enum Failure {
    Config(String),
    Numerical(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<EngineError> for Failure {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Model(_) | EngineError::Payoff(_) | EngineError::Algo(_) => Failure::Config(e.to_string()),
            other => Failure::Numerical(other.to_string()),
        }
    }
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Engine(inner) => inner.into(),
            other => Failure::Config(other.to_string()),
        }
    }
}

fn payoff_name(p: &PayoffSpec) -> &'static str {
    match p {
        PayoffSpec::Outperformer => "outperformer",
        PayoffSpec::OutperformerSpread { .. } => "outperformer_spread",
        PayoffSpec::GeoCallSpread { .. } => "geo_call_spread",
        PayoffSpec::GeoOutperformer => "geo_outperformer",
        PayoffSpec::CallSharpe { .. } => "call_sharpe",
        PayoffSpec::Call { .. } => "call",
    }
}

/// Benchmark value and method name, if one applies to this configuration.
fn benchmark(cfg: &ExperimentConfig) -> Result<(f64, String), Failure> {
    let m = &cfg.model;
    let lattice = |r: Reduced1D| -> Result<f64, Failure> { Ok(uvm_tree_1d(&r, cfg.bench_steps)?) };
    match &cfg.payoff {
        PayoffSpec::Outperformer | PayoffSpec::OutperformerSpread { .. } => {
            let r = numeraire_reduce(m, &cfg.payoff)?;
            Ok((lattice(r)?, format!("numeraire_lattice_{}", cfg.bench_steps)))
        }
        PayoffSpec::GeoCallSpread { k1, k2 } => {
            let r = geo_reduce(m, *k1, *k2)?;
            Ok((lattice(r)?, format!("geometric_lattice_{}", cfg.bench_steps)))
        }
        PayoffSpec::Call { strike } => {
            if m.sigma_min == m.sigma_max {
                let v = bs_price(m.spot[0], *strike, m.rate, m.dividends[0], m.sigma_max[0], m.maturity, OptionKind::Call);
                Ok((v, "black_scholes".into()))
            } else {
                let r = Reduced1D {
                    y0: m.spot[0],
                    vol_min: m.sigma_min[0],
                    vol_max: m.sigma_max[0],
                    dividend: DividendRule::Constant { eta: m.dividends[0] },
                    payoff: Payoff1d::Call { strike: *strike },
                    scale: 1.0,
                    rate: m.rate,
                    maturity: m.maturity,
                };
                Ok((lattice(r)?, format!("uvm_lattice_{}", cfg.bench_steps)))
            }
        }
        PayoffSpec::GeoOutperformer => {
            let algo = cfg.algo(cfg.bench_engine_steps, cfg.bench_engine_points);
            let r = geo_outperformer_benchmark(m, &algo)?;
            Ok((
                r.value,
                format!("extremal_correlation_engine_{}x{}", cfg.bench_engine_steps, cfg.bench_engine_points),
            ))
        }
        PayoffSpec::CallSharpe { .. } => Err(Failure::Config(
            "payoff.kind: no benchmark is available for call_sharpe".into(),
        )),
    }
}

fn record(cfg: &ExperimentConfig, mode: &str, hash: &str, n: usize, p: usize, r: &PriceReport) -> Record {
    Record {
        config_hash: hash.to_string(),
        mode: mode.to_string(),
        payoff: payoff_name(&cfg.payoff).to_string(),
        dim: cfg.model.dim(),
        steps: n,
        points: p,
        branches: cfg.branches,
        seed: cfg.seed,
        value: r.value,
        argmax_sigma: join(&r.argmax.sigma),
        argmax_rho: join(&r.argmax.rho),
        benchmark: None,
        benchmark_method: None,
        abs_gap: None,
        rel_gap: None,
    }
}

fn timings_path(out: &Path, format: Format) -> PathBuf {
    let ext = match format {
        Format::Csv => "csv",
        Format::Json => "json",
    };
    let mut name = out.as_os_str().to_owned();
    name.push(format!(".timings.{ext}"));
    PathBuf::from(name)
}

fn run(mode: &str, common: Common) -> Result<(), Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let file = config::parse_flat(&text)?;
    let mut overrides = common
        .overrides
        .iter()
        .map(|s| config::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("algo.seed".into(), toml::Value::Integer(seed as i64)));
    }
    if let Some(f) = &common.format {
        overrides.push(("output.format".into(), toml::Value::String(f.clone())));
    }
    if let Some(o) = &common.out {
        overrides.push(("output.path".into(), toml::Value::String(o.display().to_string())));
    }
    let cfg = config::resolve(file, overrides)?;

    if let Some(j) = common.jobs {
        if j == 0 {
            return Err(Failure::Config("--jobs: must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::Config(format!("--jobs: {e}")))?;
    }

    let cells: Vec<(usize, usize)> = if mode == "price" {
        vec![(cfg.steps[0], cfg.points[0])]
    } else {
        cfg.steps
            .iter()
            .flat_map(|&n| cfg.points.iter().map(move |&p| (n, p)))
            .collect()
    };
    let hash = cfg.hash();
    let bench = if mode == "bench" { Some(benchmark(&cfg)?) } else { None };

    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut totals = Vec::new();
    for &(n, p) in &cells {
        let report = price(&cfg.model, &cfg.payoff, &cfg.algo(n, p))?;
        let mut row = record(&cfg, mode, &hash, n, p, &report);
        if let Some((b, method)) = &bench {
            row.benchmark = Some(*b);
            row.benchmark_method = Some(method.clone());
            row.abs_gap = Some(report.value - b);
            row.rel_gap = Some((report.value - b) / b);
        }
        for s in &report.steps {
            timings.push(TimingRecord {
                config_hash: hash.clone(),
                steps: n,
                points: p,
                n: Some(s.n),
                seconds: s.seconds,
            });
        }
        timings.push(TimingRecord {
            config_hash: hash.clone(),
            steps: n,
            points: p,
            n: None,
            seconds: report.total_seconds,
        });
        totals.push(report.total_seconds);
        rows.push(row);
    }

    let io_err = |e: Box<dyn std::error::Error>| Failure::Io(e.to_string());
    match &cfg.output_path {
        Some(path) => {
            let path = PathBuf::from(path);
            let f = fs::File::create(&path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
            write_records(io::BufWriter::new(f), &rows, cfg.format).map_err(io_err)?;
            let tp = timings_path(&path, cfg.format);
            let f = fs::File::create(&tp).map_err(|e| Failure::Io(format!("{}: {e}", tp.display())))?;
            write_records(io::BufWriter::new(f), &timings, cfg.format).map_err(io_err)?;
            print!("{}", summary_table(&rows, &totals));
        }
        None => {
            let stdout = io::stdout();
            write_records(stdout.lock(), &rows, cfg.format).map_err(io_err)?;
            eprint!("{}", summary_table(&rows, &totals));
        }
    }
    io::stdout().flush().map_err(|e| Failure::Io(e.to_string()))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, common) = match cli.mode {
        Mode::Price(c) => ("price", c),
        Mode::Sweep(c) => ("sweep", c),
        Mode::Bench(c) => ("bench", c),
    };
    match run(mode, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Io(m)) => {
            eprintln!("i/o error: {m}");
            ExitCode::from(1)
        }
    }
}
