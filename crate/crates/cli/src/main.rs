use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use fairtradex_core::analysis::equilibrium::{closed_form_single_mm, Grids, McGame};
use fairtradex_core::analysis::{cost_table, cost_table_csv, ImpactTable, STANDARD_SLIPPAGE};
use fairtradex_core::auction::{self, AuctionBook, ClearingClaim};
use fairtradex_core::model::Price;
use fairtradex_core::protocol::SettlementReport;
use fairtradex_core::scenario::{self, ScenarioConfig, ScenarioError};

/// Output directory override; takes precedence over the config but not `--out`.
const OUT_DIR_ENV: &str = "FAIRTRADEX_OUT_DIR";

#[derive(Parser)]
#[command(name = "fairtradex", version, about = "Sealed-bid batch exchange simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario config and write trace, settlements and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the config seed. Repeat to run several seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Seeds run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Clear an auction book and print the result.
    Clear {
        #[arg(long)]
        book: PathBuf,
        /// Check a claimed clearing price with the local verifier instead.
        #[arg(long)]
        verify: Option<u64>,
    },
    /// Print the execution-cost comparison table as CSV.
    Costs {
        /// Use this impact fraction for every notional.
        #[arg(long)]
        impact: Option<f64>,
        #[arg(long, default_value_t = STANDARD_SLIPPAGE)]
        slippage: f64,
    },
    /// Re-validate a settlements file written by `run`.
    Check {
        #[arg(long)]
        report: PathBuf,
    },
    /// Run the best-response checks and print the deviation report as CSV.
    Equilibrium {
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Number of competing market makers; 1 selects the closed form.
        #[arg(long, default_value_t = 2)]
        market_makers: usize,
    },
}

enum Failure {
    Config(anyhow::Error),
    Invariant(anyhow::Error),
    Rejected(String),
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        match e.exit_code() {
            3 => Failure::Invariant(e.into()),
            _ => Failure::Config(e.into()),
        }
    }
}

fn config_err(e: anyhow::Error) -> Failure {
    Failure::Config(e)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Run { config, out, seeds, jobs } => run(&config, out, seeds, jobs),
        Command::Clear { book, verify } => clear(&book, verify),
        Command::Costs { impact, slippage } => {
            let table = impact.map_or_else(ImpactTable::standard, ImpactTable::constant);
            print!("{}", cost_table_csv(&cost_table(&table, slippage)));
            Ok(())
        }
        Command::Check { report } => check(&report),
        Command::Equilibrium { paths, seed, market_makers } => {
            equilibrium(paths, seed, market_makers);
            Ok(())
        }
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Rejected(msg)) => {
            println!("{msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(e)) => {
            eprintln!("invariant violation: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn run(config: &Path, out: Option<PathBuf>, seeds: Vec<u64>, jobs: usize) -> Result<(), Failure> {
    let cfg = ScenarioConfig::load(config)?;
    let base = out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.outputs.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let runs: Vec<(ScenarioConfig, PathBuf)> = if seeds.is_empty() {
        vec![(cfg.clone(), base)]
    } else if seeds.len() == 1 {
        vec![(ScenarioConfig { seed: seeds[0], ..cfg.clone() }, base)]
    } else {
        seeds.iter().map(|&s| (ScenarioConfig { seed: s, ..cfg.clone() }, base.join(format!("seed-{s}")))).collect()
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Result<String, ScenarioError>> = Vec::with_capacity(runs.len());
    for chunk in runs.chunks(jobs) {
        let batch: Vec<_> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|(c, dir)| s.spawn(move || run_one(c, dir))).collect();
            handles.into_iter().map(|h| h.join().expect("scenario thread panicked")).collect()
        });
        results.extend(batch);
    }
    for r in results {
        println!("{}", r?);
    }
    Ok(())
}

fn run_one(cfg: &ScenarioConfig, dir: &Path) -> Result<String, ScenarioError> {
    let out = scenario::run(cfg)?;
    let paths = out.write(dir, &cfg.outputs)?;
    let traded = out.settlements.iter().filter(|s| s.volume_b > 0).count();
    let mut line = format!(
        "seed {}: {} rounds settled ({} with trades) by height {}; wrote {}",
        cfg.seed,
        out.settlements.len(),
        traded,
        out.final_height,
        paths[0].parent().unwrap_or(dir).display()
    );
    if out.stalled {
        line.push_str("; stalled: a round did not settle within the liveness budget");
    }
    Ok(line)
}

fn clear(path: &Path, verify: Option<u64>) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(config_err)?;
    let book: AuctionBook = serde_json::from_str(&text).context("parsing book").map_err(config_err)?;
    book.validate().context("invalid book").map_err(config_err)?;
    let (book, removed) = book.filter_by_width();
    if !removed.is_empty() {
        let ids: Vec<String> = removed.iter().map(|(_, o)| o.id.0.to_string()).collect();
        println!("width-filtered orders: {}", ids.join(", "));
    }
    if let Some(cp) = verify {
        if cp == 0 {
            return Err(Failure::Rejected("invalid: zero price".into()));
        }
        let ev = book.evaluate(cp).context("evaluating claim").map_err(config_err)?;
        let claim = ClearingClaim {
            cp: Price(cp),
            volume_b: u64::try_from(ev.volume_b).context("volume overflow").map_err(config_err)?,
            imbalance_a: ev.imbalance_a,
        };
        return if auction::verify_clearing_price(&book, &claim) {
            println!("valid");
            Ok(())
        } else {
            Err(Failure::Rejected("invalid".into()))
        };
    }
    match auction::find_clearing_price(&book).context("clearing").map_err(config_err)? {
        None => println!("no crossable liquidity"),
        Some(claim) => {
            let res = auction::settle(&book, &claim).context("settling").map_err(config_err)?;
            println!("{}", serde_json::to_string_pretty(&res).expect("result serializes"));
        }
    }
    Ok(())
}

fn check(path: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(config_err)?;
    let reports: Vec<SettlementReport> = serde_json::from_str(&text).context("parsing settlements").map_err(config_err)?;
    for r in &reports {
        r.check().map_err(|e| Failure::Invariant(anyhow::anyhow!("round {}: {e}", r.round)))?;
    }
    println!("{} settlement reports ok", reports.len());
    Ok(())
}

fn equilibrium(paths: usize, seed: u64, market_makers: usize) {
    let f_mcf = 1.21;
    let grids = Grids::standard(f_mcf);
    let report = if market_makers <= 1 {
        closed_form_single_mm(1_000_000.0, 10_000.0, f_mcf, 1.0, &grids)
    } else {
        McGame {
            y: 10_000,
            f_mcf,
            delta: 1.0,
            market_makers,
            profile_width: 1.0,
            clients: 4,
            min_notional: 100_000,
            max_notional: 1_000_000,
            paths,
            seed,
        }
        .best_response(&grids)
    };
    print!("{}", report.to_csv());
    eprintln!("max gain {:.6}; equilibrium {}", report.max_gain, report.equilibrium);
}
