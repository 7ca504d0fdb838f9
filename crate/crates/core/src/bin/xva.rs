use clap::{Parser, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};
use xva_core::report::ValuationReport;
use xva_core::scenario::{Mode, Scenario};
use xva_core::verify::{render, run_all, VerifyConfig};
use xva_core::XvaError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
    Both,
}

/// Price a bilateral contract with XVA under differential funding rates.
#[derive(Debug, Parser)]
#[command(name = "xva", version)]
struct Args {
    /// Scenario file (JSON).
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// linear, nonlinear, incomplete or verify; overrides the scenario.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the report files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Run the acceptance matrix and print the pass/fail table.
    #[arg(long)]
    verify: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, env = "XVA_THREADS")]
    threads: Option<usize>,
}

fn io_error(path: &Path, e: std::io::Error) -> XvaError {
    XvaError::validation(format!("{}: {e}", path.display()))
}

fn write_reports(out: &Path, format: Format, report: &ValuationReport) -> Result<(), XvaError> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    if matches!(format, Format::Json | Format::Both) {
        let path = out.join("report.json");
        std::fs::write(&path, report.to_json() + "\n").map_err(|e| io_error(&path, e))?;
    }
    if matches!(format, Format::Csv | Format::Both) {
        let path = out.join("report.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| io_error(&path, e))?;
    }
    Ok(())
}

fn unix_seconds(t: SystemTime) -> f64 {
    t.duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

fn price(args: &Args) -> Result<bool, XvaError> {
    let scenario = match &args.scenario {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            Some(Scenario::from_json(&text)?)
        }
        None => None,
    };
    let mode = args.mode.or(scenario.as_ref().map(|s| s.run.mode));
    if args.verify || mode == Some(Mode::Verify) {
        let mut cfg = VerifyConfig::default();
        cfg.paths = args.paths.unwrap_or(cfg.paths);
        cfg.steps = args.steps.unwrap_or(cfg.steps);
        cfg.seed = args.seed.unwrap_or(cfg.seed);
        let outcomes = run_all(&cfg);
        print!("{}", render(&outcomes));
        return Ok(outcomes.iter().all(|o| o.passed()));
    }
    let mut scenario = scenario.ok_or_else(|| XvaError::validation("--scenario is required outside verify mode"))?;
    if let Some(m) = mode {
        scenario.run.mode = m;
    }
    scenario.run.paths = args.paths.unwrap_or(scenario.run.paths);
    scenario.run.steps = args.steps.unwrap_or(scenario.run.steps);
    scenario.run.seed = args.seed.unwrap_or(scenario.run.seed);

    let started = SystemTime::now();
    let clock = Instant::now();
    let report = scenario.price()?;
    write_reports(&args.out, args.format, &report)?;
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "scenario": args.scenario.as_ref().map(|p| p.display().to_string()),
        "threads": rayon::current_num_threads(),
        "started_unix": unix_seconds(started),
        "finished_unix": unix_seconds(SystemTime::now()),
        "elapsed_seconds": clock.elapsed().as_secs_f64(),
    });
    let path = args.out.join("run_meta.json");
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n")
        .map_err(|e| io_error(&path, e))?;
    println!("price {:.6} ± {:.6} (clean {:.6})", report.price, report.std_error, report.clean);
    Ok(true)
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match price(&args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2))
        }
    }
}
