use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lqs_core::config::{load_config, Mode, ProblemConfig};
use lqs_core::datagen::dump_paths_csv;
use lqs_core::eta_io::{export_eta, import_eta};
use lqs_core::runner::{execute, Outcome, RunOptions};
use lqs_core::{Error, Result};

/// Policy iteration for linear-quadratic control with multiplicative noise.
#[derive(Parser, Debug)]
#[command(name = "lqs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Model-based policy iteration on the Riccati equation.
    ModelPi(Common),
    /// Data-driven iteration on exact (moment ODE) expectations.
    AdpExact(DataArgs),
    /// Data-driven iteration on Monte Carlo expectations.
    AdpMc(DataArgs),
    /// Check the rank condition of the collected data.
    Rank(RankArgs),
    /// Data-driven iteration on an externally supplied eta bundle.
    ImportEta(ImportArgs),
}

#[derive(Args, Debug)]
struct Common {
    /// Problem description (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Report path; the trace goes next to it as `<stem>.trace.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[command(flatten)]
    common: Common,
    /// Overrides `rollout.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Write every simulated substep as CSV (Monte Carlo only).
    #[arg(long, value_name = "PATH")]
    dump_paths: Option<PathBuf>,
    /// Write the eta data matrices as a CSV bundle.
    #[arg(long, value_name = "PATH")]
    export_eta: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Check an eta bundle instead of generating data.
    #[arg(long, value_name = "PATH")]
    eta: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ImportArgs {
    #[command(flatten)]
    common: Common,
    /// Eta CSV bundle.
    #[arg(long, value_name = "PATH")]
    eta: PathBuf,
}

fn trace_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}.trace.csv"))
}

fn write_outputs(outcome: &Outcome, out: Option<&Path>) -> Result<()> {
    if let Some(out) = out {
        std::fs::write(out, outcome.report.to_json()?)?;
        std::fs::write(trace_path(out), outcome.report.trace_csv())?;
    }
    Ok(())
}

fn read_eta(path: &Path) -> Result<lqs_core::datagen::DataMatrices> {
    import_eta(BufReader::new(File::open(path)?))
}

fn run_mode(
    mode: Mode,
    cfg: &ProblemConfig,
    opts: RunOptions,
    common: &Common,
    dump_paths: Option<&Path>,
    export: Option<&Path>,
) -> Result<i32> {
    if dump_paths.is_some() && mode != Mode::AdpMc {
        return Err(Error::Config(vec![
            "--dump-paths: only available for adp-mc".into(),
        ]));
    }
    let outcome = execute(mode, cfg, &opts)?;
    if let (Some(path), Some(data)) = (export, &outcome.data) {
        export_eta(data, BufWriter::new(File::create(path)?))?;
    }
    if let Some(path) = dump_paths {
        let mut ro = cfg.require_rollout()?.clone();
        if let Some(seed) = opts.seed {
            ro.seed = seed;
        }
        dump_paths_csv(
            cfg.require_system()?,
            &cfg.k0,
            &cfg.exploration,
            &ro,
            BufWriter::new(File::create(path)?),
        )?;
    }
    write_outputs(&outcome, common.out.as_deref())?;
    println!("{}", outcome.report.summary());
    Ok(outcome.exit_code())
}

fn run_data_mode(mode: Mode, a: DataArgs) -> Result<i32> {
    let cfg = load_config(&a.common.config)?;
    let opts = RunOptions {
        seed: a.seed,
        imported: None,
    };
    run_mode(
        mode,
        &cfg,
        opts,
        &a.common,
        a.dump_paths.as_deref(),
        a.export_eta.as_deref(),
    )
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::ModelPi(c) => {
            let cfg = load_config(&c.config)?;
            run_mode(Mode::ModelPi, &cfg, RunOptions::default(), &c, None, None)
        }
        Command::AdpExact(a) => run_data_mode(Mode::AdpExact, a),
        Command::AdpMc(a) => run_data_mode(Mode::AdpMc, a),
        Command::Rank(r) => {
            let cfg = load_config(&r.common.config)?;
            let imported = r.eta.as_deref().map(read_eta).transpose()?;
            let opts = RunOptions {
                seed: r.seed,
                imported,
            };
            run_mode(Mode::RankCheck, &cfg, opts, &r.common, None, None)
        }
        Command::ImportEta(i) => {
            let cfg = load_config(&i.common.config)?;
            let opts = RunOptions {
                seed: None,
                imported: Some(read_eta(&i.eta)?),
            };
            run_mode(Mode::AdpImported, &cfg, opts, &i.common, None, None)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var("LQS_WORKERS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("LQS_WORKERS: expected a positive integer, got {raw:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(vec![format!("LQS_WORKERS: {e}")]))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_workers().and_then(|()| dispatch(cli));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
