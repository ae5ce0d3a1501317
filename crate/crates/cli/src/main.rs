use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trafficmac::experiment::{
    self, CellResult, SimCell, DEFAULT_ROOT_SEED, SUMMARY_FILE, TRACE_FILE,
};
use trafficmac::{Error, SimConfig};

const OUT_ENV: &str = "TRAFFICMAC_OUT";

#[derive(Parser)]
#[command(
    name = "trafficmac",
    version,
    about = "Road-traffic sensor network MAC simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the trace and summary.
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every cell of an experiment preset.
    Sweep {
        #[arg(long)]
        preset: String,
        #[arg(long, env = OUT_ENV)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ROOT_SEED)]
        root_seed: u64,
        /// Cells run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the experiment presets.
    ListPresets,
}

fn progress(label: &str, done: u64, total: u64) {
    eprintln!("{label}: cycle {done}/{total}");
}

fn run(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Error> {
    let mut cfg = SimConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let cell = SimCell {
        name: config
            .file_stem()
            .map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned()),
        replicates: 1,
        config: cfg.clone(),
    };
    let file = experiment::run_sim_cell(&cell, cfg.seed, out, Some(&progress))?;
    let s = &file.summary;
    eprintln!(
        "wrote {} and {}: max|A| {} median|A| {} mean U {}",
        out.join(TRACE_FILE).display(),
        out.join(SUMMARY_FILE).display(),
        s.abs_error.max,
        s.abs_error.median,
        s.mean_u.map_or_else(|| "NA".into(), |u| format!("{u:.4}")),
    );
    Ok(())
}

fn sweep(name: &str, out: &Path, root_seed: u64, jobs: usize) -> Result<(), Error> {
    let preset = experiment::preset(name)?;
    eprintln!("{}: {} cells", preset.name, preset.cells.len());
    let outcomes = experiment::run_sweep(&preset, out, root_seed, jobs, Some(&progress))?;
    for o in &outcomes {
        let status = if o.skipped { "skipped (done)" } else { "done" };
        let detail = match &o.result {
            CellResult::Sim(f) => format!(
                "max|A| {} mean U {}",
                f.summary.abs_error.max,
                f.summary
                    .mean_u
                    .map_or_else(|| "NA".into(), |u| format!("{u:.4}"))
            ),
            CellResult::Convergence(c) => format!("converged {}/{}", c.converged, c.trials),
        };
        eprintln!("{}: {status}, {detail}", o.name);
    }
    Ok(())
}

fn list_presets() {
    for p in experiment::presets() {
        let runs: u32 = p.cells.iter().map(|c| c.runs()).sum();
        println!(
            "{:<26}{} ({} cells, {} runs)",
            p.name,
            p.description,
            p.cells.len(),
            runs
        );
    }
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
    let result = match cli.command {
        Command::Run { config, out, seed } => run(&config, &out, seed),
        Command::Sweep {
            preset,
            out,
            root_seed,
            jobs,
        } => sweep(&preset, &out, root_seed, jobs),
        Command::ListPresets => {
            list_presets();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(source) = std::error::Error::source(&e) {
                eprintln!("  caused by: {source}");
            }
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
