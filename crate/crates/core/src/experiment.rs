//! Experiment presets, single runs and parameter sweeps.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{
    LowerMac, SimConfig, UpperMac, DEFAULT_SLOT_RATIO, TRAFFIC_HIGH, TRAFFIC_LOW, TRAFFIC_MEDIUM,
};
use crate::error::{Error, Result};
use crate::io::{write_convergence_trace, CellKey, SummaryFile, TraceWriter, TRACE_FORMAT_VERSION};
use crate::mac_upper::{run_until_converged, DesyncStart, Protocol};
use crate::metrics::{summarize, CycleRecord, RunStats};
use crate::rng::{self, Stream};
use crate::sim::build_model;

pub const DEFAULT_ROOT_SEED: u64 = 0;
/// Cycles between progress callbacks.
pub const PROGRESS_EVERY: u64 = 1000;

pub const SUMMARY_FILE: &str = "summary.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONVERGENCE_TRACE_FILE: &str = "convergence.csv";
pub const COMBINED_TABLE: &str = "summary.csv";

const LONG_RUN_CYCLES: u64 = 10_000;
const RADII: [u32; 5] = [5, 10, 15, 20, 25];

/// Callback receiving `(cell name, cycles done, cycles total)`.
pub type Progress<'a> = &'a (dyn Fn(&str, u64, u64) + Sync);

/// One simulation cell of a sweep: a configuration run for some replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct SimCell {
    pub name: String,
    /// Template; `seed` is replaced per replicate.
    pub config: SimConfig,
    pub replicates: u32,
}

/// One higher-MAC convergence study.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceCell {
    pub name: String,
    pub protocol: Protocol,
    pub dm_count: usize,
    pub round_time: u32,
    pub trials: u32,
    pub max_rounds: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Sim(SimCell),
    Convergence(ConvergenceCell),
}

impl Cell {
    pub fn name(&self) -> &str {
        match self {
            Cell::Sim(c) => &c.name,
            Cell::Convergence(c) => &c.name,
        }
    }

    /// Number of independent runs (replicates or trials) in the cell.
    pub fn runs(&self) -> u32 {
        match self {
            Cell::Sim(c) => c.replicates,
            Cell::Convergence(c) => c.trials,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPreset {
    pub name: &'static str,
    pub description: &'static str,
    pub cells: Vec<Cell>,
}

/// Seed of replicate (or trial) `index`.
pub fn replicate_seed(root_seed: u64, index: u32) -> u64 {
    root_seed.wrapping_add(u64::from(index))
}

fn cell_name(cfg: &SimConfig) -> String {
    let coord = cfg.upper_mac.map_or("uncoordinated", UpperMac::as_str);
    format!(
        "{}-{}-r{}-p{}",
        cfg.lower_mac.as_str(),
        coord,
        cfg.neighbor_radius,
        cfg.p_new_vehicle
    )
}

fn sim_cell(config: SimConfig, replicates: u32) -> Cell {
    Cell::Sim(SimCell {
        name: cell_name(&config),
        config,
        replicates,
    })
}

fn base(intersections: u32, t_max: u32, radius: u32, p: f64, cycles: u64) -> SimConfig {
    SimConfig {
        t_max,
        p_new_vehicle: p,
        neighbor_radius: radius,
        intersections,
        total_cycles: cycles,
        ..SimConfig::default()
    }
}

fn lmac(mut cfg: SimConfig, round_time: u32) -> SimConfig {
    cfg.upper_mac = Some(UpperMac::Lmac);
    cfg.round_time = round_time;
    cfg.slot_ratio = DEFAULT_SLOT_RATIO;
    cfg
}

fn fig5() -> ExperimentPreset {
    let mut cells = Vec::new();
    for mac in LowerMac::ALL {
        for p in [TRAFFIC_LOW, TRAFFIC_MEDIUM, TRAFFIC_HIGH] {
            let cfg = SimConfig {
                lower_mac: mac,
                ..base(1, 42, 15, p, LONG_RUN_CYCLES)
            };
            cells.push(sim_cell(cfg, 1));
        }
    }
    ExperimentPreset {
        name: "fig5-accuracy",
        description: "accuracy per lower MAC and traffic level, single intersection, radius 15",
        cells,
    }
}

fn fig6() -> ExperimentPreset {
    let mut cells = Vec::new();
    for mac in LowerMac::ALL {
        for r in RADII {
            let cfg = SimConfig {
                lower_mac: mac,
                ..base(2, 42, r, TRAFFIC_MEDIUM, LONG_RUN_CYCLES)
            };
            cells.push(sim_cell(cfg, 1));
        }
    }
    ExperimentPreset {
        name: "fig6-utilization",
        description: "utilization per lower MAC and neighbor radius, two intersections, 40 ticks",
        cells,
    }
}

fn fig10() -> ExperimentPreset {
    let mut cells = Vec::new();
    for mac in [LowerMac::CsmaCa, LowerMac::SlottedAloha] {
        // Both arms get 80 transmission ticks: four 20-tick higher-MAC slots
        // when coordinated.
        let plain = SimConfig {
            lower_mac: mac,
            ..base(4, 82, 10, TRAFFIC_MEDIUM, 5000)
        };
        cells.push(sim_cell(plain.clone(), 10));
        cells.push(sim_cell(lmac(plain, 4), 10));
    }
    ExperimentPreset {
        name: "fig10-abs-error",
        description: "absolute error with and without L-MAC coordination, four intersections",
        cells,
    }
}

fn fig11() -> ExperimentPreset {
    let mut cells = Vec::new();
    for mac in LowerMac::ALL {
        for r in RADII {
            let plain = SimConfig {
                lower_mac: mac,
                ..base(2, 42, r, TRAFFIC_MEDIUM, LONG_RUN_CYCLES)
            };
            cells.push(sim_cell(plain.clone(), 1));
            cells.push(sim_cell(lmac(plain, 2), 1));
        }
    }
    ExperimentPreset {
        name: "fig11-utilization-coord",
        description: "utilization with L-MAC (C=2, 1:20) against 40 uncoordinated ticks",
        cells,
    }
}

fn desync() -> ExperimentPreset {
    let case = |name: &str, start: DesyncStart, round_time: u32| {
        Cell::Convergence(ConvergenceCell {
            name: name.to_string(),
            protocol: Protocol::Desync(start),
            dm_count: 4,
            round_time,
            trials: 100,
            max_rounds: 500,
        })
    };
    ExperimentPreset {
        name: "desync-convergence",
        description: "DESYNC with four decision makers: C=4 spaced, C=8 and C=6 clustered",
        cells: vec![
            case(
                "desync-c4-spaced",
                DesyncStart::Explicit(vec![0, 1, 2, 3]),
                4,
            ),
            case("desync-c8-clustered", DesyncStart::Clustered, 8),
            case("desync-c6-clustered", DesyncStart::Clustered, 6),
        ],
    }
}

fn lmac_convergence() -> ExperimentPreset {
    let cells = [4, 5, 6, 8]
        .into_iter()
        .map(|c| {
            Cell::Convergence(ConvergenceCell {
                name: format!("lmac-c{c}"),
                protocol: Protocol::Lmac,
                dm_count: 4,
                round_time: c,
                trials: 1000,
                max_rounds: 200,
            })
        })
        .collect();
    ExperimentPreset {
        name: "lmac-convergence",
        description: "L-MAC with four decision makers for C in {4, 5, 6, 8}",
        cells,
    }
}

pub fn presets() -> Vec<ExperimentPreset> {
    vec![
        fig5(),
        fig6(),
        fig10(),
        fig11(),
        desync(),
        lmac_convergence(),
    ]
}

pub fn preset(name: &str) -> Result<ExperimentPreset> {
    let all = presets();
    let names: Vec<&str> = all.iter().map(|p| p.name).collect();
    let available = names.join(", ");
    all.into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| Error::UnknownPreset {
            name: name.to_string(),
            available,
        })
}

/// Runs one simulation, streaming its trace to `trace` if given.
pub fn run_simulation(
    config: &SimConfig,
    trace: Option<&Path>,
    label: &str,
    progress: Option<Progress>,
) -> Result<RunStats> {
    let mut model = build_model(config.clone())?;
    let mut writer = trace.map(TraceWriter::create).transpose()?;
    let mut records: Vec<CycleRecord> = Vec::with_capacity(config.total_cycles as usize);
    for done in 1..=config.total_cycles {
        let record = model.step_cycle();
        if let Some(w) = writer.as_mut() {
            w.write(&record)?;
        }
        records.push(record);
        if let Some(p) = progress {
            if done % PROGRESS_EVERY == 0 {
                p(label, done, config.total_cycles);
            }
        }
    }
    if let (Some(w), Some(path)) = (writer, trace) {
        use std::io::Write;
        w.finish()?.flush().map_err(|e| Error::io(path, e))?;
    }
    RunStats::from_records(&records)
}

fn trace_name(replicates: u32, index: u32) -> String {
    if replicates == 1 {
        TRACE_FILE.to_string()
    } else {
        format!("trace-{index}.csv")
    }
}

/// Runs every replicate of a simulation cell into `dir`.
pub fn run_sim_cell(
    cell: &SimCell,
    root_seed: u64,
    dir: &Path,
    progress: Option<Progress>,
) -> Result<SummaryFile> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seeds = Vec::new();
    let mut runs = Vec::new();
    for i in 0..cell.replicates {
        let cfg = SimConfig {
            seed: replicate_seed(root_seed, i),
            ..cell.config.clone()
        };
        let label = if cell.replicates == 1 {
            cell.name.clone()
        } else {
            format!("{} #{i}", cell.name)
        };
        let trace = dir.join(trace_name(cell.replicates, i));
        runs.push(run_simulation(&cfg, Some(&trace), &label, progress)?);
        seeds.push(cfg.seed);
    }
    let file = SummaryFile {
        trace_format: TRACE_FORMAT_VERSION,
        key: CellKey::of(&cell.config),
        config: SimConfig {
            seed: seeds[0],
            ..cell.config.clone()
        },
        seeds,
        summary: summarize(&runs)?,
        runs,
    };
    file.save(&dir.join(SUMMARY_FILE))?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub protocol: String,
    pub dm_count: usize,
    pub round_time: u32,
    pub max_rounds: u32,
    pub seeds: Vec<u64>,
    pub trials: u32,
    pub converged: u32,
    /// Mean rounds to converge over converged trials.
    pub mean_rounds: Option<f64>,
    /// Rounds per trial; `None` where the trial did not converge.
    pub rounds: Vec<Option<u32>>,
}

fn upper_stream(protocol: &Protocol) -> Stream {
    match protocol {
        Protocol::Desync(_) => Stream::DesyncJitter,
        _ => Stream::LmacSlots,
    }
}

/// Runs every trial of a convergence cell, collecting the per-round trace.
pub fn run_convergence_cell(
    cell: &ConvergenceCell,
    root_seed: u64,
) -> Result<(ConvergenceSummary, Vec<crate::mac_upper::TraceRow>)> {
    let mut seeds = Vec::new();
    let mut rounds = Vec::new();
    let mut trace = Vec::new();
    for trial in 0..cell.trials {
        let seed = replicate_seed(root_seed, trial);
        let mut r = rng::stream(seed, upper_stream(&cell.protocol));
        let run = run_until_converged(
            &cell.protocol,
            cell.dm_count,
            cell.round_time,
            &mut r,
            cell.max_rounds,
            trial,
        )?;
        seeds.push(seed);
        rounds.push(run.outcome.rounds());
        trace.extend(run.trace);
    }
    let done: Vec<f64> = rounds.iter().flatten().map(|&r| f64::from(r)).collect();
    let summary = ConvergenceSummary {
        protocol: cell.protocol.name().to_string(),
        dm_count: cell.dm_count,
        round_time: cell.round_time,
        max_rounds: cell.max_rounds,
        seeds,
        trials: cell.trials,
        converged: done.len() as u32,
        mean_rounds: (!done.is_empty()).then(|| done.iter().sum::<f64>() / done.len() as f64),
        rounds,
    };
    Ok((summary, trace))
}

fn save_convergence_cell(
    cell: &ConvergenceCell,
    root_seed: u64,
    dir: &Path,
) -> Result<ConvergenceSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (summary, trace) = run_convergence_cell(cell, root_seed)?;
    let path = dir.join(CONVERGENCE_TRACE_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_convergence_trace(BufWriter::new(file), &trace)?;
    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellResult {
    Sim(SummaryFile),
    Convergence(ConvergenceSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub name: String,
    pub dir: PathBuf,
    /// True if the cell's summary already existed and the cell was not rerun.
    pub skipped: bool,
    pub result: CellResult,
}

fn load_existing(cell: &Cell, path: &Path) -> Result<CellResult> {
    Ok(match cell {
        Cell::Sim(_) => CellResult::Sim(SummaryFile::load(path)?),
        Cell::Convergence(_) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            CellResult::Convergence(serde_json::from_str(&text)?)
        }
    })
}

fn run_cell(
    cell: &Cell,
    root_seed: u64,
    dir: &Path,
    progress: Option<Progress>,
) -> Result<CellOutcome> {
    let summary = dir.join(SUMMARY_FILE);
    // The summary is written last, so its presence marks a finished cell.
    let (skipped, result) = if summary.exists() {
        (true, load_existing(cell, &summary)?)
    } else {
        let result = match cell {
            Cell::Sim(c) => CellResult::Sim(run_sim_cell(c, root_seed, dir, progress)?),
            Cell::Convergence(c) => {
                CellResult::Convergence(save_convergence_cell(c, root_seed, dir)?)
            }
        };
        (false, result)
    };
    Ok(CellOutcome {
        name: cell.name().to_string(),
        dir: dir.to_path_buf(),
        skipped,
        result,
    })
}

/// Runs every cell of `preset` under `out/<preset name>/<cell name>/`, up to
/// `jobs` cells at a time, then writes the combined table.
pub fn run_sweep(
    preset: &ExperimentPreset,
    out: &Path,
    root_seed: u64,
    jobs: usize,
    progress: Option<Progress>,
) -> Result<Vec<CellOutcome>> {
    let root = out.join(preset.name);
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    let outcomes: Vec<CellOutcome> = pool.install(|| {
        preset
            .cells
            .par_iter()
            .map(|cell| run_cell(cell, root_seed, &root.join(cell.name()), progress))
            .collect::<Result<_>>()
    })?;
    write_combined_table(&root.join(COMBINED_TABLE), &outcomes)?;
    Ok(outcomes)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| crate::io::UNDEFINED.to_string(), |x| x.to_string())
}

/// One row per cell; simulation and convergence cells use different columns.
pub fn write_combined_table(path: &Path, outcomes: &[CellOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let sim = outcomes
        .first()
        .is_some_and(|o| matches!(o.result, CellResult::Sim(_)));
    if sim {
        w.write_record([
            "cell",
            "protocol",
            "coordination",
            "radius",
            "traffic",
            "runs",
            "abs_min",
            "abs_q1",
            "abs_median",
            "abs_q3",
            "abs_max",
            "abs_mean",
            "mean_U",
            "positive_errors",
            "negative_errors",
            "collisions",
            "backoffs",
            "discards",
        ])?;
    } else {
        w.write_record([
            "cell",
            "protocol",
            "dm_count",
            "round_time",
            "trials",
            "converged",
            "mean_rounds",
        ])?;
    }
    for o in outcomes {
        match &o.result {
            CellResult::Sim(f) => {
                let s = &f.summary;
                let b = &s.abs_error;
                w.write_record([
                    o.name.clone(),
                    f.key.protocol.clone(),
                    f.key.coordination.clone(),
                    f.key.radius.to_string(),
                    f.key.traffic.to_string(),
                    s.runs.to_string(),
                    b.min.to_string(),
                    b.q1.to_string(),
                    b.median.to_string(),
                    b.q3.to_string(),
                    b.max.to_string(),
                    b.mean.to_string(),
                    opt(s.mean_u),
                    s.positive_error_samples.to_string(),
                    s.negative_error_samples.to_string(),
                    s.collisions.to_string(),
                    s.backoffs.to_string(),
                    s.discards.to_string(),
                ])?;
            }
            CellResult::Convergence(c) => {
                w.write_record([
                    o.name.clone(),
                    c.protocol.clone(),
                    c.dm_count.to_string(),
                    c.round_time.to_string(),
                    c.trials.to_string(),
                    c.converged.to_string(),
                    opt(c.mean_rounds),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
