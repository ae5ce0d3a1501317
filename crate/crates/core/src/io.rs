//! File formats: per-cycle trace CSV, run summary JSON and the higher-MAC
//! convergence trace CSV.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::mac_upper::TraceRow;
use crate::metrics::{Counts, CycleRecord, RunStats, RunSummary};

/// Bumped whenever a trace or summary column changes meaning.
pub const TRACE_FORMAT_VERSION: u32 = 1;

pub const TRACE_HEADER: [&str; 12] = [
    "cycle",
    "intersection",
    "N_W",
    "N_S",
    "N_DM",
    "N_succ",
    "A",
    "U",
    "collisions",
    "backoffs",
    "discards",
    "N_W_inst",
];

/// Label of the grid-wide row.
pub const AGGREGATE_LABEL: &str = "all";
/// Marker for an undefined utilization.
pub const UNDEFINED: &str = "NA";

/// Streams cycle records to CSV: one row per intersection, plus a grid-wide
/// row when there is more than one intersection.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl TraceWriter<BufWriter<File>> {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        TraceWriter::new(BufWriter::new(file))
    }
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(TRACE_HEADER)?;
        Ok(TraceWriter { inner })
    }

    fn row(&mut self, cycle: u64, label: &str, c: &Counts) -> Result<()> {
        let u = c.u.map_or_else(|| UNDEFINED.to_string(), |u| u.to_string());
        self.inner.write_record([
            cycle.to_string(),
            label.to_string(),
            c.n_w.to_string(),
            c.n_s.to_string(),
            c.n_dm.to_string(),
            c.n_succ.to_string(),
            c.a.to_string(),
            u,
            c.collisions.to_string(),
            c.backoffs.to_string(),
            c.discards.to_string(),
            c.n_w_inst.to_string(),
        ])?;
        Ok(())
    }

    pub fn write(&mut self, record: &CycleRecord) -> Result<()> {
        for (i, c) in record.intersections.iter().enumerate() {
            self.row(record.cycle, &i.to_string(), c)?;
        }
        if record.intersections.len() > 1 {
            self.row(record.cycle, AGGREGATE_LABEL, &record.total)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        self.inner
            .into_inner()
            .map_err(|e| Error::io("<trace>", e.into_error()))
    }
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, row: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Trace {
        row,
        reason: format!("missing column {}", TRACE_HEADER[idx]),
    })?;
    raw.parse().map_err(|_| Error::Trace {
        row,
        reason: format!("bad {} value `{raw}`", TRACE_HEADER[idx]),
    })
}

fn parse_counts(rec: &csv::StringRecord, row: usize) -> Result<Counts> {
    let u = match rec.get(7) {
        Some(UNDEFINED) => None,
        _ => Some(field::<f64>(rec, 7, row)?),
    };
    Ok(Counts {
        n_w: field(rec, 2, row)?,
        n_s: field(rec, 3, row)?,
        n_dm: field(rec, 4, row)?,
        n_succ: field(rec, 5, row)?,
        a: field(rec, 6, row)?,
        u,
        collisions: field(rec, 8, row)?,
        backoffs: field(rec, 9, row)?,
        discards: field(rec, 10, row)?,
        n_w_inst: field(rec, 11, row)?,
    })
}

/// Parses a trace back into cycle records. Grid-wide rows are checked
/// against the sum of their intersection rows.
pub fn read_trace<R: Read>(input: R) -> Result<Vec<CycleRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Trace {
            row: 0,
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut out: Vec<CycleRecord> = Vec::new();
    let mut parts: Vec<Counts> = Vec::new();
    let mut current: Option<u64> = None;
    let mut aggregate: Option<(usize, Counts)> = None;

    let mut flush = |cycle: Option<u64>,
                     parts: &mut Vec<Counts>,
                     aggregate: &mut Option<(usize, Counts)>|
     -> Result<()> {
        let Some(cycle) = cycle else { return Ok(()) };
        let record = CycleRecord::new(cycle, std::mem::take(parts));
        if let Some((row, total)) = aggregate.take() {
            if total != record.total {
                return Err(Error::Trace {
                    row,
                    reason: "aggregate row disagrees with intersection rows".into(),
                });
            }
        }
        out.push(record);
        Ok(())
    };

    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cycle: u64 = field(&rec, 0, row)?;
        if current != Some(cycle) {
            flush(current, &mut parts, &mut aggregate)?;
            current = Some(cycle);
        }
        let counts = parse_counts(&rec, row)?;
        match rec.get(1) {
            Some(AGGREGATE_LABEL) => aggregate = Some((row, counts)),
            _ => {
                let idx: usize = field(&rec, 1, row)?;
                if idx != parts.len() {
                    return Err(Error::Trace {
                        row,
                        reason: format!("intersection {idx} out of order"),
                    });
                }
                parts.push(counts);
            }
        }
    }
    flush(current, &mut parts, &mut aggregate)?;
    Ok(out)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<CycleRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_trace(file)
}

/// Identifies one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub protocol: String,
    /// Higher-MAC protocol name, or "uncoordinated".
    pub coordination: String,
    pub radius: u32,
    pub traffic: f64,
}

impl CellKey {
    pub fn of(config: &SimConfig) -> Self {
        CellKey {
            protocol: config.lower_mac.as_str().to_string(),
            coordination: config
                .upper_mac
                .map_or("uncoordinated", |u| u.as_str())
                .to_string(),
            radius: config.neighbor_radius,
            traffic: config.p_new_vehicle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFile {
    pub trace_format: u32,
    pub key: CellKey,
    /// Configuration of the first replicate; later replicates differ only
    /// in `seed`.
    pub config: SimConfig,
    pub seeds: Vec<u64>,
    pub summary: RunSummary,
    pub runs: Vec<RunStats>,
}

impl SummaryFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_convergence_trace<W: Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<convergence trace>", e))?;
    Ok(())
}

pub fn read_convergence_trace<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    Ok(rows)
}
