//! Per-cycle measurements and run statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Signed information error: positive when the decision maker has received
/// more reports than there are detected waiting vehicles.
pub fn accuracy(n_dm: u32, n_s: u32) -> i64 {
    i64::from(n_dm) - i64::from(n_s)
}

/// Delivered packets per waiting vehicle; `None` when nothing is waiting.
pub fn utilization(n_succ: u32, n_w: u32) -> Option<f64> {
    (n_w > 0).then(|| f64::from(n_succ) / f64::from(n_w))
}

/// Counts for one intersection (or the whole grid) in one cycle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    /// Vehicles that stayed on a watched cell through the cycle's movement
    /// step (waiting, aligned with detection).
    pub n_w: u32,
    /// Vehicles on watched cells that cannot advance at snapshot time,
    /// including ones that only just joined a queue.
    pub n_w_inst: u32,
    /// Sensors holding a detection made this cycle.
    pub n_s: u32,
    /// Reports received by the decision maker in the current window.
    pub n_dm: u32,
    /// Successful deliveries this cycle.
    pub n_succ: u32,
    pub a: i64,
    pub u: Option<f64>,
    pub collisions: u32,
    pub backoffs: u32,
    pub discards: u32,
}

impl Counts {
    /// Fills in `a` and `u` from the raw counts.
    pub fn finish(mut self) -> Self {
        self.a = accuracy(self.n_dm, self.n_s);
        self.u = utilization(self.n_succ, self.n_w);
        self
    }

    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a Counts>) -> Counts {
        let mut t = Counts::default();
        for p in parts {
            t.n_w += p.n_w;
            t.n_w_inst += p.n_w_inst;
            t.n_s += p.n_s;
            t.n_dm += p.n_dm;
            t.n_succ += p.n_succ;
            t.collisions += p.collisions;
            t.backoffs += p.backoffs;
            t.discards += p.discards;
        }
        t.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub intersections: Vec<Counts>,
    pub total: Counts,
}

impl CycleRecord {
    pub fn new(cycle: u64, intersections: Vec<Counts>) -> Self {
        let total = Counts::sum(&intersections);
        CycleRecord {
            cycle,
            intersections,
            total,
        }
    }
}

/// Order statistics of a sample (linear interpolation between ranks).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn from_sample(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyRecords);
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Ok(BoxStats {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
            mean: v.iter().sum::<f64>() / v.len() as f64,
        })
    }

    fn average(stats: &[BoxStats]) -> BoxStats {
        let n = stats.len() as f64;
        let avg = |f: fn(&BoxStats) -> f64| stats.iter().map(f).sum::<f64>() / n;
        BoxStats {
            min: avg(|s| s.min),
            q1: avg(|s| s.q1),
            median: avg(|s| s.median),
            q3: avg(|s| s.q3),
            max: avg(|s| s.max),
            mean: avg(|s| s.mean),
        }
    }
}

/// Statistics of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub cycles: u64,
    /// |A| over every (cycle, intersection) sample.
    pub abs_error: BoxStats,
    /// Mean of the grid-wide U over cycles where it is defined.
    pub mean_u: Option<f64>,
    pub positive_error_samples: u64,
    pub negative_error_samples: u64,
    pub collisions: u64,
    pub backoffs: u64,
    pub discards: u64,
}

impl RunStats {
    pub fn from_records(records: &[CycleRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyRecords);
        }
        let abs: Vec<f64> = records
            .iter()
            .flat_map(|r| r.intersections.iter().map(|c| c.a.unsigned_abs() as f64))
            .collect();
        let us: Vec<f64> = records.iter().filter_map(|r| r.total.u).collect();
        let per_sample = || records.iter().flat_map(|r| r.intersections.iter());
        Ok(RunStats {
            cycles: records.len() as u64,
            abs_error: BoxStats::from_sample(&abs)?,
            mean_u: (!us.is_empty()).then(|| us.iter().sum::<f64>() / us.len() as f64),
            positive_error_samples: per_sample().filter(|c| c.a > 0).count() as u64,
            negative_error_samples: per_sample().filter(|c| c.a < 0).count() as u64,
            collisions: records.iter().map(|r| u64::from(r.total.collisions)).sum(),
            backoffs: records.iter().map(|r| u64::from(r.total.backoffs)).sum(),
            discards: records.iter().map(|r| u64::from(r.total.discards)).sum(),
        })
    }
}

/// Statistics averaged over replicate runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: usize,
    /// Per-run |A| box statistics, averaged across runs.
    pub abs_error: BoxStats,
    /// Mean of per-run mean U (runs where U was never defined are skipped).
    pub mean_u: Option<f64>,
    pub positive_error_samples: u64,
    pub negative_error_samples: u64,
    pub collisions: u64,
    pub backoffs: u64,
    pub discards: u64,
}

pub fn summarize(runs: &[RunStats]) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let boxes: Vec<BoxStats> = runs.iter().map(|r| r.abs_error).collect();
    let us: Vec<f64> = runs.iter().filter_map(|r| r.mean_u).collect();
    Ok(RunSummary {
        runs: runs.len(),
        abs_error: BoxStats::average(&boxes),
        mean_u: (!us.is_empty()).then(|| us.iter().sum::<f64>() / us.len() as f64),
        positive_error_samples: runs.iter().map(|r| r.positive_error_samples).sum(),
        negative_error_samples: runs.iter().map(|r| r.negative_error_samples).sum(),
        collisions: runs.iter().map(|r| r.collisions).sum(),
        backoffs: runs.iter().map(|r| r.backoffs).sum(),
        discards: runs.iter().map(|r| r.discards).sum(),
    })
}
