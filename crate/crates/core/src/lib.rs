//! Agent-based simulator of a road-traffic sensor network.
//!
//! Vehicles drive a grid of signalised intersections. Roadside sensors
//! detect stopped vehicles and report them over a shared radio channel to a
//! per-intersection decision maker, which sets the green times for the next
//! cycle. The channel is arbitrated by a lower MAC (TDMA, slotted Aloha or
//! CSMA/CA), optionally coordinated across intersections by an upper MAC
//! (round robin, DESYNC or L-MAC).

pub mod config;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod mac_lower;
pub mod mac_upper;
pub mod metrics;
pub mod rng;
pub mod sim;
pub mod traffic;

pub use config::{LowerMac, SimConfig, UpperMac};
pub use error::{Error, Result};
pub use experiment::{preset, presets, run_simulation, run_sweep, ExperimentPreset};
pub use metrics::{Counts, CycleRecord, RunStats, RunSummary};
pub use sim::{build_model, SimulationModel};
