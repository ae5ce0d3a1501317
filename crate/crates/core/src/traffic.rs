//! Traffic-light phase machine and the per-intersection decision maker.

use serde::{Deserialize, Serialize};

use crate::grid::Heading;

/// All-red dwell between the two green phases, in cycles.
pub const ALL_RED_CYCLES: u32 = 9;
pub const MIN_GREEN: u32 = 5;
pub const MAX_GREEN: u32 = 30;
pub const INITIAL_GREEN: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LightPhase {
    /// All red.
    State0,
    /// East-west green.
    State1,
    /// North-south green.
    State2,
}

impl LightPhase {
    pub fn is_green(self, heading: Heading) -> bool {
        match self {
            LightPhase::State0 => false,
            LightPhase::State1 => heading.is_east_west(),
            LightPhase::State2 => !heading.is_east_west(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LightController {
    pub phase: LightPhase,
    /// Cycles spent in the current phase.
    pub timer: u32,
    pub t1: u32,
    pub t2: u32,
    /// Green phase entered when the current all-red interval ends.
    pub next_green: LightPhase,
}

impl Default for LightController {
    fn default() -> Self {
        LightController {
            phase: LightPhase::State1,
            timer: 0,
            t1: INITIAL_GREEN,
            t2: INITIAL_GREEN,
            next_green: LightPhase::State2,
        }
    }
}

impl LightController {
    fn dwell(&self) -> u32 {
        match self.phase {
            LightPhase::State0 => ALL_RED_CYCLES,
            LightPhase::State1 => self.t1,
            LightPhase::State2 => self.t2,
        }
    }

    /// Advances the machine by one cycle and returns the new phase.
    ///
    /// A phase with dwell `d` is observed for exactly `d` consecutive cycles.
    /// Green phases always hand over to `State0`, which then enters
    /// `next_green` and flips it.
    pub fn fsm_step(&mut self) -> LightPhase {
        self.timer += 1;
        if self.timer >= self.dwell() {
            self.timer = 0;
            self.phase = match self.phase {
                LightPhase::State1 | LightPhase::State2 => LightPhase::State0,
                LightPhase::State0 => {
                    let green = self.next_green;
                    self.next_green = if green == LightPhase::State1 {
                        LightPhase::State2
                    } else {
                        LightPhase::State1
                    };
                    green
                }
            };
        }
        self.phase
    }
}

/// Green dwell from the number of reports for one axis.
pub fn green_time(reports: u32) -> u32 {
    reports.saturating_mul(2).clamp(MIN_GREEN, MAX_GREEN)
}

#[derive(Debug, Clone)]
pub struct DecisionMaker {
    pub id: usize,
    /// Delivered packets per inbound heading in the current decision window.
    pub reported: [u32; 4],
    pub controller: LightController,
    pub sensor_ids: Vec<usize>,
}

impl DecisionMaker {
    pub fn new(id: usize, sensor_ids: Vec<usize>) -> Self {
        DecisionMaker {
            id,
            reported: [0; 4],
            controller: LightController::default(),
            sensor_ids,
        }
    }

    pub fn record_delivery(&mut self, heading: Heading) {
        self.reported[heading.index()] += 1;
    }

    /// Total reports in the current window (N_DM).
    pub fn reported_total(&self) -> u32 {
        self.reported.iter().sum()
    }

    /// Sets the dwell times from this window's reports and starts a new window.
    pub fn dm_decide(&mut self) -> (u32, u32) {
        let ew = self.reported[Heading::East.index()] + self.reported[Heading::West.index()];
        let ns = self.reported[Heading::North.index()] + self.reported[Heading::South.index()];
        let (t1, t2) = (green_time(ew), green_time(ns));
        self.controller.t1 = t1;
        self.controller.t2 = t2;
        self.reported = [0; 4];
        (t1, t2)
    }
}
