//! The simulated world and its per-cycle main loop.
//!
//! A cycle is `t_max` ticks: tick 0 moves and spawns vehicles (after which
//! sensors look at their cells), ticks `1..=t_max-2` carry sensor
//! transmissions, and the final tick takes the measurement snapshot, lets
//! every decision maker set its dwell times and advances the lights.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{LowerMac, SimConfig};
use crate::error::Result;
use crate::grid::{CellKind, Grid, GridPos, Heading};
use crate::mac_lower::{
    aloha_tick, back_off, csma_arbitrate, gate_by_upper, resolve_tick, tdma_assign,
    tdma_assign_random, AlohaAction, Attempt, ChannelModel, CsmaAction, Packet, PacketStatus,
    TdmaSchedule, TickOutcome,
};
use crate::mac_upper::{run_until_converged, Convergence, Protocol, SlotSchedule};
use crate::metrics::{Counts, CycleRecord};
use crate::rng::{self, Stream};
use crate::traffic::{DecisionMaker, LightPhase};

/// Higher-MAC rounds allowed for the slot schedule to settle before the run.
pub const UPPER_MAX_ROUNDS: u32 = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vehicle {
    pub id: u64,
    pub pos: GridPos,
    pub heading: Heading,
    pub spawned_cycle: u64,
    /// Whether the vehicle advanced in the current cycle's movement step.
    pub moved: bool,
}

#[derive(Debug, Clone)]
pub struct Sensor {
    pub id: usize,
    pub cell: GridPos,
    pub heading: Heading,
    pub owner_dm: usize,
    pub prev_occupant: Option<u64>,
    /// Single-packet buffer.
    pub detection: Option<Packet>,
    /// Whether the last call to `sense` detected a stopped vehicle.
    pub fresh: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Move {
    Exit,
    Advance(GridPos),
    Stay,
}

/// Higher-MAC state used during a coordinated run.
#[derive(Debug, Clone)]
pub struct UpperLayer {
    pub schedule: SlotSchedule,
    pub convergence: Convergence,
    active: Vec<Vec<usize>>,
}

impl UpperLayer {
    fn new(schedule: SlotSchedule, convergence: Convergence) -> Self {
        let active = (0..schedule.round_time())
            .map(|s| schedule.occupants(s).iter().copied().collect())
            .collect();
        UpperLayer {
            schedule,
            convergence,
            active,
        }
    }

    /// Decision makers selected at transmission tick `tick` (1-based).
    pub fn active_at(&self, tick: u32, slot_ratio: u32) -> &[usize] {
        let slot = ((tick - 1) / slot_ratio) % self.schedule.round_time();
        &self.active[slot as usize]
    }
}

/// Cumulative protocol counters, beyond what a `CycleRecord` carries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounters {
    pub attempts: u64,
    pub delivered: u64,
    pub stale_deliveries: u64,
    pub collisions: u64,
    pub aloha_backoffs: u64,
    pub csma_deferrals: u64,
    pub discards: u64,
    /// Undelivered packets overwritten by a newer detection.
    pub replaced: u64,
    /// Transmissions withheld because the owner's decision maker was not
    /// selected by the higher MAC.
    pub gated: u64,
}

/// Vehicle bookkeeping for the last cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CycleEvents {
    pub moved: u32,
    pub exited: u32,
    pub spawned: u32,
    pub spawn_trials: u32,
    /// Trials that produced a vehicle, including ones discarded because the
    /// entry was blocked.
    pub spawn_successes: u32,
}

struct Rngs {
    spawn: ChaCha8Rng,
    aloha: ChaCha8Rng,
    csma: ChaCha8Rng,
}

pub struct SimulationModel {
    config: SimConfig,
    grid: Grid,
    channel: ChannelModel,
    /// Sorted by id.
    vehicles: Vec<Vehicle>,
    occupancy: Vec<Option<u64>>,
    sensors: Vec<Sensor>,
    /// Grid index -> sensor index for watched cells.
    watched: HashMap<GridPos, usize>,
    entries: Vec<(GridPos, Heading)>,
    dms: Vec<DecisionMaker>,
    tdma: TdmaSchedule,
    upper: Option<UpperLayer>,
    cycle: u64,
    next_vehicle_id: u64,
    rngs: Rngs,
    counters: MacCounters,
    events: CycleEvents,
    /// Per-intersection counters for the cycle in progress.
    tally: Vec<Counts>,
}

impl SimulationModel {
    pub fn new(config: SimConfig) -> Result<Self> {
        build_model(config)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn decision_makers(&self) -> &[DecisionMaker] {
        &self.dms
    }

    pub fn light_count(&self) -> usize {
        self.dms.len() * 4
    }

    pub fn tdma_schedule(&self) -> &TdmaSchedule {
        &self.tdma
    }

    pub fn upper(&self) -> Option<&UpperLayer> {
        self.upper.as_ref()
    }

    pub fn cycle(&self) -> u64 {
        self.cycle
    }

    pub fn counters(&self) -> &MacCounters {
        &self.counters
    }

    pub fn last_events(&self) -> CycleEvents {
        self.events
    }

    pub fn occupant(&self, pos: GridPos) -> Option<u64> {
        self.occupancy[self.grid.index(pos)]
    }

    pub fn phase(&self, intersection: usize) -> LightPhase {
        self.dms[intersection].controller.phase
    }

    /// Places a vehicle directly; returns false if the cell is not drivable
    /// or already occupied.
    pub fn place_vehicle(&mut self, pos: GridPos, heading: Heading) -> bool {
        if !self.grid.contains(pos)
            || !self.grid.cell(pos).is_drivable()
            || self.occupant(pos).is_some()
        {
            return false;
        }
        let id = self.next_vehicle_id;
        self.next_vehicle_id += 1;
        let idx = self.grid.index(pos);
        self.occupancy[idx] = Some(id);
        self.vehicles.push(Vehicle {
            id,
            pos,
            heading,
            spawned_cycle: self.cycle,
            moved: false,
        });
        true
    }

    /// Overrides the light phase of one intersection.
    pub fn set_phase(&mut self, intersection: usize, phase: LightPhase) {
        let c = &mut self.dms[intersection].controller;
        c.phase = phase;
        c.timer = 0;
    }

    fn is_green(&self, light_id: usize, heading: Heading) -> bool {
        self.dms[light_id / 4].controller.phase.is_green(heading)
    }

    fn decide_move(&self, v: &Vehicle) -> Move {
        let Some(target) = self.grid.step(v.pos, v.heading) else {
            return Move::Exit;
        };
        if let CellKind::StopLine { heading, light_id } = self.grid.cell(target) {
            if heading == v.heading && !self.is_green(light_id, heading) {
                return Move::Stay;
            }
        }
        if self.occupant(target).is_some() {
            return Move::Stay;
        }
        if let Some(beyond) = self.grid.step(target, v.heading) {
            if self.occupant(beyond).is_some() {
                return Move::Stay;
            }
        }
        Move::Advance(target)
    }

    fn enters_box(&self, v: &Vehicle, target: GridPos) -> bool {
        matches!(self.grid.cell(target), CellKind::StopLine { heading, .. } if heading == v.heading)
    }

    /// Advances every vehicle whose way is clear, all decided against the
    /// same pre-move state. Returns the number that moved (exits included).
    ///
    /// Two vehicles can only claim the same cell inside an intersection box;
    /// the one already in the box goes first, then the lower id.
    pub fn move_vehicles(&mut self) -> u32 {
        let decisions: Vec<Move> = self.vehicles.iter().map(|v| self.decide_move(v)).collect();

        let mut claims: Vec<(bool, u64, usize, GridPos)> = decisions
            .iter()
            .enumerate()
            .filter_map(|(i, d)| match *d {
                Move::Advance(t) => {
                    let v = &self.vehicles[i];
                    Some((self.enters_box(v, t), v.id, i, t))
                }
                _ => None,
            })
            .collect();
        claims.sort_unstable();
        let mut taken: HashMap<GridPos, usize> = HashMap::new();
        let mut winners: Vec<(usize, GridPos)> = Vec::with_capacity(claims.len());
        for (_, _, i, t) in claims {
            if let std::collections::hash_map::Entry::Vacant(e) = taken.entry(t) {
                e.insert(i);
                winners.push((i, t));
            }
        }

        for v in self.vehicles.iter_mut() {
            v.moved = false;
        }
        let mut exited = vec![false; self.vehicles.len()];
        for (i, d) in decisions.iter().enumerate() {
            if *d == Move::Exit {
                exited[i] = true;
            }
        }
        for (i, ex) in exited.iter().enumerate() {
            if *ex {
                let idx = self.grid.index(self.vehicles[i].pos);
                self.occupancy[idx] = None;
            }
        }
        for &(i, _) in &winners {
            let idx = self.grid.index(self.vehicles[i].pos);
            self.occupancy[idx] = None;
        }
        for &(i, t) in &winners {
            let idx = self.grid.index(t);
            debug_assert!(self.occupancy[idx].is_none());
            let v = &mut self.vehicles[i];
            v.pos = t;
            v.moved = true;
            self.occupancy[idx] = Some(v.id);
        }
        let n_exit = exited.iter().filter(|e| **e).count() as u32;
        let mut k = 0;
        self.vehicles.retain(|_| {
            let keep = !exited[k];
            k += 1;
            keep
        });
        self.events.moved = winners.len() as u32 + n_exit;
        self.events.exited = n_exit;
        self.events.moved
    }

    /// One Bernoulli trial per intersection; a success drops a vehicle on a
    /// uniformly chosen grid entry cell unless that cell or the one ahead is
    /// taken.
    pub fn spawn_vehicles(&mut self) -> u32 {
        let mut spawned = 0;
        let mut successes = 0;
        let trials = self.dms.len();
        for _ in 0..trials {
            if !self.rngs.spawn.gen_bool(self.config.p_new_vehicle) {
                continue;
            }
            successes += 1;
            let (pos, heading) =
                self.entries[rng::uniform_index(&mut self.rngs.spawn, self.entries.len())];
            let ahead_clear = self
                .grid
                .step(pos, heading)
                .is_none_or(|a| self.occupant(a).is_none());
            if self.occupant(pos).is_none() && ahead_clear && self.place_vehicle(pos, heading) {
                spawned += 1;
            }
        }
        self.events.spawned = spawned;
        self.events.spawn_trials = trials as u32;
        self.events.spawn_successes = successes;
        spawned
    }

    /// Stopped-vehicle detection for one sensor. A vehicle seen on the same
    /// cell as in the previous cycle produces a packet, replacing any
    /// undelivered one.
    pub fn sense(&mut self, sensor_idx: usize) -> Option<&Packet> {
        let cycle = self.cycle;
        let occupant = self.occupant(self.sensors[sensor_idx].cell);
        let s = &mut self.sensors[sensor_idx];
        let fresh = occupant.is_some() && occupant == s.prev_occupant;
        s.prev_occupant = occupant;
        s.fresh = fresh;
        if let (true, Some(vehicle)) = (fresh, occupant) {
            if s.detection.as_ref().is_some_and(Packet::is_live) {
                self.counters.replaced += 1;
            }
            s.detection = Some(Packet::new(s.id, vehicle, cycle));
        }
        if fresh {
            s.detection.as_ref()
        } else {
            None
        }
    }

    fn deliver(&mut self, sensor_idx: usize) {
        let cycle = self.cycle;
        let s = &mut self.sensors[sensor_idx];
        let Some(mut packet) = s.detection.take() else {
            return;
        };
        packet.status = PacketStatus::Delivered;
        let stale = packet.detect_cycle != cycle;
        let (owner, heading) = (s.owner_dm, s.heading);
        self.dms[owner].record_delivery(heading);
        self.tally[owner].n_succ += 1;
        self.counters.delivered += 1;
        if stale {
            self.counters.stale_deliveries += 1;
        }
    }

    fn transmission_tick(&mut self, tick: u32) {
        let slot_ratio = self.config.slot_ratio;
        let active: Option<Vec<usize>> = self
            .upper
            .as_ref()
            .map(|u| u.active_at(tick, slot_ratio).to_vec());
        let active = active.as_deref();

        let mut contenders: Vec<usize> = Vec::new();
        for (i, s) in self.sensors.iter().enumerate() {
            if !s.detection.as_ref().is_some_and(Packet::is_live) {
                continue;
            }
            let scheduled = match self.config.lower_mac {
                LowerMac::Tdma => self.tdma.tick_of(s.id) == Some(tick),
                _ => true,
            };
            if !scheduled {
                continue;
            }
            if gate_by_upper(s.owner_dm, active) {
                contenders.push(i);
            } else {
                self.counters.gated += 1;
            }
        }

        match self.config.lower_mac {
            LowerMac::Tdma => {
                let attempts: Vec<usize> = contenders;
                self.transmit(&attempts, |_, _| {});
            }
            LowerMac::SlottedAloha => {
                let timeout = self.config.t_trans();
                let mut attempts = Vec::new();
                for i in contenders {
                    let owner = self.sensors[i].owner_dm;
                    let packet = self.sensors[i].detection.as_mut().expect("live packet");
                    match aloha_tick(packet, timeout) {
                        AlohaAction::Transmit => attempts.push(i),
                        AlohaAction::Wait => {}
                        AlohaAction::Discard => {
                            self.sensors[i].detection = None;
                            self.tally[owner].discards += 1;
                            self.counters.discards += 1;
                        }
                    }
                }
                self.transmit(&attempts, |model, i| {
                    let owner = model.sensors[i].owner_dm;
                    let packet = model.sensors[i].detection.as_mut().expect("live packet");
                    back_off(packet, PacketStatus::BackedOff, &mut model.rngs.aloha);
                    model.tally[owner].backoffs += 1;
                    model.counters.aloha_backoffs += 1;
                });
            }
            LowerMac::CsmaCa => {
                let mut intents = Vec::new();
                for i in contenders {
                    let packet = self.sensors[i].detection.as_mut().expect("live packet");
                    if packet.backoff_remaining > 0 {
                        packet.backoff_remaining -= 1;
                    } else {
                        intents.push(i);
                    }
                }
                let positions: Vec<Attempt> = intents.iter().map(|&i| self.attempt(i)).collect();
                let actions = csma_arbitrate(&positions, &self.channel, &mut self.rngs.csma);
                let mut granted = Vec::new();
                for (&i, act) in intents.iter().zip(actions) {
                    match act {
                        CsmaAction::Transmit => granted.push(i),
                        CsmaAction::BackOff => {
                            let owner = self.sensors[i].owner_dm;
                            let packet = self.sensors[i].detection.as_mut().expect("live packet");
                            back_off(packet, PacketStatus::BackedOff, &mut self.rngs.csma);
                            self.tally[owner].backoffs += 1;
                            self.counters.csma_deferrals += 1;
                        }
                    }
                }
                self.transmit(&granted, |_, _| {});
            }
        }

        for s in self.sensors.iter_mut() {
            if let Some(p) = s.detection.as_mut() {
                p.age_ticks += 1;
            }
        }
    }

    fn attempt(&self, sensor_idx: usize) -> Attempt {
        let s = &self.sensors[sensor_idx];
        Attempt {
            sensor_id: s.id,
            pos: s.cell,
        }
    }

    /// Puts `senders` on the air together and applies the outcomes.
    fn transmit(&mut self, senders: &[usize], mut on_collision: impl FnMut(&mut Self, usize)) {
        if senders.is_empty() {
            return;
        }
        let attempts: Vec<Attempt> = senders.iter().map(|&i| self.attempt(i)).collect();
        let outcomes = resolve_tick(&attempts, &self.channel);
        self.counters.attempts += senders.len() as u64;
        for (&i, outcome) in senders.iter().zip(outcomes) {
            match outcome {
                TickOutcome::Delivered => self.deliver(i),
                TickOutcome::Collided => {
                    let owner = self.sensors[i].owner_dm;
                    if let Some(p) = self.sensors[i].detection.as_mut() {
                        p.status = PacketStatus::Collided;
                    }
                    self.tally[owner].collisions += 1;
                    self.counters.collisions += 1;
                    on_collision(self, i);
                }
            }
        }
    }

    /// Measurement taken at the final tick, before the decision makers act.
    pub fn snapshot(&self) -> CycleRecord {
        let mut parts = self.tally.clone();
        for c in parts.iter_mut() {
            c.n_w = 0;
            c.n_w_inst = 0;
            c.n_s = 0;
        }
        for s in &self.sensors {
            if s.fresh {
                parts[s.owner_dm].n_s += 1;
            }
        }
        for v in &self.vehicles {
            if let Some(&si) = self.watched.get(&v.pos) {
                let owner = self.sensors[si].owner_dm;
                if !v.moved && v.spawned_cycle != self.cycle {
                    parts[owner].n_w += 1;
                }
                if !matches!(self.decide_move(v), Move::Advance(_) | Move::Exit) {
                    parts[owner].n_w_inst += 1;
                }
            }
        }
        for (c, dm) in parts.iter_mut().zip(&self.dms) {
            c.n_dm = dm.reported_total();
        }
        let parts = parts.into_iter().map(Counts::finish).collect();
        CycleRecord::new(self.cycle, parts)
    }

    /// Runs one full cycle and returns its measurements.
    pub fn step_cycle(&mut self) -> CycleRecord {
        for t in self.tally.iter_mut() {
            *t = Counts::default();
        }
        self.move_vehicles();
        self.spawn_vehicles();
        for i in 0..self.sensors.len() {
            self.sense(i);
        }

        for tick in 1..=self.config.t_trans() {
            self.transmission_tick(tick);
        }

        let record = self.snapshot();
        for dm in self.dms.iter_mut() {
            dm.dm_decide();
            dm.controller.fsm_step();
        }
        self.cycle += 1;
        record
    }

    /// Checks structural invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let mut seen = HashMap::new();
        for v in &self.vehicles {
            if !self.grid.cell(v.pos).is_drivable() {
                return Err(format!("vehicle {} off road at {:?}", v.id, v.pos));
            }
            if let Some(other) = seen.insert(v.pos, v.id) {
                return Err(format!("vehicles {other} and {} share {:?}", v.id, v.pos));
            }
            if self.occupant(v.pos) != Some(v.id) {
                return Err(format!("occupancy out of sync for vehicle {}", v.id));
            }
        }
        let occupied = self.occupancy.iter().filter(|o| o.is_some()).count();
        if occupied != self.vehicles.len() {
            return Err(format!(
                "{occupied} occupied cells for {} vehicles",
                self.vehicles.len()
            ));
        }
        if !self.vehicles.windows(2).all(|w| w[0].id < w[1].id) {
            return Err("vehicles out of id order".into());
        }
        for dm in &self.dms {
            let ph = dm.controller.phase;
            let ew = ph.is_green(Heading::East) || ph.is_green(Heading::West);
            let ns = ph.is_green(Heading::North) || ph.is_green(Heading::South);
            if ew && ns {
                return Err(format!("intersection {} green on both axes", dm.id));
            }
        }
        Ok(())
    }
}

/// Lays out the grid, sensors, lights and decision makers for `config`.
pub fn build_model(config: SimConfig) -> Result<SimulationModel> {
    config.validate()?;
    let grid = Grid::new(config.intersections)?;
    let seed = config.seed;

    let sensors: Vec<Sensor> = grid
        .watched_cells()
        .into_iter()
        .enumerate()
        .map(|(id, w)| Sensor {
            id,
            cell: w.pos,
            heading: w.heading,
            owner_dm: w.intersection,
            prev_occupant: None,
            detection: None,
            fresh: false,
        })
        .collect();
    let watched = sensors.iter().map(|s| (s.cell, s.id)).collect();

    let dm_count = grid.intersection_count();
    let dms: Vec<DecisionMaker> = (0..dm_count)
        .map(|k| {
            let ids = sensors
                .iter()
                .filter(|s| s.owner_dm == k)
                .map(|s| s.id)
                .collect();
            DecisionMaker::new(k, ids)
        })
        .collect();

    let upper = match config.upper_mac {
        None => None,
        Some(kind) => {
            let protocol = Protocol::from_upper(kind);
            let mut upper_rng = match kind {
                crate::config::UpperMac::Desync => rng::stream(seed, Stream::DesyncJitter),
                _ => rng::stream(seed, Stream::LmacSlots),
            };
            let run = run_until_converged(
                &protocol,
                dm_count,
                config.round_time,
                &mut upper_rng,
                UPPER_MAX_ROUNDS,
                0,
            )?;
            Some(UpperLayer::new(run.schedule, run.outcome))
        }
    };

    let window = config.t_trans();
    let mut tdma = TdmaSchedule::default();
    if config.lower_mac == LowerMac::Tdma {
        if dm_count == 1 && upper.is_none() {
            tdma = tdma_assign(&dms[0].sensor_ids, window)?;
        } else {
            let mut tdma_rng = rng::stream(seed, Stream::TdmaAssign);
            for dm in &dms {
                tdma.extend(tdma_assign_random(&dm.sensor_ids, window, &mut tdma_rng)?);
            }
        }
    }

    let cells = (grid.width() * grid.height()) as usize;
    let entries = grid.entry_cells();
    Ok(SimulationModel {
        channel: ChannelModel::new(config.neighbor_radius),
        occupancy: vec![None; cells],
        vehicles: Vec::new(),
        sensors,
        watched,
        entries,
        tally: vec![Counts::default(); dm_count],
        dms,
        tdma,
        upper,
        cycle: 0,
        next_vehicle_id: 0,
        rngs: Rngs {
            spawn: rng::stream(seed, Stream::Spawn),
            aloha: rng::stream(seed, Stream::AlohaBackoff),
            csma: rng::stream(seed, Stream::CsmaBackoff),
        },
        counters: MacCounters::default(),
        events: CycleEvents::default(),
        grid,
        config,
    })
}
