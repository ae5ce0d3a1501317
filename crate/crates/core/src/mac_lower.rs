//! Sensor-to-decision-maker channel access: the shared radio channel and the
//! TDMA, slotted Aloha and CSMA/CA protocols, evaluated one tick at a time.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::GridPos;
use crate::rng;

/// Backoff draws are uniform in `1..=BACKOFF_WINDOW` ticks.
pub const BACKOFF_WINDOW: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketStatus {
    Pending,
    BackedOff,
    Delivered,
    Collided,
    Discarded,
}

/// One detection report waiting in a sensor's single-packet buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub sensor_id: usize,
    pub vehicle_id: u64,
    pub detect_cycle: u64,
    pub backoff_remaining: u32,
    /// Transmission ticks elapsed since the packet was created.
    pub age_ticks: u32,
    pub status: PacketStatus,
}

impl Packet {
    pub fn new(sensor_id: usize, vehicle_id: u64, detect_cycle: u64) -> Self {
        Packet {
            sensor_id,
            vehicle_id,
            detect_cycle,
            backoff_remaining: 0,
            age_ticks: 0,
            status: PacketStatus::Pending,
        }
    }

    pub fn is_live(&self) -> bool {
        !matches!(
            self.status,
            PacketStatus::Delivered | PacketStatus::Discarded
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelModel {
    pub neighbor_radius: u32,
}

impl ChannelModel {
    pub fn new(neighbor_radius: u32) -> Self {
        ChannelModel { neighbor_radius }
    }

    pub fn interferes(&self, a: GridPos, b: GridPos) -> bool {
        a.chebyshev(b) <= self.neighbor_radius
    }
}

/// A sensor actually putting a packet on the air this tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attempt {
    pub sensor_id: usize,
    pub pos: GridPos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    Delivered,
    Collided,
}

/// Resolves simultaneous transmissions. An attempt succeeds iff no other
/// attempt lies within the neighbor radius. Outcomes are returned in input
/// order.
pub fn resolve_tick(attempts: &[Attempt], channel: &ChannelModel) -> Vec<TickOutcome> {
    attempts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let hit = attempts
                .iter()
                .enumerate()
                .any(|(j, b)| i != j && channel.interferes(a.pos, b.pos));
            if hit {
                TickOutcome::Collided
            } else {
                TickOutcome::Delivered
            }
        })
        .collect()
}

/// Dedicated transmission tick (1-based, within the cycle's transmission
/// window) for each sensor of a decision maker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TdmaSchedule {
    ticks: BTreeMap<usize, u32>,
}

impl TdmaSchedule {
    pub fn tick_of(&self, sensor_id: usize) -> Option<u32> {
        self.ticks.get(&sensor_id).copied()
    }

    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// Merges another decision maker's schedule into this one.
    pub fn extend(&mut self, other: TdmaSchedule) {
        self.ticks.extend(other.ticks);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.ticks.iter().map(|(&s, &t)| (s, t))
    }
}

fn check_window(sensors: usize, window: u32) -> Result<()> {
    if (window as usize) < sensors {
        return Err(Error::config(
            "t_max",
            format!("TDMA window of {window} ticks cannot hold {sensors} sensors"),
        ));
    }
    Ok(())
}

/// Ticks `1..=n` in ascending sensor-id order.
pub fn tdma_assign(sensor_ids: &[usize], window: u32) -> Result<TdmaSchedule> {
    check_window(sensor_ids.len(), window)?;
    let mut ids = sensor_ids.to_vec();
    ids.sort_unstable();
    let ticks = ids.into_iter().zip(1u32..).collect::<BTreeMap<_, _>>();
    Ok(TdmaSchedule { ticks })
}

/// A uniformly random injective mapping of the sensors into `1..=window`.
/// Used when several decision makers schedule without knowing each other.
pub fn tdma_assign_random<R: Rng + ?Sized>(
    sensor_ids: &[usize],
    window: u32,
    rng: &mut R,
) -> Result<TdmaSchedule> {
    check_window(sensor_ids.len(), window)?;
    let mut ticks: Vec<u32> = (1..=window).collect();
    rng::shuffle(rng, &mut ticks);
    let mut ids = sensor_ids.to_vec();
    ids.sort_unstable();
    Ok(TdmaSchedule {
        ticks: ids.into_iter().zip(ticks).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlohaAction {
    Transmit,
    Wait,
    Discard,
}

/// Slotted Aloha decision for one live packet this tick. A packet whose age
/// has reached `timeout` is dropped; a backed-off packet counts down and
/// transmits on the tick after its counter reaches zero.
pub fn aloha_tick(packet: &mut Packet, timeout: u32) -> AlohaAction {
    if packet.age_ticks >= timeout {
        packet.status = PacketStatus::Discarded;
        return AlohaAction::Discard;
    }
    if packet.backoff_remaining > 0 {
        packet.backoff_remaining -= 1;
        return AlohaAction::Wait;
    }
    AlohaAction::Transmit
}

/// Draws a fresh backoff after a collision (Aloha) or a busy channel
/// (CSMA/CA).
pub fn back_off<R: Rng + ?Sized>(packet: &mut Packet, status: PacketStatus, rng: &mut R) {
    packet.backoff_remaining = rng::uniform_inclusive(rng, 1, BACKOFF_WINDOW);
    packet.status = status;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsmaAction {
    Transmit,
    BackOff,
}

/// Carrier sensing among the sensors that want the channel this tick.
///
/// Intenders are visited in uniformly random order; one is granted the
/// channel unless an already granted intender lies within the neighbor
/// radius. Granted transmissions never overlap, so CSMA/CA produces no
/// collisions. Actions are returned in input order.
pub fn csma_arbitrate<R: Rng + ?Sized>(
    intents: &[Attempt],
    channel: &ChannelModel,
    rng: &mut R,
) -> Vec<CsmaAction> {
    let mut order: Vec<usize> = (0..intents.len()).collect();
    rng::shuffle(rng, &mut order);
    let mut actions = vec![CsmaAction::BackOff; intents.len()];
    let mut granted: Vec<GridPos> = Vec::new();
    for i in order {
        let pos = intents[i].pos;
        if granted.iter().all(|&g| !channel.interferes(pos, g)) {
            granted.push(pos);
            actions[i] = CsmaAction::Transmit;
        }
    }
    actions
}

/// Whether a sensor may transmit under the higher-MAC schedule. `None` means
/// no coordination; otherwise the decision makers selected for this tick.
pub fn gate_by_upper(owner_dm: usize, active: Option<&[usize]>) -> bool {
    match active {
        None => true,
        Some(dms) => dms.contains(&owner_dm),
    }
}
