//! Higher-MAC slot allocation among decision makers.
//!
//! A round has `C` slots. Three schemes fill it: a fixed round-robin
//! (centralized), discrete DESYNC (each node moves to the midpoint of its ring
//! neighbours) and L-MAC (each node samples from a learned slot distribution
//! and locks onto a slot once it transmits there alone).

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::UpperMac;
use crate::error::{Error, Result};
use crate::rng;

/// Ring of `C` slots, each holding the decision makers that fire in it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSchedule {
    round_time: u32,
    assignment: Vec<BTreeSet<usize>>,
}

impl SlotSchedule {
    pub fn empty(round_time: u32) -> Self {
        SlotSchedule {
            round_time,
            assignment: vec![BTreeSet::new(); round_time as usize],
        }
    }

    /// Builds a schedule from `slots[dm] = slot`.
    pub fn from_slots(round_time: u32, slots: &[u32]) -> Self {
        let mut s = Self::empty(round_time);
        for (dm, &slot) in slots.iter().enumerate() {
            s.assignment[slot as usize].insert(dm);
        }
        s
    }

    pub fn round_time(&self) -> u32 {
        self.round_time
    }

    pub fn occupants(&self, slot: u32) -> &BTreeSet<usize> {
        &self.assignment[slot as usize]
    }

    pub fn is_collision_free(&self) -> bool {
        self.assignment.iter().all(|s| s.len() <= 1)
    }

    pub fn idle_slots(&self) -> usize {
        self.assignment.iter().filter(|s| s.is_empty()).count()
    }

    /// Slots held by `dm`.
    pub fn slots_of(&self, dm: usize) -> Vec<u32> {
        (0..self.round_time)
            .filter(|&s| self.assignment[s as usize].contains(&dm))
            .collect()
    }

    /// Occupied slots in ascending order (with multiplicity).
    pub fn occupancy(&self) -> Vec<u32> {
        (0..self.round_time)
            .flat_map(|s| std::iter::repeat_n(s, self.assignment[s as usize].len()))
            .collect()
    }
}

/// Round-robin: decision maker `k` gets slot `k`.
pub fn centralized_schedule(dm_ids: &[usize], round_time: u32) -> Result<SlotSchedule> {
    if (round_time as usize) < dm_ids.len() {
        return Err(Error::config(
            "round_time",
            format!(
                "{} decision makers need at least as many slots (got {round_time})",
                dm_ids.len()
            ),
        ));
    }
    let mut ids = dm_ids.to_vec();
    ids.sort_unstable();
    let mut s = SlotSchedule::empty(round_time);
    for (slot, dm) in ids.into_iter().enumerate() {
        s.assignment[slot].insert(dm);
    }
    Ok(s)
}

/// Discrete midpoint between the previous and next firing slots.
///
/// When the arc from `prev` through `own` to `next` wraps past the end of the
/// round, `round_time` is added before halving and the result is reduced
/// modulo the round.
pub fn desync_midpoint(prev: u32, next: u32, round_time: u32, own: u32) -> u32 {
    if prev > own || next < own {
        ((prev + next + round_time) / 2) % round_time
    } else {
        (prev + next) / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesyncState {
    pub dm_id: usize,
    pub current_slot: u32,
    /// Slot of the last firing heard before our own.
    pub heard_before: Option<u32>,
    /// Slot of the first firing heard after our own.
    pub heard_after: Option<u32>,
}

impl DesyncState {
    pub fn new(dm_id: usize, slot: u32) -> Self {
        DesyncState {
            dm_id,
            current_slot: slot,
            heard_before: None,
            heard_after: None,
        }
    }
}

/// One DESYNC round.
///
/// Coincident nodes are separated first: in every shared slot one occupant,
/// chosen uniformly, moves one slot forward. Nodes then fire in ring order
/// and each, after hearing its successor, moves to the midpoint between its
/// predecessor's latest slot and its successor's slot.
pub fn desync_round<R: Rng + ?Sized>(
    states: &mut [DesyncState],
    round_time: u32,
    rng: &mut R,
) -> SlotSchedule {
    let n = states.len();
    if n == 0 {
        return SlotSchedule::empty(round_time);
    }

    let mut by_slot: Vec<Vec<usize>> = vec![Vec::new(); round_time as usize];
    for (i, s) in states.iter().enumerate() {
        by_slot[s.current_slot as usize].push(i);
    }
    for group in by_slot.iter().filter(|g| g.len() > 1) {
        let pick = group[rng::uniform_index(rng, group.len())];
        states[pick].current_slot = (states[pick].current_slot + 1) % round_time;
    }

    if n == 1 {
        return SlotSchedule::from_slots(round_time, &slots_by_dm(states));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (states[i].current_slot, states[i].dm_id));
    for k in 0..n {
        let me = order[k];
        let prev = states[order[(k + n - 1) % n]].current_slot;
        let next = states[order[(k + 1) % n]].current_slot;
        let own = states[me].current_slot;
        let s = &mut states[me];
        s.heard_before = Some(prev);
        s.heard_after = Some(next);
        s.current_slot = desync_midpoint(prev, next, round_time, own);
    }
    SlotSchedule::from_slots(round_time, &slots_by_dm(states))
}

fn slots_by_dm(states: &[DesyncState]) -> Vec<u32> {
    let n = states.iter().map(|s| s.dm_id + 1).max().unwrap_or(0);
    let mut slots = vec![0; n];
    for s in states {
        slots[s.dm_id] = s.current_slot;
    }
    slots
}

/// Gaps between consecutive occupied slots around the ring.
pub fn ring_gaps(slots: &[u32], round_time: u32) -> Vec<u32> {
    let mut sorted = slots.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    (0..n)
        .map(|k| {
            let a = sorted[k];
            let b = sorted[(k + 1) % n];
            if n == 1 {
                round_time
            } else {
                (b + round_time - a) % round_time
            }
        })
        .collect()
}

/// Collision-free and spread as evenly as the ring allows.
pub fn maximally_spaced(slots: &[u32], round_time: u32) -> bool {
    let gaps = ring_gaps(slots, round_time);
    if gaps.contains(&0) {
        return false;
    }
    let lo = gaps.iter().min().copied().unwrap_or(0);
    let hi = gaps.iter().max().copied().unwrap_or(0);
    hi - lo <= 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmacState {
    pub dm_id: usize,
    pub prob: Vec<f64>,
    pub locked: Option<u32>,
}

impl LmacState {
    /// Uniform over `round_time` slots.
    pub fn new(dm_id: usize, round_time: u32) -> Self {
        let c = round_time as usize;
        LmacState {
            dm_id,
            prob: vec![1.0 / c as f64; c],
            locked: None,
        }
    }

    pub fn is_valid_distribution(&self) -> bool {
        let sum: f64 = self.prob.iter().sum();
        self.prob.iter().all(|&p| p >= 0.0) && (sum - 1.0).abs() <= 1e-12
    }
}

pub fn lmac_choose<R: Rng + ?Sized>(state: &LmacState, rng: &mut R) -> u32 {
    if let Some(slot) = state.locked {
        return slot;
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in state.prob.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        acc += p;
        if u < acc && p > 0.0 {
            return i as u32;
        }
    }
    // Rounding left u above the accumulated mass.
    last_positive as u32
}

/// Learns from one round's outcome on `chosen`.
///
/// Success while unlocked locks the slot for good; a locked node ignores
/// later collisions. A collision while unlocked halves that slot's
/// probability and renormalizes.
pub fn lmac_update(state: &mut LmacState, chosen: u32, collided: bool) {
    if state.locked.is_some() {
        return;
    }
    if collided {
        state.prob[chosen as usize] *= 0.5;
        let sum: f64 = state.prob.iter().sum();
        for p in state.prob.iter_mut() {
            *p /= sum;
        }
    } else {
        state.locked = Some(chosen);
        for (i, p) in state.prob.iter_mut().enumerate() {
            *p = if i == chosen as usize { 1.0 } else { 0.0 };
        }
    }
    debug_assert!(state.is_valid_distribution(), "{:?}", state.prob);
}

/// How DESYNC nodes pick their first slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DesyncStart {
    Explicit(Vec<u32>),
    Uniform,
    /// Each node uniform within a window of `n` consecutive slots starting at
    /// a random offset.
    Clustered,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protocol {
    Centralized,
    Desync(DesyncStart),
    Lmac,
}

impl Protocol {
    pub fn from_upper(upper: UpperMac) -> Self {
        match upper {
            UpperMac::Centralized => Protocol::Centralized,
            UpperMac::Desync => Protocol::Desync(DesyncStart::Uniform),
            UpperMac::Lmac => Protocol::Lmac,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Centralized => "centralized",
            Protocol::Desync(_) => "desync",
            Protocol::Lmac => "lmac",
        }
    }
}

/// One row of a convergence trace: where a decision maker sat in a round.
///
/// For DESYNC, round 0 is the starting layout and round `r` the layout after
/// the `r`-th update. For L-MAC and centralized, round `r` is the slot chosen
/// in the `r`-th round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub trial: u32,
    pub round: u32,
    pub dm_id: usize,
    pub slot: u32,
    pub collided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Convergence {
    Converged { rounds: u32 },
    NotConverged,
}

impl Convergence {
    pub fn rounds(self) -> Option<u32> {
        match self {
            Convergence::Converged { rounds } => Some(rounds),
            Convergence::NotConverged => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceRun {
    pub schedule: SlotSchedule,
    pub outcome: Convergence,
    pub trace: Vec<TraceRow>,
}

fn push_rows(trace: &mut Vec<TraceRow>, trial: u32, round: u32, slots: &[u32]) {
    for (dm, &slot) in slots.iter().enumerate() {
        let collided = slots.iter().filter(|&&s| s == slot).count() > 1;
        trace.push(TraceRow {
            trial,
            round,
            dm_id: dm,
            slot,
            collided,
        });
    }
}

fn initial_desync_slots<R: Rng + ?Sized>(
    start: &DesyncStart,
    dm_count: usize,
    round_time: u32,
    rng: &mut R,
) -> Result<Vec<u32>> {
    Ok(match start {
        DesyncStart::Explicit(slots) => {
            if slots.len() != dm_count || slots.iter().any(|&s| s >= round_time) {
                return Err(Error::config(
                    "desync_start",
                    format!("need {dm_count} slots below {round_time}, got {slots:?}"),
                ));
            }
            slots.clone()
        }
        DesyncStart::Uniform => (0..dm_count)
            .map(|_| rng.gen_range(0..round_time))
            .collect(),
        DesyncStart::Clustered => {
            let offset = rng.gen_range(0..round_time);
            let width = (dm_count as u32).clamp(1, round_time);
            (0..dm_count)
                .map(|_| (offset + rng.gen_range(0..width)) % round_time)
                .collect()
        }
    })
}

/// Runs a protocol round by round until it settles or `max_rounds` elapse.
///
/// L-MAC has converged on the first collision-free round. DESYNC has
/// converged on the first round that leaves every node in place while the
/// ring is collision-free and maximally spaced.
pub fn run_until_converged<R: Rng + ?Sized>(
    protocol: &Protocol,
    dm_count: usize,
    round_time: u32,
    rng: &mut R,
    max_rounds: u32,
    trial: u32,
) -> Result<ConvergenceRun> {
    if round_time == 0 {
        return Err(Error::config("round_time", "must be at least 1"));
    }
    let mut trace = Vec::new();
    match protocol {
        Protocol::Centralized => {
            let ids: Vec<usize> = (0..dm_count).collect();
            let schedule = centralized_schedule(&ids, round_time)?;
            let slots: Vec<u32> = ids.iter().map(|&d| schedule.slots_of(d)[0]).collect();
            push_rows(&mut trace, trial, 1, &slots);
            Ok(ConvergenceRun {
                schedule,
                outcome: Convergence::Converged { rounds: 1 },
                trace,
            })
        }
        Protocol::Desync(start) => {
            let init = initial_desync_slots(start, dm_count, round_time, rng)?;
            let mut states: Vec<DesyncState> = init
                .iter()
                .enumerate()
                .map(|(dm, &s)| DesyncState::new(dm, s))
                .collect();
            push_rows(&mut trace, trial, 0, &init);
            let mut prev = init;
            let mut schedule = SlotSchedule::from_slots(round_time, &prev);
            for round in 1..=max_rounds {
                schedule = desync_round(&mut states, round_time, rng);
                let slots = slots_by_dm(&states);
                push_rows(&mut trace, trial, round, &slots);
                if slots == prev && maximally_spaced(&slots, round_time) {
                    return Ok(ConvergenceRun {
                        schedule,
                        outcome: Convergence::Converged { rounds: round },
                        trace,
                    });
                }
                prev = slots;
            }
            Ok(ConvergenceRun {
                schedule,
                outcome: Convergence::NotConverged,
                trace,
            })
        }
        Protocol::Lmac => {
            let mut states: Vec<LmacState> = (0..dm_count)
                .map(|dm| LmacState::new(dm, round_time))
                .collect();
            let mut schedule = SlotSchedule::empty(round_time);
            for round in 1..=max_rounds {
                let chosen: Vec<u32> = states.iter().map(|s| lmac_choose(s, rng)).collect();
                push_rows(&mut trace, trial, round, &chosen);
                schedule = SlotSchedule::from_slots(round_time, &chosen);
                if schedule.is_collision_free() {
                    for (s, &c) in states.iter_mut().zip(&chosen) {
                        lmac_update(s, c, false);
                    }
                    return Ok(ConvergenceRun {
                        schedule,
                        outcome: Convergence::Converged { rounds: round },
                        trace,
                    });
                }
                for (s, &c) in states.iter_mut().zip(&chosen) {
                    let collided = chosen.iter().filter(|&&o| o == c).count() > 1;
                    lmac_update(s, c, collided);
                }
            }
            Ok(ConvergenceRun {
                schedule,
                outcome: Convergence::NotConverged,
                trace,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use proptest::prelude::*;

    #[test]
    fn centralized_examples() {
        let s = centralized_schedule(&[0, 1, 2, 3], 4).unwrap();
        assert!(s.is_collision_free());
        assert_eq!(s.idle_slots(), 0);
        for k in 0..4 {
            assert_eq!(s.slots_of(k), vec![k as u32]);
        }
        let s = centralized_schedule(&[0, 1, 2], 5).unwrap();
        assert_eq!(s.idle_slots(), 2);
        assert!(centralized_schedule(&[0, 1, 2], 2).is_err());
    }

    #[test]
    fn centralized_two_dms_alternate() {
        let s = centralized_schedule(&[0, 1], 2).unwrap();
        assert_eq!(s.occupants(0).iter().copied().collect::<Vec<_>>(), vec![0]);
        assert_eq!(s.occupants(1).iter().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn midpoint_examples() {
        // Wrapping arc from 8 to 2 on a ring of 10: 10 reduces to slot 0.
        assert_eq!((8 + 2 + 10) / 2, 10);
        assert_eq!(desync_midpoint(8, 2, 10, 9), 0);
        assert_eq!(desync_midpoint(8, 2, 10, 0), 0);
        assert_eq!(desync_midpoint(2, 6, 10, 4), 4);
        assert_eq!(desync_midpoint(0, 4, 8, 2), 2);
    }

    #[test]
    fn midpoint_two_nodes_go_opposite() {
        // With two nodes both neighbours are the other node.
        assert_eq!(desync_midpoint(1, 1, 8, 3), 5);
        assert_eq!(desync_midpoint(5, 5, 8, 1), 1);
    }

    #[test]
    fn maximal_spacing_is_a_fixed_point() {
        for (n, c) in [(4u32, 4u32), (4, 8), (4, 12), (2, 6), (3, 9)] {
            let step = c / n;
            let init: Vec<u32> = (0..n).map(|k| k * step).collect();
            let mut states: Vec<DesyncState> = init
                .iter()
                .enumerate()
                .map(|(d, &s)| DesyncState::new(d, s))
                .collect();
            let mut rng = stream(0, Stream::DesyncJitter);
            for _ in 0..20 {
                desync_round(&mut states, c, &mut rng);
            }
            assert_eq!(slots_by_dm(&states), init, "n={n} C={c}");
        }
    }

    #[test]
    fn desync_c8_from_cluster_converges() {
        let mut rng = stream(3, Stream::DesyncJitter);
        let run = run_until_converged(
            &Protocol::Desync(DesyncStart::Explicit(vec![0, 1, 2, 3])),
            4,
            8,
            &mut rng,
            500,
            0,
        )
        .unwrap();
        assert!(matches!(run.outcome, Convergence::Converged { .. }));
        let slots: Vec<u32> = (0..4).map(|d| run.schedule.slots_of(d)[0]).collect();
        assert_eq!(ring_gaps(&slots, 8), vec![2, 2, 2, 2]);
    }

    #[test]
    fn desync_c6_rotates() {
        let mut rng = stream(3, Stream::DesyncJitter);
        let run = run_until_converged(
            &Protocol::Desync(DesyncStart::Explicit(vec![0, 1, 2, 3])),
            4,
            6,
            &mut rng,
            500,
            0,
        )
        .unwrap();
        assert_eq!(run.outcome, Convergence::NotConverged);
    }

    #[test]
    fn desync_ties_are_split() {
        let mut states = vec![DesyncState::new(0, 2), DesyncState::new(1, 2)];
        let mut rng = stream(1, Stream::DesyncJitter);
        let s = desync_round(&mut states, 8, &mut rng);
        assert!(s.is_collision_free());
    }

    #[test]
    fn lmac_examples() {
        let mut rng = stream(0, Stream::LmacSlots);
        let mut s = LmacState::new(0, 4);
        s.locked = Some(3);
        assert_eq!(lmac_choose(&s, &mut rng), 3);

        let s = LmacState {
            dm_id: 0,
            prob: vec![1.0, 0.0, 0.0, 0.0],
            locked: None,
        };
        for _ in 0..100 {
            assert_eq!(lmac_choose(&s, &mut rng), 0);
        }

        let mut s = LmacState::new(0, 4);
        lmac_update(&mut s, 2, false);
        assert_eq!(s.locked, Some(2));

        let mut s = LmacState::new(0, 4);
        s.locked = Some(3);
        lmac_update(&mut s, 3, true);
        assert_eq!(s.locked, Some(3));

        let mut s = LmacState::new(0, 4);
        lmac_update(&mut s, 0, true);
        let expect = [1.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0, 2.0 / 7.0];
        for (p, e) in s.prob.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15, "{:?}", s.prob);
        }
    }

    #[test]
    fn lmac_uniform_draws_pass_chi_square() {
        let mut rng = stream(17, Stream::LmacSlots);
        let s = LmacState::new(0, 4);
        let n = 10_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            counts[lmac_choose(&s, &mut rng) as usize] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, 0.999 quantile.
        assert!(chi2 < 16.27, "chi2={chi2} counts={counts:?}");
    }

    proptest! {
        #[test]
        fn lmac_distribution_stays_valid(
            c in 1u32..12,
            events in proptest::collection::vec((0u32..12, any::<bool>()), 0..60),
        ) {
            let mut s = LmacState::new(0, c);
            for (slot, collided) in events {
                lmac_update(&mut s, slot % c, collided);
                prop_assert!(s.is_valid_distribution(), "{:?}", s.prob);
            }
        }

        #[test]
        fn midpoint_stays_on_ring(c in 1u32..64, a in 0u32..64, b in 0u32..64, o in 0u32..64) {
            let (a, b, o) = (a % c, b % c, o % c);
            prop_assert!(desync_midpoint(a, b, c, o) < c);
        }

        #[test]
        fn centralized_is_stable(n in 1usize..10, extra in 0u32..6) {
            let ids: Vec<usize> = (0..n).collect();
            let c = n as u32 + extra;
            let a = centralized_schedule(&ids, c).unwrap();
            let b = centralized_schedule(&ids, c).unwrap();
            prop_assert!(a.is_collision_free());
            prop_assert_eq!(a, b);
        }
    }
}
