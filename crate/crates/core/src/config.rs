//! Simulation configuration and its validation.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of lower-MAC ticks per higher-MAC slot.
pub const DEFAULT_SLOT_RATIO: u32 = 20;

/// Traffic presets (vehicle spawn probability per intersection per cycle).
pub const TRAFFIC_LOW: f64 = 0.2;
pub const TRAFFIC_MEDIUM: f64 = 0.5;
pub const TRAFFIC_HIGH: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerMac {
    Tdma,
    SlottedAloha,
    CsmaCa,
}

impl LowerMac {
    pub const ALL: [LowerMac; 3] = [LowerMac::Tdma, LowerMac::SlottedAloha, LowerMac::CsmaCa];

    pub fn as_str(self) -> &'static str {
        match self {
            LowerMac::Tdma => "tdma",
            LowerMac::SlottedAloha => "slotted_aloha",
            LowerMac::CsmaCa => "csma_ca",
        }
    }
}

impl fmt::Display for LowerMac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpperMac {
    Centralized,
    Desync,
    Lmac,
}

impl UpperMac {
    pub fn as_str(self) -> &'static str {
        match self {
            UpperMac::Centralized => "centralized",
            UpperMac::Desync => "desync",
            UpperMac::Lmac => "lmac",
        }
    }
}

impl fmt::Display for UpperMac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_slot_ratio() -> u32 {
    DEFAULT_SLOT_RATIO
}

fn default_round_time() -> u32 {
    1
}

/// Parameters of one simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    /// Ticks per cycle: one movement tick, `t_max - 2` transmission ticks,
    /// one decision tick.
    pub t_max: u32,
    pub p_new_vehicle: f64,
    /// Chebyshev distance within which simultaneous transmissions interfere.
    pub neighbor_radius: u32,
    pub lower_mac: LowerMac,
    #[serde(default)]
    pub upper_mac: Option<UpperMac>,
    /// Higher-MAC slots per round (C).
    #[serde(default = "default_round_time")]
    pub round_time: u32,
    /// Lower-MAC ticks per higher-MAC slot.
    #[serde(default = "default_slot_ratio")]
    pub slot_ratio: u32,
    /// Number of intersections: 1, 2 or 4.
    pub intersections: u32,
    pub seed: u64,
    pub total_cycles: u64,
}

impl SimConfig {
    /// Transmission ticks per cycle.
    pub fn t_trans(&self) -> u32 {
        self.t_max.saturating_sub(2)
    }

    pub fn is_coordinated(&self) -> bool {
        self.upper_mac.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max < 3 {
            return Err(Error::config(
                "t_max",
                format!(
                    "must be at least 3 so that at least one transmission tick remains (got {})",
                    self.t_max
                ),
            ));
        }
        if !(0.0..=1.0).contains(&self.p_new_vehicle) || self.p_new_vehicle.is_nan() {
            return Err(Error::config(
                "p_new_vehicle",
                format!("must lie in [0, 1] (got {})", self.p_new_vehicle),
            ));
        }
        if self.neighbor_radius < 1 {
            return Err(Error::config("neighbor_radius", "must be at least 1"));
        }
        if !matches!(self.intersections, 1 | 2 | 4) {
            return Err(Error::config(
                "intersections",
                format!(
                    "supported layouts are 1, 2 or 4 (got {})",
                    self.intersections
                ),
            ));
        }
        if let Some(upper) = self.upper_mac {
            if self.round_time < 1 {
                return Err(Error::config("round_time", "must be at least 1"));
            }
            if self.slot_ratio < 1 {
                return Err(Error::config("slot_ratio", "must be at least 1"));
            }
            if upper == UpperMac::Centralized && self.round_time < self.intersections {
                return Err(Error::config(
                    "round_time",
                    format!(
                        "centralized scheduling needs at least one slot per decision maker ({} < {})",
                        self.round_time, self.intersections
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SimConfig =
            serde_path_to_error::deserialize(de).map_err(|source| Error::ConfigParse {
                path: origin.to_path_buf(),
                source,
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_max: 42,
            p_new_vehicle: TRAFFIC_MEDIUM,
            neighbor_radius: 1,
            lower_mac: LowerMac::Tdma,
            upper_mac: None,
            round_time: 1,
            slot_ratio: DEFAULT_SLOT_RATIO,
            intersections: 1,
            seed: 0,
            total_cycles: 1000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn t_max_below_three_is_rejected() {
        let cfg = SimConfig {
            t_max: 2,
            ..SimConfig::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "t_max"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn t_trans_is_t_max_minus_two() {
        let cfg = SimConfig::default();
        assert_eq!(cfg.t_trans(), 40);
    }

    #[test]
    fn unsupported_layout_is_rejected() {
        let cfg = SimConfig {
            intersections: 3,
            ..SimConfig::default()
        };
        assert!(
            matches!(cfg.validate(), Err(Error::Config { ref field, .. }) if field == "intersections")
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"t_max": 42, "p_new_vehicle": 0.5, "neighbor_radius": 1,
            "lower_mac": "tdma", "intersections": 1, "seed": 1, "total_cycles": 10,
            "colour": "red"}"#;
        let err = SimConfig::from_json_str(text, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn bad_value_names_the_field() {
        let text = r#"{"t_max": 42, "p_new_vehicle": 0.5, "neighbor_radius": 1,
            "lower_mac": "token_ring", "intersections": 1, "seed": 1, "total_cycles": 10}"#;
        let err = SimConfig::from_json_str(text, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("lower_mac"), "{err}");
    }

    #[test]
    fn centralized_needs_a_slot_per_dm() {
        let cfg = SimConfig {
            intersections: 4,
            upper_mac: Some(UpperMac::Centralized),
            round_time: 3,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn arb_config() -> impl Strategy<Value = SimConfig> {
        (
            3u32..200,
            0.0f64..=1.0,
            1u32..30,
            prop_oneof![
                Just(LowerMac::Tdma),
                Just(LowerMac::SlottedAloha),
                Just(LowerMac::CsmaCa)
            ],
            prop_oneof![
                Just(None),
                Just(Some(UpperMac::Centralized)),
                Just(Some(UpperMac::Desync)),
                Just(Some(UpperMac::Lmac))
            ],
            4u32..10,
            1u32..40,
            prop_oneof![Just(1u32), Just(2), Just(4)],
            any::<u64>(),
            0u64..1_000_000,
        )
            .prop_map(
                |(t_max, p, r, lower, upper, c, ratio, n, seed, cycles)| SimConfig {
                    t_max,
                    p_new_vehicle: p,
                    neighbor_radius: r,
                    lower_mac: lower,
                    upper_mac: upper,
                    round_time: c,
                    slot_ratio: ratio,
                    intersections: n,
                    seed,
                    total_cycles: cycles,
                },
            )
    }

    proptest! {
        #[test]
        fn json_round_trip_is_identity(cfg in arb_config()) {
            let text = cfg.to_json();
            let back = SimConfig::from_json_str(&text, Path::new("mem")).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
