//! Parametric access-technology models: log-distance path loss, link budget feasibility,
//! a load-dependent latency/loss proxy and per-byte energy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Point2;

/// Reference distance of the path-loss model, meters.
pub const REFERENCE_DISTANCE_M: f64 = 1.0;

const DEFAULT_PROFILES: &str = include_str!("../profiles/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technology {
    NrEmbb,
    NrUrllc,
    NrMmtc,
    Lte,
    Wifi,
    Bluetooth,
    Lora,
    Mioty,
    Ultrasound,
    Radar,
    Eth,
    IndustrialEth,
    Fieldbus,
}

impl Technology {
    pub const ALL: [Technology; 13] = [
        Technology::NrEmbb,
        Technology::NrUrllc,
        Technology::NrMmtc,
        Technology::Lte,
        Technology::Wifi,
        Technology::Bluetooth,
        Technology::Lora,
        Technology::Mioty,
        Technology::Ultrasound,
        Technology::Radar,
        Technology::Eth,
        Technology::IndustrialEth,
        Technology::Fieldbus,
    ];

    pub fn is_5g(&self) -> bool {
        matches!(self, Technology::NrEmbb | Technology::NrUrllc | Technology::NrMmtc)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Technology::NrEmbb => "nr_embb",
            Technology::NrUrllc => "nr_urllc",
            Technology::NrMmtc => "nr_mmtc",
            Technology::Lte => "lte",
            Technology::Wifi => "wifi",
            Technology::Bluetooth => "bluetooth",
            Technology::Lora => "lora",
            Technology::Mioty => "mioty",
            Technology::Ultrasound => "ultrasound",
            Technology::Radar => "radar",
            Technology::Eth => "eth",
            Technology::IndustrialEth => "industrial_eth",
            Technology::Fieldbus => "fieldbus",
        }
    }
}

impl fmt::Display for Technology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Technology {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Technology::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown technology `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Medium {
    Wireless,
    Wired,
}

fn default_knee() -> f64 {
    0.7
}

fn default_slope() -> f64 {
    5.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTechnologyProfile {
    pub name: Technology,
    pub medium: Medium,
    #[serde(default)]
    pub pl0_db: f64,
    #[serde(default)]
    pub ple: f64,
    #[serde(default)]
    pub tx_power_dbm: f64,
    #[serde(default)]
    pub rx_sensitivity_dbm: f64,
    pub capacity_mbps: f64,
    pub base_latency_ms: f64,
    pub per_hop_reliability: f64,
    pub energy_per_byte_uj: f64,
    #[serde(default)]
    pub supports_ranging: bool,
    #[serde(default)]
    pub range_sigma_m: f64,
    /// Utilization above which latency starts to grow.
    #[serde(default = "default_knee")]
    pub congestion_knee: f64,
    #[serde(default = "default_slope")]
    pub congestion_slope: f64,
    /// Ranging-only technologies (ultrasound, RADAR) carry no user traffic.
    #[serde(default = "yes")]
    pub carries_data: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("{0} is a wired profile")]
    WiredProfile(Technology),
    #[error("distance below the 1 m reference; clamped loss {loss_db} dB")]
    DistanceBelowReference { loss_db: f64 },
    #[error("endpoint `{endpoint}` does not support {tech}")]
    UnsupportedTechnology { endpoint: String, tech: Technology },
    #[error("invalid profile {tech}: {reason}")]
    InvalidProfile { tech: Technology, reason: String },
}

impl LinkTechnologyProfile {
    pub fn is_wireless(&self) -> bool {
        self.medium == Medium::Wireless
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        let bad = |reason: &str| {
            Err(LinkError::InvalidProfile { tech: self.name, reason: reason.to_string() })
        };
        if self.is_wireless() && !(1.6..=6.0).contains(&self.ple) {
            return bad("path-loss exponent outside [1.6, 6]");
        }
        if !(self.capacity_mbps > 0.0) {
            return bad("capacity_mbps must be positive");
        }
        if !(self.per_hop_reliability > 0.0 && self.per_hop_reliability <= 1.0) {
            return bad("per_hop_reliability must be in (0, 1]");
        }
        if self.supports_ranging && !(self.range_sigma_m > 0.0) {
            return bad("range_sigma_m must be positive for ranging profiles");
        }
        if !(self.base_latency_ms > 0.0) {
            return bad("base_latency_ms must be positive");
        }
        if self.energy_per_byte_uj < 0.0 {
            return bad("energy_per_byte_uj must be non-negative");
        }
        Ok(())
    }

    /// Distance at which the link margin reaches zero.
    pub fn max_range_m(&self) -> f64 {
        if !self.is_wireless() {
            return 0.0;
        }
        let budget = self.tx_power_dbm - self.rx_sensitivity_dbm - self.pl0_db;
        REFERENCE_DISTANCE_M * 10f64.powf(budget / (10.0 * self.ple))
    }
}

/// Log-distance path loss `pl0 + 10 n log10(d / d0)`.
///
/// Distances under the reference distance return `DistanceBelowReference` carrying the
/// loss at `d0`.
pub fn path_loss(profile: &LinkTechnologyProfile, distance_m: f64) -> Result<f64, LinkError> {
    if !profile.is_wireless() {
        return Err(LinkError::WiredProfile(profile.name));
    }
    if distance_m < REFERENCE_DISTANCE_M {
        return Err(LinkError::DistanceBelowReference { loss_db: profile.pl0_db });
    }
    Ok(profile.pl0_db + 10.0 * profile.ple * (distance_m / REFERENCE_DISTANCE_M).log10())
}

/// Like [`path_loss`] but silently clamps short distances to the reference distance.
pub fn path_loss_clamped(profile: &LinkTechnologyProfile, distance_m: f64) -> f64 {
    match path_loss(profile, distance_m.max(REFERENCE_DISTANCE_M)) {
        Ok(l) => l,
        Err(LinkError::DistanceBelowReference { loss_db }) => loss_db,
        Err(_) => 0.0,
    }
}

pub fn margin_db(profile: &LinkTechnologyProfile, distance_m: f64) -> f64 {
    profile.tx_power_dbm - path_loss_clamped(profile, distance_m) - profile.rx_sensitivity_dbm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feasibility {
    /// Wired links report a margin of `f64::INFINITY`.
    Feasible { margin_db: f64 },
    Infeasible { margin_db: Option<f64> },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }

    pub fn margin(&self) -> Option<f64> {
        match *self {
            Feasibility::Feasible { margin_db } => Some(margin_db),
            Feasibility::Infeasible { margin_db } => margin_db,
        }
    }
}

/// One side of a prospective link.
#[derive(Debug, Clone, Copy)]
pub struct Endpoint<'a> {
    pub id: &'a str,
    pub position: Point2,
    pub technologies: &'a [Technology],
}

/// A wired connection as seen by the feasibility check.
pub trait WiredLinks {
    fn wired_between(&self, a: &str, b: &str, tech: Technology) -> bool;
}

impl WiredLinks for [(String, String, Technology)] {
    fn wired_between(&self, a: &str, b: &str, tech: Technology) -> bool {
        self.iter()
            .any(|(x, y, t)| *t == tech && ((x == a && y == b) || (x == b && y == a)))
    }
}

pub fn link_feasible(
    a: &Endpoint<'_>,
    b: &Endpoint<'_>,
    profile: &LinkTechnologyProfile,
    wired: &(impl WiredLinks + ?Sized),
) -> Result<Feasibility, LinkError> {
    for ep in [a, b] {
        if !ep.technologies.contains(&profile.name) {
            return Err(LinkError::UnsupportedTechnology {
                endpoint: ep.id.to_string(),
                tech: profile.name,
            });
        }
    }
    if !profile.is_wireless() {
        return Ok(if wired.wired_between(a.id, b.id, profile.name) {
            Feasibility::Feasible { margin_db: f64::INFINITY }
        } else {
            Feasibility::Infeasible { margin_db: None }
        });
    }
    let m = margin_db(profile, a.position.distance(&b.position));
    Ok(if m >= 0.0 {
        Feasibility::Feasible { margin_db: m }
    } else {
        Feasibility::Infeasible { margin_db: Some(m) }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub latency_ms: f64,
    pub delivered_mbps: f64,
    pub loss_prob: f64,
}

pub fn link_metrics(profile: &LinkTechnologyProfile, offered_load_mbps: f64) -> LinkMetrics {
    link_metrics_with_capacity(profile, profile.capacity_mbps, offered_load_mbps)
}

/// Metrics against an explicit capacity, e.g. a slice's reservation on a link.
pub fn link_metrics_with_capacity(
    profile: &LinkTechnologyProfile,
    capacity_mbps: f64,
    offered_load_mbps: f64,
) -> LinkMetrics {
    let offered = offered_load_mbps.max(0.0);
    let capacity = capacity_mbps.max(f64::MIN_POSITIVE);
    let utilization = offered / capacity;
    let latency_ms = profile.base_latency_ms
        * (1.0 + (utilization - profile.congestion_knee).max(0.0) * profile.congestion_slope);
    let overflow = if offered > 0.0 { (offered - capacity).max(0.0) / offered } else { 0.0 };
    let loss_prob = (1.0 - profile.per_hop_reliability + overflow).clamp(0.0, 1.0);
    LinkMetrics {
        latency_ms,
        delivered_mbps: offered.min(capacity),
        loss_prob,
    }
}

pub fn energy_cost(profile: &LinkTechnologyProfile, bytes: u64) -> f64 {
    profile.energy_per_byte_uj * bytes as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ProfileFile {
    version: u32,
    #[serde(default)]
    profile: Vec<LinkTechnologyProfile>,
}

/// Technology profiles indexed by technology.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    pub version: u32,
    profiles: BTreeMap<Technology, LinkTechnologyProfile>,
}

#[derive(Debug, Error)]
pub enum ProfileTableError {
    #[error("profile file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] LinkError),
    #[error("duplicate profile {0}")]
    Duplicate(Technology),
}

impl ProfileTable {
    pub fn defaults() -> Self {
        Self::from_toml(DEFAULT_PROFILES).expect("bundled profile table is valid")
    }

    pub fn default_toml() -> &'static str {
        DEFAULT_PROFILES
    }

    pub fn from_toml(text: &str) -> Result<Self, ProfileTableError> {
        let file: ProfileFile = toml::from_str(text)?;
        let mut profiles = BTreeMap::new();
        for p in file.profile {
            p.validate()?;
            if profiles.insert(p.name, p.clone()).is_some() {
                return Err(ProfileTableError::Duplicate(p.name));
            }
        }
        Ok(Self { version: file.version, profiles })
    }

    pub fn get(&self, tech: Technology) -> Option<&LinkTechnologyProfile> {
        self.profiles.get(&tech)
    }

    /// Panics when the technology is missing; tables built from the defaults cover all.
    pub fn profile(&self, tech: Technology) -> &LinkTechnologyProfile {
        self.profiles
            .get(&tech)
            .unwrap_or_else(|| panic!("no profile for {tech}"))
    }

    pub fn insert(&mut self, profile: LinkTechnologyProfile) -> Result<(), LinkError> {
        profile.validate()?;
        self.profiles.insert(profile.name, profile);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &LinkTechnologyProfile> {
        self.profiles.values()
    }
}

impl Default for ProfileTable {
    fn default() -> Self {
        Self::defaults()
    }
}
