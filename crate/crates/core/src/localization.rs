//! Multi-technology localization: noisy ranging, weighted Gauss-Newton trilateration,
//! inverse-covariance fusion, constant-velocity tracking and zone membership.
//!
//! Every technology produces the same [`PositionEstimate`], so consumers (proximity
//! detection, location-based triggers) never see which radio produced a fix.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{triangle_area, Point2, Polygon};
use crate::kernel::SimTime;
use crate::linkmodel::{LinkTechnologyProfile, ProfileTable, Technology};
use crate::topology::NodeId;

pub const COLLINEARITY_EPS_M2: f64 = 1e-6;
pub const GN_STEP_TOL_M: f64 = 1e-6;
pub const GN_MAX_ITER: usize = 50;
pub const DEFAULT_STALENESS_MS: f64 = 500.0;
pub const DEFAULT_PROCESS_NOISE: f64 = 0.1;
/// Velocity variance of a fresh track, m^2/s^2. Large enough to dominate the steady
/// state so the covariance shrinks monotonically.
pub const INITIAL_SPEED_VAR: f64 = 10.0;
/// Floor for recorded ranging sigma so weights stay finite.
const MIN_SIGMA_M: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalizationError {
    #[error("anchor `{anchor}` is {distance_m:.1} m away, beyond {max_m:.1} m")]
    OutOfRange { anchor: NodeId, distance_m: f64, max_m: f64 },
    #[error("{0} does not support ranging")]
    NoRangingSupport(Technology),
    #[error("anchors are collinear")]
    CollinearAnchors,
    #[error("need at least 3 anchors, got {0}")]
    TooFewAnchors(usize),
    #[error("trilateration did not converge")]
    NoConvergence,
    #[error("no estimates to fuse")]
    EmptyInput,
    #[error("estimate at {at} is older than the staleness window")]
    StaleEstimate { at: SimTime },
    #[error("time step must be positive")]
    NonPositiveDt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeMeasurement {
    pub anchor: NodeId,
    pub anchor_position: Point2,
    pub device: NodeId,
    pub range_m: f64,
    pub sigma_m: f64,
    pub technology: Technology,
    pub timestamp: SimTime,
}

pub fn measure_range<R: Rng + ?Sized>(
    anchor: &str,
    anchor_position: Point2,
    device: &str,
    true_position: Point2,
    profile: &LinkTechnologyProfile,
    rng: &mut R,
    timestamp: SimTime,
) -> Result<RangeMeasurement, LocalizationError> {
    if !profile.supports_ranging {
        return Err(LocalizationError::NoRangingSupport(profile.name));
    }
    let d = anchor_position.distance(&true_position);
    let max_m = profile.max_range_m();
    if d > max_m {
        return Err(LocalizationError::OutOfRange { anchor: anchor.to_string(), distance_m: d, max_m });
    }
    let noise = if profile.range_sigma_m > 0.0 {
        Normal::new(0.0, profile.range_sigma_m).expect("finite sigma").sample(rng)
    } else {
        0.0
    };
    Ok(RangeMeasurement {
        anchor: anchor.to_string(),
        anchor_position,
        device: device.to_string(),
        range_m: (d + noise).max(0.0),
        sigma_m: profile.range_sigma_m.max(MIN_SIGMA_M),
        technology: profile.name,
        timestamp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub mean: Point2,
    /// Row-major 2x2, m^2.
    pub covariance: [[f64; 2]; 2],
    pub timestamp: SimTime,
    pub sources: BTreeSet<Technology>,
}

impl PositionEstimate {
    pub fn cov(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.covariance[0][0],
            self.covariance[0][1],
            self.covariance[1][0],
            self.covariance[1][1],
        )
    }

    pub fn mean_vec(&self) -> Vector2<f64> {
        Vector2::new(self.mean.x, self.mean.y)
    }

    pub fn from_parts(
        mean: Vector2<f64>,
        cov: Matrix2<f64>,
        timestamp: SimTime,
        sources: BTreeSet<Technology>,
    ) -> Self {
        // symmetrize against round-off
        let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        Self {
            mean: Point2::new(mean[0], mean[1]),
            covariance: [[cov[(0, 0)], off], [off, cov[(1, 1)]]],
            timestamp,
            sources,
        }
    }

    pub fn error_to(&self, truth: &Point2) -> f64 {
        self.mean.distance(truth)
    }
}

/// Residuals `range_i - |x - anchor_i|` and their gradients with respect to `x`.
pub fn residuals_and_jacobian(x: Vector2<f64>, ms: &[RangeMeasurement]) -> (Vec<f64>, Vec<Vector2<f64>>) {
    ms.iter()
        .map(|m| {
            let a = Vector2::new(m.anchor_position.x, m.anchor_position.y);
            let diff = x - a;
            let dist = diff.norm().max(1e-12);
            (m.range_m - dist, -diff / dist)
        })
        .unzip()
}

/// Weighted Gauss-Newton least squares over range residuals from one technology.
///
/// Starts at the anchor centroid, stops when the step is below 1e-6 m or after 50
/// iterations, and reports the inverse Gauss-Newton Hessian as covariance.
pub fn trilaterate(ms: &[RangeMeasurement]) -> Result<PositionEstimate, LocalizationError> {
    let anchors: BTreeMap<&str, Point2> =
        ms.iter().map(|m| (m.anchor.as_str(), m.anchor_position)).collect();
    if anchors.len() < 3 {
        return Err(LocalizationError::TooFewAnchors(anchors.len()));
    }
    let pts: Vec<Point2> = anchors.values().copied().collect();
    let mut max_area: f64 = 0.0;
    for i in 0..pts.len() {
        for j in (i + 1)..pts.len() {
            for k in (j + 1)..pts.len() {
                max_area = max_area.max(triangle_area(&pts[i], &pts[j], &pts[k]));
            }
        }
    }
    if max_area <= COLLINEARITY_EPS_M2 {
        return Err(LocalizationError::CollinearAnchors);
    }

    let n = ms.len() as f64;
    let mut x = Vector2::new(
        ms.iter().map(|m| m.anchor_position.x).sum::<f64>() / n,
        ms.iter().map(|m| m.anchor_position.y).sum::<f64>() / n,
    );
    let normal = |x: Vector2<f64>| -> (Matrix2<f64>, Vector2<f64>) {
        let (r, j) = residuals_and_jacobian(x, ms);
        let mut h = Matrix2::zeros();
        let mut g = Vector2::zeros();
        for ((ri, ji), m) in r.iter().zip(&j).zip(ms) {
            let w = 1.0 / (m.sigma_m * m.sigma_m);
            h += w * ji * ji.transpose();
            g += w * ji * *ri;
        }
        (h, g)
    };
    for _ in 0..GN_MAX_ITER {
        let (h, g) = normal(x);
        let step = h.try_inverse().ok_or(LocalizationError::NoConvergence)? * (-g);
        if !step.iter().all(|v| v.is_finite()) {
            return Err(LocalizationError::NoConvergence);
        }
        x += step;
        if step.norm() < GN_STEP_TOL_M {
            break;
        }
    }
    let (h, _) = normal(x);
    let cov = h.try_inverse().ok_or(LocalizationError::NoConvergence)?;
    if !x.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(LocalizationError::NoConvergence);
    }
    let timestamp = ms.iter().map(|m| m.timestamp).max().unwrap_or_default();
    let sources = ms.iter().map(|m| m.technology).collect();
    Ok(PositionEstimate::from_parts(x, cov, timestamp, sources))
}

/// Information-form fusion: `S = (sum S_i^-1)^-1`, `m = S sum S_i^-1 m_i`.
///
/// All estimates must lie within `staleness` of the newest one.
pub fn fuse(estimates: &[PositionEstimate], staleness: SimTime) -> Result<PositionEstimate, LocalizationError> {
    let newest = estimates.iter().map(|e| e.timestamp).max().ok_or(LocalizationError::EmptyInput)?;
    if let Some(old) = estimates.iter().find(|e| newest.saturating_sub(e.timestamp) > staleness) {
        return Err(LocalizationError::StaleEstimate { at: old.timestamp });
    }
    if estimates.len() == 1 {
        return Ok(estimates[0].clone());
    }
    let mut info = Matrix2::zeros();
    let mut info_mean = Vector2::zeros();
    let mut sources = BTreeSet::new();
    for e in estimates {
        let inv = e.cov().try_inverse().ok_or(LocalizationError::NoConvergence)?;
        info += inv;
        info_mean += inv * e.mean_vec();
        sources.extend(e.sources.iter().copied());
    }
    let cov = info.try_inverse().ok_or(LocalizationError::NoConvergence)?;
    Ok(PositionEstimate::from_parts(cov * info_mean, cov, newest, sources))
}

/// Drop estimates older than `staleness` relative to `now`, then fuse the rest.
pub fn fuse_fresh(
    estimates: &[PositionEstimate],
    now: SimTime,
    staleness: SimTime,
) -> Result<PositionEstimate, LocalizationError> {
    let fresh: Vec<PositionEstimate> = estimates
        .iter()
        .filter(|e| now.saturating_sub(e.timestamp) <= staleness)
        .cloned()
        .collect();
    fuse(&fresh, staleness)
}

/// Constant-velocity Kalman track, state `[x, y, vx, vy]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub state: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub timestamp: SimTime,
    pub sources: BTreeSet<Technology>,
    /// White-acceleration spectral density, m^2/s^3.
    pub process_noise: f64,
}

impl Track {
    pub fn start(first: &PositionEstimate, process_noise: f64) -> Self {
        let mut p = Matrix4::zeros();
        p.fixed_view_mut::<2, 2>(0, 0).copy_from(&first.cov());
        p[(2, 2)] = INITIAL_SPEED_VAR;
        p[(3, 3)] = INITIAL_SPEED_VAR;
        Self {
            state: Vector4::new(first.mean.x, first.mean.y, 0.0, 0.0),
            covariance: p,
            timestamp: first.timestamp,
            sources: first.sources.clone(),
            process_noise,
        }
    }

    pub fn estimate(&self) -> PositionEstimate {
        let cov: Matrix2<f64> = self.covariance.fixed_view::<2, 2>(0, 0).into_owned();
        PositionEstimate::from_parts(
            Vector2::new(self.state[0], self.state[1]),
            cov,
            self.timestamp,
            self.sources.clone(),
        )
    }
}

/// Predict by `dt_s` seconds, then correct with `estimate`.
pub fn track_update(track: &Track, estimate: &PositionEstimate, dt_s: f64) -> Result<Track, LocalizationError> {
    if !(dt_s > 0.0) {
        return Err(LocalizationError::NonPositiveDt);
    }
    let mut f = Matrix4::identity();
    f[(0, 2)] = dt_s;
    f[(1, 3)] = dt_s;
    let q = track.process_noise;
    let (d3, d2) = (dt_s.powi(3) / 3.0, dt_s.powi(2) / 2.0);
    #[rustfmt::skip]
    let qm = Matrix4::new(
        d3 * q, 0.0, d2 * q, 0.0,
        0.0, d3 * q, 0.0, d2 * q,
        d2 * q, 0.0, dt_s * q, 0.0,
        0.0, d2 * q, 0.0, dt_s * q,
    );
    let x_pred = f * track.state;
    let p_pred = f * track.covariance * f.transpose() + qm;

    let h = Matrix2x4::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0);
    let s = h * p_pred * h.transpose() + estimate.cov();
    let s_inv = s.try_inverse().ok_or(LocalizationError::NoConvergence)?;
    let k: Matrix4x2<f64> = p_pred * h.transpose() * s_inv;
    let innovation = estimate.mean_vec() - h * x_pred;
    let state = x_pred + k * innovation;
    // Joseph form keeps the covariance symmetric positive definite
    let i_kh = Matrix4::identity() - k * h;
    let covariance = i_kh * p_pred * i_kh.transpose() + k * estimate.cov() * k.transpose();
    let mut sources = track.sources.clone();
    sources.extend(estimate.sources.iter().copied());
    Ok(Track {
        state,
        covariance: 0.5 * (covariance + covariance.transpose()),
        timestamp: estimate.timestamp,
        sources,
        process_noise: track.process_noise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: String,
    pub polygon: Polygon,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_enter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub on_exit: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneTransition {
    Enter,
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneEvent {
    pub zone: String,
    pub transition: ZoneTransition,
    pub trigger: Option<String>,
}

/// Membership changes of `position` against `zones`; `inside` holds the zones the
/// device was in before and is updated in place.
pub fn zone_events(position: &Point2, zones: &[Zone], inside: &mut BTreeSet<String>) -> Vec<ZoneEvent> {
    let mut out = Vec::new();
    for z in zones {
        let now_in = z.polygon.contains(position);
        let was_in = inside.contains(&z.id);
        if now_in && !was_in {
            inside.insert(z.id.clone());
            out.push(ZoneEvent { zone: z.id.clone(), transition: ZoneTransition::Enter, trigger: z.on_enter.clone() });
        } else if !now_in && was_in {
            inside.remove(&z.id);
            out.push(ZoneEvent { zone: z.id.clone(), transition: ZoneTransition::Exit, trigger: z.on_exit.clone() });
        }
    }
    out
}

/// A ranging-capable fixed node.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub id: NodeId,
    pub position: Point2,
    pub technologies: Vec<Technology>,
}

/// One localization epoch for a device: range to every reachable anchor per shared
/// ranging technology and trilaterate each technology that has three anchors.
/// Technologies are visited in a fixed order so random draws are reproducible.
pub fn localize_epoch<R: Rng + ?Sized>(
    anchors: &[Anchor],
    device: &str,
    device_techs: &[Technology],
    true_position: Point2,
    profiles: &ProfileTable,
    rng: &mut R,
    t: SimTime,
) -> Vec<PositionEstimate> {
    let mut techs: Vec<Technology> = device_techs.to_vec();
    techs.sort();
    techs.dedup();
    let mut out = Vec::new();
    for tech in techs {
        let Some(profile) = profiles.get(tech) else { continue };
        if !profile.supports_ranging {
            continue;
        }
        let ms: Vec<RangeMeasurement> = anchors
            .iter()
            .filter(|a| a.technologies.contains(&tech))
            .filter_map(|a| measure_range(&a.id, a.position, device, true_position, profile, rng, t).ok())
            .collect();
        if let Ok(e) = trilaterate(&ms) {
            out.push(e);
        }
    }
    out
}
