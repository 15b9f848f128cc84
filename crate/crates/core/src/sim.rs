//! Ground-truth generator: single-segment constant-curvature kinematics for a
//! four-tendon robot, a quasi-static tip-load perturbation, marker
//! extraction and actuation schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// Displacement pulled on each of the four tendons.
pub type TendonDisplacement = [f64; 4];

/// Maximum bend angle of the segment (60°).
pub const THETA_MAX: f64 = PI / 3.0;

/// Gravity acting on the 10 g loading mass.
pub const LOAD_MAGNITUDE: f64 = 0.010 * 9.81;

const STRAIGHT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotSpec {
    /// Backbone length.
    pub length: f64,
    /// Radius at which the tendons are routed.
    pub pitch_radius: f64,
    /// Tip deflection per unit perpendicular force.
    pub load_compliance: f64,
    /// Arc-length positions of the markers, strictly increasing.
    pub marker_arcs: Vec<f64>,
}

impl RobotSpec {
    /// Robot with `n` markers evenly spaced in arc length, the last at the tip.
    pub fn uniform(length: f64, pitch_radius: f64, load_compliance: f64, n: usize) -> Result<Self> {
        let spec = Self {
            length,
            pitch_radius,
            load_compliance,
            marker_arcs: (1..=n).map(|i| i as f64 * length / n as f64).collect(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.length > 0.0) || !(self.pitch_radius > 0.0) || !(self.load_compliance >= 0.0) {
            return Err(Error::Config("robot length and pitch radius must be positive, compliance non-negative".into()));
        }
        if self.marker_arcs.len() < 2 {
            return Err(Error::Config("at least two markers are required".into()));
        }
        let mut prev = 0.0;
        for &s in &self.marker_arcs {
            if !(s > prev) || s > self.length {
                return Err(Error::Config(format!("marker arcs must increase within (0, L]: {:?}", self.marker_arcs)));
            }
            prev = s;
        }
        Ok(())
    }

    pub fn marker_count(&self) -> usize {
        self.marker_arcs.len()
    }
}

impl Default for RobotSpec {
    /// Length 100 (mm-analog), tendons at radius 5, about 8 units of tip
    /// deflection under the 10 g load, five markers.
    fn default() -> Self {
        Self::uniform(100.0, 5.0, 80.0, 5).expect("valid default robot")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcState {
    pub curvature: f64,
    /// Bending-plane angle in (-π, π].
    pub phi: f64,
    /// Total bend angle, curvature × length.
    pub theta: f64,
}

/// Map tendon displacements to the arc parameters of the segment.
///
/// Overdrive beyond [`THETA_MAX`] is clamped.
pub fn tendon_to_arc(q: &TendonDisplacement, spec: &RobotSpec) -> ArcState {
    let tx = (q[0] - q[2]) / (2.0 * spec.pitch_radius);
    let ty = (q[1] - q[3]) / (2.0 * spec.pitch_radius);
    let theta = tx.hypot(ty).min(THETA_MAX);
    let phi = if theta == 0.0 { 0.0 } else { ty.atan2(tx) };
    // atan2(−0, x<0) = −π; keep the half-open convention.
    let phi = if phi <= -PI { PI } else { phi };
    ArcState {
        curvature: theta / spec.length,
        phi,
        theta,
    }
}

/// Point on the constant-curvature backbone at arc length `s`.
pub fn backbone_point(state: &ArcState, s: f64, length: f64) -> Result<Point3> {
    if !(0.0..=length).contains(&s) {
        return Err(Error::Contract(format!("arc length {s} outside [0, {length}]")));
    }
    let k = state.curvature;
    if k.abs() < STRAIGHT_EPS {
        return Ok([0.0, 0.0, s]);
    }
    let radial = (1.0 - (k * s).cos()) / k;
    Ok([radial * state.phi.cos(), radial * state.phi.sin(), (k * s).sin() / k])
}

/// Unit tangent at the tip of the arc.
pub fn tip_tangent(state: &ArcState) -> Point3 {
    let t = state.theta;
    [t.sin() * state.phi.cos(), t.sin() * state.phi.sin(), t.cos()]
}

/// The four trial load conditions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LoadCondition {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "fe1")]
    Fe1,
    #[serde(rename = "fe2")]
    Fe2,
    #[serde(rename = "fe3")]
    Fe3,
}

impl LoadCondition {
    pub const ALL: [LoadCondition; 4] = [Self::None, Self::Fe1, Self::Fe2, Self::Fe3];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Fe1 => "fe1",
            Self::Fe2 => "fe2",
            Self::Fe3 => "fe3",
        }
    }

    /// Tip force for this condition: the 10 g mass pulled in three distinct
    /// directions (sideways in the image plane, obliquely towards the
    /// camera, and straight down the base axis).
    pub fn load(self) -> ExternalLoad {
        let m = LOAD_MAGNITUDE;
        let force = match self {
            Self::None => [0.0; 3],
            Self::Fe1 => [m, 0.0, 0.0],
            Self::Fe2 => [-0.6 * m, -0.8 * m, 0.0],
            Self::Fe3 => [0.0, 0.0, -m],
        };
        ExternalLoad { force }
    }
}

impl fmt::Display for LoadCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoadCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown load condition {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExternalLoad {
    pub force: Point3,
}

/// Cantilever deflection profile normalised to 1 at the tip.
pub fn cantilever_profile(s: f64, length: f64) -> f64 {
    s * s * (3.0 * length - s) / (2.0 * length.powi(3))
}

/// Displace points at arc lengths `arcs` by the component of `load`
/// perpendicular to the tip tangent, scaled by the cantilever profile.
pub fn apply_load(points: &[Point3], arcs: &[f64], load: &ExternalLoad, spec: &RobotSpec, tip_tangent: &Point3) -> Result<Vec<Point3>> {
    if points.len() != arcs.len() {
        return Err(Error::dim("apply_load", "arc positions", points.len(), arcs.len()));
    }
    let f = load.force;
    let along = dot(&f, tip_tangent);
    let perp = [f[0] - along * tip_tangent[0], f[1] - along * tip_tangent[1], f[2] - along * tip_tangent[2]];
    Ok(points
        .iter()
        .zip(arcs)
        .map(|(p, &s)| {
            let w = spec.load_compliance * cantilever_profile(s, spec.length);
            [p[0] + w * perp[0], p[1] + w * perp[1], p[2] + w * perp[2]]
        })
        .collect())
}

/// Loaded backbone positions at arbitrary arc lengths.
pub fn shape_at(q: &TendonDisplacement, load: &ExternalLoad, spec: &RobotSpec, arcs: &[f64]) -> Result<Vec<Point3>> {
    let state = tendon_to_arc(q, spec);
    let pts = arcs
        .iter()
        .map(|&s| backbone_point(&state, s, spec.length))
        .collect::<Result<Vec<_>>>()?;
    apply_load(&pts, arcs, load, spec, &tip_tangent(&state))
}

/// Ground-truth marker positions for actuation `q` under `load`.
pub fn marker_positions(q: &TendonDisplacement, load: &ExternalLoad, spec: &RobotSpec) -> Result<Vec<Point3>> {
    shape_at(q, load, spec, &spec.marker_arcs)
}

/// `m` backbone points evenly spaced in arc length from base to tip.
pub fn backbone_samples(q: &TendonDisplacement, load: &ExternalLoad, spec: &RobotSpec, m: usize) -> Result<Vec<Point3>> {
    if m < 2 {
        return Err(Error::Parameter("need at least two backbone samples".into()));
    }
    let arcs: Vec<f64> = (0..m).map(|j| spec.length * j as f64 / (m - 1) as f64).collect();
    shape_at(q, load, spec, &arcs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub q: TendonDisplacement,
    pub load: LoadCondition,
}

/// Tendon schedule for one trial.
///
/// Each cycle traces a rosette: the signed bend angle oscillates three times
/// between ±60° while the bending direction turns through half a revolution,
/// so every direction is visited on both sides. Phase and amplitude are
/// jittered per cycle from `seed`. Antagonistic pairs satisfy `q1 = -q3`,
/// `q2 = -q4`.
pub fn trajectory(cycles: usize, steps_per_cycle: usize, seed: u64, spec: &RobotSpec, load: LoadCondition) -> Result<Vec<TrajectoryStep>> {
    if cycles == 0 || steps_per_cycle == 0 {
        return Err(Error::Parameter("trajectory needs at least one cycle and one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cycles * steps_per_cycle);
    for _ in 0..cycles {
        let bend_phase = rng.gen_range(0.0..2.0 * PI);
        let dir_phase = rng.gen_range(0.0..2.0 * PI);
        let amplitude = THETA_MAX * rng.gen_range(0.85..1.0);
        for k in 0..steps_per_cycle {
            let u = k as f64 / steps_per_cycle as f64;
            let bend = amplitude * (2.0 * PI * 3.0 * u + bend_phase).sin();
            let dir = PI * u + dir_phase;
            let qx = spec.pitch_radius * bend * dir.cos();
            let qy = spec.pitch_radius * bend * dir.sin();
            out.push(TrajectoryStep {
                q: [qx, qy, -qx, -qy],
                load,
            });
        }
    }
    Ok(out)
}

pub(crate) fn dot(a: &Point3, b: &Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}
