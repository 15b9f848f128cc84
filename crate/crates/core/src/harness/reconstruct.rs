use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::bezier::{chord_params, curve_error, fit, BezierCurve};
use crate::error::Result;
use crate::sim::{backbone_samples, ExternalLoad, Point3, RobotSpec, TendonDisplacement, THETA_MAX};

/// Dense ground-truth samples along the backbone for curve comparison.
pub const DENSE_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub curve: BezierCurve,
    pub mean_error: f64,
    pub max_error: f64,
}

/// Fit a base-pinned quartic through `points` and compare it with the
/// simulated backbone for tendon state `q` under `load`.
pub fn reconstruct(points: &[Point3], q: &TendonDisplacement, load: &ExternalLoad, spec: &RobotSpec) -> Result<Reconstruction> {
    let base = [0.0; 3];
    let t = chord_params(points, &base)?;
    let curve = fit(points, &t, &base)?;
    let dense = backbone_samples(q, load, spec, DENSE_SAMPLES)?;
    let (mean_error, max_error) = curve_error(&curve, &dense)?;
    Ok(Reconstruction {
        curve,
        mean_error,
        max_error,
    })
}

/// `bends × directions` tendon states covering the workspace: bend angles
/// evenly spaced in (0, θmax], directions evenly spaced over a revolution.
pub fn envelope(spec: &RobotSpec, bends: usize, directions: usize) -> Vec<TendonDisplacement> {
    let mut out = Vec::with_capacity(bends * directions);
    for b in 1..=bends {
        let theta = THETA_MAX * b as f64 / bends as f64;
        for d in 0..directions {
            let phi = 2.0 * PI * d as f64 / directions as f64;
            let qx = spec.pitch_radius * theta * phi.cos();
            let qy = spec.pitch_radius * theta * phi.sin();
            out.push([qx, qy, -qx, -qy]);
        }
    }
    out
}
