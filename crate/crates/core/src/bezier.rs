//! Continuous backbone reconstruction with a quartic Bézier curve whose first
//! control point is pinned to the robot base.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sim::{dist, Point3};

pub const DEGREE: usize = 4;
const BINOMIAL: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// Samples used for the coarse nearest-point search in [`curve_error`].
pub const ERROR_SAMPLES: usize = 200;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BezierCurve {
    pub control: [Point3; 5],
}

/// The five quartic Bernstein polynomials at `t`.
pub fn bernstein(t: f64) -> [f64; 5] {
    let s = 1.0 - t;
    let mut out = [0.0; 5];
    for (i, o) in out.iter_mut().enumerate() {
        *o = BINOMIAL[i] * s.powi((DEGREE - i) as i32) * t.powi(i as i32);
    }
    out
}

impl BezierCurve {
    pub fn base(&self) -> Point3 {
        self.control[0]
    }

    pub fn eval(&self, t: f64) -> Result<Point3> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!("Bézier parameter {t} outside [0, 1]")));
        }
        Ok(self.eval_unchecked(t))
    }

    fn eval_unchecked(&self, t: f64) -> Point3 {
        let b = bernstein(t);
        let mut p = [0.0; 3];
        for (w, c) in b.iter().zip(&self.control) {
            for k in 0..3 {
                p[k] += w * c[k];
            }
        }
        p
    }

    /// `m` evaluations at `t = j / (m - 1)`.
    pub fn sample(&self, m: usize) -> Result<Vec<Point3>> {
        if m < 2 {
            return Err(Error::Parameter("need at least two curve samples".into()));
        }
        Ok((0..m).map(|j| self.eval_unchecked(j as f64 / (m - 1) as f64)).collect())
    }

    /// 15 comma-separated reals, control points in order.
    pub fn to_csv_row(&self) -> String {
        self.control
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let vals: Vec<f64> = row
            .trim()
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                file: "curve csv".into(),
                line: 1,
                msg: e.to_string(),
            })?;
        if vals.len() != 15 {
            return Err(Error::Parse {
                file: "curve csv".into(),
                line: 1,
                msg: format!("expected 15 values, found {}", vals.len()),
            });
        }
        let mut control = [[0.0; 3]; 5];
        for (i, c) in control.iter_mut().enumerate() {
            c.copy_from_slice(&vals[3 * i..3 * i + 3]);
        }
        Ok(Self { control })
    }
}

/// Normalised cumulative chord length from `base` through each point.
pub fn chord_params(points: &[Point3], base: &Point3) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::Degenerate(format!("need at least two points, got {}", points.len())));
    }
    let mut cum = Vec::with_capacity(points.len());
    let mut prev = base;
    let mut total = 0.0;
    for p in points {
        total += dist(prev, p);
        cum.push(total);
        prev = p;
    }
    if !(total > 0.0) {
        return Err(Error::Degenerate("total chord length is zero".into()));
    }
    Ok(cum.into_iter().map(|c| c / total).collect())
}

/// Least-squares fit of `p1..p4` with `p0` pinned to `base`.
///
/// Minimises `Σ_k ‖P_k − B(t_k)‖²` through the normal equations of the
/// Bernstein design matrix, one coordinate axis at a time.
pub fn fit(points: &[Point3], params: &[f64], base: &Point3) -> Result<BezierCurve> {
    if points.len() != params.len() {
        return Err(Error::dim("fit", "parameter count", points.len(), params.len()));
    }
    let mut distinct: Vec<f64> = params.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < DEGREE {
        return Err(Error::Singular(format!(
            "{} distinct parameters for {DEGREE} free control points",
            distinct.len()
        )));
    }
    let n = points.len();
    let design = DMatrix::from_fn(n, DEGREE, |k, j| bernstein(params[k])[j + 1]);
    let normal = design.transpose() * &design;
    let chol = normal
        .cholesky()
        .ok_or_else(|| Error::Singular("Bernstein normal matrix is not positive definite".into()))?;
    let mut control = [*base; 5];
    for axis in 0..3 {
        let rhs = DVector::from_fn(n, |k, _| points[k][axis] - bernstein(params[k])[0] * base[axis]);
        let sol = chol.solve(&(design.transpose() * rhs));
        for j in 0..DEGREE {
            control[j + 1][axis] = sol[j];
        }
    }
    Ok(BezierCurve { control })
}

/// Sum of squared residuals `Σ_k ‖P_k − B(t_k)‖²`.
pub fn objective(curve: &BezierCurve, points: &[Point3], params: &[f64]) -> f64 {
    points
        .iter()
        .zip(params)
        .map(|(p, &t)| {
            let b = curve.eval_unchecked(t);
            (0..3).map(|k| (p[k] - b[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

/// Distance from `p` to the curve: nearest of [`ERROR_SAMPLES`] uniform
/// samples, then refined by golden-section search on the neighbouring
/// parameter interval.
pub fn distance_to_curve(curve: &BezierCurve, samples: &[Point3], p: &Point3) -> f64 {
    let m = samples.len();
    let (j, _) = samples
        .iter()
        .enumerate()
        .map(|(j, s)| (j, dist(s, p)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
    let step = 1.0 / (m - 1) as f64;
    let mut lo = (j as f64 - 1.0).max(0.0) * step;
    let mut hi = ((j + 1) as f64 * step).min(1.0);
    let f = |t: f64| dist(&curve.eval_unchecked(t), p);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..80 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
    }
    f(0.5 * (lo + hi)).min(dist(&samples[j], p))
}

/// Mean and maximum distance from each reference point to the curve.
pub fn curve_error(curve: &BezierCurve, reference: &[Point3]) -> Result<(f64, f64)> {
    if reference.is_empty() {
        return Err(Error::Degenerate("empty reference backbone".into()));
    }
    let samples = curve.sample(ERROR_SAMPLES)?;
    let d: Vec<f64> = reference.iter().map(|p| distance_to_curve(curve, &samples, p)).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let max = d.iter().copied().fold(0.0, f64::max);
    Ok((mean, max))
}
