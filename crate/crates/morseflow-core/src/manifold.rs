//! Built-in Riemannian manifolds presented as explicit finite atlases.
//!
//! Four models are provided:
//!
//! * `flat-torus`: the square torus, one periodic chart, flat metric.
//! * `ellipsoid-sphere`: the round unit sphere in two stereographic charts.
//! * `morse-local-model`: Euclidean space with the standard quadratic
//!   normal form of a nondegenerate critical point.
//! * `cp2-chart`: a single 4-dimensional linear chart with a diagonal
//!   constant metric and one index-2 critical point, modelling the gap
//!   region between two quadric levels.
//!
//! Charts are numbered; a [`Point`] is a chart id plus coordinates. All
//! geometric data (metric, transitions, their derivatives) is closed-form.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector};

#[allow(unused_imports)]
use crate::real::FloatExt;
use crate::{Error, Result};

/// A manifold point: which chart it lives in and its coordinates there.
///
/// On the torus the coordinates are *not* reduced modulo the period; the
/// flow integrates in the universal cover and wraps only when asked via
/// [`Atlas::canonicalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub chart: usize,
    pub coords: DVector<f64>,
}

impl Point {
    pub fn new(chart: usize, coords: &[f64]) -> Self {
        Point {
            chart,
            coords: DVector::from_row_slice(coords),
        }
    }

    pub fn from_vector(chart: usize, coords: DVector<f64>) -> Self {
        Point { chart, coords }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Kind {
    FlatTorus,
    EllipsoidSphere { radius: f64, core: f64 },
    MorseLocalModel { dim: usize, index: usize, radius: f64 },
    Cp2Chart { epsilon: f64 },
}

/// A built-in manifold with its atlas, metric, and transition maps.
#[derive(Debug, Clone)]
pub struct Atlas {
    kind: Kind,
}

fn take(params: &mut BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.remove(key).unwrap_or(default)
}

impl Atlas {
    /// Constructs a built-in manifold by name. Recognised names and their
    /// parameters (all optional):
    ///
    /// * `"flat-torus"`: no parameters.
    /// * `"ellipsoid-sphere"`: `radius` (chart ball radius, default 4),
    ///   `core` (fraction of the radius treated as the chart's safe core,
    ///   default 0.9).
    /// * `"morse-local-model"`: `dim` (default 2), `index` (default 1),
    ///   `radius` (domain ball radius, default 8).
    /// * `"cp2-chart"`: `epsilon` (scale of the chart, default 1; the
    ///   domain is the ball of radius `2 sqrt(epsilon)`).
    pub fn builtin(name: &str, params: &BTreeMap<String, f64>) -> Result<Atlas> {
        let mut p = params.clone();
        let kind = match name {
            "flat-torus" => Kind::FlatTorus,
            "ellipsoid-sphere" => {
                let radius = take(&mut p, "radius", 4.0);
                let core = take(&mut p, "core", 0.9);
                if radius <= 1.0 {
                    return Err(Error::BadParameter(
                        "ellipsoid-sphere radius must exceed 1 so the chart cores overlap".to_owned(),
                    ));
                }
                if !(0.0 < core && core < 1.0) {
                    return Err(Error::BadParameter("core must lie in (0, 1)".to_owned()));
                }
                Kind::EllipsoidSphere { radius, core }
            }
            "morse-local-model" => {
                let dim = take(&mut p, "dim", 2.0);
                let index = take(&mut p, "index", 1.0);
                let radius = take(&mut p, "radius", 8.0);
                if dim.fract() != 0.0 || dim < 1.0 {
                    return Err(Error::BadParameter("dim must be a positive integer".to_owned()));
                }
                let dim = dim as usize;
                if index.fract() != 0.0 || index < 0.0 || index as usize > dim {
                    return Err(Error::BadParameter(
                        "index must be an integer in 0..=dim".to_owned(),
                    ));
                }
                if radius <= 0.0 {
                    return Err(Error::BadParameter("radius must be positive".to_owned()));
                }
                Kind::MorseLocalModel {
                    dim,
                    index: index as usize,
                    radius,
                }
            }
            "cp2-chart" => {
                let epsilon = take(&mut p, "epsilon", 1.0);
                if epsilon <= 0.0 {
                    return Err(Error::BadParameter("epsilon must be positive".to_owned()));
                }
                Kind::Cp2Chart { epsilon }
            }
            other => return Err(Error::UnknownBuiltin(other.to_owned())),
        };
        if let Some((key, _)) = p.pop_first() {
            return Err(Error::BadParameter(alloc::format!(
                "unknown parameter `{key}` for manifold `{name}`"
            )));
        }
        Ok(Atlas { kind })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            Kind::FlatTorus => "flat-torus",
            Kind::EllipsoidSphere { .. } => "ellipsoid-sphere",
            Kind::MorseLocalModel { .. } => "morse-local-model",
            Kind::Cp2Chart { .. } => "cp2-chart",
        }
    }

    pub(crate) fn kind(&self) -> &Kind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            Kind::FlatTorus | Kind::EllipsoidSphere { .. } => 2,
            Kind::MorseLocalModel { dim, .. } => dim,
            Kind::Cp2Chart { .. } => 4,
        }
    }

    pub fn charts(&self) -> usize {
        match self.kind {
            Kind::EllipsoidSphere { .. } => 2,
            _ => 1,
        }
    }

    fn check(&self, p: &Point) -> Result<()> {
        if p.chart >= self.charts() {
            return Err(Error::ChartOutOfRange {
                chart: p.chart,
                charts: self.charts(),
            });
        }
        if p.coords.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: p.coords.len(),
            });
        }
        Ok(())
    }

    /// Whether the coordinates lie inside the open domain of their chart.
    pub fn contains(&self, p: &Point) -> bool {
        if self.check(p).is_err() {
            return false;
        }
        match self.kind {
            Kind::FlatTorus => true,
            Kind::EllipsoidSphere { radius, .. } => p.coords.norm() < radius,
            Kind::MorseLocalModel { radius, .. } => p.coords.norm() < radius,
            Kind::Cp2Chart { epsilon } => p.coords.norm_squared() < 4.0 * epsilon,
        }
    }

    /// Whether the point sits in the chart's core, the shrunken region the
    /// integrator is allowed to linger in. Leaving the core triggers a
    /// chart switch when a better chart exists.
    pub fn in_core(&self, p: &Point) -> bool {
        match self.kind {
            Kind::EllipsoidSphere { radius, core } => {
                p.chart < 2 && p.coords.len() == 2 && p.coords.norm() <= core * radius
            }
            _ => self.contains(p),
        }
    }

    /// Wraps torus angles into `[-pi, pi)`. Identity elsewhere.
    pub fn canonicalize(&self, p: &Point) -> Point {
        match self.kind {
            Kind::FlatTorus => {
                let coords = p.coords.map(|t| (t + PI).rem_euclid(2.0 * PI) - PI);
                Point::from_vector(p.chart, coords)
            }
            _ => p.clone(),
        }
    }

    /// Expresses `p` in chart `to`. Errors if the point is outside the
    /// overlap.
    pub fn transition(&self, p: &Point, to: usize) -> Result<Point> {
        self.check(p)?;
        if to >= self.charts() {
            return Err(Error::ChartOutOfRange {
                chart: to,
                charts: self.charts(),
            });
        }
        if to == p.chart {
            return Ok(p.clone());
        }
        match self.kind {
            Kind::EllipsoidSphere { radius, .. } => {
                let r2 = p.coords.norm_squared();
                if r2 <= (1.0 / radius) * (1.0 / radius) {
                    return Err(Error::NoOverlap {
                        from: p.chart,
                        to,
                    });
                }
                Ok(Point::from_vector(to, &p.coords / r2))
            }
            _ => unreachable!("single-chart manifolds have no other chart"),
        }
    }

    /// Jacobian of the transition map into chart `to`, evaluated at `p`.
    pub fn transition_jacobian(&self, p: &Point, to: usize) -> Result<DMatrix<f64>> {
        self.check(p)?;
        if to == p.chart {
            return Ok(DMatrix::identity(self.dim(), self.dim()));
        }
        match self.kind {
            Kind::EllipsoidSphere { radius, .. } => {
                if to >= 2 {
                    return Err(Error::ChartOutOfRange { chart: to, charts: 2 });
                }
                let r2 = p.coords.norm_squared();
                if r2 <= (1.0 / radius) * (1.0 / radius) {
                    return Err(Error::NoOverlap { from: p.chart, to });
                }
                // d(u / |u|^2) = (|u|^2 I - 2 u u^T) / |u|^4.
                let outer = &p.coords * p.coords.transpose();
                Ok((DMatrix::identity(2, 2) * r2 - outer * 2.0) / (r2 * r2))
            }
            _ => Err(Error::ChartOutOfRange {
                chart: to,
                charts: self.charts(),
            }),
        }
    }

    /// The chart this point should be integrated in: its own while inside
    /// the core, otherwise a chart whose core contains it (if any).
    pub fn preferred_chart(&self, p: &Point) -> usize {
        if self.in_core(p) {
            return p.chart;
        }
        for to in 0..self.charts() {
            if to == p.chart {
                continue;
            }
            if let Ok(q) = self.transition(p, to) {
                if self.in_core(&q) {
                    return to;
                }
            }
        }
        p.chart
    }

    /// Riemannian metric in chart coordinates at `p`.
    pub fn metric(&self, p: &Point) -> DMatrix<f64> {
        let n = self.dim();
        match self.kind {
            Kind::FlatTorus | Kind::MorseLocalModel { .. } => DMatrix::identity(n, n),
            Kind::EllipsoidSphere { .. } => {
                let d = 1.0 + p.coords.norm_squared();
                DMatrix::identity(2, 2) * (4.0 / (d * d))
            }
            Kind::Cp2Chart { .. } => {
                DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.5, 0.25, 0.25]))
            }
        }
    }

    /// Inverse metric at `p`.
    pub fn metric_inverse(&self, p: &Point) -> DMatrix<f64> {
        let n = self.dim();
        match self.kind {
            Kind::FlatTorus | Kind::MorseLocalModel { .. } => DMatrix::identity(n, n),
            Kind::EllipsoidSphere { .. } => {
                let d = 1.0 + p.coords.norm_squared();
                DMatrix::identity(2, 2) * (d * d / 4.0)
            }
            Kind::Cp2Chart { .. } => {
                DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 2.0, 4.0, 4.0]))
            }
        }
    }

    /// Coordinate partials of the metric: entry `b` is `d g / d x_b` at `p`.
    pub fn metric_partials(&self, p: &Point) -> Vec<DMatrix<f64>> {
        let n = self.dim();
        match self.kind {
            Kind::EllipsoidSphere { .. } => {
                let d = 1.0 + p.coords.norm_squared();
                (0..2)
                    .map(|b| DMatrix::identity(2, 2) * (-16.0 * p.coords[b] / (d * d * d)))
                    .collect()
            }
            _ => (0..n).map(|_| DMatrix::zeros(n, n)).collect(),
        }
    }

    /// Embedding of `p` into Euclidean space, used for reporting and for
    /// chart-independent distances: the torus embeds in R^4 by angles'
    /// cosines and sines, the sphere in R^3, linear charts tautologically.
    pub fn embed(&self, p: &Point) -> DVector<f64> {
        match self.kind {
            Kind::FlatTorus => DVector::from_row_slice(&[
                p.coords[0].cos(),
                p.coords[0].sin(),
                p.coords[1].cos(),
                p.coords[1].sin(),
            ]),
            Kind::EllipsoidSphere { .. } => {
                let r2 = p.coords.norm_squared();
                let d = 1.0 + r2;
                let (x, y) = (2.0 * p.coords[0] / d, 2.0 * p.coords[1] / d);
                // Chart 0 projects from the north pole, chart 1 from the
                // south; they assign opposite signs to z.
                let z = if p.chart == 0 { (r2 - 1.0) / d } else { (1.0 - r2) / d };
                DVector::from_row_slice(&[x, y, z])
            }
            Kind::MorseLocalModel { .. } | Kind::Cp2Chart { .. } => p.coords.clone(),
        }
    }

    /// A chart-independent comparison distance: exact geodesic distance on
    /// the flat torus, ambient chord distance on the sphere, Euclidean
    /// distance on the linear models. Monotone enough for convergence
    /// tests, deduplication, and dwell detection.
    pub fn distance(&self, a: &Point, b: &Point) -> f64 {
        match self.kind {
            Kind::FlatTorus => {
                let mut s = 0.0;
                for i in 0..2 {
                    let d = (a.coords[i] - b.coords[i] + PI).rem_euclid(2.0 * PI) - PI;
                    s += d * d;
                }
                s.sqrt()
            }
            Kind::EllipsoidSphere { .. } => (self.embed(a) - self.embed(b)).norm(),
            _ => (&a.coords - &b.coords).norm(),
        }
    }

    /// Chart-coordinate displacement from `a` to `b`, expressed in `a`'s
    /// chart. Uses the minimal image on the torus; on other manifolds `b`
    /// is transitioned into `a`'s chart first.
    pub fn displacement(&self, a: &Point, b: &Point) -> Result<DVector<f64>> {
        match self.kind {
            Kind::FlatTorus => Ok(DVector::from_fn(2, |i, _| {
                (b.coords[i] - a.coords[i] + PI).rem_euclid(2.0 * PI) - PI
            })),
            _ => {
                let b = if b.chart == a.chart {
                    b.clone()
                } else {
                    self.transition(b, a.chart)?
                };
                Ok(&b.coords - &a.coords)
            }
        }
    }
}
