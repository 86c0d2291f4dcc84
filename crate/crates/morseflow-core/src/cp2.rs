//! The four-dimensional local chart where a compactified moduli image
//! fails to be a C^1 submanifold: closed-form gradient flow, the
//! unbroken-connection formula between sections, and the blow-up scan
//! certifying that the would-be collar coordinate keeps a nonzero limit
//! along every admissible curve into the corner.
//!
//! The function is f = (-(v1^2) - v2^2 + v3^2 + v4^2)/2 with metric
//! diag(1, 1/2, 1/4, 1/4); the negative gradient is linear and the flow
//! diagonalizes with exponents (1, 2, -4, -4). Everything here is exact;
//! the numeric integrator only enters as a cross-check oracle.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[allow(unused_imports)]
use crate::real::FloatExt;

/// The fixed data of the local model: metric coefficients, flow
/// exponents, the chart scale, and the Morse indices of the three
/// critical points of the ambient picture (top, bottom, and the middle
/// one at this chart's origin).
#[derive(Debug, Clone)]
pub struct Cp2LocalModel {
    pub metric_diag: [f64; 4],
    pub exponents: [f64; 4],
    pub epsilon: f64,
    pub index_top: usize,
    pub index_bottom: usize,
    pub index_middle: usize,
}

impl Default for Cp2LocalModel {
    fn default() -> Self {
        Cp2LocalModel {
            metric_diag: [1.0, 0.5, 0.25, 0.25],
            exponents: [1.0, 2.0, -4.0, -4.0],
            epsilon: 1.0,
            index_top: 4,
            index_bottom: 0,
            index_middle: 2,
        }
    }
}

impl Cp2LocalModel {
    /// Squared radius of the chart domain.
    pub fn chart_radius_sq(&self) -> f64 {
        4.0 * self.epsilon
    }
}

/// The connection scalar: d(v1, v2) = v1^2/2 + sqrt(v1^4 + 4 v2^2)/2.
/// Positive away from the origin, and homogeneous under the flow's
/// weighting: d(t v1, t^2 v2) = t^2 d(v1, v2).
pub fn cp2_d(v1: f64, v2: f64) -> f64 {
    0.5 * v1 * v1 + 0.5 * (v1 * v1 * v1 * v1 + 4.0 * v2 * v2).sqrt()
}

fn check_dim(v: &DVector<f64>) -> Result<()> {
    if v.len() != 4 {
        return Err(Error::DimensionMismatch {
            expected: 4,
            got: v.len(),
        });
    }
    Ok(())
}

fn flow_at(v: &DVector<f64>, t: f64) -> DVector<f64> {
    let model = Cp2LocalModel::default();
    DVector::from_fn(4, |i, _| v[i] * (model.exponents[i] * t).exp())
}

/// Time-`t` negative-gradient flow in closed form, on the closed chart
/// ball. The squared norm along the orbit is a sum of non-negative
/// exponentials, hence convex in time, so the chart-domain check at the
/// two endpoints covers the whole interval; if the far endpoint has
/// escaped, the unique crossing time is bisected and reported.
pub fn cp2_flow(v: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_dim(v)?;
    let bound = Cp2LocalModel::default().chart_radius_sq();
    let n2 = |time: f64| flow_at(v, time).norm_squared();
    if n2(0.0) > bound {
        return Err(Error::Msg(
            "the start lies outside the chart (trajectory exits at t = 0)".into(),
        ));
    }
    if n2(t) > bound {
        let (mut inside, mut outside) = (0.0f64, t);
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if n2(mid) > bound {
                outside = mid;
            } else {
                inside = mid;
            }
        }
        return Err(Error::Msg(format!(
            "trajectory exits the chart at t = {outside:.9}"
        )));
    }
    Ok(flow_at(v, t))
}

/// Where the unbroken flow line through `v` crosses the section
/// `d(w1, w2) = 1`: the flow map by the time -ln(d)/2, in closed form
/// (d^{-1/2} v1, d^{-1} v2, d^2 v3, d^2 v4).
///
/// At v1 = v2 = 0 no unbroken line connects the sections; the
/// configuration is the broken one through the chart's critical point.
pub fn cp2_connect(v: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(v)?;
    let d = cp2_d(v[0], v[1]);
    if d <= 0.0 {
        return Err(Error::BrokenLine(
            "v1 = v2 = 0: the line through this point breaks at the chart's critical point"
                .into(),
        ));
    }
    let rd = d.sqrt();
    Ok(DVector::from_row_slice(&[
        v[0] / rd,
        v[1] / d,
        v[2] * d * d,
        v[3] * d * d,
    ]))
}

/// One sample of the blow-up scan along the curve v1 = a s, v2 = b s^2.
#[derive(Debug, Clone)]
pub struct BlowupScanRow {
    pub s: f64,
    pub a: f64,
    pub b: f64,
    /// The curve point on the section {v3^2 + v4^2 = 1}.
    pub point: [f64; 4],
    /// Its image under the connection formula.
    pub connected: [f64; 4],
    pub d: f64,
    /// First connected coordinate: the would-be collar coordinate.
    pub v5: f64,
    /// Its closed-form limit as s -> 0.
    pub limit: f64,
}

/// The analytic limit of the collar coordinate along the curve
/// (a s, b s^2): L = a / sqrt(a^2/2 + sqrt(a^4 + 4 b^2)/2). Never zero
/// for a != 0, which is the whole point: a C^1 collar would force the
/// limit 0.
pub fn c1_limit(a: f64, b: f64) -> f64 {
    a / (0.5 * a * a + 0.5 * (a * a * a * a + 4.0 * b * b).sqrt()).sqrt()
}

/// Scans the curve v1 = a s, v2 = b s^2 over the given s values. The
/// weighting matches the scaling of d, so d = K s^2 with K constant and
/// the collar coordinate v5 is constant in s; the rows make the
/// divergence of the difference quotient v5/s explicit.
pub fn c1_blowup_scan(a: f64, b: f64, s_grid: &[f64]) -> Result<Vec<BlowupScanRow>> {
    if a == 0.0 || !a.is_finite() {
        return Err(Error::BadParameter(
            "blow-up scan needs a transverse curve: a must be nonzero".into(),
        ));
    }
    if s_grid.is_empty() {
        return Err(Error::BadParameter("empty s grid".into()));
    }
    let limit = c1_limit(a, b);
    s_grid
        .iter()
        .map(|&s| {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::BadParameter(format!(
                    "blow-up scan parameter s must be positive, got {s}"
                )));
            }
            let point = [a * s, b * s * s, 1.0, 0.0];
            let v = DVector::from_row_slice(&point);
            let w = cp2_connect(&v)?;
            Ok(BlowupScanRow {
                s,
                a,
                b,
                point,
                connected: [w[0], w[1], w[2], w[3]],
                d: cp2_d(point[0], point[1]),
                v5: w[0],
                limit,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowParams;
    use crate::manifold::{Atlas, Point};
    use crate::moduli::{ModuliParams, MorseSystem};
    use crate::morse::MorseFunction;
    use crate::strata::unit_f64;
    use alloc::collections::BTreeMap;
    use approx::assert_relative_eq;

    fn system() -> MorseSystem {
        let atlas = Atlas::builtin("cp2-chart", &BTreeMap::new()).unwrap();
        let f = MorseFunction::for_atlas(&atlas, &BTreeMap::new()).unwrap();
        MorseSystem::build(atlas, f, FlowParams::default(), ModuliParams::default()).unwrap()
    }

    /// Flow `v` to the f-level of `target` numerically and compare.
    fn assert_integrator_agrees(sys: &MorseSystem, v: &DVector<f64>, target: &DVector<f64>, tol: f64) {
        let start = Point::from_vector(0, v.clone());
        let f0 = sys.f.value(&sys.atlas, &start);
        let f1 = sys
            .f
            .value(&sys.atlas, &Point::from_vector(0, target.clone()));
        if (f0 - f1).abs() < 1e-10 {
            assert!((v - target).amax() < tol);
            return;
        }
        let integ = if f0 > f1 {
            sys.integrator()
        } else {
            sys.integrator().backward()
        };
        let end = integ.flow_map(&start, f1).unwrap();
        let gap = (&end.coords - target).amax();
        assert!(gap < tol, "integrator disagrees by {gap:.3e}");
    }

    #[test]
    fn flow_identity_and_exponent_arithmetic() {
        let v = DVector::from_row_slice(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(cp2_flow(&v, 0.0).unwrap(), v);
        let v = DVector::from_row_slice(&[2.0f64.sqrt(), 0.0, 0.1, -0.2]);
        let w = cp2_flow(&v, -0.5 * 2.0f64.ln()).unwrap();
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(w[2], 0.4, epsilon = 1e-14);
        assert_relative_eq!(w[3], -0.8, epsilon = 1e-14);
    }

    #[test]
    fn flow_reports_the_chart_exit_time() {
        let v = DVector::from_row_slice(&[1.9, 0.0, 0.0, 0.0]);
        // |v| e^t reaches 2 at t = ln(2/1.9).
        let err = cp2_flow(&v, 1.0).unwrap_err();
        match err {
            Error::Msg(msg) => {
                assert!(msg.contains("exits the chart"));
                let t: f64 = msg.rsplit("t = ").next().unwrap().parse().unwrap();
                assert_relative_eq!(t, (2.0f64 / 1.9).ln(), epsilon = 1e-6);
            }
            other => panic!("expected a chart exit, got {other:?}"),
        }
        let v = DVector::from_row_slice(&[0.0, 0.0, 1.9, 0.0]);
        assert!(cp2_flow(&v, -1.0).is_err());
        assert!(cp2_flow(&v, 0.2).is_ok());
    }

    #[test]
    fn connect_fixed_points_and_doubling() {
        for v12 in [[1.0, 0.0], [0.0, 1.0]] {
            let v = DVector::from_row_slice(&[v12[0], v12[1], 0.3, -0.4]);
            assert_relative_eq!(cp2_d(v12[0], v12[1]), 1.0, epsilon = 1e-15);
            let w = cp2_connect(&v).unwrap();
            assert_relative_eq!(w, v, epsilon = 1e-15);
        }
        let v = DVector::from_row_slice(&[2.0f64.sqrt(), 0.0, 0.3, -0.4]);
        assert_relative_eq!(cp2_d(v[0], v[1]), 2.0, epsilon = 1e-15);
        let w = cp2_connect(&v).unwrap();
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(w[1], 0.0, epsilon = 1e-15);
        assert_relative_eq!(w[2], 1.2, epsilon = 1e-14);
        assert_relative_eq!(w[3], -1.6, epsilon = 1e-14);
    }

    #[test]
    fn connect_rejects_the_broken_configuration() {
        let v = DVector::from_row_slice(&[0.0, 0.0, 1.0, 1.0]);
        assert!(matches!(cp2_connect(&v), Err(Error::BrokenLine(_))));
    }

    #[test]
    fn d_scaling_law_on_random_samples() {
        let mut state = 11u64;
        for _ in 0..100 {
            let v1 = 2.0 * unit_f64(&mut state) - 1.0;
            let v2 = 2.0 * unit_f64(&mut state) - 1.0;
            let t = 0.1 + 2.0 * unit_f64(&mut state);
            let lhs = cp2_d(t * v1, t * t * v2);
            let rhs = t * t * cp2_d(v1, v2);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn connect_agrees_with_the_integrated_flow() {
        let sys = system();
        let mut state = 23u64;
        for _ in 0..100 {
            let v1 = 1.4 * (unit_f64(&mut state) - 0.5);
            let v2 = 1.4 * (unit_f64(&mut state) - 0.5);
            if v1.hypot(v2) < 0.05 {
                continue;
            }
            let phase = core::f64::consts::TAU * unit_f64(&mut state);
            let r = 0.5 + 0.5 * unit_f64(&mut state);
            let v = DVector::from_row_slice(&[v1, v2, r * phase.cos(), r * phase.sin()]);
            let w = cp2_connect(&v).unwrap();
            assert_integrator_agrees(&sys, &v, &w, 1e-6);
        }
    }

    #[test]
    fn closed_form_flow_agrees_with_the_integrator() {
        let sys = system();
        let mut state = 5u64;
        for _ in 0..20 {
            let v = DVector::from_fn(4, |_, _| 0.8 * (unit_f64(&mut state) - 0.5));
            let t = (0.05 + 0.45 * unit_f64(&mut state))
                * if unit_f64(&mut state) < 0.5 { -1.0 } else { 1.0 };
            let w = match cp2_flow(&v, t) {
                Ok(w) => w,
                Err(_) => continue,
            };
            assert_integrator_agrees(&sys, &v, &w, 1e-8);
        }
    }

    #[test]
    fn blowup_scan_certifies_the_nonzero_limit() {
        let grid = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
        let rows = c1_blowup_scan(1.0, 0.0, &grid).unwrap();
        for row in &rows {
            assert_relative_eq!(row.d, row.s * row.s, max_relative = 1e-12);
            assert_relative_eq!(row.v5, 1.0, epsilon = 1e-12);
            assert_eq!(row.limit, 1.0);
        }
        let rows = c1_blowup_scan(1.0, 1.0, &grid).unwrap();
        let l = (0.5 + 0.5 * 5.0f64.sqrt()).powf(-0.5);
        assert_relative_eq!(l, 0.7861513777574233, epsilon = 1e-15);
        for row in &rows {
            assert_relative_eq!(row.v5, l, epsilon = 1e-12);
            assert_relative_eq!(row.limit, l, epsilon = 1e-15);
        }
        // The difference quotient of the would-be collar coordinate
        // diverges like L/s: the quantitative failure of C^1-ness.
        let q_first = rows.first().unwrap().v5 / rows.first().unwrap().s;
        let q_last = rows.last().unwrap().v5 / rows.last().unwrap().s;
        assert!(q_last > 1e4 * q_first);
        // Any curve with v2 scaling out has |v5| = 1: d collapses to v1^2.
        let rows = c1_blowup_scan(2.0, 0.0, &grid).unwrap();
        for row in &rows {
            assert_relative_eq!(row.d, 4.0 * row.s * row.s, max_relative = 1e-12);
            assert_relative_eq!(row.v5, 1.0, epsilon = 1e-12);
        }
        assert!(c1_blowup_scan(0.0, 1.0, &grid).is_err());
        assert!(c1_blowup_scan(1.0, 1.0, &[0.1, 0.0]).is_err());
        assert!(c1_blowup_scan(1.0, 1.0, &[]).is_err());
    }

    #[test]
    fn blowup_rows_match_direct_flow_integration() {
        let sys = system();
        for &s in &[0.1, 0.01] {
            let rows = c1_blowup_scan(1.0, 1.0, &[s]).unwrap();
            let row = &rows[0];
            let v = DVector::from_row_slice(&row.point);
            let w = DVector::from_row_slice(&row.connected);
            assert_integrator_agrees(&sys, &v, &w, 1e-6);
        }
    }
}
