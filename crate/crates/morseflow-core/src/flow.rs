//! Negative-gradient flow integration.
//!
//! The driver is a hand-rolled Dormand-Prince 5(4) pair with FSAL, adaptive
//! steps, and the classic quartic dense-output interpolant. On top of the
//! raw stepper it provides the operations the rest of the crate needs:
//! stopping on level-set crossings (located on the dense output and polished
//! by Newton projection), stopping on convergence to a critical point, chart
//! switching mid-flight, joint integration of the variational equation for
//! frames, level-to-level flow maps with intrinsic derivatives, omega
//! limits, and dwell decomposition of near-broken trajectories.
//!
//! On the torus the integration runs in the universal cover; coordinates are
//! wrapped only when samples are emitted or distances are measured.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::manifold::{Atlas, Point};
use crate::morse::{CriticalPoint, MorseFunction};
#[allow(unused_imports)]
use crate::real::FloatExt;
use crate::{Error, Result};

/// Tolerances and budgets for the integrator.
#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub h_init: f64,
    pub h_max: f64,
    pub max_steps: usize,
    /// Hard cap on flow time for every run.
    pub max_time: f64,
    /// A trajectory has converged when it is this close to a critical
    /// point...
    pub conv_radius: f64,
    /// ...and the gradient norm has dropped below this.
    pub grad_tol: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            h_init: 1e-2,
            h_max: 1.0,
            max_steps: 2_000_000,
            max_time: 500.0,
            conv_radius: 1e-5,
            grad_tol: 1e-8,
        }
    }
}

/// Stopping condition for a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Until {
    /// Run until the trajectory converges to a critical point (or the time
    /// budget expires).
    Converged,
    /// Stop when `f` crosses the given regular level.
    Level(f64),
    /// Integrate to exactly this flow time.
    Time(f64),
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    /// Converged to `criticals[critical]`.
    Converged { critical: usize },
    LevelReached { level: f64 },
    TimeLimit,
    LeftDomain,
}

/// One emitted state along a trajectory. Points are canonicalized.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub point: Point,
    pub f: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub samples: Vec<Sample>,
    /// Final state in working coordinates (universal cover on the torus).
    pub end: Point,
    pub end_time: f64,
    pub steps: usize,
    pub rejected: usize,
    /// Quadrature of the squared gradient norm along the run; equals the
    /// drop in `f` up to integration error.
    pub energy: f64,
    pub reason: StopReason,
}

impl Trajectory {
    pub fn delta_f(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => a.f - b.f,
            _ => 0.0,
        }
    }

    /// Whether `f` is monotone along the samples (non-increasing forward,
    /// non-decreasing backward), up to `slack`.
    pub fn f_monotone(&self, forward: bool, slack: f64) -> bool {
        self.samples.windows(2).all(|w| {
            if forward {
                w[1].f <= w[0].f + slack
            } else {
                w[1].f >= w[0].f - slack
            }
        })
    }
}

// Dormand-Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const BS1: f64 = 5179.0 / 57600.0;
const BS3: f64 = 7571.0 / 16695.0;
const BS4: f64 = 393.0 / 640.0;
const BS5: f64 = -92097.0 / 339200.0;
const BS6: f64 = 187.0 / 2100.0;
const BS7: f64 = 1.0 / 40.0;
// Dense-output weights for the quartic interpolant.
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Dense-output polynomial for one accepted step.
struct Dense {
    r1: DVector<f64>,
    r2: DVector<f64>,
    r3: DVector<f64>,
    r4: DVector<f64>,
    r5: DVector<f64>,
}

impl Dense {
    fn build(
        h: f64,
        y0: &DVector<f64>,
        y1: &DVector<f64>,
        k: [&DVector<f64>; 7],
    ) -> Dense {
        let dy = y1 - y0;
        let r3 = k[0] * h - &dy;
        let r4 = &dy - k[6] * h - &r3;
        let r5 = (k[0] * D1 + k[2] * D3 + k[3] * D4 + k[4] * D5 + k[5] * D6 + k[6] * D7) * h;
        Dense {
            r1: y0.clone(),
            r2: dy,
            r3,
            r4,
            r5,
        }
    }

    fn eval(&self, theta: f64) -> DVector<f64> {
        let u = 1.0 - theta;
        &self.r1 + (&self.r2 + (&self.r3 + (&self.r4 + &self.r5 * u) * theta) * u) * theta
    }
}

/// Negative-gradient flow integrator bound to a manifold, function, and
/// critical point list.
pub struct Integrator<'a> {
    pub atlas: &'a Atlas,
    pub f: &'a MorseFunction,
    pub criticals: &'a [CriticalPoint],
    pub params: FlowParams,
    backward: bool,
}

impl<'a> Integrator<'a> {
    pub fn new(
        atlas: &'a Atlas,
        f: &'a MorseFunction,
        criticals: &'a [CriticalPoint],
        params: FlowParams,
    ) -> Self {
        Integrator {
            atlas,
            f,
            criticals,
            params,
            backward: false,
        }
    }

    /// Integrate the reversed field (ascending flow).
    pub fn backward(mut self) -> Self {
        self.backward = true;
        self
    }

    fn sign(&self) -> f64 {
        if self.backward {
            -1.0
        } else {
            1.0
        }
    }

    /// Field and (optionally) its action on frame columns, as one flat
    /// state vector: coordinates first, then frame columns.
    fn rhs(&self, chart: usize, y: &DVector<f64>, k: usize) -> DVector<f64> {
        let n = self.atlas.dim();
        let p = Point::from_vector(chart, y.rows(0, n).clone_owned());
        let mut out = DVector::zeros(n + n * k);
        let field = self.f.neg_gradient(self.atlas, &p) * self.sign();
        out.rows_mut(0, n).copy_from(&field);
        if k > 0 {
            let j = self.f.neg_gradient_jacobian(self.atlas, &p) * self.sign();
            for c in 0..k {
                let col = y.rows(n + c * n, n).clone_owned();
                out.rows_mut(n + c * n, n).copy_from(&(&j * col));
            }
        }
        out
    }

    /// One trial step from `(t, y)` with size `h`. Returns the candidate
    /// state, the last stage (for FSAL), the scaled error norm, and the
    /// dense interpolant.
    fn try_step(
        &self,
        chart: usize,
        y: &DVector<f64>,
        k1: &DVector<f64>,
        h: f64,
        kcols: usize,
    ) -> (DVector<f64>, DVector<f64>, f64, Dense) {
        let k2 = self.rhs(chart, &(y + k1 * (A21 * h)), kcols);
        let k3 = self.rhs(chart, &(y + k1 * (A31 * h) + &k2 * (A32 * h)), kcols);
        let k4 = self.rhs(
            chart,
            &(y + k1 * (A41 * h) + &k2 * (A42 * h) + &k3 * (A43 * h)),
            kcols,
        );
        let k5 = self.rhs(
            chart,
            &(y + k1 * (A51 * h) + &k2 * (A52 * h) + &k3 * (A53 * h) + &k4 * (A54 * h)),
            kcols,
        );
        let k6 = self.rhs(
            chart,
            &(y + k1 * (A61 * h)
                + &k2 * (A62 * h)
                + &k3 * (A63 * h)
                + &k4 * (A64 * h)
                + &k5 * (A65 * h)),
            kcols,
        );
        let y1 = y + k1 * (B1 * h) + &k3 * (B3 * h) + &k4 * (B4 * h) + &k5 * (B5 * h) + &k6 * (B6 * h);
        let k7 = self.rhs(chart, &y1, kcols);
        let err = k1 * ((B1 - BS1) * h)
            + &k3 * ((B3 - BS3) * h)
            + &k4 * ((B4 - BS4) * h)
            + &k5 * ((B5 - BS5) * h)
            + &k6 * ((B6 - BS6) * h)
            + &k7 * (-BS7 * h);
        let mut sum = 0.0;
        for i in 0..y.len() {
            let sk = self.params.abs_tol + self.params.rel_tol * y[i].abs().max(y1[i].abs());
            let e = err[i] / sk;
            sum += e * e;
        }
        let err_norm = (sum / y.len() as f64).sqrt();
        let dense = Dense::build(h, y, &y1, [k1, &k2, &k3, &k4, &k5, &k6, &k7]);
        (y1, k7, err_norm, dense)
    }

    fn emit(&self, samples: &mut Vec<Sample>, t: f64, chart: usize, pos: &DVector<f64>) {
        let p = self
            .atlas
            .canonicalize(&Point::from_vector(chart, pos.clone()));
        let f = self.f.value(self.atlas, &p);
        let grad_norm = self.f.grad_norm_sq(self.atlas, &p).sqrt();
        samples.push(Sample {
            t,
            point: p,
            f,
            grad_norm,
        });
    }

    /// Gauss-3 quadrature of the squared gradient norm over the portion
    /// `[0, theta_end]` of one step.
    fn step_energy(&self, chart: usize, dense: &Dense, h: f64, theta_end: f64, n: usize) -> f64 {
        const NODES: [f64; 3] = [0.112701665379258311, 0.5, 0.887298334620741689];
        const WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];
        let mut acc = 0.0;
        for (node, w) in NODES.iter().zip(WEIGHTS) {
            let y = dense.eval(node * theta_end);
            let p = Point::from_vector(chart, y.rows(0, n).clone_owned());
            acc += w * self.f.grad_norm_sq(self.atlas, &p);
        }
        acc * h * theta_end
    }

    /// Newton projection onto the level set `f = a` along the gradient.
    pub fn project_to_level(&self, p: &Point, a: f64) -> Result<Point> {
        let mut x = p.clone();
        for _ in 0..8 {
            let (v, df, _) = self.f.differentials(self.atlas, &x);
            if (v - a).abs() < 1e-13 * a.abs().max(1.0) {
                return Ok(x);
            }
            let gi_df = self.atlas.metric_inverse(&x) * &df;
            let denom = gi_df.dot(&df);
            if denom < 1e-300 {
                return Err(Error::NotRegularValue { level: a });
            }
            x.coords -= &gi_df * ((v - a) / denom);
        }
        let v = self.f.value(self.atlas, &x);
        if (v - a).abs() < 1e-10 * a.abs().max(1.0) {
            Ok(x)
        } else {
            Err(Error::LevelNotReached { level: a })
        }
    }

    /// Core driver. Integrates from `start` (with an optional frame for the
    /// variational equation) until the stop condition, a domain exit, or
    /// the time budget.
    fn drive(
        &self,
        start: &Point,
        frame: Option<&DMatrix<f64>>,
        until: Until,
    ) -> Result<(Trajectory, Option<DMatrix<f64>>)> {
        let n = self.atlas.dim();
        let kcols = frame.map_or(0, DMatrix::ncols);
        if !self.atlas.contains(start) {
            return Err(Error::OutsideDomain { chart: start.chart });
        }

        let mut chart = start.chart;
        let mut y = DVector::zeros(n + n * kcols);
        y.rows_mut(0, n).copy_from(&start.coords);
        if let Some(fr) = frame {
            for c in 0..kcols {
                y.rows_mut(n + c * n, n).copy_from(&fr.column(c).clone_owned());
            }
        }

        let time_cap = match until {
            Until::Time(tt) => tt.min(self.params.max_time),
            _ => self.params.max_time,
        };
        let mut t = 0.0;
        let mut h = self.params.h_init.min(self.params.h_max);
        let mut k1: Option<DVector<f64>> = None;
        let mut steps = 0usize;
        let mut rejected = 0usize;
        let mut attempts = 0usize;
        let mut energy = 0.0;
        let mut samples = Vec::new();
        self.emit(&mut samples, 0.0, chart, &y.rows(0, n).clone_owned());

        let finish = |samples: Vec<Sample>,
                      chart: usize,
                      y: &DVector<f64>,
                      t: f64,
                      steps: usize,
                      rejected: usize,
                      energy: f64,
                      reason: StopReason| {
            let end = Point::from_vector(chart, y.rows(0, n).clone_owned());
            let out_frame = if kcols > 0 {
                let mut m = DMatrix::zeros(n, kcols);
                for c in 0..kcols {
                    m.set_column(c, &y.rows(n + c * n, n).clone_owned());
                }
                Some(m)
            } else {
                None
            };
            Ok((
                Trajectory {
                    samples,
                    end,
                    end_time: t,
                    steps,
                    rejected,
                    energy,
                    reason,
                },
                out_frame,
            ))
        };

        loop {
            // Chart housekeeping before each attempt.
            let pos = y.rows(0, n).clone_owned();
            let here = Point::from_vector(chart, pos.clone());
            if !self.atlas.in_core(&here) {
                let to = self.atlas.preferred_chart(&here);
                if to != chart {
                    let moved = self.atlas.transition(&here, to)?;
                    let j = self.atlas.transition_jacobian(&here, to)?;
                    let mut ny = DVector::zeros(n + n * kcols);
                    ny.rows_mut(0, n).copy_from(&moved.coords);
                    for c in 0..kcols {
                        let col = &j * y.rows(n + c * n, n).clone_owned();
                        ny.rows_mut(n + c * n, n).copy_from(&col);
                    }
                    chart = to;
                    y = ny;
                    k1 = None;
                } else if !self.atlas.contains(&here) {
                    return finish(samples, chart, &y, t, steps, rejected, energy, StopReason::LeftDomain);
                }
            }

            if t >= time_cap - 1e-14 {
                return finish(samples, chart, &y, t, steps, rejected, energy, StopReason::TimeLimit);
            }
            let mut h_try = h.min(time_cap - t);

            let k1v = match &k1 {
                Some(v) => v.clone(),
                None => self.rhs(chart, &y, kcols),
            };

            // Attempt steps until one is accepted.
            let (y1, k7, dense, h_used) = loop {
                attempts += 1;
                if attempts > self.params.max_steps {
                    return Err(Error::MaxStepsExceeded { t });
                }
                if h_try < 1e-14 * t.abs().max(1.0) {
                    return Err(Error::StepSizeUnderflow { t });
                }
                let (y1, k7, err, dense) = self.try_step(chart, &y, &k1v, h_try, kcols);
                let err = if err.is_finite() { err } else { f64::MAX };
                let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 5.0);
                if err <= 1.0 {
                    h = (h_try * factor).min(self.params.h_max);
                    break (y1, k7, dense, h_try);
                }
                rejected += 1;
                h_try *= factor.min(1.0);
            };
            steps += 1;

            let pos1 = y1.rows(0, n).clone_owned();
            let p1 = Point::from_vector(chart, pos1.clone());
            let f0 = self.f.value(self.atlas, &Point::from_vector(chart, pos.clone()));
            let f1 = self.f.value(self.atlas, &p1);

            // Level-crossing event, located on the dense output.
            if let Until::Level(a) = until {
                let (s0, s1) = (f0 - a, f1 - a);
                if s0 != 0.0 && s0 * s1 <= 0.0 {
                    let mut lo = 0.0;
                    let mut hi = 1.0;
                    for _ in 0..80 {
                        let mid = 0.5 * (lo + hi);
                        let ym = dense.eval(mid);
                        let fm = self.f.value(
                            self.atlas,
                            &Point::from_vector(chart, ym.rows(0, n).clone_owned()),
                        );
                        if (fm - a) * s0 > 0.0 {
                            lo = mid;
                        } else {
                            hi = mid;
                        }
                    }
                    let theta = 0.5 * (lo + hi);
                    let ye = dense.eval(theta);
                    let hit = Point::from_vector(chart, ye.rows(0, n).clone_owned());
                    let hit = self.project_to_level(&hit, a)?;
                    let mut yend = ye;
                    yend.rows_mut(0, n).copy_from(&hit.coords);
                    energy += self.step_energy(chart, &dense, h_used, theta, n);
                    let t_event = t + theta * h_used;
                    self.emit(&mut samples, t_event, chart, &hit.coords);
                    return finish(
                        samples,
                        chart,
                        &yend,
                        t_event,
                        steps,
                        rejected,
                        energy,
                        StopReason::LevelReached { level: a },
                    );
                }
            }

            energy += self.step_energy(chart, &dense, h_used, 1.0, n);
            t += h_used;
            y = y1;
            k1 = Some(k7);
            self.emit(&mut samples, t, chart, &pos1);

            // Convergence to a critical point.
            let grad = samples.last().map_or(f64::MAX, |s| s.grad_norm);
            if grad < self.params.grad_tol {
                let canon = self.atlas.canonicalize(&p1);
                if let Some(ci) = self
                    .criticals
                    .iter()
                    .position(|c| self.atlas.distance(&canon, &c.point) < self.params.conv_radius)
                {
                    return finish(
                        samples,
                        chart,
                        &y,
                        t,
                        steps,
                        rejected,
                        energy,
                        StopReason::Converged { critical: ci },
                    );
                }
            }

            if !self.atlas.contains(&Point::from_vector(chart, y.rows(0, n).clone_owned()))
                && self.atlas.preferred_chart(&Point::from_vector(chart, y.rows(0, n).clone_owned()))
                    == chart
            {
                return finish(samples, chart, &y, t, steps, rejected, energy, StopReason::LeftDomain);
            }
        }
    }

    /// Integrate from `start` until the condition is met.
    pub fn run(&self, start: &Point, until: Until) -> Result<Trajectory> {
        self.drive(start, None, until).map(|(t, _)| t)
    }

    /// Integrate the trajectory and the variational equation for the given
    /// frame jointly. Returns the trajectory and the transported frame.
    pub fn run_with_frame(
        &self,
        start: &Point,
        frame: &DMatrix<f64>,
        until: Until,
    ) -> Result<(Trajectory, DMatrix<f64>)> {
        let (t, f) = self.drive(start, Some(frame), until)?;
        Ok((t, f.expect("frame requested")))
    }

    /// Flow to the level set `f = a`; errors if the trajectory converges or
    /// times out first.
    pub fn flow_to_level(&self, start: &Point, a: f64) -> Result<(Point, f64)> {
        let traj = self.run(start, Until::Level(a))?;
        match traj.reason {
            StopReason::LevelReached { .. } => Ok((traj.end, traj.end_time)),
            StopReason::Converged { critical } => Err(Error::FlowMapUndefined {
                critical: self.criticals[critical].label.clone(),
            }),
            _ => Err(Error::LevelNotReached { level: a }),
        }
    }

    /// The level-to-level flow map: carries a point of one regular level to
    /// the trajectory's crossing of the target level.
    pub fn flow_map(&self, start: &Point, target: f64) -> Result<Point> {
        self.flow_to_level(start, target).map(|(p, _)| p)
    }

    /// Flow map together with its intrinsic derivative: `basis` columns
    /// must be tangent to the start level at `start`; the returned columns
    /// are their images under the derivative of the level-to-level map,
    /// tangent to the target level. The variational transport is corrected
    /// by the flight-time variation so the image stays inside the level.
    pub fn flow_map_derivative(
        &self,
        start: &Point,
        basis: &DMatrix<f64>,
        target: f64,
    ) -> Result<(Point, DMatrix<f64>)> {
        let (traj, carried) = self.run_with_frame(start, basis, Until::Level(target))?;
        match traj.reason {
            StopReason::LevelReached { .. } => {}
            StopReason::Converged { critical } => {
                return Err(Error::FlowMapUndefined {
                    critical: self.criticals[critical].label.clone(),
                })
            }
            _ => return Err(Error::LevelNotReached { level: target }),
        }
        let end = traj.end;
        let (_, df, _) = self.f.differentials(self.atlas, &end);
        let field = self.f.neg_gradient(self.atlas, &end) * self.sign();
        let speed = df.dot(&field);
        if speed.abs() < 1e-300 {
            return Err(Error::NotRegularValue { level: target });
        }
        let mut out = carried;
        for c in 0..out.ncols() {
            let col = out.column(c).clone_owned();
            // Shift along the field so df annihilates the column.
            let lambda = df.dot(&col) / speed;
            out.set_column(c, &(col - &field * lambda));
        }
        Ok((end, out))
    }

    /// Index (into the critical point list) of the trajectory's limit.
    pub fn omega_limit(&self, start: &Point) -> Result<usize> {
        let traj = self.run(start, Until::Converged)?;
        match traj.reason {
            StopReason::Converged { critical } => Ok(critical),
            other => Err(Error::UnresolvedClass(format!(
                "no convergence before the budget: {other:?}"
            ))),
        }
    }
}

/// One dwell of a trajectory inside the ball of radius `rho` around a
/// critical point.
#[derive(Debug, Clone)]
pub struct Dwell {
    /// Index into the critical point list.
    pub critical: usize,
    pub enter_t: f64,
    /// Infinite when the trajectory ends (converges) inside the ball.
    pub exit_t: f64,
    pub closest: f64,
}

/// Splits a trajectory into its dwells near critical points, in time order.
/// Entry and exit times are interpolated linearly between samples; the
/// closest approach is refined by a parabola through the squared distances.
pub fn dwell_decompose(
    atlas: &Atlas,
    criticals: &[CriticalPoint],
    traj: &Trajectory,
    rho: f64,
) -> Result<Vec<Dwell>> {
    let min_sep = crate::morse::min_separation(atlas, criticals);
    if 2.0 * rho >= min_sep {
        return Err(Error::DwellRadiusTooLarge {
            rho,
            min_separation: min_sep,
        });
    }
    let mut dwells: Vec<Dwell> = Vec::new();
    let mut active: Option<(usize, f64, f64)> = None; // (critical, enter_t, best d^2)
    let dist = |s: &Sample, ci: usize| atlas.distance(&s.point, &criticals[ci].point);

    for (i, s) in traj.samples.iter().enumerate() {
        match active {
            Some((ci, enter_t, best)) => {
                let d = dist(s, ci);
                if d < rho {
                    active = Some((ci, enter_t, best.min(d * d)));
                } else {
                    // Exited: interpolate the crossing time.
                    let prev = &traj.samples[i - 1];
                    let d0 = dist(prev, ci);
                    let frac = if d > d0 { (rho - d0) / (d - d0) } else { 0.0 };
                    let exit_t = prev.t + frac * (s.t - prev.t);
                    let closest = refine_closest(atlas, traj, &criticals[ci].point, i, best);
                    dwells.push(Dwell {
                        critical: ci,
                        enter_t,
                        exit_t,
                        closest,
                    });
                    active = None;
                }
            }
            None => {
                if let Some(ci) = (0..criticals.len()).find(|&ci| dist(s, ci) < rho) {
                    let enter_t = if i == 0 {
                        s.t
                    } else {
                        let prev = &traj.samples[i - 1];
                        let d0 = dist(prev, ci);
                        let d1 = dist(s, ci);
                        let frac = if d0 > d1 { (d0 - rho) / (d0 - d1) } else { 0.0 };
                        prev.t + frac.clamp(0.0, 1.0) * (s.t - prev.t)
                    };
                    let d1 = dist(s, ci);
                    active = Some((ci, enter_t, d1 * d1));
                }
            }
        }
    }
    if let Some((ci, enter_t, best)) = active {
        let closest = refine_closest(atlas, traj, &criticals[ci].point, traj.samples.len(), best);
        dwells.push(Dwell {
            critical: ci,
            enter_t,
            exit_t: f64::INFINITY,
            closest,
        });
    }
    Ok(dwells)
}

/// Parabolic refinement of the closest approach around the best sample.
fn refine_closest(
    atlas: &Atlas,
    traj: &Trajectory,
    center: &Point,
    upto: usize,
    best_sq: f64,
) -> f64 {
    let lo = upto.saturating_sub(traj.samples.len().min(upto));
    let mut best_i = lo;
    let mut best = f64::MAX;
    for (i, s) in traj.samples[..upto].iter().enumerate() {
        let d = atlas.distance(&s.point, center);
        if d * d <= best {
            best = d * d;
            best_i = i;
        }
    }
    let _ = best_sq;
    if best_i == 0 || best_i + 1 >= upto {
        return best.sqrt();
    }
    let d = |i: usize| {
        let v = atlas.distance(&traj.samples[i].point, center);
        v * v
    };
    let (d0, d1, d2) = (d(best_i - 1), d(best_i), d(best_i + 1));
    let denom = d0 - 2.0 * d1 + d2;
    if denom <= 0.0 {
        return best.sqrt();
    }
    let refined = d1 - (d0 - d2) * (d0 - d2) / (8.0 * denom);
    refined.max(0.0).sqrt()
}
