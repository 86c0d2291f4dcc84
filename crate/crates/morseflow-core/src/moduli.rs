//! Moduli of connecting flow lines: descending-sphere transport, orbit
//! classification between critical points of adjacent index, orientation
//! signs, and the one-dimensional moduli curves for index gap two.
//!
//! An orbit class between `p` and `q` with `ind p - ind q = 1` is isolated
//! and rigid; it is found by classifying the fate of the descending sphere
//! of `p` and bisecting class boundaries in the launch parameter. Signs
//! come from comparing the transported orientation of `D(p)` against the
//! chosen orientation of `D(q)` with the flow direction factored out
//! first. For index gap two the classes sweep out one-dimensional curves
//! whose ends break at intermediate saddles.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::flow::{dwell_decompose, FlowParams, Integrator, StopReason, Until};
use crate::linalg::{det, gram_schmidt_oriented, householder_complement};
use crate::manifold::{Atlas, Point};
use crate::morse::{find_critical_points, min_separation, CriticalPoint, MorseFunction};

#[allow(unused_imports)]
use crate::real::FloatExt;

use core::f64::consts::PI;

/// Values closer than this are treated as the same critical value.
const VALUE_TOL: f64 = 1e-9;
/// Determinants (of unit-column matrices) below this make a sign untrustworthy.
const DEGENERATE_DET: f64 = 1e-8;

/// Tunable knobs for orbit classification and curve tracing.
#[derive(Debug, Clone)]
pub struct ModuliParams {
    /// Directions sampled on a one-dimensional descending sphere.
    pub mesh: usize,
    /// Angular width below which a class boundary counts as resolved.
    pub bisect_tol: f64,
    /// Launch distance from a critical point along a descending direction.
    pub launch_offset: f64,
    /// Angular inset used by the shadowing check at component ends.
    pub shadow_offset: f64,
    /// Fraction of the gap to the next critical value above `f(q)` at
    /// which orientation signs are evaluated.
    pub sign_level_fraction: f64,
    /// Target chord length between consecutive moduli curve polyline points.
    pub curve_step: f64,
}

impl Default for ModuliParams {
    fn default() -> Self {
        ModuliParams {
            mesh: 64,
            bisect_tol: 1e-10,
            launch_offset: 1e-4,
            shadow_offset: 1e-6,
            sign_level_fraction: 0.05,
            curve_step: 1e-2,
        }
    }
}

/// A manifold with a Morse function, its critical points, and the
/// parameters shared by every moduli computation.
pub struct MorseSystem {
    pub atlas: Atlas,
    pub f: MorseFunction,
    pub criticals: Vec<CriticalPoint>,
    pub flow: FlowParams,
    pub moduli: ModuliParams,
}

impl MorseSystem {
    /// Finds the critical points and assembles the system.
    pub fn build(
        atlas: Atlas,
        f: MorseFunction,
        flow: FlowParams,
        moduli: ModuliParams,
    ) -> Result<MorseSystem> {
        let criticals = find_critical_points(&atlas, &f)?;
        Ok(MorseSystem {
            atlas,
            f,
            criticals,
            flow,
            moduli,
        })
    }

    pub fn integrator(&self) -> Integrator<'_> {
        Integrator::new(&self.atlas, &self.f, &self.criticals, self.flow.clone())
    }

    /// Index of the critical point with the given label.
    pub fn critical(&self, label: &str) -> Result<usize> {
        self.criticals
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| Error::Msg(format!("no critical point labeled `{label}`")))
    }

    fn get(&self, i: usize) -> Result<&CriticalPoint> {
        self.criticals.get(i).ok_or(Error::NoSuchCritical(i))
    }

    /// Distinct critical values, ascending.
    pub fn critical_values(&self) -> Vec<f64> {
        let mut vals: Vec<f64> = self.criticals.iter().map(|c| c.value).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup_by(|a, b| (*a - *b).abs() < VALUE_TOL);
        vals
    }

    pub fn next_value_above(&self, v: f64) -> Option<f64> {
        self.critical_values()
            .into_iter()
            .find(|&w| w > v + VALUE_TOL)
    }

    pub fn next_value_below(&self, v: f64) -> Option<f64> {
        self.critical_values()
            .into_iter()
            .rev()
            .find(|&w| w < v - VALUE_TOL)
    }

    pub fn is_regular_value(&self, a: f64) -> bool {
        self.critical_values()
            .iter()
            .all(|&v| (v - a).abs() > VALUE_TOL)
    }

    /// Reverses the descending-manifold orientation of one critical point.
    pub fn set_flip(&mut self, label: &str, flip: bool) -> Result<()> {
        let i = self.critical(label)?;
        self.criticals[i].flip = flip;
        Ok(())
    }

    /// Level at which class representatives are stored: halfway between
    /// `f(q)` and the next critical value above it.
    pub fn representative_level(&self, q: usize) -> Result<f64> {
        let v = self.get(q)?.value;
        let above = self
            .next_value_above(v)
            .ok_or(Error::Msg(String::from("no critical value above target")))?;
        Ok(0.5 * (v + above))
    }

    /// Level at which orientation signs are evaluated: just above `f(q)`,
    /// inside the Morse chart of `q`.
    pub fn sign_level(&self, q: usize) -> Result<f64> {
        let v = self.get(q)?.value;
        let above = self
            .next_value_above(v)
            .ok_or(Error::Msg(String::from("no critical value above target")))?;
        Ok(v + self.moduli.sign_level_fraction * (above - v))
    }

    /// Classification level below `f(q)`, if any critical value lies below.
    fn separation_level(&self, q: usize) -> Option<f64> {
        let v = self.criticals[q].value;
        self.next_value_below(v).map(|below| 0.5 * (v + below))
    }

    /// Unit chart-coordinate direction at angle `alpha` in the plane of the
    /// first two descending frame columns of `p` (the raw pencil frame, so
    /// the parametrization does not move when an orientation is flipped).
    pub(crate) fn direction(&self, p: usize, alpha: f64) -> DVector<f64> {
        let vm = self.criticals[p].v_minus();
        let u = vm.column(0) * alpha.cos() + vm.column(1) * alpha.sin();
        let n = u.norm();
        u / n
    }

    /// Launch point offset from critical point `p` along `u` (unit).
    pub(crate) fn launch(&self, p: usize, u: &DVector<f64>) -> Point {
        let c = &self.criticals[p].point;
        let coords = c.coords.clone() + u * self.moduli.launch_offset;
        self.atlas.canonicalize(&Point::from_vector(c.chart, coords))
    }
}

/// Images of a mesh on the descending (or ascending) unit sphere of a
/// critical point under the flow to a fixed regular level, with flight
/// times. Directions whose trajectory never reaches the level are
/// recorded as gaps.
#[derive(Debug, Clone)]
pub struct SphereSample {
    pub from: usize,
    pub level: f64,
    pub ascending: bool,
    /// Unit launch directions in chart coordinates.
    pub directions: Vec<DVector<f64>>,
    /// Level crossing and flight time per direction; `None` marks a gap.
    pub images: Vec<Option<(Point, f64)>>,
    /// Direction indices that failed to reach the level.
    pub gaps: Vec<usize>,
    /// Worst `|f - level|` over the images.
    pub max_level_defect: f64,
    /// Smallest pairwise distance between images (infinite when fewer
    /// than two): positive iff the sampled transport is injective.
    pub min_pairwise: f64,
}

impl MorseSystem {
    /// Flows one descending direction of `p` to the level `a`.
    pub fn descending_point(&self, p: usize, u: &DVector<f64>, a: f64) -> Result<(Point, f64)> {
        let start = self.launch(p, u);
        let (pt, t) = self.integrator().flow_to_level(&start, a)?;
        Ok((self.atlas.canonicalize(&pt), t))
    }

    /// Transports a mesh on the descending unit sphere of `p` to the
    /// regular level `a < f(p)`. Unless `punctured`, a critical value
    /// strictly between `a` and `f(p)` is rejected; with `punctured` the
    /// directions swallowed by intermediate critical points become gaps.
    pub fn descending_sphere(
        &self,
        p: usize,
        a: f64,
        mesh: usize,
        punctured: bool,
    ) -> Result<SphereSample> {
        self.sphere_sample(p, a, mesh, punctured, false)
    }

    /// Ascending variant: transports the ascending unit sphere of `p`
    /// backward to the regular level `a > f(p)`.
    pub fn ascending_sphere(
        &self,
        p: usize,
        a: f64,
        mesh: usize,
        punctured: bool,
    ) -> Result<SphereSample> {
        self.sphere_sample(p, a, mesh, punctured, true)
    }

    fn sphere_sample(
        &self,
        p: usize,
        a: f64,
        mesh: usize,
        punctured: bool,
        ascending: bool,
    ) -> Result<SphereSample> {
        let cp = self.get(p)?;
        let n = self.atlas.dim();
        let k = if ascending { n - cp.index } else { cp.index };
        if k == 0 {
            return Err(Error::BadParameter(String::from(
                "the sampled sphere is empty: no directions on this side",
            )));
        }
        if k > 2 {
            return Err(Error::BadParameter(format!(
                "sphere sampling supports dimension <= 1 spheres, got {}",
                k - 1
            )));
        }
        if !self.is_regular_value(a) {
            return Err(Error::NotRegularValue { level: a });
        }
        let (lo, hi) = if ascending { (cp.value, a) } else { (a, cp.value) };
        if hi <= lo {
            return Err(Error::BadParameter(format!(
                "level {a} is on the wrong side of the critical value {}",
                cp.value
            )));
        }
        if !punctured {
            if let Some(v) = self
                .critical_values()
                .into_iter()
                .find(|&v| v > lo + VALUE_TOL && v < hi - VALUE_TOL)
            {
                return Err(Error::BadParameter(format!(
                    "critical value {v} lies between the sphere and the level; \
                     pass punctured = true to sample around it"
                )));
            }
        }
        let frame = if ascending { cp.v_plus() } else { cp.v_minus() };
        let mut directions: Vec<DVector<f64>> = Vec::new();
        if k == 1 {
            let u = frame.column(0).clone_owned();
            let u = &u / u.norm();
            directions.push(u.clone());
            directions.push(-u);
        } else {
            for i in 0..mesh {
                let alpha = (i as f64 + 0.5) / mesh as f64 * 2.0 * PI;
                let u = frame.column(0) * alpha.cos() + frame.column(1) * alpha.sin();
                let n = u.norm();
                directions.push(u / n);
            }
        }
        let integ = if ascending {
            self.integrator().backward()
        } else {
            self.integrator()
        };
        let mut images = Vec::with_capacity(directions.len());
        let mut gaps = Vec::new();
        let mut max_defect = 0.0_f64;
        for (i, u) in directions.iter().enumerate() {
            let start = self.launch(p, u);
            match integ.flow_to_level(&start, a) {
                Ok((pt, t)) => {
                    let pt = self.atlas.canonicalize(&pt);
                    max_defect = max_defect.max((self.f.value(&self.atlas, &pt) - a).abs());
                    images.push(Some((pt, t)));
                }
                Err(Error::FlowMapUndefined { .. }) if punctured => {
                    gaps.push(i);
                    images.push(None);
                }
                Err(e) => return Err(e),
            }
        }
        let mut min_pairwise = f64::INFINITY;
        let pts: Vec<&Point> = images.iter().flatten().map(|(pt, _)| pt).collect();
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                min_pairwise = min_pairwise.min(self.atlas.distance(pts[i], pts[j]));
            }
        }
        Ok(SphereSample {
            from: p,
            level: a,
            ascending,
            directions,
            images,
            gaps,
            max_level_defect: max_defect,
            min_pairwise,
        })
    }
}

/// One rigid class of flow lines between critical points of adjacent index.
#[derive(Debug, Clone)]
pub struct FlowLineClass {
    pub from: usize,
    pub to: usize,
    /// Unit launch direction on the descending sphere of `from`.
    pub direction: DVector<f64>,
    /// Launch angle in the descending plane (index-two sources only).
    pub angle: Option<f64>,
    /// The class's crossing of the representative level.
    pub representative: Point,
    pub rep_level: f64,
    /// Angular half-width to which the class boundary was resolved
    /// (zero for isolated branch launches).
    pub tolerance: f64,
    /// Orientation sign, `+1` or `-1`.
    pub sign: i32,
}

/// Fate of a classifier trajectory: converged to a critical point, or
/// crossed the separation level inside a labeled sector.
#[derive(Clone, PartialEq, Eq)]
enum Fate {
    Term(usize),
    /// Which lower critical point's level oval the trajectory hit, and
    /// which arc of that oval between saddle-branch crossings.
    Hit { basin: usize, arc: usize },
}

/// Discrete labeling of a separation level: the critical points below it
/// (oval centers) and, per center, the sorted angular positions at which
/// descending saddle branches cross its oval. Hits are labeled by the
/// arc between consecutive crossings, which is stable however far a hit
/// slides along the oval as a class boundary is approached.
struct ArcChart {
    level: f64,
    minima: Vec<usize>,
    crossings: BTreeMap<usize, Vec<f64>>,
}

impl MorseSystem {
    /// Builds the arc chart for classification below `f(q)`: flows both
    /// descending branches of every critical point at `q`'s index down to
    /// the level and records where they cross, keyed by basin.
    fn arc_chart(&self, q: usize, a: f64) -> Result<ArcChart> {
        let ind = self.criticals[q].index;
        let minima: Vec<usize> = (0..self.criticals.len())
            .filter(|&m| self.criticals[m].value < a)
            .collect();
        let mut crossings: BTreeMap<usize, Vec<f64>> =
            minima.iter().map(|&m| (m, Vec::new())).collect();
        let integ = self.integrator();
        for r in 0..self.criticals.len() {
            let cr = &self.criticals[r];
            if cr.index != ind || cr.value <= a {
                continue;
            }
            let u0 = cr.v_minus().column(0).clone_owned();
            let u0 = &u0 / u0.norm();
            for u in [u0.clone(), -u0] {
                let start = self.launch(r, &u);
                match integ.flow_to_level(&start, a) {
                    Ok((pt, _)) => {
                        let pt = self.atlas.canonicalize(&pt);
                        let m = self.nearest_of(&minima, &pt)?;
                        let phi = self.oval_angle(m, &pt)?;
                        crossings.get_mut(&m).expect("basin listed").push(phi);
                    }
                    Err(Error::FlowMapUndefined { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        for phis in crossings.values_mut() {
            phis.sort_by(f64::total_cmp);
        }
        Ok(ArcChart {
            level: a,
            minima,
            crossings,
        })
    }

    fn nearest_of(&self, candidates: &[usize], pt: &Point) -> Result<usize> {
        candidates
            .iter()
            .copied()
            .min_by(|&a, &b| {
                self.atlas
                    .distance(pt, &self.criticals[a].point)
                    .total_cmp(&self.atlas.distance(pt, &self.criticals[b].point))
            })
            .ok_or_else(|| {
                Error::UnresolvedClass(String::from("no critical point below the level"))
            })
    }

    /// Angular position of `pt` on the level oval around critical point `m`.
    fn oval_angle(&self, m: usize, pt: &Point) -> Result<f64> {
        let d = self.atlas.displacement(&self.criticals[m].point, pt)?;
        if d.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                got: d.len(),
            });
        }
        Ok(d[1].atan2(d[0]))
    }

    fn classify(
        &self,
        integ: &Integrator<'_>,
        start: &Point,
        chart: Option<&ArcChart>,
    ) -> Result<Fate> {
        let until = match chart {
            Some(c) => Until::Level(c.level),
            None => Until::Converged,
        };
        let traj = integ.run(start, until)?;
        match traj.reason {
            StopReason::Converged { critical } => Ok(Fate::Term(critical)),
            StopReason::LevelReached { .. } => {
                let chart = chart.expect("level stop implies a chart");
                let pt = self.atlas.canonicalize(&traj.end);
                let basin = self.nearest_of(&chart.minima, &pt)?;
                let phi = self.oval_angle(basin, &pt)?;
                let phis = &chart.crossings[&basin];
                let arc = if phis.is_empty() {
                    0
                } else {
                    phis.iter().filter(|&&c| c < phi).count() % phis.len()
                };
                Ok(Fate::Hit { basin, arc })
            }
            other => Err(Error::UnresolvedClass(format!(
                "classifier trajectory stopped early: {other:?}"
            ))),
        }
    }

    /// The saddle a near-boundary trajectory brushes past: the first dwell
    /// after leaving the launch ball around `p`.
    fn boundary_saddle(&self, integ: &Integrator<'_>, p: usize, start: &Point) -> Result<usize> {
        let traj = integ.run(start, Until::Converged)?;
        let rho = min_separation(&self.atlas, &self.criticals) / 2.5;
        let dwells = dwell_decompose(&self.atlas, &self.criticals, &traj, rho)?;
        dwells
            .iter()
            .find(|d| d.critical != p)
            .map(|d| d.critical)
            .ok_or_else(|| {
                Error::UnresolvedClass(String::from(
                    "boundary trajectory dwells at no intermediate critical point",
                ))
            })
    }

    /// All rigid classes of flow lines from `p` down to `q`, where
    /// `ind p - ind q = 1`, each with its representative and sign.
    pub fn connecting_orbits(&self, p: usize, q: usize) -> Result<Vec<FlowLineClass>> {
        let mut classes = self.classes_unsigned(p, q)?;
        for c in classes.iter_mut() {
            c.sign = self.orientation_sign(c)?;
        }
        Ok(classes)
    }

    /// The classes without orientation signs: enough for reachability
    /// questions, at a fraction of the flows.
    pub(crate) fn classes_unsigned(&self, p: usize, q: usize) -> Result<Vec<FlowLineClass>> {
        let cp = self.get(p)?;
        let cq = self.get(q)?;
        if cp.index != cq.index + 1 {
            return Err(Error::IndexGapUnsupported {
                from: cp.index,
                to: cq.index,
                need: 1,
            });
        }
        if cp.value <= cq.value + VALUE_TOL {
            return Err(Error::BadParameter(format!(
                "critical value of {} does not exceed that of {}",
                cp.label, cq.label
            )));
        }
        let a_rep = self.representative_level(q)?;
        let integ = self.integrator();
        let mut classes = Vec::new();
        match cp.index {
            1 => {
                // The descending sphere is two isolated branch launches.
                let vm = cp.v_minus();
                let u0 = vm.column(0).clone_owned();
                let u0 = &u0 / u0.norm();
                for u in [u0.clone(), -u0] {
                    let start = self.launch(p, &u);
                    if integ.omega_limit(&start)? != q {
                        continue;
                    }
                    let (rep, _) = self.descending_point(p, &u, a_rep)?;
                    classes.push(FlowLineClass {
                        from: p,
                        to: q,
                        direction: u,
                        angle: None,
                        representative: rep,
                        rep_level: a_rep,
                        tolerance: 0.0,
                        sign: 0,
                    });
                }
            }
            2 => {
                classes = self.bisect_classes(p, q, a_rep)?;
            }
            k => {
                return Err(Error::BadParameter(format!(
                    "descending spheres of dimension {} are not supported",
                    k - 1
                )));
            }
        }
        Ok(classes)
    }

    /// Mesh-and-bisect classifier for an index-two source: finds the class
    /// boundaries on the descending circle of `p` and keeps the boundaries
    /// whose brushed saddle is `q`.
    fn bisect_classes(&self, p: usize, q: usize, a_rep: f64) -> Result<Vec<FlowLineClass>> {
        let integ = self.integrator();
        let chart = match self.separation_level(q) {
            Some(a) => Some(self.arc_chart(q, a)?),
            None => None,
        };
        let chart = chart.as_ref();
        let mesh = self.moduli.mesh.max(8);
        let angles: Vec<f64> = (0..mesh)
            .map(|i| (i as f64 + 0.5) / mesh as f64 * 2.0 * PI)
            .collect();
        let mut fates = Vec::with_capacity(mesh);
        for &alpha in &angles {
            let start = self.launch(p, &self.direction(p, alpha));
            fates.push(self.classify(&integ, &start, chart)?);
        }
        let mut classes = Vec::new();
        for i in 0..mesh {
            let j = (i + 1) % mesh;
            if fates[i] == fates[j] {
                continue;
            }
            // A class boundary lies between these two angles. Bisect
            // against the low fate: the bracket keeps fate(lo) = fate_lo
            // and fate(hi) != fate_lo, so it always converges onto the
            // boundary of the low class, even if further classes hide
            // inside the initial bracket.
            let mut lo = angles[i];
            let mut hi = if j == 0 { angles[j] + 2.0 * PI } else { angles[j] };
            let fate_lo = fates[i].clone();
            while hi - lo > self.moduli.bisect_tol {
                let mid = 0.5 * (lo + hi);
                let start = self.launch(p, &self.direction(p, mid));
                let fate_mid = self.classify(&integ, &start, chart)?;
                if fate_lo == fate_mid {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let mut alpha = (0.5 * (lo + hi)).rem_euclid(2.0 * PI);
            if alpha > 2.0 * PI - 1e-6 {
                alpha -= 2.0 * PI;
            }
            let start = self.launch(p, &self.direction(p, alpha));
            let saddle = self.boundary_saddle(&integ, p, &start)?;
            if saddle != q {
                continue;
            }
            let u = self.direction(p, alpha);
            let (rep, _) = self.descending_point(p, &u, a_rep)?;
            classes.push(FlowLineClass {
                from: p,
                to: q,
                direction: u,
                angle: Some(alpha),
                representative: rep,
                rep_level: a_rep,
                tolerance: 0.5 * (hi - lo),
                sign: 0,
            });
        }
        classes.sort_by(|a, b| {
            a.angle
                .unwrap_or(0.0)
                .total_cmp(&b.angle.unwrap_or(0.0))
        });
        Ok(classes)
    }

    /// Signed count of the rigid classes from `p` to `q`.
    pub fn signed_count(&self, p: usize, q: usize) -> Result<i64> {
        Ok(self
            .connecting_orbits(p, q)?
            .iter()
            .map(|c| c.sign as i64)
            .sum())
    }

    /// Orientation sign of one class, evaluated at the default level just
    /// above `f(q)`.
    pub fn orientation_sign(&self, class: &FlowLineClass) -> Result<i32> {
        let a = self.sign_level(class.to)?;
        self.orientation_sign_at(class, a)
    }

    /// Orientation sign evaluated at a caller-chosen level in `(f(q), f(p))`.
    ///
    /// The orientation frame of `D(p)` is transported along the class
    /// trajectory to the level, the flow direction is split off first by
    /// an oriented Gram-Schmidt and a Householder complement, and what
    /// remains is compared against the orientation of `D(q)` extended by
    /// a basis of the ascending directions of `q`.
    pub fn orientation_sign_at(&self, class: &FlowLineClass, a: f64) -> Result<i32> {
        let cp = self.get(class.from)?;
        let cq = self.get(class.to)?;
        let n = self.atlas.dim();
        let k = cp.index;
        let integ = self.integrator();

        let start = self.launch(class.from, &class.direction);
        let frame0 = cp.orientation_frame();
        let (traj, mut cols) = integ.run_with_frame(&start, &frame0, Until::Level(a))?;
        match traj.reason {
            StopReason::LevelReached { .. } => {}
            StopReason::Converged { critical } => {
                return Err(Error::FlowMapUndefined {
                    critical: self.criticals[critical].label.clone(),
                })
            }
            _ => return Err(Error::LevelNotReached { level: a }),
        }
        let mut x = traj.end;
        if x.chart != cq.point.chart {
            let jac = self.atlas.transition_jacobian(&x, cq.point.chart)?;
            cols = jac * cols;
            x = self.atlas.transition(&x, cq.point.chart)?;
        }
        let x = self.atlas.canonicalize(&x);

        let w = self.f.neg_gradient(&self.atlas, &x);
        let wn = w.norm();
        if wn < 1e-300 {
            return Err(Error::DegenerateIntersection { det: 0.0 });
        }
        let w = w / wn;

        // Split the flow direction off the transported frame.
        let qmat = gram_schmidt_oriented(&cols)?;
        let wc = qmat.transpose() * &w;
        let wcn = wc.norm();
        if wcn < DEGENERATE_DET {
            return Err(Error::DegenerateIntersection { det: wcn });
        }
        let wc = wc / wcn;
        let (sigma_c, e_frame) = if k == 1 {
            (wc[0].signum(), DMatrix::<f64>::zeros(n, 0))
        } else {
            let (eprime, sigma) = householder_complement(&wc);
            (sigma, &qmat * eprime)
        };

        // A positively oriented basis of the level set's ascending
        // directions at x, relative to q: the ascending frame of q with
        // the outward function gradient factored out.
        let jplus = cq.v_plus();
        let (_, df, _) = self.f.differentials(&self.atlas, &x);
        let b = jplus.transpose() * &df;
        let bn = b.norm();
        if bn < DEGENERATE_DET {
            return Err(Error::DegenerateIntersection { det: bn });
        }
        let (comp, _) = householder_complement(&(b / bn));
        let s_basis = jplus * comp;

        let unit = |m: &DMatrix<f64>| -> DMatrix<f64> {
            let mut u = m.clone();
            for c in 0..u.ncols() {
                let col = u.column(c).clone_owned();
                let n = col.norm();
                if n > 0.0 {
                    u.set_column(c, &(col / n));
                }
            }
            u
        };
        let e_frame = unit(&e_frame);
        let s_basis = unit(&s_basis);
        let o_q = unit(&cq.orientation_frame());

        let assemble = |mid: &DMatrix<f64>| -> DMatrix<f64> {
            let mut m = DMatrix::<f64>::zeros(n, 1 + mid.ncols() + s_basis.ncols());
            m.set_column(0, &w);
            for c in 0..mid.ncols() {
                m.set_column(1 + c, &mid.column(c).clone_owned());
            }
            for c in 0..s_basis.ncols() {
                m.set_column(1 + mid.ncols() + c, &s_basis.column(c).clone_owned());
            }
            m
        };
        let d1 = det(&assemble(&e_frame));
        let d2 = det(&assemble(&o_q));
        if d1.abs() < DEGENERATE_DET || d2.abs() < DEGENERATE_DET {
            return Err(Error::DegenerateIntersection {
                det: d1.abs().min(d2.abs()),
            });
        }
        let s = sigma_c * d1.signum() * d2.signum() * cq.orientation_sign_factor();
        Ok(if s > 0.0 { 1 } else { -1 })
    }
}

/// One end of a moduli curve component: the class broken at a saddle.
#[derive(Debug, Clone)]
pub struct CurveEndpoint {
    /// The intermediate critical point the component breaks at.
    pub saddle: usize,
    /// Bisected breaking angle on the descending circle of `p`.
    pub angle: f64,
    /// Index into the upper class list for this saddle.
    pub upper: usize,
    /// Index into the lower class list for this saddle.
    pub lower: usize,
    pub sigma_upper: i32,
    pub sigma_lower: i32,
    /// Sign of the outward co-orientation induced by the transported
    /// orientation at this end.
    pub boundary_sign: i32,
}

/// One connected component of the moduli curve, swept between two
/// breaking angles (or the full circle when nothing breaks).
#[derive(Debug, Clone)]
pub struct CurveComponent {
    /// Angular parameter range on the descending circle of `p`.
    pub alpha_range: (f64, f64),
    /// Representatives on the fixed level, ordered by angle.
    pub polyline: Vec<Point>,
    /// Zero or two ends.
    pub endpoints: Vec<CurveEndpoint>,
    /// Sum over the ends of `(-1)^(ind p - ind r) * sigma_upper * sigma_lower`.
    pub endpoint_sum: i64,
}

/// The one-dimensional moduli of flow lines between critical points with
/// index gap two, traced on a fixed regular level below every
/// intermediate critical value.
#[derive(Debug, Clone)]
pub struct ModuliCurve {
    pub p: usize,
    pub q: usize,
    pub level: f64,
    pub components: Vec<CurveComponent>,
    /// Classes `p -> r` per intermediate saddle, in angle order.
    pub uppers: BTreeMap<usize, Vec<FlowLineClass>>,
    /// Classes `r -> q` per intermediate saddle, in branch order.
    pub lowers: BTreeMap<usize, Vec<FlowLineClass>>,
    /// Sum of the endpoint weights over every component.
    pub endpoint_sum: i64,
}

impl MorseSystem {
    /// Traces the moduli curve between `p` and `q` with `ind p - ind q = 2`
    /// by sweeping the descending circle of `p` between breaking angles.
    pub fn moduli_curve(&self, p: usize, q: usize) -> Result<ModuliCurve> {
        let cp = self.get(p)?;
        let cq = self.get(q)?;
        if cp.index != cq.index + 2 {
            return Err(Error::IndexGapUnsupported {
                from: cp.index,
                to: cq.index,
                need: 2,
            });
        }
        if cp.index != 2 {
            return Err(Error::BadParameter(format!(
                "moduli curves are only traced from index-two sources, got index {}",
                cp.index
            )));
        }
        let integ = self.integrator();

        // Breaking angles: every class p -> r over the intermediate saddles.
        let mut uppers: BTreeMap<usize, Vec<FlowLineClass>> = BTreeMap::new();
        let mut lowers: BTreeMap<usize, Vec<FlowLineClass>> = BTreeMap::new();
        let mut breaks: Vec<(f64, usize, usize)> = Vec::new(); // (angle, saddle, upper idx)
        for r in 0..self.criticals.len() {
            if self.criticals[r].index != cq.index + 1 {
                continue;
            }
            if self.criticals[r].value >= cp.value - VALUE_TOL
                || self.criticals[r].value <= cq.value + VALUE_TOL
            {
                continue;
            }
            let ups = self.connecting_orbits(p, r)?;
            if ups.is_empty() {
                continue;
            }
            let downs = self.connecting_orbits(r, q)?;
            for (i, c) in ups.iter().enumerate() {
                let angle = c.angle.ok_or_else(|| {
                    Error::UnresolvedClass(String::from("upper class carries no angle"))
                })?;
                breaks.push((angle, r, i));
            }
            uppers.insert(r, ups);
            lowers.insert(r, downs);
        }
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0));

        // The tracing level sits below every intermediate critical value.
        let min_saddle = uppers
            .keys()
            .map(|&r| self.criticals[r].value)
            .fold(f64::INFINITY, f64::min);
        let a_curve = if min_saddle.is_finite() {
            0.5 * (cq.value + min_saddle)
        } else {
            self.representative_level(q)?
        };

        let mut components = Vec::new();
        if breaks.is_empty() {
            // Nothing breaks: the whole circle is one closed component.
            let start = self.launch(p, &self.direction(p, 0.0));
            if integ.omega_limit(&start)? == q {
                let polyline = self.sweep(p, (0.0, 2.0 * PI), a_curve, false)?;
                components.push(CurveComponent {
                    alpha_range: (0.0, 2.0 * PI),
                    polyline,
                    endpoints: Vec::new(),
                    endpoint_sum: 0,
                });
            }
        }
        for i in 0..breaks.len() {
            let j = (i + 1) % breaks.len();
            let lo = breaks[i].0;
            let hi = if j == 0 {
                breaks[j].0 + 2.0 * PI
            } else {
                breaks[j].0
            };
            if hi - lo < 4.0 * self.moduli.shadow_offset {
                continue;
            }
            // Keep the arc only if its interior flows to q.
            let mid = self.launch(p, &self.direction(p, 0.5 * (lo + hi)));
            if integ.omega_limit(&mid)? != q {
                continue;
            }
            let polyline = self.sweep(p, (lo, hi), a_curve, true)?;
            let end_lo = self.curve_endpoint(p, q, &uppers, &lowers, breaks[i], (lo, hi), true, a_curve)?;
            let end_hi = self.curve_endpoint(p, q, &uppers, &lowers, breaks[j], (lo, hi), false, a_curve)?;
            let ind_gap_sign = -1i64; // (-1)^(ind p - ind r) with gap one
            let endpoint_sum: i64 = [&end_lo, &end_hi]
                .iter()
                .map(|e| ind_gap_sign * e.sigma_upper as i64 * e.sigma_lower as i64)
                .sum();
            components.push(CurveComponent {
                alpha_range: (lo, hi),
                polyline,
                endpoints: alloc::vec![end_lo, end_hi],
                endpoint_sum,
            });
        }
        let endpoint_sum = components.iter().map(|c| c.endpoint_sum).sum();
        Ok(ModuliCurve {
            p,
            q,
            level: a_curve,
            components,
            uppers,
            lowers,
            endpoint_sum,
        })
    }

    /// Polyline of representatives over an angle range, refined until
    /// consecutive points are closer than the configured step.
    fn sweep(&self, p: usize, range: (f64, f64), a: f64, inset: bool) -> Result<Vec<Point>> {
        let (lo, hi) = range;
        let eps = if inset {
            (self.moduli.shadow_offset).max(10.0 * self.moduli.bisect_tol)
        } else {
            0.0
        };
        let (lo, hi) = (lo + eps, hi - eps);
        let probe = |alpha: f64| -> Result<Point> {
            Ok(self.descending_point(p, &self.direction(p, alpha), a)?.0)
        };
        let mut pts: Vec<(f64, Point)> = Vec::new();
        let initial = 17usize;
        for i in 0..initial {
            let alpha = lo + (hi - lo) * i as f64 / (initial - 1) as f64;
            pts.push((alpha, probe(alpha)?));
        }
        // Subdivide only the chords that are still too long.
        loop {
            let mut refined = Vec::with_capacity(pts.len());
            let mut split = false;
            for i in 0..pts.len() - 1 {
                let gap = self.atlas.distance(&pts[i].1, &pts[i + 1].1);
                refined.push(pts[i].clone());
                if gap > self.moduli.curve_step {
                    let alpha = 0.5 * (pts[i].0 + pts[i + 1].0);
                    refined.push((alpha, probe(alpha)?));
                    split = true;
                }
            }
            refined.push(pts.last().expect("nonempty polyline").clone());
            pts = refined;
            if !split || pts.len() >= 4097 {
                return Ok(pts.into_iter().map(|(_, pt)| pt).collect());
            }
        }
    }

    /// Builds one endpoint record: identifies the broken pair at a
    /// breaking angle by shadowing, matches the lower branch by the exit
    /// displacement at the saddle, and computes the outward boundary sign.
    #[allow(clippy::too_many_arguments)]
    fn curve_endpoint(
        &self,
        p: usize,
        q: usize,
        uppers: &BTreeMap<usize, Vec<FlowLineClass>>,
        lowers: &BTreeMap<usize, Vec<FlowLineClass>>,
        brk: (f64, usize, usize),
        arc: (f64, f64),
        at_lo: bool,
        a_curve: f64,
    ) -> Result<CurveEndpoint> {
        let (angle, saddle, upper_idx) = brk;
        let integ = self.integrator();
        let cr = &self.criticals[saddle];

        // Shadowing: a trajectory just inside the arc must dwell at the
        // saddle before reaching q, and its exit picks the lower branch.
        let inward = if at_lo { 1.0 } else { -1.0 };
        let mut exit_dir: Option<DVector<f64>> = None;
        let mut inset = self.moduli.shadow_offset;
        for _ in 0..3 {
            let alpha_sh = if at_lo { arc.0 + inset } else { arc.1 - inset };
            let start = self.launch(p, &self.direction(p, alpha_sh));
            let traj = integ.run(&start, Until::Converged)?;
            let rho = min_separation(&self.atlas, &self.criticals) / 2.5;
            let dwells = dwell_decompose(&self.atlas, &self.criticals, &traj, rho)?;
            let dwell = dwells.iter().find(|d| d.critical == saddle);
            match dwell {
                Some(d) if d.exit_t.is_finite() => {
                    let after = traj
                        .samples
                        .iter()
                        .find(|s| s.t > d.exit_t)
                        .unwrap_or(traj.samples.last().expect("nonempty trajectory"));
                    let disp = self.atlas.displacement(&cr.point, &after.point)?;
                    exit_dir = Some(disp);
                    break;
                }
                _ => inset *= 100.0,
            }
        }
        let exit_dir = exit_dir.ok_or_else(|| {
            Error::UnresolvedClass(format!(
                "shadowing at angle {angle} finds no dwell at {}",
                cr.label
            ))
        })?;
        let vdown = cr.v_minus().column(0).clone_owned();
        let branch = exit_dir.dot(&vdown).signum();

        let lows = lowers.get(&saddle).ok_or_else(|| Error::MissingCount {
            p: cr.label.clone(),
            q: self.criticals[q].label.clone(),
        })?;
        let lower_idx = lows
            .iter()
            .position(|c| c.direction.dot(&vdown).signum() == branch)
            .ok_or_else(|| {
                Error::UnresolvedClass(format!(
                    "no lower class of {} exits along the observed branch",
                    cr.label
                ))
            })?;
        let ups = &uppers[&saddle];
        let sigma_upper = ups[upper_idx].sign;
        let sigma_lower = lows[lower_idx].sign;

        // Outward boundary sign: compare the transported co-orientation
        // against the outward tangent of the polyline at this end.
        let alpha_ev = if at_lo { arc.0 + 1e-4 } else { arc.1 - 1e-4 };
        let e_vec = self.transported_normal(p, alpha_ev, a_curve)?;
        let dalpha = 1e-6;
        let x_plus = self.curve_point_raw(p, alpha_ev + dalpha, a_curve)?;
        let x_minus = self.curve_point_raw(p, alpha_ev - dalpha, a_curve)?;
        if x_plus.chart != x_minus.chart {
            return Err(Error::UnresolvedClass(String::from(
                "finite-difference pair straddles a chart switch",
            )));
        }
        let d = (&x_plus.coords - &x_minus.coords) / (2.0 * dalpha);
        let outward = d * (-inward);
        let bsign = e_vec.dot(&outward).signum();
        if bsign == 0.0 {
            return Err(Error::DegenerateIntersection { det: 0.0 });
        }

        Ok(CurveEndpoint {
            saddle,
            angle,
            upper: upper_idx,
            lower: lower_idx,
            sigma_upper,
            sigma_lower,
            boundary_sign: bsign as i32,
        })
    }

    /// Level crossing of one ray, in raw integrator coordinates (no
    /// canonicalization, so finite differences across nearby angles are
    /// free of wrap jumps).
    fn curve_point_raw(&self, p: usize, alpha: f64, a: f64) -> Result<Point> {
        let start = self.launch(p, &self.direction(p, alpha));
        let traj = self.integrator().run(&start, Until::Level(a))?;
        match traj.reason {
            StopReason::LevelReached { .. } => Ok(traj.end),
            _ => Err(Error::LevelNotReached { level: a }),
        }
    }

    /// The co-orienting vector at the curve point for angle `alpha`: the
    /// transported orientation frame of `D(p)` with the flow direction
    /// split off, evaluated on the tracing level.
    fn transported_normal(&self, p: usize, alpha: f64, a: f64) -> Result<DVector<f64>> {
        let cp = self.get(p)?;
        let start = self.launch(p, &self.direction(p, alpha));
        let integ = self.integrator();
        let (traj, cols) = integ.run_with_frame(&start, &cp.orientation_frame(), Until::Level(a))?;
        match traj.reason {
            StopReason::LevelReached { .. } => {}
            _ => return Err(Error::LevelNotReached { level: a }),
        }
        let x = traj.end;
        let w = self.f.neg_gradient(&self.atlas, &x);
        let w = &w / w.norm();
        let qmat = gram_schmidt_oriented(&cols)?;
        let wc = qmat.transpose() * w;
        let wcn = wc.norm();
        if wcn < DEGENERATE_DET {
            return Err(Error::DegenerateIntersection { det: wcn });
        }
        let (eprime, sigma) = householder_complement(&(wc / wcn));
        Ok(&qmat * eprime.column(0).clone_owned() * sigma)
    }
}

/// Checks the defining invariant of a class: the trajectory from its
/// representative converges to the target, or (for a class resolved only
/// to a finite angular tolerance) dwells at the target within the bound
/// that tolerance implies before falling through.
pub fn check_class(sys: &MorseSystem, class: &FlowLineClass) -> Result<bool> {
    let traj = sys.integrator().run(&class.representative, Until::Converged)?;
    if let StopReason::Converged { critical } = traj.reason {
        if critical == class.to {
            return Ok(true);
        }
        let rho = min_separation(&sys.atlas, &sys.criticals) / 2.5;
        let dwells = dwell_decompose(&sys.atlas, &sys.criticals, &traj, rho)?;
        return Ok(dwells
            .iter()
            .any(|d| d.critical == class.to && d.closest < 1e-3));
    }
    Ok(false)
}
