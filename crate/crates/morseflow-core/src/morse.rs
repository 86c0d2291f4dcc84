//! Morse functions on the built-in manifolds: values, derivatives, critical
//! points with their index data, quadratic normal-form charts, and the
//! operator turning a gradient-like field into the genuine gradient of a
//! modified metric.

use alloc::borrow::ToOwned;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::jet::Jet2;
use crate::linalg;
use crate::manifold::{Atlas, Kind, Point};
#[allow(unused_imports)]
use crate::real::FloatExt;
use crate::{Error, Result};

/// Pencil eigenvalues smaller than this (in absolute value) mean the
/// critical point is numerically degenerate.
const EIG_GAP: f64 = 1e-6;
/// Critical points closer than this are treated as duplicates.
const DEDUP_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
enum FnKind {
    /// `f = cos t1 + cos t2` on the flat torus.
    TorusCos,
    /// `f = a x^2 + b y^2 + c z^2` restricted to the unit sphere.
    SphereQuadric { a: f64, b: f64, c: f64 },
    /// `f = -1/2 |v_-|^2 + 1/2 |v_+|^2`, the quadratic normal form.
    LocalModel { dim: usize, index: usize },
    /// `f = 1/2 (-v1^2 - v2^2 + v3^2 + v4^2)` on the 4-dimensional chart.
    Cp2Quadric,
}

/// A Morse function matched to one of the built-in manifolds.
#[derive(Debug, Clone)]
pub struct MorseFunction {
    kind: FnKind,
}

impl MorseFunction {
    /// The canonical function for the given manifold. Parameters:
    /// the ellipsoid quadric accepts `a`, `b`, `c` (defaults 1, 2, 3,
    /// required distinct); the others take none.
    pub fn for_atlas(atlas: &Atlas, params: &BTreeMap<String, f64>) -> Result<MorseFunction> {
        let mut p = params.clone();
        let kind = match *atlas.kind() {
            Kind::FlatTorus => FnKind::TorusCos,
            Kind::EllipsoidSphere { .. } => {
                let a = p.remove("a").unwrap_or(1.0);
                let b = p.remove("b").unwrap_or(2.0);
                let c = p.remove("c").unwrap_or(3.0);
                let mut s = [a, b, c];
                s.sort_by(f64::total_cmp);
                if s[1] - s[0] < 1e-9 || s[2] - s[1] < 1e-9 {
                    return Err(Error::BadParameter(
                        "quadric coefficients a, b, c must be distinct".to_owned(),
                    ));
                }
                FnKind::SphereQuadric { a, b, c }
            }
            Kind::MorseLocalModel { dim, index, .. } => FnKind::LocalModel { dim, index },
            Kind::Cp2Chart { .. } => FnKind::Cp2Quadric,
        };
        if let Some((key, _)) = p.pop_first() {
            return Err(Error::BadParameter(format!(
                "unknown function parameter `{key}`"
            )));
        }
        Ok(MorseFunction { kind })
    }

    pub fn value(&self, atlas: &Atlas, p: &Point) -> f64 {
        self.differentials(atlas, p).0
    }

    /// Value, coordinate differential (partial derivatives), and coordinate
    /// Hessian (matrix of second partials) in the point's chart.
    pub fn differentials(&self, _atlas: &Atlas, p: &Point) -> (f64, DVector<f64>, DMatrix<f64>) {
        match self.kind {
            FnKind::TorusCos => {
                let (t1, t2) = (p.coords[0], p.coords[1]);
                let v = t1.cos() + t2.cos();
                let df = DVector::from_row_slice(&[-t1.sin(), -t2.sin()]);
                let h = DMatrix::from_diagonal(&DVector::from_row_slice(&[-t1.cos(), -t2.cos()]));
                (v, df, h)
            }
            FnKind::SphereQuadric { a, b, c } => {
                let u1 = Jet2::variable(2, 0, p.coords[0]);
                let u2 = Jet2::variable(2, 1, p.coords[1]);
                let r2 = u1.sq().add(&u2.sq());
                let d = r2.add_const(1.0);
                let x = u1.scale(2.0).div(&d);
                let y = u2.scale(2.0).div(&d);
                // Chart 0 projects from the north pole (z = +1 excluded),
                // chart 1 from the south; z flips sign between them.
                let z = if p.chart == 0 {
                    r2.add_const(-1.0).div(&d)
                } else {
                    r2.add_const(-1.0).div(&d).scale(-1.0)
                };
                let f = x.sq().scale(a).add(&y.sq().scale(b)).add(&z.sq().scale(c));
                (f.v, f.g, f.h)
            }
            FnKind::LocalModel { dim, index } => {
                let mut v = 0.0;
                let mut df = DVector::zeros(dim);
                let mut h = DMatrix::zeros(dim, dim);
                for i in 0..dim {
                    let s = if i < index { -1.0 } else { 1.0 };
                    v += 0.5 * s * p.coords[i] * p.coords[i];
                    df[i] = s * p.coords[i];
                    h[(i, i)] = s;
                }
                (v, df, h)
            }
            FnKind::Cp2Quadric => {
                let signs = [-1.0, -1.0, 1.0, 1.0];
                let mut v = 0.0;
                let mut df = DVector::zeros(4);
                let mut h = DMatrix::zeros(4, 4);
                for i in 0..4 {
                    v += 0.5 * signs[i] * p.coords[i] * p.coords[i];
                    df[i] = signs[i] * p.coords[i];
                    h[(i, i)] = signs[i];
                }
                (v, df, h)
            }
        }
    }

    /// Gradient vector field coefficients: `grad f = g^{-1} df`.
    pub fn gradient(&self, atlas: &Atlas, p: &Point) -> DVector<f64> {
        let (_, df, _) = self.differentials(atlas, p);
        atlas.metric_inverse(p) * df
    }

    /// The negative gradient field, the object whose flow everything else
    /// studies.
    pub fn neg_gradient(&self, atlas: &Atlas, p: &Point) -> DVector<f64> {
        -self.gradient(atlas, p)
    }

    /// Squared Riemannian norm of the gradient, `df^T g^{-1} df`.
    pub fn grad_norm_sq(&self, atlas: &Atlas, p: &Point) -> f64 {
        let (_, df, _) = self.differentials(atlas, p);
        (atlas.metric_inverse(p) * &df).dot(&df)
    }

    /// Coordinate Jacobian of the negative gradient field. Column `b` is
    /// `g^{-1} [ (d_b g) g^{-1} df - H e_b ]`.
    pub fn neg_gradient_jacobian(&self, atlas: &Atlas, p: &Point) -> DMatrix<f64> {
        let n = atlas.dim();
        let (_, df, h) = self.differentials(atlas, p);
        let gi = atlas.metric_inverse(p);
        let grad = &gi * &df;
        let parts = atlas.metric_partials(p);
        let mut j = DMatrix::zeros(n, n);
        for b in 0..n {
            let col = &gi * (&parts[b] * &grad - h.column(b));
            j.set_column(b, &col);
        }
        j
    }
}

/// A nondegenerate critical point with its spectral data.
///
/// `frame` holds the eigenvectors of the Hessian-metric pencil as columns,
/// metric-orthonormal, ordered by ascending eigenvalue, with a deterministic
/// sign convention. The first `index` columns span the descending
/// directions.
#[derive(Debug, Clone)]
pub struct CriticalPoint {
    pub label: String,
    pub point: Point,
    pub value: f64,
    pub index: usize,
    pub eigenvalues: Vec<f64>,
    pub frame: DMatrix<f64>,
    /// Reverses the chosen orientation of the descending manifold.
    pub flip: bool,
}

impl CriticalPoint {
    /// Basis of the descending subspace (negative eigenvalue directions).
    pub fn v_minus(&self) -> DMatrix<f64> {
        self.frame.columns(0, self.index).clone_owned()
    }

    /// Basis of the ascending subspace.
    pub fn v_plus(&self) -> DMatrix<f64> {
        self.frame
            .columns(self.index, self.frame.ncols() - self.index)
            .clone_owned()
    }

    /// Oriented basis of the descending subspace: `v_minus` with the first
    /// column negated when the orientation is flipped. Empty for minima.
    pub fn orientation_frame(&self) -> DMatrix<f64> {
        let mut m = self.v_minus();
        if self.flip && self.index > 0 {
            let c = -m.column(0);
            m.set_column(0, &c);
        }
        m
    }

    /// For minima the orientation is a bare sign carried separately.
    pub fn orientation_sign_factor(&self) -> f64 {
        if self.index == 0 && self.flip {
            -1.0
        } else {
            1.0
        }
    }
}

/// Newton search grid extent per chart, by manifold.
fn search_box(atlas: &Atlas) -> f64 {
    match *atlas.kind() {
        Kind::FlatTorus => core::f64::consts::PI,
        Kind::EllipsoidSphere { .. } => 2.0,
        Kind::MorseLocalModel { radius, .. } => radius.min(2.0),
        Kind::Cp2Chart { epsilon } => epsilon.sqrt(),
    }
}

/// Finds all critical points of `f` by a dense Newton search, verifies
/// nondegeneracy, and labels them `c0, c1, ...` in order of descending
/// critical value (ties broken by chart id, then lexicographic coordinates).
pub fn find_critical_points(atlas: &Atlas, f: &MorseFunction) -> Result<Vec<CriticalPoint>> {
    let n = atlas.dim();
    let per_axis = if n <= 2 { 9 } else { 5 };
    let half = search_box(atlas);
    let mut found: Vec<Point> = Vec::new();

    for chart in 0..atlas.charts() {
        let mut idx = alloc::vec![0usize; n];
        loop {
            let coords: Vec<f64> = idx
                .iter()
                .map(|&i| -half + (i as f64 + 0.5) * (2.0 * half / per_axis as f64))
                .collect();
            let start = Point::new(chart, &coords);
            if let Some(root) = newton_root(atlas, f, &start) {
                let root = canonical_representative(atlas, &root);
                if !found.iter().any(|p| atlas.distance(p, &root) < DEDUP_TOL) {
                    found.push(root);
                }
            }
            // Odometer increment over the grid.
            let mut k = 0;
            loop {
                if k == n {
                    break;
                }
                idx[k] += 1;
                if idx[k] < per_axis {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }

    let mut crits: Vec<CriticalPoint> = Vec::with_capacity(found.len());
    for p in found {
        crits.push(classify_critical(atlas, f, &p)?);
    }
    crits.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then(a.point.chart.cmp(&b.point.chart))
            .then_with(|| {
                for i in 0..n {
                    let c = a.point.coords[i].total_cmp(&b.point.coords[i]);
                    if c != core::cmp::Ordering::Equal {
                        return c;
                    }
                }
                core::cmp::Ordering::Equal
            })
    });
    for (i, c) in crits.iter_mut().enumerate() {
        c.label = format!("c{i}");
    }
    Ok(crits)
}

/// Newton iteration on `df = 0` from `start`; `None` when it diverges,
/// hits a singular Hessian, or leaves the search region.
fn newton_root(atlas: &Atlas, f: &MorseFunction, start: &Point) -> Option<Point> {
    let mut x = start.clone();
    let bound = 4.0 * search_box(atlas).max(1.0);
    for _ in 0..60 {
        let (_, df, h) = f.differentials(atlas, &x);
        if df.amax() < 1e-12 {
            // One polishing step unless the Hessian is singular.
            if let Ok(step) = linalg::solve(&h, &df) {
                x.coords -= step;
            }
            return Some(x);
        }
        let step = linalg::solve(&h, &df).ok()?;
        x.coords -= step;
        if x.coords.norm() > bound || !x.coords.iter().all(|c| c.is_finite()) {
            return None;
        }
    }
    None
}

/// Picks the deterministic home chart for a critical point: wrap on the
/// torus; on multi-chart manifolds the chart where the coordinates have the
/// smallest norm (ties to the lowest chart id). Coordinates are snapped to
/// zero below 1e-9 so exact symmetric points stay exact.
fn canonical_representative(atlas: &Atlas, p: &Point) -> Point {
    let mut best = atlas.canonicalize(p);
    for to in 0..atlas.charts() {
        if to == p.chart {
            continue;
        }
        if let Ok(q) = atlas.transition(p, to) {
            let (qr, br) = (q.coords.norm(), best.coords.norm());
            if qr < br - 1e-9 || ((qr - br).abs() <= 1e-9 && to < best.chart) {
                best = q;
            }
        }
    }
    best.coords = best.coords.map(|c| if c.abs() < 1e-9 { 0.0 } else { c });
    best
}

fn classify_critical(atlas: &Atlas, f: &MorseFunction, p: &Point) -> Result<CriticalPoint> {
    let (value, df, h) = f.differentials(atlas, p);
    if df.amax() > 1e-9 {
        return Err(Error::DegenerateCritical {
            detail: format!("gradient residual {:.3e} after Newton", df.amax()),
        });
    }
    let g = atlas.metric(p);
    let (eigenvalues, frame) = linalg::sym_eig_pencil(&h, &g)?;
    if eigenvalues.iter().any(|l| l.abs() < EIG_GAP) {
        return Err(Error::DegenerateCritical {
            detail: format!(
                "pencil eigenvalue {:.3e} below the gap {EIG_GAP:.0e}",
                eigenvalues.iter().fold(f64::INFINITY, |m, l| m.min(l.abs()))
            ),
        });
    }
    let index = eigenvalues.iter().filter(|&&l| l < 0.0).count();
    Ok(CriticalPoint {
        label: String::new(),
        point: p.clone(),
        value,
        index,
        eigenvalues,
        frame,
        flip: false,
    })
}

/// Smallest pairwise distance among critical points; infinite for fewer
/// than two.
pub fn min_separation(atlas: &Atlas, crits: &[CriticalPoint]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..crits.len() {
        for j in (i + 1)..crits.len() {
            best = best.min(atlas.distance(&crits[i].point, &crits[j].point));
        }
    }
    best
}

/// Quality report for the quadratic normal-form chart at a critical point.
#[derive(Debug, Clone)]
pub struct MorseChartReport {
    pub label: String,
    pub epsilon: f64,
    pub samples: usize,
    /// Chart map: `v -> p + J v` in the home chart of the critical point.
    pub frame: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    /// Max deviation of `f` from the exact quadratic normal form over the
    /// sampled ball.
    pub f_defect: f64,
    /// Max deviation of the pulled-back metric from its value at the
    /// center (constancy defect, Frobenius norm).
    pub metric_defect: f64,
    /// `f_defect + metric_defect`.
    pub defect: f64,
    /// How far the constant model metric is from the identity:
    /// `max |lambda_i - 1|` over pencil eigenvalue magnitudes.
    pub anisotropy: f64,
}

/// Builds the normal-form chart `h(v) = p + J v` at `cp`, where the columns
/// of `J` are pencil eigenvectors scaled by `|lambda|^{-1/2}`, and samples
/// the ball `|v| <= epsilon` to measure how far `f . h` is from
/// `f(p) - 1/2 |v_-|^2 + 1/2 |v_+|^2` and how far the pulled-back metric is
/// from constant.
pub fn morse_chart(
    atlas: &Atlas,
    f: &MorseFunction,
    cp: &CriticalPoint,
    epsilon: f64,
    samples: usize,
) -> Result<MorseChartReport> {
    if epsilon <= 0.0 {
        return Err(Error::BadParameter("epsilon must be positive".to_owned()));
    }
    let n = atlas.dim();
    let mut j = cp.frame.clone();
    for (i, &l) in cp.eigenvalues.iter().enumerate() {
        let s = 1.0 / l.abs().sqrt();
        let col = j.column(i) * s;
        j.set_column(i, &col);
    }
    let model_metric = |v: &DVector<f64>| -> DMatrix<f64> {
        let x = Point::from_vector(cp.point.chart, &cp.point.coords + &j * v);
        j.transpose() * atlas.metric(&x) * &j
    };
    let at_center = model_metric(&DVector::zeros(n));

    let mut rng = SplitMix64::new(0x9E37_79B9_7F4A_7C15);
    let mut f_defect: f64 = 0.0;
    let mut metric_defect: f64 = 0.0;
    for _ in 0..samples {
        let v = rng.ball_point(n, epsilon);
        let x = Point::from_vector(cp.point.chart, &cp.point.coords + &j * &v);
        if !atlas.contains(&x) {
            return Err(Error::BadParameter(format!(
                "epsilon {epsilon} pushes the model chart outside the manifold chart"
            )));
        }
        let mut model = cp.value;
        for i in 0..n {
            let s = if i < cp.index { -0.5 } else { 0.5 };
            model += s * v[i] * v[i];
        }
        f_defect = f_defect.max((f.value(atlas, &x) - model).abs());
        metric_defect = metric_defect.max((model_metric(&v) - &at_center).norm());
    }
    let anisotropy = cp
        .eigenvalues
        .iter()
        .fold(0.0_f64, |m, l| m.max((l.abs() - 1.0).abs()));
    Ok(MorseChartReport {
        label: cp.label.clone(),
        epsilon,
        samples,
        frame: j,
        eigenvalues: cp.eigenvalues.clone(),
        f_defect,
        metric_defect,
        defect: f_defect + metric_defect,
        anisotropy,
    })
}

/// Minimal deterministic RNG for defect sampling; dev-quality statistics
/// are plenty here and it keeps the core dependency-free.
struct SplitMix64(u64);

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        SplitMix64(seed)
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1].
    fn next_f64(&mut self) -> f64 {
        (((self.next_u64() >> 11) + 1) as f64) / (1u64 << 53) as f64
    }

    fn next_normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * core::f64::consts::PI * u2).cos()
    }

    /// Roughly uniform point in the ball of the given radius: Gaussian
    /// direction with radius `r * u^{1/n}`.
    fn ball_point(&mut self, n: usize, radius: f64) -> DVector<f64> {
        let mut v = DVector::from_fn(n, |_, _| self.next_normal());
        let norm = v.norm();
        if norm < 1e-300 {
            v[0] = 1.0;
        } else {
            v /= norm;
        }
        v * (radius * self.next_f64().powf(1.0 / n as f64))
    }
}

/// The pointwise operator `A` with `A V1 = V2`, symmetric and positive
/// definite for the metric `g`, equal to the identity on the orthogonal
/// complement of the plane spanned by `V1` and `V2`, and reducing to the
/// identity when the fields agree. Requires `<V1, V2>_g > 0`.
pub fn metric_operator(
    g: &DMatrix<f64>,
    v1: &DVector<f64>,
    v2: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    let chol = g
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("metric_operator"))?;
    // Work in metric-orthonormal coordinates w = L^T v, where g becomes
    // the identity.
    let lt = chol.l().transpose();
    let w1 = &lt * v1;
    let w2 = &lt * v2;
    let (n1, n2) = (w1.norm(), w2.norm());
    if n1 < 1e-300 || n2 < 1e-300 {
        return Err(Error::NotGradientLike { inner: 0.0 });
    }
    // On the diagonal the interpolation collapses to the identity; return
    // it exactly instead of round-tripping through the rank-two update.
    if v1 == v2 {
        return Ok(DMatrix::identity(n, n));
    }
    let e1 = &w1 / n1;
    let e2 = &w2 / n2;
    let c = e1.dot(&e2);
    if c <= 0.0 {
        return Err(Error::NotGradientLike { inner: c });
    }
    // A2 = I + e1 (c e2 - (1 + c + c^2) e1)^T / (1 + c)
    //        + e2 (c^2 e1 + e2)^T / (c (1 + c)).
    let mut a2 = DMatrix::identity(n, n);
    a2 += &e1 * (&e2 * c - &e1 * (1.0 + c + c * c)).transpose() / (1.0 + c);
    a2 += &e2 * (&e1 * (c * c) + &e2).transpose() / (c * (1.0 + c));
    let a_tilde = a2 * (n2 / n1);
    // Back to coordinates: A = L^{-T} A~ L^T.
    let a = lt
        .solve_upper_triangular(&(a_tilde * &lt))
        .ok_or(Error::SingularMatrix("metric_operator"))?;
    Ok(a)
}

/// Modified metric for which the gradient-like field `x` becomes the true
/// gradient of `f` at this point: returns `g~ = g A` with
/// `A = metric_operator(g, x, grad_g f)`, so that `g~^{-1} df = x`.
pub fn gradient_like_to_metric(
    g: &DMatrix<f64>,
    df: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let grad = linalg::solve_spd(g, df)?;
    let a = metric_operator(g, x, &grad)?;
    let gt = g * a;
    // Kill round-off asymmetry; the operator is symmetric by construction.
    Ok((&gt + gt.transpose()) * 0.5)
}
