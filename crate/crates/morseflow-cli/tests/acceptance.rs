//! The acceptance gate: one test per shipped guarantee, each printing a
//! single verdict line (visible under `--nocapture`). Every bound in this
//! file is frozen; loosening one is a regression, not a fix.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::time::Instant;

use anyhow::{anyhow, ensure, Result};
use nalgebra::{DMatrix, DVector};

use morseflow_cli::config::PipelineConfig;
use morseflow_cli::pipeline::{run_pipeline, Stage};
use morseflow_cli::report::Verdict;
use morseflow_core::cp2::{c1_blowup_scan, c1_limit, cp2_connect, cp2_flow};
use morseflow_core::flow::{FlowParams, Until};
use morseflow_core::homology::{build_complex, signed_count_table, smith_homology};
use morseflow_core::manifold::{Atlas, Point};
use morseflow_core::moduli::{ModuliParams, MorseSystem};
use morseflow_core::morse::{metric_operator, MorseFunction};
use morseflow_core::strata::{
    component_counts, corner_chart, stratification, succession_poset, CornerVariant, SpaceTag,
};
use morseflow_core::Error;

fn criterion(name: &str, body: impl FnOnce() -> Result<()>) {
    match body() {
        Ok(()) => println!("ACCEPTANCE {name}: pass"),
        Err(e) => {
            println!("ACCEPTANCE {name}: FAIL ({e:#})");
            panic!("acceptance criterion `{name}` failed: {e:#}");
        }
    }
}

/// Deterministic splitmix64 stream, so reruns sample identical points.
struct Rng(u64);

impl Rng {
    fn new(seed: u64) -> Rng {
        Rng(seed)
    }

    fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-1, 1).
    fn symmetric(&mut self) -> f64 {
        2.0 * self.unit() - 1.0
    }
}

fn system(name: &str) -> Result<MorseSystem> {
    PipelineConfig::for_builtin(name).build_system()
}

/// Distance between two angular coordinates on the torus.
fn torus_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).abs() % TAU;
    d.min(TAU - d)
}

fn dir2(theta: f64) -> DVector<f64> {
    DVector::from_column_slice(&[theta.cos(), theta.sin()])
}

#[test]
fn criterion_1_torus_pipeline() {
    criterion("1 torus-pipeline", || {
        let cfg = PipelineConfig::for_builtin("flat-torus");
        let clock = Instant::now();
        let outcome = run_pipeline(&cfg, Stage::Full, true);
        let wall = clock.elapsed().as_secs_f64();
        let r = &outcome.report;
        ensure!(r.errors.is_empty(), "pipeline errors: {:?}", r.errors);
        for check in &r.checks {
            ensure!(
                check.verdict != Verdict::Fail,
                "check {} failed: {}",
                check.name,
                check.reason
            );
        }

        ensure!(r.criticals.len() == 4, "expected 4 critical points, found {}", r.criticals.len());
        let expected = [
            (2usize, [0.0, 0.0], 2.0),
            (1, [-PI, 0.0], 0.0),
            (1, [0.0, -PI], 0.0),
            (0, [-PI, -PI], -2.0),
        ];
        let mut used = [false; 4];
        for (index, coords, value) in expected {
            let hit = r.criticals.iter().enumerate().find(|(i, c)| {
                !used[*i]
                    && c.index == index
                    && torus_gap(c.point.coords[0], coords[0]) < 1e-8
                    && torus_gap(c.point.coords[1], coords[1]) < 1e-8
                    && (c.value - value).abs() < 1e-8
            });
            let (i, _) =
                hit.ok_or_else(|| anyhow!("no critical point of index {index} near {coords:?}"))?;
            used[i] = true;
        }

        ensure!(r.moduli.len() == 4, "expected 4 adjacent pairs, found {}", r.moduli.len());
        for row in &r.moduli {
            ensure!(
                row.classes.len() == 2,
                "{} -> {}: {} classes, expected 2",
                row.from,
                row.to,
                row.classes.len()
            );
            ensure!(
                row.signed_count == 0,
                "{} -> {}: signed count {}, expected 0",
                row.from,
                row.to,
                row.signed_count
            );
        }

        let complex = r.complex.as_ref().ok_or_else(|| anyhow!("no chain complex"))?;
        ensure!(complex.d_squared.ok, "the boundary does not square to zero");
        let h = r.homology.as_ref().ok_or_else(|| anyhow!("no homology"))?;
        ensure!(h.betti == vec![1, 2, 1], "betti {:?}, expected [1, 2, 1]", h.betti);
        ensure!(wall < 60.0, "pipeline took {wall:.1}s, budget is 60s");
        Ok(())
    });
}

#[test]
fn criterion_2_descending_disk_octagon() {
    criterion("2 descending-octagon", || {
        let sys = system("flat-torus")?;
        let top = sys
            .criticals
            .iter()
            .position(|c| c.index == 2)
            .ok_or_else(|| anyhow!("no index-two critical point"))?;
        let poset = succession_poset(&sys)?;
        let counts = component_counts(&sys, &poset)?;
        let table = stratification(SpaceTag::Dbar { p: top }, &poset, &counts)?;
        for (k, want) in [(0usize, 1u64), (1, 8), (2, 8)] {
            let got = table.components_at(k);
            ensure!(got == want, "codimension {k}: {got} components, expected {want}");
        }
        ensure!(table.euler() == 1, "euler characteristic {}, expected 1", table.euler());
        ensure!(
            table.boundary_euler() == 0,
            "boundary euler characteristic {}, expected 0",
            table.boundary_euler()
        );
        for s in table.by_codim(2) {
            ensure!(
                s.ancestors.len() == 2,
                "corner stratum {:?} has {} codimension-one ancestors, expected 2",
                s.sequence,
                s.ancestors.len()
            );
            let (a, b) = (s.ancestors[0], s.ancestors[1]);
            ensure!(a != b, "corner stratum {:?} repeats an ancestor", s.sequence);
            ensure!(
                table.strata[a].k == 1 && table.strata[b].k == 1,
                "ancestors of {:?} are not both edges",
                s.sequence
            );
        }
        Ok(())
    });
}

#[test]
fn criterion_3_endpoint_identity() {
    criterion("3 endpoint-identity", || {
        let torus = system("flat-torus")?;
        let top = torus.criticals.iter().position(|c| c.index == 2).unwrap();
        let bottom = torus.criticals.iter().position(|c| c.index == 0).unwrap();
        let curve = torus.moduli_curve(top, bottom)?;
        ensure!(
            curve.components.len() == 4,
            "torus curve has {} components, expected 4",
            curve.components.len()
        );
        for (i, comp) in curve.components.iter().enumerate() {
            ensure!(
                comp.endpoints.len() == 2,
                "torus component {i} has {} endpoints, expected 2",
                comp.endpoints.len()
            );
            ensure!(
                comp.endpoint_sum == 0,
                "torus component {i} has weighted endpoint sum {}",
                comp.endpoint_sum
            );
        }

        let sphere = system("ellipsoid-sphere")?;
        let maxima: Vec<usize> =
            (0..sphere.criticals.len()).filter(|&i| sphere.criticals[i].index == 2).collect();
        let minima: Vec<usize> =
            (0..sphere.criticals.len()).filter(|&i| sphere.criticals[i].index == 0).collect();
        ensure!(maxima.len() == 2 && minima.len() == 2, "unexpected sphere critical set");
        for &p in &maxima {
            for &q in &minima {
                let curve = sphere.moduli_curve(p, q)?;
                ensure!(!curve.components.is_empty(), "empty sphere curve");
                for comp in &curve.components {
                    ensure!(
                        comp.endpoints.len() == 2,
                        "sphere {} -> {} component has {} endpoints",
                        sphere.criticals[p].label,
                        sphere.criticals[q].label,
                        comp.endpoints.len()
                    );
                    ensure!(
                        comp.endpoint_sum == 0,
                        "sphere {} -> {} component has weighted endpoint sum {}",
                        sphere.criticals[p].label,
                        sphere.criticals[q].label,
                        comp.endpoint_sum
                    );
                }
            }
        }
        Ok(())
    });
}

#[test]
fn criterion_4_sphere_pipeline() {
    criterion("4 sphere-pipeline", || {
        let cfg = PipelineConfig::for_builtin("ellipsoid-sphere");
        let clock = Instant::now();
        let outcome = run_pipeline(&cfg, Stage::Full, true);
        let wall = clock.elapsed().as_secs_f64();
        let r = &outcome.report;
        ensure!(r.errors.is_empty(), "pipeline errors: {:?}", r.errors);
        for check in &r.checks {
            ensure!(
                check.verdict != Verdict::Fail,
                "check {} failed: {}",
                check.name,
                check.reason
            );
        }

        ensure!(r.criticals.len() == 6, "expected 6 critical points, found {}", r.criticals.len());
        let mut indices: Vec<usize> = r.criticals.iter().map(|c| c.index).collect();
        indices.sort_unstable();
        ensure!(indices == [0, 0, 1, 1, 2, 2], "index multiset {indices:?}");
        let mut values: Vec<f64> = r.criticals.iter().map(|c| c.value).collect();
        values.sort_by(f64::total_cmp);
        for (got, want) in values.iter().zip([1.0, 1.0, 2.0, 2.0, 3.0, 3.0]) {
            ensure!((got - want).abs() < 1e-8, "critical value {got}, expected {want}");
        }

        let index_of: BTreeMap<&str, usize> =
            r.criticals.iter().map(|c| (c.label.as_str(), c.index)).collect();
        let top_rows: Vec<_> = r
            .moduli
            .iter()
            .filter(|row| index_of[row.from.as_str()] == 2 && index_of[row.to.as_str()] == 1)
            .collect();
        ensure!(top_rows.len() == 4, "{} max-to-saddle pairs, expected 4", top_rows.len());
        for row in top_rows {
            ensure!(
                row.classes.len() == 1,
                "{} -> {}: {} classes, expected 1",
                row.from,
                row.to,
                row.classes.len()
            );
            ensure!(
                row.signed_count.abs() == 1,
                "{} -> {}: signed count {}, expected magnitude 1",
                row.from,
                row.to,
                row.signed_count
            );
        }

        let complex = r.complex.as_ref().ok_or_else(|| anyhow!("no chain complex"))?;
        ensure!(complex.d_squared.ok, "the boundary does not square to zero");
        let h = r.homology.as_ref().ok_or_else(|| anyhow!("no homology"))?;
        ensure!(h.betti == vec![1, 0, 1], "betti {:?}, expected [1, 0, 1]", h.betti);
        ensure!(wall < 120.0, "pipeline took {wall:.1}s, budget is 120s");
        Ok(())
    });
}

/// Flows `v` to the level of `w` and compares against `w` componentwise.
fn compare_along_flow(sys: &MorseSystem, v: &DVector<f64>, w: &DVector<f64>, tol: f64) -> Result<()> {
    let start = Point::from_vector(0, v.clone());
    let f0 = sys.f.value(&sys.atlas, &start);
    let f1 = sys.f.value(&sys.atlas, &Point::from_vector(0, w.clone()));
    if (f0 - f1).abs() < 1e-10 {
        let gap = (v - w).amax();
        ensure!(gap < tol, "fixed point of the connection moved by {gap:.3e}");
        return Ok(());
    }
    let integ = if f0 > f1 { sys.integrator() } else { sys.integrator().backward() };
    let end = integ.flow_map(&start, f1)?;
    let gap = (&end.coords - w).amax();
    ensure!(gap < tol, "integrated flow disagrees with the connection formula by {gap:.3e}");
    Ok(())
}

#[test]
fn criterion_5_quadric_connection() {
    criterion("5 quadric-connection", || {
        let sys = system("cp2-chart")?;
        let mut rng = Rng::new(0x00C0_FFEE);
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < 100 {
            attempts += 1;
            ensure!(attempts <= 2000, "sampler starved after {accepted} accepted points");
            let v1 = 1.4 * (rng.unit() - 0.5);
            let v2 = 1.4 * (rng.unit() - 0.5);
            if v1.hypot(v2) < 0.05 {
                continue;
            }
            let phase = TAU * rng.unit();
            let radius = 0.5 + 0.5 * rng.unit();
            let v =
                DVector::from_row_slice(&[v1, v2, radius * phase.cos(), radius * phase.sin()]);
            let w = cp2_connect(&v)?;
            compare_along_flow(&sys, &v, &w, 1e-6)?;
            accepted += 1;
        }

        // Transverse scan down to s = 1e-6: the collar coordinate sticks to
        // its closed-form limit instead of decaying toward the boundary
        // value 0 of the broken configuration.
        let grid: Vec<f64> = (1..=6).map(|k| 10f64.powi(-k)).collect();
        ensure!(c1_limit(1.0, 0.0) == 1.0, "axis limit is not exactly 1");
        for row in c1_blowup_scan(1.0, 0.0, &grid)? {
            ensure!((row.v5 - 1.0).abs() < 1e-9, "axis scan at s = {}: v5 = {}", row.s, row.v5);
        }
        let skew = c1_limit(1.0, 1.0);
        ensure!((skew - 0.7861513777574233).abs() < 1e-15, "skew limit {skew}");
        for row in c1_blowup_scan(1.0, 1.0, &grid)? {
            ensure!(
                (row.v5 - skew).abs() < 1e-9,
                "skew scan at s = {}: v5 = {}, limit {skew}",
                row.s,
                row.v5
            );
        }
        let broken = DVector::from_row_slice(&[0.0, 0.0, 1.0, 0.0]);
        ensure!(
            matches!(cp2_connect(&broken), Err(Error::BrokenLine(_))),
            "the broken configuration must be rejected"
        );
        Ok(())
    });
}

#[test]
fn criterion_6_corner_charts() {
    criterion("6 corner-charts", || {
        let variants = [
            (CornerVariant::P, "P"),
            (CornerVariant::QPlus, "Q+"),
            (CornerVariant::QMinus, "Q-"),
            (CornerVariant::Collar, "collar"),
        ];
        for (i, (variant, name)) in variants.into_iter().enumerate() {
            let chart = corner_chart(variant, 1.0)?;
            let roundtrip = chart.roundtrip_error(1000, 0xACCE_0001 + i as u64)?;
            ensure!(roundtrip < 1e-12, "{name}: round-trip error {roundtrip:.3e}");
            let r = chart.sphere_radius();
            let mut sigma = f64::INFINITY;
            for k in 0..4 {
                let theta = 0.7 + 1.3 * k as f64;
                let on_sphere = |t: f64| dir2(t) * r;
                let in_ball = |t: f64| dir2(t) * (0.55 * r);
                let (v2, v1) = match variant {
                    CornerVariant::P | CornerVariant::Collar => {
                        (on_sphere(theta), on_sphere(theta + 0.9))
                    }
                    CornerVariant::QPlus => (on_sphere(theta), in_ball(theta + 0.9)),
                    CornerVariant::QMinus => (in_ball(theta), on_sphere(theta + 0.9)),
                };
                let analytic = chart.dphi_zero(&v2, &v1)?;
                let fd = chart.dphi_fd(&v2, &v1, 0.0)?;
                let gap = (analytic - fd).abs().max();
                ensure!(gap < 1e-6, "{name}: corner derivative gap {gap:.3e}");
                sigma = sigma.min(chart.min_singular_at_zero(&v2, &v1)?);
            }
            ensure!(sigma >= 0.5, "{name}: smallest singular value {sigma:.6}, bound 0.5");
        }
        Ok(())
    });
}

#[test]
fn criterion_7_local_models() {
    criterion("7 local-models", || {
        let sys = system("morse-local-model")?;
        let times = [0.5, 2.0, 3.5, 5.0];
        let starts = [(0.02, 1.5), (-0.015, -2.0), (0.01, 3.0)];
        for &(x, y) in &starts {
            for &t in &times {
                let fwd = sys.integrator().run(&Point::new(0, &[x, y]), Until::Time(t))?;
                let gap = (fwd.end.coords[0] - x * t.exp())
                    .abs()
                    .max((fwd.end.coords[1] - y * (-t).exp()).abs());
                ensure!(gap < 1e-8, "forward t = {t} from ({x}, {y}): gap {gap:.3e}");
                // The transposed start keeps the reversed orbit bounded.
                let bwd =
                    sys.integrator().backward().run(&Point::new(0, &[y, x]), Until::Time(t))?;
                let gap = (bwd.end.coords[0] - y * (-t).exp())
                    .abs()
                    .max((bwd.end.coords[1] - x * t.exp()).abs());
                ensure!(gap < 1e-8, "backward t = {t} from ({y}, {x}): gap {gap:.3e}");
            }
        }

        let cp2 = system("cp2-chart")?;
        let mut rng = Rng::new(0x0010_CA15);
        let mut accepted = 0;
        while accepted < 20 {
            let v = DVector::from_fn(4, |_, _| 0.8 * (rng.unit() - 0.5));
            let t = (0.05 + 0.45 * rng.unit()) * if rng.unit() < 0.5 { -1.0 } else { 1.0 };
            let Ok(w) = cp2_flow(&v, t) else { continue };
            let start = Point::from_vector(0, v.clone());
            let traj = if t >= 0.0 {
                cp2.integrator().run(&start, Until::Time(t))?
            } else {
                cp2.integrator().backward().run(&start, Until::Time(-t))?
            };
            let gap = (&traj.end.coords - &w).amax();
            ensure!(gap < 1e-8, "quadric chart flow at t = {t:.3}: gap {gap:.3e}");
            accepted += 1;
        }
        Ok(())
    });
}

fn sample_vector(rng: &mut Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.symmetric());
        if v.norm() > 0.1 {
            return v;
        }
    }
}

#[test]
fn criterion_8_metric_operator() {
    criterion("8 metric-operator", || {
        let mut rng = Rng::new(0x0A0E_11AA);
        for k in 0..1000 {
            let n = 2 + k % 4;
            let m = DMatrix::from_fn(n, n, |_, _| rng.symmetric());
            let g = &m * m.transpose() + DMatrix::identity(n, n) * 0.5;
            let v1 = sample_vector(&mut rng, n);
            let mut v2 = sample_vector(&mut rng, n);
            let mut inner = v2.dot(&(&g * &v1));
            if inner < 0.0 {
                v2 = -v2;
                inner = -inner;
            }
            if inner < 1e-2 {
                v2 += &v1;
            }

            let a = metric_operator(&g, &v1, &v2)?;
            let ga = &g * &a;
            let asym = (&ga - ga.transpose()).amax();
            ensure!(
                asym < 1e-12 * (1.0 + ga.amax()),
                "sample {k}: g A asymmetric by {asym:.3e}"
            );
            let sym = (&ga + ga.transpose()) * 0.5;
            ensure!(sym.cholesky().is_some(), "sample {k}: g A lost positive definiteness");
            let push = (&a * &v1 - &v2).amax();
            ensure!(
                push <= 1e-10 * v2.amax().max(1.0),
                "sample {k}: A v1 misses v2 by {push:.3e}"
            );
            let id = metric_operator(&g, &v1, &v1)?;
            ensure!(
                id == DMatrix::identity(n, n),
                "sample {k}: A(v, v) is not exactly the identity"
            );
        }
        Ok(())
    });
}

fn torus_system(moduli: ModuliParams, flow: FlowParams) -> Result<MorseSystem> {
    let atlas = Atlas::builtin("flat-torus", &BTreeMap::new())?;
    let f = MorseFunction::for_atlas(&atlas, &BTreeMap::new())?;
    Ok(MorseSystem::build(atlas, f, flow, moduli)?)
}

/// Per-pair classification fingerprint: class count, sorted sign multiset,
/// and the signed count.
fn sign_fingerprint(sys: &MorseSystem) -> Result<BTreeMap<(usize, usize), (usize, Vec<i32>, i64)>> {
    let mut out = BTreeMap::new();
    for p in 0..sys.criticals.len() {
        for q in 0..sys.criticals.len() {
            let (cp, cq) = (&sys.criticals[p], &sys.criticals[q]);
            if cp.index != cq.index + 1 || cp.value <= cq.value {
                continue;
            }
            let classes = sys.connecting_orbits(p, q)?;
            let mut signs: Vec<i32> = classes.iter().map(|c| c.sign).collect();
            let signed: i64 = signs.iter().map(|&s| s as i64).sum();
            signs.sort_unstable();
            out.insert((p, q), (classes.len(), signs, signed));
        }
    }
    Ok(out)
}

fn energy_identity(name: &str, starts: &[Vec<f64>]) -> Result<()> {
    let sys = system(name)?;
    for coords in starts {
        let traj = sys.integrator().run(&Point::new(0, coords), Until::Converged)?;
        let gap = (traj.energy - traj.delta_f()).abs();
        let bound = 1e-6 * traj.delta_f().abs().max(1.0);
        ensure!(
            gap <= bound,
            "{name}: energy {} vs f drop {} from {coords:?}",
            traj.energy,
            traj.delta_f()
        );
    }
    Ok(())
}

#[test]
fn criterion_9_property_suites() {
    criterion("9 property-suites", || {
        // Energy identity: the gradient-norm quadrature equals the drop in
        // f on every builtin, for arbitrary stopping reasons.
        let mut rng = Rng::new(0x0E4E_26F1);
        let torus_starts: Vec<Vec<f64>> =
            (0..100).map(|_| vec![PI * rng.symmetric(), PI * rng.symmetric()]).collect();
        energy_identity("flat-torus", &torus_starts)?;
        let sphere_starts: Vec<Vec<f64>> = (0..100)
            .map(|_| loop {
                let v = vec![1.8 * rng.symmetric(), 1.8 * rng.symmetric()];
                if v[0].hypot(v[1]) <= 1.8 {
                    break v;
                }
            })
            .collect();
        energy_identity("ellipsoid-sphere", &sphere_starts)?;
        let saddle_starts: Vec<Vec<f64>> =
            (0..100).map(|_| vec![3.0 * rng.symmetric(), 3.0 * rng.symmetric()]).collect();
        energy_identity("morse-local-model", &saddle_starts)?;
        let quadric_starts: Vec<Vec<f64>> =
            (0..100).map(|_| (0..4).map(|_| 0.7 * rng.symmetric()).collect()).collect();
        energy_identity("cp2-chart", &quadric_starts)?;

        // Level-to-level flow derivative against central differences.
        let torus = system("flat-torus")?;
        let h = 1e-5;
        let mut tested = 0;
        while tested < 8 {
            let p = Point::new(0, &[PI * rng.symmetric(), PI * rng.symmetric()]);
            let f0 = torus.f.value(&torus.atlas, &p);
            if !(0.65..1.7).contains(&f0) {
                continue;
            }
            let target = f0 - 0.5;
            let grad = torus.f.gradient(&torus.atlas, &p);
            let u = DVector::from_column_slice(&[-grad[1], grad[0]]) / grad.norm();
            let basis = DMatrix::from_columns(&[u.clone()]);
            let integ = torus.integrator();
            let (_, carried) = integ.flow_map_derivative(&p, &basis, target)?;
            let plus = integ.flow_map(&Point::from_vector(0, &p.coords + &u * h), target)?;
            let minus = integ.flow_map(&Point::from_vector(0, &p.coords - &u * h), target)?;
            let fd = torus.atlas.displacement(&minus, &plus)? / (2.0 * h);
            let gap = (&fd - carried.column(0)).norm();
            let bound = 1e-4 * carried.column(0).norm().max(1.0);
            ensure!(
                gap <= bound,
                "flow derivative vs finite differences: gap {gap:.3e} at {:?}",
                p.coords.as_slice()
            );
            tested += 1;
        }

        // Orientation signs are stable under the sign-level choice, mesh
        // refinement, and tightening every tolerance tenfold.
        let baseline = sign_fingerprint(&torus_system(ModuliParams::default(), FlowParams::default())?)?;
        ensure!(baseline.len() == 4, "expected 4 adjacent torus pairs");
        let level_choice = ModuliParams { sign_level_fraction: 0.02, ..ModuliParams::default() };
        let refined_mesh = ModuliParams { mesh: 96, ..ModuliParams::default() };
        let tight_moduli = ModuliParams { bisect_tol: 1e-11, ..ModuliParams::default() };
        let tight_flow =
            FlowParams { abs_tol: 1e-11, rel_tol: 1e-11, ..FlowParams::default() };
        let variants = [
            ("sign level", torus_system(level_choice, FlowParams::default())?),
            ("mesh 96", torus_system(refined_mesh, FlowParams::default())?),
            ("tight tolerances", torus_system(tight_moduli, tight_flow)?),
        ];
        for (what, sys) in &variants {
            let fp = sign_fingerprint(sys)?;
            ensure!(fp == baseline, "classification changed under {what}");
        }

        // Flipping one descending orientation negates that point's row of
        // the signed counts and leaves homology untouched.
        let mut sphere = system("ellipsoid-sphere")?;
        let cap = sphere.criticals.iter().map(|c| c.value).fold(f64::NEG_INFINITY, f64::max) + 1.0;
        let base_counts = signed_count_table(&sphere)?;
        let base_h = smith_homology(&build_complex(&sphere.criticals, &base_counts, cap)?)?;
        let flipped_label = sphere
            .criticals
            .iter()
            .find(|c| c.index == 2)
            .map(|c| c.label.clone())
            .ok_or_else(|| anyhow!("no sphere maximum"))?;
        let flipped_idx = sphere.critical(&flipped_label)?;
        sphere.set_flip(&flipped_label, true)?;
        let flip_counts = signed_count_table(&sphere)?;
        for (&(p, q), &count) in &base_counts {
            let flipped = flip_counts
                .get(&(p, q))
                .copied()
                .ok_or_else(|| anyhow!("pair ({p}, {q}) vanished after the flip"))?;
            if p == flipped_idx {
                ensure!(
                    flipped == -count,
                    "count from the flipped point changed {count} -> {flipped}, expected negation"
                );
            } else {
                ensure!(
                    flipped == count,
                    "count away from the flipped point changed {count} -> {flipped}"
                );
            }
        }
        let flip_h = smith_homology(&build_complex(&sphere.criticals, &flip_counts, cap)?)?;
        ensure!(base_h.betti == vec![1, 0, 1], "sphere betti {:?}", base_h.betti);
        ensure!(flip_h.betti == base_h.betti, "betti changed under the flip");
        ensure!(flip_h.torsion == base_h.torsion, "torsion changed under the flip");

        // The normalized report is byte-for-byte reproducible.
        let cfg = PipelineConfig::for_builtin("flat-torus");
        let first = run_pipeline(&cfg, Stage::Full, true).report.to_json();
        let second = run_pipeline(&cfg, Stage::Full, true).report.to_json();
        ensure!(first == second, "normalized reports differ between runs");
        Ok(())
    });
}
