//! Pipeline orchestration: critical points, moduli classes and curves,
//! stratifications, the chain complex, homology, and the check verdicts,
//! assembled into a `RunReport`. Independent moduli pairs fan out across
//! threads (bounded by `MORSEFLOW_THREADS`); everything is merged back in
//! a fixed order so the report stays deterministic.

use std::collections::BTreeMap;
use std::time::Instant;

use morseflow_core::homology::{build_complex, smith_homology, verify_d_squared, ChainComplex};
use morseflow_core::moduli::{FlowLineClass, MorseSystem};
use morseflow_core::morse::morse_chart;
use morseflow_core::strata::{
    component_counts, stratification, succession_poset, evaluate_on_levels, GeneralizedLine,
    SpaceTag, SuccessionPoset,
};

use crate::config::PipelineConfig;
use crate::report::{
    CheckRow, ClassRow, ComplexRow, CriticalRow, CrossingRow, CurveComponentRow, CurveRow,
    DegreeRow, DSquaredFailureRow, DSquaredRow, EndpointRow, HomologyRow, ModuliRow, PointRow,
    RunReport, StratificationRow, StratumRow,
};

/// Probe radius and sample count for the per-critical normal-form fit.
const CHART_EPSILON: f64 = 0.3;
const CHART_SAMPLES: usize = 200;
/// Values closer than this are treated as the same critical value.
const VALUE_TOL: f64 = 1e-9;

/// How far to take the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Criticals,
    Moduli,
    Strata,
    Homology,
    Full,
}

pub struct Outcome {
    pub report: RunReport,
    /// True when nothing errored and no check failed.
    pub ok: bool,
}

/// Thread budget for a fan-out over `items` independent jobs: the
/// machine's parallelism, capped by `MORSEFLOW_THREADS` when set.
fn thread_budget(items: usize) -> usize {
    let avail = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cap = std::env::var("MORSEFLOW_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(avail);
    cap.min(items).max(1)
}

/// Applies `f` to every item, possibly across threads, preserving order.
fn parallel_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let threads = thread_budget(items.len());
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<U>> = Vec::new();
    out.resize_with(items.len(), || None);
    let f = &f;
    std::thread::scope(|scope| {
        for (slots, jobs) in out.chunks_mut(chunk).zip(items.chunks(chunk)) {
            scope.spawn(move || {
                for (slot, job) in slots.iter_mut().zip(jobs) {
                    *slot = Some(f(job));
                }
            });
        }
    });
    out.into_iter().map(|o| o.expect("every chunk was filled")).collect()
}

fn point_row(sys: &MorseSystem, p: &morseflow_core::manifold::Point) -> PointRow {
    let p = sys.atlas.canonicalize(p);
    PointRow { chart: p.chart, coords: p.coords.iter().copied().collect() }
}

fn space_name(sys: &MorseSystem, tag: &SpaceTag) -> String {
    let label = |i: usize| sys.criticals[i].label.as_str();
    match *tag {
        SpaceTag::Dbar { p } => format!("Dbar({})", label(p)),
        SpaceTag::Mbar { p, q } => format!("Mbar({},{})", label(p), label(q)),
        SpaceTag::Wbar { p, q } => format!("Wbar({},{})", label(p), label(q)),
    }
}

/// Runs the pipeline through `stage`. Errors never abort the run: they
/// are recorded in the report and downstream sections that depend on the
/// failed one stay empty.
pub fn run_pipeline(config: &PipelineConfig, stage: Stage, normalized: bool) -> Outcome {
    let mut report = RunReport::new(config);
    let mut timings: BTreeMap<String, u64> = BTreeMap::new();

    let t0 = Instant::now();
    let sys = match config.build_system() {
        Ok(sys) => sys,
        Err(e) => {
            report.errors.push(format!("{e:#}"));
            return Outcome { ok: false, report };
        }
    };
    report.dim = sys.atlas.dim();
    for cp in &sys.criticals {
        let defect = match morse_chart(&sys.atlas, &sys.f, cp, CHART_EPSILON, CHART_SAMPLES) {
            Ok(fit) => Some(fit.defect),
            Err(e) => {
                report.errors.push(format!("normal-form chart at {}: {e}", cp.label));
                None
            }
        };
        report.criticals.push(CriticalRow {
            label: cp.label.clone(),
            point: point_row(&sys, &cp.point),
            value: cp.value,
            index: cp.index,
            defect,
        });
    }
    match config.resolve_levels(&sys) {
        Ok(levels) => report.levels = levels,
        Err(e) => report.errors.push(format!("{e:#}")),
    }
    timings.insert("criticals".to_owned(), t0.elapsed().as_millis() as u64);

    let mut counts_table: BTreeMap<(usize, usize), i64> = BTreeMap::new();
    let mut moduli_complete = false;
    if stage >= Stage::Moduli {
        let t = Instant::now();
        moduli_complete =
            moduli_stage(&sys, &mut report, &mut counts_table);
        timings.insert("moduli".to_owned(), t.elapsed().as_millis() as u64);
    }

    let mut poset: Option<SuccessionPoset> = None;
    if stage >= Stage::Strata {
        let t = Instant::now();
        poset = strata_stage(&sys, &mut report);
        timings.insert("strata".to_owned(), t.elapsed().as_millis() as u64);
    }

    if stage >= Stage::Homology {
        let t = Instant::now();
        if moduli_complete {
            homology_stage(&sys, &counts_table, &mut report);
        } else {
            report
                .errors
                .push("chain complex skipped: the moduli stage is incomplete".to_owned());
        }
        timings.insert("homology".to_owned(), t.elapsed().as_millis() as u64);
    }

    if stage >= Stage::Full {
        report.checks = build_checks(&report, poset.as_ref());
    }

    if !normalized {
        report.timings_ms = Some(timings);
    }
    let ok = report.errors.is_empty() && !report.any_check_failed();
    Outcome { report, ok }
}

/// Classifies every index-gap-one pair and traces every index-gap-two
/// curve; fills the signed-count table. Returns whether every gap-one
/// pair succeeded.
fn moduli_stage(
    sys: &MorseSystem,
    report: &mut RunReport,
    counts_table: &mut BTreeMap<(usize, usize), i64>,
) -> bool {
    let n = sys.criticals.len();
    let mut gap1: Vec<(usize, usize)> = Vec::new();
    let mut gap2: Vec<(usize, usize)> = Vec::new();
    for p in 0..n {
        for q in 0..n {
            let (cp, cq) = (&sys.criticals[p], &sys.criticals[q]);
            if cp.value <= cq.value + VALUE_TOL {
                continue;
            }
            if cp.index == cq.index + 1 {
                gap1.push((p, q));
            } else if cp.index == cq.index + 2 {
                gap2.push((p, q));
            }
        }
    }

    let classes = parallel_map(&gap1, |&(p, q)| sys.connecting_orbits(p, q));
    let mut complete = true;
    for (&(p, q), outcome) in gap1.iter().zip(classes) {
        let (from, to) = (&sys.criticals[p], &sys.criticals[q]);
        match outcome {
            Ok(classes) => {
                counts_table.insert((p, q), classes.iter().map(|c| c.sign as i64).sum());
                let rows = classes
                    .iter()
                    .map(|c| class_row(sys, c, &report.levels, &mut report.errors))
                    .collect();
                report.moduli.push(ModuliRow {
                    from: from.label.clone(),
                    to: to.label.clone(),
                    signed_count: counts_table[&(p, q)],
                    classes: rows,
                });
            }
            Err(e) => {
                complete = false;
                report.errors.push(format!("moduli {} -> {}: {e}", from.label, to.label));
            }
        }
    }

    let curves = parallel_map(&gap2, |&(p, q)| sys.moduli_curve(p, q));
    for (&(p, q), outcome) in gap2.iter().zip(curves) {
        let (from, to) = (&sys.criticals[p], &sys.criticals[q]);
        match outcome {
            Ok(curve) => {
                let components = curve
                    .components
                    .iter()
                    .map(|c| CurveComponentRow {
                        alpha_start: c.alpha_range.0,
                        alpha_end: c.alpha_range.1,
                        samples: c.polyline.len(),
                        endpoint_sum: c.endpoint_sum,
                        endpoints: c
                            .endpoints
                            .iter()
                            .map(|e| EndpointRow {
                                saddle: sys.criticals[e.saddle].label.clone(),
                                angle: e.angle,
                                sigma_upper: e.sigma_upper,
                                sigma_lower: e.sigma_lower,
                                boundary_sign: e.boundary_sign,
                            })
                            .collect(),
                    })
                    .collect();
                report.curves.push(CurveRow {
                    from: from.label.clone(),
                    to: to.label.clone(),
                    level: curve.level,
                    endpoint_sum: curve.endpoint_sum,
                    components,
                });
            }
            Err(e) => {
                report.errors.push(format!("moduli curve {} -> {}: {e}", from.label, to.label));
            }
        }
    }
    complete
}

fn class_row(
    sys: &MorseSystem,
    class: &FlowLineClass,
    levels: &[f64],
    errors: &mut Vec<String>,
) -> ClassRow {
    let f_from = sys.criticals[class.from].value;
    let f_to = sys.criticals[class.to].value;
    let between: Vec<f64> = levels
        .iter()
        .copied()
        .filter(|&a| a > f_to + VALUE_TOL && a < f_from - VALUE_TOL)
        .collect();
    let line = GeneralizedLine::Unbroken { seed: class.representative.clone() };
    let crossings = match evaluate_on_levels(sys, &line, &between) {
        Ok(points) => between
            .iter()
            .zip(points)
            .map(|(&level, point)| CrossingRow { level, point: point_row(sys, &point) })
            .collect(),
        Err(e) => {
            errors.push(format!(
                "level evaluation {} -> {}: {e}",
                sys.criticals[class.from].label, sys.criticals[class.to].label
            ));
            Vec::new()
        }
    };
    ClassRow {
        direction: class.direction.iter().copied().collect(),
        angle: class.angle,
        sign: class.sign,
        level: class.rep_level,
        representative: point_row(sys, &class.representative),
        crossings,
    }
}

/// Builds the succession poset and the stratum tables of every
/// compactified descending manifold, moduli space, and line space.
fn strata_stage(sys: &MorseSystem, report: &mut RunReport) -> Option<SuccessionPoset> {
    let poset = match succession_poset(sys) {
        Ok(poset) => poset,
        Err(e) => {
            report.errors.push(format!("succession poset: {e}"));
            return None;
        }
    };
    let counts = match component_counts(sys, &poset) {
        Ok(counts) => counts,
        Err(e) => {
            report.errors.push(format!("component counts: {e}"));
            return Some(poset);
        }
    };
    let mut tags: Vec<SpaceTag> = (0..sys.criticals.len()).map(|p| SpaceTag::Dbar { p }).collect();
    tags.extend(poset.relation.iter().map(|&(p, q)| SpaceTag::Mbar { p, q }));
    tags.extend(poset.relation.iter().map(|&(p, q)| SpaceTag::Wbar { p, q }));
    for tag in tags {
        match stratification(tag.clone(), &poset, &counts) {
            Ok(table) => {
                let strata = table
                    .strata
                    .iter()
                    .map(|s| StratumRow {
                        sequence: s
                            .sequence
                            .iter()
                            .map(|&i| sys.criticals[i].label.clone())
                            .collect(),
                        slot: s.slot,
                        codim: s.k,
                        dim: s.dim,
                        components: s.components,
                        ancestors: s.ancestors.clone(),
                    })
                    .collect();
                report.stratifications.push(StratificationRow {
                    space: space_name(sys, &table.tag),
                    euler: table.euler(),
                    boundary_euler: table.boundary_euler(),
                    strata,
                });
            }
            Err(e) => {
                report.errors.push(format!("stratification {}: {e}", space_name(sys, &tag)));
            }
        }
    }
    Some(poset)
}

fn homology_stage(
    sys: &MorseSystem,
    counts_table: &BTreeMap<(usize, usize), i64>,
    report: &mut RunReport,
) {
    let cap = sys.criticals.iter().map(|c| c.value).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    let complex = match build_complex(&sys.criticals, counts_table, cap) {
        Ok(complex) => complex,
        Err(e) => {
            report.errors.push(format!("chain complex: {e}"));
            return;
        }
    };
    match complex_row(&complex, cap) {
        Ok(row) => report.complex = Some(row),
        Err(e) => {
            report.errors.push(format!("chain complex report: {e}"));
            return;
        }
    }
    match smith_homology(&complex) {
        Ok(h) => {
            let torsion: Option<Vec<Vec<i64>>> = h
                .torsion
                .iter()
                .map(|fs| fs.iter().map(|&d| i64::try_from(d).ok()).collect())
                .collect();
            match torsion {
                Some(torsion) => {
                    report.homology = Some(HomologyRow {
                        betti: h.betti,
                        torsion,
                        euler: h.euler_from_betti,
                    });
                }
                None => report.errors.push("torsion factor exceeds i64".to_owned()),
            }
        }
        Err(e) => report.errors.push(format!("homology: {e}")),
    }
}

fn complex_row(complex: &ChainComplex, cap: f64) -> Result<ComplexRow, String> {
    let mut degrees = Vec::new();
    for (k, gens) in complex.generators.iter().enumerate() {
        let m = &complex.boundaries[k];
        let mut boundary = Vec::with_capacity(m.rows());
        for row in m.to_rows() {
            let narrowed: Option<Vec<i64>> =
                row.iter().map(|&v| i64::try_from(v).ok()).collect();
            boundary.push(narrowed.ok_or("boundary entry exceeds i64")?);
        }
        degrees.push(DegreeRow {
            degree: k,
            generators: gens.iter().map(|&i| complex.labels[i].clone()).collect(),
            boundary,
        });
    }
    let verdict = verify_d_squared(complex).map_err(|e| e.to_string())?;
    let failures = verdict
        .failures
        .iter()
        .map(|f| {
            Ok(DSquaredFailureRow {
                degree: f.degree,
                top: complex.labels[f.top].clone(),
                bottom: complex.labels[f.bottom].clone(),
                value: i64::try_from(f.value).map_err(|_| "product entry exceeds i64")?,
                terms: f
                    .terms
                    .iter()
                    .map(|t| {
                        Ok((
                            complex.labels[t.middle].clone(),
                            i64::try_from(t.upper).map_err(|_| "count exceeds i64")?,
                            i64::try_from(t.lower).map_err(|_| "count exceeds i64")?,
                        ))
                    })
                    .collect::<Result<_, &str>>()?,
            })
        })
        .collect::<Result<Vec<_>, &str>>()
        .map_err(str::to_owned)?;
    Ok(ComplexRow {
        cap,
        degrees,
        d_squared: DSquaredRow { ok: verdict.ok(), failures },
    })
}

fn build_checks(report: &RunReport, poset: Option<&SuccessionPoset>) -> Vec<CheckRow> {
    let mut checks = Vec::new();

    checks.push(if report.criticals.is_empty() {
        CheckRow::fail("critical-points", "no critical points were found".to_owned())
    } else {
        CheckRow::pass(
            "critical-points",
            format!("found {} nondegenerate critical points", report.criticals.len()),
        )
    });

    checks.push(if report.levels.is_empty() {
        CheckRow::skipped("levels-regular", "no regular levels were requested".to_owned())
    } else {
        // resolve_levels already enforced the clearance; an error there
        // leaves the list empty and is recorded separately.
        CheckRow::pass(
            "levels-regular",
            format!("{} levels clear every critical value by at least 1e-6", report.levels.len()),
        )
    });

    checks.push(match poset {
        Some(poset) => CheckRow::pass(
            "succession-order",
            format!("{} relations validate as a strict order", poset.relation.len()),
        ),
        None => CheckRow::skipped("succession-order", "the strata stage did not run".to_owned()),
    });

    checks.push(if report.curves.is_empty() {
        CheckRow::skipped("endpoint-identity", "no pairs with index gap two".to_owned())
    } else {
        let bad: Vec<String> = report
            .curves
            .iter()
            .flat_map(|c| {
                c.components.iter().enumerate().filter(|(_, comp)| comp.endpoint_sum != 0).map(
                    move |(i, comp)| {
                        format!("{} -> {} component {i} sums to {}", c.from, c.to, comp.endpoint_sum)
                    },
                )
            })
            .collect();
        if bad.is_empty() {
            let total: usize = report.curves.iter().map(|c| c.components.len()).sum();
            CheckRow::pass(
                "endpoint-identity",
                format!("all {total} curve components have weighted endpoint sum 0"),
            )
        } else {
            CheckRow::fail("endpoint-identity", bad.join("; "))
        }
    });

    checks.push(match &report.complex {
        None => CheckRow::skipped("d-squared", "the chain complex was not built".to_owned()),
        Some(c) if c.d_squared.ok => {
            CheckRow::pass("d-squared", "the boundary squares to zero in every degree".to_owned())
        }
        Some(c) => {
            let f = &c.d_squared.failures[0];
            CheckRow::fail(
                "d-squared",
                format!("nonzero entry {} at ({}, {})", f.value, f.top, f.bottom),
            )
        }
    });

    checks.push(match (&report.complex, &report.homology) {
        (Some(c), Some(h)) => {
            let from_generators: i64 = c
                .degrees
                .iter()
                .map(|d| {
                    let n = d.generators.len() as i64;
                    if d.degree % 2 == 0 { n } else { -n }
                })
                .sum();
            if from_generators == h.euler {
                CheckRow::pass(
                    "euler-identity",
                    format!("generator count and Betti numbers both give chi = {}", h.euler),
                )
            } else {
                CheckRow::fail(
                    "euler-identity",
                    format!("chi from generators {} != chi from Betti {}", from_generators, h.euler),
                )
            }
        }
        _ => CheckRow::skipped("euler-identity", "homology was not computed".to_owned()),
    });

    checks
}
