//! The combinatorial layer of the compactified flow-line spaces: the
//! succession order on critical points, strictly descending critical
//! sequences, stratum tables (dimension, codimension, component count,
//! face closure) for the three compactifications, evaluation of broken
//! and unbroken flow lines on regular levels, and the explicit model
//! corner charts near broken configurations.
//!
//! Everything here is exact integer combinatorics on top of the moduli
//! data; the only numerics are the evaluation maps and the corner-chart
//! parametrizations.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::min_singular_value;
use crate::manifold::Point;
use crate::moduli::{FlowLineClass, MorseSystem};

#[allow(unused_imports)]
use crate::real::FloatExt;

use core::f64::consts::TAU;

/// Values closer than this are treated as the same critical value.
const VALUE_TOL: f64 = 1e-9;

/// The strict order "some flow line descends from `a` to `b`", closed
/// under transitivity, together with the critical point data the stratum
/// formulas need.
#[derive(Debug, Clone)]
pub struct SuccessionPoset {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
    /// Morse indices.
    pub indices: Vec<usize>,
    /// Strictly ordered pairs `(a, b)` with `a` above `b`.
    pub relation: BTreeSet<(usize, usize)>,
}

impl SuccessionPoset {
    pub fn related(&self, a: usize, b: usize) -> bool {
        self.relation.contains(&(a, b))
    }

    /// Everything strictly below `a`, ordered by label.
    pub fn successors(&self, a: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .relation
            .range((a, 0)..=(a, usize::MAX))
            .map(|&(_, b)| b)
            .collect();
        out.sort_by(|&x, &y| self.labels[x].cmp(&self.labels[y]));
        out
    }

    /// Checks irreflexivity, antisymmetry, and strict descent of the
    /// critical value along the order. A violation means some orbit was
    /// classified onto the wrong critical point.
    pub fn validate(&self) -> Result<()> {
        for &(a, b) in &self.relation {
            if a == b {
                return Err(Error::PosetCycle(format!(
                    "{} precedes itself",
                    self.labels[a]
                )));
            }
            if self.relation.contains(&(b, a)) {
                return Err(Error::PosetCycle(format!(
                    "{} and {} precede each other",
                    self.labels[a], self.labels[b]
                )));
            }
            if self.values[a] <= self.values[b] + VALUE_TOL {
                return Err(Error::PosetCycle(format!(
                    "f does not decrease from {} to {}",
                    self.labels[a], self.labels[b]
                )));
            }
        }
        Ok(())
    }
}

fn transitive_close(rel: &mut BTreeSet<(usize, usize)>) {
    loop {
        let mut added = Vec::new();
        for &(a, b) in rel.iter() {
            for &(_, d) in rel.range((b, 0)..=(b, usize::MAX)) {
                if !rel.contains(&(a, d)) {
                    added.push((a, d));
                }
            }
        }
        if added.is_empty() {
            return;
        }
        rel.extend(added);
    }
}

/// Every critical point some sampled descending trajectory of `p` ends at.
/// Best effort: trajectories that fail to converge are skipped, and any
/// misclassification this could cause is caught by `validate`.
fn sampled_limits(sys: &MorseSystem, p: usize) -> BTreeSet<usize> {
    let integ = sys.integrator();
    let cp = &sys.criticals[p];
    let dirs: Vec<DVector<f64>> = match cp.index {
        1 => {
            let vm = cp.v_minus();
            let u = vm.column(0).clone_owned();
            let u = &u / u.norm();
            vec![u.clone(), -u]
        }
        2 => (0..sys.moduli.mesh)
            .map(|i| sys.direction(p, (i as f64 + 0.5) / sys.moduli.mesh as f64 * TAU))
            .collect(),
        _ => Vec::new(),
    };
    let mut out = BTreeSet::new();
    for u in &dirs {
        if let Ok(c) = integ.omega_limit(&sys.launch(p, u)) {
            out.insert(c);
        }
    }
    out
}

/// Builds the succession order: adjacent-index pairs by direct orbit
/// classification, larger index gaps by basin sampling on the descending
/// sphere, and the rest by transitive closure.
pub fn succession_poset(sys: &MorseSystem) -> Result<SuccessionPoset> {
    let n = sys.criticals.len();
    let mut relation = BTreeSet::new();
    for p in 0..n {
        for q in 0..n {
            if p == q {
                continue;
            }
            let (cp, cq) = (&sys.criticals[p], &sys.criticals[q]);
            if cp.index == cq.index + 1
                && cp.value > cq.value + VALUE_TOL
                && !sys.classes_unsigned(p, q)?.is_empty()
            {
                relation.insert((p, q));
            }
        }
    }
    transitive_close(&mut relation);
    for p in 0..n {
        if sys.criticals[p].index < 2 {
            continue;
        }
        for q in sampled_limits(sys, p) {
            let (cp, cq) = (&sys.criticals[p], &sys.criticals[q]);
            if q != p && cp.index > cq.index + 1 && cp.value > cq.value + VALUE_TOL {
                relation.insert((p, q));
            }
        }
    }
    transitive_close(&mut relation);
    let poset = SuccessionPoset {
        labels: sys.criticals.iter().map(|c| c.label.clone()).collect(),
        values: sys.criticals.iter().map(|c| c.value).collect(),
        indices: sys.criticals.iter().map(|c| c.index).collect(),
        relation,
    };
    poset.validate()?;
    Ok(poset)
}

/// Component count of the moduli between each related pair: the number of
/// orbit classes for index gap one, the number of moduli curve components
/// for gap two. A related pair that yields no components at all means the
/// sampling and the classification disagree.
pub fn component_counts(
    sys: &MorseSystem,
    poset: &SuccessionPoset,
) -> Result<BTreeMap<(usize, usize), u64>> {
    let mut counts = BTreeMap::new();
    for &(a, b) in &poset.relation {
        let c = match poset.indices[a] - poset.indices[b] {
            1 => sys.classes_unsigned(a, b)?.len() as u64,
            2 => sys.moduli_curve(a, b)?.components.len() as u64,
            // No moduli machinery for wider gaps; the stratum builder
            // reports the missing pair if it ever needs the count.
            _ => continue,
        };
        if c == 0 {
            return Err(Error::PosetCycle(format!(
                "{} precedes {} but no orbit component was found",
                poset.labels[a], poset.labels[b]
            )));
        }
        counts.insert((a, b), c);
    }
    Ok(counts)
}

/// A strictly descending chain of critical points. A singleton `(p)` has
/// length index -1 and names the open stratum of the compactified
/// descending manifold of `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CriticalSequence {
    pub elements: Vec<usize>,
}

impl CriticalSequence {
    pub fn head(&self) -> usize {
        self.elements[0]
    }

    pub fn tail(&self) -> usize {
        *self.elements.last().unwrap()
    }

    /// Two fewer than the element count: the codimension the chain
    /// contributes, -1 for a singleton.
    pub fn length_index(&self) -> i64 {
        self.elements.len() as i64 - 2
    }
}

/// All strictly descending chains with the given head (and tail, when one
/// is supplied), shortest first and in label order within a length. With
/// no tail the singleton chain is included.
pub fn critical_sequences(
    poset: &SuccessionPoset,
    head: usize,
    tail: Option<usize>,
) -> Vec<CriticalSequence> {
    let mut chains: Vec<Vec<usize>> = Vec::new();
    let mut stack = vec![vec![head]];
    while let Some(chain) = stack.pop() {
        for next in poset.successors(*chain.last().unwrap()) {
            let mut longer = chain.clone();
            longer.push(next);
            stack.push(longer);
        }
        chains.push(chain);
    }
    chains.retain(|c| match tail {
        Some(q) => c.len() >= 2 && *c.last().unwrap() == q,
        None => true,
    });
    chains.sort_by_key(|c| {
        (
            c.len(),
            c.iter().map(|&i| poset.labels[i].clone()).collect::<Vec<_>>(),
        )
    });
    chains
        .into_iter()
        .map(|elements| CriticalSequence { elements })
        .collect()
}

/// Which compactified space a stratum table describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaceTag {
    /// Compactified moduli of flow lines from `p` to `q`.
    Mbar { p: usize, q: usize },
    /// Compactified descending manifold of `p`.
    Dbar { p: usize },
    /// Compactified space of points on flow lines from `p` to `q`.
    Wbar { p: usize, q: usize },
}

/// One stratum: its index datum, codimension, dimension, component count,
/// and the codimension-one strata whose closures contain it.
#[derive(Debug, Clone)]
pub struct Stratum {
    /// The critical sequence; for a line-space stratum whose distinguished
    /// factor sits at a repeated point, the repeat is present.
    pub sequence: Vec<usize>,
    /// Position of the distinguished non-compact factor (line spaces only).
    pub slot: Option<usize>,
    /// Codimension in the compactified space.
    pub k: usize,
    pub dim: usize,
    pub components: u64,
    /// Positions in the stratum list of the codimension-one strata whose
    /// closures contain this stratum; there are exactly `k` of them.
    pub ancestors: Vec<usize>,
}

/// The full stratum table of one compactified space.
#[derive(Debug, Clone)]
pub struct Stratification {
    pub tag: SpaceTag,
    pub strata: Vec<Stratum>,
}

impl Stratification {
    pub fn by_codim(&self, k: usize) -> Vec<&Stratum> {
        self.strata.iter().filter(|s| s.k == k).collect()
    }

    /// Total component count of the codimension-`k` stratum.
    pub fn components_at(&self, k: usize) -> u64 {
        self.by_codim(k).iter().map(|s| s.components).sum()
    }

    /// Euler characteristic from the open strata: each component of a
    /// `d`-dimensional stratum is an open cell up to sign.
    pub fn euler(&self) -> i64 {
        self.strata
            .iter()
            .map(|s| {
                let sign = if s.dim % 2 == 0 { 1 } else { -1 };
                sign * s.components as i64
            })
            .sum()
    }

    /// Same sum restricted to the boundary strata (codimension >= 1).
    pub fn boundary_euler(&self) -> i64 {
        self.strata
            .iter()
            .filter(|s| s.k >= 1)
            .map(|s| {
                let sign = if s.dim % 2 == 0 { 1 } else { -1 };
                sign * s.components as i64
            })
            .sum()
    }
}

/// Dimension of the moduli factor between an adjacent pair of a chain.
fn pair_dim(poset: &SuccessionPoset, a: usize, b: usize) -> Result<i64> {
    let d = poset.indices[a] as i64 - poset.indices[b] as i64 - 1;
    if d < 0 {
        return Err(Error::NegativeDimension {
            detail: format!(
                "moduli between {} (index {}) and {} (index {}) would have dimension {}",
                poset.labels[a], poset.indices[a], poset.labels[b], poset.indices[b], d
            ),
        });
    }
    Ok(d)
}

/// Dimension of the product of moduli along a chain: the sum of the index
/// drops minus one per step. Additive under concatenation through a
/// shared critical point.
pub fn chain_dimension(poset: &SuccessionPoset, sequence: &[usize]) -> Result<i64> {
    let mut dim = 0;
    for w in sequence.windows(2) {
        dim += pair_dim(poset, w[0], w[1])?;
    }
    Ok(dim)
}

fn pair_count(
    counts: &BTreeMap<(usize, usize), u64>,
    poset: &SuccessionPoset,
    a: usize,
    b: usize,
) -> Result<u64> {
    counts.get(&(a, b)).copied().ok_or(Error::MissingCount {
        p: poset.labels[a].clone(),
        q: poset.labels[b].clone(),
    })
}

fn chain_count(
    counts: &BTreeMap<(usize, usize), u64>,
    poset: &SuccessionPoset,
    sequence: &[usize],
) -> Result<u64> {
    let mut n = 1u64;
    for w in sequence.windows(2) {
        n = n
            .checked_mul(pair_count(counts, poset, w[0], w[1])?)
            .ok_or(Error::Overflow("stratum component count"))?;
    }
    Ok(n)
}

/// Candidate stratum before ancestors are resolved.
struct RawStratum {
    sequence: Vec<usize>,
    slot: Option<usize>,
    k: usize,
    dim: i64,
    components: u64,
}

fn line_space_stratum(
    poset: &SuccessionPoset,
    counts: &BTreeMap<(usize, usize), u64>,
    sequence: Vec<usize>,
    slot: usize,
    k: usize,
) -> Result<RawStratum> {
    let (a, b) = (sequence[slot], sequence[slot + 1]);
    let left = &sequence[..=slot];
    let right = &sequence[slot + 1..];
    let slot_dim = if a == b {
        0
    } else {
        let d = poset.indices[a] as i64 - poset.indices[b] as i64;
        if d <= 0 {
            return Err(Error::NegativeDimension {
                detail: format!(
                    "line space between {} and {} of equal index",
                    poset.labels[a], poset.labels[b]
                ),
            });
        }
        d
    };
    // A repeated point carries the constant line: one component, dim 0.
    let slot_comp = if a == b { 1 } else { pair_count(counts, poset, a, b)? };
    let dim = chain_dimension(poset, left)? + slot_dim + chain_dimension(poset, right)?;
    let components = chain_count(counts, poset, left)?
        .checked_mul(slot_comp)
        .and_then(|n| chain_count(counts, poset, right).ok().map(|m| n * m))
        .ok_or(Error::Overflow("stratum component count"))?;
    Ok(RawStratum {
        sequence,
        slot: Some(slot),
        k,
        dim,
        components,
    })
}

/// The codimension-one strata whose closures contain the given stratum:
/// one per deletable element of the index datum.
fn parent_data(
    tag: SpaceTag,
    sequence: &[usize],
    slot: Option<usize>,
) -> Vec<(Vec<usize>, Option<usize>)> {
    let m = sequence.len();
    let delete = |t: usize| {
        let mut e = sequence.to_vec();
        e.remove(t);
        e
    };
    match tag {
        SpaceTag::Mbar { .. } => (1..m.saturating_sub(1)).map(|t| (delete(t), None)).collect(),
        SpaceTag::Dbar { .. } => (1..m).map(|t| (delete(t), None)).collect(),
        SpaceTag::Wbar { .. } => {
            let s = slot.expect("line-space stratum carries a slot");
            (1..m.saturating_sub(1))
                .map(|t| {
                    let s2 = if t <= s { s - 1 } else { s };
                    (delete(t), Some(s2))
                })
                .collect()
        }
    }
}

/// Builds the stratum table of a compactified space from the succession
/// order, the Morse indices, and the moduli component counts.
///
/// Dimensions come from the index-drop formulas, component counts are
/// products over the factors, and the face-closure relation is resolved
/// by deleting one deletable element of the index datum at a time. Every
/// codimension-`k` stratum must land in exactly `k` distinct
/// codimension-one strata, and every dimension must be non-negative;
/// violations surface as errors.
pub fn stratification(
    tag: SpaceTag,
    poset: &SuccessionPoset,
    counts: &BTreeMap<(usize, usize), u64>,
) -> Result<Stratification> {
    let mut raw: Vec<RawStratum> = Vec::new();
    match tag {
        SpaceTag::Mbar { p, q } => {
            for seq in critical_sequences(poset, p, Some(q)) {
                let e = seq.elements;
                raw.push(RawStratum {
                    k: e.len() - 2,
                    dim: chain_dimension(poset, &e)?,
                    components: chain_count(counts, poset, &e)?,
                    sequence: e,
                    slot: None,
                });
            }
        }
        SpaceTag::Dbar { p } => {
            for seq in critical_sequences(poset, p, None) {
                let e = seq.elements;
                let tail = *e.last().unwrap();
                // The descending-disk factor of the tail: one component,
                // dimension equal to the tail's index.
                raw.push(RawStratum {
                    k: e.len() - 1,
                    dim: chain_dimension(poset, &e)? + poset.indices[tail] as i64,
                    components: chain_count(counts, poset, &e)?,
                    sequence: e,
                    slot: None,
                });
            }
        }
        SpaceTag::Wbar { p, q } => {
            for seq in critical_sequences(poset, p, Some(q)) {
                let e = seq.elements;
                let m = e.len();
                for s in 0..m - 1 {
                    raw.push(line_space_stratum(poset, counts, e.clone(), s, m - 2)?);
                }
                // The distinguished factor may sit at a repeated point;
                // duplicating one element raises the codimension by one.
                for t in 0..m {
                    let mut e2 = e.clone();
                    e2.insert(t, e[t]);
                    raw.push(line_space_stratum(poset, counts, e2, t, m - 1)?);
                }
            }
        }
    }
    for r in &raw {
        if r.dim < 0 {
            return Err(Error::NegativeDimension {
                detail: format!("stratum dimension {}", r.dim),
            });
        }
    }
    raw.sort_by_key(|r| {
        (
            r.k,
            r.sequence
                .iter()
                .map(|&i| poset.labels[i].clone())
                .collect::<Vec<_>>(),
            r.slot,
        )
    });
    let mut position: BTreeMap<(Vec<usize>, Option<usize>), usize> = BTreeMap::new();
    for (i, r) in raw.iter().enumerate() {
        position.insert((r.sequence.clone(), r.slot), i);
    }
    let mut strata = Vec::with_capacity(raw.len());
    for r in &raw {
        let mut ancestors = BTreeSet::new();
        for key in parent_data(tag, &r.sequence, r.slot) {
            let &i = position.get(&key).ok_or_else(|| {
                Error::Msg(format!(
                    "face closure inconsistency: no stratum for a face of {:?}",
                    r.sequence
                ))
            })?;
            ancestors.insert(i);
        }
        if ancestors.len() != r.k {
            return Err(Error::Msg(format!(
                "codimension {} stratum with {} faces",
                r.k,
                ancestors.len()
            )));
        }
        strata.push(Stratum {
            sequence: r.sequence.clone(),
            slot: r.slot,
            k: r.k,
            dim: r.dim as usize,
            components: r.components,
            ancestors: ancestors.into_iter().collect(),
        });
    }
    Ok(Stratification { tag, strata })
}

/// A generalized flow line: either an honest trajectory through a seed
/// point, or a broken line assembled from orbit classes whose endpoints
/// chain together.
#[derive(Debug, Clone)]
pub enum GeneralizedLine {
    Unbroken { seed: Point },
    Broken { segments: Vec<FlowLineClass> },
}

/// Evaluates a generalized flow line on a list of regular levels: one
/// intersection point per level, in canonical coordinates. Distinct
/// generalized flow lines give distinct tuples, which is what makes the
/// stratum index data faithful.
pub fn evaluate_on_levels(
    sys: &MorseSystem,
    line: &GeneralizedLine,
    levels: &[f64],
) -> Result<Vec<Point>> {
    for &a in levels {
        if !sys.is_regular_value(a) {
            return Err(Error::NotRegularValue { level: a });
        }
    }
    match line {
        GeneralizedLine::Unbroken { seed } => {
            levels.iter().map(|&a| cross_level(sys, seed, a)).collect()
        }
        GeneralizedLine::Broken { segments } => {
            if segments.is_empty() {
                return Err(Error::BrokenLine("no segments".into()));
            }
            for w in segments.windows(2) {
                if w[0].to != w[1].from {
                    return Err(Error::BrokenLine(format!(
                        "segments do not chain: {} -> {} then {} -> {}",
                        sys.criticals[w[0].from].label,
                        sys.criticals[w[0].to].label,
                        sys.criticals[w[1].from].label,
                        sys.criticals[w[1].to].label,
                    )));
                }
            }
            levels
                .iter()
                .map(|&a| {
                    let seg = segments
                        .iter()
                        .find(|c| {
                            sys.criticals[c.from].value > a && a > sys.criticals[c.to].value
                        })
                        .ok_or_else(|| {
                            Error::BrokenLine(format!("no segment crosses level {a}"))
                        })?;
                    cross_level(sys, &seg.representative, a)
                })
                .collect()
        }
    }
}

/// Flows a point of a flow line (in either direction) to the given level.
fn cross_level(sys: &MorseSystem, start: &Point, a: f64) -> Result<Point> {
    let fv = sys.f.value(&sys.atlas, start);
    if (fv - a).abs() <= VALUE_TOL {
        return Ok(sys.atlas.canonicalize(start));
    }
    let integ = if fv > a {
        sys.integrator()
    } else {
        sys.integrator().backward()
    };
    integ.flow_map(start, a).map(|p| sys.atlas.canonicalize(&p))
}

/// Which model corner parametrization to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CornerVariant {
    /// Corner model: both factors break.
    P,
    /// Half-corner model, breaking on the ascending side.
    QPlus,
    /// Half-corner model, breaking on the descending side.
    QMinus,
    /// Boundary collar of a one-sided breaking.
    Collar,
}

/// An explicit corner chart: a forward parametrization `phi` of a corner
/// neighborhood into two pairs of blocks, its exact inverse `alpha`, and
/// the derivative at the corner.
///
/// Arguments are a block vector `v2` (dimension `d2`), a block vector
/// `v1` (dimension `d1`), and a breaking parameter `s` in `[0, 1)`.
/// Depending on the variant, `v1` and `v2` are constrained to the sphere
/// of radius `sqrt(epsilon)` or range over the ball.
#[derive(Debug, Clone)]
pub struct CornerChart {
    pub variant: CornerVariant,
    pub epsilon: f64,
    pub d1: usize,
    pub d2: usize,
}

/// Builds a corner chart with two-dimensional blocks.
pub fn corner_chart(variant: CornerVariant, epsilon: f64) -> Result<CornerChart> {
    CornerChart::with_dims(variant, epsilon, 2, 2)
}

impl CornerChart {
    pub fn with_dims(
        variant: CornerVariant,
        epsilon: f64,
        d1: usize,
        d2: usize,
    ) -> Result<CornerChart> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(Error::BadParameter(format!(
                "corner chart scale must be positive, got {epsilon}"
            )));
        }
        if d1 == 0 || d2 == 0 {
            return Err(Error::BadParameter("corner chart blocks must be nonempty".into()));
        }
        Ok(CornerChart {
            variant,
            epsilon,
            d1,
            d2,
        })
    }

    pub fn sphere_radius(&self) -> f64 {
        self.epsilon.sqrt()
    }

    /// Dimension of the parametrized image's ambient space (four blocks).
    pub fn ambient_dim(&self) -> usize {
        2 * (self.d1 + self.d2)
    }

    /// Number of chart parameters: `s` plus the two block vectors.
    pub fn domain_dim(&self) -> usize {
        1 + self.d1 + self.d2
    }

    /// Is each argument confined to the sphere (`true`) or the ball?
    fn sphere_constrained(&self) -> (bool, bool) {
        // (v1, v2)
        match self.variant {
            CornerVariant::P | CornerVariant::Collar => (true, true),
            CornerVariant::QPlus => (false, true),
            CornerVariant::QMinus => (true, false),
        }
    }

    fn check_args(&self, v2: &DVector<f64>, v1: &DVector<f64>, s: f64) -> Result<()> {
        if v1.len() != self.d1 {
            return Err(Error::DimensionMismatch {
                expected: self.d1,
                got: v1.len(),
            });
        }
        if v2.len() != self.d2 {
            return Err(Error::DimensionMismatch {
                expected: self.d2,
                got: v2.len(),
            });
        }
        if !(0.0..1.0).contains(&s) {
            return Err(Error::BadParameter(format!(
                "breaking parameter {s} outside [0, 1)"
            )));
        }
        let r = self.sphere_radius();
        let (s1, s2) = self.sphere_constrained();
        for (sphere, v, name) in [(s1, v1, "v1"), (s2, v2, "v2")] {
            if sphere {
                if (v.norm() - r).abs() > 1e-3 * r {
                    return Err(Error::BadParameter(format!(
                        "{name} must lie on the sphere of radius {r}"
                    )));
                }
            } else if v.norm() > r * (1.0 + 1e-6) {
                return Err(Error::BadParameter(format!(
                    "{name} must lie in the ball of radius {r}"
                )));
            }
        }
        Ok(())
    }

    /// Forward parametrization. Returns the four blocks `z1..z4` with
    /// dimensions `(d1, d2, d1, d2)`.
    pub fn phi(&self, v2: &DVector<f64>, v1: &DVector<f64>, s: f64) -> Result<[DVector<f64>; 4]> {
        self.check_args(v2, v1, s)?;
        Ok(self.phi_raw(v2, v1, s))
    }

    fn phi_raw(&self, v2: &DVector<f64>, v1: &DVector<f64>, s: f64) -> [DVector<f64>; 4] {
        let eps = self.epsilon;
        match self.variant {
            CornerVariant::P => {
                let t = (1.0 + s * s).sqrt();
                [v1 * s, v2 * t, v1 * t, v2 * s]
            }
            CornerVariant::QPlus => {
                let c = ((s * s * v1.norm_squared() + eps) / eps).sqrt();
                [v1 * s, v2 * c, v1.clone(), v2 * (s * c)]
            }
            CornerVariant::QMinus => {
                let c = ((s * s * v2.norm_squared() + eps) / eps).sqrt();
                [v1 * c, v2 * s, v1 * (s * c), v2.clone()]
            }
            CornerVariant::Collar => {
                let u2 = s * s * v1.norm_squared();
                let theta = v2 * ((eps + u2) / eps).sqrt();
                let tn = theta.norm();
                [
                    v1 * s,
                    theta.clone(),
                    v1 * (tn / eps.sqrt()),
                    theta * (s * eps.sqrt() / tn),
                ]
            }
        }
    }

    /// Exact inverse of `phi` on its image: recovers `(v2, v1, s)`.
    pub fn alpha(&self, z: &[DVector<f64>; 4]) -> Result<(DVector<f64>, DVector<f64>, f64)> {
        for (zi, d) in z.iter().zip([self.d1, self.d2, self.d1, self.d2]) {
            if zi.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: zi.len(),
                });
            }
        }
        let r = self.sphere_radius();
        let unit = |zi: &DVector<f64>, name: &str| -> Result<DVector<f64>> {
            let n = zi.norm();
            if n <= 0.0 {
                return Err(Error::BadParameter(format!(
                    "block {name} vanishes; the point is outside the chart image"
                )));
            }
            Ok(zi * (r / n))
        };
        match self.variant {
            CornerVariant::P => {
                let v2 = unit(&z[1], "z2")?;
                let v1 = unit(&z[2], "z3")?;
                Ok((v2, v1, z[0].norm() / r))
            }
            CornerVariant::QPlus => {
                let v2 = unit(&z[1], "z2")?;
                Ok((v2, z[2].clone(), z[3].norm() / z[1].norm()))
            }
            CornerVariant::QMinus => {
                let v1 = unit(&z[0], "z1")?;
                Ok((z[3].clone(), v1, z[2].norm() / z[0].norm()))
            }
            CornerVariant::Collar => {
                let v1 = unit(&z[2], "z3")?;
                let v2 = unit(&z[1], "z2")?;
                Ok((v2, v1, z[3].norm() / r))
            }
        }
    }

    /// Derivative of `phi` at `s = 0`, analytically. Columns are ordered
    /// `s`, then the `d1` directions of `v1`, then the `d2` directions of
    /// `v2`; rows stack the four blocks.
    pub fn dphi_zero(&self, v2: &DVector<f64>, v1: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_args(v2, v1, 0.0)?;
        let (d1, d2) = (self.d1, self.d2);
        let rows = self.ambient_dim();
        let mut m = DMatrix::zeros(rows, self.domain_dim());
        let block = |i: usize| match i {
            0 => 0,
            1 => d1,
            2 => d1 + d2,
            _ => 2 * d1 + d2,
        };
        let set = |mat: &mut DMatrix<f64>, blk: usize, col: usize, v: &DVector<f64>| {
            for (i, &x) in v.iter().enumerate() {
                mat[(block(blk) + i, col)] = x;
            }
        };
        let r = self.sphere_radius();
        match self.variant {
            CornerVariant::P | CornerVariant::QPlus => {
                set(&mut m, 0, 0, v1);
                set(&mut m, 3, 0, v2);
                for j in 0..d1 {
                    m[(block(2) + j, 1 + j)] = 1.0;
                }
                for j in 0..d2 {
                    m[(block(1) + j, 1 + d1 + j)] = 1.0;
                }
            }
            CornerVariant::QMinus => {
                set(&mut m, 1, 0, v2);
                set(&mut m, 2, 0, v1);
                for j in 0..d1 {
                    m[(block(0) + j, 1 + j)] = 1.0;
                }
                for j in 0..d2 {
                    m[(block(3) + j, 1 + d1 + j)] = 1.0;
                }
            }
            CornerVariant::Collar => {
                let n2 = v2.norm();
                set(&mut m, 0, 0, v1);
                let z4s = v2 * (r / n2);
                set(&mut m, 3, 0, &z4s);
                for j in 0..d1 {
                    m[(block(2) + j, 1 + j)] = n2 / r;
                }
                for j in 0..d2 {
                    m[(block(1) + j, 1 + d1 + j)] = 1.0;
                    // The third block's norm factor varies with v2.
                    let coeff = v2[j] / (n2 * r);
                    for (i, &x) in v1.iter().enumerate() {
                        m[(block(2) + i, 1 + d1 + j)] += coeff * x;
                    }
                }
            }
        }
        Ok(m)
    }

    /// Central finite-difference derivative of `phi` with the same column
    /// order as `dphi_zero`.
    pub fn dphi_fd(&self, v2: &DVector<f64>, v1: &DVector<f64>, s: f64) -> Result<DMatrix<f64>> {
        self.check_args(v2, v1, s)?;
        let h = 1e-6;
        let rows = self.ambient_dim();
        let mut m = DMatrix::zeros(rows, self.domain_dim());
        let flat = |z: [DVector<f64>; 4]| -> DVector<f64> {
            let mut out = DVector::zeros(rows);
            let mut at = 0;
            for zi in z.iter() {
                for &x in zi.iter() {
                    out[at] = x;
                    at += 1;
                }
            }
            out
        };
        let col = (flat(self.phi_raw(v2, v1, s + h)) - flat(self.phi_raw(v2, v1, s - h))) / (2.0 * h);
        m.set_column(0, &col);
        for j in 0..self.d1 {
            let mut hi = v1.clone();
            let mut lo = v1.clone();
            hi[j] += h;
            lo[j] -= h;
            let col = (flat(self.phi_raw(v2, &hi, s)) - flat(self.phi_raw(v2, &lo, s))) / (2.0 * h);
            m.set_column(1 + j, &col);
        }
        for j in 0..self.d2 {
            let mut hi = v2.clone();
            let mut lo = v2.clone();
            hi[j] += h;
            lo[j] -= h;
            let col = (flat(self.phi_raw(&hi, v1, s)) - flat(self.phi_raw(&lo, v1, s))) / (2.0 * h);
            m.set_column(1 + self.d1 + j, &col);
        }
        Ok(m)
    }

    /// Smallest singular value of the corner derivative: a positive lower
    /// bound certifies that the parametrization is an immersion there.
    pub fn min_singular_at_zero(&self, v2: &DVector<f64>, v1: &DVector<f64>) -> Result<f64> {
        Ok(min_singular_value(&self.dphi_zero(v2, v1)?))
    }

    /// Largest deviation of `alpha(phi(v2, v1, s))` from the arguments
    /// over pseudo-random samples of the chart domain.
    pub fn roundtrip_error(&self, samples: usize, seed: u64) -> Result<f64> {
        let mut state = seed ^ 0x5851_f42d_4c95_7f2d;
        let r = self.sphere_radius();
        let (s1, s2) = self.sphere_constrained();
        let mut worst = 0.0f64;
        for _ in 0..samples {
            let v1 = random_block(&mut state, self.d1, r, s1);
            let v2 = random_block(&mut state, self.d2, r, s2);
            let s = 0.97 * unit_f64(&mut state);
            let z = self.phi(&v2, &v1, s)?;
            let (w2, w1, t) = self.alpha(&z)?;
            worst = worst
                .max((&w2 - &v2).amax())
                .max((&w1 - &v1).amax())
                .max((t - s).abs());
        }
        Ok(worst)
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn unit_f64(state: &mut u64) -> f64 {
    (splitmix64(state) >> 11) as f64 / (1u64 << 53) as f64
}

/// A pseudo-random block vector: on the radius-`r` sphere, or in the ball
/// at a radius bounded away from the rim.
fn random_block(state: &mut u64, dim: usize, r: f64, sphere: bool) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| 2.0 * unit_f64(state) - 1.0);
        let n = v.norm();
        if n < 1e-3 {
            continue;
        }
        let scale = if sphere {
            r / n
        } else {
            r * (0.05 + 0.9 * unit_f64(state)) / n
        };
        return v * scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowParams;
    use crate::manifold::Atlas;
    use crate::moduli::ModuliParams;
    use crate::morse::MorseFunction;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    fn system(name: &str) -> MorseSystem {
        let atlas = Atlas::builtin(name, &BTreeMap::new()).unwrap();
        let f = MorseFunction::for_atlas(&atlas, &BTreeMap::new()).unwrap();
        MorseSystem::build(atlas, f, FlowParams::default(), ModuliParams::default()).unwrap()
    }

    fn labels<'a>(poset: &'a SuccessionPoset, seq: &[usize]) -> Vec<&'a str> {
        seq.iter().map(|&i| poset.labels[i].as_str()).collect()
    }

    #[test]
    fn torus_succession_poset_has_five_relations() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let expect: BTreeSet<(usize, usize)> =
            [(0, 1), (0, 2), (0, 3), (1, 3), (2, 3)].into_iter().collect();
        assert_eq!(poset.relation, expect);
    }

    #[test]
    fn sphere_succession_poset_is_the_full_double_ladder() {
        let sys = system("ellipsoid-sphere");
        let poset = succession_poset(&sys).unwrap();
        // Maxima 0, 1; saddles 2, 3; minima 4, 5. Every downward pair is
        // related, which closes to twelve pairs.
        let mut expect = BTreeSet::new();
        for m in [0, 1] {
            for s in [2, 3] {
                expect.insert((m, s));
            }
            for b in [4, 5] {
                expect.insert((m, b));
            }
        }
        for s in [2, 3] {
            for b in [4, 5] {
                expect.insert((s, b));
            }
        }
        assert_eq!(poset.relation, expect);
    }

    #[test]
    fn local_model_poset_is_empty() {
        let sys = system("morse-local-model");
        let poset = succession_poset(&sys).unwrap();
        assert!(poset.relation.is_empty());
        let seqs = critical_sequences(&poset, 0, None);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].elements, vec![0]);
        assert_eq!(seqs[0].length_index(), -1);
    }

    #[test]
    fn validate_rejects_cycles_and_value_increase() {
        let poset = SuccessionPoset {
            labels: vec!["a".into(), "b".into()],
            values: vec![1.0, 0.0],
            indices: vec![1, 0],
            relation: [(0, 1), (1, 0)].into_iter().collect(),
        };
        assert!(matches!(poset.validate(), Err(Error::PosetCycle(_))));
        let poset = SuccessionPoset {
            labels: vec!["a".into(), "b".into()],
            values: vec![0.0, 1.0],
            indices: vec![1, 0],
            relation: [(0, 1)].into_iter().collect(),
        };
        assert!(matches!(poset.validate(), Err(Error::PosetCycle(_))));
    }

    #[test]
    fn torus_sequences_follow_the_length_then_label_order() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let from_p: Vec<Vec<&str>> = critical_sequences(&poset, 0, None)
            .iter()
            .map(|s| labels(&poset, &s.elements))
            .collect();
        assert_eq!(
            from_p,
            vec![
                vec!["c0"],
                vec!["c0", "c1"],
                vec!["c0", "c2"],
                vec!["c0", "c3"],
                vec!["c0", "c1", "c3"],
                vec!["c0", "c2", "c3"],
            ]
        );
        let p_to_q: Vec<Vec<&str>> = critical_sequences(&poset, 0, Some(3))
            .iter()
            .map(|s| labels(&poset, &s.elements))
            .collect();
        assert_eq!(
            p_to_q,
            vec![
                vec!["c0", "c3"],
                vec!["c0", "c1", "c3"],
                vec!["c0", "c2", "c3"],
            ]
        );
        // A minimum admits no descent at all.
        assert_eq!(critical_sequences(&poset, 3, None).len(), 1);
    }

    #[test]
    fn torus_descending_disk_is_an_octagon() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let counts = component_counts(&sys, &poset).unwrap();
        let st = stratification(SpaceTag::Dbar { p: 0 }, &poset, &counts).unwrap();
        assert_eq!(st.by_codim(0).len(), 1);
        assert_eq!(st.components_at(0), 1);
        assert_eq!(st.by_codim(0)[0].dim, 2);
        assert_eq!(st.by_codim(1).len(), 3);
        assert_eq!(st.components_at(1), 8);
        assert!(st.by_codim(1).iter().all(|s| s.dim == 1));
        assert_eq!(st.by_codim(2).len(), 2);
        assert_eq!(st.components_at(2), 8);
        assert!(st.by_codim(2).iter().all(|s| s.dim == 0));
        assert_eq!(st.euler(), 1);
        assert_eq!(st.boundary_euler(), 0);
        // Each vertex family sits in the closures of exactly two edge
        // families: the broken edge through its saddle and the arc edge.
        for v in st.by_codim(2) {
            assert_eq!(v.ancestors.len(), 2);
            for &a in &v.ancestors {
                assert_eq!(st.strata[a].k, 1);
            }
        }
    }

    #[test]
    fn torus_moduli_compactification_is_four_intervals() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let counts = component_counts(&sys, &poset).unwrap();
        let st = stratification(SpaceTag::Mbar { p: 0, q: 3 }, &poset, &counts).unwrap();
        assert_eq!(st.by_codim(0).len(), 1);
        assert_eq!(st.by_codim(0)[0].dim, 1);
        assert_eq!(st.components_at(0), 4);
        assert_eq!(st.by_codim(1).len(), 2);
        assert!(st.by_codim(1).iter().all(|s| s.dim == 0 && s.components == 4));
        assert_eq!(st.components_at(1), 8);
        // Four closed intervals: Euler characteristic 4.
        assert_eq!(st.euler(), 4);
    }

    #[test]
    fn sphere_moduli_compactification_counts() {
        let sys = system("ellipsoid-sphere");
        let poset = succession_poset(&sys).unwrap();
        let counts = component_counts(&sys, &poset).unwrap();
        let st = stratification(SpaceTag::Mbar { p: 0, q: 4 }, &poset, &counts).unwrap();
        assert_eq!(st.by_codim(0).len(), 1);
        assert_eq!(st.by_codim(0)[0].dim, 1);
        assert_eq!(st.components_at(0), 1);
        assert_eq!(st.components_at(1), 2);
        assert_eq!(st.euler(), 1);
    }

    #[test]
    fn sphere_descending_disk_is_a_square() {
        let sys = system("ellipsoid-sphere");
        let poset = succession_poset(&sys).unwrap();
        let counts = component_counts(&sys, &poset).unwrap();
        let st = stratification(SpaceTag::Dbar { p: 0 }, &poset, &counts).unwrap();
        assert_eq!(st.components_at(0), 1);
        assert_eq!(st.components_at(1), 4);
        assert_eq!(st.components_at(2), 4);
        assert_eq!(st.euler(), 1);
        assert_eq!(st.boundary_euler(), 0);
    }

    #[test]
    fn torus_line_space_stratum_table() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let counts = component_counts(&sys, &poset).unwrap();
        let st = stratification(SpaceTag::Wbar { p: 0, q: 3 }, &poset, &counts).unwrap();
        assert_eq!(st.by_codim(0).len(), 1);
        assert_eq!(st.by_codim(0)[0].dim, 2);
        assert_eq!(st.by_codim(0)[0].components, 4);
        assert_eq!(st.by_codim(1).len(), 6);
        assert!(st.by_codim(1).iter().all(|s| s.dim == 1 && s.components == 4));
        assert_eq!(st.by_codim(2).len(), 6);
        assert!(st.by_codim(2).iter().all(|s| s.dim == 0 && s.components == 4));
        assert_eq!(st.strata.len(), 13);
        for s in &st.strata {
            assert_eq!(s.ancestors.len(), s.k);
            for &a in &s.ancestors {
                assert_eq!(st.strata[a].k, s.k - 1);
            }
        }
        // The corner with the line factor pinned at the saddle sits in
        // the two edges whose line factor is the half that still flows.
        let corner = st
            .strata
            .iter()
            .find(|s| s.sequence == vec![0, 1, 1, 3] && s.slot == Some(1))
            .unwrap();
        let parents: BTreeSet<(Vec<usize>, Option<usize>)> = corner
            .ancestors
            .iter()
            .map(|&a| (st.strata[a].sequence.clone(), st.strata[a].slot))
            .collect();
        let expect: BTreeSet<(Vec<usize>, Option<usize>)> = [
            (vec![0, 1, 3], Some(0)),
            (vec![0, 1, 3], Some(1)),
        ]
        .into_iter()
        .collect();
        assert_eq!(parents, expect);
    }

    #[test]
    fn dimension_formula_is_additive_under_concatenation() {
        let sys = system("flat-torus");
        let poset = succession_poset(&sys).unwrap();
        let whole = chain_dimension(&poset, &[0, 1, 3]).unwrap();
        let left = chain_dimension(&poset, &[0, 1]).unwrap();
        let right = chain_dimension(&poset, &[1, 3]).unwrap();
        assert_eq!(whole, left + right);
        let sys = system("ellipsoid-sphere");
        let poset = succession_poset(&sys).unwrap();
        for s in [2usize, 3] {
            let whole = chain_dimension(&poset, &[0, s, 4]).unwrap();
            let parts =
                chain_dimension(&poset, &[0, s]).unwrap() + chain_dimension(&poset, &[s, 4]).unwrap();
            assert_eq!(whole, parts);
        }
    }

    #[test]
    fn impossible_chain_is_a_negative_dimension_error() {
        let poset = SuccessionPoset {
            labels: vec!["a".into(), "b".into()],
            values: vec![1.0, 0.0],
            indices: vec![1, 1],
            relation: [(0, 1)].into_iter().collect(),
        };
        let counts: BTreeMap<(usize, usize), u64> = [((0, 1), 1)].into_iter().collect();
        let err = stratification(SpaceTag::Mbar { p: 0, q: 1 }, &poset, &counts).unwrap_err();
        assert!(matches!(err, Error::NegativeDimension { .. }));
    }

    #[test]
    fn missing_component_count_is_reported() {
        let poset = SuccessionPoset {
            labels: vec!["a".into(), "b".into()],
            values: vec![1.0, 0.0],
            indices: vec![1, 0],
            relation: [(0, 1)].into_iter().collect(),
        };
        let counts = BTreeMap::new();
        let err = stratification(SpaceTag::Mbar { p: 0, q: 1 }, &poset, &counts).unwrap_err();
        assert!(matches!(err, Error::MissingCount { .. }));
    }

    #[test]
    fn broken_line_crossings_on_invariant_circles() {
        let sys = system("flat-torus");
        let upper = sys
            .classes_unsigned(0, 1)
            .unwrap()
            .into_iter()
            .find(|c| c.angle.unwrap() < 1.0)
            .unwrap();
        let lower = sys
            .classes_unsigned(1, 3)
            .unwrap()
            .into_iter()
            .find(|c| c.direction[1] > 0.0)
            .unwrap();
        let line = GeneralizedLine::Broken {
            segments: vec![upper, lower],
        };
        let pts = evaluate_on_levels(&sys, &line, &[1.0, -1.0]).unwrap();
        assert_eq!(pts.len(), 2);
        let expect0 = Point::new(0, &[PI / 2.0, 0.0]);
        let expect1 = Point::new(0, &[-PI, PI / 2.0]);
        assert!(sys.atlas.distance(&pts[0], &expect0) < 1e-6);
        assert!(sys.atlas.distance(&pts[1], &expect1) < 1e-6);
    }

    #[test]
    fn unbroken_diagonal_line_crossings() {
        let sys = system("flat-torus");
        let line = GeneralizedLine::Unbroken {
            seed: Point::new(0, &[PI / 3.0, PI / 3.0]),
        };
        let pts = evaluate_on_levels(&sys, &line, &[1.0, -1.0]).unwrap();
        let expect0 = Point::new(0, &[PI / 3.0, PI / 3.0]);
        let expect1 = Point::new(0, &[2.0 * PI / 3.0, 2.0 * PI / 3.0]);
        assert!(sys.atlas.distance(&pts[0], &expect0) < 1e-6);
        assert!(sys.atlas.distance(&pts[1], &expect1) < 1e-6);
    }

    #[test]
    fn near_critical_levels_are_rejected() {
        let sys = system("flat-torus");
        let line = GeneralizedLine::Unbroken {
            seed: Point::new(0, &[PI / 3.0, PI / 3.0]),
        };
        let err = evaluate_on_levels(&sys, &line, &[2.0 - 1e-12]).unwrap_err();
        assert!(matches!(err, Error::NotRegularValue { .. }));
        let err = evaluate_on_levels(
            &sys,
            &GeneralizedLine::Broken { segments: vec![] },
            &[1.0],
        )
        .unwrap_err();
        assert!(matches!(err, Error::BrokenLine(_)));
    }

    #[test]
    fn distinct_lines_evaluate_to_distinct_tuples() {
        let sys = system("flat-torus");
        let mut lines: Vec<GeneralizedLine> = Vec::new();
        for mid in [1usize, 2] {
            for upper in sys.classes_unsigned(0, mid).unwrap() {
                for lower in sys.classes_unsigned(mid, 3).unwrap() {
                    lines.push(GeneralizedLine::Broken {
                        segments: vec![upper.clone(), lower],
                    });
                }
            }
        }
        let curve = sys.moduli_curve(0, 3).unwrap();
        assert_eq!(curve.components.len(), 4);
        for comp in &curve.components {
            lines.push(GeneralizedLine::Unbroken {
                seed: comp.polyline[comp.polyline.len() / 2].clone(),
            });
        }
        assert_eq!(lines.len(), 12);
        let levels = [1.0, -1.0];
        let tuples: Vec<Vec<Point>> = lines
            .iter()
            .map(|l| evaluate_on_levels(&sys, l, &levels).unwrap())
            .collect();
        for i in 0..tuples.len() {
            for j in i + 1..tuples.len() {
                let apart = tuples[i]
                    .iter()
                    .zip(&tuples[j])
                    .map(|(a, b)| sys.atlas.distance(a, b))
                    .fold(0.0f64, f64::max);
                assert!(
                    apart > 1e-3,
                    "lines {i} and {j} evaluate to the same tuple"
                );
            }
        }
    }

    #[test]
    fn corner_chart_matches_the_closed_form_at_the_corner() {
        let chart = corner_chart(CornerVariant::P, 1.0).unwrap();
        let v1 = DVector::from_row_slice(&[1.0, 0.0]);
        let v2 = DVector::from_row_slice(&[0.0, 1.0]);
        let z = chart.phi(&v2, &v1, 0.0).unwrap();
        assert_eq!(z[0], DVector::zeros(2));
        assert_eq!(z[1], v2);
        assert_eq!(z[2], v1);
        assert_eq!(z[3], DVector::zeros(2));
        let z = chart.phi(&v2, &v1, 0.5).unwrap();
        let t = 1.25f64.sqrt();
        assert_relative_eq!(z[0][0], 0.5, epsilon = 1e-15);
        assert_relative_eq!(z[1][1], t, epsilon = 1e-15);
        assert_relative_eq!(z[2][0], t, epsilon = 1e-15);
        assert_relative_eq!(z[3][1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn corner_chart_roundtrips_to_machine_precision() {
        for variant in [
            CornerVariant::P,
            CornerVariant::QPlus,
            CornerVariant::QMinus,
            CornerVariant::Collar,
        ] {
            for eps in [1.0, 0.37] {
                let chart = corner_chart(variant, eps).unwrap();
                let worst = chart.roundtrip_error(1000, 2024).unwrap();
                assert!(
                    worst < 1e-12,
                    "{variant:?} at eps {eps}: roundtrip error {worst:.3e}"
                );
            }
        }
    }

    #[test]
    fn corner_derivative_matches_finite_differences_and_is_injective() {
        let mut state = 7u64;
        for variant in [
            CornerVariant::P,
            CornerVariant::QPlus,
            CornerVariant::QMinus,
            CornerVariant::Collar,
        ] {
            let chart = corner_chart(variant, 1.0).unwrap();
            let (s1, s2) = chart.sphere_constrained();
            let v1 = random_block(&mut state, 2, 1.0, s1);
            let v2 = random_block(&mut state, 2, 1.0, s2);
            let analytic = chart.dphi_zero(&v2, &v1).unwrap();
            let fd = chart.dphi_fd(&v2, &v1, 0.0).unwrap();
            let gap = (&analytic - &fd).amax();
            assert!(gap < 1e-6, "{variant:?}: derivative gap {gap:.3e}");
            let sigma = chart.min_singular_at_zero(&v2, &v1).unwrap();
            assert!(sigma >= 0.5, "{variant:?}: min singular value {sigma}");
        }
        // The printed corner derivative: s-column carries (v1, 0, 0, v2),
        // the v1 block maps to the third slot, the v2 block to the second.
        let chart = corner_chart(CornerVariant::P, 1.0).unwrap();
        let v1 = DVector::from_row_slice(&[1.0, 0.0]);
        let v2 = DVector::from_row_slice(&[0.0, 1.0]);
        let m = chart.dphi_zero(&v2, &v1).unwrap();
        let mut expect = DMatrix::zeros(8, 5);
        expect[(0, 0)] = 1.0;
        expect[(7, 0)] = 1.0;
        expect[(4, 1)] = 1.0;
        expect[(5, 2)] = 1.0;
        expect[(2, 3)] = 1.0;
        expect[(3, 4)] = 1.0;
        assert_relative_eq!(m, expect, epsilon = 1e-14);
    }

    #[test]
    fn corner_chart_rejects_out_of_domain_arguments() {
        let chart = corner_chart(CornerVariant::P, 1.0).unwrap();
        let v1 = DVector::from_row_slice(&[1.0, 0.0]);
        let v2 = DVector::from_row_slice(&[0.0, 1.0]);
        assert!(chart.phi(&v2, &v1, 1.0).is_err());
        assert!(chart.phi(&v2, &v1, -0.1).is_err());
        assert!(chart.phi(&v2, &(2.0 * &v1), 0.3).is_err());
        assert!(corner_chart(CornerVariant::P, 0.0).is_err());
        let z = [
            DVector::zeros(2),
            DVector::zeros(2),
            DVector::from_row_slice(&[1.0, 0.0]),
            DVector::zeros(2),
        ];
        assert!(chart.alpha(&z).is_err());
    }
}
