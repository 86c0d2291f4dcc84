//! The integral chain complex generated by critical points below a level
//! cap, graded by index, with boundary entries the signed counts of rigid
//! flow lines. Homology is read off a Smith normal form computed exactly
//! over `i128` with checked arithmetic.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::moduli::MorseSystem;
use crate::morse::CriticalPoint;

/// Values closer than this are treated as the same critical value.
const VALUE_TOL: f64 = 1e-9;

/// Dense integer matrix. All arithmetic is checked; overflow surfaces as
/// an error rather than wrapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMat {
    rows: usize,
    cols: usize,
    data: Vec<i128>,
}

impl IntMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        IntMat { rows, cols, data: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> i128 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: i128) {
        self.data[row * self.cols + col] = value;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Row-major copy, one `Vec` per row.
    pub fn to_rows(&self) -> Vec<Vec<i128>> {
        (0..self.rows).map(|i| (0..self.cols).map(|j| self.get(i, j)).collect()).collect()
    }

    /// Checked matrix product.
    pub fn mul(&self, rhs: &IntMat) -> Result<IntMat> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch { expected: self.cols, got: rhs.rows });
        }
        let mut out = IntMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc: i128 = 0;
                for l in 0..self.cols {
                    let term = self
                        .get(i, l)
                        .checked_mul(rhs.get(l, j))
                        .ok_or(Error::Overflow("boundary product"))?;
                    acc = acc.checked_add(term).ok_or(Error::Overflow("boundary product"))?;
                }
                out.set(i, j, acc);
            }
        }
        Ok(out)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..self.cols {
            self.data.swap(a * self.cols + j, b * self.cols + j);
        }
    }

    fn swap_cols(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for i in 0..self.rows {
            self.data.swap(i * self.cols + a, i * self.cols + b);
        }
    }

    /// `row[dst] += factor * row[src]`, checked.
    fn row_axpy(&mut self, dst: usize, src: usize, factor: i128) -> Result<()> {
        for j in 0..self.cols {
            let term = factor
                .checked_mul(self.get(src, j))
                .ok_or(Error::Overflow("smith normal form"))?;
            let v = self.get(dst, j).checked_add(term).ok_or(Error::Overflow("smith normal form"))?;
            self.set(dst, j, v);
        }
        Ok(())
    }

    /// `col[dst] += factor * col[src]`, checked.
    fn col_axpy(&mut self, dst: usize, src: usize, factor: i128) -> Result<()> {
        for i in 0..self.rows {
            let term = factor
                .checked_mul(self.get(i, src))
                .ok_or(Error::Overflow("smith normal form"))?;
            let v = self.get(i, dst).checked_add(term).ok_or(Error::Overflow("smith normal form"))?;
            self.set(i, dst, v);
        }
        Ok(())
    }
}

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Nonzero invariant factors of `m`, positive and in a divisibility
/// chain. Their number is the rank.
///
/// Pivoting always promotes the remaining entry of least magnitude, so
/// every Euclidean sweep strictly shrinks the pivot and the reduction
/// terminates.
pub fn smith(m: &IntMat) -> Result<Vec<i128>> {
    let mut a = m.clone();
    let mut factors: Vec<i128> = Vec::new();
    let mut t = 0usize;
    while t < a.rows.min(a.cols) {
        let mut pivot: Option<(usize, usize)> = None;
        for i in t..a.rows {
            for j in t..a.cols {
                let v = a.get(i, j);
                if v != 0
                    && pivot.is_none_or(|(pi, pj)| v.unsigned_abs() < a.get(pi, pj).unsigned_abs())
                {
                    pivot = Some((i, j));
                }
            }
        }
        let Some((pi, pj)) = pivot else { break };
        a.swap_rows(t, pi);
        a.swap_cols(t, pj);
        loop {
            for i in t + 1..a.rows {
                let v = a.get(i, t);
                if v == 0 {
                    continue;
                }
                let q = v / a.get(t, t);
                if q != 0 {
                    a.row_axpy(i, t, -q)?;
                }
                if a.get(i, t) != 0 {
                    a.swap_rows(t, i);
                }
            }
            for j in t + 1..a.cols {
                let v = a.get(t, j);
                if v == 0 {
                    continue;
                }
                let q = v / a.get(t, t);
                if q != 0 {
                    a.col_axpy(j, t, -q)?;
                }
                if a.get(t, j) != 0 {
                    a.swap_cols(t, j);
                }
            }
            let row_clear = (t + 1..a.cols).all(|j| a.get(t, j) == 0);
            let col_clear = (t + 1..a.rows).all(|i| a.get(i, t) == 0);
            if row_clear && col_clear {
                break;
            }
        }
        factors.push(a.get(t, t).abs());
        t += 1;
    }
    // diag(a, b) is equivalent to diag(gcd, lcm); repeat until the chain
    // divides in order.
    loop {
        let mut stable = true;
        for i in 0..factors.len() {
            for j in i + 1..factors.len() {
                if factors[j] % factors[i] != 0 {
                    let g = gcd(factors[i], factors[j]);
                    let l = (factors[i] / g)
                        .checked_mul(factors[j])
                        .ok_or(Error::Overflow("smith normal form"))?;
                    factors[i] = g;
                    factors[j] = l;
                    stable = false;
                }
            }
        }
        if stable {
            break;
        }
    }
    factors.sort_unstable();
    Ok(factors)
}

/// Critical points with `f(p) <= cap`, grouped by Morse index, and the
/// boundary operators between consecutive degrees.
///
/// `generators[k]` lists critical ids of index `k` sorted by label.
/// `boundaries[k]` sends degree `k` to degree `k - 1`: its rows follow
/// `generators[k - 1]`, its columns `generators[k]`, and the entry at
/// `(q, p)` is the signed count of rigid flow lines from `p` down to `q`.
/// `boundaries[0]` has no rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainComplex {
    pub generators: Vec<Vec<usize>>,
    pub boundaries: Vec<IntMat>,
    /// Labels of all criticals, indexed by critical id.
    pub labels: Vec<String>,
    pub cap: f64,
}

impl ChainComplex {
    /// Number of generators in degree `k`.
    pub fn rank(&self, k: usize) -> usize {
        self.generators.get(k).map_or(0, Vec::len)
    }

    /// Alternating sum of the generator counts.
    pub fn euler(&self) -> i64 {
        let mut chi = 0i64;
        for (k, degree) in self.generators.iter().enumerate() {
            let n = degree.len() as i64;
            chi += if k % 2 == 0 { n } else { -n };
        }
        chi
    }
}

/// Signed rigid flow-line counts for every index-adjacent descending
/// pair of the system's critical points.
pub fn signed_count_table(sys: &MorseSystem) -> Result<BTreeMap<(usize, usize), i64>> {
    let mut table = BTreeMap::new();
    for p in 0..sys.criticals.len() {
        for q in 0..sys.criticals.len() {
            let (cp, cq) = (&sys.criticals[p], &sys.criticals[q]);
            if cp.index != cq.index + 1 || cp.value <= cq.value + VALUE_TOL {
                continue;
            }
            table.insert((p, q), sys.signed_count(p, q)?);
        }
    }
    Ok(table)
}

/// Assembles the chain complex of all criticals with value at most
/// `cap` from a table of signed counts keyed by `(upper id, lower id)`.
///
/// Pairs whose values do not strictly descend need no table entry; every
/// other index-adjacent pair must be present or the build fails with the
/// offending labels.
pub fn build_complex(
    criticals: &[CriticalPoint],
    counts: &BTreeMap<(usize, usize), i64>,
    cap: f64,
) -> Result<ChainComplex> {
    let labels: Vec<String> = criticals.iter().map(|c| c.label.clone()).collect();
    let included: Vec<usize> =
        (0..criticals.len()).filter(|&i| criticals[i].value <= cap + VALUE_TOL).collect();
    let top = included.iter().map(|&i| criticals[i].index).max();
    let mut generators: Vec<Vec<usize>> = match top {
        None => Vec::new(),
        Some(t) => vec![Vec::new(); t + 1],
    };
    for &i in &included {
        generators[criticals[i].index].push(i);
    }
    for degree in &mut generators {
        degree.sort_by(|&a, &b| criticals[a].label.cmp(&criticals[b].label));
    }
    let mut boundaries = Vec::with_capacity(generators.len());
    for k in 0..generators.len() {
        let rows = if k == 0 { 0 } else { generators[k - 1].len() };
        let mut m = IntMat::zeros(rows, generators[k].len());
        for (col, &p) in generators[k].iter().enumerate() {
            if k == 0 {
                break;
            }
            for (row, &q) in generators[k - 1].iter().enumerate() {
                if criticals[p].value <= criticals[q].value + VALUE_TOL {
                    continue;
                }
                let n = counts.get(&(p, q)).copied().ok_or_else(|| Error::MissingCount {
                    p: criticals[p].label.clone(),
                    q: criticals[q].label.clone(),
                })?;
                m.set(row, col, n as i128);
            }
        }
        boundaries.push(m);
    }
    Ok(ChainComplex { generators, boundaries, labels, cap })
}

/// One nonzero term of a product of two counts: a flow line from the top
/// generator into `middle` and one from `middle` to the bottom
/// generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokenPairTerm {
    pub middle: usize,
    /// Signed count from the top generator down to `middle`.
    pub upper: i128,
    /// Signed count from `middle` down to the bottom generator.
    pub lower: i128,
}

/// A nonzero entry of the squared boundary, with the broken-pair terms
/// whose sum fails to cancel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DSquaredFailure {
    /// Degree of the top generator.
    pub degree: usize,
    pub top: usize,
    pub bottom: usize,
    pub value: i128,
    pub terms: Vec<BrokenPairTerm>,
}

/// Outcome of squaring every boundary operator. A nonzero square is
/// data, not an error: the failures list each offending entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DSquaredReport {
    pub failures: Vec<DSquaredFailure>,
}

impl DSquaredReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Multiplies consecutive boundaries and reports every nonzero entry of
/// the products together with its broken-pair decomposition.
pub fn verify_d_squared(complex: &ChainComplex) -> Result<DSquaredReport> {
    let mut failures = Vec::new();
    for k in 2..complex.boundaries.len() {
        let prod = complex.boundaries[k - 1].mul(&complex.boundaries[k])?;
        for row in 0..prod.rows() {
            for col in 0..prod.cols() {
                let value = prod.get(row, col);
                if value == 0 {
                    continue;
                }
                let mut terms = Vec::new();
                for (mid, &middle) in complex.generators[k - 1].iter().enumerate() {
                    let upper = complex.boundaries[k].get(mid, col);
                    let lower = complex.boundaries[k - 1].get(row, mid);
                    if upper != 0 && lower != 0 {
                        terms.push(BrokenPairTerm { middle, upper, lower });
                    }
                }
                failures.push(DSquaredFailure {
                    degree: k,
                    top: complex.generators[k][col],
                    bottom: complex.generators[k - 2][row],
                    value,
                    terms,
                });
            }
        }
    }
    Ok(DSquaredReport { failures })
}

/// Betti numbers and torsion invariant factors per degree, plus the
/// Euler characteristic computed two ways. The identity
/// `euler_from_generators == euler_from_betti` holds whenever the
/// boundary squares to zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HomologyResult {
    pub betti: Vec<usize>,
    /// `torsion[k]` are the invariant factors above 1 of the degree-`k`
    /// homology, each contributing a cyclic summand.
    pub torsion: Vec<Vec<i128>>,
    pub euler_from_generators: i64,
    pub euler_from_betti: i64,
}

/// Homology of the complex via Smith normal form. Requires a squared
/// boundary of zero; a complex that fails `verify_d_squared` is rejected
/// here with the first offending pair.
pub fn smith_homology(complex: &ChainComplex) -> Result<HomologyResult> {
    let report = verify_d_squared(complex)?;
    if let Some(f) = report.failures.first() {
        return Err(Error::Msg(format!(
            "boundary squared is nonzero at ({}, {}); homology is undefined",
            complex.labels[f.top], complex.labels[f.bottom]
        )));
    }
    let degrees = complex.generators.len();
    let mut factors: Vec<Vec<i128>> = Vec::with_capacity(degrees);
    for m in &complex.boundaries {
        factors.push(smith(m)?);
    }
    let mut betti = Vec::with_capacity(degrees);
    let mut torsion = Vec::with_capacity(degrees);
    for k in 0..degrees {
        let rank_out = factors[k].len();
        let rank_in = factors.get(k + 1).map_or(0, Vec::len);
        let cells = complex.rank(k);
        let b = cells
            .checked_sub(rank_out)
            .and_then(|v| v.checked_sub(rank_in))
            .ok_or_else(|| Error::Msg(format!("boundary ranks exceed the degree {k} rank")))?;
        betti.push(b);
        torsion.push(
            factors
                .get(k + 1)
                .map_or_else(Vec::new, |f| f.iter().copied().filter(|&d| d > 1).collect()),
        );
    }
    let mut euler_from_betti = 0i64;
    for (k, &b) in betti.iter().enumerate() {
        let n = b as i64;
        euler_from_betti += if k % 2 == 0 { n } else { -n };
    }
    Ok(HomologyResult {
        betti,
        torsion,
        euler_from_generators: complex.euler(),
        euler_from_betti,
    })
}
