//! The versioned JSON run report. Every map is a `BTreeMap` and every
//! list is built in a fixed order, so identical configurations serialize
//! to identical bytes; normalized mode drops the timings, the only
//! nondeterministic section.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::PipelineConfig;

pub const SCHEMA: &str = "morseflow-report/1";

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema: String,
    pub manifold: String,
    pub dim: usize,
    pub config: PipelineConfig,
    pub criticals: Vec<CriticalRow>,
    pub levels: Vec<f64>,
    pub moduli: Vec<ModuliRow>,
    pub curves: Vec<CurveRow>,
    pub stratifications: Vec<StratificationRow>,
    pub complex: Option<ComplexRow>,
    pub homology: Option<HomologyRow>,
    pub checks: Vec<CheckRow>,
    pub errors: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings_ms: Option<BTreeMap<String, u64>>,
}

impl RunReport {
    pub fn new(config: &PipelineConfig) -> Self {
        RunReport {
            schema: SCHEMA.to_owned(),
            manifold: config.manifold.name.clone(),
            dim: 0,
            config: config.clone(),
            criticals: Vec::new(),
            levels: Vec::new(),
            moduli: Vec::new(),
            curves: Vec::new(),
            stratifications: Vec::new(),
            complex: None,
            homology: None,
            checks: Vec::new(),
            errors: Vec::new(),
            timings_ms: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn any_check_failed(&self) -> bool {
        self.checks.iter().any(|c| c.verdict == Verdict::Fail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PointRow {
    pub chart: usize,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriticalRow {
    pub label: String,
    pub point: PointRow,
    pub value: f64,
    pub index: usize,
    /// Combined deviation of the normal-form chart from the exact local
    /// model (function plus metric), when the chart fit succeeded.
    pub defect: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassRow {
    pub direction: Vec<f64>,
    pub angle: Option<f64>,
    pub sign: i32,
    pub level: f64,
    pub representative: PointRow,
    /// One crossing per requested level strictly between the endpoint
    /// values, in level order.
    pub crossings: Vec<CrossingRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossingRow {
    pub level: f64,
    pub point: PointRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModuliRow {
    pub from: String,
    pub to: String,
    pub signed_count: i64,
    pub classes: Vec<ClassRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EndpointRow {
    pub saddle: String,
    pub angle: f64,
    pub sigma_upper: i32,
    pub sigma_lower: i32,
    pub boundary_sign: i32,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveComponentRow {
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub samples: usize,
    pub endpoint_sum: i64,
    pub endpoints: Vec<EndpointRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub from: String,
    pub to: String,
    pub level: f64,
    pub endpoint_sum: i64,
    pub components: Vec<CurveComponentRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratumRow {
    pub sequence: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
    pub codim: usize,
    pub dim: usize,
    pub components: u64,
    /// Positions of the codimension-one strata whose closures contain
    /// this one, within the same stratification.
    pub ancestors: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StratificationRow {
    pub space: String,
    pub euler: i64,
    pub boundary_euler: i64,
    pub strata: Vec<StratumRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DegreeRow {
    pub degree: usize,
    pub generators: Vec<String>,
    /// Boundary into the next degree down; rows follow its generators.
    pub boundary: Vec<Vec<i64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DSquaredFailureRow {
    pub degree: usize,
    pub top: String,
    pub bottom: String,
    pub value: i64,
    /// Broken-pair terms: middle generator, upper count, lower count.
    pub terms: Vec<(String, i64, i64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DSquaredRow {
    pub ok: bool,
    pub failures: Vec<DSquaredFailureRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexRow {
    pub cap: f64,
    pub degrees: Vec<DegreeRow>,
    pub d_squared: DSquaredRow,
}

#[derive(Debug, Clone, Serialize)]
pub struct HomologyRow {
    pub betti: Vec<usize>,
    pub torsion: Vec<Vec<i64>>,
    pub euler: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub verdict: Verdict,
    pub reason: String,
}

impl CheckRow {
    pub fn pass(name: &str, reason: String) -> Self {
        CheckRow { name: name.to_owned(), verdict: Verdict::Pass, reason }
    }

    pub fn fail(name: &str, reason: String) -> Self {
        CheckRow { name: name.to_owned(), verdict: Verdict::Fail, reason }
    }

    pub fn skipped(name: &str, reason: String) -> Self {
        CheckRow { name: name.to_owned(), verdict: Verdict::Skipped, reason }
    }
}
