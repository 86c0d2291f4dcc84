use alloc::string::String;
use core::fmt;

/// Everything that can go wrong in the core. Variants carry enough context
/// to be actionable from a report or a CLI message.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    UnknownBuiltin(String),
    BadParameter(String),
    ChartOutOfRange { chart: usize, charts: usize },
    OutsideDomain { chart: usize },
    NoOverlap { from: usize, to: usize },
    DimensionMismatch { expected: usize, got: usize },
    SingularMatrix(&'static str),
    NotPositiveDefinite(&'static str),
    DegenerateCritical { detail: String },
    NotGradientLike { inner: f64 },
    StepSizeUnderflow { t: f64 },
    MaxStepsExceeded { t: f64 },
    LevelNotReached { level: f64 },
    FlowMapUndefined { critical: String },
    NoSuchCritical(usize),
    DwellRadiusTooLarge { rho: f64, min_separation: f64 },
    IndexGapUnsupported { from: usize, to: usize, need: usize },
    DegenerateIntersection { det: f64 },
    UnresolvedClass(String),
    MissingCount { p: String, q: String },
    PosetCycle(String),
    NegativeDimension { detail: String },
    BrokenLine(String),
    Overflow(&'static str),
    NotRegularValue { level: f64 },
    Msg(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Error::*;
        match self {
            UnknownBuiltin(name) => write!(
                f,
                "unknown built-in manifold `{name}` (expected flat-torus, ellipsoid-sphere, morse-local-model, or cp2-chart)"
            ),
            BadParameter(msg) => write!(f, "bad parameter: {msg}"),
            ChartOutOfRange { chart, charts } => {
                write!(f, "chart {chart} out of range (atlas has {charts})")
            }
            OutsideDomain { chart } => write!(f, "point left the domain of chart {chart}"),
            NoOverlap { from, to } => {
                write!(f, "point is outside the overlap of charts {from} and {to}")
            }
            DimensionMismatch { expected, got } => {
                write!(f, "dimension mismatch: expected {expected}, got {got}")
            }
            SingularMatrix(what) => write!(f, "singular matrix in {what}"),
            NotPositiveDefinite(what) => write!(f, "matrix not positive definite in {what}"),
            DegenerateCritical { detail } => write!(f, "degenerate critical point: {detail}"),
            NotGradientLike { inner } => write!(
                f,
                "field is not gradient-like here: <X, grad f> = {inner:.3e} <= 0"
            ),
            StepSizeUnderflow { t } => write!(f, "integrator step size underflow at t = {t}"),
            MaxStepsExceeded { t } => write!(f, "integrator exceeded max step count at t = {t}"),
            LevelNotReached { level } => write!(f, "trajectory never reached level {level}"),
            FlowMapUndefined { critical } => write!(
                f,
                "flow map undefined: trajectory converges to critical point {critical} before the target level"
            ),
            NoSuchCritical(i) => write!(f, "no critical point with index {i}"),
            DwellRadiusTooLarge { rho, min_separation } => write!(
                f,
                "dwell radius {rho} too large: critical points are only {min_separation} apart"
            ),
            IndexGapUnsupported { from, to, need } => write!(
                f,
                "operation needs Morse index gap {need}, got ind = {from} -> {to}"
            ),
            DegenerateIntersection { det } => write!(
                f,
                "intersection too close to degenerate for a trustworthy sign (det = {det:.3e})"
            ),
            UnresolvedClass(msg) => write!(f, "could not resolve orbit class: {msg}"),
            MissingCount { p, q } => {
                write!(f, "no component count available for the pair ({p}, {q})")
            }
            PosetCycle(msg) => write!(f, "succession relation has a cycle: {msg}"),
            NegativeDimension { detail } => {
                write!(f, "stratum with negative dimension: {detail}")
            }
            BrokenLine(msg) => write!(f, "no unbroken flow line: {msg}"),
            Overflow(what) => write!(f, "integer overflow in {what}"),
            NotRegularValue { level } => write!(f, "{level} is a critical value, not regular"),
            Msg(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
