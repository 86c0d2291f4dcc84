use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;

use morseflow_cli::config::PipelineConfig;
use morseflow_cli::pipeline::{run_pipeline, Outcome, Stage};
use morseflow_cli::report::RunReport;
use morseflow_core::cp2::{c1_blowup_scan, c1_limit};
use morseflow_core::flow::Until;
use morseflow_core::manifold::Point;
use morseflow_core::strata::{corner_chart, CornerVariant};

#[derive(Parser)]
#[command(
    name = "morseflow",
    version,
    about = "Negative-gradient flow moduli, stratified compactifications, and integer Morse homology on built-in manifolds"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: criticals, moduli, strata, homology, checks.
    Run(PipelineArgs),
    /// Critical point table only.
    CriticalPoints(PipelineArgs),
    /// Pipeline through the moduli stage.
    Moduli(PipelineArgs),
    /// Pipeline through the stratification stage.
    Strata(PipelineArgs),
    /// Pipeline through the chain complex and homology.
    Homology(PipelineArgs),
    /// Corner-chart certificates: round trips, derivative columns,
    /// injectivity at the corner.
    CornerCheck {
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Scan the connection map along a curve approaching the corner of
    /// the quadric chart; dumps one CSV row per scale.
    Cp2Blowup {
        #[arg(long, allow_negative_numbers = true)]
        a: f64,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        b: f64,
        #[arg(long = "s-min", default_value_t = 1e-6)]
        s_min: f64,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Saddle normal form: closed-form flow against the integrator.
    LocalModel {
        /// Flow time.
        #[arg(long, allow_negative_numbers = true)]
        t: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        x: f64,
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        y: f64,
    },
    /// Integrate one trajectory and dump its samples as CSV.
    Trajectory {
        #[arg(long, default_value = "flat-torus")]
        manifold: String,
        #[arg(long, default_value_t = 0)]
        chart: usize,
        /// Comma-separated start coordinates, e.g. "1.1,-0.4".
        #[arg(long)]
        start: String,
        /// Stop when `f` crosses this level.
        #[arg(long, allow_negative_numbers = true)]
        level: Option<f64>,
        /// Integrate to exactly this flow time; negative times run the
        /// reversed field.
        #[arg(long, allow_negative_numbers = true)]
        time: Option<f64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PipelineArgs {
    /// TOML config path; overrides --manifold.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in manifold to run with default settings.
    #[arg(long, default_value = "flat-torus")]
    manifold: String,
    /// Strip timings so identical configs print identical bytes.
    #[arg(long)]
    normalized: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(path) => PipelineConfig::load(path),
            None => Ok(PipelineConfig::for_builtin(&self.manifold)),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) if broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

/// Whether the error chain bottoms out in a closed stdout, as when the
/// output is piped into `head`. Not worth a diagnostic.
fn broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

/// Writes to stdout, surfacing failures as errors instead of panics.
fn emit(text: impl std::fmt::Display) -> Result<()> {
    use std::io::Write;
    write!(std::io::stdout().lock(), "{text}")?;
    Ok(())
}

fn emitln(text: impl std::fmt::Display) -> Result<()> {
    emit(format!("{text}\n"))
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Run(args) => {
            let cfg = args.config()?;
            let outcome = run_pipeline(&cfg, Stage::Full, args.normalized);
            emit(outcome.report.to_json())?;
            write_outputs(&cfg, &outcome)?;
            Ok(if outcome.ok { 0 } else { 1 })
        }
        Cmd::CriticalPoints(args) => prefix(args, Stage::Criticals, &["criticals", "levels"]),
        Cmd::Moduli(args) => prefix(args, Stage::Moduli, &["moduli", "curves"]),
        Cmd::Strata(args) => prefix(args, Stage::Strata, &["stratifications"]),
        Cmd::Homology(args) => prefix(args, Stage::Homology, &["complex", "homology"]),
        Cmd::CornerCheck { epsilon, samples } => corner_check(epsilon, samples),
        Cmd::Cp2Blowup { a, b, s_min, csv } => cp2_blowup(a, b, s_min, csv.as_deref()),
        Cmd::LocalModel { t, x, y } => local_model(t, x, y),
        Cmd::Trajectory { manifold, chart, start, level, time, csv } => {
            trajectory(&manifold, chart, &start, level, time, csv.as_deref())
        }
    }
}

/// Runs a pipeline prefix and prints the named report sections plus the
/// error list as one JSON object.
fn prefix(args: PipelineArgs, stage: Stage, sections: &[&str]) -> Result<i32> {
    let cfg = args.config()?;
    let outcome = run_pipeline(&cfg, stage, args.normalized);
    let full = serde_json::to_value(&outcome.report).expect("report serializes");
    let mut out = serde_json::Map::new();
    out.insert("schema".to_owned(), full["schema"].clone());
    out.insert("manifold".to_owned(), full["manifold"].clone());
    for &section in sections {
        out.insert(section.to_owned(), full[section].clone());
    }
    out.insert("errors".to_owned(), full["errors"].clone());
    emitln(serde_json::to_string_pretty(&serde_json::Value::Object(out)).unwrap())?;
    Ok(if outcome.report.errors.is_empty() { 0 } else { 1 })
}

fn write_outputs(cfg: &PipelineConfig, outcome: &Outcome) -> Result<()> {
    if let Some(path) = &cfg.output.report {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, outcome.report.to_json())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(dir) = &cfg.output.csv_dir {
        fs::create_dir_all(dir)?;
        write_csv_dumps(dir, &outcome.report)?;
    }
    Ok(())
}

fn write_csv_dumps(dir: &std::path::Path, report: &RunReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("criticals.csv"))?;
    let coord_headers: Vec<String> = (1..=report.dim).map(|i| format!("x{i}")).collect();
    let mut head = vec!["label", "chart", "value", "index", "defect"];
    head.extend(coord_headers.iter().map(String::as_str));
    w.write_record(&head)?;
    for c in &report.criticals {
        let mut rec = vec![
            c.label.clone(),
            c.point.chart.to_string(),
            c.value.to_string(),
            c.index.to_string(),
            c.defect.map_or_else(String::new, |d| d.to_string()),
        ];
        rec.extend(c.point.coords.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("classes.csv"))?;
    let mut head = vec!["from", "to", "sign", "angle", "level", "chart"];
    head.extend(coord_headers.iter().map(String::as_str));
    w.write_record(&head)?;
    for row in &report.moduli {
        for class in &row.classes {
            let mut rec = vec![
                row.from.clone(),
                row.to.clone(),
                class.sign.to_string(),
                class.angle.map_or_else(String::new, |a| a.to_string()),
                class.level.to_string(),
                class.representative.chart.to_string(),
            ];
            rec.extend(class.representative.coords.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("curves.csv"))?;
    w.write_record(["from", "to", "component", "alpha_start", "alpha_end", "samples", "endpoint_sum"])?;
    for row in &report.curves {
        for (i, comp) in row.components.iter().enumerate() {
            w.write_record([
                row.from.clone(),
                row.to.clone(),
                i.to_string(),
                comp.alpha_start.to_string(),
                comp.alpha_end.to_string(),
                comp.samples.to_string(),
                comp.endpoint_sum.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Deterministic unit vector in the plane, rotated by `theta`.
fn dir2(theta: f64) -> DVector<f64> {
    DVector::from_column_slice(&[theta.cos(), theta.sin()])
}

fn corner_check(epsilon: f64, samples: usize) -> Result<i32> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        bail!("--epsilon must be positive and finite");
    }
    if samples == 0 {
        bail!("--samples must be at least 1");
    }
    let variants = [
        (CornerVariant::P, "P"),
        (CornerVariant::QPlus, "Q+"),
        (CornerVariant::QMinus, "Q-"),
        (CornerVariant::Collar, "collar"),
    ];
    let r = epsilon.sqrt();
    let enforce_sigma = (epsilon - 1.0).abs() < 1e-12;
    let mut all_ok = true;
    emitln(format!(
        "corner charts at epsilon = {epsilon}, {samples} round-trip samples per variant"
    ))?;
    for (i, (variant, name)) in variants.into_iter().enumerate() {
        let chart = corner_chart(variant, epsilon)?;
        let roundtrip = chart.roundtrip_error(samples, 0x5EED_0001 + i as u64)?;
        // Probe the corner derivative at a few argument frames; sphere
        // factors live on the radius-r sphere, ball factors inside it.
        let mut fd_gap: f64 = 0.0;
        let mut sigma = f64::INFINITY;
        for k in 0..4 {
            let theta = 0.7 + 1.3 * k as f64;
            let on_sphere = |t: f64| dir2(t) * r;
            let in_ball = |t: f64| dir2(t) * (0.55 * r);
            let (v2, v1) = match variant {
                CornerVariant::P | CornerVariant::Collar => (on_sphere(theta), on_sphere(theta + 0.9)),
                CornerVariant::QPlus => (on_sphere(theta), in_ball(theta + 0.9)),
                CornerVariant::QMinus => (in_ball(theta), on_sphere(theta + 0.9)),
            };
            let analytic = chart.dphi_zero(&v2, &v1)?;
            let fd = chart.dphi_fd(&v2, &v1, 0.0)?;
            fd_gap = fd_gap.max((analytic - fd).abs().max());
            sigma = sigma.min(chart.min_singular_at_zero(&v2, &v1)?);
        }
        let ok = roundtrip < 1e-12 && fd_gap < 1e-6 && (!enforce_sigma || sigma >= 0.5);
        all_ok &= ok;
        emitln(format!(
            "  {name:<6} roundtrip {roundtrip:.3e}  fd-gap {fd_gap:.3e}  min-sigma {sigma:.6}  {}",
            if ok { "pass" } else { "FAIL" }
        ))?;
    }
    emitln(format!(
        "bounds: roundtrip < 1e-12, fd-gap < 1e-6{}",
        if enforce_sigma { ", min-sigma >= 0.5" } else { " (sigma informational away from epsilon = 1)" }
    ))?;
    Ok(if all_ok { 0 } else { 1 })
}

fn cp2_blowup(a: f64, b: f64, s_min: f64, csv: Option<&std::path::Path>) -> Result<i32> {
    if !(s_min > 0.0 && s_min < 0.1 * (1.0 + 1e-12)) {
        bail!("--s-min must lie in (0, 0.1]");
    }
    let mut grid = Vec::new();
    let mut s = 0.1;
    while s >= s_min * (1.0 - 1e-9) {
        grid.push(s);
        s /= 10.0;
    }
    let rows = c1_blowup_scan(a, b, &grid)?;
    let mut w: csv::Writer<Box<dyn std::io::Write>> = match csv {
        Some(path) => csv::Writer::from_writer(Box::new(fs::File::create(path)?)),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    w.write_record([
        "s", "a", "b", "x1", "x2", "x3", "x4", "w1", "w2", "w3", "w4", "d", "v5", "limit",
    ])?;
    for row in &rows {
        let mut rec = vec![row.s.to_string(), row.a.to_string(), row.b.to_string()];
        rec.extend(row.point.iter().map(f64::to_string));
        rec.extend(row.connected.iter().map(f64::to_string));
        rec.push(row.d.to_string());
        rec.push(row.v5.to_string());
        rec.push(row.limit.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    let last = rows.last().expect("nonempty grid");
    eprintln!(
        "closed-form limit {}; v5 at s = {}: {} (broken-configuration boundary value: 0)",
        c1_limit(a, b),
        last.s,
        last.v5
    );
    Ok(0)
}

fn local_model(t: f64, x: f64, y: f64) -> Result<i32> {
    if !t.is_finite() || t.abs() > 30.0 {
        bail!("--t must be finite with |t| <= 30");
    }
    let cfg = PipelineConfig::for_builtin("morse-local-model");
    let sys = cfg.build_system()?;
    let start = Point::new(0, &[x, y]);
    if !sys.atlas.contains(&start) {
        bail!("start ({x}, {y}) lies outside the model chart");
    }
    let closed = [t.exp() * x, (-t).exp() * y];
    let traj = if t >= 0.0 {
        sys.integrator().run(&start, Until::Time(t))?
    } else {
        sys.integrator().backward().run(&start, Until::Time(-t))?
    };
    let end = &traj.end.coords;
    let gap = (end[0] - closed[0]).abs().max((end[1] - closed[1]).abs());
    emitln(format!("start      ({x}, {y})  t = {t}"))?;
    emitln(format!("closed     ({}, {})", closed[0], closed[1]))?;
    emitln(format!("integrated ({}, {})", end[0], end[1]))?;
    emitln(format!("max gap    {gap:.3e}  {}", if gap < 1e-8 { "pass" } else { "FAIL" }))?;
    Ok(if gap < 1e-8 { 0 } else { 1 })
}

fn trajectory(
    manifold: &str,
    chart: usize,
    start: &str,
    level: Option<f64>,
    time: Option<f64>,
    csv: Option<&std::path::Path>,
) -> Result<i32> {
    let coords: Vec<f64> = start
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| anyhow::anyhow!("bad coordinate {s:?}: {e}")))
        .collect::<Result<_>>()?;
    let cfg = PipelineConfig::for_builtin(manifold);
    let sys = cfg.build_system()?;
    if coords.len() != sys.atlas.dim() {
        bail!("expected {} coordinates, got {}", sys.atlas.dim(), coords.len());
    }
    if chart >= sys.atlas.charts() {
        bail!("chart {chart} out of range; the atlas has {}", sys.atlas.charts());
    }
    let p = Point::new(chart, &coords);
    if !sys.atlas.contains(&p) {
        bail!("start lies outside chart {chart}");
    }
    let mut integ = sys.integrator();
    let until = match (level, time) {
        (Some(a), None) => Until::Level(a),
        (None, Some(t)) => {
            if t < 0.0 {
                integ = integ.backward();
            }
            Until::Time(t.abs())
        }
        (None, None) => Until::Converged,
        (Some(_), Some(_)) => bail!("--level and --time are mutually exclusive"),
    };
    let traj = integ.run(&p, until)?;
    let mut w: csv::Writer<Box<dyn std::io::Write>> = match csv {
        Some(path) => csv::Writer::from_writer(Box::new(fs::File::create(path)?)),
        None => csv::Writer::from_writer(Box::new(std::io::stdout())),
    };
    let mut head = vec!["t".to_owned(), "f".to_owned(), "grad_norm".to_owned(), "chart".to_owned()];
    head.extend((1..=sys.atlas.dim()).map(|i| format!("x{i}")));
    w.write_record(&head)?;
    for s in &traj.samples {
        let q = sys.atlas.canonicalize(&s.point);
        let mut rec = vec![
            s.t.to_string(),
            s.f.to_string(),
            s.grad_norm.to_string(),
            q.chart.to_string(),
        ];
        rec.extend(q.coords.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    eprintln!("stopped after {} steps: {:?}", traj.steps, traj.reason);
    Ok(0)
}
