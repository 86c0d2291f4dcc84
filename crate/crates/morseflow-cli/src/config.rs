//! TOML pipeline configuration: manifold selection, function and
//! integrator parameters, regular-level placement, orientation
//! overrides, and output locations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use morseflow_core::flow::FlowParams;
use morseflow_core::manifold::Atlas;
use morseflow_core::moduli::{ModuliParams, MorseSystem};
use morseflow_core::morse::MorseFunction;

/// Every level must clear every critical value by at least this much,
/// whether placed automatically or given explicitly.
pub const LEVEL_CLEARANCE: f64 = 1e-6;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifold: ManifoldSection,
    pub function: FunctionSection,
    pub flow: FlowSection,
    pub moduli: ModuliSection,
    pub levels: LevelsSection,
    pub orientation: OrientationSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSection {
    pub name: String,
    pub params: BTreeMap<String, f64>,
}

impl Default for ManifoldSection {
    fn default() -> Self {
        ManifoldSection { name: "flat-torus".to_owned(), params: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionSection {
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_time: f64,
}

impl Default for FlowSection {
    fn default() -> Self {
        let p = FlowParams::default();
        FlowSection { abs_tol: p.abs_tol, rel_tol: p.rel_tol, max_time: p.max_time }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModuliSection {
    pub mesh: usize,
    pub bisect_tol: f64,
}

impl Default for ModuliSection {
    fn default() -> Self {
        let p = ModuliParams::default();
        ModuliSection { mesh: p.mesh, bisect_tol: p.bisect_tol }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LevelMode {
    /// Midpoints of consecutive distinct critical values.
    Auto,
    /// The `values` list, verbatim.
    Explicit,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelsSection {
    pub mode: LevelMode,
    pub values: Vec<f64>,
}

impl Default for LevelsSection {
    fn default() -> Self {
        LevelsSection { mode: LevelMode::Auto, values: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrientationSection {
    /// Per-label descending-frame flips.
    pub overrides: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub report: Option<PathBuf>,
    pub csv_dir: Option<PathBuf>,
}

impl PipelineConfig {
    /// Default configuration for one of the built-in manifolds.
    pub fn for_builtin(name: &str) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.manifold.name = name.to_owned();
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("flow.abs_tol", self.flow.abs_tol),
            ("flow.rel_tol", self.flow.rel_tol),
            ("flow.max_time", self.flow.max_time),
            ("moduli.bisect_tol", self.moduli.bisect_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive and finite, got {v}");
            }
        }
        if self.moduli.mesh < 4 {
            bail!("moduli.mesh must be at least 4, got {}", self.moduli.mesh);
        }
        if self.levels.mode == LevelMode::Explicit {
            if self.levels.values.is_empty() {
                bail!("levels.mode = \"explicit\" requires a nonempty levels.values");
            }
            if let Some(v) = self.levels.values.iter().find(|v| !v.is_finite()) {
                bail!("levels.values entries must be finite, got {v}");
            }
        }
        Ok(())
    }

    /// Builds the Morse system and applies the orientation overrides.
    pub fn build_system(&self) -> Result<MorseSystem> {
        let atlas = Atlas::builtin(&self.manifold.name, &self.manifold.params)
            .with_context(|| format!("manifold {:?}", self.manifold.name))?;
        let f = MorseFunction::for_atlas(&atlas, &self.function.params)
            .context("function parameters")?;
        let flow = FlowParams {
            abs_tol: self.flow.abs_tol,
            rel_tol: self.flow.rel_tol,
            max_time: self.flow.max_time,
            ..FlowParams::default()
        };
        let moduli = ModuliParams {
            mesh: self.moduli.mesh,
            bisect_tol: self.moduli.bisect_tol,
            ..ModuliParams::default()
        };
        let mut sys =
            MorseSystem::build(atlas, f, flow, moduli).context("critical point search")?;
        for (label, &flip) in &self.orientation.overrides {
            sys.set_flip(label, flip)
                .with_context(|| format!("orientation override {label:?}"))?;
        }
        Ok(sys)
    }

    /// The regular levels the report evaluates on: midpoints between
    /// consecutive distinct critical values in auto mode, the configured
    /// list otherwise. Either way every level must clear every critical
    /// value by `LEVEL_CLEARANCE`.
    pub fn resolve_levels(&self, sys: &MorseSystem) -> Result<Vec<f64>> {
        let values = sys.critical_values();
        let levels = match self.levels.mode {
            LevelMode::Auto => values.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
            LevelMode::Explicit => self.levels.values.clone(),
        };
        for &a in &levels {
            for &c in &values {
                if (a - c).abs() < LEVEL_CLEARANCE {
                    bail!(
                        "level {a} is within {LEVEL_CLEARANCE} of the critical value {c}"
                    );
                }
            }
        }
        Ok(levels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg.manifold.name, "flat-torus");
        assert_eq!(cfg.levels.mode, LevelMode::Auto);
        assert!(cfg.output.report.is_none());
    }

    #[test]
    fn full_document_round_trips() {
        let text = r#"
            [manifold]
            name = "ellipsoid-sphere"
            [manifold.params]
            radius = 3.0
            [function.params]
            a = 1.0
            b = 2.0
            c = 3.0
            [flow]
            abs_tol = 1e-9
            rel_tol = 1e-9
            max_time = 200.0
            [moduli]
            mesh = 32
            bisect_tol = 1e-9
            [levels]
            mode = "explicit"
            values = [1.5, 2.5]
            [orientation.overrides]
            c0 = true
            [output]
            report = "out/report.json"
            csv_dir = "out"
        "#;
        let cfg = PipelineConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.manifold.name, "ellipsoid-sphere");
        assert_eq!(cfg.moduli.mesh, 32);
        assert_eq!(cfg.levels.values, vec![1.5, 2.5]);
        assert_eq!(cfg.orientation.overrides.get("c0"), Some(&true));
        let echoed = toml::to_string(&cfg).unwrap();
        let back = PipelineConfig::from_toml_str(&echoed).unwrap();
        assert_eq!(back.levels.values, cfg.levels.values);
    }

    #[test]
    fn bad_tolerances_and_unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("[flow]\nabs_tol = 0.0").is_err());
        assert!(PipelineConfig::from_toml_str("[flow]\nabs_tol = -1e-9").is_err());
        assert!(PipelineConfig::from_toml_str("[levels]\nmode = \"explicit\"").is_err());
        assert!(PipelineConfig::from_toml_str("[typo]\nx = 1").is_err());
    }

    #[test]
    fn auto_levels_sit_between_torus_critical_values() {
        let cfg = PipelineConfig::default();
        let sys = cfg.build_system().unwrap();
        let levels = cfg.resolve_levels(&sys).unwrap();
        assert_eq!(levels, vec![-1.0, 1.0]);
    }

    #[test]
    fn levels_too_close_to_critical_values_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.levels.mode = LevelMode::Explicit;
        cfg.levels.values = vec![2e-7];
        let sys = cfg.build_system().unwrap();
        assert!(cfg.resolve_levels(&sys).is_err());
    }
}
