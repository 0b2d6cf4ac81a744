//! Run configuration: a single JSON document with one section per module.
//!
//! A run is assembled from an optional named preset, then an optional
//! config file merged over it key by key, then command-line overrides.
//! Unknown keys are rejected at every level.

use std::path::{Path as FsPath, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{RamifyError, Result};
use crate::kernels::KernelSpec;
use crate::mollified::Functional;
use crate::objective::ObjectiveConfig;
use crate::optimizer::DescentConfig;
use crate::svg::SvgStyle;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Irrigate,
    Treeopt,
    GammaTable,
    Counterexample,
    Gradcheck,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Irrigate => "irrigate",
            Experiment::Treeopt => "treeopt",
            Experiment::GammaTable => "gamma-table",
            Experiment::Counterexample => "counterexample",
            Experiment::Gradcheck => "gradcheck",
        }
    }
}

/// Target atoms on the upper half circle, irrigated by a star of paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureConfig {
    pub n: usize,
    pub radius: f64,
    pub total_mass: f64,
    /// Segments per path of the initial star.
    pub segments: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig { n: 25, radius: 1.0, total_mass: 1.0, segments: 16 }
    }
}

/// Initial fan of straight branches for tree-shape runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FanConfig {
    pub branches: usize,
    pub spread: f64,
    pub length: f64,
    pub segments: usize,
}

impl Default for FanConfig {
    fn default() -> Self {
        FanConfig { branches: 11, spread: std::f64::consts::FRAC_PI_2, length: 1.0, segments: 10 }
    }
}

/// Trunk-cluster diagnostic: crossings of a circle, grouped by polar angle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub radius: f64,
    /// Largest angular gap (radians) inside one cluster.
    pub gap: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { radius: 0.2, gap: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GammaConfig {
    pub eps_grid: Vec<f64>,
    pub alpha: f64,
    pub kernel: KernelSpec,
    /// Allowed relative excess of the max form over the exact cost.
    pub rel_tol: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig { eps_grid: vec![0.2, 0.1, 0.05, 0.02], alpha: 0.4, kernel: KernelSpec::Triangular, rel_tol: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CounterexampleConfig {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub delta: f64,
    pub alpha: f64,
    /// Mollification scale for the explicit geometry; must saturate it.
    pub eps: f64,
    pub kernel: KernelSpec,
}

impl Default for CounterexampleConfig {
    fn default() -> Self {
        CounterexampleConfig {
            m1: 1.0,
            m2: 1.0,
            l1: 4.0,
            l2: 0.1,
            delta: 0.1,
            alpha: 0.5,
            eps: 1.0,
            kernel: KernelSpec::QuadraticBump,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub samples: usize,
    pub max_branches: usize,
    pub max_segments: usize,
    /// Central-difference step.
    pub h: f64,
    pub threshold: f64,
    /// Components smaller than this in both gradients are not compared.
    pub min_magnitude: f64,
    /// Components touching a pair this close to a support boundary are skipped.
    pub boundary_exclusion: f64,
    /// Negative control: perturbs the analytic gradient before comparing.
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seed: 0,
            samples: 50,
            max_branches: 4,
            max_segments: 6,
            h: 1e-6,
            threshold: 1e-5,
            min_magnitude: 1e-8,
            boundary_exclusion: 1e-6,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, must match the command being run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub experiment: Option<Experiment>,
    pub objective: ObjectiveConfig,
    pub descent: DescentConfig,
    /// Kernel for path-plan energies.
    pub kernel: KernelSpec,
    pub functional: Functional,
    pub measure: MeasureConfig,
    pub fan: FanConfig,
    /// Vertex snapping tolerance for topology extraction; defaults to a
    /// tiny fraction of the plan diameter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub merge_tol: Option<f64>,
    pub clusters: ClusterConfig,
    pub gamma: GammaConfig,
    pub counterexample: CounterexampleConfig,
    pub gradcheck: GradcheckConfig,
    pub svg: SvgStyle,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: None,
            objective: ObjectiveConfig::default(),
            descent: DescentConfig::default(),
            kernel: KernelSpec::QuadraticBump,
            functional: Functional::Avg,
            measure: MeasureConfig::default(),
            fan: FanConfig::default(),
            merge_tol: None,
            clusters: ClusterConfig::default(),
            gamma: GammaConfig::default(),
            counterexample: CounterexampleConfig::default(),
            gradcheck: GradcheckConfig::default(),
            svg: SvgStyle::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

pub const PRESET_NAMES: [&str; 5] = ["fig2", "fig3", "fig3-text", "fig4", "fig5"];

/// Embedded preset document by name.
pub fn preset(name: &str) -> Result<&'static str> {
    match name {
        "fig2" => Ok(include_str!("../presets/fig2.json")),
        "fig3" => Ok(include_str!("../presets/fig3.json")),
        "fig3-text" => Ok(include_str!("../presets/fig3-text.json")),
        "fig4" => Ok(include_str!("../presets/fig4.json")),
        "fig5" => Ok(include_str!("../presets/fig5.json")),
        _ => Err(RamifyError::Config(format!("unknown preset '{name}' (expected one of {})", PRESET_NAMES.join(", ")))),
    }
}

/// Recursively overlays `patch` onto `base`; objects merge key by key and
/// anything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

fn parse_json(text: &str, origin: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| RamifyError::Config(format!("{origin}: {e}")))
}

/// Command-line overrides applied after the preset and the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub functional: Option<Functional>,
}

impl RunConfig {
    /// Builds a configuration from its layers and validates it.
    pub fn assemble(preset_name: Option<&str>, file: Option<&FsPath>, overrides: &Overrides) -> Result<Self> {
        let mut doc = Value::Object(Default::default());
        if let Some(name) = preset_name {
            merge_json(&mut doc, parse_json(preset(name)?, name)?);
        }
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| RamifyError::Config(format!("cannot read {}: {e}", path.display())))?;
            merge_json(&mut doc, parse_json(&text, &path.display().to_string())?);
        }
        let mut cfg = RunConfig::from_value(doc)?;
        if let Some(dir) = &overrides.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(f) = overrides.functional {
            cfg.functional = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(doc: Value) -> Result<Self> {
        serde_json::from_value(doc).map_err(|e| RamifyError::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| RamifyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.descent.validate()?;
        let bad = |msg: &str| Err(RamifyError::Config(msg.into()));
        let m = &self.measure;
        if m.n == 0 || m.segments == 0 || !(m.radius > 0.0) || !(m.total_mass > 0.0) {
            return bad("measure: n and segments must be positive, radius and total_mass positive");
        }
        let f = &self.fan;
        if f.branches == 0
            || f.segments == 0
            || !(f.length > 0.0)
            || !(f.spread > 0.0 && f.spread < std::f64::consts::PI)
        {
            return bad("fan: branches and segments must be positive, length positive, spread in (0, pi)");
        }
        if let Some(t) = self.merge_tol {
            if !(t > 0.0 && t.is_finite()) {
                return bad("merge_tol must be positive");
            }
        }
        if !(self.clusters.radius > 0.0 && self.clusters.gap > 0.0) {
            return bad("clusters: radius and gap must be positive");
        }
        let g = &self.gamma;
        if g.eps_grid.is_empty()
            || g.eps_grid.iter().any(|e| !(*e > 0.0))
            || g.eps_grid.windows(2).any(|w| w[1] >= w[0])
        {
            return bad("gamma.eps_grid must be nonempty, positive and strictly decreasing");
        }
        if !(g.alpha > 0.0 && g.alpha <= 1.0) || !(g.rel_tol >= 0.0) {
            return bad("gamma: alpha must lie in (0, 1] and rel_tol be nonnegative");
        }
        let c = &self.counterexample;
        if [c.m1, c.m2, c.l1, c.l2, c.delta, c.eps].iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || !(c.alpha > 0.0 && c.alpha <= 1.0)
        {
            return bad("counterexample: masses, lengths, delta and eps must be positive, alpha in (0, 1]");
        }
        let gc = &self.gradcheck;
        if gc.samples == 0 || gc.max_branches == 0 || gc.max_segments == 0 || !(gc.h > 0.0) || !(gc.threshold > 0.0) {
            return bad("gradcheck: samples, max_branches, max_segments, h and threshold must be positive");
        }
        if !(gc.min_magnitude >= 0.0 && gc.boundary_exclusion >= 0.0) {
            return bad("gradcheck: min_magnitude and boundary_exclusion must be nonnegative");
        }
        self.svg.validate()?;
        Ok(())
    }

    /// Rejects a config that names a different experiment than `cmd`.
    pub fn check_experiment(&self, cmd: Experiment) -> Result<()> {
        match self.experiment {
            Some(e) if e != cmd => {
                Err(RamifyError::Config(format!("config is for '{}' but the command is '{}'", e.name(), cmd.name())))
            }
            _ => Ok(()),
        }
    }
}
