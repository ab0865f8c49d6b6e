//! TOML experiment configuration with whole-file validation.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use marcus_nls::coefficients::{NonlinearitySpec, Profile, SaturableFamily};
use marcus_nls::control::{Control, InstantonConfig};
use marcus_nls::dynamics::{Model, SolverConfig};
use marcus_nls::noise::LevyMeasure;
use marcus_nls::spectral::{admissible_p_for, ComplexField, SpectralGrid};
use marcus_nls::wong_zakai::MarcusSolverConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub coefficients: CoefficientConfig,
    pub measure: MeasureConfig,
    pub initial: InitialConfig,
    pub solver: SolverBlock,
    pub control: ControlConfig,
    pub experiment: ExperimentBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            grid: GridConfig::default(),
            coefficients: CoefficientConfig::default(),
            measure: MeasureConfig::default(),
            initial: InitialConfig::default(),
            solver: SolverBlock::default(),
            control: ControlConfig::default(),
            experiment: ExperimentBlock::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            n: 256,
            length: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoefficientConfig {
    pub lambda: f64,
    pub sigma: f64,
    /// One profile tag per noise channel; `m` is the number of tags.
    pub profiles: Vec<String>,
    /// One parameter per channel.
    pub rho: Vec<f64>,
}

impl Default for CoefficientConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            sigma: 1.0,
            profiles: vec!["sat".into()],
            rho: vec![1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKindTag {
    Discrete,
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasureConfig {
    pub kind: MeasureKindTag,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub alpha: f64,
    pub c: f64,
    pub delta_min: f64,
    pub shells: usize,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self {
            kind: MeasureKindTag::Discrete,
            atoms: vec![vec![-0.75], vec![-0.25], vec![0.25], vec![0.75]],
            weights: vec![0.5; 4],
            alpha: 1.0,
            c: 1.0,
            delta_min: 0.1,
            shells: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialConfig {
    pub amplitude: f64,
    pub width: f64,
    pub wavenumber: f64,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.8,
            width: 1.0,
            wavenumber: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotDtype {
    Complex64,
    Complex128,
}

impl SnapshotDtype {
    pub fn name(self) -> &'static str {
        match self {
            SnapshotDtype::Complex64 => "complex64",
            SnapshotDtype::Complex128 => "complex128",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverBlock {
    pub horizon: f64,
    pub dt: f64,
    pub stride: usize,
    pub dealias: bool,
    pub yosida_substeps: usize,
    pub lr_guard: f64,
    pub mu: Vec<f64>,
    pub snapshot_dtype: SnapshotDtype,
}

impl Default for SolverBlock {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            horizon: 1.0,
            dt: s.dt,
            stride: s.stride,
            dealias: s.dealias,
            yosida_substeps: s.yosida_substeps,
            lr_guard: s.lr_guard,
            mu: vec![10.0, 100.0, 1000.0, 10000.0],
            snapshot_dtype: SnapshotDtype::Complex128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub bins: usize,
    /// Constant initial value of ψ, used when `values` is empty.
    pub init: f64,
    /// Row-major (bin, cell) values of ψ.
    pub values: Vec<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            bins: 4,
            init: 1.0,
            values: [1.0, 1.0, 3.0, 3.0].repeat(4),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentBlock {
    pub eps: Vec<f64>,
    pub delta: f64,
    pub samples: usize,
    pub rare_event_eps: Vec<f64>,
    pub rare_event_samples: usize,
    pub level: f64,
    pub continuity_ns: Vec<usize>,
    pub refine: usize,
    pub kappa: f64,
    pub rounds: usize,
    pub max_iters: usize,
    pub meshes: Vec<usize>,
    pub wz_paths: usize,
    pub check_seeds: usize,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        let inst = InstantonConfig::default();
        Self {
            eps: vec![0.1, 0.05, 0.025],
            delta: 0.2,
            samples: 200,
            rare_event_eps: vec![0.2, 0.1, 0.05],
            rare_event_samples: 1000,
            level: 0.1,
            continuity_ns: (0..8).map(|k| 4usize.pow(k)).collect(),
            refine: 1,
            kappa: inst.kappa,
            rounds: inst.rounds,
            max_iters: inst.max_iters,
            meshes: vec![8, 16, 32, 64, 128, 256],
            wz_paths: 20,
            check_seeds: 4,
        }
    }
}

/// One failed constraint, addressed by its dotted field path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("{} invalid field(s):\n  {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n  "))]
    Invalid(Vec<Violation>),
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text).map_err(|e| match e {
        ConfigError::Parse { source, .. } => ConfigError::Parse {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|source| ConfigError::Parse {
        path: "<string>".into(),
        source,
    })?;
    let violations = cfg.validate();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::Invalid(violations))
    }
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

// Multiples of dt up to the rounding used by the solvers.
fn aligned(x: f64, dt: f64) -> bool {
    let k = (x / dt).round();
    k >= 1.0 && (x - k * dt).abs() <= 1e-9 * x.abs().max(1.0)
}

impl ExperimentConfig {
    /// All violated constraints, in field order.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut bad = |field: &str, message: String| {
            out.push(Violation {
                field: field.to_string(),
                message,
            })
        };

        let g = &self.grid;
        if g.dim != 1 && g.dim != 2 {
            bad("grid.dim", format!("must be 1 or 2, got {}", g.dim));
        }
        if g.n < 8 || !g.n.is_power_of_two() {
            bad(
                "grid.n",
                format!("must be a power of two >= 8, got {}", g.n),
            );
        }
        if !positive(g.length) {
            bad("grid.length", format!("must be positive, got {}", g.length));
        }

        let c = &self.coefficients;
        if !c.lambda.is_finite() {
            bad("coefficients.lambda", "must be finite".into());
        }
        if g.dim == 1 || g.dim == 2 {
            let bound = 2.0 / g.dim as f64;
            if !(c.sigma > 0.0 && c.sigma < bound) {
                bad(
                    "coefficients.sigma",
                    format!(
                        "must satisfy 0 < sigma < 2/d = {bound} for d = {}, got {}",
                        g.dim, c.sigma
                    ),
                );
            } else if admissible_p_for(2.0 * c.sigma + 2.0, g.dim).is_none() {
                bad(
                    "coefficients.sigma",
                    format!(
                        "r = 2 sigma + 2 = {} has no admissible p in dimension {}",
                        2.0 * c.sigma + 2.0,
                        g.dim
                    ),
                );
            }
        }
        if c.profiles.is_empty() {
            bad(
                "coefficients.profiles",
                "need at least one noise channel".into(),
            );
        }
        if c.rho.len() != c.profiles.len() {
            bad(
                "coefficients.rho",
                format!(
                    "expected {} entries (one per profile), got {}",
                    c.profiles.len(),
                    c.rho.len()
                ),
            );
        }
        for (j, (tag, rho)) in c.profiles.iter().zip(&c.rho).enumerate() {
            if let Err(e) = Profile::from_tag(tag, *rho) {
                bad(&format!("coefficients.profiles[{j}]"), e.to_string());
            }
        }
        let m = c.profiles.len();

        let ms = &self.measure;
        match ms.kind {
            MeasureKindTag::Discrete => {
                if ms.atoms.is_empty() {
                    bad("measure.atoms", "need at least one atom".into());
                }
                if ms.weights.len() != ms.atoms.len() {
                    bad(
                        "measure.weights",
                        format!(
                            "expected {} entries (one per atom), got {}",
                            ms.atoms.len(),
                            ms.weights.len()
                        ),
                    );
                }
                for (i, z) in ms.atoms.iter().enumerate() {
                    if z.len() != m {
                        bad(
                            &format!("measure.atoms[{i}]"),
                            format!(
                                "mark has {} components but there are {m} noise channels",
                                z.len()
                            ),
                        );
                        continue;
                    }
                    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if !(norm > 0.0 && norm <= 1.0) {
                        bad(
                            &format!("measure.atoms[{i}]"),
                            format!("|z| = {norm} lies outside the mark domain 0 < |z| <= 1"),
                        );
                    }
                }
                for (i, w) in ms.weights.iter().enumerate() {
                    if !positive(*w) {
                        bad(
                            &format!("measure.weights[{i}]"),
                            format!("must be positive, got {w}"),
                        );
                    }
                }
            }
            MeasureKindTag::Radial => {
                if !(ms.alpha > 0.0 && ms.alpha < 2.0) {
                    bad(
                        "measure.alpha",
                        format!("must lie in (0, 2), got {}", ms.alpha),
                    );
                }
                if !positive(ms.c) {
                    bad("measure.c", format!("must be positive, got {}", ms.c));
                }
                if !(ms.delta_min > 0.0 && ms.delta_min < 1.0) {
                    bad(
                        "measure.delta_min",
                        format!("must lie in (0, 1), got {}", ms.delta_min),
                    );
                }
                if ms.shells == 0 {
                    bad("measure.shells", "must be positive".into());
                }
            }
        }

        let i = &self.initial;
        if !(i.amplitude.is_finite() && i.amplitude >= 0.0) {
            bad(
                "initial.amplitude",
                format!("must be finite and non-negative, got {}", i.amplitude),
            );
        }
        if !positive(i.width) {
            bad(
                "initial.width",
                format!("must be positive, got {}", i.width),
            );
        }
        if !i.wavenumber.is_finite() {
            bad("initial.wavenumber", "must be finite".into());
        }

        let s = &self.solver;
        if !positive(s.dt) {
            bad("solver.dt", format!("must be positive, got {}", s.dt));
        }
        if !positive(s.horizon) {
            bad(
                "solver.horizon",
                format!("must be positive, got {}", s.horizon),
            );
        } else if positive(s.dt) && !aligned(s.horizon, s.dt) {
            bad(
                "solver.horizon",
                format!("must be a multiple of dt = {}", s.dt),
            );
        }
        if s.stride == 0 {
            bad("solver.stride", "must be positive".into());
        }
        if s.yosida_substeps == 0 {
            bad("solver.yosida_substeps", "must be positive".into());
        }
        if !positive(s.lr_guard) {
            bad(
                "solver.lr_guard",
                format!("must be positive, got {}", s.lr_guard),
            );
        }
        for (k, mu) in s.mu.iter().enumerate() {
            if !positive(*mu) {
                bad(
                    &format!("solver.mu[{k}]"),
                    format!("must be positive, got {mu}"),
                );
            }
        }

        let ct = &self.control;
        if ct.bins == 0 {
            bad("control.bins", "must be positive".into());
        } else if positive(s.horizon)
            && positive(s.dt)
            && !aligned(s.horizon / ct.bins as f64, s.dt)
        {
            bad(
                "control.bins",
                format!(
                    "bin width horizon / bins must be a multiple of dt = {}",
                    s.dt
                ),
            );
        }
        if !(ct.init.is_finite() && ct.init >= 0.0) {
            bad(
                "control.init",
                format!("psi must be finite and non-negative, got {}", ct.init),
            );
        }
        if !ct.values.is_empty() {
            if let Ok(measure) = self.measure() {
                let expected = ct.bins * measure.num_cells();
                if ct.values.len() != expected {
                    bad(
                        "control.values",
                        format!(
                            "expected bins x cells = {expected} entries, got {} (set `values = []` to use `init`)",
                            ct.values.len()
                        ),
                    );
                }
            }
            for (k, v) in ct.values.iter().enumerate() {
                if !(v.is_finite() && *v >= 0.0) {
                    bad(
                        &format!("control.values[{k}]"),
                        format!("psi must be finite and non-negative, got {v}"),
                    );
                }
            }
        }

        let e = &self.experiment;
        for (name, list) in [
            ("experiment.eps", &e.eps),
            ("experiment.rare_event_eps", &e.rare_event_eps),
        ] {
            if list.is_empty() {
                bad(name, "need at least one noise level".into());
            }
            for (k, v) in list.iter().enumerate() {
                if !(*v > 0.0 && *v <= 1.0) {
                    bad(
                        &format!("{name}[{k}]"),
                        format!("must lie in (0, 1], got {v}"),
                    );
                }
            }
        }
        if !positive(e.delta) {
            bad(
                "experiment.delta",
                format!("must be positive, got {}", e.delta),
            );
        }
        if e.samples == 0 {
            bad("experiment.samples", "must be positive".into());
        }
        if e.rare_event_samples < 100 {
            bad(
                "experiment.rare_event_samples",
                format!("at least 100 required, got {}", e.rare_event_samples),
            );
        }
        if !(e.level.is_finite() && e.level >= 0.0) {
            bad(
                "experiment.level",
                format!("must be finite and non-negative, got {}", e.level),
            );
        }
        if e.continuity_ns.is_empty() || e.continuity_ns.contains(&0) {
            bad(
                "experiment.continuity_ns",
                "need positive sequence indices".into(),
            );
        }
        if e.refine == 0 {
            bad("experiment.refine", "must be positive".into());
        }
        if !positive(e.kappa) {
            bad(
                "experiment.kappa",
                format!("must be positive, got {}", e.kappa),
            );
        }
        if e.rounds == 0 || e.max_iters == 0 {
            bad(
                "experiment.rounds",
                "rounds and max_iters must be positive".into(),
            );
        }
        if e.meshes.is_empty() || e.meshes.contains(&0) {
            bad(
                "experiment.meshes",
                "need positive numbers of mesh intervals".into(),
            );
        }
        if e.wz_paths == 0 {
            bad("experiment.wz_paths", "must be positive".into());
        }
        if e.check_seeds == 0 {
            bad("experiment.check_seeds", "must be positive".into());
        }
        out
    }

    pub fn grid(&self) -> marcus_nls::Result<Arc<SpectralGrid>> {
        SpectralGrid::new(self.grid.dim, self.grid.n, self.grid.length)
    }

    pub fn spec(&self) -> marcus_nls::Result<NonlinearitySpec> {
        NonlinearitySpec::new(
            self.coefficients.lambda,
            self.coefficients.sigma,
            self.grid.dim,
        )
    }

    pub fn family(&self) -> marcus_nls::Result<SaturableFamily> {
        let c = &self.coefficients;
        let profiles = c
            .profiles
            .iter()
            .zip(&c.rho)
            .map(|(t, r)| Profile::from_tag(t, *r))
            .collect::<marcus_nls::Result<Vec<_>>>()?;
        SaturableFamily::new(profiles)
    }

    pub fn measure(&self) -> marcus_nls::Result<LevyMeasure> {
        let ms = &self.measure;
        match ms.kind {
            MeasureKindTag::Discrete => LevyMeasure::discrete(ms.atoms.clone(), ms.weights.clone()),
            MeasureKindTag::Radial => LevyMeasure::radial(
                self.coefficients.profiles.len(),
                ms.alpha,
                ms.c,
                ms.delta_min,
                ms.shells,
            ),
        }
    }

    pub fn model(&self) -> marcus_nls::Result<Model> {
        Model::new(self.spec()?, self.family()?, self.measure()?)
    }

    pub fn initial(&self) -> marcus_nls::Result<ComplexField> {
        let i = &self.initial;
        Ok(ComplexField::gaussian(
            self.grid()?,
            i.amplitude,
            i.width,
            i.wavenumber,
        ))
    }

    pub fn solver(&self) -> SolverConfig {
        let s = &self.solver;
        SolverConfig {
            dt: s.dt,
            stride: s.stride,
            dealias: s.dealias,
            yosida_substeps: s.yosida_substeps,
            lr_guard: s.lr_guard,
        }
    }

    pub fn control(&self, cells: usize) -> marcus_nls::Result<Control> {
        let ct = &self.control;
        if ct.values.is_empty() {
            Control::constant(self.solver.horizon, ct.bins, cells, ct.init)
        } else {
            Control::new(
                Control::uniform_edges(self.solver.horizon, ct.bins),
                cells,
                ct.values.clone(),
            )
        }
    }

    pub fn instanton(&self) -> InstantonConfig {
        let e = &self.experiment;
        InstantonConfig {
            kappa: e.kappa,
            rounds: e.rounds,
            max_iters: e.max_iters,
            ..InstantonConfig::default()
        }
    }

    pub fn marcus_solver(&self) -> MarcusSolverConfig {
        MarcusSolverConfig::default()
    }

    /// Strichartz pair `(p, r)` attached to the configured power.
    pub fn exponents(&self) -> marcus_nls::Result<(f64, f64)> {
        let spec = self.spec()?;
        Ok((spec.p(), spec.r()))
    }
}
