//! Run configuration: one TOML document drives every pipeline stage.
//!
//! Resolution order is file, then preset, then `section.key=value`
//! overrides. Unknown keys anywhere are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{TrainConfig, TrainMode};
use crate::losses::DistillConfig;
use crate::nets::{ModelKind, ModelSpec, Variant};
use crate::turbsim::{SceneSpec, SimParams};

/// First sequence index of the held-out split; train indices start at 0.
pub const VAL_INDEX_OFFSET: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    /// Syntax errors and unknown or mistyped keys.
    #[error("config: {0}")]
    Parse(String),
    #[error("override '{0}' is not of the form section.key=value")]
    Override(String),
    #[error("unknown preset '{0}' (expected easy, medium or hard)")]
    Preset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_sequences: u64,
    pub val_sequences: u64,
    pub num_objects: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub motion_amplitude: f64,
    pub channels: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_sequences: 200,
            val_sequences: 40,
            num_objects: 3,
            num_classes: 3,
            height: 64,
            width: 64,
            frames: 5,
            motion_amplitude: 1.0,
            channels: 3,
        }
    }
}

impl DataSection {
    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            num_objects: self.num_objects,
            num_classes: self.num_classes,
            canvas: (self.height, self.width),
            frames: self.frames,
            motion_amplitude: self.motion_amplitude,
            channels: self.channels,
        }
    }

    pub fn train_indices(&self) -> std::ops::Range<u64> {
        0..self.train_sequences
    }

    pub fn val_indices(&self) -> std::ops::Range<u64> {
        VAL_INDEX_OFFSET..VAL_INDEX_OFFSET + self.val_sequences
    }
}

/// Degradation strengths; the per-sequence seed is derived from
/// `master_seed`, so none is stored here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub tilt_strength: f64,
    pub tilt_correlation_length: f64,
    pub blur_sigma: f64,
    pub scintillation_strength: f64,
    pub temporal_rho: f64,
}

impl SimSection {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        SimParams::preset(name)
            .map(Self::from)
            .ok_or_else(|| ConfigError::Preset(name.to_string()))
    }

    pub fn params(&self) -> SimParams {
        SimParams {
            tilt_strength: self.tilt_strength,
            tilt_correlation_length: self.tilt_correlation_length,
            blur_sigma: self.blur_sigma,
            scintillation_strength: self.scintillation_strength,
            temporal_rho: self.temporal_rho,
            seed: 0,
        }
    }
}

impl From<SimParams> for SimSection {
    fn from(p: SimParams) -> Self {
        Self {
            tilt_strength: p.tilt_strength,
            tilt_correlation_length: p.tilt_correlation_length,
            blur_sigma: p.blur_sigma,
            scintillation_strength: p.scintillation_strength,
            temporal_rho: p.temporal_rho,
        }
    }
}

impl Default for SimSection {
    fn default() -> Self {
        Self::preset("medium").expect("builtin preset")
    }
}

/// Explicit specs override the variant ladder; `model_specs` fills the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub student_variant: Variant,
    pub restoration_teacher: Option<ModelSpec>,
    pub detector_teacher: Option<ModelSpec>,
    pub restoration_student: Option<ModelSpec>,
    pub detector_student: Option<ModelSpec>,
}

impl Default for ModelsSection {
    fn default() -> Self {
        Self {
            student_variant: Variant::Small,
            restoration_teacher: None,
            detector_teacher: None,
            restoration_student: None,
            detector_student: None,
        }
    }
}

/// Resolved model specs of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpecs {
    pub restoration_teacher: ModelSpec,
    pub detector_teacher: ModelSpec,
    pub restoration_student: ModelSpec,
    pub detector_student: ModelSpec,
}

impl ModelSpecs {
    pub fn teachers(&self) -> (&ModelSpec, &ModelSpec) {
        (&self.restoration_teacher, &self.detector_teacher)
    }

    pub fn students(&self) -> (&ModelSpec, &ModelSpec) {
        (&self.restoration_student, &self.detector_student)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub teacher_restorer: TrainConfig,
    pub teacher_detector: TrainConfig,
    /// Distillation; `mode` selects joint or separate.
    pub student: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let desk = TrainConfig {
            warmup_epochs: 1,
            seed: 1,
            ..TrainConfig::default()
        };
        Self {
            teacher_restorer: TrainConfig {
                epochs: 30,
                lr_base: 4e-3,
                mode: TrainMode::TeacherRestoration,
                ..desk.clone()
            },
            teacher_detector: TrainConfig {
                epochs: 40,
                lr_base: 2e-3,
                mode: TrainMode::TeacherDetector,
                ..desk.clone()
            },
            student: TrainConfig {
                epochs: 10,
                lr_base: 2e-3,
                mode: TrainMode::Joint,
                ..desk
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub latency_warmup: usize,
    pub latency_runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            latency_warmup: 10,
            latency_runs: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub data: DataSection,
    pub sim: SimSection,
    pub models: ModelsSection,
    pub losses: DistillConfig,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Desk-scale recipe. Reconstruction is up-weighted relative to the
/// library default: on 64×64 scenes the Charbonnier term is roughly twenty
/// times smaller than the detection composite and would otherwise be
/// swamped in joint training.
impl Default for RunConfig {
    fn default() -> Self {
        let mut losses = DistillConfig::default();
        losses.loss_weights.reconstruction = 20.0;
        Self {
            master_seed: 42,
            data: DataSection::default(),
            sim: SimSection::default(),
            models: ModelsSection::default(),
            losses,
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses one override value with TOML syntax, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Recursively overlays `top` onto `base`; tables merge, scalars replace.
fn deep_merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => deep_merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = || ConfigError::Override(spec.to_string());
    let (path, raw) = spec.split_once('=').ok_or_else(bad)?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.len() < 2 && keys != ["master_seed"] || keys.iter().any(|k| k.is_empty()) {
        return Err(bad());
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = root;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(ConfigError::Parse(format!("key '{path}': '{k}' is not a table"))),
        };
    }
    table.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies an optional sim preset and overrides, then
    /// validates.
    pub fn parse(text: &str, preset: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let file: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        // partial tables fall back to the desk recipe, not per-type defaults
        let mut root = toml::Table::try_from(RunConfig::default()).expect("defaults serialise");
        deep_merge(&mut root, file);
        if let Some(name) = preset {
            let sim = toml::Table::try_from(SimSection::preset(name)?).expect("sim serialises");
            root.insert("sim".into(), toml::Value::Table(sim));
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        // re-render so errors carry the offending key in context
        let merged = toml::to_string(&root).expect("table renders");
        let cfg: RunConfig = toml::from_str(&merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path, preset: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, preset, overrides)
    }

    pub fn model_specs(&self) -> ModelSpecs {
        let k = self.data.num_classes;
        let pick = |given: &Option<ModelSpec>, kind, variant| {
            let mut spec = given.clone().unwrap_or_else(|| ModelSpec::preset(kind, variant, k));
            spec.channels = self.data.channels;
            if kind == ModelKind::Detector {
                spec.num_classes = k;
            }
            spec
        };
        let sv = self.models.student_variant;
        ModelSpecs {
            restoration_teacher: pick(&self.models.restoration_teacher, ModelKind::Restoration, Variant::Teacher),
            detector_teacher: pick(&self.models.detector_teacher, ModelKind::Detector, Variant::Teacher),
            restoration_student: pick(&self.models.restoration_student, ModelKind::Restoration, sv),
            detector_student: pick(&self.models.detector_student, ModelKind::Detector, sv),
        }
    }

    /// Copy with every optional field made explicit, as echoed into runs.
    pub fn resolved(&self) -> Self {
        let specs = self.model_specs();
        let mut out = self.clone();
        out.models.restoration_teacher = Some(specs.restoration_teacher);
        out.models.detector_teacher = Some(specs.detector_teacher);
        out.models.restoration_student = Some(specs.restoration_student);
        out.models.detector_student = Some(specs.detector_student);
        out
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config renders")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        self.data.scene().validate().map_err(|e| invalid(format!("[data] {e}")))?;
        if self.data.train_sequences == 0 || self.data.val_sequences == 0 {
            return Err(invalid("[data] train_sequences and val_sequences must be >= 1".into()));
        }
        if self.data.train_sequences > VAL_INDEX_OFFSET {
            return Err(invalid(format!("[data] train_sequences must be <= {VAL_INDEX_OFFSET}")));
        }
        self.sim.params().validate().map_err(|e| invalid(format!("[sim] {e}")))?;
        let specs = self.model_specs();
        for (name, spec, kind) in [
            ("restoration_teacher", &specs.restoration_teacher, ModelKind::Restoration),
            ("detector_teacher", &specs.detector_teacher, ModelKind::Detector),
            ("restoration_student", &specs.restoration_student, ModelKind::Restoration),
            ("detector_student", &specs.detector_student, ModelKind::Detector),
        ] {
            if spec.kind != kind {
                return Err(invalid(format!("[models.{name}] kind must be {kind:?}")));
            }
            spec.validate().map_err(|e| invalid(format!("[models.{name}] {e}")))?;
        }
        if specs.restoration_teacher.window != specs.restoration_student.window {
            return Err(invalid("[models] teacher and student restoration windows differ".into()));
        }
        self.losses.validate().map_err(|e| invalid(format!("[losses] {e}")))?;
        for (name, cfg, allowed) in [
            ("teacher_restorer", &self.train.teacher_restorer, &[TrainMode::TeacherRestoration][..]),
            ("teacher_detector", &self.train.teacher_detector, &[TrainMode::TeacherDetector][..]),
            ("student", &self.train.student, &[TrainMode::Joint, TrainMode::Separate][..]),
        ] {
            cfg.validate().map_err(|e| invalid(format!("[train.{name}] {e}")))?;
            if !allowed.contains(&cfg.mode) {
                return Err(invalid(format!("[train.{name}] mode {:?} not allowed here", cfg.mode)));
            }
        }
        if self.eval.latency_runs == 0 {
            return Err(invalid("[eval] latency_runs must be >= 1".into()));
        }
        Ok(())
    }
}
