//! End-to-end recipes shared by the command line and the acceptance suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::config::RunConfig;
use crate::data::{load_dataset, save_dataset, AnnotatedSample, DataError};
use crate::distill::{distill_joint, distill_separate, train_teachers, LossRecord, TeacherRun, Teachers, TrainError, TrainMode, TrainState};
use crate::evalkit::{benchmark_system, build_report, evaluate_system, EvalError, EvalReport, System};
use crate::nets::{checkpoint_digest, load_checkpoint, Model, NetError};
use crate::turbsim::{generate_samples, SimError};

pub const TEACHER_RESTORER_FILE: &str = "teacher_restorer.ckpt";
pub const TEACHER_DETECTOR_FILE: &str = "teacher_detector.ckpt";
pub const STUDENT_RESTORER_FILE: &str = "student_restorer.ckpt";
pub const STUDENT_DETECTOR_FILE: &str = "student_detector.ckpt";
pub const TRAIN_SPLIT: &str = "train";
pub const VAL_SPLIT: &str = "val";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing {what}: expected {path}")]
    Missing { what: String, path: PathBuf },
    #[error("teacher '{name}' changed during distillation ({before} -> {after})")]
    TeacherMutated { name: String, before: String, after: String },
}

/// Train and held-out splits, both derived from `master_seed`.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Vec<AnnotatedSample>, Vec<AnnotatedSample>), PipelineError> {
    let scene = cfg.data.scene();
    let sim = cfg.sim.params();
    let train = generate_samples(&scene, &sim, cfg.master_seed, cfg.data.train_indices())?;
    let val = generate_samples(&scene, &sim, cfg.master_seed, cfg.data.val_indices())?;
    Ok((train, val))
}

pub fn write_splits(train: &[AnnotatedSample], val: &[AnnotatedSample], root: &Path) -> Result<(), PipelineError> {
    save_dataset(train, &root.join(TRAIN_SPLIT))?;
    save_dataset(val, &root.join(VAL_SPLIT))?;
    Ok(())
}

pub fn load_split(root: &Path, split: &str) -> Result<Vec<AnnotatedSample>, PipelineError> {
    let dir = root.join(split);
    if !dir.is_dir() {
        return Err(PipelineError::Missing {
            what: format!("{split} split (run gen-data first)"),
            path: dir,
        });
    }
    Ok(load_dataset(&dir)?)
}

pub fn train_teacher_pair(cfg: &RunConfig, train: &[AnnotatedSample], sink: &mut dyn FnMut(&LossRecord)) -> Result<TeacherRun, PipelineError> {
    let specs = cfg.model_specs();
    Ok(train_teachers(
        train,
        specs.teachers(),
        (&cfg.train.teacher_restorer, &cfg.train.teacher_detector),
        &cfg.losses,
        sink,
    )?)
}

/// Runs the configured distillation engine and verifies that neither
/// teacher changed.
pub fn distill(
    cfg: &RunConfig,
    mode: TrainMode,
    train: &[AnnotatedSample],
    teachers: Teachers<'_>,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<TrainState, PipelineError> {
    let before = [checkpoint_digest(teachers.restorer), checkpoint_digest(teachers.detector)];
    let specs = cfg.model_specs();
    let tcfg = crate::distill::TrainConfig {
        mode,
        ..cfg.train.student.clone()
    };
    let state = match mode {
        TrainMode::Separate => distill_separate(train, teachers, specs.students(), &cfg.losses, &tcfg, sink)?,
        _ => distill_joint(train, teachers, specs.students(), &cfg.losses, &tcfg, sink)?,
    };
    let after = [checkpoint_digest(teachers.restorer), checkpoint_digest(teachers.detector)];
    for ((name, b), a) in ["restorer", "detector"].iter().zip(before).zip(after) {
        if b != a {
            return Err(PipelineError::TeacherMutated {
                name: name.to_string(),
                before: b,
                after: a,
            });
        }
    }
    Ok(state)
}

/// An owned restorer/detector pairing; both `None` is the distorted baseline.
#[derive(Debug, Clone)]
pub struct NamedSystem {
    pub name: String,
    pub restorer: Option<Model>,
    pub detector: Option<Model>,
}

impl NamedSystem {
    pub fn distorted() -> Self {
        Self {
            name: "distorted".into(),
            restorer: None,
            detector: None,
        }
    }

    fn view(&self) -> System<'_> {
        System {
            name: &self.name,
            restorer: self.restorer.as_ref(),
            detector: self.detector.as_ref(),
        }
    }

    /// Loads `teacher_*` or `student_*` checkpoints from a run directory.
    pub fn from_run_dir(name: &str, dir: &Path) -> Result<Self, PipelineError> {
        let pair = |r: &str, d: &str| (dir.join(r), dir.join(d));
        let (r, d) = if dir.join(TEACHER_RESTORER_FILE).exists() {
            pair(TEACHER_RESTORER_FILE, TEACHER_DETECTOR_FILE)
        } else {
            pair(STUDENT_RESTORER_FILE, STUDENT_DETECTOR_FILE)
        };
        Ok(Self {
            name: name.to_string(),
            restorer: Some(load_model(&r, "restorer checkpoint")?),
            detector: Some(load_model(&d, "detector checkpoint")?),
        })
    }
}

pub fn load_model(path: &Path, what: &str) -> Result<Model, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Missing {
            what: what.to_string(),
            path: path.to_path_buf(),
        });
    }
    Ok(load_checkpoint(path)?)
}

/// Scores every system on `val`. Metadata holds the resolved config and
/// model digests, nothing time- or path-dependent, so reruns are identical.
pub fn evaluate_systems(cfg: &RunConfig, val: &[AnnotatedSample], systems: &[NamedSystem]) -> Result<EvalReport, PipelineError> {
    let mut rows = Vec::with_capacity(systems.len());
    let mut digests = BTreeMap::new();
    for s in systems {
        rows.push(evaluate_system(&s.view(), val, cfg.data.num_classes)?);
        let d = |m: &Option<Model>| m.as_ref().map(checkpoint_digest);
        digests.insert(s.name.clone(), json!({ "restorer": d(&s.restorer), "detector": d(&s.detector) }));
    }
    let metadata = json!({
        "config": serde_json::to_value(cfg.resolved()).expect("config serialises"),
        "master_seed": cfg.master_seed,
        "student_seed": cfg.train.student.seed,
        "models": digests,
    });
    Ok(build_report(rows, metadata)?)
}

/// Median latency per stage of each system, on the configured canvas.
pub fn bench_systems(cfg: &RunConfig, systems: &[NamedSystem]) -> Result<BTreeMap<String, BTreeMap<String, f64>>, PipelineError> {
    let input = (cfg.data.height, cfg.data.width);
    let mut out = BTreeMap::new();
    for s in systems {
        let l = benchmark_system(&s.view(), input, cfg.eval.latency_warmup, cfg.eval.latency_runs)?;
        out.insert(s.name.clone(), l);
    }
    Ok(out)
}
