//! Training engine: teacher pretraining, joint distillation and the
//! two-phase separate-distillation baseline.
//!
//! One optimizer step consumes `batch_size · grad_accum_steps` samples; a
//! sample is one sequence with one centre frame drawn per epoch. Gradients
//! are averaged over the samples of a step.

use std::collections::{BTreeMap, HashMap};

use jdatt_autograd::{AdamW, AdamWConfig, Bound, Grads, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::AnnotatedSample;
use crate::losses::{
    assign_center_cells, charbonnier_graph, cwd_graph, detection_graph, kl_graph, mgd_graph, spatial_mask, Aligner, DistillConfig,
    Generator, KlCells, LossError,
};
use crate::nets::{build_model, ModelKind, ModelSpec, Model, NetError};
use crate::turbsim::derive_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data is empty")]
    EmptyData,
    #[error("non-finite loss at step {step}: {components:?}")]
    Divergence {
        step: usize,
        components: BTreeMap<String, f64>,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Joint,
    Separate,
    TeacherRestoration,
    TeacherDetector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_base: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr_base: 1.5e-4,
            warmup_epochs: 10,
            weight_decay: 0.01,
            batch_size: 1,
            grad_accum_steps: 4,
            seed: 0,
            mode: TrainMode::Joint,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is accepted and performs no steps.
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be < epochs");
        }
        if !(self.lr_base.is_finite() && self.lr_base > 0.0) {
            return bad("lr_base must be finite and > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and >= 0");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be >= 1");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size * self.grad_accum_steps)
    }

    pub fn total_steps(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

/// Linear warm-up over `warmup_steps` reaching `base` on the last warm-up
/// step, then cosine decay reaching exactly 0 on step `total_steps − 1`.
pub fn warmup_cosine(step: usize, warmup_steps: usize, total_steps: usize, base: f64) -> f64 {
    if step < warmup_steps {
        return base * (step + 1) as f64 / warmup_steps as f64;
    }
    let anchor = warmup_steps.max(1) - 1;
    let span = total_steps.saturating_sub(1).saturating_sub(anchor);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - anchor) as f64 / span as f64).min(1.0)
    };
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

pub fn schedule_lr(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    warmup_cosine(
        step,
        cfg.warmup_epochs * steps_per_epoch,
        cfg.epochs * steps_per_epoch,
        cfg.lr_base,
    )
}

/// Which engine produced a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Teacher,
    Joint,
    Restoration,
    Detection,
}

/// One optimizer step. Components are unweighted means over the step's
/// samples; `loss_total` is the weighted objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_components: BTreeMap<String, f64>,
}

/// Aligner and generator of one distilled tap.
#[derive(Debug, Clone)]
pub struct TapAdapter {
    pub tag: String,
    pub kind: ModelKind,
    pub aligner: Aligner,
    pub generator: Generator,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub lr_current: f64,
    pub loss_history: Vec<LossRecord>,
    pub restorer: Model,
    pub detector: Model,
    pub adapters: Vec<TapAdapter>,
}

/// Trained teachers plus their loss histories.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub restorer: Model,
    pub detector: Model,
    pub restorer_history: Vec<LossRecord>,
    pub detector_history: Vec<LossRecord>,
}

/// Frozen teachers used during distillation.
#[derive(Debug, Clone, Copy)]
pub struct Teachers<'a> {
    pub restorer: &'a Model,
    pub detector: &'a Model,
}

/// A trainable parameter group with its optimizer and pending gradients.
struct Group {
    opt: AdamW,
    acc: Vec<Tensor>,
    touched: bool,
}

impl Group {
    fn new(store: &ParamStore, weight_decay: f64) -> Self {
        Self {
            opt: AdamW::new(
                store,
                AdamWConfig {
                    weight_decay,
                    ..AdamWConfig::default()
                },
            ),
            acc: store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
            touched: false,
        }
    }

    /// Adds this sample's gradients; unreached parameters contribute nothing.
    fn absorb(&mut self, grads: &Grads, vars: &[Var]) {
        for (acc, &v) in self.acc.iter_mut().zip(vars) {
            if let Some(d) = grads.get(v) {
                acc.add_assign(d);
                self.touched = true;
            }
        }
    }

    /// Steps with the averaged gradient if any sample reached this group.
    fn step(&mut self, store: &mut ParamStore, samples: usize, lr: f64) {
        if self.touched {
            for a in &mut self.acc {
                a.scale_assign(1.0 / samples as f64);
            }
            self.opt.step(store, &self.acc, lr);
        }
        for a in &mut self.acc {
            a.data_mut().fill(0.0);
        }
        self.touched = false;
    }
}

/// Deterministic sample order: `(sequence index, centre frame)` per epoch.
fn epoch_order(seed: u64, epoch: usize, data: &[AnnotatedSample]) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x0e90_c4a1, epoch as u64));
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    idx.into_iter()
        .map(|i| (i, rng.random_range(0..data[i].degraded.len())))
        .collect()
}

/// Iterates optimizer steps as chunks of samples across epochs.
struct Schedule {
    per_step: usize,
    steps_per_epoch: usize,
    seed: u64,
}

impl Schedule {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            per_step: cfg.batch_size * cfg.grad_accum_steps,
            steps_per_epoch: cfg.steps_per_epoch(n),
            seed: cfg.seed,
        }
    }

    /// Samples of global step `step` and its epoch.
    fn samples(&self, data: &[AnnotatedSample], cache: &mut Option<(usize, Vec<(usize, usize)>)>, step: usize) -> (usize, Vec<(usize, usize)>) {
        let epoch = step / self.steps_per_epoch;
        let within = step % self.steps_per_epoch;
        if cache.as_ref().map(|c| c.0) != Some(epoch) {
            *cache = Some((epoch, epoch_order(self.seed, epoch, data)));
        }
        let order = &cache.as_ref().expect("filled").1;
        let lo = within * self.per_step;
        let hi = (lo + self.per_step).min(order.len());
        (epoch, order[lo..hi].to_vec())
    }
}

fn check_finite(step: usize, total: f64, comps: &BTreeMap<String, f64>) -> Result<(), TrainError> {
    if total.is_finite() && comps.values().all(|v| v.is_finite()) {
        Ok(())
    } else {
        let mut components = comps.clone();
        components.insert("total".into(), total);
        Err(TrainError::Divergence { step, components })
    }
}

fn mean_components(sum: BTreeMap<String, f64>, n: usize) -> BTreeMap<String, f64> {
    sum.into_iter().map(|(k, v)| (k, v / n as f64)).collect()
}

fn validate_data(data: &[AnnotatedSample]) -> Result<(), TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    Ok(())
}

/// Trains a restorer on Charbonnier reconstruction alone.
pub fn train_restorer(
    mut model: Model,
    data: &[AnnotatedSample],
    cfg: &TrainConfig,
    epsilon: f64,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<(Model, Vec<LossRecord>), TrainError> {
    cfg.validate()?;
    validate_data(data)?;
    let sched = Schedule::new(cfg, data.len());
    let mut group = Group::new(&model.params, cfg.weight_decay);
    let mut history = Vec::new();
    let mut order = None;
    for step in 0..cfg.total_steps(data.len()) {
        let (epoch, batch) = sched.samples(data, &mut order, step);
        let mut total = 0.0;
        for &(i, t) in &batch {
            let s = &data[i];
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let x = g.constant(s.degraded.window_chw(t, model.spec.window));
            let nodes = model.restoration_graph(&mut g, bound.vars(), x)?;
            let clean = g.constant(s.clean.frame_chw(t));
            let loss = charbonnier_graph(&mut g, nodes.output, clean, epsilon);
            total += g.value(loss).item();
            let grads = g.backward(loss);
            group.absorb(&grads, bound.vars());
        }
        let lr = schedule_lr(step, sched.steps_per_epoch, cfg);
        let total = total / batch.len() as f64;
        let comps = BTreeMap::from([("reconstruction".to_string(), total)]);
        check_finite(step, total, &comps)?;
        group.step(&mut model.params, batch.len(), lr);
        let rec = LossRecord {
            step,
            epoch,
            phase: Phase::Teacher,
            lr,
            loss_total: total,
            loss_components: comps,
        };
        sink(&rec);
        history.push(rec);
    }
    Ok((model, history))
}

/// Trains a detector on clean frames with the detection composite.
pub fn train_detector(
    mut model: Model,
    data: &[AnnotatedSample],
    cfg: &TrainConfig,
    dcfg: &DistillConfig,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<(Model, Vec<LossRecord>), TrainError> {
    cfg.validate()?;
    validate_data(data)?;
    let sched = Schedule::new(cfg, data.len());
    let mut group = Group::new(&model.params, cfg.weight_decay);
    let mut history = Vec::new();
    let mut order = None;
    for step in 0..cfg.total_steps(data.len()) {
        let (epoch, batch) = sched.samples(data, &mut order, step);
        let mut total = 0.0;
        for &(i, t) in &batch {
            let s = &data[i];
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, true);
            let x = g.constant(s.clean.frame_chw(t));
            let nodes = model.detector_graph(&mut g, bound.vars(), x)?;
            let terms = detection_graph(&mut g, nodes.logits, nodes.boxes, nodes.grid, &s.ground_truth[t], &dcfg.detection)?;
            total += g.value(terms.total).item();
            let grads = g.backward(terms.total);
            group.absorb(&grads, bound.vars());
        }
        let lr = schedule_lr(step, sched.steps_per_epoch, cfg);
        let total = total / batch.len() as f64;
        let comps = BTreeMap::from([("detection".to_string(), total)]);
        check_finite(step, total, &comps)?;
        group.step(&mut model.params, batch.len(), lr);
        let rec = LossRecord {
            step,
            epoch,
            phase: Phase::Teacher,
            lr,
            loss_total: total,
            loss_components: comps,
        };
        sink(&rec);
        history.push(rec);
    }
    Ok((model, history))
}

/// Builds and trains both teachers; each has its own schedule and seed.
pub fn train_teachers(
    data: &[AnnotatedSample],
    specs: (&ModelSpec, &ModelSpec),
    cfgs: (&TrainConfig, &TrainConfig),
    dcfg: &DistillConfig,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<TeacherRun, TrainError> {
    let restorer = build_model(specs.0, derive_seed(cfgs.0.seed, 11))?;
    let detector = build_model(specs.1, derive_seed(cfgs.1.seed, 12))?;
    let r_cfg = TrainConfig {
        mode: TrainMode::TeacherRestoration,
        ..cfgs.0.clone()
    };
    let d_cfg = TrainConfig {
        mode: TrainMode::TeacherDetector,
        ..cfgs.1.clone()
    };
    let (restorer, restorer_history) = train_restorer(restorer, data, &r_cfg, dcfg.epsilon, sink)?;
    let (detector, detector_history) = train_detector(detector, data, &d_cfg, dcfg, sink)?;
    Ok(TeacherRun {
        restorer,
        detector,
        restorer_history,
        detector_history,
    })
}

/// Which losses and students take part in a distillation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Both students, all losses, one backward pass.
    Joint,
    /// Restoration student alone: reconstruction plus its feature taps.
    Restoration,
    /// Detection student on the frozen restorer's output.
    Detection,
}

/// Teacher signals of one `(sequence, frame)` pair.
#[derive(Debug, Clone)]
struct TeacherSignals {
    taps: HashMap<&'static str, Tensor>,
    logits: Tensor,
}

/// Gradients of one sample, per parameter, zero where unreached.
#[derive(Debug, Clone)]
pub struct SampleGrads {
    pub restorer: Vec<Tensor>,
    pub detector: Vec<Tensor>,
    pub loss: f64,
}

/// A distillation run in progress: students, adapters, teachers, data.
pub struct Distiller<'a> {
    data: &'a [AnnotatedSample],
    teachers: Teachers<'a>,
    dcfg: DistillConfig,
    tcfg: TrainConfig,
    pub restorer: Model,
    pub detector: Model,
    pub adapters: Vec<TapAdapter>,
    cache: HashMap<(usize, usize), TeacherSignals>,
    samples_seen: u64,
}

impl<'a> Distiller<'a> {
    pub fn new(
        data: &'a [AnnotatedSample],
        teachers: Teachers<'a>,
        restorer: Model,
        detector: Model,
        dcfg: &DistillConfig,
        tcfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        dcfg.validate()?;
        tcfg.validate()?;
        validate_data(data)?;
        let [_, h, w, _] = data[0].degraded.dims();
        let mut adapters = Vec::new();
        for (k, tag) in dcfg.tap_tags.iter().enumerate() {
            let (student, teacher) = if restorer.spec.tap_tags().contains(&tag.as_str()) {
                (&restorer, teachers.restorer)
            } else if detector.spec.tap_tags().contains(&tag.as_str()) {
                (&detector, teachers.detector)
            } else {
                return Err(NetError::UnknownTap(tag.clone()).into());
            };
            let dims = |m: &Model| {
                m.spec
                    .tap_dims(h, w)
                    .into_iter()
                    .find(|(t, _)| *t == tag.as_str())
                    .map(|(_, d)| d)
                    .expect("tag belongs to model")
            };
            let (s_dims, t_dims) = (dims(student), dims(teacher));
            let seed = derive_seed(tcfg.seed, 100 + k as u64);
            adapters.push(TapAdapter {
                tag: tag.clone(),
                kind: student.spec.kind,
                aligner: Aligner::new(s_dims[0], t_dims, seed),
                generator: Generator::new(dcfg.generator, t_dims[0], derive_seed(seed, 1)),
            });
        }
        Ok(Self {
            data,
            teachers,
            dcfg: dcfg.clone(),
            tcfg: tcfg.clone(),
            restorer,
            detector,
            adapters,
            cache: HashMap::new(),
            samples_seen: 0,
        })
    }

    fn teacher_signals(&mut self, i: usize, t: usize) -> Result<&TeacherSignals, TrainError> {
        if !self.cache.contains_key(&(i, t)) {
            let s = &self.data[i];
            let mut g = Graph::new();
            let rb = self.teachers.restorer.params.bind(&mut g, false);
            let db = self.teachers.detector.params.bind(&mut g, false);
            let x = g.constant(s.degraded.window_chw(t, self.teachers.restorer.spec.window));
            let r = self.teachers.restorer.restoration_graph(&mut g, rb.vars(), x)?;
            let d = self.teachers.detector.detector_graph(&mut g, db.vars(), r.output)?;
            let wanted: Vec<&str> = self.dcfg.tap_tags.iter().map(String::as_str).collect();
            let taps = r
                .taps
                .iter()
                .chain(&d.taps)
                .filter(|(tag, _)| wanted.contains(tag))
                .map(|&(tag, v)| (tag, g.value(v).clone()))
                .collect();
            let sig = TeacherSignals {
                taps,
                logits: g.value(d.logits).clone(),
            };
            self.cache.insert((i, t), sig);
        }
        Ok(&self.cache[&(i, t)])
    }

    /// Builds one sample's objective, backpropagates it and returns the
    /// weighted loss, the component values and the gradients per group.
    #[allow(clippy::type_complexity)]
    fn sample(
        &mut self,
        i: usize,
        t: usize,
        stage: Stage,
    ) -> Result<(f64, BTreeMap<String, f64>, Graph, Grads, Vec<Bound>), TrainError> {
        let mask_base = derive_seed(self.tcfg.seed ^ 0x6d67_6400, self.samples_seen);
        self.samples_seen += 1;
        let sig = self.teacher_signals(i, t)?.clone();
        let s = &self.data[i];
        let w = self.dcfg.loss_weights;
        let mut g = Graph::new();
        let rb = self.restorer.params.bind(&mut g, stage != Stage::Detection);
        let db = self.detector.params.bind(&mut g, stage != Stage::Restoration);
        let ab: Vec<Bound> = self
            .adapters
            .iter()
            .map(|a| {
                let live = match stage {
                    Stage::Joint => true,
                    Stage::Restoration => a.kind == ModelKind::Restoration,
                    Stage::Detection => a.kind == ModelKind::Detector,
                };
                let mut p = a.aligner.params.clone();
                for (_, t) in a.generator.params.iter() {
                    p.add(format!("gen{}", p.len()), t.clone());
                }
                p.bind(&mut g, live)
            })
            .collect();

        let x = g.constant(s.degraded.window_chw(t, self.restorer.spec.window));
        let r = self.restorer.restoration_graph(&mut g, rb.vars(), x)?;
        let mut taps: Vec<(&'static str, Var)> = r.taps.clone();
        let mut terms: Vec<(&'static str, f64, Var)> = Vec::new();
        if stage != Stage::Detection && w.reconstruction > 0.0 {
            let clean = g.constant(s.clean.frame_chw(t));
            let l = charbonnier_graph(&mut g, r.output, clean, self.dcfg.epsilon);
            terms.push(("reconstruction", w.reconstruction, l));
        }
        if stage != Stage::Restoration {
            let input = if stage == Stage::Detection {
                g.detach(r.output)
            } else {
                r.output
            };
            let d = self.detector.detector_graph(&mut g, db.vars(), input)?;
            taps.extend(d.taps.iter().copied());
            let gt = &s.ground_truth[t];
            if w.detection > 0.0 {
                let dt = detection_graph(&mut g, d.logits, d.boxes, d.grid, gt, &self.dcfg.detection)?;
                terms.push(("detection", w.detection, dt.total));
            }
            if w.kl > 0.0 {
                let pair = match self.dcfg.kl_cells {
                    KlCells::All => Some((g.constant(sig.logits.clone()), d.logits)),
                    KlCells::Positives => {
                        let k = g.shape(d.logits)[1];
                        let a = assign_center_cells(gt, d.grid, k)?;
                        let rows: Vec<usize> = a.positives.iter().map(|p| p.cell).collect();
                        (!rows.is_empty()).then(|| {
                            let tl = g.constant(sig.logits.clone());
                            (g.index_select(tl, &rows), g.index_select(d.logits, &rows))
                        })
                    }
                };
                if let Some((tl, sl)) = pair {
                    let l = kl_graph(&mut g, tl, sl, self.dcfg.tau_kl);
                    terms.push(("kl", w.kl, l));
                }
            }
        }
        let mut cwd_sum: Option<Var> = None;
        let mut mgd_sum: Option<Var> = None;
        for (k, (a, bound)) in self.adapters.iter().zip(&ab).enumerate() {
            let active = match stage {
                Stage::Joint => true,
                Stage::Restoration => a.kind == ModelKind::Restoration,
                Stage::Detection => a.kind == ModelKind::Detector,
            };
            if !active || (w.cwd == 0.0 && w.mgd == 0.0) {
                continue;
            }
            let sv = taps.iter().find(|(tag, _)| *tag == a.tag).expect("tap exists").1;
            let tv = g.constant(sig.taps[a.tag.as_str()].clone());
            let na = a.aligner.params.len();
            let aligned = a.aligner.apply(&mut g, &bound.vars()[..na], sv);
            if w.cwd > 0.0 {
                let l = cwd_graph(&mut g, aligned, tv, self.dcfg.tau_cwd);
                cwd_sum = Some(match cwd_sum {
                    Some(acc) => g.add(acc, l),
                    None => l,
                });
            }
            if w.mgd > 0.0 {
                let [_, th, tw] = a.aligner.target();
                let mask = spatial_mask(derive_seed(mask_base, k as u64), th, tw, self.dcfg.mask_ratio);
                let l = mgd_graph(&mut g, aligned, tv, &mask, &a.generator, &bound.vars()[na..]);
                mgd_sum = Some(match mgd_sum {
                    Some(acc) => g.add(acc, l),
                    None => l,
                });
            }
        }
        if let Some(l) = cwd_sum {
            terms.push(("cwd", w.cwd, l));
        }
        if let Some(l) = mgd_sum {
            terms.push(("mgd", w.mgd, l));
        }
        if terms.is_empty() {
            return Err(TrainError::Config(format!("no active loss term in stage {stage:?}")));
        }
        let mut comps = BTreeMap::new();
        let mut total: Option<Var> = None;
        for (name, weight, v) in terms {
            comps.insert(name.to_string(), g.value(v).item());
            let wv = g.scale(v, weight);
            total = Some(match total {
                Some(acc) => g.add(acc, wv),
                None => wv,
            });
        }
        let total = total.expect("non-empty");
        let value = g.value(total).item();
        let grads = g.backward(total);
        let mut bounds = vec![rb, db];
        bounds.extend(ab);
        Ok((value, comps, g, grads, bounds))
    }

    /// Gradients of one sample without touching any parameter.
    pub fn sample_gradients(&mut self, i: usize, t: usize, stage: Stage) -> Result<SampleGrads, TrainError> {
        let (loss, _, g, grads, bounds) = self.sample(i, t, stage)?;
        Ok(SampleGrads {
            restorer: bounds[0].grads(&g, &grads),
            detector: bounds[1].grads(&g, &grads),
            loss,
        })
    }

    /// Runs `steps` optimizer steps of `stage`, starting at global step
    /// `first_step`, with a schedule spanning exactly those steps.
    fn run_stage(
        &mut self,
        stage: Stage,
        first_step: usize,
        steps: usize,
        warmup_steps: usize,
        history: &mut Vec<LossRecord>,
        sink: &mut dyn FnMut(&LossRecord),
    ) -> Result<f64, TrainError> {
        let sched = Schedule::new(&self.tcfg, self.data.len());
        let wd = self.tcfg.weight_decay;
        let mut rg = Group::new(&self.restorer.params, wd);
        let mut dg = Group::new(&self.detector.params, wd);
        let mut ag: Vec<(Group, Group)> = self
            .adapters
            .iter()
            .map(|a| (Group::new(&a.aligner.params, wd), Group::new(&a.generator.params, wd)))
            .collect();
        let phase = match stage {
            Stage::Joint => Phase::Joint,
            Stage::Restoration => Phase::Restoration,
            Stage::Detection => Phase::Detection,
        };
        let mut order = None;
        let mut lr = 0.0;
        for local in 0..steps {
            let step = first_step + local;
            let (epoch, batch) = sched.samples(self.data, &mut order, step);
            let mut total = 0.0;
            let mut comps = BTreeMap::new();
            for &(i, t) in &batch {
                let (v, c, g, grads, bounds) = self.sample(i, t, stage)?;
                total += v;
                for (k, x) in c {
                    *comps.entry(k).or_insert(0.0) += x;
                }
                rg.absorb(&grads, bounds[0].vars());
                dg.absorb(&grads, bounds[1].vars());
                for ((a, gen), b) in ag.iter_mut().zip(&bounds[2..]) {
                    // aligner parameters come first, generator parameters after
                    let (av, gv) = b.vars().split_at(a.acc.len());
                    a.absorb(&grads, av);
                    gen.absorb(&grads, gv);
                }
                drop(g);
            }
            let n = batch.len();
            let total = total / n as f64;
            let comps = mean_components(comps, n);
            check_finite(step, total, &comps)?;
            lr = warmup_cosine(local, warmup_steps, steps, self.tcfg.lr_base);
            rg.step(&mut self.restorer.params, n, lr);
            dg.step(&mut self.detector.params, n, lr);
            for ((a, gen), ad) in ag.iter_mut().zip(&mut self.adapters) {
                a.step(&mut ad.aligner.params, n, lr);
                gen.step(&mut ad.generator.params, n, lr);
            }
            let rec = LossRecord {
                step,
                epoch,
                phase,
                lr,
                loss_total: total,
                loss_components: comps,
            };
            sink(&rec);
            history.push(rec);
        }
        Ok(lr)
    }

    fn into_state(self, history: Vec<LossRecord>, lr: f64) -> TrainState {
        let steps_per_epoch = self.tcfg.steps_per_epoch(self.data.len());
        let step = history.len();
        TrainState {
            step,
            epoch: step.div_ceil(steps_per_epoch.max(1)),
            lr_current: lr,
            loss_history: history,
            restorer: self.restorer,
            detector: self.detector,
            adapters: self.adapters,
        }
    }

    /// Joint distillation over the configured budget.
    pub fn run_joint(mut self, sink: &mut dyn FnMut(&LossRecord)) -> Result<TrainState, TrainError> {
        let n = self.data.len();
        let spe = self.tcfg.steps_per_epoch(n);
        let total = self.tcfg.total_steps(n);
        let mut history = Vec::with_capacity(total);
        let lr = self.run_stage(Stage::Joint, 0, total, self.tcfg.warmup_epochs * spe, &mut history, sink)?;
        Ok(self.into_state(history, lr))
    }

    /// Restoration phase on the first half of the budget, detection phase
    /// on the rest; each phase has its own warm-up and cosine schedule.
    pub fn run_separate(mut self, sink: &mut dyn FnMut(&LossRecord)) -> Result<TrainState, TrainError> {
        let n = self.data.len();
        let spe = self.tcfg.steps_per_epoch(n);
        let total = self.tcfg.total_steps(n);
        let first = total / 2;
        let warm = self.tcfg.warmup_epochs * spe;
        let mut history = Vec::with_capacity(total);
        self.run_stage(Stage::Restoration, 0, first, warm / 2, &mut history, sink)?;
        let lr = self.run_stage(Stage::Detection, first, total - first, warm - warm / 2, &mut history, sink)?;
        Ok(self.into_state(history, lr))
    }
}

/// Fresh students seeded from the training seed.
pub fn build_students(specs: (&ModelSpec, &ModelSpec), seed: u64) -> Result<(Model, Model), TrainError> {
    Ok((
        build_model(specs.0, derive_seed(seed, 21))?,
        build_model(specs.1, derive_seed(seed, 22))?,
    ))
}

pub fn distill_joint(
    data: &[AnnotatedSample],
    teachers: Teachers<'_>,
    student_specs: (&ModelSpec, &ModelSpec),
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<TrainState, TrainError> {
    let (r, d) = build_students(student_specs, tcfg.seed)?;
    Distiller::new(data, teachers, r, d, dcfg, tcfg)?.run_joint(sink)
}

pub fn distill_separate(
    data: &[AnnotatedSample],
    teachers: Teachers<'_>,
    student_specs: (&ModelSpec, &ModelSpec),
    dcfg: &DistillConfig,
    tcfg: &TrainConfig,
    sink: &mut dyn FnMut(&LossRecord),
) -> Result<TrainState, TrainError> {
    let (r, d) = build_students(student_specs, tcfg.seed)?;
    Distiller::new(data, teachers, r, d, dcfg, tcfg)?.run_separate(sink)
}
