//! Loss families: Charbonnier reconstruction, the detection composite
//! (L1 boxes, GIoU, IoU-aware focal labels), channel-wise distillation,
//! masked generative distillation and temperature-scaled KL on logits.
//!
//! Every loss exists twice: a graph builder used during training and a
//! value-level wrapper over plain data used by tests and evaluation.

use jdatt_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BBox, DetectionSet, FeatureMap, LogitSet};
use crate::nets::{init_conv, ConvLayer, TAP_BACKBONE, TAP_ENHANCEMENT, TAP_HEAD, TAP_REGISTRATION};

/// Probability clamp used inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("degenerate box at index {index}: w and h must be > 0")]
    DegenerateBox { index: usize },
    #[error("label loss needs at least one cell")]
    EmptyAssignment,
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionLossConfig {
    /// Focal exponent on negatives.
    pub gamma: f64,
    /// Mixing exponent of the soft target `p^α · IoU^(1−α)`.
    pub alpha: f64,
    pub w_boxes: f64,
    pub w_giou: f64,
    pub w_labels: f64,
}

impl Default for DetectionLossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            w_boxes: 5.0,
            w_giou: 2.0,
            w_labels: 1.0,
        }
    }
}

impl DetectionLossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::Config("gamma must be finite and >= 0".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(LossError::Config("alpha must lie in (0, 1)".into()));
        }
        for (n, w) in [("w_boxes", self.w_boxes), ("w_giou", self.w_giou), ("w_labels", self.w_labels)] {
            if !(w.is_finite() && w > 0.0) {
                return Err(LossError::Config(format!("{n} must be finite and > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub detection: f64,
    pub cwd: f64,
    pub mgd: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            detection: 1.0,
            cwd: 1.0,
            mgd: 1e-5,
            kl: 1.0,
        }
    }
}

impl LossWeights {
    pub fn only_reconstruction() -> Self {
        Self {
            reconstruction: 1.0,
            detection: 0.0,
            cwd: 0.0,
            mgd: 0.0,
            kl: 0.0,
        }
    }

    fn entries(&self) -> [(&'static str, f64); 5] {
        [
            ("reconstruction", self.reconstruction),
            ("detection", self.detection),
            ("cwd", self.cwd),
            ("mgd", self.mgd),
            ("kl", self.kl),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Identity,
    Conv,
}

/// Which cells enter the KL output term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlCells {
    All,
    Positives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub tau_kl: f64,
    pub tau_cwd: f64,
    /// Fraction of spatial positions zeroed by the generative mask.
    pub mask_ratio: f64,
    /// Feature taps distilled; empty disables feature terms.
    pub tap_tags: Vec<String>,
    pub loss_weights: LossWeights,
    /// Charbonnier smoothing constant.
    pub epsilon: f64,
    pub generator: GeneratorKind,
    pub kl_cells: KlCells,
    pub detection: DetectionLossConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau_kl: 2.0,
            tau_cwd: 1.0,
            mask_ratio: 0.5,
            tap_tags: [TAP_REGISTRATION, TAP_ENHANCEMENT, TAP_BACKBONE, TAP_HEAD]
                .map(String::from)
                .to_vec(),
            loss_weights: LossWeights::default(),
            epsilon: 1e-3,
            generator: GeneratorKind::Conv,
            kl_cells: KlCells::All,
            detection: DetectionLossConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::Config(m));
        for (n, t) in [("tau_kl", self.tau_kl), ("tau_cwd", self.tau_cwd), ("epsilon", self.epsilon)] {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("{n} must be finite and > 0"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad("mask_ratio must lie in [0, 1)".into());
        }
        let entries = self.loss_weights.entries();
        if let Some((n, _)) = entries.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return bad(format!("loss weight {n} must be finite and >= 0"));
        }
        if entries.iter().all(|(_, w)| *w == 0.0) {
            return bad("at least one loss weight must be > 0".into());
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tap_tags {
            if t.is_empty() || !seen.insert(t) {
                return bad(format!("tap tag '{t}' is empty or repeated"));
            }
        }
        self.detection.validate()
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<(), LossError> {
    if a == b {
        Ok(())
    } else {
        Err(LossError::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

// ---------------------------------------------------------------- reconstruction

/// Mean of `√((x−y)² + ε²)`.
pub fn charbonnier_graph(g: &mut Graph, x: Var, y: Var, epsilon: f64) -> Var {
    let d = g.sub(x, y);
    let d2 = g.square(d);
    let s = g.add_scalar(d2, epsilon * epsilon);
    let r = g.sqrt(s);
    g.mean(r)
}

pub fn charbonnier(x: &Tensor, y: &Tensor, epsilon: f64) -> Result<f64, LossError> {
    same_shape("charbonnier", x.shape(), y.shape())?;
    if !(epsilon > 0.0) {
        return Err(LossError::Config("epsilon must be > 0".into()));
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let l = charbonnier_graph(&mut g, a, b, epsilon);
    Ok(g.value(l).item())
}

// ---------------------------------------------------------------- boxes

/// A mean over a possibly empty set; `count == 0` flags "no positives".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averaged {
    pub value: f64,
    pub count: usize,
}

impl Averaged {
    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

fn boxes_tensor(boxes: &[BBox]) -> Tensor {
    Tensor::new(&[boxes.len(), 4], boxes.iter().flat_map(|b| [b.cx, b.cy, b.w, b.h]).collect()).expect("n×4")
}

/// `(x1, y1, x2, y2)` columns of an `N×4` cxcywh block, each `N×1`.
fn corners_graph(g: &mut Graph, b: Var) -> [Var; 4] {
    let col = |g: &mut Graph, i| g.narrow(b, 1, i, 1);
    let (cx, cy, w, h) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    [g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)]
}

/// Mean of `1 − GIoU` over matched rows of two `P×4` cxcywh blocks.
pub fn giou_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let [px1, py1, px2, py2] = corners_graph(g, pred);
    let [tx1, ty1, tx2, ty2] = corners_graph(g, target);
    let n = g.shape(pred)[0];
    let zero = g.constant(Tensor::zeros(&[n, 1]));
    let span = |g: &mut Graph, lo1, lo2, hi1, hi2, inner: bool| {
        let (lo, hi) = if inner {
            (g.maximum(lo1, lo2), g.minimum(hi1, hi2))
        } else {
            (g.minimum(lo1, lo2), g.maximum(hi1, hi2))
        };
        let d = g.sub(hi, lo);
        if inner {
            g.maximum(d, zero)
        } else {
            d
        }
    };
    let iw = span(g, px1, tx1, px2, tx2, true);
    let ih = span(g, py1, ty1, py2, ty2, true);
    let inter = g.mul(iw, ih);
    let area = |g: &mut Graph, x1, y1, x2, y2| {
        let w = g.sub(x2, x1);
        let h = g.sub(y2, y1);
        g.mul(w, h)
    };
    let ap = area(g, px1, py1, px2, py2);
    let at = area(g, tx1, ty1, tx2, ty2);
    let sum = g.add(ap, at);
    let union = g.sub(sum, inter);
    let ew = span(g, px1, tx1, px2, tx2, false);
    let eh = span(g, py1, ty1, py2, ty2, false);
    let encl = g.mul(ew, eh);
    let iou = g.div(inter, union);
    let gap = g.sub(encl, union);
    let penalty = g.div(gap, encl);
    let giou = g.sub(iou, penalty);
    let neg = g.neg(giou);
    let loss = g.add_scalar(neg, 1.0);
    g.mean(loss)
}

fn check_boxes(boxes: &[BBox]) -> Result<(), LossError> {
    match boxes.iter().position(|b| !(b.w > 0.0 && b.h > 0.0)) {
        Some(index) => Err(LossError::DegenerateBox { index }),
        None => Ok(()),
    }
}

pub fn giou_loss(pred: &[BBox], target: &[BBox]) -> Result<Averaged, LossError> {
    same_shape("giou_loss", &[pred.len()], &[target.len()])?;
    check_boxes(pred)?;
    check_boxes(target)?;
    if pred.is_empty() {
        return Ok(Averaged { value: 0.0, count: 0 });
    }
    let mut g = Graph::new();
    let p = g.constant(boxes_tensor(pred));
    let t = g.constant(boxes_tensor(target));
    let l = giou_graph(&mut g, p, t);
    Ok(Averaged {
        value: g.value(l).item(),
        count: pred.len(),
    })
}

/// Mean absolute difference over all coordinates.
pub fn box_l1_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let a = g.abs(d);
    g.mean(a)
}

pub fn box_l1_loss(pred: &[BBox], target: &[BBox]) -> Result<Averaged, LossError> {
    same_shape("box_l1_loss", &[pred.len()], &[target.len()])?;
    if pred.is_empty() {
        return Ok(Averaged { value: 0.0, count: 0 });
    }
    let mut g = Graph::new();
    let p = g.constant(boxes_tensor(pred));
    let t = g.constant(boxes_tensor(target));
    let l = box_l1_graph(&mut g, p, t);
    Ok(Averaged {
        value: g.value(l).item(),
        count: pred.len(),
    })
}

// ---------------------------------------------------------------- labels

/// Positive `(cell, class, IoU)` triples over `num_cells` prediction cells;
/// every other cell is negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub num_cells: usize,
    pub positives: Vec<Positive>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub cell: usize,
    pub class: usize,
    /// Index into the ground-truth list.
    pub target: usize,
    pub iou: f64,
}

/// Centre-cell assignment; when two boxes share a cell the first wins.
/// IoUs are filled in later from predictions.
pub fn assign_center_cells(gt: &DetectionSet, grid: (usize, usize), num_classes: usize) -> Result<Assignment, LossError> {
    let (gh, gw) = grid;
    let mut taken = vec![false; gh * gw];
    let mut positives = Vec::new();
    for (k, (b, &label)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
        if label >= num_classes {
            return Err(LossError::Label {
                label,
                classes: num_classes,
            });
        }
        let col = ((b.cx * gw as f64).floor() as isize).clamp(0, gw as isize - 1) as usize;
        let row = ((b.cy * gh as f64).floor() as isize).clamp(0, gh as isize - 1) as usize;
        let cell = row * gw + col;
        if !taken[cell] {
            taken[cell] = true;
            positives.push(Positive {
                cell,
                class: label,
                target: k,
                iou: 0.0,
            });
        }
    }
    Ok(Assignment {
        num_cells: gh * gw,
        positives,
    })
}

/// IoU-aware focal label loss on `N×K` probabilities (already clamped).
///
/// Positives contribute `t·log p + (1−t)·log(1−p)` with the detached soft
/// target `t = p^α·IoU^(1−α)`; every other (cell, class) entry contributes
/// `p^γ·log(1−p)`. The sum is negated and divided by the cell count.
pub fn label_loss_graph(g: &mut Graph, probs: Var, assignment: &Assignment, cfg: &DetectionLossConfig) -> Var {
    let shape = g.shape(probs).to_vec();
    let (n, k) = (shape[0], shape[1]);
    let p_vals = g.value(probs).data().to_vec();
    let mut tpos = vec![0.0; n * k];
    let mut mpos = vec![0.0; n * k];
    for pos in &assignment.positives {
        let i = pos.cell * k + pos.class;
        let p = p_vals[i];
        tpos[i] = p.powf(cfg.alpha) * pos.iou.max(0.0).powf(1.0 - cfg.alpha);
        mpos[i] = 1.0;
    }
    let neg_mask: Vec<f64> = mpos.iter().map(|m| 1.0 - m).collect();
    let t = g.constant(Tensor::new(&shape, tpos.clone()).expect("n×k"));
    let one_minus_t = g.constant(Tensor::new(&shape, mpos.iter().zip(&tpos).map(|(m, t)| m - t).collect()).expect("n×k"));
    let nm = g.constant(Tensor::new(&shape, neg_mask).expect("n×k"));

    let log_p = g.log(probs);
    let q = {
        let np = g.neg(probs);
        g.add_scalar(np, 1.0)
    };
    let log_q = g.log(q);
    let a = g.mul(t, log_p);
    let b = g.mul(one_minus_t, log_q);
    let pos_term = g.add(a, b);
    let pg = g.powf(probs, cfg.gamma);
    let c = g.mul(pg, log_q);
    let neg_term = g.mul(nm, c);
    let all = g.add(pos_term, neg_term);
    let s = g.sum(all);
    g.scale(s, -1.0 / assignment.num_cells as f64)
}

/// Clamped sigmoid probabilities from logits.
pub fn class_probs_graph(g: &mut Graph, logits: Var) -> Var {
    let p = g.sigmoid(logits);
    g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub fn label_loss(probs: &Tensor, assignment: &Assignment, cfg: &DetectionLossConfig) -> Result<f64, LossError> {
    if probs.rank() != 2 {
        return Err(LossError::Shape(format!("probabilities must be N×K, got {:?}", probs.shape())));
    }
    if assignment.num_cells == 0 || probs.shape()[0] == 0 {
        return Err(LossError::EmptyAssignment);
    }
    same_shape("label_loss cells", &[probs.shape()[0]], &[assignment.num_cells])?;
    let k = probs.shape()[1];
    for pos in &assignment.positives {
        if pos.cell >= assignment.num_cells || pos.class >= k {
            return Err(LossError::Shape(format!("positive {pos:?} outside {}×{k}", assignment.num_cells)));
        }
    }
    let mut g = Graph::new();
    let p = g.constant(probs.map(|v| v.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)));
    let l = label_loss_graph(&mut g, p, assignment, cfg);
    Ok(g.value(l).item())
}

/// Detection composite terms of one frame.
#[derive(Debug, Clone, Copy)]
pub struct DetectionTerms {
    pub total: Var,
    pub labels: Var,
    /// Present only when the frame has positives.
    pub boxes: Option<Var>,
    pub giou: Option<Var>,
    pub positives: usize,
}

/// Centre-cell assignment, soft IoU targets and the weighted composite.
pub fn detection_graph(
    g: &mut Graph,
    logits: Var,
    boxes: Var,
    grid: (usize, usize),
    gt: &DetectionSet,
    cfg: &DetectionLossConfig,
) -> Result<DetectionTerms, LossError> {
    let k = g.shape(logits)[1];
    let mut assignment = assign_center_cells(gt, grid, k)?;
    let pred_vals = g.value(boxes).data().to_vec();
    for pos in &mut assignment.positives {
        let r = &pred_vals[pos.cell * 4..pos.cell * 4 + 4];
        pos.iou = BBox::new(r[0], r[1], r[2], r[3]).iou(&gt.boxes[pos.target]);
    }
    let probs = class_probs_graph(g, logits);
    let labels = label_loss_graph(g, probs, &assignment, cfg);
    let mut total = g.scale(labels, cfg.w_labels);
    let (mut l1, mut gi) = (None, None);
    if !assignment.positives.is_empty() {
        let rows: Vec<usize> = assignment.positives.iter().map(|p| p.cell).collect();
        let targets: Vec<BBox> = assignment.positives.iter().map(|p| gt.boxes[p.target]).collect();
        let pred = g.index_select(boxes, &rows);
        let tgt = g.constant(boxes_tensor(&targets));
        let b = box_l1_graph(g, pred, tgt);
        let gl = giou_graph(g, pred, tgt);
        let wb = g.scale(b, cfg.w_boxes);
        let wg = g.scale(gl, cfg.w_giou);
        total = g.add(total, wb);
        total = g.add(total, wg);
        l1 = Some(b);
        gi = Some(gl);
    }
    Ok(DetectionTerms {
        total,
        labels,
        boxes: l1,
        giou: gi,
        positives: assignment.positives.len(),
    })
}

// ---------------------------------------------------------------- distillation

/// `τ²/C · Σ_c KL(softmax(T_c/τ) ‖ softmax(S_c/τ))` with spatial softmaxes.
/// The teacher side is detached.
pub fn cwd_graph(g: &mut Graph, student: Var, teacher: Var, tau: f64) -> Var {
    let s = g.shape(student).to_vec();
    let c = s[0];
    let hw: usize = s[1..].iter().product();
    let t = g.detach(teacher);
    let kl = softmax_kl_rows(g, t, student, c, hw, tau);
    g.scale(kl, tau * tau / c as f64)
}

/// Sum over rows of `KL(softmax(t/τ) ‖ softmax(s/τ))` for `rows×n` blocks.
fn softmax_kl_rows(g: &mut Graph, teacher: Var, student: Var, rows: usize, n: usize, tau: f64) -> Var {
    let log_sm = |g: &mut Graph, v: Var| {
        let r = g.reshape(v, &[rows, n]);
        let sc = g.scale(r, 1.0 / tau);
        g.log_softmax(sc)
    };
    let lt = log_sm(g, teacher);
    let ls = log_sm(g, student);
    let pt = g.exp(lt);
    let d = g.sub(lt, ls);
    let prod = g.mul(pt, d);
    g.sum(prod)
}

pub fn cwd_loss(student: &FeatureMap, teacher: &FeatureMap, tau: f64) -> Result<f64, LossError> {
    same_shape("cwd_loss", student.values.shape(), teacher.values.shape())?;
    check_tau(tau)?;
    let mut g = Graph::new();
    let s = g.constant(student.values.clone());
    let t = g.constant(teacher.values.clone());
    let l = cwd_graph(&mut g, s, t, tau);
    Ok(g.value(l).item())
}

fn check_tau(tau: f64) -> Result<(), LossError> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(LossError::Config("temperature must be finite and > 0".into()))
    }
}

/// `τ² · mean_cells KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`; teacher detached.
pub fn kl_graph(g: &mut Graph, teacher: Var, student: Var, tau: f64) -> Var {
    let s = g.shape(student).to_vec();
    let (n, k) = (s[0], s[1]);
    let t = g.detach(teacher);
    let kl = softmax_kl_rows(g, t, student, n, k, tau);
    g.scale(kl, tau * tau / n as f64)
}

pub fn kl_output_loss(teacher: &LogitSet, student: &LogitSet, tau: f64) -> Result<f64, LossError> {
    same_shape("kl_output_loss", teacher.logits.shape(), student.logits.shape())?;
    check_tau(tau)?;
    if teacher.cells() == 0 {
        return Err(LossError::Shape("no cells".into()));
    }
    let mut g = Graph::new();
    let t = g.constant(teacher.logits.clone());
    let s = g.constant(student.logits.clone());
    let l = kl_graph(&mut g, t, s, tau);
    Ok(g.value(l).item())
}

/// Spatial Bernoulli keep-mask: each of the `h·w` positions is 0 with
/// probability `ratio`.
pub fn spatial_mask(seed: u64, h: usize, w: usize, ratio: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..h * w)
        .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { 1.0 })
        .collect()
}

/// 1×1 channel projection followed by a bilinear resize to the target grid.
#[derive(Debug, Clone)]
pub struct Aligner {
    pub params: ParamStore,
    layer: ConvLayer,
    target: [usize; 3],
}

impl Aligner {
    /// Identity-initialised when channel counts agree.
    pub fn new(in_channels: usize, target: [usize; 3], seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = init_conv(&mut params, &mut rng, "align", target[0], in_channels, 1, 1, 1.0, 0.0);
        if in_channels == target[0] {
            let w = params.get_mut(layer.weight);
            w.data_mut().fill(0.0);
            for c in 0..in_channels {
                w.data_mut()[c * in_channels + c] = 1.0;
            }
        }
        Self { params, layer, target }
    }

    pub fn target(&self) -> [usize; 3] {
        self.target
    }

    pub fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let y = self.layer.apply(g, params, x);
        g.resize(y, self.target[1], self.target[2])
    }
}

/// Reconstructs teacher features from masked student features.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamStore,
    layers: Option<(ConvLayer, ConvLayer)>,
}

impl Generator {
    pub fn identity() -> Self {
        Self {
            params: ParamStore::new(),
            layers: None,
        }
    }

    /// conv3×3 → SiLU → conv3×3 on `channels` channels.
    pub fn conv(channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = init_conv(&mut params, &mut rng, "gen.0", channels, channels, 3, 1, 1.6, 0.0);
        let b = init_conv(&mut params, &mut rng, "gen.1", channels, channels, 3, 1, 1.0, 0.0);
        Self {
            params,
            layers: Some((a, b)),
        }
    }

    pub fn new(kind: GeneratorKind, channels: usize, seed: u64) -> Self {
        match kind {
            GeneratorKind::Identity => Self::identity(),
            GeneratorKind::Conv => Self::conv(channels, seed),
        }
    }

    pub fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        match &self.layers {
            None => x,
            Some((a, b)) => {
                let h = a.apply(g, params, x);
                let h = g.silu(h);
                b.apply(g, params, h)
            }
        }
    }
}

/// `Σ (T − G(aligned ⊙ M))²` with `M` broadcast over channels.
pub fn mgd_graph(g: &mut Graph, aligned: Var, teacher: Var, mask: &[f64], generator: &Generator, gen_params: &[Var]) -> Var {
    let shape = g.shape(aligned).to_vec();
    let plane = shape[1] * shape[2];
    assert_eq!(mask.len(), plane, "mask must cover the spatial grid");
    let m = g.constant(Tensor::from_fn(&shape, |i| mask[i % plane]));
    let masked = g.mul(aligned, m);
    let gen = generator.apply(g, gen_params, masked);
    let t = g.detach(teacher);
    let d = g.sub(t, gen);
    let sq = g.square(d);
    g.sum(sq)
}

fn check_aligner(student: &FeatureMap, aligner: &Aligner) -> Result<(), LossError> {
    let (c, _, _) = student.dims();
    let w = aligner.params.get(aligner.layer.weight);
    if w.shape()[1] != c {
        return Err(LossError::Shape(format!(
            "aligner expects {} input channels, tap has {c}",
            w.shape()[1]
        )));
    }
    Ok(())
}

pub fn align_features(student: &FeatureMap, target: [usize; 3], aligner: &Aligner) -> Result<FeatureMap, LossError> {
    check_aligner(student, aligner)?;
    same_shape("aligner target", &aligner.target, &target)?;
    let mut g = Graph::new();
    let b = aligner.params.bind(&mut g, false);
    let x = g.constant(student.values.clone());
    let y = aligner.apply(&mut g, b.vars(), x);
    FeatureMap::new(g.value(y).clone(), student.layer_tag.clone(), student.source)
        .map_err(|e| LossError::Shape(e.to_string()))
}

pub fn mgd_loss(
    student: &FeatureMap,
    teacher: &FeatureMap,
    mask_seed: u64,
    ratio: f64,
    generator: &Generator,
    aligner: &Aligner,
) -> Result<f64, LossError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(LossError::Config("mask ratio must lie in [0, 1)".into()));
    }
    check_aligner(student, aligner)?;
    let (tc, th, tw) = teacher.dims();
    same_shape("mgd aligner target", &aligner.target, &[tc, th, tw])?;
    let mut g = Graph::new();
    let ab = aligner.params.bind(&mut g, false);
    let gb = generator.params.bind(&mut g, false);
    let s = g.constant(student.values.clone());
    let t = g.constant(teacher.values.clone());
    let aligned = aligner.apply(&mut g, ab.vars(), s);
    let mask = spatial_mask(mask_seed, th, tw, ratio);
    let l = mgd_graph(&mut g, aligned, t, &mask, generator, gb.vars());
    Ok(g.value(l).item())
}
