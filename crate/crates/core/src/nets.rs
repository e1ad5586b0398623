//! Toy restoration and detection networks with named feature taps.
//!
//! Restoration: a half-resolution registration stage predicts a displacement
//! field that warps the centre frame, then an enhancement stage predicts a
//! residual in logit space so the output stays inside `(0, 1)`.
//! Detection: a stride-8 conv backbone and a per-cell head emitting `K` class
//! logits plus 4 box deltas.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use jdatt_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{FeatureMap, FrameSequence, LogitSet, Source};

pub const DETECTOR_STRIDE: usize = 8;
pub const BASE_BOX_SIZE: f64 = 0.125;
pub const RESTORATION_WINDOW: usize = 5;

pub const TAP_REGISTRATION: &str = "restore.registration";
pub const TAP_ENHANCEMENT: &str = "restore.enhancement";
pub const TAP_BACKBONE: &str = "detect.backbone";
pub const TAP_HEAD: &str = "detect.head";

const CHECKPOINT_MAGIC: &[u8; 8] = b"JDATTCK1";
const CHECKPOINT_FORMAT: &str = "jdatt-checkpoint/1";
// Box size deltas are clamped before exponentiation.
const MAX_SIZE_DELTA: f64 = 4.0;
// Initial class prior of about 1%.
const CLASS_BIAS_INIT: f64 = -4.6;
const OUTPUT_CLAMP: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error("restoration window has {got} frames, model expects {expected}")]
    WindowLength { expected: usize, got: usize },
    #[error("input {h}×{w} is not divisible by stride {stride}")]
    NotDivisible { h: usize, w: usize, stride: usize },
    #[error("input has {got} channels, model expects {expected}")]
    Channels { expected: usize, got: usize },
    #[error("model kind is {got:?}, operation needs {expected:?}")]
    Kind { expected: ModelKind, got: ModelKind },
    #[error("unknown tap '{0}'")]
    UnknownTap(String),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
    #[error("{0}")]
    Data(#[from] crate::data::DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Restoration,
    Detector,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Teacher,
    Large,
    Medium,
    Small,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Teacher, Variant::Large, Variant::Medium, Variant::Small];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub variant: Variant,
    pub base_channels: usize,
    /// Residual blocks per stage.
    pub depth: usize,
    /// Detector classes; ignored by restoration models.
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    /// Image channels.
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_window() -> usize {
    RESTORATION_WINDOW
}

fn default_channels() -> usize {
    3
}

impl ModelSpec {
    /// Desk-scale sizes; widths and depths shrink along the variant ladder.
    pub fn preset(kind: ModelKind, variant: Variant, num_classes: usize) -> Self {
        let (base_channels, depth) = match (kind, variant) {
            (ModelKind::Restoration, Variant::Teacher) => (12, 3),
            (ModelKind::Restoration, Variant::Large) => (10, 2),
            (ModelKind::Restoration, Variant::Medium) => (6, 2),
            (ModelKind::Restoration, Variant::Small) => (4, 1),
            (ModelKind::Detector, Variant::Teacher) => (16, 3),
            (ModelKind::Detector, Variant::Large) => (12, 2),
            (ModelKind::Detector, Variant::Medium) => (8, 2),
            (ModelKind::Detector, Variant::Small) => (6, 1),
        };
        Self {
            kind,
            variant,
            base_channels,
            depth,
            num_classes: if kind == ModelKind::Detector { num_classes } else { 0 },
            window: RESTORATION_WINDOW,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Spec(m));
        if self.base_channels == 0 || self.depth == 0 {
            return bad("base_channels and depth must be positive".into());
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels {} not in {{1, 3}}", self.channels));
        }
        match self.kind {
            ModelKind::Restoration if self.window == 0 || self.window.is_multiple_of(2) => {
                bad(format!("window {} must be odd", self.window))
            }
            ModelKind::Detector if self.num_classes < 1 => bad("detector needs num_classes >= 1".into()),
            _ => Ok(()),
        }
    }

    pub fn tap_tags(&self) -> [&'static str; 2] {
        match self.kind {
            ModelKind::Restoration => [TAP_REGISTRATION, TAP_ENHANCEMENT],
            ModelKind::Detector => [TAP_BACKBONE, TAP_HEAD],
        }
    }

    /// `(C, H, W)` of every tap for an `h×w` input.
    pub fn tap_dims(&self, h: usize, w: usize) -> Vec<(&'static str, [usize; 3])> {
        let b = self.base_channels;
        match self.kind {
            ModelKind::Restoration => {
                let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
                vec![(TAP_REGISTRATION, [b, hh, hw]), (TAP_ENHANCEMENT, [2 * b, hh, hw])]
            }
            ModelKind::Detector => {
                let (gh, gw) = (h / DETECTOR_STRIDE, w / DETECTOR_STRIDE);
                vec![(TAP_BACKBONE, [4 * b, gh, gw]), (TAP_HEAD, [4 * b, gh, gw])]
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvLayer {
    pub fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        g.conv2d(
            x,
            params[self.weight.index()],
            Some(params[self.bias.index()]),
            self.stride,
            self.pad,
        )
    }
}

/// Weights `N(0, (gain/√fan_in)²)`, bias filled with `bias`.
#[allow(clippy::too_many_arguments)]
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
    gain: f64,
    bias: f64,
) -> ConvLayer {
    let fan_in = (cin * k * k) as f64;
    let weight = if gain == 0.0 {
        Tensor::zeros(&[cout, cin, k, k])
    } else {
        let dist = Normal::new(0.0, gain / fan_in.sqrt()).expect("finite std");
        Tensor::from_fn(&[cout, cin, k, k], |_| dist.sample(rng))
    };
    ConvLayer {
        weight: store.add(format!("{name}.weight"), weight),
        bias: store.add(format!("{name}.bias"), Tensor::full(&[cout], bias)),
        stride,
        pad: k / 2,
    }
}

fn residual(g: &mut Graph, params: &[Var], layer: &ConvLayer, h: Var) -> Var {
    let y = layer.apply(g, params, h);
    let y = g.silu(y);
    g.add(h, y)
}

#[derive(Debug, Clone)]
struct RestorationArch {
    reg_in: ConvLayer,
    reg_blocks: Vec<ConvLayer>,
    reg_flow: ConvLayer,
    enh_in: ConvLayer,
    enh_blocks: Vec<ConvLayer>,
    enh_fuse: ConvLayer,
    enh_out: ConvLayer,
}

#[derive(Debug, Clone)]
struct DetectorArch {
    stem: ConvLayer,
    down1: ConvLayer,
    down2: ConvLayer,
    blocks: Vec<ConvLayer>,
    head: ConvLayer,
    pred: ConvLayer,
}

#[derive(Debug, Clone)]
enum Arch {
    Restoration(RestorationArch),
    Detector(DetectorArch),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    arch: Arch,
}

const SILU_GAIN: f64 = 1.6;
const RESIDUAL_GAIN: f64 = 0.5;

/// Deterministically initialises a model from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, NetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let b = spec.base_channels;
    let c = spec.channels;
    let s = &mut store;
    let r = &mut rng;
    let arch = match spec.kind {
        ModelKind::Restoration => {
            let wc = spec.window * c;
            let reg_in = init_conv(s, r, "reg.in", b, wc, 3, 2, SILU_GAIN, 0.0);
            let reg_blocks = (0..spec.depth)
                .map(|i| init_conv(s, r, &format!("reg.block{i}"), b, b, 3, 1, RESIDUAL_GAIN, 0.0))
                .collect();
            let reg_flow = init_conv(s, r, "reg.flow", 2, b, 3, 1, 0.01, 0.0);
            let enh_in = init_conv(s, r, "enh.in", 2 * b, wc + c, 3, 2, SILU_GAIN, 0.0);
            let enh_blocks = (0..spec.depth)
                .map(|i| init_conv(s, r, &format!("enh.block{i}"), 2 * b, 2 * b, 3, 1, RESIDUAL_GAIN, 0.0))
                .collect();
            let enh_fuse = init_conv(s, r, "enh.fuse", b, 2 * b + 2 * c, 3, 1, SILU_GAIN, 0.0);
            let enh_out = init_conv(s, r, "enh.out", c, b, 3, 1, 0.01, 0.0);
            Arch::Restoration(RestorationArch {
                reg_in,
                reg_blocks,
                reg_flow,
                enh_in,
                enh_blocks,
                enh_fuse,
                enh_out,
            })
        }
        ModelKind::Detector => {
            let stem = init_conv(s, r, "det.stem", b, c, 3, 2, SILU_GAIN, 0.0);
            let down1 = init_conv(s, r, "det.down1", 2 * b, b, 3, 2, SILU_GAIN, 0.0);
            let down2 = init_conv(s, r, "det.down2", 4 * b, 2 * b, 3, 2, SILU_GAIN, 0.0);
            let blocks = (0..spec.depth)
                .map(|i| init_conv(s, r, &format!("det.block{i}"), 4 * b, 4 * b, 3, 1, RESIDUAL_GAIN, 0.0))
                .collect();
            let head = init_conv(s, r, "det.head", 4 * b, 4 * b, 3, 1, SILU_GAIN, 0.0);
            let k = spec.num_classes;
            let pred = init_conv(s, r, "det.pred", k + 4, 4 * b, 1, 1, 0.1, 0.0);
            let bias = store.get_mut(pred.bias);
            bias.data_mut()[..k].fill(CLASS_BIAS_INIT);
            Arch::Detector(DetectorArch {
                stem,
                down1,
                down2,
                blocks,
                head,
                pred,
            })
        }
    };
    Ok(Model {
        spec: spec.clone(),
        params: store,
        arch,
    })
}

/// Number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    model.params.numel()
}

/// Graph handles of one restoration forward pass.
#[derive(Debug, Clone)]
pub struct RestorationNodes {
    /// `C×H×W` in `(0, 1)`.
    pub output: Var,
    /// Full-resolution `2×H×W` displacement.
    pub flow: Var,
    pub warped: Var,
    pub taps: Vec<(&'static str, Var)>,
}

/// Graph handles of one detector forward pass.
#[derive(Debug, Clone)]
pub struct DetectorNodes {
    /// `N×K` class logits.
    pub logits: Var,
    /// `N×4` decoded `(cx, cy, w, h)`.
    pub boxes: Var,
    pub grid: (usize, usize),
    pub taps: Vec<(&'static str, Var)>,
}

impl Model {
    fn expect_kind(&self, kind: ModelKind) -> Result<(), NetError> {
        if self.spec.kind == kind {
            Ok(())
        } else {
            Err(NetError::Kind {
                expected: kind,
                got: self.spec.kind,
            })
        }
    }

    /// Restoration forward pass on a `(window·C)×H×W` stacked window.
    pub fn restoration_graph(&self, g: &mut Graph, params: &[Var], window: Var) -> Result<RestorationNodes, NetError> {
        self.expect_kind(ModelKind::Restoration)?;
        let Arch::Restoration(a) = &self.arch else {
            unreachable!("kind checked")
        };
        let shape = g.shape(window).to_vec();
        let c = self.spec.channels;
        if shape.len() != 3 || !shape[0].is_multiple_of(c) {
            return Err(NetError::Channels {
                expected: self.spec.window * c,
                got: shape.first().copied().unwrap_or(0),
            });
        }
        if shape[0] / c != self.spec.window {
            return Err(NetError::WindowLength {
                expected: self.spec.window,
                got: shape[0] / c,
            });
        }
        let (h, w) = (shape[1], shape[2]);
        let center = g.narrow(window, 0, (self.spec.window / 2) * c, c);

        let mut reg = a.reg_in.apply(g, params, window);
        reg = g.silu(reg);
        for blk in &a.reg_blocks {
            reg = residual(g, params, blk, reg);
        }
        let half_flow = a.reg_flow.apply(g, params, reg);
        let (hh, hw) = (g.shape(half_flow)[1], g.shape(half_flow)[2]);
        let up = g.resize(half_flow, h, w);
        // displacements are predicted in half-resolution pixels
        let flow = g.scale(up, h as f64 / hh as f64 * 0.5 + w as f64 / hw as f64 * 0.5);
        let warped = g.warp(center, flow);

        let enh_input = g.concat(&[warped, window]);
        let mut enh = a.enh_in.apply(g, params, enh_input);
        enh = g.silu(enh);
        for blk in &a.enh_blocks {
            enh = residual(g, params, blk, enh);
        }
        let enh_up = g.resize(enh, h, w);
        let fused_in = g.concat(&[enh_up, warped, center]);
        let fused = a.enh_fuse.apply(g, params, fused_in);
        let fused = g.silu(fused);
        let correction = a.enh_out.apply(g, params, fused);

        let base = g.clamp(warped, OUTPUT_CLAMP, 1.0 - OUTPUT_CLAMP);
        let one_minus = {
            let n = g.neg(base);
            g.add_scalar(n, 1.0)
        };
        let logit = {
            let ratio = g.div(base, one_minus);
            g.log(ratio)
        };
        let pre = g.add(logit, correction);
        let output = g.sigmoid(pre);
        Ok(RestorationNodes {
            output,
            flow,
            warped,
            taps: vec![(TAP_REGISTRATION, reg), (TAP_ENHANCEMENT, enh)],
        })
    }

    /// Detector forward pass on a `C×H×W` frame.
    pub fn detector_graph(&self, g: &mut Graph, params: &[Var], frame: Var) -> Result<DetectorNodes, NetError> {
        self.expect_kind(ModelKind::Detector)?;
        let Arch::Detector(a) = &self.arch else {
            unreachable!("kind checked")
        };
        let shape = g.shape(frame).to_vec();
        if shape.len() != 3 || shape[0] != self.spec.channels {
            return Err(NetError::Channels {
                expected: self.spec.channels,
                got: shape.first().copied().unwrap_or(0),
            });
        }
        let (h, w) = (shape[1], shape[2]);
        if h % DETECTOR_STRIDE != 0 || w % DETECTOR_STRIDE != 0 || h == 0 || w == 0 {
            return Err(NetError::NotDivisible {
                h,
                w,
                stride: DETECTOR_STRIDE,
            });
        }
        let mut x = frame;
        for layer in [&a.stem, &a.down1, &a.down2] {
            x = layer.apply(g, params, x);
            x = g.silu(x);
        }
        for blk in &a.blocks {
            x = residual(g, params, blk, x);
        }
        let backbone = x;
        let head = a.head.apply(g, params, backbone);
        let head = g.silu(head);
        let pred = a.pred.apply(g, params, head);
        let (gh, gw) = (h / DETECTOR_STRIDE, w / DETECTOR_STRIDE);
        let k = self.spec.num_classes;
        let flat = g.reshape(pred, &[k + 4, gh * gw]);
        let rows = g.transpose2(flat);
        let logits = g.narrow(rows, 1, 0, k);
        let deltas = g.narrow(rows, 1, k, 4);
        let boxes = decode_boxes_graph(g, deltas, gh, gw);
        Ok(DetectorNodes {
            logits,
            boxes,
            grid: (gh, gw),
            taps: vec![(TAP_BACKBONE, backbone), (TAP_HEAD, head)],
        })
    }
}

/// Decodes per-cell `N×4` deltas into `(cx, cy, w, h)`; cells are row-major.
pub fn decode_boxes_graph(g: &mut Graph, deltas: Var, gh: usize, gw: usize) -> Var {
    let n = gh * gw;
    let col = |g: &mut Graph, i| g.narrow(deltas, 1, i, 1);
    let (dx, dy, dw, dh) = (col(g, 0), col(g, 1), col(g, 2), col(g, 3));
    let jx = g.constant(Tensor::from_fn(&[n, 1], |i| (i % gw) as f64 / gw as f64));
    let iy = g.constant(Tensor::from_fn(&[n, 1], |i| (i / gw) as f64 / gh as f64));
    let sx = g.sigmoid(dx);
    let sx = g.scale(sx, 1.0 / gw as f64);
    let cx = g.add(sx, jx);
    let sy = g.sigmoid(dy);
    let sy = g.scale(sy, 1.0 / gh as f64);
    let cy = g.add(sy, iy);
    let size = |g: &mut Graph, d| {
        let d = g.clamp(d, -MAX_SIZE_DELTA, MAX_SIZE_DELTA);
        let e = g.exp(d);
        g.scale(e, BASE_BOX_SIZE)
    };
    let bw = size(g, dw);
    let bh = size(g, dh);
    let stacked = g.concat(&[cx, cy, bw, bh]);
    let stacked = g.reshape(stacked, &[4, n]);
    g.transpose2(stacked)
}

/// Scalar reference of [`decode_boxes_graph`] for one cell.
pub fn decode_box(deltas: [f64; 4], row: usize, col: usize, gh: usize, gw: usize) -> crate::data::BBox {
    use jdatt_autograd::sigmoid;
    crate::data::BBox::new(
        (col as f64 + sigmoid(deltas[0])) / gw as f64,
        (row as f64 + sigmoid(deltas[1])) / gh as f64,
        BASE_BOX_SIZE * deltas[2].clamp(-MAX_SIZE_DELTA, MAX_SIZE_DELTA).exp(),
        BASE_BOX_SIZE * deltas[3].clamp(-MAX_SIZE_DELTA, MAX_SIZE_DELTA).exp(),
    )
}

/// Value-level result of a forward pass.
#[derive(Debug, Clone)]
pub enum Prediction {
    Frame(FrameSequence),
    Detections { logits: LogitSet, boxes: Tensor },
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub output: Prediction,
    pub taps: BTreeMap<String, FeatureMap>,
}

fn collect_taps(
    g: &Graph,
    available: &[(&'static str, Var)],
    requested: &[&str],
    source: Source,
) -> Result<BTreeMap<String, FeatureMap>, NetError> {
    let mut out = BTreeMap::new();
    for &tag in requested {
        let (_, v) = available
            .iter()
            .find(|(t, _)| *t == tag)
            .ok_or_else(|| NetError::UnknownTap(tag.to_string()))?;
        out.insert(tag.to_string(), FeatureMap::new(g.value(*v).clone(), tag, source)?);
    }
    Ok(out)
}

fn source_of(model: &Model) -> Source {
    if model.spec.variant == Variant::Teacher {
        Source::Teacher
    } else {
        Source::Student
    }
}

/// Restores the centre frame of `window`, returning the requested taps.
pub fn forward_restoration(model: &Model, window: &FrameSequence, taps: &[&str]) -> Result<ForwardResult, NetError> {
    if window.len() != model.spec.window {
        return Err(NetError::WindowLength {
            expected: model.spec.window,
            got: window.len(),
        });
    }
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let x = g.constant(window.window_chw(window.len() / 2, window.len()));
    let nodes = model.restoration_graph(&mut g, bound.vars(), x)?;
    let frame = FrameSequence::from_chw_frames(window.sequence_id(), &[g.value(nodes.output).clone()])?;
    Ok(ForwardResult {
        output: Prediction::Frame(frame),
        taps: collect_taps(&g, &nodes.taps, taps, source_of(model))?,
    })
}

/// Runs the detector on frame `t` of `seq`.
pub fn forward_detector(model: &Model, seq: &FrameSequence, t: usize, taps: &[&str]) -> Result<ForwardResult, NetError> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let x = g.constant(seq.frame_chw(t));
    let nodes = model.detector_graph(&mut g, bound.vars(), x)?;
    let source = source_of(model);
    Ok(ForwardResult {
        output: Prediction::Detections {
            logits: LogitSet::new(g.value(nodes.logits).clone(), source)?,
            boxes: g.value(nodes.boxes).clone(),
        },
        taps: collect_taps(&g, &nodes.taps, taps, source)?,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    spec: ModelSpec,
    params: Vec<(String, Vec<usize>)>,
}

/// Serialises the spec and parameters into the checkpoint byte format.
pub fn checkpoint_bytes(model: &Model) -> Vec<u8> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        spec: model.spec.clone(),
        params: model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.numel());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params.tensors() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of [`checkpoint_bytes`].
pub fn checkpoint_digest(model: &Model) -> String {
    Sha256::digest(checkpoint_bytes(model)).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_from_bytes(bytes: &[u8], origin: &str) -> Result<Model, NetError> {
    let fail = |reason: String| NetError::Checkpoint {
        path: origin.to_string(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| fail("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| fail(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(fail(format!("unsupported format '{}'", header.format)));
    }
    let mut model = build_model(&header.spec, 0)?;
    if header.params.len() != model.params.len() {
        return Err(fail("parameter count differs from spec".into()));
    }
    let mut values = bytes[16 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (id, (name, shape)) in model.params.ids().collect::<Vec<_>>().into_iter().zip(&header.params) {
        if model.params.name(id) != name || model.params.get(id).shape() != &shape[..] {
            return Err(fail(format!("parameter '{name}' does not match spec")));
        }
        let t = model.params.get_mut(id);
        for slot in t.data_mut() {
            *slot = values.next().ok_or_else(|| fail("truncated values".into()))?;
        }
    }
    if values.next().is_some() || !bytes[16 + hlen..].len().is_multiple_of(8) {
        return Err(fail("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), NetError> {
    let fail = |e: std::io::Error| NetError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut f = fs::File::create(path).map_err(fail)?;
    f.write_all(&checkpoint_bytes(model)).map_err(fail)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, NetError> {
    let bytes = fs::read(path).map_err(|e| NetError::Checkpoint {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    model_from_bytes(&bytes, &path.display().to_string())
}
