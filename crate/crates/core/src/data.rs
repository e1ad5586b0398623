//! Shared data model and the on-disk dataset layout.
//!
//! ```text
//! root/<sequence_id>/frame_%04d.png   degraded frames
//! root/<sequence_id>/clean_%04d.png   clean targets
//! root/<sequence_id>/annotations.json one record per frame
//! root/<sequence_id>/meta.json        simulation parameters + master seed
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use jdatt_autograd::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::turbsim::SimParams;

/// Boxes narrower or shorter than this after clipping are rejected.
pub const MIN_BOX_EXTENT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("missing annotation file {0}")]
    MissingAnnotations(PathBuf),
    #[error("sequence {sequence}: {frames} frames on disk but {records} annotation records")]
    FrameCountMismatch {
        sequence: String,
        frames: usize,
        records: usize,
    },
    #[error("{path}: value {value} outside [0, 1]")]
    OutOfRange { path: PathBuf, value: f64 },
    #[error("{context}: {reason}")]
    Invalid { context: String, reason: String },
}

fn invalid(context: impl Into<String>, reason: impl Into<String>) -> DataError {
    DataError::Invalid {
        context: context.into(),
        reason: reason.into(),
    }
}

/// A `T×H×W×C` clip with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    sequence_id: String,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    frames: Vec<f64>,
    pub frame_rate_hint: Option<f64>,
}

impl FrameSequence {
    pub fn new(
        sequence_id: impl Into<String>,
        dims: [usize; 4],
        frames: Vec<f64>,
    ) -> Result<Self, DataError> {
        let sequence_id = sequence_id.into();
        let [t, h, w, c] = dims;
        if t < 1 || h < 8 || w < 8 || !(c == 1 || c == 3) {
            return Err(invalid(
                &sequence_id,
                format!("unsupported dims T={t} H={h} W={w} C={c}"),
            ));
        }
        if frames.len() != t * h * w * c {
            return Err(invalid(
                &sequence_id,
                format!("expected {} values, got {}", t * h * w * c, frames.len()),
            ));
        }
        if let Some(v) = frames.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::OutOfRange {
                path: PathBuf::from(&sequence_id),
                value: *v,
            });
        }
        Ok(Self {
            sequence_id,
            t,
            h,
            w,
            c,
            frames,
            frame_rate_hint: None,
        })
    }

    /// Builds a sequence from planar `C×H×W` frames, clamping into `[0, 1]`.
    pub fn from_chw_frames(sequence_id: impl Into<String>, frames: &[Tensor]) -> Result<Self, DataError> {
        let sequence_id = sequence_id.into();
        let first = frames.first().ok_or_else(|| invalid(&sequence_id, "no frames"))?;
        let &[c, h, w] = first.shape() else {
            return Err(invalid(&sequence_id, "frames must be C×H×W"));
        };
        let mut data = Vec::with_capacity(frames.len() * c * h * w);
        for f in frames {
            if f.shape() != first.shape() {
                return Err(invalid(&sequence_id, "frames differ in shape"));
            }
            data.extend(chw_to_hwc(f.data(), c, h, w).into_iter().map(|v| v.clamp(0.0, 1.0)));
        }
        Self::new(sequence_id, [frames.len(), h, w, c], data)
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    /// `[T, H, W, C]`.
    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    /// Interleaved `H×W×C` values of frame `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.h * self.w * self.c;
        &self.frames[t * n..(t + 1) * n]
    }

    /// Frame `t` as a planar `C×H×W` tensor.
    pub fn frame_chw(&self, t: usize) -> Tensor {
        let data = hwc_to_chw(self.frame(t), self.c, self.h, self.w);
        Tensor::new(&[self.c, self.h, self.w], data).expect("dims consistent")
    }

    /// The `size` frames centred on `center`, edge frames replicated,
    /// stacked into a `(size·C)×H×W` tensor.
    pub fn window_chw(&self, center: usize, size: usize) -> Tensor {
        let half = (size / 2) as isize;
        let mut data = Vec::with_capacity(size * self.c * self.h * self.w);
        for k in 0..size as isize {
            let t = (center as isize + k - half).clamp(0, self.t as isize - 1) as usize;
            data.extend(hwc_to_chw(self.frame(t), self.c, self.h, self.w));
        }
        Tensor::new(&[size * self.c, self.h, self.w], data).expect("dims consistent")
    }

    /// The replicate-padded window around `center` as its own sequence.
    pub fn window(&self, center: usize, size: usize) -> FrameSequence {
        let half = (size / 2) as isize;
        let mut data = Vec::with_capacity(size * self.h * self.w * self.c);
        for k in 0..size as isize {
            let t = (center as isize + k - half).clamp(0, self.t as isize - 1) as usize;
            data.extend_from_slice(self.frame(t));
        }
        FrameSequence {
            sequence_id: self.sequence_id.clone(),
            t: size,
            h: self.h,
            w: self.w,
            c: self.c,
            frames: data,
            frame_rate_hint: self.frame_rate_hint,
        }
    }
}

pub fn hwc_to_chw(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + p] = src[p * c + ch];
        }
    }
    out
}

pub fn chw_to_hwc(src: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for p in 0..h * w {
        for ch in 0..c {
            out[p * c + ch] = src[ch * h * w + p];
        }
    }
    out
}

/// Normalised centre-format box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([cx, cy, w, h]: [f64; 4]) -> Self {
        Self { cx, cy, w, h }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.cx, b.cy, b.w, b.h]
    }
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `(x1, y1, x2, y2)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The part of the box inside the unit square.
    pub fn clipped(&self) -> BBox {
        let (x1, y1, x2, y2) = self.corners();
        BBox::from_corners(x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0), y2.clamp(0.0, 1.0))
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let (ax1, ay1, ax2, ay2) = self.corners();
        let (bx1, by1, bx2, by2) = other.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Boxes, labels and (for predictions) scores of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub frame_index: usize,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
}

impl DetectionSet {
    pub fn ground_truth(frame_index: usize, boxes: Vec<BBox>, labels: Vec<usize>) -> Self {
        Self {
            frame_index,
            boxes,
            labels,
            scores: Vec::new(),
        }
    }

    pub fn empty(frame_index: usize) -> Self {
        Self::ground_truth(frame_index, Vec::new(), Vec::new())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn is_ground_truth(&self) -> bool {
        self.scores.is_empty()
    }

    /// Checks the structural invariants; `num_classes` bounds the labels
    /// when given.
    pub fn validate(&self, num_classes: Option<usize>) -> Result<(), DataError> {
        let ctx = format!("frame {}", self.frame_index);
        if self.labels.len() != self.boxes.len() {
            return Err(invalid(&ctx, "boxes and labels differ in length"));
        }
        if !self.scores.is_empty() && self.scores.len() != self.boxes.len() {
            return Err(invalid(&ctx, "boxes and scores differ in length"));
        }
        for b in &self.boxes {
            if ![b.cx, b.cy, b.w, b.h].iter().all(|v| v.is_finite()) {
                return Err(invalid(&ctx, "non-finite box coordinate"));
            }
            let c = b.clipped();
            if b.w <= 0.0 || b.h <= 0.0 || c.w <= MIN_BOX_EXTENT || c.h <= MIN_BOX_EXTENT {
                return Err(invalid(&ctx, format!("degenerate box {:?}", <[f64; 4]>::from(*b))));
            }
        }
        if let Some(&s) = self.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(invalid(&ctx, format!("score {s} outside [0, 1]")));
        }
        if let Some(k) = num_classes {
            if let Some(&l) = self.labels.iter().find(|&&l| l >= k) {
                return Err(invalid(&ctx, format!("label {l} outside [0, {k})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Teacher,
    Student,
}

/// A `C×H×W` activation block captured at a named layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Tensor,
    pub layer_tag: String,
    pub source: Source,
}

impl FeatureMap {
    pub fn new(values: Tensor, layer_tag: impl Into<String>, source: Source) -> Result<Self, DataError> {
        let layer_tag = layer_tag.into();
        if layer_tag.is_empty() {
            return Err(invalid("feature map", "empty layer tag"));
        }
        if values.rank() != 3 {
            return Err(invalid(&layer_tag, format!("expected C×H×W, got {:?}", values.shape())));
        }
        if !values.all_finite() {
            return Err(invalid(&layer_tag, "non-finite activation"));
        }
        Ok(Self {
            values,
            layer_tag,
            source,
        })
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2])
    }
}

/// Pre-softmax class scores, `N×K`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSet {
    pub logits: Tensor,
    pub source: Source,
}

impl LogitSet {
    pub fn new(logits: Tensor, source: Source) -> Result<Self, DataError> {
        if logits.rank() != 2 {
            return Err(invalid("logits", format!("expected N×K, got {:?}", logits.shape())));
        }
        if !logits.all_finite() {
            return Err(invalid("logits", "non-finite logit"));
        }
        Ok(Self { logits, source })
    }

    pub fn cells(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn classes(&self) -> usize {
        self.logits.shape()[1]
    }
}

/// One simulated clip with its clean target and per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub degraded: FrameSequence,
    pub clean: FrameSequence,
    pub ground_truth: Vec<DetectionSet>,
    pub sim_params: SimParams,
    pub master_seed: u64,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<(), DataError> {
        let id = self.degraded.sequence_id();
        if self.degraded.dims() != self.clean.dims() {
            return Err(invalid(id, "degraded and clean dims differ"));
        }
        if self.ground_truth.len() != self.degraded.len() {
            return Err(DataError::FrameCountMismatch {
                sequence: id.to_string(),
                frames: self.degraded.len(),
                records: self.ground_truth.len(),
            });
        }
        for gt in &self.ground_truth {
            gt.validate(None).map_err(|e| invalid(id, e.to_string()))?;
        }
        Ok(())
    }

    pub fn sequence_id(&self) -> &str {
        self.degraded.sequence_id()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceMeta {
    sim_params: SimParams,
    master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_rate_hint: Option<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| DataError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, frame: &[f64], h: usize, w: usize, c: usize) -> Result<(), DataError> {
    let bytes: Vec<u8> = frame.iter().map(|&v| quantize(v)).collect();
    let color = if c == 3 {
        image::ExtendedColorType::Rgb8
    } else {
        image::ExtendedColorType::L8
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png).map_err(
        |source| DataError::Image {
            path: path.to_path_buf(),
            source,
        },
    )
}

fn read_png(path: &Path, channels: Option<usize>) -> Result<(usize, usize, usize, Vec<f64>), DataError> {
    let img = image::open(path).map_err(|source| DataError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let c = channels.unwrap_or(if img.color().channel_count() >= 3 { 3 } else { 1 });
    let bytes = if c == 3 {
        img.into_rgb8().into_raw()
    } else {
        img.into_luma8().into_raw()
    };
    Ok((h, w, c, bytes.into_iter().map(|b| b as f64 / 255.0).collect()))
}

fn frame_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>, DataError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(prefix) && n.ends_with(".png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn load_frames(dir: &Path, prefix: &str, id: &str) -> Result<FrameSequence, DataError> {
    let files = frame_files(dir, prefix)?;
    if files.is_empty() {
        return Err(invalid(dir.display().to_string(), format!("no {prefix}*.png frames")));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let (h, w, c, px) = read_png(f, dims.map(|(_, _, c)| c))?;
        match dims {
            None => dims = Some((h, w, c)),
            Some(d) if d != (h, w, c) => {
                return Err(invalid(f.display().to_string(), "frame size differs from first frame"))
            }
            _ => {}
        }
        data.extend(px);
    }
    let (h, w, c) = dims.expect("at least one frame");
    FrameSequence::new(id, [files.len(), h, w, c], data).map_err(|e| invalid(dir.display().to_string(), e.to_string()))
}

fn load_sequence(dir: &Path) -> Result<AnnotatedSample, DataError> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| invalid(dir.display().to_string(), "unnamed sequence directory"))?
        .to_string();
    let ann_path = dir.join("annotations.json");
    if !ann_path.is_file() {
        return Err(DataError::MissingAnnotations(ann_path));
    }
    let mut ground_truth: Vec<DetectionSet> = read_json(&ann_path)?;
    ground_truth.sort_by_key(|d| d.frame_index);
    let meta: SequenceMeta = read_json(&dir.join("meta.json"))?;
    let mut degraded = load_frames(dir, "frame_", &id)?;
    let mut clean = load_frames(dir, "clean_", &id)?;
    degraded.frame_rate_hint = meta.frame_rate_hint;
    clean.frame_rate_hint = meta.frame_rate_hint;
    if ground_truth.len() != degraded.len() {
        return Err(DataError::FrameCountMismatch {
            sequence: id,
            frames: degraded.len(),
            records: ground_truth.len(),
        });
    }
    for (t, gt) in ground_truth.iter().enumerate() {
        if gt.frame_index != t {
            return Err(invalid(ann_path.display().to_string(), format!("record {t} has frame_index {}", gt.frame_index)));
        }
        for b in &gt.boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(DataError::OutOfRange {
                        path: ann_path.clone(),
                        value: v,
                    });
                }
            }
        }
        gt.validate(None).map_err(|e| invalid(ann_path.display().to_string(), e.to_string()))?;
    }
    let sample = AnnotatedSample {
        degraded,
        clean,
        ground_truth,
        sim_params: meta.sim_params,
        master_seed: meta.master_seed,
    };
    sample.validate().map_err(|e| invalid(dir.display().to_string(), e.to_string()))?;
    Ok(sample)
}

/// Loads every sequence directory under `root`, sorted by sequence id.
pub fn load_dataset(root: &Path) -> Result<Vec<AnnotatedSample>, DataError> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut samples = dirs.iter().map(|d| load_sequence(d)).collect::<Result<Vec<_>, _>>()?;
    samples.sort_by(|a, b| a.sequence_id().cmp(b.sequence_id()));
    Ok(samples)
}

/// Writes `samples` in the dataset layout under `root`.
pub fn save_dataset(samples: &[AnnotatedSample], root: &Path) -> Result<(), DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    for s in samples {
        s.validate()?;
        let dir = root.join(s.sequence_id());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let [t, h, w, c] = s.degraded.dims();
        for k in 0..t {
            write_png(&dir.join(format!("frame_{k:04}.png")), s.degraded.frame(k), h, w, c)?;
            write_png(&dir.join(format!("clean_{k:04}.png")), s.clean.frame(k), h, w, c)?;
        }
        write_json(&dir.join("annotations.json"), &s.ground_truth)?;
        write_json(
            &dir.join("meta.json"),
            &SequenceMeta {
                sim_params: s.sim_params.clone(),
                master_seed: s.master_seed,
                frame_rate_hint: s.degraded.frame_rate_hint,
            },
        )?;
    }
    Ok(())
}
