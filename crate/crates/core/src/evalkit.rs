//! Evaluation: PSNR, SSIM, mAP@50:95, post-processing, latency and the
//! comparison report (JSON, CSV and two PNG charts).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{Rgb, RgbImage};
use jdatt_autograd::{sigmoid, Graph, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{AnnotatedSample, BBox, DetectionSet};
use crate::imgops::{filter_valid, gaussian_window};
use crate::nets::{count_parameters, Model, ModelKind, NetError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub const SCORE_THRESHOLD: f64 = 0.01;
pub const NMS_IOU: f64 = 0.5;
pub const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("frame {h}×{w} is smaller than the {window}×{window} SSIM window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("label {label} outside [0, {classes})")]
    Label { label: usize, classes: usize },
    #[error("systems were evaluated on different sets: {0}")]
    MismatchedSets(String),
    #[error("report has no rows")]
    EmptyReport,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image {path}: {source}")]
    Image {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------- image quality

/// `10·log10(1/MSE)`; identical inputs give `+∞`.
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(EvalError::Shape(format!("psnr over {} vs {} values", a.len(), b.len())));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Mean of finite values with the infinite ones counted apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrSummary {
    pub mean: f64,
    pub frames: usize,
    pub infinite: usize,
}

pub fn summarize_psnr(values: &[f64]) -> PsnrSummary {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    PsnrSummary {
        mean: if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        frames: values.len(),
        infinite: values.len() - finite.len(),
    }
}

/// Mean SSIM over valid 11×11 Gaussian windows, averaged over channels.
/// Inputs are `C×H×W`.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64, EvalError> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(EvalError::Shape(format!("ssim over {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(EvalError::TooSmall {
            h,
            w,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * plane..(ch + 1) * plane];
        let pb = &b.data()[ch * plane..(ch + 1) * plane];
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let (mu_a, _, _) = filter_valid(pa, h, w, &k);
        let (mu_b, _, _) = filter_valid(pb, h, w, &k);
        let (e_aa, _, _) = filter_valid(&prod(pa, pa), h, w, &k);
        let (e_bb, _, _) = filter_valid(&prod(pb, pb), h, w, &k);
        let (e_ab, _, _) = filter_valid(&prod(pa, pb), h, w, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            sum += num / den;
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

// ---------------------------------------------------------------- detection

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Area under the all-points interpolated precision envelope.
pub fn average_precision(is_tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for (i, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Score-ordered greedy matching of one class at one threshold; returns the
/// TP flag of every prediction in descending-score order (ties keep input
/// order) and the number of ground-truth boxes.
fn match_class(preds: &[DetectionSet], gts: &[DetectionSet], class: usize, thr: f64) -> (Vec<bool>, usize) {
    let mut cand: Vec<(f64, usize, BBox)> = Vec::new();
    for (f, p) in preds.iter().enumerate() {
        for ((b, &l), &s) in p.boxes.iter().zip(&p.labels).zip(&p.scores) {
            if l == class {
                cand.push((s, f, *b));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let num_gt = gts.iter().map(|g| g.labels.iter().filter(|&&l| l == class).count()).sum();
    let flags = cand
        .iter()
        .map(|(_, f, b)| {
            let gt = &gts[*f];
            let mut best: Option<(usize, f64)> = None;
            for (j, (gb, &gl)) in gt.boxes.iter().zip(&gt.labels).enumerate() {
                if gl != class || used[*f][j] {
                    continue;
                }
                let iou = b.iou(gb);
                if iou >= thr && best.is_none_or(|(_, bi)| iou > bi) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[*f][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, num_gt)
}

/// Mean AP over IoU thresholds 0.50:0.95 and over classes present in the
/// ground truth; 0 when the ground truth is empty.
pub fn map_50_95(preds: &[DetectionSet], gts: &[DetectionSet], num_classes: usize) -> Result<f64, EvalError> {
    if preds.len() != gts.len() {
        return Err(EvalError::Shape(format!("{} prediction frames vs {} ground-truth frames", preds.len(), gts.len())));
    }
    for set in preds.iter().chain(gts) {
        if let Some(&label) = set.labels.iter().find(|&&l| l >= num_classes) {
            return Err(EvalError::Label {
                label,
                classes: num_classes,
            });
        }
        if set.labels.len() != set.boxes.len() {
            return Err(EvalError::Shape(format!("frame {}: boxes and labels differ", set.frame_index)));
        }
    }
    for p in preds {
        if p.scores.len() != p.boxes.len() {
            return Err(EvalError::Shape(format!("frame {}: predictions need one score per box", p.frame_index)));
        }
    }
    let present: Vec<usize> = (0..num_classes)
        .filter(|&c| gts.iter().any(|g| g.labels.contains(&c)))
        .collect();
    if present.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &c in &present {
        let mut per_class = 0.0;
        for thr in iou_thresholds() {
            let (flags, n) = match_class(preds, gts, c, thr);
            per_class += average_precision(&flags, n);
        }
        sum += per_class / 10.0;
    }
    Ok(sum / present.len() as f64)
}

/// Per-cell best class, score threshold, class-wise NMS, top-100.
pub fn postprocess(logits: &Tensor, boxes: &Tensor, frame_index: usize) -> DetectionSet {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut cand: Vec<(f64, usize, BBox)> = (0..n)
        .filter_map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let (cls, z) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &z)| if z > acc.1 { (c, z) } else { acc });
            let score = sigmoid(z);
            let r = &boxes.data()[i * 4..i * 4 + 4];
            let b = BBox::new(r[0], r[1], r[2], r[3]).clipped();
            (score >= SCORE_THRESHOLD && b.w > 1e-6 && b.h > 1e-6).then_some((score, cls, b))
        })
        .collect();
    cand.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut kept: Vec<(f64, usize, BBox)> = Vec::new();
    for c in cand {
        if kept.len() == MAX_DETECTIONS {
            break;
        }
        if kept.iter().all(|k| k.1 != c.1 || k.2.iou(&c.2) <= NMS_IOU) {
            kept.push(c);
        }
    }
    DetectionSet {
        frame_index,
        boxes: kept.iter().map(|k| k.2).collect(),
        labels: kept.iter().map(|k| k.1).collect(),
        scores: kept.iter().map(|k| k.0).collect(),
    }
}

// ---------------------------------------------------------------- latency

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub median_ms: f64,
    pub runs: usize,
}

/// Median wall-clock of `runs` calls after `warmup` discarded calls.
pub fn time_median(mut f: impl FnMut(), warmup: usize, runs: usize) -> Latency {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median_ms = match runs {
        0 => f64::NAN,
        n if n % 2 == 1 => times[n / 2],
        n => 0.5 * (times[n / 2 - 1] + times[n / 2]),
    };
    Latency { median_ms, runs }
}

/// Median forward time of `model` on a constant input of `h×w` pixels.
pub fn benchmark_latency(model: &Model, input: (usize, usize), warmup: usize, runs: usize) -> Result<Latency, EvalError> {
    let (h, w) = input;
    let c = model.spec.channels;
    let planes = match model.spec.kind {
        ModelKind::Restoration => model.spec.window * c,
        ModelKind::Detector => c,
    };
    let x = Tensor::full(&[planes, h, w], 0.5);
    let run = || -> Result<(), NetError> {
        let mut g = Graph::new();
        let b = model.params.bind(&mut g, false);
        let v = g.constant(x.clone());
        match model.spec.kind {
            ModelKind::Restoration => model.restoration_graph(&mut g, b.vars(), v).map(|_| ()),
            ModelKind::Detector => model.detector_graph(&mut g, b.vars(), v).map(|_| ()),
        }
    };
    run()?;
    Ok(time_median(|| run().expect("validated above"), warmup, runs))
}

// ---------------------------------------------------------------- systems

/// A restoration/detection pairing evaluated as one row of the report.
#[derive(Debug, Clone, Copy)]
pub struct System<'a> {
    pub name: &'a str,
    /// `None` passes degraded frames through unchanged.
    pub restorer: Option<&'a Model>,
    pub detector: Option<&'a Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub system: String,
    pub psnr_mean: f64,
    pub psnr_infinite: usize,
    pub ssim_mean: f64,
    pub map_50_95: Option<f64>,
    pub param_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub latency_ms: BTreeMap<String, f64>,
    pub frames: usize,
    /// Digest of the evaluation set identity.
    pub eval_set: String,
}

/// Identity of a held-out set: sequence ids and frame counts.
pub fn eval_set_digest(data: &[AnnotatedSample]) -> String {
    let mut h = Sha256::new();
    for s in data {
        h.update(s.sequence_id().as_bytes());
        h.update((s.degraded.len() as u64).to_le_bytes());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct FrameOutcome {
    psnr: f64,
    ssim: f64,
    preds: Option<DetectionSet>,
}

/// Restores (or passes through) every frame of every sample and scores it.
pub fn evaluate_system(system: &System<'_>, data: &[AnnotatedSample], num_classes: usize) -> Result<EvalRow, EvalError> {
    let jobs: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.degraded.len()).map(move |t| (i, t)))
        .collect();
    let outcomes: Vec<FrameOutcome> = jobs
        .par_iter()
        .map(|&(i, t)| -> Result<FrameOutcome, EvalError> {
            let s = &data[i];
            let clean = s.clean.frame_chw(t);
            let mut g = Graph::new();
            let frame = match system.restorer {
                None => g.constant(s.degraded.frame_chw(t)),
                Some(m) => {
                    let b = m.params.bind(&mut g, false);
                    let x = g.constant(s.degraded.window_chw(t, m.spec.window));
                    m.restoration_graph(&mut g, b.vars(), x)?.output
                }
            };
            let restored = g.value(frame).clone();
            let preds = match system.detector {
                None => None,
                Some(d) => {
                    let b = d.params.bind(&mut g, false);
                    let out = d.detector_graph(&mut g, b.vars(), frame)?;
                    Some(postprocess(g.value(out.logits), g.value(out.boxes), t))
                }
            };
            Ok(FrameOutcome {
                psnr: psnr(restored.data(), clean.data())?,
                ssim: ssim(&restored, &clean)?,
                preds,
            })
        })
        .collect::<Result<_, _>>()?;
    let ps: Vec<f64> = outcomes.iter().map(|o| o.psnr).collect();
    let summary = summarize_psnr(&ps);
    let ssim_mean = outcomes.iter().map(|o| o.ssim).sum::<f64>() / outcomes.len().max(1) as f64;
    let map = match system.detector {
        None => None,
        Some(_) => {
            let preds: Vec<DetectionSet> = outcomes.iter().map(|o| o.preds.clone().expect("detector ran")).collect();
            let gts: Vec<DetectionSet> = jobs.iter().map(|&(i, t)| data[i].ground_truth[t].clone()).collect();
            Some(map_50_95(&preds, &gts, num_classes)?)
        }
    };
    let mut param_counts = BTreeMap::new();
    if let Some(m) = system.restorer {
        param_counts.insert("restorer".to_string(), count_parameters(m));
    }
    if let Some(m) = system.detector {
        param_counts.insert("detector".to_string(), count_parameters(m));
    }
    param_counts.insert("total".to_string(), param_counts.values().sum());
    Ok(EvalRow {
        system: system.name.to_string(),
        psnr_mean: summary.mean,
        psnr_infinite: summary.infinite,
        ssim_mean,
        map_50_95: map,
        param_counts,
        latency_ms: BTreeMap::new(),
        frames: outcomes.len(),
        eval_set: eval_set_digest(data),
    })
}

/// Per-stage and end-to-end latency of a system on `h×w` inputs.
pub fn benchmark_system(system: &System<'_>, input: (usize, usize), warmup: usize, runs: usize) -> Result<BTreeMap<String, f64>, EvalError> {
    let mut out = BTreeMap::new();
    if let Some(m) = system.restorer {
        out.insert("restorer".to_string(), benchmark_latency(m, input, warmup, runs)?.median_ms);
    }
    if let Some(m) = system.detector {
        out.insert("detector".to_string(), benchmark_latency(m, input, warmup, runs)?.median_ms);
    }
    let total = out.values().sum();
    out.insert("total".to_string(), total);
    Ok(out)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub metadata: serde_json::Value,
}

/// Checks that every row was scored on the same set.
pub fn build_report(rows: Vec<EvalRow>, metadata: serde_json::Value) -> Result<EvalReport, EvalError> {
    let first = rows.first().ok_or(EvalError::EmptyReport)?;
    if let Some(r) = rows.iter().find(|r| r.eval_set != first.eval_set || r.frames != first.frames) {
        return Err(EvalError::MismatchedSets(format!("'{}' vs '{}'", first.system, r.system)));
    }
    Ok(EvalReport { rows, metadata })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    /// One line per system; numbers use the same shortest round-trip
    /// formatting as the JSON.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "system,psnr_mean,psnr_infinite,ssim_mean,map_50_95,params_restorer,params_detector,params_total,latency_restorer_ms,latency_detector_ms,latency_total_ms,frames\n",
        );
        for r in &self.rows {
            let p = |k: &str| r.param_counts.get(k).map(|v| v.to_string()).unwrap_or_default();
            let l = |k: &str| fmt_opt(r.latency_ms.get(k).copied());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.system,
                r.psnr_mean,
                r.psnr_infinite,
                r.ssim_mean,
                fmt_opt(r.map_50_95),
                p("restorer"),
                p("detector"),
                p("total"),
                l("restorer"),
                l("detector"),
                l("total"),
                r.frames
            ));
        }
        out
    }

    /// Attaches latency maps by system name.
    pub fn merge_latency(&mut self, latency: &BTreeMap<String, BTreeMap<String, f64>>) {
        for r in &mut self.rows {
            if let Some(l) = latency.get(&r.system) {
                r.latency_ms = l.clone();
            }
        }
    }

    /// Writes `report.json`, `report.csv` and both charts into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("report.json");
        fs::write(&p, self.to_json()).map_err(io_err(&p))?;
        let p = dir.join("report.csv");
        fs::write(&p, self.to_csv()).map_err(io_err(&p))?;
        save_png(&scatter_params_map(&self.rows), &dir.join("scatter_params_map.png"))?;
        save_png(&quality_bars(&self.rows), &dir.join("quality_bars.png"))
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<(), EvalError> {
    img.save(path).map_err(|source| EvalError::Image {
        path: path.display().to_string(),
        source,
    })
}

// ---------------------------------------------------------------- charts

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];
const INK: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

// 3×5 glyphs, rows top to bottom, bit 2 = left column.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: Rgb<u8>) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (r, bits) in rows.iter().enumerate() {
                for col in 0..3 {
                    if bits & (4 >> col) != 0 {
                        fill_rect(img, cx + col * scale, y + r as i64 * scale, scale, scale, color);
                    }
                }
            }
        }
        cx += 4 * scale;
    }
}

fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    for yy in y.max(0)..(y + h).min(ih) {
        for xx in x.max(0)..(x + w).min(iw) {
            img.put_pixel(xx as u32, yy as u32, color);
        }
    }
}

fn frame_axes(img: &mut RgbImage, left: i64, top: i64, right: i64, bottom: i64) {
    for k in 1..5 {
        let y = top + (bottom - top) * k / 5;
        fill_rect(img, left, y, right - left, 1, GRID);
    }
    fill_rect(img, left, top, 2, bottom - top, INK);
    fill_rect(img, left, bottom, right - left, 2, INK);
}

fn short(v: f64, decimals: usize) -> String {
    format!("{v:.decimals$}")
}

/// Total parameters (x) against mAP (y), one colour per system.
pub fn scatter_params_map(rows: &[EvalRow]) -> RgbImage {
    let (w, h) = (640i64, 420i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let (left, top, right, bottom) = (70, 30, w - 30, h - 60);
    frame_axes(&mut img, left, top, right, bottom);
    let pts: Vec<(usize, f64, f64)> = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.map_50_95.map(|m| (i, r.param_counts.get("total").copied().unwrap_or(0) as f64, m)))
        .collect();
    let xmax = pts.iter().map(|p| p.1).fold(1.0, f64::max) * 1.1;
    let ymax = pts.iter().map(|p| p.2).fold(0.05, f64::max) * 1.1;
    draw_text(&mut img, 8, top, &short(ymax, 2), 2, INK);
    draw_text(&mut img, 8, bottom - 10, "0", 2, INK);
    draw_text(&mut img, right - 60, bottom + 12, &format!("{}", xmax.round() as i64), 2, INK);
    for (i, x, y) in pts {
        let px = left + ((x / xmax) * (right - left) as f64) as i64;
        let py = bottom - ((y / ymax) * (bottom - top) as f64) as i64;
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        fill_rect(&mut img, px - 5, py - 5, 11, 11, c);
        // legend swatch
        fill_rect(&mut img, left + 10 + 24 * i as i64, h - 25, 16, 16, c);
    }
    img
}

/// Two panels: PSNR bars (left) and SSIM bars (right), one colour per system.
pub fn quality_bars(rows: &[EvalRow]) -> RgbImage {
    let (w, h) = (760i64, 420i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let panels = [
        (60i64, w / 2 - 20, rows.iter().map(|r| r.psnr_mean).collect::<Vec<_>>(), 1usize),
        (w / 2 + 40, w - 20, rows.iter().map(|r| r.ssim_mean).collect::<Vec<_>>(), 3usize),
    ];
    let (top, bottom) = (40, h - 40);
    for (left, right, vals, dec) in panels {
        frame_axes(&mut img, left, top, right, bottom);
        let finite: Vec<f64> = vals.iter().copied().filter(|v| v.is_finite()).collect();
        let vmax = finite.iter().copied().fold(1e-9, f64::max) * 1.1;
        let n = vals.len().max(1) as i64;
        let slot = (right - left - 10) / n;
        for (i, v) in vals.iter().enumerate() {
            let v = if v.is_finite() { v.max(0.0) } else { vmax };
            let bh = ((v / vmax) * (bottom - top) as f64) as i64;
            let x = left + 10 + slot * i as i64;
            fill_rect(&mut img, x, bottom - bh, (slot - 8).max(2), bh, Rgb(PALETTE[i % PALETTE.len()]));
            draw_text(&mut img, x, bottom - bh - 14, &short(v, dec), 2, INK);
        }
    }
    img
}
