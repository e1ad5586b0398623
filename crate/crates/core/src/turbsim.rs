//! Labelled toy scenes and a simplified turbulence degradation.
//!
//! The degradation applies three effects per frame: a smooth random tilt
//! field (rippling), a Gaussian blur, and a smooth multiplicative gain
//! (scintillation). Tilt and gain fields evolve as AR(1) processes across
//! frames so neighbouring frames share part of their distortion.

use jdatt_autograd::kernels::warp_bilinear;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use rayon::prelude::*;

use crate::data::{chw_to_hwc, hwc_to_chw, AnnotatedSample, BBox, DetectionSet, FrameSequence};
use crate::imgops::{filter_separable, gaussian_kernel};

/// Kernel truncation, in standard deviations.
pub const KERNEL_TRUNCATE: f64 = 4.0;

/// Number of distinct shape classes the renderer knows.
pub const MAX_CLASSES: usize = 4;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation parameters: {0}")]
    Params(String),
    #[error("invalid scene: {0}")]
    Scene(String),
    #[error("objects cannot fit: {0}")]
    CannotFit(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimParams {
    /// Standard deviation of the displacement field, pixels.
    pub tilt_strength: f64,
    /// Gaussian width used to smooth the displacement and gain fields, pixels.
    pub tilt_correlation_length: f64,
    pub blur_sigma: f64,
    /// Standard deviation of the multiplicative gain, in `[0, 1)`.
    pub scintillation_strength: f64,
    /// Frame-to-frame AR(1) coefficient of the tilt and gain fields.
    pub temporal_rho: f64,
    pub seed: u64,
}

impl SimParams {
    pub fn preset(name: &str) -> Option<Self> {
        let (tilt, blur, scint) = match name {
            "easy" => (1.0, 0.8, 0.05),
            "medium" => (2.0, 1.5, 0.1),
            "hard" => (3.0, 2.0, 0.15),
            _ => return None,
        };
        Some(Self {
            tilt_strength: tilt,
            tilt_correlation_length: 3.0,
            blur_sigma: blur,
            scintillation_strength: scint,
            temporal_rho: 0.5,
            seed: 0,
        })
    }

    pub fn identity() -> Self {
        Self {
            tilt_strength: 0.0,
            tilt_correlation_length: 1.0,
            blur_sigma: 0.0,
            scintillation_strength: 0.0,
            temporal_rho: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let all_finite = [
            self.tilt_strength,
            self.tilt_correlation_length,
            self.blur_sigma,
            self.scintillation_strength,
            self.temporal_rho,
        ]
        .iter()
        .all(|v| v.is_finite());
        let bad = |m: &str| Err(SimError::Params(m.to_string()));
        if !all_finite {
            return bad("non-finite field");
        }
        if self.tilt_strength < 0.0 {
            return bad("tilt_strength must be >= 0");
        }
        if self.tilt_correlation_length <= 0.0 {
            return bad("tilt_correlation_length must be > 0");
        }
        if self.blur_sigma < 0.0 {
            return bad("blur_sigma must be >= 0");
        }
        if !(0.0..1.0).contains(&self.scintillation_strength) {
            return bad("scintillation_strength must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.temporal_rho) {
            return bad("temporal_rho must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub num_objects: usize,
    pub num_classes: usize,
    /// `(H, W)`.
    pub canvas: (usize, usize),
    pub frames: usize,
    /// Speed of each object, pixels per frame.
    pub motion_amplitude: f64,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    3
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scene(m));
        if !(1..=8).contains(&self.num_objects) {
            return bad(format!("num_objects {} outside [1, 8]", self.num_objects));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return bad(format!("num_classes {} outside [2, {MAX_CLASSES}]", self.num_classes));
        }
        if self.canvas.0 < 8 || self.canvas.1 < 8 {
            return bad(format!("canvas {:?} smaller than 8×8", self.canvas));
        }
        if self.frames < 1 {
            return bad("frames must be >= 1".into());
        }
        if !(self.motion_amplitude.is_finite() && self.motion_amplitude >= 0.0) {
            return bad("motion_amplitude must be finite and >= 0".into());
        }
        if !(self.channels == 1 || self.channels == 3) {
            return bad(format!("channels {} not in {{1, 3}}", self.channels));
        }
        Ok(())
    }

    /// Half-extent range of rendered objects in pixels.
    fn radius_range(&self) -> (f64, f64) {
        let m = self.canvas.0.min(self.canvas.1) as f64;
        let lo = (0.08 * m).max(2.5);
        (lo, (0.15 * m).max(lo))
    }
}

/// Mixes a master seed with an index into an independent stream seed.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a golden-ratio stride
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
    Cross,
}

impl Shape {
    pub fn from_class(k: usize) -> Shape {
        [Shape::Square, Shape::Disc, Shape::Triangle, Shape::Cross][k % MAX_CLASSES]
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Disc => dx * dx + dy * dy <= r * r,
            Shape::Triangle => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
            Shape::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

struct SceneObject {
    shape: Shape,
    class: usize,
    radius: f64,
    color: Vec<f64>,
    positions: Vec<(f64, f64)>,
}

fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    filter_separable(&white, h, w, &gaussian_kernel(sigma, KERNEL_TRUNCATE))
}

/// Rescales to zero mean and unit standard deviation.
fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    for x in v {
        *x = (*x - mean) / sd;
    }
}

fn render_background(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut planes = Vec::with_capacity(c * h * w);
    let tau = std::f64::consts::TAU;
    for _ in 0..c {
        let base: f64 = rng.random_range(0.25..0.4);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.random_range(0.03..0.09),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.5..2.5),
                    rng.random_range(0.0..tau),
                )
            })
            .collect();
        let mut grain = smooth_noise(rng, h, w, 1.5);
        standardize(&mut grain);
        for y in 0..h {
            for x in 0..w {
                let mut v = base + 0.03 * grain[y * w + x];
                for &(amp, fx, fy, ph) in &waves {
                    v += amp * (tau * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + ph).sin();
                }
                planes.push(v.clamp(0.0, 1.0));
            }
        }
    }
    chw_to_hwc(&planes, c, h, w)
}

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>, SimError> {
    let (h, w) = spec.canvas;
    let (rlo, rhi) = spec.radius_range();
    if 2.0 * rhi + 1.0 > h.min(w) as f64 {
        return Err(SimError::CannotFit(format!("objects of radius {rhi:.1} exceed canvas {h}×{w}")));
    }
    let mut objects: Vec<SceneObject> = Vec::with_capacity(spec.num_objects);
    for i in 0..spec.num_objects {
        let class = rng.random_range(0..spec.num_classes);
        let radius = rng.random_range(rlo..=rhi);
        let color: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.6..0.95)).collect();
        let lo = (radius + 0.5, radius + 0.5);
        let hi = (w as f64 - radius - 0.5, h as f64 - radius - 0.5);
        let mut start = None;
        for _ in 0..200 {
            let p = (rng.random_range(lo.0..=hi.0), rng.random_range(lo.1..=hi.1));
            let clear = objects.iter().all(|o| {
                let q = o.positions[0];
                (p.0 - q.0).abs() > radius + o.radius + 1.0 || (p.1 - q.1).abs() > radius + o.radius + 1.0
            });
            if clear {
                start = Some(p);
                break;
            }
        }
        let Some(start) = start else {
            return Err(SimError::CannotFit(format!(
                "no free position for object {i} of {} on a {h}×{w} canvas",
                spec.num_objects
            )));
        };
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let v = (spec.motion_amplitude * theta.cos(), spec.motion_amplitude * theta.sin());
        let jitter = 0.25 * spec.motion_amplitude;
        let positions = (0..spec.frames)
            .map(|t| {
                let jx: f64 = StandardNormal.sample(rng);
                let jy: f64 = StandardNormal.sample(rng);
                let x = start.0 + v.0 * t as f64 + jitter * jx;
                let y = start.1 + v.1 * t as f64 + jitter * jy;
                (x.clamp(lo.0, hi.0), y.clamp(lo.1, hi.1))
            })
            .collect();
        objects.push(SceneObject {
            shape: Shape::from_class(class),
            class,
            radius,
            color,
            positions,
        });
    }
    Ok(objects)
}

/// Paints `obj` at frame `t` and returns the exact pixel extent of its mask.
fn draw_object(frame: &mut [f64], h: usize, w: usize, c: usize, obj: &SceneObject, t: usize) -> Option<BBox> {
    let (px, py) = obj.positions[t];
    let r = obj.radius;
    let x_lo = ((px - r - 1.0).floor().max(0.0)) as usize;
    let x_hi = ((px + r + 1.0).ceil() as usize).min(w);
    let y_lo = ((py - r - 1.0).floor().max(0.0)) as usize;
    let y_hi = ((py + r + 1.0).ceil() as usize).min(h);
    let mut extent: Option<(usize, usize, usize, usize)> = None;
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let (dx, dy) = (x as f64 + 0.5 - px, y as f64 + 0.5 - py);
            if obj.shape.contains(dx, dy, r) {
                frame[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&obj.color);
                extent = Some(match extent {
                    None => (x, y, x, y),
                    Some((a, b, cc, d)) => (a.min(x), b.min(y), cc.max(x), d.max(y)),
                });
            }
        }
    }
    extent.map(|(x0, y0, x1, y1)| {
        BBox::from_corners(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            (x1 + 1) as f64 / w as f64,
            (y1 + 1) as f64 / h as f64,
        )
    })
}

/// Renders a clean clip and its exact per-frame boxes.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<(FrameSequence, Vec<DetectionSet>), SimError> {
    spec.validate()?;
    let (h, w) = spec.canvas;
    let c = spec.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = render_background(&mut rng, h, w, c);
    let objects = place_objects(spec, &mut rng)?;
    let mut data = Vec::with_capacity(spec.frames * h * w * c);
    let mut dets = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let mut frame = background.clone();
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for obj in &objects {
            let b = draw_object(&mut frame, h, w, c, obj, t)
                .ok_or_else(|| SimError::CannotFit("object rendered no pixels".into()))?;
            boxes.push(b);
            labels.push(obj.class);
        }
        data.extend(frame);
        dets.push(DetectionSet::ground_truth(t, boxes, labels));
    }
    let seq = FrameSequence::new(format!("scene_{seed:016x}"), [spec.frames, h, w, c], data)
        .map_err(|e| SimError::Scene(e.to_string()))?;
    Ok((seq, dets))
}

/// Fresh unit-variance field blended with the previous one.
fn ar1_field(prev: Option<Vec<f64>>, fresh: Vec<f64>, rho: f64) -> Vec<f64> {
    match prev {
        None => fresh,
        Some(p) => {
            let a = (1.0 - rho * rho).max(0.0).sqrt();
            p.iter().zip(&fresh).map(|(x, f)| rho * x + a * f).collect()
        }
    }
}

fn unit_field(rng: &mut ChaCha8Rng, planes: usize, h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes * h * w);
    for _ in 0..planes {
        let mut p = smooth_noise(rng, h, w, sigma);
        standardize(&mut p);
        out.extend(p);
    }
    out
}

/// Applies tilt, blur and scintillation to every frame of `clean`.
pub fn degrade(clean: &FrameSequence, params: &SimParams) -> Result<FrameSequence, SimError> {
    params.validate()?;
    let [t_len, h, w, c] = clean.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let blur = (params.blur_sigma > 0.0).then(|| gaussian_kernel(params.blur_sigma, KERNEL_TRUNCATE));
    let mut tilt_state: Option<Vec<f64>> = None;
    let mut gain_state: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(clean.data().len());
    for t in 0..t_len {
        let mut planes = hwc_to_chw(clean.frame(t), c, h, w);
        if params.tilt_strength > 0.0 {
            let fresh = unit_field(&mut rng, 2, h, w, params.tilt_correlation_length);
            let field = ar1_field(tilt_state.take(), fresh, params.temporal_rho);
            let flow: Vec<f64> = field.iter().map(|v| v * params.tilt_strength).collect();
            planes = warp_bilinear(&planes, c, h, w, &flow);
            tilt_state = Some(field);
        }
        if let Some(k) = &blur {
            planes = planes.chunks(h * w).flat_map(|p| filter_separable(p, h, w, k)).collect();
        }
        if params.scintillation_strength > 0.0 {
            let fresh = unit_field(&mut rng, 1, h, w, params.tilt_correlation_length);
            let field = ar1_field(gain_state.take(), fresh, params.temporal_rho);
            for plane in planes.chunks_mut(h * w) {
                for (v, g) in plane.iter_mut().zip(&field) {
                    *v *= 1.0 + params.scintillation_strength * g;
                }
            }
            gain_state = Some(field);
        }
        out.extend(chw_to_hwc(&planes, c, h, w).into_iter().map(|v| v.clamp(0.0, 1.0)));
    }
    let mut seq = FrameSequence::new(clean.sequence_id(), clean.dims(), out).map_err(|e| SimError::Params(e.to_string()))?;
    seq.frame_rate_hint = clean.frame_rate_hint;
    Ok(seq)
}

/// Generates and degrades sequences `indices` of a dataset; every sequence
/// draws its scene and degradation seeds from `derive_seed(master, index)`.
pub fn generate_samples(
    scene: &SceneSpec,
    sim: &SimParams,
    master_seed: u64,
    indices: std::ops::Range<u64>,
) -> Result<Vec<AnnotatedSample>, SimError> {
    scene.validate()?;
    sim.validate()?;
    indices
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, i);
            let (clean, ground_truth) = generate_scene(scene, seed)?;
            let params = sim.clone().with_seed(derive_seed(seed, 1));
            let id = format!("seq_{i:05}");
            let relabel = |s: &FrameSequence| {
                FrameSequence::new(id.clone(), s.dims(), s.data().to_vec()).map_err(|e| SimError::Scene(e.to_string()))
            };
            let clean = relabel(&clean)?;
            let degraded = degrade(&clean, &params)?;
            Ok(AnnotatedSample {
                degraded,
                clean,
                ground_truth,
                sim_params: params,
                master_seed,
            })
        })
        .collect()
}
