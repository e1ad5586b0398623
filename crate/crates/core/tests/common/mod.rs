//! Direct-loop reference implementations used as independent oracles.
#![allow(dead_code)]

use jdatt_core::data::{BBox, DetectionSet};

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn charbonnier(x: &[f64], y: &[f64], eps: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| ((a - b).powi(2) + eps * eps).sqrt()).sum::<f64>() / x.len() as f64
}

/// `1 − GIoU` of two corner boxes.
pub fn giou_loss(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let encl = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    1.0 - (inter / union - (encl - union) / encl)
}

pub fn corners(b: &BBox) -> [f64; 4] {
    [b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0]
}

/// IoU from overlap corners and the boxes' own `w·h` areas. Areas taken
/// from corner differences can round differently, which matters for cases
/// placed exactly on a threshold.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (p, q) = (corners(a), corners(b));
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU-aware focal label loss over every (cell, class) entry.
pub fn label_loss(p: &[f64], n: usize, k: usize, positives: &[(usize, usize, f64)], alpha: f64, gamma: f64) -> f64 {
    let mut total = 0.0;
    for cell in 0..n {
        for class in 0..k {
            let pi = p[cell * k + class];
            match positives.iter().find(|(c, cl, _)| *c == cell && *cl == class) {
                Some(&(_, _, iou)) => {
                    let t = pi.powf(alpha) * iou.powf(1.0 - alpha);
                    total += t * pi.ln() + (1.0 - t) * (1.0 - pi).ln();
                }
                None => total += pi.powf(gamma) * (1.0 - pi).ln(),
            }
        }
    }
    -total / n as f64
}

fn softmax(v: &[f64], tau: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| if *a > 0.0 { a * (a / b).ln() } else { 0.0 }).sum()
}

/// Channel-wise distillation on `c` rows of `hw` spatial values.
pub fn cwd(s: &[f64], t: &[f64], c: usize, tau: f64) -> f64 {
    let hw = s.len() / c;
    let sum: f64 = (0..c)
        .map(|i| {
            let r = i * hw..(i + 1) * hw;
            kl(&softmax(&t[r.clone()], tau), &softmax(&s[r], tau))
        })
        .sum();
    tau * tau * sum / c as f64
}

/// Output KL averaged over `n` cells of `k` logits.
pub fn kl_output(t: &[f64], s: &[f64], n: usize, tau: f64) -> f64 {
    let k = s.len() / n;
    let sum: f64 = (0..n)
        .map(|i| {
            let r = i * k..(i + 1) * k;
            kl(&softmax(&t[r.clone()], tau), &softmax(&s[r], tau))
        })
        .sum();
    tau * tau * sum / n as f64
}

/// Zero-padded 3×3 convolution of a `cin×h×w` map.
pub fn conv3x3(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let cout = bias.len();
    let mut out = vec![0.0; cout * h * w];
    for o in 0..cout {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[o];
                for i in 0..cin {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            acc += weight[((o * cin + i) * 3 + ky) * 3 + kx] * x[(i * h + sy as usize) * w + sx as usize];
                        }
                    }
                }
                out[(o * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// Generative distillation `Σ (T − G(S ⊙ M))²`; `layers` holds the two
/// (weight, bias) pairs of a conv→SiLU→conv generator, or is `None`.
pub fn mgd(s: &[f64], t: &[f64], mask: &[f64], c: usize, h: usize, w: usize, layers: Option<[(&[f64], &[f64]); 2]>) -> f64 {
    let masked: Vec<f64> = s.iter().enumerate().map(|(i, v)| v * mask[i % (h * w)]).collect();
    let gen = match layers {
        None => masked,
        Some([(w0, b0), (w1, b1)]) => {
            let hid: Vec<f64> = conv3x3(&masked, c, h, w, w0, b0).iter().map(|z| z / (1.0 + (-z).exp())).collect();
            conv3x3(&hid, c, h, w, w1, b1)
        }
    };
    t.iter().zip(&gen).map(|(a, b)| (a - b).powi(2)).sum()
}

/// AP by threshold enumeration: TP/FP per prediction from an explicit IoU
/// table, envelope as a max over every later rank. Sums run in rank,
/// threshold and class order so results coincide bit-for-bit with any
/// correct implementation of the same protocol.
pub fn map_50_95(preds: &[DetectionSet], gts: &[DetectionSet], k: usize) -> f64 {
    let present: Vec<usize> = (0..k).filter(|c| gts.iter().any(|g| g.labels.contains(c))).collect();
    if present.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &c in &present {
        let mut per_class = 0.0;
        for i in 0..10 {
            let thr = (50 + 5 * i) as f64 / 100.0;
            per_class += ap_one(preds, gts, c, thr);
        }
        sum += per_class / 10.0;
    }
    sum / present.len() as f64
}

fn ap_one(preds: &[DetectionSet], gts: &[DetectionSet], class: usize, thr: f64) -> f64 {
    // (score, frame, box); insertion sort keeps equal scores in input order
    let mut list: Vec<(f64, usize, BBox)> = Vec::new();
    for (f, p) in preds.iter().enumerate() {
        for i in 0..p.boxes.len() {
            if p.labels[i] == class {
                let item = (p.scores[i], f, p.boxes[i]);
                let at = list.iter().position(|e| e.0 < item.0).unwrap_or(list.len());
                list.insert(at, item);
            }
        }
    }
    let g: usize = gts.iter().map(|s| s.labels.iter().filter(|&&l| l == class).count()).sum();
    if g == 0 {
        return 0.0;
    }
    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut tp_flags = Vec::new();
    for (_, f, b) in &list {
        let mut choice: Option<usize> = None;
        let mut best = -1.0;
        for (j, gb) in gts[*f].boxes.iter().enumerate() {
            if gts[*f].labels[j] != class || taken.contains(&(*f, j)) {
                continue;
            }
            let iou = iou(b, gb);
            if iou >= thr && iou > best {
                best = iou;
                choice = Some(j);
            }
        }
        if let Some(j) = choice {
            taken.push((*f, j));
        }
        tp_flags.push(choice.is_some());
    }
    let n = tp_flags.len();
    let tp_at = |r: usize| tp_flags[..=r].iter().filter(|&&t| t).count();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in 0..n {
        let recall = tp_at(r) as f64 / g as f64;
        let env = (r..n).map(|j| tp_at(j) as f64 / (j + 1) as f64).fold(0.0, f64::max);
        ap += (recall - prev) * env;
        prev = recall;
    }
    ap
}

/// Plain per-pixel PSNR on a unit range.
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}
