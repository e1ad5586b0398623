//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. `JDATT_ACCEPT=1,4,5` restricts the run to the listed criteria;
//! criteria left out are reported as SKIP and never count as passing.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Instant;

use jdatt_autograd::{gradcheck, Graph, Tensor, Var};
use jdatt_core::config::RunConfig;
use jdatt_core::data::{AnnotatedSample, BBox, DetectionSet, FeatureMap, LogitSet, Source};
use jdatt_core::distill::{Phase, TrainMode, TrainState, Teachers};
use jdatt_core::evalkit::{benchmark_system, evaluate_system, map_50_95, psnr, ssim, System};
use jdatt_core::losses::*;
use jdatt_core::nets::{build_model, checkpoint_digest, count_parameters, Model, ModelKind, ModelSpec, Variant};
use jdatt_core::pipeline::{self, NamedSystem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Line {
    id: usize,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn report(lines: &mut Vec<Line>, id: usize, title: &'static str, t0: Instant, pass: bool, detail: String) {
    let line = Line {
        id,
        title,
        pass,
        detail,
        secs: t0.elapsed().as_secs_f64(),
    };
    println!(
        "criterion {:>2}  {}  {} ({:.1} s): {}",
        line.id,
        if line.pass { "PASS" } else { "FAIL" },
        line.title,
        line.secs,
        line.detail
    );
    lines.push(line);
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn fmap(values: Tensor, src: Source) -> FeatureMap {
    FeatureMap::new(values, "tap", src).unwrap()
}

fn logits(values: Tensor, src: Source) -> LogitSet {
    LogitSet::new(values, src).unwrap()
}

/// Tracks the worst relative error of a batch of checks.
#[derive(Default)]
struct Worst {
    err: f64,
    what: String,
    count: usize,
}

impl Worst {
    fn see(&mut self, what: &str, got: f64, want: f64) {
        let e = if got == want { 0.0 } else { common::rel_err(got, want) };
        self.count += 1;
        if e > self.err || self.what.is_empty() {
            self.err = e.max(self.err);
            self.what = format!("{what}: got {got:.12e}, want {want:.12e}");
        }
    }

    fn see_abs(&mut self, what: &str, got: f64, want: f64) {
        let e = (got - want).abs();
        self.count += 1;
        if e > self.err || self.what.is_empty() {
            self.err = e.max(self.err);
            self.what = format!("{what}: got {got:.3e}, want {want:.3e}");
        }
    }
}

// ---------------------------------------------------------------- 1

fn loss_oracles() -> (bool, String) {
    let mut w = Worst::default();
    let t1 = |v: f64| Tensor::new(&[1], vec![v]).unwrap();
    let ch = |d: f64| charbonnier(&t1(0.25 + d), &t1(0.25), 1e-3).unwrap();
    w.see("charbonnier x=y", ch(0.0), 1e-3);
    w.see("charbonnier |d|=3e-3", ch(3e-3), 1e-5f64.sqrt());
    w.see("charbonnier |d|=1", ch(1.0), (1.0f64 + 1e-6).sqrt());

    let unit = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
    let giou = |a: BBox, b: BBox| giou_loss(&[a], &[b]).unwrap().value;
    w.see("giou identical", giou(unit, unit) + 1.0, 1.0);
    w.see("giou corner-touching", giou(unit, BBox::from_corners(1.0, 1.0, 2.0, 2.0)), 1.5);
    w.see("giou half overlap", giou(BBox::from_corners(0.0, 0.0, 2.0, 2.0), BBox::from_corners(1.0, 0.0, 3.0, 2.0)), 2.0 / 3.0);

    let b = BBox::new(0.5, 0.5, 0.2, 0.3);
    w.see("box_l1 identical", box_l1_loss(&[b], &[b]).unwrap().value + 1.0, 1.0);
    w.see("box_l1 +0.1 cx", box_l1_loss(&[BBox { cx: 0.6, ..b }], &[b]).unwrap().value, 0.025);

    let cfg = DetectionLossConfig::default();
    let one = |p: f64| Tensor::new(&[1, 1], vec![p]).unwrap();
    let pos = Assignment {
        num_cells: 1,
        positives: vec![Positive { cell: 0, class: 0, target: 0, iou: 1.0 }],
    };
    let neg = Assignment { num_cells: 1, positives: vec![] };
    w.see("label one positive", label_loss(&one(0.5), &pos, &cfg).unwrap(), std::f64::consts::LN_2);
    w.see("label one negative", label_loss(&one(0.5), &neg, &cfg).unwrap(), 0.25 * std::f64::consts::LN_2);
    let confident = label_loss(&Tensor::full(&[4, 3], 1e-7), &Assignment { num_cells: 4, positives: vec![] }, &cfg).unwrap();
    w.see_abs("label confident negatives", confident, 0.0);

    let e = std::f64::consts::E;
    let ab = |a: f64, b: f64| Tensor::new(&[1, 2], vec![a, b]).unwrap();
    let cwd = cwd_loss(
        &fmap(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap(), Source::Student),
        &fmap(Tensor::new(&[1, 1, 2], vec![1.0, 0.0]).unwrap(), Source::Teacher),
        1.0,
    )
    .unwrap();
    w.see("cwd (1,0) vs (0,1)", cwd, (e - 1.0) / (e + 1.0));
    let kl = kl_output_loss(&logits(ab(1.0, 0.0), Source::Teacher), &logits(ab(0.0, 1.0), Source::Student), 1.0).unwrap();
    w.see("kl (1,0) vs (0,1)", kl, (e - 1.0) / (e + 1.0));

    let s = Tensor::new(&[1, 2, 2], vec![0.1, -0.2, 0.3, 0.4]).unwrap();
    let t = s.map(|v| v + 1.0);
    let mgd = mgd_loss(&fmap(s, Source::Student), &fmap(t, Source::Teacher), 3, 0.0, &Generator::identity(), &Aligner::new(1, [1, 2, 2], 0)).unwrap();
    w.see("mgd T-S=1 on 1x2x2", mgd, 4.0);

    // seeded instances against the direct-loop oracles
    for seed in 0..50u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..30);
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let got = charbonnier(&Tensor::new(&[n], x.clone()).unwrap(), &Tensor::new(&[n], y.clone()).unwrap(), 1e-3).unwrap();
        w.see("charbonnier random", got, common::charbonnier(&x, &y, 1e-3));

        let rb = |r: &mut ChaCha8Rng| BBox::new(r.random_range(0.2..0.8), r.random_range(0.2..0.8), r.random_range(0.05..0.5), r.random_range(0.05..0.5));
        let (pa, pb) = (rb(&mut r), rb(&mut r));
        w.see("giou random", giou(pa, pb), common::giou_loss(common::corners(&pa), common::corners(&pb)));
        let l1 = box_l1_loss(&[pa], &[pb]).unwrap().value;
        let want = [pa.cx - pb.cx, pa.cy - pb.cy, pa.w - pb.w, pa.h - pb.h].iter().map(|d| d.abs()).sum::<f64>() / 4.0;
        w.see("box_l1 random", l1, want);

        let (cells, k) = (r.random_range(1..8), r.random_range(1..4));
        let p: Vec<f64> = (0..cells * k).map(|_| r.random_range(0.01..0.99)).collect();
        let mut used = BTreeSet::new();
        let positives: Vec<Positive> = (0..r.random_range(0..=cells))
            .filter_map(|_| {
                let cell = r.random_range(0..cells);
                let class = r.random_range(0..k);
                let iou = r.random_range(0.0..1.0);
                used.insert(cell).then_some(Positive { cell, class, target: 0, iou })
            })
            .collect();
        let (alpha, gamma) = (r.random_range(0.05..0.95), r.random_range(0.0..3.0));
        let cfg = DetectionLossConfig { alpha, gamma, ..DetectionLossConfig::default() };
        let a = Assignment { num_cells: cells, positives: positives.clone() };
        let got = label_loss(&Tensor::new(&[cells, k], p.clone()).unwrap(), &a, &cfg).unwrap();
        let triples: Vec<_> = positives.iter().map(|q| (q.cell, q.class, q.iou)).collect();
        w.see("label random", got, common::label_loss(&p, cells, k, &triples, alpha, gamma));

        let (c, hw, tau) = (r.random_range(1..4), r.random_range(2..9), r.random_range(0.5..4.0));
        let sv: Vec<f64> = (0..c * hw).map(|_| r.random_range(-2.0..2.0)).collect();
        let tv: Vec<f64> = (0..c * hw).map(|_| r.random_range(-2.0..2.0)).collect();
        let got = cwd_loss(
            &fmap(Tensor::new(&[c, 1, hw], sv.clone()).unwrap(), Source::Student),
            &fmap(Tensor::new(&[c, 1, hw], tv.clone()).unwrap(), Source::Teacher),
            tau,
        )
        .unwrap();
        w.see("cwd random", got, common::cwd(&sv, &tv, c, tau));
        let got = kl_output_loss(
            &logits(Tensor::new(&[c, hw], tv.clone()).unwrap(), Source::Teacher),
            &logits(Tensor::new(&[c, hw], sv.clone()).unwrap(), Source::Student),
            tau,
        )
        .unwrap();
        w.see("kl random", got, common::kl_output(&tv, &sv, c, tau));

        let (h, wd) = (r.random_range(1..5), r.random_range(1..5));
        let sv: Vec<f64> = (0..c * h * wd).map(|_| r.random_range(-1.0..1.0)).collect();
        let tv: Vec<f64> = (0..c * h * wd).map(|_| r.random_range(-1.0..1.0)).collect();
        let ratio = r.random_range(0.0..0.9);
        let gen = Generator::conv(c, seed);
        let got = mgd_loss(
            &fmap(Tensor::new(&[c, h, wd], sv.clone()).unwrap(), Source::Student),
            &fmap(Tensor::new(&[c, h, wd], tv.clone()).unwrap(), Source::Teacher),
            seed,
            ratio,
            &gen,
            &Aligner::new(c, [c, h, wd], seed),
        )
        .unwrap();
        let prm = |name: &str| gen.params.get(gen.params.find(name).unwrap()).data().to_vec();
        let (w0, b0, w1, b1) = (prm("gen.0.weight"), prm("gen.0.bias"), prm("gen.1.weight"), prm("gen.1.bias"));
        let mask = spatial_mask(seed, h, wd, ratio);
        w.see("mgd random", got, common::mgd(&sv, &tv, &mask, c, h, wd, Some([(&w0, &b0), (&w1, &b1)])));
    }
    (w.err <= 1e-6, format!("{} checks, worst relative error {:.2e} ({})", w.count, w.err, w.what))
}

// ---------------------------------------------------------------- 2

const FD_STEP: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-12;
const FD_INSTANCES: u64 = 20;

/// Worst relative error of `f` over `FD_INSTANCES` seeded input sets.
fn fd_family(make: impl Fn(u64) -> (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Var>)) -> f64 {
    (0..FD_INSTANCES)
        .map(|seed| {
            let (inputs, f) = make(seed);
            gradcheck::check(|g, v| f(g, v), &inputs, FD_STEP)
                .iter()
                .map(|c| c.relative_error(FD_FLOOR))
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(uniform(&mut rng(seed ^ 0xabc), &shape, -1.0, 1.0));
    let m = g.mul(x, w);
    g.sum(m)
}

fn rand_boxes(r: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n, 4], |i| if i % 4 < 2 { r.random_range(0.3..0.7) } else { r.random_range(0.1..0.5) })
}

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec {
        base_channels: 2,
        depth: 1,
        ..ModelSpec::preset(kind, Variant::Small, 2)
    }
}

fn gradient_suite() -> (bool, String) {
    let mut results: Vec<(&str, f64)> = Vec::new();
    results.push((
        "charbonnier",
        fd_family(|s| {
            let mut r = rng(s);
            let x = uniform(&mut r, &[2, 3, 3], 0.0, 1.0);
            let y = uniform(&mut r, &[2, 3, 3], 0.0, 1.0);
            (vec![x, y], Box::new(|g: &mut Graph, v: &[Var]| charbonnier_graph(g, v[0], v[1], 1e-3)))
        }),
    ));
    results.push((
        "giou",
        fd_family(|s| {
            let mut r = rng(s);
            let n = r.random_range(1..5);
            (vec![rand_boxes(&mut r, n), rand_boxes(&mut r, n)], Box::new(|g: &mut Graph, v: &[Var]| giou_graph(g, v[0], v[1])))
        }),
    ));
    results.push((
        "box_l1",
        fd_family(|s| {
            let mut r = rng(s);
            let n = r.random_range(1..5);
            (vec![rand_boxes(&mut r, n), rand_boxes(&mut r, n)], Box::new(|g: &mut Graph, v: &[Var]| box_l1_graph(g, v[0], v[1])))
        }),
    ));
    results.push((
        "label",
        fd_family(|s| {
            let mut r = rng(s);
            let (n, k) = (r.random_range(1..7), r.random_range(1..4));
            let p = uniform(&mut r, &[n, k], 0.05, 0.95);
            let cfg = DetectionLossConfig {
                alpha: r.random_range(0.1..0.9),
                gamma: r.random_range(0.0..3.0),
                ..DetectionLossConfig::default()
            };
            let mut used = BTreeSet::new();
            // (cell, class, soft target at the unperturbed probabilities)
            let targets: Vec<(usize, usize, f64)> = (0..r.random_range(1..=n))
                .filter_map(|_| {
                    let (cell, class) = (r.random_range(0..n), r.random_range(0..k));
                    let iou: f64 = r.random_range(0.1..1.0);
                    let t = p.data()[cell * k + class].powf(cfg.alpha) * iou.powf(1.0 - cfg.alpha);
                    used.insert(cell).then_some((cell, class, t))
                })
                .collect();
            // the soft target is a constant of the objective, so every
            // evaluation picks the IoU that reproduces it exactly
            let f = move |g: &mut Graph, v: &[Var]| {
                let pv = g.value(v[0]).data().to_vec();
                let positives = targets
                    .iter()
                    .map(|&(cell, class, t)| Positive {
                        cell,
                        class,
                        target: 0,
                        iou: (t / pv[cell * k + class].powf(cfg.alpha)).powf(1.0 / (1.0 - cfg.alpha)),
                    })
                    .collect();
                label_loss_graph(g, v[0], &Assignment { num_cells: n, positives }, &cfg)
            };
            (vec![p], Box::new(f))
        }),
    ));
    results.push((
        "cwd",
        fd_family(|s| {
            let mut r = rng(s);
            let (c, h, w) = (r.random_range(1..4), r.random_range(1..4), r.random_range(2..4));
            let t = uniform(&mut r, &[c, h, w], -2.0, 2.0);
            let tau = r.random_range(0.5..4.0);
            let st = uniform(&mut r, &[c, h, w], -2.0, 2.0);
            (vec![st], Box::new(move |g: &mut Graph, v: &[Var]| {
                let tv = g.constant(t.clone());
                cwd_graph(g, v[0], tv, tau)
            }))
        }),
    ));
    results.push((
        "kl",
        fd_family(|s| {
            let mut r = rng(s);
            let (n, k) = (r.random_range(1..6), r.random_range(2..5));
            let t = uniform(&mut r, &[n, k], -3.0, 3.0);
            let tau = r.random_range(0.5..4.0);
            let st = uniform(&mut r, &[n, k], -3.0, 3.0);
            (vec![st], Box::new(move |g: &mut Graph, v: &[Var]| {
                let tv = g.constant(t.clone());
                kl_graph(g, tv, v[0], tau)
            }))
        }),
    ));
    results.push((
        "mgd",
        fd_family(|s| {
            let mut r = rng(s);
            let (cs, ct) = (r.random_range(1..4), r.random_range(1..4));
            let (h, w) = (r.random_range(2..5), r.random_range(2..5));
            let student = uniform(&mut r, &[cs, h, w], -1.0, 1.0);
            let target = [ct, r.random_range(2..5), r.random_range(2..5)];
            let teacher = uniform(&mut r, &target, -1.0, 1.0);
            let aligner = Aligner::new(cs, target, s);
            let gen = Generator::conv(ct, s + 1);
            let mask = spatial_mask(s, target[1], target[2], 0.5);
            let na = aligner.params.len();
            let mut inputs = vec![student];
            inputs.extend(aligner.params.tensors().iter().cloned());
            inputs.extend(gen.params.tensors().iter().cloned());
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                let aligned = aligner.apply(g, &v[1..1 + na], v[0]);
                let tv = g.constant(teacher.clone());
                mgd_graph(g, aligned, tv, &mask, &gen, &v[1 + na..])
            }))
        }),
    ));
    results.push((
        "restoration forward",
        fd_family(|s| {
            let model = build_model(&tiny_spec(ModelKind::Restoration), s).unwrap();
            let window = uniform(&mut rng(s), &[model.spec.window * 3, 8, 8], 0.1, 0.9);
            let mut inputs = vec![window];
            inputs.extend(model.params.tensors().iter().cloned());
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                let out = model.restoration_graph(g, &v[1..], v[0]).unwrap();
                weighted_sum(g, out.output, s)
            }))
        }),
    ));
    results.push((
        "detector forward",
        fd_family(|s| {
            let model = build_model(&tiny_spec(ModelKind::Detector), s).unwrap();
            let frame = uniform(&mut rng(s), &[3, 16, 16], 0.0, 1.0);
            let mut inputs = vec![frame];
            inputs.extend(model.params.tensors().iter().cloned());
            (inputs, Box::new(move |g: &mut Graph, v: &[Var]| {
                let out = model.detector_graph(g, &v[1..], v[0]).unwrap();
                let a = weighted_sum(g, out.logits, s);
                let b = weighted_sum(g, out.boxes, s + 1);
                g.add(a, b)
            }))
        }),
    ));
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let detail = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (worst < 1e-3, format!("{FD_INSTANCES} instances each; worst relative error per family: {detail}"))
}

// ---------------------------------------------------------------- 3

fn fixed_points() -> (bool, String) {
    let mut fixed = Worst::default();
    let mut shift = Worst::default();
    for seed in 0..20u64 {
        let mut r = rng(100 + seed);
        let (c, h, w) = (r.random_range(1..5), r.random_range(1..6), r.random_range(1..6));
        let tau = r.random_range(0.5..4.0);
        let x = uniform(&mut r, &[c, h, w], -3.0, 3.0);
        let cwd = |s: &Tensor, t: &Tensor| cwd_loss(&fmap(s.clone(), Source::Student), &fmap(t.clone(), Source::Teacher), tau).unwrap();
        fixed.see_abs("cwd", cwd(&x, &x), 0.0);
        let mgd = mgd_loss(&fmap(x.clone(), Source::Student), &fmap(x.clone(), Source::Teacher), seed, 0.0, &Generator::identity(), &Aligner::new(c, [c, h, w], seed)).unwrap();
        fixed.see_abs("mgd", mgd, 0.0);
        let y = uniform(&mut r, &[c, h, w], -3.0, 3.0);
        let base = cwd(&y, &x);
        // one constant per channel, applied to either side
        let offs: Vec<f64> = (0..c).map(|_| r.random_range(-10.0..10.0)).collect();
        let shifted = |t: &Tensor| Tensor::from_fn(&[c, h, w], |i| t.data()[i] + offs[i / (h * w)]);
        shift.see_abs("cwd student shift", cwd(&shifted(&y), &x), base);
        shift.see_abs("cwd teacher shift", cwd(&y, &shifted(&x)), base);

        let (n, k) = (r.random_range(1..8), r.random_range(2..6));
        let z = uniform(&mut r, &[n, k], -3.0, 3.0);
        let kl = |t: &Tensor, s: &Tensor| kl_output_loss(&logits(t.clone(), Source::Teacher), &logits(s.clone(), Source::Student), tau).unwrap();
        fixed.see_abs("kl", kl(&z, &z), 0.0);
        let zs = uniform(&mut r, &[n, k], -3.0, 3.0);
        let base = kl(&z, &zs);
        let offs: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let shifted = |t: &Tensor| Tensor::from_fn(&[n, k], |i| t.data()[i] + offs[i / k]);
        shift.see_abs("kl student shift", kl(&z, &shifted(&zs)), base);
        shift.see_abs("kl teacher shift", kl(&shifted(&z), &zs), base);
    }
    (
        fixed.err <= 1e-10 && shift.err <= 1e-10,
        format!(
            "fixed points worst |loss| {:.1e} over {} ({}); shift worst |delta| {:.1e} over {} ({})",
            fixed.err, fixed.count, fixed.what, shift.err, shift.count, shift.what
        ),
    )
}

// ---------------------------------------------------------------- 4

struct MapCase {
    name: String,
    preds: Vec<DetectionSet>,
    gts: Vec<DetectionSet>,
    classes: usize,
    expected: Option<f64>,
}

fn pred(frame: usize, items: &[(BBox, usize, f64)]) -> DetectionSet {
    DetectionSet {
        frame_index: frame,
        boxes: items.iter().map(|i| i.0).collect(),
        labels: items.iter().map(|i| i.1).collect(),
        scores: items.iter().map(|i| i.2).collect(),
    }
}

fn gt(frame: usize, items: &[(BBox, usize)]) -> DetectionSet {
    DetectionSet::ground_truth(frame, items.iter().map(|i| i.0).collect(), items.iter().map(|i| i.1).collect())
}

fn map_corpus() -> Vec<MapCase> {
    let mut cases = Vec::new();
    let mut add = |name: String, preds, gts, classes, expected| cases.push(MapCase { name, preds, gts, classes, expected });
    let g0 = BBox::new(0.5, 0.3125, 1.0, 0.625);
    add("iou 0.60".into(), vec![pred(0, &[(BBox::new(0.5, 0.1875, 1.0, 0.375), 0, 0.9)])], vec![gt(0, &[(g0, 0)])], 1, Some(0.3));
    add("iou 1".into(), vec![pred(0, &[(g0, 0, 0.9)])], vec![gt(0, &[(g0, 0)])], 1, Some(1.0));
    add("no predictions".into(), vec![pred(0, &[])], vec![gt(0, &[(g0, 0)])], 1, Some(0.0));
    add("wrong class".into(), vec![pred(0, &[(g0, 1, 0.9)])], vec![gt(0, &[(g0, 0)])], 2, Some(0.0));

    // horizontal shift sweep crossing every threshold
    let base = BBox::new(0.5, 0.5, 0.4, 0.4);
    for i in 0..=12 {
        let dx = 0.01 * i as f64;
        add(format!("shift {dx:.2}"), vec![pred(0, &[(BBox { cx: 0.5 + dx, ..base }, 0, 0.8)])], vec![gt(0, &[(base, 0)])], 1, None);
    }
    // lower-scored duplicates of a perfect hit
    for d in 1..=5 {
        let items: Vec<_> = (0..=d).map(|j| (base, 0, 1.0 - 0.1 * j as f64)).collect();
        add(format!("{d} duplicates"), vec![pred(0, &items)], vec![gt(0, &[(base, 0)])], 1, None);
    }
    // false positives ranked above a true positive
    let far = BBox::new(0.15, 0.15, 0.1, 0.1);
    for fps in 0..=5 {
        let mut items: Vec<_> = (0..fps).map(|j| (far, 0, 0.9 - 0.01 * j as f64)).collect();
        items.push((base, 0, 0.5));
        add(format!("{fps} leading false positives"), vec![pred(0, &items)], vec![gt(0, &[(base, 0)])], 1, None);
    }
    // two objects, all score orders of one hit, one near-miss, one miss
    let a = BBox::new(0.25, 0.25, 0.3, 0.3);
    let b = BBox::new(0.75, 0.75, 0.3, 0.3);
    let near = BBox { cx: 0.8, ..b };
    for (sa, sb, sf) in [(0.9, 0.8, 0.7), (0.9, 0.7, 0.8), (0.8, 0.9, 0.7), (0.7, 0.9, 0.8), (0.8, 0.7, 0.9), (0.7, 0.8, 0.9)] {
        add(
            format!("two objects scores {sa}/{sb}/{sf}"),
            vec![pred(0, &[(a, 0, sa), (near, 0, sb), (far, 0, sf)])],
            vec![gt(0, &[(a, 0), (b, 0)])],
            1,
            None,
        );
    }
    // tied scores between a hit and a miss, both input orders
    for first_hit in [true, false] {
        for classes in [1, 3] {
            let items = if first_hit { [(base, 0, 0.5), (far, 0, 0.5)] } else { [(far, 0, 0.5), (base, 0, 0.5)] };
            add(format!("tie hit-first {first_hit} k{classes}"), vec![pred(0, &items)], vec![gt(0, &[(base, 0)])], classes, None);
        }
    }
    // several frames, some without predictions or without objects
    for missing in 0..4 {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for f in 0..4 {
            let bx = BBox::new(0.2 + 0.15 * f as f64, 0.5, 0.2, 0.25);
            gts.push(if f == 3 { gt(f, &[]) } else { gt(f, &[(bx, f % 2)]) });
            preds.push(if f == missing { pred(f, &[]) } else { pred(f, &[(BBox { cy: 0.52, ..bx }, f % 2, 0.3 + 0.1 * f as f64)]) });
        }
        add(format!("four frames missing {missing}"), preds, gts, 2, None);
    }
    // two classes, one class absent from ground truth
    for absent_pred in [false, true] {
        let mut items = vec![(a, 0, 0.6), (b, 1, 0.7)];
        if absent_pred {
            items.push((far, 2, 0.95));
        }
        add(format!("absent class predicted {absent_pred}"), vec![pred(0, &items)], vec![gt(0, &[(a, 0), (b, 1)])], 3, None);
    }
    // overlapping ground truths competing for one prediction
    for k in 0..6 {
        let g1 = BBox::new(0.45, 0.5, 0.3, 0.3);
        let g2 = BBox::new(0.55, 0.5, 0.3, 0.3);
        let p = BBox::new(0.46 + 0.02 * k as f64, 0.5, 0.3, 0.3);
        add(format!("competing truths {k}"), vec![pred(0, &[(p, 0, 0.9), (g2, 0, 0.4)])], vec![gt(0, &[(g1, 0), (g2, 0)])], 1, None);
    }
    // size mismatch sweep
    for i in 0..6 {
        let s = 0.4 + 0.05 * i as f64;
        add(format!("scaled {s:.2}"), vec![pred(0, &[(BBox { w: s, h: s, ..base }, 0, 0.9)])], vec![gt(0, &[(base, 0)])], 1, None);
    }
    cases
}

fn map_oracle_suite() -> (bool, String) {
    let cases = map_corpus();
    let mut mismatches = Vec::new();
    for c in &cases {
        let got = map_50_95(&c.preds, &c.gts, c.classes).unwrap();
        let want = common::map_50_95(&c.preds, &c.gts, c.classes);
        if got != want {
            mismatches.push(format!("{}: {got} vs oracle {want}", c.name));
        }
        if let Some(e) = c.expected {
            if (got - e).abs() > 1e-12 {
                mismatches.push(format!("{}: {got} vs stated {e}", c.name));
            }
        }
    }
    let named: Vec<String> = cases
        .iter()
        .filter(|c| c.expected.is_some())
        .map(|c| format!("{} -> {}", c.name, map_50_95(&c.preds, &c.gts, c.classes).unwrap()))
        .collect();
    (
        cases.len() >= 50 && mismatches.is_empty(),
        format!("{} cases, {} mismatches [{}]; {}", cases.len(), mismatches.len(), mismatches.join("; "), named.join(", ")),
    )
}

// ---------------------------------------------------------------- 5

fn metric_references() -> (bool, String) {
    let mut r = rng(5);
    let a: Vec<f64> = (0..3 * 32 * 32).map(|_| r.random_range(0.0..0.9)).collect();
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    let p = psnr(&a, &b).unwrap();
    let img = Tensor::new(&[3, 32, 32], a).unwrap();
    let s = ssim(&img, &img).unwrap();
    (
        (p - 20.0).abs() <= 1e-9 && (s - 1.0).abs() <= 1e-12,
        format!("psnr {p:.12} dB (|err| {:.1e}), ssim(a,a) {s} (|err| {:.1e})", (p - 20.0).abs(), (s - 1.0).abs()),
    )
}

// ---------------------------------------------------------------- 7

fn compression_ordering(cfg: &RunConfig) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    let ladder = [Variant::Teacher, Variant::Large, Variant::Medium, Variant::Small];
    for kind in [ModelKind::Restoration, ModelKind::Detector] {
        let counts: Vec<usize> = ladder
            .iter()
            .map(|&v| count_parameters(&build_model(&ModelSpec::preset(kind, v, cfg.data.num_classes), 0).unwrap()))
            .collect();
        ok &= counts.windows(2).all(|w| w[0] > w[1]);
        parts.push(format!("{kind:?} {counts:?}"));
    }
    let wide: Vec<usize> = ladder
        .iter()
        .zip([64, 48, 32, 16])
        .map(|(&v, base_channels)| {
            let spec = ModelSpec {
                base_channels,
                ..ModelSpec::preset(ModelKind::Detector, v, cfg.data.num_classes)
            };
            count_parameters(&build_model(&spec, 0).unwrap())
        })
        .collect();
    ok &= wide.windows(2).all(|w| w[0] > w[1]);
    parts.push(format!("detector widths 64/48/32/16 {wide:?}"));

    let specs = cfg.model_specs();
    let pair = |(r, d): (&ModelSpec, &ModelSpec)| (build_model(r, 0).unwrap(), build_model(d, 0).unwrap());
    let (tr, td) = pair(specs.teachers());
    let (sr, sd) = pair(specs.students());
    let input = (cfg.data.height, cfg.data.width);
    let lat = |r: &Model, d: &Model, name| {
        benchmark_system(&System { name, restorer: Some(r), detector: Some(d) }, input, 10, 100).unwrap()["total"]
    };
    let (t, s) = (lat(&tr, &td, "teacher"), lat(&sr, &sd, "student"));
    ok &= s < t;
    parts.push(format!("pipeline median latency teacher {t:.3} ms vs small students {s:.3} ms"));
    (ok, parts.join("; "))
}

// ---------------------------------------------------------------- 6, 8, 9, 10

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn write_generated(cfg: &RunConfig, root: &Path) -> (Vec<AnnotatedSample>, Vec<AnnotatedSample>) {
    let (train, val) = pipeline::generate_splits(cfg).unwrap();
    pipeline::write_splits(&train, &val, root).unwrap();
    (
        pipeline::load_split(root, pipeline::TRAIN_SPLIT).unwrap(),
        pipeline::load_split(root, pipeline::VAL_SPLIT).unwrap(),
    )
}

fn row(val: &[AnnotatedSample], cfg: &RunConfig, name: &str, r: Option<&Model>, d: Option<&Model>) -> (f64, Option<f64>) {
    let row = evaluate_system(&System { name, restorer: r, detector: d }, val, cfg.data.num_classes).unwrap();
    (row.psnr_mean, row.map_50_95)
}

/// Mean `loss_total` over the steps of one epoch.
fn epoch_mean(state: &TrainState, epoch: usize) -> f64 {
    let v: Vec<f64> = state.loss_history.iter().filter(|r| r.epoch == epoch).map(|r| r.loss_total).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn small_pipeline_report(dir: &Path) -> (String, Vec<u8>) {
    let overrides: Vec<String> = [
        "data.train_sequences=6",
        "data.val_sequences=3",
        "data.height=32",
        "data.width=32",
        "train.teacher_restorer.epochs=2",
        "train.teacher_detector.epochs=2",
        "train.student.epochs=2",
    ]
    .map(String::from)
    .to_vec();
    let cfg = RunConfig::parse("", None, &overrides).unwrap();
    let (train, val) = write_generated(&cfg, dir);
    let run = pipeline::train_teacher_pair(&cfg, &train, &mut |_| {}).unwrap();
    let teachers = Teachers { restorer: &run.restorer, detector: &run.detector };
    let joint = pipeline::distill(&cfg, TrainMode::Joint, &train, teachers, &mut |_| {}).unwrap();
    let systems = [
        NamedSystem::distorted(),
        NamedSystem { name: "teacher".into(), restorer: Some(run.restorer.clone()), detector: Some(run.detector.clone()) },
        NamedSystem { name: "joint".into(), restorer: Some(joint.restorer), detector: Some(joint.detector) },
    ];
    let report = pipeline::evaluate_systems(&cfg, &val, &systems).unwrap();
    report.write(dir).unwrap();
    (report.to_json(), std::fs::read(dir.join("report.json")).unwrap())
}

struct Desk {
    cfg: RunConfig,
    train: Vec<AnnotatedSample>,
    val: Vec<AnnotatedSample>,
    tree: BTreeMap<String, Vec<u8>>,
}

fn desk_data() -> Desk {
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = write_generated(&cfg, dir.path());
    Desk {
        tree: read_tree(dir.path()),
        cfg,
        train,
        val,
    }
}

fn determinism(desk: &Desk) -> (bool, String) {
    let again = tempfile::tempdir().unwrap();
    let (train, val) = pipeline::generate_splits(&desk.cfg).unwrap();
    pipeline::write_splits(&train, &val, again.path()).unwrap();
    let tree = read_tree(again.path());
    let bytes: usize = tree.values().map(Vec::len).sum();
    let same_data = tree == desk.tree;
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (j1, f1) = small_pipeline_report(d1.path());
    let (j2, f2) = small_pipeline_report(d2.path());
    let same_report = j1 == j2 && f1 == f2;
    (
        same_data && same_report,
        format!(
            "desk dataset regenerated: {} files, {bytes} bytes, identical {same_data}; reduced pipeline report.json identical {same_report} ({} bytes)",
            tree.len(),
            f1.len()
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("JDATT_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |id: usize| only.as_ref().is_none_or(|s| s.contains(&id));
    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    let mut run = |id: usize, title: &'static str, f: &mut dyn FnMut() -> (bool, String), lines: &mut Vec<Line>| {
        if want(id) {
            let t0 = Instant::now();
            let (pass, detail) = f();
            report(lines, id, title, t0, pass, detail);
        } else {
            println!("criterion {id:>2}  SKIP  {title}");
            skipped.push(id);
        }
    };

    let budget = |secs: f64, limit: f64, (pass, detail): (bool, String)| (pass && secs < limit, format!("{detail}; {secs:.2} s of {limit} s"));
    run(1, "loss oracles", &mut || { let t = Instant::now(); let r = loss_oracles(); budget(t.elapsed().as_secs_f64(), 10.0, r) }, &mut lines);
    run(2, "finite-difference gradients", &mut || { let t = Instant::now(); let r = gradient_suite(); budget(t.elapsed().as_secs_f64(), 300.0, r) }, &mut lines);
    run(3, "distillation fixed points and shift invariance", &mut fixed_points, &mut lines);
    run(4, "mAP oracle equivalence", &mut || { let t = Instant::now(); let r = map_oracle_suite(); budget(t.elapsed().as_secs_f64(), 30.0, r) }, &mut lines);
    run(5, "metric references", &mut metric_references, &mut lines);
    let cfg = RunConfig::default();
    run(7, "compression ordering", &mut || compression_ordering(&cfg), &mut lines);

    let heavy = [6, 8, 9, 10].iter().any(|&i| want(i));
    if heavy {
        let t0 = Instant::now();
        let desk = desk_data();
        println!(
            "desk dataset: {} train / {} val sequences generated, saved and reloaded in {:.1} s",
            desk.train.len(),
            desk.val.len(),
            t0.elapsed().as_secs_f64()
        );
        run(9, "determinism", &mut || determinism(&desk), &mut lines);

        let needs_teachers = [6, 8, 10].iter().any(|&i| want(i));
        if needs_teachers {
            let t0 = Instant::now();
            let teachers = pipeline::train_teacher_pair(&desk.cfg, &desk.train, &mut |_| {}).unwrap();
            let teacher_secs = t0.elapsed().as_secs_f64();
            let digests = [checkpoint_digest(&teachers.restorer), checkpoint_digest(&teachers.detector)];
            run(6, "restoration direction", &mut || {
                let (dist, _) = row(&desk.val, &desk.cfg, "distorted", None, None);
                let (rest, _) = row(&desk.val, &desk.cfg, "teacher", Some(&teachers.restorer), None);
                (
                    rest - dist >= 1.0 && teacher_secs <= 1800.0,
                    format!("held-out PSNR distorted {dist:.3} dB, teacher-restored {rest:.3} dB (+{:.3} dB); teacher training {teacher_secs:.0} s of 1800 s", rest - dist),
                )
            }, &mut lines);

            let mut states: Vec<(u64, TrainMode, TrainState, f64, f64)> = Vec::new();
            let mut frozen_ok = true;
            let t8 = Instant::now();
            if want(8) || want(10) {
                let pair = Teachers { restorer: &teachers.restorer, detector: &teachers.detector };
                let seeds: &[u64] = if want(8) { &[1, 2, 3] } else { &[1] };
                for &seed in seeds {
                    for mode in [TrainMode::Joint, TrainMode::Separate] {
                        let mut cfg = desk.cfg.clone();
                        cfg.train.student.seed = seed;
                        let t = Instant::now();
                        match pipeline::distill(&cfg, mode, &desk.train, pair, &mut |_| {}) {
                            Ok(state) => {
                                let (p, m) = row(&desk.val, &cfg, "student", Some(&state.restorer), Some(&state.detector));
                                let m = m.unwrap();
                                println!("  seed {seed} {mode:?}: {} steps in {:.0} s, PSNR {p:.3} dB, mAP {m:.4}", state.step, t.elapsed().as_secs_f64());
                                states.push((seed, mode, state, p, m));
                            }
                            Err(e) => {
                                println!("  seed {seed} {mode:?}: {e}");
                                frozen_ok = false;
                            }
                        }
                    }
                }
            }
            let students_secs = t8.elapsed().as_secs_f64();

            run(8, "joint vs separate", &mut || {
                let pick = |mode| states.iter().filter(|s| s.1 == mode).collect::<Vec<_>>();
                let (j, s) = (pick(TrainMode::Joint), pick(TrainMode::Separate));
                if j.len() != 3 || s.len() != 3 {
                    return (false, "a distillation run failed".into());
                }
                let steps_equal = j.iter().zip(&s).all(|(a, b)| a.2.step == b.2.step);
                let mean = |v: &[&(u64, TrainMode, TrainState, f64, f64)], f: fn(&(u64, TrainMode, TrainState, f64, f64)) -> f64| v.iter().map(|x| f(x)).sum::<f64>() / 3.0;
                let (jm, sm) = (mean(&j, |x| x.4), mean(&s, |x| x.4));
                let (jp, sp) = (mean(&j, |x| x.3), mean(&s, |x| x.3));
                let wins = j.iter().zip(&s).filter(|(a, b)| a.4 > b.4).count();
                let secs = students_secs + teacher_secs;
                (
                    steps_equal && jm >= sm - 0.01 && jp >= sp - 0.05 && wins >= 2 && secs <= 7200.0,
                    format!(
                        "mean mAP joint {jm:.4} vs separate {sm:.4}; mean PSNR joint {jp:.3} vs separate {sp:.3} dB; joint wins mAP on {wins}/3 seeds; equal steps {steps_equal}; {secs:.0} s of 7200 s"
                    ),
                )
            }, &mut lines);

            run(10, "frozen teachers", &mut || {
                let now = [checkpoint_digest(&teachers.restorer), checkpoint_digest(&teachers.detector)];
                (
                    frozen_ok && now == digests && !states.is_empty(),
                    format!("{} distillation runs; digests before {:.12}/{:.12}, after {:.12}/{:.12}", states.len(), digests[0], digests[1], now[0], now[1]),
                )
            }, &mut lines);

            if want(8) {
                let t0 = Instant::now();
                let joint: Vec<_> = states.iter().filter(|s| s.1 == TrainMode::Joint).collect();
                let decreased: Vec<(f64, f64)> = joint
                    .iter()
                    .map(|s| (epoch_mean(&s.2, 0), epoch_mean(&s.2, s.2.epoch - 1)))
                    .collect();
                let n = decreased.iter().filter(|(a, b)| b < a).count();
                let phases_ok = joint.iter().all(|s| s.2.loss_history.iter().all(|r| r.phase == Phase::Joint));
                report(
                    &mut lines,
                    8,
                    "joint loss decreases (3-seed majority)",
                    t0,
                    n >= 2 && phases_ok,
                    format!("first-epoch vs last-epoch mean total loss {decreased:.4?}; decreased on {n}/3"),
                );
            }
        }
    }

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{} ({})", l.id, l.title)).collect();
    println!(
        "\nacceptance: {} passed, {} failed, {} skipped",
        lines.len() - failed.len(),
        failed.len(),
        skipped.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
