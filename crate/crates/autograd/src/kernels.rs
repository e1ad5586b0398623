//! Raw numeric kernels shared by the graph ops and by non-differentiable
//! image code (the turbulence simulator warps frames with the same sampler).
//!
//! All image buffers are planar `C×H×W`, row-major.

/// `c = op(a)·op(b) + beta·c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` / `b_t` select the transposed storage of the operand (`k×m` and
/// `n×k` respectively).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && k >= 1);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self {
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` is in bounds.
fn valid_range(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(g.stride) };
    // largest ox with ox·stride + kx − pad ≤ w − 1
    let hi = if g.w + g.pad > kx { ((g.w - 1 + g.pad - kx) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(g, kx);
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                    } else {
                        for (j, d) in dst[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.cols();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let (lo, hi) = valid_range(g, kx);
                    let first = lo * g.stride + kx - g.pad;
                    let row = &src[oy * g.wo + lo..oy * g.wo + hi];
                    for (j, v) in row.iter().enumerate() {
                        dst[first + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Convolution forward pass. `weight` is `cout×cin×k×k`.
pub fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let n = g.cols();
    let mut out = vec![0.0; g.cout * n];
    if let Some(b) = bias {
        for (co, row) in out.chunks_mut(n).enumerate() {
            row.fill(b[co]);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(g.cout, g.rows(), n, weight, false, x, false, beta, &mut out);
    } else {
        let mut cols = vec![0.0; g.rows() * n];
        im2col(x, g, &mut cols);
        gemm(g.cout, g.rows(), n, weight, false, &cols, false, beta, &mut out);
    }
    out
}

/// Gradients of a convolution: returns `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let n = g.cols();
    let r = g.rows();
    let db: Vec<f64> = dout.chunks(n).map(|row| row.iter().sum()).collect();
    let mut dw = vec![0.0; g.cout * r];
    let dx = if g.is_pointwise() {
        gemm(g.cout, n, r, dout, false, x, true, 0.0, &mut dw);
        need_dx.then(|| {
            let mut dx = vec![0.0; r * n];
            gemm(r, g.cout, n, weight, true, dout, false, 0.0, &mut dx);
            dx
        })
    } else {
        let mut cols = vec![0.0; r * n];
        im2col(x, g, &mut cols);
        gemm(g.cout, n, r, dout, false, &cols, true, 0.0, &mut dw);
        need_dx.then(|| {
            gemm(r, g.cout, n, weight, true, dout, false, 0.0, &mut cols);
            let mut dx = vec![0.0; g.cin * g.h * g.w];
            col2im_add(&cols, g, &mut dx);
            dx
        })
    };
    (dx, dw, db)
}

#[derive(Clone, Copy)]
struct Tap {
    x0: usize,
    x1: usize,
    frac: f64,
    // sample coordinate was clamped to the border
    clamped: bool,
}

fn sample_tap(coord: f64, size: usize) -> Tap {
    let max = (size - 1) as f64;
    let (c, clamped) = if coord < 0.0 {
        (0.0, true)
    } else if coord > max {
        (max, true)
    } else {
        (coord, false)
    };
    let x0 = (c.floor() as usize).min(size - 1);
    let x1 = (x0 + 1).min(size - 1);
    Tap {
        x0,
        x1,
        frac: c - x0 as f64,
        clamped,
    }
}

/// Bilinear backward warp with edge replication: `out[c,y,x] = img[c, y+dy, x+dx]`.
///
/// `flow` is `2×H×W` with the horizontal displacement in plane 0.
pub fn warp_bilinear(img: &[f64], c: usize, h: usize, w: usize, flow: &[f64]) -> Vec<f64> {
    let hw = h * w;
    assert_eq!(img.len(), c * hw);
    assert_eq!(flow.len(), 2 * hw);
    let mut out = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = sample_tap(x as f64 + flow[p], w);
            let ty = sample_tap(y as f64 + flow[hw + p], h);
            let (w00, w01, w10, w11) = (
                (1.0 - tx.frac) * (1.0 - ty.frac),
                tx.frac * (1.0 - ty.frac),
                (1.0 - tx.frac) * ty.frac,
                tx.frac * ty.frac,
            );
            for ch in 0..c {
                let plane = &img[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = w00 * plane[ty.x0 * w + tx.x0]
                    + w01 * plane[ty.x0 * w + tx.x1]
                    + w10 * plane[ty.x1 * w + tx.x0]
                    + w11 * plane[ty.x1 * w + tx.x1];
            }
        }
    }
    out
}

/// Accumulates the warp gradients into `dimg` and `dflow` when present.
#[allow(clippy::too_many_arguments)]
pub fn warp_bilinear_backward(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    flow: &[f64],
    dout: &[f64],
    mut dimg: Option<&mut [f64]>,
    mut dflow: Option<&mut [f64]>,
) {
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let tx = sample_tap(x as f64 + flow[p], w);
            let ty = sample_tap(y as f64 + flow[hw + p], h);
            let (fx, fy) = (tx.frac, ty.frac);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let go = dout[ch * hw + p];
                let plane = &img[ch * hw..(ch + 1) * hw];
                let v00 = plane[ty.x0 * w + tx.x0];
                let v01 = plane[ty.x0 * w + tx.x1];
                let v10 = plane[ty.x1 * w + tx.x0];
                let v11 = plane[ty.x1 * w + tx.x1];
                gx += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                if let Some(di) = dimg.as_deref_mut() {
                    let base = ch * hw;
                    di[base + ty.x0 * w + tx.x0] += go * (1.0 - fx) * (1.0 - fy);
                    di[base + ty.x0 * w + tx.x1] += go * fx * (1.0 - fy);
                    di[base + ty.x1 * w + tx.x0] += go * (1.0 - fx) * fy;
                    di[base + ty.x1 * w + tx.x1] += go * fx * fy;
                }
            }
            if let Some(df) = dflow.as_deref_mut() {
                if !tx.clamped {
                    df[p] += gx;
                }
                if !ty.clamped {
                    df[hw + p] += gy;
                }
            }
        }
    }
}

/// Per-axis taps of a half-pixel-centred bilinear resize.
fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize (half-pixel centres, edge clamped) of a `C×H×W` block.
pub fn resize_bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                out[(ch * oh + oy) * ow + ox] = (1.0 - ly) * ((1.0 - lx) * plane[y0 * w + x0] + lx * plane[y0 * w + x1])
                    + ly * ((1.0 - lx) * plane[y1 * w + x0] + lx * plane[y1 * w + x1]);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn resize_bilinear_backward(dout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let ty = resize_taps(h, oh);
    let tx = resize_taps(w, ow);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = dout[(ch * oh + oy) * ow + ox];
                plane[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                plane[y0 * w + x1] += g * (1.0 - ly) * lx;
                plane[y1 * w + x0] += g * ly * (1.0 - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.ho * g.wo];
        for co in 0..g.cout {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = b[co];
                    for ci in 0..g.cin {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += wt[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
            let g = ConvGeom::new(3, 7, 6, 4, k, stride, pad);
            let x: Vec<f64> = (0..3 * 7 * 6).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
            let wt: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
            let b = vec![0.5, -0.25, 0.0, 1.0];
            let fast = conv2d_forward(&x, &wt, Some(&b), &g);
            let slow = naive_conv(&x, &wt, &b, &g);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let img: Vec<f64> = (0..2 * 5 * 4).map(|i| i as f64 * 0.01).collect();
        let out = warp_bilinear(&img, 2, 5, 4, &vec![0.0; 2 * 5 * 4]);
        assert_eq!(out, img);
    }

    #[test]
    fn integer_flow_shifts_and_replicates_edges() {
        let img: Vec<f64> = (0..4).map(|i| i as f64).collect(); // 1×1×4 row
        let mut flow = vec![0.0; 8];
        flow[..4].fill(1.0);
        let out = warp_bilinear(&img, 1, 1, 4, &flow);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let x: Vec<f64> = (0..3 * 4 * 5).map(|i| (i as f64).sin()).collect();
        assert_eq!(resize_bilinear(&x, 3, 4, 5, 4, 5), x);
    }

    #[test]
    fn resize_preserves_constants() {
        let x = vec![0.7; 2 * 3 * 3];
        for v in resize_bilinear(&x, 2, 3, 3, 7, 5) {
            assert!((v - 0.7).abs() < 1e-15);
        }
    }
}
