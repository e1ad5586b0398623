//! Planar image helpers: Gaussian kernels, separable filtering, median.

/// Normalised 1-D Gaussian truncated at `truncate·σ`.
pub fn gaussian_kernel(sigma: f64, truncate: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (truncate * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Normalised Gaussian of exactly `len` taps (odd).
pub fn gaussian_window(len: usize, sigma: f64) -> Vec<f64> {
    assert!(len % 2 == 1 && sigma > 0.0);
    let r = (len / 2) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable filter of one `H×W` plane with edge replication.
pub fn filter_separable(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                let xi = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xi];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, kv) in kernel.iter().enumerate() {
            let yi = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
            let src = &tmp[yi * w..(yi + 1) * w];
            for (o, s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    }
    out
}

/// Separable filter keeping only fully-supported positions
/// (`(H−k+1)×(W−k+1)` output).
pub fn filter_valid(plane: &[f64], h: usize, w: usize, kernel: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = kernel.len();
    assert!(h >= n && w >= n);
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = kernel.iter().zip(&row[x..x + n]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = kernel.iter().enumerate().map(|(k, kv)| kv * tmp[(y + k) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// 3×3 median of an interleaved `H×W×C` frame, per channel, edges replicated.
pub fn median3x3_hwc(frame: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; frame.len()];
    let mut buf = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut k = 0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        buf[k] = frame[(yy * w + xx) * c + ch];
                        k += 1;
                    }
                }
                buf.sort_by(|a, b| a.total_cmp(b));
                out[(y * w + x) * c + ch] = buf[4];
            }
        }
    }
    out
}
