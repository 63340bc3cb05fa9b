//! Raw dense kernels on flat `f64` slices.
//!
//! Everything here is pure and allocation-explicit; the tensor layer wraps
//! these with shape validation and tape nodes. All matmul variants
//! *accumulate* into `out`, so callers decide between fresh and running
//! buffers.

/// out[m×q] += a[m×p] · b[p×q]
pub fn matmul_into(a: &[f64], m: usize, p: usize, b: &[f64], q: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * q);
    for i in 0..m {
        let a_row = &a[i * p..(i + 1) * p];
        let out_row = &mut out[i * q..(i + 1) * q];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * q..(l + 1) * q];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ  (row-by-row dot products)
pub fn matmul_nt_into(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let dot: f64 = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
            *o += dot;
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub fn matmul_tn_into(a: &[f64], k: usize, m: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_li * bv;
            }
        }
    }
}

/// Output spatial size of a convolution/pooling window sweep.
pub fn conv_out_dim(input: usize, window: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - window) / stride + 1
}

/// Unroll one `c×h×w` image into a `(c·kh·kw) × (oh·ow)` column matrix.
/// Out-of-bounds taps read as zero (zero padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let cols_w = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * cols_w];
    for ci in 0..c {
        let plane = &img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add a column matrix back onto an image; adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_into(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    img: &mut [f64],
) {
    let oh = conv_out_dim(h, kh, stride, padding);
    let ow = conv_out_dim(w, kw, stride, padding);
    let cols_w = oh * ow;
    debug_assert_eq!(cols.len(), c * kh * kw * cols_w);
    debug_assert_eq!(img.len(), c * h * w);
    for ci in 0..c {
        let plane = &mut img[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * cols_w;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Max-pool one plane; returns pooled values and the flat in-plane argmax of
/// each window. Ties break toward the first index in row-major scan order.
pub fn maxpool_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    size: usize,
    stride: usize,
    out: &mut Vec<f64>,
    argmax: &mut Vec<usize>,
) {
    let oh = (h - size) / stride + 1;
    let ow = (w - size) / stride + 1;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0usize;
            for ky in 0..size {
                let iy = oy * stride + ky;
                for kx in 0..size {
                    let ix = ox * stride + kx;
                    let v = plane[iy * w + ix];
                    if v > best {
                        best = v;
                        best_idx = iy * w + ix;
                    }
                }
            }
            out.push(best);
            argmax.push(best_idx);
        }
    }
}
