//! Slice-level numeric kernels shared by the tape and by the non-differentiable
//! paths (matching, prior masks, the frozen encoder).
//!
//! Reductions over the inner dimension are always accumulated in index order,
//! so the same dot product computed through different kernels is bit-identical.

use super::{Scalar, COSINE_EPS};

/// `a (m×k) · b (k×n)`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `aᵀ · b` with `a: k×m`, `b: k×n`, result `m×n`.
pub fn matmul_at_b<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`, result `m×n`.
pub fn matmul_a_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] = acc;
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Euclidean norm of every column of a `c×n` matrix.
pub fn column_norms<T: Scalar>(x: &[T], c: usize, n: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); n];
    for ch in 0..c {
        for (a, &v) in acc.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
            *a += v * v;
        }
    }
    acc.into_iter().map(|v| v.sqrt()).collect()
}

/// Copy of column `j` of a `c×n` matrix.
pub fn column<T: Scalar>(x: &[T], c: usize, n: usize, j: usize) -> Vec<T> {
    (0..c).map(|ch| x[ch * n + j]).collect()
}

/// Cosine similarity `a·b/(‖a‖‖b‖+ε)`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b) + T::of(COSINE_EPS))
}

/// Cosine of the vector `a` against each column of the `c×n` matrix `b`.
pub fn cosine_vec_map<T: Scalar>(a: &[T], b: &[T], c: usize, n: usize) -> Vec<T> {
    let na = norm(a);
    let nb = column_norms(b, c, n);
    let mut dots = vec![T::zero(); n];
    for ch in 0..c {
        let av = a[ch];
        for (d, &bv) in dots.iter_mut().zip(&b[ch * n..(ch + 1) * n]) {
            *d += av * bv;
        }
    }
    dots.iter()
        .zip(&nb)
        .map(|(&d, &n)| d / (na * n + T::of(COSINE_EPS)))
        .collect()
}

/// Pairwise cosine between the columns of `x (c×n1)` and `y (c×n2)`; the
/// result is `n1×n2`.
pub fn cosine_matrix<T: Scalar>(x: &[T], y: &[T], c: usize, n1: usize, n2: usize) -> Vec<T> {
    let mut sim = matmul_at_b(x, y, c, n1, n2);
    let nx = column_norms(x, c, n1);
    let ny = column_norms(y, c, n2);
    let eps = T::of(COSINE_EPS);
    for i in 0..n1 {
        for j in 0..n2 {
            sim[i * n2 + j] /= nx[i] * ny[j] + eps;
        }
    }
    sim
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Source taps for corner-aligned linear interpolation along one axis:
/// `(lower index, upper index, weight of the upper index)`.
pub fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            let pos = if dst == 1 || src == 1 {
                0.0
            } else {
                o as f64 * (src - 1) as f64 / (dst - 1) as f64
            };
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of `c` planes from `h×w` to `oh×ow`, corner-aligned.
pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = interp_axis(h, oh);
    let xs = interp_axis(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`]: scatters output gradients back to the input grid.
pub fn bilinear_resize_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = interp_axis(h, oh);
    let xs = interp_axis(w, ow);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::of(fx);
                let v = src[oy * ow + ox];
                dst[y0 * w + x0] += v * (T::one() - fy) * (T::one() - fx);
                dst[y0 * w + x1] += v * (T::one() - fy) * fx;
                dst[y1 * w + x0] += v * fy * (T::one() - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    out
}

/// Bin boundaries `[start, end)` for adaptive pooling `src → dst`.
pub fn pool_bins(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| ((i * src) / dst, ((i + 1) * src).div_ceil(dst)))
        .collect()
}

pub fn adaptive_avg_pool<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = pool_bins(h, oh);
    let xs = pool_bins(w, ow);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1)) in xs.iter().enumerate() {
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += plane[y * w + xx];
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                out[ch * oh * ow + oy * ow + ox] = acc / T::of(count);
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<T: Scalar>(
    g: &[T],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ys = pool_bins(h, oh);
    let xs = pool_bins(w, ow);
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1)) in xs.iter().enumerate() {
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                let v = g[ch * oh * ow + oy * ow + ox] / T::of(count);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        plane[y * w + xx] += v;
                    }
                }
            }
        }
    }
    out
}
