//! Forward and backward kernels on raw slices.
//!
//! Everything here is shape-checked by the caller; the functions assume
//! well-formed extents and row-major storage.

use crate::tensor::{strides, Real};

// ── dense ────────────────────────────────────────────────────────────

/// `y[m, n] = x[m, k] · w[k, n] + b[n]`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    if let Some(b) = b {
        for row in y.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), x, (k as isize, 1), w, (n as isize, 1), beta, &mut y, (n as isize, 1));
    y
}

/// Returns `(gx, gw, gb)`.
pub fn linear_backward<T: Real>(
    x: &[T],
    w: &[T],
    gy: &[T],
    m: usize,
    k: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); m * k];
    // gx = gy · wᵀ
    T::gemm(m, n, k, T::one(), gy, (n as isize, 1), w, (1, n as isize), T::zero(), &mut gx, (k as isize, 1));
    let mut gw = vec![T::zero(); k * n];
    // gw = xᵀ · gy
    T::gemm(k, m, n, T::one(), x, (1, k as isize), gy, (n as isize, 1), T::zero(), &mut gw, (n as isize, 1));
    let mut gb = vec![T::zero(); n];
    for row in gy.chunks_exact(n) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (gx, gw, gb)
}

// ── convolution ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.k * self.k
    }

    fn out_pix(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, b: usize, grp: usize, col: &mut [T]) {
    let cin_g = g.cin_g();
    let pix = g.out_pix();
    for cl in 0..cin_g {
        let c = grp * cin_g + cl;
        let plane = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (cl * g.k + ki) * g.k + kj;
                let dst = &mut col[row * pix..][..pix];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.w_out..][..g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..][..g.w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], g: &ConvGeom, b: usize, grp: usize, gx: &mut [T]) {
    let cin_g = g.cin_g();
    let pix = g.out_pix();
    for cl in 0..cin_g {
        let c = grp * cin_g + cl;
        let plane = &mut gx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (cl * g.k + ki) * g.k + kj;
                let src = &col[row * pix..][..pix];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let pix = g.out_pix();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut y = vec![T::zero(); g.batch * g.c_out * pix];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * pix] };
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let ker = &kernel[grp * cout_g * rows..][..cout_g * rows];
            let out = &mut y[(b * g.c_out + grp * cout_g) * pix..][..cout_g * pix];
            let src: &[T] = if g.is_pointwise() {
                &x[(b * g.c_in + grp * cin_g) * pix..][..cin_g * pix]
            } else {
                im2col(x, g, b, grp, &mut col);
                &col
            };
            T::gemm(cout_g, rows, pix, T::one(), ker, (rows as isize, 1), src, (pix as isize, 1), T::zero(), out, (pix as isize, 1));
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                for v in &mut y[(b * g.c_out + o) * pix..][..pix] {
                    *v += bv;
                }
            }
        }
    }
    y
}

/// Returns `(gx, gkernel, gbias)`.
pub fn conv2d_backward<T: Real>(x: &[T], kernel: &[T], gy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pix = g.out_pix();
    let (cin_g, cout_g, rows) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let mut col = vec![T::zero(); rows * pix];
    let mut gcol = vec![T::zero(); rows * pix];
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let ker = &kernel[grp * cout_g * rows..][..cout_g * rows];
            let gker = &mut gk[grp * cout_g * rows..][..cout_g * rows];
            let gout = &gy[(b * g.c_out + grp * cout_g) * pix..][..cout_g * pix];
            if g.is_pointwise() {
                let xs = &x[(b * g.c_in + grp * cin_g) * pix..][..cin_g * pix];
                T::gemm(cout_g, pix, rows, T::one(), gout, (pix as isize, 1), xs, (1, pix as isize), T::one(), gker, (rows as isize, 1));
                let gxs = &mut gx[(b * g.c_in + grp * cin_g) * pix..][..cin_g * pix];
                T::gemm(rows, cout_g, pix, T::one(), ker, (1, rows as isize), gout, (pix as isize, 1), T::one(), gxs, (pix as isize, 1));
            } else {
                im2col(x, g, b, grp, &mut col);
                T::gemm(cout_g, pix, rows, T::one(), gout, (pix as isize, 1), &col, (1, pix as isize), T::one(), gker, (rows as isize, 1));
                T::gemm(rows, cout_g, pix, T::one(), ker, (1, rows as isize), gout, (pix as isize, 1), T::zero(), &mut gcol, (pix as isize, 1));
                col2im_add(&gcol, g, b, grp, &mut gx);
            }
        }
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc += gy[(b * g.c_out + o) * pix..][..pix].iter().copied().sum::<T>();
        }
    }
    (gx, gk, gb)
}

// ── normalization ────────────────────────────────────────────────────

/// Layer norm over rows of length `d`. Returns `(y, xhat, rstd)`.
pub fn layer_norm_forward<T: Real>(x: &[T], gamma: &[T], beta: &[T], d: usize, eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..][..d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, rstd)
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward<T: Real>(gy: &[T], xhat: &[T], rstd: &[T], gamma: &[T], d: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = gy.len() / d;
    let mut gx = vec![T::zero(); gy.len()];
    let mut gg = vec![T::zero(); d];
    let mut gb = vec![T::zero(); d];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let g = &gy[r * d..][..d];
        let h = &xhat[r * d..][..d];
        let mut mean_gh = T::zero();
        let mut mean_ghh = T::zero();
        for i in 0..d {
            let gh = g[i] * gamma[i];
            mean_gh += gh;
            mean_ghh += gh * h[i];
            gg[i] += g[i] * h[i];
            gb[i] += g[i];
        }
        mean_gh = mean_gh * inv_d;
        mean_ghh = mean_ghh * inv_d;
        for i in 0..d {
            gx[r * d + i] = rstd[r] * (g[i] * gamma[i] - mean_gh - h[i] * mean_ghh);
        }
    }
    (gx, gg, gb)
}

// ── activations ──────────────────────────────────────────────────────

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

pub fn softmax_rows<T: Real>(x: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let m = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (o, &v) in yr.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in yr.iter_mut() {
            *o = *o / s;
        }
    }
    y
}

pub fn softmax_rows_backward<T: Real>(y: &[T], gy: &[T], d: usize) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for ((yr, gr), xr) in y.chunks_exact(d).zip(gy.chunks_exact(d)).zip(gx.chunks_exact_mut(d)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            xr[i] = yr[i] * (gr[i] - dot);
        }
    }
    gx
}

// ── layout ───────────────────────────────────────────────────────────

/// Output of `permute`: `out.shape[i] = shape[axes[i]]`.
pub fn permute<T: Real>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|i| x[base + i * inner_stride]));
        }
        // advance the outer multi-index
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn flip<T: Real>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..n {
            let src = &x[(o * n + i) * inner..][..inner];
            out[(o * n + (n - 1 - i)) * inner..][..inner].copy_from_slice(src);
        }
    }
    out
}

/// Maps every element of `out_shape` to the flat index of an operand whose
/// extents are either equal or 1 along each axis.
pub fn broadcast_index(out_shape: &[usize], operand_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let os = strides(operand_shape);
    let bstr: Vec<usize> = (0..rank)
        .map(|i| if operand_shape[i] == 1 { 0 } else { os[i] })
        .collect();
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += bstr[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= bstr[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

// ── pooling / resampling on (B, C, H, W) ─────────────────────────────

pub fn down2_area<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut y[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (r0, r1) = (2 * oy * w, (2 * oy + 1) * w);
                let s = src[r0 + 2 * ox] + src[r0 + 2 * ox + 1] + src[r1 + 2 * ox] + src[r1 + 2 * ox + 1];
                dst[oy * wo + ox] = s * quarter;
            }
        }
    }
    y
}

pub fn down2_area_backward<T: Real>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                gx[p * h * w + y * w + x] = gy[p * ho * wo + (y / 2) * wo + x / 2] * quarter;
            }
        }
    }
    gx
}

pub fn up2_nearest<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                y[p * ho * wo + oy * wo + ox] = x[p * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    y
}

pub fn up2_nearest_backward<T: Real>(gy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                gx[p * h * w + (oy / 2) * w + ox / 2] += gy[p * ho * wo + oy * wo + ox];
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let axes = [2, 0, 1];
        let y = permute(&x, &shape, &axes);
        // out[k, i, j] = x[i, j, k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(y[(k * 2 + i) * 3 + j], x[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&y, &[4, 2, 3], &inverse_axes(&axes));
        assert_eq!(back, x);
    }

    #[test]
    fn broadcast_index_repeats_singleton_axes() {
        let map = broadcast_index(&[2, 3], &[2, 1]);
        assert_eq!(map, vec![0, 0, 0, 1, 1, 1]);
        let map = broadcast_index(&[2, 3], &[1, 3]);
        assert_eq!(map, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn softplus_is_stable_for_large_magnitudes() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
