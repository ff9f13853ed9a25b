//! Low-level dense kernels shared by the forward and backward passes.
//!
//! All matrices are row-major slices. Every kernel accumulates into its output
//! so callers can sum contributions without temporaries.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_pi * bv;
            }
        }
    }
}

/// Dot product with four independent accumulators (fixed summation order).
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = T::zero();
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }
}

/// Unfolds one image `[in_c, in_h, in_w]` into `[in_c·k·k, out_h·out_w]`.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
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

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    for c in 0..g.in_c {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis bilinear sampling table (half-pixel centers, no corner alignment).
#[derive(Debug, Clone)]
pub struct BilinearAxis<T> {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_lo: Vec<T>,
    pub w_hi: Vec<T>,
}

impl<T: Scalar> BilinearAxis<T> {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_lo = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            let frac = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            w_lo.push(T::of(1.0 - frac));
            w_hi.push(T::of(frac));
        }
        Self { lo, hi, w_lo, w_hi }
    }
}

/// Bilinear resize of `planes` stacked `[h, w]` planes into `[oh, ow]`.
pub fn bilinear_forward<T: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    x: &[T],
    y: &mut [T],
) {
    let ay = BilinearAxis::<T>::new(h, oh);
    let ax = BilinearAxis::<T>::new(w, ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1) = (&src[ay.lo[oy] * w..], &src[ay.hi[oy] * w..]);
            let (wy0, wy1) = (ay.w_lo[oy], ay.w_hi[oy]);
            for ox in 0..ow {
                let (c0, c1) = (ax.lo[ox], ax.hi[ox]);
                let (wx0, wx1) = (ax.w_lo[ox], ax.w_hi[ox]);
                dst[oy * ow + ox] =
                    wy0 * (wx0 * r0[c0] + wx1 * r0[c1]) + wy1 * (wx0 * r1[c0] + wx1 * r1[c1]);
            }
        }
    }
}

/// Adjoint of [`bilinear_forward`], accumulating into `dx`.
pub fn bilinear_backward<T: Scalar>(
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    dy: &[T],
    dx: &mut [T],
) {
    let ay = BilinearAxis::<T>::new(h, oh);
    let ax = BilinearAxis::<T>::new(w, ow);
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (r0, r1) = (ay.lo[oy] * w, ay.hi[oy] * w);
            let (wy0, wy1) = (ay.w_lo[oy], ay.w_hi[oy]);
            for ox in 0..ow {
                let g = src[oy * ow + ox];
                let (c0, c1) = (ax.lo[ox], ax.hi[ox]);
                let (wx0, wx1) = (ax.w_lo[ox], ax.w_hi[ox]);
                dst[r0 + c0] += g * wy0 * wx0;
                dst[r0 + c1] += g * wy0 * wx1;
                dst[r1 + c0] += g * wy1 * wx0;
                dst[r1 + c1] += g * wy1 * wx1;
            }
        }
    }
}

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns the data of `x` (with `shape`) permuted so output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out, out_shape);
    }
    let nd = out_shape.len();
    let last = nd - 1;
    let (inner_len, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..inner_len {
            out.push(x[base + j * inner_stride]);
        }
        // advance the outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                return (out, out_shape);
            }
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(0.797_884_560_802_865_4);
    let c = T::of(0.044_715);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}
