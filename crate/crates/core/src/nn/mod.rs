//! Minimal NCHW tensor kernels with explicit backward passes.
//!
//! Everything is generic over [`Real`] so the same network code runs in
//! 32-bit for training and sampling and in 64-bit for gradient checks.
//! Convolutions use circular padding, which keeps every layer exactly
//! translation-equivariant for shifts that are multiples of the total
//! downsampling factor.

mod adam;
mod unet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adam::{clip_global_norm, Adam, AdamConfig};
pub use unet::{Manifest, ManifestEntry, Trace, UNet, UNetSpec};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + Sum + AddAssign + MulAssign + 'static
{
    /// `C ← α·A·B + β·C` on strided row/column views.
    ///
    /// # Safety
    /// The strided extents of `a`, `b` and `c` must lie inside their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view over a slice.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view exceeds buffer");
        }
    }
}

/// `c (row-major m×n) ← a·b + beta·c`.
fn matmul<T: Real>(a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    a.check();
    b.check();
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.c * self.plane();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let len = self.c * self.plane();
        &mut self.data[i * len..(i + 1) * len]
    }

    pub fn channel(&self, i: usize, ch: usize) -> &[T] {
        let p = self.plane();
        &self.sample(i)[ch * p..(ch + 1) * p]
    }

    pub fn channel_mut(&mut self, i: usize, ch: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.sample_mut(i)[ch * p..(ch + 1) * p]
    }

    /// Same shape, new contents.
    pub fn with_data(&self, data: Vec<T>) -> Tensor<T> {
        Tensor::from_vec(self.n, self.c, self.h, self.w, data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| U::from(v).unwrap()).collect(),
        }
    }
}

/// Circular 3×3 patch extraction for one sample: `cols[(ci·9 + ky·3 + kx)·hw + y·w + x]`.
fn im2col3<T: Real>(x: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = (y + h + ky - 1) % h;
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = src[w - 1];
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = src[0];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]; accumulates into `dx`.
fn col2im3<T: Real>(cols: &[T], c: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = (y + h + ky - 1) % h;
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => {
                            dst[w - 1] += src[0];
                            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                            dst[0] += src[w - 1];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution with kernel 1 or 3 (circular padding), weights `[cout, cin·k·k]`.
pub fn conv2d<T: Real>(x: &Tensor<T>, weight: &[T], bias: &[T], cout: usize, k: usize) -> Tensor<T> {
    let (cin, hw) = (x.c, x.plane());
    let kk = cin * k * k;
    assert_eq!(weight.len(), cout * kk);
    assert_eq!(bias.len(), cout);
    let mut out = Tensor::zeros(x.n, cout, x.h, x.w);
    let mut cols = if k == 3 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for i in 0..x.n {
        let src = if k == 3 {
            im2col3(x.sample(i), cin, x.h, x.w, &mut cols);
            &cols[..]
        } else {
            x.sample(i)
        };
        let dst = out.sample_mut(i);
        matmul(View::row_major(weight, cout, kk), View::row_major(src, kk, hw), T::zero(), dst);
        for (o, &b) in bias.iter().enumerate() {
            for v in &mut dst[o * hw..(o + 1) * hw] {
                *v += b;
            }
        }
    }
    out
}

/// Backward of [`conv2d`]: accumulates weight/bias gradients (skipped when `dweight` is empty), optionally returns `dL/dx`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &[T],
    dy: &Tensor<T>,
    dweight: &mut [T],
    dbias: &mut [T],
    k: usize,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let (cin, hw, cout) = (x.c, x.plane(), dy.c);
    let kk = cin * k * k;
    let need_dw = !dweight.is_empty();
    let mut cols = if k == 3 && need_dw { vec![T::zero(); kk * hw] } else { Vec::new() };
    let mut dcols = vec![T::zero(); if need_dx { kk * hw } else { 0 }];
    let mut dx = need_dx.then(|| Tensor::zeros(x.n, cin, x.h, x.w));
    for i in 0..x.n {
        let dyi = dy.sample(i);
        if need_dw {
            for (o, db) in dbias.iter_mut().enumerate() {
                *db += dyi[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            let src = if k == 3 {
                im2col3(x.sample(i), cin, x.h, x.w, &mut cols);
                &cols[..]
            } else {
                x.sample(i)
            };
            // dW += dy · colsᵀ
            matmul(
                View::row_major(dyi, cout, hw),
                View::row_major(src, kk, hw).t(),
                T::one(),
                dweight,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let wt = View::row_major(weight, cout, kk).t();
            if k == 3 {
                matmul(wt, View::row_major(dyi, cout, hw), T::zero(), &mut dcols);
                col2im3(&dcols, cin, x.h, x.w, dx.sample_mut(i));
            } else {
                matmul(wt, View::row_major(dyi, cout, hw), T::zero(), dx.sample_mut(i));
            }
        }
    }
    dx
}

pub fn silu<T: Real>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Real>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^v)` without overflow.
pub fn softplus<T: Real>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub fn silu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.with_data(x.data.iter().map(|&v| silu(v)).collect())
}

/// `dy ⊙ silu'(pre)`.
pub fn silu_backward<T: Real>(pre: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    pre.with_data(pre.data.iter().zip(&dy.data).map(|(&p, &d)| d * silu_grad(p)).collect())
}


/// Adds a per-sample, per-channel bias `bias[i·c + ch]`.
pub fn add_channel_bias<T: Real>(x: &mut Tensor<T>, bias: &[T]) {
    assert_eq!(bias.len(), x.n * x.c);
    let p = x.plane();
    for (chunk, &b) in x.data.chunks_mut(p).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

/// Per-sample, per-channel sums (the adjoint of [`add_channel_bias`]).
pub fn channel_sums<T: Real>(x: &Tensor<T>) -> Vec<T> {
    x.data.chunks(x.plane()).map(|c| c.iter().copied().sum()).collect()
}

pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    let q = T::lit(0.25);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let a = src[2 * y * x.w + 2 * xx];
                let b = src[2 * y * x.w + 2 * xx + 1];
                let c = src[(2 * y + 1) * x.w + 2 * xx];
                let d = src[(2 * y + 1) * x.w + 2 * xx + 1];
                dst[y * w + xx] = (a + b + c + d) * q;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let q = T::lit(0.25);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * dy.w + xx / 2] * q;
            }
        }
    }
    dx
}

pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h, w);
    for (src, dst) in x.data.chunks(x.plane()).zip(out.data.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    for (src, dst) in dy.data.chunks(dy.plane()).zip(dx.data.chunks_mut(h * w)) {
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    for i in 0..a.n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor::from_vec(a.n, a.c + b.c, a.h, a.w, data)
}

pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let p = x.plane();
    let second = x.c - first;
    let mut a = Vec::with_capacity(x.n * first * p);
    let mut b = Vec::with_capacity(x.n * second * p);
    for i in 0..x.n {
        let s = x.sample(i);
        a.extend_from_slice(&s[..first * p]);
        b.extend_from_slice(&s[first * p..]);
    }
    (
        Tensor::from_vec(x.n, first, x.h, x.w, a),
        Tensor::from_vec(x.n, second, x.h, x.w, b),
    )
}

/// `y[i] = W·x[i] + b` for a batch of row vectors; `W` is `[dout, din]`.
pub fn linear<T: Real>(x: &[T], batch: usize, weight: &[T], bias: &[T], dout: usize) -> Vec<T> {
    let din = x.len() / batch;
    let mut y = Vec::with_capacity(batch * dout);
    for _ in 0..batch {
        y.extend_from_slice(bias);
    }
    matmul(
        View::row_major(x, batch, din),
        View::row_major(weight, dout, din).t(),
        T::one(),
        &mut y,
    );
    y
}

/// Backward of [`linear`]; returns `dL/dx` when requested. Empty `dweight`/`dbias` skip the parameter gradients.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    x: &[T],
    batch: usize,
    weight: &[T],
    dy: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    dout: usize,
    need_dx: bool,
) -> Option<Vec<T>> {
    let din = x.len() / batch;
    if !dweight.is_empty() {
        for row in dy.chunks(dout) {
            for (d, &g) in dbias.iter_mut().zip(row) {
                *d += g;
            }
        }
        matmul(
            View::row_major(dy, batch, dout).t(),
            View::row_major(x, batch, din),
            T::one(),
            dweight,
        );
    }
    need_dx.then(|| {
        let mut dx = vec![T::zero(); batch * din];
        matmul(
            View::row_major(dy, batch, dout),
            View::row_major(weight, dout, din),
            T::zero(),
            &mut dx,
        );
        dx
    })
}

/// Sinusoidal features `[sin(v·f_0), …, cos(v·f_0), …]` with geometric frequencies.
pub fn sinusoidal(value: f64, dim: usize, max_period: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(max_period.ln()) * i as f64 / half as f64).exp();
        out[i] = (value * freq).sin();
        out[half + i] = (value * freq).cos();
    }
    out
}
