//! Dense row-major tensors and the numeric kernels the autograd tape is built on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // bounds: the caller guarantees every strided access is in range
                let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize
                    }
                };
                assert!(k == 0 || last(m, k, rsa, csa) < a.len());
                assert!(k == 0 || last(k, n, rsb, csb) < b.len());
                assert!(last(m, n, rsc, csc) < c.len());
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self::new(&[1], vec![v])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    /// `(B, C, H, W)` of a 4-d tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected a 4-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected a 2-d tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// One batch item of a 4-d tensor, as a `(1, C, H, W)` tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        let (_, c, h, w) = self.dims4();
        let n = c * h * w;
        Self::new(&[1, c, h, w], self.data[b * n..(b + 1) * n].to_vec())
    }

    /// Channel `ch` of batch item `b` as a flat `h·w` slice.
    pub fn plane(&self, b: usize, ch: usize) -> &[T] {
        let (_, c, h, w) = self.dims4();
        let hw = h * w;
        let off = (b * c + ch) * hw;
        &self.data[off..off + hw]
    }

    pub fn stack(items: &[Tensor<T>]) -> Self {
        assert!(!items.is_empty());
        let (_, c, h, w) = items[0].dims4();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for it in items {
            assert_eq!(it.shape(), &[1, c, h, w]);
            data.extend_from_slice(&it.data);
        }
        Self::new(&[items.len(), c, h, w], data)
    }
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn out_size(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride + 1
    }
}

/// Unfolds one image `(C, H, W)` into a `(C·k·k, OH·OW)` column matrix.
pub(crate) fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
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
pub(crate) fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom, x: &mut [T]) {
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    let ohw = oh * ow;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward 2-d convolution. `x: (B, Cin, H, W)`, `weight: (Cout, Cin, k, k)`.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (b, cin, h, w) = x.dims4();
    let cout = weight.shape()[0];
    assert_eq!(weight.shape(), &[cout, cin, g.kernel, g.kernel], "conv weight shape");
    let (oh, ow) = (g.out_size(h), g.out_size(w));
    let ohw = oh * ow;
    let kk = cin * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    let pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
    let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * ohw] };
    for bi in 0..b {
        let xs = &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        let src: &[T] = if pointwise {
            xs
        } else {
            im2col(xs, cin, h, w, g, &mut col);
            &col
        };
        let dst = &mut out.data_mut()[bi * cout * ohw..(bi + 1) * cout * ohw];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(ohw).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        T::gemm(
            cout,
            kk,
            ohw,
            T::one(),
            weight.data(),
            kk as isize,
            1,
            src,
            ohw as isize,
            1,
            T::one(),
            dst,
            ohw as isize,
            1,
        );
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight (and bias when requested).
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (b, cin, h, w) = x.dims4();
    let cout = weight.shape()[0];
    let (_, _, oh, ow) = grad_out.dims4();
    let ohw = oh * ow;
    let kk = cin * g.kernel * g.kernel;
    let pointwise = g.kernel == 1 && g.stride == 1 && g.padding == 0;
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need_bias.then(|| Tensor::zeros(&[cout]));
    let mut col = vec![T::zero(); kk * ohw];
    for bi in 0..b {
        let go = &grad_out.data()[bi * cout * ohw..(bi + 1) * cout * ohw];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(ohw).enumerate() {
                gb.data_mut()[co] = gb.data()[co] + chunk.iter().copied().sum::<T>();
            }
        }
        let xs = &x.data()[bi * cin * h * w..(bi + 1) * cin * h * w];
        if let Some(gw) = gw.as_mut() {
            let src: &[T] = if pointwise {
                xs
            } else {
                im2col(xs, cin, h, w, g, &mut col);
                &col
            };
            // gW += gOut · colᵀ
            T::gemm(
                cout,
                ohw,
                kk,
                T::one(),
                go,
                ohw as isize,
                1,
                src,
                1,
                ohw as isize,
                T::one(),
                gw.data_mut(),
                kk as isize,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[bi * cin * h * w..(bi + 1) * cin * h * w];
            if pointwise {
                T::gemm(
                    kk,
                    cout,
                    ohw,
                    T::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    go,
                    ohw as isize,
                    1,
                    T::one(),
                    dst,
                    ohw as isize,
                    1,
                );
            } else {
                // dcol = Wᵀ · gOut
                T::gemm(
                    kk,
                    cout,
                    ohw,
                    T::one(),
                    weight.data(),
                    1,
                    kk as isize,
                    go,
                    ohw as isize,
                    1,
                    T::zero(),
                    &mut col,
                    ohw as isize,
                    1,
                );
                col2im(&col, cin, h, w, g, dst);
            }
        }
    }
    (gx, gw, gb)
}

/// Sparse 1-d bilinear interpolation weights with align-corners disabled:
/// each output position reads two source taps.
#[derive(Clone, Debug)]
pub struct ResizeTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResizeTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        Self { lo, hi, frac }
    }
}

pub fn resize_forward<T: Real>(x: &Tensor<T>, ry: &ResizeTaps, rx: &ResizeTaps) -> Tensor<T> {
    let (b, c, h, w) = x.dims4();
    let (oh, ow) = (ry.lo.len(), rx.lo.len());
    let mut out = Tensor::zeros(&[b, c, oh, ow]);
    for p in 0..b * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], T::of(ry.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], T::of(rx.frac[ox]));
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn resize_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
    ry: &ResizeTaps,
    rx: &ResizeTaps,
) -> Tensor<T> {
    let (b, c, oh, ow) = grad_out.dims4();
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut gx = Tensor::zeros(in_shape);
    for p in 0..b * c {
        let go = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, fy) = (ry.lo[oy], ry.hi[oy], T::of(ry.frac[oy]));
            for ox in 0..ow {
                let (x0, x1, fx) = (rx.lo[ox], rx.hi[ox], T::of(rx.frac[ox]));
                let gv = go[oy * ow + ox];
                let gt = gv * (T::one() - fy);
                let gb = gv * fy;
                dst[y0 * w + x0] = dst[y0 * w + x0] + gt * (T::one() - fx);
                dst[y0 * w + x1] = dst[y0 * w + x1] + gt * fx;
                dst[y1 * w + x0] = dst[y1 * w + x0] + gb * (T::one() - fx);
                dst[y1 * w + x1] = dst[y1 * w + x1] + gb * fx;
            }
        }
    }
    gx
}

/// `(m, k) · (k, n)`, optionally transposing either operand.
pub fn matmul<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Tensor<T> {
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a.data(),
        rsa,
        csa,
        b.data(),
        rsb,
        csb,
        T::zero(),
        out.data_mut(),
        n as isize,
        1,
    );
    out
}
