//! Dense row-major tensors and the raw kernels the differentiable ops are built on.

use crate::real::Real;

/// Geometry of a 2-D convolution: square kernel, symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize, kernel: usize) -> usize {
        assert!(
            input + 2 * self.pad >= kernel,
            "convolution kernel {kernel} larger than padded input {input}+2*{}",
            self.pad
        );
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(numel(shape), data.len(), "shape {shape:?} does not match {} elements", data.len());
        Self { shape: shape.to_vec(), data }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Self {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_same(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape);
        Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> T {
        // Pairwise-ish accumulation in f64 keeps long reductions stable in f32.
        let s: f64 = self.data.iter().map(|x| x.to_f64().unwrap()).sum();
        T::lit(s)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64().unwrap() - b.to_f64().unwrap()).abs())
            .fold(0.0, f64::max)
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides of `shape` viewed inside `out` (right aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = row_major_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len()).map(|i| if i < offset || shape[i - offset] == 1 { 0 } else { own[i - offset] }).collect()
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Visits `out` in contiguous runs as `(flat_out, offset_a, offset_b, len, step_a, step_b)`,
/// where the steps are the strides of `a` and `b` along the run (0 or 1).
fn for_each_run(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    // merge adjacent axes that are jointly contiguous so runs are long
    let mut co: Vec<usize> = Vec::with_capacity(out.len());
    let mut ca: Vec<usize> = Vec::with_capacity(out.len());
    let mut cb: Vec<usize> = Vec::with_capacity(out.len());
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        if let Some(last) = co.len().checked_sub(1) {
            if ca[last] == sa[i] * out[i] && cb[last] == sb[i] * out[i] {
                co[last] *= out[i];
                ca[last] = sa[i];
                cb[last] = sb[i];
                continue;
            }
        }
        co.push(out[i]);
        ca.push(sa[i]);
        cb.push(sb[i]);
    }
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = co.len();
    if rank == 0 {
        f(0, 0, 0, 1, 0, 0);
        return;
    }
    let inner = co[rank - 1];
    let (ia, ib) = (ca[rank - 1], cb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    loop {
        f(flat, oa, ob, inner, ia, ib);
        flat += inner;
        if flat >= total {
            break;
        }
        // odometer over the leading axes
        let mut ax = rank - 1;
        loop {
            ax -= 1;
            idx[ax] += 1;
            oa += ca[ax];
            ob += cb[ax];
            if idx[ax] < co[ax] {
                break;
            }
            oa -= ca[ax] * co[ax];
            ob -= cb[ax] * co[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary_broadcast<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape == b.shape {
        return a.zip_same(b, f);
    }
    if b.data.len() == 1 && b.shape.len() <= a.shape.len() {
        let s = b.data[0];
        return a.map(|x| f(x, s));
    }
    let out = broadcast_shape(&a.shape, &b.shape)
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape, b.shape));
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![T::zero(); numel(&out)];
    for_each_run(&out, &sa, &sb, |o, ia, ib, len, da, db| {
        let dst = &mut data[o..o + len];
        match (da, db) {
            (0, 0) => dst.fill(f(a.data[ia], b.data[ib])),
            (_, 0) => {
                let y = b.data[ib];
                for (d, &x) in dst.iter_mut().zip(&a.data[ia..ia + len]) {
                    *d = f(x, y);
                }
            }
            (0, _) => {
                let x = a.data[ia];
                for (d, &y) in dst.iter_mut().zip(&b.data[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
            _ => {
                for ((d, &x), &y) in dst.iter_mut().zip(&a.data[ia..ia + len]).zip(&b.data[ib..ib + len]) {
                    *d = f(x, y);
                }
            }
        }
    });
    Tensor { shape: out, data }
}

pub fn broadcast_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape == shape {
        return t.clone();
    }
    let s = broadcast_strides(&t.shape, shape);
    let zero = vec![0; shape.len()];
    let mut data = vec![T::zero(); numel(shape)];
    for_each_run(shape, &s, &zero, |o, i, _, len, d, _| {
        if d == 0 {
            data[o..o + len].fill(t.data[i]);
        } else {
            data[o..o + len].copy_from_slice(&t.data[i..i + len]);
        }
    });
    Tensor { shape: shape.to_vec(), data }
}

/// Sums `t` down to `shape`, the adjoint of broadcasting `shape` up to `t.shape`.
pub fn sum_to<T: Real>(t: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if t.shape == shape {
        return t.clone();
    }
    if numel(shape) == 1 {
        return Tensor::from_vec(shape, vec![t.sum()]);
    }
    let s = broadcast_strides(shape, &t.shape);
    let zero = vec![0; t.shape.len()];
    let mut data = vec![T::zero(); numel(shape)];
    for_each_run(&t.shape, &s, &zero, |o, i, _, len, d, _| {
        let src = &t.data[o..o + len];
        if d == 0 {
            data[i] = data[i] + src.iter().fold(T::zero(), |acc, &v| acc + v);
        } else {
            for (d, &v) in data[i..i + len].iter_mut().zip(src) {
                *d = *d + v;
            }
        }
    });
    Tensor { shape: shape.to_vec(), data }
}

/// Sum over `axes`, keeping them as size-1 dimensions.
pub fn sum_axes<T: Real>(t: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let mut shape = t.shape.clone();
    for &a in axes {
        assert!(a < shape.len(), "axis {a} out of range for {:?}", t.shape);
        shape[a] = 1;
    }
    sum_to(t, &shape)
}

/// `op(a) * op(b)` for rank-2 operands, where `op` optionally transposes.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul needs rank-2 operands");
    let (ar, ac) = (a.shape[0], a.shape[1]);
    let (br, bc) = (b.shape[0], b.shape[1]);
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    assert_eq!(k, k2, "matmul inner dimensions differ: {:?} x {:?}", a.shape, b.shape);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), &a.data, rsa, csa, &b.data, rsb, csb, T::zero(), &mut out, n as isize, 1);
    Tensor { shape: vec![m, n], data: out }
}

/// Upper bound on im2col buffer elements; batches are processed in chunks below it.
const COL_BUDGET: usize = 1 << 18;

/// Output positions `o` in `0..len_out` whose input index `o * stride + off` lies in `0..len_in`.
fn valid_range(len_out: usize, stride: usize, off: isize, len_in: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = ((len_in as isize - off + s - 1) / s).max(0) as usize;
    (lo.min(len_out), hi.clamp(lo.min(len_out), len_out))
}

/// Unfolds one image into rows of `col` spaced `ld` apart, each row holding `ho * wo` values.
fn im2col<T: Real>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    k: usize,
    g: ConvGeom,
    (ho, wo): (usize, usize),
    col: &mut [T],
    ld: usize,
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, g.stride, i as isize - g.pad as isize, h);
            for j in 0..k {
                let off = j as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.stride, off, w);
                let r = (ci * k + i) * k + j;
                let row = &mut col[r * ld..r * ld + n];
                row[..oh_lo * wo].fill(T::zero());
                row[oh_hi * wo..].fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + i - g.pad;
                    let src = &plane[ih * w..(ih + 1) * w];
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ow in lo..hi {
                            dst[ow] = src[((ow * g.stride) as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulates rows of `col` back into one image.
fn col2im<T: Real>(
    col: &[T],
    ld: usize,
    (c, h, w): (usize, usize, usize),
    k: usize,
    g: ConvGeom,
    (ho, wo): (usize, usize),
    x: &mut [T],
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..k {
            let (oh_lo, oh_hi) = valid_range(ho, g.stride, i as isize - g.pad as isize, h);
            for j in 0..k {
                let off = j as isize - g.pad as isize;
                let (lo, hi) = valid_range(wo, g.stride, off, w);
                let r = (ci * k + i) * k + j;
                let row = &col[r * ld..r * ld + n];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + i - g.pad;
                    let dst = &mut plane[ih * w..(ih + 1) * w];
                    let src = &row[oh * wo..(oh + 1) * wo];
                    if g.stride == 1 {
                        let start = (lo as isize + off) as usize;
                        for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ow in lo..hi {
                            let d = &mut dst[((ow * g.stride) as isize + off) as usize];
                            *d = *d + src[ow];
                        }
                    }
                }
            }
        }
    }
}

fn conv_dims(xs: &[usize], ws: &[usize], g: ConvGeom) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    assert_eq!(xs.len(), 4, "conv input must be NCHW, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv weight must be OIHW, got {ws:?}");
    assert_eq!(ws[2], ws[3], "square kernels only");
    assert_eq!(xs[1], ws[1], "conv channel mismatch: input {xs:?} weight {ws:?}");
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (co, k) = (ws[0], ws[2]);
    (b, c, h, w, co, k, g.out_size(h, k), g.out_size(w, k))
}

fn chunk_len(b: usize, kk: usize, n: usize) -> usize {
    (COL_BUDGET / (kk * n).max(1)).clamp(1, b.max(1))
}

/// Copies images `b0..b0 + cb` of a `[B, co, n]` buffer into `[co, cb * n]` layout.
fn gather_channels<T: Real>(src: &[T], b0: usize, cb: usize, co: usize, n: usize, dst: &mut [T]) {
    let ld = cb * n;
    for t in 0..cb {
        for o in 0..co {
            dst[o * ld + t * n..][..n].copy_from_slice(&src[((b0 + t) * co + o) * n..][..n]);
        }
    }
}

pub fn conv2d<T: Real>(x: &Tensor<T>, wt: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
    let (b, c, h, w, co, k, ho, wo) = conv_dims(&x.shape, &wt.shape, g);
    let (kk, n, img) = (c * k * k, ho * wo, c * h * w);
    let chunk = chunk_len(b, kk, n);
    let mut out = vec![T::zero(); b * co * n];
    let mut col = vec![T::zero(); kk * chunk * n];
    let mut tmp = vec![T::zero(); co * chunk * n];
    for b0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - b0);
        let ld = cb * n;
        for t in 0..cb {
            im2col(&x.data[(b0 + t) * img..][..img], (c, h, w), k, g, (ho, wo), &mut col[t * n..], ld);
        }
        T::gemm(
            co,
            kk,
            ld,
            T::one(),
            &wt.data,
            kk as isize,
            1,
            &col,
            ld as isize,
            1,
            T::zero(),
            &mut tmp,
            ld as isize,
            1,
        );
        for t in 0..cb {
            for o in 0..co {
                out[((b0 + t) * co + o) * n..][..n].copy_from_slice(&tmp[o * ld + t * n..][..n]);
            }
        }
    }
    Tensor { shape: vec![b, co, ho, wo], data: out }
}

/// Gradient of `conv2d` with respect to its input (a transposed convolution).
pub fn conv2d_input_grad<T: Real>(gy: &Tensor<T>, wt: &Tensor<T>, x_shape: &[usize], g: ConvGeom) -> Tensor<T> {
    let (b, c, h, w, co, k, ho, wo) = conv_dims(x_shape, &wt.shape, g);
    assert_eq!(gy.shape, vec![b, co, ho, wo], "conv output-gradient shape mismatch");
    let (kk, n, img) = (c * k * k, ho * wo, c * h * w);
    let chunk = chunk_len(b, kk, n);
    let mut dx = vec![T::zero(); b * img];
    let mut col = vec![T::zero(); kk * chunk * n];
    let mut tmp = vec![T::zero(); co * chunk * n];
    for b0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - b0);
        let ld = cb * n;
        gather_channels(&gy.data, b0, cb, co, n, &mut tmp);
        T::gemm(
            kk,
            co,
            ld,
            T::one(),
            &wt.data,
            1,
            kk as isize,
            &tmp,
            ld as isize,
            1,
            T::zero(),
            &mut col,
            ld as isize,
            1,
        );
        for t in 0..cb {
            col2im(&col[t * n..], ld, (c, h, w), k, g, (ho, wo), &mut dx[(b0 + t) * img..][..img]);
        }
    }
    Tensor { shape: x_shape.to_vec(), data: dx }
}

/// Gradient of `conv2d` with respect to its weight.
pub fn conv2d_weight_grad<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, w_shape: &[usize], g: ConvGeom) -> Tensor<T> {
    let (b, c, h, w, co, k, ho, wo) = conv_dims(&x.shape, w_shape, g);
    assert_eq!(gy.shape, vec![b, co, ho, wo], "conv output-gradient shape mismatch");
    let (kk, n, img) = (c * k * k, ho * wo, c * h * w);
    let chunk = chunk_len(b, kk, n);
    let mut dw = vec![T::zero(); co * kk];
    let mut col = vec![T::zero(); kk * chunk * n];
    let mut tmp = vec![T::zero(); co * chunk * n];
    for b0 in (0..b).step_by(chunk) {
        let cb = chunk.min(b - b0);
        let ld = cb * n;
        for t in 0..cb {
            im2col(&x.data[(b0 + t) * img..][..img], (c, h, w), k, g, (ho, wo), &mut col[t * n..], ld);
        }
        gather_channels(&gy.data, b0, cb, co, n, &mut tmp);
        T::gemm(co, ld, kk, T::one(), &tmp, ld as isize, 1, &col, 1, ld as isize, T::one(), &mut dw, kk as isize, 1);
    }
    Tensor { shape: w_shape.to_vec(), data: dw }
}

/// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
pub fn upsample_nearest<T: Real>(t: &Tensor<T>, f: usize) -> Tensor<T> {
    assert_eq!(t.rank(), 4);
    let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    if f == 1 {
        return t.clone();
    }
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let src = &t.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let srow = &src[(y / f) * w..(y / f + 1) * w];
            let drow = &mut dst[y * wo..(y + 1) * wo];
            for (win, &v) in drow.chunks_exact_mut(f).zip(srow) {
                win.fill(v);
            }
        }
    }
    Tensor { shape: vec![b, c, ho, wo], data: out }
}

/// Sum over non-overlapping `f x f` windows; the adjoint of `upsample_nearest`.
pub fn sum_pool<T: Real>(t: &Tensor<T>, f: usize) -> Tensor<T> {
    assert_eq!(t.rank(), 4);
    let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    if f == 1 {
        return t.clone();
    }
    assert!(h % f == 0 && w % f == 0, "sum_pool factor {f} does not divide {h}x{w}");
    let (ho, wo) = (h / f, w / f);
    let mut out = vec![T::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let src = &t.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..h {
            let srow = &src[y * w..(y + 1) * w];
            let drow = &mut dst[(y / f) * wo..(y / f + 1) * wo];
            for (d, win) in drow.iter_mut().zip(srow.chunks_exact(f)) {
                *d = win.iter().fold(*d, |acc, &v| acc + v);
            }
        }
    }
    Tensor { shape: vec![b, c, ho, wo], data: out }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

pub fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    assert!(!parts.is_empty());
    let first = &parts[0].shape;
    let mut shape = first.clone();
    shape[axis] = 0;
    for p in parts {
        assert_eq!(p.rank(), first.len());
        for (i, (&a, &b)) in p.shape.iter().zip(first).enumerate() {
            assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape, first);
        }
        shape[axis] += p.shape[axis];
    }
    let (outer, inner) = outer_inner(&shape, axis);
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor { shape, data }
}

pub fn narrow<T: Real>(t: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    assert!(start + len <= t.shape[axis], "narrow {start}+{len} out of {:?}", t.shape);
    let (outer, inner) = outer_inner(&t.shape, axis);
    let full = t.shape[axis] * inner;
    let mut shape = t.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        data.extend_from_slice(&t.data[o * full + start * inner..o * full + (start + len) * inner]);
    }
    Tensor { shape, data }
}

/// Embeds `t` at offset `start` of a zero tensor whose `axis` has length `total`.
pub fn pad_axis<T: Real>(t: &Tensor<T>, axis: usize, start: usize, total: usize) -> Tensor<T> {
    let len = t.shape[axis];
    assert!(start + len <= total);
    let (outer, inner) = outer_inner(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = total;
    let mut data = vec![T::zero(); numel(&shape)];
    for o in 0..outer {
        data[o * total * inner + start * inner..o * total * inner + (start + len) * inner]
            .copy_from_slice(&t.data[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor { shape, data }
}
