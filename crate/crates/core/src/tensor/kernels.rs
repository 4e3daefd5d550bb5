//! Raw slice kernels behind the differentiable ops. No tape knowledge here.

use crate::scalar::Scalar;

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
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

/// Strides of `shape` viewed through the (larger or equal) `out` shape,
/// zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every element of `out` in row-major order together with the
/// matching flat offsets of two strided operands.
pub(crate) fn for_each_strided(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    loop {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Batched `[b, m, k] x [b, k, n]`; `a_shared`/`b_shared` mark an operand
/// that is reused for every batch entry.
pub(crate) struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_shared: bool,
    pub b_shared: bool,
}

impl MatmulGeom {
    fn a_off(&self, bi: usize) -> usize {
        if self.a_shared { 0 } else { bi * self.m * self.k }
    }
    fn b_off(&self, bi: usize) -> usize {
        if self.b_shared { 0 } else { bi * self.k * self.n }
    }
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], g: &MatmulGeom) -> Vec<T> {
    let (m, k, n) = (g.m, g.k, g.n);
    let mut out = vec![T::zero(); g.batch * m * n];
    for bi in 0..g.batch {
        let a = &a[g.a_off(bi)..g.a_off(bi) + m * k];
        let b = &b[g.b_off(bi)..g.b_off(bi) + k * n];
        let o = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut o[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a[i * k + p];
                if av == T::zero() {
                    continue;
                }
                for (ov, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *ov += av * bv;
                }
            }
        }
    }
    out
}

/// Gradients of `matmul`: `ga = g·bᵀ`, `gb = aᵀ·g` (summed over batch for
/// shared operands).
pub(crate) fn matmul_backward<T: Scalar>(
    a: &[T],
    b: &[T],
    grad: &[T],
    g: &MatmulGeom,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (g.m, g.k, g.n);
    let mut ga = need_a.then(|| vec![T::zero(); a.len()]);
    let mut gb = need_b.then(|| vec![T::zero(); b.len()]);
    for bi in 0..g.batch {
        let (ao, bo) = (g.a_off(bi), g.b_off(bi));
        let gout = &grad[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            for i in 0..m {
                let grow = &gout[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &b[bo + p * n..bo + (p + 1) * n];
                    let s: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                    ga[ao + i * k + p] += s;
                }
            }
        }
        if let Some(gb) = gb.as_mut() {
            for i in 0..m {
                let grow = &gout[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[ao + i * k + p];
                    let brow = &mut gb[bo + p * n..bo + (p + 1) * n];
                    for (gv, &x) in brow.iter_mut().zip(grow) {
                        *gv += av * x;
                    }
                }
            }
        }
    }
    (ga, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output index range `[lo, hi)` whose input tap `o*stride + k - pad`
    /// falls inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        let k = k as isize;
        let lo = if p > k { (p - k + s - 1) / s } else { 0 };
        let hi = (extent as isize - 1 + p - k).div_euclid(s) + 1;
        let hi = hi.clamp(0, out as isize);
        (lo as usize, (hi.max(lo as isize)) as usize)
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let cin_g = self.cin / self.groups;
        let cout_g = self.cout / self.groups;
        for n in 0..self.n {
            for co in 0..self.cout {
                let grp = co / cout_g;
                for cig in 0..cin_g {
                    let ci = grp * cin_g + cig;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            f(n, co, ci, cig, ky, kx);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.oh, g.ow);
    let mut out = vec![T::zero(); g.n * g.cout * oh * ow];
    if let Some(b) = bias {
        for (i, chunk) in out.chunks_mut(oh * ow).enumerate() {
            chunk.fill(b[i % g.cout]);
        }
    }
    let cin_g = g.cin / g.groups;
    g.for_each_tap(|n, co, ci, cig, ky, kx| {
        let wv = w[((co * cin_g + cig) * g.kh + ky) * g.kw + kx];
        if wv == T::zero() {
            return;
        }
        let (oy0, oy1) = g.valid(ky, g.h, oh);
        let (ox0, ox1) = g.valid(kx, g.w, ow);
        let xbase = (n * g.cin + ci) * g.h * g.w;
        let obase = (n * g.cout + co) * oh * ow;
        for oy in oy0..oy1 {
            let iy = oy * g.stride + ky - g.pad;
            let orow = &mut out[obase + oy * ow + ox0..obase + oy * ow + ox1];
            let xrow = &x[xbase + iy * g.w..xbase + (iy + 1) * g.w];
            if g.stride == 1 {
                let ix0 = ox0 + kx - g.pad;
                for (o, &xv) in orow.iter_mut().zip(&xrow[ix0..ix0 + (ox1 - ox0)]) {
                    *o += wv * xv;
                }
            } else {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o += wv * xrow[(ox0 + j) * g.stride + kx - g.pad];
                }
            }
        }
    });
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    grad: &[T],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (oh, ow) = (g.oh, g.ow);
    let mut gx = need.0.then(|| vec![T::zero(); x.len()]);
    let mut gw = need.1.then(|| vec![T::zero(); w.len()]);
    let gb = need.2.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for (i, chunk) in grad.chunks(oh * ow).enumerate() {
            gb[i % g.cout] += chunk.iter().copied().sum();
        }
        gb
    });
    if gx.is_none() && gw.is_none() {
        return ConvGrads { x: None, w: None, b: gb };
    }
    let cin_g = g.cin / g.groups;
    g.for_each_tap(|n, co, ci, cig, ky, kx| {
        let widx = ((co * cin_g + cig) * g.kh + ky) * g.kw + kx;
        let wv = w[widx];
        let (oy0, oy1) = g.valid(ky, g.h, oh);
        let (ox0, ox1) = g.valid(kx, g.w, ow);
        let xbase = (n * g.cin + ci) * g.h * g.w;
        let obase = (n * g.cout + co) * oh * ow;
        let mut acc = T::zero();
        for oy in oy0..oy1 {
            let iy = oy * g.stride + ky - g.pad;
            let grow = &grad[obase + oy * ow + ox0..obase + oy * ow + ox1];
            let xoff = xbase + iy * g.w;
            if g.stride == 1 {
                let ix0 = xoff + ox0 + kx - g.pad;
                if gw.is_some() {
                    acc += grow
                        .iter()
                        .zip(&x[ix0..ix0 + grow.len()])
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                }
                if let Some(gx) = gx.as_mut() {
                    for (gxv, &gv) in gx[ix0..ix0 + grow.len()].iter_mut().zip(grow) {
                        *gxv += wv * gv;
                    }
                }
            } else {
                for (j, &gv) in grow.iter().enumerate() {
                    let ix = xoff + (ox0 + j) * g.stride + kx - g.pad;
                    if gw.is_some() {
                        acc += gv * x[ix];
                    }
                    if let Some(gx) = gx.as_mut() {
                        gx[ix] += wv * gv;
                    }
                }
            }
        }
        if let Some(gw) = gw.as_mut() {
            gw[widx] += acc;
        }
    });
    ConvGrads { x: gx, w: gw, b: gb }
}

/// Per-axis interpolation taps for half-pixel-centre bilinear resampling.
///
/// Taps are always the two nearest in-range samples, so positions beyond the
/// outermost sample centres extrapolate linearly. This keeps affine signals
/// exact up to the border.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub i0: Vec<usize>,
    pub i1: Vec<usize>,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let mut taps = AxisTaps {
            i0: Vec::with_capacity(output),
            i1: Vec::with_capacity(output),
            w0: Vec::with_capacity(output),
            w1: Vec::with_capacity(output),
        };
        let ratio = input as f64 / output as f64;
        for o in 0..output {
            if input == 1 {
                taps.i0.push(0);
                taps.i1.push(0);
                taps.w0.push(1.0);
                taps.w1.push(0.0);
                continue;
            }
            let src = (o as f64 + 0.5) * ratio - 0.5;
            let base = (src.floor() as isize).clamp(0, input as isize - 2) as usize;
            let frac = src - base as f64;
            taps.i0.push(base);
            taps.i1.push(base + 1);
            taps.w0.push(1.0 - frac);
            taps.w1.push(frac);
        }
        taps
    }
}

pub(crate) fn resize<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
) -> Vec<T> {
    let (oh, ow) = (ty.i0.len(), tx.i0.len());
    let mut out = vec![T::zero(); planes * oh * ow];
    let (wx0, wx1): (Vec<T>, Vec<T>) = (
        tx.w0.iter().map(|&v| T::lit(v)).collect(),
        tx.w1.iter().map(|&v| T::lit(v)).collect(),
    );
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (r0, r1) = (&src[ty.i0[oy] * w..][..w], &src[ty.i1[oy] * w..][..w]);
            let (a, b) = (T::lit(ty.w0[oy]), T::lit(ty.w1[oy]));
            for ox in 0..ow {
                let (c0, c1) = (tx.i0[ox], tx.i1[ox]);
                let top = wx0[ox] * r0[c0] + wx1[ox] * r0[c1];
                let bot = wx0[ox] * r1[c0] + wx1[ox] * r1[c1];
                dst[oy * ow + ox] = a * top + b * bot;
            }
        }
    }
    out
}

pub(crate) fn resize_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    (h, w): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
) -> Vec<T> {
    let (oh, ow) = (ty.i0.len(), tx.i0.len());
    let mut gx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (a, b) = (T::lit(ty.w0[oy]), T::lit(ty.w1[oy]));
            let (r0, r1) = (ty.i0[oy] * w, ty.i1[oy] * w);
            for ox in 0..ow {
                let gv = g[oy * ow + ox];
                let (c0, c1) = (tx.i0[ox], tx.i1[ox]);
                let (u0, u1) = (T::lit(tx.w0[ox]) * gv, T::lit(tx.w1[ox]) * gv);
                dst[r0 + c0] += a * u0;
                dst[r0 + c1] += a * u1;
                dst[r1 + c0] += b * u0;
                dst[r1 + c1] += b * u1;
            }
        }
    }
    gx
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Scalar>(x: &[T], (outer, len, inner): (usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    grad: &[T],
    (outer, len, inner): (usize, usize, usize),
) -> Vec<T> {
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let dot: T = (0..len).map(|k| y[at(k)] * grad[at(k)]).sum();
            for k in 0..len {
                gx[at(k)] = y[at(k)] * (grad[at(k)] - dot);
            }
        }
    }
    gx
}

pub(crate) fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_strided(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    out
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[1], &[5, 5]), Some(vec![5, 5]));
        assert_eq!(broadcast_shape(&[2, 3], &[4, 3]), None);
        assert_eq!(broadcast_strides(&[3, 1], &[2, 3, 4]), vec![0, 1, 0]);
    }

    #[test]
    fn strided_visit_covers_everything_once() {
        let out = [2, 3, 2];
        let s = contiguous_strides(&out);
        let mut seen = vec![0; 12];
        for_each_strided(&out, &s, &[0, 0, 0], |o, a, b| {
            assert_eq!(o, a);
            assert_eq!(b, 0);
            seen[o] += 1;
        });
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn valid_ranges_with_stride_and_padding() {
        let g = ConvGeom {
            n: 1, cin: 1, h: 8, w: 8, cout: 1, kh: 4, kw: 4,
            stride: 2, pad: 1, groups: 1, oh: 4, ow: 4,
        };
        assert_eq!(g.valid(0, 8, 4), (1, 4));
        assert_eq!(g.valid(1, 8, 4), (0, 4));
        assert_eq!(g.valid(3, 8, 4), (0, 3));
    }

    #[test]
    fn upsample_taps_extrapolate_at_border() {
        let t = AxisTaps::new(4, 8);
        assert_eq!((t.i0[0], t.i1[0]), (0, 1));
        assert!((t.w0[0] - 1.25).abs() < 1e-12 && (t.w1[0] + 0.25).abs() < 1e-12);
    }
}
