use num_rational::Ratio;

use super::kernels::{self, AxisTaps, ConvGeom, MatmulGeom};
use super::tape::{Op, Var};
use super::value::{check_finite, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dOpts {
    pub fn same(kernel: usize) -> Self {
        Self {
            padding: kernel / 2,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t, T: Scalar> Var<'t, T> {
    fn emit(&self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Result<Self> {
        check_finite(op_name, &data)?;
        let value = Tensor::new(shape, data)?;
        Ok(self.tape().record(value, op, inputs))
    }

    fn binary(&self, other: &Self, kind: Binary) -> Result<Self> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(), other.shape());
        let out_shape = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (a, b) = (self.value().data(), other.value().data());
        if matches!(kind, Binary::Div) && b.iter().any(|&v| v == T::zero()) {
            return Err(Error::DivisionByZero("div"));
        }
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> = if sa == sb {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); out_shape.iter().product()];
            let s1 = kernels::broadcast_strides(sa, &out_shape);
            let s2 = kernels::broadcast_strides(sb, &out_shape);
            kernels::for_each_strided(&out_shape, &s1, &s2, |o, i, j| out[o] = f(a[i], b[j]));
            out
        };
        let (x, y) = (self.id(), other.id());
        let op = match kind {
            Binary::Add => Op::Add(x, y),
            Binary::Sub => Op::Sub(x, y),
            Binary::Mul => Op::Mul(x, y),
            Binary::Div => Op::Div(x, y),
        };
        self.emit(name, out_shape, data, op, &[x, y])
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Mul)
    }

    /// Elementwise quotient. Any exact zero in the divisor is an error.
    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, Binary::Div)
    }

    fn unary(&self, name: &'static str, op: Op<T>, f: impl Fn(T) -> T) -> Result<Self> {
        let data = self.value().data().iter().map(|&v| f(v)).collect();
        self.emit(name, self.shape().to_vec(), data, op, &[self.id()])
    }

    pub fn add_scalar(&self, s: T) -> Result<Self> {
        self.unary("add_scalar", Op::AddScalar(self.id()), |v| v + s)
    }

    pub fn scale(&self, s: T) -> Result<Self> {
        self.unary("scale", Op::Scale(self.id(), s), |v| v * s)
    }

    pub fn neg(&self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn square(&self) -> Result<Self> {
        self.unary("square", Op::Square(self.id()), |v| v * v)
    }

    /// Square root. Negative inputs are an error; an exact zero input is
    /// rejected as well since its gradient is a pole.
    pub fn sqrt(&self) -> Result<Self> {
        let data = self.value().data();
        if let Some(&bad) = data.iter().find(|&&v| v < T::zero()) {
            return Err(Error::NegativeSqrt(bad.as_f64()));
        }
        if self.requires_grad() && data.iter().any(|&v| v == T::zero()) {
            return Err(Error::DivisionByZero("sqrt backward"));
        }
        self.unary("sqrt", Op::Sqrt(self.id()), |v| v.sqrt())
    }

    pub fn clamp(&self, lo: T, hi: T) -> Result<Self> {
        self.unary("clamp", Op::Clamp(self.id(), lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn relu(&self) -> Result<Self> {
        self.unary("relu", Op::Relu(self.id()), |v| v.max(T::zero()))
    }

    pub fn sigmoid(&self) -> Result<Self> {
        self.unary("sigmoid", Op::Sigmoid(self.id()), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn gelu(&self) -> Result<Self> {
        self.unary("gelu", Op::Gelu(self.id()), kernels::gelu)
    }

    /// Rounds onto the `2^-GRID_BITS` grid; gradient passes straight through.
    pub fn snap(&self) -> Result<Self> {
        let q = T::lit(2f64.powi(T::GRID_BITS));
        self.unary("snap", Op::Snap(self.id()), |v| (v * q).round() / q)
    }

    /// Batched matrix product over the trailing two axes. A rank-2 operand
    /// is shared across the other operand's batch.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let (pa, pb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let prefix = if pa == pb || pb.is_empty() {
            pa.to_vec()
        } else if pa.is_empty() {
            pb.to_vec()
        } else {
            return Err(mismatch());
        };
        let geom = MatmulGeom {
            batch: prefix.iter().product(),
            m,
            k,
            n,
            a_shared: pa.is_empty() && !pb.is_empty(),
            b_shared: pb.is_empty() && !pa.is_empty(),
        };
        let data = kernels::matmul(self.value().data(), other.value().data(), &geom);
        let mut shape = prefix;
        shape.extend([m, n]);
        let ids = [self.id(), other.id()];
        self.emit("matmul", shape, data, Op::Matmul(ids[0], ids[1], geom), &ids)
    }

    /// 2-D convolution (cross-correlation) on NCHW input with weight
    /// `[cout, cin/groups, kh, kw]`. Output extents must come out integral.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, opts: Conv2dOpts) -> Result<Self> {
        let (n, cin, h, w) = self.value().dims4()?;
        let ws = weight.shape();
        let [cout, cin_g, kh, kw] = *ws else {
            return Err(Error::invalid("conv2d", format!("weight must be rank 4, got {ws:?}")));
        };
        let Conv2dOpts { stride, padding, groups } = opts;
        if groups == 0 || stride == 0 {
            return Err(Error::invalid("conv2d", "stride and groups must be positive"));
        }
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::invalid(
                "conv2d",
                format!("{cin} input / {cout} output channels incompatible with {groups} groups and weight {ws:?}"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: b.shape().to_vec(), rhs: vec![cout] });
            }
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let span = (size + 2 * padding).checked_sub(k).ok_or_else(|| {
                Error::invalid("conv2d", format!("kernel {k} exceeds padded extent {}", size + 2 * padding))
            })?;
            if span % stride != 0 {
                return Err(Error::invalid(
                    "conv2d",
                    format!("extent {size} with kernel {k}, padding {padding}, stride {stride} is not integral"),
                ));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            groups,
            oh: extent(h, kh)?,
            ow: extent(w, kw)?,
        };
        let data = kernels::conv2d(
            self.value().data(),
            weight.value().data(),
            bias.map(|b| b.value().data()),
            &geom,
        );
        let mut ids = vec![self.id(), weight.id()];
        ids.extend(bias.map(|b| b.id()));
        let op = Op::Conv2d {
            x: self.id(),
            w: weight.id(),
            b: bias.map(|b| b.id()),
            geom,
        };
        self.emit("conv2d", vec![n, cout, geom.oh, geom.ow], data, op, &ids)
    }

    /// Half-pixel-centre bilinear resampling of the trailing two axes.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let s = self.shape();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize", format!("cannot resize {s:?} to {out_h}x{out_w}")));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.value().numel() / (h * w);
        let taps = Box::new((AxisTaps::new(h, out_h), AxisTaps::new(w, out_w)));
        let data = kernels::resize(self.value().data(), planes, (h, w), &taps.0, &taps.1);
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        let op = Op::Resize { x: self.id(), planes, taps };
        self.emit("resize", shape, data, op, &[self.id()])
    }

    /// Resizes by an exact rational factor; both extents must scale to integers.
    pub fn rescale(&self, factor: Ratio<usize>) -> Result<Self> {
        let s = self.shape();
        if s.len() < 2 || *factor.numer() == 0 {
            return Err(Error::invalid("rescale", format!("bad factor {factor} for shape {s:?}")));
        }
        let scaled = |v: usize| {
            let r = Ratio::from_integer(v) * factor;
            if r.is_integer() && r.to_integer() > 0 {
                Ok(r.to_integer())
            } else {
                Err(Error::invalid("rescale", format!("extent {v} times {factor} is not a positive integer")))
            }
        };
        let (h, w) = (scaled(s[s.len() - 2])?, scaled(s[s.len() - 1])?);
        self.resize_bilinear(h, w)
    }

    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let s = self.shape();
        if axis >= s.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let split = kernels::axis_split(s, axis);
        let data = kernels::softmax(self.value().data(), split);
        self.emit("softmax", s.to_vec(), data, Op::Softmax(self.id(), split), &[self.id()])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.value().numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        let data = self.value().data().to_vec();
        Ok(self.tape().record(Tensor::new(shape.to_vec(), data)?, Op::Reshape(self.id()), &[self.id()]))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let s = self.shape();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", s.len())));
        }
        let data = kernels::permute(self.value().data(), s, perm);
        let shape = perm.iter().map(|&p| s[p]).collect();
        self.emit("permute", shape, data, Op::Permute(self.id(), perm.to_vec()), &[self.id()])
    }

    /// Swaps the trailing two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank must be at least 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        for p in parts {
            let s = p.shape();
            if s.len() != s0.len() || s.iter().zip(s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::ShapeMismatch { op: "concat", lhs: s0.to_vec(), rhs: s.to_vec() });
            }
        }
        let (outer, _, inner) = kernels::axis_split(s0, axis);
        let total_len: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.value().data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0.to_vec();
        shape[axis] = total_len;
        let ids: Vec<usize> = parts.iter().map(|p| p.id()).collect();
        first.emit("concat", shape, data, Op::Concat(ids.clone(), (outer, total_len * inner)), &ids)
    }

    /// `count` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, count: usize) -> Result<Self> {
        let s = self.shape();
        if axis >= s.len() || start + count > s[axis] || count == 0 {
            return Err(Error::invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + count)));
        }
        let split @ (outer, len, inner) = kernels::axis_split(s, axis);
        let src = self.value().data();
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + start + count) * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = count;
        self.emit("slice", shape, data, Op::Slice(self.id(), split, start, count), &[self.id()])
    }

    /// Zero padding of the trailing two axes: `[top, bottom, left, right]`.
    pub fn pad2d(&self, pads: [usize; 4]) -> Result<Self> {
        let s = self.shape();
        if s.len() < 2 {
            return Err(Error::invalid("pad2d", "rank must be at least 2"));
        }
        let [top, bottom, left, right] = pads;
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let (ph, pw) = (h + top + bottom, w + left + right);
        let planes = self.value().numel() / (h * w);
        let mut data = vec![T::zero(); planes * ph * pw];
        let src = self.value().data();
        for p in 0..planes {
            for y in 0..h {
                let dst = p * ph * pw + (y + top) * pw + left;
                data[dst..dst + w].copy_from_slice(&src[p * h * w + y * w..p * h * w + (y + 1) * w]);
            }
        }
        let mut shape = s.to_vec();
        let r = shape.len();
        shape[r - 2] = ph;
        shape[r - 1] = pw;
        self.emit("pad2d", shape, data, Op::Pad(self.id(), pads), &[self.id()])
    }

    /// Sum over `axes`, keeping them as extent-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let s = self.shape();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::invalid("sum", format!("axes {axes:?} out of range for {s:?}")));
        }
        let mut out_shape = s.to_vec();
        for &a in axes {
            out_shape[a] = 1;
        }
        let mut data = vec![T::zero(); out_shape.iter().product()];
        let si = kernels::contiguous_strides(s);
        let so = kernels::broadcast_strides(&out_shape, s);
        let src = self.value().data();
        kernels::for_each_strided(s, &si, &so, |_, i, o| data[o] += src[i]);
        self.emit("sum", out_shape, data, Op::Sum(self.id()), &[self.id()])
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes)?.scale(T::one() / T::lit(count as f64))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Self> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.sum_axes(&axes)?.reshape(&[1])
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = self.value().numel();
        self.sum_all()?.scale(T::one() / T::lit(n as f64))
    }

    /// Mean over the spatial axes of an NCHW tensor, `[N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Self> {
        self.value().dims4()?;
        self.mean_axes(&[2, 3])
    }
}
