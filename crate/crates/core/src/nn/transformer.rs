use super::conv::Conv2d;
use super::params::{join, Ctx, Init, Module, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Var;

const NORM_EPS: f64 = 1e-6;

/// Per-pixel normalization across channels with a learned affine.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm2d {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, eps: 1e-5 }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::invalid(
                "layer_norm",
                format!("{} expects [N, {}, H, W], got {:?}", self.name, self.channels, x.shape()),
            ));
        }
        let centered = x.sub(&x.mean_axes(&[1])?)?;
        let var = centered.square()?.mean_axes(&[1])?;
        let y = centered.div(&var.add_scalar(T::lit(self.eps))?.sqrt()?)?;
        let shape = [1, self.channels, 1, 1];
        let w = cx.param(&join(&self.name, "weight"))?.reshape(&shape)?;
        let b = cx.param(&join(&self.name, "bias"))?.reshape(&shape)?;
        y.mul(&w)?.add(&b)
    }
}

impl Module for LayerNorm2d {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        out.push(ParamSpec { name: join(&self.name, "weight"), shape: vec![self.channels], init: Init::Ones });
        out.push(ParamSpec { name: join(&self.name, "bias"), shape: vec![self.channels], init: Init::Zeros });
    }
}

/// 1×1 projection followed by a depth-wise spatial filter. With `stride > 1`
/// the depth-wise kernel is `stride + 2` wide with padding 1, which maps an
/// extent divisible by `stride` to exactly `extent / stride`.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub proj: Conv2d,
    pub spatial: Conv2d,
}

impl Embedding {
    pub fn new(name: &str, in_channels: usize, channels: usize, stride: usize) -> Self {
        let proj = Conv2d::new(join(name, "proj"), in_channels, channels, 1);
        let spatial = if stride <= 1 {
            Conv2d::depthwise(join(name, "dw"), channels, 3)
        } else {
            Conv2d::depthwise(join(name, "dw"), channels, stride + 2).with_stride(stride, 1)
        };
        Self { proj, spatial }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.spatial.forward(cx, &self.proj.forward(cx, x)?)
    }
}

impl Module for Embedding {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.proj.collect_params(out);
        self.spatial.collect_params(out);
    }
}

/// Attention across channels: per head, a `d×d` map from L2-normalized key
/// and query rows, scaled by a learned temperature, applied to the values.
#[derive(Clone, Debug, PartialEq)]
pub struct TransposedAttention {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub query: Embedding,
    pub key: Embedding,
    pub value: Embedding,
    pub out: Conv2d,
}

impl TransposedAttention {
    /// Self-attention over one `channels`-wide input.
    pub fn new(name: &str, channels: usize, heads: usize) -> Result<Self> {
        Self::cross(name, channels, heads, [channels; 3], [1; 3])
    }

    /// Each of query, key and value gets its own source width and stride.
    pub fn cross(
        name: &str,
        channels: usize,
        heads: usize,
        in_channels: [usize; 3],
        strides: [usize; 3],
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(
                "transposed_attention",
                format!("{channels} channels not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            heads,
            query: Embedding::new(&join(name, "q"), in_channels[0], channels, strides[0]),
            key: Embedding::new(&join(name, "k"), in_channels[1], channels, strides[1]),
            value: Embedding::new(&join(name, "v"), in_channels[2], channels, strides[2]),
            out: Conv2d::new(join(name, "out"), channels, channels, 1),
        })
    }

    pub fn zero_init(mut self) -> Self {
        self.out = self.out.zero_init();
        self
    }

    fn temperature_name(&self) -> String {
        join(&self.name, "temperature")
    }

    fn normalized<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let last = x.shape().len() - 1;
        let norm = x.square()?.sum_axes(&[last])?.add_scalar(T::lit(NORM_EPS))?.sqrt()?;
        x.div(&norm)
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        q_src: &Var<'t, T>,
        k_src: &Var<'t, T>,
        v_src: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let q = self.query.forward(cx, q_src)?;
        let k = self.key.forward(cx, k_src)?;
        let v = self.value.forward(cx, v_src)?;
        self.attend(cx, &q, &k, &v)
    }

    /// Attention over already-embedded query, key and value features.
    pub fn attend<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        q: &Var<'t, T>,
        k: &Var<'t, T>,
        v: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        for other in [k, v] {
            if other.shape() != q.shape() {
                return Err(Error::ShapeMismatch {
                    op: "transposed_attention",
                    lhs: q.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        let (n, c, h, w) = q.value().dims4()?;
        if c != self.channels {
            return Err(Error::invalid(
                "transposed_attention",
                format!("{} expects {} channels, got {c}", self.name, self.channels),
            ));
        }
        let heads = [n, self.heads, c / self.heads, h * w];
        let q = Self::normalized(&q.reshape(&heads)?)?;
        let k = Self::normalized(&k.reshape(&heads)?)?;
        let v = v.reshape(&heads)?;
        let tau = cx.param(&self.temperature_name())?.reshape(&[1, self.heads, 1, 1])?;
        let attn = k.matmul(&q.transpose_last2()?)?.mul(&tau)?.softmax(3)?;
        cx.push_attention(&self.name, &attn);
        let mixed = attn.matmul(&v)?.reshape(&[n, c, h, w])?;
        self.out.forward(cx, &mixed)
    }
}

impl Module for TransposedAttention {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.query.collect_params(out);
        self.key.collect_params(out);
        self.value.collect_params(out);
        out.push(ParamSpec { name: self.temperature_name(), shape: vec![self.heads], init: Init::Ones });
        self.out.collect_params(out);
    }
}

/// Feed-forward: 1×1 expand, depth-wise 3×3, GELU, 1×1 contract.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub expand: Conv2d,
    pub spatial: Conv2d,
    pub contract: Conv2d,
}

impl FeedForward {
    pub fn new(name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        Self {
            expand: Conv2d::new(join(name, "expand"), channels, hidden, 1),
            spatial: Conv2d::depthwise(join(name, "dw"), hidden, 3),
            contract: Conv2d::new(join(name, "contract"), hidden, channels, 1),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.contract = self.contract.zero_init();
        self
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.spatial.forward(cx, &self.expand.forward(cx, x)?)?.gelu()?;
        self.contract.forward(cx, &h)
    }
}

impl Module for FeedForward {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.expand.collect_params(out);
        self.spatial.collect_params(out);
        self.contract.collect_params(out);
    }
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + ffn(norm(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub norm1: LayerNorm2d,
    pub attention: TransposedAttention,
    pub norm2: LayerNorm2d,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(name: &str, channels: usize, heads: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm2d::new(join(name, "norm1"), channels),
            attention: TransposedAttention::new(&join(name, "attn"), channels, heads)?.zero_init(),
            norm2: LayerNorm2d::new(join(name, "norm2"), channels),
            ffn: FeedForward::new(&join(name, "ffn"), channels, expansion).zero_init(),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let n = self.norm1.forward(cx, x)?;
        let x = x.add(&self.attention.forward(cx, &n, &n, &n)?)?;
        let n = self.norm2.forward(cx, &x)?;
        x.add(&self.ffn.forward(cx, &n)?)
    }
}

impl Module for TransformerBlock {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.norm1.collect_params(out);
        self.attention.collect_params(out);
        self.norm2.collect_params(out);
        self.ffn.collect_params(out);
    }
}
