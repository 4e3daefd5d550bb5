use super::params::{join, Ctx, Init, Module, ParamSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Conv2dOpts, Var};

/// 2-D convolution with optional bias. Weights `[cout, cin/groups, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub opts: Conv2dOpts,
    pub bias: bool,
    pub zero_init: bool,
}

impl Conv2d {
    /// Stride 1, "same" padding, with bias.
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            opts: Conv2dOpts::same(kernel),
            bias: true,
            zero_init: false,
        }
    }

    /// One filter per channel.
    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        let mut c = Self::new(name, channels, channels, kernel);
        c.opts.groups = channels;
        c
    }

    pub fn with_stride(mut self, stride: usize, padding: usize) -> Self {
        self.opts.stride = stride;
        self.opts.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// Starts from an all-zero weight, so the layer outputs its bias.
    pub fn zero_init(mut self) -> Self {
        self.zero_init = true;
        self
    }

    pub fn weight_name(&self) -> String {
        join(&self.name, "weight")
    }

    pub fn bias_name(&self) -> String {
        join(&self.name, "bias")
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels / self.opts.groups, self.kernel, self.kernel]
    }

    fn fan_in(&self) -> usize {
        self.in_channels / self.opts.groups * self.kernel * self.kernel
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let cin = x.shape().get(1).copied().unwrap_or(0);
        if x.shape().len() != 4 || cin != self.in_channels {
            return Err(Error::invalid(
                "conv2d",
                format!("{} expects [N, {}, H, W], got {:?}", self.name, self.in_channels, x.shape()),
            ));
        }
        let w = cx.param(&self.weight_name())?;
        let b = if self.bias { Some(cx.param(&self.bias_name())?) } else { None };
        x.conv2d(&w, b.as_ref(), self.opts)
    }
}

impl Module for Conv2d {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        let init = if self.zero_init {
            Init::Zeros
        } else {
            Init::Uniform(1.0 / (self.fan_in() as f64).sqrt())
        };
        out.push(ParamSpec { name: self.weight_name(), shape: self.weight_shape(), init });
        if self.bias {
            out.push(ParamSpec { name: self.bias_name(), shape: vec![self.out_channels], init: Init::Zeros });
        }
    }
}

/// Depth-wise k×k followed by a point-wise 1×1.
#[derive(Clone, Debug, PartialEq)]
pub struct DsConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DsConv {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            depthwise: Conv2d::depthwise(join(name, "dw"), in_channels, kernel),
            pointwise: Conv2d::new(join(name, "pw"), in_channels, out_channels, 1),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.pointwise = self.pointwise.zero_init();
        self
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.pointwise.forward(cx, &self.depthwise.forward(cx, x)?)
    }
}

impl Module for DsConv {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.depthwise.collect_params(out);
        self.pointwise.collect_params(out);
    }
}

/// Standard or separable convolution, chosen at construction.
#[derive(Clone, Debug, PartialEq)]
pub enum ConvUnit {
    Standard(Conv2d),
    Separable(DsConv),
}

impl ConvUnit {
    pub fn new(name: &str, in_channels: usize, out_channels: usize, kernel: usize, separable: bool) -> Self {
        if separable {
            Self::Separable(DsConv::new(name, in_channels, out_channels, kernel))
        } else {
            Self::Standard(Conv2d::new(name, in_channels, out_channels, kernel))
        }
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            Self::Standard(c) => c.forward(cx, x),
            Self::Separable(c) => c.forward(cx, x),
        }
    }
}

impl Module for ConvUnit {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        match self {
            Self::Standard(c) => c.collect_params(out),
            Self::Separable(c) => c.collect_params(out),
        }
    }
}

/// Global average pool, bottleneck MLP, sigmoid gate, channel-wise rescale.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::invalid(
                "channel_attention",
                format!("{channels} channels not divisible by reduction {reduction}"),
            ));
        }
        let mid = channels / reduction;
        Ok(Self {
            squeeze: Conv2d::new(join(name, "squeeze"), channels, mid, 1),
            excite: Conv2d::new(join(name, "excite"), mid, channels, 1),
        })
    }

    /// The `[N, C, 1, 1]` gate in (0, 1).
    pub fn gate<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let pooled = x.global_avg_pool()?;
        self.excite.forward(cx, &self.squeeze.forward(cx, &pooled)?.relu()?)?.sigmoid()
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.mul(&self.gate(cx, x)?)
    }
}

impl Module for ChannelAttention {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.squeeze.collect_params(out);
        self.excite.collect_params(out);
    }
}

/// Residual channel-attention block: `x + CA(conv(relu(conv(x))))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rcab {
    pub conv1: ConvUnit,
    pub conv2: Conv2d,
    pub attention: ChannelAttention,
}

impl Rcab {
    /// `separable` swaps the first 3×3 for a depth-wise separable one.
    pub fn new(name: &str, channels: usize, reduction: usize, separable: bool) -> Result<Self> {
        Ok(Self {
            conv1: ConvUnit::new(&join(name, "conv1"), channels, channels, 3, separable),
            conv2: Conv2d::new(join(name, "conv2"), channels, channels, 3).zero_init(),
            attention: ChannelAttention::new(&join(name, "ca"), channels, reduction)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.conv1.forward(cx, x)?.relu()?;
        let h = self.conv2.forward(cx, &h)?;
        x.add(&self.attention.forward(cx, &h)?)
    }
}

impl Module for Rcab {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.conv1.collect_params(out);
        self.conv2.collect_params(out);
        self.attention.collect_params(out);
    }
}
