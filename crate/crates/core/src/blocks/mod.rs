//! Composite blocks: the Transformer and encoder-decoder branches, the hybrid
//! fusion block and the multi-input attention module.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, ChannelAttention, Conv2d, Ctx, DsConv, Module, ParamSpec, Rcab, TransformerBlock, TransposedAttention};
use crate::scalar::Scalar;
use crate::tensor::Var;

#[cfg(test)]
mod tests;

/// Shape of one hybrid network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub channels: usize,
    pub rtb_depth: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    /// Encoder plus decoder stages; even.
    pub edb_stages: usize,
    pub rcab_per_stage: usize,
    pub reduction: usize,
    /// Depth-wise separable first conv in every encoder RCAB.
    pub dsc_encoder: bool,
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!("channels {} not divisible by heads {}", self.channels, self.heads));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return bad(format!("channels {} not divisible by reduction {}", self.channels, self.reduction));
        }
        if self.edb_stages < 2 || self.edb_stages % 2 != 0 {
            return bad(format!("edb_stages must be even and at least 2, got {}", self.edb_stages));
        }
        if self.rcab_per_stage == 0 || self.ffn_expansion == 0 {
            return bad("rcab_per_stage and ffn_expansion must be positive".into());
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.edb_stages / 2 - 1)
    }
}

/// Stack of Transformer blocks and a zero-initialized 3×3 tail inside an
/// outer residual.
#[derive(Clone, Debug, PartialEq)]
pub struct Rtb {
    pub blocks: Vec<TransformerBlock>,
    pub tail: Conv2d,
}

impl Rtb {
    pub fn new(name: &str, cfg: &BranchConfig) -> Result<Self> {
        let blocks = (0..cfg.rtb_depth)
            .map(|i| TransformerBlock::new(&join(name, &format!("block{i}")), cfg.channels, cfg.heads, cfg.ffn_expansion))
            .collect::<Result<_>>()?;
        let tail = Conv2d::new(join(name, "tail"), cfg.channels, cfg.channels, 3).zero_init();
        Ok(Self { blocks, tail })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(cx, &h)?;
        }
        x.add(&self.tail.forward(cx, &h)?)
    }
}

impl Module for Rtb {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        for b in &self.blocks {
            b.collect_params(out);
        }
        self.tail.collect_params(out);
    }
}

/// Concatenation, a separable 3×3 back to `C` channels, channel attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Hfb {
    pub inputs: usize,
    pub channels: usize,
    pub fuse: DsConv,
    pub attention: ChannelAttention,
}

impl Hfb {
    pub fn new(name: &str, channels: usize, inputs: usize, reduction: usize) -> Result<Self> {
        if inputs < 2 {
            return Err(Error::invalid("hfb", format!("needs at least 2 inputs, got {inputs}")));
        }
        Ok(Self {
            inputs,
            channels,
            fuse: DsConv::new(&join(name, "fuse"), inputs * channels, channels, 3),
            attention: ChannelAttention::new(&join(name, "ca"), channels, reduction)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, inputs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        if inputs.len() != self.inputs {
            return Err(Error::invalid("hfb", format!("expected {} inputs, got {}", self.inputs, inputs.len())));
        }
        let first = inputs[0].shape();
        if let Some(bad) = inputs.iter().find(|v| v.shape() != first || first.get(1) != Some(&self.channels)) {
            return Err(Error::ShapeMismatch { op: "hfb", lhs: first.to_vec(), rhs: bad.shape().to_vec() });
        }
        let cat = Var::concat(inputs, 1)?;
        self.attention.forward(cx, &self.fuse.forward(cx, &cat)?)
    }
}

impl Module for Hfb {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.fuse.collect_params(out);
        self.attention.collect_params(out);
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    rcabs: Vec<Rcab>,
}

impl Stage {
    fn new(name: &str, cfg: &BranchConfig, separable: bool) -> Result<Self> {
        let rcabs = (0..cfg.rcab_per_stage)
            .map(|i| Rcab::new(&join(name, &format!("rcab{i}")), cfg.channels, cfg.reduction, separable))
            .collect::<Result<_>>()?;
        Ok(Self { rcabs })
    }

    fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let mut h = x.clone();
        for r in &self.rcabs {
            h = r.forward(cx, &h)?;
        }
        Ok(h)
    }

    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        for r in &self.rcabs {
            r.collect_params(out);
        }
    }
}

/// U-shaped branch at constant width. Encoder stage `i` runs at scale
/// `2^-i`; decoder stage `L + j` runs at scale `2^-(L-1-j)` and fuses the
/// matching encoder output through an HFB.
#[derive(Clone, Debug, PartialEq)]
pub struct Edb {
    encoder: Vec<Stage>,
    down: Vec<Conv2d>,
    decoder: Vec<Stage>,
    up: Vec<Conv2d>,
    skips: Vec<Hfb>,
    multiple: usize,
}

impl Edb {
    pub fn new(name: &str, cfg: &BranchConfig) -> Result<Self> {
        cfg.validate()?;
        let levels = cfg.edb_stages / 2;
        let c = cfg.channels;
        let mut edb = Self {
            encoder: Vec::new(),
            down: Vec::new(),
            decoder: Vec::new(),
            up: Vec::new(),
            skips: Vec::new(),
            multiple: cfg.spatial_multiple(),
        };
        for i in 0..levels {
            let stage = join(name, &format!("stage{i}"));
            if i > 0 {
                edb.down.push(Conv2d::new(join(&stage, "down"), c, c, 1));
            }
            edb.encoder.push(Stage::new(&stage, cfg, cfg.dsc_encoder)?);
        }
        for j in 0..levels {
            let stage = join(name, &format!("stage{}", levels + j));
            if j > 0 {
                edb.up.push(Conv2d::new(join(&stage, "up"), c, c, 1));
            }
            edb.decoder.push(Stage::new(&stage, cfg, false)?);
            edb.skips.push(Hfb::new(&join(&stage, "skip"), c, 2, cfg.reduction)?);
        }
        Ok(edb)
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (_, _, h, w) = x.value().dims4()?;
        let m = self.multiple;
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid(
                "edb",
                format!(
                    "extents {h}x{w} must be multiples of {m}; pad to {}x{}",
                    h.div_ceil(m) * m,
                    w.div_ceil(m) * m
                ),
            ));
        }
        let half = Ratio::new(1, 2);
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for (i, stage) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = self.down[i - 1].forward(cx, &h.rescale(half)?)?;
            }
            h = stage.forward(cx, &h)?;
            skips.push(h.clone());
        }
        for (j, stage) in self.decoder.iter().enumerate() {
            if j > 0 {
                h = self.up[j - 1].forward(cx, &h.rescale(Ratio::from_integer(2))?)?;
            }
            let skip = &skips[skips.len() - 1 - j];
            h = self.skips[j].forward(cx, &[stage.forward(cx, &h)?, skip.clone()])?;
        }
        Ok(h)
    }
}

impl Module for Edb {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        for s in &self.encoder {
            s.collect_params(out);
        }
        for c in &self.down {
            c.collect_params(out);
        }
        for s in &self.decoder {
            s.collect_params(out);
        }
        for c in &self.up {
            c.collect_params(out);
        }
        for f in &self.skips {
            f.collect_params(out);
        }
    }
}

/// Parallel RTB and EDB over the same features, merged by an HFB.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridNet {
    pub rtb: Rtb,
    pub edb: Edb,
    pub merge: Hfb,
}

impl HybridNet {
    pub fn new(name: &str, cfg: &BranchConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            rtb: Rtb::new(&join(name, "rtb"), cfg)?,
            edb: Edb::new(&join(name, "edb"), cfg)?,
            merge: Hfb::new(&join(name, "merge"), cfg.channels, 2, cfg.reduction)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let global = self.rtb.forward(cx, x)?;
        let local = self.edb.forward(cx, x)?;
        self.merge.forward(cx, &[global, local])
    }
}

impl Module for HybridNet {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.rtb.collect_params(out);
        self.edb.collect_params(out);
        self.merge.collect_params(out);
    }
}

/// Intermediate features of the multi-input attention module, all
/// `[N, C, H/s, W/s]`.
#[derive(Clone)]
pub struct MamTensors<'t, T: Scalar> {
    /// Embedding of the predicted rain layer.
    pub f_r_s: Var<'t, T>,
    /// Embedding of the full-resolution rainy image on the sub-sampled grid.
    pub f_rain: Var<'t, T>,
    /// Embedding of the sub-sampled derained image.
    pub f_b_s: Var<'t, T>,
    /// Background texture extracted by cross attention.
    pub f_bt: Var<'t, T>,
    /// Fused output, the only tensor passed on.
    pub f_mam: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mam {
    pub factor: usize,
    pub swap_qk: bool,
    pub attention: TransposedAttention,
    pub background: Conv2d,
    pub fuse: Hfb,
}

impl Mam {
    pub fn new(name: &str, cfg: &BranchConfig, factor: usize, swap_qk: bool) -> Result<Self> {
        cfg.validate()?;
        if factor < 2 {
            return Err(Error::Config(format!("sample factor must be at least 2, got {factor}")));
        }
        // strides for (query, key, value); the rain prediction already lives on the sub grid
        let strides = if swap_qk { [1, factor, factor] } else { [factor, 1, factor] };
        Ok(Self {
            factor,
            swap_qk,
            attention: TransposedAttention::cross(&join(name, "attn"), cfg.channels, cfg.heads, [3; 3], strides)?,
            background: Conv2d::new(join(name, "background"), 3, cfg.channels, 3),
            fuse: Hfb::new(&join(name, "fuse"), cfg.channels, 2, cfg.reduction)?,
        })
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        cx: &Ctx<'t, T>,
        rain_pred: &Var<'t, T>,
        rainy_full: &Var<'t, T>,
        derained_sub: &Var<'t, T>,
    ) -> Result<MamTensors<'t, T>> {
        let (n, _, h, w) = rainy_full.value().dims4()?;
        let s = self.factor;
        for sub in [rain_pred, derained_sub] {
            if sub.shape() != [n, 3, h / s, w / s] || h % s != 0 || w % s != 0 {
                return Err(Error::invalid(
                    "mam",
                    format!("full extents {:?} are not {s}x the sub extents {:?}", rainy_full.shape(), sub.shape()),
                ));
            }
        }
        let a = &self.attention;
        let (f_r_s, f_rain, f_bt) = if self.swap_qk {
            let f_r_s = a.query.forward(cx, rain_pred)?;
            let f_rain = a.key.forward(cx, rainy_full)?;
            let v = a.value.forward(cx, rainy_full)?;
            let f_bt = a.attend(cx, &f_r_s, &f_rain, &v)?;
            (f_r_s, f_rain, f_bt)
        } else {
            let f_r_s = a.key.forward(cx, rain_pred)?;
            let f_rain = a.query.forward(cx, rainy_full)?;
            let v = a.value.forward(cx, rainy_full)?;
            let f_bt = a.attend(cx, &f_rain, &f_r_s, &v)?;
            (f_r_s, f_rain, f_bt)
        };
        let f_b_s = self.background.forward(cx, derained_sub)?;
        let f_mam = self.fuse.forward(cx, &[f_bt.clone(), f_b_s.clone()])?;
        Ok(MamTensors { f_r_s, f_rain, f_b_s, f_bt, f_mam })
    }
}

impl Module for Mam {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.attention.collect_params(out);
        self.background.collect_params(out);
        self.fuse.collect_params(out);
    }
}
