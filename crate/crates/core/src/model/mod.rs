//! The two-stage pipeline: rain prediction on a sub-sampled grid, multi-input
//! attention, and super-resolving background recovery.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BranchConfig, HybridNet, Mam, MamTensors};
use crate::error::{Error, Result};
use crate::nn::{AttentionMap, Conv2d, Ctx, Module, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::train::metrics::ssim;


#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "ELF")]
    Elf,
    #[serde(rename = "ELF-LW")]
    ElfLw,
    #[serde(rename = "desk")]
    Desk,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Elf => "ELF",
            Variant::ElfLw => "ELF-LW",
            Variant::Desk => "desk",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elf" => Ok(Variant::Elf),
            "elf-lw" | "elf_lw" => Ok(Variant::ElfLw),
            "desk" => Ok(Variant::Desk),
            _ => Err(Error::Config(format!("unknown variant {s:?}; expected ELF, ELF-LW or desk"))),
        }
    }
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: usize,
    pub rtb_depth: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub edb_stages: usize,
    pub rcab_per_stage: usize,
    pub reduction: usize,
    pub dsc_encoder: bool,
    pub sample_factor: usize,
    pub swap_qk: bool,
    pub tie_weights: bool,
    pub alpha: f64,
    pub lambda: f64,
    pub epsilon: f64,
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (channels, rtb_depth, heads) = match variant {
            Variant::Elf => (48, 10, 4),
            Variant::ElfLw => (32, 5, 2),
            Variant::Desk => (8, 2, 2),
        };
        Self {
            variant,
            channels,
            rtb_depth,
            heads,
            ffn_expansion: 6,
            edb_stages: 6,
            rcab_per_stage: 1,
            reduction: 4,
            dsc_encoder: true,
            sample_factor: 2,
            swap_qk: false,
            tie_weights: false,
            alpha: -0.15,
            lambda: 1.0,
            epsilon: 1e-3,
        }
    }

    pub fn elf() -> Self {
        Self::for_variant(Variant::Elf)
    }

    pub fn elf_lw() -> Self {
        Self::for_variant(Variant::ElfLw)
    }

    pub fn desk() -> Self {
        Self::for_variant(Variant::Desk)
    }

    pub fn branch(&self) -> BranchConfig {
        BranchConfig {
            channels: self.channels,
            rtb_depth: self.rtb_depth,
            heads: self.heads,
            ffn_expansion: self.ffn_expansion,
            edb_stages: self.edb_stages,
            rcab_per_stage: self.rcab_per_stage,
            reduction: self.reduction,
            dsc_encoder: self.dsc_encoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branch().validate()?;
        if self.sample_factor < 2 {
            return Err(Error::Config(format!("sample_factor must be at least 2, got {}", self.sample_factor)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !self.alpha.is_finite() || !self.lambda.is_finite() {
            return Err(Error::Config("alpha and lambda must be finite".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        self.branch().spatial_multiple() * self.sample_factor
    }
}

/// Named intermediate images of one forward pass.
#[derive(Clone)]
pub struct DerainOutputs<'t, T: Scalar> {
    pub rainy_sub: Var<'t, T>,
    pub rain_pred_sub: Var<'t, T>,
    pub derained_sub: Var<'t, T>,
    pub derained_full: Var<'t, T>,
    pub mam: MamTensors<'t, T>,
}

/// Detached copy of [`DerainOutputs`] plus the recorded attention maps.
#[derive(Clone, Debug)]
pub struct Inference<T> {
    pub rainy_sub: Tensor<T>,
    pub rain_pred_sub: Tensor<T>,
    pub derained_sub: Tensor<T>,
    pub derained_full: Tensor<T>,
    pub f_bt: Tensor<T>,
    pub f_b_s: Tensor<T>,
    pub attention: Vec<AttentionMap<T>>,
}

#[derive(Clone)]
pub struct LossParts<'t, T: Scalar> {
    pub idn: Var<'t, T>,
    pub brn: Var<'t, T>,
    pub total: Var<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
struct Idn {
    stem: Conv2d,
    body: HybridNet,
    head: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
struct Brn {
    body: HybridNet,
    up: Conv2d,
    proj: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Elf {
    pub cfg: ModelConfig,
    idn: Idn,
    mam: Mam,
    brn: Brn,
}

impl Elf {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.branch();
        let c = cfg.channels;
        let idn = Idn {
            stem: Conv2d::new("idn.stem", 3, c, 3),
            body: HybridNet::new("idn.body", &b)?,
            head: Conv2d::new("idn.head", c, 3, 3).zero_init(),
        };
        let mam = Mam::new("mam", &b, cfg.sample_factor, cfg.swap_qk)?;
        let brn_body = if cfg.tie_weights { "idn.body" } else { "brn.body" };
        let brn = Brn {
            body: HybridNet::new(brn_body, &b)?,
            up: Conv2d::new("brn.up", c, c, 1),
            proj: Conv2d::new("brn.proj", c, 3, 3).zero_init(),
        };
        Ok(Self { cfg, idn, mam, brn })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        ParamStore::init(&self.param_specs(), &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn forward<'t, T: Scalar>(&self, cx: &Ctx<'t, T>, rainy: &Var<'t, T>) -> Result<DerainOutputs<'t, T>> {
        let (_, c, h, w) = rainy.value().dims4()?;
        let m = self.cfg.spatial_multiple();
        if c != 3 {
            return Err(Error::invalid("elf", format!("expected 3 input channels, got {c}")));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::invalid("elf", format!("extents {h}x{w} must be multiples of {m}")));
        }
        let s = self.cfg.sample_factor;
        // Both operands of the subtraction sit on a shared dyadic grid, so
        // adding the prediction back reproduces the input exactly.
        let rainy_sub = rainy.rescale(Ratio::new(1, s))?.snap()?;
        let feat = self.idn.stem.forward(cx, &rainy_sub)?;
        let feat = self.idn.body.forward(cx, &feat)?;
        let rain_pred_sub = self.idn.head.forward(cx, &feat)?.snap()?;
        let derained_sub = rainy_sub.sub(&rain_pred_sub)?;

        let mam = self.mam.forward(cx, &rain_pred_sub, rainy, &derained_sub)?;
        let feat = self.brn.body.forward(cx, &mam.f_mam)?;
        let feat = self.brn.up.forward(cx, &feat.rescale(Ratio::from_integer(s))?)?.relu()?;
        let residual = self.brn.proj.forward(cx, &feat)?;
        let derained_full = residual.add(&derained_sub.rescale(Ratio::from_integer(s))?)?;
        Ok(DerainOutputs { rainy_sub, rain_pred_sub, derained_sub, derained_full, mam })
    }

    /// Gradient-free forward pass on a `[N, 3, H, W]` tensor.
    pub fn infer<T: Scalar>(&self, params: &ParamStore<T>, rainy: &Tensor<T>) -> Result<Inference<T>> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, params).record_attention();
        let out = self.forward(&cx, &tape.constant(rainy.clone()))?;
        Ok(Inference {
            rainy_sub: out.rainy_sub.to_tensor(),
            rain_pred_sub: out.rain_pred_sub.to_tensor(),
            derained_sub: out.derained_sub.to_tensor(),
            derained_full: out.derained_full.to_tensor(),
            f_bt: out.mam.f_bt.to_tensor(),
            f_b_s: out.mam.f_b_s.to_tensor(),
            attention: cx.attention_maps(),
        })
    }

    /// Scalar parameter count, with tied tensors counted once.
    pub fn count_params(&self) -> usize {
        self.num_params()
    }

    /// Parameter totals grouped by the first `depth` name components.
    pub fn param_breakdown(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for spec in self.param_specs() {
            let key = spec.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += spec.numel();
        }
        out
    }
}

impl Module for Elf {
    fn collect_params(&self, out: &mut Vec<ParamSpec>) {
        self.idn.stem.collect_params(out);
        self.idn.body.collect_params(out);
        self.idn.head.collect_params(out);
        self.mam.collect_params(out);
        self.brn.body.collect_params(out);
        self.brn.up.collect_params(out);
        self.brn.proj.collect_params(out);
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let mut all = Vec::new();
        self.collect_params(&mut all);
        let mut seen = std::collections::BTreeSet::new();
        all.retain(|p| seen.insert(p.name.clone()));
        all
    }
}

/// Scalar parameter count of the model described by `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Elf::new(cfg.clone())?.count_params())
}

/// Mean Charbonnier penalty plus `alpha` times mean SSIM.
pub fn branch_loss<'t, T: Scalar>(pred: &Var<'t, T>, target: &Var<'t, T>, alpha: f64, epsilon: f64) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch { op: "loss", lhs: pred.shape().to_vec(), rhs: target.shape().to_vec() });
    }
    let charb = pred.sub(target)?.square()?.add_scalar(T::lit(epsilon * epsilon))?.sqrt()?.mean_all()?;
    charb.add(&ssim(pred, target)?.scale(T::lit(alpha))?)
}

/// Sub-grid loss plus `lambda` times the full-resolution loss.
pub fn loss_joint<'t, T: Scalar>(out: &DerainOutputs<'t, T>, clean: &Var<'t, T>, cfg: &ModelConfig) -> Result<LossParts<'t, T>> {
    if clean.shape() != out.derained_full.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss",
            lhs: out.derained_full.shape().to_vec(),
            rhs: clean.shape().to_vec(),
        });
    }
    let clean_sub = clean.rescale(Ratio::new(1, cfg.sample_factor))?;
    let idn = branch_loss(&out.derained_sub, &clean_sub, cfg.alpha, cfg.epsilon)?;
    let brn = branch_loss(&out.derained_full, clean, cfg.alpha, cfg.epsilon)?;
    let total = idn.add(&brn.scale(T::lit(cfg.lambda))?)?;
    Ok(LossParts { idn, brn, total })
}
