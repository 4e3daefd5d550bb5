//! Finite-difference verification of analytic gradients in `f64`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BranchConfig, Edb, Hfb, Mam, Rtb};
use crate::error::{Error, Result};
use crate::model::{branch_loss, loss_joint, Elf, ModelConfig};
use crate::nn::{ChannelAttention, Conv2d, Ctx, DsConv, FeedForward, LayerNorm2d, Module, ParamStore, Rcab, TransposedAttention};
use crate::tensor::{Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Denominator floor of the relative error.
const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Conv2d,
    DsConv,
    ChannelAttention,
    Rcab,
    TransposedSa,
    Ffn,
    LayerNorm,
    Hfb,
    Rtb,
    Edb,
    Mam,
    Loss,
    Elf,
    All,
}

impl Scope {
    pub const UNITS: [Scope; 13] = [
        Scope::Conv2d,
        Scope::DsConv,
        Scope::ChannelAttention,
        Scope::Rcab,
        Scope::TransposedSa,
        Scope::Ffn,
        Scope::LayerNorm,
        Scope::Hfb,
        Scope::Rtb,
        Scope::Edb,
        Scope::Mam,
        Scope::Loss,
        Scope::Elf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Conv2d => "conv2d",
            Scope::DsConv => "dsconv",
            Scope::ChannelAttention => "channel_attention",
            Scope::Rcab => "rcab",
            Scope::TransposedSa => "transposed_sa",
            Scope::Ffn => "ffn",
            Scope::LayerNorm => "layer_norm",
            Scope::Hfb => "hfb",
            Scope::Rtb => "rtb",
            Scope::Edb => "edb",
            Scope::Mam => "mam",
            Scope::Loss => "loss",
            Scope::Elf => "elf",
            Scope::All => "all",
        }
    }

    /// Single layers get the tight tolerance, composed graphs the loose one.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Scope::Conv2d | Scope::DsConv | Scope::ChannelAttention | Scope::Rcab | Scope::Ffn | Scope::LayerNorm | Scope::Hfb => {
                LAYER_TOLERANCE
            }
            _ => COMPOSITE_TOLERANCE,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::UNITS
            .iter()
            .chain([Scope::All].iter())
            .find(|sc| sc.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = Scope::UNITS.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scope {s:?}; expected one of {} or all", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub scope: Scope,
    /// Parameter name, or `input<k>` for data inputs.
    pub tensor: String,
    pub probed: usize,
    /// Entries skipped because the stencil crossed a non-differentiable point.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn max_rel_err(&self, scope: Scope) -> f64 {
        self.entries.iter().filter(|e| e.scope == scope).map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub tolerance: Option<f64>,
    pub seed: u64,
    /// Entries probed per tensor, evenly spaced.
    pub per_tensor: usize,
    /// Test fixture: perturbs the analytic gradients before comparison.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self { tolerance: None, seed: 7, per_tensor: 8, corrupt_backward: false }
    }
}

type Objective = Box<dyn for<'t> Fn(&Ctx<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct Case {
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    f: Objective,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("matching extents")
}

fn randomized(m: &impl Module, rng: &mut ChaCha8Rng, scale: f64) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::init(&m.param_specs(), rng)?;
    s.randomize(rng, scale);
    Ok(s)
}

fn desk_branch() -> BranchConfig {
    ModelConfig::desk().branch()
}

fn case(scope: Scope, rng: &mut ChaCha8Rng) -> Result<Case> {
    let x4 = |rng: &mut ChaCha8Rng, c, h, w| uniform(&[1, c, h, w], rng, -1.0, 1.0);
    Ok(match scope {
        Scope::Conv2d => {
            let m = Conv2d::new("conv", 4, 8, 3);
            Case { store: randomized(&m, rng, 0.5)?, inputs: vec![x4(rng, 4, 6, 6)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::DsConv => {
            let m = DsConv::new("dsconv", 4, 6, 3);
            Case { store: randomized(&m, rng, 0.5)?, inputs: vec![x4(rng, 4, 5, 5)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::ChannelAttention => {
            let m = ChannelAttention::new("ca", 4, 2)?;
            Case { store: randomized(&m, rng, 0.8)?, inputs: vec![x4(rng, 4, 5, 5)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::Rcab => {
            let m = Rcab::new("rcab", 4, 2, false)?;
            Case { store: randomized(&m, rng, 0.5)?, inputs: vec![x4(rng, 4, 5, 5)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::TransposedSa => {
            let m = TransposedAttention::new("attn", 8, 2)?;
            Case {
                store: randomized(&m, rng, 0.5)?,
                inputs: vec![x4(rng, 8, 4, 4)],
                f: Box::new(move |cx, x| m.forward(cx, &x[0], &x[0], &x[0])),
            }
        }
        Scope::Ffn => {
            let m = FeedForward::new("ffn", 4, 2);
            Case { store: randomized(&m, rng, 0.5)?, inputs: vec![x4(rng, 4, 5, 5)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::LayerNorm => {
            let m = LayerNorm2d::new("norm", 4);
            Case { store: randomized(&m, rng, 1.0)?, inputs: vec![x4(rng, 4, 5, 5)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::Hfb => {
            let m = Hfb::new("hfb", 4, 3, 2)?;
            let inputs = (0..3).map(|_| x4(rng, 4, 5, 5)).collect();
            Case { store: randomized(&m, rng, 0.5)?, inputs, f: Box::new(move |cx, x| m.forward(cx, x)) }
        }
        Scope::Rtb => {
            let m = Rtb::new("rtb", &desk_branch())?;
            Case { store: randomized(&m, rng, 0.3)?, inputs: vec![x4(rng, 8, 6, 6)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::Edb => {
            let m = Edb::new("edb", &desk_branch())?;
            Case { store: randomized(&m, rng, 0.3)?, inputs: vec![x4(rng, 8, 16, 16)], f: Box::new(move |cx, x| m.forward(cx, &x[0])) }
        }
        Scope::Mam => {
            let m = Mam::new("mam", &desk_branch(), 2, false)?;
            let inputs = vec![x4(rng, 3, 8, 8), x4(rng, 3, 16, 16), x4(rng, 3, 8, 8)];
            Case {
                store: randomized(&m, rng, 0.4)?,
                inputs,
                f: Box::new(move |cx, x| Ok(m.forward(cx, &x[0], &x[1], &x[2])?.f_mam)),
            }
        }
        Scope::Loss => {
            let cfg = ModelConfig::desk();
            let inputs = vec![uniform(&[1, 3, 16, 16], rng, 0.0, 1.0), uniform(&[1, 3, 16, 16], rng, 0.0, 1.0)];
            Case {
                store: ParamStore::default(),
                inputs,
                f: Box::new(move |_, x| branch_loss(&x[0], &x[1], cfg.alpha, cfg.epsilon)),
            }
        }
        Scope::Elf => {
            let model = Elf::new(ModelConfig::desk())?;
            let mut store = model.init_params(rng.gen())?;
            store.randomize(rng, 0.25);
            // 32×32 so the SSIM window fits the sub-sampled grid
            let inputs = vec![uniform(&[1, 3, 32, 32], rng, 0.0, 1.0), uniform(&[1, 3, 32, 32], rng, 0.0, 1.0)];
            Case {
                store,
                inputs,
                f: Box::new(move |cx, x| {
                    let out = model.forward(cx, &x[0])?;
                    Ok(loss_joint(&out, &x[1], &model.cfg)?.total)
                }),
            }
        }
        Scope::All => unreachable!("expanded by the caller"),
    })
}

/// Evenly spaced indices first, then the rest, so skipped entries are
/// replaced by fresh ones.
fn candidates(n: usize, per_tensor: usize) -> impl Iterator<Item = usize> {
    let stride = n.div_ceil(per_tensor.max(1)).max(1);
    (0..stride).flat_map(move |offset| (offset..n).step_by(stride)).take(4 * per_tensor.max(1))
}

fn scalarize<'t>(y: &Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    y.mul(&y.tape().constant(weights.clone()))?.sum_all()
}

fn run_case(scope: Scope, c: &Case, opts: &GradcheckOptions, rng: &mut ChaCha8Rng) -> Result<Vec<GradcheckEntry>> {
    let tol = opts.tolerance.unwrap_or(scope.default_tolerance());
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &c.store);
    let xs: Vec<_> = c.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = (c.f)(&cx, &xs)?;
    let weights = uniform(y.shape(), rng, -1.0, 1.0);
    let grads = tape.backward(&scalarize(&y, &weights)?)?;
    let pgrads = cx.param_grads(&grads);

    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let cx = Ctx::inference(&tape, store);
        let xs: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(scalarize(&(c.f)(&cx, &xs)?, &weights)?.value().item())
    };
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
    let corrupt = |a: f64| if opts.corrupt_backward { a * 1.1 + 1e-3 } else { a };

    let mut entries = Vec::new();
    let mut check = |tensor: String, n: usize, analytic: &Tensor<f64>, eval_at: &dyn Fn(usize, f64) -> Result<f64>| -> Result<()> {
        let central = |i: usize, h: f64| -> Result<f64> { Ok((eval_at(i, h)? - eval_at(i, -h)?) / (2.0 * h)) };
        let (mut worst, mut probed, mut kinks) = (0f64, 0, 0);
        for i in candidates(n, opts.per_tensor) {
            if probed == opts.per_tensor {
                break;
            }
            let a = corrupt(analytic.data()[i]);
            let num = central(i, STEP)?;
            let err = rel(a, num);
            // A mismatch is only trusted when the estimate itself is stable
            // under halving the step; otherwise the stencil straddles a kink.
            if err >= tol && rel(num, central(i, STEP / 2.0)?) >= tol / 10.0 {
                kinks += 1;
                continue;
            }
            worst = worst.max(err);
            probed += 1;
        }
        entries.push(GradcheckEntry { scope, tensor, probed, kinks, max_rel_err: worst, pass: probed > 0 && worst < tol });
        Ok(())
    };
    for (k, input) in c.inputs.iter().enumerate() {
        let g = grads.get(&xs[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        check(format!("input{k}"), input.numel(), &g, &|i, h| {
            let mut p = c.inputs.clone();
            p[k].data_mut()[i] += h;
            eval(&c.store, &p)
        })?;
    }
    for (name, t) in c.store.iter() {
        let g = pgrads.get(name).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        check(name.clone(), t.numel(), &g, &|i, h| {
            let mut p = c.store.clone();
            p.get_mut(name).expect("present").data_mut()[i] += h;
            eval(&p, &c.inputs)
        })?;
    }
    Ok(entries)
}

/// Checks every parameter and input of `scope` (or every scope for
/// [`Scope::All`]) on seeded random data.
pub fn gradcheck(scope: Scope, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let scopes: Vec<Scope> = if scope == Scope::All { Scope::UNITS.to_vec() } else { vec![scope] };
    let mut entries = Vec::new();
    for s in scopes {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ s as u64);
        let c = case(s, &mut rng)?;
        entries.extend(run_case(s, &c, opts, &mut rng)?);
    }
    Ok(GradcheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_names_round_trip() {
        for s in Scope::UNITS.iter().chain([Scope::All].iter()) {
            assert_eq!(s.name().parse::<Scope>().unwrap(), *s);
        }
        assert!("everything".parse::<Scope>().is_err());
    }

    #[test]
    fn conv_scope_passes() {
        let r = gradcheck(Scope::Conv2d, &GradcheckOptions::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_err(Scope::Conv2d) < LAYER_TOLERANCE);
        assert_eq!(r.entries.len(), 3);
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let opts = GradcheckOptions { corrupt_backward: true, ..GradcheckOptions::default() };
        let r = gradcheck(Scope::Conv2d, &opts).unwrap();
        assert!(!r.passed());
        assert!(r.entries.iter().all(|e| !e.pass));
    }
}
