use std::collections::BTreeMap;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Adam hyperparameters and the step-decay learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub decay: f64,
    /// Epochs between decays.
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { base_lr: 2e-4, decay: 0.8, decay_every: 65, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// The exact rational written by `x`'s shortest decimal representation,
/// so `2e-4` becomes `1/5000` rather than its binary approximation.
pub fn decimal_ratio(x: f64) -> Result<BigRational> {
    if !x.is_finite() {
        return Err(Error::Config(format!("{x} is not finite")));
    }
    let text = format!("{x:e}");
    let (mantissa, exp) = text.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let mantissa = mantissa.trim_start_matches('-');
    let (int, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits: BigInt = format!("{int}{frac}").parse().expect("decimal digits");
    let shift = exp - frac.len() as i32;
    let ten = BigInt::from(10);
    let mut r = if shift >= 0 {
        BigRational::from_integer(digits * num_traits::pow(ten, shift as usize))
    } else {
        BigRational::new(digits, num_traits::pow(ten, (-shift) as usize))
    };
    if negative {
        r = -r;
    }
    Ok(r)
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.decay > 0.0
            && self.decay_every > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok && [self.base_lr, self.decay, self.eps].iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }

    /// `base_lr * decay^floor(epoch / decay_every)` in exact arithmetic.
    pub fn lr_exact(&self, epoch: usize) -> Result<BigRational> {
        let k = epoch / self.decay_every;
        let decay = decimal_ratio(self.decay)?;
        let mut factor = BigRational::one();
        for _ in 0..k {
            factor *= &decay;
        }
        Ok(decimal_ratio(self.base_lr)? * factor)
    }

    /// The exact schedule rounded once to `f64`.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr_exact(epoch)
            .ok()
            .and_then(|r| r.to_f64())
            .unwrap_or_else(|| self.base_lr * self.decay.powi((epoch / self.decay_every) as i32))
    }
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: OptimConfig,
    step: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: OptimConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves; parameters without a gradient see a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
            match params.get(name) {
                None => return Err(Error::UnknownParam(name.clone())),
                Some(p) if p.shape() != g.shape() => {
                    return Err(Error::ShapeMismatch { op: "adam", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() })
                }
                _ => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, p) in params.iter_mut() {
            let shape = p.shape().to_vec();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape.clone()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let g = grads.get(name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i].as_f64());
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = T::lit(mi);
                v.data_mut()[i] = T::lit(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                if update != 0.0 {
                    let pi = &mut p.data_mut()[i];
                    *pi = T::lit(pi.as_f64() - update);
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as `m.<name>` / `v.<name>` plus the step counter split
    /// into two 16-bit halves (exact in `f32`).
    pub fn state(&self) -> ParamStore<T> {
        let mut s = ParamStore::default();
        for (k, t) in &self.m {
            s.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            s.insert(format!("v.{k}"), t.clone());
        }
        let hi = T::lit((self.step >> 16) as f64);
        let lo = T::lit((self.step & 0xffff) as f64);
        s.insert("step", Tensor::new(vec![2], vec![hi, lo]).expect("two entries"));
        s
    }

    pub fn from_state(cfg: OptimConfig, state: &ParamStore<T>) -> Result<Self> {
        let mut adam = Self::new(cfg);
        for (k, t) in state.iter() {
            if let Some(name) = k.strip_prefix("m.") {
                adam.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.v.insert(name.to_string(), t.clone());
            } else if k == "step" && t.numel() == 2 {
                let hi = t.data()[0].as_f64() as u64;
                let lo = t.data()[1].as_f64() as u64;
                adam.step = (hi << 16) | lo;
            } else {
                return Err(Error::Checkpoint(format!("unexpected optimizer entry `{k}`")));
            }
        }
        if state.get("step").is_none() {
            return Err(Error::Checkpoint("optimizer state has no step counter".into()));
        }
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use num_bigint::BigInt;

    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap())])
    }

    #[test]
    fn decimal_ratios_are_exact() {
        let r = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        assert_eq!(decimal_ratio(2e-4).unwrap(), r(1, 5000));
        assert_eq!(decimal_ratio(0.8).unwrap(), r(4, 5));
        assert_eq!(decimal_ratio(65.0).unwrap(), r(65, 1));
        assert_eq!(decimal_ratio(-1.25).unwrap(), r(-5, 4));
        assert!(decimal_ratio(f64::NAN).is_err());
    }

    #[test]
    fn lr_at_epoch_130() {
        let cfg = OptimConfig::default();
        assert_eq!(cfg.lr(0), 2e-4);
        assert_eq!(cfg.lr(64), 2e-4);
        assert!((cfg.lr(130) - 1.28e-4).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_store(0.7);
        let mut adam = Adam::new(OptimConfig::default());
        for _ in 0..5 {
            adam.step(&mut p, &grad(0.0), 1e-3).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = scalar_store(1.0);
        let mut adam = Adam::new(OptimConfig::default());
        adam.step(&mut p, &grad(1.0), 1e-3).unwrap();
        let moved = 1.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut p = scalar_store(0.3);
        let mut adam = Adam::new(OptimConfig::default());
        adam.step(&mut p, &grad(5.0), 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.3]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut p = scalar_store(0.3);
        let mut adam = Adam::new(OptimConfig::default());
        let err = adam.step(&mut p, &grad(f64::NAN), 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(n) if n == "w"));
        assert_eq!(adam.step_count(), 0);
    }

    #[test]
    fn state_round_trip() {
        let mut p = scalar_store(0.3);
        let mut adam = Adam::new(OptimConfig::default());
        for i in 0..3 {
            adam.step(&mut p, &grad(i as f64), 1e-3).unwrap();
        }
        let back = Adam::from_state(OptimConfig::default(), &adam.state()).unwrap();
        assert_eq!(back, adam);
    }
}
