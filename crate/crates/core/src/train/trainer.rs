use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{psnr, ssim_value, SSIM_WINDOW};
use super::optim::{Adam, OptimConfig};
use crate::data::{stack, Image, SamplePair};
use crate::error::{Error, Result};
use crate::model::{loss_joint, Elf};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Consecutive steps above the threshold before training is aborted.
pub const DIVERGENCE_PATIENCE: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop edge; images no larger than this are used whole.
    pub patch: usize,
    pub seed: u64,
    /// Stop after this many steps even if epochs remain; 0 means no cap.
    pub max_steps: usize,
    /// Steps between checkpoints; 0 saves only at the end.
    pub save_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patch == 0 {
            return Err(Error::Config("epochs, batch_size and patch must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the loss curve.
#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_idn: f64,
    pub loss_brn: f64,
    pub loss_total: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,epoch,lr,loss_idn,loss_brn,loss_total";

    pub fn csv_row(&self) -> String {
        format!("{},{},{:e},{},{},{}", self.step, self.epoch, self.lr, self.loss_idn, self.loss_brn, self.loss_total)
    }
}

/// Tracks the abort rule: a non-finite loss, or a loss above
/// `L0 + 9|L0|` (ten times `L0` when it is positive) for
/// [`DIVERGENCE_PATIENCE`] steps in a row.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step: step as usize, loss });
        }
        let l0 = *self.initial.get_or_insert(loss);
        if loss > l0 + 9.0 * l0.abs() {
            self.streak += 1;
            if self.streak >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged { step: step as usize, loss });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

pub struct Trainer<T: Scalar> {
    pub model: Elf,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
    guard: DivergenceGuard,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Elf, params: ParamStore<T>, optim: OptimConfig, cfg: TrainConfig) -> Result<Self> {
        optim.validate()?;
        cfg.validate()?;
        let sub = cfg.patch / model.cfg.sample_factor;
        if sub < SSIM_WINDOW {
            return Err(Error::Config(format!(
                "patch {} gives a {sub}px sub-sampled grid, smaller than the {SSIM_WINDOW}px SSIM window",
                cfg.patch
            )));
        }
        params.check_against(&crate::nn::Module::param_specs(&model))?;
        Ok(Self { model, params, adam: Adam::new(optim), cfg, guard: DivergenceGuard::default() })
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(model: Elf, params: ParamStore<T>, adam: Adam<T>, cfg: TrainConfig) -> Result<Self> {
        let mut t = Self::new(model, params, adam.cfg.clone(), cfg)?;
        t.adam = adam;
        Ok(t)
    }

    /// Fresh parameters drawn from the training seed.
    pub fn from_scratch(model: Elf, optim: OptimConfig, cfg: TrainConfig) -> Result<Self> {
        let params = model.init_params(cfg.seed)?;
        Self::new(model, params, optim, cfg)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.cfg.batch_size)
    }

    /// Sample order for `epoch`, a pure function of the seed and epoch.
    fn order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        idx
    }

    fn batch(&self, data: &[SamplePair], ids: &[usize], step: u64) -> Result<Vec<(Image, Image)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(step.wrapping_mul(0x2545_f491_4f6c_dd1d)));
        let mut out = Vec::with_capacity(ids.len());
        for &i in ids {
            let p = &data[i];
            let (w, h) = (p.clean.width(), p.clean.height());
            let edge = self.cfg.patch;
            if edge >= w && edge >= h {
                out.push((p.rainy.clone(), p.clean.clone()));
            } else {
                let (pw, ph) = (edge.min(w), edge.min(h));
                let x = rng.gen_range(0..=w - pw);
                let y = rng.gen_range(0..=h - ph);
                out.push((p.rainy.crop(x, y, pw, ph)?, p.clean.crop(x, y, pw, ph)?));
            }
        }
        Ok(out)
    }

    /// One optimization step on an explicit batch.
    pub fn step_on(&mut self, rainy: &[&Image], clean: &[&Image], epoch: usize) -> Result<LossRecord> {
        let lr = self.adam.cfg.lr(epoch);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.params);
        let x = tape.constant(stack::<T>(rainy)?);
        let y = tape.constant(stack::<T>(clean)?);
        let out = self.model.forward(&cx, &x)?;
        let loss = loss_joint(&out, &y, &self.model.cfg)?;
        let grads = tape.backward(&loss.total)?;
        let pgrads = cx.param_grads(&grads);
        let record = LossRecord {
            step: self.adam.step_count() + 1,
            epoch,
            lr,
            loss_idn: loss.idn.value().item().as_f64(),
            loss_brn: loss.brn.value().item().as_f64(),
            loss_total: loss.total.value().item().as_f64(),
        };
        drop(cx);
        self.guard.observe(record.step, record.loss_total)?;
        self.adam.step(&mut self.params, &pgrads, lr)?;
        Ok(record)
    }

    /// Runs until the epoch budget or step cap is reached, resuming from the
    /// optimizer's step counter. `on_step` sees every record.
    pub fn run(
        &mut self,
        data: &[SamplePair],
        mut on_step: impl FnMut(&LossRecord, &Self) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        if data.is_empty() {
            return Err(Error::invalid("train", "empty dataset"));
        }
        let per_epoch = self.steps_per_epoch(data.len());
        let total = (self.cfg.epochs * per_epoch) as u64;
        let cap = if self.cfg.max_steps == 0 { total } else { total.min(self.cfg.max_steps as u64) };
        let mut records = Vec::new();
        let started = Instant::now();
        while self.step_count() < cap {
            let step = self.step_count();
            let epoch = (step / per_epoch as u64) as usize;
            let within = (step % per_epoch as u64) as usize;
            let order = self.order(epoch, data.len());
            let ids = &order[within * self.cfg.batch_size..((within + 1) * self.cfg.batch_size).min(data.len())];
            let pairs = self.batch(data, ids, step)?;
            let rainy: Vec<&Image> = pairs.iter().map(|p| &p.0).collect();
            let clean: Vec<&Image> = pairs.iter().map(|p| &p.1).collect();
            let rec = self.step_on(&rainy, &clean, epoch)?;
            log::debug!("step {} epoch {} loss {:.6}", rec.step, rec.epoch, rec.loss_total);
            on_step(&rec, self)?;
            records.push(rec);
        }
        log::info!("trained {} steps in {:.1}s", records.len(), started.elapsed().as_secs_f64());
        Ok(records)
    }
}

/// Per-image quality of a model on a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ms_per_image: f64,
}

impl ImageMetrics {
    pub const CSV_HEADER: &'static str = "id,psnr_db,ssim,ms_per_image";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.3}", self.id, self.psnr_db, self.ssim, self.ms_per_image)
    }
}

/// Derains `rainy` with edge padding to the model's multiple, then crops
/// back. Output is clamped to [0, 1].
pub fn derain_image<T: Scalar>(model: &Elf, params: &ParamStore<T>, rainy: &Image) -> Result<Image> {
    let m = model.cfg.spatial_multiple();
    let padded = rainy.pad_to_multiple(m);
    let out = model.infer(params, &padded.to_tensor::<T>())?;
    Image::from_tensor(&out.derained_full, 0)?.crop(0, 0, rainy.width(), rainy.height()).map(|i| i.clamped())
}

pub fn evaluate<T: Scalar>(model: &Elf, params: &ParamStore<T>, data: &[SamplePair]) -> Result<Vec<ImageMetrics>> {
    data.iter()
        .map(|p| {
            let t0 = Instant::now();
            let out = derain_image(model, params, &p.rainy)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let (a, b) = (out.to_tensor::<f64>(), p.clean.to_tensor::<f64>());
            Ok(ImageMetrics { id: p.id.clone(), psnr_db: psnr(&a, &b)?, ssim: ssim_value(&a, &b)?, ms_per_image: ms })
        })
        .collect()
}

/// PSNR of the untouched rainy inputs against their clean targets.
pub fn baseline_psnr(data: &[SamplePair]) -> Result<Vec<f64>> {
    data.iter().map(|p| psnr(&p.rainy.to_tensor::<f64>(), &p.clean.to_tensor::<f64>())).collect()
}
