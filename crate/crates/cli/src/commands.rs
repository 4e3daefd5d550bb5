use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use elf_core::config::{RunConfig, CONFIG_FILE};
use elf_core::data::{add_rain, down_up_correlation, load_dataset, load_png, save_png, synth_clean, write_dataset, CleanKind, RainParams};
use elf_core::model::{count_params, Elf, ModelConfig, Variant};
use elf_core::train::checkpoint;
use elf_core::train::{baseline_psnr, derain_image, evaluate, Adam, GradcheckOptions, ImageMetrics, LossRecord, Scope, Trainer};
use elf_core::ParamStore32;

use crate::dump;

pub const MODEL_CKPT: &str = "model.ckpt";
pub const OPTIM_CKPT: &str = "optim.ckpt";
pub const LOSS_CSV: &str = "loss.csv";

/// Independent per-image streams from one user seed.
fn derive_seed(seed: u64, index: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ stream.wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn parse_range(key: &str, v: &str) -> Result<[f64; 2]> {
    let (lo, hi) = v.split_once(':').unwrap_or((v, v));
    let p = |s: &str| s.trim().parse::<f64>().with_context(|| format!("rain {key}: bad number {s:?}"));
    Ok([p(lo)?, p(hi)?])
}

/// Applies `streaks=N,angle=A:B,length=A:B,width=A:B,intensity=A:B`.
fn parse_rain(mut rp: RainParams, spec: Option<&str>) -> Result<RainParams> {
    for item in spec.unwrap_or("").split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').with_context(|| format!("rain option {item:?} is not key=value"))?;
        match k.trim() {
            "streaks" => rp.streaks_per_mpx = v.trim().parse().with_context(|| format!("rain streaks: bad number {v:?}"))?,
            "angle" => rp.angle_deg = parse_range(k, v)?,
            "length" => rp.length_px = parse_range(k, v)?,
            "width" => rp.width_px = parse_range(k, v)?,
            "intensity" => rp.intensity = parse_range(k, v)?,
            other => bail!("unknown rain option {other:?}; expected streaks, angle, length, width or intensity"),
        }
    }
    rp.validate()?;
    Ok(rp)
}

pub fn synth(
    out: &Path,
    count: usize,
    size: usize,
    seed: u64,
    kind: &str,
    config: Option<&Path>,
    rain: Option<&str>,
) -> Result<bool> {
    let kind: CleanKind = kind.parse()?;
    let base = parse_rain(read_config(config, None, &[])?.rain, rain)?;
    let pairs = (0..count as u64)
        .map(|i| {
            let clean = synth_clean(kind, size, derive_seed(seed, i, 0))?;
            let rp = RainParams { seed: derive_seed(seed, i, 1 + base.seed), ..base.clone() };
            add_rain(&clean, &rp, format!("{i:05}"))
        })
        .collect::<elf_core::Result<Vec<_>>>()?;
    write_dataset(out, &pairs)?;
    log::info!("wrote {count} pairs to {}", out.display());
    Ok(true)
}

fn read_config(path: Option<&Path>, fallback: Option<PathBuf>, overrides: &[String]) -> Result<RunConfig> {
    let path = path.map(Path::to_path_buf).or(fallback.filter(|p| p.exists()));
    Ok(match path {
        Some(p) => RunConfig::load(&p, overrides)?,
        None => RunConfig::resolve("", overrides)?,
    })
}

/// Model config and weights for inference; the config defaults to the one
/// saved beside the checkpoint.
fn load_model(ckpt: &Path, config: Option<&Path>) -> Result<(Elf, ParamStore32)> {
    let beside = ckpt.parent().map(|d| d.join(CONFIG_FILE));
    let cfg = read_config(config, beside, &[])?;
    let model = Elf::new(cfg.model)?;
    let params: ParamStore32 = checkpoint::load(ckpt)?;
    params.check_against(&elf_core::nn::Module::param_specs(&model)).context("checkpoint does not match the model config")?;
    Ok((model, params))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> elf_core::Error + '_ {
    move |source| elf_core::Error::Io { path: path.to_path_buf(), source }
}

/// Keeps rows up to `step` so a resumed curve has no duplicate steps.
fn truncate_curve(path: &Path, step: u64) -> Result<()> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).with_context(|| format!("writing {}", path.display()))
}

fn save_state(out: &Path, trainer: &Trainer<f32>) -> elf_core::Result<()> {
    checkpoint::save(&trainer.params, out.join(MODEL_CKPT))?;
    checkpoint::save(&trainer.adam.state(), out.join(OPTIM_CKPT))
}

pub fn train(config: Option<&Path>, data: &Path, out: &Path, resume: bool, overrides: &[String]) -> Result<bool> {
    let saved = out.join(CONFIG_FILE);
    let cfg = read_config(config, resume.then(|| saved.clone()), overrides)?;
    let pairs = load_dataset(data)?;
    ensure!(!pairs.is_empty(), "{}: dataset is empty", data.display());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let model = Elf::new(cfg.model.clone())?;
    let curve = out.join(LOSS_CSV);

    let mut trainer = if resume {
        let stored = RunConfig::load(&saved, &[])?;
        ensure!(stored.model == cfg.model, "model settings differ from the run being resumed");
        let params: ParamStore32 = checkpoint::load(out.join(MODEL_CKPT))?;
        let adam = Adam::from_state(cfg.optim.clone(), &checkpoint::load(out.join(OPTIM_CKPT))?)?;
        let t = Trainer::resume(model, params, adam, cfg.train.clone())?;
        if curve.exists() {
            truncate_curve(&curve, t.step_count())?;
        }
        log::info!("resuming at step {}", t.step_count());
        t
    } else {
        Trainer::from_scratch(model, cfg.optim.clone(), cfg.train.clone())?
    };
    cfg.save(&saved)?;

    let fresh = !curve.exists() || !resume;
    let file = OpenOptions::new().create(true).append(resume).write(true).truncate(!resume).open(&curve);
    let mut csv = BufWriter::new(file.with_context(|| format!("opening {}", curve.display()))?);
    if fresh {
        writeln!(csv, "{}", LossRecord::CSV_HEADER)?;
    }
    let save_every = cfg.train.save_every as u64;
    let records = trainer.run(&pairs, |rec, t| {
        writeln!(csv, "{}", rec.csv_row()).map_err(io_err(&curve))?;
        if save_every > 0 && rec.step % save_every == 0 {
            csv.flush().map_err(io_err(&curve))?;
            save_state(out, t)?;
            log::info!("step {} loss {:.6}", rec.step, rec.loss_total);
        }
        Ok(())
    });
    csv.flush()?;
    let records = records?;
    save_state(out, &trainer)?;

    let base = mean(&baseline_psnr(&pairs)?);
    let after = evaluate(&trainer.model, &trainer.params, &pairs)?;
    let psnr = mean(&after.iter().map(|m| m.psnr_db).collect::<Vec<_>>());
    println!("steps {} (this run {})", trainer.step_count(), records.len());
    println!("train_baseline_psnr_db {base:.3}");
    println!("train_derained_psnr_db {psnr:.3}");
    Ok(true)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        ensure!(!files.is_empty(), "{}: no PNG files", input.display());
        Ok(files)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

pub fn derain(ckpt: &Path, config: Option<&Path>, input: &Path, out: &Path, dump_intermediates: bool) -> Result<bool> {
    let (model, params) = load_model(ckpt, config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for path in png_inputs(input)? {
        let rainy = load_png(&path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        let derained = if dump_intermediates {
            dump::derain_with_dump(&model, &params, &rainy, &out.join(&stem))?
        } else {
            derain_image(&model, &params, &rainy)?
        };
        save_png(&derained, out.join(format!("{stem}.png")))?;
    }
    Ok(true)
}

pub fn eval(ckpt: &Path, config: Option<&Path>, data: &Path, out: Option<&Path>) -> Result<bool> {
    let (model, params) = load_model(ckpt, config)?;
    let pairs = load_dataset(data)?;
    let metrics = evaluate(&model, &params, &pairs)?;
    let mut text = format!("{}\n", ImageMetrics::CSV_HEADER);
    for m in &metrics {
        text.push_str(&m.csv_row());
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    let base = mean(&baseline_psnr(&pairs)?);
    eprintln!(
        "images {} mean_psnr_db {:.3} mean_ssim {:.4} baseline_psnr_db {:.3}",
        metrics.len(),
        mean(&metrics.iter().map(|m| m.psnr_db).collect::<Vec<_>>()),
        mean(&metrics.iter().map(|m| m.ssim).collect::<Vec<_>>()),
        base
    );
    Ok(true)
}

pub fn gradcheck(scope: &str, tolerance: Option<f64>, per_tensor: usize, seed: u64) -> Result<bool> {
    let scope: Scope = scope.parse()?;
    let opts = GradcheckOptions { tolerance, seed, per_tensor, corrupt_backward: false };
    let report = elf_core::train::gradcheck(scope, &opts)?;
    println!("scope\ttensor\tprobed\tkinks\tmax_rel_err\tresult");
    for e in &report.entries {
        let verdict = if e.pass { "pass" } else { "FAIL" };
        println!("{}\t{}\t{}\t{}\t{:.3e}\t{verdict}", e.scope, e.tensor, e.probed, e.kinks, e.max_rel_err);
    }
    let failed = report.entries.iter().filter(|e| !e.pass).count();
    eprintln!("{} tensors checked, {failed} failed", report.entries.len());
    Ok(report.passed())
}

pub fn params(variant: &str, depth: usize) -> Result<bool> {
    let variant: Variant = variant.parse()?;
    let cfg = ModelConfig::for_variant(variant);
    let model = Elf::new(cfg.clone())?;
    let total = model.count_params();
    println!("variant {variant}");
    println!("total {total} ({:.3}M)", total as f64 / 1e6);
    for (name, n) in model.param_breakdown(depth) {
        println!("  {name:<28} {n:>10}");
    }
    let symmetric = count_params(&ModelConfig { dsc_encoder: false, ..cfg })?;
    println!(
        "symmetric_encoder_total {symmetric}; separable encoder saves {:.2}%",
        100.0 * (symmetric - total) as f64 / symmetric as f64
    );
    Ok(true)
}

pub fn histcheck(data: &Path, factor: usize) -> Result<bool> {
    let pairs = load_dataset(data)?;
    ensure!(!pairs.is_empty(), "{}: dataset is empty", data.display());
    println!("id\tcorrelation");
    let mut all = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let c = down_up_correlation(&p.rainy, factor)?;
        println!("{}\t{c:.6}", p.id);
        all.push(c);
    }
    let (avg, min) = (mean(&all), all.iter().copied().fold(f64::INFINITY, f64::min));
    println!("mean\t{avg:.6}");
    println!("min\t{min:.6}");
    Ok(avg >= 0.9 && min >= 0.85)
}
