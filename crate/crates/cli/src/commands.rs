use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use probsam_core::data::{gen_synthetic, load_dataset, load_image_png, save_dataset, save_mask_png, Split};
use probsam_core::image::{BinaryMask, BoxPrompt};
use probsam_core::metrics::{evaluate, SamplingMode};
use probsam_core::model::{checkpoint, ModelParams, Sampler};
use probsam_core::training::{fit_with_hook, grad_check, gradcheck_fixture, GradCheckConfig, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::figures;
use crate::{Common, EvalArgs, GenDataArgs, GradcheckArgs, SampleArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVALS_FILE: &str = "evals.csv";
pub const LOSS_FIGURE: &str = "loss_curve.png";
pub const REPORT_FILE: &str = "report.json";
pub const PER_SAMPLE_FILE: &str = "per_sample.csv";
pub const GRID_FIGURE: &str = "grid.png";

fn setup(common: &Common, command: &str) -> Result<(RunConfig, PathBuf)> {
    let Some(out) = common.out.clone() else {
        bail!(probsam_core::Error::Validation(format!("{command} needs --out DIR")));
    };
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    cfg.begin(command, common.seed, &out);
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let (mut cfg, out) = setup(&args.common, "gen-data")?;
    let d = &mut cfg.data;
    if let Some(n) = args.n {
        d.n_samples = n;
    }
    if let Some(v) = args.height {
        d.height = v;
    }
    if let Some(v) = args.width {
        d.width = v;
    }
    if let Some(v) = args.annotators {
        d.annotators = v;
    }
    if let Some(v) = args.p_miss {
        d.p_miss = v;
    }
    if let Some(v) = args.threshold_spread {
        d.threshold_spread = v;
    }
    if let Some(v) = args.noise_sigma {
        d.noise_sigma = v;
    }
    if let Some(v) = args.box_jitter {
        d.box_jitter = v;
    }
    cfg.data.validate()?;
    let corpus = gen_synthetic(&cfg.data, cfg.seed)?;
    create_dir(&out)?;
    save_dataset(&corpus, &out)?;
    cfg.write(&out)?;
    let fallback = corpus.samples.iter().filter(|s| s.box_fallback).count();
    let empty: usize = corpus.samples.iter().map(|s| s.annotations.iter().filter(|m| m.is_empty()).count()).sum();
    println!(
        "wrote {} samples to {} (train {}, val {}, test {}; {} empty annotations, {} fallback boxes)",
        corpus.samples.len(),
        out.display(),
        corpus.splits.train.len(),
        corpus.splits.val.len(),
        corpus.splits.test.len(),
        empty,
        fallback
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let (mut cfg, out) = setup(&args.common, "train")?;
    cfg.input("data", args.data.display());
    let t = &mut cfg.train;
    if let Some(v) = args.steps {
        t.steps = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.beta {
        t.beta = v;
    }
    if let Some(v) = args.eval_every {
        t.eval_every = v;
    }
    if let Some(v) = args.mode {
        t.mode = v;
    }
    if args.freeze_decoder {
        t.freeze_decoder = true;
    }
    t.seed = cfg.seed;
    cfg.model.init_seed = cfg.seed;
    cfg.option("checkpoint_every", args.checkpoint_every);
    cfg.train.validate()?;

    let corpus = load_dataset(&args.data)?;
    if corpus.height != cfg.model.height || corpus.width != cfg.model.width {
        cfg.model.height = corpus.height;
        cfg.model.width = corpus.width;
    }
    let train = corpus.dataset(Split::Train)?;
    let val = if corpus.splits.val.is_empty() { None } else { Some(corpus.dataset(Split::Val)?) };
    let params = ModelParams::init(cfg.model.clone())?;

    create_dir(&out)?;
    cfg.write(&out)?;
    let ckpt_dir = out.join("checkpoints");
    let every = args.checkpoint_every;
    let mut hook = |step: usize, p: &ModelParams| -> probsam_core::Result<()> {
        if every > 0 && step % every == 0 {
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| probsam_core::Error::Io { path: ckpt_dir.clone(), source: e })?;
            checkpoint::save(p, &ckpt_dir.join(format!("step_{step:06}.ckpt")))?;
        }
        Ok(())
    };
    let (params, history) = fit_with_hook(params, &train, val.as_ref(), &cfg.train, &mut hook)?;
    checkpoint::save(&params, &out.join(CHECKPOINT_FILE))?;
    let hist_path = out.join(HISTORY_FILE);
    let f = File::create(&hist_path).with_context(|| format!("creating {}", hist_path.display()))?;
    history.write_csv(BufWriter::new(f))?;
    if !history.evals.is_empty() {
        let p = out.join(EVALS_FILE);
        let mut w = csv_writer(&p)?;
        for r in &history.evals {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    figures::loss_curve(&history, &out.join(LOSS_FIGURE))?;
    let last = history.steps.last().expect("at least one step");
    println!(
        "trained {} steps ({:?}): final total {:.4} (bce {:.4}, dice {:.4}, kl {:.3e}); checkpoint {}",
        history.len(),
        cfg.train.mode,
        last.total,
        last.bce,
        last.dice,
        last.kl,
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn parse_box(s: &str) -> Result<BoxPrompt> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("box {s:?} must be four non-negative integers x1,y1,x2,y2"))?;
    if v.len() != 4 {
        bail!(probsam_core::Error::Validation(format!("box {s:?} must have exactly four coordinates")));
    }
    Ok(BoxPrompt::new(v[0], v[1], v[2], v[3]))
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let (mut cfg, out) = setup(&args.common, "sample")?;
    cfg.input("checkpoint", args.checkpoint.display());
    if let Some(m) = args.m {
        cfg.sample.m = m;
    }
    if let Some(mode) = args.mode {
        cfg.sample.mode = mode;
    }
    if cfg.sample.m < 1 {
        bail!(probsam_core::Error::Validation("M must be at least 1".into()));
    }
    let params = checkpoint::load(&args.checkpoint)?;

    let (image, mut bx, annotations) = match (&args.data, &args.id, &args.image) {
        (Some(dir), Some(id), None) => {
            cfg.input("data", dir.display());
            cfg.input("id", id);
            let corpus = load_dataset(dir)?;
            let s = corpus
                .find(id)
                .with_context(|| format!("sample {id} not found in {}", dir.display()))?;
            (s.image.clone(), Some(s.box_prompt), s.annotations.clone())
        }
        (None, None, Some(path)) => {
            cfg.input("image", path.display());
            (load_image_png(path)?, None, Vec::new())
        }
        _ => bail!(probsam_core::Error::Validation(
            "give either --data with --id, or --image with --box".into()
        )),
    };
    if let Some(b) = &args.r#box {
        bx = Some(parse_box(b)?);
    }
    let bx = bx.ok_or_else(|| probsam_core::Error::Validation("--box is required with --image".into()))?;
    bx.validate(image.height(), image.width())?;
    cfg.option("box", format!("{},{},{},{}", bx.x1, bx.y1, bx.x2, bx.y2));

    let sampler = Sampler::new(&params, &image, &bx)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let masks: Vec<BinaryMask> = (0..cfg.sample.m)
        .map(|_| match cfg.sample.mode {
            SamplingMode::Prior => sampler.sample_prior(&mut rng),
            SamplingMode::PriorMean => Ok(sampler.central()?.to_mask()),
            SamplingMode::Dropout => sampler.sample_dropout(&mut rng),
        })
        .collect::<probsam_core::Result<_>>()?;

    create_dir(&out)?;
    cfg.write(&out)?;
    for (i, m) in masks.iter().enumerate() {
        save_mask_png(m, &out.join(format!("sample_{i:02}.png")))?;
    }
    figures::sample_grid(&image, &bx, &annotations, &masks, &out.join(GRID_FIGURE))?;
    println!("wrote {} masks and {} to {}", masks.len(), GRID_FIGURE, out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (mut cfg, out) = setup(&args.common, "eval")?;
    cfg.input("checkpoint", args.checkpoint.display());
    cfg.input("data", args.data.display());
    if let Some(m) = args.m {
        cfg.eval.m = m;
    }
    if let Some(s) = &args.split {
        cfg.eval.split = s.clone();
    }
    if let Some(mode) = args.mode {
        cfg.eval.mode = mode;
    }
    if let Some(b) = args.baseline {
        cfg.eval.baseline = Some(b);
    }
    if let Some(p) = &args.baseline_checkpoint {
        cfg.input("baseline_checkpoint", p.display());
    }
    if cfg.eval.m < 2 {
        bail!(probsam_core::Error::Validation(format!("GED needs M >= 2 samples per image, got {}", cfg.eval.m)));
    }
    let split: Split = cfg.eval.split.parse()?;
    let params = checkpoint::load(&args.checkpoint)?;
    let corpus = load_dataset(&args.data)?;
    let ds = corpus.dataset(split)?;

    let mut report = evaluate(&params, &ds, cfg.eval.m, cfg.seed, cfg.eval.mode)?;
    if let Some(mode) = cfg.eval.baseline {
        let base_params = match &args.baseline_checkpoint {
            Some(p) => checkpoint::load(p)?,
            None => params.clone(),
        };
        let base = evaluate(&base_params, &ds, cfg.eval.m, cfg.seed, mode)?;
        report.compare(&base, mode.name())?;
    }

    create_dir(&out)?;
    cfg.write(&out)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(REPORT_FILE), json + "\n").context("writing report")?;
    let mut w = csv_writer(&out.join(PER_SAMPLE_FILE))?;
    for r in &report.samples {
        w.serialize(r)?;
    }
    w.flush()?;

    let a = &report.aggregates;
    println!("{} split, {} samples, M = {}, mode {}", split.name(), report.samples.len(), report.m, report.mode.name());
    println!("{:<12} {:>8} {:>8} {:>8} {:>10}", "model", "GED2", "DSC", "IoU", "diversity");
    println!("{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.4}", report.mode.name(), a.ged2, a.dsc, a.iou, a.diversity);
    if let Some(c) = &report.comparison {
        let b = &c.baseline;
        println!("{:<12} {:>8.4} {:>8.4} {:>8.4} {:>10.4}", c.baseline_name, b.ged2, b.dsc, b.iou, b.diversity);
        println!(
            "one-tailed paired t-test vs {}: GED2 t = {:.3} p = {:.4}; DSC t = {:.3} p = {:.4}; IoU t = {:.3} p = {:.4}",
            c.baseline_name, c.ged2.t_stat, c.ged2.p_value, c.dsc.t_stat, c.dsc.p_value, c.iou.t_stat, c.iou.p_value
        );
    }
    Ok(())
}

pub fn gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    let out = args.common.out.clone();
    cfg.begin("gradcheck", args.common.seed, out.as_deref().unwrap_or(Path::new("")));
    let precision = if args.single_precision { Precision::Single } else { Precision::Double };
    cfg.option("precision", format!("{precision:?}").to_lowercase());
    cfg.option("beta", args.beta);
    let (params, sample) = gradcheck_fixture(cfg.seed)?;
    let gc = GradCheckConfig {
        beta: args.beta,
        precision,
        seed: cfg.seed,
        dice_grad_scale: if args.inject_dice_grad_fault { 1.5 } else { 1.0 },
        ..GradCheckConfig::default()
    };
    let report = grad_check(&params, &sample, &gc)?;
    if let Some(out) = &out {
        create_dir(out)?;
        cfg.write(&out)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    println!(
        "max relative error {:.3e} over {} gradient entries ({} precision, threshold {:.0e}); worst {}[{}]: analytic {:.6e} vs numeric {:.6e}",
        report.max_rel_err,
        report.checked,
        format!("{precision:?}").to_lowercase(),
        report.threshold,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric
    );
    if report.passed() {
        println!("gradient check passed");
        Ok(0)
    } else {
        eprintln!("gradient check FAILED");
        Ok(1)
    }
}
