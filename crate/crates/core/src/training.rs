//! ELBO training loop, Adam, loss history and the finite-difference gradient
//! check.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{gen_synthetic, AnnotatedSample, Dataset, SynthConfig};
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::losses::{LossBreakdown, DEFAULT_BETA};
use crate::metrics::{evaluate, SamplingMode};
use crate::model::{build_dropout_objective, build_objective, Graph, ModelConfig, ModelParams, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Posterior latent, `BCE + Dice + beta * KL`.
    Probabilistic,
    /// Baseline: prior-mean latent, decoder dropout, `BCE + Dice`.
    Dropout,
}

impl TrainMode {
    pub fn sampling(self) -> SamplingMode {
        match self {
            TrainMode::Probabilistic => SamplingMode::Prior,
            TrainMode::Dropout => SamplingMode::Dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_decoder: bool,
    /// Validation interval in steps; 0 disables validation.
    pub eval_every: usize,
    /// Samples per image for validation GED².
    pub eval_samples: usize,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            lr: 1e-4,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            freeze_decoder: false,
            eval_every: 0,
            eval_samples: 4,
            mode: TrainMode::Probabilistic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Validation(format!("lr must be finite and > 0, got {}", self.lr)));
        }
        if self.steps < 1 {
            return Err(Error::Validation("steps must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.eval_every > 0 && self.eval_samples < 2 {
            return Err(Error::Validation("eval_samples must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub bce: f64,
    pub dice: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub ged2: f64,
    pub dsc: f64,
    pub iou: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Mean total loss over the `window` steps ending at 1-based `step`.
    pub fn smoothed_total(&self, step: usize, window: usize) -> Option<f64> {
        if step == 0 || step > self.steps.len() || window == 0 {
            return None;
        }
        let lo = step.saturating_sub(window);
        let slice = &self.steps[lo..step];
        Some(slice.iter().map(|r| r.total).sum::<f64>() / slice.len() as f64)
    }

    /// Mean KL over the final `n` steps.
    pub fn mean_final_kl(&self, n: usize) -> Option<f64> {
        let n = n.min(self.steps.len());
        if n == 0 {
            return None;
        }
        Some(self.steps[self.steps.len() - n..].iter().map(|r| r.kl).sum::<f64>() / n as f64)
    }

    /// One CSV row per step: `step,bce,dice,kl,total`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.steps {
            out.serialize(r).map_err(|e| Error::Validation(format!("history csv: {e}")))?;
        }
        out.flush().map_err(|e| Error::Validation(format!("history csv: {e}")))
    }
}

/// Adam with the usual defaults and no schedule.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update; `None` gradients leave the tensor untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Vec<f64>>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !params.is_updatable(i) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = params.tensor_mut(i).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn breakdown(g: &Graph<'_>, obj: &Objective, beta: f64) -> LossBreakdown {
    let kl = obj.kl.map_or(0.0, |v| g.tape.scalar(v));
    LossBreakdown::new(g.tape.scalar(obj.bce), g.tape.scalar(obj.dice), kl, beta)
}

/// Loss and parameter gradients for one example.
fn example_grads(
    params: &ModelParams,
    sample: &AnnotatedSample,
    gt: &BinaryMask,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<Option<Vec<f64>>>)> {
    let mut g = Graph::new(params, true);
    let obj = match cfg.mode {
        TrainMode::Probabilistic => {
            let noise = standard_normal(rng, params.config().latent_dim);
            build_objective(&mut g, &sample.image, &sample.box_prompt, gt, &noise, cfg.beta)?
        }
        TrainMode::Dropout => {
            build_dropout_objective(&mut g, &sample.image, &sample.box_prompt, gt, rng as &mut dyn RngCore)?
        }
    };
    let beta = if cfg.mode == TrainMode::Probabilistic { cfg.beta } else { 0.0 };
    let loss = breakdown(&g, &obj, beta);
    Ok((loss, g.param_grads(obj.total)))
}

/// Called after every step with the 1-based step count and current params.
pub type StepHook<'a> = dyn FnMut(usize, &ModelParams) -> Result<()> + 'a;

pub fn fit(
    params: ModelParams,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    fit_with_hook(params, train, val, cfg, &mut |_, _| Ok(()))
}

/// Minimizes the objective of `cfg.mode`. Each step draws `batch_size`
/// examples from a reshuffled epoch order and, per example, one annotator
/// mask uniformly at random plus fresh latent noise.
pub fn fit_with_hook(
    mut params: ModelParams,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    hook: &mut StepHook<'_>,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    train.validate()?;
    if let Some(v) = val {
        v.validate()?;
    }
    if cfg.freeze_decoder {
        params.config_mut().freeze_decoder = true;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Adam::new(&params, cfg.lr);
    let mut history = TrainHistory::default();
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;

    for step in 1..=cfg.steps {
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; params.params().len()];
        let (mut bce, mut dice, mut kl, mut total) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..cfg.batch_size {
            if cursor == n {
                for i in (1..n).rev() {
                    order.swap(i, rng.gen_range(0..=i));
                }
                cursor = 0;
            }
            let sample = &train.samples[order[cursor]];
            cursor += 1;
            let k = rng.gen_range(0..sample.annotations.len());
            let (loss, grads) = example_grads(&params, sample, &sample.annotations[k], cfg, &mut rng)?;
            if let Some(component) = loss.non_finite_component() {
                return Err(Error::Numeric(format!("step {step}: {component} loss is not finite")));
            }
            bce += loss.bce;
            dice += loss.dice;
            kl += loss.kl;
            total += loss.total;
            for (slot, g) in acc.iter_mut().zip(grads) {
                let Some(g) = g else { continue };
                match slot {
                    Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        let scale = 1.0 / cfg.batch_size as f64;
        for g in acc.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= scale;
            }
            if v_non_finite(g) {
                return Err(Error::Numeric(format!("step {step}: gradient is not finite")));
            }
        }
        opt.step(&mut params, &acc);
        history.steps.push(StepRecord {
            step,
            bce: bce * scale,
            dice: dice * scale,
            kl: kl * scale,
            total: total * scale,
        });

        if let Some(v) = val {
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let r = evaluate(&params, v, cfg.eval_samples, cfg.seed, cfg.mode.sampling())?;
                history.evals.push(EvalRecord {
                    step,
                    ged2: r.aggregates.ged2,
                    dsc: r.aggregates.dsc,
                    iou: r.aggregates.iou,
                    diversity: r.aggregates.diversity,
                });
            }
        }
        hook(step, &params)?;
    }
    Ok((params, history))
}

fn v_non_finite(g: &[f64]) -> bool {
    g.iter().any(|v| !v.is_finite())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Double,
    /// Finite-difference losses rounded to `f32`.
    Single,
}

impl Precision {
    /// Pass threshold on the max relative error.
    pub fn threshold(self) -> f64 {
        match self {
            Precision::Double => 1e-4,
            Precision::Single => 5e-2,
        }
    }

    /// Central-difference step.
    pub fn step(self) -> f64 {
        match self {
            Precision::Double => 3e-5,
            Precision::Single => 1e-2,
        }
    }

    /// Smallest denominator of the relative error; gradients below it are
    /// compared on an absolute scale.
    pub fn floor(self) -> f64 {
        match self {
            Precision::Double => 1e-5,
            Precision::Single => 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub beta: f64,
    pub precision: Precision,
    pub seed: u64,
    /// Annotator mask used as the target.
    pub annotator: usize,
    #[doc(hidden)]
    pub dice_grad_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { beta: DEFAULT_BETA, precision: Precision::Double, seed: 0, annotator: 0, dice_grad_scale: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Tiny model with a randomized projector output layer (so the latent path
/// is exercised) and one 16x16 synthetic sample, all derived from `seed`.
pub fn gradcheck_fixture(seed: u64) -> Result<(ModelParams, AnnotatedSample)> {
    let mut params = ModelParams::init(ModelConfig { init_seed: seed, ..ModelConfig::tiny() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in ["projector.fc2.w", "projector.fc2.b"] {
        let i = params.index_of(name).expect("projector tensor");
        for v in params.tensor_mut(i).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let gen = SynthConfig { n_samples: 1, height: 16, width: 16, p_miss: 0.0, ..SynthConfig::default() };
    let sample = gen_synthetic(&gen, seed)?.samples.remove(0);
    Ok((params, sample))
}

/// Compares analytic gradients of the total loss with central differences
/// for every element of every updatable tensor. The error of one element is
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn grad_check(params: &ModelParams, sample: &AnnotatedSample, cfg: &GradCheckConfig) -> Result<GradCheckReport> {

    let gt = sample
        .annotations
        .get(cfg.annotator)
        .ok_or_else(|| Error::Validation(format!("annotator {} out of range", cfg.annotator)))?;
    let noise = standard_normal(&mut ChaCha8Rng::seed_from_u64(cfg.seed), params.config().latent_dim);

    let mut g = Graph::new(params, true);
    g.tape.set_dice_grad_scale(cfg.dice_grad_scale);
    let obj = build_objective(&mut g, &sample.image, &sample.box_prompt, gt, &noise, cfg.beta)?;
    let analytic = g.param_grads(obj.total);
    drop(g);

    let loss_at = |p: &ModelParams| -> Result<f64> {
        let mut g = Graph::new(p, false);
        let obj = build_objective(&mut g, &sample.image, &sample.box_prompt, gt, &noise, cfg.beta)?;
        let v = g.tape.scalar(obj.total);
        Ok(match cfg.precision {
            Precision::Double => v,
            Precision::Single => v as f32 as f64,
        })
    };

    let h = cfg.precision.step();
    let floor = cfg.precision.floor();
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        threshold: cfg.precision.threshold(),
    };
    for i in 0..params.params().len() {
        if !params.is_updatable(i) {
            continue;
        }
        let n = params.params()[i].tensor.numel();
        let zeros = vec![0.0; n];
        let a = analytic[i].as_deref().unwrap_or(&zeros);
        for j in 0..n {
            let orig = params.params()[i].tensor.data()[j];
            work.tensor_mut(i).data_mut()[j] = orig + h;
            let up = loss_at(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig - h;
            let down = loss_at(&work)?;
            work.tensor_mut(i).data_mut()[j] = orig;
            let num = (up - down) / (2.0 * h);
            let err = (a[j] - num).abs() / a[j].abs().max(num.abs()).max(floor);
            if !err.is_finite() {
                return Err(Error::Numeric(format!("gradient check of {}[{j}]", params.params()[i].name)));
            }
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = params.params()[i].name.clone();
                report.worst_index = j;
                report.analytic = a[j];
                report.numeric = num;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::ParamGroup;

    fn tiny_data(n: usize, seed: u64) -> Dataset {
        let cfg = SynthConfig { n_samples: n, height: 16, width: 16, ..SynthConfig::default() };
        let corpus = gen_synthetic(&cfg, seed).unwrap();
        Dataset::new(Split::Train, corpus.samples).unwrap()
    }

    fn quick(steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 2, lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn invalid_configs_rejected() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let ds = tiny_data(2, 0);
        for cfg in [
            TrainConfig { steps: 0, ..quick(1) },
            TrainConfig { lr: 0.0, ..quick(1) },
            TrainConfig { beta: -1.0, ..quick(1) },
            TrainConfig { batch_size: 0, ..quick(1) },
        ] {
            assert!(matches!(fit(p.clone(), &ds, None, &cfg), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn fit_is_reproducible() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let ds = tiny_data(4, 1);
        let (a, ha) = fit(p.clone(), &ds, None, &quick(5)).unwrap();
        let (b, hb) = fit(p.clone(), &ds, None, &quick(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.len(), 5);
        assert_ne!(a, p);
        let (c, _) = fit(p, &ds, None, &TrainConfig { seed: 1, ..quick(5) }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn frozen_decoder_is_untouched() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let ds = tiny_data(3, 2);
        let (trained, _) = fit(p.clone(), &ds, None, &TrainConfig { freeze_decoder: true, ..quick(4) }).unwrap();
        let mut other_changed = false;
        for (before, after) in p.params().iter().zip(trained.params()) {
            if ParamGroup::of(&before.name) == Some(ParamGroup::Decoder) {
                assert_eq!(before.tensor, after.tensor, "{}", before.name);
            } else if before.tensor != after.tensor {
                other_changed = true;
            }
        }
        assert!(other_changed);
    }

    #[test]
    fn dropout_mode_trains_without_kl() {
        let p = ModelParams::init(ModelConfig { dropout_p: 0.3, ..ModelConfig::tiny() }).unwrap();
        let ds = tiny_data(3, 3);
        let cfg = TrainConfig { mode: TrainMode::Dropout, ..quick(3) };
        let (trained, h) = fit(p.clone(), &ds, None, &cfg).unwrap();
        assert!(h.steps.iter().all(|r| r.kl == 0.0 && r.total == r.bce + r.dice));
        assert_eq!(p.get("posterior.fc2.w"), trained.get("posterior.fc2.w"));
    }

    #[test]
    fn validation_records_and_hook_calls() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let ds = tiny_data(3, 4);
        let val = tiny_data(2, 5);
        let cfg = TrainConfig { eval_every: 2, ..quick(4) };
        let mut calls = Vec::new();
        let (_, h) = fit_with_hook(p, &ds, Some(&val), &cfg, &mut |s, _| {
            calls.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, vec![1, 2, 3, 4]);
        assert_eq!(h.evals.iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
    }

    #[test]
    fn non_finite_loss_names_step_and_component() {
        let mut p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let i = p.index_of("prior.fc2.b").unwrap();
        p.tensor_mut(i).data_mut()[2] = f64::INFINITY;
        let err = fit(p, &tiny_data(2, 6), None, &quick(2)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 1"), "{msg}");
    }

    #[test]
    fn history_helpers_and_csv() {
        let h = TrainHistory {
            steps: (1..=4)
                .map(|s| StepRecord { step: s, bce: 0.0, dice: 0.0, kl: s as f64, total: s as f64 })
                .collect(),
            evals: vec![],
        };
        assert_eq!(h.smoothed_total(4, 2), Some(3.5));
        assert_eq!(h.smoothed_total(1, 50), Some(1.0));
        assert_eq!(h.mean_final_kl(2), Some(3.5));
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,bce,dice,kl,total\n1,"));
        assert_eq!(text.lines().count(), 5);
    }

    fn check_sample() -> AnnotatedSample {
        gradcheck_fixture(7).unwrap().1
    }

    fn random_model(seed: u64) -> ModelParams {
        gradcheck_fixture(seed).unwrap().0
    }

    #[test]
    fn zero_beta_removes_prior_gradients() {
        let p = random_model(1);
        let s = check_sample();
        let noise = [0.3, -0.7];
        let mut g = Graph::new(&p, true);
        let obj = build_objective(&mut g, &s.image, &s.box_prompt, &s.annotations[0], &noise, 0.0).unwrap();
        let grads = g.param_grads(obj.total);
        for name in ["prior.fc2.w", "prior.fc2.b", "prior.fc1.w"] {
            let gi = grads[p.index_of(name).unwrap()].as_ref().unwrap();
            assert!(gi.iter().all(|&v| v == 0.0), "{name}");
        }
    }

    #[test]
    fn zero_projector_still_receives_gradient() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let s = check_sample();
        let mut g = Graph::new(&p, true);
        let obj = build_objective(&mut g, &s.image, &s.box_prompt, &s.annotations[0], &[0.5, -1.0], 10.0).unwrap();
        let grads = g.param_grads(obj.total);
        let w = grads[p.index_of("projector.fc2.w").unwrap()].as_ref().unwrap();
        assert!(w.iter().any(|v| v.abs() > 0.0));
    }

    #[test]
    fn grad_check_double_precision() {
        let r = grad_check(&random_model(2), &check_sample(), &GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.checked > 1000);
    }

    #[test]
    fn grad_check_single_precision_uses_looser_threshold() {
        let cfg = GradCheckConfig { precision: Precision::Single, ..GradCheckConfig::default() };
        let r = grad_check(&random_model(2), &check_sample(), &cfg).unwrap();
        assert_eq!(r.threshold, 5e-2);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn grad_check_catches_wrong_dice_gradient() {
        let cfg = GradCheckConfig { dice_grad_scale: 1.5, ..GradCheckConfig::default() };
        let r = grad_check(&random_model(2), &check_sample(), &cfg).unwrap();
        assert!(!r.passed(), "{r:?}");
    }
}
