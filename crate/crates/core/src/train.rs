//! Optimization loop, per-epoch validation, checkpoint selection, and
//! threshold tuning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::baselines;
use crate::datagen::{batch_images, BBox, ImageSample};
use crate::metrics::{binarize, fpr_fnr, iop, classification_scores};
use crate::model::{self, ClassifierInput, ModelConfig, ModelError, ModelParams};
use crate::objective::{self, LossBreakdown, LossConfig, ObjectiveError};
use crate::seed;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(usize),
    #[error("{0}")]
    Data(String),
    #[error("no checkpoints to select from")]
    NoCheckpoints,
    #[error("threshold grid must be non-empty with values in [0,1]")]
    Grid,
    #[error("no validation image has a ground-truth box")]
    NoBoxes,
    #[error("no threshold in the grid yields a non-empty mask; inspect the predicted masks (they may be all zero)")]
    NoNonEmptyMask,
    #[error("no threshold keeps the mean FNR at or below {0}")]
    CoverageUnmet(f64),
    #[error("localization map: {0}")]
    Localize(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// `v ← βv + g`, `p ← p − lr·v`.
    SgdMomentum { momentum: f64 },
    /// Bias-corrected adaptive moments.
    AdaptiveMoments { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const ADAM_DEFAULT: OptimizerKind = OptimizerKind::AdaptiveMoments { beta1: 0.9, beta2: 0.999, eps: 1e-8 };

    pub fn id(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd-momentum",
            OptimizerKind::AdaptiveMoments { .. } => "adaptive-moments",
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self { kind, first: zeros.clone(), second: zeros, steps: 0 }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(TrainError::Config(format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TrainError::Config(format!("gradient {i} shape {:?} vs param {:?}", g.shape(), p.shape())));
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient(i));
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerKind::AdaptiveMoments { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Where a method's localization map comes from at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapSource {
    /// The mask `M` at `ε = 0`.
    Mask,
    /// GradCAM on the given encoder layer (0-based; 5 is the last).
    GradCam { layer: usize },
}

impl fmt::Display for MapSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapSource::Mask => f.write_str("mask_M"),
            MapSource::GradCam { .. } => f.write_str("gradcam_map"),
        }
    }
}

/// The untrained classifier needs a few hundred steps before the mask
/// carries class information; a regularizer active from step one collapses
/// the mask before that happens.
pub const DEFAULT_REG_DELAY: usize = 250;
pub const DEFAULT_REG_RAMP: usize = 250;

/// The default tuning grid `0, 0.05, …, 0.95`.
pub fn default_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 / 20.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub map_source: MapSource,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau_train: f64,
    pub n_checkpoints: usize,
    pub fnr_cap: f64,
    pub grid: Vec<f64>,
    /// Steps trained with the regularizer (KL or L1) weight at zero.
    pub reg_delay: usize,
    /// Steps over which that weight then ramps up linearly to its configured value.
    pub reg_ramp: usize,
    /// Batch size for validation forward passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            map_source: MapSource::Mask,
            optimizer: OptimizerKind::ADAM_DEFAULT,
            lr: 1e-3,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            tau_train: model::DEFAULT_TAU,
            n_checkpoints: 5,
            fnr_cap: 0.95,
            grid: default_grid(),
            reg_delay: DEFAULT_REG_DELAY,
            reg_ramp: DEFAULT_REG_RAMP,
            eval_batch: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch == 0 {
            return bad("batch size, epochs and eval batch must be positive".into());
        }
        if self.n_checkpoints == 0 || self.n_checkpoints > self.epochs {
            return bad(format!("n_checkpoints must be in 1..={}, got {}", self.epochs, self.n_checkpoints));
        }
        if !(0.0..1.0).contains(&self.tau_train) {
            return bad(format!("tau_train must be in [0,1), got {}", self.tau_train));
        }
        if !(0.0..=1.0).contains(&self.fnr_cap) {
            return bad(format!("fnr_cap must be in [0,1], got {}", self.fnr_cap));
        }
        if self.grid.is_empty() || self.grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(TrainError::Grid);
        }
        let plain = self.model.classifier_input == ClassifierInput::Attention;
        if plain != matches!(self.map_source, MapSource::GradCam { .. }) {
            return bad("GradCAM maps pair with the plain (attention-input) classifier and only with it".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// 1-based.
    pub epoch: usize,
    pub params: ModelParams,
    pub val_accuracy: f64,
    /// Mean validation IoP at the tuned threshold (0 when no threshold qualifies).
    pub val_iop: f64,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<String>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,total,nll,kl,l1\n");
        for (i, b) in self.steps.iter().enumerate() {
            s.push_str(&b.log_line(i + 1));
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,val_acc,val_iop,threshold\n");
        for l in &self.epochs {
            s.push_str(l);
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: Option<String>,
}

/// Noise for one step: `(N,1,H,W)` standard normal per expectation sample.
pub fn step_noise(seed: u64, step: usize, shape: &[usize], samples: usize) -> Vec<Tensor> {
    let mut rng = seed::rng_for(seed, "eps", step as u64);
    (0..samples)
        .map(|_| Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng)))
        .collect()
}

/// Fraction of the regularizer weight in effect at 1-based `step`: zero for
/// the first `reg_delay` steps, then a linear ramp to one over `reg_ramp` steps.
pub fn reg_scale(cfg: &TrainConfig, step: usize) -> f64 {
    if step <= cfg.reg_delay {
        0.0
    } else if step - cfg.reg_delay >= cfg.reg_ramp {
        1.0
    } else {
        (step - cfg.reg_delay) as f64 / cfg.reg_ramp as f64
    }
}

/// One optimization step on a batch (1-based `step`); returns the loss breakdown.
pub fn train_step(
    cfg: &TrainConfig,
    step: usize,
    params: &mut ModelParams,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    eps: &[Tensor],
) -> Result<LossBreakdown> {
    let l = &cfg.loss;
    let k = reg_scale(cfg, step);
    let loss_cfg = LossConfig::new(l.variant(), k * l.alpha(), k * l.l1_weight(), l.eps_samples())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let loss = if cfg.model.classifier_input == ClassifierInput::Attention {
        objective::baseline_loss(&mut tape, &cfg.model, &bound, xv, labels)?
    } else {
        objective::batch_loss(&mut tape, &cfg.model, &bound, xv, labels, eps, cfg.tau_train, &loss_cfg)?
    };
    if !loss.breakdown.total.is_finite() {
        return Err(TensorError::NonFinite { op: "loss", index: 0 }.into());
    }
    tape.backward(loss.total)?;
    let grads = params.gradients(&tape, &bound);
    opt.step(params.tensors_mut(), &grads, cfg.lr)?;
    Ok(loss.breakdown)
}

/// Class probabilities and continuous localization maps for a sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub probs: Vec<[f64; 2]>,
    /// Row-major `W × H` map per sample, in `[0,1]`.
    pub maps: Vec<Vec<f64>>,
}

/// Deterministic inference (`ε = 0`) over `samples`.
pub fn infer(params: &ModelParams, samples: &[ImageSample], source: MapSource, tau: f64, batch: usize) -> Result<Inference> {
    let mut probs = Vec::with_capacity(samples.len());
    let mut maps = Vec::with_capacity(samples.len());
    match source {
        MapSource::Mask => {
            for chunk in samples.chunks(batch.max(1)) {
                let x = batch_images(chunk);
                let out = model::forward(params, &x, None, tau)?;
                let mask = out
                    .state
                    .ok_or_else(|| TrainError::Config("mask maps need the variational network".into()))?
                    .mask;
                let per = mask.numel() / chunk.len();
                maps.extend(mask.data().chunks(per).map(<[f64]>::to_vec));
                probs.extend(out.class_probs);
            }
        }
        MapSource::GradCam { layer } => {
            for chunk in samples.chunks(batch.max(1)) {
                let cams = baselines::gradcam_batch(params, &batch_images(chunk), None, layer)
                    .map_err(|e| TrainError::Localize(e.to_string()))?;
                for cam in cams {
                    probs.push(cam.probs);
                    maps.push(cam.map);
                }
            }
        }
    }
    Ok(Inference { probs, maps })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub mean_iop: f64,
    pub mean_fnr: f64,
}

/// Picks the grid threshold with the highest mean IoP (over non-empty
/// predictions) whose mean FNR stays at or below `fnr_cap`; ties go to the
/// smaller threshold. Only images with a box take part.
pub fn tune_threshold(
    maps: &[Vec<f64>],
    boxes: &[Option<BBox>],
    width: usize,
    height: usize,
    grid: &[f64],
    fnr_cap: f64,
) -> Result<ThresholdChoice> {
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(TrainError::Grid);
    }
    let pairs: Vec<(&Vec<f64>, &BBox)> = maps.iter().zip(boxes).filter_map(|(m, b)| b.as_ref().map(|b| (m, b))).collect();
    if pairs.is_empty() {
        return Err(TrainError::NoBoxes);
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut any_nonempty = false;
    let mut best: Option<ThresholdChoice> = None;
    for &t in &sorted {
        let mut iop_sum = 0.0;
        let mut n_valid = 0usize;
        let mut fnr_sum = 0.0;
        for (m, b) in &pairs {
            let pred = binarize(m, width, height, t);
            if let Some(v) = iop(&pred, b) {
                iop_sum += v;
                n_valid += 1;
            }
            fnr_sum += fpr_fnr(&pred, b).1;
        }
        if n_valid == 0 {
            continue;
        }
        any_nonempty = true;
        let mean_fnr = fnr_sum / pairs.len() as f64;
        if mean_fnr > fnr_cap {
            continue;
        }
        let mean_iop = iop_sum / n_valid as f64;
        if best.is_none_or(|b| mean_iop > b.mean_iop) {
            best = Some(ThresholdChoice { threshold: t, mean_iop, mean_fnr });
        }
    }
    match best {
        Some(b) => Ok(b),
        None if any_nonempty => Err(TrainError::CoverageUnmet(fnr_cap)),
        None => Err(TrainError::NoNonEmptyMask),
    }
}

/// Among the `n` highest-accuracy checkpoints (ties → earlier epoch), the one
/// with the highest localization score (ties → earlier epoch).
pub fn select_checkpoint(checkpoints: &[Checkpoint], n: usize) -> Result<&Checkpoint> {
    if checkpoints.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    if n == 0 || n > checkpoints.len() {
        return Err(TrainError::Config(format!("n must be in 1..={}, got {n}", checkpoints.len())));
    }
    let mut by_acc: Vec<&Checkpoint> = checkpoints.iter().collect();
    by_acc.sort_by(|a, b| b.val_accuracy.total_cmp(&a.val_accuracy).then(a.epoch.cmp(&b.epoch)));
    by_acc.truncate(n);
    by_acc.sort_by(|a, b| b.val_iop.total_cmp(&a.val_iop).then(a.epoch.cmp(&b.epoch)));
    Ok(by_acc[0])
}

/// Validation accuracy, tuned threshold and its mean IoP for `params`.
pub fn validate(cfg: &TrainConfig, params: &ModelParams, val: &[ImageSample]) -> Result<(f64, Option<ThresholdChoice>)> {
    let inf = infer(params, val, cfg.map_source, cfg.tau_train, cfg.eval_batch)?;
    let labels: Vec<usize> = val.iter().map(|s| s.label).collect();
    let (acc, _) = classification_scores(&inf.probs, &labels).map_err(|e| TrainError::Data(e.to_string()))?;
    let boxes: Vec<Option<BBox>> = val.iter().map(|s| s.bbox).collect();
    let (w, h) = (val[0].width(), val[0].height());
    let choice = match tune_threshold(&inf.maps, &boxes, w, h, &cfg.grid, cfg.fnr_cap) {
        Ok(c) => Some(c),
        Err(e @ (TrainError::NoNonEmptyMask | TrainError::CoverageUnmet(_))) => {
            warn!("threshold tuning: {e}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok((acc, choice))
}

fn check_sets(train: &[ImageSample], val: &[ImageSample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("training and validation sets must be non-empty".into()));
    }
    let shape = train[0].image.shape();
    if let Some(bad) = train.iter().chain(val).find(|s| s.image.shape() != shape) {
        return Err(TrainError::Data(format!("mixed image sizes: {:?} vs {:?}", shape, bad.image.shape())));
    }
    if shape[2] % model::ENCODER_STRIDE != 0 || shape[3] % model::ENCODER_STRIDE != 0 {
        return Err(TrainError::Data(format!("image size {}x{} not divisible by 4", shape[3], shape[2])));
    }
    Ok(())
}

/// Full training run: one checkpoint per epoch, written as `ckpt_{epoch}`
/// under `out_dir` when given. Data order, noise and init all derive from `cfg.seed`.
pub fn train(cfg: &TrainConfig, train_set: &[ImageSample], val_set: &[ImageSample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_sets(train_set, val_set)?;
    let mut params = ModelParams::init(cfg.model, cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, params.tensors());
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut seed::rng_for(cfg.seed, "shuffle", epoch as u64));
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let x = batch_images(batch.iter().copied());
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let eps = step_noise(cfg.seed, step, x.shape(), cfg.loss.eps_samples());
            match train_step(cfg, step, &mut params, &mut opt, &x, &labels, &eps) {
                Ok(b) => log.steps.push(b),
                Err(e @ (TrainError::NonFiniteGradient(_) | TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. })))) => {
                    warn!("diverged at step {step}: {e}");
                    return Ok(TrainOutcome { checkpoints, log, diverged: Some(format!("step {step}: {e}")) });
                }
                Err(TrainError::Objective(ObjectiveError::Model(ModelError::Tensor(e @ TensorError::NonFinite { .. })))) => {
                    warn!("diverged at step {step}: {e}");
                    return Ok(TrainOutcome { checkpoints, log, diverged: Some(format!("step {step}: {e}")) });
                }
                Err(e) => return Err(e),
            }
        }
        let (val_accuracy, choice) = validate(cfg, &params, val_set)?;
        let val_iop = choice.map_or(0.0, |c| c.mean_iop);
        let threshold = choice.map(|c| c.threshold);
        let line = format!(
            "{epoch},{val_accuracy},{val_iop},{}",
            threshold.map(|t| t.to_string()).unwrap_or_default()
        );
        info!("epoch {line}");
        log.epochs.push(line);
        if let Some(dir) = out_dir {
            params.save(&dir.join(format!("ckpt_{epoch}")))?;
        }
        checkpoints.push(Checkpoint { epoch, params: params.clone(), val_accuracy, val_iop, threshold });
    }
    Ok(TrainOutcome { checkpoints, log, diverged: None })
}

impl FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adaptive-moments" => Ok(Self::ADAM_DEFAULT),
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum { momentum: 0.9 }),
            other => Err(format!("unknown optimizer '{other}' (adaptive-moments|sgd-momentum)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -2.0]).unwrap()];
        let g = vec![Tensor::zeros(&[2])];
        for kind in [OptimizerKind::ADAM_DEFAULT, OptimizerKind::SgdMomentum { momentum: 0.9 }] {
            let mut opt = Optimizer::new(kind, &p);
            opt.step(&mut p, &g, 0.1).unwrap();
            assert_eq!(p[0].data(), &[1.0, -2.0]);
        }
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = vec![Tensor::scalar(1.0)];
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, &p);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        for c in [1e-4, 0.3, -7.0, 250.0] {
            let mut p = vec![Tensor::scalar(0.0)];
            let mut opt = Optimizer::new(OptimizerKind::ADAM_DEFAULT, &p);
            opt.step(&mut p, &[Tensor::scalar(c)], 1e-3).unwrap();
            // |c| / (|c| + 1e-8) relative to lr
            let want = 1e-3 * c.abs() / (c.abs() + 1e-8);
            assert!((p[0].data()[0].abs() - want).abs() < 1e-15, "{c}");
            assert_eq!(p[0].data()[0].signum(), -c.signum());
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p − 3)², gradient 2(p − 3); stable for lr < 1
        let mut p = vec![Tensor::scalar(-5.0)];
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, &p);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let v = p[0].data()[0];
            let dist = (v - 3.0).abs();
            assert!(dist < last || dist == 0.0);
            last = dist;
            opt.step(&mut p, &[Tensor::scalar(2.0 * (v - 3.0))], 0.2).unwrap();
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut opt = Optimizer::new(OptimizerKind::ADAM_DEFAULT, &p);
        let g = Tensor::scalar(0.0);
        let mut bad = g.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(matches!(opt.step(&mut p, &[bad], 0.1), Err(TrainError::NonFiniteGradient(0))));
    }

    fn ckpt(epoch: usize, acc: f64, iop: f64) -> Checkpoint {
        Checkpoint {
            epoch,
            params: ModelParams::zeros(ModelConfig { widths: model::Widths::divided(64), ..Default::default() }),
            val_accuracy: acc,
            val_iop: iop,
            threshold: Some(0.1),
        }
    }

    #[test]
    fn selection_examples() {
        let c = vec![ckpt(1, 0.7, 0.9), ckpt(2, 0.9, 0.2), ckpt(3, 0.8, 0.6)];
        assert_eq!(select_checkpoint(&c, 2).unwrap().epoch, 3);
        assert_eq!(select_checkpoint(&c, 1).unwrap().epoch, 2);
        assert_eq!(select_checkpoint(&c, 3).unwrap().epoch, 1);
        assert!(matches!(select_checkpoint(&[], 1), Err(TrainError::NoCheckpoints)));
        assert!(select_checkpoint(&c, 4).is_err());
    }

    #[test]
    fn selection_ties_go_to_earlier_epoch() {
        let c = vec![ckpt(4, 0.9, 0.5), ckpt(2, 0.9, 0.5), ckpt(3, 0.9, 0.1)];
        assert_eq!(select_checkpoint(&c, 2).unwrap().epoch, 2);
        assert_eq!(select_checkpoint(&c, 1).unwrap().epoch, 2);
    }

    #[test]
    fn tune_single_grid_and_plateau() {
        let maps = vec![vec![0.0, 0.4, 0.4, 0.0]];
        let boxes = vec![BBox::new(1, 0, 1, 0)];
        let one = tune_threshold(&maps, &boxes, 2, 2, &[0.25], 1.0).unwrap();
        assert_eq!(one.threshold, 0.25);
        // every threshold below 0.4 gives the same mask
        let plateau = tune_threshold(&maps, &boxes, 2, 2, &[0.3, 0.1, 0.2, 0.0], 1.0).unwrap();
        assert_eq!(plateau.threshold, 0.0);
        assert_eq!(plateau.mean_iop, 0.5);
    }

    #[test]
    fn tune_errors() {
        let boxes = vec![BBox::new(0, 0, 0, 0)];
        assert!(matches!(
            tune_threshold(&[vec![0.0; 4]], &boxes, 2, 2, &[0.0, 0.5], 0.95),
            Err(TrainError::NoNonEmptyMask)
        ));
        assert!(matches!(tune_threshold(&[vec![0.0; 4]], &[None], 2, 2, &[0.0], 0.95), Err(TrainError::NoBoxes)));
        assert!(matches!(tune_threshold(&[vec![0.0; 4]], &boxes, 2, 2, &[], 0.95), Err(TrainError::Grid)));
        // the only non-empty mask misses the box entirely
        let far = vec![vec![0.0, 0.0, 0.0, 0.9]];
        assert!(matches!(tune_threshold(&far, &boxes, 2, 2, &[0.0], 0.5), Err(TrainError::CoverageUnmet(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { n_checkpoints: 11, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { map_source: MapSource::GradCam { layer: 5 }, ..Default::default() }.validate().is_err());
    }
}
