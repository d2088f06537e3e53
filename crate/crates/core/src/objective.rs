//! Training objective: classification NLL plus a KL penalty toward a
//! standard normal on the latent (or an L1 mask penalty for the ablation).

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{self, BoundParams, ForwardVars, ModelConfig, ModelError};
use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Probability floor for the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("sigma must be strictly positive, got {value} at index {index}")]
    NonPositiveSigma { index: usize, value: f64 },
    #[error("mu and sigma shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("{0} noise draws supplied for {1} samples")]
    NoiseCount(usize, usize),
}

impl From<TensorError> for ObjectiveError {
    fn from(e: TensorError) -> Self {
        ObjectiveError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    InfoMask,
    /// No KL term.
    FeatureMask,
    /// KL replaced by an L1 penalty on the mask.
    RegL1,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::InfoMask => "infomask",
            Variant::FeatureMask => "featuremask",
            Variant::RegL1 => "regl1",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "infomask" => Ok(Variant::InfoMask),
            "featuremask" => Ok(Variant::FeatureMask),
            "regl1" => Ok(Variant::RegL1),
            other => Err(format!("unknown loss variant '{other}' (infomask|featuremask|regl1)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    alpha: f64,
    eps_samples: usize,
    variant: Variant,
    l1_weight: f64,
}

/// Default KL weight. At `1e-3` the noise scale grows enough that the
/// classifier, trained on noisy masks, loses accuracy on the noise-free
/// inference mask.
pub const DEFAULT_ALPHA: f64 = 1e-4;

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            eps_samples: 1,
            variant: Variant::InfoMask,
            l1_weight: 1e-2,
        }
    }
}

impl LossConfig {
    /// Validates the weights; `FeatureMask` forces `alpha = 0`.
    pub fn new(variant: Variant, alpha: f64, l1_weight: f64, eps_samples: usize) -> Result<Self> {
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(ObjectiveError::Config(format!("alpha must be finite and >= 0, got {alpha}")));
        }
        if !(l1_weight >= 0.0) || !l1_weight.is_finite() {
            return Err(ObjectiveError::Config(format!("l1_weight must be finite and >= 0, got {l1_weight}")));
        }
        if eps_samples == 0 {
            return Err(ObjectiveError::Config("eps_samples must be at least 1".into()));
        }
        let alpha = if variant == Variant::FeatureMask { 0.0 } else { alpha };
        Ok(Self { alpha, eps_samples, variant, l1_weight })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn eps_samples(&self) -> usize {
        self.eps_samples
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn l1_weight(&self) -> f64 {
        self.l1_weight
    }
}

/// Batch-averaged loss components. Inactive terms are reported as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub l1: f64,
    /// Number of true-class probabilities that hit [`PROB_FLOOR`].
    pub clamped: usize,
}

impl LossBreakdown {
    /// Training-log line `step,total,nll,kl,l1`.
    pub fn log_line(&self, step: usize) -> String {
        format!("{step},{},{},{},{}", self.total, self.nll, self.kl, self.l1)
    }
}

/// `Σ −½(1 + ln σ² − μ² − σ²)` over all elements.
pub fn kl_to_standard_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(ObjectiveError::ShapeMismatch(mu.shape().to_vec(), sigma.shape().to_vec()));
    }
    let mut total = 0.0;
    for (i, (&m, &s)) in mu.data().iter().zip(sigma.data()).enumerate() {
        if !(s > 0.0) {
            return Err(ObjectiveError::NonPositiveSigma { index: i, value: s });
        }
        total += -0.5 * (1.0 + 2.0 * s.ln() - m * m - s * s);
    }
    Ok(total)
}

/// Tape version of [`kl_to_standard_normal`], summed over all elements and
/// divided by `batch`.
pub fn kl_on_tape(tape: &mut Tape, mu: Var, sigma: Var, batch: usize) -> Result<Var> {
    if let Some((index, &value)) = tape.value(sigma).data().iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
        return Err(ObjectiveError::NonPositiveSigma { index, value });
    }
    // −½(1 + 2 ln σ − μ² − σ²) = ½(μ² + σ² − 1) − ln σ
    let mu2 = tape.mul(mu, mu)?;
    let s2 = tape.mul(sigma, sigma)?;
    let sq = tape.add(mu2, s2)?;
    let sq = tape.add_scalar(sq, -1.0)?;
    let half = tape.mul_scalar(sq, 0.5)?;
    let ln_s = tape.log(sigma, f64::MIN_POSITIVE)?;
    let per = tape.sub(half, ln_s)?;
    let total = tape.sum_all(per)?;
    Ok(tape.mul_scalar(total, 1.0 / batch as f64)?)
}

/// `−ln p[label]`, with the probability floored at [`PROB_FLOOR`].
/// The flag reports whether the floor was hit.
pub fn nll_term(probs: &[f64; 2], label: usize) -> (f64, bool) {
    let p = probs[label];
    (-(p.max(PROB_FLOOR)).ln(), p < PROB_FLOOR)
}

/// Mean of `|M|` over all elements.
pub fn l1_mask_penalty(mask: &Tensor) -> f64 {
    mask.data().iter().map(|v| v.abs()).sum::<f64>() / mask.numel() as f64
}

/// Batch mean of `−ln p[label]` on the tape; returns the scalar and the clamp count.
pub fn nll_on_tape(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, usize)> {
    let n = labels.len();
    let onehot = Tensor::from_fn(&[n, 2, 1, 1], |i| if labels[i / 2] == i % 2 { 1.0 } else { 0.0 });
    let clamped = tape
        .value(probs)
        .data()
        .chunks(2)
        .zip(labels)
        .filter(|(p, &l)| p[l] < PROB_FLOOR)
        .count();
    let onehot = tape.constant(onehot);
    let picked = tape.mul(probs, onehot)?;
    let picked = tape.channel_sum(picked)?;
    let logp = tape.log(picked, PROB_FLOOR)?;
    let mean = tape.mean_all(logp)?;
    Ok((tape.mul_scalar(mean, -1.0)?, clamped))
}

/// Result of [`batch_loss`]: the scalar loss on the tape, its breakdown, and
/// the forward record of the first noise draw.
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub forward: ForwardVars,
}

/// Batch-averaged objective for images `x` `(N,1,H,W)` with `labels`.
///
/// `eps` holds one `(N,1,H,W)` noise tensor per expectation sample; the NLL
/// (and L1) terms are averaged over them. The KL term does not depend on the
/// noise and is computed once.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    tape: &mut Tape,
    model_cfg: &ModelConfig,
    params: &BoundParams,
    x: Var,
    labels: &[usize],
    eps: &[Tensor],
    tau: f64,
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let n = labels.len();
    if n == 0 {
        return Err(ObjectiveError::EmptyBatch);
    }
    if eps.len() != cfg.eps_samples {
        return Err(ObjectiveError::NoiseCount(eps.len(), cfg.eps_samples));
    }
    let mut nll_sum: Option<Var> = None;
    let mut l1_sum: Option<Var> = None;
    let mut clamped = 0;
    let mut first: Option<ForwardVars> = None;
    for e in eps {
        let ev = tape.constant(e.clone());
        let fv = model::forward_on_tape(tape, model_cfg, params, x, Some(ev), tau)?;
        let (nll, c) = nll_on_tape(tape, fv.probs, labels)?;
        clamped += c;
        nll_sum = Some(match nll_sum {
            Some(acc) => tape.add(acc, nll)?,
            None => nll,
        });
        if cfg.variant == Variant::RegL1 {
            let mask = fv.latent.ok_or_else(|| ObjectiveError::Config("L1 penalty needs a mask".into()))?.mask;
            let l1 = tape.mean_all(mask)?;
            l1_sum = Some(match l1_sum {
                Some(acc) => tape.add(acc, l1)?,
                None => l1,
            });
        }
        first.get_or_insert(fv);
    }
    let forward = first.expect("at least one noise sample");
    let k = 1.0 / cfg.eps_samples as f64;
    let nll = tape.mul_scalar(nll_sum.expect("at least one sample"), k)?;
    let mut breakdown = LossBreakdown {
        nll: tape.value(nll).data()[0],
        clamped,
        ..Default::default()
    };
    let total = match cfg.variant {
        Variant::FeatureMask => nll,
        Variant::InfoMask => {
            let latent = forward.latent.ok_or_else(|| ObjectiveError::Config("KL term needs a latent".into()))?;
            let kl = kl_on_tape(tape, latent.mu, latent.sigma, n)?;
            breakdown.kl = tape.value(kl).data()[0];
            let weighted = tape.mul_scalar(kl, cfg.alpha)?;
            tape.add(nll, weighted)?
        }
        Variant::RegL1 => {
            let l1 = tape.mul_scalar(l1_sum.expect("regl1 accumulates l1"), k)?;
            breakdown.l1 = tape.value(l1).data()[0];
            let weighted = tape.mul_scalar(l1, cfg.l1_weight)?;
            tape.add(nll, weighted)?
        }
    };
    breakdown.total = tape.value(total).data()[0];
    Ok(BatchLoss { total, breakdown, forward })
}

/// Plain cross-entropy for a network whose classifier consumes `A` directly.
pub fn baseline_loss(tape: &mut Tape, model_cfg: &ModelConfig, params: &BoundParams, x: Var, labels: &[usize]) -> Result<BatchLoss> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let fv = model::forward_on_tape(tape, model_cfg, params, x, None, model::DEFAULT_TAU)?;
    let (nll, clamped) = nll_on_tape(tape, fv.probs, labels)?;
    let v = tape.value(nll).data()[0];
    Ok(BatchLoss {
        total: nll,
        breakdown: LossBreakdown { total: v, nll: v, clamped, ..Default::default() },
        forward: fv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierInput, ModelParams, Widths};
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn kl_hand_values() {
        assert_eq!(kl_to_standard_normal(&scalar(0.0), &scalar(1.0)).unwrap(), 0.0);
        assert!((kl_to_standard_normal(&scalar(1.0), &scalar(1.0)).unwrap() - 0.5).abs() < 1e-12);
        let want = 1.5 - std::f64::consts::LN_2;
        assert!((kl_to_standard_normal(&scalar(0.0), &scalar(2.0)).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_bad_sigma() {
        assert!(matches!(
            kl_to_standard_normal(&scalar(0.0), &scalar(0.0)),
            Err(ObjectiveError::NonPositiveSigma { .. })
        ));
        assert!(kl_to_standard_normal(&scalar(0.0), &scalar(-1.0)).is_err());
    }

    #[test]
    fn kl_tape_matches_closed_form() {
        let mu = Tensor::new(&[2, 1, 1, 2], vec![0.5, -0.2, 1.0, 0.0]).unwrap();
        let sigma = Tensor::new(&[2, 1, 1, 2], vec![1.2, 0.4, 1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(mu.clone());
        let s = tape.constant(sigma.clone());
        let kl = kl_on_tape(&mut tape, m, s, 2).unwrap();
        let want = kl_to_standard_normal(&mu, &sigma).unwrap() / 2.0;
        assert!((tape.value(kl).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_p[ln p(z) − ln r(z)] with z ~ N(μ, σ²)
        let (mu, sigma) = (0.7, 0.6);
        let mut rng = seed::rng_for(3, "kl-mc", 0);
        let n = 200_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            let z = mu + sigma * e;
            acc += -0.5 * e * e - sigma.ln() + 0.5 * z * z;
        }
        let mc = acc / n as f64;
        let closed = kl_to_standard_normal(&scalar(mu), &scalar(sigma)).unwrap();
        assert!((mc - closed).abs() / closed < 0.02, "{mc} vs {closed}");
    }

    #[test]
    fn nll_examples() {
        let (v, c) = nll_term(&[1.0, 0.0], 0);
        assert!(v.abs() < 1e-12 && !c);
        assert!((nll_term(&[0.5, 0.5], 1).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((nll_term(&[0.9, 0.1], 1).0 - std::f64::consts::LN_10).abs() < 1e-12);
        let (v, c) = nll_term(&[1.0, 0.0], 1);
        assert!(c);
        assert!((v - 27.631021115928547).abs() < 1e-9);
    }

    #[test]
    fn nll_tape_counts_clamps() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(&[2, 2, 1, 1], vec![1.0, 0.0, 0.9, 0.1]).unwrap());
        let (nll, clamped) = nll_on_tape(&mut tape, p, &[1, 1]).unwrap();
        assert_eq!(clamped, 1);
        let want = (nll_term(&[1.0, 0.0], 1).0 + nll_term(&[0.9, 0.1], 1).0) / 2.0;
        assert!((tape.value(nll).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_mask_penalty(&Tensor::zeros(&[1, 1, 4, 4])), 0.0);
        assert_eq!(l1_mask_penalty(&Tensor::full(&[1, 1, 4, 4], 1.0)), 1.0);
        let half = Tensor::from_fn(&[1, 1, 4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        assert_eq!(l1_mask_penalty(&half), 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(Variant::InfoMask, -1.0, 0.0, 1).is_err());
        assert!(LossConfig::new(Variant::InfoMask, 1.0, 0.0, 0).is_err());
        assert!(LossConfig::new(Variant::RegL1, 0.0, f64::NAN, 1).is_err());
        assert_eq!(LossConfig::new(Variant::FeatureMask, 0.5, 0.0, 1).unwrap().alpha(), 0.0);
    }

    fn setup(n: usize) -> (ModelConfig, ModelParams, Tensor, Vec<Tensor>) {
        let cfg = ModelConfig { widths: Widths::divided(16), classifier_input: ClassifierInput::Mask };
        let params = ModelParams::init(cfg, 7);
        let mut rng = seed::rng_for(2, "x", 0);
        let x = Tensor::from_fn(&[n, 1, 16, 16], |_| rng.gen_range(0.0..1.0));
        let eps = vec![Tensor::from_fn(&[n, 1, 16, 16], |_| StandardNormal.sample(&mut rng))];
        (cfg, params, x, eps)
    }

    fn run(cfg: &ModelConfig, params: &ModelParams, x: &Tensor, labels: &[usize], eps: &[Tensor], loss: &LossConfig) -> LossBreakdown {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        batch_loss(&mut tape, cfg, &b, xv, labels, eps, 0.5, loss).unwrap().breakdown
    }

    #[test]
    fn variants_compose_terms() {
        let (cfg, params, x, eps) = setup(2);
        let labels = [0, 1];
        let info = run(&cfg, &params, &x, &labels, &eps, &LossConfig::new(Variant::InfoMask, 0.1, 0.0, 1).unwrap());
        assert!(info.kl > 0.0);
        assert!((info.total - (info.nll + 0.1 * info.kl)).abs() < 1e-12);
        let zero = run(&cfg, &params, &x, &labels, &eps, &LossConfig::new(Variant::InfoMask, 0.0, 0.0, 1).unwrap());
        assert_eq!(zero.total, zero.nll);
        let fm = run(&cfg, &params, &x, &labels, &eps, &LossConfig::new(Variant::FeatureMask, 0.3, 0.0, 1).unwrap());
        assert_eq!(fm.total, fm.nll);
        assert_eq!(fm.total, zero.total);
        let l1 = run(&cfg, &params, &x, &labels, &eps, &LossConfig::new(Variant::RegL1, 0.0, 0.5, 1).unwrap());
        assert_eq!(l1.kl, 0.0);
        assert!(l1.l1 >= 0.0);
        assert!((l1.total - (l1.nll + 0.5 * l1.l1)).abs() < 1e-12);
        let bigger = run(&cfg, &params, &x, &labels, &eps, &LossConfig::new(Variant::InfoMask, 1.0, 0.0, 1).unwrap());
        assert_eq!(bigger.kl, info.kl);
        assert!(bigger.total >= info.total);
    }

    #[test]
    fn duplicated_sample_matches_single() {
        let (cfg, params, x, eps) = setup(1);
        let loss = LossConfig::default();
        let one = run(&cfg, &params, &x, &[1], &eps, &loss);
        let x2 = Tensor::stack(&[x.clone(), x]).unwrap();
        let e2 = vec![Tensor::stack(&[eps[0].clone(), eps[0].clone()]).unwrap()];
        let two = run(&cfg, &params, &x2, &[1, 1], &e2, &loss);
        assert!((one.total - two.total).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_and_noise_count_are_errors() {
        let (cfg, params, x, eps) = setup(1);
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let xv = tape.constant(x);
        assert!(matches!(
            batch_loss(&mut tape, &cfg, &b, xv, &[], &eps, 0.5, &LossConfig::default()),
            Err(ObjectiveError::EmptyBatch)
        ));
        let two = LossConfig::new(Variant::InfoMask, 1e-3, 0.0, 2).unwrap();
        assert!(matches!(
            batch_loss(&mut tape, &cfg, &b, xv, &[0], &eps, 0.5, &two),
            Err(ObjectiveError::NoiseCount(1, 2))
        ));
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(mu in -5.0f64..5.0, sigma in 1e-3f64..5.0) {
            let kl = kl_to_standard_normal(&scalar(mu), &scalar(sigma)).unwrap();
            prop_assert!(kl >= -1e-10);
        }

        #[test]
        fn kl_zero_only_at_standard_normal(mu in -3.0f64..3.0, sigma in 0.05f64..3.0) {
            let kl = kl_to_standard_normal(&scalar(mu), &scalar(sigma)).unwrap();
            if mu.abs() > 1e-3 || (sigma - 1.0).abs() > 1e-3 {
                prop_assert!(kl > 1e-10);
            }
        }
    }
}
