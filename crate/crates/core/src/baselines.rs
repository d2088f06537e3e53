//! Comparator methods: GradCAM on a plain classifier, FeatureMask (no KL)
//! and RegL1 (L1 mask penalty in place of KL), next to InfoMask itself.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::datagen::{BBox, ImageSample};
use crate::metrics::{LocalizationReport, MetricError};
use crate::model::{self, ClassifierInput, ModelError, ModelParams};
use crate::objective::{LossConfig, Variant};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::train::{self, Inference, MapSource, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum MethodError {
    #[error("inconsistent method spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("encoder layer {0} does not exist (0..=5)")]
    Layer(usize),
    #[error("GradCAM needs the plain classifier that consumes the attention map")]
    NotBaseline,
}

impl From<TensorError> for MethodError {
    fn from(e: TensorError) -> Self {
        MethodError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, MethodError>;

/// Last encoder layer, the one feeding the attention map.
pub const DEFAULT_GRADCAM_LAYER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MethodId {
    InfoMask,
    GradCam,
    FeatureMask,
    RegL1,
}

impl MethodId {
    pub const ALL: [MethodId; 4] = [MethodId::InfoMask, MethodId::GradCam, MethodId::FeatureMask, MethodId::RegL1];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::InfoMask => "infomask",
            MethodId::GradCam => "gradcam",
            MethodId::FeatureMask => "featuremask",
            MethodId::RegL1 => "regl1",
        }
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (infomask|gradcam|featuremask|regl1)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    pub id: MethodId,
    pub loss: LossConfig,
    pub map_source: MapSource,
}

impl MethodSpec {
    /// The consistent spec for `id`, taking weights from `base`.
    pub fn standard(id: MethodId, base: &LossConfig, gradcam_layer: usize) -> Result<Self> {
        let variant = match id {
            MethodId::InfoMask | MethodId::GradCam => Variant::InfoMask,
            MethodId::FeatureMask => Variant::FeatureMask,
            MethodId::RegL1 => Variant::RegL1,
        };
        let loss = LossConfig::new(variant, base.alpha(), base.l1_weight(), base.eps_samples())
            .map_err(|e| MethodError::Spec(e.to_string()))?;
        let map_source = match id {
            MethodId::GradCam => MapSource::GradCam { layer: gradcam_layer },
            _ => MapSource::Mask,
        };
        let spec = Self { id, loss, map_source };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MethodError::Spec(format!("{}: {m}", self.id)));
        match (self.id, self.map_source) {
            (MethodId::GradCam, MapSource::GradCam { layer }) if layer > 5 => return Err(MethodError::Layer(layer)),
            (MethodId::GradCam, MapSource::GradCam { .. }) => {}
            (MethodId::GradCam, _) => return bad("inference map must be the GradCAM map"),
            (_, MapSource::GradCam { .. }) => return bad("only gradcam uses GradCAM maps"),
            _ => {}
        }
        match (self.id, self.loss.variant()) {
            (MethodId::InfoMask, Variant::InfoMask)
            | (MethodId::GradCam, _)
            | (MethodId::FeatureMask, Variant::FeatureMask)
            | (MethodId::RegL1, Variant::RegL1) => {}
            _ => return bad(&format!("training variant {} does not match", self.loss.variant())),
        }
        if self.id == MethodId::FeatureMask && self.loss.alpha() != 0.0 {
            return bad("alpha must be 0");
        }
        Ok(())
    }
}

/// A method bound to a training configuration.
#[derive(Clone, Debug)]
pub struct Method {
    spec: MethodSpec,
    cfg: TrainConfig,
}

/// Derives the training configuration for `spec` from `base`: the loss and
/// map source come from the method spec; GradCAM switches the classifier to `A`.
pub fn build_method(spec: MethodSpec, base: &TrainConfig) -> Result<Method> {
    spec.validate()?;
    let mut cfg = base.clone();
    cfg.loss = spec.loss;
    cfg.map_source = spec.map_source;
    if spec.id == MethodId::GradCam {
        cfg.model.classifier_input = ClassifierInput::Attention;
    } else if cfg.model.classifier_input == ClassifierInput::Attention {
        return Err(MethodError::Spec(format!("{}: classifier input must be a masked input", spec.id)));
    }
    cfg.validate()?;
    Ok(Method { spec, cfg })
}

impl Method {
    pub fn spec(&self) -> &MethodSpec {
        &self.spec
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn train(&self, train_set: &[ImageSample], val_set: &[ImageSample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
        Ok(train::train(&self.cfg, train_set, val_set, out_dir)?)
    }

    pub fn localize(&self, params: &ModelParams, samples: &[ImageSample]) -> Result<Inference> {
        if params.config() != &self.cfg.model {
            return Err(MethodError::Spec("checkpoint architecture differs from the method's".into()));
        }
        Ok(train::infer(params, samples, self.cfg.map_source, self.cfg.tau_train, self.cfg.eval_batch)?)
    }

    pub fn evaluate(&self, params: &ModelParams, threshold: f64, samples: &[ImageSample]) -> Result<LocalizationReport> {
        if samples.is_empty() {
            return Err(MethodError::Metric(MetricError::Empty));
        }
        let inf = self.localize(params, samples)?;
        let boxes: Vec<Option<BBox>> = samples.iter().map(|s| s.bbox).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        Ok(LocalizationReport::build(
            &inf.maps,
            samples[0].width(),
            samples[0].height(),
            &boxes,
            &labels,
            &inf.probs,
            threshold,
        )?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    /// Row-major `W × H`, in `[0,1]`.
    pub map: Vec<f64>,
    /// One weight per channel of the hooked layer.
    pub weights: Vec<f64>,
    pub target: usize,
    pub probs: [f64; 2],
    /// The target-logit gradient vanished everywhere; the map is all zero.
    pub zero_gradient: bool,
}

/// Combines one image's `(C, h, w)` feature maps and gradients into the
/// channel weights and the (unnormalized, low-resolution) map.
pub fn weighted_cam(features: &[f64], grads: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(features.len(), grads.len());
    let plane = features.len() / channels;
    let weights: Vec<f64> = grads.chunks(plane).map(|g| g.iter().sum::<f64>() / plane as f64).collect();
    let mut cam = vec![0.0; plane];
    for (w, f) in weights.iter().zip(features.chunks(plane)) {
        for (c, &v) in cam.iter_mut().zip(f) {
            *c += w * v;
        }
    }
    for c in &mut cam {
        *c = c.max(0.0);
    }
    (weights, cam)
}

/// Nearest upsampling by `factor` followed by max normalization.
fn finish_map(cam: &[f64], w: usize, factor: usize) -> Vec<f64> {
    let h = cam.len() / w;
    let (bw, bh) = (w * factor, h * factor);
    let mut out = Vec::with_capacity(bw * bh);
    for y in 0..bh {
        for x in 0..bw {
            out.push(cam[(y / factor) * w + x / factor]);
        }
    }
    let max = out.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        for v in &mut out {
            *v /= max;
        }
    }
    out
}

/// GradCAM for a `(N,1,H,W)` batch. The target class of each image is the
/// predicted one unless `targets` is given.
pub fn gradcam_batch(params: &ModelParams, x: &Tensor, targets: Option<&[usize]>, layer: usize) -> Result<Vec<GradCam>> {
    if params.config().classifier_input != ClassifierInput::Attention {
        return Err(MethodError::NotBaseline);
    }
    if layer > 5 {
        return Err(MethodError::Layer(layer));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let [n, _, h, w] = tape.value(xv).dims4();
    if targets.is_some_and(|t| t.len() != n || t.iter().any(|&c| c >= model::NUM_CLASSES)) {
        return Err(MethodError::Spec("one target class in {0,1} per image required".into()));
    }
    let frozen = model::encode(&mut tape, &bound, xv)?;
    let hooked = tape.param(tape.value(frozen[layer]).clone());
    let rest = model::encode_from(&mut tape, &bound, layer + 1, hooked)?;
    let features = rest.last().copied().unwrap_or(hooked);
    let a = model::attention(&mut tape, &bound, features, (h, w))?;
    let (logits, probs) = model::classify(&mut tape, &bound, a)?;
    let probs: Vec<[f64; 2]> = tape.value(probs).data().chunks(2).map(|c| [c[0], c[1]]).collect();
    let chosen: Vec<usize> = match targets {
        Some(t) => t.to_vec(),
        None => probs.iter().map(|p| usize::from(p[1] > p[0])).collect(),
    };
    let onehot = Tensor::from_fn(&[n, 2, 1, 1], |i| if i % 2 == chosen[i / 2] { 1.0 } else { 0.0 });
    let sel = tape.constant(onehot);
    let picked = tape.mul(logits, sel)?;
    let total = tape.sum_all(picked)?;
    tape.backward(total)?;
    let fval = tape.value(hooked);
    let [_, c, fh, fw] = fval.dims4();
    let grads = tape.grad(hooked).unwrap_or_else(|| Tensor::zeros(fval.shape()));
    let per = c * fh * fw;
    let factor = model::encoder_layer_stride(layer);
    Ok((0..n)
        .map(|i| {
            let f = &fval.data()[i * per..(i + 1) * per];
            let g = &grads.data()[i * per..(i + 1) * per];
            let (weights, cam) = weighted_cam(f, g, c);
            GradCam {
                map: finish_map(&cam, fw, factor),
                weights,
                target: chosen[i],
                probs: probs[i],
                zero_gradient: g.iter().all(|&v| v == 0.0),
            }
        })
        .collect())
}

/// GradCAM for a single `(1,1,H,W)` image.
pub fn gradcam_map(params: &ModelParams, x: &Tensor, target: Option<usize>, layer: usize) -> Result<GradCam> {
    let t = target.map(|t| vec![t]);
    let mut v = gradcam_batch(params, x, t.as_deref(), layer)?;
    if v.len() != 1 {
        return Err(MethodError::Spec(format!("expected one image, got {}", v.len())));
    }
    Ok(v.remove(0))
}
