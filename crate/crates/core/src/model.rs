//! The masked variational attention network.
//!
//! ```text
//! X ─ encoder ─ 1×1 conv + ReLU ─ upsample ─ A ─┬─ 1×1 conv ─────────── μ
//!                                               └─ 1×1 conv ─ softplus ─ σ
//! z = μ + σ ⊙ ε,   M = clamp(sigmoid(z) − τ, 0, 1),   M ─ classifier ─ softmax
//! ```
//!
//! Every map named above has the spatial size of the input image.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use thiserror::Error;

use crate::seed;
use crate::tensor::{self, Tape, Tensor, TensorError, Var};

pub const SIGMA_FLOOR: f64 = 1e-3;
pub const DEFAULT_TAU: f64 = 0.5;
/// `σ` at initialization.
pub const INIT_SIGMA: f64 = 0.1;
/// Channel count of the last encoder layer (the layer feeding the attention head).
pub const LATENT_CHANNELS: usize = 16;
pub const NUM_CLASSES: usize = 2;
/// Total spatial downsampling of the encoder.
pub const ENCODER_STRIDE: usize = 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input must be (N,1,H,W) with H and W divisible by {ENCODER_STRIDE}, got {0:?}")]
    InputShape(Vec<usize>),
    #[error("noise shape {noise:?} does not match input {input:?}")]
    NoiseShape { noise: Vec<usize>, input: Vec<usize> },
    #[error("threshold must be finite, got {0}")]
    Threshold(f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// What the classification block consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierInput {
    /// The masked latent `M`.
    Mask,
    /// `M ⊙ X`, the default. With `M` alone the mask only needs to differ
    /// between classes and tends to settle on a ring around the lesion;
    /// gating the image pushes it onto the lesion itself.
    MaskedImage,
    /// `M ⊙ A`.
    MaskedAttention,
    /// `A` directly, bypassing the variational mask (the plain baseline network).
    Attention,
}

impl fmt::Display for ClassifierInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierInput::Mask => "mask",
            ClassifierInput::MaskedImage => "mask_x",
            ClassifierInput::MaskedAttention => "mask_a",
            ClassifierInput::Attention => "attention",
        })
    }
}

impl FromStr for ClassifierInput {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mask" => Ok(ClassifierInput::Mask),
            "mask_x" => Ok(ClassifierInput::MaskedImage),
            "mask_a" => Ok(ClassifierInput::MaskedAttention),
            "attention" => Ok(ClassifierInput::Attention),
            other => Err(format!("unknown classifier input '{other}' (mask|mask_x|mask_a|attention)")),
        }
    }
}

/// Channel widths of the convolution stacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Widths {
    /// conv×2, pool, conv×2, pool, conv, conv. The last entry feeds the attention head.
    pub encoder: [usize; 6],
    /// conv, pool, conv×2, pool, global average pool.
    pub classifier: [usize; 3],
}

impl Widths {
    pub const FULL: Widths = Widths {
        encoder: [64, 64, 128, 128, 256, LATENT_CHANNELS],
        classifier: [128, 64, 64],
    };

    /// Full widths divided by `divisor` (at least one channel). The latent
    /// layer keeps its 16 channels.
    pub fn divided(divisor: usize) -> Widths {
        let d = divisor.max(1);
        let mut w = Self::FULL;
        for c in w.encoder[..5].iter_mut().chain(w.classifier.iter_mut()) {
            *c = (*c / d).max(1);
        }
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub widths: Widths,
    pub classifier_input: ClassifierInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: Widths::FULL,
            classifier_input: ClassifierInput::MaskedImage,
        }
    }
}

impl ModelConfig {
    fn classifier_in_channels(&self) -> usize {
        1
    }

    /// Names and shapes of every learnable tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cout: usize, cin: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        let mut cin = 1;
        for (i, &c) in self.widths.encoder.iter().enumerate() {
            conv(format!("encoder.conv{i}"), c, cin, 3);
            cin = c;
        }
        conv("attention".into(), 1, LATENT_CHANNELS, 1);
        conv("mu".into(), 1, 1, 1);
        conv("sigma".into(), 1, 1, 1);
        let mut cin = self.classifier_in_channels();
        for (i, &c) in self.widths.classifier.iter().enumerate() {
            conv(format!("classifier.conv{i}"), c, cin, 3);
            cin = c;
        }
        conv("classifier.dense".into(), NUM_CLASSES, cin, 1);
        out
    }
}

/// Index of each tensor in [`ModelConfig::layout`].
pub(crate) mod slot {
    pub const fn encoder_w(i: usize) -> usize {
        2 * i
    }
    pub const ATTENTION: usize = 12;
    pub const MU: usize = 14;
    pub const SIGMA: usize = 16;
    pub const fn classifier_w(i: usize) -> usize {
        18 + 2 * i
    }
    pub const DENSE: usize = 24;
    pub const COUNT: usize = 26;
}

/// All learnable tensors of one network, in a fixed named order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// He-uniform kernels and zero biases, except for the single-output
    /// heads: the attention kernel takes absolute values so `A` starts
    /// active, `μ` starts as the identity on `A`, and `σ` starts constant at
    /// [`INIT_SIGMA`]. The dense output layer starts at zero, so every
    /// network starts from uniform class probabilities.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = seed::rng_for(seed, "init", 0);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, (name, shape)) in config.layout().into_iter().enumerate() {
            let fan_in = shape[1..].iter().product::<usize>().max(1);
            let bound = (6.0 / fan_in as f64).sqrt();
            let t = match i {
                slot::MU => Tensor::full(&shape, 1.0),
                slot::SIGMA => Tensor::zeros(&shape),
                s if s == slot::SIGMA + 1 => Tensor::full(&shape, inverse_softplus(INIT_SIGMA - SIGMA_FLOOR)),
                slot::DENSE => Tensor::zeros(&shape),
                slot::ATTENTION => Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound).abs()),
                _ if name.ends_with(".bias") => Tensor::zeros(&shape),
                _ => Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound)),
            };
            names.push(name);
            tensors.push(t);
        }
        Self { config, names, tensors }
    }

    pub fn zeros(config: ModelConfig) -> Self {
        let (names, tensors) = config
            .layout()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .unzip();
        Self { config, names, tensors }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        BoundParams { vars }
    }

    /// Gradients of the bound tensors after a backward pass; unreached tensors get zeros.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Vec<Tensor> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    const MAGIC: &'static [u8; 8] = b"IMASKCK\0";
    const VERSION: u32 = 1;

    /// Binary checkpoint: magic, version, architecture header, then every
    /// named tensor with its shape and little-endian `f64` values.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        let header = format!(
            "encoder={}\nclassifier={}\nclassifier_input={}\n",
            join(&self.config.widths.encoder),
            join(&self.config.widths.classifier),
            self.config.classifier_input
        );
        write_bytes(&mut w, header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            write_bytes(&mut w, name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(bad("not a model checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != Self::VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let header = String::from_utf8(read_bytes(&mut r)?).map_err(|_| bad("header is not utf-8"))?;
        let mut config = ModelConfig::default();
        for line in header.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed header line"))?;
            match k {
                "encoder" => config.widths.encoder = parse_widths(v).ok_or_else(|| bad("bad encoder widths"))?,
                "classifier" => config.widths.classifier = parse_widths(v).ok_or_else(|| bad("bad classifier widths"))?,
                "classifier_input" => config.classifier_input = v.parse().map_err(|e: String| ModelError::Checkpoint(e))?,
                other => return Err(ModelError::Checkpoint(format!("unknown header key '{other}'"))),
            }
        }
        let layout = config.layout();
        let count = read_u32(&mut r)? as usize;
        if count != layout.len() {
            return Err(ModelError::Checkpoint(format!("expected {} tensors, found {count}", layout.len())));
        }
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_shape) in layout {
            let name = String::from_utf8(read_bytes(&mut r)?).map_err(|_| bad("tensor name is not utf-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 4 {
                return Err(bad("tensor order above 4"));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            if name != want_name || shape != want_shape {
                return Err(ModelError::Checkpoint(format!(
                    "expected {want_name} {want_shape:?}, found {name} {shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            names.push(name);
            tensors.push(Tensor::new(&shape, data)?);
        }
        Ok(Self { config, names, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_widths<const N: usize>(s: &str) -> Option<[usize; N]> {
    let v: Vec<usize> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    if v.contains(&0) {
        return None;
    }
    v.try_into().ok()
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(ModelError::Checkpoint("oversized string field".into()));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Parameter handles on one tape, in [`ModelParams`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv(&self, slot: usize) -> (Var, Var) {
        debug_assert!(slot + 1 < slot::COUNT);
        (self.vars[slot], self.vars[slot + 1])
    }
}

/// Tape handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Output of each encoder convolution after its ReLU.
    pub encoder_layers: Vec<Var>,
    pub features: Var,
    pub attention: Var,
    /// `None` when the classifier consumes `A` directly.
    pub latent: Option<LatentVars>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub mu: Var,
    pub sigma: Var,
    pub eps: Var,
    pub z: Var,
    pub z_tilde: Var,
    pub mask: Var,
}

/// Per-forward record of the variational quantities, each `(N,1,H,W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState {
    pub attention: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    pub eps: Tensor,
    pub z: Tensor,
    pub z_tilde: Tensor,
    pub mask: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `(N, 2)` row-major class probabilities.
    pub class_probs: Vec<[f64; 2]>,
    pub state: Option<VariationalState>,
}

fn check_input(x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] % ENCODER_STRIDE != 0 || s[3] % ENCODER_STRIDE != 0 {
        return Err(ModelError::InputShape(s.to_vec()));
    }
    Ok(())
}

/// Encoder stack; returns the output of every convolution (post-ReLU).
pub fn encode(tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Vec<Var>> {
    check_input(tape.value(x))?;
    encode_from(tape, p, 0, x)
}

/// Runs encoder layers `start..6`. `input` is the image when `start == 0`,
/// otherwise the (unpooled) output of layer `start - 1`.
pub fn encode_from(tape: &mut Tape, p: &BoundParams, start: usize, input: Var) -> Result<Vec<Var>> {
    let pooled_before = |i: usize| i == 2 || i == 4;
    let mut layers = Vec::with_capacity(6 - start.min(6));
    let mut h = input;
    for i in start..6 {
        if pooled_before(i) {
            h = tape.max_pool2d(h, 2)?;
        }
        let (w, b) = p.conv(slot::encoder_w(i));
        h = tape.conv2d(h, w, Some(b), 1, 1)?;
        h = tape.relu(h)?;
        layers.push(h);
    }
    Ok(layers)
}

/// Spatial downsampling factor of encoder layer `i` relative to the input.
pub fn encoder_layer_stride(i: usize) -> usize {
    match i {
        0 | 1 => 1,
        2 | 3 => 2,
        _ => 4,
    }
}

/// 1×1 conv + ReLU on the features, upsampled (nearest) to `size` = (H, W).
pub fn attention(tape: &mut Tape, p: &BoundParams, features: Var, size: (usize, usize)) -> Result<Var> {
    let fs = tape.value(features).dims4();
    if fs[2] == 0 || size.0 % fs[2] != 0 || size.1 % fs[3] != 0 || size.0 / fs[2] != size.1 / fs[3] {
        return Err(TensorError::Shape {
            op: "attention",
            detail: format!("features {:?} cannot be upsampled to {size:?}", &fs[2..]),
        }
        .into());
    }
    let (w, b) = p.conv(slot::ATTENTION);
    let a = tape.conv2d(features, w, Some(b), 1, 0)?;
    let a = tape.relu(a)?;
    Ok(tape.upsample_nearest(a, size.0 / fs[2])?)
}

/// `μ = conv₁ₓ₁(A)`, `σ = softplus(conv₁ₓ₁(A)) + σ_floor`.
pub fn variational_params(tape: &mut Tape, p: &BoundParams, a: Var) -> Result<(Var, Var)> {
    let (wm, bm) = p.conv(slot::MU);
    let mu = tape.conv2d(a, wm, Some(bm), 1, 0)?;
    let (ws, bs) = p.conv(slot::SIGMA);
    let raw = tape.conv2d(a, ws, Some(bs), 1, 0)?;
    let sp = tape.softplus(raw)?;
    let sigma = tape.add_scalar(sp, SIGMA_FLOOR)?;
    Ok((mu, sigma))
}

/// Reparameterized draw `z = μ + σ ⊙ ε`; `ε` is supplied by the caller.
pub fn sample_latent(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Result<Var> {
    let scaled = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, scaled)?)
}

/// Returns `(z̃, M)` with `z̃ = sigmoid(z)` and `M = clamp(z̃ − τ, 0, 1)`.
pub fn apply_mask(tape: &mut Tape, z: Var, tau: f64) -> Result<(Var, Var)> {
    if !tau.is_finite() {
        return Err(ModelError::Threshold(tau));
    }
    let z_tilde = tape.sigmoid(z)?;
    let shifted = tape.add_scalar(z_tilde, -tau)?;
    Ok((z_tilde, tape.clamp_unit(shifted)?))
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Scalar form of the mask, for callers outside a tape.
pub fn mask_value(z: f64, tau: f64) -> f64 {
    (tensor::sigmoid(z) - tau).clamp(0.0, 1.0)
}

/// Classification block; returns `(logits, probs)`, both `(N,2,1,1)`.
pub fn classify(tape: &mut Tape, p: &BoundParams, input: Var) -> Result<(Var, Var)> {
    let s = tape.value(input).dims4();
    if s[1] != 1 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(TensorError::Shape {
            op: "classify",
            detail: format!("expected (N,1,H,W) with H, W divisible by 4, got {s:?}"),
        }
        .into());
    }
    let mut h = input;
    for i in 0..3 {
        let (w, b) = p.conv(slot::classifier_w(i));
        h = tape.conv2d(h, w, Some(b), 1, 1)?;
        h = tape.relu(h)?;
        if i == 0 || i == 2 {
            h = tape.max_pool2d(h, 2)?;
        }
    }
    let pooled = tape.global_avg_pool(h)?;
    let (w, b) = p.conv(slot::DENSE);
    let logits = tape.conv2d(pooled, w, Some(b), 1, 0)?;
    let probs = tape.softmax(logits)?;
    Ok((logits, probs))
}

/// Full network on the tape. `eps` is ignored (and may be `None`) when the
/// classifier consumes `A` directly.
pub fn forward_on_tape(
    tape: &mut Tape,
    config: &ModelConfig,
    p: &BoundParams,
    x: Var,
    eps: Option<Var>,
    tau: f64,
) -> Result<ForwardVars> {
    let xs = tape.value(x).dims4();
    let encoder_layers = encode(tape, p, x)?;
    let features = *encoder_layers.last().expect("six encoder layers");
    let a = attention(tape, p, features, (xs[2], xs[3]))?;
    let (latent, cls_in) = if config.classifier_input == ClassifierInput::Attention {
        (None, a)
    } else {
        let eps = match eps {
            Some(e) => e,
            None => tape.constant(Tensor::zeros(&xs)),
        };
        let es = tape.value(eps).shape().to_vec();
        if es != xs {
            return Err(ModelError::NoiseShape { noise: es, input: xs.to_vec() });
        }
        let (mu, sigma) = variational_params(tape, p, a)?;
        let z = sample_latent(tape, mu, sigma, eps)?;
        let (z_tilde, mask) = apply_mask(tape, z, tau)?;
        let cls_in = match config.classifier_input {
            ClassifierInput::Mask => mask,
            ClassifierInput::MaskedImage => tape.mul(mask, x)?,
            ClassifierInput::MaskedAttention => tape.mul(mask, a)?,
            ClassifierInput::Attention => unreachable!(),
        };
        (Some(LatentVars { mu, sigma, eps, z, z_tilde, mask }), cls_in)
    };
    let (logits, probs) = classify(tape, p, cls_in)?;
    Ok(ForwardVars {
        encoder_layers,
        features,
        attention: a,
        latent,
        logits,
        probs,
    })
}

/// Forward pass without gradient tracking. `eps = None` means `ε = 0`
/// (deterministic inference).
pub fn forward(params: &ModelParams, x: &Tensor, eps: Option<&Tensor>, tau: f64) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let ev = eps.map(|e| tape.constant(e.clone()));
    let fv = forward_on_tape(&mut tape, params.config(), &bound, xv, ev, tau)?;
    Ok(collect_output(&tape, &fv))
}

pub(crate) fn collect_output(tape: &Tape, fv: &ForwardVars) -> ForwardOutput {
    let probs = tape.value(fv.probs).data();
    let class_probs = probs.chunks(2).map(|c| [c[0], c[1]]).collect();
    let state = fv.latent.map(|l| VariationalState {
        attention: tape.value(fv.attention).clone(),
        mu: tape.value(l.mu).clone(),
        sigma: tape.value(l.sigma).clone(),
        eps: tape.value(l.eps).clone(),
        z: tape.value(l.z).clone(),
        z_tilde: tape.value(l.z_tilde).clone(),
        mask: tape.value(l.mask).clone(),
    });
    ForwardOutput { class_probs, state }
}
