//! Synthetic lesion-localization images, manifest ingestion, and stratified splits.
//!
//! Synthetic images share a smooth background texture and distractor shapes
//! (lines and rings) across both classes; only positives carry a soft
//! elliptical blob, whose tight box is the ground truth.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::pgm;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("manifest line {line}: {msg}")]
    Row { line: usize, msg: String },
    #[error("manifest line {line}: cannot read image {path}: {msg}")]
    Image { line: usize, path: PathBuf, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Option<Self> {
        (x0 <= x1 && y0 <= y1).then_some(Self { x0, y0, x1, y1 })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0 + 1) * (self.y1 - self.y0 + 1)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x1 < width && self.y1 < height
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x0: self.x0.min(other.x0),
            y0: self.y0.min(other.y0),
            x1: self.x1.max(other.x1),
            y1: self.y1.max(other.y1),
        }
    }
}

/// One grayscale image in `[0,1]`, stored as a `(1,1,H,W)` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    /// 0 = normal, 1 = diseased.
    pub label: usize,
    pub bbox: Option<BBox>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn pixels(&self) -> &[f64] {
        self.image.data()
    }
}

/// Stacks the images of `samples` into one `(N,1,H,W)` batch.
pub fn batch_images<'a>(samples: impl IntoIterator<Item = &'a ImageSample>) -> Tensor {
    let items: Vec<Tensor> = samples.into_iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&items).expect("samples share one image size")
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    /// Peak blob brightness above the background, `[min, max]`.
    pub blob_intensity: (f64, f64),
    /// Blob semi-axis lengths in pixels, `[min, max]`.
    pub blob_radius: (f64, f64),
    pub texture_amplitude: f64,
    /// Each image draws `0..=max_distractors` lines/rings, independent of its label.
    pub max_distractors: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            blob_intensity: (0.35, 0.6),
            blob_radius: (4.0, 9.0),
            texture_amplitude: 0.08,
            max_distractors: 3,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        let (rmin, rmax) = self.blob_radius;
        if !(rmin > 0.0 && rmin <= rmax) {
            return bad(format!("blob radius range must satisfy 0 < min <= max, got ({rmin}, {rmax})"));
        }
        if self.image_size < 8 {
            return bad(format!("image size {} too small", self.image_size));
        }
        if 2.0 * rmax + 4.0 > self.image_size as f64 {
            return bad(format!("blob radius {rmax} does not fit a {}px image", self.image_size));
        }
        let (imin, imax) = self.blob_intensity;
        if !(imin > 0.0 && imin <= imax && imax <= 1.0) {
            return bad(format!("blob intensity range must lie in (0,1], got ({imin}, {imax})"));
        }
        if !(self.texture_amplitude >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("texture amplitude and noise must be non-negative".into());
        }
        Ok(())
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "blob_intensity_min={}", self.blob_intensity.0);
        let _ = writeln!(s, "blob_intensity_max={}", self.blob_intensity.1);
        let _ = writeln!(s, "blob_radius_min={}", self.blob_radius.0);
        let _ = writeln!(s, "blob_radius_max={}", self.blob_radius.1);
        let _ = writeln!(s, "texture_amplitude={}", self.texture_amplitude);
        let _ = writeln!(s, "max_distractors={}", self.max_distractors);
        let _ = writeln!(s, "noise_std={}", self.noise_std);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Applies one `key=value` setting; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<bool, String> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.trim().parse().map_err(|_| format!("{k}: cannot parse '{v}'"))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "blob_intensity_min" => self.blob_intensity.0 = num(key, value)?,
            "blob_intensity_max" => self.blob_intensity.1 = num(key, value)?,
            "blob_radius_min" => self.blob_radius.0 = num(key, value)?,
            "blob_radius_max" => self.blob_radius.1 = num(key, value)?,
            "texture_amplitude" => self.texture_amplitude = num(key, value)?,
            "max_distractors" => self.max_distractors = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> std::result::Result<Self, String> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("not a key=value line: '{line}'"))?;
            if !cfg.set(k.trim(), v)? {
                return Err(format!("unknown key '{}'", k.trim()));
            }
        }
        Ok(cfg)
    }
}

/// Parameters of one elliptical blob.
#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    angle: f64,
    peak: f64,
}

impl Blob {
    /// Normalized elliptical radius² at pixel center `(x, y)`.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v
    }

    /// Smooth radial falloff `peak · (1 − r²)²` inside the ellipse.
    fn value(&self, x: f64, y: f64) -> f64 {
        let r2 = self.r2(x, y);
        if r2 >= 1.0 {
            0.0
        } else {
            self.peak * (1.0 - r2) * (1.0 - r2)
        }
    }
}

/// Distractor shapes drawn identically for both classes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distractor {
    Line { x0: f64, y0: f64, x1: f64, y1: f64, intensity: f64 },
    Ring { cx: f64, cy: f64, radius: f64, intensity: f64 },
}

impl Distractor {
    fn sample(rng: &mut impl Rng, cfg: &SynthConfig) -> Self {
        let s = cfg.image_size as f64;
        let intensity = rng.gen_range(cfg.blob_intensity.0..=cfg.blob_intensity.1);
        if rng.gen_bool(0.5) {
            Distractor::Line {
                x0: rng.gen_range(0.0..s),
                y0: rng.gen_range(0.0..s),
                x1: rng.gen_range(0.0..s),
                y1: rng.gen_range(0.0..s),
                intensity,
            }
        } else {
            let radius = rng.gen_range(cfg.blob_radius.0..=cfg.blob_radius.1 + 2.0);
            Distractor::Ring {
                cx: rng.gen_range(radius..s - radius),
                cy: rng.gen_range(radius..s - radius),
                radius,
                intensity,
            }
        }
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        // one-pixel-wide stroke with a linear falloff
        let stroke = |d: f64| (1.0 - d.abs()).max(0.0);
        match *self {
            Distractor::Line { x0, y0, x1, y1, intensity } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 { (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let (px, py) = (x0 + t * dx - x, y0 + t * dy - y);
                intensity * stroke((px * px + py * py).sqrt())
            }
            Distractor::Ring { cx, cy, radius, intensity } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - radius;
                intensity * stroke(d)
            }
        }
    }
}

/// Everything drawn into one synthetic image, for inspection and tests.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub sample: ImageSample,
    pub distractors: Vec<Distractor>,
    /// Blob centroid `(x, y)` in pixel coordinates, positives only.
    pub blob_center: Option<(f64, f64)>,
    /// Noise-free blob contribution per pixel, positives only.
    pub blob_field: Option<Vec<f64>>,
    pub blob_peak: f64,
}

/// Generates sample `index` of the dataset defined by `cfg`. Labels alternate
/// 0, 1, 0, 1, … by index.
pub fn generate_one(index: usize, cfg: &SynthConfig) -> SynthRecord {
    let mut rng = seed::rng_for(cfg.seed, "synth-sample", index as u64);
    let size = cfg.image_size;
    let s = size as f64;
    let label = index % 2;

    let base = rng.gen_range(0.2..0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.gen_range(0.5..2.0) / s;
            let theta = rng.gen_range(0.0..2.0 * PI);
            (freq * theta.cos(), freq * theta.sin(), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.3..1.0))
        })
        .collect();
    let norm: f64 = waves.iter().map(|w| w.3).sum();

    let n_distractors = rng.gen_range(0..=cfg.max_distractors);
    let distractors: Vec<Distractor> = (0..n_distractors).map(|_| Distractor::sample(&mut rng, cfg)).collect();

    let blob = (label == 1).then(|| {
        let rx = rng.gen_range(cfg.blob_radius.0..=cfg.blob_radius.1);
        let ry = rng.gen_range(cfg.blob_radius.0..=cfg.blob_radius.1);
        let margin = rx.max(ry) + 1.0;
        Blob {
            cx: rng.gen_range(margin..s - 1.0 - margin),
            cy: rng.gen_range(margin..s - 1.0 - margin),
            rx,
            ry,
            angle: rng.gen_range(0.0..PI),
            peak: rng.gen_range(cfg.blob_intensity.0..=cfg.blob_intensity.1),
        }
    });

    let noise = Normal::new(0.0, cfg.noise_std.max(1e-300)).expect("finite std");
    let mut pixels = Vec::with_capacity(size * size);
    let mut field = blob.map(|_| Vec::with_capacity(size * size));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let texture: f64 = waves
                .iter()
                .map(|&(kx, ky, phase, amp)| amp * (2.0 * PI * (kx * fx + ky * fy) + phase).cos())
                .sum::<f64>()
                / norm;
            let mut v = base + cfg.texture_amplitude * texture;
            v += distractors.iter().map(|d| d.value(fx, fy)).sum::<f64>();
            if let (Some(b), Some(f)) = (&blob, field.as_mut()) {
                let bv = b.value(fx, fy);
                f.push(bv);
                v += bv;
            }
            if cfg.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            pixels.push(v.clamp(0.0, 1.0));
        }
    }

    let bbox = match (&blob, &field) {
        (Some(b), Some(f)) => tight_box(f, size, size, 0.1 * b.peak),
        _ => None,
    };
    SynthRecord {
        sample: ImageSample {
            image: Tensor::new(&[1, 1, size, size], pixels).expect("finite pixels"),
            label,
            bbox,
        },
        distractors,
        blob_center: blob.map(|b| (b.cx, b.cy)),
        blob_field: field,
        blob_peak: blob.map_or(0.0, |b| b.peak),
    }
}

/// Bounding box of the pixels whose value exceeds `level`.
fn tight_box(values: &[f64], width: usize, height: usize, level: f64) -> Option<BBox> {
    let mut out: Option<BBox> = None;
    for y in 0..height {
        for x in 0..width {
            if values[y * width + x] > level {
                let b = BBox { x0: x, y0: y, x1: x, y1: y };
                out = Some(out.map_or(b, |o| o.union(&b)));
            }
        }
    }
    out
}

/// `n` synthetic samples with balanced labels.
pub fn generate(n: usize, cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    if n < 2 {
        return Err(DataError::Config(format!("need at least 2 samples, got {n}")));
    }
    Ok((0..n).map(|i| generate_one(i, cfg).sample).collect())
}

/// Reads a header-less `path,label,x0,y0,x1,y1` manifest. Image paths are
/// relative to the manifest's directory; empty box fields mean no box.
pub fn load_manifest(path: &Path) -> Result<Vec<ImageSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let row = parse_row(raw).map_err(|msg| DataError::Row { line, msg })?;
        let img_path = root.join(&row.path);
        let (width, height, pixels) = read_gray(&img_path).map_err(|msg| DataError::Image {
            line,
            path: img_path.clone(),
            msg,
        })?;
        if let Some(b) = row.bbox {
            if !b.fits(width, height) {
                return Err(DataError::Row {
                    line,
                    msg: format!("box {b:?} outside {width}x{height} image"),
                });
            }
        }
        out.push(ImageSample {
            image: Tensor::new(&[1, 1, height, width], pixels).map_err(|e| DataError::Row { line, msg: e.to_string() })?,
            label: row.label,
            bbox: row.bbox,
        });
    }
    if out.is_empty() {
        return Err(DataError::Manifest {
            path: path.to_path_buf(),
            msg: "manifest has no rows".into(),
        });
    }
    Ok(out)
}

#[derive(Debug, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    pub bbox: Option<BBox>,
}

pub fn parse_row(raw: &str) -> std::result::Result<ManifestRow, String> {
    let fields: Vec<&str> = raw.trim_end_matches('\r').split(',').map(str::trim).collect();
    if fields.len() != 6 {
        return Err(format!("expected 6 fields (path,label,x0,y0,x1,y1), got {}", fields.len()));
    }
    if fields[0].is_empty() {
        return Err("empty image path".into());
    }
    let label = match fields[1] {
        "0" => 0,
        "1" => 1,
        other => return Err(format!("label must be 0 or 1, got '{other}'")),
    };
    let coords = &fields[2..];
    let bbox = if coords.iter().all(|c| c.is_empty()) {
        None
    } else {
        let v: Vec<usize> = coords
            .iter()
            .map(|c| c.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format!("malformed bounding box '{}'", coords.join(",")))?;
        Some(BBox::new(v[0], v[1], v[2], v[3]).ok_or_else(|| format!("malformed bounding box: {v:?} has min > max"))?)
    };
    if label == 0 && bbox.is_some() {
        return Err("malformed bounding box: normal (label 0) rows carry no box".into());
    }
    Ok(ManifestRow {
        path: fields[0].to_string(),
        label,
        bbox,
    })
}

/// Decodes a grayscale image to `[0,1]`: PGM (P5, 8 or 16 bit) natively, PNG via the `image` crate.
fn read_gray(path: &Path) -> std::result::Result<(usize, usize, Vec<f64>), String> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let img = image::open(path).map_err(|e| e.to_string())?;
        let g = img.to_luma16();
        let (w, h) = g.dimensions();
        let px = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
        Ok((w as usize, h as usize, px))
    } else {
        let bytes = std::fs::read(path).map_err(|e| e.to_string())?;
        let img = pgm::decode(&bytes).map_err(|e| e.to_string())?;
        Ok((img.width, img.height, img.to_unit()))
    }
}

/// Writes `samples` as PGM files under `dir/images/` plus a manifest at `dir/<name>`.
/// Image file names are `<prefix><index>.pgm`.
pub fn write_dataset(dir: &Path, name: &str, prefix: &str, samples: &[ImageSample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{prefix}{i:05}.pgm");
        let img = pgm::Gray8::from_unit(s.width(), s.height(), s.pixels());
        std::fs::write(dir.join(&rel), img.encode())?;
        match s.bbox {
            Some(b) => writeln!(manifest, "{rel},{},{},{},{},{}", s.label, b.x0, b.y0, b.x1, b.y1),
            None => writeln!(manifest, "{rel},{},,,,", s.label),
        }
        .expect("write to string");
    }
    let path = dir.join(name);
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Stratified, seeded three-way split.
///
/// Each label group is shuffled, every member gets a within-group rank
/// fraction, and the merged order by rank fraction is cut at the target
/// sizes. Per-split label counts stay within one sample of proportional.
pub fn split(samples: &[ImageSample], fractions: [f64; 3], seed: u64) -> Result<[Vec<ImageSample>; 3]> {
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(DataError::Split(format!("fractions must be positive, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::Split(format!("fractions must sum to 1, got {sum}")));
    }
    let n = samples.len();
    let sizes = apportion(n, &fractions);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(DataError::Split(format!("split {i} would be empty for {n} samples")));
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.label).or_default().push(i);
    }
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(n);
    for (&label, idx) in groups.iter_mut() {
        let mut rng = seed::rng_for(seed, "split", label as u64);
        idx.shuffle(&mut rng);
        let m = idx.len() as f64;
        keyed.extend(idx.iter().enumerate().map(|(r, &i)| ((r as f64 + 0.5) / m, label, i)));
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out: [Vec<ImageSample>; 3] = Default::default();
    let mut it = keyed.into_iter();
    for (k, &size) in sizes.iter().enumerate() {
        out[k] = it.by_ref().take(size).map(|(_, _, i)| samples[i].clone()).collect();
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items by `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, e) in sizes.iter_mut().zip(&exact) {
        *s = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}
