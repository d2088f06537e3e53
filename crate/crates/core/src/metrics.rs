//! Localization and classification metrics, KDE curves, and report emitters.
//!
//! Boxes are rasterized with inclusive bounds and all areas are pixel counts.

use std::fmt::Write as _;

use thiserror::Error;

use crate::datagen::BBox;

/// Bandwidth used when automatic selection degenerates (all values equal).
pub const KDE_FALLBACK_BANDWIDTH: f64 = 1e-3;
pub const KDE_GRID_POINTS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no samples to score")]
    Empty,
    #[error("{0} probabilities for {1} labels")]
    Length(usize, usize),
    #[error("kde needs at least 2 values, got {0}")]
    KdeTooFew(usize),
    #[error("kde bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("scores csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width * height, "mask size");
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn count_inside(&self, b: &BBox) -> usize {
        let (x1, y1) = (b.x1.min(self.width - 1), b.y1.min(self.height - 1));
        (b.y0..=y1)
            .map(|y| self.bits[y * self.width + b.x0..=y * self.width + x1].iter().filter(|&&v| v).count())
            .sum()
    }

    fn box_area(&self, b: &BBox) -> usize {
        (b.x1.min(self.width - 1) - b.x0 + 1) * (b.y1.min(self.height - 1) - b.y0 + 1)
    }
}

/// Pixel is set iff `value > threshold`.
pub fn binarize(values: &[f64], width: usize, height: usize, threshold: f64) -> BinaryMask {
    BinaryMask::new(width, height, values.iter().map(|&v| v > threshold).collect())
}

/// Fraction of predicted pixels inside `gt`; `None` for an empty prediction.
pub fn iop(pred: &BinaryMask, gt: &BBox) -> Option<f64> {
    let area = pred.area();
    (area > 0).then(|| pred.count_inside(gt) as f64 / area as f64)
}

/// `(fpr, fnr)`: predicted area outside the box over the non-box area, and
/// missed box area over the box area. FPR is `None` when the box covers the image.
pub fn fpr_fnr(pred: &BinaryMask, gt: &BBox) -> (Option<f64>, f64) {
    let total = pred.width * pred.height;
    let box_area = pred.box_area(gt);
    let inside = pred.count_inside(gt);
    let outside = pred.area() - inside;
    let fpr = (total > box_area).then(|| outside as f64 / (total - box_area) as f64);
    let fnr = (box_area - inside) as f64 / box_area as f64;
    (fpr, fnr)
}

/// Per-image localization scores; `None` marks an invalid score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalizationScores {
    pub iop: Option<f64>,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub area: usize,
}

pub fn localization_scores(pred: &BinaryMask, gt: &BBox) -> LocalizationScores {
    let (fpr, fnr) = fpr_fnr(pred, gt);
    LocalizationScores { iop: iop(pred, gt), fpr, fnr: Some(fnr), area: pred.area() }
}

/// Accuracy at the argmax (ties go to class 0) and the Mann–Whitney AUC of the
/// class-1 probability. AUC is `None` when only one class is present.
pub fn classification_scores(probs: &[[f64; 2]], labels: &[usize]) -> Result<(f64, Option<f64>), MetricError> {
    if probs.len() != labels.len() {
        return Err(MetricError::Length(probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| usize::from(p[1] > p[0]) == l)
        .count();
    let accuracy = correct as f64 / labels.len() as f64;
    let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
    Ok((accuracy, auc(&scores, labels)))
}

/// Probability that a random positive outranks a random negative, ties ½.
pub fn auc(scores: &[f64], labels: &[usize]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += midrank * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Density estimate on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Silverman's rule of thumb `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    if values.windows(2).all(|w| w[0] == w[1]) {
        return KDE_FALLBACK_BANDWIDTH;
    }
    let (_, sd) = mean_sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let iqr = q(0.75) - q(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (values.len() as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        KDE_FALLBACK_BANDWIDTH
    }
}

/// Gaussian-kernel density on [`KDE_GRID_POINTS`] points spanning
/// `[min − 3h, max + 3h]`. `bandwidth = None` selects Silverman's rule.
pub fn kde(values: &[f64], bandwidth: Option<f64>) -> Result<KdeCurve, MetricError> {
    if values.len() < 2 {
        return Err(MetricError::KdeTooFew(values.len()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(MetricError::Bandwidth(h)),
        None => silverman_bandwidth(values),
    };
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let x: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let density = x
        .iter()
        .map(|&g| norm * values.iter().map(|&v| (-0.5 * ((g - v) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    Ok(KdeCurve { bandwidth: h, x, density })
}

/// Mean ± standard error of the valid values; invalid ones are counted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std_err: f64,
    pub median: f64,
    pub n_valid: usize,
    pub n_invalid: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut valid = Vec::new();
        let mut n_invalid = 0;
        for v in values {
            match v {
                Some(v) => valid.push(v),
                None => n_invalid += 1,
            }
        }
        if valid.is_empty() {
            return Self { mean: f64::NAN, std_err: f64::NAN, median: f64::NAN, n_valid: 0, n_invalid };
        }
        let (mean, sd) = mean_sd(&valid);
        Self {
            mean,
            std_err: sd / (valid.len() as f64).sqrt(),
            median: median(&valid),
            n_valid: valid.len(),
            n_invalid,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Scores for one evaluated image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScore {
    pub index: usize,
    pub label: usize,
    pub prob_pos: f64,
    /// Present only for images with a ground-truth box.
    pub localization: Option<LocalizationScores>,
}

pub const METRICS: [&str; 3] = ["iop", "fpr", "fnr"];

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub threshold: f64,
    pub per_image: Vec<ImageScore>,
    pub iop: Aggregate,
    pub fpr: Aggregate,
    pub fnr: Aggregate,
    /// Mean predicted-mask area in pixels over images with a box.
    pub mean_area: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
    /// One curve per metric in [`METRICS`] order when at least two valid values exist.
    pub kde: Vec<(String, KdeCurve)>,
}

impl LocalizationReport {
    /// `maps[i]` is the continuous localization map of image `i` (row-major
    /// `width × height`), `boxes[i]` its box if any.
    pub fn build(
        maps: &[Vec<f64>],
        width: usize,
        height: usize,
        boxes: &[Option<BBox>],
        labels: &[usize],
        probs: &[[f64; 2]],
        threshold: f64,
    ) -> Result<Self, MetricError> {
        let n = labels.len();
        if maps.len() != n || boxes.len() != n {
            return Err(MetricError::Length(maps.len(), n));
        }
        let (accuracy, auc) = classification_scores(probs, labels)?;
        let per_image: Vec<ImageScore> = (0..n)
            .map(|i| ImageScore {
                index: i,
                label: labels[i],
                prob_pos: probs[i][1],
                localization: boxes[i].map(|b| localization_scores(&binarize(&maps[i], width, height, threshold), &b)),
            })
            .collect();
        Ok(Self::from_scores(per_image, accuracy, auc, threshold))
    }

    pub fn from_scores(per_image: Vec<ImageScore>, accuracy: f64, auc: Option<f64>, threshold: f64) -> Self {
        let loc: Vec<LocalizationScores> = per_image.iter().filter_map(|s| s.localization).collect();
        let column = |f: fn(&LocalizationScores) -> Option<f64>| loc.iter().map(f).collect::<Vec<_>>();
        let cols = [column(|s| s.iop), column(|s| s.fpr), column(|s| s.fnr)];
        let kde_curves = METRICS
            .iter()
            .zip(&cols)
            .filter_map(|(name, c)| {
                let v: Vec<f64> = c.iter().flatten().copied().collect();
                kde(&v, None).ok().map(|k| (name.to_string(), k))
            })
            .collect();
        let mean_area = if loc.is_empty() {
            f64::NAN
        } else {
            loc.iter().map(|s| s.area as f64).sum::<f64>() / loc.len() as f64
        };
        let [iop, fpr, fnr] = cols.map(Aggregate::of);
        Self { threshold, per_image, iop, fpr, fnr, mean_area, accuracy, auc, kde: kde_curves }
    }

    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("index,label,prob_pos,pred_area,iop,fpr,fnr\n");
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.per_image {
            let (area, iop, fpr, fnr) = match r.localization {
                Some(l) => (l.area.to_string(), opt(l.iop), opt(l.fpr), opt(l.fnr)),
                None => Default::default(),
            };
            let _ = writeln!(s, "{},{},{},{area},{iop},{fpr},{fnr}", r.index, r.label, r.prob_pos);
        }
        s
    }

    pub fn kde_csv(&self) -> String {
        kde_csv(&self.kde)
    }

    pub fn summary_row(&self, method: &str) -> String {
        let agg = |a: &Aggregate| format!("{:.4} ± {:.1e}", a.mean, a.std_err);
        let auc = self.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        format!(
            "{method:<12} {:<20} {:<20} {:<20} {:<8.4} {auc}",
            agg(&self.iop),
            agg(&self.fpr),
            agg(&self.fnr),
            self.accuracy
        )
    }

    /// Table with the columns IoP, FPR, FNR, Acc., AUC.
    pub fn summary_table<'a>(rows: impl IntoIterator<Item = (&'a str, &'a LocalizationReport)>) -> String {
        let mut s = format!("{:<12} {:<20} {:<20} {:<20} {:<8} {}\n", "method", "IoP", "FPR", "FNR", "Acc.", "AUC");
        for (name, r) in rows {
            s.push_str(&r.summary_row(name));
            s.push('\n');
        }
        s
    }
}

pub fn kde_csv(curves: &[(String, KdeCurve)]) -> String {
    let mut s = String::from("metric,x,density\n");
    for (name, c) in curves {
        for (x, d) in c.x.iter().zip(&c.density) {
            let _ = writeln!(s, "{name},{x},{d}");
        }
    }
    s
}

/// Parses a per-image scores CSV back into metric columns (valid values only).
pub fn read_scores_csv(text: &str) -> Result<Vec<(String, Vec<f64>)>, MetricError> {
    let mut lines = text.lines().enumerate();
    let header: Vec<&str> = lines
        .next()
        .map(|(_, l)| l.split(',').map(str::trim).collect())
        .ok_or(MetricError::Empty)?;
    let cols: Vec<(usize, &str)> = METRICS
        .iter()
        .filter_map(|m| header.iter().position(|h| h == m).map(|i| (i, *m)))
        .collect();
    if cols.is_empty() {
        return Err(MetricError::Csv { line: 1, msg: "no iop/fpr/fnr columns in header".into() });
    }
    let mut out: Vec<(String, Vec<f64>)> = cols.iter().map(|(_, m)| (m.to_string(), Vec::new())).collect();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(MetricError::Csv { line: i + 1, msg: format!("expected {} fields, got {}", header.len(), fields.len()) });
        }
        for (k, &(col, _)) in cols.iter().enumerate() {
            if fields[col].is_empty() {
                continue;
            }
            let v: f64 = fields[col]
                .parse()
                .map_err(|_| MetricError::Csv { line: i + 1, msg: format!("not a number: '{}'", fields[col]) })?;
            out[k].1.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut bits = vec![false; w * h];
        for &(x, y) in on {
            bits[y * w + x] = true;
        }
        BinaryMask::new(w, h, bits)
    }

    #[test]
    fn binarize_examples() {
        assert_eq!(binarize(&[0.2; 4], 2, 2, 0.5).area(), 0);
        let m = binarize(&[0.0, 0.1, 0.0, 0.7], 2, 2, 0.0);
        assert_eq!(m.bits(), &[false, true, false, true]);
    }

    #[test]
    fn iop_examples() {
        let b = BBox::new(0, 0, 1, 1).unwrap();
        assert_eq!(iop(&mask(4, 4, &[(0, 0), (1, 1)]), &b), Some(1.0));
        assert_eq!(iop(&mask(4, 4, &[(0, 0), (1, 0), (3, 3), (2, 3)]), &b), Some(0.5));
        assert_eq!(iop(&mask(4, 4, &[]), &b), None);
    }

    #[test]
    fn fpr_fnr_examples() {
        let b = BBox::new(0, 0, 1, 1).unwrap();
        let exact = mask(4, 4, &[(0, 0), (1, 0), (0, 1), (1, 1)]);
        assert_eq!(fpr_fnr(&exact, &b), (Some(0.0), 0.0));
        let (fpr, fnr) = fpr_fnr(&mask(4, 4, &[(3, 3), (2, 3)]), &b);
        assert!((fpr.unwrap() - 2.0 / 12.0).abs() < 1e-15);
        assert_eq!(fnr, 1.0);
        assert_eq!(fpr_fnr(&mask(4, 4, &[]), &b), (Some(0.0), 1.0));
        let whole = BBox::new(0, 0, 3, 3).unwrap();
        assert_eq!(fpr_fnr(&exact, &whole).0, None);
    }

    #[test]
    fn whole_image_prediction() {
        let b = BBox::new(1, 1, 2, 3).unwrap();
        let all = BinaryMask::new(5, 4, vec![true; 20]);
        let s = localization_scores(&all, &b);
        assert_eq!(s.iop, Some(6.0 / 20.0));
        assert_eq!(s.fnr, Some(0.0));
        assert_eq!(s.fpr, Some(1.0));
    }

    #[test]
    fn auc_examples() {
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &labels), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &labels), Some(0.5));
        assert_eq!(auc(&[0.9, 0.4, 0.6, 0.1], &labels), Some(0.75));
        assert_eq!(auc(&[0.9, 0.4], &[1, 1]), None);
    }

    #[test]
    fn accuracy_at_argmax() {
        let (acc, a) = classification_scores(&[[0.2, 0.8], [0.6, 0.4], [0.5, 0.5]], &[1, 1, 0]).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        // positives 0.8, 0.4 against negative 0.5
        assert_eq!(a, Some(0.5));
        assert_eq!(classification_scores(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn kde_properties() {
        let values = [0.1, 0.2, 0.25, 0.5, 0.9, 0.95];
        let c = kde(&values, None).unwrap();
        assert_eq!(c.x.len(), KDE_GRID_POINTS);
        assert!(c.density.iter().all(|&d| d >= 0.0));
        let step = c.x[1] - c.x[0];
        let integral: f64 = c.density.windows(2).map(|w| 0.5 * (w[0] + w[1]) * step).sum();
        assert!((integral - 1.0).abs() < 0.01, "{integral}");

        let sym = kde(&[-0.3, 0.3], Some(0.2)).unwrap();
        for i in 0..KDE_GRID_POINTS {
            assert!((sym.density[i] - sym.density[KDE_GRID_POINTS - 1 - i]).abs() < 1e-12);
            assert!((sym.x[i] + sym.x[KDE_GRID_POINTS - 1 - i]).abs() < 1e-12);
        }

        let flat = kde(&[0.4, 0.4, 0.4], None).unwrap();
        assert_eq!(flat.bandwidth, KDE_FALLBACK_BANDWIDTH);
        assert_eq!(kde(&[1.0], None), Err(MetricError::KdeTooFew(1)));
        assert!(kde(&[1.0, 2.0], Some(0.0)).is_err());
    }

    #[test]
    fn aggregate_excludes_invalid() {
        let a = Aggregate::of([Some(0.2), None, Some(0.4), Some(0.6)]);
        assert_eq!(a.n_valid, 3);
        assert_eq!(a.n_invalid, 1);
        assert!((a.mean - 0.4).abs() < 1e-15);
        assert!((a.std_err - 0.2 / 3f64.sqrt()).abs() < 1e-15);
        assert!((a.median - 0.4).abs() < 1e-15);
    }

    #[test]
    fn report_csv_round_trip() {
        let maps = vec![vec![0.0, 0.9, 0.9, 0.0], vec![0.0; 4], vec![0.3, 0.0, 0.0, 0.0]];
        let b = BBox::new(0, 0, 0, 1);
        let boxes = vec![b, None, b];
        let r = LocalizationReport::build(&maps, 2, 2, &boxes, &[1, 0, 1], &[[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]], 0.2).unwrap();
        assert_eq!(r.iop.n_valid, 2);
        assert_eq!(r.mean_area, 1.5);
        let csv = r.per_image_csv();
        let cols = read_scores_csv(&csv).unwrap();
        assert_eq!(cols[0], ("iop".to_string(), vec![0.5, 1.0]));
        assert_eq!(cols[2].1, vec![0.5, 0.5]);
        let table = LocalizationReport::summary_table([("infomask", &r)]);
        assert_eq!(table.lines().count(), 2);
        assert!(table.starts_with("method"));
    }
}
