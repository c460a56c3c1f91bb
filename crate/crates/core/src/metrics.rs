//! Segmentation metrics over field-of-view pixels.
//!
//! Ratios whose denominator is zero are `None` rather than 0, and serialise
//! as `null`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{count_components, dilate_disc, skeletonize, Mask};
use crate::tensor::Tensor;

/// Binarisation threshold on the vessel probability.
pub const EVAL_THRESHOLD: f64 = 0.5;

/// Dilation radius of the area and length terms.
pub const CAL_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    /// Counts FOV pixels, calling a pixel vessel when `score >= threshold`.
    pub fn from_scores(scores: &[f64], labels: &[f64], fov: &[f64], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for ((&s, &y), &f) in scores.iter().zip(labels).zip(fov) {
            if f == 0.0 {
                continue;
            }
            match (s >= threshold, y != 0.0) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn sensitivity(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> Option<f64> {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn f1(&self) -> Option<f64> {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Matthews correlation coefficient.
    pub fn mcc(&self) -> Option<f64> {
        let [tp, tn, fp, fn_] = [self.tp, self.tn, self.fp, self.fn_].map(|v| v as f64);
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        (den > 0.0).then(|| (tp * tn - fp * fn_) / den)
    }
}

/// Area under the ROC curve by the trapezoidal rule, with tied scores
/// entering the curve as one step. `None` without both classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - fp0) * (tp + tp0) / 2.0;
    }
    Some(area / (pos * neg))
}

/// Connectivity, area and length agreement of two binary masks, and their
/// product.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cal {
    pub c: f64,
    pub a: f64,
    pub l: f64,
    pub f: f64,
}

impl Cal {
    pub fn new(c: f64, a: f64, l: f64) -> Self {
        Cal {
            c,
            a,
            l,
            f: c * a * l,
        }
    }
}

/// CAL of a binary prediction against binary ground truth. `None` when the
/// ground truth is empty or both skeletons are.
///
/// - `C = 1 − min(1, |#cc(pred) − #cc(gt)| / |gt|)`, 8-connected components
/// - `A = |δ(pred) ∩ gt ∪ pred ∩ δ(gt)| / |pred ∪ gt|`
/// - `L = |sk(pred) ∩ δ(gt) ∪ δ(pred) ∩ sk(gt)| / |sk(pred) ∪ sk(gt)|`
///
/// with δ dilation by a radius-2 disc and sk Zhang–Suen thinning.
pub fn cal_metrics(pred: &Tensor, gt: &Tensor) -> Result<Option<Cal>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    cal_masks(&Mask::from_binary(pred)?, &Mask::from_binary(gt)?)
}

pub fn cal_masks(pred: &Mask, gt: &Mask) -> Result<Option<Cal>> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::shape("prediction and ground truth extents differ"));
    }
    let gt_pixels = gt.count();
    if gt_pixels == 0 {
        return Ok(None);
    }
    let cc_diff = count_components(pred).abs_diff(count_components(gt));
    let c = 1.0 - (cc_diff as f64 / gt_pixels as f64).min(1.0);
    let (dp, dg) = (dilate_disc(pred, CAL_RADIUS), dilate_disc(gt, CAL_RADIUS));
    let a = dp.and(gt).or(&pred.and(&dg)).count() as f64 / pred.or(gt).count() as f64;
    let (sp, sg) = (skeletonize(pred), skeletonize(gt));
    let skel = sp.or(&sg).count();
    if skel == 0 {
        return Ok(None);
    }
    let l = sp.and(&dg).or(&dp.and(&sg)).count() as f64 / skel as f64;
    Ok(Some(Cal::new(c, a, l)))
}

/// One sample's metrics, or the pooled metrics of a set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    pub f1: Option<f64>,
    pub pre: Option<f64>,
    pub rec: Option<f64>,
    pub auroc: Option<f64>,
    pub mcc: Option<f64>,
    pub c: Option<f64>,
    pub a: Option<f64>,
    pub l: Option<f64>,
    pub f: Option<f64>,
}

impl MetricsReport {
    pub fn new(conf: Confusion, auroc: Option<f64>, cal: Option<Cal>) -> Self {
        MetricsReport {
            tp: conf.tp,
            tn: conf.tn,
            fp: conf.fp,
            fn_: conf.fn_,
            se: conf.sensitivity(),
            sp: conf.specificity(),
            acc: conf.accuracy(),
            f1: conf.f1(),
            pre: conf.precision(),
            rec: conf.sensitivity(),
            auroc,
            mcc: conf.mcc(),
            c: cal.map(|v| v.c),
            a: cal.map(|v| v.a),
            l: cal.map(|v| v.l),
            f: cal.map(|v| v.f),
        }
    }

    pub fn confusion(&self) -> Confusion {
        Confusion {
            tp: self.tp,
            tn: self.tn,
            fp: self.fp,
            fn_: self.fn_,
        }
    }

    /// Aligned two-column text table.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("TP", self.tp.to_string()),
            ("TN", self.tn.to_string()),
            ("FP", self.fp.to_string()),
            ("FN", self.fn_.to_string()),
            ("Se", fmt(self.se)),
            ("Sp", fmt(self.sp)),
            ("Acc", fmt(self.acc)),
            ("Pre", fmt(self.pre)),
            ("F1", fmt(self.f1)),
            ("AUROC", fmt(self.auroc)),
            ("Mcc", fmt(self.mcc)),
            ("C", fmt(self.c)),
            ("A", fmt(self.a)),
            ("L", fmt(self.l)),
            ("F", fmt(self.f)),
        ];
        rows.iter()
            .map(|(k, v)| format!("{k:<6} {v:>10}\n"))
            .collect()
    }
}

/// Scores, binary labels and field of view of one image.
pub struct Scored<'a> {
    pub scores: &'a [f64],
    pub labels: &'a [f64],
    pub fov: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl Scored<'_> {
    fn cal(&self, threshold: f64) -> Result<Option<Cal>> {
        let bin = |v: &[f64], f: &dyn Fn(f64) -> bool| -> Mask {
            Mask {
                height: self.height,
                width: self.width,
                data: v
                    .iter()
                    .zip(self.fov)
                    .map(|(&x, &m)| m != 0.0 && f(x))
                    .collect(),
            }
        };
        let pred = bin(self.scores, &|s| s >= threshold);
        let gt = bin(self.labels, &|y| y != 0.0);
        cal_masks(&pred, &gt)
    }

    /// Metrics of this image alone.
    pub fn report(&self, threshold: f64) -> Result<MetricsReport> {
        let conf = Confusion::from_scores(self.scores, self.labels, self.fov, threshold);
        let (s, y) = self.in_fov();
        Ok(MetricsReport::new(
            conf,
            auroc(&s, &y),
            self.cal(threshold)?,
        ))
    }

    fn in_fov(&self) -> (Vec<f64>, Vec<bool>) {
        self.scores
            .iter()
            .zip(self.labels)
            .zip(self.fov)
            .filter(|(_, &f)| f != 0.0)
            .map(|((&s, &y), _)| (s, y != 0.0))
            .unzip()
    }
}

/// Pooled metrics of a set: confusion counts and AUROC over every FOV
/// pixel of every image; C, A and L are per-image means over images where
/// they are defined, and F is their product.
pub fn pooled_report(images: &[Scored<'_>], threshold: f64) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::contract("evaluation needs at least one image"));
    }
    let mut conf = Confusion::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let (mut sum, mut defined) = ([0.0; 3], 0usize);
    for img in images {
        conf.merge(&Confusion::from_scores(
            img.scores, img.labels, img.fov, threshold,
        ));
        let (s, y) = img.in_fov();
        scores.extend(s);
        labels.extend(y);
        if let Some(cal) = img.cal(threshold)? {
            sum[0] += cal.c;
            sum[1] += cal.a;
            sum[2] += cal.l;
            defined += 1;
        }
    }
    let cal = (defined > 0).then(|| {
        let n = defined as f64;
        Cal::new(sum[0] / n, sum[1] / n, sum[2] / n)
    });
    Ok(MetricsReport::new(conf, auroc(&scores, &labels), cal))
}
