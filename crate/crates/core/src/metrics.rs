//! Region and boundary scores for binary masks, and their aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Thresholds reported as `prec@X`.
pub const PREC_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// `0.50, 0.55, …, 0.95`.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Input(format!("{} bits for a {height}×{width} mask", bits.len())));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Nonzero entries of a `[H×W]` or `[1×H×W]` tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [h, w] | [1, h, w] => (*h, *w),
            s => return Err(Error::Input(format!("expected a [H,W] or [1,H,W] mask, got {s:?}"))),
        };
        Self::new(h, w, t.data().iter().map(|&v| v != T::zero()).collect())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec([1, self.height, self.width], data).expect("shape matches bits")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mean `(y, x)` of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sy, mut sx) = (0usize, 0usize);
        for (i, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            sy += i / self.width;
            sx += i % self.width;
        }
        Some((sy as f64 / n as f64, sx as f64 / n as f64))
    }

    /// Set pixels with a 4-neighbor outside the mask or on the image border.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y + 1 == h
                    || x + 1 == w
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                if edge {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::DimMismatch {
                op: "mask comparison",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        Ok(())
    }
}

/// `(|pred ∧ gt|, |pred ∨ gt|)`.
pub fn overlap(pred: &BinaryMask, gt: &BinaryMask) -> Result<(usize, usize)> {
    pred.check_same(gt)?;
    let (mut i, mut u) = (0, 0);
    for (&a, &b) in pred.bits.iter().zip(&gt.bits) {
        i += (a && b) as usize;
        u += (a || b) as usize;
    }
    Ok((i, u))
}

/// Intersection over union; 1 when both masks are empty.
pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (i, u) = overlap(pred, gt)?;
    Ok(ratio(i, u))
}

fn ratio(i: usize, u: usize) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// `ceil(0.8%` of the image diagonal`)`.
pub fn default_tolerance(height: usize, width: usize) -> f64 {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

/// Boundary precision, recall and F at Euclidean tolerance `tol`.
/// An empty boundary on one side scores precision 1 / recall 0 (or the
/// reverse); both empty scores 1.
pub fn boundary_f(pred: &BinaryMask, gt: &BinaryMask, tol: f64) -> Result<BoundaryScore> {
    pred.check_same(gt)?;
    let bp = pred.boundary();
    let bg = gt.boundary();
    let (precision, recall) = match (bp.is_empty(), bg.is_empty()) {
        (true, true) => (1.0, 1.0),
        (true, false) => (1.0, 0.0),
        (false, true) => (0.0, 1.0),
        (false, false) => {
            let pm = matched(&bp, gt, tol);
            let gm = matched(&bg, pred, tol);
            (pm as f64 / bp.len() as f64, gm as f64 / bg.len() as f64)
        }
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BoundaryScore { precision, recall, f })
}

/// Points of `points` within `tol` of some boundary pixel of `other`.
fn matched(points: &[(usize, usize)], other: &BinaryMask, tol: f64) -> usize {
    let (h, w) = (other.height, other.width);
    let mut is_edge = vec![false; h * w];
    for (y, x) in other.boundary() {
        is_edge[y * w + x] = true;
    }
    let r = tol.floor().max(0.0) as isize;
    let tol2 = tol * tol;
    points
        .iter()
        .filter(|&&(y, x)| {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dy * dy + dx * dx) as f64) > tol2 {
                        continue;
                    }
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && is_edge[yy as usize * w + xx as usize] {
                        return true;
                    }
                }
            }
            false
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub intersection: usize,
    pub union: usize,
    pub iou: f64,
    pub boundary: BoundaryScore,
}

impl SampleEval {
    /// Scores one prediction; `tol` defaults to [`default_tolerance`].
    pub fn new(pred: &BinaryMask, gt: &BinaryMask, tol: Option<f64>) -> Result<Self> {
        let (intersection, union) = overlap(pred, gt)?;
        let tol = tol.unwrap_or_else(|| default_tolerance(gt.height, gt.width));
        Ok(Self {
            intersection,
            union,
            iou: ratio(intersection, union),
            boundary: boundary_f(pred, gt, tol)?,
        })
    }

    /// A sample known only by its counts, with a perfect boundary score.
    pub fn from_counts(intersection: usize, union: usize) -> Result<Self> {
        if intersection > union {
            return Err(Error::Input(format!("intersection {intersection} exceeds union {union}")));
        }
        Ok(Self {
            intersection,
            union,
            iou: ratio(intersection, union),
            boundary: BoundaryScore {
                precision: 1.0,
                recall: 1.0,
                f: 1.0,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "prec@0.5")]
    pub prec_50: f64,
    #[serde(rename = "prec@0.6")]
    pub prec_60: f64,
    #[serde(rename = "prec@0.7")]
    pub prec_70: f64,
    #[serde(rename = "prec@0.8")]
    pub prec_80: f64,
    #[serde(rename = "prec@0.9")]
    pub prec_90: f64,
    pub map_50_95: f64,
    pub overall_iou: f64,
    pub mean_iou: f64,
    pub mean_f: f64,
    pub jf_mean: f64,
}

impl MetricReport {
    pub fn precisions(&self) -> [f64; 5] {
        [self.prec_50, self.prec_60, self.prec_70, self.prec_80, self.prec_90]
    }

    /// Fixed-width table: precision columns, mAP, overall and mean IoU, then
    /// the video scores.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let head = ["P@0.5", "P@0.6", "P@0.7", "P@0.8", "P@0.9", "mAP", "Overall", "Mean", "J", "F", "J&F"];
        let vals = [
            self.prec_50,
            self.prec_60,
            self.prec_70,
            self.prec_80,
            self.prec_90,
            self.map_50_95,
            self.overall_iou,
            self.mean_iou,
            self.mean_iou,
            self.mean_f,
            self.jf_mean,
        ];
        for h in head {
            let _ = write!(s, "{h:>8}");
        }
        s.push('\n');
        for v in vals {
            let _ = write!(s, "{:>8.1}", 100.0 * v);
        }
        s.push('\n');
        s
    }
}

fn count_above(samples: &[SampleEval], threshold: f64) -> usize {
    samples.iter().filter(|s| s.iou > threshold).count()
}

fn fraction_above(samples: &[SampleEval], threshold: f64) -> f64 {
    count_above(samples, threshold) as f64 / samples.len() as f64
}

pub fn aggregate(samples: &[SampleEval]) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to aggregate".into()));
    }
    let n = samples.len() as f64;
    let [p5, p6, p7, p8, p9] = PREC_THRESHOLDS.map(|t| fraction_above(samples, t));
    // one division keeps map exactly comparable with prec@0.5
    let passes: usize = map_thresholds().iter().map(|&t| count_above(samples, t)).sum();
    let map = passes as f64 / (10 * samples.len()) as f64;
    let (si, su) = samples.iter().fold((0, 0), |(i, u), s| (i + s.intersection, u + s.union));
    let mean_iou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
    let mean_f = samples.iter().map(|s| s.boundary.f).sum::<f64>() / n;
    Ok(MetricReport {
        prec_50: p5,
        prec_60: p6,
        prec_70: p7,
        prec_80: p8,
        prec_90: p9,
        map_50_95: map,
        overall_iou: ratio(si, su),
        mean_iou,
        mean_f,
        jf_mean: (mean_iou + mean_f) / 2.0,
    })
}
