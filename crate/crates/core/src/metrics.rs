//! Segmentation metrics and the soft Jaccard loss.
//!
//! J mean and mIoU are both the arithmetic mean of per-image IoU; they
//! coincide because evaluation is per image rather than per sequence.

use thiserror::Error;

/// Denominator guard of the soft Jaccard loss.
pub const JACCARD_EPS: f64 = 1e-6;
/// Boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOLERANCE_FRACTION: f64 = 0.008;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("mask of {h}x{w} needs {expected} values, got {got}")]
    Length {
        h: usize,
        w: usize,
        expected: usize,
        got: usize,
    },
    #[error("mask value {0} is outside [0, 1]")]
    Value(f32),
    #[error("no mask pairs to evaluate")]
    Empty,
}

/// Row-major single-channel mask with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    h: usize,
    w: usize,
    values: Vec<f32>,
}

impl Mask {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self, MetricError> {
        if values.len() != h * w {
            return Err(MetricError::Length {
                h,
                w,
                expected: h * w,
                got: values.len(),
            });
        }
        if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(MetricError::Value(v));
        }
        Ok(Mask { h, w, values })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..h * w)
            .map(|i| if f(i / w, i % w) { 1.0 } else { 0.0 })
            .collect();
        Mask { h, w, values }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Mask {
            h,
            w,
            values: vec![0.0; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn binarize(&self, threshold: f32) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    fn same_shape(&self, o: &Mask) -> Result<(), MetricError> {
        if self.h != o.h || self.w != o.w {
            return Err(MetricError::ShapeMismatch(self.h, self.w, o.h, o.w));
        }
        Ok(())
    }

    /// Default boundary tolerance: 0.8% of the diagonal, rounded.
    pub fn default_tolerance(&self) -> usize {
        let diag = ((self.h * self.h + self.w * self.w) as f64).sqrt();
        (BOUNDARY_TOLERANCE_FRACTION * diag).round() as usize
    }
}

/// Intersection over union after binarising `pred` at `threshold` (and `gt` at 0.5).
/// Two empty masks score 1.
pub fn iou(pred: &Mask, gt: &Mask, threshold: f32) -> Result<f64, MetricError> {
    pred.same_shape(gt)?;
    let p = pred.binarize(threshold);
    let g = gt.binarize(0.5);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in p.iter().zip(&g) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> Result<f64, MetricError> {
    let n = values.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    Ok(values.sum::<f64>() / n as f64)
}

/// Mean per-image IoU (region similarity).
pub fn j_mean(pairs: &[(Mask, Mask)], threshold: f32) -> Result<f64, MetricError> {
    let ious = pairs
        .iter()
        .map(|(p, g)| iou(p, g, threshold))
        .collect::<Result<Vec<_>, _>>()?;
    mean(ious.into_iter())
}

/// Identical to [`j_mean`] under per-image evaluation.
pub fn miou(pairs: &[(Mask, Mask)], threshold: f32) -> Result<f64, MetricError> {
    j_mean(pairs, threshold)
}

/// Foreground pixels with at least one 4-neighbour that is background or outside the image.
pub fn boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |y: isize, x: isize| -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < h
            && (x as usize) < w
            && mask[y as usize * w + x as usize]
    };
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            mask[i] && !(at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1))
        })
        .collect()
}

/// Square (Chebyshev) dilation by `r` pixels, separable.
fn dilate(b: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return b.to_vec();
    }
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = (lo..=hi).any(|xx| b[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Boundary precision/recall/F at a pixel tolerance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn boundary_score(
    pred: &Mask,
    gt: &Mask,
    tolerance_px: usize,
) -> Result<BoundaryScore, MetricError> {
    pred.same_shape(gt)?;
    let (h, w) = (gt.h, gt.w);
    let bp = boundary(&pred.binarize(0.5), h, w);
    let bg = boundary(&gt.binarize(0.5), h, w);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(BoundaryScore {
            precision: 1.0,
            recall: 1.0,
            f: 1.0,
        });
    }
    let near_g = dilate(&bg, h, w, tolerance_px);
    let near_p = dilate(&bp, h, w, tolerance_px);
    let matched_p = bp.iter().zip(&near_g).filter(|(&a, &b)| a && b).count();
    let matched_g = bg.iter().zip(&near_p).filter(|(&a, &b)| a && b).count();
    let precision = if np == 0 {
        0.0
    } else {
        matched_p as f64 / np as f64
    };
    let recall = if ng == 0 {
        0.0
    } else {
        matched_g as f64 / ng as f64
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BoundaryScore {
        precision,
        recall,
        f,
    })
}

/// Boundary F-measure (contour accuracy) of one pair.
pub fn f_measure(pred: &Mask, gt: &Mask, tolerance_px: usize) -> Result<f64, MetricError> {
    Ok(boundary_score(pred, gt, tolerance_px)?.f)
}

/// Mean boundary F over pairs; `None` uses each image's default tolerance.
pub fn f_mean(pairs: &[(Mask, Mask)], tolerance_px: Option<usize>) -> Result<f64, MetricError> {
    let fs = pairs
        .iter()
        .map(|(p, g)| f_measure(p, g, tolerance_px.unwrap_or_else(|| g.default_tolerance())))
        .collect::<Result<Vec<_>, _>>()?;
    mean(fs.into_iter())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub iou: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub j_mean: f64,
    pub f_mean: f64,
    pub samples: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn to_text(&self, names: &[String]) -> String {
        let mut s = String::from("sample,iou,f\n");
        for (i, m) in self.samples.iter().enumerate() {
            let name = names.get(i).cloned().unwrap_or_else(|| i.to_string());
            s.push_str(&format!("{name},{:.6},{:.6}\n", m.iou, m.f));
        }
        s.push_str(&format!(
            "# miou={:.6} j_mean={:.6} f_mean={:.6} n={}\n",
            self.miou,
            self.j_mean,
            self.f_mean,
            self.samples.len()
        ));
        s
    }
}

pub fn evaluate(
    pairs: &[(Mask, Mask)],
    threshold: f32,
    tolerance_px: Option<usize>,
) -> Result<MetricsReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let samples = pairs
        .iter()
        .map(|(p, g)| {
            Ok(SampleMetrics {
                iou: iou(p, g, threshold)?,
                f: f_measure(p, g, tolerance_px.unwrap_or_else(|| g.default_tolerance()))?,
            })
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let j = mean(samples.iter().map(|s| s.iou))?;
    Ok(MetricsReport {
        miou: j,
        j_mean: j,
        f_mean: mean(samples.iter().map(|s| s.f))?,
        samples,
    })
}

/// `1 - sum(p*g) / (sum(p) + sum(g) - sum(p*g) + eps)`.
///
/// # Panics
/// If `pred` and `gt` differ in length.
pub fn jaccard_loss(pred: &[f64], gt: &[f64]) -> f64 {
    let (inter, union) = soft_terms(pred, gt);
    1.0 - inter / union
}

/// Closed-form gradient of [`jaccard_loss`] with respect to each prediction.
///
/// With `I = sum(p*g)` and `U = sum(p) + sum(g) - I + eps`,
/// `dL/dp_i = -(g_i * U - I * (1 - g_i)) / U^2`.
pub fn jaccard_grad(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let (inter, union) = soft_terms(pred, gt);
    let u2 = union * union;
    gt.iter()
        .map(|&g| -(g * union - inter * (1.0 - g)) / u2)
        .collect()
}

fn soft_terms(pred: &[f64], gt: &[f64]) -> (f64, f64) {
    assert_eq!(pred.len(), gt.len(), "prediction and target lengths differ");
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in pred.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    (inter, sp + sg - inter + JACCARD_EPS)
}
