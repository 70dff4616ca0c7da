//! Metrics: part centers, bias-free landmark regression and its error,
//! foreground IoU and keypoint MAE.
//!
//! Pixel convention: pixel `(row v, col u)` has its center at `(u, v)` in
//! pixel units and at `x = (2u + 1) / W - 1` in normalized units.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::fields::MarginGrid;
use crate::nn_util::{to_vec_f64, to_vec_i64};

pub fn normalized_to_pixels(x: f64, size: usize) -> f64 {
    ((x + 1.0) * size as f64 - 1.0) / 2.0
}

pub fn pixels_to_normalized(u: f64, size: usize) -> f64 {
    (2.0 * u + 1.0) / size as f64 - 1.0
}

/// Part centers with a flag for parts that had no mass.
#[derive(Debug)]
pub struct PartCenters {
    /// `[B, K, 2]`, normalized `(x, y)`; missing parts sit at the image center `(0, 0)`.
    pub centers: Tensor,
    /// `[B, K]`, true where the part was empty.
    pub missing: Tensor,
}

impl PartCenters {
    pub fn missing_count(&self) -> i64 {
        self.missing.sum(Kind::Int64).int64_value(&[])
    }

    /// Row-per-sample matrix `[x1, y1, x2, y2, ...]` in pixel units.
    pub fn to_pixel_matrix(&self, size: usize) -> DMatrix<f64> {
        let s = self.centers.size();
        let (b, k) = (s[0] as usize, s[1] as usize);
        let v = to_vec_f64(&self.centers);
        DMatrix::from_fn(b, 2 * k, |i, j| normalized_to_pixels(v[i * 2 * k + j], size))
    }
}

/// Centers of mass of soft part masks `[B, K, H, W]` (background excluded).
pub fn part_centers(part_masks: &Tensor) -> Result<PartCenters> {
    let s = part_masks.size();
    if s.len() != 4 {
        return Err(Error::Shape(format!("part masks must be [B, K, H, W], got {s:?}")));
    }
    let grid = MarginGrid::new(s[2] as usize, s[3] as usize, 0)?;
    let m = part_masks.to_kind(Kind::Double);
    let coords = grid.coords(Kind::Double, m.device());
    let mass = m.sum_dim_intlist(&[2i64, 3][..], false, Kind::Double);
    let missing = mass.le(1e-12);
    let weighted = Tensor::einsum("bkhw,hwc->bkc", &[&m, &coords], None::<i64>);
    let centers = (weighted / mass.clamp_min(1e-12).unsqueeze(-1)).where_self(&missing.logical_not().unsqueeze(-1), &Tensor::zeros([], (Kind::Double, m.device())));
    Ok(PartCenters { centers, missing })
}

/// Centers of the label regions `1..=k` of hard label maps `[B, H, W]`.
pub fn label_centers(labels: &Tensor, k: usize) -> Result<PartCenters> {
    if labels.dim() != 3 {
        return Err(Error::Shape(format!("labels must be [B, H, W], got {:?}", labels.size())));
    }
    let one_hot = labels.to_kind(Kind::Int64).clamp(0, k as i64).one_hot(k as i64 + 1).permute([0, 3, 1, 2]);
    part_centers(&one_hot.narrow(1, 1, k as i64).to_kind(Kind::Double))
}

/// Least-squares map without intercept.
#[derive(Debug, Clone)]
pub struct RegressionFit {
    /// `2K x 2L`.
    pub weights: DMatrix<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl RegressionFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.weights
    }
}

/// Minimizes `|XW - Y|_F` through an SVD; rank-deficient `X` gives the minimum-norm solution.
pub fn landmark_regression_fit(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<RegressionFit> {
    if x.nrows() != y.nrows() {
        return Err(Error::Eval(format!("{} center rows vs {} keypoint rows", x.nrows(), y.nrows())));
    }
    if x.nrows() < x.ncols() {
        return Err(Error::Eval(format!("{} samples cannot determine {} regression inputs", x.nrows(), x.ncols())));
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * x.nrows().max(x.ncols()) as f64;
    let rank = svd.rank(tol);
    let weights = svd.solve(y, tol).map_err(|e| Error::Eval(e.to_string()))?;
    let rank_deficient = rank < x.ncols();
    if rank_deficient {
        log::warn!("landmark regression inputs have rank {rank} < {}; using the minimum-norm solution", x.ncols());
    }
    Ok(RegressionFit { weights, rank, rank_deficient })
}

fn check_same(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<()> {
    if pred.shape() != gt.shape() || pred.ncols() % 2 != 0 {
        return Err(Error::Eval(format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape())));
    }
    if pred.nrows() == 0 {
        return Err(Error::Eval("no samples".into()));
    }
    Ok(())
}

/// Per-sample mean over keypoints of `|pred - gt| / normalizer`, in percent.
pub fn landmark_errors(pred: &DMatrix<f64>, gt: &DMatrix<f64>, normalizer: &[f64]) -> Result<Vec<f64>> {
    check_same(pred, gt)?;
    if normalizer.len() != pred.nrows() || normalizer.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::Eval("one positive normalizer per sample is required".into()));
    }
    let l = pred.ncols() / 2;
    Ok((0..pred.nrows())
        .map(|i| {
            let total: f64 = (0..l)
                .map(|j| {
                    let dx = pred[(i, 2 * j)] - gt[(i, 2 * j)];
                    let dy = pred[(i, 2 * j + 1)] - gt[(i, 2 * j + 1)];
                    dx.hypot(dy) / normalizer[i]
                })
                .sum();
            100.0 * total / l as f64
        })
        .collect())
}

/// Mean landmark error in percent of the per-sample normalizer (e.g. inter-ocular distance).
pub fn landmark_error(pred: &DMatrix<f64>, gt: &DMatrix<f64>, normalizer: &[f64]) -> Result<f64> {
    let per = landmark_errors(pred, gt, normalizer)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Per-sample sum of keypoint distances (pixels), averaged over samples.
pub fn keypoint_mae(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64> {
    check_same(pred, gt)?;
    let l = pred.ncols() / 2;
    let total: f64 = (0..pred.nrows())
        .map(|i| {
            (0..l)
                .map(|j| (pred[(i, 2 * j)] - gt[(i, 2 * j)]).hypot(pred[(i, 2 * j + 1)] - gt[(i, 2 * j + 1)]))
                .sum::<f64>()
        })
        .sum();
    Ok(total / pred.nrows() as f64)
}

/// `|pred_fg & gt_fg| / |pred_fg | gt_fg|` for one image; predicted foreground is `label != 0`.
/// Two empty masks count as a perfect match.
pub fn foreground_iou(pred_labels: &Tensor, gt_fg: &Tensor) -> Result<f64> {
    if pred_labels.size() != gt_fg.size() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred_labels.size(), gt_fg.size())));
    }
    let p = pred_labels.ne(0);
    let g = gt_fg.to_kind(Kind::Bool);
    let inter = p.logical_and(&g).sum(Kind::Int64).int64_value(&[]);
    let union = p.logical_or(&g).sum(Kind::Int64).int64_value(&[]);
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-image IoUs for batches `[N, H, W]`.
pub fn foreground_ious(pred_labels: &Tensor, gt_fg: &Tensor) -> Result<Vec<f64>> {
    if pred_labels.dim() != 3 {
        return Err(Error::Shape(format!("expected [N, H, W], got {:?}", pred_labels.size())));
    }
    (0..pred_labels.size()[0]).map(|i| foreground_iou(&pred_labels.get(i), &gt_fg.get(i))).collect()
}

/// One metric in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn new(metric: &str, per_sample: Vec<f64>, config_hash: &str) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Eval(format!("{metric}: no samples")));
        }
        let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        if !value.is_finite() {
            return Err(Error::Eval(format!("{metric} is not finite")));
        }
        Ok(Self { metric: metric.into(), value, n_samples: per_sample.len(), config_hash: config_hash.into(), per_sample: Some(per_sample) })
    }

    pub fn summary(&self) -> String {
        format!("{}: {:.6} (n = {})", self.metric, self.value, self.n_samples)
    }
}

/// How landmark errors are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkNorm {
    /// Image diagonal.
    Diagonal,
    /// Distance between two ground-truth keypoints (0-based indices), e.g. the eyes.
    Interocular(usize, usize),
}

/// Predicted labels plus optional soft part scores for the images of a ground-truth collection.
pub struct Predictions {
    /// `[N, H, W]`, values in `0..=K`.
    pub labels: Tensor,
    /// `[N, K + 1, H, W]`; label regions are used for centers when absent.
    pub probs: Option<Tensor>,
    pub num_parts: usize,
}

/// Foreground IoU, landmark error and keypoint MAE of `pred` against `gt`.
///
/// The regression is fitted on the first `train_fraction` of the samples and
/// scored on the rest (on all samples when the split leaves either side too small).
pub fn evaluate(pred: &Predictions, gt: &Dataset, train_fraction: f64, norm: LandmarkNorm, config_hash: &str) -> Result<Vec<MetricReport>> {
    let n = gt.len();
    if pred.labels.size()[0] as usize != n {
        return Err(Error::Eval(format!("{} predictions for {n} images", pred.labels.size()[0])));
    }
    let mut reports = Vec::new();
    if let Some(fg) = gt.foreground() {
        reports.push(MetricReport::new("foreground_iou", foreground_ious(&pred.labels, &fg)?, config_hash)?);
    }
    let Some(kps) = &gt.keypoints else { return Ok(reports) };
    let size = gt.resolution();
    let centers = match &pred.probs {
        Some(p) => part_centers(&p.narrow(1, 1, pred.num_parts as i64))?,
        None => label_centers(&pred.labels, pred.num_parts)?,
    };
    if centers.missing_count() > 0 {
        log::warn!("{} empty predicted parts imputed at the image center", centers.missing_count());
    }
    let x = centers.to_pixel_matrix(size);
    let l = kps.size()[1] as usize;
    let kv = to_vec_f64(kps);
    let y = DMatrix::from_fn(n, 2 * l, |i, j| kv[i * 2 * l + j]);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let (train, test) = if n_train >= x.ncols() && n_train < n { ((0, n_train), (n_train, n)) } else { ((0, n), (0, n)) };
    let fit = landmark_regression_fit(&x.rows(train.0, train.1 - train.0).into_owned(), &y.rows(train.0, train.1 - train.0).into_owned())?;
    let x_test = x.rows(test.0, test.1 - test.0).into_owned();
    let y_test = y.rows(test.0, test.1 - test.0).into_owned();
    let pred_kps = fit.predict(&x_test);
    let normalizer: Vec<f64> = (0..y_test.nrows())
        .map(|i| match norm {
            LandmarkNorm::Diagonal => size as f64 * 2f64.sqrt(),
            LandmarkNorm::Interocular(a, b) => {
                (y_test[(i, 2 * a)] - y_test[(i, 2 * b)]).hypot(y_test[(i, 2 * a + 1)] - y_test[(i, 2 * b + 1)])
            }
        })
        .collect();
    reports.push(MetricReport::new("landmark_error_percent", landmark_errors(&pred_kps, &y_test, &normalizer)?, config_hash)?);
    let mae: Vec<f64> = (0..y_test.nrows())
        .map(|i| keypoint_mae(&pred_kps.rows(i, 1).into_owned(), &y_test.rows(i, 1).into_owned()))
        .collect::<Result<_>>()?;
    reports.push(MetricReport::new("keypoint_mae_px", mae, config_hash)?);
    Ok(reports)
}

/// Class histogram of a label tensor, for sanity checks on synthesized pairs.
pub fn label_histogram(labels: &Tensor, num_classes: usize) -> Vec<f64> {
    let v = to_vec_i64(labels);
    let mut h = vec![0.0; num_classes];
    for l in &v {
        if let Some(slot) = h.get_mut(*l as usize) {
            *slot += 1.0;
        }
    }
    let total = v.len().max(1) as f64;
    h.iter().map(|c| c / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    const D: (Kind, Device) = (Kind::Double, Device::Cpu);

    #[test]
    fn centers_of_points_and_pairs() {
        let m = Tensor::zeros([1, 2, 4, 4], D);
        let _ = m.get(0).get(0).get(1).get(2).fill_(1.0);
        let _ = m.get(0).get(1).get(0).get(0).fill_(1.0);
        let _ = m.get(0).get(1).get(0).get(2).fill_(1.0);
        let c = part_centers(&m).unwrap();
        let v = to_vec_f64(&c.centers);
        assert_eq!(v, vec![pixels_to_normalized(2.0, 4), pixels_to_normalized(1.0, 4), pixels_to_normalized(1.0, 4), pixels_to_normalized(0.0, 4)]);
        assert_eq!(c.missing_count(), 0);
        let empty = part_centers(&Tensor::zeros([1, 1, 4, 4], D)).unwrap();
        assert_eq!(empty.missing_count(), 1);
        assert_eq!(to_vec_f64(&empty.centers), vec![0.0, 0.0]);
    }

    #[test]
    fn pixel_conversion_round_trip() {
        for u in [0.0, 3.5, 63.0] {
            assert!((normalized_to_pixels(pixels_to_normalized(u, 64), 64) - u).abs() < 1e-12);
        }
        assert_eq!(pixels_to_normalized(0.0, 2), -0.5);
    }

    #[test]
    fn regression_identity_and_guard() {
        let x = DMatrix::from_fn(6, 2, |i, j| (i * 3 + j * 7 % 5) as f64 + if j == 1 { (i * i) as f64 } else { 0.0 });
        let fit = landmark_regression_fit(&x, &x).unwrap();
        assert!((fit.weights.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-10);
        assert!(landmark_regression_fit(&x.rows(0, 1).into_owned(), &x.rows(0, 1).into_owned()).is_err());
        let deficient = DMatrix::from_fn(4, 2, |i, _| i as f64 + 1.0);
        let fit = landmark_regression_fit(&deficient, &deficient.columns(0, 1).into_owned()).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.weights[(0, 0)] - 0.5).abs() < 1e-10 && (fit.weights[(1, 0)] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn error_values() {
        let gt = DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 10.0, 0.0]);
        let pred = DMatrix::from_row_slice(1, 4, &[0.5, 0.0, 10.0, 1.5]);
        assert!((landmark_error(&pred, &gt, &[10.0]).unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(landmark_error(&gt, &gt, &[1.0]).unwrap(), 0.0);
        let one = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(keypoint_mae(&one, &DMatrix::zeros(1, 2)).unwrap(), 5.0);
        assert!(landmark_error(&pred, &gt, &[0.0]).is_err());
    }

    #[test]
    fn iou_cases() {
        let gt = Tensor::from_slice(&[1i64, 1, 1, 1, 0, 0]).view([2, 3]).to_kind(Kind::Bool);
        let same = Tensor::from_slice(&[2i64, 1, 1, 1, 0, 0]).view([2, 3]);
        assert_eq!(foreground_iou(&same, &gt).unwrap(), 1.0);
        let half = Tensor::from_slice(&[1i64, 2, 0, 0, 0, 0]).view([2, 3]);
        assert_eq!(foreground_iou(&half, &gt).unwrap(), 0.5);
        let disjoint = Tensor::from_slice(&[0i64, 0, 0, 0, 3, 3]).view([2, 3]);
        assert_eq!(foreground_iou(&disjoint, &gt).unwrap(), 0.0);
    }
}
