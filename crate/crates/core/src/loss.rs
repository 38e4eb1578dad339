//! Loss functions with analytical gradients.
//!
//! Covers plain softmax cross-entropy, additive-margin softmax over cosine
//! logits (with an additive-angular variant), center loss, and the
//! fixed-centroid pair: the margin term against frozen centroids, the
//! root-tempered centroid MSE, and their combination
//! `L = L_am + L_mse^(1/n)`.
//!
//! All cosine-space losses normalize weights and features internally and
//! report gradients with respect to the *raw* (pre-normalization) features
//! via the normalization chain rule, so callers can backpropagate straight
//! into a feature extractor. [`check_gradient`] provides the
//! central-finite-difference harness the test suites use to validate every
//! gradient path.

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::numeric::{dot, norm, Matrix, ZERO_ROW_NORM};

/// A batch of raw feature vectors with integer class labels.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl FeatureBatch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<FeatureBatch> {
        if features.rows() == 0 {
            return Err(Error::Config("feature batch must be non-empty".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "feature batch labels",
                lhs: format!("{} rows", features.rows()),
                rhs: format!("{} labels", labels.len()),
            });
        }
        Ok(FeatureBatch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn check_labels(&self, num_classes: usize) -> Result<()> {
        for (i, &y) in self.labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::DimensionMismatch {
                    context: "label range",
                    lhs: format!("label {y} at row {i}"),
                    rhs: format!("{num_classes} classes"),
                });
            }
        }
        Ok(())
    }
}

/// Where the additive margin is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginMode {
    /// Target logit becomes `cos(theta) - m`.
    AdditiveCosine,
    /// Target logit becomes `cos(theta + m)`.
    AdditiveAngular,
}

/// Scale and margin for the margin-softmax family.
#[derive(Debug, Clone, Copy)]
pub struct MarginConfig {
    pub scale_s: f64,
    pub margin_m: f64,
    pub mode: MarginMode,
}

/// Default scale for small-class desk experiments; [`MarginConfig::LARGE_SCALE`]
/// is the face-recognition setting used when class counts are large.
pub const DEFAULT_SCALE: f64 = 30.0;

impl MarginConfig {
    pub const LARGE_SCALE: f64 = 64.0;

    pub fn new(scale_s: f64, margin_m: f64, mode: MarginMode) -> Result<MarginConfig> {
        if !(scale_s > 0.0) {
            return Err(Error::Config("scale_s must be positive".into()));
        }
        if !(margin_m >= 0.0) {
            return Err(Error::Config("margin_m must be non-negative".into()));
        }
        if mode == MarginMode::AdditiveAngular && margin_m >= std::f64::consts::FRAC_PI_2 {
            return Err(Error::Config(
                "additive-angular margin must be below pi/2".into(),
            ));
        }
        Ok(MarginConfig {
            scale_s,
            margin_m,
            mode,
        })
    }

    pub fn cosine(scale_s: f64, margin_m: f64) -> Result<MarginConfig> {
        MarginConfig::new(scale_s, margin_m, MarginMode::AdditiveCosine)
    }
}

/// Scalar loss plus gradients: `grad_features` is with respect to the raw
/// input features; `grad_weights` is present only when the weight side is
/// trainable for the operation that produced it.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_weights: Option<Matrix>,
}

/// Moving class centers for center loss.
#[derive(Debug, Clone)]
pub struct CenterState {
    pub centers: Matrix,
    pub update_rate: f64,
}

impl CenterState {
    pub fn new(centers: Matrix, update_rate: f64) -> Result<CenterState> {
        if !(update_rate > 0.0 && update_rate <= 1.0) {
            return Err(Error::Config("update_rate must be in (0, 1]".into()));
        }
        Ok(CenterState {
            centers,
            update_rate,
        })
    }

    pub fn zeros(num_classes: usize, dim: usize, update_rate: f64) -> Result<CenterState> {
        CenterState::new(Matrix::zeros(num_classes, dim), update_rate)
    }
}

/// Mean negative log-likelihood of a linear classifier `z = X W^T (+ b)`.
///
/// Gradients are analytical: `grad_features = G W` and `grad_weights = G^T X`
/// with `G = (softmax(z) - onehot) / n`. The optional bias contributes to the
/// forward value only; it is held fixed.
pub fn softmax_ce(
    batch: &FeatureBatch,
    weights: &Matrix,
    bias: Option<&[f64]>,
) -> Result<LossResult> {
    let c = weights.rows();
    batch.check_labels(c)?;
    if batch.features.cols() != weights.cols() {
        return Err(Error::DimensionMismatch {
            context: "softmax_ce",
            lhs: format!("{} feature dims", batch.features.cols()),
            rhs: format!("{} weight dims", weights.cols()),
        });
    }
    if let Some(b) = bias {
        if b.len() != c {
            return Err(Error::DimensionMismatch {
                context: "softmax_ce bias",
                lhs: format!("{} entries", b.len()),
                rhs: format!("{c} classes"),
            });
        }
    }
    let mut logits = batch.features.times_transpose(weights)?;
    if let Some(b) = bias {
        for i in 0..logits.rows() {
            for (v, bj) in logits.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    let (value, grad_logits) = nll_and_grad(&logits, &batch.labels);
    // grad_features = G W: (n x c) * (c x d).
    let grad_features = grad_logits.times_transpose(&transpose(weights))?;
    let grad_weights = grad_logits.transpose_times(&batch.features)?;
    Ok(LossResult {
        value,
        grad_features,
        grad_weights: Some(grad_weights),
    })
}

fn transpose(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            out.set(j, i, m.get(i, j));
        }
    }
    out
}

/// Mean NLL over rows of `logits` plus its gradient, with row-max
/// subtraction inside the exponentials so large scales stay finite.
fn nll_and_grad(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let inv_n = 1.0 / n as f64;
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[labels[i]];
        let g = grad.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            g[j] = ((v - max).exp() / sum) * inv_n;
        }
        g[labels[i]] -= inv_n;
    }
    (total * inv_n, grad)
}

fn normalized_with_norms(m: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..out.rows() {
        let n = norm(out.row(i));
        if n < ZERO_ROW_NORM {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        let inv = 1.0 / n;
        for v in out.row_mut(i) {
            *v *= inv;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Chain the gradient w.r.t. a normalized row back to the raw row:
/// `(g - (g . unit) unit) / norm`.
fn through_normalization(g: &[f64], unit: &[f64], raw_norm: f64, out: &mut [f64]) {
    let radial = dot(g, unit);
    for ((o, &gi), &ui) in out.iter_mut().zip(g).zip(unit) {
        *o = (gi - radial * ui) / raw_norm;
    }
}

const ANGULAR_CLAMP: f64 = 1e-7;

/// Additive-margin softmax over cosine logits (weights trainable: the result
/// carries `grad_weights`).
pub fn am_softmax(
    batch: &FeatureBatch,
    weights: &Matrix,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    am_core(batch, weights, cfg, true)
}

/// Same mathematics as [`am_softmax`] with the fixed centroid matrix as the
/// weights; the frozen-weight contract means no weight gradient is produced.
pub fn pedcc_am(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    am_core(batch, &centroids.centers, cfg, false)
}

/// [`pedcc_am`] with the centroid gradient enabled for fine-tuning.
pub fn pedcc_am_finetune(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    cfg: &MarginConfig,
) -> Result<LossResult> {
    am_core(batch, &centroids.centers, cfg, true)
}

fn am_core(
    batch: &FeatureBatch,
    weights: &Matrix,
    cfg: &MarginConfig,
    weight_grad: bool,
) -> Result<LossResult> {
    let c = weights.rows();
    batch.check_labels(c)?;
    if batch.features.cols() != weights.cols() {
        return Err(Error::DimensionMismatch {
            context: "am_softmax",
            lhs: format!("{} feature dims", batch.features.cols()),
            rhs: format!("{} weight dims", weights.cols()),
        });
    }

    let (unit_x, norms_x) = normalized_with_norms(&batch.features)?;
    let (unit_w, norms_w) = normalized_with_norms(weights)?;
    let cosines = unit_x.times_transpose(&unit_w)?;

    let n = batch.len();
    let s = cfg.scale_s;
    let m = cfg.margin_m;

    // Adjusted logits and d(target logit)/d(cosine) per sample.
    let mut logits = cosines.scale(s);
    let mut target_slope = vec![1.0_f64; n];
    for (i, &y) in batch.labels.iter().enumerate() {
        let cos_t = cosines.get(i, y);
        match cfg.mode {
            MarginMode::AdditiveCosine => {
                logits.set(i, y, s * (cos_t - m));
            }
            MarginMode::AdditiveAngular => {
                let clamped = cos_t.clamp(-1.0 + ANGULAR_CLAMP, 1.0 - ANGULAR_CLAMP);
                let theta = clamped.acos();
                logits.set(i, y, s * (theta + m).cos());
                target_slope[i] = if cos_t == clamped {
                    (theta + m).sin() / theta.sin()
                } else {
                    0.0
                };
            }
        }
    }

    let (value, mut grad_logits) = nll_and_grad(&logits, &batch.labels);

    // dL/d(cosine) = dL/d(logit) * s, with the extra slope on the target.
    for i in 0..n {
        let y = batch.labels[i];
        let slope = target_slope[i];
        let g = grad_logits.row_mut(i);
        for (j, v) in g.iter_mut().enumerate() {
            *v *= s;
            if j == y {
                *v *= slope;
            }
        }
    }
    let grad_cos = grad_logits;

    let mut grad_features = Matrix::zeros(n, batch.features.cols());
    let pulled = grad_cos.times_transpose(&transpose(&unit_w))?; // G * unit_w
    for i in 0..n {
        through_normalization(
            pulled.row(i),
            unit_x.row(i),
            norms_x[i],
            grad_features.row_mut(i),
        );
    }

    let grad_weights = if weight_grad {
        let mut gw = Matrix::zeros(c, weights.cols());
        let pulled_w = grad_cos.transpose_times(&unit_x)?; // G^T * unit_x
        for j in 0..c {
            through_normalization(pulled_w.row(j), unit_w.row(j), norms_w[j], gw.row_mut(j));
        }
        Some(gw)
    } else {
        None
    };

    Ok(LossResult {
        value,
        grad_features,
        grad_weights,
    })
}

/// Center loss `0.5 * sum_i |x_i - c_{y_i}|^2` over the batch (plain sum, no
/// averaging), returning the loss and the centers moved toward their class
/// batch means by `update_rate`.
pub fn center_loss(
    batch: &FeatureBatch,
    state: &CenterState,
) -> Result<(LossResult, CenterState)> {
    let c = state.centers.rows();
    let d = state.centers.cols();
    batch.check_labels(c)?;
    if batch.features.cols() != d {
        return Err(Error::DimensionMismatch {
            context: "center_loss",
            lhs: format!("{} feature dims", batch.features.cols()),
            rhs: format!("{d} center dims"),
        });
    }

    let n = batch.len();
    let mut value = 0.0;
    let mut grad_features = Matrix::zeros(n, d);
    for i in 0..n {
        let x = batch.features.row(i);
        let center = state.centers.row(batch.labels[i]);
        let g = grad_features.row_mut(i);
        for j in 0..d {
            let diff = x[j] - center[j];
            value += 0.5 * diff * diff;
            g[j] = diff;
        }
    }

    let mut sums = Matrix::zeros(c, d);
    let mut counts = vec![0usize; c];
    for i in 0..n {
        let y = batch.labels[i];
        counts[y] += 1;
        let row = sums.row_mut(y);
        for (dst, &v) in row.iter_mut().zip(batch.features.row(i)) {
            *dst += v;
        }
    }
    let mut new_centers = state.centers.clone();
    for y in 0..c {
        if counts[y] == 0 {
            continue;
        }
        let mean_scale = 1.0 / counts[y] as f64;
        let row = new_centers.row_mut(y);
        for (dst, &sum) in row.iter_mut().zip(sums.row(y)) {
            let mean = sum * mean_scale;
            *dst += state.update_rate * (mean - *dst);
        }
    }

    Ok((
        LossResult {
            value,
            grad_features,
            grad_weights: None,
        },
        CenterState {
            centers: new_centers,
            update_rate: state.update_rate,
        },
    ))
}

/// Options for the centroid-MSE path.
#[derive(Debug, Clone, Copy)]
pub struct MseOptions {
    /// Project features to the unit sphere before taking the distance. The
    /// unnormalized reading of the objective stays available by switching
    /// this off.
    pub normalize_features: bool,
    /// Also produce the gradient with respect to the centroid rows.
    pub centroid_grad: bool,
}

impl Default for MseOptions {
    fn default() -> MseOptions {
        MseOptions {
            normalize_features: true,
            centroid_grad: false,
        }
    }
}

/// Batch-mean of `0.5 * |x_hat_i - centroid_{y_i}|^2` with features
/// normalized first (see [`MseOptions`]); the gradient is with respect to the
/// raw features via the normalization chain rule.
pub fn pedcc_mse(batch: &FeatureBatch, centroids: &CentroidSet) -> Result<LossResult> {
    pedcc_mse_opt(batch, centroids, MseOptions::default())
}

pub fn pedcc_mse_opt(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    opts: MseOptions,
) -> Result<LossResult> {
    let c = centroids.num_classes;
    let d = centroids.dim;
    batch.check_labels(c)?;
    if batch.features.cols() != d {
        return Err(Error::DimensionMismatch {
            context: "pedcc_mse",
            lhs: format!("{} feature dims", batch.features.cols()),
            rhs: format!("{d} centroid dims"),
        });
    }

    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let mut value = 0.0;
    let mut grad_features = Matrix::zeros(n, d);
    let mut grad_centroids = opts.centroid_grad.then(|| Matrix::zeros(c, d));

    if opts.normalize_features {
        let (unit_x, norms_x) = normalized_with_norms(&batch.features)?;
        let mut residual = vec![0.0; d];
        let mut chained = vec![0.0; d];
        for i in 0..n {
            let xu = unit_x.row(i);
            let p = centroids.centers.row(batch.labels[i]);
            for j in 0..d {
                let r = xu[j] - p[j];
                residual[j] = r;
                value += 0.5 * r * r * inv_n;
            }
            through_normalization(&residual, xu, norms_x[i], &mut chained);
            let g = grad_features.row_mut(i);
            for j in 0..d {
                g[j] = chained[j] * inv_n;
            }
            if let Some(gc) = grad_centroids.as_mut() {
                let row = gc.row_mut(batch.labels[i]);
                for j in 0..d {
                    // d/dp of 0.5|x - p|^2 is (p - x).
                    row[j] -= residual[j] * inv_n;
                }
            }
        }
    } else {
        for i in 0..n {
            let x = batch.features.row(i);
            let p = centroids.centers.row(batch.labels[i]);
            let g = grad_features.row_mut(i);
            for j in 0..d {
                let r = x[j] - p[j];
                value += 0.5 * r * r * inv_n;
                g[j] = r * inv_n;
            }
            if let Some(gc) = grad_centroids.as_mut() {
                let row = gc.row_mut(batch.labels[i]);
                for j in 0..d {
                    row[j] -= (x[j] - p[j]) * inv_n;
                }
            }
        }
    }

    Ok(LossResult {
        value,
        grad_features,
        grad_weights: grad_centroids,
    })
}

/// Guard for the root-term derivative: `d/dL [L^(1/n)]` blows up as `L -> 0`
/// for `n > 1`, so the slope is evaluated at `max(L, ROOT_EPS)`.
pub const ROOT_EPS: f64 = 1e-12;

/// Combined loss `pedcc_am + pedcc_mse^(1/n)` with `n >= 1`; the root
/// amplifies small residual distances to keep pressure on intra-class
/// compactness.
pub fn pedcc_loss(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    cfg: &MarginConfig,
    root_n: u32,
) -> Result<LossResult> {
    pedcc_loss_opt(batch, centroids, cfg, root_n, MseOptions::default())
}

pub fn pedcc_loss_opt(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    cfg: &MarginConfig,
    root_n: u32,
    opts: MseOptions,
) -> Result<LossResult> {
    if root_n < 1 {
        return Err(Error::Config("root factor n must be >= 1".into()));
    }
    let am = am_core(batch, &centroids.centers, cfg, opts.centroid_grad)?;
    let mse = pedcc_mse_opt(batch, centroids, opts)?;

    let (root_value, root_slope) = if root_n == 1 {
        (mse.value, 1.0)
    } else {
        let inv_n = 1.0 / root_n as f64;
        let guarded = mse.value.max(ROOT_EPS);
        (mse.value.powf(inv_n), inv_n * guarded.powf(inv_n - 1.0))
    };

    let grad_features = am.grad_features.add_scaled(&mse.grad_features, root_slope)?;
    let grad_weights = match (am.grad_weights, mse.grad_weights) {
        (Some(ga), Some(gm)) => Some(ga.add_scaled(&gm, root_slope)?),
        _ => None,
    };

    Ok(LossResult {
        value: am.value + root_value,
        grad_features,
        grad_weights,
    })
}

/// Compare a loss's analytical feature gradient against central finite
/// differences; returns the worst relative error over all coordinates,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn check_gradient<F>(loss: F, batch: &FeatureBatch, h: f64) -> Result<f64>
where
    F: Fn(&FeatureBatch) -> Result<LossResult>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!(
            "finite-difference step h={h} outside [1e-7, 1e-3]"
        )));
    }
    let base = loss(batch)?;
    let mut worst = 0.0_f64;
    for i in 0..batch.features.rows() {
        for j in 0..batch.features.cols() {
            let mut plus = batch.clone();
            plus.features.set(i, j, plus.features.get(i, j) + h);
            let mut minus = batch.clone();
            minus.features.set(i, j, minus.features.get(i, j) - h);
            let numeric = (loss(&plus)?.value - loss(&minus)?.value) / (2.0 * h);
            let analytic = base.grad_features.get(i, j);
            let denom = numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((numeric - analytic).abs() / denom);
        }
    }
    Ok(worst)
}
