//! A small MLP feature extractor trained by SGD with momentum under any of
//! the implemented losses.
//!
//! The classification side depends on the loss: softmax/am/center modes
//! carry a trainable linear head, while pedcc mode classifies against the
//! fixed centroid set and leaves it bit-untouched unless a fine-tune epoch
//! is configured, from which point centroid rows take plain gradient steps
//! at `finetune_lr` and are renormalized to the sphere after every update.
//! Runs are fully deterministic given (data, plan, seed).

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidSet;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::{
    self, CenterState, FeatureBatch, LossResult, MarginConfig, MseOptions,
};
use crate::metrics::cos_to_own_centroid;
use crate::numeric::{dot, norm, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative in terms of the pre-activation. ReLU takes the zero
    /// subgradient at exactly zero.
    fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Multilayer perceptron: hidden layers use `activation`, the output layer
/// is identity so features are unconstrained before normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpModel {
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// One `out x in` matrix per layer.
    pub weights: Vec<Matrix>,
    /// One bias vector per layer.
    pub biases: Vec<Vec<f64>>,
}

impl MlpModel {
    /// He-style initialization scaled for the chosen activation; biases zero.
    pub fn init(widths: &[usize], activation: Activation, rng: &mut Rng) -> Result<MlpModel> {
        if widths.len() < 2 {
            return Err(Error::Config(
                "model needs at least input and output widths".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        let gain = match activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let std = (gain / fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_out, fan_in);
            for i in 0..fan_out {
                for j in 0..fan_in {
                    w.set(i, j, rng.next_gaussian() * std);
                }
            }
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            activation,
            weights,
            biases,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Activations cached by [`forward`], sufficient for exact backprop.
#[derive(Debug)]
pub struct ForwardCache {
    /// `post[0]` is the input; `post[l]` the output of layer l.
    post: Vec<Matrix>,
    /// Pre-activation of every layer.
    pre: Vec<Matrix>,
}

/// Run the network, returning features (the last layer's output) and the
/// cache needed by [`backprop`].
pub fn forward(model: &MlpModel, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.cols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward",
            lhs: format!("{} input cols", inputs.cols()),
            rhs: format!("{} model input dim", model.input_dim()),
        });
    }
    let layers = model.num_layers();
    let mut post = vec![inputs.clone()];
    let mut pre = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut z = post[l].times_transpose(&model.weights[l])?;
        for i in 0..z.rows() {
            for (v, b) in z.row_mut(i).iter_mut().zip(&model.biases[l]) {
                *v += b;
            }
        }
        let a = if l + 1 == layers {
            z.clone()
        } else {
            let mut a = z.clone();
            for i in 0..a.rows() {
                for v in a.row_mut(i) {
                    *v = model.activation.apply(*v);
                }
            }
            a
        };
        pre.push(z);
        post.push(a);
    }
    let features = post.last().unwrap().clone();
    Ok((features, ForwardCache { post, pre }))
}

/// Gradients for every layer's weights and biases.
#[derive(Debug)]
pub struct ParamGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Exact backprop of `grad_features` (dL/d output) through the cached run.
pub fn backprop(
    model: &MlpModel,
    cache: &ForwardCache,
    grad_features: &Matrix,
) -> Result<ParamGrads> {
    let layers = model.num_layers();
    let mut weights = Vec::with_capacity(layers);
    let mut biases = Vec::with_capacity(layers);

    let mut delta = grad_features.clone();
    for l in (0..layers).rev() {
        // delta is dL/d(post-activation of layer l); fold in the activation
        // derivative except on the identity output layer.
        if l + 1 != layers {
            for i in 0..delta.rows() {
                let z = cache.pre[l].row(i);
                for (v, &zi) in delta.row_mut(i).iter_mut().zip(z) {
                    *v *= model.activation.derivative(zi);
                }
            }
        }
        let gw = delta.transpose_times(&cache.post[l])?;
        let mut gb = vec![0.0; delta.cols()];
        for i in 0..delta.rows() {
            for (b, &v) in gb.iter_mut().zip(delta.row(i)) {
                *b += v;
            }
        }
        weights.push(gw);
        biases.push(gb);
        if l > 0 {
            // dL/d(post of layer l-1) = delta * W_l.
            delta = delta.times_transpose(&transpose(&model.weights[l]))?;
        }
    }
    weights.reverse();
    biases.reverse();
    Ok(ParamGrads { weights, biases })
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

/// One SGD-with-momentum update:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
}

/// Which loss drives training, with its configuration.
#[derive(Debug, Clone)]
pub enum LossSpec {
    /// Cross-entropy over a trainable linear head (no bias).
    Softmax,
    /// Additive-margin softmax over a trainable head.
    AmSoftmax(MarginConfig),
    /// Softmax head plus batch-averaged center loss with moving centers.
    Center { update_rate: f64 },
    /// Fixed-centroid loss `pedcc_am + pedcc_mse^(1/n)`.
    Pedcc { margin: MarginConfig, root_n: u32 },
}

impl LossSpec {
    fn uses_classifier_head(&self) -> bool {
        !matches!(self, LossSpec::Pedcc { .. })
    }
}

/// Hyperparameters and schedule for one training run.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)` entries; the multiplier with the largest epoch
    /// `<= current` applies. Empty means constant.
    pub lr_schedule: Vec<(usize, f64)>,
    /// From this epoch on, centroid rows receive gradient steps (pedcc only).
    pub finetune_epoch: Option<usize>,
    pub finetune_lr: f64,
    pub loss: LossSpec,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(ft) = self.finetune_epoch {
            if ft >= self.epochs {
                return Err(Error::Config(format!(
                    "finetune_epoch {ft} must be below epochs {}",
                    self.epochs
                )));
            }
            if !(self.finetune_lr > 0.0) {
                return Err(Error::Config("finetune_lr must be positive".into()));
            }
        }
        if self.lr_schedule.iter().any(|&(_, m)| m <= 0.0) {
            return Err(Error::Config("lr multipliers must be positive".into()));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let mut mult = 1.0;
        let mut best_epoch = None;
        for &(e, m) in &self.lr_schedule {
            if e <= epoch && best_epoch.map_or(true, |b| e >= b) {
                best_epoch = Some(e);
                mult = m;
            }
        }
        self.learning_rate * mult
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub mean_cos: f64,
    pub seconds: f64,
}

/// Per-epoch records plus centroid drift diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Worst `| |row| - 1 |` over centroid rows, one entry per epoch.
    pub centroid_norm_dev: Vec<f64>,
    /// Angular drift (degrees) of each centroid row relative to the input
    /// set, measured at the end of the run.
    pub centroid_drift_deg: Vec<f64>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,loss,train_acc,eval_acc,mean_cos,seconds";

impl TrainLog {
    /// Fixed-header CSV, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRAIN_LOG_HEADER);
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.loss, r.train_acc, r.eval_acc, r.mean_cos, r.seconds
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub centroids: CentroidSet,
    pub log: TrainLog,
}

struct Momentum {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    head: Option<Vec<f64>>,
}

/// Train `model` on `train_data`, reporting eval metrics per epoch.
///
/// In pedcc mode the returned centroid set is bit-identical to the input
/// unless `finetune_epoch` is set. `eval_data` may be the training split.
pub fn train(
    model: &MlpModel,
    train_data: &LabeledDataset,
    eval_data: &LabeledDataset,
    centroids: &CentroidSet,
    plan: &TrainPlan,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train_data.input_dim() != model.input_dim() {
        return Err(Error::Config(format!(
            "data has {} input dims but the model expects {}",
            train_data.input_dim(),
            model.input_dim()
        )));
    }
    if model.feature_dim() != centroids.dim {
        return Err(Error::Config(format!(
            "model features are {}-dimensional but centroids are {}-dimensional",
            model.feature_dim(),
            centroids.dim
        )));
    }
    let num_classes = centroids.num_classes;
    if train_data.labels.iter().any(|&y| y >= num_classes)
        || eval_data.labels.iter().any(|&y| y >= num_classes)
    {
        return Err(Error::Config(format!(
            "labels must be below the {num_classes}-class centroid set"
        )));
    }
    if train_data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }

    let mut model = model.clone();
    let mut centroids = centroids.clone();
    let initial_centers = centroids.centers.clone();
    let mut rng = Rng::new(plan.seed);

    // Trainable classifier head for the losses that need one; Xavier init.
    let mut head: Option<Matrix> = if plan.loss.uses_classifier_head() {
        let d = model.feature_dim();
        let std = (1.0 / d as f64).sqrt();
        let mut w = Matrix::zeros(num_classes, d);
        let mut head_rng = rng.split();
        for i in 0..num_classes {
            for j in 0..d {
                w.set(i, j, head_rng.next_gaussian() * std);
            }
        }
        Some(w)
    } else {
        None
    };

    let mut center_state = match plan.loss {
        LossSpec::Center { update_rate } => Some(CenterState::zeros(
            num_classes,
            model.feature_dim(),
            update_rate,
        )?),
        _ => None,
    };

    let mut momentum = Momentum {
        weights: model.weights.iter().map(|w| vec![0.0; w.data().len()]).collect(),
        biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        head: head.as_ref().map(|w| vec![0.0; w.data().len()]),
    };

    let mut log = TrainLog::default();
    let mut indices: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 0..plan.epochs {
        let epoch_start = Instant::now();
        let lr = plan.lr_at(epoch);
        let finetune_active = plan.finetune_epoch.map_or(false, |ft| epoch >= ft);

        rng.shuffle(&mut indices);

        let mut loss_sum = 0.0;
        let mut train_hits = 0usize;
        for chunk in indices.chunks(plan.batch_size) {
            let (inputs, labels) = gather(train_data, chunk);
            let (features, cache) = forward(&model, &inputs)?;
            let batch = FeatureBatch::new(features, labels)?;

            let (result, head_grad) = batch_loss(
                &batch,
                &centroids,
                head.as_ref(),
                center_state.as_mut(),
                &plan.loss,
                finetune_active,
            )?;
            if !result.value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            loss_sum += result.value * chunk.len() as f64;
            train_hits += count_hits(&batch, head.as_ref(), &centroids, &plan.loss);

            let grads = backprop(&model, &cache, &result.grad_features)?;
            for l in 0..model.weights.len() {
                sgd_step(
                    model.weights[l].data_mut(),
                    grads.weights[l].data(),
                    &mut momentum.weights[l],
                    lr,
                    plan.momentum,
                    plan.weight_decay,
                );
                sgd_step(
                    &mut model.biases[l],
                    &grads.biases[l],
                    &mut momentum.biases[l],
                    lr,
                    plan.momentum,
                    0.0,
                );
            }
            if let (Some(w), Some(gw)) = (head.as_mut(), head_grad.as_ref()) {
                sgd_step(
                    w.data_mut(),
                    gw.data(),
                    momentum.head.as_mut().unwrap(),
                    lr,
                    plan.momentum,
                    plan.weight_decay,
                );
            }
            if finetune_active {
                if let Some(gc) = result.grad_weights.as_ref() {
                    finetune_centroids(&mut centroids, gc, plan.finetune_lr)?;
                }
            }
        }

        let mean_loss = loss_sum / train_data.len() as f64;
        let train_acc = train_hits as f64 / train_data.len() as f64;

        let (eval_acc, mean_cos) = if eval_data.is_empty() {
            (0.0, 0.0)
        } else {
            let (eval_features, _) = forward(&model, &eval_data.inputs)?;
            let eval_batch = FeatureBatch::new(eval_features, eval_data.labels.clone())?;
            let acc = count_hits(&eval_batch, head.as_ref(), &centroids, &plan.loss) as f64
                / eval_data.len() as f64;
            let (cos, _) = cos_to_own_centroid(&eval_batch, &centroids.centers)?;
            (acc, cos)
        };

        let norm_dev = (0..centroids.num_classes)
            .map(|i| (norm(centroids.centers.row(i)) - 1.0).abs())
            .fold(0.0, f64::max);
        log.centroid_norm_dev.push(norm_dev);
        log.epochs.push(EpochRecord {
            epoch,
            loss: mean_loss,
            train_acc,
            eval_acc,
            mean_cos,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
    }

    if model
        .weights
        .iter()
        .any(|w| w.data().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteLoss {
            epoch: plan.epochs.saturating_sub(1),
        });
    }

    log.centroid_drift_deg = (0..centroids.num_classes)
        .map(|i| {
            let a = initial_centers.row(i);
            let b = centroids.centers.row(i);
            let cos = dot(a, b) / (norm(a) * norm(b));
            cos.clamp(-1.0, 1.0).acos().to_degrees()
        })
        .collect();

    Ok(TrainOutcome {
        model,
        centroids,
        log,
    })
}

fn gather(data: &LabeledDataset, idx: &[usize]) -> (Matrix, Vec<usize>) {
    let d = data.input_dim();
    let mut out = Matrix::zeros(idx.len(), d);
    let mut labels = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        out.row_mut(row).copy_from_slice(data.inputs.row(i));
        labels.push(data.labels[i]);
    }
    (out, labels)
}

/// Loss value, feature gradient, and (when a head is trainable) the head
/// gradient for one batch.
fn batch_loss(
    batch: &FeatureBatch,
    centroids: &CentroidSet,
    head: Option<&Matrix>,
    center_state: Option<&mut CenterState>,
    spec: &LossSpec,
    finetune_active: bool,
) -> Result<(LossResult, Option<Matrix>)> {
    match spec {
        LossSpec::Softmax => {
            let r = loss::softmax_ce(batch, head.unwrap(), None)?;
            let gw = r.grad_weights.clone();
            Ok((r, gw))
        }
        LossSpec::AmSoftmax(cfg) => {
            let r = loss::am_softmax(batch, head.unwrap(), cfg)?;
            let gw = r.grad_weights.clone();
            Ok((r, gw))
        }
        LossSpec::Center { .. } => {
            let state = center_state.expect("center state initialized for center loss");
            let sm = loss::softmax_ce(batch, head.unwrap(), None)?;
            let (cl, updated) = loss::center_loss(batch, state)?;
            *state = updated;
            // Center term batch-averaged so its weight does not grow with
            // batch size.
            let inv_n = 1.0 / batch.len() as f64;
            let grad_features = sm.grad_features.add_scaled(&cl.grad_features, inv_n)?;
            Ok((
                LossResult {
                    value: sm.value + cl.value * inv_n,
                    grad_features,
                    grad_weights: None,
                },
                sm.grad_weights,
            ))
        }
        LossSpec::Pedcc { margin, root_n } => {
            let opts = MseOptions {
                normalize_features: true,
                centroid_grad: finetune_active,
            };
            let r = loss::pedcc_loss_opt(batch, centroids, margin, *root_n, opts)?;
            Ok((r, None))
        }
    }
}

/// Classification rule of each mode: argmax over the trainable head's
/// logits, or nearest centroid by cosine for pedcc (which is the same rule
/// with the fixed centroids as the head).
fn count_hits(
    batch: &FeatureBatch,
    head: Option<&Matrix>,
    centroids: &CentroidSet,
    spec: &LossSpec,
) -> usize {
    let mut hits = 0;
    for i in 0..batch.len() {
        let x = batch.features.row(i);
        let pred = match spec {
            LossSpec::Softmax | LossSpec::Center { .. } => argmax_logit(x, head.unwrap()),
            LossSpec::AmSoftmax(_) => argmax_cosine(x, head.unwrap()),
            LossSpec::Pedcc { .. } => argmax_cosine(x, &centroids.centers),
        };
        if pred == batch.labels[i] {
            hits += 1;
        }
    }
    hits
}

fn argmax_logit(x: &[f64], weights: &Matrix) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..weights.rows() {
        let v = dot(x, weights.row(j));
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

fn argmax_cosine(x: &[f64], weights: &Matrix) -> usize {
    let nx = norm(x).max(f64::MIN_POSITIVE);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for j in 0..weights.rows() {
        let v = dot(x, weights.row(j)) / (nx * norm(weights.row(j)).max(f64::MIN_POSITIVE));
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Plain gradient step on the centroid rows followed by renormalization,
/// keeping every row on the unit sphere.
fn finetune_centroids(centroids: &mut CentroidSet, grad: &Matrix, lr: f64) -> Result<()> {
    for i in 0..centroids.num_classes {
        let row = centroids.centers.row_mut(i);
        for (p, &g) in row.iter_mut().zip(grad.row(i)) {
            *p -= lr * g;
        }
        let n = norm(row);
        if n < crate::numeric::ZERO_ROW_NORM {
            return Err(Error::ZeroRow { row: i, norm: n });
        }
        for p in row {
            *p /= n;
        }
    }
    centroids.min_pairwise_angle_deg =
        crate::centroids::min_pairwise_angle_deg(&centroids.centers)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::centroids::{generate, GenConfig};
    use crate::data::{synth_blobs_split, SplitTag};
    use crate::numeric::gaussian_matrix;

    fn tiny_plan(loss: LossSpec, epochs: usize) -> TrainPlan {
        TrainPlan {
            epochs,
            batch_size: 16,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: vec![],
            finetune_epoch: None,
            finetune_lr: 1e-3,
            loss,
            seed: 99,
        }
    }

    #[test]
    fn forward_zero_weights_give_zero_features() {
        let mut model = MlpModel::init(&[3, 4, 2], Activation::Relu, &mut Rng::new(1)).unwrap();
        for w in &mut model.weights {
            *w = Matrix::zeros(w.rows(), w.cols());
        }
        let inputs = gaussian_matrix(&mut Rng::new(2), 5, 3).unwrap();
        let (features, _) = forward(&model, &inputs).unwrap();
        assert!(features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_identity_layer_relu_passthrough() {
        // Single identity layer with relu on... no hidden layers here: one
        // layer is the output layer (identity activation), so non-negative
        // inputs pass through unchanged.
        let mut model = MlpModel::init(&[3, 3], Activation::Relu, &mut Rng::new(1)).unwrap();
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        model.weights[0] = eye;
        let inputs = Matrix::from_vec(2, 3, vec![0.5, 1.0, 0.0, 2.0, 0.25, 3.0]).unwrap();
        let (features, _) = forward(&model, &inputs).unwrap();
        assert_eq!(features.data(), inputs.data());
    }

    #[test]
    fn forward_rejects_dim_mismatch() {
        let model = MlpModel::init(&[3, 2], Activation::Relu, &mut Rng::new(1)).unwrap();
        let inputs = Matrix::zeros(2, 4);
        assert!(forward(&model, &inputs).is_err());
    }

    #[test]
    fn sgd_step_hand_value() {
        // lr 0.1, grad 1, param 1, decay 0.0005, fresh velocity:
        // v = 1.0005, param = 1 - 0.1 * 1.0005 = 0.89995.
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9, 0.0005);
        assert!((p[0] - 0.89995).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_keeps_params() {
        let mut p = vec![2.0, -1.0];
        let mut v = vec![0.5, -0.25];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        // Velocity decays by the momentum factor and still moves params.
        assert_eq!(v, vec![0.45, -0.225]);
        assert!((p[0] - (2.0 - 0.045)).abs() < 1e-15);

        let mut p2 = vec![2.0];
        let mut v2 = vec![0.0];
        sgd_step(&mut p2, &[0.0], &mut v2, 0.1, 0.9, 0.0);
        assert_eq!(p2, vec![2.0]);
    }

    #[test]
    fn sgd_no_momentum_no_decay_is_plain_descent() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.2, 0.0, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    /// Finite-difference oracle over every model parameter for the full
    /// pedcc loss through the network.
    #[test]
    fn end_to_end_parameter_gradients_match_finite_differences() {
        let mut rng = Rng::new(1234);
        let model = MlpModel::init(&[4, 5, 3], Activation::Tanh, &mut rng).unwrap();
        let centroids = generate(3, 3, 55, &GenConfig::default()).unwrap();
        let cfg = MarginConfig::cosine(10.0, 0.3).unwrap();
        let inputs = gaussian_matrix(&mut rng, 2, 4).unwrap();
        let labels = vec![0usize, 2];

        let loss_of = |m: &MlpModel| -> f64 {
            let (features, _) = forward(m, &inputs).unwrap();
            let batch = FeatureBatch::new(features, labels.clone()).unwrap();
            loss::pedcc_loss(&batch, &centroids, &cfg, 2).unwrap().value
        };

        let (features, cache) = forward(&model, &inputs).unwrap();
        let batch = FeatureBatch::new(features, labels.clone()).unwrap();
        let result = loss::pedcc_loss(&batch, &centroids, &cfg, 2).unwrap();
        let grads = backprop(&model, &cache, &result.grad_features).unwrap();

        let h = 1e-5;
        let mut worst = 0.0_f64;
        for l in 0..model.weights.len() {
            for i in 0..model.weights[l].rows() {
                for j in 0..model.weights[l].cols() {
                    let mut mp = model.clone();
                    mp.weights[l].set(i, j, mp.weights[l].get(i, j) + h);
                    let mut mm = model.clone();
                    mm.weights[l].set(i, j, mm.weights[l].get(i, j) - h);
                    let numeric = (loss_of(&mp) - loss_of(&mm)) / (2.0 * h);
                    let analytic = grads.weights[l].get(i, j);
                    let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                    worst = worst.max((numeric - analytic).abs() / denom);
                }
            }
            for j in 0..model.biases[l].len() {
                let mut mp = model.clone();
                mp.biases[l][j] += h;
                let mut mm = model.clone();
                mm.biases[l][j] -= h;
                let numeric = (loss_of(&mp) - loss_of(&mm)) / (2.0 * h);
                let analytic = grads.biases[l][j];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                worst = worst.max((numeric - analytic).abs() / denom);
            }
        }
        assert!(worst < 1e-4, "rel err {worst}");
    }

    #[test]
    fn train_frozen_centroids_bit_identical() {
        let mut rng = Rng::new(7);
        let (train_data, eval_data) = synth_blobs_split(&mut rng, 3, 30, 10, 6, 5.0, 0.5).unwrap();
        let model = MlpModel::init(&[6, 16, 8], Activation::Relu, &mut Rng::new(3)).unwrap();
        let centroids = generate(3, 8, 21, &GenConfig::default()).unwrap();
        let plan = tiny_plan(
            LossSpec::Pedcc {
                margin: MarginConfig::cosine(30.0, 0.5).unwrap(),
                root_n: 1,
            },
            4,
        );
        let out = train(&model, &train_data, &eval_data, &centroids, &plan).unwrap();
        for (a, b) in out.centroids.centers.data().iter().zip(centroids.centers.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(out.log.centroid_drift_deg.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn train_small_blobs_learns_and_loss_drops() {
        let mut rng = Rng::new(8);
        let (train_data, eval_data) = synth_blobs_split(&mut rng, 3, 60, 20, 6, 8.0, 0.5).unwrap();
        let model = MlpModel::init(&[6, 24, 8], Activation::Relu, &mut Rng::new(4)).unwrap();
        let centroids = generate(3, 8, 22, &GenConfig::default()).unwrap();
        let plan = tiny_plan(
            LossSpec::Pedcc {
                margin: MarginConfig::cosine(30.0, 0.5).unwrap(),
                root_n: 1,
            },
            12,
        );
        let out = train(&model, &train_data, &eval_data, &centroids, &plan).unwrap();
        let first = &out.log.epochs[0];
        let last = out.log.epochs.last().unwrap();
        assert!(last.loss < first.loss, "{} -> {}", first.loss, last.loss);
        assert!(last.eval_acc >= 0.95, "eval_acc {}", last.eval_acc);
    }

    #[test]
    fn train_is_deterministic() {
        let mut rng = Rng::new(9);
        let (train_data, eval_data) = synth_blobs_split(&mut rng, 2, 20, 10, 4, 4.0, 0.5).unwrap();
        let model = MlpModel::init(&[4, 8, 4], Activation::Relu, &mut Rng::new(5)).unwrap();
        let centroids = generate(2, 4, 23, &GenConfig::default()).unwrap();
        let plan = tiny_plan(LossSpec::Softmax, 3);
        let a = train(&model, &train_data, &eval_data, &centroids, &plan).unwrap();
        let b = train(&model, &train_data, &eval_data, &centroids, &plan).unwrap();
        for (ra, rb) in a.log.epochs.iter().zip(&b.log.epochs) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.train_acc, rb.train_acc);
            assert_eq!(ra.eval_acc, rb.eval_acc);
            assert_eq!(ra.mean_cos.to_bits(), rb.mean_cos.to_bits());
        }
        for (wa, wb) in a.model.weights.iter().zip(&b.model.weights) {
            assert_eq!(wa.data(), wb.data());
        }
    }

    #[test]
    fn train_finetune_keeps_rows_unit_norm() {
        let mut rng = Rng::new(10);
        let (train_data, eval_data) = synth_blobs_split(&mut rng, 3, 30, 10, 6, 5.0, 0.5).unwrap();
        let model = MlpModel::init(&[6, 16, 8], Activation::Relu, &mut Rng::new(6)).unwrap();
        let centroids = generate(3, 8, 24, &GenConfig::default()).unwrap();
        let mut plan = tiny_plan(
            LossSpec::Pedcc {
                margin: MarginConfig::cosine(30.0, 0.5).unwrap(),
                root_n: 1,
            },
            6,
        );
        plan.finetune_epoch = Some(2);
        let out = train(&model, &train_data, &eval_data, &centroids, &plan).unwrap();
        for dev in &out.log.centroid_norm_dev {
            assert!(*dev < 1e-9, "norm deviation {dev}");
        }
        // Fine-tuning actually moved something.
        assert!(out.log.centroid_drift_deg.iter().any(|&d| d > 0.0));
        // And the moved set still validates.
        assert!(out.centroids.min_pairwise_angle_deg > 0.0);
    }

    #[test]
    fn train_rejects_bad_plans() {
        let plan = TrainPlan {
            finetune_epoch: Some(50),
            ..tiny_plan(LossSpec::Softmax, 10)
        };
        assert!(plan.validate().is_err());

        let plan = TrainPlan {
            batch_size: 0,
            ..tiny_plan(LossSpec::Softmax, 10)
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn train_log_csv_has_fixed_header() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 0,
                loss: 1.5,
                train_acc: 0.5,
                eval_acc: 0.25,
                mean_cos: 0.75,
                seconds: 0.01,
            }],
            ..TrainLog::default()
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRAIN_LOG_HEADER);
        assert_eq!(lines.next().unwrap(), "0,1.5,0.5,0.25,0.75,0.01");
    }
}
