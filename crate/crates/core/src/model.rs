//! Dense feature extractor + linear classification head with exact analytic
//! gradients, trained by seeded mini-batch gradient descent.
//!
//! The extractor applies tanh between layers and leaves the final layer
//! linear, so its output ("features") lives in an unbounded space that the
//! anchor loss can pull toward per-class anchor vectors.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;

pub type ClientId = usize;

/// One dense layer: `out = in · weights + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// Shape (input_dim, output_dim).
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Config(format!(
                "layer bias length {} does not match output dim {}",
                bias.len(),
                weights.ncols()
            )));
        }
        Ok(Self { weights, bias })
    }

    /// Seeded init: weights ~ N(0, 1/fan_in), zero bias.
    pub fn seeded<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (input_dim as f64).sqrt();
        let weights = Array2::from_shape_fn((input_dim, output_dim), |_| {
            standard_normal(rng) * scale
        });
        Self {
            weights,
            bias: Array1::zeros(output_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }

    /// Logits for a single feature vector: `weightsᵀ · h + bias`.
    pub fn respond(&self, h: &Array1<f64>) -> Array1<f64> {
        self.weights.t().dot(h) + &self.bias
    }
}

/// Personalized client model: extractor layers (never transmitted) plus the
/// shared-shape classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub extractor: Vec<DenseLayer>,
    /// Shape (d_h, c_total).
    pub head: DenseLayer,
}

impl ClientModel {
    pub fn new(extractor: Vec<DenseLayer>, head: DenseLayer) -> Result<Self> {
        for w in extractor.windows(2) {
            if w[0].output_dim() != w[1].input_dim() {
                return Err(Error::Config(format!(
                    "extractor layer shapes do not chain: {} -> {}",
                    w[0].output_dim(),
                    w[1].input_dim()
                )));
            }
        }
        if let Some(last) = extractor.last() {
            if last.output_dim() != head.input_dim() {
                return Err(Error::Config(format!(
                    "head input dim {} does not match feature dim {}",
                    head.input_dim(),
                    last.output_dim()
                )));
            }
        }
        let model = Self { extractor, head };
        if !model.is_finite() {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(model)
    }

    /// Seeded model; `dims` lists `[input_dim, hidden.., d_h]` for the
    /// extractor (a single entry means the extractor is the identity and
    /// features are the raw inputs).
    pub fn seeded<R: Rng>(dims: &[usize], c_total: usize, rng: &mut R) -> Result<Self> {
        if dims.is_empty() || c_total == 0 {
            return Err(Error::Config("model dims and class count must be nonzero".into()));
        }
        let extractor: Vec<DenseLayer> = dims
            .windows(2)
            .map(|w| DenseLayer::seeded(w[0], w[1], rng))
            .collect();
        let d_h = *dims.last().unwrap();
        let head = DenseLayer::seeded(d_h, c_total, rng);
        Self::new(extractor, head)
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map(|l| l.input_dim())
            .unwrap_or_else(|| self.head.input_dim())
    }

    /// Feature dimension d_h.
    pub fn feature_dim(&self) -> usize {
        self.head.input_dim()
    }

    /// Global class count.
    pub fn class_count(&self) -> usize {
        self.head.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.extractor.iter().map(|l| l.param_count()).sum::<usize>() + self.head.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.iter().all(|l| l.is_finite()) && self.head.is_finite()
    }
}

/// Per-class anchor vectors summarizing a client's learned features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAnchorSet {
    pub owner: ClientId,
    anchors: BTreeMap<usize, Array1<f64>>,
}

impl FeatureAnchorSet {
    pub fn new(owner: ClientId) -> Self {
        Self {
            owner,
            anchors: BTreeMap::new(),
        }
    }

    /// Standard-normal anchors for each class in `classes`.
    pub fn seeded<R: Rng>(
        owner: ClientId,
        classes: impl IntoIterator<Item = usize>,
        d_h: usize,
        rng: &mut R,
    ) -> Self {
        let mut set = Self::new(owner);
        for c in classes {
            let v = Array1::from_shape_fn(d_h, |_| standard_normal(rng));
            set.insert(c, v);
        }
        set
    }

    pub fn insert(&mut self, class: usize, anchor: Array1<f64>) {
        self.anchors.insert(class, anchor);
    }

    pub fn get(&self, class: usize) -> Option<&Array1<f64>> {
        self.anchors.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchors.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Array1<f64>)> {
        self.anchors.iter().map(|(c, v)| (*c, v))
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.anchors.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// A mini-batch of inputs and class labels.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Shape (batch, input_dim).
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() == 0 {
            return Err(Error::Input("batch must contain at least one sample".into()));
        }
        if inputs.nrows() != labels.len() {
            return Err(Error::Input(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Hyperparameters for one client's local training phase.
#[derive(Debug, Clone, Copy)]
pub struct LocalTrainConfig {
    pub learning_rate: f64,
    /// Number of local epochs R.
    pub local_rounds: usize,
    pub batch_size: usize,
    /// Anchor-loss weight λ.
    pub lambda: f64,
    /// Gradient-train anchors (true) or recompute them as per-class feature
    /// means after training (false).
    pub anchors_learnable: bool,
}

impl LocalTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.local_rounds == 0 {
            return Err(Error::Config("local_rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Intermediates kept from a forward pass, sufficient for exact backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Layer inputs a_0..a_L where a_0 is the batch input and a_L is the
    /// feature matrix (post-tanh values for the hidden transitions).
    activations: Vec<Array2<f64>>,
    /// Shape (batch, d_h); alias of the last activation.
    pub features: Array2<f64>,
    /// Shape (batch, c_total).
    pub logits: Array2<f64>,
}

/// Gradients of the combined local loss w.r.t. every trainable tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub extractor: Vec<(Array2<f64>, Array1<f64>)>,
    pub head: (Array2<f64>, Array1<f64>),
    /// Grad per anchor class; includes the λ factor.
    pub anchors: BTreeMap<usize, Array1<f64>>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        let layer_ok = |(w, b): &(Array2<f64>, Array1<f64>)| {
            w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite())
        };
        self.extractor.iter().all(layer_ok)
            && layer_ok(&self.head)
            && self.anchors.values().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Run the extractor and head over a batch.
pub fn forward(model: &ClientModel, batch: &Batch) -> Result<ForwardPass> {
    if batch.inputs.ncols() != model.input_dim() {
        return Err(Error::Config(format!(
            "batch input dim {} does not match model input dim {}",
            batch.inputs.ncols(),
            model.input_dim()
        )));
    }
    let n_layers = model.extractor.len();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(batch.inputs.clone());
    for (i, layer) in model.extractor.iter().enumerate() {
        let z = activations[i].dot(&layer.weights) + &layer.bias;
        // tanh between layers; the final extractor output stays linear.
        let a = if i + 1 < n_layers { z.mapv(f64::tanh) } else { z };
        activations.push(a);
    }
    let features = activations.last().unwrap().clone();
    let logits = features.dot(&model.head.weights) + &model.head.bias;
    Ok(ForwardPass {
        activations,
        features,
        logits,
    })
}

fn log_softmax_row(row: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.mapv(|v| v - log_sum)
}

/// Mean cross-entropy (softmax + negative log-likelihood) over the batch.
pub fn supervised_loss(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let c_total = logits.ncols();
    let mut total = 0.0;
    for (row, &label) in logits.rows().into_iter().zip(labels) {
        if label >= c_total {
            return Err(Error::Input(format!(
                "label {label} outside [0, {c_total})"
            )));
        }
        total -= log_softmax_row(row)[label];
    }
    Ok(total / labels.len() as f64)
}

/// Mean squared distance between each sample's features and its class anchor.
pub fn anchor_loss(
    features: &Array2<f64>,
    labels: &[usize],
    anchors: &FeatureAnchorSet,
) -> Result<f64> {
    let mut total = 0.0;
    for (row, &label) in features.rows().into_iter().zip(labels) {
        let anchor = anchors.get(label).ok_or_else(|| {
            Error::Protocol(format!(
                "client {} has no anchor for class {label}",
                anchors.owner
            ))
        })?;
        total += row
            .iter()
            .zip(anchor.iter())
            .map(|(f, h)| (f - h) * (f - h))
            .sum::<f64>();
    }
    Ok(total / labels.len() as f64)
}

/// Exact gradients of `supervised_loss + λ · anchor_loss` for every
/// extractor parameter, head parameter, and anchor vector.
pub fn backward(
    model: &ClientModel,
    pass: &ForwardPass,
    batch: &Batch,
    anchors: &FeatureAnchorSet,
    lambda: f64,
) -> Result<Gradients> {
    let n = batch.len() as f64;
    let c_total = model.class_count();

    // d(mean CE)/d(logits) = (softmax - onehot) / batch
    let mut d_logits = Array2::zeros(pass.logits.raw_dim());
    for (i, (row, &label)) in pass.logits.rows().into_iter().zip(&batch.labels).enumerate() {
        if label >= c_total {
            return Err(Error::Input(format!("label {label} outside [0, {c_total})")));
        }
        let log_p = log_softmax_row(row);
        for c in 0..c_total {
            let p = log_p[c].exp();
            d_logits[[i, c]] = (p - if c == label { 1.0 } else { 0.0 }) / n;
        }
    }

    let grad_head_w = pass.features.t().dot(&d_logits);
    let grad_head_b = d_logits.sum_axis(Axis(0));

    // Feature gradient: CE path plus λ · 2(f_i - h_{y_i})/batch.
    let mut d_features = d_logits.dot(&model.head.weights.t());
    let mut grad_anchors: BTreeMap<usize, Array1<f64>> = BTreeMap::new();
    if lambda != 0.0 {
        for (i, &label) in batch.labels.iter().enumerate() {
            let anchor = anchors.get(label).ok_or_else(|| {
                Error::Protocol(format!(
                    "client {} has no anchor for class {label}",
                    anchors.owner
                ))
            })?;
            let scale = 2.0 * lambda / n;
            for (j, h) in anchor.iter().enumerate() {
                let f = pass.features[[i, j]];
                d_features[[i, j]] += scale * (f - h);
                // dg/dh^(c) accumulates (2/batch)(h - f), times λ.
                grad_anchors
                    .entry(label)
                    .or_insert_with(|| Array1::zeros(anchor.len()))[j] += scale * (h - f);
            }
        }
    }
    // Anchors for classes absent from the batch (or with λ = 0) get zero grads.
    for (c, v) in anchors.iter() {
        grad_anchors
            .entry(c)
            .or_insert_with(|| Array1::zeros(v.len()));
    }

    // Backprop through the extractor; the last transition is linear, earlier
    // ones pass through tanh (derivative 1 - a² on the stored activation).
    let n_layers = model.extractor.len();
    let mut grad_extractor = vec![(Array2::zeros((0, 0)), Array1::zeros(0)); n_layers];
    let mut d_out = d_features;
    for i in (0..n_layers).rev() {
        let d_z = if i + 1 < n_layers {
            let act = &pass.activations[i + 1];
            let mut d = d_out;
            d.zip_mut_with(act, |g, a| *g *= 1.0 - a * a);
            d
        } else {
            d_out
        };
        let input = &pass.activations[i];
        grad_extractor[i] = (input.t().dot(&d_z), d_z.sum_axis(Axis(0)));
        d_out = d_z.dot(&model.extractor[i].weights.t());
    }

    let grads = Gradients {
        extractor: grad_extractor,
        head: (grad_head_w, grad_head_b),
        anchors: grad_anchors,
    };
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient; aborting round".into()));
    }
    Ok(grads)
}

fn apply_step(
    model: &mut ClientModel,
    anchors: &mut FeatureAnchorSet,
    grads: &Gradients,
    eta: f64,
    anchors_learnable: bool,
) {
    for (layer, (gw, gb)) in model.extractor.iter_mut().zip(&grads.extractor) {
        layer.weights.scaled_add(-eta, gw);
        layer.bias.scaled_add(-eta, gb);
    }
    model.head.weights.scaled_add(-eta, &grads.head.0);
    model.head.bias.scaled_add(-eta, &grads.head.1);
    if anchors_learnable {
        for (class, g) in &grads.anchors {
            if let Some(anchor) = anchors.anchors.get_mut(class) {
                anchor.scaled_add(-eta, g);
            }
        }
    }
}

fn gather_batch(inputs: &Array2<f64>, labels: &[usize], idx: &[usize]) -> Batch {
    let mut rows = Array2::zeros((idx.len(), inputs.ncols()));
    let mut batch_labels = Vec::with_capacity(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        rows.row_mut(r).assign(&inputs.row(i));
        batch_labels.push(labels[i]);
    }
    Batch {
        inputs: rows,
        labels: batch_labels,
    }
}

/// Per-class mean of extracted features over a dataset; used when anchors
/// are recomputed instead of gradient-trained.
pub fn class_mean_anchors(
    model: &ClientModel,
    inputs: &Array2<f64>,
    labels: &[usize],
    owner: ClientId,
) -> Result<FeatureAnchorSet> {
    let batch = Batch::new(inputs.clone(), labels.to_vec())?;
    let pass = forward(model, &batch)?;
    let d_h = model.feature_dim();
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &label) in pass.features.rows().into_iter().zip(labels) {
        let entry = sums
            .entry(label)
            .or_insert_with(|| (Array1::zeros(d_h), 0));
        entry.0 += &row;
        entry.1 += 1;
    }
    let mut set = FeatureAnchorSet::new(owner);
    for (class, (sum, count)) in sums {
        set.insert(class, sum / count as f64);
    }
    Ok(set)
}

/// R epochs of seeded mini-batch GD on `supervised_loss + λ · anchor_loss`.
///
/// Returns the updated model, updated anchors, and the loss observed at each
/// step (on the step's batch, before the update).
pub fn local_train<R: Rng>(
    model: &ClientModel,
    anchors: &FeatureAnchorSet,
    inputs: &Array2<f64>,
    labels: &[usize],
    config: &LocalTrainConfig,
    rng: &mut R,
) -> Result<(ClientModel, FeatureAnchorSet, Vec<f64>)> {
    config.validate()?;
    if inputs.nrows() == 0 {
        return Err(Error::Input("local training requires a nonempty dataset".into()));
    }
    if inputs.nrows() != labels.len() {
        return Err(Error::Input(format!(
            "{} input rows but {} labels",
            inputs.nrows(),
            labels.len()
        )));
    }

    let mut model = model.clone();
    let mut anchors = anchors.clone();
    let mut trace = Vec::new();
    let n = inputs.nrows();

    for _epoch in 0..config.local_rounds {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = gather_batch(inputs, labels, chunk);
            let pass = forward(&model, &batch)?;
            let f = supervised_loss(&pass.logits, &batch.labels)?;
            let g = if config.lambda != 0.0 {
                anchor_loss(&pass.features, &batch.labels, &anchors)?
            } else {
                0.0
            };
            let loss = f + config.lambda * g;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss on client {}",
                    anchors.owner
                )));
            }
            trace.push(loss);
            let grads = backward(&model, &pass, &batch, &anchors, config.lambda)?;
            apply_step(
                &mut model,
                &mut anchors,
                &grads,
                config.learning_rate,
                config.anchors_learnable,
            );
            if !model.is_finite() || !anchors.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite parameters on client {}; aborting round",
                    anchors.owner
                )));
            }
        }
    }

    if !config.anchors_learnable {
        anchors = class_mean_anchors(&model, inputs, labels, anchors.owner)?;
    }

    Ok((model, anchors, trace))
}

/// Central finite differences of the combined loss w.r.t. every parameter
/// and anchor. Evaluates the loss through `forward` only, so it is an
/// independent check on `backward`.
pub fn finite_difference_grads(
    model: &ClientModel,
    anchors: &FeatureAnchorSet,
    batch: &Batch,
    lambda: f64,
    step: f64,
) -> Result<Gradients> {
    let loss_of = |m: &ClientModel, a: &FeatureAnchorSet| -> Result<f64> {
        let pass = forward(m, batch)?;
        let f = supervised_loss(&pass.logits, &batch.labels)?;
        let g = anchor_loss(&pass.features, &batch.labels, a)?;
        Ok(f + lambda * g)
    };

    let mut grads = Gradients {
        extractor: model
            .extractor
            .iter()
            .map(|l| (Array2::zeros(l.weights.raw_dim()), Array1::zeros(l.bias.len())))
            .collect(),
        head: (
            Array2::zeros(model.head.weights.raw_dim()),
            Array1::zeros(model.head.bias.len()),
        ),
        anchors: anchors
            .iter()
            .map(|(c, v)| (c, Array1::zeros(v.len())))
            .collect(),
    };

    let probe = |mutate: &mut dyn FnMut(&mut ClientModel, &mut FeatureAnchorSet, f64)| -> Result<f64> {
        let mut mp = model.clone();
        let mut ap = anchors.clone();
        mutate(&mut mp, &mut ap, step);
        let plus = loss_of(&mp, &ap)?;
        let mut mm = model.clone();
        let mut am = anchors.clone();
        mutate(&mut mm, &mut am, -step);
        let minus = loss_of(&mm, &am)?;
        Ok((plus - minus) / (2.0 * step))
    };

    for li in 0..model.extractor.len() {
        let (rows, cols) = model.extractor[li].weights.dim();
        for r in 0..rows {
            for c in 0..cols {
                grads.extractor[li].0[[r, c]] =
                    probe(&mut |m, _, eps| m.extractor[li].weights[[r, c]] += eps)?;
            }
        }
        for b in 0..model.extractor[li].bias.len() {
            grads.extractor[li].1[b] = probe(&mut |m, _, eps| m.extractor[li].bias[b] += eps)?;
        }
    }
    let (rows, cols) = model.head.weights.dim();
    for r in 0..rows {
        for c in 0..cols {
            grads.head.0[[r, c]] = probe(&mut |m, _, eps| m.head.weights[[r, c]] += eps)?;
        }
    }
    for b in 0..model.head.bias.len() {
        grads.head.1[b] = probe(&mut |m, _, eps| m.head.bias[b] += eps)?;
    }
    let classes: Vec<usize> = anchors.classes().collect();
    for class in classes {
        let d_h = anchors.get(class).unwrap().len();
        for j in 0..d_h {
            grads.anchors.get_mut(&class).unwrap()[j] = probe(&mut |_, a, eps| {
                a.anchors.get_mut(&class).unwrap()[j] += eps;
            })?;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn toy_model(seed: u64, dims: &[usize], c_total: usize) -> ClientModel {
        ClientModel::seeded(dims, c_total, &mut stream(seed, &[1])).unwrap()
    }

    fn toy_anchors(seed: u64, classes: &[usize], d_h: usize) -> FeatureAnchorSet {
        FeatureAnchorSet::seeded(0, classes.iter().copied(), d_h, &mut stream(seed, &[2]))
    }

    fn toy_batch(seed: u64, n: usize, dim: usize, classes: &[usize]) -> Batch {
        let mut rng = stream(seed, &[3]);
        let inputs = Array2::from_shape_fn((n, dim), |_| standard_normal(&mut rng));
        let labels = (0..n).map(|i| classes[i % classes.len()]).collect();
        Batch::new(inputs, labels).unwrap()
    }

    #[test]
    fn forward_identity_extractor_passes_inputs_through() {
        let eye = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 1.0 } else { 0.0 });
        let extractor = vec![DenseLayer::new(eye, Array1::zeros(3)).unwrap()];
        let head = DenseLayer::seeded(3, 4, &mut stream(1, &[0]));
        let model = ClientModel::new(extractor, head).unwrap();
        let batch = toy_batch(5, 6, 3, &[0, 1, 2, 3]);
        let pass = forward(&model, &batch).unwrap();
        assert_eq!(pass.features, batch.inputs);
    }

    #[test]
    fn forward_zero_head_gives_zero_logits() {
        let extractor = vec![DenseLayer::seeded(4, 3, &mut stream(2, &[0]))];
        let head = DenseLayer::new(Array2::zeros((3, 5)), Array1::zeros(5)).unwrap();
        let model = ClientModel::new(extractor, head).unwrap();
        let batch = toy_batch(7, 4, 4, &[0, 1]);
        let pass = forward(&model, &batch).unwrap();
        assert!(pass.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        // Independent oracle: same arithmetic written as plain loops.
        let model = toy_model(11, &[4, 5, 3], 6);
        let batch = toy_batch(12, 5, 4, &[0, 1, 2, 3, 4, 5]);
        let pass = forward(&model, &batch).unwrap();

        for i in 0..batch.len() {
            let mut a: Vec<f64> = batch.inputs.row(i).to_vec();
            for (li, layer) in model.extractor.iter().enumerate() {
                let mut z = vec![0.0; layer.output_dim()];
                for (o, zv) in z.iter_mut().enumerate() {
                    let mut acc = layer.bias[o];
                    for (inp, &av) in a.iter().enumerate() {
                        acc += av * layer.weights[[inp, o]];
                    }
                    *zv = acc;
                }
                if li + 1 < model.extractor.len() {
                    for v in z.iter_mut() {
                        *v = v.tanh();
                    }
                }
                a = z;
            }
            for c in 0..model.class_count() {
                let mut logit = model.head.bias[c];
                for (j, &av) in a.iter().enumerate() {
                    logit += av * model.head.weights[[j, c]];
                }
                assert!(
                    (logit - pass.logits[[i, c]]).abs() < 1e-9,
                    "sample {i} class {c}: {logit} vs {}",
                    pass.logits[[i, c]]
                );
            }
        }
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let model = toy_model(1, &[4, 3], 2);
        let batch = toy_batch(1, 3, 5, &[0, 1]);
        assert!(matches!(forward(&model, &batch), Err(Error::Config(_))));
    }

    #[test]
    fn supervised_loss_uniform_logits_is_ln_c() {
        let logits = Array2::zeros((3, 10));
        let loss = supervised_loss(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10.0_f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn supervised_loss_saturated_logits_vanish() {
        let mut logits = Array2::zeros((2, 4));
        logits[[0, 1]] = 1000.0;
        logits[[1, 3]] = 1000.0;
        let loss = supervised_loss(&logits, &[1, 3]).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn supervised_loss_matches_per_sample_oracle() {
        let mut rng = stream(21, &[0]);
        let logits = Array2::from_shape_fn((16, 7), |_| standard_normal(&mut rng) * 3.0);
        let labels: Vec<usize> = (0..16).map(|i| (i * 3) % 7).collect();
        let loss = supervised_loss(&logits, &labels).unwrap();

        let mut expect = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row: Vec<f64> = logits.row(i).to_vec();
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[label].exp() / denom).ln();
        }
        expect /= labels.len() as f64;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn supervised_loss_rejects_out_of_range_label() {
        let logits = Array2::zeros((1, 4));
        assert!(matches!(
            supervised_loss(&logits, &[4]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn supervised_loss_shift_invariant() {
        let mut rng = stream(22, &[0]);
        for _ in 0..50 {
            let logits = Array2::from_shape_fn((4, 5), |_| standard_normal(&mut rng) * 2.0);
            let labels = vec![0, 2, 4, 1];
            let base = supervised_loss(&logits, &labels).unwrap();
            let shift = standard_normal(&mut rng) * 10.0;
            let shifted = supervised_loss(&logits.mapv(|v| v + shift), &labels).unwrap();
            assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
        }
    }

    #[test]
    fn anchor_loss_zero_when_features_equal_anchors() {
        let mut anchors = FeatureAnchorSet::new(0);
        anchors.insert(0, array![1.0, 2.0]);
        anchors.insert(1, array![-1.0, 0.5]);
        let features = array![[1.0, 2.0], [-1.0, 0.5], [1.0, 2.0]];
        let loss = anchor_loss(&features, &[0, 1, 0], &anchors).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn anchor_loss_unit_distance() {
        let mut anchors = FeatureAnchorSet::new(0);
        anchors.insert(0, array![0.0, 0.0]);
        let features = array![[1.0, 0.0]];
        assert_eq!(anchor_loss(&features, &[0], &anchors).unwrap(), 1.0);
    }

    #[test]
    fn anchor_loss_matches_elementwise_oracle() {
        let mut rng = stream(30, &[0]);
        let anchors = toy_anchors(31, &[0, 1, 2], 4);
        let features = Array2::from_shape_fn((9, 4), |_| standard_normal(&mut rng));
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let loss = anchor_loss(&features, &labels, &anchors).unwrap();

        let mut expect = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let anchor = anchors.get(label).unwrap();
            for j in 0..4 {
                let d = features[[i, j]] - anchor[j];
                expect += d * d;
            }
        }
        expect /= labels.len() as f64;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn anchor_loss_missing_anchor_is_protocol_error() {
        let anchors = toy_anchors(1, &[0], 2);
        let features = array![[0.0, 0.0]];
        assert!(matches!(
            anchor_loss(&features, &[3], &anchors),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn backward_zero_lambda_gives_zero_anchor_grads() {
        let model = toy_model(40, &[3, 4, 2], 5);
        let anchors = toy_anchors(41, &[0, 1], 2);
        let batch = toy_batch(42, 6, 3, &[0, 1]);
        let pass = forward(&model, &batch).unwrap();
        let grads = backward(&model, &pass, &batch, &anchors, 0.0).unwrap();
        for (_, g) in &grads.anchors {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    fn assert_grads_close(analytic: &Gradients, numeric: &Gradients) {
        let check = |a: f64, n: f64, what: &str| {
            let err = (a - n).abs();
            let tol = 1e-5 * a.abs().max(n.abs()) + 1e-8;
            assert!(err <= tol, "{what}: analytic {a} vs numeric {n} (err {err})");
        };
        for (li, ((aw, ab), (nw, nb))) in
            analytic.extractor.iter().zip(&numeric.extractor).enumerate()
        {
            for (a, n) in aw.iter().zip(nw.iter()) {
                check(*a, *n, &format!("extractor[{li}].w"));
            }
            for (a, n) in ab.iter().zip(nb.iter()) {
                check(*a, *n, &format!("extractor[{li}].b"));
            }
        }
        for (a, n) in analytic.head.0.iter().zip(numeric.head.0.iter()) {
            check(*a, *n, "head.w");
        }
        for (a, n) in analytic.head.1.iter().zip(numeric.head.1.iter()) {
            check(*a, *n, "head.b");
        }
        for (class, ag) in &analytic.anchors {
            let ng = &numeric.anchors[class];
            for (a, n) in ag.iter().zip(ng.iter()) {
                check(*a, *n, &format!("anchor[{class}]"));
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..3u64 {
            let model = toy_model(50 + seed, &[4, 5, 3], 4);
            let anchors = toy_anchors(60 + seed, &[0, 1, 2, 3], 3);
            let batch = toy_batch(70 + seed, 8, 4, &[0, 1, 2, 3]);
            let pass = forward(&model, &batch).unwrap();
            let analytic = backward(&model, &pass, &batch, &anchors, 0.7).unwrap();
            let numeric = finite_difference_grads(&model, &anchors, &batch, 0.7, 1e-5).unwrap();
            assert_grads_close(&analytic, &numeric);
        }
    }

    #[test]
    fn gradient_norm_decreases_on_convex_instance() {
        // Identity extractor (no layers): the head alone on cross-entropy is
        // convex, so GD with a small step has non-increasing gradient norms.
        let mut rng = stream(80, &[0]);
        let head = DenseLayer::seeded(2, 2, &mut rng);
        let mut model = ClientModel::new(vec![], head).unwrap();
        let mut inputs = Array2::zeros((8, 2));
        let mut labels = Vec::new();
        for i in 0..8 {
            let side = if i % 2 == 0 { 1.0 } else { -1.0 };
            inputs[[i, 0]] = side * 2.0 + 0.1 * standard_normal(&mut rng);
            inputs[[i, 1]] = 0.1 * standard_normal(&mut rng);
            labels.push(if i % 2 == 0 { 0 } else { 1 });
        }
        let batch = Batch::new(inputs, labels).unwrap();
        let anchors = FeatureAnchorSet::new(0);

        let mut prev_norm = f64::INFINITY;
        for _ in 0..30 {
            let pass = forward(&model, &batch).unwrap();
            let grads = backward(&model, &pass, &batch, &anchors, 0.0).unwrap();
            let norm = grads
                .head
                .0
                .iter()
                .chain(grads.head.1.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            assert!(norm <= prev_norm + 1e-12, "{norm} > {prev_norm}");
            prev_norm = norm;
            let mut dummy = FeatureAnchorSet::new(0);
            apply_step(&mut model, &mut dummy, &grads, 0.05, false);
        }
    }

    #[test]
    fn local_train_zero_step_is_identity() {
        let model = toy_model(90, &[3, 4, 2], 3);
        let anchors = toy_anchors(91, &[0, 1, 2], 2);
        let batch = toy_batch(92, 10, 3, &[0, 1, 2]);
        let config = LocalTrainConfig {
            learning_rate: 0.0,
            local_rounds: 3,
            batch_size: 4,
            lambda: 0.5,
            anchors_learnable: true,
        };
        let (m2, a2, trace) = local_train(
            &model,
            &anchors,
            &batch.inputs,
            &batch.labels,
            &config,
            &mut stream(93, &[0]),
        )
        .unwrap();
        assert_eq!(m2, model);
        assert_eq!(a2, anchors);
        assert_eq!(trace.len(), 9); // 3 epochs x ceil(10/4) batches
    }

    #[test]
    fn local_train_reduces_to_plain_gd_step() {
        let model = toy_model(100, &[3, 4, 2], 3);
        let anchors = toy_anchors(101, &[0, 1, 2], 2);
        let batch = toy_batch(102, 6, 3, &[0, 1, 2]);
        let config = LocalTrainConfig {
            learning_rate: 0.1,
            local_rounds: 1,
            batch_size: 6,
            lambda: 0.0,
            anchors_learnable: true,
        };
        let (trained, _, _) = local_train(
            &model,
            &anchors,
            &batch.inputs,
            &batch.labels,
            &config,
            &mut stream(103, &[0]),
        )
        .unwrap();

        // Full batch means the shuffle only permutes rows; the step is the
        // same up to floating-point reassociation of the batch sums.
        let pass = forward(&model, &batch).unwrap();
        let grads = backward(&model, &pass, &batch, &anchors, 0.0).unwrap();
        let mut expect = model.clone();
        let mut dummy = anchors.clone();
        apply_step(&mut expect, &mut dummy, &grads, 0.1, true);
        for (got, want) in trained.extractor.iter().zip(&expect.extractor) {
            for (a, b) in got.weights.iter().zip(want.weights.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            for (a, b) in got.bias.iter().zip(want.bias.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
        for (a, b) in trained.head.weights.iter().zip(expect.head.weights.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (a, b) in trained.head.bias.iter().zip(expect.head.bias.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn local_train_separable_blobs_reach_high_accuracy() {
        let mut rng = stream(110, &[0]);
        let n_per = 20;
        let mut inputs = Array2::zeros((2 * n_per, 2));
        let mut labels = Vec::new();
        for i in 0..2 * n_per {
            let class = i / n_per;
            let center = if class == 0 { [3.0, 0.0] } else { [-3.0, 0.0] };
            inputs[[i, 0]] = center[0] + standard_normal(&mut rng) * 0.5;
            inputs[[i, 1]] = center[1] + standard_normal(&mut rng) * 0.5;
            labels.push(class);
        }
        let model = toy_model(111, &[2, 8, 4], 2);
        let anchors = toy_anchors(112, &[0, 1], 4);
        let config = LocalTrainConfig {
            learning_rate: 0.05,
            local_rounds: 50,
            batch_size: 8,
            lambda: 0.1,
            anchors_learnable: true,
        };
        let (trained, _, trace) =
            local_train(&model, &anchors, &inputs, &labels, &config, &mut stream(113, &[0]))
                .unwrap();
        assert!(trace.first().unwrap() > trace.last().unwrap());

        let batch = Batch::new(inputs, labels.clone()).unwrap();
        let pass = forward(&trained, &batch).unwrap();
        let correct = pass
            .logits
            .rows()
            .into_iter()
            .zip(&labels)
            .filter(|(row, &label)| {
                let argmax = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                argmax == label
            })
            .count();
        let acc = correct as f64 / labels.len() as f64;
        assert!(acc >= 0.95, "training accuracy {acc}");
    }

    #[test]
    fn local_train_is_deterministic_under_seed() {
        let model = toy_model(120, &[3, 4, 2], 3);
        let anchors = toy_anchors(121, &[0, 1, 2], 2);
        let batch = toy_batch(122, 12, 3, &[0, 1, 2]);
        let config = LocalTrainConfig {
            learning_rate: 0.05,
            local_rounds: 4,
            batch_size: 5,
            lambda: 0.3,
            anchors_learnable: true,
        };
        let run = |seed: u64| {
            local_train(
                &model,
                &anchors,
                &batch.inputs,
                &batch.labels,
                &config,
                &mut stream(seed, &[0]),
            )
            .unwrap()
        };
        let (m1, a1, t1) = run(7);
        let (m2, a2, t2) = run(7);
        assert_eq!(m1, m2);
        assert_eq!(a1, a2);
        assert_eq!(t1, t2);
        let (m3, _, _) = run(8);
        assert_ne!(m1, m3);
    }

    #[test]
    fn lambda_zero_never_moves_learnable_anchors() {
        let model = toy_model(130, &[3, 4, 2], 3);
        let anchors = toy_anchors(131, &[0, 1, 2], 2);
        let batch = toy_batch(132, 9, 3, &[0, 1, 2]);
        let config = LocalTrainConfig {
            learning_rate: 0.1,
            local_rounds: 3,
            batch_size: 4,
            lambda: 0.0,
            anchors_learnable: true,
        };
        let (_, trained_anchors, _) = local_train(
            &model,
            &anchors,
            &batch.inputs,
            &batch.labels,
            &config,
            &mut stream(133, &[0]),
        )
        .unwrap();
        assert_eq!(trained_anchors, anchors);
    }

    #[test]
    fn recompute_mode_sets_anchors_to_class_means() {
        let model = toy_model(140, &[3, 4, 2], 3);
        let anchors = toy_anchors(141, &[0, 1], 2);
        let batch = toy_batch(142, 8, 3, &[0, 1]);
        let config = LocalTrainConfig {
            learning_rate: 0.05,
            local_rounds: 2,
            batch_size: 4,
            lambda: 0.2,
            anchors_learnable: false,
        };
        let (trained, trained_anchors, _) = local_train(
            &model,
            &anchors,
            &batch.inputs,
            &batch.labels,
            &config,
            &mut stream(143, &[0]),
        )
        .unwrap();
        let expect = class_mean_anchors(&trained, &batch.inputs, &batch.labels, 0).unwrap();
        assert_eq!(trained_anchors, expect);
    }

    #[test]
    fn local_train_rejects_empty_dataset() {
        let model = toy_model(150, &[3, 2], 2);
        let anchors = toy_anchors(151, &[0], 2);
        let config = LocalTrainConfig {
            learning_rate: 0.1,
            local_rounds: 1,
            batch_size: 1,
            lambda: 0.0,
            anchors_learnable: true,
        };
        let inputs = Array2::zeros((0, 3));
        let err = local_train(&model, &anchors, &inputs, &[], &config, &mut stream(1, &[0]));
        assert!(matches!(err, Err(Error::Input(_))));
    }
}
