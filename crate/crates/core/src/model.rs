//! Configurable feedforward classifier with exact manual backpropagation,
//! SGD training, and extraction of the last-layer gradients a client would
//! share with the server.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::WindowSet;
use crate::error::{Error, Result};
use crate::numerics::{ce_logit_gradient, softmax, Matrix, SeededRng};

/// Hidden-layer activation. Rectifiers only: the weight-based attacks assume
/// nonnegative penultimate features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    /// Flattened window dimension (feature_dim * window_length).
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    #[serde(default)]
    pub hidden_activation: Activation,
    /// Training without a final bias is the defense-oriented variant; bias
    /// attacks refuse such updates.
    #[serde(default = "default_true")]
    pub final_layer_has_bias: bool,
}

fn default_true() -> bool {
    true
}

impl ModelArch {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Size("class count must be at least 2".into()));
        }
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Size("layer dimensions must be positive".into()));
        }
        Ok(())
    }

    pub fn penultimate_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((self.class_count, prev));
        dims
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    layers: Vec<Layer>,
    arch: ModelArch,
    trained_epochs: usize,
}

/// The data a client shares for one update: last-layer gradients averaged
/// over the batch (and over local steps when `steps_averaged > 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientUpdate {
    pub weight_grad: Matrix,
    pub bias_grad: Option<Vec<f64>>,
    pub declared_n: usize,
    pub steps_averaged: usize,
}

impl GradientUpdate {
    pub fn new(
        weight_grad: Matrix,
        bias_grad: Option<Vec<f64>>,
        declared_n: usize,
        steps_averaged: usize,
    ) -> Result<Self> {
        if let Some(b) = &bias_grad {
            if b.len() != weight_grad.rows() {
                return Err(Error::Size(format!(
                    "bias gradient length {} vs {} weight rows",
                    b.len(),
                    weight_grad.rows()
                )));
            }
        }
        if declared_n == 0 || steps_averaged == 0 {
            return Err(Error::Size("declared batch size and step count must be positive".into()));
        }
        Ok(Self {
            weight_grad,
            bias_grad,
            declared_n,
            steps_averaged,
        })
    }

    pub fn class_count(&self) -> usize {
        self.weight_grad.rows()
    }
}

/// Per-layer gradients from one backward pass.
#[derive(Clone, Debug)]
pub struct LayerGradients {
    pub weight: Matrix,
    pub bias: Option<Vec<f64>>,
}

/// Per-sample activations from a forward pass.
pub struct ForwardPass {
    /// Nonnegative penultimate activations, one per sample.
    pub penultimate: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

/// Initialize a model with fan-in-scaled uniform weights and zero biases.
pub fn init_model(arch: &ModelArch, rng: &mut SeededRng) -> Result<Model> {
    arch.validate()?;
    let mut layers = Vec::new();
    let dims = arch.layer_dims();
    let last = dims.len() - 1;
    for (l, (out_dim, in_dim)) in dims.into_iter().enumerate() {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let data: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = if l == last && !arch.final_layer_has_bias {
            None
        } else {
            Some(vec![0.0; out_dim])
        };
        layers.push(Layer {
            weight: Matrix::new(out_dim, in_dim, data)?,
            bias,
        });
    }
    Ok(Model {
        layers,
        arch: arch.clone(),
        trained_epochs: 0,
    })
}

impl Model {
    /// Build a model from explicit layers (used by tests and checkpoints).
    pub fn from_layers(arch: ModelArch, layers: Vec<Layer>, trained_epochs: usize) -> Result<Self> {
        arch.validate()?;
        let dims = arch.layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::Size(format!(
                "expected {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (layer, (out_dim, in_dim)) in layers.iter().zip(&dims) {
            if layer.weight.rows() != *out_dim || layer.weight.cols() != *in_dim {
                return Err(Error::Size("layer shape does not chain with arch".into()));
            }
            if let Some(b) = &layer.bias {
                if b.len() != *out_dim {
                    return Err(Error::Size("bias length mismatch".into()));
                }
            }
        }
        Ok(Model {
            layers,
            arch,
            trained_epochs,
        })
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    /// Final classification layer (the attack surface).
    pub fn final_layer(&self) -> (&Matrix, Option<&[f64]>) {
        let layer = self.layers.last().expect("models have a final layer");
        (&layer.weight, layer.bias.as_deref())
    }

    /// Forward pass over a batch, returning penultimate activations and
    /// softmax probabilities per sample.
    pub fn forward(&self, batch: &[Vec<f64>]) -> Result<ForwardPass> {
        let mut penultimate = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        for features in batch {
            let acts = self.activations(features)?;
            let logits = acts.last().expect("activation chain non-empty");
            probs.push(softmax(logits)?);
            penultimate.push(acts[acts.len() - 2].clone());
        }
        Ok(ForwardPass { penultimate, probs })
    }

    /// All activations for one sample: input, hidden layers (post-ReLU), and
    /// final logits.
    fn activations(&self, features: &[f64]) -> Result<Vec<Vec<f64>>> {
        if features.len() != self.arch.input_dim {
            return Err(Error::Size(format!(
                "input dimension {} vs arch {}",
                features.len(),
                self.arch.input_dim
            )));
        }
        let mut acts = vec![features.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(acts.last().expect("non-empty"))?;
            if let Some(bias) = &layer.bias {
                for (zi, bi) in z.iter_mut().zip(bias) {
                    *zi += bi;
                }
            }
            if l != last {
                for zi in &mut z {
                    if *zi < 0.0 {
                        *zi = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        Ok(acts)
    }

    /// Mean cross-entropy loss of a batch.
    pub fn batch_loss(&self, batch: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pass = self.forward(batch)?;
        let mut loss = 0.0;
        for (probs, &label) in pass.probs.iter().zip(labels) {
            if label >= probs.len() {
                return Err(Error::Index {
                    index: label,
                    len: probs.len(),
                });
            }
            loss -= probs[label].ln();
        }
        Ok(loss / labels.len() as f64)
    }

    /// Fraction of samples whose argmax probability matches the label.
    pub fn accuracy(&self, batch: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        let pass = self.forward(batch)?;
        let mut hits = 0usize;
        for (probs, &label) in pass.probs.iter().zip(labels) {
            let argmax = probs
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            hits += usize::from(argmax == label);
        }
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Batch-mean gradients for every layer, plus the mean loss.
    pub fn backprop(&self, batch: &[Vec<f64>], labels: &[usize]) -> Result<(Vec<LayerGradients>, f64)> {
        if batch.is_empty() || batch.len() != labels.len() {
            return Err(Error::Size(format!(
                "batch of {} samples with {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let inv_n = 1.0 / batch.len() as f64;
        let mut grads: Vec<LayerGradients> = self
            .layers
            .iter()
            .map(|layer| LayerGradients {
                weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
                bias: layer.bias.as_ref().map(|b| vec![0.0; b.len()]),
            })
            .collect();
        let mut loss = 0.0;

        for (features, &label) in batch.iter().zip(labels) {
            let acts = self.activations(features)?;
            let logits = acts.last().expect("non-empty");
            let probs = softmax(logits)?;
            if label >= probs.len() {
                return Err(Error::Index {
                    index: label,
                    len: probs.len(),
                });
            }
            loss -= probs[label].ln() * inv_n;

            // delta starts as the logit gradient and walks backwards.
            let mut delta = ce_logit_gradient(&probs, label)?;
            for l in (0..self.layers.len()).rev() {
                let input = &acts[l];
                grads[l].weight.add_outer(&delta, input, inv_n);
                if let Some(bias) = &mut grads[l].bias {
                    for (bg, d) in bias.iter_mut().zip(&delta) {
                        *bg += d * inv_n;
                    }
                }
                if l > 0 {
                    let mut upstream = self.layers[l].weight.transpose_matvec(&delta)?;
                    // ReLU mask: activations are zero exactly where z <= 0.
                    for (u, a) in upstream.iter_mut().zip(input) {
                        if *a <= 0.0 {
                            *u = 0.0;
                        }
                    }
                    delta = upstream;
                }
            }
        }
        Ok((grads, loss))
    }

    /// The single-step update a client would share: batch-mean gradients of
    /// the final layer.
    pub fn last_layer_gradients(&self, batch: &[Vec<f64>], labels: &[usize]) -> Result<GradientUpdate> {
        let (grads, _) = self.backprop(batch, labels)?;
        let last = grads.into_iter().next_back().expect("final layer exists");
        GradientUpdate::new(last.weight, last.bias, batch.len(), 1)
    }

    fn apply_step(&mut self, grads: &[LayerGradients], learning_rate: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            let w = layer.weight.data_mut();
            for (wv, gv) in w.iter_mut().zip(grad.weight.data()) {
                *wv -= learning_rate * gv;
            }
            if let (Some(bias), Some(bias_grad)) = (&mut layer.bias, &grad.bias) {
                for (bv, gv) in bias.iter_mut().zip(bias_grad) {
                    *bv -= learning_rate * gv;
                }
            }
        }
    }
}

/// Train a copy of `model` on the window set with plain SGD; the input model
/// is untouched.
pub fn sgd_train(
    model: &Model,
    windows: &WindowSet,
    epochs: usize,
    learning_rate: f64,
    batch_size: usize,
    rng: &mut SeededRng,
) -> Result<Model> {
    if learning_rate <= 0.0 || !learning_rate.is_finite() {
        return Err(Error::Domain(format!("learning rate {learning_rate} must be positive")));
    }
    if batch_size == 0 {
        return Err(Error::Size("training batch size must be positive".into()));
    }
    if windows.is_empty() {
        return Err(Error::Size("cannot train on an empty window set".into()));
    }
    let features: Vec<Vec<f64>> = windows
        .windows
        .iter()
        .map(|w| w.flat_features().to_vec())
        .collect();
    let labels = windows.labels();

    let mut trained = model.clone();
    let mut order: Vec<usize> = (0..features.len()).collect();
    for epoch in 0..epochs {
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Vec<f64>> = chunk.iter().map(|&i| features[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (grads, loss) = trained.backprop(&batch, &batch_labels).map_err(|e| {
                Error::Numeric(format!("training diverged at epoch {epoch}: {e}"))
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}: non-finite loss"
                )));
            }
            epoch_loss += loss * chunk.len() as f64;
            trained.apply_step(&grads, learning_rate);
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at epoch {epoch}: non-finite epoch loss"
            )));
        }
    }
    trained.trained_epochs += epochs;
    Ok(trained)
}

/// One labeled mini-batch, already flattened for the classifier.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

/// FedAvg-style update: run one SGD step per mini-batch on a private clone
/// and share the mean of the recorded last-layer gradients. `declared_n` is
/// the total number of samples across steps.
pub fn multi_step_update(
    model: &Model,
    minibatches: &[LabeledBatch],
    learning_rate: f64,
) -> Result<GradientUpdate> {
    if minibatches.is_empty() {
        return Err(Error::Size("multi-step update needs at least one mini-batch".into()));
    }
    let step_size = minibatches[0].features.len();
    if step_size == 0 {
        return Err(Error::Size("mini-batches must be non-empty".into()));
    }
    if minibatches
        .iter()
        .any(|mb| mb.features.len() != step_size || mb.labels.len() != step_size)
    {
        return Err(Error::Size("mini-batches must all have equal size".into()));
    }
    if learning_rate < 0.0 || !learning_rate.is_finite() {
        return Err(Error::Domain(format!("learning rate {learning_rate} must be nonnegative")));
    }

    let steps = minibatches.len();
    let mut local = model.clone();
    let (final_rows, final_cols) = {
        let (w, _) = model.final_layer();
        (w.rows(), w.cols())
    };
    let mut weight_sum = Matrix::zeros(final_rows, final_cols);
    let mut bias_sum = model.final_layer().1.map(|b| vec![0.0; b.len()]);

    for mb in minibatches {
        let (grads, _) = local.backprop(&mb.features, &mb.labels)?;
        let last = grads.last().expect("final layer exists");
        for (acc, g) in weight_sum.data_mut().iter_mut().zip(last.weight.data()) {
            *acc += g;
        }
        if let (Some(acc), Some(bias)) = (&mut bias_sum, &last.bias) {
            for (a, g) in acc.iter_mut().zip(bias) {
                *a += g;
            }
        }
        local.apply_step(&grads, learning_rate);
    }

    let inv_s = 1.0 / steps as f64;
    weight_sum.scale(inv_s);
    if let Some(bias) = &mut bias_sum {
        for b in bias.iter_mut() {
            *b *= inv_s;
        }
    }
    GradientUpdate::new(weight_sum, bias_sum, steps * step_size, steps)
}

/// Save a checkpoint as a JSON tensor container with shape metadata.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| Error::Numeric(format!("checkpoint serialization: {e}")))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let model: Model =
        serde_json::from_str(&raw).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
    Model::from_layers(model.arch.clone(), model.layers.clone(), model.trained_epochs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sliding_windows, LabeledStream};
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch(input: usize, hidden: Vec<usize>, k: usize) -> ModelArch {
        ModelArch {
            input_dim: input,
            hidden_dims: hidden,
            class_count: k,
            hidden_activation: Activation::Relu,
            final_layer_has_bias: true,
        }
    }

    fn random_batch(rng: &mut SeededRng, n: usize, dim: usize, k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
        let batch: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        (batch, labels)
    }

    #[test]
    fn init_zeroes_final_bias_and_is_deterministic() {
        let arch = small_arch(4, vec![3], 3);
        let a = init_model(&arch, &mut SeededRng::new(9)).unwrap();
        let b = init_model(&arch, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        let (_, bias) = a.final_layer();
        assert_eq!(bias.unwrap(), &[0.0, 0.0, 0.0]);
        assert_eq!(a.trained_epochs(), 0);
    }

    #[test]
    fn fresh_model_probabilities_are_near_uniform() {
        let arch = small_arch(20, vec![16, 8], 5);
        let model = init_model(&arch, &mut SeededRng::new(41)).unwrap();
        let mut rng = SeededRng::new(42);
        let (batch, _) = random_batch(&mut rng, 1000, 20, 5);
        let pass = model.forward(&batch).unwrap();
        let mean_dev = pass
            .probs
            .iter()
            .map(|p| {
                p.iter()
                    .map(|v| (v - 0.2).abs())
                    .fold(0.0f64, f64::max)
            })
            .sum::<f64>()
            / 1000.0;
        assert!(mean_dev < 0.1, "mean max deviation {mean_dev}");
    }

    #[test]
    fn zero_final_layer_gives_uniform_probs() {
        let arch = small_arch(3, vec![], 4);
        let model = Model::from_layers(
            arch.clone(),
            vec![Layer {
                weight: Matrix::zeros(4, 3),
                bias: Some(vec![0.0; 4]),
            }],
            0,
        )
        .unwrap();
        let pass = model.forward(&[vec![0.3, -1.0, 2.0]]).unwrap();
        for p in &pass.probs[0] {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_matches_hand_computation() {
        let arch = small_arch(2, vec![2], 2);
        let model = Model::from_layers(
            arch,
            vec![
                Layer {
                    weight: Matrix::from_rows(vec![vec![1.0, -1.0], vec![0.5, 0.5]]).unwrap(),
                    bias: Some(vec![0.0, -1.0]),
                },
                Layer {
                    weight: Matrix::from_rows(vec![vec![1.0, 2.0], vec![-1.0, 0.0]]).unwrap(),
                    bias: Some(vec![0.5, 0.0]),
                },
            ],
            0,
        )
        .unwrap();
        let pass = model.forward(&[vec![1.0, 2.0]]).unwrap();
        // z1 = [1-2, 0.5+1-1] = [-1, 0.5] -> h = [0, 0.5]
        assert_eq!(pass.penultimate[0], vec![0.0, 0.5]);
        // logits = [2*0.5+0.5, 0] = [1.5, 0]
        let e = (1.5f64).exp();
        let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!((pass.probs[0][0] - expected[0]).abs() < 1e-12);
        assert!((pass.probs[0][1] - expected[1]).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_give_identical_rows() {
        let arch = small_arch(6, vec![4], 3);
        let model = init_model(&arch, &mut SeededRng::new(3)).unwrap();
        let x = vec![0.1, -0.2, 0.3, 1.0, -1.0, 0.5];
        let pass = model.forward(&[x.clone(), x.clone(), x]).unwrap();
        assert_eq!(pass.probs[0], pass.probs[1]);
        assert_eq!(pass.probs[1], pass.probs[2]);
    }

    #[test]
    fn single_sample_bias_gradient_matches_logit_gradient() {
        // Zero final layer -> uniform probs -> bias grad = probs - e_y.
        let arch = small_arch(2, vec![], 3);
        let model = Model::from_layers(
            arch,
            vec![Layer {
                weight: Matrix::zeros(3, 2),
                bias: Some(vec![0.0; 3]),
            }],
            0,
        )
        .unwrap();
        let update = model
            .last_layer_gradients(&[vec![1.0, 1.0]], &[0])
            .unwrap();
        let bias = update.bias_grad.unwrap();
        assert!((bias[0] + 2.0 / 3.0).abs() < 1e-15);
        assert!((bias[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((bias[2] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bias_gradient_rows_sum_to_zero() {
        let arch = small_arch(8, vec![6], 4);
        let model = init_model(&arch, &mut SeededRng::new(13)).unwrap();
        let mut rng = SeededRng::new(14);
        for _ in 0..20 {
            let (batch, labels) = random_batch(&mut rng, 12, 8, 4);
            let update = model.last_layer_gradients(&batch, &labels).unwrap();
            let sum: f64 = update.bias_grad.unwrap().iter().sum();
            assert!(sum.abs() <= 1e-12, "bias gradient sum {sum}");
        }
    }

    #[test]
    fn label_exclusive_batch_sign_structure() {
        let arch = small_arch(8, vec![6], 4);
        let model = init_model(&arch, &mut SeededRng::new(23)).unwrap();
        let mut rng = SeededRng::new(24);
        let (batch, _) = random_batch(&mut rng, 10, 8, 4);
        let labels = vec![2usize; 10];
        let update = model.last_layer_gradients(&batch, &labels).unwrap();
        let bias = update.bias_grad.unwrap();
        assert!(bias[2] < 0.0);
        for (i, b) in bias.iter().enumerate() {
            if i != 2 {
                assert!(*b >= 0.0);
            }
        }
    }

    #[test]
    fn untrained_bias_gradient_tracks_label_histogram() {
        let arch = small_arch(10, vec![8], 5);
        let model = init_model(&arch, &mut SeededRng::new(29)).unwrap();
        let mut rng = SeededRng::new(30);
        let mut total_dev = 0.0;
        let mut count = 0;
        for _ in 0..100 {
            let n = 24;
            let (batch, labels) = random_batch(&mut rng, n, 10, 5);
            let update = model.last_layer_gradients(&batch, &labels).unwrap();
            let bias = update.bias_grad.unwrap();
            for i in 0..5 {
                let lambda = labels.iter().filter(|&&l| l == i).count() as f64;
                total_dev += (bias[i] - (0.2 - lambda / n as f64)).abs();
                count += 1;
            }
        }
        let mean_dev = total_dev / count as f64;
        assert!(mean_dev <= 0.05, "mean deviation {mean_dev}");
    }

    fn finite_difference_check(model: &Model, batch: &[Vec<f64>], labels: &[usize]) {
        let (grads, _) = model.backprop(batch, labels).unwrap();
        let h = 1e-5;
        for l in 0..model.layers().len() {
            let weight = &model.layers()[l].weight;
            for r in 0..weight.rows() {
                for c in 0..weight.cols() {
                    let mut plus = model.clone();
                    plus.layers[l].weight.set(r, c, weight.get(r, c) + h);
                    let mut minus = model.clone();
                    minus.layers[l].weight.set(r, c, weight.get(r, c) - h);
                    let fd = (plus.batch_loss(batch, labels).unwrap()
                        - minus.batch_loss(batch, labels).unwrap())
                        / (2.0 * h);
                    let analytic = grads[l].weight.get(r, c);
                    assert!(
                        (analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()) + 1e-8,
                        "layer {l} weight ({r},{c}): analytic {analytic} vs fd {fd}"
                    );
                }
            }
            if let Some(bias) = &model.layers()[l].bias {
                for i in 0..bias.len() {
                    let mut plus = model.clone();
                    plus.layers[l].bias.as_mut().unwrap()[i] += h;
                    let mut minus = model.clone();
                    minus.layers[l].bias.as_mut().unwrap()[i] -= h;
                    let fd = (plus.batch_loss(batch, labels).unwrap()
                        - minus.batch_loss(batch, labels).unwrap())
                        / (2.0 * h);
                    let analytic = grads[l].bias.as_ref().unwrap()[i];
                    assert!(
                        (analytic - fd).abs() <= 1e-4 * analytic.abs().max(fd.abs()) + 1e-8,
                        "layer {l} bias {i}: analytic {analytic} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small_arch(6, vec![5], 3);
        let model = init_model(&arch, &mut SeededRng::new(51)).unwrap();
        let mut rng = SeededRng::new(52);
        let (batch, labels) = random_batch(&mut rng, 8, 6, 3);
        finite_difference_check(&model, &batch, &labels);
    }

    #[test]
    fn gradients_match_finite_differences_without_final_bias() {
        let mut arch = small_arch(5, vec![4], 3);
        arch.final_layer_has_bias = false;
        let model = init_model(&arch, &mut SeededRng::new(61)).unwrap();
        let mut rng = SeededRng::new(62);
        let (batch, labels) = random_batch(&mut rng, 6, 5, 3);
        assert!(model.last_layer_gradients(&batch, &labels).unwrap().bias_grad.is_none());
        finite_difference_check(&model, &batch, &labels);
    }

    fn separable_windows(rng: &mut SeededRng) -> WindowSet {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let class = i % 2;
            let center = if class == 0 { 2.0 } else { -2.0 };
            let z: f64 = StandardNormal.sample(rng);
            features.push(vec![center + 0.3 * z, center - 0.3 * z]);
            labels.push(class);
        }
        let stream = LabeledStream::new("train", 50, 2, features, labels).unwrap();
        sliding_windows(&stream, 1, 0.0).unwrap()
    }

    #[test]
    fn zero_epoch_training_is_identity() {
        let arch = small_arch(2, vec![4], 2);
        let model = init_model(&arch, &mut SeededRng::new(71)).unwrap();
        let mut rng = SeededRng::new(72);
        let windows = separable_windows(&mut rng);
        let trained = sgd_train(&model, &windows, 0, 0.1, 16, &mut rng).unwrap();
        assert_eq!(model, trained);
    }

    #[test]
    fn training_fits_a_separable_task() {
        let arch = small_arch(2, vec![4], 2);
        let model = init_model(&arch, &mut SeededRng::new(81)).unwrap();
        let mut rng = SeededRng::new(82);
        let windows = separable_windows(&mut rng);
        let trained = sgd_train(&model, &windows, 50, 0.1, 16, &mut rng).unwrap();
        assert_eq!(trained.trained_epochs(), 50);
        let features: Vec<Vec<f64>> = windows
            .windows
            .iter()
            .map(|w| w.flat_features().to_vec())
            .collect();
        let acc = trained.accuracy(&features, &windows.labels()).unwrap();
        assert!(acc >= 0.95, "training accuracy {acc}");
        // Loss should not exceed the starting loss.
        let start = model.batch_loss(&features, &windows.labels()).unwrap();
        let end = trained.batch_loss(&features, &windows.labels()).unwrap();
        assert!(end <= start * 1.05, "loss went from {start} to {end}");
    }

    #[test]
    fn divergent_training_reports_the_epoch() {
        let arch = small_arch(2, vec![4], 2);
        let model = init_model(&arch, &mut SeededRng::new(91)).unwrap();
        let mut rng = SeededRng::new(92);
        let windows = separable_windows(&mut rng);
        match sgd_train(&model, &windows, 30, 1e12, 16, &mut rng) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "message: {msg}"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_step_multi_step_equals_plain_gradients() {
        let arch = small_arch(6, vec![5], 3);
        let model = init_model(&arch, &mut SeededRng::new(101)).unwrap();
        let mut rng = SeededRng::new(102);
        let (batch, labels) = random_batch(&mut rng, 9, 6, 3);
        let single = model.last_layer_gradients(&batch, &labels).unwrap();
        let multi = multi_step_update(
            &model,
            &[LabeledBatch {
                features: batch,
                labels,
            }],
            0.05,
        )
        .unwrap();
        assert_eq!(single.weight_grad, multi.weight_grad);
        assert_eq!(single.bias_grad, multi.bias_grad);
        assert_eq!(multi.steps_averaged, 1);
    }

    #[test]
    fn zero_learning_rate_multi_step_averages_static_gradients() {
        let arch = small_arch(4, vec![4], 3);
        let model = init_model(&arch, &mut SeededRng::new(111)).unwrap();
        let mut rng = SeededRng::new(112);
        let mbs: Vec<LabeledBatch> = (0..3)
            .map(|_| {
                let (features, labels) = random_batch(&mut rng, 5, 4, 3);
                LabeledBatch { features, labels }
            })
            .collect();
        let update = multi_step_update(&model, &mbs, 0.0).unwrap();
        // Reference: mean of the three single-step gradients on the unchanged model.
        let mut expect_w = Matrix::zeros(3, 4);
        let mut expect_b = vec![0.0; 3];
        for mb in &mbs {
            let u = model.last_layer_gradients(&mb.features, &mb.labels).unwrap();
            for (acc, g) in expect_w.data_mut().iter_mut().zip(u.weight_grad.data()) {
                *acc += g / 3.0;
            }
            for (acc, g) in expect_b.iter_mut().zip(&u.bias_grad.unwrap()) {
                *acc += g / 3.0;
            }
        }
        for (got, want) in update.weight_grad.data().iter().zip(expect_w.data()) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in update.bias_grad.unwrap().iter().zip(&expect_b) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(update.declared_n, 15);
        assert_eq!(update.steps_averaged, 3);
    }

    #[test]
    fn multi_step_matches_straight_line_reference() {
        let arch = small_arch(5, vec![4], 3);
        let model = init_model(&arch, &mut SeededRng::new(121)).unwrap();
        let mut rng = SeededRng::new(122);
        let mbs: Vec<LabeledBatch> = (0..5)
            .map(|_| {
                let (features, labels) = random_batch(&mut rng, 4, 5, 3);
                LabeledBatch { features, labels }
            })
            .collect();
        let lr = 0.01;
        let update = multi_step_update(&model, &mbs, lr).unwrap();

        // Straight-line oracle: explicit clone-step-record loop.
        let mut reference = model.clone();
        let mut w_acc = Matrix::zeros(3, 4);
        let mut b_acc = vec![0.0; 3];
        for mb in &mbs {
            let (grads, _) = reference.backprop(&mb.features, &mb.labels).unwrap();
            let last = grads.last().unwrap();
            for (acc, g) in w_acc.data_mut().iter_mut().zip(last.weight.data()) {
                *acc += g / 5.0;
            }
            for (acc, g) in b_acc.iter_mut().zip(last.bias.as_ref().unwrap()) {
                *acc += g / 5.0;
            }
            reference.apply_step(&grads, lr);
        }
        for (got, want) in update.weight_grad.data().iter().zip(w_acc.data()) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in update.bias_grad.unwrap().iter().zip(&b_acc) {
            assert!((got - want).abs() < 1e-15);
        }
        // The caller's model is untouched.
        let (fresh, _) = model.backprop(&mbs[0].features, &mbs[0].labels).unwrap();
        let again = init_model(model.arch(), &mut SeededRng::new(121)).unwrap();
        let (expected, _) = again.backprop(&mbs[0].features, &mbs[0].labels).unwrap();
        assert_eq!(fresh.last().unwrap().weight, expected.last().unwrap().weight);
    }

    #[test]
    fn unequal_minibatch_sizes_rejected() {
        let arch = small_arch(3, vec![], 2);
        let model = init_model(&arch, &mut SeededRng::new(131)).unwrap();
        let mut rng = SeededRng::new(132);
        let (f1, l1) = random_batch(&mut rng, 4, 3, 2);
        let (f2, l2) = random_batch(&mut rng, 3, 3, 2);
        let mbs = vec![
            LabeledBatch { features: f1, labels: l1 },
            LabeledBatch { features: f2, labels: l2 },
        ];
        assert!(matches!(
            multi_step_update(&model, &mbs, 0.01),
            Err(Error::Size(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let arch = small_arch(4, vec![3], 2);
        let model = init_model(&arch, &mut SeededRng::new(141)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let arch = small_arch(4, vec![3], 2);
        let model = init_model(&arch, &mut SeededRng::new(151)).unwrap();
        assert!(matches!(
            model.forward(&[vec![1.0, 2.0]]),
            Err(Error::Size(_))
        ));
    }
}
