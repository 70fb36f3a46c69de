//! Multilayer perceptron with ReLU hidden layers, a sigmoid output unit,
//! optional inverted dropout, hand-written backpropagation and plain SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Neurons per layer; the last entry is the single output unit.
    pub layer_sizes: Vec<usize>,
    /// 1-based index of the hidden layer whose output passes through dropout.
    pub dropout_after_layer: Option<usize>,
    pub dropout_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl MlpConfig {
    /// 64-32-1 network, dropout after the second hidden layer, lr 0.01.
    pub fn new(input_dim: usize) -> Self {
        MlpConfig {
            input_dim,
            layer_sizes: vec![64, 32, 1],
            dropout_after_layer: Some(2),
            dropout_rate: 0.5,
            learning_rate: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim: must be positive"));
        }
        match self.layer_sizes.last() {
            None => return Err(Error::config("layer_sizes: must not be empty")),
            Some(&1) => {}
            Some(&n) => {
                return Err(Error::config(format!(
                    "layer_sizes: output layer must have exactly 1 neuron, got {n}"
                )))
            }
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("layer_sizes: entries must be positive"));
        }
        if let Some(l) = self.dropout_after_layer {
            if l == 0 || l >= self.layer_sizes.len() {
                return Err(Error::config(format!(
                    "dropout_after_layer: {l} is not a hidden layer (valid: 1..={})",
                    self.layer_sizes.len() - 1
                )));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate: must lie in [0, 1)"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate: must be finite and non-negative"));
        }
        Ok(())
    }

    fn dropout_layer(&self) -> Option<usize> {
        self.dropout_after_layer
            .filter(|_| self.dropout_rate > 0.0)
            .map(|l| l - 1)
    }
}

/// Per-layer weight and bias gradients (or parameter deltas), shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientSet {
            weights: model
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Neuron counts per layer, read off the weight shapes.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.weights.iter().map(DenseMatrix::cols).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(DenseMatrix::len).sum()
    }
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Post-activation output of every layer (dropout applied); the last
    /// entry holds the sigmoid outputs as an n×1 matrix.
    pub activations: Vec<DenseMatrix>,
    /// Scaled dropout masks (0 or 1/(1-rate)) per layer, where dropout was applied.
    pub masks: Vec<Option<DenseMatrix>>,
    pub logits: Vec<f64>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpModel {
    config: MlpConfig,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy evaluated on logits, numerically stable.
pub fn mean_bce_from_logits(logits: &[f64], labels: &[u8]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // softplus(z) - y z
            let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
            softplus - f64::from(y) * z
        })
        .sum::<f64>()
        / n
}

impl MlpModel {
    /// Glorot-uniform weights, zero biases, seeded from `config.seed`.
    pub fn new(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut weights = Vec::with_capacity(config.layer_sizes.len());
        let mut biases = Vec::with_capacity(config.layer_sizes.len());
        let mut fan_in = config.input_dim;
        for &fan_out in &config.layer_sizes {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..=bound))
                .collect();
            weights.push(DenseMatrix::from_vec(fan_in, fan_out, data)?);
            biases.push(vec![0.0; fan_out]);
            fan_in = fan_out;
        }
        Ok(MlpModel {
            config,
            weights,
            biases,
            rng,
        })
    }

    /// Builds a model from explicit parameters. Shapes must chain from
    /// `config.input_dim` through `config.layer_sizes`.
    pub fn from_parameters(
        config: MlpConfig,
        weights: Vec<DenseMatrix>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = MlpModel {
            config,
            weights,
            biases,
            rng,
        };
        model.check_structure()?;
        Ok(model)
    }

    fn check_structure(&self) -> Result<()> {
        let sizes = &self.config.layer_sizes;
        if self.weights.len() != sizes.len() || self.biases.len() != sizes.len() {
            return Err(Error::shape(format!(
                "expected {} layers, got {} weight and {} bias entries",
                sizes.len(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        let mut fan_in = self.config.input_dim;
        for (l, &fan_out) in sizes.iter().enumerate() {
            if self.weights[l].shape() != (fan_in, fan_out) {
                return Err(Error::shape(format!(
                    "layer {l}: weights are {:?}, expected ({fan_in}, {fan_out})",
                    self.weights[l].shape()
                )));
            }
            if self.biases[l].len() != fan_out {
                return Err(Error::shape(format!(
                    "layer {l}: bias has length {}, expected {fan_out}",
                    self.biases[l].len()
                )));
            }
            fan_in = fan_out;
        }
        Ok(())
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.config.layer_sizes
    }

    /// Hidden neurons currently alive (the output unit is not counted).
    pub fn hidden_neuron_count(&self) -> usize {
        let sizes = &self.config.layer_sizes;
        sizes[..sizes.len() - 1].iter().sum()
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(DenseMatrix::len).sum()
    }

    /// Replaces weights and biases with another model's values. Shapes must match.
    pub fn copy_parameters_from(&mut self, weights: &[DenseMatrix], biases: &[Vec<f64>]) -> Result<()> {
        self.check_same_shapes(weights, biases)?;
        self.weights.clone_from_slice(weights);
        self.biases.clone_from_slice(biases);
        Ok(())
    }

    pub(crate) fn check_same_shapes(&self, weights: &[DenseMatrix], biases: &[Vec<f64>]) -> Result<()> {
        if weights.len() != self.weights.len() || biases.len() != self.biases.len() {
            return Err(Error::shape(format!(
                "layer count mismatch: model has {}, got {}",
                self.weights.len(),
                weights.len()
            )));
        }
        for (l, (mine, theirs)) in self.weights.iter().zip(weights).enumerate() {
            if mine.shape() != theirs.shape() {
                return Err(Error::shape(format!(
                    "layer {l}: weights {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
        }
        for (l, (mine, theirs)) in self.biases.iter().zip(biases).enumerate() {
            if mine.len() != theirs.len() {
                return Err(Error::shape(format!(
                    "layer {l}: bias length {} vs {}",
                    mine.len(),
                    theirs.len()
                )));
            }
        }
        Ok(())
    }

    /// Runs the network. With `training` set, dropout masks are drawn from the
    /// model's RNG; otherwise dropout is the identity and the pass is pure.
    pub fn forward(&mut self, batch: &DenseMatrix, training: bool) -> Result<ForwardPass> {
        let mut masks = vec![None; self.num_layers()];
        if training {
            if let Some(l) = self.config.dropout_layer() {
                let keep = 1.0 - self.config.dropout_rate;
                let scale = 1.0 / keep;
                let n = batch.rows();
                let data = (0..n * self.config.layer_sizes[l])
                    .map(|_| if self.rng.random::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                masks[l] = Some(DenseMatrix::from_vec(n, self.config.layer_sizes[l], data)?);
            }
        }
        self.forward_with_masks(batch, masks)
    }

    /// Deterministic evaluation-mode predictions.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(self
            .forward_with_masks(batch, vec![None; self.num_layers()])?
            .predictions)
    }

    /// Forward pass with caller-supplied dropout masks (`None` = no dropout).
    pub fn forward_with_masks(
        &self,
        batch: &DenseMatrix,
        masks: Vec<Option<DenseMatrix>>,
    ) -> Result<ForwardPass> {
        if batch.cols() != self.config.input_dim {
            return Err(Error::shape(format!(
                "layer 0: batch has {} columns, model expects {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        if masks.len() != self.num_layers() {
            return Err(Error::shape("one mask slot per layer required"));
        }
        let last = self.num_layers() - 1;
        let mut activations = Vec::with_capacity(self.num_layers());
        let mut logits = Vec::new();
        for l in 0..self.num_layers() {
            let input = if l == 0 { batch } else { &activations[l - 1] };
            let mut z = input.matmul(&self.weights[l]).map_err(|e| {
                Error::shape(format!("layer {l}: {e}"))
            })?;
            z.add_row_vector(&self.biases[l]);
            if l == last {
                logits = z.as_slice().to_vec();
                z.map_inplace(sigmoid);
            } else {
                z.map_inplace(|v| v.max(0.0));
                if let Some(mask) = &masks[l] {
                    if mask.shape() != z.shape() {
                        return Err(Error::shape(format!(
                            "layer {l}: dropout mask {:?} vs activations {:?}",
                            mask.shape(),
                            z.shape()
                        )));
                    }
                    for (v, m) in z.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                        *v *= m;
                    }
                }
            }
            activations.push(z);
        }
        let predictions = activations[last].as_slice().to_vec();
        Ok(ForwardPass {
            activations,
            masks,
            logits,
            predictions,
        })
    }

    /// Gradients of the mean binary cross-entropy with respect to every
    /// weight and bias, given the forward pass over the same batch.
    pub fn backward(&self, batch: &DenseMatrix, labels: &[u8], pass: &ForwardPass) -> Result<GradientSet> {
        let n = batch.rows();
        if labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for a batch of {n} rows",
                labels.len()
            )));
        }
        if pass.activations.len() != self.num_layers() || pass.predictions.len() != n {
            return Err(Error::shape("forward pass does not match this model and batch"));
        }
        let num_layers = self.num_layers();
        let mut weight_grads = vec![DenseMatrix::zeros(0, 0); num_layers];
        let mut bias_grads = vec![Vec::new(); num_layers];

        let inv_n = 1.0 / n as f64;
        let delta_data = pass
            .predictions
            .iter()
            .zip(labels)
            .map(|(&p, &y)| (p - f64::from(y)) * inv_n)
            .collect();
        let mut delta = DenseMatrix::from_vec(n, 1, delta_data)?;

        for l in (0..num_layers).rev() {
            let input = if l == 0 { batch } else { &pass.activations[l - 1] };
            weight_grads[l] = input.t_matmul(&delta)?;
            bias_grads[l] = delta.column_sums();
            if l == 0 {
                break;
            }
            let mut upstream = delta.matmul_t(&self.weights[l])?;
            let below = &pass.activations[l - 1];
            match &pass.masks[l - 1] {
                Some(mask) => {
                    for ((u, &a), &m) in upstream
                        .as_mut_slice()
                        .iter_mut()
                        .zip(below.as_slice())
                        .zip(mask.as_slice())
                    {
                        *u = if a > 0.0 { *u * m } else { 0.0 };
                    }
                }
                None => {
                    for (u, &a) in upstream.as_mut_slice().iter_mut().zip(below.as_slice()) {
                        if a <= 0.0 {
                            *u = 0.0;
                        }
                    }
                }
            }
            delta = upstream;
        }
        Ok(GradientSet {
            weights: weight_grads,
            biases: bias_grads,
        })
    }

    /// `param -= lr * grad` for every weight and bias.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        self.check_same_shapes(&grads.weights, &grads.biases)?;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            w.scaled_add(-lr, g)?;
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (bv, gv) in b.iter_mut().zip(g) {
                *bv -= lr * gv;
            }
        }
        Ok(())
    }

    /// Minibatch SGD over `data` for `epochs` passes. Returns the parameter
    /// change `after - before` accumulated over the whole call.
    pub fn train_local(&mut self, data: &Dataset, epochs: usize, batch_size: usize) -> Result<GradientSet> {
        if data.is_empty() {
            return Err(Error::EmptyData("local training set has no rows".into()));
        }
        if epochs == 0 || batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be at least 1"));
        }
        let weights_before = self.weights.clone();
        let biases_before = self.biases.clone();
        let lr = self.config.learning_rate;
        let mut order: Vec<usize> = (0..data.len()).collect();
        for _ in 0..epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(batch_size) {
                let batch = data.features().select_rows(chunk);
                let labels: Vec<u8> = chunk.iter().map(|&i| data.labels()[i]).collect();
                let pass = self.forward(&batch, true)?;
                let grads = self.backward(&batch, &labels, &pass)?;
                self.sgd_step(&grads, lr)?;
            }
        }
        let weights = self
            .weights
            .iter()
            .zip(&weights_before)
            .map(|(after, before)| after.sub(before))
            .collect::<Result<Vec<_>>>()?;
        let biases = self
            .biases
            .iter()
            .zip(&biases_before)
            .map(|(after, before)| after.iter().zip(before).map(|(a, b)| a - b).collect())
            .collect();
        Ok(GradientSet { weights, biases })
    }

    /// Removes hidden neurons. `remove[l]` lists sorted, unique indices of
    /// layer `l`; the output layer must not be touched.
    pub(crate) fn remove_neurons(&mut self, remove: &[Vec<usize>]) -> Result<()> {
        let last = self.num_layers() - 1;
        if remove.len() > last {
            return Err(Error::shape(format!(
                "prune directive names {} layers, model has {last} hidden layers",
                remove.len()
            )));
        }
        for (l, idx) in remove.iter().enumerate() {
            let width = self.config.layer_sizes[l];
            if let Some(&bad) = idx.iter().find(|&&i| i >= width) {
                return Err(Error::shape(format!(
                    "layer {l}: neuron index {bad} out of range for width {width}"
                )));
            }
            if idx.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape(format!("layer {l}: indices must be sorted and unique")));
            }
            if idx.len() >= width {
                return Err(Error::shape(format!("layer {l}: cannot remove every neuron")));
            }
        }
        for (l, idx) in remove.iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            self.weights[l].remove_columns(idx);
            self.weights[l + 1].remove_rows(idx);
            let bias = std::mem::take(&mut self.biases[l]);
            self.biases[l] = bias
                .into_iter()
                .enumerate()
                .filter(|(i, _)| idx.binary_search(i).is_err())
                .map(|(_, b)| b)
                .collect();
            self.config.layer_sizes[l] -= idx.len();
        }
        self.check_structure()
    }
}
