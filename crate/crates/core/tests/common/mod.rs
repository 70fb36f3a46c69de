//! Independent reference implementations for the integration tests, written
//! with plain loops and full sorts.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scbf::nn::sigmoid;
use scbf::{DenseMatrix, GradientSet, MlpModel, SelectionMode};

/// Pre-activations and post-activations of every layer, computed with plain
/// loops. `masks[l]` multiplies the ReLU output of hidden layer `l`.
pub struct NaivePass {
    pub pre: Vec<Vec<Vec<f64>>>,
    pub post: Vec<Vec<Vec<f64>>>,
}

pub fn naive_forward(
    weights: &[DenseMatrix],
    biases: &[Vec<f64>],
    batch: &DenseMatrix,
    masks: &[Option<DenseMatrix>],
) -> NaivePass {
    let last = weights.len() - 1;
    let mut pre = Vec::new();
    let mut post: Vec<Vec<Vec<f64>>> = Vec::new();
    for (l, w) in weights.iter().enumerate() {
        let mut z_layer = Vec::new();
        let mut a_layer = Vec::new();
        for r in 0..batch.rows() {
            let input: Vec<f64> = if l == 0 {
                batch.row(r).to_vec()
            } else {
                post[l - 1][r].clone()
            };
            let mut z_row = Vec::new();
            let mut a_row = Vec::new();
            for j in 0..w.cols() {
                let mut z = biases[l][j];
                for (i, x) in input.iter().enumerate() {
                    z += x * w.get(i, j);
                }
                let a = if l == last {
                    sigmoid(z)
                } else {
                    let m = masks.get(l).and_then(|m| m.as_ref()).map_or(1.0, |m| m.get(r, j));
                    z.max(0.0) * m
                };
                z_row.push(z);
                a_row.push(a);
            }
            z_layer.push(z_row);
            a_layer.push(a_row);
        }
        pre.push(z_layer);
        post.push(a_layer);
    }
    NaivePass { pre, post }
}

/// Mean binary cross-entropy written directly from `-y ln p - (1-y) ln(1-p)`
/// in its logit form.
pub fn naive_loss(
    weights: &[DenseMatrix],
    biases: &[Vec<f64>],
    batch: &DenseMatrix,
    labels: &[u8],
    masks: &[Option<DenseMatrix>],
) -> f64 {
    let pass = naive_forward(weights, biases, batch, masks);
    let logits = pass.pre.last().unwrap();
    let mut total = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        let z = z[0];
        // ln(1 + e^z) - y z
        let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        total += softplus - f64::from(y) * z;
    }
    total / labels.len() as f64
}

/// Central finite differences of [`naive_loss`] for every weight and bias.
pub fn finite_difference_gradients(
    model: &MlpModel,
    batch: &DenseMatrix,
    labels: &[u8],
    masks: &[Option<DenseMatrix>],
    eps: f64,
) -> GradientSet {
    let mut weights = model.weights().to_vec();
    let mut biases = model.biases().to_vec();
    let mut gw = Vec::new();
    let mut gb = Vec::new();
    for l in 0..weights.len() {
        let (rows, cols) = weights[l].shape();
        let mut g = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let orig = weights[l].get(r, c);
                weights[l].set(r, c, orig + eps);
                let up = naive_loss(&weights, &biases, batch, labels, masks);
                weights[l].set(r, c, orig - eps);
                let down = naive_loss(&weights, &biases, batch, labels, masks);
                weights[l].set(r, c, orig);
                g.set(r, c, (up - down) / (2.0 * eps));
            }
        }
        gw.push(g);
        let mut b = vec![0.0; biases[l].len()];
        for j in 0..b.len() {
            let orig = biases[l][j];
            biases[l][j] = orig + eps;
            let up = naive_loss(&weights, &biases, batch, labels, masks);
            biases[l][j] = orig - eps;
            let down = naive_loss(&weights, &biases, batch, labels, masks);
            biases[l][j] = orig;
            b[j] = (up - down) / (2.0 * eps);
        }
        gb.push(b);
    }
    GradientSet {
        weights: gw,
        biases: gb,
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Dense matrix with standard-normal-ish entries (sum of uniforms).
pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0)
        .collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_gradients(rng: &mut ChaCha8Rng, input_dim: usize, layers: &[usize]) -> GradientSet {
    let mut weights = Vec::new();
    let mut prev = input_dim;
    for &m in layers {
        weights.push(random_matrix(rng, prev, m));
        prev = m;
    }
    GradientSet {
        biases: layers.iter().map(|&m| vec![0.5; m]).collect(),
        weights,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every channel `(i_1, ..., i_L)` in row-major order (last index fastest)
/// with its squared norm, summed layer by layer.
pub fn enumerate_channels(grads: &GradientSet) -> Vec<(Vec<usize>, f64)> {
    let dims = grads.layer_sizes();
    let total: usize = dims.iter().product();
    let mut out = Vec::with_capacity(total);
    for flat in 0..total {
        let mut idx = vec![0; dims.len()];
        let mut rest = flat;
        for l in (0..dims.len()).rev() {
            idx[l] = rest % dims[l];
            rest /= dims[l];
        }
        let first = &grads.weights[0];
        let mut norm = 0.0;
        for r in 0..first.rows() {
            let g = first.get(r, idx[0]);
            norm += g * g;
        }
        for l in 1..dims.len() {
            let g = grads.weights[l].get(idx[l - 1], idx[l]);
            norm += g * g;
        }
        out.push((idx, norm));
    }
    out
}

/// Threshold by sorting every norm; the rank is computed in integers from
/// `update_rate = percent / 100`.
pub fn sorted_threshold(norms: &[f64], percent: u64) -> f64 {
    let k = norms.len() as u64;
    let rank = ((100 - percent) * k).div_ceil(100);
    if rank == 0 {
        return f64::NEG_INFINITY;
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    sorted[rank as usize - 1]
}

/// `(layer, row, col)` of every weight the selection keeps, found by checking
/// each weight against every channel.
pub fn brute_force_selection(grads: &GradientSet, percent: u64, mode: SelectionMode) -> Vec<(usize, usize, usize)> {
    let channels = enumerate_channels(grads);
    let norms: Vec<f64> = channels.iter().map(|c| c.1).collect();
    let threshold = sorted_threshold(&norms, percent);
    let mut kept = Vec::new();
    for (l, w) in grads.weights.iter().enumerate() {
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let covers = |idx: &[usize]| if l == 0 { idx[0] == c } else { idx[l - 1] == r && idx[l] == c };
                let keep = match mode {
                    SelectionMode::Positive => channels.iter().any(|(idx, n)| covers(idx) && *n > threshold),
                    SelectionMode::Negative => !channels.iter().any(|(idx, n)| covers(idx) && *n <= threshold),
                };
                if keep {
                    kept.push((l, r, c));
                }
            }
        }
    }
    kept
}

/// Pairwise AUCROC: ties count one half, computed from integer counts.
pub fn pairwise_auc_roc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice = 0u64;
    let mut pos = 0u64;
    let mut neg = 0u64;
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0 {
                if scores[i] > scores[j] {
                    twice += 2;
                } else if scores[i] == scores[j] {
                    twice += 1;
                }
            }
        }
    }
    twice as f64 / (2 * pos * neg) as f64
}

/// Average precision from its definition: every positive's rank is counted
/// directly (ties keep input order), terms are summed in rank order.
pub fn direct_average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let ahead = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut terms = Vec::new();
    for i in 0..scores.len() {
        if labels[i] != 1 {
            continue;
        }
        let rank = 1 + (0..scores.len()).filter(|&j| ahead(i, j)).count();
        let hits = 1 + (0..scores.len()).filter(|&j| labels[j] == 1 && ahead(i, j)).count();
        terms.push((rank, hits as f64 / rank as f64));
    }
    terms.sort_by_key(|t| t.0);
    let positives = terms.len() as f64;
    terms.iter().map(|t| t.1).sum::<f64>() / positives
}

/// Per-neuron fraction of rows whose ReLU output is zero, counted one
/// activation at a time.
pub fn naive_apoz(model: &MlpModel, batch: &DenseMatrix) -> Vec<Vec<f64>> {
    let masks = vec![None; model.num_layers()];
    let pass = naive_forward(model.weights(), model.biases(), batch, &masks);
    let hidden = model.num_layers() - 1;
    (0..hidden)
        .map(|l| {
            (0..model.layer_sizes()[l])
                .map(|j| {
                    let zeros = pass.post[l].iter().filter(|row| row[j] == 0.0).count();
                    zeros as f64 / batch.rows() as f64
                })
                .collect()
        })
        .collect()
}

/// A random model of at most three layers and eight units per layer, a
/// batch, labels and one fixed draw of dropout masks. Models whose hidden
/// pre-activations come within `kink_margin` of zero are redrawn, since
/// finite differences are meaningless across a ReLU kink.
pub struct GradientCase {
    pub model: MlpModel,
    pub batch: DenseMatrix,
    pub labels: Vec<u8>,
    pub masks: Vec<Option<DenseMatrix>>,
}

pub fn random_gradient_case(rng: &mut ChaCha8Rng, kink_margin: f64) -> GradientCase {
    loop {
        let input_dim = rng.random_range(1..=6);
        let hidden = rng.random_range(0..=2);
        let mut layer_sizes: Vec<usize> = (0..hidden).map(|_| rng.random_range(1..=8)).collect();
        layer_sizes.push(1);
        let dropout_after_layer = (hidden > 0 && rng.random::<bool>()).then(|| rng.random_range(1..=hidden));
        let cfg = scbf::MlpConfig {
            input_dim,
            layer_sizes,
            dropout_after_layer,
            dropout_rate: 0.3,
            learning_rate: 0.1,
            seed: rng.random(),
        };
        let mut model = MlpModel::new(cfg).unwrap();
        for b in model.biases_mut() {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let rows = rng.random_range(1..=8);
        let batch = random_matrix(rng, rows, input_dim);
        let labels: Vec<u8> = (0..rows).map(|_| rng.random_range(0..=1)).collect();
        let masks = model.forward(&batch, true).unwrap().masks;
        let pass = naive_forward(model.weights(), model.biases(), &batch, &masks);
        let hidden_layers = model.num_layers() - 1;
        let near_kink = pass.pre[..hidden_layers]
            .iter()
            .flatten()
            .flatten()
            .any(|z| z.abs() < kink_margin);
        if !near_kink {
            return GradientCase {
                model,
                batch,
                labels,
                masks,
            };
        }
    }
}

/// Largest relative error between analytic and numeric gradients.
pub fn worst_gradient_error(case: &GradientCase, eps: f64, floor: f64) -> f64 {
    let pass = case.model.forward_with_masks(&case.batch, case.masks.clone()).unwrap();
    let analytic = case.model.backward(&case.batch, &case.labels, &pass).unwrap();
    let numeric = finite_difference_gradients(&case.model, &case.batch, &case.labels, &case.masks, eps);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.weights.iter().zip(&numeric.weights) {
        for (&x, &y) in a.as_slice().iter().zip(n.as_slice()) {
            worst = worst.max(relative_error(x, y, floor));
        }
    }
    for (a, n) in analytic.biases.iter().zip(&numeric.biases) {
        for (&x, &y) in a.iter().zip(n) {
            worst = worst.max(relative_error(x, y, floor));
        }
    }
    worst
}
