//! Channel-based gradient selection.
//!
//! A channel is a path through the network that visits one neuron per layer,
//! indexed `(i_1, …, i_L)`. Its norm is the squared magnitude of the weight
//! changes along the path: the whole first-layer column feeding neuron `i_1`
//! plus the single connection `(i_{l-1}, i_l)` in every later layer. The
//! channels with the largest norms are kept and the weights they cover form
//! a sparse update; everything else stays on the client.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::nn::GradientSet;
use crate::tensor::DenseMatrix;

/// Upper bound on the number of channels (product of layer widths).
pub const MAX_CHANNELS: usize = 1 << 26;

/// Flattened `m_1 × … × m_L` tensor of channel norms, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNormTensor {
    dims: Vec<usize>,
    norms: Vec<f64>,
}

impl ChannelNormTensor {
    pub fn new(dims: Vec<usize>, norms: Vec<f64>) -> Result<Self> {
        let expected = channel_count(&dims)?;
        if norms.len() != expected {
            return Err(Error::shape(format!(
                "{} norms for dims {dims:?} (expected {expected})",
                norms.len()
            )));
        }
        if norms.iter().any(|&v| v.is_nan() || v < 0.0) {
            return Err(Error::shape("channel norms must be non-negative"));
        }
        Ok(ChannelNormTensor { dims, norms })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Row-major multi-index of a flat position.
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for (slot, &d) in idx.iter_mut().zip(&self.dims).rev() {
            *slot = flat % d;
            flat /= d;
        }
        idx
    }
}

fn channel_count(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::shape(format!("invalid channel dims {dims:?}")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&k| k <= MAX_CHANNELS)
        .ok_or_else(|| Error::shape(format!("channel tensor {dims:?} exceeds {MAX_CHANNELS} entries")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Keep every weight touched by at least one channel above the threshold.
    Positive,
    /// Drop every weight touched by at least one channel at or below the threshold.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionConfig {
    pub update_rate: f64,
    pub mode: SelectionMode,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            update_rate: 0.3,
            mode: SelectionMode::Positive,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_rate > 0.0 && self.update_rate <= 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "update_rate must lie in (0, 1], got {}",
                self.update_rate
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Per-layer coordinate lists; coordinates not listed are implicitly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub layers: Vec<Vec<SparseEntry>>,
    pub shapes: Vec<(usize, usize)>,
}

impl SparseUpdate {
    pub fn empty(shapes: Vec<(usize, usize)>) -> Self {
        SparseUpdate {
            layers: vec![Vec::new(); shapes.len()],
            shapes,
        }
    }

    /// Every entry of the given matrices, zeros included.
    pub fn dense(weights: &[DenseMatrix]) -> Self {
        let layers = weights
            .iter()
            .map(|w| {
                (0..w.rows())
                    .flat_map(|r| (0..w.cols()).map(move |c| (r, c)))
                    .map(|(row, col)| SparseEntry {
                        row,
                        col,
                        value: w.get(row, col),
                    })
                    .collect()
            })
            .collect();
        SparseUpdate {
            layers,
            shapes: weights.iter().map(DenseMatrix::shape).collect(),
        }
    }

    pub fn entry_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn total_parameters(&self) -> usize {
        self.shapes.iter().map(|(r, c)| r * c).sum()
    }

    /// Share of weight parameters carried by this update.
    pub fn upload_fraction(&self) -> f64 {
        let total = self.total_parameters();
        if total == 0 {
            return 0.0;
        }
        self.entry_count() as f64 / total as f64
    }

    pub fn densify(&self) -> Vec<DenseMatrix> {
        self.shapes
            .iter()
            .zip(&self.layers)
            .map(|(&(rows, cols), entries)| {
                let mut m = DenseMatrix::zeros(rows, cols);
                for e in entries {
                    m.set(e.row, e.col, e.value);
                }
                m
            })
            .collect()
    }

    /// Checks that every coordinate is in range and appears at most once per layer.
    pub fn validate(&self) -> Result<()> {
        if self.layers.len() != self.shapes.len() {
            return Err(Error::shape("layer count differs from shape count"));
        }
        for (l, (entries, &(rows, cols))) in self.layers.iter().zip(&self.shapes).enumerate() {
            let mut seen = vec![false; rows * cols];
            for e in entries {
                if e.row >= rows || e.col >= cols {
                    return Err(Error::shape(format!(
                        "layer {l}: entry ({}, {}) outside {rows}x{cols}",
                        e.row, e.col
                    )));
                }
                let slot = &mut seen[e.row * cols + e.col];
                if *slot {
                    return Err(Error::shape(format!(
                        "layer {l}: duplicate entry ({}, {})",
                        e.row, e.col
                    )));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

pub fn upload_fraction(update: &SparseUpdate) -> f64 {
    update.upload_fraction()
}

fn check_chain(grads: &GradientSet) -> Result<()> {
    if grads.weights.is_empty() {
        return Err(Error::shape("gradient set has no layers"));
    }
    for (l, pair) in grads.weights.windows(2).enumerate() {
        if pair[0].cols() != pair[1].rows() {
            return Err(Error::shape(format!(
                "layer {} has {} outputs but layer {} has {} inputs",
                l,
                pair[0].cols(),
                l + 1,
                pair[1].rows()
            )));
        }
    }
    Ok(())
}

/// Squared channel norms for every path through the network. Bias
/// gradients do not participate.
pub fn compute_channel_norms(grads: &GradientSet) -> Result<ChannelNormTensor> {
    check_chain(grads)?;
    let dims = grads.layer_sizes();
    let total = channel_count(&dims)?;

    let first = &grads.weights[0];
    let mut column_norms = vec![0.0; first.cols()];
    for r in 0..first.rows() {
        for (acc, &g) in column_norms.iter_mut().zip(first.row(r)) {
            *acc += g * g;
        }
    }

    let mut norms = Vec::with_capacity(total);
    let mut prefix = vec![0.0; dims.len()];
    for (i1, &c) in column_norms.iter().enumerate() {
        prefix[0] = c;
        accumulate_paths(grads, 1, i1, &mut prefix, &mut norms);
    }
    debug_assert_eq!(norms.len(), total);
    ChannelNormTensor::new(dims, norms)
}

fn accumulate_paths(grads: &GradientSet, layer: usize, from: usize, prefix: &mut [f64], out: &mut Vec<f64>) {
    if layer == grads.weights.len() {
        out.push(prefix[layer - 1]);
        return;
    }
    let row = grads.weights[layer].row(from);
    for (to, &g) in row.iter().enumerate() {
        prefix[layer] = prefix[layer - 1] + g * g;
        accumulate_paths(grads, layer + 1, to, prefix, out);
    }
}

/// Nearest-rank threshold: the value at 1-based rank `⌈(1-α)K⌉` of the sorted
/// norms, so that roughly `αK` channels lie strictly above it. Rank 0
/// (α = 1) yields `-∞`, which selects every channel.
pub fn quantile_threshold(norms: &ChannelNormTensor, update_rate: f64) -> Result<f64> {
    SelectionConfig {
        update_rate,
        mode: SelectionMode::Positive,
    }
    .validate()?;
    if norms.is_empty() {
        return Err(Error::EmptyData("channel norm tensor is empty".into()));
    }
    let k = norms.len();
    let rank = threshold_rank(k, update_rate);
    if rank == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    let mut values = norms.norms().to_vec();
    let (_, nth, _) = values.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
    Ok(*nth)
}

/// `⌈(1-α)K⌉`, with a small tolerance so that exact products such as
/// `0.75 · 4` are not pushed up by representation error.
pub fn threshold_rank(k: usize, update_rate: f64) -> usize {
    let raw = (1.0 - update_rate) * k as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(k)
}

/// Builds the sparse update implied by the channel norms and the update rate.
pub fn select_channels(grads: &GradientSet, norms: &ChannelNormTensor, cfg: &SelectionConfig) -> Result<SparseUpdate> {
    cfg.validate()?;
    check_chain(grads)?;
    if norms.dims() != grads.layer_sizes().as_slice() {
        return Err(Error::shape(format!(
            "norm tensor dims {:?} do not match gradient layers {:?}",
            norms.dims(),
            grads.layer_sizes()
        )));
    }
    let threshold = quantile_threshold(norms, cfg.update_rate)?;
    let dims = norms.dims();
    let num_layers = dims.len();

    // `marked` records coverage by selected channels (positive mode) or by
    // discarded channels (negative mode).
    let mut first_marked = vec![false; dims[0]];
    let mut edge_marked: Vec<Vec<bool>> = (1..num_layers).map(|l| vec![false; dims[l - 1] * dims[l]]).collect();

    let mut idx = vec![0usize; num_layers];
    for &norm in norms.norms() {
        let hit = match cfg.mode {
            SelectionMode::Positive => norm.total_cmp(&threshold) == Ordering::Greater,
            SelectionMode::Negative => norm.total_cmp(&threshold) != Ordering::Greater,
        };
        if hit {
            first_marked[idx[0]] = true;
            for l in 1..num_layers {
                edge_marked[l - 1][idx[l - 1] * dims[l] + idx[l]] = true;
            }
        }
        // odometer, last index fastest
        for l in (0..num_layers).rev() {
            idx[l] += 1;
            if idx[l] < dims[l] {
                break;
            }
            idx[l] = 0;
        }
    }

    let keep = |marked: bool| match cfg.mode {
        SelectionMode::Positive => marked,
        SelectionMode::Negative => !marked,
    };

    let mut layers = Vec::with_capacity(num_layers);
    let first = &grads.weights[0];
    let mut entries = Vec::new();
    for row in 0..first.rows() {
        for (col, &value) in first.row(row).iter().enumerate() {
            if keep(first_marked[col]) {
                entries.push(SparseEntry { row, col, value });
            }
        }
    }
    layers.push(entries);
    for l in 1..num_layers {
        let w = &grads.weights[l];
        let mut entries = Vec::new();
        for row in 0..w.rows() {
            for (col, &value) in w.row(row).iter().enumerate() {
                if keep(edge_marked[l - 1][row * w.cols() + col]) {
                    entries.push(SparseEntry { row, col, value });
                }
            }
        }
        layers.push(entries);
    }
    Ok(SparseUpdate {
        layers,
        shapes: grads.weights.iter().map(DenseMatrix::shape).collect(),
    })
}

/// Norms, threshold and selection in one call.
pub fn process_gradients(grads: &GradientSet, cfg: &SelectionConfig) -> Result<SparseUpdate> {
    let norms = compute_channel_norms(grads)?;
    select_channels(grads, &norms, cfg)
}
