//! Structural pruning of hidden neurons ranked by their average percentage
//! of zero activations (APoZ) on a validation set.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::MlpModel;

/// APoZ per surviving neuron, one vector per hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ApozReport {
    pub layers: Vec<Vec<f64>>,
}

impl ApozReport {
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }
}

/// Per hidden layer, sorted neuron indices to remove (valid before removal).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PruneDirective {
    pub layers: Vec<Vec<usize>>,
}

impl PruneDirective {
    pub fn empty(hidden_layers: usize) -> Self {
        PruneDirective {
            layers: vec![Vec::new(); hidden_layers],
        }
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneConfig {
    /// Fraction of the remaining hidden neurons removed per loop.
    pub rate_per_loop: f64,
    /// Cap on the cumulative fraction of the initial hidden neurons removed.
    pub total_fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            rate_per_loop: 0.1,
            total_fraction: 0.47,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        let PruneConfig {
            rate_per_loop: rate,
            total_fraction: total,
        } = *self;
        if rate > 0.0 && rate <= total && total < 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "prune rates must satisfy 0 < rate ({rate}) <= total ({total}) < 1"
            )))
        }
    }

    /// Whether another pruning step is still allowed.
    pub fn wants_more(&self, already_pruned: usize, initial_total: usize) -> bool {
        initial_total > 0 && (already_pruned as f64 / initial_total as f64) < self.total_fraction
    }
}

/// Fraction of validation examples on which each hidden neuron's post-ReLU
/// output is exactly zero. Runs in evaluation mode.
pub fn compute_apoz(model: &MlpModel, validation: &Dataset) -> Result<ApozReport> {
    if validation.is_empty() {
        return Err(Error::EmptyData("validation set has no rows".into()));
    }
    let pass = model.forward_with_masks(validation.features(), vec![None; model.num_layers()])?;
    let n = validation.len() as f64;
    let hidden = model.num_layers() - 1;
    let layers = pass.activations[..hidden]
        .iter()
        .map(|act| {
            let mut zeros = vec![0usize; act.cols()];
            for r in 0..act.rows() {
                for (z, &v) in zeros.iter_mut().zip(act.row(r)) {
                    if v <= 0.0 {
                        *z += 1;
                    }
                }
            }
            zeros.into_iter().map(|z| z as f64 / n).collect()
        })
        .collect();
    Ok(ApozReport { layers })
}

/// Picks `⌊rate · neurons_left⌋` neurons with the highest APoZ across all
/// hidden layers, capped so that no more than `⌊total · initial_total⌋`
/// neurons are ever removed and every layer keeps at least one neuron.
/// Ties go to the lower layer, then the lower index.
pub fn plan_prune(
    report: &ApozReport,
    cfg: &PruneConfig,
    already_pruned: usize,
    initial_total: usize,
) -> Result<PruneDirective> {
    cfg.validate()?;
    let mut directive = PruneDirective::empty(report.layers.len());
    if !cfg.wants_more(already_pruned, initial_total) {
        return Ok(directive);
    }
    let left = report.neuron_count();
    let budget = (cfg.total_fraction * initial_total as f64).floor() as usize;
    let wanted = ((cfg.rate_per_loop * left as f64).floor() as usize).min(budget.saturating_sub(already_pruned));
    if wanted == 0 {
        return Ok(directive);
    }

    let mut ranked: Vec<(usize, usize, f64)> = report
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, vals)| vals.iter().enumerate().map(move |(i, &v)| (l, i, v)))
        .collect();
    // highest APoZ first; sort is stable so (layer, index) order breaks ties
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));

    let mut survivors: Vec<usize> = report.layers.iter().map(Vec::len).collect();
    let mut taken = 0;
    for (l, i, _) in ranked {
        if taken == wanted {
            break;
        }
        if survivors[l] <= 1 {
            continue;
        }
        survivors[l] -= 1;
        directive.layers[l].push(i);
        taken += 1;
    }
    for idx in &mut directive.layers {
        idx.sort_unstable();
    }
    Ok(directive)
}

/// Removes the listed neurons: the matching column and bias entry from the
/// neuron's own layer and the matching row from the next layer's weights.
pub fn apply_prune(model: &mut MlpModel, directive: &PruneDirective) -> Result<()> {
    model.remove_neurons(&directive.layers)
}
