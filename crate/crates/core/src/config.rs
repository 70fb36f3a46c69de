//! Flat `key = value` experiment files.
//!
//! One assignment per line, `#` starts a comment, unknown keys are rejected.
//! Every key has a default, so an empty file is a valid configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::channel::{SelectionConfig, SelectionMode};
use crate::data::{load_csv, split_and_partition, PartitionedDataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::nn::MlpConfig;
use crate::pruning::PruneConfig;

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("algorithm", "scbf", "scbf | scbfwp | fedavg | fedavgwp"),
    ("num_clients", "5", "number of clients K"),
    ("global_loops", "100", "number of global rounds"),
    ("epochs_per_loop", "5", "local epochs per round"),
    ("batch_size", "32", "minibatch size"),
    ("update_rate", "0.3", "fraction of channels uploaded (0, 1]"),
    ("selection", "positive", "positive | negative"),
    ("download_rate", "1.0", "fraction of server parameters downloaded (0, 1]"),
    ("decay", "0.8", "collision decay in (0, 1]"),
    ("prune_rate", "0.1", "neurons pruned per round, fraction of those left"),
    ("prune_total", "0.47", "cap on the total pruned fraction"),
    ("layer_sizes", "64,32,1", "comma-separated layer widths, last must be 1"),
    ("dropout_after_layer", "2", "1-based hidden layer followed by dropout, or none"),
    ("dropout_rate", "0.5", "dropout probability in [0, 1)"),
    ("learning_rate", "0.01", "SGD learning rate"),
    ("seed", "0", "master seed"),
    ("data_path", "", "CSV dataset; empty generates synthetic data"),
    ("label_column", "label", "label column name in the CSV"),
    ("samples", "5000", "synthetic rows"),
    ("features", "100", "synthetic feature count"),
    ("sparsity", "0.2", "synthetic probability of a feature being 1"),
    ("train_frac", "0.6", "training fraction"),
    ("val_frac", "0.1", "validation fraction"),
    ("out_dir", "results", "output directory"),
    ("transport", "inprocess", "inprocess | loopback"),
    ("parallel", "false", "train clients on separate threads"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub federation: FederationConfig,
    pub prune: PruneConfig,
    pub data_path: Option<PathBuf>,
    pub label_column: String,
    pub synthetic: SyntheticConfig,
    pub train_frac: f64,
    pub val_frac: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = ExperimentConfig {
            federation: FederationConfig::default(),
            prune: PruneConfig::default(),
            data_path: None,
            label_column: String::new(),
            synthetic: SyntheticConfig::default(),
            train_frac: 0.0,
            val_frac: 0.0,
            out_dir: PathBuf::new(),
        };
        for (key, default, _) in KEYS {
            cfg.set(key, default).expect("built-in defaults parse");
        }
        cfg
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

impl ExperimentConfig {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let fed = &mut self.federation;
        match key {
            "algorithm" => fed.algorithm = value.parse()?,
            "num_clients" => fed.num_clients = parse(key, value)?,
            "global_loops" => fed.global_loops = parse(key, value)?,
            "epochs_per_loop" => fed.epochs_per_loop = parse(key, value)?,
            "batch_size" => fed.batch_size = parse(key, value)?,
            "update_rate" => fed.selection.update_rate = parse(key, value)?,
            "selection" => {
                fed.selection.mode = match value.to_ascii_lowercase().as_str() {
                    "positive" => SelectionMode::Positive,
                    "negative" => SelectionMode::Negative,
                    _ => return Err(Error::config(format!("selection: expected positive or negative, got '{value}'"))),
                }
            }
            "download_rate" => fed.download_rate = parse(key, value)?,
            "decay" => fed.decay = parse(key, value)?,
            "prune_rate" => self.prune.rate_per_loop = parse(key, value)?,
            "prune_total" => self.prune.total_fraction = parse(key, value)?,
            "layer_sizes" => {
                fed.model.layer_sizes = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "dropout_after_layer" => {
                fed.model.dropout_after_layer = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "dropout_rate" => fed.model.dropout_rate = parse(key, value)?,
            "learning_rate" => fed.model.learning_rate = parse(key, value)?,
            "seed" => fed.seed = parse(key, value)?,
            "data_path" => self.data_path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "label_column" => self.label_column = value.to_owned(),
            "samples" => self.synthetic.num_samples = parse(key, value)?,
            "features" => self.synthetic.num_features = parse(key, value)?,
            "sparsity" => self.synthetic.sparsity = parse(key, value)?,
            "train_frac" => self.train_frac = parse(key, value)?,
            "val_frac" => self.val_frac = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "transport" => fed.transport = value.parse()?,
            "parallel" => fed.parallel = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parses a whole file, reporting every bad line at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut problems = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {}: expected 'key = value'", n + 1));
                continue;
            };
            if let Err(e) = cfg.set(key.trim(), value) {
                problems.push(format!("line {}: {}", n + 1, strip_prefix(&e)));
            }
        }
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Federation settings ready to run: the seed flows into the model and
    /// data, and the prune schedule is attached only for pruning variants.
    pub fn federation_config(&self) -> Result<FederationConfig> {
        let mut fed = self.federation.clone();
        fed.prune = fed.algorithm.prunes().then_some(self.prune);
        fed.model = MlpConfig {
            seed: fed.seed,
            ..fed.model
        };
        let mut problems = Vec::new();
        if let Err(e) = fed.validate() {
            problems.push(strip_prefix(&e));
        }
        let mut probe = fed.model.clone();
        probe.input_dim = probe.input_dim.max(1);
        if let Err(e) = probe.validate() {
            problems.push(strip_prefix(&e));
        }
        if problems.is_empty() {
            Ok(fed)
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Loads the CSV (or generates synthetic data) and partitions it.
    pub fn load_data(&self) -> Result<PartitionedDataset> {
        let dataset = match &self.data_path {
            Some(path) => load_csv(path, &self.label_column)?,
            None => {
                let synth = SyntheticConfig {
                    seed: self.federation.seed,
                    ..self.synthetic.clone()
                };
                synth.generate()?.0
            }
        };
        split_and_partition(
            &dataset,
            self.train_frac,
            self.val_frac,
            self.federation.num_clients,
            self.federation.seed,
        )
    }

    pub fn selection(&self) -> SelectionConfig {
        self.federation.selection
    }

    /// Commented template listing every key with its default.
    pub fn template() -> String {
        let mut out = String::new();
        for (key, default, doc) in KEYS {
            let _ = writeln!(out, "# {doc}\n{key} = {default}");
        }
        out
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
