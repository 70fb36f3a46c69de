//! Binary-feature datasets: CSV ingestion, a synthetic generator with a
//! sparse logistic teacher, and the train/validation/test split with
//! per-client sharding.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<u8>,
    feature_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<u8>, feature_names: Option<Vec<String>>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = features.as_slice().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Parse {
                row: bad / features.cols().max(1),
                column: format!("#{}", bad % features.cols().max(1)),
                message: "features must be 0 or 1".into(),
            });
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(Error::config("labels must be 0 or 1"));
        }
        if let Some(names) = &feature_names {
            if names.len() != features.cols() {
                return Err(Error::shape("feature_names length differs from column count"));
            }
        }
        Ok(Dataset {
            features,
            labels,
            feature_names,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().map(|&y| f64::from(y)).sum::<f64>() / self.len() as f64
    }

    /// Rows in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Reads a headered CSV whose cells are all 0/1. Columns other than
/// `label_column` become features, in header order.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::config(format!("label column '{label_column}' not found in header")))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        // row numbers are 1-based data rows, header excluded
        let row = row + 1;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for (col, cell) in record.iter().enumerate() {
            let value = parse_binary(cell).ok_or_else(|| Error::Parse {
                row,
                column: headers[col].clone(),
                message: format!("'{cell}' is not 0 or 1"),
            })?;
            if col == label_idx {
                labels.push(value as u8);
            } else {
                data.push(value);
            }
        }
    }
    let features = DenseMatrix::from_vec(labels.len(), feature_names.len(), data)?;
    Dataset::new(features, labels, Some(feature_names))
}

fn parse_binary(cell: &str) -> Option<f64> {
    match cell.trim().parse::<f64>() {
        Ok(v) if v == 0.0 || v == 1.0 => Some(v),
        _ => None,
    }
}

/// Writes features (named `f0..` when unnamed) followed by the label column.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path.as_ref())?);
    write_csv_to(dataset, &mut out, label_column)?;
    out.flush()?;
    Ok(())
}

pub fn write_csv_to(dataset: &Dataset, out: impl Write, label_column: &str) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header: Vec<String> = match dataset.feature_names() {
        Some(names) => names.to_vec(),
        None => (0..dataset.num_features()).map(|i| format!("f{i}")).collect(),
    };
    header.push(label_column.to_owned());
    writer.write_record(&header)?;
    let mut record = Vec::with_capacity(header.len());
    for r in 0..dataset.len() {
        record.clear();
        record.extend(
            dataset
                .features
                .row(r)
                .iter()
                .map(|&v| if v == 1.0 { "1" } else { "0" }),
        );
        record.push(if dataset.labels[r] == 1 { "1" } else { "0" });
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Parameters of the synthetic cohort generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_samples: usize,
    pub num_features: usize,
    /// Probability that any single feature is 1.
    pub sparsity: f64,
    /// Multiplier on the standard-normal teacher weights.
    pub signal_scale: f64,
    /// Fraction of teacher weights that are nonzero.
    pub teacher_density: f64,
    /// Expected positive prevalence the teacher bias is tuned to.
    pub target_prevalence: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_samples: 5000,
            num_features: 100,
            sparsity: 0.2,
            signal_scale: 4.0,
            teacher_density: 0.1,
            target_prevalence: 0.3,
            seed: 0,
        }
    }
}

/// The hidden logistic model that produced a synthetic dataset's labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl Teacher {
    pub fn probability(&self, x: &[f64]) -> f64 {
        let z: f64 = x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias;
        sigmoid(z)
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_samples == 0 {
            problems.push("num_samples must be positive");
        }
        if self.num_features == 0 {
            problems.push("num_features must be positive");
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            problems.push("sparsity must lie in (0, 1)");
        }
        if !(self.signal_scale.is_finite() && self.signal_scale > 0.0) {
            problems.push("signal_scale must be positive");
        }
        if !(self.teacher_density > 0.0 && self.teacher_density <= 1.0) {
            problems.push("teacher_density must lie in (0, 1]");
        }
        if !(0.2..=0.5).contains(&self.target_prevalence) {
            problems.push("target_prevalence must lie in [0.2, 0.5]");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    /// Draws Bernoulli features, a sparse teacher, tunes the teacher bias to
    /// hit the target prevalence, then samples labels.
    pub fn generate(&self) -> Result<(Dataset, Teacher)> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (n, d) = (self.num_samples, self.num_features);
        let data: Vec<f64> = (0..n * d)
            .map(|_| if rng.random::<f64>() < self.sparsity { 1.0 } else { 0.0 })
            .collect();
        let features = DenseMatrix::from_vec(n, d, data)?;

        let nonzero = ((d as f64 * self.teacher_density).round() as usize).clamp(1, d);
        let mut weights = vec![0.0; d];
        let mut chosen = index::sample(&mut rng, d, nonzero).into_vec();
        chosen.sort_unstable();
        for i in chosen {
            let z: f64 = rng.sample(StandardNormal);
            weights[i] = self.signal_scale * z;
        }

        let scores: Vec<f64> = (0..n)
            .map(|r| features.row(r).iter().zip(&weights).map(|(a, b)| a * b).sum())
            .collect();
        let bias = tune_bias(&scores, self.target_prevalence);

        let labels = scores
            .iter()
            .map(|&s| u8::from(rng.random::<f64>() < sigmoid(s + bias)))
            .collect();
        let dataset = Dataset::new(features, labels, None)?;
        Ok((dataset, Teacher { weights, bias }))
    }
}

/// Bisection on b so that mean(sigmoid(score + b)) equals `target`.
fn tune_bias(scores: &[f64], target: f64) -> f64 {
    let mean_prob = |b: f64| scores.iter().map(|&s| sigmoid(s + b)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-100.0f64, 100.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) > target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn generate_synthetic(num_samples: usize, num_features: usize, sparsity: f64, seed: u64) -> Result<Dataset> {
    let cfg = SyntheticConfig {
        num_samples,
        num_features,
        sparsity,
        seed,
        ..SyntheticConfig::default()
    };
    Ok(cfg.generate()?.0)
}

/// Client shards plus held-out validation and test sets. The `*_rows`
/// fields record which source rows landed where.
#[derive(Debug, Clone)]
pub struct PartitionedDataset {
    pub client_shards: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
    pub shard_rows: Vec<Vec<usize>>,
    pub validation_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

impl PartitionedDataset {
    pub fn num_clients(&self) -> usize {
        self.client_shards.len()
    }

    pub fn num_features(&self) -> usize {
        self.test.num_features()
    }
}

/// Seeded shuffle, contiguous train/validation/test slices, then the train
/// slice cut into `num_clients` shards whose sizes differ by at most one.
pub fn split_and_partition(
    data: &Dataset,
    train_frac: f64,
    val_frac: f64,
    num_clients: usize,
    seed: u64,
) -> Result<PartitionedDataset> {
    if num_clients == 0 {
        return Err(Error::config("num_clients must be at least 1"));
    }
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
        return Err(Error::config(format!(
            "invalid split fractions train={train_frac} val={val_frac}"
        )));
    }
    let n = data.len();
    if n < num_clients {
        return Err(Error::config(format!(
            "dataset has {n} rows, fewer than the {num_clients} clients"
        )));
    }
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
    if n_train < num_clients {
        return Err(Error::config(format!(
            "training slice of {n_train} rows cannot feed {num_clients} clients"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);

    let base = n_train / num_clients;
    let extra = n_train % num_clients;
    let mut shard_rows = Vec::with_capacity(num_clients);
    let mut start = 0;
    for k in 0..num_clients {
        let len = base + usize::from(k < extra);
        shard_rows.push(train[start..start + len].to_vec());
        start += len;
    }

    Ok(PartitionedDataset {
        client_shards: shard_rows.iter().map(|rows| data.subset(rows)).collect(),
        validation: data.subset(val),
        test: data.subset(test),
        shard_rows,
        validation_rows: val.to_vec(),
        test_rows: test.to_vec(),
    })
}
