//! Federated training loop: download, local training, selective upload,
//! server aggregation, optional APoZ pruning and evaluation, repeated for a
//! fixed number of global loops.
//!
//! Clients are simulated in-process (optionally on one thread each) or over
//! loopback TCP using the framing in [`wire`].

pub mod loopback;
pub mod wire;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{self, SelectionConfig, SparseUpdate};
use crate::data::{Dataset, PartitionedDataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{MlpConfig, MlpModel};
use crate::pruning::{self, PruneConfig, PruneDirective};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Scbf,
    ScbfWithPruning,
    FedAvg,
    FedAvgWithPruning,
}

impl Algorithm {
    pub fn prunes(self) -> bool {
        matches!(self, Algorithm::ScbfWithPruning | Algorithm::FedAvgWithPruning)
    }

    pub fn is_channel_based(self) -> bool {
        matches!(self, Algorithm::Scbf | Algorithm::ScbfWithPruning)
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Scbf => "scbf",
            Algorithm::ScbfWithPruning => "scbfwp",
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedAvgWithPruning => "fedavgwp",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scbf" => Ok(Algorithm::Scbf),
            "scbfwp" => Ok(Algorithm::ScbfWithPruning),
            "fedavg" | "fa" => Ok(Algorithm::FedAvg),
            "fedavgwp" | "fawp" => Ok(Algorithm::FedAvgWithPruning),
            other => Err(Error::config(format!(
                "unknown algorithm '{other}' (expected scbf, scbfwp, fedavg, fedavgwp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    Loopback,
}

impl FromStr for Transport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "inprocess" | "in-process" => Ok(Transport::InProcess),
            "loopback" | "tcp" => Ok(Transport::Loopback),
            other => Err(Error::config(format!("unknown transport '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub global_loops: usize,
    pub epochs_per_loop: usize,
    pub batch_size: usize,
    pub selection: SelectionConfig,
    pub download_rate: f64,
    pub decay: f64,
    pub algorithm: Algorithm,
    pub prune: Option<PruneConfig>,
    /// Network template; `input_dim` is taken from the data at run time.
    pub model: MlpConfig,
    pub seed: u64,
    /// Train clients on separate threads. Results are identical either way.
    pub parallel: bool,
    pub transport: Transport,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            num_clients: 5,
            global_loops: 100,
            epochs_per_loop: 5,
            batch_size: 32,
            selection: SelectionConfig::default(),
            download_rate: 1.0,
            decay: 0.8,
            algorithm: Algorithm::Scbf,
            prune: None,
            model: MlpConfig::new(1),
            seed: 0,
            parallel: false,
            transport: Transport::InProcess,
        }
    }
}

impl FederationConfig {
    /// Defaults for the given algorithm; pruning variants get the default
    /// prune schedule.
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        FederationConfig {
            algorithm,
            prune: algorithm.prunes().then(PruneConfig::default),
            ..FederationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_clients == 0 {
            problems.push("num_clients must be at least 1".to_string());
        }
        if self.epochs_per_loop == 0 {
            problems.push("epochs_per_loop must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if let Err(e) = self.selection.validate() {
            problems.push(e.to_string());
        }
        if !(self.download_rate > 0.0 && self.download_rate <= 1.0) {
            problems.push(format!("download_rate must lie in (0, 1], got {}", self.download_rate));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            problems.push(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        match (&self.prune, self.algorithm.prunes()) {
            (Some(p), true) => {
                if let Err(e) = p.validate() {
                    problems.push(e.to_string());
                }
            }
            (None, true) => problems.push(format!("algorithm {} needs a prune configuration", self.algorithm)),
            (Some(_), false) => problems.push(format!("algorithm {} does not prune", self.algorithm)),
            (None, false) => {}
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn model_config(&self, input_dim: usize, seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim,
            seed,
            ..self.model.clone()
        }
    }
}

/// Seed for client `k`'s local RNG (shuffling and dropout).
pub fn client_seed(seed: u64, client: usize) -> u64 {
    splitmix(seed ^ splitmix(client as u64 + 1))
}

fn download_seed(seed: u64, round: usize, client: usize) -> u64 {
    splitmix(seed ^ splitmix((round as u64) << 20 ^ client as u64 ^ 0xD0_0000_0000))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub model: MlpModel,
    pub round_index: usize,
    pub pruned_count: usize,
    pub initial_neuron_total: usize,
}

impl ServerState {
    pub fn new(model: MlpModel) -> Self {
        let initial_neuron_total = model.hidden_neuron_count();
        ServerState {
            model,
            round_index: 0,
            pruned_count: 0,
            initial_neuron_total,
        }
    }

    fn shapes(&self) -> Vec<(usize, usize)> {
        self.model.weights().iter().map(DenseMatrix::shape).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub index: usize,
    pub model: MlpModel,
    pub shard: Dataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round_index: usize,
    pub upload_fractions: Vec<f64>,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub wall_seconds: f64,
    pub neurons_left: usize,
}

impl RoundReport {
    pub fn mean_upload_fraction(&self) -> f64 {
        if self.upload_fractions.is_empty() {
            return 0.0;
        }
        self.upload_fractions.iter().sum::<f64>() / self.upload_fractions.len() as f64
    }

    /// Field-by-field equality ignoring the wall clock.
    pub fn same_except_timing(&self, other: &RoundReport) -> bool {
        RoundReport {
            wall_seconds: 0.0,
            ..self.clone()
        } == RoundReport {
            wall_seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Outcome of a full run.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub total_seconds: f64,
    pub server: ServerState,
}

/// Adds the client updates to the server weights. Within a round, each
/// coordinate keeps an accumulator `a ← decay·a + v` over the clients that
/// touched it (in the given order); the final accumulator is added to the
/// weight. With `decay = 1` this is the plain sum of all updates.
pub fn server_apply(server: &mut ServerState, updates: &[SparseUpdate], decay: f64) -> Result<()> {
    let shapes = server.shapes();
    let mut acc: Vec<DenseMatrix> = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
    for (client, update) in updates.iter().enumerate() {
        if update.shapes != shapes {
            return Err(Error::protocol(
                client,
                format!("update shapes {:?} differ from server shapes {shapes:?}", update.shapes),
            ));
        }
        for (l, entries) in update.layers.iter().enumerate() {
            let (rows, cols) = shapes[l];
            for e in entries {
                if e.row >= rows || e.col >= cols {
                    return Err(Error::protocol(
                        client,
                        format!("layer {l}: coordinate ({}, {}) outside {rows}x{cols}", e.row, e.col),
                    ));
                }
                let a = &mut acc[l][(e.row, e.col)];
                *a = decay * *a + e.value;
            }
        }
    }
    for (w, a) in server.model.weights_mut().iter_mut().zip(&acc) {
        w.scaled_add(1.0, a)?;
    }
    Ok(())
}

/// `W ← W + (1/K) Σ_k ΔW_k` over dense weight updates.
pub fn server_average(server: &mut ServerState, updates: &[SparseUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Ok(());
    }
    let shapes = server.shapes();
    let mut sum: Vec<DenseMatrix> = shapes.iter().map(|&(r, c)| DenseMatrix::zeros(r, c)).collect();
    for (client, update) in updates.iter().enumerate() {
        if update.shapes != shapes {
            return Err(Error::protocol(client, "dense update shape differs from server"));
        }
        for (l, entries) in update.layers.iter().enumerate() {
            for e in entries {
                if e.row >= shapes[l].0 || e.col >= shapes[l].1 {
                    return Err(Error::protocol(client, format!("layer {l}: coordinate out of range")));
                }
                sum[l][(e.row, e.col)] += e.value;
            }
        }
    }
    let scale = 1.0 / updates.len() as f64;
    for (w, s) in server.model.weights_mut().iter_mut().zip(&sum) {
        w.scaled_add(scale, s)?;
    }
    Ok(())
}

/// Copies server parameters into the client model. At rate 1 this is a full
/// overwrite; below 1 each parameter is taken from the server with that
/// probability, using an RNG keyed on `(seed, round, client)`.
pub fn download(
    client: &mut MlpModel,
    weights: &[DenseMatrix],
    biases: &[Vec<f64>],
    rate: f64,
    seed: u64,
    round: usize,
    client_index: usize,
) -> Result<()> {
    if rate >= 1.0 {
        return client.copy_parameters_from(weights, biases);
    }
    client.check_same_shapes(weights, biases)?;
    let mut rng = ChaCha8Rng::seed_from_u64(download_seed(seed, round, client_index));
    for (mine, theirs) in client.weights_mut().iter_mut().zip(weights) {
        for (m, &t) in mine.as_mut_slice().iter_mut().zip(theirs.as_slice()) {
            if rng.random::<f64>() < rate {
                *m = t;
            }
        }
    }
    for (mine, theirs) in client.biases_mut().iter_mut().zip(biases) {
        for (m, &t) in mine.iter_mut().zip(theirs) {
            if rng.random::<f64>() < rate {
                *m = t;
            }
        }
    }
    Ok(())
}

/// Client half of a round after download: local training, then either
/// channel selection or the full dense delta.
pub fn client_update(model: &mut MlpModel, shard: &Dataset, cfg: &FederationConfig) -> Result<SparseUpdate> {
    let delta = model.train_local(shard, cfg.epochs_per_loop, cfg.batch_size)?;
    if cfg.algorithm.is_channel_based() {
        channel::process_gradients(&delta, &cfg.selection)
    } else {
        Ok(SparseUpdate::dense(&delta.weights))
    }
}

fn collect_updates(
    server: &ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
) -> Result<Vec<SparseUpdate>> {
    let weights = server.model.weights();
    let biases = server.model.biases();
    let round = server.round_index;
    let work = |client: &mut ClientState| -> Result<SparseUpdate> {
        download(&mut client.model, weights, biases, cfg.download_rate, cfg.seed, round, client.index)?;
        client_update(&mut client.model, &client.shard, cfg)
    };
    if cfg.parallel && clients.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|client| scope.spawn(move || work(client)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        })
    } else {
        clients.iter_mut().map(work).collect()
    }
}

/// Prunes the server on the validation set if the schedule allows and
/// returns the directive that clients must mirror.
pub fn prune_server(server: &mut ServerState, cfg: &PruneConfig, validation: &Dataset) -> Result<Option<PruneDirective>> {
    if !cfg.wants_more(server.pruned_count, server.initial_neuron_total) {
        return Ok(None);
    }
    let report = pruning::compute_apoz(&server.model, validation)?;
    let directive = pruning::plan_prune(&report, cfg, server.pruned_count, server.initial_neuron_total)?;
    pruning::apply_prune(&mut server.model, &directive)?;
    server.pruned_count += directive.count();
    Ok(Some(directive))
}

pub fn evaluate(model: &MlpModel, test: &Dataset) -> Result<(f64, f64)> {
    let scores = model.predict(test.features())?;
    metrics::evaluate(&scores, test.labels())
}

fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    data: &PartitionedDataset,
) -> Result<RoundReport> {
    let start = Instant::now();
    let updates = collect_updates(server, clients, cfg)?;
    let upload_fractions = updates.iter().map(SparseUpdate::upload_fraction).collect();
    if cfg.algorithm.is_channel_based() {
        server_apply(server, &updates, cfg.decay)?;
    } else {
        server_average(server, &updates)?;
    }
    if let (true, Some(prune)) = (cfg.algorithm.prunes(), &cfg.prune) {
        if let Some(directive) = prune_server(server, prune, &data.validation)? {
            for client in clients.iter_mut() {
                pruning::apply_prune(&mut client.model, &directive)?;
            }
        }
    }
    let (auc_roc, auc_pr) = evaluate(&server.model, &data.test)?;
    let report = RoundReport {
        round_index: server.round_index,
        upload_fractions,
        auc_roc,
        auc_pr,
        wall_seconds: start.elapsed().as_secs_f64(),
        neurons_left: server.model.hidden_neuron_count(),
    };
    server.round_index += 1;
    Ok(report)
}

/// One channel-based round (with pruning when the algorithm asks for it).
pub fn run_round_scbf(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    data: &PartitionedDataset,
) -> Result<RoundReport> {
    if !cfg.algorithm.is_channel_based() {
        return Err(Error::config(format!("run_round_scbf called with algorithm {}", cfg.algorithm)));
    }
    run_round(server, clients, cfg, data)
}

/// One federated-averaging round (with pruning for `FedAvgWithPruning`).
pub fn run_round_fedavg(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &FederationConfig,
    data: &PartitionedDataset,
) -> Result<RoundReport> {
    if cfg.algorithm.is_channel_based() {
        return Err(Error::config(format!("run_round_fedavg called with algorithm {}", cfg.algorithm)));
    }
    run_round(server, clients, cfg, data)
}

/// Server plus clients, freshly initialised from the config and data.
pub struct Federation<'a> {
    pub cfg: FederationConfig,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub data: &'a PartitionedDataset,
}

impl<'a> Federation<'a> {
    pub fn new(cfg: FederationConfig, data: &'a PartitionedDataset) -> Result<Self> {
        cfg.validate()?;
        if data.num_clients() != cfg.num_clients {
            return Err(Error::config(format!(
                "data has {} shards but num_clients is {}",
                data.num_clients(),
                cfg.num_clients
            )));
        }
        let input_dim = data.num_features();
        let server = ServerState::new(MlpModel::new(cfg.model_config(input_dim, cfg.seed))?);
        let clients = data
            .client_shards
            .iter()
            .enumerate()
            .map(|(k, shard)| {
                Ok(ClientState {
                    index: k,
                    model: MlpModel::new(cfg.model_config(input_dim, client_seed(cfg.seed, k)))?,
                    shard: shard.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Federation {
            cfg,
            server,
            clients,
            data,
        })
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        if self.cfg.algorithm.is_channel_based() {
            run_round_scbf(&mut self.server, &mut self.clients, &self.cfg, self.data)
        } else {
            run_round_fedavg(&mut self.server, &mut self.clients, &self.cfg, self.data)
        }
    }
}

/// Runs `cfg.global_loops` rounds over the configured transport.
pub fn run_experiment(cfg: &FederationConfig, data: &PartitionedDataset) -> Result<ExperimentResult> {
    match cfg.transport {
        Transport::InProcess => {
            let start = Instant::now();
            let mut fed = Federation::new(cfg.clone(), data)?;
            let reports = (0..cfg.global_loops)
                .map(|_| fed.run_round())
                .collect::<Result<Vec<_>>>()?;
            Ok(ExperimentResult {
                reports,
                total_seconds: start.elapsed().as_secs_f64(),
                server: fed.server,
            })
        }
        Transport::Loopback => loopback::run_experiment(cfg, data),
    }
}

/// First round whose AUCROC is within `tolerance` of the curve's maximum.
pub fn saturation_round(auc: &[f64], tolerance: f64) -> Option<usize> {
    let best = auc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    auc.iter().position(|&v| v >= best - tolerance)
}
