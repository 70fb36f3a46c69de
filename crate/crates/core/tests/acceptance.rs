//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Criteria run one at a time, outside the libtest harness.

mod common;

use std::collections::BTreeSet;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::Rng;
use rand_distr::StandardNormal;
use scbf::channel::{compute_channel_norms, process_gradients, quantile_threshold, select_channels, SelectionConfig};
use scbf::cli::{write_curves, SATURATION_TOLERANCE};
use scbf::config::ExperimentConfig;
use scbf::federation::wire::{self, Message};
use scbf::federation::{saturation_round, Federation};
use scbf::metrics::{auc_pr, auc_roc, ScoredLabels};
use scbf::pruning::{compute_apoz, PruneDirective};
use scbf::{
    run_experiment, Algorithm, Dataset, DenseMatrix, ExperimentResult, FederationConfig, GradientSet, MlpConfig,
    MlpModel, PartitionedDataset, SelectionMode, Transport,
};

/// Tolerances and budgets, as stated in the acceptance criteria.
const GRAD_REL_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const GRAD_MODELS: usize = 50;
const GRAD_BUDGET_S: f64 = 60.0;
const ORACLE_BUDGET_S: f64 = 120.0;
const ORACLE_MAX_CHANNELS: usize = 4096;
const ORACLE_MAX_N: usize = 200;
const EQUIV_ROUNDS: usize = 10;
const UPLOAD_RATE: f64 = 0.3;
const UPLOAD_REFERENCE: f64 = 0.45;
const COMPARE_ROUNDS: usize = 50;
const AUC_GAP: f64 = 0.02;
const COMPARE_BUDGET_S: f64 = 600.0;
const PRUNE_DEGRADATION: f64 = 0.03;
const WIRE_REL_TOL: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Experiments shared by criteria 5 and 6.
struct Comparison {
    scbf: ExperimentResult,
    fedavg: ExperimentResult,
    scbfwp: ExperimentResult,
}

fn final_auc(r: &ExperimentResult) -> f64 {
    r.reports.last().map_or(f64::NAN, |r| r.auc_roc)
}

fn saturation(r: &ExperimentResult) -> Option<usize> {
    let roc: Vec<f64> = r.reports.iter().map(|r| r.auc_roc).collect();
    saturation_round(&roc, SATURATION_TOLERANCE)
}

fn default_setup(algorithm: Algorithm, loops: usize) -> (FederationConfig, PartitionedDataset) {
    let mut cfg = ExperimentConfig::default();
    cfg.federation.algorithm = algorithm;
    cfg.federation.global_loops = loops;
    (cfg.federation_config().unwrap(), cfg.load_data().unwrap())
}

fn small_setup(algorithm: Algorithm, loops: usize) -> (FederationConfig, PartitionedDataset) {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in [("samples", "1000"), ("features", "30"), ("epochs_per_loop", "2"), ("seed", "7")] {
        cfg.set(k, v).unwrap();
    }
    cfg.federation.algorithm = algorithm;
    cfg.federation.global_loops = loops;
    (cfg.federation_config().unwrap(), cfg.load_data().unwrap())
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..GRAD_MODELS {
        let case = random_gradient_case(&mut rng, 1e-3);
        worst = worst.max(worst_gradient_error(&case, FD_EPS, 1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= GRAD_REL_TOL && secs < GRAD_BUDGET_S,
        format!("{GRAD_MODELS} models, worst rel err {worst:.2e} (<= {GRAD_REL_TOL:e}), {secs:.2}s"),
    )
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(2);
    let mut failures = Vec::new();
    let mut checked_channels = 0;

    let dims_list: &[&[usize]] = &[&[7], &[4, 1], &[8, 8, 1], &[16, 16, 16], &[64, 32, 1], &[64, 64, 1], &[4, 4, 4, 4, 4, 4]];
    for dims in dims_list {
        assert!(dims.iter().product::<usize>() <= ORACLE_MAX_CHANNELS);
        let input = rng.random_range(1..5);
        let grads = random_gradients(&mut rng, input, dims);
        let tensor = compute_channel_norms(&grads).unwrap();
        let paths = enumerate_channels(&grads);
        checked_channels += paths.len();
        if paths.iter().map(|p| p.1.to_bits()).ne(tensor.norms().iter().map(|v| v.to_bits())) {
            failures.push(format!("norms {dims:?}"));
        }
        for percent in [5u64, 30, 50, 100] {
            let alpha = percent as f64 / 100.0;
            if quantile_threshold(&tensor, alpha).unwrap().to_bits() != sorted_threshold(tensor.norms(), percent).to_bits() {
                failures.push(format!("threshold {dims:?} {percent}%"));
            }
            for mode in [SelectionMode::Positive, SelectionMode::Negative] {
                let update = select_channels(&grads, &tensor, &SelectionConfig { update_rate: alpha, mode }).unwrap();
                let got: BTreeSet<_> = update
                    .layers
                    .iter()
                    .enumerate()
                    .flat_map(|(l, es)| es.iter().map(move |e| (l, e.row, e.col)))
                    .collect();
                let want: BTreeSet<_> = brute_force_selection(&grads, percent, mode).into_iter().collect();
                if got != want || update.entry_count() != want.len() {
                    failures.push(format!("selection {dims:?} {percent}% {mode:?}"));
                }
            }
        }
    }

    for trial in 0..100 {
        let n = rng.random_range(2..=ORACLE_MAX_N);
        let levels = if trial % 2 == 0 { 6 } else { u32::MAX };
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels))).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.4)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let data = ScoredLabels::new(&scores, &labels).unwrap();
        if auc_roc(data).unwrap().to_bits() != pairwise_auc_roc(&scores, &labels).to_bits() {
            failures.push(format!("auc_roc trial {trial}"));
        }
        if auc_pr(data).unwrap().to_bits() != direct_average_precision(&scores, &labels).to_bits() {
            failures.push(format!("auc_pr trial {trial}"));
        }
    }

    for trial in 0..10 {
        let input = 12;
        let mut cfg = MlpConfig::new(input);
        cfg.layer_sizes = vec![16, 8, 1];
        cfg.seed = trial;
        let model = MlpModel::new(cfg).unwrap();
        let rows = 80;
        let bits: Vec<f64> = (0..rows * input).map(|_| f64::from(rng.random::<bool>())).collect();
        let features = DenseMatrix::from_vec(rows, input, bits).unwrap();
        let validation = Dataset::new(features.clone(), vec![0; rows], None).unwrap();
        if compute_apoz(&model, &validation).unwrap().layers != naive_apoz(&model, &features) {
            failures.push(format!("apoz trial {trial}"));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures.is_empty() && secs < ORACLE_BUDGET_S,
        if failures.is_empty() {
            format!("{checked_channels} channels, 100 metric cases, 10 APoZ cases all exact, {secs:.2}s")
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    )
}

fn degenerate_equivalence() -> Outcome {
    let (mut cfg, data) = small_setup(Algorithm::Scbf, EQUIV_ROUNDS);
    cfg.selection.update_rate = 1.0;
    cfg.decay = 1.0;
    cfg.transport = Transport::InProcess;

    let mut fed = Federation::new(cfg.clone(), &data).unwrap();
    let mut reference = Federation::new(cfg.clone(), &data).unwrap();
    for round in 0..EQUIV_ROUNDS {
        fed.run_round().unwrap();

        let weights = reference.server.model.weights().to_vec();
        let biases = reference.server.model.biases().to_vec();
        let mut sum: Vec<DenseMatrix> = weights.iter().map(|w| DenseMatrix::zeros(w.rows(), w.cols())).collect();
        for client in &mut reference.clients {
            client.model.copy_parameters_from(&weights, &biases).unwrap();
            let delta = client.model.train_local(&client.shard, cfg.epochs_per_loop, cfg.batch_size).unwrap();
            for (s, d) in sum.iter_mut().zip(&delta.weights) {
                for (a, b) in s.as_mut_slice().iter_mut().zip(d.as_slice()) {
                    *a += b;
                }
            }
        }
        for (w, s) in reference.server.model.weights_mut().iter_mut().zip(&sum) {
            for (a, b) in w.as_mut_slice().iter_mut().zip(s.as_slice()) {
                *a += b;
            }
        }

        let identical = fed
            .server
            .model
            .weights()
            .iter()
            .zip(reference.server.model.weights())
            .all(|(a, b)| a.as_slice().iter().map(|v| v.to_bits()).eq(b.as_slice().iter().map(|v| v.to_bits())));
        if !identical {
            return outcome(false, format!("server weights diverge from the dense sum at round {round}"));
        }
    }
    outcome(true, format!("bit-identical to the dense-sum reference over {EQUIV_ROUNDS} rounds"))
}

fn upload_fraction_property() -> Outcome {
    let mut rng = rng(4);
    let dims = [2917usize, 64, 32, 1];
    let weights = dims
        .windows(2)
        .map(|w| {
            let data = (0..w[0] * w[1]).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            DenseMatrix::from_vec(w[0], w[1], data).unwrap()
        })
        .collect();
    let grads = GradientSet {
        weights,
        biases: vec![vec![0.0; 64], vec![0.0; 32], vec![0.0; 1]],
    };
    let update = process_gradients(
        &grads,
        &SelectionConfig {
            update_rate: UPLOAD_RATE,
            mode: SelectionMode::Positive,
        },
    )
    .unwrap();
    let fraction = update.upload_fraction();
    outcome(
        fraction > UPLOAD_RATE && fraction < 1.0,
        format!("upload fraction {fraction:.4} at rate {UPLOAD_RATE} (reference point {UPLOAD_REFERENCE})"),
    )
}

fn run_comparison() -> Comparison {
    let run = |alg| {
        let (cfg, data) = default_setup(alg, COMPARE_ROUNDS);
        run_experiment(&cfg, &data).unwrap()
    };
    Comparison {
        scbf: run(Algorithm::Scbf),
        fedavg: run(Algorithm::FedAvg),
        scbfwp: run(Algorithm::ScbfWithPruning),
    }
}

fn comparative_convergence(c: &Comparison) -> Outcome {
    let (s, f) = (final_auc(&c.scbf), final_auc(&c.fedavg));
    let (ss, sf) = (saturation(&c.scbf), saturation(&c.fedavg));
    let secs = c.scbf.total_seconds + c.fedavg.total_seconds;
    let pass = (s - f).abs() <= AUC_GAP && matches!((ss, sf), (Some(a), Some(b)) if a <= b) && secs < COMPARE_BUDGET_S;
    outcome(
        pass,
        format!(
            "final AUCROC scbf {s:.4} vs fedavg {f:.4} (gap {:+.4}, limit {AUC_GAP}); saturation round {} vs {}; {secs:.1}s",
            s - f,
            ss.map_or("-".into(), |r| r.to_string()),
            sf.map_or("-".into(), |r| r.to_string()),
        ),
    )
}

fn pruning_speedup(c: &Comparison) -> Outcome {
    let (t_scbf, t_wp) = (c.scbf.total_seconds, c.scbfwp.total_seconds);
    let degradation = final_auc(&c.scbf) - final_auc(&c.scbfwp);
    outcome(
        t_wp < t_scbf && degradation <= PRUNE_DEGRADATION,
        format!(
            "wall time scbfwp {t_wp:.2}s vs scbf {t_scbf:.2}s; AUCROC degradation {degradation:+.4} (limit {PRUNE_DEGRADATION}); {} neurons left",
            c.scbfwp.server.model.hidden_neuron_count()
        ),
    )
}

fn protocol_round_trip() -> Outcome {
    let mut problems = Vec::new();

    let model = MlpModel::new(MlpConfig::new(9)).unwrap();
    let mut rng = rng(7);
    let grads = random_gradients(&mut rng, 9, &[64, 32, 1]);
    let update = process_gradients(&grads, &SelectionConfig::default()).unwrap();
    let directive = PruneDirective {
        layers: vec![vec![0, 5, 63], vec![31]],
    };
    for msg in [
        Message::server_weights(&model),
        Message::client_update(&update),
        Message::prune_directive(&directive),
        Message::RoundAck,
    ] {
        let frame = msg.encode();
        let mut stream = frame.as_slice();
        let streamed = wire::read_message(&mut stream).unwrap();
        if Message::decode(&frame).unwrap() != msg || streamed.as_ref() != Some(&msg) {
            problems.push(format!("{:?} round trip", msg.message_type()));
        }
    }

    let (cfg, data) = small_setup(Algorithm::ScbfWithPruning, 10);
    let local = run_experiment(&cfg, &data).unwrap();
    let remote = run_experiment(
        &FederationConfig {
            transport: Transport::Loopback,
            ..cfg.clone()
        },
        &data,
    )
    .unwrap();

    let mut worst_weight: f64 = 0.0;
    let mut worst_auc: f64 = 0.0;
    for (a, b) in local.reports.iter().zip(&remote.reports) {
        if a.round_index != b.round_index || a.neurons_left != b.neurons_left {
            problems.push(format!("round {} structure", a.round_index));
        }
        if a.upload_fractions != b.upload_fractions {
            problems.push(format!("round {} upload fractions", a.round_index));
        }
        worst_auc = worst_auc.max((a.auc_roc - b.auc_roc).abs()).max((a.auc_pr - b.auc_pr).abs());
    }
    if local.reports.len() != remote.reports.len() {
        problems.push("report count".into());
    }
    for (a, b) in local.server.model.weights().iter().zip(remote.server.model.weights()) {
        for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
            worst_weight = worst_weight.max(relative_error(x, y, 0.0));
        }
    }
    if worst_weight > WIRE_REL_TOL {
        problems.push(format!("weight rel diff {worst_weight:.2e}"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "4 message types round-trip; loopback vs in-process over 10 rounds: max weight rel diff {worst_weight:.2e} (<= {WIRE_REL_TOL:e}), max AUC diff {worst_auc:.2e}{}",
            if problems.is_empty() { String::new() } else { format!("; failed: {}", problems.join(", ")) }
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = small_setup(Algorithm::ScbfWithPruning, 15);
    let mut files = Vec::new();
    for (i, parallel) in [false, false, true].into_iter().enumerate() {
        let result = run_experiment(&FederationConfig { parallel, ..cfg.clone() }, &data).unwrap();
        let path = dir.path().join(format!("run{i}.csv"));
        write_curves(&path, &result.reports).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let stripped: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_owned())
            .collect();
        files.push(stripped);
    }
    let pass = files[0] == files[1] && files[0] == files[2];
    outcome(
        pass,
        format!(
            "{} curve rows identical apart from wall_seconds across two serial runs and one parallel run",
            files[0].len() - 1
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };

    report(1, "gradient correctness", guarded(gradient_correctness));
    report(2, "oracle equivalence", guarded(oracle_equivalence));
    report(3, "degenerate equivalence", guarded(degenerate_equivalence));
    report(4, "upload fraction", guarded(upload_fraction_property));
    let comparison = panic::catch_unwind(run_comparison).ok();
    match &comparison {
        Some(c) => {
            report(5, "comparative convergence", guarded(|| comparative_convergence(c)));
            report(6, "pruning speedup", guarded(|| pruning_speedup(c)));
        }
        None => {
            report(5, "comparative convergence", outcome(false, "experiments panicked"));
            report(6, "pruning speedup", outcome(false, "experiments panicked"));
        }
    }
    report(7, "protocol round-trip", guarded(protocol_round_trip));
    report(8, "determinism", guarded(determinism));

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
