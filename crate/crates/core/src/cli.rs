//! `scbf` command line: synthetic data generation, experiment runs that
//! write per-round curves, and curve comparison.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::data::{write_csv, SyntheticConfig};
use crate::error::{Error, Result};
use crate::federation::{run_experiment, saturation_round, Algorithm, ExperimentResult, RoundReport, Transport};

/// AUCROC distance from a run's best value that counts as saturated.
pub const SATURATION_TOLERANCE: f64 = 0.002;

pub const CURVE_HEADER: [&str; 6] = [
    "round",
    "auc_roc",
    "auc_pr",
    "upload_fraction_mean",
    "neurons_left",
    "wall_seconds",
];

#[derive(Debug, Parser)]
#[command(name = "scbf", version, about = "Channel-based federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic binary-feature dataset as CSV.
    GenData(GenDataArgs),
    /// Run a federated experiment and write its per-round curves.
    Run(RunArgs),
    /// Compare curve files round by round.
    Compare(CompareArgs),
    /// Print a configuration template with every key and its default.
    Template,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 5000, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub features: u64,
    #[arg(long, default_value_t = 0.2)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "label")]
    pub label_column: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment file (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// scbf | scbfwp | fedavg | fedavgwp
    #[arg(long)]
    pub algo: Option<Algorithm>,
    /// Master seed for data, models and client streams.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub global_loops: Option<usize>,
    /// Where curves_<algo>.csv and summary_<algo>.txt are written.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// inprocess | loopback
    #[arg(long)]
    pub transport: Option<Transport>,
    /// Train clients on separate threads (same results).
    #[arg(long)]
    pub parallel: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Curve CSVs written by `run`; the first is the baseline.
    #[arg(required = true, num_args = 2..)]
    pub curves: Vec<PathBuf>,
    /// Also write the comparison table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl clap::builder::ValueParserFactory for Algorithm {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Algorithm>().map_err(|e| e.to_string()))
    }
}

impl clap::builder::ValueParserFactory for Transport {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Transport>().map_err(|e| e.to_string()))
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Run(args) => cmd_run(&args).map(|_| ()),
        Command::Compare(args) => {
            let table = cmd_compare(&args)?;
            print!("{table}");
            Ok(())
        }
        Command::Template => {
            print!("{}", ExperimentConfig::template());
            Ok(())
        }
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_samples: args.samples as usize,
        num_features: args.features as usize,
        sparsity: args.sparsity,
        seed: args.seed,
        ..SyntheticConfig::default()
    };
    let (dataset, _) = cfg.generate()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_csv(&dataset, &args.out, &args.label_column)?;
    eprintln!(
        "wrote {} rows x {} features to {} (positive prevalence {:.4})",
        dataset.len(),
        dataset.num_features(),
        args.out.display(),
        dataset.positive_rate()
    );
    Ok(())
}

/// Paths written by a run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub curves: PathBuf,
    pub summary: PathBuf,
    pub result: ExperimentResult,
}

pub fn cmd_run(args: &RunArgs) -> Result<RunOutputs> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(algo) = args.algo {
        cfg.federation.algorithm = algo;
    }
    if let Some(seed) = args.seed {
        cfg.federation.seed = seed;
    }
    if let Some(loops) = args.global_loops {
        cfg.federation.global_loops = loops;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(t) = args.transport {
        cfg.federation.transport = t;
    }
    if args.parallel {
        cfg.federation.parallel = true;
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    let fed = cfg.federation_config()?;
    let data = cfg.load_data()?;
    eprintln!(
        "running {} for {} rounds on {} clients ({} features)",
        fed.algorithm,
        fed.global_loops,
        fed.num_clients,
        data.num_features()
    );
    let result = run_experiment(&fed, &data)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let curves = cfg.out_dir.join(format!("curves_{}.csv", fed.algorithm));
    write_curves(&curves, &result.reports)?;
    let summary = cfg.out_dir.join(format!("summary_{}.txt", fed.algorithm));
    let line = summary_line(fed.algorithm, &result);
    fs::write(&summary, format!("{line}\n"))?;
    eprintln!("{line}");
    Ok(RunOutputs {
        curves,
        summary,
        result,
    })
}

pub fn summary_line(algorithm: Algorithm, result: &ExperimentResult) -> String {
    let reports = &result.reports;
    let roc: Vec<f64> = reports.iter().map(|r| r.auc_roc).collect();
    let best = |f: fn(&RoundReport) -> f64| reports.iter().map(f).fold(f64::NAN, f64::max);
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
    format!(
        "algorithm={algorithm} rounds={} final_auc_roc={} final_auc_pr={} best_auc_roc={} best_auc_pr={} saturation_round={} total_seconds={:.3}",
        reports.len(),
        fmt_opt(reports.last().map(|r| r.auc_roc)),
        fmt_opt(reports.last().map(|r| r.auc_pr)),
        fmt_opt((!reports.is_empty()).then(|| best(|r| r.auc_roc))),
        fmt_opt((!reports.is_empty()).then(|| best(|r| r.auc_pr))),
        saturation_round(&roc, SATURATION_TOLERANCE).map_or_else(|| "NA".into(), |r| r.to_string()),
        result.total_seconds
    )
}

/// One row of a curves file.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub round: usize,
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub upload_fraction_mean: f64,
    pub neurons_left: usize,
    pub wall_seconds: f64,
}

impl From<&RoundReport> for CurveRow {
    fn from(r: &RoundReport) -> Self {
        CurveRow {
            round: r.round_index,
            auc_roc: r.auc_roc,
            auc_pr: r.auc_pr,
            upload_fraction_mean: r.mean_upload_fraction(),
            neurons_left: r.neurons_left,
            wall_seconds: r.wall_seconds,
        }
    }
}

pub fn write_curves(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for r in reports.iter().map(CurveRow::from) {
        w.write_record([
            r.round.to_string(),
            r.auc_roc.to_string(),
            r.auc_pr.to_string(),
            r.upload_fraction_mean.to_string(),
            r.neurons_left.to_string(),
            format!("{:.6}", r.wall_seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CURVE_HEADER {
        return Err(Error::config(format!(
            "{}: unexpected curve header {header:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let field = |c: usize| -> Result<&str> {
            rec.get(c).ok_or_else(|| Error::Parse {
                row: i + 1,
                column: CURVE_HEADER[c].into(),
                message: "missing".into(),
            })
        };
        let num = |c: usize| -> Result<f64> {
            field(c)?.parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: CURVE_HEADER[c].into(),
                message: "not a number".into(),
            })
        };
        let int = |c: usize| -> Result<usize> {
            field(c)?.parse().map_err(|_| Error::Parse {
                row: i + 1,
                column: CURVE_HEADER[c].into(),
                message: "not an integer".into(),
            })
        };
        rows.push(CurveRow {
            round: int(0)?,
            auc_roc: num(1)?,
            auc_pr: num(2)?,
            upload_fraction_mean: num(3)?,
            neurons_left: int(4)?,
            wall_seconds: num(5)?,
        });
    }
    Ok(rows)
}

/// Joined view of several curve files over a common round range.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rounds: Vec<usize>,
    /// `auc_roc[file][round]`
    pub auc_roc: Vec<Vec<f64>>,
    pub auc_pr: Vec<Vec<f64>>,
    /// Saturation round of each file, `None` for an empty curve.
    pub saturation: Vec<Option<usize>>,
}

impl Comparison {
    /// AUCROC of file `i` minus the baseline, per round.
    pub fn roc_gap(&self, i: usize) -> Vec<f64> {
        self.auc_roc[i].iter().zip(&self.auc_roc[0]).map(|(a, b)| a - b).collect()
    }

    pub fn pr_gap(&self, i: usize) -> Vec<f64> {
        self.auc_pr[i].iter().zip(&self.auc_pr[0]).map(|(a, b)| a - b).collect()
    }
}

pub fn compare_curves(curves: &[Vec<CurveRow>]) -> Result<Comparison> {
    let Some(first) = curves.first() else {
        return Err(Error::config("nothing to compare"));
    };
    let rounds: Vec<usize> = first.iter().map(|r| r.round).collect();
    for (i, c) in curves.iter().enumerate().skip(1) {
        let other: Vec<usize> = c.iter().map(|r| r.round).collect();
        if other != rounds {
            return Err(Error::config(format!(
                "curve {i} covers rounds {:?}..{:?}, baseline covers {:?}..{:?}",
                other.first(),
                other.last(),
                rounds.first(),
                rounds.last()
            )));
        }
    }
    let auc_roc: Vec<Vec<f64>> = curves.iter().map(|c| c.iter().map(|r| r.auc_roc).collect()).collect();
    let auc_pr = curves.iter().map(|c| c.iter().map(|r| r.auc_pr).collect()).collect();
    let saturation = auc_roc
        .iter()
        .map(|roc| saturation_round(roc, SATURATION_TOLERANCE).map(|i| rounds[i]))
        .collect();
    Ok(Comparison {
        rounds,
        auc_roc,
        auc_pr,
        saturation,
    })
}

pub fn cmd_compare(args: &CompareArgs) -> Result<String> {
    let curves = args
        .curves
        .iter()
        .map(|p| read_curves(p))
        .collect::<Result<Vec<_>>>()?;
    let cmp = compare_curves(&curves)?;
    let names: Vec<String> = args
        .curves
        .iter()
        .map(|p| p.file_stem().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()))
        .collect();

    let mut out = String::new();
    let mut header = vec!["round".to_string()];
    for name in &names {
        header.push(format!("{name}.auc_roc"));
    }
    for name in &names[1..] {
        header.push(format!("gap_auc_roc[{name}]"));
        header.push(format!("gap_auc_pr[{name}]"));
    }
    let _ = writeln!(out, "{}", header.join(","));
    let gaps: Vec<(Vec<f64>, Vec<f64>)> = (1..names.len()).map(|i| (cmp.roc_gap(i), cmp.pr_gap(i))).collect();
    for (j, round) in cmp.rounds.iter().enumerate() {
        let mut row = vec![round.to_string()];
        row.extend(cmp.auc_roc.iter().map(|c| format!("{:.6}", c[j])));
        for (roc, pr) in &gaps {
            row.push(format!("{:+.6}", roc[j]));
            row.push(format!("{:+.6}", pr[j]));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    for (name, sat) in names.iter().zip(&cmp.saturation) {
        let _ = writeln!(
            out,
            "# saturation_round[{name}] = {}",
            sat.map_or_else(|| "NA".into(), |r| r.to_string())
        );
    }
    if let Some(path) = &args.out {
        fs::File::create(path)?.write_all(out.as_bytes())?;
    }
    Ok(out)
}
