//! Runs experiments and writes their metrics to disk.

use std::fs;
use std::path::{Path, PathBuf};

use feddlr::federation::{run_training, Mode, TrainConfig};
use feddlr::metrics::{mac_count, MacReport, MetricsLog, Summary};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Run,
    Compare,
    SweepE,
    Macs,
}

/// Files written by one experiment.
#[derive(Clone, Debug, Default)]
pub struct Outputs {
    pub files: Vec<PathBuf>,
    /// Human-readable report lines.
    pub report: Vec<String>,
}

pub fn run_experiment(cmd: Command, cfg: &ExperimentConfig) -> Result<Outputs, CliError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| {
        CliError::Config(format!(
            "out_dir: cannot create {}: {e}",
            cfg.out_dir.display()
        ))
    })?;
    let mut out = Outputs::default();
    match cmd {
        Command::Run => {
            let train = cfg.train_config()?;
            let log = run_training(&train)?;
            write_run(&cfg.out_dir, run_name(&train), &log, &mut out)?;
        }
        Command::Compare => compare(cfg, &mut out)?,
        Command::SweepE => sweep(cfg, &mut out)?,
        Command::Macs => macs(cfg, &mut out)?,
    }
    Ok(out)
}

fn run_name(cfg: &TrainConfig) -> &'static str {
    match cfg.mode {
        Mode::FedAvg => "fedavg",
        Mode::FedDlr => "feddlr",
    }
}

fn write_file(path: PathBuf, bytes: &[u8], out: &mut Outputs) -> Result<(), CliError> {
    fs::write(&path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    out.files.push(path);
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Writes `<name>.csv` and `<name>.summary.json`.
pub fn write_run(
    dir: &Path,
    name: &str,
    log: &MetricsLog,
    out: &mut Outputs,
) -> Result<Summary, CliError> {
    write_file(
        dir.join(format!("{name}.csv")),
        log.csv_string().as_bytes(),
        out,
    )?;
    let summary = Summary::from_log(log);
    write_file(
        dir.join(format!("{name}.summary.json")),
        &to_json(&summary),
        out,
    )?;
    out.report.push(format!(
        "{name}: {} rounds, final accuracy {:.4}, {} parameters sent",
        log.records.len(),
        log.final_accuracy().unwrap_or(f64::NAN),
        log.total_params()
    ));
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunBrief {
    pub final_accuracy: Option<f64>,
    pub total_params: u64,
    pub total_bytes: u64,
    pub params_to_target: Option<u64>,
    pub first_round_at_target: Option<usize>,
}

impl RunBrief {
    fn new(log: &MetricsLog, target: f64) -> Self {
        Self {
            final_accuracy: log.final_accuracy(),
            total_params: log.total_params(),
            total_bytes: log.total_bytes(),
            params_to_target: log.params_to_reach(target),
            first_round_at_target: log
                .records
                .iter()
                .find(|r| r.test_acc >= target)
                .map(|r| r.round),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub target_accuracy: f64,
    pub fedavg: RunBrief,
    pub feddlr: RunBrief,
    /// `1 - feddlr / fedavg` over the whole run.
    pub params_saved_fraction: f64,
    pub rounds: usize,
    pub rounds_not_above_fedavg: usize,
    pub rounds_strictly_below_fedavg: usize,
}

impl Comparison {
    pub fn new(fedavg: &MetricsLog, feddlr: &MetricsLog, target: f64) -> Self {
        let pairs: Vec<_> = feddlr.records.iter().zip(&fedavg.records).collect();
        Self {
            target_accuracy: target,
            fedavg: RunBrief::new(fedavg, target),
            feddlr: RunBrief::new(feddlr, target),
            params_saved_fraction: 1.0
                - feddlr.total_params() as f64 / fedavg.total_params().max(1) as f64,
            rounds: pairs.len(),
            rounds_not_above_fedavg: pairs
                .iter()
                .filter(|(d, a)| d.round_params() <= a.round_params())
                .count(),
            rounds_strictly_below_fedavg: pairs
                .iter()
                .filter(|(d, a)| d.round_params() < a.round_params())
                .count(),
        }
    }
}

/// FedAvg and FedDLR from the same seed.
pub fn paired_logs(cfg: &TrainConfig) -> Result<(MetricsLog, MetricsLog), CliError> {
    let mut avg = cfg.clone();
    avg.mode = Mode::FedAvg;
    let mut dlr = cfg.clone();
    dlr.mode = Mode::FedDlr;
    Ok((run_training(&avg)?, run_training(&dlr)?))
}

fn compare(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let (avg, dlr) = paired_logs(&cfg.train_config()?)?;
    write_run(&cfg.out_dir, "fedavg", &avg, out)?;
    write_run(&cfg.out_dir, "feddlr", &dlr, out)?;
    let cmp = Comparison::new(&avg, &dlr, cfg.target_accuracy);
    write_file(cfg.out_dir.join("compare.json"), &to_json(&cmp), out)?;
    out.report.push(format!(
        "feddlr sent {:.1}% fewer parameters; strictly fewer in {}/{} rounds; to reach {:.2}: fedavg {:?}, feddlr {:?}",
        100.0 * cmp.params_saved_fraction,
        cmp.rounds_strictly_below_fedavg,
        cmp.rounds,
        cfg.target_accuracy,
        cmp.fedavg.params_to_target,
        cmp.feddlr.params_to_target
    ));
    Ok(())
}

/// One row of the combined sweep table.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub e: f64,
    pub final_accuracy: f64,
    pub total_params: u64,
    pub mean_round_params: f64,
    pub total_bytes: u64,
    pub params_to_target: Option<u64>,
}

/// Label used in per-threshold file names, e.g. `0.99` -> `e0.99`.
pub fn sweep_label(e: f64) -> String {
    format!("e{e}")
}

/// One FedDLR run per threshold, `e_client = e_server = e`.
pub fn sweep_logs(cfg: &TrainConfig, thresholds: &[f64]) -> Result<Vec<MetricsLog>, CliError> {
    thresholds
        .iter()
        .map(|&e| {
            let mut c = cfg.clone();
            c.mode = Mode::FedDlr;
            c.e_client = e;
            c.e_server = e;
            Ok(run_training(&c)?)
        })
        .collect()
}

fn sweep(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let logs = sweep_logs(&cfg.train_config()?, &cfg.sweep_e)?;
    let mut table = String::from(
        "e,final_accuracy,total_params,mean_round_params,total_bytes,params_to_target\n",
    );
    for (&e, log) in cfg.sweep_e.iter().zip(&logs) {
        write_run(&cfg.out_dir, &format!("sweep_{}", sweep_label(e)), log, out)?;
        let row = SweepRow {
            e,
            final_accuracy: log.final_accuracy().unwrap_or(f64::NAN),
            total_params: log.total_params(),
            mean_round_params: log.total_params() as f64 / log.records.len().max(1) as f64,
            total_bytes: log.total_bytes(),
            params_to_target: log.params_to_reach(cfg.target_accuracy),
        };
        table.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.e,
            row.final_accuracy,
            row.total_params,
            row.mean_round_params,
            row.total_bytes,
            row.params_to_target.map_or("NA".into(), |p| p.to_string())
        ));
        out.report.push(format!(
            "e={}: final accuracy {:.4}, mean {:.0} parameters per round",
            row.e, row.final_accuracy, row.mean_round_params
        ));
    }
    write_file(cfg.out_dir.join("sweep.csv"), table.as_bytes(), out)
}

fn macs(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<(), CliError> {
    let dims = cfg.dims();
    let ranks = (!cfg.ranks.is_empty()).then_some(cfg.ranks.as_slice());
    let report: MacReport =
        mac_count(&dims, ranks).map_err(|e| CliError::Config(format!("ranks: {e}")))?;
    #[derive(Serialize)]
    struct MacsFile<'a> {
        dims: &'a [usize],
        ranks: Option<&'a [usize]>,
        #[serde(flatten)]
        report: MacReport,
        note: &'static str,
    }
    let file = MacsFile {
        dims: &dims,
        ranks,
        report,
        note: "per-sample multiply-accumulates; biases count as parameters only; ratio is not a measured speedup",
    };
    write_file(cfg.out_dir.join("macs.json"), &to_json(&file), out)?;
    out.report.push(format!(
        "dims {:?}: dense {} MACs / {} params, low-rank {} MACs / {} params, ratio {:.4}",
        dims,
        report.dense_macs,
        report.params_dense,
        report.lowrank_macs,
        report.params_lowrank,
        report.mac_ratio
    ));
    Ok(())
}
