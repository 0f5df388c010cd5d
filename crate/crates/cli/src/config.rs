//! Flat TOML experiment configuration.
//!
//! Every key is optional and defaults to the reference desk setup. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use feddlr::federation::{BroadcastCount, DataSpec, Mode, TrainConfig};
use feddlr::nn::LrSchedule;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub clients: usize,
    pub local_iters: usize,
    pub total_iters: usize,
    pub batch_size: usize,
    pub e_client: f64,
    pub e_server: f64,
    pub eta0: f64,
    pub decay_base: f64,
    pub decay_period: u64,
    pub seed: u64,
    pub hidden: Vec<usize>,

    pub data: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,

    pub broadcast_count: BroadcastCount,
    pub dense_fallback: bool,
    pub parallel: bool,
    pub trace: bool,

    pub out_dir: PathBuf,
    /// Thresholds for `sweep-e`; each sets both `e_client` and `e_server`.
    pub sweep_e: Vec<f64>,
    /// Accuracy at which `compare` reports cumulative communication.
    pub target_accuracy: f64,
    /// Per-layer ranks for `macs`.
    pub ranks: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = TrainConfig::reference();
        let DataSpec::Synthetic {
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } = r.data
        else {
            unreachable!("reference data is synthetic")
        };
        Self {
            mode: r.mode,
            clients: r.clients,
            local_iters: r.local_iters,
            total_iters: r.total_iters,
            batch_size: r.batch_size,
            e_client: r.e_client,
            e_server: r.e_server,
            eta0: r.lr.eta0,
            decay_base: r.lr.decay_base,
            decay_period: r.lr.decay_period,
            seed: r.seed,
            hidden: r.hidden,
            data: DataSource::Synthetic,
            classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
            train_csv: None,
            test_csv: None,
            broadcast_count: r.broadcast_count,
            dense_fallback: r.dense_fallback,
            parallel: r.parallel,
            trace: r.capture_trace,
            out_dir: PathBuf::from("out"),
            sweep_e: vec![0.9, 0.99, 0.999],
            target_accuracy: 0.9,
            ranks: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let data = match self.data {
            DataSource::Synthetic => DataSpec::Synthetic {
                classes: self.classes,
                dim: self.dim,
                train_per_class: self.train_per_class,
                test_per_class: self.test_per_class,
                separation: self.separation,
            },
            DataSource::Csv => {
                let need = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| {
                        CliError::Config(format!("{key}: required when data = \"csv\""))
                    })
                };
                DataSpec::Csv {
                    train: need(&self.train_csv, "train_csv")?,
                    test: need(&self.test_csv, "test_csv")?,
                    num_classes: self.classes,
                }
            }
        };
        let cfg = TrainConfig {
            mode: self.mode,
            clients: self.clients,
            local_iters: self.local_iters,
            total_iters: self.total_iters,
            batch_size: self.batch_size,
            e_client: self.e_client,
            e_server: self.e_server,
            lr: LrSchedule {
                eta0: self.eta0,
                decay_base: self.decay_base,
                decay_period: self.decay_period,
            },
            seed: self.seed,
            hidden: self.hidden.clone(),
            data,
            broadcast_count: self.broadcast_count,
            dense_fallback: self.dense_fallback,
            parallel: self.parallel,
            capture_trace: self.trace,
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Checks everything a subcommand might use.
    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config()?;
        if let Some(e) = self.sweep_e.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(CliError::Config(format!(
                "sweep_e: values must lie in (0, 1], got {e}"
            )));
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return Err(CliError::Config(format!(
                "target_accuracy: must lie in [0, 1], got {}",
                self.target_accuracy
            )));
        }
        Ok(())
    }

    /// Input, hidden and output widths, when known without loading data.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.dim];
        d.extend(&self.hidden);
        d.push(self.classes);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_setup() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg.train_config().unwrap(), TrainConfig::reference());
        assert_eq!(cfg.dims(), vec![32, 64, 64, 10]);
    }

    #[test]
    fn keys_override_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "mode = \"fedavg\"\nclients = 5\nhidden = [8]\nbroadcast_count = \"once\"\neta0 = 0.05\n",
        )
        .unwrap();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.mode, Mode::FedAvg);
        assert_eq!(t.clients, 5);
        assert_eq!(t.hidden, vec![8]);
        assert_eq!(t.broadcast_count, BroadcastCount::Once);
        assert_eq!(t.lr.eta0, 0.05);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = ExperimentConfig::from_toml("e_clinet = 0.9\n").unwrap_err();
        assert!(err.to_string().contains("e_clinet"), "{err}");
    }

    #[test]
    fn field_level_validation_messages() {
        let cfg = ExperimentConfig::from_toml("e_server = 1.5\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("e_server"));
        let cfg = ExperimentConfig::from_toml("sweep_e = [0.9, 0.0]\n").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("sweep_e"));
        let cfg = ExperimentConfig::from_toml("data = \"csv\"\n").unwrap();
        assert!(cfg
            .validate()
            .unwrap_err()
            .to_string()
            .contains("train_csv"));
    }
}
