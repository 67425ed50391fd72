//! Run configuration documents.
//!
//! Every section has defaults, unknown keys are rejected, and serialising a
//! parsed config writes every field back out so a run directory records
//! exactly what ran.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::campaign::CampaignConfig;
use crate::data::{gen_data, load_idx, Dataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::network::Arch;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Moons,
    IdxFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Training samples.
    pub size: usize,
    /// Held-out samples, taken after the training ones.
    pub test_size: usize,
    pub noise: f64,
    pub seed: u64,
    /// IDX image file (`idx-file` only).
    pub path: Option<PathBuf>,
    /// IDX label file (`idx-file` only).
    pub labels_path: Option<PathBuf>,
    pub downsample: u32,
    /// Min-max rescale features into `[0, 1]` (fit on train and test
    /// together) and declare that range, so `eps` is relative to it.
    pub normalize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Moons,
            size: 400,
            test_size: 200,
            noise: 0.1,
            seed: 0,
            path: None,
            labels_path: None,
            downsample: 0,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub eps: f64,
    pub batch_n: usize,
    /// Grid resolution for exact per-batch values; only for 2D inputs.
    pub exact_grid: Option<usize>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            eps: 0.1,
            batch_n: 5,
            exact_grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arch: Arch,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    /// Evaluation attack (training uses `train.attack`).
    pub attack: AttackConfig,
    pub certify: CertifyConfig,
    pub oracle: CampaignConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arch: Arch(vec![2, 32, 32, 2]),
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            attack: AttackConfig::evaluation(),
            certify: CertifyConfig::default(),
            oracle: CampaignConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.arch.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Seeds derived from one run seed: training init and shuffling, the
    /// training and evaluation attacks, and the oracle campaign. Data stays
    /// fixed so seeds vary the model, not the task.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.train.attack.seed = seed;
        self.attack.seed = seed;
        self.oracle.seed = seed;
        self
    }

    /// `(train, test)` datasets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.dataset;
        let all = match d.kind {
            DatasetKind::Blobs | DatasetKind::Moons => {
                let kind = if d.kind == DatasetKind::Blobs {
                    SyntheticKind::Blobs
                } else {
                    SyntheticKind::Moons
                };
                gen_data(kind, d.size + d.test_size, d.noise, d.seed)?
            }
            DatasetKind::IdxFile => {
                let (Some(images), Some(labels)) = (&d.path, &d.labels_path) else {
                    return Err(Error::Config(
                        "idx-file datasets need `path` and `labels_path`".into(),
                    ));
                };
                let data = load_idx(images, labels, d.downsample)?;
                if data.len() < d.size + d.test_size {
                    return Err(Error::Config(format!(
                        "idx file has {} samples, config asks for {}",
                        data.len(),
                        d.size + d.test_size
                    )));
                }
                data
            }
        };
        let all = if d.normalize { all.normalized() } else { all };
        if all.dim() != self.arch.input_dim() {
            return Err(Error::Config(format!(
                "dataset dimension {} does not match arch input {}",
                all.dim(),
                self.arch.input_dim()
            )));
        }
        let (train, rest) = all.split_at(d.size)?;
        let test = if d.test_size == rest.len() {
            rest
        } else {
            rest.split_at(d.test_size)?.0
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_materialises_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let echoed: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        for key in ["arch", "dataset", "train", "attack", "certify", "oracle"] {
            assert!(echoed.get(key).is_some(), "{key} missing");
        }
        assert_eq!(echoed["train"]["loss_kind"], "citrus");
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"dataset": {"kind": "spirals"}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"epochs": 3, "loss_kind": "ibp"}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 5);
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let mut cfg = RunConfig::default();
        cfg.dataset.size = 30;
        cfg.dataset.test_size = 10;
        let (train, test) = cfg.datasets().unwrap();
        assert_eq!((train.len(), test.len()), (30, 10));
        cfg.arch = Arch(vec![3, 2]);
        assert!(cfg.datasets().is_err());
    }

    #[test]
    fn idx_kind_needs_paths() {
        let mut cfg = RunConfig::default();
        cfg.dataset.kind = DatasetKind::IdxFile;
        assert!(matches!(cfg.datasets(), Err(Error::Config(_))));
    }
}
