//! JSON run configuration.
//!
//! Every experiment is one JSON document. Unknown keys are rejected, defaults
//! are filled in, and semantic checks report the JSON pointer of the
//! offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::apple::{SchedulerKind, SchedulerSpec, DEFAULT_EPSILON};
use crate::data::{default_shard_fractions, PartitionScheme, PartitionSpec};
use crate::error::{Error, Result};
use crate::numerics::{Activation, ModelKind, ModelSpec};
use crate::seed::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKindName {
    SoftmaxRegression,
    Mlp1Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    /// Inferred from the data when absent; must match it when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKindName::SoftmaxRegression,
            hidden_dim: None,
            input_dim: None,
            num_classes: None,
        }
    }
}

impl ModelConfig {
    /// Resolves the model against the data's dimensions.
    pub fn resolve(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        if let Some(d) = self.input_dim.filter(|&d| d != input_dim) {
            return Err(Error::validation(
                "/model/input_dim",
                format!("{d} does not match the data's feature dimension {input_dim}"),
            ));
        }
        if let Some(c) = self.num_classes.filter(|&c| c != num_classes) {
            return Err(Error::validation(
                "/model/num_classes",
                format!("{c} does not match the data's {num_classes} classes"),
            ));
        }
        let kind = match self.kind {
            ModelKindName::SoftmaxRegression => ModelKind::SoftmaxRegression,
            ModelKindName::Mlp1Hidden => ModelKind::Mlp1Hidden {
                hidden_dim: self.hidden_dim.unwrap_or(64),
                activation: Activation::Relu,
            },
        };
        let spec = ModelSpec {
            kind,
            input_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn default_num_classes() -> usize {
    10
}
fn default_feature_dim() -> usize {
    20
}
fn default_train_per_class() -> usize {
    300
}
fn default_test_per_class() -> usize {
    100
}
fn one() -> f64 {
    1.0
}
fn default_label_column() -> String {
    "label".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        #[serde(default = "default_num_classes")]
        num_classes: usize,
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default = "one")]
        class_center_scale: f64,
        #[serde(default = "one")]
        noise_sigma: f64,
        /// Defaults to a stream derived from the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            num_classes: default_num_classes(),
            feature_dim: default_feature_dim(),
            train_per_class: default_train_per_class(),
            test_per_class: default_test_per_class(),
            class_center_scale: 1.0,
            noise_sigma: 1.0,
            seed: None,
        }
    }
}

fn default_num_clients() -> usize {
    12
}
fn default_scheme() -> PartitionScheme {
    PartitionScheme::Practical
}
fn default_classes_per_client() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    #[serde(default = "default_scheme")]
    pub scheme: PartitionScheme,
    #[serde(default = "default_num_clients")]
    pub num_clients: usize,
    /// Defaults to a stream derived from the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "default_classes_per_client")]
    pub classes_per_client: usize,
    /// Practical scheme; defaults to 80% / 10% / rest split evenly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shard_fractions: Option<Vec<f64>>,
    /// Frozen split written by the `partition` subcommand; overrides the
    /// scheme when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            scheme: default_scheme(),
            num_clients: default_num_clients(),
            seed: None,
            classes_per_client: default_classes_per_client(),
            shard_fractions: None,
            manifest: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Apple,
    Fedavg,
    FedavgLocal,
    FedavgFt,
    Fedprox,
    FedproxFt,
    Separate,
}

impl Algorithm {
    pub fn tag(self) -> &'static str {
        match self {
            Algorithm::Apple => "apple",
            Algorithm::Fedavg => "fedavg",
            Algorithm::FedavgLocal => "fedavg_local",
            Algorithm::FedavgFt => "fedavg_ft",
            Algorithm::Fedprox => "fedprox",
            Algorithm::FedproxFt => "fedprox_ft",
            Algorithm::Separate => "separate",
        }
    }

    pub fn uses_prox(self) -> bool {
        matches!(self, Algorithm::Fedprox | Algorithm::FedproxFt)
    }

    pub fn fine_tunes(self) -> bool {
        matches!(self, Algorithm::FedavgFt | Algorithm::FedproxFt)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::validation("/algorithm", format!("unknown algorithm \"{s}\"")))
    }
}

fn default_scheduler_kind() -> SchedulerKind {
    SchedulerKind::Cosine
}
fn default_mu() -> f64 {
    0.1
}
fn default_cutoff_fraction() -> f64 {
    0.3
}
fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    #[serde(default = "default_scheduler_kind")]
    pub kind: SchedulerKind,
    #[serde(default = "default_mu")]
    pub mu: f64,
    /// Cutoff round `L` as a fraction of the total number of rounds.
    #[serde(default = "default_cutoff_fraction")]
    pub cutoff_fraction: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: default_scheduler_kind(),
            mu: default_mu(),
            cutoff_fraction: default_cutoff_fraction(),
            epsilon: default_epsilon(),
        }
    }
}

impl SchedulerConfig {
    pub fn resolve(&self, rounds: usize) -> SchedulerSpec {
        let cutoff = ((self.cutoff_fraction * rounds as f64).round() as usize).max(1);
        SchedulerSpec {
            kind: self.kind,
            cutoff,
            epsilon: self.epsilon,
            mu: self.mu,
        }
    }
}

fn default_algorithm() -> Algorithm {
    Algorithm::Apple
}
fn default_rounds() -> usize {
    160
}
fn default_local_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    256
}
fn default_lr_net() -> f64 {
    1e-2
}
fn default_lr_dr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_finetune_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_net")]
    pub lr_net: f64,
    #[serde(default = "default_lr_dr")]
    pub lr_dr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    /// Peer core models downloadable per client per round; `null` means all.
    #[serde(default)]
    pub budget: Option<usize>,
    /// FedProx proximal coefficient.
    #[serde(default)]
    pub mu_prox: f64,
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let pointer = json_pointer(e.path());
            Error::validation(pointer, e.inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Compact JSON with all defaults applied; embedded in every output.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn scheduler_spec(&self) -> SchedulerSpec {
        self.scheduler.resolve(self.rounds)
    }

    pub fn num_clients(&self) -> usize {
        self.partition.num_clients
    }

    pub fn partition_spec(&self) -> PartitionSpec {
        let p = &self.partition;
        PartitionSpec {
            scheme: p.scheme,
            num_clients: p.num_clients,
            seed: p
                .seed
                .unwrap_or_else(|| derive_seed(self.seed, Stream::Partition)),
            classes_per_client: p.classes_per_client,
            shard_fractions: p
                .shard_fractions
                .clone()
                .unwrap_or_else(|| default_shard_fractions(p.num_clients)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(pointer: &str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    pointer,
                    format!("must be a positive number, got {v}"),
                ))
            }
        }
        fn non_negative(pointer: &str, v: f64) -> Result<()> {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(
                    pointer,
                    format!("must be non-negative, got {v}"),
                ))
            }
        }

        non_negative("/lr_net", self.lr_net)?;
        non_negative("/lr_dr", self.lr_dr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(
                "/momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("/batch_size", "must be positive"));
        }
        non_negative("/scheduler/mu", self.scheduler.mu)?;
        let f = self.scheduler.cutoff_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::validation(
                "/scheduler/cutoff_fraction",
                format!("must be in (0, 1], got {f}"),
            ));
        }
        let eps = self.scheduler.epsilon;
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::validation(
                "/scheduler/epsilon",
                format!("must be in (0, 1), got {eps}"),
            ));
        }
        non_negative("/mu_prox", self.mu_prox)?;
        if self.algorithm.uses_prox() && self.mu_prox <= 0.0 {
            return Err(Error::validation(
                "/mu_prox",
                "FedProx variants need mu_prox > 0",
            ));
        }
        if !self.algorithm.uses_prox() && self.mu_prox != 0.0 {
            return Err(Error::validation(
                "/mu_prox",
                "only FedProx variants take mu_prox",
            ));
        }

        let n = self.partition.num_clients;
        if n == 0 {
            return Err(Error::validation(
                "/partition/num_clients",
                "must be positive",
            ));
        }
        if let Some(m) = self.budget {
            if m == 0 || m + 1 > n {
                return Err(Error::validation(
                    "/budget",
                    format!(
                        "must be in [1, {}] for {n} clients, got {m}",
                        n.saturating_sub(1)
                    ),
                ));
            }
        }
        if self.partition.classes_per_client == 0 {
            return Err(Error::validation(
                "/partition/classes_per_client",
                "must be positive",
            ));
        }
        if let Some(fr) = &self.partition.shard_fractions {
            if fr.len() != n {
                return Err(Error::validation(
                    "/partition/shard_fractions",
                    format!("{} fractions for {n} clients", fr.len()),
                ));
            }
            if fr.iter().any(|&x| x.is_nan() || x <= 0.0)
                || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(Error::validation(
                    "/partition/shard_fractions",
                    "fractions must be positive and sum to 1",
                ));
            }
        } else if self.partition.scheme == PartitionScheme::Practical && n < 2 {
            return Err(Error::validation(
                "/partition/num_clients",
                "practical scheme needs at least 2 clients",
            ));
        }
        if self.model.kind == ModelKindName::Mlp1Hidden && self.model.hidden_dim == Some(0) {
            return Err(Error::validation("/model/hidden_dim", "must be positive"));
        }
        if self.model.kind == ModelKindName::SoftmaxRegression && self.model.hidden_dim.is_some() {
            return Err(Error::validation(
                "/model/hidden_dim",
                "softmax regression has no hidden layer",
            ));
        }
        if let DataConfig::Synthetic {
            num_classes,
            feature_dim,
            train_per_class,
            test_per_class,
            class_center_scale,
            noise_sigma,
            ..
        } = &self.data
        {
            if *num_classes < 2 {
                return Err(Error::validation("/data/num_classes", "must be at least 2"));
            }
            for (ptr, v) in [
                ("/data/feature_dim", *feature_dim),
                ("/data/train_per_class", *train_per_class),
                ("/data/test_per_class", *test_per_class),
            ] {
                if v == 0 {
                    return Err(Error::validation(ptr, "must be positive"));
                }
            }
            positive("/data/class_center_scale", *class_center_scale)?;
            non_negative("/data/noise_sigma", *noise_sigma)?;
        }
        Ok(())
    }
}

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}
