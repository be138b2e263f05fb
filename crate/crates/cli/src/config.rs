//! TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use idkm::data::{load_mnist, synthetic_blobs, Dataset};
use idkm::grad::{BackendKind, GradBackend};
use idkm::kmeans::InitKind;
use idkm::nn::{LossKind, NetworkSpec};
use idkm::train::{LayerOverride, PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const DATA_DIR_ENV: &str = "IDKM_DATA_DIR";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<DataConfig>,
    pub model: Option<NetworkSpec>,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub quantize: QuantizeSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
    #[serde(default)]
    pub bench: BenchSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Mnist {
        /// Falls back to the data-dir environment variable.
        dir: Option<PathBuf>,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        points_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default)]
        seed: u64,
        /// Share of samples held out for evaluation.
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub seed: Option<u64>,
    /// Exit with a check failure when final accuracy is below this.
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizeSection {
    pub checkpoint: Option<PathBuf>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub tau: Option<f64>,
    pub eps: Option<f64>,
    pub max_cluster_iters: Option<usize>,
    pub backend: Option<BackendKind>,
    pub alpha0: Option<f64>,
    pub max_adjoint_iters: Option<usize>,
    pub max_restarts: Option<usize>,
    pub adjoint_eps: Option<f64>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub loss: Option<LossKind>,
    pub init: Option<InitKind>,
    pub seed: Option<u64>,
    pub fallback_jfb: Option<bool>,
    pub record_trace: Option<bool>,
    pub direct_path: Option<bool>,
    pub fixed_iterations: Option<bool>,
    #[serde(default)]
    pub layers: Vec<LayerOverride>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    pub seeds: Option<usize>,
    pub first_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub ks: Option<Vec<usize>>,
    pub ds: Option<Vec<usize>>,
    pub ts: Option<Vec<usize>>,
    pub weights: Option<usize>,
    pub repeats: Option<usize>,
    pub tau: Option<f64>,
    pub seed: Option<u64>,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub backend: Option<BackendKind>,
    pub k: Option<usize>,
    pub d: Option<usize>,
    pub tau: Option<f64>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub max_cluster_iters: Option<usize>,
    pub eps: Option<f64>,
    pub alpha0: Option<f64>,
    pub seed: Option<u64>,
    pub fallback_jfb: bool,
    pub record_trace: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }

    pub fn model(&self) -> Result<NetworkSpec, CliError> {
        self.model
            .clone()
            .ok_or_else(|| CliError::Config("missing [model] section".into()))
    }

    /// Quantization settings: defaults, then file, then flags.
    pub fn train_config(&self, o: &Overrides) -> Result<TrainConfig, CliError> {
        let q = &self.quantize;
        let mut c = TrainConfig::default();
        let base = GradBackend::default();
        c.backend = GradBackend {
            kind: o.backend.or(q.backend).unwrap_or(base.kind),
            alpha0: o.alpha0.or(q.alpha0).unwrap_or(base.alpha0),
            max_adjoint_iters: q.max_adjoint_iters.unwrap_or(base.max_adjoint_iters),
            max_restarts: q.max_restarts.unwrap_or(base.max_restarts),
            adjoint_eps: q.adjoint_eps.unwrap_or(base.adjoint_eps),
        };
        c.k = o.k.or(q.k).unwrap_or(c.k);
        c.d = o.d.or(q.d).unwrap_or(c.d);
        c.tau = o.tau.or(q.tau).unwrap_or(c.tau);
        c.eps = o.eps.or(q.eps).unwrap_or(c.eps);
        c.max_cluster_iters = o.max_cluster_iters.or(q.max_cluster_iters).unwrap_or(c.max_cluster_iters);
        c.learning_rate = o.lr.or(q.learning_rate).unwrap_or(c.learning_rate);
        c.epochs = o.epochs.or(q.epochs).unwrap_or(c.epochs);
        c.batch_size = q.batch_size.unwrap_or(c.batch_size);
        c.loss = q.loss.unwrap_or(c.loss);
        c.init = q.init.unwrap_or(c.init);
        c.seed = o.seed.or(q.seed).unwrap_or(c.seed);
        c.fallback_jfb = o.fallback_jfb || q.fallback_jfb.unwrap_or(c.fallback_jfb);
        c.record_trace = o.record_trace || q.record_trace.unwrap_or(c.record_trace);
        c.direct_path = q.direct_path.unwrap_or(c.direct_path);
        c.fixed_iterations = q.fixed_iterations.unwrap_or(c.fixed_iterations);
        c.layers = q.layers.clone();
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn pretrain_config(&self, o: &Overrides) -> Result<PretrainConfig, CliError> {
        let p = &self.pretrain;
        let mut c = PretrainConfig::default();
        c.learning_rate = o.lr.or(p.learning_rate).unwrap_or(c.learning_rate);
        c.epochs = o.epochs.or(p.epochs).unwrap_or(c.epochs);
        c.batch_size = p.batch_size.unwrap_or(c.batch_size);
        c.loss = p.loss.unwrap_or(c.loss);
        c.seed = o.seed.or(p.seed).unwrap_or(c.seed);
        if !(c.learning_rate > 0.0) || c.batch_size == 0 {
            return Err(CliError::Config("pretrain learning_rate must be positive and batch_size >= 1".into()));
        }
        Ok(c)
    }

    /// `(train, eval)` splits.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        match self.data.as_ref().ok_or_else(|| CliError::Config("missing [data] section".into()))? {
            DataConfig::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                let dir = resolve_mnist_dir(dir.as_deref())?;
                let load = |train: bool| {
                    load_mnist(&dir, train)
                        .map_err(|e| CliError::MissingData(format!("MNIST in {}: {e}", dir.display())))
                };
                let limit = |ds: Dataset, n: &Option<usize>| match n {
                    Some(n) => ds.split_at(*n).0,
                    None => ds,
                };
                Ok((limit(load(true)?, train_limit), limit(load(false)?, test_limit)))
            }
            DataConfig::Blobs {
                classes,
                points_per_class,
                dim,
                separation,
                seed,
                test_fraction,
            } => {
                if !(0.0..1.0).contains(test_fraction) {
                    return Err(CliError::Config("test_fraction must be in [0, 1)".into()));
                }
                let all = synthetic_blobs(*seed, *classes, *points_per_class, *dim, *separation)
                    .map_err(|e| CliError::Config(e.to_string()))?;
                let test = ((all.len() as f64) * test_fraction).round() as usize;
                let (eval, train) = all.split_at(test);
                let eval = if eval.is_empty() { train.clone() } else { eval };
                Ok((train, eval))
            }
        }
    }
}

/// Directory holding the MNIST IDX files: explicit, else the environment
/// variable, accepting either the directory itself or its `mnist` child.
pub fn resolve_mnist_dir(explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    let root = match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            CliError::MissingData(format!("MNIST location unknown: set {DATA_DIR_ENV} or data.dir"))
        })?,
    };
    let marker = "train-images-idx3-ubyte";
    for cand in [root.clone(), root.join("mnist")] {
        if cand.join(marker).is_file() {
            return Ok(cand);
        }
    }
    Err(CliError::MissingData(format!("no {marker} under {}", root.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[quantize]\nk = 4\nlearning_rat = 0.1\n").unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("learning_rat")), "{err}");
        let err = RunConfig::parse("[model]\ninput_shape = [2]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn flags_override_file() {
        let cfg = RunConfig::parse("[quantize]\nk = 8\ntau = 0.01\nbackend = \"jfb\"\n").unwrap();
        let t = cfg.train_config(&Overrides::default()).unwrap();
        assert_eq!((t.k, t.tau, t.backend.kind), (8, 0.01, BackendKind::Jfb));
        assert_eq!(t.learning_rate, 1e-4);
        let o = Overrides {
            k: Some(2),
            backend: Some(BackendKind::Unrolled),
            ..Overrides::default()
        };
        let t = cfg.train_config(&o).unwrap();
        assert_eq!((t.k, t.tau, t.backend.kind), (2, 0.01, BackendKind::Unrolled));
    }

    #[test]
    fn layer_sections() {
        let cfg = RunConfig::parse(
            "[quantize]\nk = 4\n[[quantize.layers]]\nlayer = 0\nk = 2\nd = 2\n",
        )
        .unwrap();
        let t = cfg.train_config(&Overrides::default()).unwrap();
        assert_eq!(t.layer_kd(0), (2, 2));
        assert_eq!(t.layer_kd(3), (4, 1));
    }
}
