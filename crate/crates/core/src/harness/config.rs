use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{gen_frost_surrogate, load_mnist, Dataset, Split, SurrogateParams};
use crate::error::{Error, Result};
use crate::net::ResNet4Config;
use crate::train::TrainConfig;
use crate::verify::VerifyConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetChoice {
    Mnist,
    FrostSurrogate,
}

impl fmt::Display for DatasetChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetChoice::Mnist => "mnist",
            DatasetChoice::FrostSurrogate => "frost_surrogate",
        })
    }
}

impl FromStr for DatasetChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetChoice::Mnist),
            "frost_surrogate" | "frost-surrogate" | "frost" => Ok(DatasetChoice::FrostSurrogate),
            _ => Err(Error::InvalidArgument(format!(
                "unknown dataset {s:?} (expected mnist or frost_surrogate)"
            ))),
        }
    }
}

/// Where the train/test pair comes from and how much of it is used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub choice: DatasetChoice,
    /// Directory holding the four MNIST IDX files.
    pub mnist_dir: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    /// Generator seed and image side for the surrogate.
    pub surrogate_seed: u64,
    pub surrogate_size: usize,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

impl DataConfig {
    pub fn desk(choice: DatasetChoice, mnist_dir: impl Into<PathBuf>) -> Self {
        Self {
            choice,
            mnist_dir: mnist_dir.into(),
            n_train: 2000,
            n_test: 500,
            surrogate_seed: 10,
            surrogate_size: 16,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self.choice {
            DatasetChoice::Mnist => [1, 28, 28],
            DatasetChoice::FrostSurrogate => [1, self.surrogate_size, self.surrogate_size],
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.choice {
            DatasetChoice::Mnist => 10,
            DatasetChoice::FrostSurrogate => 2,
        }
    }

    /// The first `n_train` / `n_test` items of each split.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self.choice {
            DatasetChoice::Mnist => {
                let p = |f: &str| self.mnist_dir.join(f);
                let train = load_mnist(p(MNIST_FILES[0]), p(MNIST_FILES[1]), Split::Train)?;
                let test = load_mnist(p(MNIST_FILES[2]), p(MNIST_FILES[3]), Split::Test)?;
                Ok((train.head(self.n_train)?, test.head(self.n_test)?))
            }
            DatasetChoice::FrostSurrogate => gen_frost_surrogate(&self.surrogate_params()),
        }
    }

    pub fn surrogate_params(&self) -> SurrogateParams {
        SurrogateParams {
            seed: self.surrogate_seed,
            n_train: self.n_train,
            n_test: self.n_test,
            size: self.surrogate_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub ratios: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_inputs: usize,
    pub timeout_s: f64,
    pub accuracy_threshold: f64,
    pub arch: ResNet4Config,
    /// Optimizer settings; `seed` and `accuracy_threshold` are overridden
    /// per run.
    pub train: TrainConfig,
    /// Branch-and-bound settings; `timeout_s` and `seed` are overridden per
    /// instance.
    pub verify: VerifyConfig,
}

impl SweepConfig {
    /// 3 seeds, ratios {0, 0.4, 0.8}, ε = 0.006, 20 inputs, 30 s per
    /// instance, threshold 0.97.
    pub fn desk(data: DataConfig) -> Self {
        let arch = ResNet4Config::desk(data.image_shape(), data.num_classes());
        Self {
            data,
            seeds: vec![10, 20, 30],
            ratios: vec![0.0, 0.4, 0.8],
            epsilons: vec![0.006],
            n_inputs: 20,
            timeout_s: 30.0,
            accuracy_threshold: 0.97,
            arch,
            train: TrainConfig::desk(0),
            verify: VerifyConfig {
                max_subdomains: 1_000,
                ..VerifyConfig::default()
            },
        }
    }

    /// Full MNIST protocol: seeds 10..100, ratios 0 and 0.1..0.8, three
    /// radii, 100 inputs, 5 minutes each, 99.4% accuracy on the full data.
    pub fn full_mnist(mnist_dir: impl Into<PathBuf>) -> Self {
        let data = DataConfig {
            n_train: 60_000,
            n_test: 10_000,
            ..DataConfig::desk(DatasetChoice::Mnist, mnist_dir)
        };
        let mut ratios = vec![0.0];
        ratios.extend((1..=8).map(|k| k as f64 / 10.0));
        Self {
            seeds: (1..=10).map(|k| 10 * k).collect(),
            ratios,
            epsilons: vec![0.006, 0.007, 0.008],
            n_inputs: 100,
            timeout_s: 300.0,
            accuracy_threshold: 0.994,
            train: TrainConfig::full(0),
            verify: VerifyConfig::default(),
            ..Self::desk(data)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("sweep config: {m}")));
        if self.seeds.is_empty() || self.ratios.is_empty() || self.epsilons.is_empty() {
            return bad("seeds, ratios and epsilons must be non-empty".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return bad(format!("ratio {r} outside [0, 1)"));
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return bad(format!("epsilon {e} must be positive"));
        }
        for (name, list) in [("ratio", &self.ratios), ("epsilon", &self.epsilons)] {
            let mut sorted = list.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.len() != list.len() {
                return bad(format!("duplicate {name}"));
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return bad("duplicate seed".into());
        }
        if self.n_inputs == 0 || self.n_inputs > self.data.n_test {
            return bad(format!("n_inputs {} must lie in 1..={}", self.n_inputs, self.data.n_test));
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return bad("timeout_s must be positive".into());
        }
        if self.arch.input_shape != self.data.image_shape() || self.arch.num_classes != self.data.num_classes() {
            return bad("architecture does not match the dataset".into());
        }
        self.train_config(0).validate()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            accuracy_threshold: self.accuracy_threshold,
            ..self.train.clone()
        }
    }

    /// Per-instance verifier settings with a seed unique to (run, input).
    pub fn verify_config(&self, seed: u64, input: usize) -> VerifyConfig {
        VerifyConfig {
            timeout_s: Some(self.timeout_s),
            seed: seed.wrapping_mul(1_000_003).wrapping_add(input as u64),
            ..self.verify
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
