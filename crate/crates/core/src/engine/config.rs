use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BaseAlgorithm {
    FedAvg,
    FedProx,
    /// Every client trains alone; no aggregation or broadcast.
    Local,
    FedPer,
    FedRep,
}

impl BaseAlgorithm {
    pub fn name(self) -> &'static str {
        match self {
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::Local => "local",
            Self::FedPer => "fedper",
            Self::FedRep => "fedrep",
        }
    }

    pub fn is_decoupled(self) -> bool {
        matches!(self, Self::FedPer | Self::FedRep)
    }
}

/// A base algorithm, optionally wrapped with client prompts. FedAvg with
/// prompts is pFedPT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AlgorithmTag {
    pub base: BaseAlgorithm,
    pub prompt: bool,
}

impl AlgorithmTag {
    pub const PFEDPT: Self = Self {
        base: BaseAlgorithm::FedAvg,
        prompt: true,
    };

    pub const fn plain(base: BaseAlgorithm) -> Self {
        Self { base, prompt: false }
    }
}

/// Wraps a base algorithm with the prompt phase and prompted inputs.
pub fn attach_pt_plugin(base: AlgorithmTag) -> Result<AlgorithmTag> {
    if base.prompt || base.base == BaseAlgorithm::Local {
        return Err(Error::UnsupportedAlgorithm(format!("{base}+pt")));
    }
    Ok(AlgorithmTag {
        base: base.base,
        prompt: true,
    })
}

impl fmt::Display for AlgorithmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.base, self.prompt) {
            (BaseAlgorithm::FedAvg, true) => f.write_str("pfedpt"),
            (b, true) => write!(f, "{}+pt", b.name()),
            (b, false) => f.write_str(b.name()),
        }
    }
}

impl FromStr for AlgorithmTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pfedpt" {
            return Ok(Self::PFEDPT);
        }
        let (name, prompt) = match s.strip_suffix("+pt") {
            Some(n) => (n, true),
            None => (s, false),
        };
        let base = [
            BaseAlgorithm::FedAvg,
            BaseAlgorithm::FedProx,
            BaseAlgorithm::Local,
            BaseAlgorithm::FedPer,
            BaseAlgorithm::FedRep,
        ]
        .into_iter()
        .find(|b| b.name() == name)
        .ok_or_else(|| Error::UnsupportedAlgorithm(s.to_string()))?;
        let tag = Self::plain(base);
        if prompt {
            attach_pt_plugin(tag)
        } else {
            Ok(tag)
        }
    }
}

impl Serialize for AlgorithmTag {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlgorithmTag {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hyperparameters of a federated run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: AlgorithmTag,
    pub rounds: usize,
    pub clients: usize,
    pub sample_fraction: f64,
    pub batch_size: usize,
    pub backbone_epochs: usize,
    pub prompt_epochs: usize,
    pub backbone_lr: f64,
    pub prompt_lr: f64,
    pub prox_mu: f64,
    pub head_lr: f64,
    pub head_epochs: usize,
    pub seed: u64,
    /// Concurrent client trainers; results never depend on it.
    pub workers: usize,
    /// When off, `wall_ms` is reported as 0 so report streams stay
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmTag::PFEDPT,
            rounds: 150,
            clients: 50,
            sample_fraction: 0.2,
            batch_size: 16,
            backbone_epochs: 5,
            prompt_epochs: 5,
            backbone_lr: 0.005,
            prompt_lr: 1.0,
            prox_mu: 1e-4,
            head_lr: 0.01,
            head_epochs: 1,
            seed: 0,
            workers: 1,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.clients == 0 {
            return bad("clients must be positive".into());
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return bad(format!("sample_fraction {} outside (0, 1]", self.sample_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("backbone_lr", self.backbone_lr),
            ("prompt_lr", self.prompt_lr),
            ("prox_mu", self.prox_mu),
            ("head_lr", self.head_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        if self.workers == 0 {
            return bad("workers must be positive".into());
        }
        Ok(())
    }
}
