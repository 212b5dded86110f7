//! Client partitions. Train indices are split per scheme; every client's
//! test indices are then drawn from the test split with the same per-class
//! client proportions as its train shard.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionScheme {
    Iid,
    Dirichlet,
    Pathological,
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Iid => "iid",
            Self::Dirichlet => "dirichlet",
            Self::Pathological => "pathological",
        })
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(Self::Iid),
            "dirichlet" => Ok(Self::Dirichlet),
            "pathological" => Ok(Self::Pathological),
            _ => Err(Error::InvalidArgument(format!("unknown partition scheme `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub scheme: PartitionScheme,
    /// Dirichlet concentration, drawn per class over clients.
    pub alpha: f64,
    pub classes_per_client: usize,
    pub num_clients: usize,
    pub seed: u64,
    /// Minimum train samples per client; draws below it are redrawn.
    pub min_samples: usize,
    pub max_retries: usize,
}

impl PartitionConfig {
    pub fn new(scheme: PartitionScheme, num_clients: usize, seed: u64) -> Self {
        Self {
            scheme,
            alpha: 0.3,
            classes_per_client: 5,
            num_clients,
            seed,
            min_samples: 10,
            max_retries: 100,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be positive".into()));
        }
        match self.scheme {
            PartitionScheme::Dirichlet if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(Error::InvalidArgument("alpha must be positive".into()))
            }
            PartitionScheme::Pathological
                if self.classes_per_client == 0 || self.classes_per_client > num_classes =>
            {
                Err(Error::InvalidArgument(format!(
                    "classes_per_client must lie in [1, {num_classes}]"
                )))
            }
            PartitionScheme::Pathological if self.classes_per_client * self.num_clients < num_classes => {
                Err(Error::InfeasiblePartition(format!(
                    "{} clients × {} classes cannot cover {num_classes} classes",
                    self.num_clients, self.classes_per_client
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Class counts over `train`.
    pub label_histogram: Vec<usize>,
}

impl ClientShard {
    pub fn test_histogram(&self, test_labels: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.label_histogram.len()];
        for &i in &self.test {
            h[test_labels[i]] += 1;
        }
        h
    }

    pub fn label_distribution(&self) -> Vec<f64> {
        let n = self.train.len().max(1) as f64;
        self.label_histogram.iter().map(|&c| c as f64 / n).collect()
    }
}

fn by_class(labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("label {y} outside [0, {num_classes})")));
        }
        out[y].push(i);
    }
    Ok(out)
}

/// Integer counts proportional to `weights` summing to `total`
/// (largest remainder, ties to the lower index).
fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if total == 0 || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// `counts[c][i]`: train samples of class `c` assigned to client `i`.
fn train_counts(cfg: &PartitionConfig, class_sizes: &[usize], rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
    let n = cfg.num_clients;
    let k = class_sizes.len();
    Ok(match cfg.scheme {
        PartitionScheme::Iid => unreachable!("iid shards are split directly"),
        PartitionScheme::Dirichlet => {
            let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            class_sizes
                .iter()
                .map(|&size| {
                    let p: Vec<f64> = (0..n).map(|_| rng.sample(gamma)).collect();
                    apportion(&p, size)
                })
                .collect()
        }
        PartitionScheme::Pathological => {
            let mut classes: Vec<usize> = (0..k).collect();
            classes.shuffle(rng);
            let mut clients: Vec<usize> = (0..n).collect();
            clients.shuffle(rng);
            let mut holders = vec![Vec::new(); k];
            for (slot, &client) in clients.iter().enumerate() {
                for j in 0..cfg.classes_per_client {
                    holders[classes[(slot * cfg.classes_per_client + j) % k]].push(client);
                }
            }
            let mut counts = vec![vec![0; n]; k];
            for (c, hs) in holders.iter_mut().enumerate() {
                hs.sort_unstable();
                let share = apportion(&vec![1.0; hs.len()], class_sizes[c]);
                for (&client, s) in hs.iter().zip(share) {
                    counts[c][client] = s;
                }
            }
            counts
        }
    })
}

/// Splits `train_labels` among clients per `cfg` and builds matched test
/// shards from `test_labels`.
pub fn partition(train_labels: &[usize], test_labels: &[usize], num_classes: usize, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    cfg.validate(num_classes)?;
    let n = cfg.num_clients;
    if cfg.min_samples * n > train_labels.len() {
        return Err(Error::InfeasiblePartition(format!(
            "{} train samples cannot give {n} clients {} samples each",
            train_labels.len(),
            cfg.min_samples
        )));
    }
    let train_by_class = by_class(train_labels, num_classes)?;
    let test_by_class = by_class(test_labels, num_classes)?;
    let sizes: Vec<usize> = train_by_class.iter().map(Vec::len).collect();

    for attempt in 0..cfg.max_retries.max(1) {
        let mut r = rng::stream(cfg.seed, "partition", &[attempt as u64]);
        let mut train: Vec<Vec<usize>> = vec![Vec::new(); n];
        let counts: Vec<Vec<usize>> = if cfg.scheme == PartitionScheme::Iid {
            let mut all: Vec<usize> = (0..train_labels.len()).collect();
            all.shuffle(&mut r);
            let share = apportion(&vec![1.0; n], all.len());
            let mut start = 0;
            for (i, s) in share.into_iter().enumerate() {
                train[i] = all[start..start + s].to_vec();
                start += s;
            }
            let mut counts = vec![vec![0; n]; num_classes];
            for (i, idx) in train.iter().enumerate() {
                for &j in idx {
                    counts[train_labels[j]][i] += 1;
                }
            }
            counts
        } else {
            let counts = train_counts(cfg, &sizes, &mut r)?;
            for (c, pool) in train_by_class.iter().enumerate() {
                let mut pool = pool.clone();
                pool.shuffle(&mut r);
                let mut start = 0;
                for (i, &cnt) in counts[c].iter().enumerate() {
                    train[i].extend_from_slice(&pool[start..start + cnt]);
                    start += cnt;
                }
            }
            counts
        };
        if train.iter().any(|t| t.len() < cfg.min_samples) {
            log::debug!("partition attempt {attempt} left a client below {} samples", cfg.min_samples);
            continue;
        }

        let mut test: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (c, pool) in test_by_class.iter().enumerate() {
            let weights: Vec<f64> = counts[c].iter().map(|&v| v as f64).collect();
            let share = apportion(&weights, pool.len());
            let mut pool = pool.clone();
            pool.shuffle(&mut r);
            let mut start = 0;
            for (i, cnt) in share.into_iter().enumerate() {
                test[i].extend_from_slice(&pool[start..start + cnt]);
                start += cnt;
            }
        }

        return Ok(train
            .into_iter()
            .zip(test)
            .enumerate()
            .map(|(client_id, (mut tr, mut te))| {
                tr.sort_unstable();
                te.sort_unstable();
                let mut label_histogram = vec![0; num_classes];
                for &i in &tr {
                    label_histogram[train_labels[i]] += 1;
                }
                ClientShard {
                    client_id,
                    train: tr,
                    test: te,
                    label_histogram,
                }
            })
            .collect());
    }
    Err(Error::RetriesExhausted(cfg.max_retries.max(1)))
}

/// CSV rows `client_id,split,index`.
pub fn write_shard_manifest(shards: &[ClientShard], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["client_id", "split", "index"])?;
    for s in shards {
        for (split, idx) in [("train", &s.train), ("test", &s.test)] {
            for i in idx {
                out.write_record([s.client_id.to_string(), split.to_string(), i.to_string()])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(per_class: usize, k: usize) -> Vec<usize> {
        (0..per_class * k).map(|i| i % k).collect()
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(apportion(&[0.75, 0.25], 8), vec![6, 2]);
        assert_eq!(apportion(&[0.0, 0.0], 8), vec![0, 0]);
    }

    #[test]
    fn iid_equal_split() {
        let y = labels(5000, 10);
        let shards = partition(&y, &labels(1000, 10), 10, &PartitionConfig::new(PartitionScheme::Iid, 50, 0)).unwrap();
        assert!(shards.iter().all(|s| s.train.len() == 1000));
    }

    #[test]
    fn config_errors() {
        let y = labels(10, 10);
        let mut cfg = PartitionConfig::new(PartitionScheme::Dirichlet, 2, 0);
        cfg.alpha = 0.0;
        let err = partition(&y, &y, 10, &cfg).unwrap_err();
        assert!(err.to_string().contains("alpha must be positive"));

        let mut cfg = PartitionConfig::new(PartitionScheme::Pathological, 2, 0);
        cfg.classes_per_client = 4;
        assert!(matches!(partition(&y, &y, 10, &cfg), Err(Error::InfeasiblePartition(_))));
        cfg.classes_per_client = 11;
        assert!(partition(&y, &y, 10, &cfg).is_err());

        let cfg = PartitionConfig::new(PartitionScheme::Iid, 20, 0);
        assert!(matches!(partition(&y, &y, 10, &cfg), Err(Error::InfeasiblePartition(_))));
    }

    #[test]
    fn retry_budget_exhaustion() {
        // 10 clients, 120 samples, floor of 12: a tiny alpha nearly always
        // starves someone
        let y = labels(12, 10);
        let mut cfg = PartitionConfig::new(PartitionScheme::Dirichlet, 10, 0);
        cfg.alpha = 0.01;
        cfg.min_samples = 12;
        cfg.max_retries = 3;
        assert!(matches!(partition(&y, &y, 10, &cfg), Err(Error::RetriesExhausted(3))));
    }

    #[test]
    fn manifest_rows() {
        let y = labels(2, 2);
        let mut cfg = PartitionConfig::new(PartitionScheme::Iid, 2, 0);
        cfg.min_samples = 1;
        let shards = partition(&y, &y, 2, &cfg).unwrap();
        let mut buf = Vec::new();
        write_shard_manifest(&shards, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("client_id,split,index"));
        assert_eq!(text.lines().count(), 1 + 8);
    }
}
