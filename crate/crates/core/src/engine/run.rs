use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use super::aggregate::aggregate_slices;
use super::config::{AlgorithmTag, BaseAlgorithm, TrainConfig};
use super::local::{local_train, ClientState, LocalEnv, LocalUpdate};
use super::report::{ClientRoundRecord, ExperimentSummary, RoundReport};
use crate::analysis::evaluate_client;
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::{build_model, split_body_head, BodyHeadSplit, ModelSpec};
use crate::numeric::{Network, ParameterVector};
use crate::prompting::{init_prompt, PromptSpec};
use crate::rng::{derive_seed, stream};
use crate::scalar::Scalar;

/// `round(n·fraction)` distinct ids (at least one), sorted ascending.
pub fn sample_clients(n: usize, fraction: f64, rng: &mut impl Rng) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n);
    let mut ids = rand::seq::index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Copy)]
pub struct ExperimentSetup<'a, T> {
    pub train: &'a Dataset<T>,
    pub test: &'a Dataset<T>,
    /// One shard per client, indexed by client id.
    pub shards: &'a [ClientShard],
    pub model: &'a ModelSpec,
    /// Required when the algorithm uses prompts, ignored otherwise.
    pub prompt: Option<&'a PromptSpec>,
    pub cfg: &'a TrainConfig,
}

pub struct ExperimentRun<T> {
    pub algorithm: AlgorithmTag,
    pub reports: Vec<RoundReport>,
    pub initial: ParameterVector<T>,
    pub global: ParameterVector<T>,
    pub clients: Vec<ClientState<T>>,
    pub split: BodyHeadSplit,
    /// Network holding the final global parameters.
    pub network: Network<T>,
}

impl<T: Scalar> ExperimentRun<T> {
    pub fn summary(&self) -> ExperimentSummary {
        ExperimentSummary::from_reports(self.algorithm, &self.reports)
    }

    /// Network loaded with the parameters client `id` evaluates with.
    pub fn client_network(&self, id: usize) -> Network<T> {
        let mut net = self.network.clone();
        net.params_mut()
            .copy_from_slice(&self.clients[id].personalized_params(self.global.values(), &self.split));
        net
    }
}

fn check_setup<T: Scalar>(setup: &ExperimentSetup<'_, T>) -> Result<Option<PromptSpec>> {
    let cfg = setup.cfg;
    cfg.validate()?;
    setup.model.validate()?;
    if setup.shards.len() != cfg.clients {
        return Err(Error::InvalidArgument(format!(
            "{} shards for {} clients",
            setup.shards.len(),
            cfg.clients
        )));
    }
    for (i, s) in setup.shards.iter().enumerate() {
        if s.client_id != i {
            return Err(Error::InvalidArgument(format!("shard {i} belongs to client {}", s.client_id)));
        }
        if s.train.is_empty() || s.test.is_empty() {
            return Err(Error::EmptyShard(format!("client {i}")));
        }
    }
    for ds in [setup.train, setup.test] {
        if ds.shape != setup.model.input_shape || ds.num_classes != setup.model.num_classes {
            return Err(Error::InvalidModel(format!(
                "model {} does not fit data of shape {:?} with {} classes",
                setup.model, ds.shape, ds.num_classes
            )));
        }
    }
    if !cfg.algorithm.prompt {
        return Ok(None);
    }
    let spec = setup
        .prompt
        .ok_or_else(|| Error::InvalidPrompt(format!("{} needs a prompt spec", cfg.algorithm)))?;
    spec.validate()?;
    if spec.image_shape != setup.model.input_shape {
        return Err(Error::InvalidPrompt(format!(
            "prompt for images {:?}, model input {:?}",
            spec.image_shape, setup.model.input_shape
        )));
    }
    Ok(Some(*spec))
}

/// Runs `cfg.rounds` rounds of sample, local training, aggregation and
/// evaluation of every client. `on_round` sees each report as it is
/// produced, so callers can persist partial results of a failing run.
pub fn run_experiment<T: Scalar>(
    setup: &ExperimentSetup<'_, T>,
    mut on_round: impl FnMut(&RoundReport) -> Result<()>,
) -> Result<ExperimentRun<T>> {
    let prompt_spec = check_setup(setup)?;
    let cfg = setup.cfg;
    let tag = cfg.algorithm;
    let mut template = build_model::<T>(setup.model, derive_seed(cfg.seed, "model-init", &[]))?;
    let split = split_body_head(&template);
    let initial = template.flatten();
    let mut global = initial.values().to_vec();

    let mut clients = setup
        .shards
        .iter()
        .map(|s| {
            let mut c = ClientState::new(s.clone());
            if let Some(spec) = &prompt_spec {
                c.prompt = Some(init_prompt(spec, s.client_id)?);
            }
            if tag.base.is_decoupled() {
                c.head = Some(global[split.head.clone()].to_vec());
            }
            if tag.base == BaseAlgorithm::Local {
                c.model = Some(global.clone());
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;

    let mut reports = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let started = Instant::now();
        let sampled = sample_clients(
            cfg.clients,
            cfg.sample_fraction,
            &mut stream(cfg.seed, "sample-clients", &[round as u64]),
        );
        let mut is_sampled = vec![false; cfg.clients];
        for &id in &sampled {
            is_sampled[id] = true;
        }
        let env = LocalEnv {
            train: setup.train,
            cfg,
            split: &split,
            round,
        };
        let mut updates: Vec<(usize, LocalUpdate<T>)> = pool.install(|| {
            clients
                .par_iter_mut()
                .filter(|c| is_sampled[c.id])
                .map(|c| {
                    let mut net = template.clone();
                    local_train(&mut net, &env, c, &global).map(|u| (c.id, u))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        updates.sort_by_key(|u| u.0);

        let sizes: Vec<f64> = updates.iter().map(|(id, _)| setup.shards[*id].train.len() as f64).collect();
        let total: f64 = sizes.iter().sum();
        let uploads: Vec<&[T]> = updates.iter().map(|(_, u)| u.upload.as_slice()).collect();
        let weights = match tag.base {
            BaseAlgorithm::Local => Vec::new(),
            BaseAlgorithm::FedAvg | BaseAlgorithm::FedProx => {
                global = aggregate_slices(&uploads, &sizes)?;
                sizes.iter().map(|s| s / total).collect()
            }
            BaseAlgorithm::FedPer | BaseAlgorithm::FedRep => {
                let body = aggregate_slices(&uploads, &sizes)?;
                global[split.body.clone()].copy_from_slice(&body);
                sizes.iter().map(|s| s / total).collect()
            }
        };

        let accs = pool.install(|| {
            clients
                .par_iter()
                .map(|c| {
                    let mut net = template.clone();
                    net.params_mut().copy_from_slice(&c.personalized_params(&global, &split));
                    let mut rng = stream(cfg.seed, "placements-eval", &[c.id as u64, round as u64]);
                    evaluate_client(&net, c.prompt.as_ref(), setup.test, &c.shard.test, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut records: Vec<ClientRoundRecord> = accs
            .iter()
            .enumerate()
            .map(|(id, &acc)| ClientRoundRecord {
                client_id: id,
                train_loss: None,
                test_acc: acc,
                prompt_drift: 0.0,
            })
            .collect();
        for (id, u) in &updates {
            records[*id].train_loss = u.train_loss;
            records[*id].prompt_drift = u.prompt_drift.unwrap_or(0.0);
        }
        let mean_prompt_drift =
            updates.iter().map(|(_, u)| u.prompt_drift.unwrap_or(0.0)).sum::<f64>() / updates.len().max(1) as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for (s, &acc) in setup.shards.iter().zip(&accs) {
            num += s.train.len() as f64 * acc;
            den += s.train.len() as f64;
        }
        let report = RoundReport {
            round,
            sampled,
            aggregation_weights: weights,
            clients: records,
            weighted_acc: num / den,
            mean_prompt_drift,
            wall_ms: if cfg.record_wall_time {
                started.elapsed().as_millis() as u64
            } else {
                0
            },
        };
        on_round(&report)?;
        reports.push(report);
    }

    template.params_mut().copy_from_slice(&global);
    Ok(ExperimentRun {
        algorithm: tag,
        reports,
        global: ParameterVector::new(initial.layout().clone(), global)?,
        initial,
        clients,
        split,
        network: template,
    })
}
