use std::ops::Range;

use rand::seq::SliceRandom;

use super::config::{AlgorithmTag, BaseAlgorithm, TrainConfig};
use crate::analysis::prompt_drift;
use crate::data::{ClientShard, Dataset};
use crate::error::{Error, Result};
use crate::nn::BodyHeadSplit;
use crate::numeric::{BackwardOptions, Network};
use crate::prompting::{prompt_grad_step, PromptState};
use crate::rng::{stream, StreamRng};
use crate::scalar::Scalar;

/// Everything a client keeps between rounds. Only the upload of a
/// [`LocalUpdate`] ever leaves the client.
#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub id: usize,
    pub shard: ClientShard,
    pub prompt: Option<PromptState<T>>,
    /// Private final layer (FedPer / FedRep).
    pub head: Option<Vec<T>>,
    /// Full private model (Local).
    pub model: Option<Vec<T>>,
}

impl<T: Scalar> ClientState<T> {
    pub fn new(shard: ClientShard) -> Self {
        Self {
            id: shard.client_id,
            shard,
            prompt: None,
            head: None,
            model: None,
        }
    }

    /// The parameters this client evaluates with, given the current global vector.
    pub fn personalized_params(&self, global: &[T], split: &BodyHeadSplit) -> Vec<T> {
        if let Some(m) = &self.model {
            return m.clone();
        }
        let mut w = global.to_vec();
        if let Some(h) = &self.head {
            w[split.head.clone()].copy_from_slice(h);
        }
        w
    }
}

/// Read-only round context shared by all client trainers.
#[derive(Clone, Copy)]
pub struct LocalEnv<'a, T> {
    pub train: &'a Dataset<T>,
    pub cfg: &'a TrainConfig,
    pub split: &'a BodyHeadSplit,
    pub round: usize,
}

impl<T> LocalEnv<'_, T> {
    fn rng(&self, domain: &str, client: usize) -> StreamRng {
        stream(self.cfg.seed, domain, &[client as u64, self.round as u64])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalUpdate<T> {
    /// Shared parameters sent to the server: the full backbone, the body for
    /// decoupled algorithms, nothing for Local.
    pub upload: Vec<T>,
    /// Mean batch loss over the last local epoch.
    pub train_loss: Option<f64>,
    /// Mean absolute prompt change during this round.
    pub prompt_drift: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoupledVariant {
    FedPer,
    FedRep,
}

struct Phase<'p, T> {
    epochs: usize,
    lr: T,
    scope: Range<usize>,
    prox: Option<(T, &'p [T])>,
    batches: &'static str,
    placements: &'static str,
}

fn shuffled(indices: &[usize], rng: &mut StreamRng) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    order
}

/// Minibatch SGD on `phase.scope` with the prompt (if any) frozen.
fn weight_phase<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &ClientState<T>,
    phase: Phase<'_, T>,
) -> Result<Option<f64>> {
    let mut batch_rng = env.rng(phase.batches, state.id);
    let mut place_rng = env.rng(phase.placements, state.id);
    let mut last = None;
    for _ in 0..phase.epochs {
        let order = shuffled(&state.shard.train, &mut batch_rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(env.cfg.batch_size) {
            let mut x = env.train.batch(chunk)?;
            if let Some(p) = &state.prompt {
                x = p.apply_at(&x, p.place(&mut place_rng))?;
            }
            let (loss, _) = net.forward_loss(&x, &env.train.labels_of(chunk), true)?;
            let mut grads = net.backward()?;
            if let Some((mu, anchor)) = phase.prox {
                let params = net.params();
                let g = grads.values_mut();
                for i in phase.scope.clone() {
                    g[i] += mu * (params[i] - anchor[i]);
                }
            }
            net.sgd_step(&grads, phase.lr, phase.scope.clone())?;
            sum += loss.as_f64();
            count += 1;
        }
        if count > 0 {
            last = Some(sum / count as f64);
        }
    }
    Ok(last)
}

/// Minibatch SGD on the prompt values with the network frozen.
fn prompt_phase<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    id: usize,
    shard: &ClientShard,
    prompt: &mut PromptState<T>,
) -> Result<()> {
    let mut batch_rng = env.rng("batches-prompt", id);
    let mut place_rng = env.rng("placements-prompt", id);
    let lr = T::from_f64_lossy(env.cfg.prompt_lr);
    for _ in 0..env.cfg.prompt_epochs {
        let order = shuffled(&shard.train, &mut batch_rng);
        for chunk in order.chunks(env.cfg.batch_size) {
            let placement = prompt.place(&mut place_rng);
            let x = prompt.apply_at(&env.train.batch(chunk)?, placement)?;
            net.forward_loss(&x, &env.train.labels_of(chunk), true)?;
            let out = net.backward_with(BackwardOptions {
                params: false,
                input: true,
            })?;
            let dx = out.input.expect("input gradient requested");
            let g = prompt.gradient(&dx, placement)?;
            prompt_grad_step(prompt, &g, lr)?;
        }
    }
    Ok(())
}

fn train_as<T: Scalar>(
    tag: AlgorithmTag,
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
) -> Result<LocalUpdate<T>> {
    let cfg = env.cfg;
    if global.len() != net.param_count() {
        return Err(Error::ParamMismatch(format!(
            "received {} parameters for a network with {}",
            global.len(),
            net.param_count()
        )));
    }
    let split = env.split;
    let start = match tag.base {
        BaseAlgorithm::Local => state.model.as_deref().unwrap_or(global),
        _ => global,
    };
    net.params_mut().copy_from_slice(start);
    if tag.base.is_decoupled() {
        let head = state.head.get_or_insert_with(|| global[split.head.clone()].to_vec());
        net.params_mut()[split.head.clone()].copy_from_slice(head);
    }

    let mut drift = None;
    if tag.prompt {
        let prompt = state
            .prompt
            .as_mut()
            .ok_or_else(|| Error::InvalidPrompt(format!("client {} has no prompt", state.id)))?;
        let before = prompt.clone();
        prompt_phase(net, env, state.id, &state.shard, prompt)?;
        drift = Some(prompt_drift(&before, prompt)?);
    } else if state.prompt.is_some() {
        return Err(Error::UnsupportedAlgorithm(format!("{tag} with a client prompt")));
    }

    let all = 0..net.param_count();
    let backbone = |scope: Range<usize>, prox| Phase {
        epochs: cfg.backbone_epochs,
        lr: T::from_f64_lossy(cfg.backbone_lr),
        scope,
        prox,
        batches: "batches-backbone",
        placements: "placements-backbone",
    };
    let train_loss = match tag.base {
        BaseAlgorithm::FedAvg | BaseAlgorithm::Local | BaseAlgorithm::FedPer => {
            weight_phase(net, env, state, backbone(all, None))?
        }
        BaseAlgorithm::FedProx => {
            let mu = T::from_f64_lossy(cfg.prox_mu);
            weight_phase(net, env, state, backbone(all, Some((mu, global))))?
        }
        BaseAlgorithm::FedRep => {
            let head_phase = Phase {
                epochs: cfg.head_epochs,
                lr: T::from_f64_lossy(cfg.head_lr),
                scope: split.head.clone(),
                prox: None,
                batches: "batches-head",
                placements: "placements-head",
            };
            let head_loss = weight_phase(net, env, state, head_phase)?;
            weight_phase(net, env, state, backbone(split.body.clone(), None))?.or(head_loss)
        }
    };

    let params = net.params();
    let upload = match tag.base {
        BaseAlgorithm::Local => {
            state.model = Some(params.to_vec());
            Vec::new()
        }
        BaseAlgorithm::FedPer | BaseAlgorithm::FedRep => {
            state.head = Some(params[split.head.clone()].to_vec());
            params[split.body.clone()].to_vec()
        }
        BaseAlgorithm::FedAvg | BaseAlgorithm::FedProx => params.to_vec(),
    };
    Ok(LocalUpdate {
        upload,
        train_loss,
        prompt_drift: drift,
    })
}

/// One round of local work for the configured algorithm.
pub fn local_train<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
) -> Result<LocalUpdate<T>> {
    train_as(env.cfg.algorithm, net, env, state, global)
}

/// `E_b` epochs of SGD on raw data; returns the full backbone.
pub fn local_train_fedavg<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
) -> Result<LocalUpdate<T>> {
    train_as(AlgorithmTag::plain(BaseAlgorithm::FedAvg), net, env, state, global)
}

/// FedAvg local training with the proximal gradient `μ (w − w_global)`.
pub fn local_train_fedprox<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
) -> Result<LocalUpdate<T>> {
    train_as(AlgorithmTag::plain(BaseAlgorithm::FedProx), net, env, state, global)
}

/// `E_g` prompt epochs with the backbone frozen, then `E_b` backbone epochs
/// on prompted inputs. The prompt stays in `state`.
pub fn local_train_pfedpt<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
) -> Result<LocalUpdate<T>> {
    train_as(AlgorithmTag::PFEDPT, net, env, state, global)
}

/// Body/head training; only the body is uploaded and the head stays in `state`.
pub fn local_train_decoupled<T: Scalar>(
    net: &mut Network<T>,
    env: &LocalEnv<'_, T>,
    state: &mut ClientState<T>,
    global: &[T],
    variant: DecoupledVariant,
) -> Result<LocalUpdate<T>> {
    let base = match variant {
        DecoupledVariant::FedPer => BaseAlgorithm::FedPer,
        DecoupledVariant::FedRep => BaseAlgorithm::FedRep,
    };
    let tag = AlgorithmTag {
        base,
        prompt: state.prompt.is_some(),
    };
    train_as(tag, net, env, state, global)
}
