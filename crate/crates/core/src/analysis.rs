//! Diagnostics over trained clients: accuracy, prompt drift, pure-color
//! probes, prediction/label similarity, new-client adaptation and
//! embedding export.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientShard, Dataset};
use crate::engine::RoundReport;
use crate::error::{Error, Result};
use crate::nn::split_body_head;
use crate::numeric::{BackwardOptions, Network, Tensor};
use crate::prompting::{init_prompt, prompt_grad_step, PromptSpec, PromptState};
use crate::rng::stream;
use crate::scalar::Scalar;

const EVAL_BATCH: usize = 256;

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class of every sample in `x`, with the prompt applied at one
/// placement for the whole batch.
fn predict<T: Scalar>(
    net: &Network<T>,
    prompt: Option<&PromptState<T>>,
    x: Tensor<T>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let x = match prompt {
        Some(p) => p.apply_at(&x, p.place(rng))?,
        None => x,
    };
    let logits = net.forward(&x)?;
    let k = net.num_classes();
    Ok(logits.data().chunks(k).map(argmax).collect())
}

/// Fraction of `indices` classified correctly, prompting each input batch
/// when a prompt is given.
pub fn evaluate_client<T: Scalar>(
    net: &Network<T>,
    prompt: Option<&PromptState<T>>,
    data: &Dataset<T>,
    indices: &[usize],
    rng: &mut impl Rng,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::EmptyShard("no test samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let preds = predict(net, prompt, data.batch(chunk)?, rng)?;
        correct += preds.iter().zip(chunk).filter(|(p, &i)| **p == data.labels[i]).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Mean absolute difference of two prompts over their support.
pub fn prompt_drift<T: Scalar>(prev: &PromptState<T>, curr: &PromptState<T>) -> Result<f64> {
    if prev.spec() != curr.spec() {
        return Err(Error::InvalidPrompt("drift between prompts of different specs".into()));
    }
    let (a, b) = (prev.values(), curr.values());
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).abs()).sum();
    Ok(sum / a.len() as f64)
}

/// Per-round mean prompt drift over the clients trained in that round.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DriftSeries {
    pub rounds: Vec<usize>,
    pub mean_drift: Vec<f64>,
}

impl DriftSeries {
    pub const NORM: &'static str = "mean-absolute-difference";

    pub fn from_reports(reports: &[RoundReport]) -> Self {
        Self {
            rounds: reports.iter().map(|r| r.round).collect(),
            mean_drift: reports.iter().map(|r| r.mean_prompt_drift).collect(),
        }
    }

    /// Round of the largest drift (earliest on ties).
    pub fn peak(&self) -> Option<(usize, f64)> {
        self.rounds
            .iter()
            .zip(&self.mean_drift)
            .fold(None, |best, (&r, &d)| match best {
                Some((_, b)) if b >= d => best,
                _ => Some((r, d)),
            })
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["round", "mean_drift"])?;
        for (r, d) in self.rounds.iter().zip(&self.mean_drift) {
            out.write_record([r.to_string(), d.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Classifies `n` constant-color images (each channel uniform over the
/// normalized range [-1, 1]) after prompting, and returns the normalized
/// histogram of predicted classes.
pub fn pure_color_probe<T: Scalar>(
    net: &Network<T>,
    prompt: Option<&PromptState<T>>,
    n: usize,
    shape: [usize; 3],
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("probe needs at least one image".into()));
    }
    let [c, h, w] = shape;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * c * plane);
    for _ in 0..n {
        for _ in 0..c {
            let v = T::from_f64_lossy(rng.random_range(-1.0..=1.0));
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    let images = Tensor::new(vec![n, c, h, w], data)?;
    let mut hist = vec![0.0; net.num_classes()];
    // one placement per image so random patches vary across the probe set
    for img in images.data().chunks(c * plane) {
        let x = Tensor::new(vec![1, c, h, w], img.to_vec())?;
        hist[predict(net, prompt, x, rng)?[0]] += 1.0;
    }
    hist.iter_mut().for_each(|v| *v /= n as f64);
    Ok(hist)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityMetric {
    #[default]
    Cosine,
    /// `1 − ½‖p − q‖₁` on the normalized histograms.
    OneMinusTv,
}

impl fmt::Display for SimilarityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::OneMinusTv => "one-minus-tv",
        })
    }
}

impl FromStr for SimilarityMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "one-minus-tv" => Ok(Self::OneMinusTv),
            _ => Err(Error::InvalidArgument(format!("unknown similarity metric {s:?}"))),
        }
    }
}

pub fn distribution_similarity(a: &[f64], b: &[f64], metric: SimilarityMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("histograms over {} and {} classes", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("histograms must be finite and non-negative".into()));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::InvalidArgument("zero histogram".into()));
    }
    Ok(match metric {
        SimilarityMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (dot / (na * nb)).clamp(0.0, 1.0)
        }
        SimilarityMetric::OneMinusTv => {
            let tv: f64 = a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum::<f64>() / 2.0;
            1.0 - tv
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistributionSimilarity {
    pub client_id: usize,
    pub algorithm: String,
    pub metric: SimilarityMetric,
    pub score: f64,
}

pub fn write_similarity_csv(rows: &[DistributionSimilarity], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["client_id", "algorithm", "score"])?;
    for r in rows {
        out.write_record([r.client_id.to_string(), r.algorithm.clone(), r.score.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Fresh zero prompt trained with the network frozen.
    PromptOnly,
    /// Final layer trained with the rest frozen, no prompt.
    HeadOnly,
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PromptOnly => "prompt-only",
            Self::HeadOnly => "head-only",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub budget_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub prompt_lr: f64,
    pub head_lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            budget_samples: 400,
            epochs: 10,
            batch_size: 16,
            prompt_lr: 1.0,
            head_lr: 0.01,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinetuneCurve {
    pub mode: FinetuneMode,
    /// Test accuracy before adaptation, then after each epoch.
    pub accuracy: Vec<f64>,
}

pub fn write_finetune_csv(curves: &[FinetuneCurve], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "mode", "accuracy"])?;
    for c in curves {
        for (e, a) in c.accuracy.iter().enumerate() {
            out.write_record([e.to_string(), c.mode.to_string(), a.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Adapts a trained network to an unseen client using `budget_samples` of
/// its training shard. The caller's network is never modified.
pub fn finetune_new_client<T: Scalar>(
    net: &Network<T>,
    prompt_spec: &PromptSpec,
    train: &Dataset<T>,
    test: &Dataset<T>,
    shard: &ClientShard,
    mode: FinetuneMode,
    cfg: &FinetuneConfig,
) -> Result<FinetuneCurve> {
    if cfg.budget_samples == 0 || cfg.budget_samples > shard.train.len() {
        return Err(Error::InvalidArgument(format!(
            "budget of {} samples for a shard of {}",
            cfg.budget_samples,
            shard.train.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut pool = shard.train.clone();
    pool.shuffle(&mut stream(cfg.seed, "finetune-budget", &[shard.client_id as u64]));
    pool.truncate(cfg.budget_samples);

    let mut work = net.clone();
    let mut prompt = match mode {
        FinetuneMode::PromptOnly => Some(init_prompt::<T>(prompt_spec, shard.client_id)?),
        FinetuneMode::HeadOnly => None,
    };
    let head = split_body_head(&work).head;
    let mut batch_rng = stream(cfg.seed, "finetune-batches", &[shard.client_id as u64]);
    let mut place_rng = stream(cfg.seed, "finetune-placements", &[shard.client_id as u64]);
    let eval = |w: &Network<T>, p: Option<&PromptState<T>>| {
        let mut rng = stream(cfg.seed, "finetune-eval", &[shard.client_id as u64]);
        evaluate_client(w, p, test, &shard.test, &mut rng)
    };
    let mut accuracy = vec![eval(&work, prompt.as_ref())?];
    for _ in 0..cfg.epochs {
        pool.shuffle(&mut batch_rng);
        for chunk in pool.chunks(cfg.batch_size) {
            let x = train.batch(chunk)?;
            let y = train.labels_of(chunk);
            match prompt.as_mut() {
                Some(p) => {
                    let placement = p.place(&mut place_rng);
                    work.forward_loss(&p.apply_at(&x, placement)?, &y, true)?;
                    let out = work.backward_with(BackwardOptions {
                        params: false,
                        input: true,
                    })?;
                    let g = p.gradient(&out.input.expect("input gradient requested"), placement)?;
                    prompt_grad_step(p, &g, T::from_f64_lossy(cfg.prompt_lr))?;
                }
                None => {
                    work.forward_loss(&x, &y, true)?;
                    let g = work.backward()?;
                    work.sgd_step(&g, T::from_f64_lossy(cfg.head_lr), head.clone())?;
                }
            }
        }
        accuracy.push(eval(&work, prompt.as_ref())?);
    }
    Ok(FinetuneCurve { mode, accuracy })
}

/// Last hidden representation of each sample (prompted when a prompt is given).
pub fn client_embeddings<T: Scalar>(
    net: &Network<T>,
    prompt: Option<&PromptState<T>>,
    data: &Dataset<T>,
    indices: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut x = data.batch(chunk)?;
        if let Some(p) = prompt {
            x = p.apply_at(&x, p.place(rng))?;
        }
        let e = net.embed(&x)?;
        let width = e.shape()[1];
        rows.extend(e.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok(rows)
}

/// Rows of `(client_id, image_id, embedding)`; all embeddings share one width.
pub fn write_embeddings_csv<'a>(rows: impl IntoIterator<Item = (usize, usize, &'a [f64])>, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut width = None;
    for (client, image, values) in rows {
        if width.is_none() {
            let mut header = vec!["client_id".to_string(), "image_id".to_string()];
            header.extend((0..values.len()).map(|d| format!("dim_{d}")));
            out.write_record(&header)?;
            width = Some(values.len());
        }
        if width != Some(values.len()) {
            return Err(Error::Shape("embeddings of different widths".into()));
        }
        let mut record = vec![client.to_string(), image.to_string()];
        record.extend(values.iter().map(|v| v.to_string()));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}
