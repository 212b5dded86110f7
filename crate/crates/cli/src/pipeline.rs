//! data → partition → federated runs → analysis → files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pfedpt_core::analysis::{
    client_embeddings, distribution_similarity, finetune_new_client, pure_color_probe, write_embeddings_csv,
    write_finetune_csv, write_similarity_csv, DistributionSimilarity, DriftSeries, FinetuneConfig, FinetuneMode,
};
use pfedpt_core::data::{
    load_cifar10, make_synthetic, normalize, partition, scale_to_unit, write_shard_manifest, ClientShard, Dataset,
};
use pfedpt_core::engine::{
    run_experiment, AlgorithmTag, BaseAlgorithm, ExperimentSetup, ExperimentSummary, RoundCsvWriter,
};
use pfedpt_core::nn::write_checkpoint;
use pfedpt_core::prompting::{write_prompt, PromptSpec, PromptTemplate};
use pfedpt_core::rng::stream;
use pfedpt_core::ExperimentRun32;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, ExperimentConfig};

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Overrides `output.directory`.
    pub output: Option<PathBuf>,
    pub overwrite: bool,
    /// Overrides `train.workers`.
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub algorithm: String,
    pub baseline: String,
    pub best_gap: Option<f64>,
    pub final_gap: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    pub algorithms: Vec<ExperimentSummary>,
    /// The first algorithm against each other one, in accuracy points of [0, 1].
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub comparison: Vec<Comparison>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub template: PromptTemplate,
    pub size: usize,
    pub best_weighted_acc: Option<f64>,
    pub best_round: Option<usize>,
    pub final_weighted_acc: Option<f64>,
    pub error: Option<String>,
}

/// Stable hash of everything that can influence results; the output
/// location and worker count are excluded.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut canon = cfg.clone();
    canon.output.directory = PathBuf::new();
    canon.train.workers = 1;
    let bytes = serde_json::to_vec(&canon).expect("config serializes");
    format!("{:x}", Sha256::digest(&bytes))
}

fn prepare_output(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied {
            if !overwrite {
                bail!("{} is not empty; pass --overwrite to replace it", dir.display());
            }
            fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    match cfg.dataset.source {
        DataSource::Synthetic => {
            if !cfg.dataset.normalize {
                log::info!("synthetic data is generated in normalized space; dataset.normalize has no effect");
            }
            Ok(make_synthetic(&cfg.synthetic_config())?)
        }
        DataSource::Cifar10 => {
            let dir = cfg
                .data_path()
                .context("dataset.path: not set and PFEDPT_DATA_ROOT is unset")?;
            let (train, test) = load_cifar10::<f32>(&dir)?;
            let scale = |d| if cfg.dataset.normalize { normalize(d) } else { scale_to_unit(d) };
            Ok((scale(train)?, scale(test)?))
        }
    }
}

fn create(dir: &Path, name: &str, outputs: &mut Vec<String>, base: &Path) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let rel = path.strip_prefix(base).unwrap_or(&path);
    outputs.push(rel.display().to_string());
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn dir_name(tag: AlgorithmTag) -> String {
    tag.to_string().replace('+', "_")
}

struct Pipeline<'a> {
    cfg: &'a ExperimentConfig,
    base: &'a Path,
    train: &'a Dataset<f32>,
    test: &'a Dataset<f32>,
    shards: &'a [ClientShard],
}

impl Pipeline<'_> {
    fn seen(&self) -> &[ClientShard] {
        &self.shards[..self.cfg.partition.clients]
    }

    fn execute(
        &self,
        tag: AlgorithmTag,
        prompt: &PromptSpec,
        dir: &Path,
        outputs: &mut Vec<String>,
    ) -> Result<ExperimentRun32> {
        fs::create_dir_all(dir)?;
        let train_cfg = self.cfg.train_config(tag);
        let model = self.cfg.model_spec();
        let setup = ExperimentSetup {
            train: self.train,
            test: self.test,
            shards: self.seen(),
            model: &model,
            prompt: Some(prompt),
            cfg: &train_cfg,
        };
        let mut rounds = RoundCsvWriter::new(create(dir, "rounds.csv", outputs, self.base)?)?;
        let run = run_experiment(&setup, |r| {
            log::info!(
                "{tag} round {}/{}: weighted accuracy {:.4}",
                r.round,
                train_cfg.rounds,
                r.weighted_acc
            );
            rounds.write(r)
        })
        .with_context(|| format!("running {tag}"))?;
        rounds.into_inner()?.flush()?;
        Ok(run)
    }

    fn analyze(&self, run: &ExperimentRun32, prompt: &PromptSpec, dir: &Path, outputs: &mut Vec<String>) -> Result<()> {
        let out = &self.cfg.output;
        let seed = self.cfg.train_seed();
        let tag = run.algorithm;
        if out.drift && tag.prompt {
            DriftSeries::from_reports(&run.reports).write_csv(create(dir, "drift.csv", outputs, self.base)?)?;
        }
        if out.similarity {
            let shape = self.cfg.data_geometry().0;
            let mut rows = Vec::new();
            for c in &run.clients {
                let net = run.client_network(c.id);
                let hist = pure_color_probe(
                    &net,
                    c.prompt.as_ref(),
                    out.probe_images,
                    shape,
                    &mut stream(seed, "probe", &[c.id as u64]),
                )?;
                rows.push(DistributionSimilarity {
                    client_id: c.id,
                    algorithm: tag.to_string(),
                    metric: out.similarity_metric,
                    score: distribution_similarity(&hist, &c.shard.label_distribution(), out.similarity_metric)?,
                });
            }
            write_similarity_csv(&rows, create(dir, "similarity.csv", outputs, self.base)?)?;
        }
        if out.finetune {
            let newcomer = &self.shards[self.cfg.partition.clients];
            let ft = FinetuneConfig {
                budget_samples: out.finetune_budget.min(newcomer.train.len()),
                epochs: out.finetune_epochs,
                batch_size: self.cfg.train.batch_size,
                prompt_lr: self.cfg.train.prompt_lr,
                head_lr: self.cfg.train.head_lr,
                seed,
            };
            if ft.budget_samples < out.finetune_budget {
                log::warn!(
                    "new client holds {} samples, fewer than the budget of {}",
                    newcomer.train.len(),
                    out.finetune_budget
                );
            }
            let curves = [FinetuneMode::PromptOnly, FinetuneMode::HeadOnly]
                .into_iter()
                .map(|mode| finetune_new_client(&run.network, prompt, self.train, self.test, newcomer, mode, &ft))
                .collect::<pfedpt_core::Result<Vec<_>>>()?;
            write_finetune_csv(&curves, create(dir, "finetune.csv", outputs, self.base)?)?;
        }
        if out.embeddings {
            let mut rows = Vec::new();
            for c in &run.clients {
                let idx: Vec<usize> = c.shard.test.iter().copied().take(out.embedding_samples).collect();
                let net = run.client_network(c.id);
                let emb = client_embeddings(
                    &net,
                    c.prompt.as_ref(),
                    self.test,
                    &idx,
                    &mut stream(seed, "embeddings", &[c.id as u64]),
                )?;
                rows.extend(idx.into_iter().zip(emb).map(|(i, e)| (c.id, i, e)));
            }
            write_embeddings_csv(
                rows.iter().map(|(c, i, e)| (*c, *i, e.as_slice())),
                create(dir, "embeddings.csv", outputs, self.base)?,
            )?;
        }
        if out.checkpoints {
            let label = tag.to_string();
            write_checkpoint(create(dir, "global.bin", outputs, self.base)?, &label, run.global.values())?;
            for c in &run.clients {
                if let Some(p) = &c.prompt {
                    write_prompt(create(dir, &format!("prompts/client_{}.bin", c.id), outputs, self.base)?, p)?;
                }
                if let Some(h) = &c.head {
                    let w = create(dir, &format!("heads/client_{}.bin", c.id), outputs, self.base)?;
                    write_checkpoint(w, &format!("{label}/head/{}", c.id), h)?;
                }
                if tag.base == BaseAlgorithm::Local {
                    if let Some(m) = &c.model {
                        let w = create(dir, &format!("models/client_{}.bin", c.id), outputs, self.base)?;
                        write_checkpoint(w, &format!("{label}/model/{}", c.id), m)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    core_version: &'static str,
    command: &'a str,
    config_sha256: String,
    seeds: Seeds,
    precision: &'static str,
    drift_norm: &'static str,
    similarity_metric: String,
    config: &'a ExperimentConfig,
    complete: bool,
    outputs: &'a [String],
}

#[derive(Serialize)]
struct Seeds {
    root: u64,
    partition: u64,
    train: u64,
    synthetic: Option<u64>,
}

fn write_manifest(cfg: &ExperimentConfig, dir: &Path, command: &str, complete: bool, outputs: &[String]) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: pfedpt_core::VERSION,
        command,
        config_sha256: config_hash(cfg),
        seeds: Seeds {
            root: cfg.seed,
            partition: cfg.partition_seed(),
            train: cfg.train_seed(),
            synthetic: (cfg.dataset.source == DataSource::Synthetic).then(|| cfg.synthetic_seed()),
        },
        precision: "f32",
        drift_norm: DriftSeries::NORM,
        similarity_metric: cfg.output.similarity_metric.to_string(),
        config: cfg,
        complete,
        outputs,
    };
    let mut f = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn resolve(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = cfg.clone();
    if let Some(w) = opts.workers {
        cfg.train.workers = w;
    }
    if let Some(o) = &opts.output {
        cfg.output.directory = o.clone();
    }
    cfg.validate()?;
    let dir = cfg.output.directory.clone();
    Ok((cfg, dir))
}

fn prepare_data(
    cfg: &ExperimentConfig,
    dir: &Path,
    outputs: &mut Vec<String>,
) -> Result<(Dataset<f32>, Dataset<f32>, Vec<ClientShard>)> {
    let (train, test) = load_data(cfg)?;
    let shards = partition(&train.labels, &test.labels, train.num_classes, &cfg.partition_config())?;
    write_shard_manifest(&shards, create(dir, "shards.csv", outputs, dir)?)?;
    Ok((train, test, shards))
}

/// Runs every configured algorithm on one shared partition and writes all
/// outputs under the output directory.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let (cfg, dir) = resolve(cfg, opts)?;
    prepare_output(&dir, opts.overwrite)?;
    let mut outputs = Vec::new();
    write_manifest(&cfg, &dir, "run", false, &outputs)?;
    let (train, test, shards) = prepare_data(&cfg, &dir, &mut outputs)?;
    let ctx = Pipeline {
        cfg: &cfg,
        base: &dir,
        train: &train,
        test: &test,
        shards: &shards,
    };
    let prompt = cfg.prompt_spec()?;
    let mut summaries = Vec::new();
    for &tag in &cfg.train.algorithms {
        let sub = dir.join(dir_name(tag));
        let result = ctx
            .execute(tag, &prompt, &sub, &mut outputs)
            .and_then(|run| ctx.analyze(&run, &prompt, &sub, &mut outputs).map(|_| run));
        let run = match result {
            Ok(run) => run,
            Err(e) => {
                write_manifest(&cfg, &dir, "run", false, &outputs)?;
                return Err(e);
            }
        };
        let s = run.summary();
        log::info!("{tag}: best weighted accuracy {:?} at round {:?}", s.best_weighted_acc, s.best_round);
        summaries.push(s);
    }
    let comparison = summaries
        .iter()
        .skip(1)
        .map(|b| {
            let a = &summaries[0];
            let gap = |x: Option<f64>, y: Option<f64>| x.zip(y).map(|(x, y)| x - y);
            Comparison {
                algorithm: a.algorithm.clone(),
                baseline: b.algorithm.clone(),
                best_gap: gap(a.best_weighted_acc, b.best_weighted_acc),
                final_gap: gap(a.final_weighted_acc, b.final_weighted_acc),
            }
        })
        .collect();
    let summary = RunSummary {
        algorithms: summaries,
        comparison,
    };
    let mut f = create(&dir, "summary.json", &mut outputs, &dir)?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    write_manifest(&cfg, &dir, "run", true, &outputs)?;
    Ok(summary)
}

/// One run of the first configured algorithm per template × size point.
/// Failing points are recorded and the sweep moves on.
pub fn sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let (cfg, dir) = resolve(cfg, opts)?;
    let Some(grid) = cfg.sweep.clone() else {
        bail!("sweep: the config has no [sweep] table");
    };
    let tag = cfg.train.algorithms[0];
    if !tag.prompt {
        bail!("train.algorithms: a sweep over prompts needs a prompt algorithm first, got {tag}");
    }
    prepare_output(&dir, opts.overwrite)?;
    let mut outputs = Vec::new();
    write_manifest(&cfg, &dir, "sweep", false, &outputs)?;
    let (train, test, shards) = prepare_data(&cfg, &dir, &mut outputs)?;
    let ctx = Pipeline {
        cfg: &cfg,
        base: &dir,
        train: &train,
        test: &test,
        shards: &shards,
    };
    let mut rows = Vec::new();
    for &template in &grid.templates {
        for &size in &grid.sizes {
            let sub = dir.join("sweep").join(format!("{template}_p{size}"));
            let result = cfg
                .prompt_spec_for(template, size)
                .map_err(anyhow::Error::from)
                .and_then(|spec| ctx.execute(tag, &spec, &sub, &mut outputs));
            let row = match result {
                Ok(run) => {
                    let s = run.summary();
                    SweepRow {
                        template,
                        size,
                        best_weighted_acc: s.best_weighted_acc,
                        best_round: s.best_round,
                        final_weighted_acc: s.final_weighted_acc,
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("sweep point {template} p={size} failed: {e:#}");
                    SweepRow {
                        template,
                        size,
                        best_weighted_acc: None,
                        best_round: None,
                        final_weighted_acc: None,
                        error: Some(format!("{e:#}")),
                    }
                }
            };
            rows.push(row);
        }
    }
    let mut w = csv::Writer::from_writer(create(&dir, "sweep.csv", &mut outputs, &dir)?);
    w.write_record(["template", "size", "best_weighted_acc", "best_round", "final_weighted_acc", "error"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.template.to_string(),
            r.size.to_string(),
            opt(r.best_weighted_acc.map(|v| v.to_string())),
            opt(r.best_round.map(|v| v.to_string())),
            opt(r.final_weighted_acc.map(|v| v.to_string())),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    if let Some(best) = rows
        .iter()
        .filter(|r| r.best_weighted_acc.is_some())
        .max_by(|a, b| a.best_weighted_acc.partial_cmp(&b.best_weighted_acc).unwrap())
    {
        log::info!("best sweep point: {} p={} ({:?})", best.template, best.size, best.best_weighted_acc);
    }
    write_manifest(&cfg, &dir, "sweep", true, &outputs)?;
    Ok(rows)
}
