//! Experiment driver: trained search and its ablations against random and nearest-neighbour
//! baselines, scored by an oracle over evaluation queries.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{split_records, CandidatePool, ExampleId, ExampleSequence, Query, SplitSpec, TaskDataset};
use crate::encoder::{PrefixMode, ScorerModel};
use crate::error::{Error, Result};
use crate::index::SuffixIndex;
use crate::oracle::{Oracle, SyntheticTaskSpec};
use crate::search::{batch_construct, SearchConfig};
use crate::trainer::{init_model, sub_seed, train, TrainConfig, TrainTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "name", content = "k")]
pub enum Method {
    Besc,
    BescStatic,
    BescFixedLen(usize),
    BescShuffled,
    BescLengthOnly,
    Random,
    Knn,
    /// Trained on other task families, evaluated zero-shot.
    Pretrained,
}

impl Method {
    pub fn label(self) -> String {
        match self {
            Method::Besc => "besc".into(),
            Method::BescStatic => "besc_static".into(),
            Method::BescFixedLen(k) => format!("besc_fixed_len({k})"),
            Method::BescShuffled => "besc_shuffled".into(),
            Method::BescLengthOnly => "besc_length_only".into(),
            Method::Random => "random".into(),
            Method::Knn => "knn".into(),
            Method::Pretrained => "pretrained".into(),
        }
    }

    /// Prefix encoder variant the method's model must be trained with.
    pub fn prefix_mode(self) -> Option<PrefixMode> {
        match self {
            Method::Besc | Method::BescFixedLen(_) | Method::BescShuffled | Method::Pretrained => {
                Some(PrefixMode::Dynamic)
            }
            Method::BescStatic => Some(PrefixMode::Static),
            Method::BescLengthOnly => Some(PrefixMode::LengthOnly),
            Method::Random | Method::Knn => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "besc" => Method::Besc,
            "besc_static" => Method::BescStatic,
            "besc_shuffled" => Method::BescShuffled,
            "besc_length_only" => Method::BescLengthOnly,
            "random" => Method::Random,
            "knn" => Method::Knn,
            "pretrained" => Method::Pretrained,
            _ => {
                let k = s
                    .strip_prefix("besc_fixed_len(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown method {s}")))?;
                Method::BescFixedLen(k)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub query_id: ExampleId,
    pub quality: f64,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task_name: String,
    pub method: Method,
    pub mean_quality: f64,
    pub std_error: f64,
    pub mean_len: f64,
    pub per_query: Vec<QueryOutcome>,
    pub seed: u64,
    /// Content hash of the checkpoint used, when the method has one.
    pub checkpoint: Option<String>,
    pub config: serde_json::Value,
}

/// Mean and standard error of the mean.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// A task with queries for training and a disjoint set for evaluation, sharing one pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskSplit {
    pub train: TaskDataset,
    pub eval: Vec<Query>,
}

impl TaskSplit {
    pub fn name(&self) -> &str {
        &self.train.task_name
    }

    pub fn pool(&self) -> &CandidatePool {
        &self.train.candidates
    }
}

/// Generates a synthetic task: `n_candidates` pool items, `n_train` training queries and
/// `n_eval` evaluation queries, all drawn by `spec`.
pub fn synthetic_task(
    name: &str,
    spec: &SyntheticTaskSpec,
    n_candidates: usize,
    n_train: usize,
    n_eval: usize,
    seed: u64,
) -> Result<TaskSplit> {
    let records = spec.generate(n_candidates + n_train + n_eval);
    let data = split_records(
        name,
        records,
        SplitSpec {
            query_count: n_train + n_eval,
            seed,
        },
    )?;
    hold_out(data, n_eval)
}

/// Moves the last `n_eval` queries of `data` into the evaluation set.
pub fn hold_out(mut data: TaskDataset, n_eval: usize) -> Result<TaskSplit> {
    if n_eval > data.queries.len() {
        return Err(Error::Config(format!(
            "{n_eval} evaluation queries requested but the task has {}",
            data.queries.len()
        )));
    }
    let eval = data.queries.split_off(data.queries.len() - n_eval);
    Ok(TaskSplit { train: data, eval })
}

/// Settings shared by every method of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub search: SearchConfig,
    pub train: TrainConfig,
    /// Sequence length of the nearest-neighbour baseline.
    pub knn_k: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            knn_k: 3,
        }
    }
}

/// Constructs one sequence per query with `method`.
pub fn select_sequences(
    method: Method,
    pool: &CandidatePool,
    queries: &[Query],
    model: Option<&ScorerModel>,
    config: &HarnessConfig,
    seed: u64,
) -> Result<Vec<ExampleSequence>> {
    let l = config.search.max_len;
    let ids: Vec<ExampleId> = pool.ids().collect();
    let rng_for = |stream: &str, i: usize| ChaCha8Rng::seed_from_u64(sub_seed(seed, stream, i as u64, 0));
    let trained = || -> Result<Vec<ExampleSequence>> {
        let model = model.ok_or_else(|| {
            Error::Config(format!("method {} needs a trained checkpoint", method.label()))
        })?;
        let want = method.prefix_mode().expect("trained method");
        if model.config().prefix_mode != want {
            return Err(Error::Config(format!(
                "method {} needs a {want:?} model, got {:?}",
                method.label(),
                model.config().prefix_mode
            )));
        }
        let index = SuffixIndex::build(model, pool)?;
        let mut search = config.search.clone();
        if let Method::BescFixedLen(k) = method {
            search.fixed_length = Some(k);
        }
        batch_construct(model, &index, pool, queries, &search)
            .into_iter()
            .map(|r| r.map(|r| r.best))
            .collect()
    };
    match method {
        Method::Besc | Method::BescStatic | Method::BescLengthOnly | Method::BescFixedLen(_) | Method::Pretrained => {
            trained()
        }
        Method::BescShuffled => {
            let seqs = trained()?;
            seqs.into_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut e = s.elements().to_vec();
                    e.shuffle(&mut rng_for("shuffle", i));
                    Ok(ExampleSequence::from_ids(&e, l)?.terminate()?)
                })
                .collect()
        }
        Method::Random => (0..queries.len())
            .map(|i| {
                let mut rng = rng_for("random", i);
                let n = rng.gen_range(1..=l.min(ids.len()));
                let e: Vec<ExampleId> = ids.choose_multiple(&mut rng, n).copied().collect();
                Ok(ExampleSequence::from_ids(&e, l)?.terminate()?)
            })
            .collect(),
        Method::Knn => {
            let mut cfg = config.train.model.clone();
            cfg.prefix_mode = PrefixMode::Dynamic;
            let encoder = init_model(&TrainConfig {
                model: cfg,
                ..config.train.clone()
            })?;
            let cand: Vec<_> = pool
                .examples()
                .iter()
                .map(|e| (e.id, encoder.embed_text(&e.text())))
                .collect();
            let k = config.knn_k.min(l).min(ids.len());
            queries
                .par_iter()
                .map(|q| {
                    let qe = encoder.embed_text(&q.input);
                    let mut scored: Vec<(ExampleId, f64)> = cand.iter().map(|(id, e)| (*id, qe.dot(e))).collect();
                    scored.sort_by(|a, b| crate::index::desc(a.1, b.1).then(a.0.cmp(&b.0)));
                    let mut e: Vec<ExampleId> = scored[..k].iter().map(|s| s.0).collect();
                    e.reverse();
                    Ok(ExampleSequence::from_ids(&e, l)?.terminate()?)
                })
                .collect()
        }
    }
}

/// Scores `method` on `queries` with `oracle`.
#[allow(clippy::too_many_arguments)]
pub fn run_method(
    method: Method,
    task_name: &str,
    pool: &CandidatePool,
    queries: &[Query],
    model: Option<&ScorerModel>,
    oracle: &dyn Oracle,
    config: &HarnessConfig,
    seed: u64,
) -> Result<ExperimentReport> {
    let seqs = select_sequences(method, pool, queries, model, config, seed)?;
    let per_query = queries
        .par_iter()
        .zip(&seqs)
        .map(|(q, s)| {
            Ok(QueryOutcome {
                query_id: q.id,
                quality: oracle.evaluate(q, s, pool)?.quality,
                seq_len: s.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let qualities: Vec<f64> = per_query.iter().map(|o| o.quality).collect();
    let (mean_quality, std_error) = mean_se(&qualities);
    let mean_len = per_query.iter().map(|o| o.seq_len as f64).sum::<f64>() / per_query.len().max(1) as f64;
    Ok(ExperimentReport {
        task_name: task_name.to_string(),
        method,
        mean_quality,
        std_error,
        mean_len,
        per_query,
        seed,
        checkpoint: model.filter(|_| method.prefix_mode().is_some()).map(|m| m.fingerprint().to_string()),
        config: serde_json::to_value(config)?,
    })
}

/// Best achievable quality for each query over every duplicate-free sequence of length
/// `0..=max_len`. Exponential; for tiny pools only.
pub fn exhaustive_optimum(pool: &CandidatePool, queries: &[Query], oracle: &dyn Oracle, max_len: usize) -> Result<Vec<f64>> {
    let ids: Vec<ExampleId> = pool.ids().collect();
    queries
        .par_iter()
        .map(|q| {
            let mut best = f64::NEG_INFINITY;
            let mut stack = vec![ExampleSequence::empty()];
            while let Some(seq) = stack.pop() {
                best = best.max(oracle.evaluate(q, &seq, pool)?.quality);
                if seq.len() < max_len {
                    for &id in &ids {
                        if !seq.contains(id) {
                            stack.push(seq.append(id, max_len)?);
                        }
                    }
                }
            }
            Ok(best)
        })
        .collect()
}

/// Trains a model of the given prefix mode on one task.
pub fn train_variant(
    task: &TaskSplit,
    oracle: &dyn Oracle,
    config: &HarnessConfig,
    mode: PrefixMode,
    seed: u64,
) -> Result<ScorerModel> {
    let mut tc = config.train.clone();
    tc.model.prefix_mode = mode;
    tc.seed = seed;
    let tasks = [TrainTask {
        dataset: &task.train,
        oracle,
    }];
    Ok(train(&tasks, &tc, None)?.model)
}

/// Trains on every family in `sources` jointly and evaluates on `target`'s evaluation
/// queries. The report is tagged [`Method::Pretrained`].
pub fn run_transfer(
    sources: &[(&TaskSplit, &dyn Oracle)],
    target: (&TaskSplit, &dyn Oracle),
    config: &HarnessConfig,
    seed: u64,
) -> Result<(ExperimentReport, ScorerModel)> {
    let mut names: Vec<&str> = sources.iter().map(|(t, _)| t.name()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("training task names must be distinct".into()));
    }
    if sources.is_empty() {
        return Err(Error::Config("transfer needs at least one training family".into()));
    }
    let tasks: Vec<TrainTask> = sources
        .iter()
        .map(|(t, o)| TrainTask {
            dataset: &t.train,
            oracle: *o,
        })
        .collect();
    let mut tc = config.train.clone();
    tc.model.prefix_mode = PrefixMode::Dynamic;
    tc.seed = seed;
    let model = train(&tasks, &tc, None)?.model;
    let (task, oracle) = target;
    let report = run_method(
        Method::Pretrained,
        task.name(),
        task.pool(),
        &task.eval,
        Some(&model),
        oracle,
        config,
        seed,
    )?;
    Ok((report, model))
}

/// Seed-averaged summary of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Mean quality per seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
}

pub fn summarize(reports: &[ExperimentReport]) -> Vec<MethodSummary> {
    let mut methods: Vec<Method> = reports.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    methods
        .into_iter()
        .map(|m| {
            let per_seed: Vec<f64> = reports.iter().filter(|r| r.method == m).map(|r| r.mean_quality).collect();
            let (mean, std_error) = mean_se(&per_seed);
            MethodSummary {
                method: m,
                per_seed,
                mean,
                std_error,
            }
        })
        .collect()
}

/// Plain-text table: one row per method, mean ± standard error over seeds.
pub fn render_table(title: &str, summaries: &[MethodSummary]) -> String {
    let width = summaries.iter().map(|s| s.method.label().len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<width$}  {:>7}  {:>7}  {:>5}", "method", "quality", "s.e.", "seeds");
    let _ = writeln!(out, "{}", "-".repeat(width + 25));
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<width$}  {:>7.4}  {:>7.4}  {:>5}",
            s.method.label(),
            s.mean,
            s.std_error,
            s.per_seed.len()
        );
    }
    out
}
