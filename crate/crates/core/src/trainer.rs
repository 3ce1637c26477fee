//! Contrastive training of the scorer from pairs of sequences that share a prefix.
//!
//! For each pair the oracle rates both full sequences; the scorer sees the shared prefix
//! and the head of each suffix and is pushed, through a two-way softmax, to rank the
//! better sequence first. An optional second term applies the same loss to the two
//! complete-sequence scores (whole sequence as prefix, terminator as suffix).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{CandidatePool, ExampleId, ExampleSequence, Query, TaskDataset};
use crate::encoder::{GradientTape, ModelConfig, ScorerModel};
use crate::error::{Error, Result};
use crate::oracle::Oracle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Longest sequence sampled during training.
    pub max_len: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pairs_per_query: usize,
    /// Share of queries reserved for measuring ranking accuracy.
    pub heldout_fraction: f64,
    pub heldout_pairs_per_query: usize,
    /// Weight of the complete-sequence ranking term; 0 trains on suffix heads only.
    pub sequence_loss_weight: f64,
    /// Suffix redraws per prefix before a fresh prefix is drawn.
    pub suffix_attempts: usize,
    /// Prefix draws before sampling gives up.
    pub prefix_attempts: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_len: 7,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pairs_per_query: 16,
            heldout_fraction: 0.1,
            heldout_pairs_per_query: 20,
            sequence_loss_weight: 1.0,
            suffix_attempts: 16,
            prefix_attempts: 64,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.pairs_per_query == 0 {
            return bad("batch_size and pairs_per_query must be positive");
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return bad("heldout_fraction must lie in [0, 1)");
        }
        if !(self.sequence_loss_weight >= 0.0 && self.sequence_loss_weight.is_finite()) {
            return bad("sequence_loss_weight must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.suffix_attempts == 0 || self.prefix_attempts == 0 {
            return bad("sampling attempt budgets must be positive");
        }
        if self.model.max_len < self.max_len {
            return bad("model.max_len must be at least max_len");
        }
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub query_id: ExampleId,
    pub prefix: ExampleSequence,
    pub suffix_1: Vec<ExampleId>,
    pub suffix_2: Vec<ExampleId>,
    pub quality_1: f64,
    pub quality_2: f64,
}

impl TrainingPair {
    fn head(suffix: &[ExampleId]) -> ExampleId {
        suffix.first().copied().unwrap_or(ExampleId::TERMINATOR)
    }

    pub fn head_1(&self) -> ExampleId {
        Self::head(&self.suffix_1)
    }

    pub fn head_2(&self) -> ExampleId {
        Self::head(&self.suffix_2)
    }

    /// `prefix + suffix_j` as an open sequence.
    pub fn full(&self, j: usize) -> ExampleSequence {
        let suffix = if j == 1 { &self.suffix_1 } else { &self.suffix_2 };
        let mut ids = self.prefix.elements().to_vec();
        ids.extend_from_slice(suffix);
        ExampleSequence::from_ids(&ids, usize::MAX).expect("sampled sequences are duplicate-free")
    }

    pub fn first_is_better(&self) -> bool {
        self.quality_1 > self.quality_2
    }
}

/// Uniform on `0..=max_len`.
pub fn draw_prefix_len(rng: &mut impl Rng, max_len: usize) -> usize {
    rng.gen_range(0..=max_len)
}

/// Uniform on `max(0, 1 - prefix_len)..=max_len - prefix_len`.
pub fn draw_suffix_len(rng: &mut impl Rng, max_len: usize, prefix_len: usize) -> usize {
    rng.gen_range(1usize.saturating_sub(prefix_len)..=max_len - prefix_len)
}

/// Prefix length and two suffix lengths, drawn as the sampler draws them.
pub fn draw_lengths(rng: &mut impl Rng, max_len: usize) -> (usize, usize, usize) {
    let lp = draw_prefix_len(rng, max_len);
    (lp, draw_suffix_len(rng, max_len, lp), draw_suffix_len(rng, max_len, lp))
}

/// Draws a contrastive pair for `query`: a random prefix, two random suffixes yielding
/// different full sequences, rated by `oracle`. Pairs with equal ratings are redrawn.
pub fn sample_pair(
    rng: &mut impl Rng,
    pool: &CandidatePool,
    config: &TrainConfig,
    query: &Query,
    oracle: &dyn Oracle,
) -> Result<TrainingPair> {
    let l = config.max_len;
    if pool.len() < l {
        return Err(Error::Config(format!(
            "pool of {} candidates is smaller than max_len {l}",
            pool.len()
        )));
    }
    let ids: Vec<ExampleId> = pool.ids().collect();
    for _ in 0..config.prefix_attempts {
        let lp = draw_prefix_len(rng, l);
        let mut order = ids.clone();
        let (chosen, rest) = order.partial_shuffle(rng, lp);
        let prefix = ExampleSequence::from_ids(chosen, l)?;
        let rest = rest.to_vec();
        if lp == l {
            // Both suffixes are necessarily empty, so the two sequences coincide.
            continue;
        }
        for _ in 0..config.suffix_attempts {
            let n1 = draw_suffix_len(rng, l, lp);
            let suffix_1: Vec<ExampleId> = rest.choose_multiple(rng, n1).copied().collect();
            let n2 = draw_suffix_len(rng, l, lp);
            let suffix_2: Vec<ExampleId> = rest.choose_multiple(rng, n2).copied().collect();
            if suffix_1 == suffix_2 {
                continue;
            }
            let mut pair = TrainingPair {
                query_id: query.id,
                prefix: prefix.clone(),
                suffix_1,
                suffix_2,
                quality_1: 0.0,
                quality_2: 0.0,
            };
            pair.quality_1 = oracle.evaluate(query, &pair.full(1), pool)?.quality;
            pair.quality_2 = oracle.evaluate(query, &pair.full(2), pool)?.quality;
            if pair.quality_1 != pair.quality_2 {
                return Ok(pair);
            }
        }
    }
    Err(Error::Sampling(format!(
        "no pair with distinct sequences and qualities for query {} after {} prefixes",
        query.id, config.prefix_attempts
    )))
}

fn softmax_ce(s1: f64, s2: f64, first_better: bool) -> (f64, f64, f64) {
    let m = s1.max(s2);
    let (e1, e2) = ((s1 - m).exp(), (s2 - m).exp());
    let z = e1 + e2;
    let (p1, p2) = (e1 / z, e2 / z);
    let (q1, q2) = if first_better { (1.0, 0.0) } else { (0.0, 1.0) };
    let loss = -(q1 * (s1 - m - z.ln()) + q2 * (s2 - m - z.ln()));
    (loss, p1 - q1, p2 - q2)
}

/// Cross-entropy of the pair's ranking and its gradient.
pub fn pair_loss(
    model: &ScorerModel,
    pair: &TrainingPair,
    query: &Query,
    pool: &CandidatePool,
    sequence_loss_weight: f64,
) -> Result<(f64, GradientTape)> {
    let mut tape = GradientTape::new(model);
    let better = pair.first_is_better();
    let trace = model.pair_forward(Some(query), &pair.prefix, [&pair.suffix_1, &pair.suffix_2], pool)?;
    let [s1, s2, t1, t2] = trace.scores();
    let (mut loss, g1, g2) = softmax_ce(s1, s2, better);
    let mut upstream = [g1, g2, 0.0, 0.0];
    if sequence_loss_weight > 0.0 {
        let (seq_loss, g1, g2) = softmax_ce(t1, t2, better);
        loss += sequence_loss_weight * seq_loss;
        upstream[2] = sequence_loss_weight * g1;
        upstream[3] = sequence_loss_weight * g2;
    }
    model.pair_backward(&mut tape, &trace, upstream);
    Ok((loss, tape))
}

/// How well a model orders held-out pairs. Equal scores count as half right.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingAccuracy {
    /// Compares the complete-sequence scores of the two full sequences.
    pub sequence: f64,
    /// Compares the scores of the two suffix heads after the shared prefix.
    pub head: f64,
    pub pairs: usize,
}

fn agreement(a: f64, b: f64, first_better: bool) -> f64 {
    if a == b {
        0.5
    } else if (a > b) == first_better {
        1.0
    } else {
        0.0
    }
}

pub fn ranking_accuracy(model: &ScorerModel, pairs: &[(TrainingPair, &Query, &CandidatePool)]) -> Result<RankingAccuracy> {
    let scores = pairs
        .par_iter()
        .map(|(pair, query, pool)| {
            let better = pair.first_is_better();
            let trace = model.pair_forward(Some(*query), &pair.prefix, [&pair.suffix_1, &pair.suffix_2], pool)?;
            let [s1, s2, t1, t2] = trace.scores();
            Ok((agreement(t1, t2, better), agreement(s1, s2, better)))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len().max(1) as f64;
    Ok(RankingAccuracy {
        sequence: scores.iter().map(|s| s.0).sum::<f64>() / n,
        head: scores.iter().map(|s| s.1).sum::<f64>() / n,
        pairs: scores.len(),
    })
}

/// Adam with bias correction. Token-table rows are only updated when they receive a
/// gradient, using the global step count for the correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: GradientTape,
    v: GradientTape,
    token_m: Vec<f64>,
    token_v: Vec<f64>,
}

impl Adam {
    pub fn new(model: &ScorerModel, config: &TrainConfig) -> Self {
        let n = model.token_embed().len();
        Self {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
            step: 0,
            m: GradientTape::new(model),
            v: GradientTape::new(model),
            token_m: vec![0.0; n],
            token_v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, model: &mut ScorerModel, grad: &GradientTape) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        let dim = model.dim();
        let table = model.token_embed_mut();
        for (row, g) in grad.token_rows() {
            let base = row * dim;
            for (j, &gj) in g.iter().enumerate() {
                let k = base + j;
                update(&mut table[k], gj, &mut self.token_m[k], &mut self.token_v[k]);
            }
        }
        let params = model.dense_mut().slices_mut();
        let ms = self.m.dense_mut().slices_mut();
        let vs = self.v.dense_mut().slices_mut();
        for ((((_, p), (_, g)), (_, m)), (_, v)) in params
            .into_iter()
            .zip(grad.dense().slices())
            .zip(ms)
            .zip(vs)
        {
            for i in 0..p.len() {
                update(&mut p[i], g[i], &mut m[i], &mut v[i]);
            }
        }
    }
}

/// A task to train on: its data and the oracle that rates its sequences.
#[derive(Clone, Copy)]
pub struct TrainTask<'a> {
    pub dataset: &'a TaskDataset,
    pub oracle: &'a dyn Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout: RankingAccuracy,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best held-out sequence accuracy.
    pub model: ScorerModel,
    pub initial: RankingAccuracy,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Where to write the best checkpoint, the training config and the per-epoch log.
#[derive(Clone, Debug)]
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn best(&self) -> PathBuf {
        self.0.join("best.ckpt")
    }

    pub fn log(&self) -> PathBuf {
        self.0.join("train_log.jsonl")
    }

    pub fn config(&self) -> PathBuf {
        self.0.join("train_config.json")
    }
}

/// Seeds derived from the global seed so each stream is independent and reproducible.
pub fn sub_seed(seed: u64, stream: &str, a: u64, b: u64) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for byte in stream.bytes().chain(a.to_le_bytes()).chain(b.to_le_bytes()) {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

struct Split<'a> {
    train: Vec<(usize, &'a Query)>,
    heldout: Vec<(usize, &'a Query)>,
}

fn split_queries<'a>(tasks: &[TrainTask<'a>], config: &TrainConfig) -> Result<Split<'a>> {
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        if task.dataset.queries.is_empty() {
            return Err(Error::Config(format!("task {} has no queries", task.dataset.task_name)));
        }
        let mut qs: Vec<&Query> = task.dataset.queries.iter().collect();
        qs.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "heldout", t as u64, 0)));
        let k = (qs.len() as f64 * config.heldout_fraction).round() as usize;
        let k = if config.heldout_fraction > 0.0 { k.clamp(1, qs.len() - 1) } else { 0 };
        heldout.extend(qs[..k].iter().map(|q| (t, *q)));
        train.extend(qs[k..].iter().map(|q| (t, *q)));
    }
    if train.is_empty() {
        return Err(Error::Config("no training queries after the held-out split".into()));
    }
    Ok(Split { train, heldout })
}

fn sample_for<'a>(
    tasks: &[TrainTask<'a>],
    queries: &[(usize, &'a Query)],
    per_query: usize,
    config: &TrainConfig,
    stream: &str,
    round: u64,
) -> Result<Vec<(TrainingPair, usize, &'a Query)>> {
    let batches = queries
        .par_iter()
        .enumerate()
        .map(|(i, &(t, q))| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(config.seed, stream, round, i as u64));
            let task = tasks[t];
            (0..per_query)
                .map(|_| {
                    sample_pair(&mut rng, &task.dataset.candidates, config, q, task.oracle)
                        .map(|p| (p, t, q))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(batches.into_iter().flatten().collect())
}

/// Fresh model initialised from the config seed.
pub fn init_model(config: &TrainConfig) -> Result<ScorerModel> {
    ScorerModel::new(config.model.clone(), sub_seed(config.seed, "init", 0, 0))
}

/// Trains a fresh model on the union of `tasks`. Held-out queries are drawn per task.
pub fn train(tasks: &[TrainTask<'_>], config: &TrainConfig, out: Option<&CheckpointDir>) -> Result<TrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no training tasks".into()));
    }
    for task in tasks {
        if task.dataset.queries.iter().any(|q| q.label.is_none()) {
            return Err(Error::Config(format!(
                "task {} has unlabeled queries",
                task.dataset.task_name
            )));
        }
    }
    let split = split_queries(tasks, config)?;
    let heldout_pairs = sample_for(tasks, &split.heldout, config.heldout_pairs_per_query, config, "heldout-pairs", 0)?;
    let heldout_refs: Vec<(TrainingPair, &Query, &CandidatePool)> = heldout_pairs
        .iter()
        .map(|(p, t, q)| (p.clone(), *q, &tasks[*t].dataset.candidates))
        .collect();

    let mut model = init_model(config)?;
    let mut adam = Adam::new(&model, config);
    let initial = ranking_accuracy(&model, &heldout_refs)?;

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(&dir.0).map_err(|e| Error::io(format!("creating {}", dir.0.display()), e))?;
            fs::write(dir.config(), serde_json::to_vec_pretty(config)?)
                .map_err(|e| Error::io("writing training config", e))?;
            Some(BufWriter::new(
                File::create(dir.log()).map_err(|e| Error::io("creating training log", e))?,
            ))
        }
        None => None,
    };

    let mut best = (initial.sequence, 0usize, model.clone());
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut pairs = sample_for(tasks, &split.train, config.pairs_per_query, config, "train-pairs", epoch as u64)?;
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(config.seed, "shuffle", epoch as u64, 0)));
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for batch in pairs.chunks(config.batch_size) {
            let results = batch
                .par_iter()
                .map(|(p, t, q)| pair_loss(&model, p, q, &tasks[*t].dataset.candidates, config.sequence_loss_weight))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = GradientTape::new(&model);
            let mut batch_loss = 0.0;
            for (loss, tape) in &results {
                batch_loss += loss;
                grad.add_scaled(tape, 1.0);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.scale(inv);
            batch_loss *= inv;
            if !batch_loss.is_finite() || !grad.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {batch_loss} at epoch {epoch}, step {}; learning rate {} may be too high",
                    steps + 1,
                    config.learning_rate
                )));
            }
            adam.step(&mut model, &grad);
            if !model.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameters diverged at epoch {epoch}, step {}; learning rate {}",
                    steps + 1,
                    config.learning_rate
                )));
            }
            loss_sum += batch_loss;
            steps += 1;
        }
        let heldout = ranking_accuracy(&model, &heldout_refs)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            heldout,
            steps,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io("writing training log", e))?;
            f.flush().map_err(|e| Error::io("writing training log", e))?;
        }
        if heldout.sequence > best.0 || best.1 == 0 {
            best = (heldout.sequence, epoch, model.clone());
            if let Some(dir) = out {
                checkpoint::save(&model, &dir.best())?;
            }
        }
        log.push(entry);
    }
    let (_, best_epoch, model) = best;
    Ok(TrainOutcome {
        model,
        initial,
        log,
        best_epoch,
    })
}

/// Held-out pairs for `dataset`, drawn exactly as [`train`] draws them.
pub fn heldout_pairs<'a>(task: TrainTask<'a>, config: &TrainConfig) -> Result<Vec<(TrainingPair, &'a Query)>> {
    let tasks = [task];
    let split = split_queries(&tasks, config)?;
    Ok(sample_for(&tasks, &split.heldout, config.heldout_pairs_per_query, config, "heldout-pairs", 0)?
        .into_iter()
        .map(|(p, _, q)| (p, q))
        .collect())
}

/// Loads the best checkpoint written by [`train`].
pub fn load_best(dir: &Path) -> Result<ScorerModel> {
    checkpoint::load(&CheckpointDir(dir.to_path_buf()).best())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_scores_cost_ln2() {
        let (loss, g1, g2) = softmax_ce(0.3, 0.3, true);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((g1 + 0.5).abs() < 1e-15 && (g2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_ranking_costs_nothing() {
        let (loss, _, _) = softmax_ce(800.0, -800.0, true);
        assert!(loss < 1e-300);
        let (loss, _, _) = softmax_ce(800.0, -800.0, false);
        assert!((loss - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn lengths_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let (lp, l1, l2) = draw_lengths(&mut rng, 7);
            assert!(lp <= 7);
            for ls in [l1, l2] {
                assert!((1..=7).contains(&(lp + ls)));
            }
        }
    }

    #[test]
    fn sub_seeds_differ_by_stream() {
        assert_ne!(sub_seed(1, "a", 0, 0), sub_seed(1, "b", 0, 0));
        assert_ne!(sub_seed(1, "a", 0, 1), sub_seed(1, "a", 1, 0));
        assert_eq!(sub_seed(9, "x", 2, 3), sub_seed(9, "x", 2, 3));
    }
}
