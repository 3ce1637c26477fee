//! Incremental beam-search construction of an example sequence.
//!
//! Each step prunes the live prefixes to the best `b`, encodes every kept prefix once and
//! asks the index for its `c` best continuations. Choosing the terminator closes a branch;
//! branches that reach the length limit are closed after one more prefix encoding. The
//! answer is the best closed sequence of any length.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidatePool, ExampleId, ExampleSequence, Query};
use crate::encoder::ScorerModel;
use crate::error::{Error, Result};
use crate::index::SuffixIndex;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Retrieval {
    #[default]
    Exact,
    /// Scan only the `probes` best partition cells; needs a partitioned index.
    Approximate { probes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub beam_width: usize,
    pub branch: usize,
    pub max_len: usize,
    /// Build exactly this many elements; the terminator is never chosen.
    pub fixed_length: Option<usize>,
    pub retrieval: Retrieval,
    pub record_trace: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            branch: 5,
            max_len: 7,
            fixed_length: None,
            retrieval: Retrieval::Exact,
            record_trace: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.branch == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_width, branch and max_len must be at least 1".into()));
        }
        if let Some(k) = self.fixed_length {
            if k == 0 || k > self.max_len {
                return Err(Error::Config(format!(
                    "fixed_length {k} must lie in 1..={}",
                    self.max_len
                )));
            }
        }
        Ok(())
    }

    fn horizon(&self) -> usize {
        self.fixed_length.unwrap_or(self.max_len)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchCounters {
    pub prefix_encoder_calls: usize,
    pub suffix_encoder_calls: usize,
    pub scored_sequences: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub sequence: ExampleSequence,
    pub score: f64,
}

/// Live prefixes and closed sequences during the search.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BeamState {
    pub live: Vec<Scored>,
    pub finished: Vec<Scored>,
    pub counters: SearchCounters,
}

/// Beam contents after pruning at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub kept: Vec<Scored>,
    pub finished_so_far: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: ExampleSequence,
    pub best_score: f64,
    pub finished_count: usize,
    pub counters: SearchCounters,
    pub trace: Option<Vec<StepTrace>>,
}

/// Higher score first, then the lexicographically smaller sequence.
fn by_score(a: &Scored, b: &Scored) -> Ordering {
    crate::index::desc(a.score, b.score).then_with(|| a.sequence.cmp(&b.sequence))
}

fn prune(live: &mut Vec<Scored>, b: usize) {
    live.sort_by(by_score);
    live.truncate(b);
}

fn close(seq: &ExampleSequence) -> ExampleSequence {
    seq.terminate().expect("live sequences are open")
}

pub fn construct_sequence(
    model: &ScorerModel,
    index: &SuffixIndex,
    pool: &CandidatePool,
    query: &Query,
    config: &SearchConfig,
) -> Result<SearchResult> {
    config.validate()?;
    index.check_model(model)?;
    let horizon = config.horizon();
    if config.fixed_length.is_some() && pool.len() < horizon {
        return Err(Error::Config(format!(
            "fixed length {horizon} exceeds pool size {}",
            pool.len()
        )));
    }
    let auto = config.fixed_length.is_none();
    let retrieve = |h: &crate::Embedding, exclude: &[ExampleId]| match config.retrieval {
        Retrieval::Exact => index.top_c(h, config.branch, exclude),
        Retrieval::Approximate { probes } => index.top_c_approx(h, config.branch, exclude, probes),
    };
    let bot = index
        .embedding(ExampleId::TERMINATOR)
        .expect("index holds the terminator");

    let mut state = BeamState {
        live: vec![Scored {
            sequence: ExampleSequence::empty(),
            score: 0.0,
        }],
        ..Default::default()
    };
    let mut trace = config.record_trace.then(Vec::new);

    for step in 1..=horizon {
        prune(&mut state.live, config.beam_width);
        if let Some(t) = trace.as_mut() {
            t.push(StepTrace {
                step,
                kept: state.live.clone(),
                finished_so_far: state.finished.len(),
            });
        }
        let mut next = Vec::new();
        for parent in std::mem::take(&mut state.live) {
            let h = model.encode_prefix(Some(query), &parent.sequence, pool)?;
            state.counters.prefix_encoder_calls += 1;
            let mut exclude = parent.sequence.elements().to_vec();
            if !auto {
                exclude.push(ExampleId::TERMINATOR);
            }
            let ranked = retrieve(&h, &exclude);
            let mut bot_seen = false;
            for (id, score) in ranked {
                state.counters.scored_sequences += 1;
                if id.is_terminator() {
                    bot_seen = true;
                    state.finished.push(Scored {
                        sequence: close(&parent.sequence),
                        score,
                    });
                } else {
                    next.push(Scored {
                        sequence: parent.sequence.append(id, horizon)?,
                        score,
                    });
                }
            }
            if auto && step == 1 && !bot_seen {
                state.counters.scored_sequences += 1;
                state.finished.push(Scored {
                    sequence: close(&parent.sequence),
                    score: crate::encoder::dot(h.as_slice(), bot),
                });
            }
        }
        state.live = next;
    }

    // Branches that reached the horizon are closed: prune, then score each with the terminator.
    prune(&mut state.live, config.beam_width);
    if let Some(t) = trace.as_mut() {
        t.push(StepTrace {
            step: horizon + 1,
            kept: state.live.clone(),
            finished_so_far: state.finished.len(),
        });
    }
    for full in std::mem::take(&mut state.live) {
        let h = model.encode_prefix(Some(query), &full.sequence, pool)?;
        state.counters.prefix_encoder_calls += 1;
        state.counters.scored_sequences += 1;
        state.finished.push(Scored {
            sequence: close(&full.sequence),
            score: crate::encoder::dot(h.as_slice(), bot),
        });
    }

    let best = state
        .finished
        .iter()
        .min_by(|a, b| by_score(a, b))
        .ok_or_else(|| Error::Internal("beam search finished without any closed sequence".into()))?;
    if !best.score.is_finite() {
        return Err(Error::NonFinite(format!("best score for query {} is {}", query.id, best.score)));
    }
    Ok(SearchResult {
        best: best.sequence.clone(),
        best_score: best.score,
        finished_count: state.finished.len(),
        counters: state.counters,
        trace,
    })
}

/// Runs [`construct_sequence`] for every query in parallel; results keep query order and
/// one failure does not stop the others.
pub fn batch_construct(
    model: &ScorerModel,
    index: &SuffixIndex,
    pool: &CandidatePool,
    queries: &[Query],
    config: &SearchConfig,
) -> Vec<Result<SearchResult>> {
    queries
        .par_iter()
        .map(|q| construct_sequence(model, index, pool, q, config))
        .collect()
}

/// Best complete sequence of length `0..=max_len` by exhaustive enumeration. Only viable
/// for tiny pools; used as a reference.
pub fn exhaustive_best(
    model: &ScorerModel,
    pool: &CandidatePool,
    query: &Query,
    max_len: usize,
) -> Result<Scored> {
    let ids: Vec<ExampleId> = pool.ids().collect();
    let mut best: Option<Scored> = None;
    let mut stack = vec![ExampleSequence::empty()];
    while let Some(seq) = stack.pop() {
        let cand = Scored {
            score: model.score_complete(Some(query), &seq, pool)?,
            sequence: close(&seq),
        };
        if best.as_ref().is_none_or(|b| by_score(&cand, b) == Ordering::Less) {
            best = Some(cand);
        }
        if seq.len() < max_len {
            for &id in &ids {
                if !seq.contains(id) {
                    stack.push(seq.append(id, max_len)?);
                }
            }
        }
    }
    Ok(best.expect("the empty sequence is always scored"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;
    use crate::encoder::ModelConfig;

    fn setup(n: u32, seed: u64) -> (ScorerModel, CandidatePool, Query) {
        let model = ScorerModel::new(
            ModelConfig {
                vocab_buckets: 97,
                dim: 6,
                max_len: 7,
                init_scale: 1.0,
                ..Default::default()
            },
            seed,
        )
        .unwrap();
        let pool = CandidatePool::new(
            (0..n)
                .map(|i| Example {
                    id: ExampleId(i),
                    input: format!("in{i} t{}", i * 7 % 11),
                    label: format!("out{}", i % 4),
                    skills: vec![],
                })
                .collect(),
        )
        .unwrap();
        let query = Query {
            id: ExampleId(1000),
            input: "query words t3".into(),
            label: Some("out1".into()),
            skills: vec![],
        };
        (model, pool, query)
    }

    #[test]
    fn default_result_is_closed_and_bounded() {
        let (m, p, q) = setup(20, 1);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let r = construct_sequence(&m, &idx, &p, &q, &SearchConfig::default()).unwrap();
        assert!(r.best.is_terminated());
        assert!(r.best.len() <= 7);
        assert_eq!(r.counters.suffix_encoder_calls, 0);
        assert!(r.counters.prefix_encoder_calls <= 1 + 7 * 5);
        assert!(r.counters.scored_sequences <= 7 * 5 * 5 + 5);
        let rescored = m.score_complete(Some(&q), &r.best, &p).unwrap();
        assert_eq!(rescored, r.best_score);
    }

    #[test]
    fn fixed_length_returns_exactly_k() {
        let (m, p, q) = setup(10, 2);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        for k in [1, 3, 5, 7] {
            let cfg = SearchConfig {
                fixed_length: Some(k),
                ..Default::default()
            };
            assert_eq!(construct_sequence(&m, &idx, &p, &q, &cfg).unwrap().best.len(), k);
        }
    }

    #[test]
    fn stale_index_rejected() {
        let (m, p, q) = setup(5, 3);
        let (other, _, _) = setup(5, 4);
        let idx = SuffixIndex::build(&other, &p).unwrap();
        assert!(matches!(
            construct_sequence(&m, &idx, &p, &q, &SearchConfig::default()),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn trace_records_every_step() {
        let (m, p, q) = setup(8, 5);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let cfg = SearchConfig {
            max_len: 3,
            record_trace: true,
            ..Default::default()
        };
        let r = construct_sequence(&m, &idx, &p, &q, &cfg).unwrap();
        let trace = r.trace.unwrap();
        assert_eq!(trace.len(), 4);
        assert_eq!(trace[0].kept.len(), 1);
        assert!(trace.iter().all(|t| t.kept.len() <= cfg.beam_width));
    }

    #[test]
    fn batch_matches_serial_and_keeps_order() {
        let (m, p, q) = setup(12, 6);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let queries: Vec<Query> = (0..9)
            .map(|i| Query {
                id: ExampleId(2000 + i),
                input: format!("{} t{}", q.input, i),
                ..q.clone()
            })
            .collect();
        let cfg = SearchConfig::default();
        let batch = batch_construct(&m, &idx, &p, &queries, &cfg);
        for (q, r) in queries.iter().zip(batch) {
            assert_eq!(r.unwrap(), construct_sequence(&m, &idx, &p, q, &cfg).unwrap());
        }
        assert!(batch_construct(&m, &idx, &p, &[], &cfg).is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SearchConfig { beam_width: 0, ..Default::default() },
            SearchConfig { branch: 0, ..Default::default() },
            SearchConfig { fixed_length: Some(8), ..Default::default() },
            SearchConfig { fixed_length: Some(0), ..Default::default() },
        ] {
            assert!(cfg.validate().unwrap_err().is_config());
        }
    }
}
