//! Closed-form stand-in for an LLM's in-context behaviour.
//!
//! Every record carries a set of skills. A query is answered well when the sequence
//! demonstrates each of the query's skills, recent demonstrations count more than early
//! ones, and sequences longer than a budget are penalised:
//!
//! ```text
//! coverage = sum over query skills s of  max over positions p demonstrating s of
//!            recency_decay^(|E| - 1 - p),  divided by |skills(query)|
//! quality  = clamp(coverage, 0, 1) * length_penalty^max(0, |E| - length_budget)
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Oracle, OracleVerdict};
use crate::dataset::{CandidatePool, ExampleSequence, Query, Record};
use crate::error::{Error, Result};

const SKILL_STEMS: [&str; 32] = [
    "carry", "borrow", "fraction", "ratio", "percent", "decimal", "rounding", "estimate",
    "area", "perimeter", "volume", "angle", "parity", "prime", "factor", "multiple",
    "average", "median", "rate", "distance", "unit", "money", "time", "calendar",
    "pattern", "sequence", "negation", "comparison", "counting", "grouping", "sharing", "order",
];

const SYNONYM_ENDINGS: [&str; 8] = ["", "ing", "ed", "er", "ish", "wise", "ment", "ful"];

const FILLER: [&str; 64] = [
    "the", "a", "some", "each", "every", "this", "that", "many", "few", "one", "two", "three",
    "apple", "river", "train", "garden", "window", "market", "letter", "cloud", "stone",
    "friend", "teacher", "basket", "bridge", "candle", "forest", "harbor", "island", "jacket",
    "kettle", "ladder", "meadow", "needle", "orchard", "pillow", "quarry", "ribbon", "saddle",
    "tunnel", "valley", "wagon", "yard", "zebra", "blue", "green", "quiet", "loud", "early",
    "late", "small", "large", "north", "south", "old", "new", "warm", "cold", "bright",
    "dark", "soft", "hard", "near", "far",
];

/// Parameters of a synthetic task family: the oracle's closed form plus the knobs of the
/// text generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub skill_count: usize,
    /// Most skills a record carries.
    pub skills_per_item: usize,
    /// Fewest skills a record carries; each record draws its count uniformly between
    /// this and `skills_per_item`. `None` means every record has `skills_per_item`.
    #[serde(default)]
    pub min_skills_per_item: Option<usize>,
    pub recency_decay: f64,
    pub length_budget: usize,
    pub length_penalty: f64,
    pub noise_seed: u64,
    /// Surface forms per skill; records pick one at random.
    pub synonyms_per_skill: usize,
    /// Distractor words per record.
    pub filler_words: usize,
    /// Size of the distractor vocabulary.
    pub filler_vocab: usize,
    /// First skill stem this family uses; families with different offsets use different
    /// skill vocabularies.
    pub skill_offset: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            skill_count: 8,
            skills_per_item: 2,
            min_skills_per_item: None,
            recency_decay: 0.8,
            length_budget: 3,
            length_penalty: 0.7,
            noise_seed: 0,
            synonyms_per_skill: 4,
            filler_words: 3,
            filler_vocab: 40,
            skill_offset: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.skill_count == 0 || self.skill_offset + self.skill_count > SKILL_STEMS.len() {
            return bad(format!(
                "skill_offset + skill_count must lie in 1..={}",
                SKILL_STEMS.len()
            ));
        }
        if self.skills_per_item == 0 || self.skills_per_item > self.skill_count {
            return bad(format!(
                "skills_per_item {} must lie in 1..={}",
                self.skills_per_item, self.skill_count
            ));
        }
        if let Some(min) = self.min_skills_per_item {
            if min == 0 || min > self.skills_per_item {
                return bad(format!(
                    "min_skills_per_item {min} must lie in 1..={}",
                    self.skills_per_item
                ));
            }
        }
        if !(self.recency_decay > 0.0 && self.recency_decay <= 1.0) {
            return bad("recency_decay must lie in (0, 1]".into());
        }
        if !(self.length_penalty > 0.0 && self.length_penalty < 1.0) {
            return bad("length_penalty must lie in (0, 1)".into());
        }
        if self.length_budget > max_len {
            return bad(format!(
                "length_budget {} exceeds the maximum sequence length {max_len}",
                self.length_budget
            ));
        }
        if self.synonyms_per_skill == 0 || self.synonyms_per_skill > SYNONYM_ENDINGS.len() {
            return bad(format!("synonyms_per_skill must lie in 1..={}", SYNONYM_ENDINGS.len()));
        }
        if self.filler_vocab == 0 || self.filler_vocab > FILLER.len() {
            return bad(format!("filler_vocab must lie in 1..={}", FILLER.len()));
        }
        Ok(())
    }

    /// Surface form `variant` of skill `skill`.
    pub fn skill_word(&self, skill: usize, variant: usize) -> String {
        format!("{}{}", SKILL_STEMS[self.skill_offset + skill], SYNONYM_ENDINGS[variant])
    }

    /// Draws `count` annotated records, deterministic in `noise_seed`.
    pub fn generate(&self, count: usize) -> Vec<Record> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let skills: Vec<usize> = (0..self.skill_count).collect();
        (0..count)
            .map(|_| {
                let count = match self.min_skills_per_item {
                    Some(min) if min < self.skills_per_item => rng.gen_range(min..=self.skills_per_item),
                    _ => self.skills_per_item,
                };
                let mut own: Vec<usize> = skills
                    .choose_multiple(&mut rng, count)
                    .copied()
                    .collect();
                own.sort_unstable();
                let mut words: Vec<String> = own
                    .iter()
                    .map(|&s| self.skill_word(s, rng.gen_range(0..self.synonyms_per_skill)))
                    .collect();
                for _ in 0..self.filler_words {
                    words.push(FILLER[rng.gen_range(0..self.filler_vocab)].to_string());
                }
                words.shuffle(&mut rng);
                Record {
                    input: words.join(" "),
                    label: FILLER[rng.gen_range(0..self.filler_vocab)].to_string(),
                    skills: own.iter().map(|&s| s as u32).collect(),
                }
            })
            .collect()
    }

    /// Quality of a sequence whose elements carry `element_skills`, for a query needing
    /// `query_skills`. `None` when the query has no skills.
    pub fn quality(&self, query_skills: &[u32], element_skills: &[&[u32]]) -> Option<f64> {
        if query_skills.is_empty() {
            return None;
        }
        let len = element_skills.len();
        let mut covered = 0.0;
        for s in query_skills {
            let best = element_skills
                .iter()
                .enumerate()
                .filter(|(_, skills)| skills.contains(s))
                .map(|(p, _)| self.recency_decay.powi((len - 1 - p) as i32))
                .fold(0.0, f64::max);
            covered += best;
        }
        let coverage = (covered / query_skills.len() as f64).clamp(0.0, 1.0);
        let over = len.saturating_sub(self.length_budget) as i32;
        Some(coverage * self.length_penalty.powi(over))
    }
}

/// Deterministic oracle implementing the closed form above from skill annotations.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    spec: SyntheticTaskSpec,
}

impl SyntheticOracle {
    pub fn new(spec: SyntheticTaskSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &SyntheticTaskSpec {
        &self.spec
    }
}

impl Oracle for SyntheticOracle {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict> {
        let skills = seq
            .elements()
            .iter()
            .map(|&id| pool.get(id).map(|e| e.skills.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        let quality = self.spec.quality(&query.skills, &skills).ok_or_else(|| {
            Error::Config(format!(
                "query {} has no skill annotations; the synthetic oracle needs them",
                query.id
            ))
        })?;
        let hit = query
            .skills
            .iter()
            .filter(|s| skills.iter().any(|k| k.contains(s)))
            .count();
        Ok(OracleVerdict {
            generation: format!("covered {hit}/{} skills in {} examples", query.skills.len(), seq.len()),
            quality,
            cost_hint: None,
        })
    }

    fn name(&self) -> String {
        "synthetic".into()
    }
}
