//! Examples, queries, candidate pools and JSONL ingestion.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a record. Candidate and query ids share one space (the record's load order).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExampleId(pub u32);

impl ExampleId {
    /// The termination element. Reserved: never assigned to a record, and it sorts after
    /// every real id, so ascending-id tie-breaking ranks it last among equal scores.
    pub const TERMINATOR: ExampleId = ExampleId(u32::MAX);

    pub fn is_terminator(self) -> bool {
        self == Self::TERMINATOR
    }
}

impl fmt::Display for ExampleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_terminator() {
            f.write_str("⊥")
        } else {
            write!(f, "e{}", self.0)
        }
    }
}

/// One candidate demonstration.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: ExampleId,
    pub input: String,
    pub label: String,
    /// Skill annotations read by the synthetic oracle. Empty for real-world data.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skills: Vec<u32>,
}

impl Example {
    /// Text seen by the encoders: input, a fixed separator, then the label.
    pub fn text(&self) -> String {
        format!("{} → {}", self.input, self.label)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: ExampleId,
    pub input: String,
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skills: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SequenceError {
    Duplicate(ExampleId),
    Terminated,
    TooLong { max_len: usize },
}

impl fmt::Display for SequenceError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceError::Duplicate(id) => write!(f, "{id} is already in the sequence"),
            SequenceError::Terminated => f.write_str("sequence is already terminated"),
            SequenceError::TooLong { max_len } => {
                write!(f, "sequence already holds the maximum of {max_len} elements")
            }
        }
    }
}

impl From<SequenceError> for Error {
    fn from(e: SequenceError) -> Self {
        match e {
            SequenceError::Terminated => Error::State(e.to_string()),
            _ => Error::Invariant(e.to_string()),
        }
    }
}

/// An ordered, duplicate-free list of example ids, optionally closed by the terminator.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExampleSequence {
    elements: Vec<ExampleId>,
    terminated: bool,
}

impl ExampleSequence {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds an open sequence from ids, validating uniqueness and the length bound.
    pub fn from_ids(ids: &[ExampleId], max_len: usize) -> Result<Self, SequenceError> {
        ids.iter()
            .try_fold(Self::empty(), |seq, &id| seq.append(id, max_len))
    }

    pub fn elements(&self) -> &[ExampleId] {
        &self.elements
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.elements.contains(&id)
    }

    /// Returns a new sequence with `elem` appended. Appending the terminator closes the
    /// sequence without adding an element.
    pub fn append(&self, elem: ExampleId, max_len: usize) -> Result<Self, SequenceError> {
        if self.terminated {
            return Err(SequenceError::Terminated);
        }
        let mut next = self.clone();
        if elem.is_terminator() {
            next.terminated = true;
            return Ok(next);
        }
        if self.contains(elem) {
            return Err(SequenceError::Duplicate(elem));
        }
        if self.len() >= max_len {
            return Err(SequenceError::TooLong { max_len });
        }
        next.elements.push(elem);
        Ok(next)
    }

    pub fn terminate(&self) -> Result<Self, SequenceError> {
        self.append(ExampleId::TERMINATOR, usize::MAX)
    }
}

impl fmt::Display for ExampleSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, id) in self.elements.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{id}")?;
        }
        if self.terminated {
            f.write_str(if self.elements.is_empty() { "⊥" } else { ", ⊥" })?;
        }
        f.write_str("]")
    }
}

/// Id-indexed candidate examples. The terminator id is reserved and never stored.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "Vec<Example>", into = "Vec<Example>")]
pub struct CandidatePool {
    examples: Vec<Example>,
    by_id: HashMap<ExampleId, usize>,
}

impl CandidatePool {
    pub fn new(mut examples: Vec<Example>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Config("candidate pool must hold at least one example".into()));
        }
        examples.sort_by_key(|e| e.id);
        let mut by_id = HashMap::with_capacity(examples.len());
        for (i, e) in examples.iter().enumerate() {
            if e.id.is_terminator() {
                return Err(Error::Invariant("example uses the reserved terminator id".into()));
            }
            if by_id.insert(e.id, i).is_some() {
                return Err(Error::Invariant(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(Self { examples, by_id })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: ExampleId) -> Result<&Example> {
        self.by_id
            .get(&id)
            .map(|&i| &self.examples[i])
            .ok_or(Error::Lookup(id))
    }

    pub fn contains(&self, id: ExampleId) -> bool {
        self.by_id.contains_key(&id)
    }

    /// Examples in ascending id order.
    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn ids(&self) -> impl Iterator<Item = ExampleId> + '_ {
        self.examples.iter().map(|e| e.id)
    }
}

impl TryFrom<Vec<Example>> for CandidatePool {
    type Error = Error;

    fn try_from(v: Vec<Example>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CandidatePool> for Vec<Example> {
    fn from(p: CandidatePool) -> Self {
        p.examples
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskDataset {
    pub task_name: String,
    pub candidates: CandidatePool,
    pub queries: Vec<Query>,
}

impl TaskDataset {
    pub fn new(task_name: impl Into<String>, candidates: CandidatePool, queries: Vec<Query>) -> Result<Self> {
        for q in &queries {
            if candidates.contains(q.id) || q.id.is_terminator() {
                return Err(Error::Invariant(format!(
                    "query id {} collides with the candidate id space",
                    q.id
                )));
            }
        }
        Ok(Self {
            task_name: task_name.into(),
            candidates,
            queries,
        })
    }

    pub fn query(&self, id: ExampleId) -> Option<&Query> {
        self.queries.iter().find(|q| q.id == id)
    }
}

/// One line of a JSONL dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub input: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skills: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub query_count: usize,
    pub seed: u64,
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.input.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty input".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Splits records into candidates and queries. Ids follow record order; the query subset
/// is a uniform random draw under `split.seed`.
pub fn split_records(task_name: &str, records: Vec<Record>, split: SplitSpec) -> Result<TaskDataset> {
    if split.query_count >= records.len() {
        return Err(Error::Config(format!(
            "query_count {} must be smaller than the record count {}",
            split.query_count,
            records.len()
        )));
    }
    if records.len() >= ExampleId::TERMINATOR.0 as usize {
        return Err(Error::Config("too many records".into()));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(split.seed));
    let mut is_query = vec![false; records.len()];
    for &i in &order[..split.query_count] {
        is_query[i] = true;
    }

    let mut candidates = Vec::new();
    let mut queries = Vec::new();
    for (i, r) in records.into_iter().enumerate() {
        let id = ExampleId(i as u32);
        if is_query[i] {
            queries.push(Query {
                id,
                input: r.input,
                label: Some(r.label),
                skills: r.skills,
            });
        } else {
            candidates.push(Example {
                id,
                input: r.input,
                label: r.label,
                skills: r.skills,
            });
        }
    }
    TaskDataset::new(task_name, CandidatePool::new(candidates)?, queries)
}

/// Loads a JSONL dataset (`{"input": .., "label": ..}` per line) and splits it.
pub fn load_dataset(path: &Path, split: SplitSpec) -> Result<TaskDataset> {
    let records = read_records(path)?;
    let task_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    split_records(&task_name, records, split)
}
