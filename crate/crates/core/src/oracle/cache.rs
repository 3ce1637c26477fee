use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{Oracle, OracleVerdict};
use crate::dataset::{CandidatePool, ExampleId, ExampleSequence, Query};
use crate::error::{Error, Result};

type Key = (ExampleId, Vec<ExampleId>);

#[derive(Serialize, Deserialize)]
struct Entry {
    query: ExampleId,
    sequence: Vec<ExampleId>,
    verdict: OracleVerdict,
}

/// Memoizes verdicts by `(query id, sequence)`, optionally persisted as JSONL so repeated
/// epochs and reruns never repeat a request.
pub struct CachedOracle<O> {
    inner: O,
    memo: Mutex<HashMap<Key, OracleVerdict>>,
    file: Option<Mutex<File>>,
}

impl<O: Oracle> CachedOracle<O> {
    pub fn in_memory(inner: O) -> Self {
        Self {
            inner,
            memo: Mutex::new(HashMap::new()),
            file: None,
        }
    }

    /// Loads any entries already in `path` and appends new ones to it.
    pub fn persistent(inner: O, path: &Path) -> Result<Self> {
        let mut memo = HashMap::new();
        if path.exists() {
            let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: Entry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                memo.insert((entry.query, entry.sequence), entry.verdict);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(Self {
            inner,
            memo: Mutex::new(memo),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn len(&self) -> usize {
        self.memo.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }
}

impl<O: Oracle> Oracle for CachedOracle<O> {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict> {
        let key = (query.id, seq.elements().to_vec());
        if let Some(v) = self.memo.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(v.clone());
        }
        let verdict = self.inner.evaluate(query, seq, pool)?;
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&Entry {
                query: key.0,
                sequence: key.1.clone(),
                verdict: verdict.clone(),
            })?;
            let mut f = file.lock().unwrap_or_else(|e| e.into_inner());
            writeln!(f, "{line}").map_err(|e| Error::io("appending to oracle cache", e))?;
        }
        self.memo
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, verdict.clone());
        Ok(verdict)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}
