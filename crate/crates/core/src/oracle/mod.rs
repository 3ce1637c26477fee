//! In-context evaluation: given a query and an example sequence, produce a generation and
//! its quality in `[0, 1]`.

mod cache;
mod remote;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::dataset::{CandidatePool, ExampleSequence, Query};
use crate::error::Result;

pub use cache::CachedOracle;
pub use remote::{PromptTemplate, RemoteConfig, RemoteOracle};
pub use synthetic::{SyntheticOracle, SyntheticTaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub generation: String,
    pub quality: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_hint: Option<u64>,
}

pub trait Oracle: Send + Sync {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict>;

    /// Short identifier used in reports and cache keys.
    fn name(&self) -> String;
}

impl<O: Oracle + ?Sized> Oracle for &O {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict> {
        (**self).evaluate(query, seq, pool)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<O: Oracle + ?Sized> Oracle for std::sync::Arc<O> {
    fn evaluate(&self, query: &Query, seq: &ExampleSequence, pool: &CandidatePool) -> Result<OracleVerdict> {
        (**self).evaluate(query, seq, pool)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// 1.0 when the trimmed, case-folded texts are equal, else 0.0.
pub fn exact_match_metric(generation: &str, label: &str) -> f64 {
    let norm = |s: &str| s.trim().to_lowercase();
    if norm(generation) == norm(label) {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match() {
        assert_eq!(exact_match_metric("Yes ", "yes"), 1.0);
        assert_eq!(exact_match_metric("4", "5"), 0.0);
        assert_eq!(exact_match_metric("", ""), 1.0);
    }
}
