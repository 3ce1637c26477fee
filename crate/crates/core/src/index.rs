//! Dot-product retrieval over precomputed suffix embeddings.
//!
//! Every pool example is encoded once, together with the terminator, when the index is
//! built. Exact retrieval is a linear scan with a partial sort; an optional inverted-file
//! partition trades recall for fewer dot products on large pools.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{CandidatePool, ExampleId};
use crate::encoder::{dot, Embedding, ScorerModel};
use crate::error::{Error, Result};

const CACHE_MAGIC: &[u8; 8] = b"SQSLIDX1";
const CACHE_VERSION: u32 = 1;

/// `(id, score)` pairs ordered by descending score, then ascending id.
pub type Ranked = Vec<(ExampleId, f64)>;

/// Numeric descending order in which `-0.0 == 0.0`; NaN sorts as in `total_cmp`.
pub(crate) fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or_else(|| b.total_cmp(&a))
}

fn rank_order(a: &(ExampleId, f64), b: &(ExampleId, f64)) -> Ordering {
    desc(a.1, b.1).then(a.0.cmp(&b.0))
}

/// Keeps the best `c` of `scored`, sorted by [`rank_order`].
fn select_top(mut scored: Ranked, c: usize) -> Ranked {
    if scored.len() > c {
        scored.select_nth_unstable_by(c - 1, rank_order);
        scored.truncate(c);
    }
    scored.sort_unstable_by(rank_order);
    scored
}

#[derive(Clone, Debug)]
pub struct SuffixIndex {
    ids: Vec<ExampleId>,
    /// Row-major `ids.len() x dim`.
    vectors: Vec<f64>,
    dim: usize,
    fingerprint: String,
    suffix_encoder_calls: usize,
    partition: Option<Partition>,
}

impl SuffixIndex {
    /// Encodes every pool example and the terminator (last entry).
    pub fn build(model: &ScorerModel, pool: &CandidatePool) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::Config("cannot index an empty pool".into()));
        }
        let dim = model.dim();
        let mut ids = Vec::with_capacity(pool.len() + 1);
        let mut vectors = Vec::with_capacity((pool.len() + 1) * dim);
        let mut calls = 0;
        for id in pool.ids().chain(std::iter::once(ExampleId::TERMINATOR)) {
            let e = model.encode_suffix(id, pool)?;
            calls += 1;
            ids.push(id);
            vectors.extend_from_slice(e.as_slice());
        }
        Ok(Self {
            ids,
            vectors,
            dim,
            fingerprint: model.fingerprint().to_string(),
            suffix_encoder_calls: calls,
            partition: None,
        })
    }

    /// Loads the index cached at `path` when it was built from `model`; otherwise builds
    /// it and refreshes the cache.
    pub fn load_or_build(model: &ScorerModel, pool: &CandidatePool, path: &Path) -> Result<Self> {
        if let Ok(bytes) = fs::read(path) {
            if let Ok(index) = Self::from_bytes(&bytes) {
                if index.fingerprint == model.fingerprint() && index.len() == pool.len() + 1 {
                    return Ok(index);
                }
            }
        }
        let index = Self::build(model, pool)?;
        index.save(path)?;
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Suffix-encoder invocations made while building.
    pub fn suffix_encoder_calls(&self) -> usize {
        self.suffix_encoder_calls
    }

    pub fn entries(&self) -> impl Iterator<Item = (ExampleId, &[f64])> {
        self.ids.iter().copied().zip(self.vectors.chunks_exact(self.dim))
    }

    pub fn embedding(&self, id: ExampleId) -> Option<&[f64]> {
        let i = self.position(id)?;
        Some(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    fn position(&self, id: ExampleId) -> Option<usize> {
        if id.is_terminator() {
            return Some(self.ids.len() - 1);
        }
        self.ids[..self.ids.len() - 1].binary_search(&id).ok()
    }

    /// Fails unless the index was built from exactly this model.
    pub fn check_model(&self, model: &ScorerModel) -> Result<()> {
        if self.fingerprint != model.fingerprint() {
            return Err(Error::State(format!(
                "index was built from model {} but queried with {}",
                &self.fingerprint[..12],
                &model.fingerprint()[..12]
            )));
        }
        Ok(())
    }

    /// The `c` highest-scoring entries not in `exclude`, by exact scan. The terminator is
    /// eligible unless `exclude` names it explicitly.
    pub fn top_c(&self, prefix: &Embedding, c: usize, exclude: &[ExampleId]) -> Ranked {
        if c == 0 {
            return Vec::new();
        }
        let q = prefix.as_slice();
        let scored = self
            .entries()
            .filter(|(id, _)| !exclude.contains(id))
            .map(|(id, v)| (id, dot(q, v)))
            .collect();
        select_top(scored, c)
    }

    /// Enables [`top_c_approx`](Self::top_c_approx) with `lists` k-means cells.
    pub fn with_partition(mut self, lists: usize, seed: u64) -> Self {
        self.partition = Some(Partition::build(self.real_vectors(), self.dim, lists, seed));
        self
    }

    fn real_vectors(&self) -> &[f64] {
        &self.vectors[..(self.ids.len() - 1) * self.dim]
    }

    /// Approximate retrieval: scans only the `probes` cells whose centroids score highest,
    /// plus the terminator. Falls back to the exact scan when no partition was built.
    pub fn top_c_approx(&self, prefix: &Embedding, c: usize, exclude: &[ExampleId], probes: usize) -> Ranked {
        let Some(part) = &self.partition else {
            return self.top_c(prefix, c, exclude);
        };
        if c == 0 {
            return Vec::new();
        }
        let q = prefix.as_slice();
        let mut cells: Vec<(usize, f64)> = part
            .centroids
            .chunks_exact(self.dim)
            .enumerate()
            .map(|(i, cent)| (i, dot(q, cent)))
            .collect();
        cells.sort_unstable_by(|a, b| desc(a.1, b.1).then(a.0.cmp(&b.0)));
        let mut scored: Ranked = Vec::new();
        for &(cell, _) in cells.iter().take(probes.max(1)) {
            for &row in &part.members[cell] {
                let id = self.ids[row];
                if !exclude.contains(&id) {
                    let v = &self.vectors[row * self.dim..(row + 1) * self.dim];
                    scored.push((id, dot(q, v)));
                }
            }
        }
        if !exclude.contains(&ExampleId::TERMINATOR) {
            let t = self.embedding(ExampleId::TERMINATOR).unwrap();
            scored.push((ExampleId::TERMINATOR, dot(q, t)));
        }
        select_top(scored, c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.vectors.len() * 8 + self.ids.len() * 4 + 128);
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.fingerprint.len() as u32).to_le_bytes());
        out.extend_from_slice(self.fingerprint.as_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.0.to_le_bytes());
        }
        for v in &self.vectors {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    fn from_bytes(buf: &[u8]) -> Result<Self> {
        let bad = || Error::Checkpoint("malformed index cache".into());
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = buf.get(pos..pos + n).ok_or_else(bad)?;
            pos += n;
            Ok(s)
        };
        if take(8)? != CACHE_MAGIC {
            return Err(bad());
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::Checkpoint(format!("index cache version {version} unsupported")));
        }
        let flen = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let fingerprint = String::from_utf8(take(flen)?.to_vec()).map_err(|_| bad())?;
        let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let ids = take(n * 4)?
            .chunks_exact(4)
            .map(|c| ExampleId(u32::from_le_bytes(c.try_into().unwrap())))
            .collect::<Vec<_>>();
        let vectors = take(n * dim * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if ids.last() != Some(&ExampleId::TERMINATOR) {
            return Err(bad());
        }
        Ok(Self {
            ids,
            vectors,
            dim,
            fingerprint,
            suffix_encoder_calls: 0,
            partition: None,
        })
    }
}

/// Inverted-file partition of the real entries (the terminator is always scanned).
#[derive(Clone, Debug)]
struct Partition {
    centroids: Vec<f64>,
    members: Vec<Vec<usize>>,
}

impl Partition {
    fn build(vectors: &[f64], dim: usize, lists: usize, seed: u64) -> Self {
        let n = vectors.len() / dim;
        let lists = lists.clamp(1, n.max(1));
        let row = |i: usize| &vectors[i * dim..(i + 1) * dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts: Vec<usize> = (0..n).collect();
        starts.shuffle(&mut rng);
        let mut centroids: Vec<f64> = starts[..lists].iter().flat_map(|&i| row(i).to_vec()).collect();
        let mut assign = vec![0usize; n];
        for _ in 0..10 {
            for (i, a) in assign.iter_mut().enumerate() {
                let v = row(i);
                *a = (0..lists)
                    .map(|c| {
                        let cent = &centroids[c * dim..(c + 1) * dim];
                        let d2: f64 = v.iter().zip(cent).map(|(x, y)| (x - y) * (x - y)).sum();
                        (c, d2)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(c, _)| c)
                    .unwrap_or(0);
            }
            let mut sums = vec![0.0; lists * dim];
            let mut counts = vec![0usize; lists];
            for (i, &a) in assign.iter().enumerate() {
                counts[a] += 1;
                for (s, x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                    *s += x;
                }
            }
            for c in 0..lists {
                if counts[c] > 0 {
                    for j in 0..dim {
                        centroids[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                    }
                }
            }
        }
        let mut members = vec![Vec::new(); lists];
        for (i, &a) in assign.iter().enumerate() {
            members[a].push(i);
        }
        Self { centroids, members }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;
    use crate::encoder::ModelConfig;

    fn pool(n: u32) -> CandidatePool {
        CandidatePool::new(
            (0..n)
                .map(|i| Example {
                    id: ExampleId(i),
                    input: format!("item number {i} with word{}", i % 5),
                    label: format!("label{}", i % 3),
                    skills: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    fn model(seed: u64) -> ScorerModel {
        ScorerModel::new(
            ModelConfig {
                vocab_buckets: 257,
                dim: 8,
                init_scale: 0.5,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn one_entry_per_example_plus_terminator() {
        let m = model(1);
        let p = pool(7);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        assert_eq!(idx.len(), 8);
        assert_eq!(idx.suffix_encoder_calls(), 8);
        for id in p.ids().chain([ExampleId::TERMINATOR]) {
            assert_eq!(idx.embedding(id).unwrap(), m.encode_suffix(id, &p).unwrap().as_slice());
        }
    }

    #[test]
    fn rebuild_is_identical() {
        let m = model(1);
        let p = pool(7);
        let a = SuffixIndex::build(&m, &p).unwrap();
        let b = SuffixIndex::build(&m, &p).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.vectors, b.vectors);
    }

    #[test]
    fn exhaustive_request_returns_everything_sorted() {
        let m = model(2);
        let p = pool(7);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let q = m.embed_text("probe text");
        let all = idx.top_c(&q, 100, &[]);
        assert_eq!(all.len(), 8);
        assert!(all.windows(2).all(|w| rank_order(&w[0], &w[1]) != Ordering::Greater));
    }

    #[test]
    fn excluding_all_real_ids_forces_terminator() {
        let m = model(2);
        let p = pool(5);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let ex: Vec<_> = p.ids().collect();
        let r = idx.top_c(&m.embed_text("x"), 3, &ex);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, ExampleId::TERMINATOR);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let m = model(2);
        let p = pool(6);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        let r = idx.top_c(&Embedding::zeros(8), 4, &[ExampleId(1)]);
        let ids: Vec<u32> = r.iter().map(|(id, _)| id.0).collect();
        assert_eq!(ids, [0, 2, 3, 4]);
    }

    #[test]
    fn empty_pool_is_rejected() {
        // An empty pool cannot even be constructed; this pins the error kind.
        assert!(matches!(CandidatePool::new(vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn stale_model_detected() {
        let m = model(3);
        let p = pool(4);
        let idx = SuffixIndex::build(&m, &p).unwrap();
        assert!(idx.check_model(&m).is_ok());
        assert!(matches!(idx.check_model(&model(4)), Err(Error::State(_))));
    }

    #[test]
    fn cache_round_trip_and_invalidation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.bin");
        let m = model(5);
        let p = pool(9);
        let built = SuffixIndex::load_or_build(&m, &p, &path).unwrap();
        assert_eq!(built.suffix_encoder_calls(), 10);
        let cached = SuffixIndex::load_or_build(&m, &p, &path).unwrap();
        assert_eq!(cached.suffix_encoder_calls(), 0);
        assert_eq!(cached.vectors, built.vectors);
        let other = model(6);
        let rebuilt = SuffixIndex::load_or_build(&other, &p, &path).unwrap();
        assert_eq!(rebuilt.suffix_encoder_calls(), 10);
        assert_eq!(rebuilt.fingerprint(), other.fingerprint());
    }
}
