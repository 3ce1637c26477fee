use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsel::dataset::Example;
use seqsel::encoder::ModelConfig;
use seqsel::search::exhaustive_best;
use seqsel::{
    construct_sequence, CandidatePool, ExampleId, ExampleSequence, Query, ScorerModel, SearchConfig,
    SuffixIndex,
};

struct Instance {
    model: ScorerModel,
    pool: CandidatePool,
    query: Query,
    index: SuffixIndex,
}

fn instance(rng: &mut ChaCha8Rng, n: u32) -> Instance {
    let words = ["red", "blue", "cat", "dog", "sum", "map", "sky", "ant", "fig", "oak"];
    let mut text = |k: usize| {
        (0..k)
            .map(|_| words[rng.gen_range(0..words.len())])
            .collect::<Vec<_>>()
            .join(" ")
    };
    let pool = CandidatePool::new(
        (0..n)
            .map(|i| Example {
                id: ExampleId(i * 3 + 1),
                input: text(3),
                label: text(1),
                skills: vec![],
            })
            .collect(),
    )
    .unwrap();
    let query = Query {
        id: ExampleId(999),
        input: text(4),
        label: None,
        skills: vec![],
    };
    let model = ScorerModel::new(
        ModelConfig {
            vocab_buckets: 64,
            dim: 5,
            max_len: 8,
            init_scale: 1.0,
            ..Default::default()
        },
        rng.gen(),
    )
    .unwrap();
    let index = SuffixIndex::build(&model, &pool).unwrap();
    Instance {
        model,
        pool,
        query,
        index,
    }
}

fn search(inst: &Instance, b: usize, c: usize, l: usize) -> seqsel::SearchResult {
    let cfg = SearchConfig {
        beam_width: b,
        branch: c,
        max_len: l,
        ..Default::default()
    };
    construct_sequence(&inst.model, &inst.index, &inst.pool, &inst.query, &cfg).unwrap()
}

#[test]
fn unbounded_beam_equals_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=3);
        let inst = instance(&mut rng, n);
        let got = search(&inst, usize::MAX, n as usize + 1, l);
        let want = exhaustive_best(&inst.model, &inst.pool, &inst.query, l).unwrap();
        assert_eq!(got.best, want.sequence);
        assert_eq!(got.best_score, want.score);
    }
}

#[test]
fn width_n_plus_one_is_exhaustive_for_single_step() {
    // With b = c = N+1 the live set first exceeds b at length 2, so only L = 1 is exact.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..=8);
        let l = 1;
        let inst = instance(&mut rng, n);
        let got = search(&inst, n as usize + 1, n as usize + 1, l);
        let want = exhaustive_best(&inst.model, &inst.pool, &inst.query, l).unwrap();
        assert_eq!((got.best, got.best_score), (want.sequence, want.score));
    }
}

/// Independent greedy construction: repeatedly take the single best continuation.
fn greedy(inst: &Instance, l: usize) -> (ExampleSequence, f64) {
    let score = |seq: &ExampleSequence, next: ExampleId| {
        inst.model
            .score(Some(&inst.query), seq, next, &inst.pool)
            .unwrap()
    };
    let mut seq = ExampleSequence::empty();
    let mut finished: Vec<(ExampleSequence, f64)> = Vec::new();
    // The empty sequence is always a candidate.
    finished.push((seq.terminate().unwrap(), score(&seq, ExampleId::TERMINATOR)));
    loop {
        let mut best: Option<(ExampleId, f64)> = None;
        for id in inst.pool.ids().chain([ExampleId::TERMINATOR]) {
            if seq.contains(id) {
                continue;
            }
            let s = score(&seq, id);
            let better = match best {
                None => true,
                Some((bid, bs)) => s > bs || (s == bs && id < bid),
            };
            if better {
                best = Some((id, s));
            }
        }
        let (id, s) = best.unwrap();
        if id.is_terminator() {
            if !seq.is_empty() {
                finished.push((seq.terminate().unwrap(), s));
            }
            break;
        }
        seq = seq.append(id, l).unwrap();
        if seq.len() == l {
            finished.push((seq.terminate().unwrap(), score(&seq, ExampleId::TERMINATOR)));
            break;
        }
    }
    finished
        .into_iter()
        .reduce(|a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a })
        .unwrap()
}

#[test]
fn width_one_beam_is_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let n = rng.gen_range(1..=10);
        let l = rng.gen_range(1..=5);
        let inst = instance(&mut rng, n);
        let got = search(&inst, 1, 1, l);
        let (seq, score) = greedy(&inst, l);
        assert_eq!(got.best, seq);
        assert!((got.best_score - score).abs() < 1e-12, "{} vs {}", got.best_score, score);
    }
}

#[test]
fn complexity_counters_stay_within_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..200 {
        let n = rng.gen_range(1..=40);
        let inst = instance(&mut rng, n);
        let (b, c, l) = (rng.gen_range(2..=6), rng.gen_range(1..=6), rng.gen_range(1..=7));
        let r = search(&inst, b, c, l);
        assert!(r.counters.scored_sequences <= l * b * c + b, "{:?}", r.counters);
        assert!(r.counters.prefix_encoder_calls <= 1 + l * b, "{:?}", r.counters);
        assert_eq!(r.counters.suffix_encoder_calls, 0);
        assert!(r.best.len() <= l);
    }
}

#[test]
fn width_one_counter_bound_has_one_extra_slot() {
    // The empty sequence is scored separately when the terminator misses the first
    // top-c, which a single beam cannot absorb.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..200 {
        let n = rng.gen_range(1..=40);
        let inst = instance(&mut rng, n);
        let (c, l) = (rng.gen_range(1..=6), rng.gen_range(1..=7));
        let r = search(&inst, 1, c, l);
        assert!(r.counters.scored_sequences <= l * c + 2);
        assert!(r.counters.prefix_encoder_calls <= 1 + l);
    }
}

#[test]
fn explored_sequences_are_duplicate_free_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..50 {
        let inst = instance(&mut rng, 12);
        let cfg = SearchConfig {
            max_len: 4,
            record_trace: true,
            ..Default::default()
        };
        let r = construct_sequence(&inst.model, &inst.index, &inst.pool, &inst.query, &cfg).unwrap();
        for step in r.trace.unwrap() {
            for s in step.kept {
                let mut e = s.sequence.elements().to_vec();
                assert!(e.len() <= 4);
                e.sort();
                e.dedup();
                assert_eq!(e.len(), s.sequence.len());
            }
        }
    }
}

#[test]
fn search_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = instance(&mut rng, 30);
    assert_eq!(search(&inst, 5, 5, 7), search(&inst, 5, 5, 7));
}
