//! Central finite differences against the analytic gradients of the scorer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqsel::encoder::{ParamRef, Tensor};
use seqsel::{
    CandidatePool, Example, ExampleId, ExampleSequence, GradientTape, ModelConfig, PrefixMode,
    Query, ScorerModel,
};

const EPS: f64 = 1e-4;

fn pool() -> CandidatePool {
    let texts = [
        ("add two numbers", "sum"),
        ("multiply by three", "product"),
        ("reverse the word", "drow"),
        ("count the vowels", "three"),
        ("sort ascending", "ordered"),
    ];
    CandidatePool::new(
        texts
            .iter()
            .enumerate()
            .map(|(i, (a, b))| Example {
                id: ExampleId(i as u32),
                input: a.to_string(),
                label: b.to_string(),
                skills: vec![],
            })
            .collect(),
    )
    .unwrap()
}

fn query() -> Query {
    Query {
        id: ExampleId(50),
        input: "add the vowels then sort".into(),
        label: Some("x".into()),
        skills: vec![],
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Parameters worth probing: every dense tensor plus token rows the pass touched.
fn sample_params(model: &ScorerModel, tape: &GradientTape, rng: &mut ChaCha8Rng, n: usize) -> Vec<ParamRef> {
    let d = model.dim();
    let rows: Vec<usize> = tape.token_rows().map(|(r, _)| r).collect();
    let tensors: Vec<Tensor> = model
        .tensors()
        .iter()
        .map(|(t, _)| *t)
        .filter(|&t| t != Tensor::TokenEmbed || !rows.is_empty())
        .collect();
    (0..n)
        .map(|i| {
            let tensor = tensors[i % tensors.len()];
            let index = if tensor == Tensor::TokenEmbed {
                rows[rng.gen_range(0..rows.len())] * d + rng.gen_range(0..d)
            } else {
                rng.gen_range(0..model.tensor(tensor).unwrap().len())
            };
            ParamRef { tensor, index }
        })
        .collect()
}

fn check(mode: PrefixMode, num_layers: usize, prefix: &[u32], next: ExampleId, seed: u64) {
    let cfg = ModelConfig {
        vocab_buckets: 64,
        dim: 5,
        num_layers,
        max_len: 4,
        prefix_mode: mode,
        init_scale: 0.6,
        ..Default::default()
    };
    let mut model = ScorerModel::new(cfg, seed).unwrap();
    let pool = pool();
    let q = query();
    let ids: Vec<_> = prefix.iter().map(|&i| ExampleId(i)).collect();
    let pre = ExampleSequence::from_ids(&ids, 7).unwrap();
    let mut tape = GradientTape::new(&model);
    model.forward(&mut tape, Some(&q), &pre, next, &pool).unwrap();
    model.backward(&mut tape, Some(&q), &pre, next, &pool, 1.3).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let mut worst: f64 = 0.0;
    for p in sample_params(&model, &tape, &mut rng, 120) {
        let orig = model.param(p);
        *model.param_mut(p) = orig + EPS;
        let up = model.score(Some(&q), &pre, next, &pool).unwrap();
        *model.param_mut(p) = orig - EPS;
        let down = model.score(Some(&q), &pre, next, &pool).unwrap();
        *model.param_mut(p) = orig;
        let numeric = 1.3 * (up - down) / (2.0 * EPS);
        let e = rel_err(tape.grad(p), numeric);
        assert!(e < 1e-4, "{mode:?} {p:?}: analytic {} numeric {numeric}", tape.grad(p));
        worst = worst.max(e);
    }
}

#[test]
fn dynamic_single_layer() {
    for seed in 0..4 {
        check(PrefixMode::Dynamic, 1, &[0, 2, 4], ExampleId(1), seed);
        check(PrefixMode::Dynamic, 1, &[3], ExampleId::TERMINATOR, seed);
    }
}

#[test]
fn dynamic_two_layers() {
    for seed in 0..4 {
        check(PrefixMode::Dynamic, 2, &[1, 0], ExampleId(3), seed);
        check(PrefixMode::Dynamic, 2, &[], ExampleId::TERMINATOR, seed);
    }
}

#[test]
fn static_and_length_only() {
    check(PrefixMode::Static, 1, &[4, 1], ExampleId(0), 9);
    check(PrefixMode::LengthOnly, 1, &[4, 1], ExampleId(0), 9);
    check(PrefixMode::LengthOnly, 1, &[2], ExampleId::TERMINATOR, 9);
}
