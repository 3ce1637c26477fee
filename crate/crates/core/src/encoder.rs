//! Dual-encoder scorer.
//!
//! The prefix encoder feeds the query embedding followed by one embedding per prefix
//! element into a stack of gated recurrent cells and returns the top layer's last hidden
//! state. The suffix encoder maps the next element's text embedding through an affine
//! projection; the terminator has its own learned embedding. A candidate's score is the
//! dot product of the two.
//!
//! Text embeddings are the mean of hashed-token rows from a shared table. Every forward
//! pass can be recorded on a [`GradientTape`] and differentiated exactly.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CandidatePool, ExampleId, ExampleSequence, Query};
use crate::error::{Error, Result};
use crate::text::token_buckets;

/// What the prefix encoder is allowed to see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixMode {
    /// Query followed by the prefix elements.
    #[default]
    Dynamic,
    /// Prefix elements only; the query is never an input.
    Static,
    /// A learned vector per prefix length; element and query text are ignored.
    LengthOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_buckets: usize,
    pub dim: usize,
    pub num_layers: usize,
    /// Longest prefix the length table can represent.
    pub max_len: usize,
    pub prefix_mode: PrefixMode,
    /// Embedding tables and vectors start uniform in `[-init_scale, init_scale]`; the
    /// suffix bias and the terminator start at zero.
    pub init_scale: f64,
    /// Half-width for the recurrent and suffix weight matrices; `None` uses `init_scale`.
    #[serde(default)]
    pub matrix_init_scale: Option<f64>,
    /// Added to the initial update-gate bias; positive values make the recurrent state
    /// retain earlier inputs (the query) at the start of training.
    #[serde(default)]
    pub update_gate_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_buckets: 32_768,
            dim: 64,
            num_layers: 1,
            max_len: 7,
            prefix_mode: PrefixMode::Dynamic,
            init_scale: 0.05,
            matrix_init_scale: None,
            update_gate_bias: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_buckets == 0 || self.dim == 0 || self.num_layers == 0 || self.max_len == 0 {
            return Err(Error::Config(format!(
                "model sizes must be positive: {self:?}"
            )));
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be finite and non-negative".into()));
        }
        if !self.update_gate_bias.is_finite() {
            return Err(Error::Config("update_gate_bias must be finite".into()));
        }
        if let Some(m) = self.matrix_init_scale {
            if !(m.is_finite() && m >= 0.0) {
                return Err(Error::Config("matrix_init_scale must be finite and non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Weights of one gated recurrent layer. Gate rows are stacked `[update; reset; candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    /// `3d x d`, applied to the layer input.
    pub w_input: Vec<f64>,
    /// `3d x d`, applied to the previous hidden state.
    pub w_hidden: Vec<f64>,
    /// `3d`
    pub bias: Vec<f64>,
}

/// Every parameter except the token table, which is stored densely in the model and
/// sparsely on the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    pub layers: Vec<GruParams>,
    /// `d x d`
    pub suffix_weight: Vec<f64>,
    pub suffix_bias: Vec<f64>,
    /// Embedding of the terminator.
    pub terminator: Vec<f64>,
    /// `(max_len + 1) x d`, used only in [`PrefixMode::LengthOnly`].
    pub length_embed: Vec<f64>,
}

impl DenseParams {
    pub(crate) fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.dim;
        Self {
            layers: (0..cfg.num_layers)
                .map(|_| GruParams {
                    w_input: vec![0.0; 3 * d * d],
                    w_hidden: vec![0.0; 3 * d * d],
                    bias: vec![0.0; 3 * d],
                })
                .collect(),
            suffix_weight: vec![0.0; d * d],
            suffix_bias: vec![0.0; d],
            terminator: vec![0.0; d],
            length_embed: vec![0.0; (cfg.max_len + 1) * d],
        }
    }

    pub(crate) fn slices(&self) -> Vec<(Tensor, &[f64])> {
        let mut out = Vec::with_capacity(4 + 3 * self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((Tensor::GruInput(l), layer.w_input.as_slice()));
            out.push((Tensor::GruHidden(l), layer.w_hidden.as_slice()));
            out.push((Tensor::GruBias(l), layer.bias.as_slice()));
        }
        out.push((Tensor::SuffixWeight, &self.suffix_weight));
        out.push((Tensor::SuffixBias, &self.suffix_bias));
        out.push((Tensor::Terminator, &self.terminator));
        out.push((Tensor::LengthEmbed, &self.length_embed));
        out
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<(Tensor, &mut [f64])> {
        let mut out = Vec::with_capacity(4 + 3 * self.layers.len());
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((Tensor::GruInput(l), layer.w_input.as_mut_slice()));
            out.push((Tensor::GruHidden(l), layer.w_hidden.as_mut_slice()));
            out.push((Tensor::GruBias(l), layer.bias.as_mut_slice()));
        }
        out.push((Tensor::SuffixWeight, &mut self.suffix_weight));
        out.push((Tensor::SuffixBias, &mut self.suffix_bias));
        out.push((Tensor::Terminator, &mut self.terminator));
        out.push((Tensor::LengthEmbed, &mut self.length_embed));
        out
    }

    fn get(&self, t: Tensor) -> Option<&[f64]> {
        Some(match t {
            Tensor::TokenEmbed => return None,
            Tensor::GruInput(l) => &self.layers.get(l)?.w_input,
            Tensor::GruHidden(l) => &self.layers.get(l)?.w_hidden,
            Tensor::GruBias(l) => &self.layers.get(l)?.bias,
            Tensor::SuffixWeight => &self.suffix_weight,
            Tensor::SuffixBias => &self.suffix_bias,
            Tensor::Terminator => &self.terminator,
            Tensor::LengthEmbed => &self.length_embed,
        })
    }

    fn get_mut(&mut self, t: Tensor) -> Option<&mut [f64]> {
        Some(match t {
            Tensor::TokenEmbed => return None,
            Tensor::GruInput(l) => &mut self.layers.get_mut(l)?.w_input,
            Tensor::GruHidden(l) => &mut self.layers.get_mut(l)?.w_hidden,
            Tensor::GruBias(l) => &mut self.layers.get_mut(l)?.bias,
            Tensor::SuffixWeight => &mut self.suffix_weight,
            Tensor::SuffixBias => &mut self.suffix_bias,
            Tensor::Terminator => &mut self.terminator,
            Tensor::LengthEmbed => &mut self.length_embed,
        })
    }
}

/// Names a parameter tensor of a [`ScorerModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tensor {
    TokenEmbed,
    GruInput(usize),
    GruHidden(usize),
    GruBias(usize),
    SuffixWeight,
    SuffixBias,
    Terminator,
    LengthEmbed,
}

impl Tensor {
    pub fn name(self) -> String {
        match self {
            Tensor::TokenEmbed => "token_embed".into(),
            Tensor::GruInput(l) => format!("gru.{l}.w_input"),
            Tensor::GruHidden(l) => format!("gru.{l}.w_hidden"),
            Tensor::GruBias(l) => format!("gru.{l}.bias"),
            Tensor::SuffixWeight => "suffix.weight".into(),
            Tensor::SuffixBias => "suffix.bias".into(),
            Tensor::Terminator => "terminator".into(),
            Tensor::LengthEmbed => "length_embed".into(),
        }
    }
}

/// A single scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub tensor: Tensor,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// All trainable parameters.
#[derive(Clone, Debug)]
pub struct ScorerModel {
    config: ModelConfig,
    token_embed: Vec<f64>,
    dense: DenseParams,
    fingerprint: OnceLock<String>,
}

impl PartialEq for ScorerModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.token_embed == other.token_embed && self.dense == other.dense
    }
}

impl ScorerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = config.init_scale;
        let matrix = config.matrix_init_scale.unwrap_or(table);
        let mut draw = |v: &mut [f64], s: f64| {
            for x in v.iter_mut() {
                *x = if s > 0.0 { rng.gen_range(-s..=s) } else { 0.0 };
            }
        };
        let mut token_embed = vec![0.0; config.vocab_buckets * config.dim];
        draw(&mut token_embed, table);
        let mut dense = DenseParams::zeros(&config);
        for (t, v) in dense.slices_mut() {
            let s = match t {
                Tensor::GruInput(_) | Tensor::GruHidden(_) | Tensor::SuffixWeight => matrix,
                Tensor::SuffixBias | Tensor::Terminator => 0.0,
                _ => table,
            };
            draw(v, s);
            if let Tensor::GruBias(_) = t {
                v[..config.dim].iter_mut().for_each(|b| *b += config.update_gate_bias);
            }
        }
        Ok(Self {
            config,
            token_embed,
            dense,
            fingerprint: OnceLock::new(),
        })
    }

    /// Assembles a model from raw tensors, checking every shape against `config`.
    pub fn from_parts(config: ModelConfig, token_embed: Vec<f64>, dense: DenseParams) -> Result<Self> {
        config.validate()?;
        let expected = DenseParams::zeros(&config);
        let shape_err = |name: String, want: usize, got: usize| {
            Error::Checkpoint(format!("tensor {name} has {got} values, expected {want}"))
        };
        if token_embed.len() != config.vocab_buckets * config.dim {
            return Err(shape_err(
                Tensor::TokenEmbed.name(),
                config.vocab_buckets * config.dim,
                token_embed.len(),
            ));
        }
        if expected.layers.len() != dense.layers.len() {
            return Err(Error::Checkpoint(format!(
                "{} recurrent layers stored, config expects {}",
                dense.layers.len(),
                expected.layers.len()
            )));
        }
        for ((t, want), (_, got)) in expected.slices().into_iter().zip(dense.slices()) {
            if want.len() != got.len() {
                return Err(shape_err(t.name(), want.len(), got.len()));
            }
        }
        let model = Self {
            config,
            token_embed,
            dense,
            fingerprint: OnceLock::new(),
        };
        if !model.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter values".into()));
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn token_embed(&self) -> &[f64] {
        &self.token_embed
    }

    pub fn dense(&self) -> &DenseParams {
        &self.dense
    }

    /// Every tensor with its name, token table first.
    pub fn tensors(&self) -> Vec<(Tensor, &[f64])> {
        let mut out = vec![(Tensor::TokenEmbed, self.token_embed.as_slice())];
        out.extend(self.dense.slices());
        out
    }

    pub fn tensor(&self, t: Tensor) -> Option<&[f64]> {
        match t {
            Tensor::TokenEmbed => Some(&self.token_embed),
            _ => self.dense.get(t),
        }
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> Option<&mut [f64]> {
        self.fingerprint = OnceLock::new();
        match t {
            Tensor::TokenEmbed => Some(&mut self.token_embed),
            _ => self.dense.get_mut(t),
        }
    }

    pub fn param(&self, p: ParamRef) -> f64 {
        self.tensor(p.tensor).expect("unknown tensor")[p.index]
    }

    pub fn param_mut(&mut self, p: ParamRef) -> &mut f64 {
        &mut self.tensor_mut(p.tensor).expect("unknown tensor")[p.index]
    }

    pub(crate) fn dense_mut(&mut self) -> &mut DenseParams {
        self.fingerprint = OnceLock::new();
        &mut self.dense
    }

    pub(crate) fn token_embed_mut(&mut self) -> &mut [f64] {
        self.fingerprint = OnceLock::new();
        &mut self.token_embed
    }

    /// SHA-256 of the serialized checkpoint, hex encoded. Cached until the next mutation.
    pub fn fingerprint(&self) -> &str {
        self.fingerprint
            .get_or_init(|| crate::checkpoint::content_hash(&crate::checkpoint::to_bytes(self)))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Mean of the hashed-token rows of `text`; zero when there are no tokens.
    pub fn embed_text(&self, text: &str) -> Embedding {
        Embedding(self.embed_buckets(&token_buckets(text, self.config.vocab_buckets)))
    }

    fn embed_buckets(&self, buckets: &[usize]) -> Vec<f64> {
        let d = self.config.dim;
        let mut out = vec![0.0; d];
        if buckets.is_empty() {
            return out;
        }
        for &b in buckets {
            let row = &self.token_embed[b * d..(b + 1) * d];
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = 1.0 / buckets.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        out
    }

    fn text_trace(&self, text: &str) -> TextTrace {
        let buckets = token_buckets(text, self.config.vocab_buckets);
        let embedding = self.embed_buckets(&buckets);
        TextTrace { buckets, embedding }
    }

    /// `h_prefix(query, prefix)`.
    pub fn encode_prefix(
        &self,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        pool: &CandidatePool,
    ) -> Result<Embedding> {
        Ok(Embedding(self.prefix_trace(query, prefix, pool)?.output().to_vec()))
    }

    /// `h_suffix(elem)`; the terminator maps to its learned embedding.
    pub fn encode_suffix(&self, elem: ExampleId, pool: &CandidatePool) -> Result<Embedding> {
        let (_, out) = self.suffix_trace(elem, pool)?;
        Ok(Embedding(out))
    }

    /// Score of appending `next` to `prefix` for `query`. Scoring a complete sequence
    /// means passing the whole sequence as `prefix` and the terminator as `next`.
    pub fn score(
        &self,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        next: ExampleId,
        pool: &CandidatePool,
    ) -> Result<f64> {
        check_next(prefix, next)?;
        let p = self.encode_prefix(query, prefix, pool)?;
        let s = self.encode_suffix(next, pool)?;
        Ok(p.dot(&s))
    }

    /// Score of a finished sequence: the whole sequence as prefix, the terminator as suffix.
    pub fn score_complete(
        &self,
        query: Option<&Query>,
        seq: &ExampleSequence,
        pool: &CandidatePool,
    ) -> Result<f64> {
        let open = ExampleSequence::from_ids(seq.elements(), usize::MAX)?;
        self.score(query, &open, ExampleId::TERMINATOR, pool)
    }

    /// Like [`score`](Self::score), recording activations on `tape` for a later
    /// [`backward`](Self::backward) with identical arguments.
    pub fn forward(
        &self,
        tape: &mut GradientTape,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        next: ExampleId,
        pool: &CandidatePool,
    ) -> Result<f64> {
        check_next(prefix, next)?;
        let prefix_trace = self.prefix_trace(query, prefix, pool)?;
        let (suffix, suffix_out) = self.suffix_trace(next, pool)?;
        let score = dot(prefix_trace.output(), &suffix_out);
        tape.pending.push(ScoreTrace {
            key: TraceKey::new(query, prefix, next),
            prefix: prefix_trace,
            suffix,
            suffix_out,
        });
        Ok(score)
    }

    /// Adds `upstream * d(score)/d(theta)` to `tape`, consuming the activations a matching
    /// [`forward`](Self::forward) call recorded.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        tape: &mut GradientTape,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        next: ExampleId,
        _pool: &CandidatePool,
        upstream: f64,
    ) -> Result<()> {
        let key = TraceKey::new(query, prefix, next);
        let pos = tape
            .pending
            .iter()
            .rposition(|t| t.key == key)
            .ok_or_else(|| {
                Error::State(format!(
                    "backward for prefix {prefix} and next {next} without a matching forward pass"
                ))
            })?;
        let trace = tape.pending.remove(pos);
        if upstream == 0.0 {
            return Ok(());
        }
        let d_prefix: Vec<f64> = trace.suffix_out.iter().map(|v| v * upstream).collect();
        let d_suffix: Vec<f64> = trace.prefix.output().iter().map(|v| v * upstream).collect();
        self.backward_suffix(tape, &trace.suffix, &d_suffix);
        self.backward_prefix(tape, &trace.prefix, &d_prefix);
        Ok(())
    }

    fn suffix_trace(&self, elem: ExampleId, pool: &CandidatePool) -> Result<(SuffixTrace, Vec<f64>)> {
        if elem.is_terminator() {
            return Ok((SuffixTrace::Terminator, self.dense.terminator.clone()));
        }
        let example = pool.get(elem)?;
        let text = self.text_trace(&example.text());
        let d = self.config.dim;
        let mut out = self.dense.suffix_bias.clone();
        matvec_acc(&self.dense.suffix_weight, 0, d, d, &text.embedding, &mut out);
        Ok((SuffixTrace::Example(text), out))
    }

    fn prefix_trace(
        &self,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        pool: &CandidatePool,
    ) -> Result<PrefixTrace> {
        if prefix.is_terminated() {
            return Err(Error::State("cannot encode a terminated sequence as a prefix".into()));
        }
        if self.config.prefix_mode == PrefixMode::LengthOnly {
            return self.length_trace(prefix.elements(), pool);
        }
        let mut inputs = Vec::with_capacity(prefix.len() + 1);
        if self.config.prefix_mode == PrefixMode::Dynamic {
            if let Some(q) = query {
                inputs.push(self.text_trace(&q.input));
            }
        }
        for &id in prefix.elements() {
            inputs.push(self.text_trace(&pool.get(id)?.text()));
        }
        let init = vec![vec![0.0; self.config.dim]; self.config.num_layers];
        Ok(PrefixTrace::Recurrent(self.run(&init, inputs)))
    }

    fn length_trace(&self, elements: &[ExampleId], pool: &CandidatePool) -> Result<PrefixTrace> {
        let d = self.config.dim;
        let len = elements.len();
        if len > self.config.max_len {
            return Err(Error::Config(format!(
                "prefix length {len} exceeds the length table ({})",
                self.config.max_len
            )));
        }
        // Resolve ids anyway so lookup errors surface uniformly across modes.
        for &id in elements {
            pool.get(id)?;
        }
        let output = self.dense.length_embed[len * d..(len + 1) * d].to_vec();
        Ok(PrefixTrace::Length { len, output })
    }

    /// Runs the recurrent stack over `inputs`, starting from per-layer states `init`.
    fn run(&self, init: &[Vec<f64>], inputs: Vec<TextTrace>) -> Run {
        let d = self.config.dim;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        let mut finals = Vec::with_capacity(self.config.num_layers);
        let mut layer_inputs: Vec<Vec<f64>> = inputs.iter().map(|t| t.embedding.clone()).collect();
        for (layer, h0) in self.dense.layers.iter().zip(init) {
            let mut h = h0.clone();
            let mut steps = Vec::with_capacity(layer_inputs.len());
            let mut outputs = Vec::with_capacity(layer_inputs.len());
            for x in layer_inputs {
                let step = gru_step(layer, d, x, h);
                h = step.h_out.clone();
                outputs.push(step.h_out.clone());
                steps.push(step);
            }
            layers.push(steps);
            finals.push(h);
            layer_inputs = outputs;
        }
        Run {
            inputs,
            layers,
            finals,
        }
    }

    /// Backpropagates gradients on the final state of every layer through `run`,
    /// returning the gradients on the initial states.
    fn backward_run(&self, tape: &mut GradientTape, run: &Run, d_finals: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let d = self.config.dim;
        let steps = run.inputs.len();
        if steps == 0 {
            return d_finals;
        }
        let mut d_init = vec![Vec::new(); run.layers.len()];
        // Gradient w.r.t. each output of the layer currently being processed.
        let mut d_outputs = vec![vec![0.0; d]; steps];
        for (l, layer_steps) in run.layers.iter().enumerate().rev() {
            let params = &self.dense.layers[l];
            let grads = &mut tape.dense.layers[l];
            let mut d_inputs = vec![vec![0.0; d]; steps];
            let mut d_h = d_finals[l].clone();
            for t in (0..steps).rev() {
                for (a, b) in d_h.iter_mut().zip(&d_outputs[t]) {
                    *a += b;
                }
                d_h = gru_step_backward(params, grads, d, &layer_steps[t], &d_h, &mut d_inputs[t]);
            }
            d_init[l] = d_h;
            d_outputs = d_inputs;
        }
        for (text, d_x) in run.inputs.iter().zip(&d_outputs) {
            tape.add_text_grad(text, d_x, d);
        }
        d_init
    }

    fn backward_suffix(&self, tape: &mut GradientTape, trace: &SuffixTrace, d_out: &[f64]) {
        let d = self.config.dim;
        match trace {
            SuffixTrace::Terminator => axpy(&mut tape.dense.terminator, 1.0, d_out),
            SuffixTrace::Example(text) => {
                axpy(&mut tape.dense.suffix_bias, 1.0, d_out);
                outer_acc(&mut tape.dense.suffix_weight, 0, d, d_out, &text.embedding);
                let mut d_text = vec![0.0; d];
                matvec_t_acc(&self.dense.suffix_weight, 0, d, d, d_out, &mut d_text);
                tape.add_text_grad(text, &d_text, d);
            }
        }
    }

    fn backward_prefix(&self, tape: &mut GradientTape, trace: &PrefixTrace, d_out: &[f64]) {
        let d = self.config.dim;
        match trace {
            PrefixTrace::Length { len, .. } => {
                axpy(&mut tape.dense.length_embed[len * d..(len + 1) * d], 1.0, d_out);
            }
            PrefixTrace::Recurrent(run) => {
                let mut d_finals = vec![vec![0.0; d]; run.layers.len()];
                if let Some(top) = d_finals.last_mut() {
                    top.copy_from_slice(d_out);
                }
                self.backward_run(tape, run, d_finals);
            }
        }
    }

    /// Scores a contrastive pair sharing `prefix`: both suffix heads after the prefix
    /// (an empty suffix has the terminator as head) and both complete sequences
    /// `prefix + suffix_j` with the terminator. The prefix is encoded once and extended.
    pub fn pair_forward(
        &self,
        query: Option<&Query>,
        prefix: &ExampleSequence,
        suffixes: [&[ExampleId]; 2],
        pool: &CandidatePool,
    ) -> Result<PairTrace> {
        for suffix in suffixes {
            for (i, &id) in suffix.iter().enumerate() {
                if id.is_terminator() || prefix.contains(id) || suffix[..i].contains(&id) {
                    return Err(Error::Invariant(format!(
                        "suffix element {id} repeats or terminates the sequence {prefix}"
                    )));
                }
            }
        }
        let base = self.prefix_trace(query, prefix, pool)?;
        let terminator = self.dense.terminator.clone();
        let mut heads = Vec::with_capacity(2);
        let mut fulls = Vec::with_capacity(2);
        for suffix in suffixes {
            let head = suffix.first().copied().unwrap_or(ExampleId::TERMINATOR);
            heads.push(self.suffix_trace(head, pool)?);
            fulls.push(match &base {
                PrefixTrace::Length { .. } => {
                    let mut all = prefix.elements().to_vec();
                    all.extend_from_slice(suffix);
                    Extension::Replace(self.length_trace(&all, pool)?)
                }
                PrefixTrace::Recurrent(run) => {
                    let inputs = suffix
                        .iter()
                        .map(|&id| Ok(self.text_trace(&pool.get(id)?.text())))
                        .collect::<Result<Vec<_>>>()?;
                    Extension::Continue(self.run(&run.finals, inputs))
                }
            });
        }
        let mut scores = [0.0; 4];
        for j in 0..2 {
            scores[j] = dot(base.output(), &heads[j].1);
            scores[2 + j] = dot(fulls[j].output(), &terminator);
        }
        let [h1, h2]: [(SuffixTrace, Vec<f64>); 2] = heads.try_into().expect("two heads");
        let [f1, f2]: [Extension; 2] = fulls.try_into().expect("two extensions");
        Ok(PairTrace {
            base,
            heads: [h1, h2],
            fulls: [f1, f2],
            terminator,
            scores,
        })
    }

    /// Adds `sum_k upstream[k] * d(scores[k])/d(theta)` to `tape`.
    pub fn pair_backward(&self, tape: &mut GradientTape, trace: &PairTrace, upstream: [f64; 4]) {
        let d = self.config.dim;
        let mut d_base = vec![0.0; d];
        let mut d_base_finals: Option<Vec<Vec<f64>>> = None;
        for j in 0..2 {
            let (suffix, suffix_out) = &trace.heads[j];
            if upstream[j] != 0.0 {
                let d_suffix: Vec<f64> = trace.base.output().iter().map(|v| v * upstream[j]).collect();
                self.backward_suffix(tape, suffix, &d_suffix);
                axpy(&mut d_base, upstream[j], suffix_out);
            }
            let u = upstream[2 + j];
            if u == 0.0 {
                continue;
            }
            let full = &trace.fulls[j];
            axpy(&mut tape.dense.terminator, u, full.output());
            let d_out: Vec<f64> = trace.terminator.iter().map(|v| v * u).collect();
            match full {
                Extension::Replace(t) => self.backward_prefix(tape, t, &d_out),
                Extension::Continue(run) => {
                    let mut d_finals = vec![vec![0.0; d]; run.layers.len()];
                    if let Some(top) = d_finals.last_mut() {
                        top.copy_from_slice(&d_out);
                    }
                    let d_init = self.backward_run(tape, run, d_finals);
                    match &mut d_base_finals {
                        Some(acc) => {
                            for (a, g) in acc.iter_mut().zip(&d_init) {
                                axpy(a, 1.0, g);
                            }
                        }
                        None => d_base_finals = Some(d_init),
                    }
                }
            }
        }
        match (&trace.base, d_base_finals) {
            (PrefixTrace::Recurrent(run), Some(mut finals)) => {
                if let Some(top) = finals.last_mut() {
                    axpy(top, 1.0, &d_base);
                }
                self.backward_run(tape, run, finals);
            }
            (base, _) => self.backward_prefix(tape, base, &d_base),
        }
    }
}

fn check_next(prefix: &ExampleSequence, next: ExampleId) -> Result<()> {
    if !next.is_terminator() && prefix.contains(next) {
        return Err(Error::Invariant(format!("{next} is already in the prefix {prefix}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct TraceKey {
    query: Option<ExampleId>,
    prefix: Vec<ExampleId>,
    next: ExampleId,
}

impl TraceKey {
    fn new(query: Option<&Query>, prefix: &ExampleSequence, next: ExampleId) -> Self {
        Self {
            query: query.map(|q| q.id),
            prefix: prefix.elements().to_vec(),
            next,
        }
    }
}

#[derive(Clone, Debug)]
struct TextTrace {
    buckets: Vec<usize>,
    embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
    h_out: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Run {
    inputs: Vec<TextTrace>,
    layers: Vec<Vec<StepCache>>,
    /// Last hidden state of every layer; the initial state when there are no inputs.
    finals: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
enum PrefixTrace {
    Length { len: usize, output: Vec<f64> },
    Recurrent(Run),
}

impl PrefixTrace {
    fn output(&self) -> &[f64] {
        match self {
            PrefixTrace::Length { output, .. } => output,
            PrefixTrace::Recurrent(run) => run.finals.last().expect("at least one layer"),
        }
    }
}

/// Encoding of a complete sequence that extends a shared prefix.
#[derive(Clone, Debug)]
enum Extension {
    Replace(PrefixTrace),
    Continue(Run),
}

impl Extension {
    fn output(&self) -> &[f64] {
        match self {
            Extension::Replace(t) => t.output(),
            Extension::Continue(run) => run.finals.last().expect("at least one layer"),
        }
    }
}

/// Activations of [`ScorerModel::pair_forward`].
#[derive(Clone, Debug)]
pub struct PairTrace {
    base: PrefixTrace,
    heads: [(SuffixTrace, Vec<f64>); 2],
    fulls: [Extension; 2],
    terminator: Vec<f64>,
    scores: [f64; 4],
}

impl PairTrace {
    /// `[head_1, head_2, complete_1, complete_2]` scores.
    pub fn scores(&self) -> [f64; 4] {
        self.scores
    }
}

#[derive(Clone, Debug)]
enum SuffixTrace {
    Terminator,
    Example(TextTrace),
}

#[derive(Clone, Debug)]
struct ScoreTrace {
    key: TraceKey,
    prefix: PrefixTrace,
    suffix: SuffixTrace,
    suffix_out: Vec<f64>,
}

/// Accumulated gradients, shaped like the model. Token-table rows are stored sparsely.
#[derive(Clone, Debug)]
pub struct GradientTape {
    token_rows: BTreeMap<usize, Vec<f64>>,
    dense: DenseParams,
    dim: usize,
    pending: Vec<ScoreTrace>,
}

impl GradientTape {
    pub fn new(model: &ScorerModel) -> Self {
        Self {
            token_rows: BTreeMap::new(),
            dense: DenseParams::zeros(&model.config),
            dim: model.config.dim,
            pending: Vec::new(),
        }
    }

    /// Clears gradients and any recorded forward passes.
    pub fn zero(&mut self) {
        self.token_rows.clear();
        for (_, t) in self.dense.slices_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        self.pending.clear();
    }

    pub fn grad(&self, p: ParamRef) -> f64 {
        match p.tensor {
            Tensor::TokenEmbed => {
                let (row, col) = (p.index / self.dim, p.index % self.dim);
                self.token_rows.get(&row).map_or(0.0, |r| r[col])
            }
            t => self.dense.get(t).expect("unknown tensor")[p.index],
        }
    }

    /// Touched token-table rows in ascending order.
    pub fn token_rows(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.token_rows.iter().map(|(&r, g)| (r, g.as_slice()))
    }

    pub fn dense(&self) -> &DenseParams {
        &self.dense
    }

    pub(crate) fn dense_mut(&mut self) -> &mut DenseParams {
        &mut self.dense
    }

    pub fn is_zero(&self) -> bool {
        self.token_rows.values().all(|r| r.iter().all(|&v| v == 0.0))
            && self
                .dense
                .slices()
                .iter()
                .all(|(_, t)| t.iter().all(|&v| v == 0.0))
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &GradientTape, weight: f64) {
        for (&row, g) in &other.token_rows {
            let dst = self
                .token_rows
                .entry(row)
                .or_insert_with(|| vec![0.0; self.dim]);
            axpy(dst, weight, g);
        }
        for ((_, dst), (_, src)) in self.dense.slices_mut().into_iter().zip(other.dense.slices()) {
            axpy(dst, weight, src);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.token_rows.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        for (_, t) in self.dense.slices_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.token_rows.values().all(|r| r.iter().all(|v| v.is_finite()))
            && self
                .dense
                .slices()
                .iter()
                .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Forward passes recorded but not yet consumed by `backward`.
    pub fn pending_forwards(&self) -> usize {
        self.pending.len()
    }

    fn add_text_grad(&mut self, text: &TextTrace, d_embedding: &[f64], d: usize) {
        if text.buckets.is_empty() {
            return;
        }
        let inv = 1.0 / text.buckets.len() as f64;
        for &b in &text.buckets {
            let row = self.token_rows.entry(b).or_insert_with(|| vec![0.0; d]);
            axpy(row, inv, d_embedding);
        }
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

fn gru_step(p: &GruParams, d: usize, x: Vec<f64>, h_prev: Vec<f64>) -> StepCache {
    // Update and reset gates.
    let mut a = p.bias[..2 * d].to_vec();
    matvec_acc(&p.w_input, 0, 2 * d, d, &x, &mut a);
    matvec_acc(&p.w_hidden, 0, 2 * d, d, &h_prev, &mut a);
    let z: Vec<f64> = a[..d].iter().map(|&v| sigmoid(v)).collect();
    let r: Vec<f64> = a[d..].iter().map(|&v| sigmoid(v)).collect();

    let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(r, h)| r * h).collect();
    let mut a_n = p.bias[2 * d..].to_vec();
    matvec_acc(&p.w_input, 2 * d, d, d, &x, &mut a_n);
    matvec_acc(&p.w_hidden, 2 * d, d, d, &rh, &mut a_n);
    let n: Vec<f64> = a_n.iter().map(|v| v.tanh()).collect();

    let h_out = (0..d)
        .map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i])
        .collect();
    StepCache {
        x,
        h_prev,
        z,
        r,
        n,
        rh,
        h_out,
    }
}

/// Backpropagates one step. Accumulates parameter gradients into `g`, input gradients
/// into `d_x`, and returns the gradient w.r.t. the previous hidden state.
fn gru_step_backward(
    p: &GruParams,
    g: &mut GruParams,
    d: usize,
    s: &StepCache,
    d_h: &[f64],
    d_x: &mut [f64],
) -> Vec<f64> {
    let mut d_prev: Vec<f64> = (0..d).map(|i| d_h[i] * s.z[i]).collect();
    let d_an: Vec<f64> = (0..d)
        .map(|i| d_h[i] * (1.0 - s.z[i]) * (1.0 - s.n[i] * s.n[i]))
        .collect();
    let d_az: Vec<f64> = (0..d)
        .map(|i| d_h[i] * (s.h_prev[i] - s.n[i]) * s.z[i] * (1.0 - s.z[i]))
        .collect();

    // Candidate path.
    axpy(&mut g.bias[2 * d..], 1.0, &d_an);
    outer_acc(&mut g.w_input, 2 * d, d, &d_an, &s.x);
    outer_acc(&mut g.w_hidden, 2 * d, d, &d_an, &s.rh);
    matvec_t_acc(&p.w_input, 2 * d, d, d, &d_an, d_x);
    let mut d_rh = vec![0.0; d];
    matvec_t_acc(&p.w_hidden, 2 * d, d, d, &d_an, &mut d_rh);
    let d_ar: Vec<f64> = (0..d)
        .map(|i| d_rh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]))
        .collect();
    for i in 0..d {
        d_prev[i] += d_rh[i] * s.r[i];
    }

    // Gates, stacked [update; reset] in rows 0..2d.
    let mut d_gates = d_az;
    d_gates.extend_from_slice(&d_ar);
    axpy(&mut g.bias[..2 * d], 1.0, &d_gates);
    outer_acc(&mut g.w_input, 0, d, &d_gates, &s.x);
    outer_acc(&mut g.w_hidden, 0, d, &d_gates, &s.h_prev);
    matvec_t_acc(&p.w_input, 0, 2 * d, d, &d_gates, d_x);
    matvec_t_acc(&p.w_hidden, 0, 2 * d, d, &d_gates, &mut d_prev);
    d_prev
}

/// Four interleaved partial sums, so the loop vectorizes; the summation order is fixed.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

/// `out[i] += sum_j w[(row0 + i) * cols + j] * x[j]` for `i < rows`.
fn matvec_acc(w: &[f64], row0: usize, rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let row = &w[(row0 + i) * cols..(row0 + i + 1) * cols];
        out[i] += dot(row, x);
    }
}

/// `out[j] += sum_i w[(row0 + i) * cols + j] * dy[i]` for `i < rows`.
fn matvec_t_acc(w: &[f64], row0: usize, rows: usize, cols: usize, dy: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        if dy[i] == 0.0 {
            continue;
        }
        let row = &w[(row0 + i) * cols..(row0 + i + 1) * cols];
        axpy(out, dy[i], row);
    }
}

/// `g[(row0 + i) * cols + j] += dy[i] * x[j]`.
fn outer_acc(g: &mut [f64], row0: usize, cols: usize, dy: &[f64], x: &[f64]) {
    for (i, &v) in dy.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        axpy(&mut g[(row0 + i) * cols..(row0 + i + 1) * cols], v, x);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Example;

    fn small_config() -> ModelConfig {
        ModelConfig {
            vocab_buckets: 97,
            dim: 6,
            num_layers: 1,
            max_len: 4,
            prefix_mode: PrefixMode::Dynamic,
            init_scale: 0.5,
            ..Default::default()
        }
    }

    fn pool() -> CandidatePool {
        let ex = |id: u32, input: &str, label: &str| Example {
            id: ExampleId(id),
            input: input.into(),
            label: label.into(),
            skills: vec![],
        };
        CandidatePool::new(vec![
            ex(0, "alpha beta", "yes"),
            ex(1, "gamma delta", "no"),
            ex(2, "alpha beta", "yes"),
            ex(3, "epsilon", "maybe"),
        ])
        .unwrap()
    }

    fn query() -> Query {
        Query {
            id: ExampleId(100),
            input: "which greek letter".into(),
            label: Some("alpha".into()),
            skills: vec![],
        }
    }

    fn seq(ids: &[u32]) -> ExampleSequence {
        let ids: Vec<_> = ids.iter().map(|&i| ExampleId(i)).collect();
        ExampleSequence::from_ids(&ids, 7).unwrap()
    }

    #[test]
    fn empty_text_is_zero() {
        let m = ScorerModel::new(small_config(), 1).unwrap();
        assert_eq!(m.embed_text(" ,. "), Embedding::zeros(6));
    }

    #[test]
    fn repeated_word_equals_single() {
        let m = ScorerModel::new(small_config(), 1).unwrap();
        let a = m.embed_text("word word");
        let b = m.embed_text("word");
        for (x, y) in a.0.iter().zip(&b.0) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn embedding_is_deterministic() {
        let m = ScorerModel::new(small_config(), 1).unwrap();
        let a = m.embed_text("some text here");
        let b = m.embed_text("some text here");
        assert_eq!(
            a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(m, ScorerModel::new(small_config(), 1).unwrap());
    }

    #[test]
    fn terminator_suffix_is_learned_vector() {
        let m = ScorerModel::new(small_config(), 3).unwrap();
        let s = m.encode_suffix(ExampleId::TERMINATOR, &pool()).unwrap();
        assert_eq!(s.0, m.dense().terminator);
    }

    #[test]
    fn identical_text_identical_suffix() {
        let m = ScorerModel::new(small_config(), 3).unwrap();
        let p = pool();
        assert_eq!(
            m.encode_suffix(ExampleId(0), &p).unwrap(),
            m.encode_suffix(ExampleId(2), &p).unwrap()
        );
    }

    #[test]
    fn empty_prefix_with_query_is_finite() {
        let m = ScorerModel::new(small_config(), 3).unwrap();
        let h = m.encode_prefix(Some(&query()), &ExampleSequence::empty(), &pool()).unwrap();
        assert!(h.is_finite());
        assert!(h.0.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unknown_id_is_lookup_error() {
        let m = ScorerModel::new(small_config(), 3).unwrap();
        let p = pool();
        assert!(matches!(m.encode_suffix(ExampleId(9), &p), Err(Error::Lookup(_))));
        let bad = ExampleSequence::from_ids(&[ExampleId(9)], 7).unwrap();
        assert!(matches!(m.encode_prefix(None, &bad, &p), Err(Error::Lookup(_))));
    }

    #[test]
    fn duplicate_next_rejected() {
        let m = ScorerModel::new(small_config(), 3).unwrap();
        assert!(matches!(
            m.score(Some(&query()), &seq(&[1]), ExampleId(1), &pool()),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn score_matches_separate_encoders() {
        let m = ScorerModel::new(small_config(), 5).unwrap();
        let p = pool();
        let q = query();
        let pre = seq(&[1]);
        let s = m.score(Some(&q), &pre, ExampleId(2), &p).unwrap();
        let manual = m
            .encode_prefix(Some(&q), &pre, &p)
            .unwrap()
            .dot(&m.encode_suffix(ExampleId(2), &p).unwrap());
        assert!((s - manual).abs() <= 1e-12);
    }

    #[test]
    fn zero_suffix_scores_zero() {
        let mut m = ScorerModel::new(small_config(), 5).unwrap();
        m.dense_mut().terminator.iter_mut().for_each(|v| *v = 0.0);
        let s = m.score(Some(&query()), &seq(&[0, 1]), ExampleId::TERMINATOR, &pool()).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn score_is_linear_in_suffix_embedding() {
        let mut m = ScorerModel::new(small_config(), 5).unwrap();
        let p = pool();
        let q = query();
        let pre = seq(&[3]);
        let u: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let v: Vec<f64> = (0..6).map(|i| 0.3 - 0.05 * i as f64).collect();
        let mut at = |t: &[f64]| {
            m.dense_mut().terminator.copy_from_slice(t);
            m.score(Some(&q), &pre, ExampleId::TERMINATOR, &p).unwrap()
        };
        let su = at(&u);
        let sv = at(&v);
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        let suv = at(&sum);
        assert!((suv - (su + sv)).abs() < 1e-12);
    }

    #[test]
    fn static_mode_ignores_query() {
        let cfg = ModelConfig {
            prefix_mode: PrefixMode::Static,
            ..small_config()
        };
        let m = ScorerModel::new(cfg, 2).unwrap();
        let p = pool();
        let mut other = query();
        other.input = "completely different words".into();
        let a = m.encode_prefix(Some(&query()), &seq(&[0, 3]), &p).unwrap();
        let b = m.encode_prefix(Some(&other), &seq(&[0, 3]), &p).unwrap();
        let c = m.encode_prefix(None, &seq(&[0, 3]), &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn length_only_depends_on_length() {
        let cfg = ModelConfig {
            prefix_mode: PrefixMode::LengthOnly,
            ..small_config()
        };
        let m = ScorerModel::new(cfg, 2).unwrap();
        let p = pool();
        let a = m.encode_prefix(Some(&query()), &seq(&[0, 3]), &p).unwrap();
        let b = m.encode_prefix(None, &seq(&[3, 1]), &p).unwrap();
        let c = m.encode_prefix(None, &seq(&[3]), &p).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let m = ScorerModel::new(small_config(), 2).unwrap();
        let mut tape = GradientTape::new(&m);
        let r = m.backward(&mut tape, None, &seq(&[0]), ExampleId(1), &pool(), 1.0);
        assert!(matches!(r, Err(Error::State(_))));
    }

    #[test]
    fn zero_upstream_leaves_tape_unchanged() {
        let m = ScorerModel::new(small_config(), 2).unwrap();
        let p = pool();
        let q = query();
        let mut tape = GradientTape::new(&m);
        m.forward(&mut tape, Some(&q), &seq(&[0]), ExampleId(1), &p).unwrap();
        m.backward(&mut tape, Some(&q), &seq(&[0]), ExampleId(1), &p, 0.0).unwrap();
        assert!(tape.is_zero());
        assert_eq!(tape.pending_forwards(), 0);
    }

    #[test]
    fn accumulation_is_additive() {
        let m = ScorerModel::new(small_config(), 2).unwrap();
        let p = pool();
        let q = query();
        let pre = seq(&[0, 3]);
        let run = |grads: &[f64]| {
            let mut tape = GradientTape::new(&m);
            for &g in grads {
                m.forward(&mut tape, Some(&q), &pre, ExampleId(1), &p).unwrap();
                m.backward(&mut tape, Some(&q), &pre, ExampleId(1), &p, g).unwrap();
            }
            tape
        };
        let two = run(&[0.7, -1.9]);
        let one = run(&[0.7 - 1.9]);
        for (t, _) in m.tensors() {
            let len = m.tensor(t).unwrap().len();
            for index in 0..len {
                let r = ParamRef { tensor: t, index };
                assert!((two.grad(r) - one.grad(r)).abs() < 1e-12, "{t:?}[{index}]");
            }
        }
    }

    #[test]
    fn pair_path_matches_separate_passes() {
        let p = pool();
        let q = query();
        let id = |v: &[u32]| v.iter().map(|&i| ExampleId(i)).collect::<Vec<_>>();
        let cases = [(vec![0], id(&[1, 3]), id(&[2])), (vec![], id(&[3]), id(&[])), (vec![2, 1], id(&[]), id(&[0]))];
        for mode in [PrefixMode::Dynamic, PrefixMode::Static, PrefixMode::LengthOnly] {
            for layers in [1, 2] {
                let cfg = ModelConfig {
                    num_layers: layers,
                    prefix_mode: mode,
                    ..small_config()
                };
                let m = ScorerModel::new(cfg, 5).unwrap();
                for (pre, s1, s2) in &cases {
                    let pre = seq(pre);
                    let up = [0.3, -1.1, 0.8, 0.45];
                    let trace = m.pair_forward(Some(&q), &pre, [s1, s2], &p).unwrap();
                    let mut shared = GradientTape::new(&m);
                    m.pair_backward(&mut shared, &trace, up);

                    let mut separate = GradientTape::new(&m);
                    let bot = ExampleId::TERMINATOR;
                    let full = |s: &[ExampleId]| {
                        let mut all = pre.elements().to_vec();
                        all.extend_from_slice(s);
                        ExampleSequence::from_ids(&all, usize::MAX).unwrap()
                    };
                    let calls = [
                        (pre.clone(), s1.first().copied().unwrap_or(bot)),
                        (pre.clone(), s2.first().copied().unwrap_or(bot)),
                        (full(s1), bot),
                        (full(s2), bot),
                    ];
                    for (k, (prefix, next)) in calls.iter().enumerate() {
                        let s = m.forward(&mut separate, Some(&q), prefix, *next, &p).unwrap();
                        assert!((s - trace.scores()[k]).abs() < 1e-12);
                        m.backward(&mut separate, Some(&q), prefix, *next, &p, up[k]).unwrap();
                    }
                    for (t, values) in m.tensors() {
                        for index in 0..values.len() {
                            let r = ParamRef { tensor: t, index };
                            assert!((shared.grad(r) - separate.grad(r)).abs() < 1e-12, "{mode:?} {t:?}[{index}]");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = ScorerModel::new(small_config(), 2).unwrap();
        let mut dense = m.dense().clone();
        dense.suffix_bias.pop();
        assert!(matches!(
            ScorerModel::from_parts(small_config(), m.token_embed().to_vec(), dense),
            Err(Error::Checkpoint(_))
        ));
    }
}
