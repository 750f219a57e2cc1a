//! Shared backbone, autoregressive token head and step-level value head.
//!
//! The backbone maps an [`Observation`] (stacked one-hot frames plus
//! instruction tokens) to a feature vector. The token head is a gated
//! recurrence seeded from those features; it is causal by construction.
//! The value head reads the features through a gradient barrier, so value
//! regression never moves backbone parameters unless explicitly configured.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("observation mismatch: {0}")]
    Observation(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("malformed token sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const SEP: usize = 2;
pub const PAD: usize = 3;

/// Ordered token inventory; ids 0..4 are BOS, EOS, SEP, PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(extra: &[S]) -> Result<Self, PolicyError> {
        let mut tokens: Vec<String> = ["<bos>", "<eos>", "<sep>", "<pad>"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for t in extra {
            let t = t.as_ref().to_string();
            if tokens.contains(&t) {
                return Err(PolicyError::Sequence(format!("duplicate token {t:?}")));
            }
            tokens.push(t);
        }
        Ok(Self { tokens })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    /// Panics on unknown tokens; for grammar tables built from the same list.
    pub fn expect_id(&self, token: &str) -> usize {
        self.id(token)
            .unwrap_or_else(|| panic!("token {token:?} not in vocabulary"))
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids of tokens whose text starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.starts_with(prefix))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Layout of the stacked frame tensor `[L, C, H, W]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObsDims {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ObsDims {
    pub fn cells_per_frame(&self) -> usize {
        self.height * self.width
    }

    pub fn flat_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }
}

/// Agent state tuple: stacked frames plus context tokens.
///
/// Frames are stored compactly as the active channel of each cell; the
/// one-hot expansion is produced on demand.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    pub dims: ObsDims,
    /// `frames * height * width` channel indices, frame-major, oldest first.
    pub cells: Vec<u8>,
    pub context_tokens: Vec<usize>,
}

impl Observation {
    pub fn validate(&self, expect: &ObsDims) -> Result<(), PolicyError> {
        if self.dims != *expect {
            return Err(PolicyError::Observation(format!(
                "dims {:?}, expected {:?}",
                self.dims, expect
            )));
        }
        if self.cells.len() != expect.frames * expect.cells_per_frame() {
            return Err(PolicyError::Observation(format!(
                "{} cells for dims {:?}",
                self.cells.len(),
                expect
            )));
        }
        if let Some(c) = self.cells.iter().find(|&&c| c as usize >= expect.channels) {
            return Err(PolicyError::Observation(format!(
                "channel {c} >= {}",
                expect.channels
            )));
        }
        Ok(())
    }

    /// Dense `[L, C, H, W]` one-hot frames.
    pub fn one_hot(&self) -> Vec<f64> {
        let d = self.dims;
        let hw = d.cells_per_frame();
        let mut out = vec![0.0; d.flat_len()];
        for l in 0..d.frames {
            for cell in 0..hw {
                let c = self.cells[l * hw + cell] as usize;
                out[(l * d.channels + c) * hw + cell] = 1.0;
            }
        }
        out
    }

    /// 64-bit FNV-1a digest of frames and context.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for &c in &self.cells {
            eat(c);
        }
        eat(0xff);
        for &t in &self.context_tokens {
            for b in (t as u64).to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// A generated token sequence with its thought/action partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionEmission {
    /// Begins with BOS.
    pub tokens: Vec<usize>,
    /// Generated tokens before SEP (all generated tokens if no SEP).
    pub thought_span: Range<usize>,
    /// Generated tokens after SEP, including a terminating EOS.
    pub action_span: Range<usize>,
    /// `logprobs[j]` scores `tokens[j + 1]`.
    pub logprobs: Vec<f64>,
    /// Full next-token distribution at each generated position.
    pub dists: Vec<Vec<f64>>,
    pub truncated: bool,
}

impl ActionEmission {
    /// Splits a BOS-prefixed sequence into thought and action spans.
    pub fn spans(tokens: &[usize]) -> (Range<usize>, Range<usize>) {
        let end = tokens.len();
        match tokens.iter().skip(1).position(|&t| t == SEP) {
            Some(p) => {
                let sep = p + 1;
                (1..sep, sep + 1..end)
            }
            None => (1..end, end..end),
        }
    }

    pub fn sep_index(&self) -> Option<usize> {
        if self.action_span.start > self.thought_span.end {
            Some(self.thought_span.end)
        } else {
            None
        }
    }

    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub value_hidden: usize,
    pub max_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            embed_dim: 32,
            head_hidden: 64,
            value_hidden: 64,
            max_tokens: 12,
        }
    }
}

/// Parameter indices inside the [`ParamSet`], in binding order.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Slots {
    frame_w: usize,
    frame_b: usize,
    ctx_emb: usize,
    mix_w: usize,
    mix_b: usize,
    init_w: usize,
    init_b: usize,
    feat_w: usize,
    tok_emb: usize,
    pos_emb: usize,
    xz_w: usize,
    hz_w: usize,
    z_b: usize,
    xc_w: usize,
    hc_w: usize,
    c_b: usize,
    out_w: usize,
    out_b: usize,
    state_out: usize,
    v_w1: usize,
    v_b1: usize,
    v_w2: usize,
    v_b2: usize,
}

/// Prefix of parameter names belonging to the value head (phi).
pub const VALUE_PREFIX: &str = "value.";
/// Prefix of backbone-encoder parameter names.
pub const BACKBONE_PREFIX: &str = "bb.";

/// Actor-critic policy. Parameters whose name starts with `value.` form the
/// value head; everything else is the backbone plus token head.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    vocab: Arc<Vocabulary>,
    dims: ObsDims,
    params: ParamSet,
    slots: Slots,
}

/// Differentiable outputs for one environment step.
#[derive(Debug, Clone)]
pub struct StepForward {
    pub features: Var,
    /// Per generated position, `[1, V]` probabilities.
    pub probs: Vec<Var>,
    /// Per generated position, scalar log-probability of the emitted token.
    pub token_logps: Vec<Var>,
    pub value: Option<Var>,
}

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init shape").with_grad()
}

fn zeros_param(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

impl Policy {
    pub fn new(config: PolicyConfig, vocab: Arc<Vocabulary>, dims: ObsDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, e, h, hv, v) = (
            config.feature_dim,
            config.embed_dim,
            config.head_hidden,
            config.value_hidden,
            vocab.size(),
        );
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        // Only L*H*W inputs of the one-hot frame vector are ever active.
        let active = dims.frames * dims.cells_per_frame();
        let mut ps = ParamSet::new();
        let add = |ps: &mut ParamSet, name: &str, t: Tensor| ps.push(name, t);
        let slots = Slots {
            frame_w: add(&mut ps, "bb.frame_w", uniform_init(&mut rng, vec![dims.flat_len(), d], glorot(active, d))),
            frame_b: add(&mut ps, "bb.frame_b", zeros_param(vec![1, d])),
            ctx_emb: add(&mut ps, "bb.ctx_emb", uniform_init(&mut rng, vec![v, e], 0.5)),
            mix_w: add(&mut ps, "bb.mix_w", uniform_init(&mut rng, vec![d + e, d], glorot(d + e, d))),
            mix_b: add(&mut ps, "bb.mix_b", zeros_param(vec![1, d])),
            init_w: add(&mut ps, "head.init_w", uniform_init(&mut rng, vec![d, h], glorot(d, h))),
            init_b: add(&mut ps, "head.init_b", zeros_param(vec![1, h])),
            feat_w: add(&mut ps, "head.feat_w", uniform_init(&mut rng, vec![d, e], glorot(d, e))),
            tok_emb: add(&mut ps, "head.tok_emb", uniform_init(&mut rng, vec![v, e], 0.5)),
            pos_emb: add(&mut ps, "head.pos_emb", uniform_init(&mut rng, vec![config.max_tokens, e], 0.5)),
            xz_w: add(&mut ps, "head.xz_w", uniform_init(&mut rng, vec![e, h], glorot(e, h))),
            hz_w: add(&mut ps, "head.hz_w", uniform_init(&mut rng, vec![h, h], glorot(h, h))),
            z_b: add(&mut ps, "head.z_b", zeros_param(vec![1, h])),
            xc_w: add(&mut ps, "head.xc_w", uniform_init(&mut rng, vec![e, h], glorot(e, h))),
            hc_w: add(&mut ps, "head.hc_w", uniform_init(&mut rng, vec![h, h], glorot(h, h))),
            c_b: add(&mut ps, "head.c_b", zeros_param(vec![1, h])),
            out_w: add(&mut ps, "head.out_w", uniform_init(&mut rng, vec![h, v], 0.1 * glorot(h, v))),
            out_b: add(&mut ps, "head.out_b", zeros_param(vec![1, v])),
            state_out: add(&mut ps, "head.state_out", uniform_init(&mut rng, vec![d, v], glorot(d, v))),
            v_w1: add(&mut ps, "value.w1", uniform_init(&mut rng, vec![d, hv], glorot(d, hv))),
            v_b1: add(&mut ps, "value.b1", zeros_param(vec![1, hv])),
            v_w2: add(&mut ps, "value.w2", zeros_param(vec![hv, 1])),
            v_b2: add(&mut ps, "value.b2", zeros_param(vec![1, 1])),
        };
        Self {
            config,
            vocab,
            dims,
            params: ps,
            slots,
        }
    }

    /// Rebuilds a policy around an existing parameter set (checkpoint load).
    pub fn from_params(
        config: PolicyConfig,
        vocab: Arc<Vocabulary>,
        dims: ObsDims,
        params: ParamSet,
    ) -> Result<Self, PolicyError> {
        let template = Policy::new(config, Arc::clone(&vocab), dims, 0);
        if template.params.names() != params.names() {
            return Err(PolicyError::Observation("parameter names do not match architecture".into()));
        }
        for (a, b) in template.params.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(PolicyError::Observation(format!(
                    "parameter shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self {
            params,
            ..template
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn dims(&self) -> ObsDims {
        self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Indices of value-head parameters.
    pub fn value_param_indices(&self) -> Vec<usize> {
        self.params
            .names()
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with(VALUE_PREFIX))
            .map(|(i, _)| i)
            .collect()
    }

    /// Frozen, independent copy (the behaviour policy for a rollout phase).
    pub fn snapshot(&self) -> Policy {
        Policy {
            config: self.config,
            vocab: Arc::clone(&self.vocab),
            dims: self.dims,
            params: self.params.frozen(),
            slots: self.slots,
        }
    }

    /// Frozen copy whose value head is replaced by `head` (in
    /// [`Policy::value_param_indices`] order).
    pub fn with_value_head(&self, head: &[Tensor]) -> Policy {
        let mut p = self.snapshot();
        for (i, t) in self.value_param_indices().into_iter().zip(head) {
            let dst = p.params.get_mut(i);
            dst.data_mut().copy_from_slice(t.data());
        }
        p
    }

    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Backbone features for `obs`, shape `[1, D]`.
    pub fn encode_state(&self, tape: &mut Tape, p: &[Var], obs: &Observation) -> Result<Var, PolicyError> {
        obs.validate(&self.dims)?;
        let s = &self.slots;
        let v = self.vocab.size();
        if let Some(&bad) = obs.context_tokens.iter().find(|&&t| t >= v) {
            return Err(PolicyError::Vocab { id: bad, size: v });
        }
        let x = tape.constant(vec![1, self.dims.flat_len()], obs.one_hot())?;
        let h = tape.matmul(x, p[s.frame_w])?;
        let h = tape.add(h, p[s.frame_b])?;
        let h = tape.tanh(h);
        let ctx = if obs.context_tokens.is_empty() {
            tape.constant(vec![1, self.config.embed_dim], vec![0.0; self.config.embed_dim])?
        } else {
            let rows = tape.gather_rows(p[s.ctx_emb], &obs.context_tokens)?;
            let k = obs.context_tokens.len();
            let pool = tape.constant(vec![1, k], vec![1.0 / k as f64; k])?;
            tape.matmul(pool, rows)?
        };
        let hc = tape.concat_cols(h, ctx)?;
        let f = tape.matmul(hc, p[s.mix_w])?;
        let f = tape.add(f, p[s.mix_b])?;
        Ok(tape.tanh(f))
    }

    /// Initial recurrent state, the state projection added to every token
    /// input, and the state's direct contribution to every logit row.
    fn initial_hidden(&self, tape: &mut Tape, p: &[Var], features: Var) -> Result<(Var, Var, Var), PolicyError> {
        let s = &self.slots;
        let h = tape.matmul(features, p[s.init_w])?;
        let h = tape.add(h, p[s.init_b])?;
        let fx = tape.matmul(features, p[s.feat_w])?;
        let fo = tape.matmul(features, p[s.state_out])?;
        Ok((tape.tanh(h), fx, fo))
    }

    /// One recurrence step consuming `token` at `position`.
    fn advance(&self, tape: &mut Tape, p: &[Var], h: Var, fx: Var, token: usize, position: usize) -> Result<Var, PolicyError> {
        let s = &self.slots;
        let v = self.vocab.size();
        if token >= v {
            return Err(PolicyError::Vocab { id: token, size: v });
        }
        if position >= self.config.max_tokens {
            return Err(PolicyError::Sequence(format!(
                "position {position} beyond max_tokens {}",
                self.config.max_tokens
            )));
        }
        let te = tape.gather_rows(p[s.tok_emb], &[token])?;
        let pe = tape.gather_rows(p[s.pos_emb], &[position])?;
        let x = tape.add(te, pe)?;
        let x = tape.add(x, fx)?;
        let xz = tape.matmul(x, p[s.xz_w])?;
        let hz = tape.matmul(h, p[s.hz_w])?;
        let z = tape.add(xz, hz)?;
        let z = tape.add(z, p[s.z_b])?;
        let z = tape.sigmoid(z);
        let xc = tape.matmul(x, p[s.xc_w])?;
        let hc = tape.matmul(h, p[s.hc_w])?;
        let c = tape.add(xc, hc)?;
        let c = tape.add(c, p[s.c_b])?;
        let c = tape.tanh(c);
        let diff = tape.sub(c, h)?;
        let upd = tape.mul(z, diff)?;
        Ok(tape.add(h, upd)?)
    }

    fn logits(&self, tape: &mut Tape, p: &[Var], h: Var, fo: Var) -> Result<Var, PolicyError> {
        let s = &self.slots;
        let l = tape.matmul(h, p[s.out_w])?;
        let l = tape.add(l, p[s.out_b])?;
        Ok(tape.add(l, fo)?)
    }

    /// Next-token logits given features and a BOS-prefixed prefix.
    pub fn token_step(&self, features: &[f64], prefix: &[usize]) -> Result<Vec<f64>, PolicyError> {
        if prefix.first() != Some(&BOS) {
            return Err(PolicyError::Sequence("prefix must begin with BOS".into()));
        }
        if prefix.len() >= self.config.max_tokens {
            return Err(PolicyError::Sequence("prefix reaches max_tokens".into()));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = tape.constant(vec![1, self.config.feature_dim], features.to_vec())?;
        let (mut h, fx, fo) = self.initial_hidden(&mut tape, &p, f)?;
        for (i, &t) in prefix.iter().enumerate() {
            h = self.advance(&mut tape, &p, h, fx, t, i)?;
        }
        let l = self.logits(&mut tape, &p, h, fo)?;
        Ok(tape.value(l).to_vec())
    }

    /// Features as a plain vector (inference only).
    pub fn features(&self, obs: &Observation) -> Result<Vec<f64>, PolicyError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = self.encode_state(&mut tape, &p, obs)?;
        Ok(tape.value(f).to_vec())
    }

    /// Value head on gradient-blocked (or, if `stop_grad` is false, live) features.
    pub fn value_on(&self, tape: &mut Tape, p: &[Var], features: Var, stop_grad: bool) -> Result<Var, PolicyError> {
        let s = &self.slots;
        let f = if stop_grad { tape.stop_grad(features) } else { features };
        let h = tape.matmul(f, p[s.v_w1])?;
        let h = tape.add(h, p[s.v_b1])?;
        let h = tape.tanh(h);
        let v = tape.matmul(h, p[s.v_w2])?;
        let v = tape.add(v, p[s.v_b2])?;
        Ok(tape.sum(v))
    }

    pub fn value(&self, obs: &Observation) -> Result<f64, PolicyError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let f = self.encode_state(&mut tape, &p, obs)?;
        let v = self.value_on(&mut tape, &p, f, true)?;
        Ok(tape.scalar_value(v))
    }

    /// Teacher-forced differentiable pass over an emitted sequence.
    pub fn forward_step(
        &self,
        tape: &mut Tape,
        p: &[Var],
        obs: &Observation,
        tokens: &[usize],
        with_value: bool,
        stop_grad: bool,
    ) -> Result<StepForward, PolicyError> {
        if tokens.first() != Some(&BOS) || tokens.len() < 2 {
            return Err(PolicyError::Sequence(
                "expected BOS followed by at least one generated token".into(),
            ));
        }
        if tokens.len() > self.config.max_tokens {
            return Err(PolicyError::Sequence(format!(
                "{} tokens exceed max_tokens {}",
                tokens.len(),
                self.config.max_tokens
            )));
        }
        let features = self.encode_state(tape, p, obs)?;
        let (mut h, fx, fo) = self.initial_hidden(tape, p, features)?;
        let mut probs = Vec::with_capacity(tokens.len() - 1);
        let mut token_logps = Vec::with_capacity(tokens.len() - 1);
        for i in 0..tokens.len() - 1 {
            h = self.advance(tape, p, h, fx, tokens[i], i)?;
            let l = self.logits(tape, p, h, fo)?;
            let pr = tape.softmax_rows(l);
            let lp = tape.log(pr);
            let g = tape.gather_index(lp, &[tokens[i + 1]])?;
            token_logps.push(tape.sum(g));
            probs.push(pr);
        }
        let value = if with_value {
            Some(self.value_on(tape, p, features, stop_grad)?)
        } else {
            None
        };
        Ok(StepForward {
            features,
            probs,
            token_logps,
            value,
        })
    }

    /// Per-token log-probabilities and distributions of `tokens` under this policy.
    pub fn action_logprob(&self, obs: &Observation, tokens: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>), PolicyError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let fw = self.forward_step(&mut tape, &p, obs, tokens, false, true)?;
        let lps = fw.token_logps.iter().map(|&v| tape.scalar_value(v)).collect();
        let dists = fw.probs.iter().map(|&v| tape.value(v).to_vec()).collect();
        Ok((lps, dists))
    }

    fn decode(
        &self,
        obs: &Observation,
        max_tokens: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> Result<ActionEmission, PolicyError> {
        let max_tokens = max_tokens.min(self.config.max_tokens);
        if max_tokens < 3 {
            return Err(PolicyError::Sequence("max_tokens must be at least 3".into()));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let features = self.encode_state(&mut tape, &p, obs)?;
        let (mut h, fx, fo) = self.initial_hidden(&mut tape, &p, features)?;
        let mut tokens = vec![BOS];
        let mut logprobs = Vec::new();
        let mut dists = Vec::new();
        let mut truncated = true;
        while tokens.len() < max_tokens {
            let i = tokens.len() - 1;
            h = self.advance(&mut tape, &p, h, fx, tokens[i], i)?;
            let l = self.logits(&mut tape, &p, h, fo)?;
            let pr = tape.softmax_rows(l);
            let lp = tape.log(pr);
            let dist = tape.value(pr).to_vec();
            let tok = pick(&dist);
            logprobs.push(tape.value(lp)[tok]);
            dists.push(dist);
            tokens.push(tok);
            if tok == EOS {
                truncated = false;
                break;
            }
        }
        let (thought_span, action_span) = ActionEmission::spans(&tokens);
        Ok(ActionEmission {
            tokens,
            thought_span,
            action_span,
            logprobs,
            dists,
            truncated,
        })
    }

    /// Samples at temperature 1 until EOS or `max_tokens` total tokens.
    pub fn sample_action(&self, obs: &Observation, rng: &mut impl Rng, max_tokens: usize) -> Result<ActionEmission, PolicyError> {
        self.decode(obs, max_tokens, |dist| sample_categorical(dist, rng.gen::<f64>()))
    }

    /// Greedy (argmax) decoding; ties resolve to the lowest id.
    pub fn greedy_action(&self, obs: &Observation, max_tokens: usize) -> Result<ActionEmission, PolicyError> {
        self.decode(obs, max_tokens, argmax)
    }
}

/// Inverse-CDF draw from `dist` with uniform variate `u` in [0, 1).
pub fn sample_categorical(dist: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in dist.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the final cumulative sum
    dist.iter().rposition(|&p| p > 0.0).unwrap_or(dist.len() - 1)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Policy {
        let vocab = Arc::new(Vocabulary::new(&["t0", "t1", "forward", "turn_left", "go"]).unwrap());
        let dims = ObsDims {
            frames: 2,
            channels: 3,
            height: 1,
            width: 4,
        };
        let cfg = PolicyConfig {
            feature_dim: 8,
            embed_dim: 4,
            head_hidden: 6,
            value_hidden: 5,
            max_tokens: 8,
        };
        Policy::new(cfg, vocab, dims, 7)
    }

    fn obs(p: &Policy, cells: Vec<u8>) -> Observation {
        Observation {
            dims: p.dims(),
            cells,
            context_tokens: vec![8],
        }
    }

    fn base_obs(p: &Policy) -> Observation {
        obs(p, vec![0, 1, 2, 0, 0, 1, 2, 0])
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(&["a", "a"]).is_err());
        assert!(Vocabulary::new(&["<sep>"]).is_err());
    }

    #[test]
    fn one_hot_has_unit_channel_sums() {
        let p = tiny();
        let o = base_obs(&p);
        let x = o.one_hot();
        let d = o.dims;
        for l in 0..d.frames {
            for cell in 0..d.cells_per_frame() {
                let s: f64 = (0..d.channels)
                    .map(|c| x[(l * d.channels + c) * d.cells_per_frame() + cell])
                    .sum();
                assert_eq!(s, 1.0);
            }
        }
    }

    #[test]
    fn encode_is_deterministic_and_frame_order_sensitive() {
        let p = tiny();
        let a = p.features(&base_obs(&p)).unwrap();
        let b = p.features(&base_obs(&p)).unwrap();
        assert_eq!(a, b);
        let swapped = obs(&p, vec![0, 1, 2, 0, 0, 0, 0, 0]);
        let swapped_rev = obs(&p, vec![0, 0, 0, 0, 0, 1, 2, 0]);
        assert_ne!(p.features(&swapped).unwrap(), p.features(&swapped_rev).unwrap());
    }

    #[test]
    fn zero_backbone_gives_zero_features() {
        let mut p = tiny();
        for (i, name) in p.params().names().to_vec().iter().enumerate() {
            if name.starts_with(BACKBONE_PREFIX) {
                p.params_mut().get_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        assert!(p.features(&base_obs(&p)).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_observation_rejected() {
        let p = tiny();
        let mut o = base_obs(&p);
        o.cells.pop();
        assert!(matches!(p.features(&o), Err(PolicyError::Observation(_))));
        let mut o = base_obs(&p);
        o.dims.frames = 3;
        assert!(p.features(&o).is_err());
    }

    #[test]
    fn zero_output_layer_is_uniform() {
        let mut p = tiny();
        for name in ["head.out_w", "head.out_b", "head.state_out"] {
            let i = p.params().index_of(name).unwrap();
            p.params_mut().get_mut(i).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let f = p.features(&base_obs(&p)).unwrap();
        let logits = p.token_step(&f, &[BOS, 4]).unwrap();
        let mut probs = vec![0.0; logits.len()];
        crate::diffcore::softmax_into(&logits, &mut probs);
        let v = p.vocab().size() as f64;
        assert!(probs.iter().all(|&q| (q - 1.0 / v).abs() < 1e-15));
    }

    #[test]
    fn token_step_checks_ids_and_prefix() {
        let p = tiny();
        let f = p.features(&base_obs(&p)).unwrap();
        assert!(matches!(p.token_step(&f, &[BOS, 99]), Err(PolicyError::Vocab { .. })));
        assert!(p.token_step(&f, &[4]).is_err());
        let a = p.token_step(&f, &[BOS, 4]).unwrap();
        assert_eq!(a, p.token_step(&f, &[BOS, 4]).unwrap());
        assert_ne!(a, p.token_step(&f, &[BOS, 5]).unwrap());
    }

    #[test]
    fn causality_suffix_mutation() {
        let p = tiny();
        let o = base_obs(&p);
        let (_, d1) = p.action_logprob(&o, &[BOS, 4, 5, 6, EOS]).unwrap();
        let (_, d2) = p.action_logprob(&o, &[BOS, 4, 5, 7, SEP]).unwrap();
        assert_eq!(d1[..3], d2[..3]);
    }

    #[test]
    fn sampled_logprobs_reproduce_bit_exactly() {
        let p = tiny();
        let o = base_obs(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let em = p.sample_action(&o, &mut rng, 8).unwrap();
            let (lp, dists) = p.action_logprob(&o, &em.tokens).unwrap();
            assert_eq!(lp, em.logprobs);
            assert_eq!(dists, em.dists);
            assert!(em.logprobs.iter().all(|&l| l <= 0.0));
            assert_eq!(em.logprobs.len(), em.generated());
            assert!(em.tokens.len() <= 8);
            assert!(em.truncated || *em.tokens.last().unwrap() == EOS);
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let p = tiny();
        let o = base_obs(&p);
        let a = p.sample_action(&o, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
        let b = p.sample_action(&o, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factorization_matches_product() {
        let p = tiny();
        let o = base_obs(&p);
        let toks = [BOS, 4, SEP, 6, EOS];
        let (lp, dists) = p.action_logprob(&o, &toks).unwrap();
        let prod: f64 = dists.iter().zip(&toks[1..]).map(|(d, &t)| d[t]).product();
        assert!((lp.iter().sum::<f64>().exp() - prod).abs() < 1e-12);
    }

    #[test]
    fn spans_partition_generated_tokens() {
        let (th, ac) = ActionEmission::spans(&[BOS, 4, 5, SEP, 6, EOS]);
        assert_eq!(th, 1..3);
        assert_eq!(ac, 4..6);
        let (th, ac) = ActionEmission::spans(&[BOS, 4, 5]);
        assert_eq!(th, 1..3);
        assert!(ac.is_empty());
    }

    #[test]
    fn zero_init_value_head_outputs_zero() {
        let p = tiny();
        assert_eq!(p.value(&base_obs(&p)).unwrap(), 0.0);
    }

    #[test]
    fn snapshot_is_isolated() {
        let mut p = tiny();
        let snap = p.snapshot();
        let o = base_obs(&p);
        let f = snap.features(&o).unwrap();
        let before = snap.token_step(&f, &[BOS]).unwrap();
        let i = p.params().index_of("head.out_b").unwrap();
        p.params_mut().get_mut(i).data_mut()[4] += 1.0;
        assert_eq!(snap.token_step(&f, &[BOS]).unwrap(), before);
        assert_ne!(p.token_step(&f, &[BOS]).unwrap(), before);
        let snap2 = snap.snapshot();
        assert_eq!(snap2.params().tensors()[0].data(), snap.params().tensors()[0].data());
    }

    #[test]
    fn categorical_sampling_edges() {
        assert_eq!(sample_categorical(&[0.5, 0.5], 0.0), 0);
        assert_eq!(sample_categorical(&[0.5, 0.5], 0.75), 1);
        assert_eq!(sample_categorical(&[0.5, 0.5, 0.0], 1.0), 1);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }
}
