//! Autoregressive sequence policies over a finite vocabulary.
//!
//! A policy maps a context (input tokens followed by the generated prefix)
//! to a distribution over the next token. Two parameterizations are
//! provided: [`TabularPolicy`] stores one distribution per context window and
//! admits a closed-form M-step; [`NeuralPolicy`] is a one-hidden-layer network
//! over a fixed window of embedded tokens with hand-written backpropagation.
//!
//! Decoding, sequence log-probabilities and sampling are written once against
//! the [`SequencePolicy`] trait.

mod checkpoint;
pub(crate) mod neural;
mod tabular;

use std::cmp::Ordering;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::rng::Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_VERSION};
pub use neural::{weighted_nll_grad, Gradient, NeuralPolicy, NeuralShape};
pub use tabular::TabularPolicy;

pub type TokenId = u32;

/// Default context window (input plus generated prefix).
pub const DEFAULT_WINDOW: usize = 8;

/// An ordered set of distinct symbols with a designated end-of-sequence token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    eos_id: TokenId,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, eos_id: TokenId) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(invalid("vocabulary needs at least two tokens"));
        }
        if eos_id as usize >= tokens.len() {
            return Err(invalid(format!(
                "eos id {eos_id} out of range for vocabulary of size {}",
                tokens.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, eos_id })
    }

    /// Vocabulary `<eos>, a, b, c, ...` with `size` entries, used by the
    /// enumerable exact-EM instances.
    pub fn letters(size: usize) -> Result<Self> {
        if size > 27 {
            return Err(invalid("letters vocabulary supports at most 27 tokens"));
        }
        let mut tokens = vec!["<eos>".to_string()];
        tokens.extend((0..size.saturating_sub(1)).map(|i| ((b'a' + i as u8) as char).to_string()));
        Self::new(tokens, 0)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn eos(&self) -> TokenId {
        self.eos_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == symbol).map(|i| i as TokenId)
    }

    /// Stable short hash identifying the vocabulary contents.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.eos_id.to_le_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Encodes a string whose characters are each single-character tokens.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                self.id_of(c.encode_utf8(&mut buf))
                    .ok_or_else(|| invalid(format!("symbol {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| {
                if i == self.eos_id {
                    "$"
                } else {
                    self.tokens.get(i as usize).map(String::as_str).unwrap_or("?")
                }
            })
            .collect()
    }
}

/// A token sequence. When `terminated` is set the last id is the eos token.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
    pub terminated: bool,
}

impl TokenSeq {
    /// Content followed by eos.
    pub fn terminated(content: &[TokenId], eos: TokenId) -> Self {
        let mut ids = content.to_vec();
        ids.push(eos);
        Self {
            ids,
            terminated: true,
        }
    }

    /// A sequence that never emitted eos (inputs, or truncated outputs).
    pub fn open(ids: Vec<TokenId>) -> Self {
        Self {
            ids,
            terminated: false,
        }
    }

    /// Ids without the trailing eos.
    pub fn content(&self) -> &[TokenId] {
        if self.terminated {
            &self.ids[..self.ids.len() - 1]
        } else {
            &self.ids
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One fine-tuning pair `(x, y)` with its M-step weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedExample {
    pub problem_id: String,
    pub input: TokenSeq,
    pub output: TokenSeq,
    pub weight: f64,
}

/// Log-probability that may be exactly `-inf`.
///
/// Impossible events carry a flag plus a finite sentinel so aggregates and
/// serialized records never hold a raw non-finite float.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogProb {
    pub value: f64,
    pub impossible: bool,
}

impl LogProb {
    pub const SENTINEL: f64 = f64::MIN;
    pub const IMPOSSIBLE: LogProb = LogProb {
        value: Self::SENTINEL,
        impossible: true,
    };
    pub const ZERO: LogProb = LogProb {
        value: 0.0,
        impossible: false,
    };

    pub fn finite(value: f64) -> Self {
        debug_assert!(value.is_finite());
        Self {
            value,
            impossible: false,
        }
    }

    /// Maps `-inf` to the impossible sentinel.
    pub fn from_f64(value: f64) -> Self {
        if value == f64::NEG_INFINITY {
            Self::IMPOSSIBLE
        } else {
            Self::finite(value)
        }
    }

    pub fn is_impossible(&self) -> bool {
        self.impossible
    }

    /// The value as a float, `-inf` when impossible.
    pub fn to_f64(self) -> f64 {
        if self.impossible {
            f64::NEG_INFINITY
        } else {
            self.value
        }
    }

    pub fn add(self, other: LogProb) -> LogProb {
        if self.impossible || other.impossible {
            Self::IMPOSSIBLE
        } else {
            Self::finite(self.value + other.value)
        }
    }
}

impl PartialOrd for LogProb {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self.impossible, other.impossible) {
            (true, true) => Some(Ordering::Equal),
            (true, false) => Some(Ordering::Less),
            (false, true) => Some(Ordering::Greater),
            (false, false) => self.value.partial_cmp(&other.value),
        }
    }
}

impl fmt::Display for LogProb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.impossible {
            write!(f, "-inf")
        } else {
            write!(f, "{}", self.value)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    TemperatureSample,
    Greedy,
}

/// Decoding configuration. Greedy mode ignores temperature and top-k.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeParams {
    pub temperature: f64,
    pub top_k: usize,
    pub max_len: usize,
    pub mode: DecodeMode,
}

impl DecodeParams {
    /// Temperature 0.7 with top-40 (clamped to the vocabulary).
    pub fn generation_default(vocab_size: usize, max_len: usize) -> Self {
        Self {
            temperature: 0.7,
            top_k: 40.min(vocab_size),
            max_len,
            mode: DecodeMode::TemperatureSample,
        }
    }

    /// Full-support sampling at temperature 1.
    pub fn full_support(vocab_size: usize, max_len: usize) -> Self {
        Self {
            temperature: 1.0,
            top_k: vocab_size,
            max_len,
            mode: DecodeMode::TemperatureSample,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        Self {
            temperature: 1.0,
            top_k: 1,
            max_len,
            mode: DecodeMode::Greedy,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.max_len == 0 {
            return Err(invalid("max_len must be positive"));
        }
        if self.mode == DecodeMode::Greedy {
            return Ok(());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.top_k == 0 || self.top_k > vocab_size {
            return Err(invalid(format!(
                "top_k must lie in 1..={vocab_size}, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Numerically stable `softmax(logits / temperature)`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(invalid("empty logit vector"));
    }
    if let Some(bad) = logits.iter().find(|z| !z.is_finite()) {
        return Err(invalid(format!("non-finite logit {bad}")));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, temperature, &mut out);
    Ok(out)
}

/// Unchecked softmax into a caller-owned buffer.
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Anything that yields next-token distributions over a fixed vocabulary.
pub trait SequencePolicy: Send + Sync {
    fn vocab(&self) -> &Vocab;

    /// Number of trailing context tokens the policy conditions on.
    fn window(&self) -> usize;

    /// Full-support next-token distribution at `temperature`, conditioned on
    /// the trailing window of `context`.
    fn tempered_probs(&self, context: &[TokenId], temperature: f64) -> Result<Vec<f64>>;
}

/// Next-token distribution with top-k masking or greedy one-hot applied.
pub fn next_token_dist<P: SequencePolicy + ?Sized>(
    policy: &P,
    context: &[TokenId],
    params: &DecodeParams,
) -> Result<Vec<f64>> {
    let v = policy.vocab().size();
    if params.mode == DecodeMode::Greedy {
        let probs = policy.tempered_probs(context, 1.0)?;
        let mut one_hot = vec![0.0; v];
        one_hot[argmax(&probs)] = 1.0;
        return Ok(one_hot);
    }
    let mut probs = policy.tempered_probs(context, params.temperature)?;
    if params.top_k < v {
        let mut order: Vec<usize> = (0..v).collect();
        // Stable sort keeps lower indices first among ties.
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(Ordering::Equal));
        for &i in &order[params.top_k..] {
            probs[i] = 0.0;
        }
        let total: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= total;
        }
    }
    Ok(probs)
}

fn draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Draws tokens until eos or `max_len`.
pub fn sample_sequence<P: SequencePolicy + ?Sized>(
    policy: &P,
    x: &TokenSeq,
    params: &DecodeParams,
    rng: &mut Rng,
) -> Result<TokenSeq> {
    params.validate(policy.vocab().size())?;
    let eos = policy.vocab().eos();
    let mut context = x.ids.clone();
    let start = context.len();
    while context.len() - start < params.max_len {
        let probs = next_token_dist(policy, &context, params)?;
        let tok = if params.mode == DecodeMode::Greedy {
            argmax(&probs)
        } else {
            draw(&probs, rng)
        } as TokenId;
        context.push(tok);
        if tok == eos {
            return Ok(TokenSeq {
                ids: context.split_off(start),
                terminated: true,
            });
        }
    }
    Ok(TokenSeq::open(context.split_off(start)))
}

/// Deterministic argmax decode.
pub fn greedy_decode<P: SequencePolicy + ?Sized>(policy: &P, x: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    // The rng is never consulted in greedy mode.
    let mut rng = crate::rng::rng_from(0);
    sample_sequence(policy, x, &DecodeParams::greedy(max_len), &mut rng)
}

/// `log p(y | x)` at temperature 1 with full support.
///
/// The caller is responsible for `y` being terminated or of maximal length.
pub fn sequence_log_prob<P: SequencePolicy + ?Sized>(policy: &P, x: &TokenSeq, y: &TokenSeq) -> Result<LogProb> {
    let mut context = x.ids.clone();
    let mut total = LogProb::ZERO;
    for &tok in &y.ids {
        let probs = policy.tempered_probs(&context, 1.0)?;
        let p = *probs
            .get(tok as usize)
            .ok_or_else(|| invalid(format!("token {tok} outside vocabulary")))?;
        if p <= 0.0 {
            return Ok(LogProb::IMPOSSIBLE);
        }
        total = total.add(LogProb::finite(p.ln()));
        context.push(tok);
    }
    Ok(total)
}

/// Every outcome of decoding up to `max_len` tokens: all eos-terminated
/// sequences plus the truncated ones of exactly `max_len` non-eos tokens.
pub fn enumerate_outcomes(vocab: &Vocab, max_len: usize) -> Vec<TokenSeq> {
    let eos = vocab.eos();
    let symbols: Vec<TokenId> = (0..vocab.size() as TokenId).filter(|&t| t != eos).collect();
    let mut out = Vec::new();
    let mut layer: Vec<Vec<TokenId>> = vec![Vec::new()];
    for len in 0..=max_len {
        if len < max_len {
            for content in &layer {
                out.push(TokenSeq::terminated(content, eos));
            }
        } else {
            for content in &layer {
                out.push(TokenSeq::open(content.clone()));
            }
            break;
        }
        layer = layer
            .iter()
            .flat_map(|c| {
                symbols.iter().map(move |&s| {
                    let mut n = c.clone();
                    n.push(s);
                    n
                })
            })
            .collect();
    }
    out
}

/// Either parameterization; this is what checkpoints hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

impl Policy {
    /// Content hash of the parameters; two policies with equal ids are
    /// bit-identical.
    pub fn checkpoint_id(&self) -> String {
        match self {
            Policy::Tabular(t) => t.content_hash(),
            Policy::Neural(n) => n.content_hash(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Tabular(_) => "tabular",
            Policy::Neural(_) => "neural",
        }
    }
}

impl SequencePolicy for Policy {
    fn vocab(&self) -> &Vocab {
        match self {
            Policy::Tabular(t) => t.vocab(),
            Policy::Neural(n) => n.vocab(),
        }
    }

    fn window(&self) -> usize {
        match self {
            Policy::Tabular(t) => t.window(),
            Policy::Neural(n) => n.window(),
        }
    }

    fn tempered_probs(&self, context: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
        match self {
            Policy::Tabular(t) => t.tempered_probs(context, temperature),
            Policy::Neural(n) => n.tempered_probs(context, temperature),
        }
    }
}

/// Independent copy of a frozen base checkpoint.
pub fn clone_base<P: Clone>(base: &P) -> P {
    base.clone()
}
