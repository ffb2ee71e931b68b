use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use super::{SequencePolicy, TokenId, Vocab};
use crate::error::{invalid, Result};

/// One next-token distribution per context window.
///
/// Rows hold probabilities rather than logits so the closed-form M-step can
/// place exact zeros. Contexts without a row resolve to uniform.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab: Vocab,
    window: usize,
    table: BTreeMap<Vec<TokenId>, Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(vocab: Vocab, window: usize) -> Self {
        Self {
            vocab,
            window,
            table: BTreeMap::new(),
        }
    }

    /// Trailing `window` tokens of `context`.
    pub fn key_for(&self, context: &[TokenId]) -> Vec<TokenId> {
        context[context.len().saturating_sub(self.window)..].to_vec()
    }

    /// Sets the distribution for a context key (already truncated to the window).
    pub fn set_row(&mut self, key: Vec<TokenId>, probs: Vec<f64>) -> Result<()> {
        if key.len() > self.window {
            return Err(invalid(format!(
                "context key of length {} exceeds window {}",
                key.len(),
                self.window
            )));
        }
        if probs.len() != self.vocab.size() {
            return Err(invalid(format!(
                "row has {} entries, vocabulary has {}",
                probs.len(),
                self.vocab.size()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("row entries must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("row sums to {total}, expected 1")));
        }
        self.table.insert(key, probs);
        Ok(())
    }

    pub fn row(&self, key: &[TokenId]) -> Option<&[f64]> {
        self.table.get(key).map(Vec::as_slice)
    }

    /// Distribution at temperature 1 for a context.
    pub fn probs_for(&self, context: &[TokenId]) -> Vec<f64> {
        let key = &context[context.len().saturating_sub(self.window)..];
        match self.table.get(key) {
            Some(row) => row.clone(),
            None => vec![1.0 / self.vocab.size() as f64; self.vocab.size()],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Vec<TokenId>, &Vec<f64>)> {
        self.table.iter()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub(crate) fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"tabular");
        h.update(self.vocab.hash().as_bytes());
        h.update((self.window as u64).to_le_bytes());
        for (k, row) in &self.table {
            h.update((k.len() as u64).to_le_bytes());
            for t in k {
                h.update(t.to_le_bytes());
            }
            for p in row {
                h.update(p.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl SequencePolicy for TabularPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn window(&self) -> usize {
        self.window
    }

    /// `p^(1/T)` renormalized, which equals the temperature softmax of `ln p`.
    fn tempered_probs(&self, context: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(invalid(format!("temperature must be positive, got {temperature}")));
        }
        let mut p = self.probs_for(context);
        if temperature != 1.0 {
            let max = p.iter().copied().fold(0.0, f64::max);
            let mut total = 0.0;
            for v in &mut p {
                *v = if *v > 0.0 { (*v / max).powf(1.0 / temperature) } else { 0.0 };
                total += *v;
            }
            for v in &mut p {
                *v /= total;
            }
        }
        Ok(p)
    }
}
