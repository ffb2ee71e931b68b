use rand::distributions::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{softmax_into, SequencePolicy, TokenId, Vocab, WeightedExample};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Layer sizes of a [`NeuralPolicy`].
///
/// Parameters live in one flat vector laid out as
/// `embed | hidden weights | hidden bias | output weights | output bias`.
/// The embedding has one extra row used for padding positions that fall
/// before the start of the context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuralShape {
    pub vocab: usize,
    pub window: usize,
    pub embed_dim: usize,
    pub hidden: usize,
}

impl NeuralShape {
    fn embed_len(&self) -> usize {
        (self.vocab + 1) * self.embed_dim
    }

    fn input_len(&self) -> usize {
        self.window * self.embed_dim
    }

    fn w1_offset(&self) -> usize {
        self.embed_len()
    }

    fn b1_offset(&self) -> usize {
        self.w1_offset() + self.hidden * self.input_len()
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.vocab * self.hidden
    }

    pub fn param_count(&self) -> usize {
        self.b2_offset() + self.vocab
    }

    fn pad(&self) -> usize {
        self.vocab
    }
}

/// Embedding window -> tanh hidden layer -> vocabulary logits.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralPolicy {
    vocab: Vocab,
    shape: NeuralShape,
    params: Vec<f64>,
}

/// Scratch buffers for one forward/backward pass.
pub(crate) struct Workspace {
    slots: Vec<usize>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
    d_hidden: Vec<f64>,
    d_input: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(shape: &NeuralShape) -> Self {
        Self {
            slots: vec![0; shape.window],
            input: vec![0.0; shape.input_len()],
            hidden: vec![0.0; shape.hidden],
            logits: vec![0.0; shape.vocab],
            probs: vec![0.0; shape.vocab],
            d_hidden: vec![0.0; shape.hidden],
            d_input: vec![0.0; shape.input_len()],
        }
    }
}

/// Gradient with the same flat layout as the policy parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(shape: &NeuralShape) -> Self {
        Self {
            values: vec![0.0; shape.param_count()],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl NeuralPolicy {
    pub fn new_random(vocab: Vocab, window: usize, embed_dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if window == 0 || embed_dim == 0 || hidden == 0 {
            return Err(invalid("window, embed_dim and hidden must be positive"));
        }
        let shape = NeuralShape {
            vocab: vocab.size(),
            window,
            embed_dim,
            hidden,
        };
        let unit = Uniform::new_inclusive(-1.0, 1.0);
        let mut params = vec![0.0; shape.param_count()];
        let embed_scale = 0.5;
        let w1_scale = 1.0 / (shape.input_len() as f64).sqrt();
        let w2_scale = 0.5 / (hidden as f64).sqrt();
        for p in &mut params[..shape.embed_len()] {
            *p = embed_scale * unit.sample(rng);
        }
        for p in &mut params[shape.w1_offset()..shape.b1_offset()] {
            *p = w1_scale * unit.sample(rng);
        }
        for p in &mut params[shape.w2_offset()..shape.b2_offset()] {
            *p = w2_scale * unit.sample(rng);
        }
        Ok(Self { vocab, shape, params })
    }

    pub fn from_params(vocab: Vocab, shape: NeuralShape, params: Vec<f64>) -> Result<Self> {
        if shape.vocab != vocab.size() {
            return Err(invalid("shape vocabulary size does not match vocabulary"));
        }
        if params.len() != shape.param_count() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(invalid("non-finite parameter"));
        }
        Ok(Self { vocab, shape, params })
    }

    pub fn shape(&self) -> &NeuralShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access, mainly for finite-difference probes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.shape.window
    }

    fn fill_slots(&self, context: &[TokenId], slots: &mut [usize]) {
        let w = self.shape.window;
        let n = context.len();
        for (j, slot) in slots.iter_mut().enumerate() {
            // Slot w-1 holds the most recent token.
            let back = w - j;
            *slot = if back <= n {
                context[n - back] as usize
            } else {
                self.shape.pad()
            };
        }
    }

    pub(crate) fn forward(&self, context: &[TokenId], ws: &mut Workspace) {
        let s = &self.shape;
        let d = s.embed_dim;
        let in_len = s.input_len();
        self.fill_slots(context, &mut ws.slots);
        for (j, &tok) in ws.slots.iter().enumerate() {
            ws.input[j * d..(j + 1) * d].copy_from_slice(&self.params[tok * d..(tok + 1) * d]);
        }
        let w1 = &self.params[s.w1_offset()..s.b1_offset()];
        let b1 = &self.params[s.b1_offset()..s.w2_offset()];
        for h in 0..s.hidden {
            let row = &w1[h * in_len..(h + 1) * in_len];
            let pre: f64 = b1[h] + row.iter().zip(&ws.input).map(|(a, b)| a * b).sum::<f64>();
            ws.hidden[h] = pre.tanh();
        }
        let w2 = &self.params[s.w2_offset()..s.b2_offset()];
        let b2 = &self.params[s.b2_offset()..];
        for v in 0..s.vocab {
            let row = &w2[v * s.hidden..(v + 1) * s.hidden];
            ws.logits[v] = b2[v] + row.iter().zip(&ws.hidden).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Raw next-token logits for a context.
    pub fn logits(&self, context: &[TokenId]) -> Vec<f64> {
        let mut ws = Workspace::new(&self.shape);
        self.forward(context, &mut ws);
        ws.logits
    }

    /// Adds `coef * d(-log p(target | context))/dθ` into `grad` and returns
    /// `-log p(target | context)`.
    pub(crate) fn accumulate_token(
        &self,
        context: &[TokenId],
        target: TokenId,
        coef: f64,
        grad: &mut [f64],
        ws: &mut Workspace,
    ) -> f64 {
        let s = self.shape;
        let d = s.embed_dim;
        let in_len = s.input_len();
        self.forward(context, ws);
        softmax_into(&ws.logits, 1.0, &mut ws.probs);
        let t = target as usize;
        let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + ws.logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let nll = lse - ws.logits[t];
        if coef == 0.0 {
            return nll;
        }

        // Output layer.
        ws.d_hidden.iter_mut().for_each(|g| *g = 0.0);
        let (w2_off, b2_off) = (s.w2_offset(), s.b2_offset());
        for v in 0..s.vocab {
            let dl = coef * (ws.probs[v] - if v == t { 1.0 } else { 0.0 });
            if dl == 0.0 {
                continue;
            }
            grad[b2_off + v] += dl;
            let row = w2_off + v * s.hidden;
            for h in 0..s.hidden {
                grad[row + h] += dl * ws.hidden[h];
                ws.d_hidden[h] += self.params[row + h] * dl;
            }
        }

        // Hidden layer through tanh.
        ws.d_input.iter_mut().for_each(|g| *g = 0.0);
        let (w1_off, b1_off) = (s.w1_offset(), s.b1_offset());
        for h in 0..s.hidden {
            let dpre = ws.d_hidden[h] * (1.0 - ws.hidden[h] * ws.hidden[h]);
            if dpre == 0.0 {
                continue;
            }
            grad[b1_off + h] += dpre;
            let row = w1_off + h * in_len;
            let g_row = &mut grad[row..row + in_len];
            for (g, x) in g_row.iter_mut().zip(&ws.input) {
                *g += dpre * x;
            }
            let w_row = &self.params[row..row + in_len];
            for (di, w) in ws.d_input.iter_mut().zip(w_row) {
                *di += dpre * w;
            }
        }

        // Embedding rows, including the padding row.
        for (j, &tok) in ws.slots.iter().enumerate() {
            let g_row = &mut grad[tok * d..(tok + 1) * d];
            for (g, di) in g_row.iter_mut().zip(&ws.d_input[j * d..(j + 1) * d]) {
                *g += di;
            }
        }
        nll
    }

    /// θ ← θ − step · gradient. Leaves the policy untouched and reports
    /// divergence if any updated parameter would be non-finite.
    pub fn apply_update(&mut self, grad: &Gradient, step_size: f64) -> Result<()> {
        if grad.values.len() != self.params.len() {
            return Err(invalid("gradient shape does not match policy"));
        }
        let updated: Vec<f64> = self
            .params
            .iter()
            .zip(&grad.values)
            .map(|(p, g)| p - step_size * g)
            .collect();
        if updated.iter().any(|p| !p.is_finite()) {
            return Err(Error::TrainingDiverged {
                step: 0,
                detail: "parameter update produced a non-finite value".into(),
            });
        }
        self.params = updated;
        Ok(())
    }

    pub(crate) fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"neural");
        h.update(self.vocab.hash().as_bytes());
        for dim in [self.shape.vocab, self.shape.window, self.shape.embed_dim, self.shape.hidden] {
            h.update((dim as u64).to_le_bytes());
        }
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

impl SequencePolicy for NeuralPolicy {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn window(&self) -> usize {
        self.shape.window
    }

    fn tempered_probs(&self, context: &[TokenId], temperature: f64) -> Result<Vec<f64>> {
        super::softmax_with_temperature(&self.logits(context), temperature)
    }
}

/// Gradient and value of `-(1/|B|) Σ w · log p(y | x)` over a batch.
pub(crate) fn loss_and_grad(policy: &NeuralPolicy, batch: &[WeightedExample]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let mut grad = Gradient::zeros(&policy.shape);
    let mut ws = Workspace::new(&policy.shape);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        if !(ex.weight >= 0.0) || !ex.weight.is_finite() {
            return Err(invalid(format!("weight must be finite and non-negative, got {}", ex.weight)));
        }
        let coef = ex.weight * scale;
        if coef == 0.0 {
            continue;
        }
        let mut context = ex.input.ids.clone();
        for &tok in &ex.output.ids {
            loss += coef * policy.accumulate_token(&context, tok, coef, &mut grad.values, &mut ws);
            context.push(tok);
        }
    }
    Ok((loss, grad))
}

/// `∂/∂θ` of the batch-averaged weighted negative log-likelihood.
pub fn weighted_nll_grad(policy: &NeuralPolicy, batch: &[WeightedExample]) -> Result<Gradient> {
    loss_and_grad(policy, batch).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::seqpolicy::{sequence_log_prob, TokenSeq};

    fn toy(seed: u64) -> NeuralPolicy {
        let v = Vocab::letters(3).unwrap();
        NeuralPolicy::new_random(v, 3, 2, 4, &mut rng_from(seed)).unwrap()
    }

    fn ex(x: &[TokenId], y: &[TokenId], w: f64) -> WeightedExample {
        WeightedExample {
            problem_id: "p".into(),
            input: TokenSeq::open(x.to_vec()),
            output: TokenSeq::terminated(y, 0),
            weight: w,
        }
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let p = toy(1);
        let g = weighted_nll_grad(&p, &[ex(&[1], &[2, 1], 0.0), ex(&[2], &[], 0.0)]).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(weighted_nll_grad(&toy(1), &[]).is_err());
        assert!(weighted_nll_grad(&toy(1), &[ex(&[1], &[2], -1.0)]).is_err());
    }

    #[test]
    fn duplicated_batch_gradients() {
        // The loss averages over the batch: duplicating every example leaves
        // the gradient unchanged, and halving the duplicated weights halves it.
        let p = toy(2);
        let a = vec![ex(&[1], &[2, 1], 1.0), ex(&[2, 2], &[1], 0.5)];
        let doubled: Vec<_> = a.iter().chain(a.iter()).cloned().collect();
        let halved: Vec<_> = doubled
            .iter()
            .cloned()
            .map(|mut e| {
                e.weight /= 2.0;
                e
            })
            .collect();
        let ga = weighted_nll_grad(&p, &a).unwrap();
        let gd = weighted_nll_grad(&p, &doubled).unwrap();
        let gh = weighted_nll_grad(&p, &halved).unwrap();
        for ((x, y), z) in ga.as_slice().iter().zip(gd.as_slice()).zip(gh.as_slice()) {
            assert!((x - y).abs() < 1e-14);
            assert!((x / 2.0 - z).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_matches_sequence_log_prob() {
        let p = toy(3);
        let e = ex(&[1, 2], &[2, 2, 1], 1.0);
        let (loss, _) = loss_and_grad(&p, std::slice::from_ref(&e)).unwrap();
        let lp = sequence_log_prob(&p, &e.input, &e.output).unwrap();
        assert!((loss + lp.value).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = toy(4);
        let batch = vec![ex(&[1], &[2, 1], 1.0), ex(&[2, 1], &[1], 0.3), ex(&[], &[2, 2], 0.7)];
        let g = weighted_nll_grad(&p, &batch).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.params().len() {
            let mut plus = p.clone();
            plus.params_mut()[i] += h;
            let mut minus = p.clone();
            minus.params_mut()[i] -= h;
            let fp = loss_and_grad(&plus, &batch).unwrap().0;
            let fm = loss_and_grad(&minus, &batch).unwrap().0;
            let fd = (fp - fm) / (2.0 * h);
            let an = g.as_slice()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_step_is_identity_and_small_step_lowers_loss() {
        let mut p = toy(5);
        let batch = vec![ex(&[1, 2], &[2, 1], 1.0)];
        let before = p.clone();
        let g = weighted_nll_grad(&p, &batch).unwrap();
        p.apply_update(&g, 0.0).unwrap();
        assert_eq!(p, before);
        let l0 = loss_and_grad(&p, &batch).unwrap().0;
        p.apply_update(&g, 1e-3).unwrap();
        let l1 = loss_and_grad(&p, &batch).unwrap().0;
        assert!(l1 < l0);
    }

    #[test]
    fn two_half_steps_differ_from_one_full_step() {
        let batch = vec![ex(&[1, 2], &[2, 1], 1.0)];
        let mut full = toy(6);
        let g = weighted_nll_grad(&full, &batch).unwrap();
        full.apply_update(&g, 0.5).unwrap();
        let mut half = toy(6);
        for _ in 0..2 {
            let g = weighted_nll_grad(&half, &batch).unwrap();
            half.apply_update(&g, 0.25).unwrap();
        }
        assert_ne!(full.params(), half.params());
    }

    #[test]
    fn non_finite_update_is_rejected_and_leaves_policy() {
        let mut p = toy(7);
        let before = p.clone();
        let mut g = Gradient::zeros(p.shape());
        g.as_mut_slice()[0] = f64::INFINITY;
        assert!(matches!(p.apply_update(&g, 1.0), Err(Error::TrainingDiverged { .. })));
        assert_eq!(p, before);
    }
}
