//! The Improve step: fit a fresh copy of the base policy to a weighted
//! dataset.
//!
//! Neural policies train by mini-batch SGD with momentum and keep the
//! checkpoint with the best validation reward. Tabular policies have an exact
//! closed-form maximizer.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from;
use crate::seqpolicy::{
    clone_base, neural::loss_and_grad, sequence_log_prob, Gradient, NeuralPolicy, SequencePolicy, TabularPolicy,
    TokenId, WeightedExample,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub step_size: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            momentum: 0.9,
            batch_size: 32,
            max_steps: 3000,
            eval_every: 100,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid("step_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(invalid("batch_size, eval_every and patience must be positive"));
        }
        // A zero-step run is allowed and returns the base unchanged.
        if self.max_steps > 0 && self.eval_every > self.max_steps {
            return Err(invalid("eval_every must not exceed max_steps"));
        }
        Ok(())
    }
}

/// `-(1/|D|) Σ w · log p(y | x)`. Infinite when a weighted example is
/// impossible under the policy.
pub fn weighted_nll_loss<P: SequencePolicy + ?Sized>(policy: &P, dataset: &[WeightedExample]) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let mut total = 0.0;
    for ex in dataset {
        if !(ex.weight >= 0.0 && ex.weight.is_finite()) {
            return Err(invalid(format!("weight must be finite and non-negative, got {}", ex.weight)));
        }
        if ex.weight == 0.0 {
            continue;
        }
        let lp = sequence_log_prob(policy, &ex.input, &ex.output)?;
        if lp.is_impossible() {
            return Ok(f64::INFINITY);
        }
        total -= ex.weight * lp.value;
    }
    Ok(total / dataset.len() as f64)
}

/// Stop rule over a stream of validation scores: the first score is the
/// reference, a later score counts only when strictly better than the best so
/// far, and `patience` consecutive non-improvements stop the run.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    seen: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            seen: 0,
            stale: 0,
        }
    }

    /// Records a score; returns true when training should stop.
    pub fn observe(&mut self, score: f64) -> bool {
        let index = self.seen;
        self.seen += 1;
        match self.best {
            Some((_, b)) if !(score > b) => self.stale += 1,
            _ => {
                self.best = Some((index, score));
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    /// Index (in observation order) and value of the best score.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean mini-batch loss since the previous point; full-dataset loss at
    /// step 0.
    pub train_loss: f64,
    pub val_reward: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub policy: NeuralPolicy,
    pub curve: Vec<CurvePoint>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Fine-tunes a clone of `base` on `dataset`.
///
/// `validate` scores a candidate (higher is better). It runs at step 0 and
/// every `eval_every` steps; the best-scoring checkpoint is returned, with
/// earlier checkpoints winning ties.
pub fn train_policy(
    base: &NeuralPolicy,
    dataset: &[WeightedExample],
    validate: &mut dyn FnMut(&NeuralPolicy) -> Result<f64>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(invalid("empty training set"));
    }
    let mut policy = clone_base(base);
    let mut rng = rng_from(seed);
    let mut velocity = Gradient::zeros(policy.shape());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(config.batch_size);

    // The starting point is scored for the curve but is not a candidate:
    // every Improve step returns a trained checkpoint.
    let initial_loss = weighted_nll_loss(&policy, dataset)?;
    let mut stopper = EarlyStopping::new(config.patience);
    let mut curve = vec![CurvePoint {
        step: 0,
        train_loss: initial_loss,
        val_reward: validate(&policy)?,
    }];
    let mut best: Option<(usize, NeuralPolicy)> = None;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut stopped_early = false;
    let mut steps_run = 0;

    for step in 1..=config.max_steps {
        batch.clear();
        while batch.len() < config.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grad) = loss_and_grad(&policy, &batch)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged {
                step,
                detail: format!("loss became {loss}"),
            });
        }
        for (v, g) in velocity.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *v = config.momentum * *v + g;
        }
        policy
            .apply_update(&velocity, config.step_size)
            .map_err(|e| match e {
                Error::TrainingDiverged { detail, .. } => Error::TrainingDiverged { step, detail },
                other => other,
            })?;
        loss_sum += loss;
        loss_count += 1;
        steps_run = step;

        if step % config.eval_every == 0 {
            let score = validate(&policy)?;
            let stop = stopper.observe(score);
            curve.push(CurvePoint {
                step,
                train_loss: loss_sum / loss_count as f64,
                val_reward: score,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if stopper.best().map(|(i, _)| i + 1) == Some(curve.len() - 1) {
                best = Some((step, policy.clone()));
            }
            if stop {
                stopped_early = true;
                break;
            }
        }
    }
    // Without any evaluation the last iterate is the only candidate.
    let (best_step, policy) = best.unwrap_or((steps_run, policy));
    Ok(TrainOutcome {
        policy,
        curve,
        best_step,
        steps_run,
        stopped_early,
    })
}

/// Supervised fine-tuning on reference solutions: `train_policy` with unit
/// weights.
pub fn sft_train(
    base: &NeuralPolicy,
    references: &[WeightedExample],
    validate: &mut dyn FnMut(&NeuralPolicy) -> Result<f64>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let unit: Vec<WeightedExample> = references
        .iter()
        .map(|e| WeightedExample {
            weight: 1.0,
            ..e.clone()
        })
        .collect();
    train_policy(base, &unit, validate, config, seed)
}

/// Exact maximizer of the weighted log-likelihood for a tabular policy.
///
/// Every context key visited by the dataset gets the weight-normalized
/// next-token counts; keys with no weight keep the base row.
pub fn tabular_mstep_closed_form(base: &TabularPolicy, dataset: &[WeightedExample]) -> Result<TabularPolicy> {
    let v = base.vocab().size();
    let mut counts: BTreeMap<Vec<TokenId>, Vec<f64>> = BTreeMap::new();
    for ex in dataset {
        if !(ex.weight >= 0.0 && ex.weight.is_finite()) {
            return Err(invalid(format!("weight must be finite and non-negative, got {}", ex.weight)));
        }
        if ex.weight == 0.0 {
            continue;
        }
        let mut context = ex.input.ids.clone();
        for &tok in &ex.output.ids {
            if tok as usize >= v {
                return Err(invalid(format!("token {tok} outside vocabulary")));
            }
            let row = counts.entry(base.key_for(&context)).or_insert_with(|| vec![0.0; v]);
            row[tok as usize] += ex.weight;
            context.push(tok);
        }
    }
    let mut out = clone_base(base);
    for (key, row) in counts {
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            out.set_row(key, row.iter().map(|c| c / total).collect())?;
        }
    }
    Ok(out)
}
