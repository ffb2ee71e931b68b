//! Exact EM on instances small enough to enumerate every output.
//!
//! The E-step is the true posterior `q(y|x) ∝ r(x,y) p(y|x)` and the M-step
//! is the closed-form tabular maximizer, so the ELBO
//! `L(p, q) = E_q[log r] - KL(q || p)` can be tracked exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::ExactSpec;
use crate::error::{invalid, Error, Result};
use crate::mstep::tabular_mstep_closed_form;
use crate::rng::{derive_seed, rng_from, Rng};
use crate::seqpolicy::{enumerate_outcomes, sequence_log_prob, LogProb, TabularPolicy, TokenId, TokenSeq, Vocab, WeightedExample};

/// An input with its set of correct terminated outputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactProblem {
    pub input: TokenSeq,
    pub correct: BTreeSet<TokenSeq>,
}

#[derive(Clone, Debug)]
pub struct ExactInstance {
    pub vocab: Vocab,
    pub max_len: usize,
    pub problems: Vec<ExactProblem>,
    pub init: TabularPolicy,
}

/// Per problem, the non-zero entries of a distribution over outcomes.
pub type QWeights = Vec<BTreeMap<TokenSeq, f64>>;

/// Distinct random inputs, random non-empty correct sets, and a random
/// full-support initial policy.
pub fn gen_exact_instance(spec: &ExactSpec, seed: u64) -> Result<ExactInstance> {
    let vocab = Vocab::letters(spec.vocab_size)?;
    let symbols = (spec.vocab_size - 1) as u32;
    if (symbols as f64).powi(spec.input_len as i32) < spec.problems as f64 {
        return Err(Error::Generation("not enough distinct inputs for the requested problems".into()));
    }
    let mut rng = rng_from(seed);
    let outcomes = enumerate_outcomes(&vocab, spec.max_len);
    let terminated: Vec<&TokenSeq> = outcomes.iter().filter(|y| y.terminated).collect();

    let mut inputs = BTreeSet::new();
    while inputs.len() < spec.problems {
        let x: Vec<TokenId> = (0..spec.input_len).map(|_| rng.gen_range(1..=symbols)).collect();
        inputs.insert(x);
    }
    let mut problems = Vec::new();
    for x in inputs {
        let mut correct: BTreeSet<TokenSeq> = terminated
            .iter()
            .filter(|_| rng.gen::<f64>() < spec.correct_fraction)
            .map(|y| (*y).clone())
            .collect();
        if correct.is_empty() {
            correct.insert(terminated[rng.gen_range(0..terminated.len())].clone());
        }
        problems.push(ExactProblem {
            input: TokenSeq::open(x),
            correct,
        });
    }

    let window = spec.window.unwrap_or(spec.input_len + spec.max_len);
    let mut init = TabularPolicy::uniform(vocab.clone(), window);
    for p in &problems {
        fill_random_rows(&mut init, &p.input.ids, spec.max_len, &mut rng)?;
    }
    Ok(ExactInstance {
        vocab,
        max_len: spec.max_len,
        problems,
        init,
    })
}

/// Gives every context reachable from `x` a random strictly positive row.
fn fill_random_rows(policy: &mut TabularPolicy, x: &[TokenId], max_len: usize, rng: &mut Rng) -> Result<()> {
    let v = policy.vocab().size();
    let eos = policy.vocab().eos();
    let mut frontier = vec![x.to_vec()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for ctx in frontier {
            let key = policy.key_for(&ctx);
            if policy.row(&key).is_none() {
                let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                policy.set_row(key, raw.iter().map(|r| r / total).collect())?;
            }
            for t in 0..v as TokenId {
                if t != eos {
                    let mut c = ctx.clone();
                    c.push(t);
                    next.push(c);
                }
            }
        }
        frontier = next;
    }
    Ok(())
}

fn outcome_probs(policy: &TabularPolicy, x: &TokenSeq, outcomes: &[TokenSeq]) -> Result<Vec<(TokenSeq, f64)>> {
    outcomes
        .iter()
        .map(|y| Ok((y.clone(), sequence_log_prob(policy, x, y)?.to_f64().exp())))
        .collect()
}

/// The exact E-step: `p` restricted to the correct set and renormalized.
pub fn exact_posterior(policy: &TabularPolicy, problems: &[ExactProblem], max_len: usize) -> Result<QWeights> {
    let outcomes = enumerate_outcomes(policy.vocab(), max_len);
    problems
        .iter()
        .map(|p| {
            let probs = outcome_probs(policy, &p.input, &outcomes)?;
            let evidence: f64 = probs.iter().filter(|(y, _)| p.correct.contains(y)).map(|(_, q)| q).sum();
            if !(evidence > 0.0) {
                return Err(invalid("policy assigns zero probability to every correct output"));
            }
            Ok(probs
                .into_iter()
                .filter(|(y, q)| p.correct.contains(y) && *q > 0.0)
                .map(|(y, q)| (y, q / evidence))
                .collect())
        })
        .collect()
}

/// Mean over problems of `Σ q log r - Σ q log(q/p)`, with `0 log 0 = 0` and
/// `r` the 0/1 reward. Mass of `q` outside the correct set or outside the
/// support of `p` gives the impossible sentinel.
pub fn compute_elbo_exact(policy: &TabularPolicy, q: &QWeights, problems: &[ExactProblem]) -> Result<LogProb> {
    if q.len() != problems.len() || problems.is_empty() {
        return Err(invalid("need one q distribution per problem"));
    }
    let mut total = 0.0;
    for (qp, p) in q.iter().zip(problems) {
        for (y, &w) in qp {
            if w == 0.0 {
                continue;
            }
            if !p.correct.contains(y) {
                return Ok(LogProb::IMPOSSIBLE);
            }
            let lp = sequence_log_prob(policy, &p.input, y)?;
            if lp.is_impossible() {
                return Ok(LogProb::IMPOSSIBLE);
            }
            total += w * (lp.value - w.ln());
        }
    }
    Ok(LogProb::finite(total / problems.len() as f64))
}

/// Mean `log p(correct | x)`: the value the ELBO reaches at the posterior.
pub fn log_evidence(policy: &TabularPolicy, problems: &[ExactProblem], max_len: usize) -> Result<f64> {
    let outcomes = enumerate_outcomes(policy.vocab(), max_len);
    let mut total = 0.0;
    for p in problems {
        let probs = outcome_probs(policy, &p.input, &outcomes)?;
        total += probs
            .iter()
            .filter(|(y, _)| p.correct.contains(y))
            .map(|(_, q)| q)
            .sum::<f64>()
            .ln();
    }
    Ok(total / problems.len() as f64)
}

/// Uniform over each problem's correct set.
pub fn uniform_correct_q(problems: &[ExactProblem]) -> QWeights {
    problems
        .iter()
        .map(|p| {
            let w = 1.0 / p.correct.len() as f64;
            p.correct.iter().map(|y| (y.clone(), w)).collect()
        })
        .collect()
}

/// The closed-form M-step on `q`.
pub fn exact_mstep(base: &TabularPolicy, q: &QWeights, problems: &[ExactProblem]) -> Result<TabularPolicy> {
    let data: Vec<WeightedExample> = q
        .iter()
        .zip(problems)
        .flat_map(|(qp, p)| {
            qp.iter().map(move |(y, &w)| WeightedExample {
                problem_id: String::new(),
                input: p.input.clone(),
                output: y.clone(),
                weight: w,
            })
        })
        .collect();
    tabular_mstep_closed_form(base, &data)
}

/// The three ELBO values around one EM iteration and the two gains that
/// must be non-negative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactIterationRecord {
    pub run: String,
    pub iteration: usize,
    /// `L(p_t, q_t)`.
    pub elbo_before: f64,
    /// `L(p_t, q_{t+1})`.
    pub elbo_after_e: f64,
    /// `L(p_{t+1}, q_{t+1})`.
    pub elbo_after_m: f64,
    pub e_step_gain: f64,
    pub m_step_gain: f64,
    /// Mean `log p_{t+1}(correct | x)`.
    pub log_evidence: f64,
    /// Mean probability of a correct output under `p_{t+1}`.
    pub train_reward: f64,
}

impl ExactIterationRecord {
    pub fn holds(&self, slack: f64) -> bool {
        self.e_step_gain >= slack && self.m_step_gain >= slack
    }
}

/// Alternates the exact E- and M-steps from `start` and `q0`.
pub fn run_exact_em_from(
    run: &str,
    start: &TabularPolicy,
    q0: QWeights,
    problems: &[ExactProblem],
    max_len: usize,
    iterations: usize,
) -> Result<(Vec<ExactIterationRecord>, TabularPolicy)> {
    let mut policy = start.clone();
    let mut q = q0;
    let mut records = Vec::with_capacity(iterations);
    let elbo = |p: &TabularPolicy, q: &QWeights| -> Result<f64> { Ok(compute_elbo_exact(p, q, problems)?.to_f64()) };
    for t in 1..=iterations {
        let before = elbo(&policy, &q)?;
        let q_next = exact_posterior(&policy, problems, max_len)?;
        let after_e = elbo(&policy, &q_next)?;
        let next = exact_mstep(&policy, &q_next, problems)?;
        let after_m = elbo(&next, &q_next)?;
        let evidence = log_evidence(&next, problems, max_len)?;
        records.push(ExactIterationRecord {
            run: run.to_string(),
            iteration: t,
            elbo_before: before,
            elbo_after_e: after_e,
            elbo_after_m: after_m,
            e_step_gain: after_e - before,
            m_step_gain: after_m - after_e,
            log_evidence: evidence,
            train_reward: mean_success(&next, problems, max_len)?,
        });
        policy = next;
        q = q_next;
    }
    Ok((records, policy))
}

fn mean_success(policy: &TabularPolicy, problems: &[ExactProblem], max_len: usize) -> Result<f64> {
    let outcomes = enumerate_outcomes(policy.vocab(), max_len);
    let mut total = 0.0;
    for p in problems {
        total += outcome_probs(policy, &p.input, &outcomes)?
            .iter()
            .filter(|(y, _)| p.correct.contains(y))
            .map(|(_, q)| q)
            .sum::<f64>();
    }
    Ok(total / problems.len() as f64)
}

/// Exact EM on `spec.instances` random instances. Each starts from a random
/// full-support policy with `q0` uniform over the correct outputs.
pub fn run_exact_em(spec: &ExactSpec, iterations: usize, master_seed: u64) -> Result<Vec<ExactIterationRecord>> {
    let mut all = Vec::new();
    for k in 0..spec.instances {
        let inst = gen_exact_instance(spec, derive_seed(master_seed, "exact-instance", k as u64))?;
        let q0 = uniform_correct_q(&inst.problems);
        let (records, _) = run_exact_em_from(
            &format!("instance-{k}"),
            &inst.init,
            q0,
            &inst.problems,
            inst.max_len,
            iterations,
        )?;
        all.extend(records);
    }
    Ok(all)
}
