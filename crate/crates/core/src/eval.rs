//! Evaluation: greedy accuracy, pass@k, majority voting, train/test gap and
//! transfer to other task families.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from};
use crate::seqpolicy::{greedy_decode, sample_sequence, DecodeParams, SequencePolicy, Vocab};
use crate::tasks::{extract_answer, verify_binary, Problem};

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) after the multiplication.
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

/// Unbiased pass@k: the probability that a uniformly chosen `k`-subset of
/// `n` samples, `c` of them correct, contains a correct one.
///
/// Evaluated as `(C(n,k) - C(n-c,k)) / C(n,k)` in exact integers, falling back
/// to the product form `1 - Π (1 - k/i)` when the binomials overflow.
pub fn pass_at_k_estimator(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(invalid(format!("correct count {c} exceeds sample count {n}")));
    }
    if k == 0 || k > n {
        return Err(invalid(format!("k must lie in 1..={n}, got {k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    if let (Some(all), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        return Ok((all - miss) as f64 / all as f64);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// Fraction of problems whose greedy decode verifies.
pub fn greedy_accuracy<P: SequencePolicy + ?Sized>(policy: &P, problems: &[Problem], max_len: usize) -> Result<f64> {
    Ok(mean(&greedy_correct(policy, problems, max_len)?))
}

fn greedy_correct<P: SequencePolicy + ?Sized>(policy: &P, problems: &[Problem], max_len: usize) -> Result<Vec<bool>> {
    problems
        .par_iter()
        .map(|p| Ok(verify_binary(p, &greedy_decode(policy, &p.input, max_len)?) == 1))
        .collect()
}

fn mean(flags: &[bool]) -> f64 {
    if flags.is_empty() {
        return 0.0;
    }
    flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassPoint {
    pub k: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAtKCurve {
    pub n: u64,
    pub points: Vec<PassPoint>,
    /// Correct samples out of `n`, per problem in input order.
    pub correct: Vec<u64>,
}

impl PassAtKCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,value\n");
        for p in &self.points {
            out.push_str(&format!("{},{}\n", p.k, p.value));
        }
        out
    }

    pub fn value(&self, k: u64) -> Option<f64> {
        self.points.iter().find(|p| p.k == k).map(|p| p.value)
    }
}

/// Samples `n` outputs per problem and averages pass@k over problems.
pub fn eval_pass_at_k<P: SequencePolicy + ?Sized>(
    policy: &P,
    problems: &[Problem],
    n: u64,
    ks: &[u64],
    decode: &DecodeParams,
    seed: u64,
) -> Result<PassAtKCurve> {
    if ks.iter().any(|&k| k == 0 || k > n) {
        return Err(invalid(format!("every k must lie in 1..={n}")));
    }
    let correct: Vec<u64> = problems
        .par_iter()
        .map(|p| {
            let mut rng = rng_from(derive_seed(seed, &p.id, 1));
            let mut c = 0;
            for _ in 0..n {
                let y = sample_sequence(policy, &p.input, decode, &mut rng)?;
                c += u64::from(verify_binary(p, &y));
            }
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let points = ks
        .iter()
        .map(|&k| {
            let total: f64 = correct
                .iter()
                .map(|&c| pass_at_k_estimator(n, c, k))
                .sum::<Result<f64>>()?;
            Ok(PassPoint {
                k,
                value: if problems.is_empty() { 0.0 } else { total / problems.len() as f64 },
            })
        })
        .collect::<Result<_>>()?;
    Ok(PassAtKCurve { n, points, correct })
}

/// Modal answer; ties go to the lexicographically smallest. Malformed
/// outputs (`None`) do not vote.
pub fn vote<'a>(answers: impl IntoIterator<Item = Option<&'a str>>) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers.into_iter().flatten() {
        *counts.entry(a).or_default() += 1;
    }
    // BTreeMap iterates in ascending order, so the first maximum wins.
    let mut best: Option<(&str, usize)> = None;
    for (a, c) in counts {
        if best.map_or(true, |(_, b)| c > b) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub answer: Option<String>,
    pub correct: bool,
    pub valid_votes: usize,
}

/// Samples `n` outputs and votes over their extracted answers.
pub fn majority_vote<P: SequencePolicy + ?Sized>(
    policy: &P,
    problem: &Problem,
    n: usize,
    decode: &DecodeParams,
    seed: u64,
) -> Result<VoteOutcome> {
    let mut rng = rng_from(derive_seed(seed, &problem.id, 2));
    let mut answers = Vec::with_capacity(n);
    for _ in 0..n {
        let y = sample_sequence(policy, &problem.input, decode, &mut rng)?;
        answers.push(extract_answer(problem, &y));
    }
    let answer = vote(answers.iter().map(|a| a.as_deref()));
    Ok(VoteOutcome {
        correct: answer.as_deref() == Some(problem.answer_key.as_str()),
        valid_votes: answers.iter().filter(|a| a.is_some()).count(),
        answer,
    })
}

/// What to compute in an [`EvalReport`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    #[serde(default = "yes")]
    pub greedy: bool,
    #[serde(default)]
    pub pass_at_k: Option<PassAtKConfig>,
    #[serde(default)]
    pub majority_vote: Option<VoteConfig>,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassAtKConfig {
    pub n: u64,
    pub ks: Vec<u64>,
    pub decode: DecodeParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoteConfig {
    pub n: usize,
    pub decode: DecodeParams,
}

impl EvalConfig {
    pub fn greedy_only(max_len: usize) -> Self {
        Self {
            max_len,
            greedy: true,
            pass_at_k: None,
            majority_vote: None,
        }
    }

    /// Greedy accuracy, pass@k at temperature 1 with full support, and a
    /// 64-sample majority vote.
    pub fn full(vocab_size: usize, max_len: usize, n: u64, ks: Vec<u64>) -> Self {
        let decode = DecodeParams::full_support(vocab_size, max_len);
        Self {
            max_len,
            greedy: true,
            pass_at_k: Some(PassAtKConfig { n, ks, decode }),
            majority_vote: Some(VoteConfig { n: 64, decode }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemDetail {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy_correct: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples_correct: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vote: Option<VoteOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MajorityVoteSummary {
    pub accuracy: f64,
    pub samples: usize,
}

/// Evaluation of one checkpoint on one problem split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub checkpoint_id: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub greedy_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pass_at_k: Option<PassAtKCurve>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub majority_vote: Option<MajorityVoteSummary>,
    pub problems: Vec<ProblemDetail>,
}

pub const EVAL_SCHEMA_VERSION: u32 = 1;

pub fn evaluate<P: SequencePolicy + ?Sized>(
    policy: &P,
    checkpoint_id: &str,
    problems: &[Problem],
    split: &str,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let greedy = if config.greedy {
        Some(greedy_correct(policy, problems, config.max_len)?)
    } else {
        None
    };
    let pass = match &config.pass_at_k {
        Some(c) => Some(eval_pass_at_k(policy, problems, c.n, &c.ks, &c.decode, seed)?),
        None => None,
    };
    let votes: Option<Vec<VoteOutcome>> = match &config.majority_vote {
        Some(c) => Some(
            problems
                .par_iter()
                .map(|p| majority_vote(policy, p, c.n, &c.decode, seed))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let details = problems
        .iter()
        .enumerate()
        .map(|(i, p)| ProblemDetail {
            id: p.id.clone(),
            greedy_correct: greedy.as_ref().map(|g| g[i]),
            samples_correct: pass.as_ref().map(|c| c.correct[i]),
            vote: votes.as_ref().map(|v| v[i].clone()),
        })
        .collect();
    Ok(EvalReport {
        schema_version: EVAL_SCHEMA_VERSION,
        checkpoint_id: checkpoint_id.to_string(),
        split: split.to_string(),
        greedy_accuracy: greedy.as_deref().map(mean),
        majority_vote: match (&votes, &config.majority_vote) {
            (Some(v), Some(c)) => Some(MajorityVoteSummary {
                accuracy: mean(&v.iter().map(|o| o.correct).collect::<Vec<_>>()),
                samples: c.n,
            }),
            _ => None,
        },
        pass_at_k: pass,
        problems: details,
    })
}

/// Evaluates on a task family the policy may never have trained on. The
/// held-out problems must be encoded in the policy's vocabulary.
pub fn transfer_eval<P: SequencePolicy + ?Sized>(
    policy: &P,
    checkpoint_id: &str,
    task_vocab: &Vocab,
    problems: &[Problem],
    split: &str,
    config: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    if policy.vocab().hash() != task_vocab.hash() {
        return Err(invalid(format!(
            "held-out task vocabulary {} does not match policy vocabulary {}",
            task_vocab.hash(),
            policy.vocab().hash()
        )));
    }
    evaluate(policy, checkpoint_id, problems, split, config, seed)
}

/// Train and test reward for one iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub iteration: usize,
    pub train_reward: f64,
    pub test_reward: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub rows: Vec<GapRow>,
    /// First iteration attaining the highest test reward.
    pub peak_test_iteration: usize,
}

/// Per-iteration `train - test` gap and the test-reward peak.
pub fn train_test_gap_report(rows: &[(usize, f64, f64)]) -> Result<GapReport> {
    if rows.len() < 2 {
        return Err(invalid("gap report needs at least two iterations"));
    }
    let rows: Vec<GapRow> = rows
        .iter()
        .map(|&(iteration, train_reward, test_reward)| GapRow {
            iteration,
            train_reward,
            test_reward,
            gap: train_reward - test_reward,
        })
        .collect();
    let mut peak = rows[0];
    for r in &rows[1..] {
        if r.test_reward > peak.test_reward {
            peak = *r;
        }
    }
    Ok(GapReport {
        peak_test_iteration: peak.iteration,
        rows,
    })
}
