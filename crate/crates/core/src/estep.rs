//! The Generate step: sample candidates, annotate rewards, then select and
//! weight the fine-tuning set.
//!
//! The pipeline is `generate_samples -> filter -> dedupe_and_cap ->
//! attach_weights -> mix_with_reference`. Every stage is a pure function of
//! its inputs and a seed.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{derive_seed, rng_from};
use crate::seqpolicy::{sample_sequence, sequence_log_prob, DecodeParams, LogProb, SequencePolicy, TokenSeq, WeightedExample};
use crate::tasks::{reward, Problem, ReferenceSolution, RewardValue};

/// One generated output with its reward and provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub problem_id: String,
    pub output: TokenSeq,
    pub reward: RewardValue,
    pub logprob: LogProb,
    pub iteration: usize,
    pub source_policy: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub samples_per_problem: usize,
    pub decode: DecodeParams,
    pub cap_per_problem: usize,
    #[serde(default = "default_true")]
    pub dedupe: bool,
    /// Annotate partial-credit scores alongside the binary reward.
    #[serde(default)]
    pub scalar_rewards: bool,
}

fn default_true() -> bool {
    true
}

impl GenerationConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.samples_per_problem == 0 {
            return Err(invalid("samples_per_problem must be positive"));
        }
        if self.cap_per_problem == 0 || self.cap_per_problem > self.samples_per_problem {
            return Err(invalid(format!(
                "cap_per_problem must lie in 1..={}, got {}",
                self.samples_per_problem, self.cap_per_problem
            )));
        }
        self.decode.validate(vocab_size)
    }
}

/// Samples `N` outputs per problem from `policy`.
///
/// Each problem draws from its own stream seeded by `(seed, problem id)`, so
/// results do not depend on thread scheduling or problem order.
pub fn generate_samples<P: SequencePolicy + ?Sized>(
    policy: &P,
    problems: &[Problem],
    config: &GenerationConfig,
    source_policy: &str,
    iteration: usize,
    seed: u64,
) -> Result<Vec<SampleRecord>> {
    config.validate(policy.vocab().size())?;
    let per_problem: Vec<Result<Vec<SampleRecord>>> = problems
        .par_iter()
        .map(|p| {
            let mut rng = rng_from(derive_seed(seed, &p.id, 0));
            let mut out = Vec::with_capacity(config.samples_per_problem);
            for _ in 0..config.samples_per_problem {
                let y = sample_sequence(policy, &p.input, &config.decode, &mut rng)?;
                let logprob = sequence_log_prob(policy, &p.input, &y)?;
                out.push(SampleRecord {
                    problem_id: p.id.clone(),
                    reward: reward(p, &y, config.scalar_rewards),
                    output: y,
                    logprob,
                    iteration,
                    source_policy: source_policy.to_string(),
                });
            }
            Ok(out)
        })
        .collect();
    let mut records = Vec::with_capacity(problems.len() * config.samples_per_problem);
    for r in per_problem {
        records.extend(r?);
    }
    Ok(records)
}

/// Record indices grouped by problem, in order of first appearance.
fn group_by_problem(records: &[SampleRecord]) -> Vec<Vec<usize>> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let g = *slot.entry(&r.problem_id).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    groups
}

fn pick(records: &[SampleRecord], mut keep: Vec<usize>) -> Vec<SampleRecord> {
    keep.sort_unstable();
    keep.into_iter().map(|i| records[i].clone()).collect()
}

/// Per problem: drop repeated outputs (when `dedupe` is set), then keep a
/// uniformly random subset of at most `cap` records, in original order.
pub fn dedupe_and_cap(records: &[SampleRecord], config: &GenerationConfig, seed: u64) -> Vec<SampleRecord> {
    let mut keep = Vec::new();
    for group in group_by_problem(records) {
        let mut seen = HashSet::new();
        let distinct: Vec<usize> = group
            .into_iter()
            .filter(|&i| !config.dedupe || seen.insert(&records[i].output))
            .collect();
        if distinct.len() <= config.cap_per_problem {
            keep.extend(distinct);
        } else {
            let mut rng = rng_from(derive_seed(seed, &records[distinct[0]].problem_id, 0));
            let chosen = sample(&mut rng, distinct.len(), config.cap_per_problem);
            keep.extend(chosen.into_iter().map(|j| distinct[j]));
        }
    }
    pick(records, keep)
}

/// Keeps records whose binary reward exceeds `tau`. Every `tau` in `(0, 1)`
/// selects exactly the correct records.
pub fn filter_binary(records: &[SampleRecord], tau: f64) -> Result<Vec<SampleRecord>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid(format!("binary threshold must lie in (0, 1), got {tau}")));
    }
    Ok(records
        .iter()
        .filter(|r| f64::from(r.reward.binary) > tau)
        .cloned()
        .collect())
}

/// Keeps records whose reward is strictly above `tau`.
pub fn filter_threshold_global(records: &[SampleRecord], tau: f64) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.reward.value() > tau).cloned().collect()
}

/// Applies an increasing threshold schedule. Each set is drawn from the
/// previous one, so the chain is nested by construction.
pub fn filter_threshold_schedule(records: &[SampleRecord], taus: &[f64]) -> Result<Vec<Vec<SampleRecord>>> {
    if taus.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(invalid("threshold schedule must be non-decreasing"));
    }
    let mut current = records.to_vec();
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        current = filter_threshold_global(&current, tau);
        out.push(current.clone());
    }
    Ok(out)
}

/// Nearest-rank percentile of an ascending-sorted slice.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Per problem, keeps records at or above the nearest-rank `p`-th percentile
/// of that problem's rewards.
pub fn filter_percentile(records: &[SampleRecord], p: f64) -> Result<Vec<SampleRecord>> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(invalid(format!("percentile must lie in (0, 100], got {p}")));
    }
    let mut keep = Vec::new();
    for group in group_by_problem(records) {
        let mut values: Vec<f64> = group.iter().map(|&i| records[i].reward.value()).collect();
        values.sort_by(f64::total_cmp);
        let cut = nearest_rank(&values, p);
        keep.extend(group.into_iter().filter(|&i| records[i].reward.value() >= cut));
    }
    Ok(pick(records, keep))
}

/// Per problem, keeps records strictly above `gamma * max + (1 - gamma) * mean`.
pub fn filter_interpolated(records: &[SampleRecord], gamma: f64) -> Result<Vec<SampleRecord>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid(format!("interpolation gamma must lie in [0, 1], got {gamma}")));
    }
    let mut keep = Vec::new();
    for group in group_by_problem(records) {
        let values: Vec<f64> = group.iter().map(|&i| records[i].reward.value()).collect();
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let tau = gamma * max + (1.0 - gamma) * mean;
        keep.extend(group.into_iter().filter(|&i| records[i].reward.value() > tau));
    }
    Ok(pick(records, keep))
}

/// One record per problem: highest reward, then highest log-probability,
/// then the lexicographically smallest output.
pub fn select_raft_max(records: &[SampleRecord]) -> Vec<SampleRecord> {
    let mut keep = Vec::new();
    for group in group_by_problem(records) {
        let best = group
            .into_iter()
            .reduce(|a, b| {
                let (ra, rb) = (&records[a], &records[b]);
                let better = rb
                    .reward
                    .value()
                    .total_cmp(&ra.reward.value())
                    .then(rb.logprob.partial_cmp(&ra.logprob).unwrap_or(std::cmp::Ordering::Equal))
                    .then(ra.output.cmp(&rb.output));
                if better.is_gt() {
                    b
                } else {
                    a
                }
            })
            .expect("groups are non-empty");
        keep.push(best);
    }
    pick(records, keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    Indicator,
    Identity,
    Exp,
}

/// Selection rule of the Generate step.
#[derive(Clone, Debug, PartialEq)]
pub enum FilterMode {
    BinaryTau { tau: f64 },
    GlobalThreshold { tau: f64 },
    Percentile { p: f64 },
    Interpolation { gamma: f64 },
    RaftMax,
}

/// Serialized flat, e.g. `{"mode": "percentile", "p": 75, "weighting": "identity"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FilterSpecWire", into = "FilterSpecWire")]
pub struct FilterSpec {
    pub mode: FilterMode,
    pub weighting: Weighting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FilterKind {
    BinaryTau,
    GlobalThreshold,
    Percentile,
    Interpolation,
    RaftMax,
}

// serde's flatten cannot be combined with deny_unknown_fields, so the flat
// form goes through this struct instead.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilterSpecWire {
    mode: FilterKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    weighting: Weighting,
}

impl TryFrom<FilterSpecWire> for FilterSpec {
    type Error = String;

    fn try_from(w: FilterSpecWire) -> std::result::Result<Self, String> {
        let given = [("tau", w.tau.is_some()), ("p", w.p.is_some()), ("gamma", w.gamma.is_some())];
        let (mode, wanted) = match w.mode {
            FilterKind::BinaryTau => (w.tau.map(|tau| FilterMode::BinaryTau { tau }), Some("tau")),
            FilterKind::GlobalThreshold => (w.tau.map(|tau| FilterMode::GlobalThreshold { tau }), Some("tau")),
            FilterKind::Percentile => (w.p.map(|p| FilterMode::Percentile { p }), Some("p")),
            FilterKind::Interpolation => (w.gamma.map(|gamma| FilterMode::Interpolation { gamma }), Some("gamma")),
            FilterKind::RaftMax => (Some(FilterMode::RaftMax), None),
        };
        if let Some((name, _)) = given.iter().find(|(name, set)| *set && Some(*name) != wanted) {
            return Err(format!("filter mode {:?} does not take `{name}`", w.mode));
        }
        let mode = mode.ok_or_else(|| format!("filter mode {:?} needs `{}`", w.mode, wanted.unwrap_or("")))?;
        Ok(Self {
            mode,
            weighting: w.weighting,
        })
    }
}

impl From<FilterSpec> for FilterSpecWire {
    fn from(f: FilterSpec) -> Self {
        let mut w = FilterSpecWire {
            mode: FilterKind::RaftMax,
            tau: None,
            p: None,
            gamma: None,
            weighting: f.weighting,
        };
        match f.mode {
            FilterMode::BinaryTau { tau } => (w.mode, w.tau) = (FilterKind::BinaryTau, Some(tau)),
            FilterMode::GlobalThreshold { tau } => (w.mode, w.tau) = (FilterKind::GlobalThreshold, Some(tau)),
            FilterMode::Percentile { p } => (w.mode, w.p) = (FilterKind::Percentile, Some(p)),
            FilterMode::Interpolation { gamma } => (w.mode, w.gamma) = (FilterKind::Interpolation, Some(gamma)),
            FilterMode::RaftMax => {}
        }
        w
    }
}

impl FilterSpec {
    pub fn binary() -> Self {
        Self {
            mode: FilterMode::BinaryTau { tau: 0.5 },
            weighting: Weighting::Indicator,
        }
    }

    pub fn validate(&self, scalar_rewards: bool) -> Result<()> {
        match self.mode {
            FilterMode::BinaryTau { tau } if !(tau > 0.0 && tau < 1.0) => {
                Err(invalid(format!("binary threshold must lie in (0, 1), got {tau}")))
            }
            FilterMode::Percentile { p } if !(p > 0.0 && p <= 100.0) => {
                Err(invalid(format!("percentile must lie in (0, 100], got {p}")))
            }
            FilterMode::Interpolation { gamma } if !(0.0..=1.0).contains(&gamma) => {
                Err(invalid(format!("interpolation gamma must lie in [0, 1], got {gamma}")))
            }
            FilterMode::GlobalThreshold { tau } if !tau.is_finite() => Err(invalid("threshold must be finite")),
            FilterMode::Percentile { .. } | FilterMode::Interpolation { .. } if !scalar_rewards => Err(invalid(
                "percentile and interpolation filters need scalar rewards",
            )),
            _ => Ok(()),
        }
    }
}

pub fn apply_filter(records: &[SampleRecord], spec: &FilterSpec) -> Result<Vec<SampleRecord>> {
    match spec.mode {
        FilterMode::BinaryTau { tau } => filter_binary(records, tau),
        FilterMode::GlobalThreshold { tau } => Ok(filter_threshold_global(records, tau)),
        FilterMode::Percentile { p } => filter_percentile(records, p),
        FilterMode::Interpolation { gamma } => filter_interpolated(records, gamma),
        FilterMode::RaftMax => Ok(select_raft_max(records)),
    }
}

/// Attaches M-step weights. `Exp` weights are `exp(r)` normalized within
/// each problem.
pub fn attach_weights(records: &[SampleRecord], f: Weighting) -> Result<Vec<(SampleRecord, f64)>> {
    match f {
        Weighting::Indicator => Ok(records.iter().map(|r| (r.clone(), 1.0)).collect()),
        Weighting::Identity => records
            .iter()
            .map(|r| {
                let w = r.reward.value();
                if w < 0.0 {
                    Err(invalid(format!("identity weighting needs non-negative rewards, got {w}")))
                } else {
                    Ok((r.clone(), w))
                }
            })
            .collect(),
        Weighting::Exp => {
            let mut weights = vec![0.0; records.len()];
            for group in group_by_problem(records) {
                let max = group
                    .iter()
                    .map(|&i| records[i].reward.value())
                    .fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = group.iter().map(|&i| (records[i].reward.value() - max).exp()).sum();
                for &i in &group {
                    weights[i] = (records[i].reward.value() - max).exp() / total;
                }
            }
            Ok(records.iter().cloned().zip(weights).collect())
        }
    }
}

/// Turns weighted records into training examples.
pub fn to_examples(weighted: &[(SampleRecord, f64)], problems: &[Problem]) -> Result<Vec<WeightedExample>> {
    let inputs: HashMap<&str, &TokenSeq> = problems.iter().map(|p| (p.id.as_str(), &p.input)).collect();
    weighted
        .iter()
        .map(|(r, w)| {
            let input = inputs
                .get(r.problem_id.as_str())
                .ok_or_else(|| invalid(format!("record for unknown problem {}", r.problem_id)))?;
            Ok(WeightedExample {
                problem_id: r.problem_id.clone(),
                input: (*input).clone(),
                output: r.output.clone(),
                weight: *w,
            })
        })
        .collect()
}

/// Reference solutions as unit-weight training examples.
pub fn reference_examples(references: &[ReferenceSolution], problems: &[Problem]) -> Result<Vec<WeightedExample>> {
    let inputs: HashMap<&str, &TokenSeq> = problems.iter().map(|p| (p.id.as_str(), &p.input)).collect();
    references
        .iter()
        .map(|r| {
            let input = inputs
                .get(r.problem_id.as_str())
                .ok_or_else(|| invalid(format!("reference for unknown problem {}", r.problem_id)))?;
            Ok(WeightedExample {
                problem_id: r.problem_id.clone(),
                input: (*input).clone(),
                output: r.output.clone(),
                weight: 1.0,
            })
        })
        .collect()
}

/// Share of synthetic data in the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixSpec {
    pub lambda: f64,
    /// Size of the mixed set; defaults to the synthetic pool size.
    #[serde(default)]
    pub target_size: Option<usize>,
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            target_size: None,
        }
    }
}

/// Blends synthetic and reference examples. `lambda = 1` returns the
/// synthetic pool unchanged and `lambda = 0` the reference pool; otherwise
/// each of `target_size` draws picks the synthetic pool with probability
/// `lambda` and then a uniform element of that pool.
pub fn mix_with_reference(
    synthetic: &[WeightedExample],
    references: &[WeightedExample],
    lambda: f64,
    target_size: usize,
    seed: u64,
) -> Result<Vec<WeightedExample>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let need_synthetic = lambda > 0.0;
    let need_reference = lambda < 1.0;
    if need_synthetic && synthetic.is_empty() {
        return Err(invalid("synthetic pool is empty"));
    }
    if need_reference && references.is_empty() {
        return Err(invalid("reference pool is empty"));
    }
    if lambda == 1.0 {
        return Ok(synthetic.to_vec());
    }
    if lambda == 0.0 {
        return Ok(references.to_vec());
    }
    let mut rng = rng_from(seed);
    Ok((0..target_size)
        .map(|_| {
            let pool = if rng.gen::<f64>() < lambda { synthetic } else { references };
            pool[rng.gen_range(0..pool.len())].clone()
        })
        .collect())
}

/// Everything one Generate step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct EStepOutput {
    pub records: Vec<SampleRecord>,
    pub selected: Vec<(SampleRecord, f64)>,
    pub survivors: BTreeMap<String, usize>,
}

impl EStepOutput {
    pub fn zero_survivor_problems(&self) -> usize {
        self.survivors.values().filter(|&&n| n == 0).count()
    }
}

/// Filter, cap and weight already generated records.
pub fn select(
    records: Vec<SampleRecord>,
    problems: &[Problem],
    gen: &GenerationConfig,
    filter: &FilterSpec,
    cap_seed: u64,
) -> Result<EStepOutput> {
    let filtered = apply_filter(&records, filter)?;
    let capped = dedupe_and_cap(&filtered, gen, cap_seed);
    let selected = attach_weights(&capped, filter.weighting)?;
    let mut survivors: BTreeMap<String, usize> = problems.iter().map(|p| (p.id.clone(), 0)).collect();
    for (r, _) in &selected {
        *survivors.entry(r.problem_id.clone()).or_default() += 1;
    }
    Ok(EStepOutput {
        records,
        selected,
        survivors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqpolicy::{DecodeMode, TabularPolicy};
    use crate::tasks::{lab_vocab, output_from_text, problem_from_text, TaskKind};
    use proptest::prelude::*;

    fn rec(pid: &str, out: &[u32], value: f64, logprob: f64) -> SampleRecord {
        SampleRecord {
            problem_id: pid.into(),
            output: TokenSeq::terminated(out, 0),
            reward: RewardValue {
                binary: u8::from(value == 1.0),
                scalar: Some(value),
            },
            logprob: LogProb::finite(logprob),
            iteration: 1,
            source_policy: "p".into(),
        }
    }

    fn bin(pid: &str, out: &[u32], binary: u8) -> SampleRecord {
        SampleRecord {
            reward: RewardValue { binary, scalar: None },
            ..rec(pid, out, 0.0, -1.0)
        }
    }

    fn values(rs: &[SampleRecord]) -> Vec<f64> {
        rs.iter().map(|r| r.reward.value()).collect()
    }

    fn gen_cfg(n: usize, cap: usize) -> GenerationConfig {
        GenerationConfig {
            samples_per_problem: n,
            decode: DecodeParams::generation_default(lab_vocab().size(), 6),
            cap_per_problem: cap,
            dedupe: true,
            scalar_rewards: false,
        }
    }

    fn reverse_problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| problem_from_text(&format!("r{i}"), TaskKind::Reverse, "Rab=", "ba"))
            .collect()
    }

    #[test]
    fn generates_n_records_per_problem() {
        let policy = TabularPolicy::uniform(lab_vocab().clone(), 2);
        let problems = reverse_problems(5);
        let records = generate_samples(&policy, &problems, &gen_cfg(32, 10), "base", 1, 4).unwrap();
        assert_eq!(records.len(), 160);
        let again = generate_samples(&policy, &problems, &gen_cfg(32, 10), "base", 1, 4).unwrap();
        assert_eq!(serde_json::to_string(&records).unwrap(), serde_json::to_string(&again).unwrap());
    }

    #[test]
    fn delta_policy_gets_full_reward_and_greedy_repeats() {
        let v = lab_vocab().clone();
        let mut policy = TabularPolicy::uniform(v.clone(), 2);
        let ids = output_from_text("ba").ids;
        let problem = problem_from_text("r", TaskKind::Reverse, "Rab=", "ba");
        let mut ctx = problem.input.ids.clone();
        for &t in &ids {
            let key = policy.key_for(&ctx);
            let mut row = vec![0.0; v.size()];
            row[t as usize] = 1.0;
            policy.set_row(key, row).unwrap();
            ctx.push(t);
        }
        let problems = vec![problem];
        let records = generate_samples(&policy, &problems, &gen_cfg(8, 4), "delta", 1, 0).unwrap();
        assert!(records.iter().all(|r| r.reward.binary == 1));

        let uniform = TabularPolicy::uniform(v, 2);
        let mut cfg = gen_cfg(8, 4);
        cfg.decode.mode = DecodeMode::Greedy;
        let greedy = generate_samples(&uniform, &problems, &cfg, "u", 1, 0).unwrap();
        assert!(greedy.iter().all(|r| r.output == greedy[0].output));
    }

    #[test]
    fn cap_and_dedupe_examples() {
        let many: Vec<_> = (0..32).map(|i| bin("a", &[1, 2 + (i % 20)], 1)).collect();
        let distinct: Vec<_> = (0..32).map(|i| bin("a", &[1, 100 + i], 1)).collect();
        assert_eq!(dedupe_and_cap(&distinct, &gen_cfg(32, 10), 1).len(), 10);
        assert_eq!(dedupe_and_cap(&many, &gen_cfg(32, 10), 1).len(), 10);
        let three: Vec<_> = (0..3).map(|i| bin("a", &[i + 1], 1)).collect();
        assert_eq!(dedupe_and_cap(&three, &gen_cfg(32, 10), 1).len(), 3);
        let copies: Vec<_> = (0..20).map(|_| bin("a", &[5], 1)).collect();
        assert_eq!(dedupe_and_cap(&copies, &gen_cfg(32, 10), 1).len(), 1);
    }

    #[test]
    fn binary_filter_examples() {
        let rs = vec![bin("a", &[1], 1), bin("a", &[2], 0), bin("a", &[3], 1)];
        let low = filter_binary(&rs, 0.2).unwrap();
        assert_eq!(low, vec![rs[0].clone(), rs[2].clone()]);
        assert_eq!(filter_binary(&rs, 0.8).unwrap(), low);
        let zeros = vec![bin("a", &[1], 0), bin("a", &[2], 0)];
        assert!(filter_binary(&zeros, 0.5).unwrap().is_empty());
        assert!(filter_binary(&rs, 0.0).is_err());
        assert!(filter_binary(&rs, 1.0).is_err());
    }

    #[test]
    fn global_threshold_examples() {
        let rs = vec![rec("a", &[1], 0.2, -1.0), rec("a", &[2], 0.5, -1.0), rec("b", &[3], 0.9, -1.0)];
        assert_eq!(values(&filter_threshold_global(&rs, 0.4)), vec![0.5, 0.9]);
        assert_eq!(filter_threshold_global(&rs, -1.0).len(), 3);
        let chain = filter_threshold_schedule(&rs, &[0.3, 0.5, 0.7]).unwrap();
        assert_eq!(values(&chain[0]), vec![0.5, 0.9]);
        assert_eq!(values(&chain[1]), vec![0.9]);
        assert_eq!(values(&chain[2]), vec![0.9]);
    }

    #[test]
    fn percentile_examples() {
        let rs: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| rec("a", &[v as u32], v, -1.0)).collect();
        assert_eq!(values(&filter_percentile(&rs, 75.0).unwrap()), vec![3.0, 4.0]);
        let tied = vec![rec("a", &[1], 4.0, -1.0), rec("a", &[2], 1.0, -1.0), rec("a", &[3], 4.0, -1.0)];
        assert_eq!(values(&filter_percentile(&tied, 100.0).unwrap()), vec![4.0, 4.0]);
        let single = vec![rec("z", &[1], 0.1, -1.0)];
        for p in [1.0, 50.0, 100.0] {
            assert_eq!(filter_percentile(&single, p).unwrap(), single);
        }
    }

    #[test]
    fn interpolation_examples() {
        let rs = vec![rec("a", &[1], 2.0, -1.0), rec("a", &[2], 4.0, -1.0), rec("a", &[3], 10.0, -1.0)];
        assert_eq!(values(&filter_interpolated(&rs, 0.5).unwrap()), vec![10.0]);
        // Threshold is the mean 16/3.
        assert_eq!(values(&filter_interpolated(&rs, 0.0).unwrap()), vec![10.0]);
        let rs2 = vec![rec("a", &[1], 2.0, -1.0), rec("a", &[2], 7.0, -1.0), rec("a", &[3], 9.0, -1.0)];
        assert_eq!(values(&filter_interpolated(&rs2, 0.0).unwrap()), vec![7.0, 9.0]);
        assert!(filter_interpolated(&rs, 1.0).unwrap().is_empty());
    }

    #[test]
    fn raft_examples() {
        let rs = vec![rec("a", &[1], 0.0, -5.0), rec("a", &[2], 1.0, -2.0), rec("a", &[3], 1.0, -3.0)];
        assert_eq!(select_raft_max(&rs), vec![rs[1].clone()]);
        let single = vec![rec("a", &[4], 0.3, -1.0)];
        assert_eq!(select_raft_max(&single), single);
        let flat = vec![rec("a", &[3], 0.5, -1.0), rec("a", &[1, 2], 0.5, -1.0), rec("a", &[2], 0.5, -1.0)];
        assert_eq!(select_raft_max(&flat), vec![flat[1].clone()]);
    }

    #[test]
    fn weighting_examples() {
        let bins = vec![bin("a", &[1], 1), bin("a", &[2], 1)];
        assert!(attach_weights(&bins, Weighting::Indicator).unwrap().iter().all(|(_, w)| *w == 1.0));
        let rs = vec![rec("a", &[1], 0.5, -1.0), rec("a", &[2], 1.0, -1.0)];
        let id: Vec<f64> = attach_weights(&rs, Weighting::Identity).unwrap().iter().map(|p| p.1).collect();
        assert_eq!(id, vec![0.5, 1.0]);
        let rs = vec![rec("a", &[1], 0.0, -1.0), rec("a", &[2], 1.0, -1.0)];
        let ex: Vec<f64> = attach_weights(&rs, Weighting::Exp).unwrap().iter().map(|p| p.1).collect();
        let e = std::f64::consts::E;
        assert!((ex[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((ex[1] - e / (1.0 + e)).abs() < 1e-15);
        let neg = vec![rec("a", &[1], -0.5, -1.0)];
        assert!(attach_weights(&neg, Weighting::Identity).is_err());
    }

    fn examples(tag: &str, n: usize) -> Vec<WeightedExample> {
        (0..n)
            .map(|i| WeightedExample {
                problem_id: format!("{tag}{i}"),
                input: TokenSeq::open(vec![1]),
                output: TokenSeq::terminated(&[2], 0),
                weight: 1.0,
            })
            .collect()
    }

    #[test]
    fn mixture_examples() {
        let syn = examples("s", 5);
        let refs = examples("r", 3);
        assert_eq!(mix_with_reference(&syn, &refs, 1.0, 1000, 0).unwrap(), syn);
        assert_eq!(mix_with_reference(&syn, &refs, 0.0, 1000, 0).unwrap(), refs);
        let mixed = mix_with_reference(&syn, &refs, 0.5, 1000, 7).unwrap();
        assert_eq!(mixed.len(), 1000);
        let frac = mixed.iter().filter(|e| e.problem_id.starts_with('s')).count() as f64 / 1000.0;
        let sigma = (0.25f64 / 1000.0).sqrt();
        assert!((frac - 0.5).abs() <= 3.0 * sigma, "{frac}");
        assert!(mix_with_reference(&[], &refs, 0.5, 10, 0).is_err());
        assert!(mix_with_reference(&syn, &[], 0.0, 10, 0).is_err());
        assert!(mix_with_reference(&syn, &refs, 1.5, 10, 0).is_err());
    }

    fn arb_records() -> impl Strategy<Value = Vec<SampleRecord>> {
        proptest::collection::vec((0u8..4, 0u32..6, 0u32..=10, -10.0f64..0.0), 1..60).prop_map(|rows| {
            rows.into_iter()
                .map(|(p, o, v, lp)| {
                    let value = f64::from(v) / 10.0;
                    SampleRecord {
                        problem_id: format!("p{p}"),
                        output: TokenSeq::terminated(&[o + 1], 0),
                        reward: RewardValue {
                            binary: u8::from(v == 10),
                            scalar: Some(value),
                        },
                        logprob: LogProb::finite(lp),
                        iteration: 0,
                        source_policy: "x".into(),
                    }
                })
                .collect()
        })
    }

    fn is_subset(sub: &[SampleRecord], sup: &[SampleRecord]) -> bool {
        let mut it = sup.iter();
        sub.iter().all(|s| it.any(|t| t == s))
    }

    proptest! {
        #[test]
        fn binary_filter_ignores_tau(rs in arb_records()) {
            let a = filter_binary(&rs, 0.01).unwrap();
            prop_assert_eq!(&a, &filter_binary(&rs, 0.5).unwrap());
            prop_assert_eq!(&a, &filter_binary(&rs, 0.99).unwrap());
            prop_assert!(a.iter().all(|r| r.reward.binary == 1));
        }

        #[test]
        fn filters_return_ordered_subsets(rs in arb_records(), tau in -0.5f64..1.5, p in 0.5f64..=100.0, g in 0.0f64..=1.0, cap in 1usize..5, seed in any::<u64>()) {
            for out in [
                filter_threshold_global(&rs, tau),
                filter_percentile(&rs, p).unwrap(),
                filter_interpolated(&rs, g).unwrap(),
                select_raft_max(&rs),
                dedupe_and_cap(&rs, &gen_cfg(64, cap), seed),
            ] {
                prop_assert!(is_subset(&out, &rs));
            }
            let capped = dedupe_and_cap(&rs, &gen_cfg(64, cap), seed);
            let mut per: HashMap<&str, usize> = HashMap::new();
            for r in &capped {
                *per.entry(&r.problem_id).or_default() += 1;
            }
            prop_assert!(per.values().all(|&n| n <= cap));
            let raft = select_raft_max(&rs);
            prop_assert_eq!(raft.len(), group_by_problem(&rs).len());
        }

        #[test]
        fn thresholds_nest(rs in arb_records(), mut taus in proptest::collection::vec(-0.2f64..1.2, 1..6)) {
            taus.sort_by(f64::total_cmp);
            let direct: Vec<_> = taus.iter().map(|&t| filter_threshold_global(&rs, t)).collect();
            prop_assert_eq!(&direct, &filter_threshold_schedule(&rs, &taus).unwrap());
            for w in direct.windows(2) {
                prop_assert!(is_subset(&w[1], &w[0]));
            }
        }

        #[test]
        fn weights_preserve_count_and_sign(rs in arb_records()) {
            for f in [Weighting::Indicator, Weighting::Identity, Weighting::Exp] {
                let w = attach_weights(&rs, f).unwrap();
                prop_assert_eq!(w.len(), rs.len());
                prop_assert!(w.iter().all(|(_, x)| *x >= 0.0));
                if f == Weighting::Indicator {
                    prop_assert!(w.iter().all(|(_, x)| *x == 1.0));
                }
            }
        }
    }
    #[test]
    fn filter_spec_wire_format() {
        let spec: FilterSpec = serde_json::from_str(r#"{"mode":"percentile","p":75,"weighting":"identity"}"#).unwrap();
        assert_eq!(spec.mode, FilterMode::Percentile { p: 75.0 });
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<FilterSpec>(&text).unwrap(), spec);
        let raft: FilterSpec = serde_json::from_str(r#"{"mode":"raft-max","weighting":"indicator"}"#).unwrap();
        assert_eq!(raft.mode, FilterMode::RaftMax);
        for bad in [
            r#"{"mode":"percentile","weighting":"identity"}"#,
            r#"{"mode":"binary-tau","tau":0.5,"p":3,"weighting":"indicator"}"#,
            r#"{"mode":"raft-max","tau":0.5,"weighting":"indicator"}"#,
            r#"{"mode":"binary-tau","tau":0.5,"weighting":"indicator","extra":1}"#,
        ] {
            assert!(serde_json::from_str::<FilterSpec>(bad).is_err(), "{bad}");
        }
    }
}
