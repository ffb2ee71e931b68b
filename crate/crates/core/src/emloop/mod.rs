//! The outer loop: Generate from the current policy, Improve from the base,
//! repeat. Also hosts exact EM on enumerable instances and the ablations.

mod ablation;
mod artifacts;
mod config;
mod exact;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use ablation::{run_ablation_dataset_size, run_ablation_single_iter_3x, run_distillation, ArmSummary, Comparison};
pub use artifacts::{git_object_hash, run_experiment, sha256_hex, write_run, ExperimentSummary, RunManifest, MANIFEST_SCHEMA_VERSION};
pub use config::{
    DistillSpec, ExactSpec, ExperimentConfig, FinalEvalSpec, Mode, NextGenerateFrom, PolicySpec, TaskSpec,
    ThresholdSchedule, CONFIG_SCHEMA_VERSION,
};
pub use exact::{
    compute_elbo_exact, exact_mstep, exact_posterior, gen_exact_instance, log_evidence, run_exact_em, run_exact_em_from,
    uniform_correct_q, ExactInstance, ExactIterationRecord,
    ExactProblem, QWeights,
};

use crate::error::{invalid, Result};
use crate::estep::{
    generate_samples, mix_with_reference, reference_examples, select, to_examples, FilterMode, FilterSpec,
    GenerationConfig, SampleRecord,
};
use crate::eval::greedy_accuracy;
use crate::mstep::{sft_train, tabular_mstep_closed_form, train_policy, CurvePoint, TrainConfig};
use crate::rng::{rng_from, PhaseSeeds};
use crate::seqpolicy::{clone_base, NeuralPolicy, Policy, SequencePolicy, TabularPolicy, WeightedExample};
use crate::tasks::{gen_problem_set, lab_vocab, Problem, ProblemSet};

/// Metrics for one iteration of one run. Iteration 0 is the base policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub run: String,
    pub iteration: usize,
    /// Greedy accuracy on the problems used for generation.
    pub train_reward: f64,
    pub val_reward: f64,
    pub test_reward: f64,
    /// Training examples after filtering, capping and mixing.
    pub dataset_size: usize,
    pub problems_with_zero_survivors: usize,
    pub samples_generated: usize,
    /// Share of generated samples the verifier accepted.
    pub sample_success_rate: f64,
    /// Set when no sample survived and the previous policy was carried over.
    pub skipped: bool,
    pub train_steps: usize,
    pub checkpoint_id: String,
    /// Checkpoint the Improve step started from.
    pub base_checkpoint_id: String,
    /// Checkpoint that generated this iteration's samples.
    pub source_policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub improve_steps: Option<Vec<ImproveStep>>,
}

/// One Improve step inside a threshold schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImproveStep {
    pub tau: f64,
    pub dataset_size: usize,
    pub val_reward: f64,
    pub checkpoint_id: String,
}

/// Selected training data of one iteration plus its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub run: String,
    pub iteration: usize,
    pub generation_seed: u64,
    pub cap_seed: u64,
    pub source_policy: String,
    pub samples_generated: usize,
    pub selected: usize,
    pub survivors_per_problem: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    #[serde(flatten)]
    pub record: SampleRecord,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct IterationArtifacts {
    pub iteration: usize,
    pub policy: Policy,
    pub dataset: Vec<DatasetRow>,
    pub manifest: Option<DatasetManifest>,
    pub curve: Vec<CurvePoint>,
}

/// Everything one run produced.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub run: String,
    pub records: Vec<IterationRecord>,
    pub final_policy: Policy,
    pub iterations: Vec<IterationArtifacts>,
}

impl RunResult {
    pub fn last(&self) -> &IterationRecord {
        self.records.last().expect("runs record iteration 0")
    }
}

/// Problems, frozen base checkpoint and seeds shared by every run of one
/// experiment.
#[derive(Clone, Debug)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub seeds: PhaseSeeds,
    pub problems: ProblemSet,
    pub base: Policy,
    pub warmup_curve: Vec<CurvePoint>,
    max_len: usize,
}

impl Lab {
    /// Draws the problems and builds the base: a random initialization,
    /// optionally followed by a supervised pass on the warm-up split.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.mode == Mode::ExactEm {
            return Err(invalid("exact-em experiments do not use a lab"));
        }
        let seeds = PhaseSeeds::from_master(config.master_seed);
        let task = config.task();
        let problems = gen_problem_set(&task.family, task.splits, seeds.tasks)?;
        let vocab = lab_vocab().clone();
        let max_len = config.generation().decode.max_len;
        let init = match *config.policy() {
            PolicySpec::Neural {
                window,
                embed_dim,
                hidden,
            } => Policy::Neural(NeuralPolicy::new_random(vocab, window, embed_dim, hidden, &mut rng_from(seeds.init))?),
            PolicySpec::Tabular { window } => Policy::Tabular(TabularPolicy::uniform(vocab, window)),
        };
        let mut lab = Self {
            config,
            seeds,
            problems,
            base: init,
            warmup_curve: Vec::new(),
            max_len,
        };
        if let Some(warm) = lab.config.warmup {
            if !lab.problems.warmup.is_empty() {
                let refs = reference_examples(&lab.problems.references_for(&lab.problems.warmup), &lab.problems.warmup)?;
                let (policy, curve, _) = lab.improve(&lab.base, &refs, &warm, seeds.warmup)?;
                lab.base = policy;
                lab.warmup_curve = curve;
            }
        }
        Ok(lab)
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn val_reward(&self, policy: &dyn SequencePolicy) -> Result<f64> {
        greedy_accuracy(policy, &self.problems.val, self.max_len)
    }

    /// Improve step from `start`: SGD for neural policies, the closed form
    /// for tabular ones.
    fn improve(
        &self,
        start: &Policy,
        data: &[WeightedExample],
        train: &TrainConfig,
        seed: u64,
    ) -> Result<(Policy, Vec<CurvePoint>, usize)> {
        match start {
            Policy::Neural(n) => {
                let mut validate = |p: &NeuralPolicy| self.val_reward(p);
                let out = train_policy(n, data, &mut validate, train, seed)?;
                Ok((Policy::Neural(out.policy), out.curve, out.steps_run))
            }
            Policy::Tabular(t) => {
                let fitted = tabular_mstep_closed_form(t, data)?;
                let score = self.val_reward(&fitted)?;
                let curve = vec![CurvePoint {
                    step: 0,
                    train_loss: crate::mstep::weighted_nll_loss(&fitted, data)?,
                    val_reward: score,
                }];
                Ok((Policy::Tabular(fitted), curve, 0))
            }
        }
    }

    fn record(
        &self,
        run: &str,
        iteration: usize,
        policy: &Policy,
        train_problems: &[Problem],
    ) -> Result<IterationRecord> {
        Ok(IterationRecord {
            run: run.to_string(),
            iteration,
            train_reward: greedy_accuracy(policy, train_problems, self.max_len)?,
            val_reward: self.val_reward(policy)?,
            test_reward: greedy_accuracy(policy, &self.problems.test, self.max_len)?,
            dataset_size: 0,
            problems_with_zero_survivors: 0,
            samples_generated: 0,
            sample_success_rate: 0.0,
            skipped: false,
            train_steps: 0,
            checkpoint_id: policy.checkpoint_id(),
            base_checkpoint_id: self.base.checkpoint_id(),
            source_policy: String::new(),
            improve_steps: None,
        })
    }

    fn base_result(&self, run: &str, train_problems: &[Problem]) -> Result<RunResult> {
        Ok(RunResult {
            run: run.to_string(),
            records: vec![self.record(run, 0, &self.base, train_problems)?],
            final_policy: self.base.clone(),
            iterations: vec![IterationArtifacts {
                iteration: 0,
                policy: self.base.clone(),
                dataset: Vec::new(),
                manifest: None,
                curve: self.warmup_curve.clone(),
            }],
        })
    }

    /// Supervised baseline: one fine-tuning pass on the train references.
    pub fn run_sft(&self, run: &str) -> Result<RunResult> {
        let train = &self.problems.train;
        let mut result = self.base_result(run, train)?;
        let refs = reference_examples(&self.problems.references_for(train), train)?;
        let seed = PhaseSeeds::at(self.seeds.train, 1);
        let (policy, curve, steps) = match &self.base {
            Policy::Neural(n) => {
                let mut validate = |p: &NeuralPolicy| self.val_reward(p);
                let out = sft_train(n, &refs, &mut validate, &self.config.train, seed)?;
                (Policy::Neural(out.policy), out.curve, out.steps_run)
            }
            base @ Policy::Tabular(_) => self.improve(base, &refs, &self.config.train, seed)?,
        };
        let mut rec = self.record(run, 1, &policy, train)?;
        rec.dataset_size = refs.len();
        rec.train_steps = steps;
        result.records.push(rec);
        result.iterations.push(IterationArtifacts {
            iteration: 1,
            policy: policy.clone(),
            dataset: Vec::new(),
            manifest: None,
            curve,
        });
        result.final_policy = policy;
        Ok(result)
    }

    /// The configured algorithm on the full train split.
    pub fn run_main(&self, run: &str) -> Result<RunResult> {
        let (gen, filter) = self.config.effective_estep();
        self.run_restem(run, &self.problems.train, self.config.iterations, &gen, &filter, None)
    }

    /// Generate/Improve for `iterations` rounds on `train_problems`.
    ///
    /// Samples come from the current policy (or from `teacher` when given);
    /// every Improve restarts from the frozen base.
    pub fn run_restem(
        &self,
        run: &str,
        train_problems: &[Problem],
        iterations: usize,
        gen: &GenerationConfig,
        filter: &FilterSpec,
        teacher: Option<&Policy>,
    ) -> Result<RunResult> {
        let mut result = self.base_result(run, train_problems)?;
        let mut current = self.base.clone();
        let refs = reference_examples(&self.problems.references_for(train_problems), train_problems)?;
        for it in 1..=iterations {
            let source = teacher.unwrap_or(&current);
            let source_id = source.checkpoint_id();
            let gen_seed = PhaseSeeds::at(self.seeds.generation, it);
            let cap_seed = PhaseSeeds::at(self.seeds.cap, it);
            let records = generate_samples(source, train_problems, gen, &source_id, it, gen_seed)?;
            let samples = records.len();
            let success = records.iter().filter(|r| r.reward.binary == 1).count() as f64 / samples.max(1) as f64;

            let schedule: Vec<(Option<f64>, FilterSpec)> = match &self.config.threshold_schedule {
                Some(s) => s
                    .taus
                    .iter()
                    .map(|&tau| {
                        (
                            Some(tau),
                            FilterSpec {
                                mode: FilterMode::GlobalThreshold { tau },
                                weighting: filter.weighting,
                            },
                        )
                    })
                    .collect(),
                None => vec![(None, filter.clone())],
            };

            let mut pool = records;
            let mut steps = Vec::new();
            let mut candidates: Vec<(Policy, Vec<CurvePoint>, usize, f64)> = Vec::new();
            let mut last_selection = None;
            for (j, (tau, spec)) in schedule.iter().enumerate() {
                let sel = select(pool.clone(), train_problems, gen, spec, cap_seed)?;
                // Later thresholds filter what earlier ones kept, after the
                // cap, so the training sets are nested.
                if tau.is_some() {
                    pool = sel.selected.iter().map(|(r, _)| r.clone()).collect();
                }
                let synthetic = to_examples(&sel.selected, train_problems)?;
                if synthetic.is_empty() {
                    if candidates.is_empty() {
                        last_selection = Some((sel, Vec::new()));
                    }
                    break;
                }
                let target = self.config.mix.target_size.unwrap_or(synthetic.len());
                let mix_seed = PhaseSeeds::at(self.seeds.mix, it * 64 + j);
                let data = mix_with_reference(&synthetic, &refs, self.config.mix.lambda, target, mix_seed)?;
                let base = clone_base(&self.base);
                let (policy, curve, n_steps) =
                    self.improve(&base, &data, &self.config.train, PhaseSeeds::at(self.seeds.train, it * 64 + j))?;
                let val = self.val_reward(&policy)?;
                if let Some(tau) = tau {
                    steps.push(ImproveStep {
                        tau: *tau,
                        dataset_size: data.len(),
                        val_reward: val,
                        checkpoint_id: policy.checkpoint_id(),
                    });
                }
                candidates.push((policy, curve, n_steps, val));
                last_selection = Some((sel, data));
            }

            let (sel, data) = last_selection.expect("schedule is non-empty");
            let dataset: Vec<DatasetRow> = sel
                .selected
                .iter()
                .map(|(r, w)| DatasetRow {
                    record: r.clone(),
                    weight: *w,
                })
                .collect();
            let manifest = DatasetManifest {
                run: run.to_string(),
                iteration: it,
                generation_seed: gen_seed,
                cap_seed,
                source_policy: source_id.clone(),
                samples_generated: samples,
                selected: sel.selected.len(),
                survivors_per_problem: sel.survivors.clone(),
            };

            let chosen = if candidates.is_empty() {
                None
            } else {
                let pick = match &self.config.threshold_schedule {
                    Some(ThresholdSchedule {
                        next_generate_from: NextGenerateFrom::BestVal,
                        ..
                    }) => {
                        let mut best = 0;
                        for (i, c) in candidates.iter().enumerate() {
                            if c.3 > candidates[best].3 {
                                best = i;
                            }
                        }
                        best
                    }
                    _ => candidates.len() - 1,
                };
                Some(candidates.swap_remove(pick))
            };

            let skipped = chosen.is_none();
            let (policy, curve, n_steps) = match chosen {
                Some((p, c, n, _)) => (p, c, n),
                None => (current.clone(), Vec::new(), 0),
            };
            let mut rec = self.record(run, it, &policy, train_problems)?;
            rec.dataset_size = data.len();
            rec.problems_with_zero_survivors = sel.zero_survivor_problems();
            rec.samples_generated = samples;
            rec.sample_success_rate = success;
            rec.skipped = skipped;
            rec.train_steps = n_steps;
            rec.source_policy = source_id;
            rec.improve_steps = self.config.threshold_schedule.as_ref().map(|_| steps);
            result.records.push(rec);
            result.iterations.push(IterationArtifacts {
                iteration: it,
                policy: policy.clone(),
                dataset,
                manifest: Some(manifest),
                curve,
            });
            current = policy;
        }
        result.final_policy = current;
        Ok(result)
    }
}
