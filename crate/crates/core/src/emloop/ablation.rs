use serde::{Deserialize, Serialize};

use super::{Lab, RunResult};
use crate::error::{invalid, Result};
use crate::estep::GenerationConfig;
use crate::seqpolicy::{Policy, SequencePolicy};

/// Final metrics of one arm of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub iterations: usize,
    pub samples_per_problem: usize,
    pub train_problems: usize,
    /// Samples drawn over all iterations.
    pub total_samples: usize,
    pub final_train_reward: f64,
    pub final_val_reward: f64,
    pub final_test_reward: f64,
}

/// Several runs sharing one lab, one row per arm.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
    pub arms: Vec<ArmSummary>,
}

impl Comparison {
    fn push(&mut self, run: RunResult, iterations: usize, samples_per_problem: usize, train_problems: usize) {
        let last = run.last().clone();
        let total_samples = run.records.iter().map(|r| r.samples_generated).sum();
        self.arms.push(ArmSummary {
            arm: run.run.clone(),
            iterations,
            samples_per_problem,
            train_problems,
            total_samples,
            final_train_reward: last.train_reward,
            final_val_reward: last.val_reward,
            final_test_reward: last.test_reward,
        });
        self.runs.push(run);
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "arm,iterations,samples_per_problem,train_problems,total_samples,final_train_reward,final_val_reward,final_test_reward\n",
        );
        for a in &self.arms {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                a.arm,
                a.iterations,
                a.samples_per_problem,
                a.train_problems,
                a.total_samples,
                a.final_train_reward,
                a.final_val_reward,
                a.final_test_reward
            ));
        }
        out
    }
}

/// `I` iterations with `N` samples per problem against one iteration with
/// `3N`, same per-problem cap.
pub fn run_ablation_single_iter_3x(lab: &Lab) -> Result<Comparison> {
    let (gen, filter) = lab.config.effective_estep();
    let iters = lab.config.iterations;
    let train = &lab.problems.train;
    let n = gen.samples_per_problem;
    let mut cmp = Comparison {
        runs: Vec::new(),
        arms: Vec::new(),
    };
    let multi = lab.run_restem(&format!("i{iters}-n"), train, iters, &gen, &filter, None)?;
    cmp.push(multi, iters, n, train.len());
    let wide = GenerationConfig {
        samples_per_problem: 3 * n,
        ..gen.clone()
    };
    let single = lab.run_restem("i1-3n", train, 1, &wide, &filter, None)?;
    cmp.push(single, 1, 3 * n, train.len());
    Ok(cmp)
}

/// The configured run on nested prefixes of the train split. Problems are
/// already shuffled, so prefixes are random subsets.
pub fn run_ablation_dataset_size(lab: &Lab) -> Result<Comparison> {
    let sizes = lab
        .config
        .dataset_sizes
        .as_ref()
        .ok_or_else(|| invalid("dataset_sizes is required"))?;
    let (gen, filter) = lab.config.effective_estep();
    let mut cmp = Comparison {
        runs: Vec::new(),
        arms: Vec::new(),
    };
    for &size in sizes {
        if size == 0 || size > lab.problems.train.len() {
            return Err(invalid(format!("dataset size {size} outside 1..={}", lab.problems.train.len())));
        }
        let subset = &lab.problems.train[..size];
        let run = lab.run_restem(&format!("size-{size}"), subset, lab.config.iterations, &gen, &filter, None)?;
        cmp.push(run, lab.config.iterations, gen.samples_per_problem, size);
    }
    Ok(cmp)
}

/// One Generate step from `teacher`, one Improve step from the lab's base.
pub fn run_distillation(lab: &Lab, teacher: &Policy, one_per_problem: bool) -> Result<RunResult> {
    if teacher.vocab() != lab.base.vocab() {
        return Err(invalid("teacher vocabulary does not match the task vocabulary"));
    }
    let (mut gen, filter) = lab.config.effective_estep();
    if one_per_problem {
        gen.cap_per_problem = 1;
    }
    lab.run_restem("distill", &lab.problems.train, 1, &gen, &filter, Some(teacher))
}
