use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::estep::{FilterMode, FilterSpec, GenerationConfig, MixSpec, Weighting};
use crate::eval::PassAtKConfig;
use crate::mstep::TrainConfig;
use crate::seqpolicy::DecodeMode;
use crate::tasks::{SplitSizes, TaskFamily};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Generate from the current policy, keep correct samples, fine-tune the
    /// base. The default algorithm.
    Restem,
    /// One supervised pass on the reference solutions.
    SftBaseline,
    /// Keep only the best sample per problem.
    Raft,
    /// Generate with greedy decoding.
    StarGreedy,
    /// Keep everything, weight by `exp(reward)` within each problem.
    Rwr,
    /// Generate once from a teacher checkpoint, train the student base.
    Distill,
    /// Tabular EM with exact E- and M-steps on enumerable instances.
    ExactEm,
    /// Compare `I` iterations at `N` samples against one at `3N`.
    #[serde(rename = "single-iter-3x")]
    SingleIter3x,
    /// Repeat the run on nested prefixes of the training problems.
    DatasetSize,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Restem => "restem",
            Mode::SftBaseline => "sft-baseline",
            Mode::Raft => "raft",
            Mode::StarGreedy => "star-greedy",
            Mode::Rwr => "rwr",
            Mode::Distill => "distill",
            Mode::ExactEm => "exact-em",
            Mode::SingleIter3x => "single-iter-3x",
            Mode::DatasetSize => "dataset-size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub splits: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PolicySpec {
    Neural {
        window: usize,
        embed_dim: usize,
        hidden: usize,
    },
    Tabular {
        window: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NextGenerateFrom {
    /// The policy from the last (highest-threshold) Improve step.
    Last,
    /// The Improve step with the best validation reward.
    BestVal,
}

/// Several Improve steps per Generate step with increasing thresholds.
/// Only meaningful with scalar rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdSchedule {
    pub taus: Vec<f64>,
    pub next_generate_from: NextGenerateFrom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSpec {
    pub teacher_checkpoint: PathBuf,
    #[serde(default)]
    pub one_per_problem: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExactSpec {
    pub instances: usize,
    pub problems: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default = "one")]
    pub input_len: usize,
    /// Chance that each terminated outcome is correct.
    pub correct_fraction: f64,
    /// Context window; defaults to `input_len + max_len`, which gives every
    /// prefix its own row.
    #[serde(default)]
    pub window: Option<usize>,
}

fn one() -> usize {
    1
}

/// Extra evaluation of the final and base policies on the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalEvalSpec {
    #[serde(default)]
    pub pass_at_k: Option<PassAtKConfig>,
    #[serde(default)]
    pub majority_vote_samples: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    pub master_seed: u64,
    pub iterations: usize,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    #[serde(default)]
    pub policy: Option<PolicySpec>,
    /// Supervised pass on the warm-up split that produces the frozen base.
    #[serde(default)]
    pub warmup: Option<TrainConfig>,
    #[serde(default)]
    pub generation: Option<GenerationConfig>,
    #[serde(default = "FilterSpec::binary")]
    pub filter: FilterSpec,
    #[serde(default)]
    pub mix: MixSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub final_eval: Option<FinalEvalSpec>,
    #[serde(default)]
    pub threshold_schedule: Option<ThresholdSchedule>,
    #[serde(default)]
    pub distill: Option<DistillSpec>,
    #[serde(default)]
    pub dataset_sizes: Option<Vec<usize>>,
    #[serde(default)]
    pub exact: Option<ExactSpec>,
}

fn wrap(field: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        crate::Error::InvalidArgument(detail) => config_err(field, detail),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            config_err(
                format!("line {} column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn task(&self) -> &TaskSpec {
        self.task.as_ref().expect("validated")
    }

    pub fn policy(&self) -> &PolicySpec {
        self.policy.as_ref().expect("validated")
    }

    pub fn generation(&self) -> &GenerationConfig {
        self.generation.as_ref().expect("validated")
    }

    /// Generation and filter settings after the mode's presets are applied:
    /// RAFT keeps the best sample, STaR decodes greedily, RWR keeps every
    /// sample with exponential weights.
    pub fn effective_estep(&self) -> (GenerationConfig, FilterSpec) {
        let mut gen = self.generation().clone();
        let mut filter = self.filter.clone();
        match self.mode {
            Mode::Raft => {
                filter = FilterSpec {
                    mode: FilterMode::RaftMax,
                    weighting: Weighting::Indicator,
                }
            }
            Mode::StarGreedy => gen.decode.mode = DecodeMode::Greedy,
            Mode::Rwr => {
                filter = FilterSpec {
                    mode: FilterMode::GlobalThreshold { tau: -1.0 },
                    weighting: Weighting::Exp,
                }
            }
            _ => {}
        }
        (gen, filter)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(config_err(
                "schema_version",
                format!("expected {CONFIG_SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        if self.iterations == 0 {
            return Err(config_err("iterations", "must be at least 1"));
        }
        if self.mode == Mode::ExactEm {
            let Some(e) = &self.exact else {
                return Err(config_err("exact", "required for mode exact-em"));
            };
            if e.instances == 0 || e.problems == 0 {
                return Err(config_err("exact.instances", "instances and problems must be positive"));
            }
            if !(2..=4).contains(&e.vocab_size) {
                return Err(config_err("exact.vocab_size", "must lie in 2..=4"));
            }
            if !(1..=5).contains(&e.max_len) {
                return Err(config_err("exact.max_len", "must lie in 1..=5"));
            }
            if e.input_len == 0 {
                return Err(config_err("exact.input_len", "must be positive"));
            }
            if !(e.correct_fraction > 0.0 && e.correct_fraction <= 1.0) {
                return Err(config_err("exact.correct_fraction", "must lie in (0, 1]"));
            }
            if e.window == Some(0) {
                return Err(config_err("exact.window", "must be positive"));
            }
            return Ok(());
        }

        let Some(task) = &self.task else {
            return Err(config_err("task", format!("required for mode {}", self.mode.as_str())));
        };
        let Some(policy) = &self.policy else {
            return Err(config_err("policy", format!("required for mode {}", self.mode.as_str())));
        };
        let Some(gen) = &self.generation else {
            return Err(config_err("generation", format!("required for mode {}", self.mode.as_str())));
        };
        match *policy {
            PolicySpec::Neural {
                window,
                embed_dim,
                hidden,
            } if window == 0 || embed_dim == 0 || hidden == 0 => {
                return Err(config_err("policy", "window, embed_dim and hidden must be positive"));
            }
            PolicySpec::Tabular { window: 0 } => return Err(config_err("policy.window", "must be positive")),
            _ => {}
        }
        if task.splits.train == 0 || task.splits.val == 0 || task.splits.test == 0 {
            return Err(config_err("task.splits", "train, val and test must be non-empty"));
        }
        let vocab = crate::tasks::lab_vocab().size();
        wrap("generation", gen.validate(vocab))?;
        wrap("filter", self.filter.validate(gen.scalar_rewards))?;
        if !(0.0..=1.0).contains(&self.mix.lambda) {
            return Err(config_err("mix.lambda", "must lie in [0, 1]"));
        }
        wrap("train", self.train.validate())?;
        if self.train.max_steps == 0 {
            return Err(config_err("train.max_steps", "must be positive"));
        }
        if let Some(w) = &self.warmup {
            wrap("warmup", w.validate())?;
        }
        if let Some(s) = &self.threshold_schedule {
            if !gen.scalar_rewards {
                return Err(config_err("threshold_schedule", "needs generation.scalar_rewards"));
            }
            if s.taus.is_empty() || s.taus.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(config_err("threshold_schedule.taus", "must be non-empty and non-decreasing"));
            }
        }
        if let Some(f) = &self.final_eval {
            if let Some(p) = &f.pass_at_k {
                if p.ks.iter().any(|&k| k == 0 || k > p.n) {
                    return Err(config_err("final_eval.pass_at_k.ks", "every k must lie in 1..=n"));
                }
                wrap("final_eval.pass_at_k.decode", p.decode.validate(vocab))?;
            }
        }
        match self.mode {
            Mode::SftBaseline if self.iterations != 1 => {
                return Err(config_err("iterations", "sft-baseline runs exactly one iteration"))
            }
            Mode::Distill => {
                if self.distill.is_none() {
                    return Err(config_err("distill", "required for mode distill"));
                }
                if self.iterations != 1 {
                    return Err(config_err("iterations", "distill runs exactly one iteration"));
                }
            }
            Mode::DatasetSize => {
                let Some(sizes) = &self.dataset_sizes else {
                    return Err(config_err("dataset_sizes", "required for mode dataset-size"));
                };
                if sizes.is_empty() || sizes.iter().any(|&s| s == 0 || s > task.splits.train) {
                    return Err(config_err(
                        "dataset_sizes",
                        format!("each size must lie in 1..={}", task.splits.train),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
