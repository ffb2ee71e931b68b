//! The experiment directory.
//!
//! ```text
//! config.json           the config, byte for byte
//! manifest.json         ids, hashes, seeds and timings
//! iterations.jsonl      one record per run and iteration
//! problems.jsonl        the generated problem set
//! checkpoints/<run>/iter-<i>.json
//! datasets/<run>/iter-<i>.jsonl and iter-<i>.manifest.json
//! curves/<run>.csv      training curves of every Improve step
//! eval/<run>-test.json  final evaluations (and pass@k CSV)
//! comparison.csv        ablation arms
//! ```
//!
//! Everything except `manifest.json` is a pure function of the config.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ablation::{run_ablation_dataset_size, run_ablation_single_iter_3x, run_distillation};
use super::config::{ExperimentConfig, Mode};
use super::exact::{run_exact_em, ExactIterationRecord};
use super::{DatasetManifest, IterationRecord, Lab, RunResult};
use crate::error::{config_err, Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, VoteConfig};
use crate::io::{write_atomic, write_json_atomic, write_jsonl_atomic};
use crate::rng::{derive_seed, PhaseSeeds};
use crate::seqpolicy::{load_checkpoint_expecting, save_checkpoint, DecodeParams, SequencePolicy};
use crate::tasks::{lab_vocab, write_problem_set};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Provenance of an experiment directory. The only file with wall-clock
/// content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub experiment_id: String,
    pub name: String,
    pub mode: Mode,
    pub master_seed: u64,
    /// SHA-256 of `config.json`.
    pub config_sha256: String,
    pub seeds: PhaseSeeds,
    pub runs: Vec<String>,
    /// Relative path to git-style object hash.
    pub checkpoints: BTreeMap<String, String>,
    pub datasets: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub elapsed_secs: f64,
}

/// What a call to [`run_experiment`] produced, for callers that want the
/// numbers without re-reading the directory.
#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub manifest: RunManifest,
    pub records: Vec<IterationRecord>,
    pub exact: Vec<ExactIterationRecord>,
    pub comparison_csv: Option<String>,
    pub evals: Vec<EvalReport>,
}

#[derive(Serialize)]
struct DatasetManifestFile<'a> {
    config_sha256: &'a str,
    #[serde(flatten)]
    manifest: &'a DatasetManifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of `bytes` as a git blob in a SHA-256 repository.
pub fn git_object_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

#[derive(Default)]
struct Hashes {
    checkpoints: BTreeMap<String, String>,
    datasets: BTreeMap<String, String>,
}

/// Writes one run's checkpoints, datasets and curves under `out_dir` and
/// returns relative path to object hash for each file.
pub fn write_run(out_dir: &Path, run: &RunResult, config_sha256: &str) -> Result<BTreeMap<String, String>> {
    let mut h = Hashes::default();
    write_run_into(out_dir, run, config_sha256, &mut h)?;
    h.checkpoints.append(&mut h.datasets);
    Ok(h.checkpoints)
}

fn write_run_into(out_dir: &Path, run: &RunResult, config_sha256: &str, h: &mut Hashes) -> Result<()> {
    let mut curve = String::from("iteration,step,train_loss,val_reward\n");
    for it in &run.iterations {
        let rel = format!("checkpoints/{}/iter-{}.json", run.run, it.iteration);
        let path = out_dir.join(&rel);
        save_checkpoint(&it.policy, &path)?;
        h.checkpoints.insert(rel, git_object_hash(&read_bytes(&path)?));

        if let Some(m) = &it.manifest {
            let rel = format!("datasets/{}/iter-{}.jsonl", run.run, it.iteration);
            let path = out_dir.join(&rel);
            write_jsonl_atomic(&path, &it.dataset)?;
            h.datasets.insert(rel, git_object_hash(&read_bytes(&path)?));
            let rel = format!("datasets/{}/iter-{}.manifest.json", run.run, it.iteration);
            write_json_atomic(
                &out_dir.join(&rel),
                &DatasetManifestFile {
                    config_sha256,
                    manifest: m,
                },
            )?;
        }
        for p in &it.curve {
            curve.push_str(&format!("{},{},{},{}\n", it.iteration, p.step, p.train_loss, p.val_reward));
        }
    }
    write_atomic(&out_dir.join(format!("curves/{}.csv", run.run)), curve.as_bytes())
}

fn final_eval_config(config: &ExperimentConfig, max_len: usize) -> Option<EvalConfig> {
    let spec = config.final_eval.as_ref()?;
    let vocab = lab_vocab().size();
    Some(EvalConfig {
        max_len,
        greedy: true,
        pass_at_k: spec.pass_at_k.clone(),
        majority_vote: spec.majority_vote_samples.map(|n| VoteConfig {
            n,
            decode: DecodeParams::full_support(vocab, max_len),
        }),
    })
}

/// Runs the configured experiment and writes its directory.
///
/// `config_bytes` is stored verbatim unless `seed_override` replaces the
/// master seed, in which case the re-serialized config is stored and hashed.
pub fn run_experiment(config_bytes: &[u8], out_dir: &Path, seed_override: Option<u64>) -> Result<ExperimentSummary> {
    let started = Instant::now();
    let started_ms = now_ms();
    let text = std::str::from_utf8(config_bytes).map_err(|e| config_err("config", e.to_string()))?;
    let mut config = ExperimentConfig::from_json(text)?;
    let stored: Vec<u8> = match seed_override {
        Some(seed) => {
            config.master_seed = seed;
            let mut v = serde_json::to_vec_pretty(&config)?;
            v.push(b'\n');
            v
        }
        None => config_bytes.to_vec(),
    };
    let config_sha256 = sha256_hex(&stored);
    write_atomic(&out_dir.join("config.json"), &stored)?;

    let seeds = PhaseSeeds::from_master(config.master_seed);
    let mut hashes = Hashes::default();
    let mut records = Vec::new();
    let mut exact = Vec::new();
    let mut comparison_csv = None;
    let mut evals = Vec::new();
    let mut run_names = Vec::new();

    if config.mode == Mode::ExactEm {
        let spec = config.exact.as_ref().expect("validated");
        exact = run_exact_em(spec, config.iterations, config.master_seed)?;
        write_jsonl_atomic(&out_dir.join("iterations.jsonl"), &exact)?;
        run_names = (0..spec.instances).map(|k| format!("instance-{k}")).collect();
    } else {
        let lab = Lab::prepare(config.clone())?;
        write_problem_set(&lab.problems, &out_dir.join("problems.jsonl"))?;
        let runs: Vec<RunResult> = match config.mode {
            Mode::SftBaseline => vec![lab.run_sft("sft")?],
            Mode::Distill => {
                let spec = config.distill.as_ref().expect("validated");
                let teacher = load_checkpoint_expecting(&spec.teacher_checkpoint, lab.base.vocab())?;
                vec![run_distillation(&lab, &teacher, spec.one_per_problem)?]
            }
            Mode::SingleIter3x => {
                let cmp = run_ablation_single_iter_3x(&lab)?;
                comparison_csv = Some(cmp.to_csv());
                cmp.runs
            }
            Mode::DatasetSize => {
                let cmp = run_ablation_dataset_size(&lab)?;
                comparison_csv = Some(cmp.to_csv());
                cmp.runs
            }
            Mode::Restem | Mode::Raft | Mode::StarGreedy | Mode::Rwr => vec![lab.run_main(config.mode.as_str())?],
            Mode::ExactEm => unreachable!(),
        };
        for run in &runs {
            write_run_into(out_dir, run, &config_sha256, &mut hashes)?;
            records.extend(run.records.iter().cloned());
            run_names.push(run.run.clone());
        }
        write_jsonl_atomic(&out_dir.join("iterations.jsonl"), &records)?;
        if let Some(csv) = &comparison_csv {
            write_atomic(&out_dir.join("comparison.csv"), csv.as_bytes())?;
        }

        if let Some(eval_cfg) = final_eval_config(&config, lab.max_len()) {
            let eval_seed = derive_seed(seeds.eval, "final", 0);
            let mut targets = vec![("base".to_string(), &lab.base)];
            for run in &runs {
                targets.push((run.run.clone(), &run.final_policy));
            }
            for (name, policy) in targets {
                let report = evaluate(
                    policy,
                    &policy.checkpoint_id(),
                    &lab.problems.test,
                    "test",
                    &eval_cfg,
                    eval_seed,
                )?;
                write_json_atomic(&out_dir.join(format!("eval/{name}-test.json")), &report)?;
                if let Some(curve) = &report.pass_at_k {
                    write_atomic(
                        &out_dir.join(format!("eval/{name}-test-pass_at_k.csv")),
                        curve.to_csv().as_bytes(),
                    )?;
                }
                evals.push(report);
            }
        }
    }

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        experiment_id: format!(
            "{}-{}",
            if config.name.is_empty() { config.mode.as_str() } else { &config.name },
            &config_sha256[..12]
        ),
        name: config.name.clone(),
        mode: config.mode,
        master_seed: config.master_seed,
        config_sha256,
        seeds,
        runs: run_names,
        checkpoints: hashes.checkpoints,
        datasets: hashes.datasets,
        started_unix_ms: started_ms,
        finished_unix_ms: now_ms(),
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    write_json_atomic(&out_dir.join("manifest.json"), &manifest)?;
    Ok(ExperimentSummary {
        manifest,
        records,
        exact,
        comparison_csv,
        evals,
    })
}
