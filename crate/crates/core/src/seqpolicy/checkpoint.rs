//! Versioned JSON checkpoints.
//!
//! Floats are written with shortest round-trip formatting, so a saved policy
//! reloads bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NeuralPolicy, NeuralShape, Policy, TabularPolicy, TokenId, Vocab};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "restem-checkpoint";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    vocab: Vocab,
    vocab_hash: String,
    checkpoint_id: String,
    policy: PolicyBody,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
enum PolicyBody {
    Tabular { window: usize, rows: Vec<TabularRow> },
    Neural { shape: NeuralShape, params: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TabularRow {
    key: Vec<TokenId>,
    probs: Vec<f64>,
}

pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<()> {
    let body = match policy {
        Policy::Tabular(t) => PolicyBody::Tabular {
            window: t.window(),
            rows: t
                .rows()
                .map(|(k, p)| TabularRow {
                    key: k.clone(),
                    probs: p.clone(),
                })
                .collect(),
        },
        Policy::Neural(n) => PolicyBody::Neural {
            shape: *n.shape(),
            params: n.params().to_vec(),
        },
    };
    let vocab = match policy {
        Policy::Tabular(t) => t.vocab().clone(),
        Policy::Neural(n) => n.vocab().clone(),
    };
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        vocab_hash: vocab.hash(),
        vocab,
        checkpoint_id: policy.checkpoint_id(),
        policy: body,
    };
    let bytes = serde_json::to_vec(&file)?;
    write_atomic(path, &bytes)
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Loads and verifies a checkpoint: format tag, version, vocabulary hash,
/// tensor shapes and the content id.
pub fn load_checkpoint(path: &Path) -> Result<Policy> {
    let bytes = std::fs::read(path).map_err(|e| corrupt(path, e.to_string()))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes).map_err(|e| corrupt(path, e.to_string()))?;
    if file.format != FORMAT {
        return Err(corrupt(path, format!("unknown format tag {:?}", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(corrupt(path, format!("unsupported version {}", file.version)));
    }
    let vocab = Vocab::new(file.vocab.tokens().to_vec(), file.vocab.eos()).map_err(|e| corrupt(path, e.to_string()))?;
    if vocab.hash() != file.vocab_hash {
        return Err(Error::VocabMismatch {
            expected: file.vocab_hash,
            found: vocab.hash(),
        });
    }
    let policy = match file.policy {
        PolicyBody::Tabular { window, rows } => {
            let mut t = TabularPolicy::uniform(vocab, window);
            for r in rows {
                t.set_row(r.key, r.probs).map_err(|e| corrupt(path, e.to_string()))?;
            }
            Policy::Tabular(t)
        }
        PolicyBody::Neural { shape, params } => {
            Policy::Neural(NeuralPolicy::from_params(vocab, shape, params).map_err(|e| corrupt(path, e.to_string()))?)
        }
    };
    if policy.checkpoint_id() != file.checkpoint_id {
        return Err(corrupt(path, "content id does not match parameters"));
    }
    Ok(policy)
}

/// Loads a checkpoint and requires its vocabulary to match `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &Vocab) -> Result<Policy> {
    let policy = load_checkpoint(path)?;
    let found = super::SequencePolicy::vocab(&policy).hash();
    if found != expected.hash() {
        return Err(Error::VocabMismatch {
            expected: expected.hash(),
            found,
        });
    }
    Ok(policy)
}
