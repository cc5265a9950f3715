//! Model checkpoints: one CAVT file per parameter plus a JSON index.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cavt::CavtTensor;
use super::dataset::sha256_hex;
use crate::error::{Error, Result};
use crate::lang::Vocabulary;
use crate::policy::{Ablation, ModelConfig, Policy, PolicyParams};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointIndex {
    pub version: u32,
    pub model: ModelConfig,
    pub ablation: Ablation,
    pub vocabulary: Vocabulary,
    /// Tasks the model was trained on.
    pub tasks: Vec<String>,
    pub step: usize,
    pub data_manifest_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    dir: &Path,
    policy: &Policy,
    tasks: &[String],
    step: usize,
    data_manifest_sha256: &str,
) -> Result<CheckpointIndex> {
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut tensors = Vec::new();
    for (i, (name, t)) in policy.params.store.iter().enumerate() {
        let file = format!("tensors/{i:03}.cavt");
        let bytes = CavtTensor::from_tensor(t).write(&dir.join(&file))?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            shape: t.shape().to_vec(),
            sha256: sha256_hex(&bytes),
        });
    }
    let index = CheckpointIndex {
        version: CHECKPOINT_VERSION,
        model: policy.params.config.clone(),
        ablation: policy.ablation,
        vocabulary: policy.vocab.clone(),
        tasks: tasks.to_vec(),
        step,
        data_manifest_sha256: data_manifest_sha256.to_string(),
        tensors,
    };
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Rebuild the policy a checkpoint was saved from.
pub fn load_checkpoint(dir: &Path) -> Result<(Policy, CheckpointIndex)> {
    let path = dir.join(INDEX_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_slice(&bytes)?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            index.version
        )));
    }
    let mut params = PolicyParams::new(&index.model, index.vocabulary.len())?;
    if params.store.len() != index.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model expects {}",
            index.tensors.len(),
            params.store.len()
        )));
    }
    let ids: Vec<_> = params.store.ids().collect();
    for (id, entry) in ids.into_iter().zip(&index.tensors) {
        if params.store.name(id) != entry.name {
            return Err(Error::Checkpoint(format!(
                "tensor {} is {:?}, expected {:?}",
                id.0,
                entry.name,
                params.store.name(id)
            )));
        }
        let p = dir.join(&entry.file);
        let raw = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if sha256_hex(&raw) != entry.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch for {}", p.display())));
        }
        let t = CavtTensor::decode(&raw)?.to_tensor::<f32>()?;
        if t.shape() != params.store.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "{} has shape {:?}, expected {:?}",
                entry.name,
                t.shape(),
                params.store.get(id).shape()
            )));
        }
        *params.store.get_mut(id) = t;
    }
    let policy = Policy::new(params, index.vocabulary.clone(), index.ablation)?;
    Ok((policy, index))
}

/// A run config and a checkpoint must agree on the model.
pub fn check_compatible(model: &ModelConfig, index: &CheckpointIndex) -> Result<()> {
    if *model != index.model {
        return Err(Error::Checkpoint(
            "run config model section differs from the checkpoint's model".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build();
        let cfg = ModelConfig {
            init_seed: 3,
            ..Default::default()
        };
        let params = PolicyParams::new(&cfg, vocab.len()).unwrap();
        let policy = Policy::new(params, vocab, Ablation::NO_ROI).unwrap();
        save_checkpoint(dir.path(), &policy, &["ball_basket".into()], 12, "abc").unwrap();
        let (back, index) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(index.step, 12);
        assert_eq!(back.ablation, Ablation::NO_ROI);
        for ((n1, t1), (n2, t2)) in policy.params.store.iter().zip(back.params.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert!(check_compatible(&cfg, &index).is_ok());
        let other = ModelConfig {
            chunk: 4,
            execute: 4,
            ..cfg
        };
        assert!(check_compatible(&other, &index).is_err());
    }

    #[test]
    fn corrupted_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::build();
        let params = PolicyParams::new(&ModelConfig::default(), vocab.len()).unwrap();
        let policy = Policy::new(params, vocab, Ablation::NONE).unwrap();
        save_checkpoint(dir.path(), &policy, &[], 0, "").unwrap();
        let p = dir.path().join("tensors/000.cavt");
        let mut b = std::fs::read(&p).unwrap();
        let n = b.len() - 1;
        b[n] ^= 0x40;
        std::fs::write(&p, b).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
    }
}
