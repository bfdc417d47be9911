//! Run manifest: the single JSON record tying a run's config, seed,
//! winners, metrics and checkpoint directories together. Checkpoints
//! are written before the manifest so a manifest on disk never points
//! at missing artifacts.

use crate::blocks::BlockArchitecture;
use crate::head::MlpSpec;
use crate::interactions::Interaction;
use crate::search::PipelineOutcome;
use crate::RecError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub block_winner: Option<BlockArchitecture>,
    pub interactions: Vec<Interaction>,
    pub mlp_winner: Option<MlpSpec>,
    pub metrics: BTreeMap<String, f64>,
    pub validation_curve: Vec<f64>,
    pub wall_clock_secs: f64,
    /// Checkpoint directories, relative to the manifest's directory.
    pub checkpoints: Vec<String>,
}

impl ArtifactManifest {
    pub fn from_outcome(
        outcome: &PipelineOutcome,
        config_hash: String,
        seed: u64,
        wall_clock_secs: f64,
        checkpoints: Vec<String>,
    ) -> Self {
        ArtifactManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            block_winner: outcome.block_winner.clone(),
            interactions: outcome.interactions.clone(),
            mlp_winner: outcome.mlp_winner.clone(),
            metrics: outcome.metrics.clone(),
            validation_curve: outcome.block_curve.clone(),
            wall_clock_secs,
            checkpoints,
        }
    }
}

/// FNV-1a over the canonical JSON encoding; changes iff content does.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Every referenced checkpoint must already exist; the manifest itself
/// is written last.
pub fn save_manifest(dir: &Path, manifest: &ArtifactManifest) -> Result<(), RecError> {
    std::fs::create_dir_all(dir)?;
    for ck in &manifest.checkpoints {
        let p = dir.join(ck);
        if !p.exists() {
            return Err(RecError::Config(format!(
                "checkpoint {ck} missing; refusing to write a dangling manifest"
            )));
        }
    }
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

/// Load and verify: every referenced checkpoint must still exist and
/// carry a readable tensor manifest.
pub fn load_manifest(dir: &Path) -> Result<ArtifactManifest, RecError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: ArtifactManifest = serde_json::from_str(&text)?;
    for ck in &manifest.checkpoints {
        tensor::checkpoint::load(&dir.join(ck)).map_err(|e| {
            RecError::Config(format!("checkpoint {ck} failed integrity check: {e}"))
        })?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tensor::Tensor;

    fn sample(checkpoints: Vec<String>) -> ArtifactManifest {
        ArtifactManifest {
            tool_version: "0.1.0".into(),
            config_hash: "abc".into(),
            seed: 7,
            block_winner: None,
            interactions: vec![Interaction::new(vec![0, 2])],
            mlp_winner: None,
            metrics: BTreeMap::from([("test_auc".to_string(), 0.75)]),
            validation_curve: vec![0.5, 0.6],
            wall_clock_secs: 1.0,
            checkpoints,
        }
    }

    #[test]
    fn round_trips_and_rejects_missing_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("model");
        tensor::checkpoint::save(&ck, &[("w".into(), Tensor::vector(vec![1.0, 2.0]))]).unwrap();
        let m = sample(vec!["model".into()]);
        save_manifest(dir.path(), &m).unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), m);

        // dangling reference at save time
        let bad = sample(vec!["nope".into()]);
        assert!(save_manifest(dir.path(), &bad).is_err());

        // corruption after save is caught at load time
        std::fs::remove_file(ck.join("tensor_0000.bin")).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = config_hash(&serde_json::json!({"k": 1}));
        let b = config_hash(&serde_json::json!({"k": 2}));
        assert_ne!(a, b);
        assert_eq!(a, config_hash(&serde_json::json!({"k": 1})));
    }
}
