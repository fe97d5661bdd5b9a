//! Reference bundles: `manifest.json`, `inputs.pdet` and `solutions.pdet` in one directory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{solve_reference, ReferenceConfig, ReferenceError};
use crate::digest::sha256_hex;
use crate::domain::{GridSpec, PdeTask, SolutionField};
use crate::sampling::sample_initial_conditions;
use crate::tensor::{self, TensorError};

pub const MANIFEST: &str = "manifest.json";
pub const INPUTS: &str = "inputs.pdet";
pub const SOLUTIONS: &str = "solutions.pdet";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bundle io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bundle manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("hash mismatch for {file}: manifest {expected}, found {found}")]
    HashMismatch { file: String, expected: String, found: String },
    #[error(transparent)]
    Domain(#[from] crate::domain::DomainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub task: PdeTask,
    pub grid: GridSpec,
    pub seed: u64,
    pub batch: usize,
    pub scheme: String,
    pub config: ReferenceConfig,
    pub input_components: Vec<String>,
    pub components: Vec<String>,
    /// File name to lowercase hex SHA-256.
    pub hashes: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ReferenceBundle {
    pub manifest: BundleManifest,
    pub inputs: SolutionField,
    pub solutions: SolutionField,
}

/// Samples inputs, solves them and writes the bundle into `dir` (created if missing).
pub fn generate_reference_set(
    task: &PdeTask,
    grid: &GridSpec,
    batch: usize,
    seed: u64,
    cfg: &ReferenceConfig,
    dir: &Path,
) -> Result<ReferenceBundle, BundleError> {
    let inputs = sample_initial_conditions(task, grid, batch, seed)?;
    let solutions = solve_reference(task, grid, &inputs, cfg)?;
    fs::create_dir_all(dir)?;
    let mut hashes = std::collections::BTreeMap::new();
    for (name, field) in [(INPUTS, &inputs), (SOLUTIONS, &solutions)] {
        let bytes = tensor::encode(&field.data)?;
        hashes.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = BundleManifest {
        task: task.clone(),
        grid: grid.clone(),
        seed,
        batch,
        scheme: cfg.scheme_tag(task.task_id()),
        config: cfg.clone(),
        input_components: inputs.components.clone(),
        components: solutions.components.clone(),
        hashes,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(ReferenceBundle { manifest, inputs, solutions })
}

/// Loads a bundle and verifies both tensor hashes against the manifest.
pub fn load_bundle(dir: &Path) -> Result<ReferenceBundle, BundleError> {
    let manifest: BundleManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let read = |name: &str| -> Result<ndarray::ArrayD<f64>, BundleError> {
        let bytes = fs::read(dir.join(name))?;
        let found = sha256_hex(&bytes);
        let expected = manifest.hashes.get(name).cloned().unwrap_or_default();
        if found != expected {
            return Err(BundleError::HashMismatch { file: name.into(), expected, found });
        }
        Ok(tensor::decode(&bytes)?)
    };
    let inputs = SolutionField::new(read(INPUTS)?, manifest.input_components.clone());
    let solutions = SolutionField::new(read(SOLUTIONS)?, manifest.components.clone());
    Ok(ReferenceBundle { manifest, inputs, solutions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{make_grid, TaskId};

    #[test]
    fn same_seed_same_hashes_and_tamper_detection() {
        let task = PdeTask::registry_get(TaskId::Advection, None).unwrap();
        let grid = make_grid(&task, &[32], Some(3), None).unwrap();
        let cfg = ReferenceConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_reference_set(&task, &grid, 2, 5, &cfg, a.path()).unwrap().manifest;
        let mb = generate_reference_set(&task, &grid, 2, 5, &cfg, b.path()).unwrap().manifest;
        assert_eq!(ma.hashes, mb.hashes);
        let loaded = load_bundle(a.path()).unwrap();
        assert_eq!(loaded.manifest, ma);
        let mut bytes = fs::read(a.path().join(SOLUTIONS)).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(a.path().join(SOLUTIONS), bytes).unwrap();
        assert!(matches!(load_bundle(a.path()), Err(BundleError::HashMismatch { .. })));
    }

    #[test]
    fn validation_and_test_seeds_differ() {
        let task = PdeTask::registry_get(TaskId::Burgers, None).unwrap();
        let grid = make_grid(&task, &[32], Some(2), Some(0.1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = ReferenceConfig::default();
        let v = generate_reference_set(&task, &grid, 2, 1, &cfg, &dir.path().join("val")).unwrap();
        let t = generate_reference_set(&task, &grid, 2, 2, &cfg, &dir.path().join("test")).unwrap();
        assert_ne!(v.manifest.hashes, t.manifest.hashes);
        assert!(v.inputs.data.iter().zip(t.inputs.data.iter()).all(|(x, y)| x != y));
    }
}
