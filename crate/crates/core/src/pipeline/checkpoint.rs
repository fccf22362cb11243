//! Checkpoint directories: one KTNS file per parameter plus `manifest.json`.
//!
//! A checkpoint's hash is SHA-256 over the manifest bytes followed by each
//! referenced tensor (name, NUL, file bytes) in name order. Child stages
//! record their parent's hash and loading re-verifies it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Sampler,
    Duration,
}

impl Stage {
    pub fn parent(self) -> Option<Stage> {
        match self {
            Stage::Stage1 => None,
            Stage::Sampler => Some(Stage::Stage1),
            Stage::Duration => Some(Stage::Sampler),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Sampler => "sampler",
            Stage::Duration => "duration",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub step: u64,
    pub parent_hash: Option<String>,
    pub config: RunConfig,
    /// Parameter name → file, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    /// Namespace → parameter names.
    pub namespaces: BTreeMap<String, Vec<String>>,
    /// Stage-specific settings and summary numbers.
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn details<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.details.clone())
            .map_err(|e| Error::json(format!("{} checkpoint details", self.stage), e))
    }
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub hash: String,
}

fn io_err(path: &Path, what: &str) -> impl FnOnce(std::io::Error) -> Error {
    let context = format!("{what} {}", path.display());
    move |e| Error::io(context, e)
}

/// Write `params` and a manifest; returns the checkpoint hash.
pub fn save_checkpoint<D: Serialize>(
    dir: &Path,
    stage: Stage,
    step: u64,
    parent_hash: Option<String>,
    config: &RunConfig,
    params: &ParamStore,
    details: &D,
) -> Result<String> {
    if stage.parent().is_some() != parent_hash.is_some() {
        return Err(Error::Checkpoint(format!(
            "{stage} checkpoint must {} a parent hash",
            if stage.parent().is_some() { "record" } else { "not record" }
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir, "creating"))?;
    let mut tensors = BTreeMap::new();
    let mut namespaces: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in params.names() {
        let file = format!("{name}.ktns");
        let value = params.get(name).expect("listed name");
        value.write_ktns(&dir.join(&file))?;
        tensors.insert(name.to_string(), file);
        let ns = name.split('.').next().unwrap_or(name).to_string();
        namespaces.entry(ns).or_default().push(name.to_string());
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage,
        step,
        parent_hash,
        config: config.clone(),
        tensors,
        namespaces,
        details: serde_json::to_value(details).map_err(|e| Error::json("serializing checkpoint details", e))?,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("serializing manifest", e))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(io_err(&path, "writing"))?;
    checkpoint_hash(dir)
}

fn read_manifest(dir: &Path) -> Result<(Vec<u8>, Manifest)> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| {
        Error::Checkpoint(format!("no checkpoint at {}: {e}", dir.display()))
    })?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{} has format version {}, expected {FORMAT_VERSION}",
            path.display(),
            manifest.format_version
        )));
    }
    Ok((bytes, manifest))
}

pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let (bytes, manifest) = read_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(&bytes);
    for (name, file) in &manifest.tensors {
        let path = dir.join(file);
        let data = fs::read(&path).map_err(io_err(&path, "reading"))?;
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(&data);
    }
    Ok(hex::encode(h.finalize()))
}

/// Load a checkpoint of the expected stage.
pub fn load_checkpoint(dir: &Path, stage: Stage) -> Result<Checkpoint> {
    let (_, manifest) = read_manifest(dir)?;
    if manifest.stage != stage {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} checkpoint, expected {stage}",
            dir.display(),
            manifest.stage
        )));
    }
    let mut params = ParamStore::new();
    for (name, file) in &manifest.tensors {
        params.insert(name, Tensor::read_ktns(&dir.join(file))?)?;
    }
    let hash = checkpoint_hash(dir)?;
    Ok(Checkpoint {
        manifest,
        params,
        hash,
    })
}

/// Load a child checkpoint and check it was trained against `parent_hash`.
pub fn load_child(dir: &Path, stage: Stage, parent_hash: &str) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(dir, stage)?;
    match &ckpt.manifest.parent_hash {
        Some(h) if h == parent_hash => Ok(ckpt),
        Some(h) => Err(Error::Checkpoint(format!(
            "{stage} checkpoint at {} was trained against {} {h}, but the {} checkpoint given hashes to {parent_hash}",
            dir.display(),
            stage.parent().expect("child stage"),
            stage.parent().expect("child stage"),
        ))),
        None => Err(Error::Checkpoint(format!("{stage} checkpoint records no parent"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.register("acoustic.w", &[2, 3], Init::Constant(0.25)).unwrap();
        s.register("reference.b", &[4], Init::Constant(-1.5)).unwrap();
        s
    }

    #[test]
    fn round_trip_and_chain() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let s1 = dir.path().join("s1");
        let h1 = save_checkpoint(&s1, Stage::Stage1, 7, None, &cfg, &store(), &serde_json::json!({"k": 1})).unwrap();
        let c = load_checkpoint(&s1, Stage::Stage1).unwrap();
        assert_eq!(c.hash, h1);
        assert!(c.params.values_equal(&store()));
        assert_eq!(c.manifest.step, 7);
        assert_eq!(c.manifest.namespaces["reference"], ["reference.b"]);
        assert!(load_checkpoint(&s1, Stage::Sampler).is_err());

        let s2 = dir.path().join("s2");
        save_checkpoint(&s2, Stage::Sampler, 1, Some(h1.clone()), &cfg, &ParamStore::new(), &()).unwrap();
        assert!(load_child(&s2, Stage::Sampler, &h1).is_ok());
        assert!(load_child(&s2, Stage::Sampler, "00").is_err());
        assert!(save_checkpoint(&s2, Stage::Sampler, 1, None, &cfg, &ParamStore::new(), &()).is_err());
    }

    #[test]
    fn hash_sees_tensor_changes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let h = save_checkpoint(dir.path(), Stage::Stage1, 1, None, &cfg, &store(), &()).unwrap();
        let mut other = store();
        let id = other.id("acoustic.w").unwrap();
        other.value_mut(id).data_mut()[0] = 0.5;
        let h2 = save_checkpoint(dir.path(), Stage::Stage1, 1, None, &cfg, &other, &()).unwrap();
        assert_ne!(h, h2);
        assert_eq!(h2, checkpoint_hash(dir.path()).unwrap());
    }
}
