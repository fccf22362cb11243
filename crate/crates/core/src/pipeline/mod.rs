//! Three-step training, three-step inference, evaluation and the on-disk
//! run layout the CLI drives.

mod checkpoint;
mod config;
mod data;
mod eval;
mod infer;
mod train;

use std::path::{Path, PathBuf};

pub use checkpoint::{checkpoint_hash, load_checkpoint, load_child, save_checkpoint, Checkpoint, Manifest, Stage, MANIFEST};
pub use config::{AcousticSizes, DurationTrainConfig, RunConfig, SamplerTrainConfig, Stage1Config};
pub use data::{Prepared, RunData};
pub use eval::{dtw_mse, evaluate, write_report, ConditionMetrics, EvalReport, CONDITIONS};
pub use infer::{latent_noise, InferResult, LatentSource, Pipeline};
pub use train::{
    load_sampler, load_stage1, probe_recon, train_duration, train_sampler, train_stage1, DurationDetails,
    SamplerDetails, Stage1Details,
};

/// Default directories under a run's output root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn stage1(&self) -> PathBuf {
        self.root.join("stage1")
    }

    pub fn sampler(&self) -> PathBuf {
        self.root.join("sampler")
    }

    pub fn duration(&self) -> PathBuf {
        self.root.join("duration")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn infer(&self) -> PathBuf {
        self.root.join("infer")
    }

    pub fn load_pipeline(&self) -> crate::Result<Pipeline> {
        Pipeline::load(&self.stage1(), &self.sampler(), &self.duration())
    }
}

/// Write an inference result as `<id>.ktns` plus a `<id>.json` sidecar.
pub fn write_inference(dir: &Path, id: &str, result: &InferResult) -> crate::Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(format!("creating {}", dir.display()), e))?;
    let mel = dir.join(format!("{id}.ktns"));
    result.mel.write_ktns(&mel)?;
    train::write_json(&dir.join(format!("{id}.json")), result)?;
    Ok(mel)
}
