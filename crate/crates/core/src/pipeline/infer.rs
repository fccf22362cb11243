use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, load_child, Stage};
use super::data::Prepared;
use super::train::{DurationDetails, SamplerDetails, Stage1Details};
use crate::acoustic::AcousticModel;
use crate::durmodel::{DurationModel, GroupStats};
use crate::error::{Error, Result};
use crate::latent::GaussianLatent;
use crate::params::ParamStore;
use crate::samplers::{GraphInput, Sampler};
use crate::syntax::LabelVocab;
use crate::tensor::Tensor;

/// Where the prosody latent comes from at inference time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentSource {
    /// `z = 0`, the prior mean.
    Prior,
    /// The text sampler's prediction.
    Sampler,
    /// The reference encoder's posterior mean for the recorded mel.
    Oracle,
}

/// All three checkpoints, hash-chained, bound to their models.
#[derive(Debug)]
pub struct Pipeline {
    pub phonemes: Vec<String>,
    pub store: ParamStore,
    pub acoustic: AcousticModel,
    pub sampler: Sampler,
    pub labels: LabelVocab,
    pub duration: DurationModel,
    pub stats: GroupStats,
    pub hashes: [String; 3],
}

/// Sidecar written next to an inferred mel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferResult {
    pub z: Vec<f64>,
    pub durations: Vec<u32>,
    #[serde(skip)]
    pub mel: Tensor,
}

/// Standard-normal noise for temperature sampling, fixed by the run seed
/// and the utterance id so batch order never matters.
pub fn latent_noise(seed: u64, id: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(id.as_bytes());
    let salt = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl Pipeline {
    pub fn load(stage1: &Path, sampler: &Path, duration: &Path) -> Result<Self> {
        let s1 = load_checkpoint(stage1, Stage::Stage1)?;
        let smp = load_child(sampler, Stage::Sampler, &s1.hash)?;
        let dur = load_child(duration, Stage::Duration, &smp.hash)?;
        let s1_details: Stage1Details = s1.manifest.details()?;
        let smp_details: SamplerDetails = smp.manifest.details()?;
        let dur_details: DurationDetails = dur.manifest.details()?;

        let mut store = ParamStore::new();
        store.absorb(&s1.params)?;
        store.absorb(&smp.params)?;
        store.absorb(&dur.params)?;
        let acoustic = AcousticModel::existing(
            &store,
            s1.manifest.config.acoustic_config(s1_details.phonemes.len()),
        )?;
        let sampler = Sampler::existing(&store, smp_details.sampler)?;
        let duration = DurationModel::existing(&store, dur_details.model)?;
        if duration.config.phonemes != s1_details.phonemes.len() {
            return Err(Error::Checkpoint("duration and Stage I checkpoints disagree on the inventory".into()));
        }
        Ok(Pipeline {
            phonemes: s1_details.phonemes,
            store,
            acoustic,
            sampler,
            labels: smp_details.labels,
            duration,
            stats: dur_details.group_stats,
            hashes: [s1.hash, smp.hash, dur.hash],
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.acoustic.config.latent_dim
    }

    /// Sampler prediction for one utterance.
    pub fn predict_latent(&self, u: &Prepared) -> Result<GaussianLatent> {
        let graph = self
            .sampler
            .config
            .variant
            .uses_graph()
            .then(|| GraphInput::new(&u.graph, &self.labels));
        if self.sampler.config.variant.uses_embeddings() && u.embeddings.is_none() {
            return Err(Error::utterance(&u.id, "sampler needs word-piece embeddings"));
        }
        self.sampler.predict(&self.store, u.sampler_input(graph.as_ref()))
    }

    /// Pick z. `noise` scaled by `temperature` perturbs the sampler
    /// prediction only; temperature 0 gives its mean.
    pub fn latent(&self, u: &Prepared, source: LatentSource, noise: &[f64], temperature: f64) -> Result<Vec<f64>> {
        match source {
            LatentSource::Prior => Ok(vec![0.0; self.latent_dim()]),
            LatentSource::Oracle => Ok(self.acoustic.posterior(&self.store, &u.mel)?.mean),
            LatentSource::Sampler => {
                let pred = self.predict_latent(u)?;
                if temperature == 0.0 {
                    Ok(pred.mean)
                } else {
                    if noise.len() != pred.dim() {
                        return Err(Error::Shape(format!("{} noise values for {} dims", noise.len(), pred.dim())));
                    }
                    Ok(pred.sample(noise, temperature))
                }
            }
        }
    }

    pub fn durations(&self, u: &Prepared, z: &[f64]) -> Result<Vec<u32>> {
        let z = self.duration.is_conditioned().then_some(z);
        Ok(self
            .duration
            .predict_durations(&self.store, &u.ids, &u.tokens, &self.stats, z)?
            .0)
    }

    /// Latent, then durations, then mel.
    pub fn infer(&self, u: &Prepared, source: LatentSource, noise: &[f64], temperature: f64) -> Result<InferResult> {
        let z = self.latent(u, source, noise, temperature)?;
        let durations = self.durations(u, &z)?;
        let mel = self.acoustic.synthesize(&self.store, &u.ids, &durations, &z)?;
        Ok(InferResult { z, durations, mel })
    }
}
