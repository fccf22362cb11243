//! The three training stages. Each reads the previous stage's checkpoint,
//! trains one set of namespaces and writes its own checkpoint plus a loss
//! curve next to it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, load_child, save_checkpoint, Checkpoint, Stage};
use super::config::RunConfig;
use super::data::{Prepared, RunData};
use crate::acoustic::{anneal_alpha, elbo_loss, upsample, AcousticModel};
use crate::autodiff::Tape;
use crate::durmodel::{
    compute_group_stats, duration_loss, duration_step, DurationConfig, DurationExample, DurationModel, GroupStats,
};
use crate::error::{Error, Result};
use crate::latent::{kl_divergence, kl_divergence_in, reparameterize, GaussianLatent};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::{Namespace, ParamStore};
use crate::samplers::{train_sampler_step, GraphInput, Sampler, SamplerConfig, SamplerExample};
use crate::syntax::{graph_diameter, message_pass_count, LabelVocab};
use crate::tensor::Tensor;

const STAGE1_SALT: u64 = 0x0057_a6e1;
const SAMPLER_SALT: u64 = 0x05a3_b1e2;
const DURATION_SALT: u64 = 0x00d0_4a73;
/// Utterances used to measure reconstruction before and after Stage I.
const PROBE_UTTERANCES: usize = 16;

pub(crate) fn stage_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn normal_noise<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json("serializing report", e))?;
    write_text(path, &(text + "\n"))
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Saved in the Stage I manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Details {
    pub phonemes: Vec<String>,
    /// Teacher-forced MSE on the probe set with z at the posterior mean.
    pub initial_recon: f64,
    pub final_recon: f64,
    /// Mean `KL(q(z|X) ‖ N(0, I))` over the training split after training.
    pub mean_kl: f64,
}

/// Teacher-forced reconstruction at the posterior mean, no dropout.
pub fn probe_recon(model: &AcousticModel, store: &ParamStore, probe: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for u in probe {
        let post = model.posterior(store, &u.mel)?;
        let tape = Tape::new();
        let y = model.encode_phonemes(&tape, store, &u.ids)?;
        let up = upsample(y, &u.durations)?;
        let z = tape.constant(Tensor::row(&post.mean));
        let out = model.decode(&tape, store, up, z, Some(&u.mel), None)?;
        total += mse(&out.value(), &u.mel);
    }
    Ok(total / probe.len() as f64)
}

/// Stage I: reference encoder and acoustic model under the annealed ELBO.
pub fn train_stage1(config: &RunConfig, data: &RunData, out: &Path) -> Result<Stage1Details> {
    let s1 = &config.stage1;
    let mut rng = stage_rng(config.seed, STAGE1_SALT);
    let mut store = ParamStore::new();
    let model = AcousticModel::new(&mut store, config.acoustic_config(data.inventory.len()), &mut rng)?;
    let mut adam = AdamState::new(&store, s1.learning_rate);
    let probe = &data.train[..PROBE_UTTERANCES.min(data.train.len())];
    let initial_recon = probe_recon(&model, &store, probe)?;

    let mut csv = String::from("step,recon,kl,alpha\n");
    for step in 1..=s1.steps {
        let alpha = anneal_alpha(step, &s1.anneal);
        let (mut recon, mut kl, mut loss) = (0.0, 0.0, 0.0);
        for _ in 0..s1.batch_size {
            let u = &data.train[rng.random_range(0..data.train.len())];
            let tape = Tape::new();
            let y = model.encode_phonemes(&tape, &store, &u.ids)?;
            let up = upsample(y, &u.durations)?;
            let x = tape.constant(u.mel.clone());
            let latent = model.reference_encode(&tape, &store, x)?;
            let noise = Tensor::row(&normal_noise(&mut rng, config.latent_dim));
            let z = reparameterize(latent, &noise)?;
            let mask = model.prenet_mask(u.mel.rows(), &mut rng);
            let pred = model.decode(&tape, &store, up, z, Some(&u.mel), Some(&mask))?;
            let terms = elbo_loss(pred, x, latent, alpha)?;
            recon += terms.recon.item();
            kl += terms.kl.item();
            loss += terms.loss.item();
            store.accumulate(&terms.loss.backward());
        }
        let n = s1.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: step as usize,
                loss: loss / n,
            });
        }
        store.scale_grads(1.0 / n);
        clip_grad_norm(&mut store, s1.grad_clip);
        adam_step(&mut store, &mut adam)?;
        writeln!(csv, "{step},{},{},{alpha}", recon / n, kl / n).expect("string write");
    }

    let final_recon = probe_recon(&model, &store, probe)?;
    let prior = GaussianLatent::standard(config.latent_dim);
    let mut kl_total = 0.0;
    for u in &data.train {
        kl_total += kl_divergence(&model.posterior(&store, &u.mel)?, &prior)?;
    }
    let details = Stage1Details {
        phonemes: data.inventory.tokens().to_vec(),
        initial_recon,
        final_recon,
        mean_kl: kl_total / data.train.len() as f64,
    };
    save_checkpoint(out, Stage::Stage1, s1.steps, None, config, &store, &details)?;
    write_text(&out.join("loss.csv"), &csv)?;
    Ok(details)
}

/// Load a Stage I checkpoint and bind the acoustic model to it.
pub fn load_stage1(dir: &Path, data: &RunData) -> Result<(Checkpoint, AcousticModel)> {
    let ckpt = load_checkpoint(dir, Stage::Stage1)?;
    let details: Stage1Details = ckpt.manifest.details()?;
    if details.phonemes != data.inventory.tokens() {
        return Err(Error::Checkpoint(format!(
            "Stage I checkpoint at {} was trained on a different phoneme inventory",
            dir.display()
        )));
    }
    let model = AcousticModel::existing(
        &ckpt.params,
        ckpt.manifest.config.acoustic_config(details.phonemes.len()),
    )?;
    Ok((ckpt, model))
}

/// Saved in the sampler manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerDetails {
    pub sampler: SamplerConfig,
    pub labels: LabelVocab,
    /// Mean held-out divergence of the constant `N(0, I)` predictor.
    pub prior_heldout_kl: f64,
    pub initial_heldout_kl: f64,
    pub final_heldout_kl: f64,
    /// Reference encoder and acoustic parameters were bit-identical after training.
    pub frozen_unchanged: bool,
}

fn sampler_examples(
    items: &[Prepared],
    targets: Vec<GaussianLatent>,
    sampler: &SamplerConfig,
    vocab: &LabelVocab,
) -> Result<Vec<SamplerExample>> {
    items
        .iter()
        .zip(targets)
        .map(|(u, target)| {
            let embeddings = if sampler.variant.uses_embeddings() {
                Some(u.embeddings.clone().ok_or_else(|| {
                    Error::utterance(&u.id, format!("{} sampler needs word-piece embeddings", sampler.variant))
                })?)
            } else {
                None
            };
            let graph = sampler.variant.uses_graph().then(|| GraphInput::new(&u.graph, vocab));
            Ok(SamplerExample {
                embeddings,
                graph,
                target,
            })
        })
        .collect()
}

fn mean_kl(store: &ParamStore, sampler: &Sampler, examples: &[SamplerExample], config: &RunConfig) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let pred = sampler.predict(store, ex.input())?;
        total += kl_divergence_in(&pred, &ex.target, config.sampler.kl_direction)?;
    }
    Ok(total / examples.len() as f64)
}

/// Stage II: a text sampler matched to the frozen posterior.
pub fn train_sampler(config: &RunConfig, data: &RunData, stage1: &Path, out: &Path) -> Result<SamplerDetails> {
    let sc = &config.sampler;
    let (ckpt, acoustic) = load_stage1(stage1, data)?;
    let mut store = ckpt.params;
    let posteriors = |items: &[Prepared]| -> Result<Vec<GaussianLatent>> {
        items.iter().map(|u| acoustic.posterior(&store, &u.mel)).collect()
    };
    let train_targets = posteriors(&data.train)?;
    let held_targets = posteriors(&data.held_out)?;

    let vocab = data.label_vocab();
    let diameters = data.train.iter().map(|u| graph_diameter(&u.graph)).collect::<Result<Vec<_>>>()?;
    let sampler_config = SamplerConfig {
        variant: sc.variant,
        latent_dim: config.latent_dim,
        embedding_dim: config.embedding_dim,
        semantic_hidden: sc.semantic_hidden,
        graph_hidden: sc.graph_hidden,
        graph_lstm_hidden: sc.graph_lstm_hidden,
        labels: vocab.len(),
        passes: message_pass_count(&diameters)?,
    };
    let train = sampler_examples(&data.train, train_targets, &sampler_config, &vocab)?;
    let held = sampler_examples(&data.held_out, held_targets, &sampler_config, &vocab)?;

    let prior = GaussianLatent::standard(config.latent_dim);
    let mut prior_total = 0.0;
    for ex in &held {
        prior_total += kl_divergence_in(&prior, &ex.target, sc.kl_direction)?;
    }
    let prior_heldout_kl = prior_total / held.len() as f64;

    let mut rng = stage_rng(config.seed, SAMPLER_SALT);
    let frozen = store.subset(&[Namespace::Acoustic, Namespace::Reference]);
    let sampler = Sampler::new(&mut store, sampler_config.clone(), &mut rng)?;
    let mut adam = AdamState::new(&store, sc.learning_rate);
    let initial_heldout_kl = mean_kl(&store, &sampler, &held, config)?;

    let mut csv = format!("epoch,train_kl,heldout_kl,prior_kl\n0,,{initial_heldout_kl},{prior_heldout_kl}\n");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut heldout_kl = initial_heldout_kl;
    for epoch in 1..=sc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(sc.batch_size) {
            let batch: Vec<&SamplerExample> = chunk.iter().map(|&i| &train[i]).collect();
            total += train_sampler_step(&mut store, &mut adam, &sampler, &batch, sc.kl_direction, sc.grad_clip)?
                * batch.len() as f64;
        }
        heldout_kl = mean_kl(&store, &sampler, &held, config)?;
        writeln!(csv, "{epoch},{},{heldout_kl},{prior_heldout_kl}", total / train.len() as f64).expect("string write");
    }

    let frozen_unchanged = store.subset(&[Namespace::Acoustic, Namespace::Reference]).values_equal(&frozen);
    if !frozen_unchanged {
        return Err(Error::Checkpoint("sampler training modified frozen Stage I parameters".into()));
    }
    let details = SamplerDetails {
        sampler: sampler_config,
        labels: vocab,
        prior_heldout_kl,
        initial_heldout_kl,
        final_heldout_kl: heldout_kl,
        frozen_unchanged,
    };
    let steps = adam.step_count();
    let params = store.subset(&sc.variant.namespaces());
    save_checkpoint(out, Stage::Sampler, steps, Some(ckpt.hash), config, &params, &details)?;
    write_text(&out.join("heldout_kl.csv"), &csv)?;
    Ok(details)
}

/// Load a sampler checkpoint trained against the given Stage I hash.
pub fn load_sampler(dir: &Path, stage1_hash: &str) -> Result<(Checkpoint, Sampler, SamplerDetails)> {
    let ckpt = load_child(dir, Stage::Sampler, stage1_hash)?;
    let details: SamplerDetails = ckpt.manifest.details()?;
    let sampler = Sampler::existing(&ckpt.params, details.sampler.clone())?;
    Ok((ckpt, sampler, details))
}

/// Saved in the duration manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationDetails {
    pub model: DurationConfig,
    pub group_stats: GroupStats,
    /// Mean training loss with z at the sampler mean, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
}

struct DurationItem {
    ids: Vec<usize>,
    targets: Vec<f64>,
    pred: Option<GaussianLatent>,
}

/// Stage III: durations conditioned on latents drawn from the frozen sampler.
pub fn train_duration(config: &RunConfig, data: &RunData, sampler_dir: &Path, out: &Path) -> Result<DurationDetails> {
    let dc = &config.duration;
    let sampler_ckpt = load_checkpoint(sampler_dir, Stage::Sampler)?;
    let stage1_hash = sampler_ckpt
        .manifest
        .parent_hash
        .clone()
        .ok_or_else(|| Error::Checkpoint("sampler checkpoint records no Stage I parent".into()))?;
    let (sampler_ckpt, sampler, details) = load_sampler(sampler_dir, &stage1_hash)?;
    let vocab = &details.labels;

    let groups = dc.grouping.resolve(data.inventory.tokens())?;
    let stats = compute_group_stats(
        data.train
            .iter()
            .flat_map(|u| u.tokens.iter().map(String::as_str).zip(u.durations.iter().copied())),
        &groups,
    )?;

    let items = data
        .train
        .iter()
        .map(|u| {
            let targets = u
                .tokens
                .iter()
                .zip(&u.durations)
                .map(|(t, &d)| stats.normalize(d as f64, t))
                .collect::<Result<Vec<_>>>()?;
            let pred = if dc.conditioned {
                let graph = sampler.config.variant.uses_graph().then(|| GraphInput::new(&u.graph, vocab));
                Some(sampler.predict(&sampler_ckpt.params, u.sampler_input(graph.as_ref()))?)
            } else {
                None
            };
            Ok(DurationItem {
                ids: u.ids.clone(),
                targets,
                pred,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stage_rng(config.seed, DURATION_SALT);
    let mut store = ParamStore::new();
    let model_config = DurationConfig {
        phonemes: data.inventory.len(),
        embed: dc.embed,
        hidden: dc.hidden,
        latent_dim: dc.conditioned.then_some(config.latent_dim),
    };
    let model = DurationModel::new(&mut store, model_config.clone(), &mut rng)?;
    let mut adam = AdamState::new(&store, dc.learning_rate);

    let evaluate = |store: &ParamStore| -> Result<f64> {
        let mut total = 0.0;
        for it in &items {
            let tape = Tape::new();
            let z = it.pred.as_ref().map(|p| p.mean.as_slice());
            total += duration_loss(model.forward(&tape, store, &it.ids, z)?, &it.targets, dc.loss)?.item();
        }
        Ok(total / items.len() as f64)
    };
    let initial_loss = evaluate(&store)?;

    let mut csv = String::from("step,loss\n");
    for step in 1..=dc.steps {
        let batch = (0..dc.batch_size)
            .map(|_| {
                let it = &items[rng.random_range(0..items.len())];
                let z = it
                    .pred
                    .as_ref()
                    .map(|p| p.sample(&normal_noise(&mut rng, config.latent_dim), 1.0));
                DurationExample {
                    ids: it.ids.clone(),
                    targets: it.targets.clone(),
                    z,
                }
            })
            .collect::<Vec<_>>();
        let loss = duration_step(&mut store, &mut adam, &model, &batch, dc.loss, dc.grad_clip)?;
        writeln!(csv, "{step},{loss}").expect("string write");
    }

    let details = DurationDetails {
        model: model_config,
        group_stats: stats,
        initial_loss,
        final_loss: evaluate(&store)?,
    };
    save_checkpoint(out, Stage::Duration, dc.steps, Some(sampler_ckpt.hash), config, &store, &details)?;
    write_text(&out.join("loss.csv"), &csv)?;
    Ok(details)
}
