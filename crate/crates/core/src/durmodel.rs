//! Per-phoneme duration prediction in group-normalized space.
//!
//! Tokens are partitioned into groups (by default pauses and phones). Each
//! group has its own mean and population standard deviation over the
//! training durations, and the network regresses the owning group's z-score
//! `(d − μ_m) / σ_m`. The optional prosody latent is concatenated to every
//! phoneme embedding.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::corpus::{DurationSeq, PAUSE_TOKENS};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Embedding, Linear};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::{Namespace, ParamStore};
use crate::tensor::Tensor;

/// A named token group; tokens may be left empty for the catch-all group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: String,
    pub tokens: Vec<String>,
}

/// How the inventory is partitioned. Tokens not listed in `groups` fall
/// into `rest` when it is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingConfig {
    pub groups: Vec<GroupSpec>,
    pub rest: Option<String>,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            groups: vec![GroupSpec {
                id: "pause".into(),
                tokens: PAUSE_TOKENS.iter().map(|t| t.to_string()).collect(),
            }],
            rest: Some("phone".into()),
        }
    }
}

impl GroupingConfig {
    /// Assign every inventory token to exactly one group id.
    pub fn resolve(&self, inventory: &[String]) -> Result<Vec<GroupSpec>> {
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut out: Vec<GroupSpec> = Vec::new();
        for g in &self.groups {
            if out.iter().any(|o| o.id == g.id) || self.rest.as_deref() == Some(g.id.as_str()) {
                return Err(Error::Config(format!("duplicate duration group `{}`", g.id)));
            }
            for t in &g.tokens {
                if !inventory.contains(t) {
                    return Err(Error::Config(format!(
                        "duration group `{}` lists `{t}`, which is not in the inventory",
                        g.id
                    )));
                }
                if let Some(prev) = owner.insert(t, &g.id) {
                    return Err(Error::Config(format!(
                        "token `{t}` is in duration groups `{prev}` and `{}`",
                        g.id
                    )));
                }
            }
            out.push(GroupSpec {
                id: g.id.clone(),
                tokens: inventory.iter().filter(|t| g.tokens.contains(t)).cloned().collect(),
            });
        }
        let leftover: Vec<String> = inventory
            .iter()
            .filter(|t| !owner.contains_key(t.as_str()))
            .cloned()
            .collect();
        match (&self.rest, leftover.is_empty()) {
            (Some(id), false) => out.push(GroupSpec {
                id: id.clone(),
                tokens: leftover,
            }),
            (None, false) => {
                return Err(Error::Config(format!(
                    "tokens {leftover:?} belong to no duration group"
                )))
            }
            _ => {}
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationGroup {
    #[serde(rename = "group_id")]
    pub id: String,
    pub tokens: Vec<String>,
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupStats {
    pub groups: Vec<DurationGroup>,
}

impl GroupStats {
    pub fn group_of(&self, token: &str) -> Result<&DurationGroup> {
        self.groups
            .iter()
            .find(|g| g.tokens.iter().any(|t| t == token))
            .ok_or_else(|| Error::Config(format!("token `{token}` is in no duration group")))
    }

    pub fn normalize(&self, frames: f64, token: &str) -> Result<f64> {
        let g = self.group_of(token)?;
        Ok((frames - g.mu) / g.sigma)
    }

    pub fn denormalize(&self, value: f64, token: &str) -> Result<f64> {
        let g = self.group_of(token)?;
        Ok(value * g.sigma + g.mu)
    }
}

/// Mean and population standard deviation per group over all
/// `(token, frames)` observations, in the order given.
pub fn compute_group_stats<'a>(
    observations: impl IntoIterator<Item = (&'a str, u32)>,
    groups: &[GroupSpec],
) -> Result<GroupStats> {
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (gi, g) in groups.iter().enumerate() {
        for t in &g.tokens {
            owner.insert(t, gi);
        }
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    for (token, d) in observations {
        let gi = *owner
            .get(token)
            .ok_or_else(|| Error::Config(format!("token `{token}` is in no duration group")))?;
        values[gi].push(d as f64);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (g, v) in groups.iter().zip(&values) {
        if v.len() < 2 {
            return Err(Error::Config(format!(
                "duration group `{}` has {} observations, need at least 2",
                g.id,
                v.len()
            )));
        }
        let n = v.len() as f64;
        let mu = v.iter().sum::<f64>() / n;
        let sigma = (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt();
        if !(sigma > 0.0) {
            return Err(Error::Config(format!(
                "duration group `{}` has zero variance",
                g.id
            )));
        }
        out.push(DurationGroup {
            id: g.id.clone(),
            tokens: g.tokens.clone(),
            mu,
            sigma,
        });
    }
    Ok(GroupStats { groups: out })
}

/// Norm applied to each per-token residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DurationLossMode {
    /// `(1/P) Σ |d̂ − t|`.
    #[default]
    Absolute,
    /// `(1/P) Σ (d̂ − t)²`.
    Squared,
}

/// `predicted: [P, 1]` against normalized targets.
pub fn duration_loss<'t>(predicted: Var<'t>, targets: &[f64], mode: DurationLossMode) -> Result<Var<'t>> {
    if predicted.rows() != targets.len() || predicted.cols() != 1 {
        return Err(Error::Shape(format!(
            "{:?} predictions for {} targets",
            predicted.dims(),
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::EmptySequence("duration targets"));
    }
    let t = predicted
        .tape()
        .constant(Tensor::matrix(targets.len(), 1, targets.to_vec())?);
    let diff = predicted.sub(t)?;
    Ok(match mode {
        DurationLossMode::Absolute => diff.abs().mean(),
        DurationLossMode::Squared => diff.square().mean(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub phonemes: usize,
    pub embed: usize,
    pub hidden: usize,
    /// Latent width when conditioned on z; `None` for the text-only model.
    pub latent_dim: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct DurationModel {
    pub config: DurationConfig,
    table: Embedding,
    lstm: BiLstm,
    head: Linear,
}

impl DurationModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DurationConfig, rng: &mut R) -> Result<Self> {
        if config.phonemes == 0 || config.embed == 0 || config.hidden == 0 || config.latent_dim == Some(0) {
            return Err(Error::Config("duration model sizes must be positive".into()));
        }
        let n = |l: &str| Namespace::Duration.name(l);
        let input = config.embed + config.latent_dim.unwrap_or(0);
        let table = Embedding::new(store, &n("phoneme"), config.phonemes, config.embed, rng)?;
        let lstm = BiLstm::new(store, &n("lstm"), input, config.hidden, rng)?;
        let head = Linear::new(store, &n("head"), 2 * config.hidden, 1, true, rng)?;
        Ok(DurationModel {
            config,
            table,
            lstm,
            head,
        })
    }

    pub fn existing(store: &ParamStore, config: DurationConfig) -> Result<Self> {
        let n = |l: &str| Namespace::Duration.name(l);
        let model = DurationModel {
            table: Embedding::existing(store, &n("phoneme"))?,
            lstm: BiLstm::existing(store, &n("lstm"))?,
            head: Linear::existing(store, &n("head"))?,
            config,
        };
        if model.lstm.forward.input != model.config.embed + model.config.latent_dim.unwrap_or(0) {
            return Err(Error::Checkpoint(
                "duration model input width does not match its z-conditioning flag".into(),
            ));
        }
        Ok(model)
    }

    pub fn is_conditioned(&self) -> bool {
        self.config.latent_dim.is_some()
    }

    /// Normalized durations `[P, 1]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        ids: &[usize],
        z: Option<&[f64]>,
    ) -> Result<Var<'t>> {
        if ids.is_empty() {
            return Err(Error::EmptySequence("phoneme sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.phonemes) {
            return Err(Error::Index {
                index: bad,
                len: self.config.phonemes,
            });
        }
        let emb = self.table.forward(tape, store, ids)?;
        let input = match (self.config.latent_dim, z) {
            (Some(d), Some(z)) => {
                if z.len() != d {
                    return Err(Error::Shape(format!("z has {} dims, duration model expects {d}", z.len())));
                }
                let zr = tape.constant(Tensor::row(z)).gather_rows(&vec![0; ids.len()])?;
                tape.concat_cols(&[emb, zr])?
            }
            (Some(_), None) => {
                return Err(Error::Config(
                    "prosody-dependent duration model needs a latent z".into(),
                ))
            }
            (None, _) => emb,
        };
        let h = self.lstm.encode(tape, store, input)?;
        self.head.forward(tape, store, h)
    }

    /// Frames per token: denormalize, round half away from zero, at least 1.
    pub fn predict_durations(
        &self,
        store: &ParamStore,
        ids: &[usize],
        tokens: &[String],
        stats: &GroupStats,
        z: Option<&[f64]>,
    ) -> Result<DurationSeq> {
        if tokens.len() != ids.len() {
            return Err(Error::Shape(format!("{} tokens for {} ids", tokens.len(), ids.len())));
        }
        let tape = Tape::new();
        let out = self.forward(&tape, store, ids, z)?.value();
        quantize_durations(out.data(), tokens, stats)
    }
}

/// Map normalized outputs to whole frames.
pub fn quantize_durations(normalized: &[f64], tokens: &[String], stats: &GroupStats) -> Result<DurationSeq> {
    normalized
        .iter()
        .zip(tokens)
        .map(|(&v, t)| Ok(stats.denormalize(v, t)?.round().max(1.0) as u32))
        .collect::<Result<Vec<_>>>()
        .map(DurationSeq)
}

#[derive(Debug, Clone)]
pub struct DurationExample {
    pub ids: Vec<usize>,
    pub targets: Vec<f64>,
    pub z: Option<Vec<f64>>,
}

pub fn duration_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    model: &DurationModel,
    batch: &[DurationExample],
    mode: DurationLossMode,
    clip: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptySequence("duration batch"));
    }
    let mut total = 0.0;
    for ex in batch {
        let tape = Tape::new();
        let pred = model.forward(&tape, store, &ex.ids, ex.z.as_deref())?;
        let loss = duration_loss(pred, &ex.targets, mode)?;
        total += loss.item();
        store.accumulate(&loss.backward());
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        store.zero_grads();
        return Err(Error::NonFiniteLoss {
            step: adam.step_count() as usize + 1,
            loss: mean,
        });
    }
    store.scale_grads(1.0 / batch.len() as f64);
    clip_grad_norm(store, clip);
    adam_step(store, adam)?;
    Ok(mean)
}
