//! Text-driven predictors of the sentence-level prosody posterior.
//!
//! * semantic: biLSTM over word-piece embeddings, first ‖ last output rows;
//! * graph: single-head message-passing graph attention over the
//!   word-stripped parse, leaves gathered in depth-first order, then a
//!   biLSTM and first ‖ last rows;
//! * combined: both sentence vectors concatenated and jointly projected.
//!
//! Each variant ends in a projection to `[μ ‖ log σ²]`, trained to match the
//! frozen reference-encoder posterior by closed-form KL.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::latent::{kl_divergence_directed, GaussianLatent, KlDirection, LatentVar};
use crate::nn::{first_last, BiLstm, Embedding, Linear};
use crate::optim::{adam_step, clip_grad_norm, AdamState};
use crate::params::{Init, Namespace, ParamStore};
use crate::syntax::{LabelVocab, SyntaxGraph};
use crate::tensor::Tensor;

/// LeakyReLU slope on attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerVariant {
    Semantic,
    Graph,
    Combined,
}

impl SamplerVariant {
    pub fn uses_embeddings(self) -> bool {
        self != SamplerVariant::Graph
    }

    pub fn uses_graph(self) -> bool {
        self != SamplerVariant::Semantic
    }

    pub fn namespaces(self) -> Vec<Namespace> {
        match self {
            SamplerVariant::Semantic => vec![Namespace::Semantic],
            SamplerVariant::Graph => vec![Namespace::Graph],
            SamplerVariant::Combined => vec![Namespace::Semantic, Namespace::Graph, Namespace::Joint],
        }
    }
}

impl std::fmt::Display for SamplerVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerVariant::Semantic => "semantic",
            SamplerVariant::Graph => "graph",
            SamplerVariant::Combined => "combined",
        })
    }
}

impl std::str::FromStr for SamplerVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(SamplerVariant::Semantic),
            "graph" => Ok(SamplerVariant::Graph),
            "combined" => Ok(SamplerVariant::Combined),
            other => Err(Error::Config(format!(
                "unknown sampler variant `{other}` (semantic, graph, combined)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub variant: SamplerVariant,
    pub latent_dim: usize,
    pub embedding_dim: usize,
    pub semantic_hidden: usize,
    /// Label embedding and attention width.
    pub graph_hidden: usize,
    pub graph_lstm_hidden: usize,
    pub labels: usize,
    /// Message passes; fixed once from the training diameters.
    pub passes: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dim must be positive".into()));
        }
        if self.variant.uses_embeddings() && (self.embedding_dim == 0 || self.semantic_hidden == 0) {
            return Err(Error::Config("semantic sizes must be positive".into()));
        }
        if self.variant.uses_graph() {
            if self.graph_hidden == 0 || self.graph_lstm_hidden == 0 || self.labels == 0 {
                return Err(Error::Config("graph sizes must be positive".into()));
            }
            if self.passes == 0 {
                return Err(Error::Config("message pass count must be at least 1".into()));
            }
        }
        Ok(())
    }

    fn semantic_width(&self) -> usize {
        4 * self.semantic_hidden
    }

    fn graph_width(&self) -> usize {
        4 * self.graph_lstm_hidden
    }
}

/// A parse graph prepared for message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInput {
    pub label_ids: Vec<usize>,
    /// Receiving node per edge; each node's self edge comes first.
    pub edge_target: Vec<usize>,
    pub edge_source: Vec<usize>,
    pub leaves: Vec<usize>,
}

impl GraphInput {
    pub fn new(graph: &SyntaxGraph, vocab: &LabelVocab) -> Self {
        let mut edge_target = Vec::new();
        let mut edge_source = Vec::new();
        for i in 0..graph.len() {
            for j in std::iter::once(i).chain(graph.neighbors(i).iter().copied()) {
                edge_target.push(i);
                edge_source.push(j);
            }
        }
        GraphInput {
            label_ids: vocab.ids(graph),
            edge_target,
            edge_source,
            leaves: graph.leaf_order().to_vec(),
        }
    }

    pub fn nodes(&self) -> usize {
        self.label_ids.len()
    }
}

/// What a sampler reads for one sentence.
#[derive(Debug, Clone, Copy, Default)]
pub struct SamplerInput<'a> {
    /// `[L, E]` word-piece embeddings.
    pub embeddings: Option<&'a Tensor>,
    pub graph: Option<&'a GraphInput>,
}

pub struct MpgatOutput<'t> {
    /// `[nodes, graph_hidden]`.
    pub nodes: Var<'t>,
    /// Per pass, `[edges, 1]` attention weights in `GraphInput` edge order.
    pub attention: Vec<Var<'t>>,
}

#[derive(Debug, Clone)]
pub struct Sampler {
    pub config: SamplerConfig,
    semantic: Option<(BiLstm, Option<Linear>)>,
    graph: Option<GraphLayers>,
    joint: Option<Linear>,
}

#[derive(Debug, Clone)]
struct GraphLayers {
    labels: Embedding,
    transform: Linear,
    attn_self: String,
    attn_neighbor: String,
    lstm: BiLstm,
    proj: Option<Linear>,
}

impl Sampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: SamplerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let d2 = 2 * c.latent_dim;
        let combined = c.variant == SamplerVariant::Combined;
        let semantic = if c.variant.uses_embeddings() {
            let s = |l: &str| Namespace::Semantic.name(l);
            let lstm = BiLstm::new(store, &s("lstm"), c.embedding_dim, c.semantic_hidden, rng)?;
            let proj = if combined {
                None
            } else {
                Some(Linear::new(store, &s("proj"), c.semantic_width(), d2, true, rng)?)
            };
            Some((lstm, proj))
        } else {
            None
        };
        let graph = if c.variant.uses_graph() {
            let g = |l: &str| Namespace::Graph.name(l);
            let h = c.graph_hidden;
            let bound = 1.0 / (h as f64).sqrt();
            let labels = Embedding::new(store, &g("label"), c.labels, h, rng)?;
            let transform = Linear::new(store, &g("attn.u"), h, h, false, rng)?;
            let attn_self = g("attn.a_self");
            let attn_neighbor = g("attn.a_neighbor");
            store.register_random(&attn_self, &[h, 1], Init::Uniform(bound), rng)?;
            store.register_random(&attn_neighbor, &[h, 1], Init::Uniform(bound), rng)?;
            let lstm = BiLstm::new(store, &g("lstm"), h, c.graph_lstm_hidden, rng)?;
            let proj = if combined {
                None
            } else {
                Some(Linear::new(store, &g("proj"), c.graph_width(), d2, true, rng)?)
            };
            Some(GraphLayers {
                labels,
                transform,
                attn_self,
                attn_neighbor,
                lstm,
                proj,
            })
        } else {
            None
        };
        let joint = if combined {
            let width = c.semantic_width() + c.graph_width();
            Some(Linear::new(store, &Namespace::Joint.name("proj"), width, d2, true, rng)?)
        } else {
            None
        };
        Ok(Sampler {
            config,
            semantic,
            graph,
            joint,
        })
    }

    /// Bind to parameters already in `store`.
    pub fn existing(store: &ParamStore, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let combined = config.variant == SamplerVariant::Combined;
        let semantic = if config.variant.uses_embeddings() {
            let s = |l: &str| Namespace::Semantic.name(l);
            let proj = if combined {
                None
            } else {
                Some(Linear::existing(store, &s("proj"))?)
            };
            Some((BiLstm::existing(store, &s("lstm"))?, proj))
        } else {
            None
        };
        let graph = if config.variant.uses_graph() {
            let g = |l: &str| Namespace::Graph.name(l);
            for name in [g("attn.a_self"), g("attn.a_neighbor")] {
                if !store.contains(&name) {
                    return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
                }
            }
            Some(GraphLayers {
                labels: Embedding::existing(store, &g("label"))?,
                transform: Linear::existing(store, &g("attn.u"))?,
                attn_self: g("attn.a_self"),
                attn_neighbor: g("attn.a_neighbor"),
                lstm: BiLstm::existing(store, &g("lstm"))?,
                proj: if combined {
                    None
                } else {
                    Some(Linear::existing(store, &g("proj"))?)
                },
            })
        } else {
            None
        };
        let joint = if combined {
            Some(Linear::existing(store, &Namespace::Joint.name("proj"))?)
        } else {
            None
        };
        Ok(Sampler {
            config,
            semantic,
            graph,
            joint,
        })
    }

    /// Sentence vector `[1, 4·semantic_hidden]` from `[L, E]` embeddings.
    pub fn semantic_vector<'t>(&self, tape: &'t Tape, store: &ParamStore, embeddings: &Tensor) -> Result<Var<'t>> {
        let (lstm, _) = self
            .semantic
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} sampler has no semantic branch", self.config.variant)))?;
        if embeddings.dims().len() != 2 || embeddings.rows() == 0 {
            return Err(Error::EmptySequence("word-piece embeddings"));
        }
        if embeddings.cols() != self.config.embedding_dim {
            return Err(Error::Shape(format!(
                "embeddings are {} wide, sampler expects {}",
                embeddings.cols(),
                self.config.embedding_dim
            )));
        }
        let w = tape.constant(embeddings.clone());
        first_last(lstm.encode(tape, store, w)?)
    }

    /// Node representations after `passes` rounds of attention.
    pub fn mpgat_forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        graph: &GraphInput,
        passes: usize,
    ) -> Result<MpgatOutput<'t>> {
        let layers = self
            .graph
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} sampler has no graph branch", self.config.variant)))?;
        if passes == 0 {
            return Err(Error::Config("message pass count must be at least 1".into()));
        }
        let n = graph.nodes();
        if n == 0 {
            return Err(Error::EmptySequence("parse graph"));
        }
        let a_self = tape.param(store, &layers.attn_self);
        let a_neighbor = tape.param(store, &layers.attn_neighbor);
        let mut h = layers.labels.forward(tape, store, &graph.label_ids)?;
        let mut attention = Vec::with_capacity(passes);
        for _ in 0..passes {
            let uh = layers.transform.forward(tape, store, h)?;
            let score_self = uh.matmul(a_self)?.gather_rows(&graph.edge_target)?;
            let score_neighbor = uh.matmul(a_neighbor)?.gather_rows(&graph.edge_source)?;
            let logits = score_self.add(score_neighbor)?.leaky_relu(ATTENTION_SLOPE);
            let alpha = logits.segment_softmax(&graph.edge_target)?;
            let messages = uh.gather_rows(&graph.edge_source)?.mul_col(alpha)?;
            h = messages.segment_sum(&graph.edge_target, n)?.tanh();
            attention.push(alpha);
        }
        Ok(MpgatOutput { nodes: h, attention })
    }

    /// Sentence vector `[1, 4·graph_lstm_hidden]` from the parse graph.
    pub fn graph_vector<'t>(&self, tape: &'t Tape, store: &ParamStore, graph: &GraphInput) -> Result<Var<'t>> {
        let nodes = self.mpgat_forward(tape, store, graph, self.config.passes)?.nodes;
        let layers = self.graph.as_ref().expect("checked by mpgat_forward");
        let leaves = nodes.gather_rows(&graph.leaves)?;
        first_last(layers.lstm.encode(tape, store, leaves)?)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, input: SamplerInput<'_>) -> Result<LatentVar<'t>> {
        let need = |what: &'static str| {
            Error::Config(format!("{} sampler needs {what}", self.config.variant))
        };
        let out = match self.config.variant {
            SamplerVariant::Semantic => {
                let w = input.embeddings.ok_or_else(|| need("embeddings"))?;
                let v = self.semantic_vector(tape, store, w)?;
                let proj = self.semantic.as_ref().and_then(|s| s.1.as_ref()).expect("semantic projection");
                proj.forward(tape, store, v)?
            }
            SamplerVariant::Graph => {
                let g = input.graph.ok_or_else(|| need("a parse graph"))?;
                let v = self.graph_vector(tape, store, g)?;
                let proj = self.graph.as_ref().and_then(|g| g.proj.as_ref()).expect("graph projection");
                proj.forward(tape, store, v)?
            }
            SamplerVariant::Combined => {
                let w = input.embeddings.ok_or_else(|| need("embeddings"))?;
                let g = input.graph.ok_or_else(|| need("a parse graph"))?;
                let v = tape.concat_cols(&[
                    self.semantic_vector(tape, store, w)?,
                    self.graph_vector(tape, store, g)?,
                ])?;
                self.joint.as_ref().expect("joint projection").forward(tape, store, v)?
            }
        };
        let d = self.config.latent_dim;
        Ok(LatentVar {
            mean: out.slice_cols(0, d)?,
            log_var: out.slice_cols(d, d)?,
        })
    }

    pub fn predict(&self, store: &ParamStore, input: SamplerInput<'_>) -> Result<GaussianLatent> {
        let tape = Tape::new();
        Ok(self.forward(&tape, store, input)?.value())
    }
}

/// One Stage II training pair: text features and the frozen posterior.
#[derive(Debug, Clone)]
pub struct SamplerExample {
    pub embeddings: Option<Tensor>,
    pub graph: Option<GraphInput>,
    pub target: GaussianLatent,
}

impl SamplerExample {
    pub fn input(&self) -> SamplerInput<'_> {
        SamplerInput {
            embeddings: self.embeddings.as_ref(),
            graph: self.graph.as_ref(),
        }
    }
}

/// Mean divergence of a batch on one tape.
pub fn sampler_loss<'t>(
    tape: &'t Tape,
    store: &ParamStore,
    sampler: &Sampler,
    batch: &[&SamplerExample],
    direction: KlDirection,
) -> Result<Var<'t>> {
    if batch.is_empty() {
        return Err(Error::EmptySequence("sampler batch"));
    }
    let mut total: Option<Var<'t>> = None;
    for ex in batch {
        let pred = sampler.forward(tape, store, ex.input())?;
        let kl = kl_divergence_directed(pred, ex.target.on(tape), direction)?;
        total = Some(match total {
            None => kl,
            Some(t) => t.add(kl)?,
        });
    }
    Ok(total.expect("non-empty").scale(1.0 / batch.len() as f64))
}

/// One optimizer step on the sampler parameters. Targets are plain
/// values, so nothing upstream of them can receive gradient.
pub fn train_sampler_step(
    store: &mut ParamStore,
    adam: &mut AdamState,
    sampler: &Sampler,
    batch: &[&SamplerExample],
    direction: KlDirection,
    clip: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let tape = Tape::new();
        let loss = sampler_loss(&tape, store, sampler, batch, direction)?;
        (loss.item(), loss.backward())
    };
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: adam.step_count() as usize + 1,
            loss,
        });
    }
    store.accumulate(&grads);
    clip_grad_norm(store, clip);
    adam_step(store, adam)?;
    Ok(loss)
}
