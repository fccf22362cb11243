use std::path::Path;

use crate::corpus::{load_corpus, split_corpus, AnnotatedUtterance, Corpus, PhonemeInventory};
use crate::error::{Error, Result};
use crate::samplers::{GraphInput, SamplerInput};
use crate::syntax::{graph_from_penn, LabelVocab, SyntaxGraph};
use crate::tensor::Tensor;

use super::config::RunConfig;

/// One utterance with everything the models consume already resolved.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
    pub durations: Vec<u32>,
    pub mel: Tensor,
    pub embeddings: Option<Tensor>,
    /// Word-stripped parse graph.
    pub graph: SyntaxGraph,
}

impl Prepared {
    pub fn new(u: &AnnotatedUtterance, inventory: &PhonemeInventory) -> Result<Self> {
        let graph = graph_from_penn(&u.parse).map_err(|e| Error::utterance(&u.id, format!("parse: {e}")))?;
        Ok(Prepared {
            id: u.id.clone(),
            tokens: u.phonemes.tokens().to_vec(),
            ids: u.phonemes.ids(inventory)?,
            durations: u.durations.frames().to_vec(),
            mel: u.mel.frames.clone(),
            embeddings: u.embeddings.as_ref().map(|e| e.values.clone()),
            graph,
        })
    }

    /// Bundle the sampler inputs; `graph` must come from this utterance.
    pub fn sampler_input<'a>(&'a self, graph: Option<&'a GraphInput>) -> SamplerInput<'a> {
        SamplerInput {
            embeddings: self.embeddings.as_ref(),
            graph,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunData {
    pub corpus: Corpus,
    pub inventory: PhonemeInventory,
    pub train: Vec<Prepared>,
    pub held_out: Vec<Prepared>,
}

impl RunData {
    /// Validate `config` against `corpus` and split by the run seed.
    pub fn new(corpus: Corpus, config: &RunConfig) -> Result<Self> {
        config.validate_against(&corpus.config)?;
        let inventory = corpus.inventory()?;
        let prepared = corpus
            .utterances
            .iter()
            .map(|u| Prepared::new(u, &inventory))
            .collect::<Result<Vec<_>>>()?;
        let (train, held_out) = split_corpus(&prepared, config.train_fraction, config.seed)?;
        Ok(RunData {
            corpus,
            inventory,
            train,
            held_out,
        })
    }

    pub fn load(dir: &Path, config: &RunConfig) -> Result<Self> {
        RunData::new(load_corpus(dir)?, config)
    }

    pub fn label_vocab(&self) -> LabelVocab {
        LabelVocab::build(self.train.iter().map(|p| &p.graph))
    }
}
