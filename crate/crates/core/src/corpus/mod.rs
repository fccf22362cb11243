//! Utterance data model and on-disk corpus layout.
//!
//! A corpus directory holds `config.json`, `meta.jsonl` (one utterance per
//! line) and the files each row references: a `T×B` mel tensor, a Penn
//! parse string and an optional `L×E` embedding tensor.

mod mel;
mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::syntax;
use crate::tensor::Tensor;

pub use mel::{extract_mel, hz_to_mel, mel_filterbank, mel_to_hz, MelConfig, LOG_FLOOR};
pub use synth::{
    generate as generate_synthetic, phoneme_inventory, synth_corpus, FallbackEncoder, SynthConfig,
    SynthRecord, PAUSE_TOKENS,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhonemeSeq(pub Vec<String>);

impl PhonemeSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn ids(&self, inventory: &PhonemeInventory) -> Result<Vec<usize>> {
        self.0
            .iter()
            .map(|t| {
                inventory
                    .id(t)
                    .ok_or_else(|| Error::Config(format!("unknown phoneme `{t}`")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationSeq(pub Vec<u32>);

impl DurationSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> usize {
        self.0.iter().map(|&d| d as usize).sum()
    }

    pub fn frames(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    /// `[T, B]` log-mel energies.
    pub frames: Tensor,
    pub hop: usize,
    pub window: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn bins(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeq {
    /// `[L, E]`.
    pub values: Tensor,
    pub wordpieces: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedUtterance {
    pub id: String,
    pub text: String,
    pub phonemes: PhonemeSeq,
    pub durations: DurationSeq,
    pub mel: MelSpectrogram,
    pub parse: String,
    pub embeddings: Option<EmbeddingSeq>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl PhonemeInventory {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("phoneme `{t}` listed twice")));
            }
        }
        Ok(PhonemeInventory { tokens, index })
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Contents of a corpus `config.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub mel_bins: usize,
    pub embedding_dim: usize,
    pub phoneme_inventory: Vec<String>,
    pub hop: usize,
    pub window: usize,
    pub sample_rate: u32,
}

impl CorpusConfig {
    pub fn inventory(&self) -> Result<PhonemeInventory> {
        PhonemeInventory::new(self.phoneme_inventory.clone())
    }
}

/// One line of `meta.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRow {
    pub id: String,
    pub text: String,
    pub phonemes: Vec<String>,
    pub durations: Vec<u32>,
    pub mel: String,
    pub parse: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
    #[serde(default)]
    pub wordpieces: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub utterances: Vec<AnnotatedUtterance>,
}

impl Corpus {
    pub fn inventory(&self) -> Result<PhonemeInventory> {
        self.config.inventory()
    }

    pub fn get(&self, id: &str) -> Option<&AnnotatedUtterance> {
        self.utterances.iter().find(|u| u.id == id)
    }
}

fn check_utterance(u: &AnnotatedUtterance, cfg: &CorpusConfig, inv: &PhonemeInventory) -> Result<()> {
    let bad = |m: String| Error::utterance(&u.id, m);
    if u.phonemes.is_empty() {
        return Err(bad("no phonemes".into()));
    }
    if let Some(t) = u.phonemes.tokens().iter().find(|t| inv.id(t).is_none()) {
        return Err(bad(format!("unknown phoneme `{t}`")));
    }
    if u.durations.len() != u.phonemes.len() {
        return Err(bad(format!(
            "{} durations for {} phonemes",
            u.durations.len(),
            u.phonemes.len()
        )));
    }
    let frames = u.mel.num_frames();
    if frames == 0 {
        return Err(bad("mel has no frames".into()));
    }
    if u.mel.frames.dims().len() != 2 || u.mel.bins() != cfg.mel_bins {
        return Err(bad(format!(
            "mel dims {:?}, expected [T, {}]",
            u.mel.frames.dims(),
            cfg.mel_bins
        )));
    }
    if u.durations.total() != frames {
        return Err(bad(format!(
            "durations sum to {} but mel has {frames} frames",
            u.durations.total()
        )));
    }
    if !u.mel.frames.is_finite() {
        return Err(bad("mel contains non-finite values".into()));
    }
    syntax::parse_penn(&u.parse).map_err(|e| bad(format!("parse: {e}")))?;
    if let Some(emb) = &u.embeddings {
        let dims = emb.values.dims();
        if dims.len() != 2 || dims[0] == 0 || dims[1] != cfg.embedding_dim {
            return Err(bad(format!(
                "embeddings dims {dims:?}, expected [L >= 1, {}]",
                cfg.embedding_dim
            )));
        }
        if !emb.wordpieces.is_empty() && emb.wordpieces.len() != dims[0] {
            return Err(bad(format!(
                "{} word-pieces for {} embedding rows",
                emb.wordpieces.len(),
                dims[0]
            )));
        }
        if !emb.values.is_finite() {
            return Err(bad("embeddings contain non-finite values".into()));
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(format!("parsing {}", path.display()), e))
}

/// Load and validate every utterance; result is sorted by id.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let config: CorpusConfig = read_json(&dir.join("config.json"))?;
    let inventory = config.inventory()?;
    let meta_path = dir.join("meta.jsonl");
    let meta = fs::read_to_string(&meta_path)
        .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;

    let mut utterances = Vec::new();
    let mut seen = BTreeSet::new();
    for (line_no, line) in meta.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: MetaRow = serde_json::from_str(line).map_err(|e| {
            Error::json(format!("{} line {}", meta_path.display(), line_no + 1), e)
        })?;
        if !seen.insert(row.id.clone()) {
            return Err(Error::utterance(&row.id, "duplicate id"));
        }
        let u = load_row(dir, &row, &config)?;
        check_utterance(&u, &config, &inventory)?;
        utterances.push(u);
    }
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpus { config, utterances })
}

fn load_row(dir: &Path, row: &MetaRow, cfg: &CorpusConfig) -> Result<AnnotatedUtterance> {
    let wrap = |e: Error| Error::utterance(&row.id, e.to_string());
    let frames = Tensor::read_ktns(&dir.join(&row.mel)).map_err(wrap)?;
    let parse_path = dir.join(&row.parse);
    let parse = fs::read_to_string(&parse_path)
        .map_err(|e| Error::utterance(&row.id, format!("reading {}: {e}", parse_path.display())))?;
    let embeddings = match &row.embeddings {
        Some(rel) => Some(EmbeddingSeq {
            values: Tensor::read_ktns(&dir.join(rel)).map_err(wrap)?,
            wordpieces: row.wordpieces.clone(),
        }),
        None => None,
    };
    Ok(AnnotatedUtterance {
        id: row.id.clone(),
        text: row.text.clone(),
        phonemes: PhonemeSeq(row.phonemes.clone()),
        durations: DurationSeq(row.durations.clone()),
        mel: MelSpectrogram {
            frames,
            hop: cfg.hop,
            window: cfg.window,
            sample_rate: cfg.sample_rate,
        },
        parse: parse.trim().to_string(),
        embeddings,
    })
}

/// Write a corpus in the layout [`load_corpus`] reads.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    for sub in ["mel", "parse", "emb"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    }
    let cfg = serde_json::to_string_pretty(&corpus.config)
        .map_err(|e| Error::json("serializing corpus config", e))?;
    let cfg_path = dir.join("config.json");
    fs::write(&cfg_path, cfg + "\n")
        .map_err(|e| Error::io(format!("writing {}", cfg_path.display()), e))?;

    let meta_path = dir.join("meta.jsonl");
    let mut meta = fs::File::create(&meta_path)
        .map_err(|e| Error::io(format!("creating {}", meta_path.display()), e))?;
    for u in &corpus.utterances {
        let mel_rel = format!("mel/{}.ktns", u.id);
        let parse_rel = format!("parse/{}.txt", u.id);
        u.mel.frames.write_ktns(&dir.join(&mel_rel))?;
        let parse_path = dir.join(&parse_rel);
        fs::write(&parse_path, format!("{}\n", u.parse))
            .map_err(|e| Error::io(format!("writing {}", parse_path.display()), e))?;
        let (embeddings, wordpieces) = match &u.embeddings {
            Some(emb) => {
                let rel = format!("emb/{}.ktns", u.id);
                emb.values.write_ktns(&dir.join(&rel))?;
                (Some(rel), emb.wordpieces.clone())
            }
            None => (None, Vec::new()),
        };
        let row = MetaRow {
            id: u.id.clone(),
            text: u.text.clone(),
            phonemes: u.phonemes.0.clone(),
            durations: u.durations.0.clone(),
            mel: mel_rel,
            parse: parse_rel,
            embeddings,
            wordpieces,
        };
        let line = serde_json::to_string(&row).map_err(|e| Error::json("serializing meta row", e))?;
        writeln!(meta, "{line}").map_err(|e| Error::io(format!("writing {}", meta_path.display()), e))?;
    }
    Ok(())
}

/// Seeded shuffle into a train part of `round(fraction · n)` items and a
/// held-out remainder. Both parts keep the input order.
pub fn split_corpus<T: Clone>(items: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = items.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "splitting {n} items at {train_fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut held) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (i, item) in items.iter().enumerate() {
        if in_train[i] {
            train.push(item.clone());
        } else {
            held.push(item.clone());
        }
    }
    Ok((train, held))
}
