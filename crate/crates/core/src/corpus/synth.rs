//! Synthetic corpus with a planted text → prosody relationship.
//!
//! Sentences come from a toy grammar over a pseudo-word lexicon. Each
//! sentence draws a hidden prosody scalar
//!
//! `s = tanh(a·depth + b·question + c·words/10 + ζ)`, `ζ ~ N(0, σ_ζ²)`
//!
//! where `depth` is the height of the word-stripped parse, `question` is 1
//! for questions and `words` excludes punctuation. Durations are the base
//! per-token durations scaled by `1 + 0.3·s` (rounded, at least one frame)
//! and the low quarter of the mel bins, the energy band, is scaled by
//! `1 + 0.5·s` before log compression.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    write_corpus, AnnotatedUtterance, Corpus, CorpusConfig, DurationSeq, EmbeddingSeq, MelConfig,
    MelSpectrogram, PhonemeSeq, LOG_FLOOR,
};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::BiLstm;
use crate::params::ParamStore;
use crate::syntax::{strip_words, NodeKind, ParseTree};
use crate::tensor::Tensor;

pub const PAUSE_TOKENS: [&str; 2] = ["sil", "sp"];
const CONSONANTS: [&str; 10] = ["p", "t", "k", "b", "d", "g", "m", "n", "s", "l"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

const LEXICON_SEED: u64 = 0x1e41_c0de;
const TEMPLATE_SEED: u64 = 0x7e3b_1a7e;
const ENCODER_SEED: u64 = 0xe3b0_c442;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub size: usize,
    pub seed: u64,
    pub mel: MelConfig,
    pub embedding_dim: usize,
    /// Weight of parse depth in the hidden prosody scalar.
    pub depth_coef: f64,
    /// Weight of the question flag.
    pub question_coef: f64,
    /// Weight of word count / 10.
    pub length_coef: f64,
    pub prosody_noise_std: f64,
    /// Multiplicative log-normal jitter on every mel cell.
    pub frame_noise_std: f64,
    pub question_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 200,
            seed: 1,
            mel: MelConfig::default(),
            embedding_dim: 16,
            depth_coef: 0.45,
            question_coef: -1.2,
            length_coef: -1.6,
            prosody_noise_std: 0.1,
            frame_noise_std: 0.05,
            question_rate: 0.3,
        }
    }
}

/// Hidden generation variables of one synthetic sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub id: String,
    pub prosody: f64,
    pub parse_depth: usize,
    pub question: bool,
    pub word_count: usize,
    /// Mean over phonemes of generated / base duration.
    pub duration_scale: f64,
}

pub fn phoneme_inventory() -> Vec<String> {
    PAUSE_TOKENS
        .iter()
        .chain(CONSONANTS.iter())
        .chain(VOWELS.iter())
        .map(|s| s.to_string())
        .collect()
}

pub(crate) fn base_duration(token: &str) -> u32 {
    match token {
        "sil" => 12,
        "sp" => 6,
        t if VOWELS.contains(&t) => 5,
        _ => 3,
    }
}

struct Lexicon {
    words: Vec<(&'static str, Vec<String>)>,
}

impl Lexicon {
    fn build() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(LEXICON_SEED);
        let mut used = std::collections::BTreeSet::new();
        let sizes = [
            ("DT", 4),
            ("NN", 12),
            ("JJ", 6),
            ("VBD", 8),
            ("IN", 4),
            ("RB", 4),
            ("PRP", 3),
            ("MD", 3),
        ];
        let words = sizes
            .iter()
            .map(|&(tag, n)| {
                let mut list = Vec::new();
                while list.len() < n {
                    let syllables = rng.random_range(1..=3);
                    let mut w = String::new();
                    for _ in 0..syllables {
                        w.push_str(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
                        w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
                        if rng.random_bool(0.25) {
                            w.push_str(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
                        }
                    }
                    if used.insert(w.clone()) {
                        list.push(w);
                    }
                }
                (tag, list)
            })
            .collect();
        Lexicon { words }
    }

    fn pick<R: Rng>(&self, tag: &str, rng: &mut R) -> &str {
        let list = &self
            .words
            .iter()
            .find(|(t, _)| *t == tag)
            .expect("tag in lexicon")
            .1;
        &list[rng.random_range(0..list.len())]
    }
}

struct Grammar<'a, R> {
    lex: &'a Lexicon,
    rng: R,
}

impl<R: Rng> Grammar<'_, R> {
    fn leaf(&mut self, tree: &mut ParseTree, parent: usize, tag: &str) {
        let pos = tree.add_child(parent, tag, NodeKind::Constituent);
        let w = self.lex.pick(tag, &mut self.rng).to_string();
        tree.add_child(pos, &w, NodeKind::Word);
    }

    fn np(&mut self, tree: &mut ParseTree, parent: usize, budget: usize) {
        let node = tree.add_child(parent, "NP", NodeKind::Constituent);
        if budget > 0 && self.rng.random_bool(0.3) {
            self.np(tree, node, budget - 1);
            let pp = tree.add_child(node, "PP", NodeKind::Constituent);
            self.leaf(tree, pp, "IN");
            self.np(tree, pp, budget - 1);
            return;
        }
        match self.rng.random_range(0..10) {
            0..=3 => {
                self.leaf(tree, node, "DT");
                self.leaf(tree, node, "NN");
            }
            4..=6 => {
                self.leaf(tree, node, "DT");
                self.leaf(tree, node, "JJ");
                self.leaf(tree, node, "NN");
            }
            7 => self.leaf(tree, node, "NN"),
            _ => self.leaf(tree, node, "PRP"),
        }
    }

    fn vp(&mut self, tree: &mut ParseTree, parent: usize, budget: usize) {
        let node = tree.add_child(parent, "VP", NodeKind::Constituent);
        self.leaf(tree, node, "VBD");
        let roll = self.rng.random_range(0..10);
        match roll {
            0..=1 => {}
            2..=4 => self.np(tree, node, budget),
            5..=6 => {
                self.np(tree, node, budget);
                let pp = tree.add_child(node, "PP", NodeKind::Constituent);
                self.leaf(tree, pp, "IN");
                self.np(tree, pp, budget.saturating_sub(1));
            }
            7 => {
                let adv = tree.add_child(node, "ADVP", NodeKind::Constituent);
                self.leaf(tree, adv, "RB");
            }
            _ if budget > 0 => {
                let sbar = tree.add_child(node, "SBAR", NodeKind::Constituent);
                let s = tree.add_child(sbar, "S", NodeKind::Constituent);
                self.np(tree, s, budget - 1);
                self.vp(tree, s, budget - 1);
            }
            _ => self.np(tree, node, budget),
        }
    }

    /// Returns the tree, whether it is a question, and the number of words
    /// before the pause inserted after the subject.
    fn sentence(&mut self, question_rate: f64) -> (ParseTree, bool, usize) {
        let question = self.rng.random_bool(question_rate);
        let budget = self.rng.random_range(0..=2);
        let mut tree = ParseTree::new(if question { "SQ" } else { "S" });
        if question {
            self.leaf(&mut tree, 0, "MD");
        }
        self.np(&mut tree, 0, budget);
        let subject_words = tree.word_count();
        self.vp(&mut tree, 0, budget);
        let punct = tree.add_child(0, ".", NodeKind::Constituent);
        tree.add_child(punct, if question { "?" } else { "." }, NodeKind::Word);
        (tree, question, subject_words)
    }
}

fn word_phonemes(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

/// Deterministic contextual embeddings for word-pieces: a hash-seeded
/// vector per piece, contextualized by a fixed random biLSTM.
pub struct FallbackEncoder {
    store: ParamStore,
    lstm: BiLstm,
    dim: usize,
}

impl FallbackEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Config(format!(
                "fallback embedding dim must be even and >= 2, got {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "fallback", dim, dim / 2, &mut rng)?;
        Ok(FallbackEncoder { store, lstm, dim })
    }

    pub fn piece_vector(&self, piece: &str) -> Vec<f64> {
        let digest = Sha256::digest(piece.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// `[L, dim]` embeddings for `L >= 1` pieces.
    pub fn encode(&self, pieces: &[String]) -> Result<Tensor> {
        if pieces.is_empty() {
            return Err(Error::EmptySequence("word-pieces"));
        }
        let rows: Vec<Vec<f64>> = pieces.iter().map(|p| self.piece_vector(p)).collect();
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows, self.dim)?);
        Ok(self.lstm.encode(&tape, &self.store, x)?.value())
    }
}

fn round_half_away(x: f64) -> f64 {
    x.round()
}

/// Generate `cfg.size` utterances in memory, with their hidden variables.
pub fn generate(cfg: &SynthConfig) -> Result<(Corpus, Vec<SynthRecord>)> {
    if cfg.size == 0 {
        return Err(Error::Config("synthetic corpus size must be at least 1".into()));
    }
    let bins = cfg.mel.mel_bins;
    let inventory = phoneme_inventory();
    let lex = Lexicon::build();
    let encoder = FallbackEncoder::new(cfg.embedding_dim)?;

    let mut trng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let templates: Vec<Vec<f64>> = inventory
        .iter()
        .map(|tok| {
            if PAUSE_TOKENS.contains(&tok.as_str()) {
                vec![2e-3; bins]
            } else {
                let gain = if VOWELS.contains(&tok.as_str()) { 1.0 } else { 0.4 };
                (0..bins).map(|_| gain * trng.random_range(0.05..1.0)).collect()
            }
        })
        .collect();
    let energy_band = (bins / 4).max(1);

    let mut grammar = Grammar {
        lex: &lex,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut utterances = Vec::with_capacity(cfg.size);
    let mut records = Vec::with_capacity(cfg.size);
    for i in 0..cfg.size {
        let id = format!("utt{i:05}");
        let (tree, question, subject_words) = grammar.sentence(cfg.question_rate);
        let words: Vec<String> = tree.words().iter().map(|w| w.to_string()).collect();
        let spoken = &words[..words.len() - 1];
        let depth = strip_words(&tree).height();
        let zeta = cfg.prosody_noise_std * noise.sample::<f64, _>(StandardNormal);
        let s = (cfg.depth_coef * depth as f64
            + cfg.question_coef * if question { 1.0 } else { 0.0 }
            + cfg.length_coef * spoken.len() as f64 / 10.0
            + zeta)
            .tanh();

        let mut phonemes = vec!["sil".to_string()];
        for (k, w) in spoken.iter().enumerate() {
            if k == subject_words {
                phonemes.push("sp".into());
            }
            phonemes.extend(word_phonemes(w));
        }
        phonemes.push("sil".into());

        let durations: Vec<u32> = phonemes
            .iter()
            .map(|p| round_half_away(base_duration(p) as f64 * (1.0 + 0.3 * s)).max(1.0) as u32)
            .collect();
        let duration_scale = durations
            .iter()
            .zip(&phonemes)
            .map(|(&d, p)| d as f64 / base_duration(p) as f64)
            .sum::<f64>()
            / phonemes.len() as f64;

        let total: usize = durations.iter().map(|&d| d as usize).sum();
        let mut frames = Vec::with_capacity(total * bins);
        for (p, &d) in phonemes.iter().zip(&durations) {
            let tid = inventory.iter().position(|t| t == p).expect("token in inventory");
            for _ in 0..d {
                for b in 0..bins {
                    let band = if b < energy_band { 1.0 + 0.5 * s } else { 1.0 };
                    let jitter = (cfg.frame_noise_std * noise.sample::<f64, _>(StandardNormal)).exp();
                    let e = templates[tid][b] * band * jitter;
                    frames.push((e.max(LOG_FLOOR).ln() as f32) as f64);
                }
            }
        }

        let punct = words.last().cloned().unwrap_or_default();
        let text = format!("{}{punct}", spoken.join(" "));
        let wordpieces = words.clone();
        let emb = encoder.encode(&wordpieces)?.quantize_f32();

        utterances.push(AnnotatedUtterance {
            id: id.clone(),
            text,
            phonemes: PhonemeSeq(phonemes),
            durations: DurationSeq(durations),
            mel: MelSpectrogram {
                frames: Tensor::matrix(total, bins, frames)?,
                hop: cfg.mel.hop,
                window: cfg.mel.window,
                sample_rate: cfg.mel.sample_rate,
            },
            parse: tree.to_penn(),
            embeddings: Some(EmbeddingSeq {
                values: emb,
                wordpieces,
            }),
        });
        records.push(SynthRecord {
            id,
            prosody: s,
            parse_depth: depth,
            question,
            word_count: spoken.len(),
            duration_scale,
        });
    }
    let corpus = Corpus {
        config: CorpusConfig {
            mel_bins: bins,
            embedding_dim: cfg.embedding_dim,
            phoneme_inventory: inventory,
            hop: cfg.mel.hop,
            window: cfg.mel.window,
            sample_rate: cfg.mel.sample_rate,
        },
        utterances,
    };
    Ok((corpus, records))
}

/// Generate and write a synthetic corpus to `dir`.
pub fn synth_corpus(dir: &std::path::Path, cfg: &SynthConfig) -> Result<Vec<SynthRecord>> {
    let (corpus, records) = generate(cfg)?;
    write_corpus(dir, &corpus)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;
    use crate::syntax::parse_penn;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            size: 12,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_corpus(a.path(), &small(5)).unwrap();
        synth_corpus(b.path(), &small(5)).unwrap();
        for rel in ["meta.jsonl", "config.json", "mel/utt00003.ktns", "emb/utt00007.ktns", "parse/utt00011.txt"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap(),
                "{rel}"
            );
        }
        let (c1, _) = generate(&small(5)).unwrap();
        let (c2, _) = generate(&small(6)).unwrap();
        assert_ne!(c1.utterances, c2.utterances);
    }

    #[test]
    fn zero_prosody_keeps_base_durations() {
        let cfg = SynthConfig {
            depth_coef: 0.0,
            question_coef: 0.0,
            length_coef: 0.0,
            prosody_noise_std: 0.0,
            ..small(2)
        };
        let (corpus, records) = generate(&cfg).unwrap();
        for (u, r) in corpus.utterances.iter().zip(&records) {
            assert_eq!(r.prosody, 0.0);
            for (p, &d) in u.phonemes.tokens().iter().zip(u.durations.frames()) {
                assert_eq!(d, base_duration(p));
            }
        }
    }

    #[test]
    fn pieces_and_parses_line_up() {
        let (corpus, records) = generate(&small(9)).unwrap();
        for (u, r) in corpus.utterances.iter().zip(&records) {
            let tree = parse_penn(&u.parse).unwrap();
            let emb = u.embeddings.as_ref().unwrap();
            assert_eq!(emb.wordpieces.len(), tree.word_count());
            assert_eq!(emb.values.dims(), &[tree.word_count(), 16]);
            assert_eq!(r.word_count + 1, tree.word_count());
            assert_eq!(u.phonemes.tokens().first().unwrap(), "sil");
            assert_eq!(tree.node(0).label == "SQ", r.question);
            assert_eq!(u.text.ends_with('?'), r.question);
        }
    }

    #[test]
    fn written_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        synth_corpus(dir.path(), &small(4)).unwrap();
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.utterances.len(), 12);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn planted_signal_is_strong() {
        let (_, records) = generate(&SynthConfig::default()).unwrap();
        let s: Vec<f64> = records.iter().map(|r| r.prosody).collect();
        let scale: Vec<f64> = records.iter().map(|r| r.duration_scale).collect();
        let r = pearson(&s, &scale);
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        eprintln!("pearson {r:.3} mean s {mean:.3} std s {std:.3}");
        assert!(r > 0.8, "pearson {r}");
        assert!(std > 0.25, "prosody spread {std}");
    }

    #[test]
    fn fallback_encoder_is_contextual() {
        let enc = FallbackEncoder::new(8).unwrap();
        let a = enc.encode(&["ka".into(), "mo".into()]).unwrap();
        let b = enc.encode(&["ti".into(), "mo".into()]).unwrap();
        assert_ne!(a.row_slice(1), b.row_slice(1));
        assert_eq!(a, enc.encode(&["ka".into(), "mo".into()]).unwrap());
        assert!(FallbackEncoder::new(7).is_err());
        assert!(enc.encode(&[]).is_err());
    }
}
