//! The full system: selectors, retriever towers and generator over one
//! parameter store, plus checkpoint I/O.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive;
use crate::corpus::{episode_texts, DialogueEpisode, Paragraph};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::params::ParamStore;
use crate::retrieval::Retriever;
use crate::scoring::{Selector, SelectorConfig};
use crate::vocab::Vocab;

pub const META_FILE: &str = "meta.json";
pub const INDEX_DIR: &str = "index";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Vocabulary cap, reserved tokens included.
    pub max_vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout_rate: f64,
    /// Poly-encoder context codes (M).
    pub n_codes: usize,
    /// Persona sentences per episode (P).
    pub personas: usize,
    /// Longest selector input, `U` or a cross-encoder pair.
    pub max_input_len: usize,
    /// Longest retriever query and generator source or target.
    pub max_source_len: usize,
    pub share_selector_encoders: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            max_vocab: 4000,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            dropout_rate: 0.0,
            n_codes: 16,
            personas: 5,
            max_input_len: 64,
            max_source_len: 96,
            share_selector_encoders: false,
        }
    }
}

impl ModelConfig {
    fn encoder(&self, vocab_size: usize, max_seq_len: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len,
            dropout_rate: self.dropout_rate,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn selector_config(&self, vocab_size: usize) -> SelectorConfig {
        SelectorConfig {
            encoder: self.encoder(vocab_size, self.max_input_len),
            n_codes: self.n_codes,
            personas: self.personas,
            share_encoders: self.share_selector_encoders,
        }
    }

    pub fn source_config(&self, vocab_size: usize) -> EncoderConfig {
        self.encoder(vocab_size, self.max_source_len)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    format: u32,
    config: ModelConfig,
    vocab: Vocab,
    /// Parameters excluded from training when the checkpoint was written.
    frozen: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub selector: Selector,
    pub retriever: Retriever,
    pub generator: Generator,
}

/// Vocabulary over episodes and index paragraphs.
pub fn build_vocab(episodes: &[DialogueEpisode], paragraphs: &[Paragraph], max_size: usize) -> Vocab {
    let texts = episodes
        .iter()
        .flat_map(episode_texts)
        .chain(paragraphs.iter().flat_map(|p| [p.title.as_str(), p.text.as_str()]));
    Vocab::build(texts, max_size)
}

impl Model {
    /// Fresh parameters, drawn in a fixed order from `seed`.
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let v = vocab.len();
        let selector = Selector::new(&mut store, "sel", &config.selector_config(v), &mut rng)?;
        let retriever = Retriever::new(&mut store, "ret", &config.source_config(v), &mut rng)?;
        let generator = Generator::new(&mut store, "gen", &config.source_config(v), &mut rng)?;
        Ok(Self { config: config.clone(), vocab, store, selector, retriever, generator })
    }

    /// Writes `manifest.json`, `tensors.bin` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries = self.store.entries();
        archive::save_tensors(dir, entries.iter().map(|e| (e.name.as_str(), &e.value)))?;
        let meta = Meta {
            format: 1,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            frozen: entries.iter().filter(|e| !e.trainable).map(|e| e.name.clone()).collect(),
        };
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("checkpoint meta", e))?;
        let path = dir.join(META_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.exists() {
            return Err(Error::FileNotFound(dir.to_path_buf()));
        }
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        meta.vocab.reindex();
        let mut model = Self::new(&meta.config, meta.vocab, 0)?;
        let tensors = archive::load_tensors(dir)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, value) in tensors {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Corrupt(format!("unexpected tensor {name}")))?;
            if model.store.get(id).shape() != value.shape() {
                return Err(Error::Corrupt(format!("tensor {name} has shape {:?}", value.shape())));
            }
            *model.store.get_mut(id) = value;
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let frozen = meta.frozen.iter().any(|n| n == model.store.name(id));
            model.store.set_trainable(id, !frozen);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_with_paragraphs, SynthConfig};

    fn small() -> ModelConfig {
        ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, n_codes: 2, max_input_len: 40, max_source_len: 60, ..Default::default() }
    }

    #[test]
    fn checkpoint_round_trip_is_exact_at_stored_precision() {
        let corpus = generate_synthetic_with_paragraphs(&SynthConfig { episodes: 3, ..Default::default() }, 1).unwrap();
        let vocab = build_vocab(&corpus.episodes, &corpus.paragraphs, 500);
        let mut model = Model::new(&small(), vocab, 4).unwrap();
        model.store.set_trainable_prefix("ret.doc.", false);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = Model::load(dir.path()).unwrap();
        let mut rounded = model.store.clone();
        rounded.round_to_f32();
        assert_eq!(back.store, rounded);
        assert_eq!(back.vocab, model.vocab);
        assert_eq!(back.config, model.config);
    }

    #[test]
    fn missing_checkpoint_is_file_not_found() {
        assert!(matches!(Model::load(Path::new("missing.ckpt")), Err(Error::FileNotFound(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let vocab = Vocab::build(["a b c"], 50);
        let a = Model::new(&small(), vocab.clone(), 9).unwrap();
        let b = Model::new(&small(), vocab, 9).unwrap();
        assert_eq!(a.store, b.store);
    }
}
