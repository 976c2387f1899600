#![allow(dead_code)]

use std::path::{Path, PathBuf};

use kpeq_core::corpus::{load_focus_data, SchemaMap};
use kpeq_core::model::{build_vocab, Model, ModelConfig};
use kpeq_core::retrieval::build_index;
use kpeq_core::training::save_checkpoint;

pub fn focus_fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/focus_3ep.json")
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_mult: 2,
        n_codes: 2,
        max_input_len: 64,
        max_source_len: 96,
        ..Default::default()
    }
}

/// A seeded, untrained checkpoint over the FoCus fixture, written to `dir/ckpt`.
pub fn fixture_checkpoint(dir: &Path) -> PathBuf {
    let data = load_focus_data(&focus_fixture(), &SchemaMap::default()).unwrap();
    let vocab = build_vocab(&data.episodes, &data.paragraphs, 2000);
    let model = Model::new(&tiny_model_config(), vocab, 11).unwrap();
    let index = build_index(&data.paragraphs, &model.retriever, &model.store, &model.vocab).unwrap();
    let ckpt = dir.join("ckpt");
    save_checkpoint(&model, &index, &ckpt).unwrap();
    ckpt
}
