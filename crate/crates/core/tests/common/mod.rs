#![allow(dead_code)]

use aspect_transfer::corpus::{BioTag, DomainCorpus, Sentence};
use aspect_transfer::{EmbeddingTable, Model, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const WORDS: &[&str] = &["the", "staff", "was", "slow", "screen", "keys", "good", "food", "battery", "life"];

/// Widths small enough for finite differences.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        lstm_layers: 1,
        lstm_total: 4,
        heads: 2,
        fc_layers: 3,
        fc_dim: 5,
        recon_levels: 2,
        dropout: 0.0,
        batch_size: 4,
        epochs: 2,
        clip_norm: None,
        ..Default::default()
    }
}

pub fn toy_embeddings(dim: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vectors = WORDS
        .iter()
        .map(|w| (w.to_string(), (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Vec<(String, Vec<f64>)>>();
    EmbeddingTable::from_vectors(vectors, dim, seed, false).unwrap()
}

fn sentence(tokens: &[&str], tags: Option<&[BioTag]>, categories: &[bool], domain: &str) -> Sentence {
    Sentence {
        tokens: tokens.iter().map(|t| t.to_string()).collect(),
        tags: tags.map(<[BioTag]>::to_vec),
        categories: categories.to_vec(),
        domain_id: domain.to_owned(),
    }
}

pub fn toy_source() -> DomainCorpus {
    use BioTag::*;
    DomainCorpus::new(
        "src",
        vec!["display".into(), "input".into()],
        vec![
            sentence(&["the", "screen", "was", "good"], Some(&[N, BA, N, N]), &[true, false], "src"),
            sentence(&["battery", "life", "slow"], Some(&[BA, IA, N]), &[false, false], "src"),
            sentence(&["keys", "good"], Some(&[BA, N]), &[false, true], "src"),
            sentence(&["the", "screen", "keys", "unseen"], Some(&[N, BA, BA, N]), &[true, true], "src"),
        ],
    )
    .unwrap()
}

pub fn toy_target() -> DomainCorpus {
    DomainCorpus::new(
        "tgt",
        vec!["service".into(), "food".into(), "ambience".into()],
        vec![
            sentence(&["the", "staff", "was", "slow"], None, &[true, false, false], "tgt"),
            sentence(&["food", "good"], None, &[false, true, false], "tgt"),
            sentence(&["the", "food", "staff"], None, &[true, true, false], "tgt"),
        ],
    )
    .unwrap()
}

pub fn toy_model(config: ModelConfig) -> Model {
    let emb = toy_embeddings(config.embedding_dim, 11);
    Model::for_pair(config, emb, &toy_source(), &toy_target()).unwrap()
}
