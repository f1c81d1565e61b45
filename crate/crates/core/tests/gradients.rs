//! Analytic gradients of every loss term against central finite differences.

mod common;

use aspect_transfer::autograd::ParamId;
use aspect_transfer::corpus::DomainCorpus;
use aspect_transfer::trainer::{MixedBatch, Trainer};
use aspect_transfer::ModelConfig;
use common::{toy_config, toy_model, toy_source, toy_target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROBES: usize = 50;
const STEP: f64 = 1e-4;
const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

fn total(trainer: &Trainer, s: &DomainCorpus, t: &DomainCorpus, batch: &MixedBatch) -> f64 {
    trainer.batch_gradients(s, t, batch, 0, 0).unwrap().1.total
}

/// Largest relative error over `PROBES` random parameter entries that the
/// batch objective touches.
fn max_relative_error(config: ModelConfig, batch: MixedBatch, seed: u64) -> f64 {
    let (source, target) = (toy_source(), toy_target());
    let mut trainer = Trainer::new(toy_model(config));
    let (grads, _) = trainer.batch_gradients(&source, &target, &batch, 0, 0).unwrap();
    let touched: Vec<(ParamId, usize)> = grads.iter().map(|(id, g)| (id, g.len())).collect();
    assert!(!touched.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..PROBES {
        let (id, len) = touched[rng.random_range(0..touched.len())];
        let flat = rng.random_range(0..len);
        let cols = grads.get(id).unwrap().ncols();
        let (i, j) = (flat / cols, flat % cols);
        let analytic = grads.get(id).unwrap()[[i, j]];

        let base = trainer.model.params.get(id)[[i, j]];
        let mut at = |delta: f64| {
            trainer.model.params.get_mut(id)[[i, j]] = base + delta;
            total(&trainer, &source, &target, &batch)
        };
        let numeric = (at(-2.0 * STEP) - 8.0 * at(-STEP) + 8.0 * at(STEP) - at(2.0 * STEP)) / (12.0 * STEP);
        trainer.model.params.get_mut(id)[[i, j]] = base;

        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        let name = &trainer.model.params.param(id).name;
        assert!(err.is_finite(), "{name}[{i},{j}]");
        if err > TOLERANCE {
            eprintln!("{name}[{i},{j}]: analytic {analytic:e} numeric {numeric:e}");
        }
        worst = worst.max(err);
    }
    worst
}

fn source_only(n: usize) -> MixedBatch {
    MixedBatch {
        source: (0..n).collect(),
        target: vec![],
    }
}

fn target_only(n: usize) -> MixedBatch {
    MixedBatch {
        source: vec![],
        target: (0..n).collect(),
    }
}

#[test]
fn extraction_loss_gradient() {
    // λ = β = 0 leaves L_e alone.
    let config = ModelConfig { lambda: 0.0, beta: 0.0, ..toy_config() };
    let err = max_relative_error(config, source_only(4), 1);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn categorization_loss_gradient() {
    // Target sentences carry no extraction term; β = 0 leaves λ·L_c.
    let config = ModelConfig { lambda: 1.0, beta: 0.0, ..toy_config() };
    let err = max_relative_error(config, target_only(3), 2);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn reconstruction_loss_gradient() {
    let config = ModelConfig { lambda: 0.0, beta: 1.0, ..toy_config() };
    let err = max_relative_error(config, target_only(3), 3);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn total_loss_gradient() {
    let batch = MixedBatch {
        source: vec![0, 1, 3],
        target: vec![2, 0],
    };
    let err = max_relative_error(toy_config(), batch, 4);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn total_loss_gradient_with_dropout_and_depth() {
    // Masks are a function of the batch position, so they repeat across the
    // perturbed evaluations.
    let config = ModelConfig {
        dropout: 0.3,
        lstm_layers: 2,
        heads: 3,
        ..toy_config()
    };
    let batch = MixedBatch {
        source: vec![2, 3],
        target: vec![1, 2],
    };
    let err = max_relative_error(config, batch, 5);
    assert!(err < TOLERANCE, "max relative error {err}");
}

#[test]
fn total_loss_gradient_without_recurrence_or_heads() {
    let config = ModelConfig {
        lstm_layers: 0,
        heads: 0,
        ..toy_config()
    };
    let batch = MixedBatch {
        source: vec![0, 1],
        target: vec![0, 1],
    };
    let err = max_relative_error(config, batch, 6);
    assert!(err < TOLERANCE, "max relative error {err}");
}
