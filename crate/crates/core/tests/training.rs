//! Training loop behaviour: determinism, resumption, failure paths.

mod common;

use aspect_transfer::trainer::{evaluate, fit, Checkpoint, Trainer};
use aspect_transfer::{Error, ModelConfig};
use common::{toy_config, toy_embeddings, toy_model, toy_source, toy_target};

fn config() -> ModelConfig {
    ModelConfig {
        dropout: 0.2,
        epochs: 3,
        ..toy_config()
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let run = || {
        let t = fit(&toy_source(), &toy_target(), toy_embeddings(4, 11), config()).unwrap();
        (t.state.history, t.model.params.get(t.model.embedding).clone())
    };
    let (a, ea) = run();
    let (b, eb) = run();
    assert_eq!(a, b);
    assert_eq!(ea, eb);
    assert_eq!(a.len(), 3);

    let other = fit(
        &toy_source(),
        &toy_target(),
        toy_embeddings(4, 11),
        ModelConfig { seed: 1, ..config() },
    )
    .unwrap();
    assert_ne!(other.state.history, a);
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    let (source, target) = (toy_source(), toy_target());
    let mut straight = Trainer::new(toy_model(config()));
    straight.fit(&source, &target).unwrap();

    let mut first = Trainer::new(toy_model(config()));
    first.run_epoch(&source, &target).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    first.checkpoint().save(&path).unwrap();
    drop(first);

    let mut resumed = Trainer::from_checkpoint(Checkpoint::load(&path).unwrap());
    assert_eq!(resumed.state.epoch, 1);
    resumed.fit(&source, &target).unwrap();
    assert_eq!(resumed.state.history, straight.state.history);
    for id in straight.model.params.ids() {
        assert_eq!(resumed.model.params.get(id), straight.model.params.get(id));
    }
}

#[test]
fn checkpoint_preserves_decoding() {
    let (source, target) = (toy_source(), toy_target());
    let trainer = fit(&source, &target, toy_embeddings(4, 11), config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    trainer.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap().model;
    for s in &source.sentences {
        assert_eq!(loaded.decode(&s.tokens).unwrap(), trainer.model.decode(&s.tokens).unwrap());
        assert_eq!(
            loaded.token_attention(&s.tokens).unwrap(),
            trainer.model.token_attention(&s.tokens).unwrap()
        );
    }
}

#[test]
fn non_finite_loss_aborts_with_the_component() {
    let (source, target) = (toy_source(), toy_target());
    let mut trainer = Trainer::new(toy_model(config()));
    let id = trainer.model.extractor.transitions;
    trainer.model.params.get_mut(id)[[0, 0]] = f64::NAN;
    match trainer.run_epoch(&source, &target) {
        Err(Error::NonFinite { component, epoch, .. }) => {
            assert_eq!(component, "extraction");
            assert_eq!(epoch, 0);
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
    assert!(trainer.state.history.is_empty());

    let mut trainer = Trainer::new(toy_model(config()));
    let id = trainer.model.transfer.levels[0].w2;
    trainer.model.params.get_mut(id)[[0, 0]] = f64::INFINITY;
    match trainer.run_epoch(&source, &target) {
        Err(Error::NonFinite { component, .. }) => assert_eq!(component, "reconstruction"),
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn training_lowers_the_loss() {
    let config = ModelConfig {
        epochs: 30,
        dropout: 0.0,
        ..toy_config()
    };
    let trainer = fit(&toy_source(), &toy_target(), toy_embeddings(4, 11), config).unwrap();
    let h = &trainer.state.history;
    assert!(h.last().unwrap().losses.total < 0.8 * h[0].losses.total, "{h:?}");
    assert!(h.last().unwrap().losses.extraction < h[0].losses.extraction);
}

#[test]
fn evaluation_needs_gold_tags() {
    let model = toy_model(config());
    assert!(matches!(evaluate(&model, &toy_target()), Err(Error::Validation(_))));
    let report = evaluate(&model, &toy_source()).unwrap();
    assert_eq!(report.gold_count, 5);
}

#[test]
fn unlabeled_source_and_unknown_domains_are_rejected() {
    let mut trainer = Trainer::new(toy_model(config()));
    assert!(trainer.run_epoch(&toy_target(), &toy_target()).is_err());
    let mut renamed = toy_target();
    renamed.name = "elsewhere".into();
    assert!(matches!(
        trainer.run_epoch(&toy_source(), &renamed),
        Err(Error::UnknownDomain(_))
    ));
}
