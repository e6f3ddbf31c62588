use jmie_core::corpus::{generate_synthetic_corpus, split_train_dev, Document, SynthSpec};
use jmie_core::evaluation::{evaluate, Protocol};
use jmie_core::pipeline::GoldInjection;
use jmie_core::trainer::{run_seeds, train, Arch, Resources, TrainConfig, TrainedModel};
use jmie_core::TrainError;

fn corpus() -> Vec<Document> {
    let spec = SynthSpec {
        sentences: 30,
        sentences_per_doc: 2,
        ..SynthSpec::default()
    };
    generate_synthetic_corpus(&spec, 5).unwrap()
}

fn small(arch: Arch, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig {
        arch,
        max_epochs: epochs,
        seed: 3,
        unsafe_hparams: true,
        ..TrainConfig::default()
    };
    c.model.encoder.word_dim = 8;
    c.model.encoder.hidden = 4;
    c.model.relation_hidden = 16;
    c
}

#[test]
fn zero_patience_stops_after_one_epoch() {
    let docs = corpus();
    for arch in [Arch::Joint, Arch::Pipeline] {
        let config = TrainConfig {
            patience: 0,
            ..small(arch, 20)
        };
        let (_, _, records) = train(&docs, &config, &Resources::default()).unwrap();
        for r in &records {
            assert_eq!(r.epochs.len(), 1, "{} {}", arch, r.stage);
            assert_eq!(r.best_epoch, 1);
        }
    }
}

#[test]
fn epoch_cap_and_best_epoch_are_recorded() {
    let (_, _, records) = train(&corpus(), &small(Arch::Joint, 4), &Resources::default()).unwrap();
    let r = &records[0];
    assert!(r.epochs.len() <= 4);
    assert!((1..=r.epochs.len()).contains(&r.best_epoch));
    let best = r.epochs.iter().map(|e| e.dev_score).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(r.best_dev_score, best);
    assert_eq!(r.additivity_violations, 0);
    assert!(r.batches > 0);
}

#[test]
fn single_seed_run_matches_plain_training() {
    let docs = corpus();
    let config = small(Arch::Joint, 2);
    let (mean, runs) = run_seeds(&docs, None, &config, &[config.seed], &Resources::default()).unwrap();
    let (model, cfg, _) = train(&docs, &config, &Resources::default()).unwrap();
    let (_, dev) = split_train_dev(&docs, cfg.dev_fraction, cfg.seed).unwrap();
    let pred = model.predict(&dev, GoldInjection::None, |_, _, _| {}).unwrap();
    let report = evaluate(&pred, &dev, Protocol::Joint).unwrap();
    assert_eq!(runs.len(), 1);
    assert_eq!(runs[0].report, report);
    assert_eq!(mean, report);
}

#[test]
fn saved_models_predict_identically_after_loading() {
    let docs = corpus();
    for arch in [Arch::Joint, Arch::Pipeline] {
        let (model, cfg, _) = train(&docs, &small(arch, 2), &Resources::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), &cfg).unwrap();
        let (loaded, loaded_cfg) = TrainedModel::load(dir.path(), &Resources::default()).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.arch(), arch);
        let inputs: Vec<Document> = docs.iter().map(Document::unannotated).collect();
        let a = model.predict(&inputs, GoldInjection::None, |_, _, _| {}).unwrap();
        let b = loaded.predict(&inputs, GoldInjection::None, |_, _, _| {}).unwrap();
        assert_eq!(a, b, "{arch}");
    }
}

#[test]
fn out_of_grid_learning_rate_is_rejected() {
    let config = TrainConfig {
        lr: 0.5,
        ..TrainConfig::default()
    };
    let err = train(&corpus(), &config, &Resources::default()).unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)));
}
