use unlearn_core::corpus::{generate, DocCounts};
use unlearn_core::evaluator::utility_score;
use unlearn_core::model::init_model;
use unlearn_core::pipeline::{build_target, memorization_set, run_unlearning, UnlearnJob};
use unlearn_core::{CorpusSpec, RunConfig, Split};

#[test]
fn untrained_model_is_near_chance_on_utility() {
    let cfg = RunConfig::default();
    let corpus = generate(&cfg.corpus).unwrap().corpus;
    let utility = corpus.utility();
    assert!(utility.len() >= 10);
    for seed in [0, 1] {
        let fresh = init_model(&cfg.model, seed).unwrap();
        let u = utility_score(&fresh, &utility, &cfg.eval).unwrap();
        assert!(u <= 0.1, "seed {seed}: {u}");
    }
}

#[test]
fn utility_prompts_never_reach_memorization() {
    let cfg = RunConfig::default();
    let corpus = generate(&cfg.corpus).unwrap().corpus;
    let train = memorization_set(&corpus, &cfg.corpus);
    for u in corpus.utility() {
        assert!(train.iter().all(|s| s.input != u.input), "{} is trained on", u.id);
    }
    assert!(train.iter().all(|s| s.split != Split::Holdout && s.split != Split::Utility));
}

#[test]
fn unlearning_reports_at_epochs_ten_and_twenty() {
    let one = DocCounts {
        creative: 1,
        biography: 1,
        web: 1,
    };
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusSpec {
        forget: one,
        retain: one,
        holdout: one,
        utility: 4,
        background: 8,
        ..CorpusSpec::default()
    };
    cfg.memorize.max_epochs = 2;
    cfg.memorize.min_accuracy = 0.0;
    let corpus = generate(&cfg.corpus).unwrap().corpus;
    let (target, _) = build_target(&cfg, &corpus).unwrap();
    let job = UnlearnJob {
        corpus: &corpus,
        loss: cfg.loss,
        train: cfg.train.clone(),
        eval: cfg.eval,
        rank: cfg.model.lora_rank,
        provenance: None,
    };
    let mut seen = Vec::new();
    let (state, log) = run_unlearning(&target, &job, &mut |e, _, _| {
        seen.push(e);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [10, 20]);
    assert_eq!(log.records.len(), 20);
    assert_eq!(log.reports().iter().map(|(e, _)| *e).collect::<Vec<_>>(), [10, 20]);
    // Frozen backbone.
    for ((_, a), (_, b)) in target.backbone.named().iter().zip(state.backbone.named()) {
        assert!(a.bit_eq(b));
    }
}
