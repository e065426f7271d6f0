//! Stage composition: corpus → target model → unlearning runs with scoring.

use std::path::Path;

use crate::config::RunConfig;
use crate::corpus::{background_samples, Corpus, CorpusSpec, Sample};
use crate::error::Result;
use crate::evaluator::{evaluate, EvalConfig, ScoreReport};
use crate::losses::LossConfig;
use crate::model::{init_model, Checkpoint, ModelState};
use crate::provenance::Provenance;
use crate::trainer::{memorize, unlearn, MemorizeEpoch, RunLog, TrainConfig};

/// What the target model learns: the forget and retain splits plus general
/// background knowledge that utility questions later probe.
pub fn memorization_set(corpus: &Corpus, spec: &CorpusSpec) -> Vec<Sample> {
    let mut out: Vec<Sample> = corpus.forget().into_iter().cloned().collect();
    out.extend(corpus.retain().into_iter().cloned());
    out.extend(background_samples(spec.background, spec.seed));
    out
}

/// Fresh model (seeded by the memorization seed) fine-tuned on the memorization set.
pub fn build_target(
    cfg: &RunConfig,
    corpus: &Corpus,
) -> Result<(ModelState, Vec<MemorizeEpoch>)> {
    let fresh = init_model(&cfg.model, cfg.memorize.seed)?;
    memorize(&fresh, &memorization_set(corpus, &cfg.corpus), &cfg.memorize)
}

/// The target with fresh adapters of the given rank (α from the target's config).
pub fn with_fresh_lora(target: &ModelState, rank: usize, seed: u64) -> Result<ModelState> {
    let mut s = target.clone();
    let alpha = s.config.lora_alpha;
    s.reshape_lora(rank, alpha, seed)?;
    s.lora_enabled = true;
    Ok(s)
}

/// Everything one unlearning run needs besides the target model.
pub struct UnlearnJob<'a> {
    pub corpus: &'a Corpus,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub rank: usize,
    pub provenance: Option<Provenance>,
}

/// Attaches fresh LoRA to `target`, unlearns, and scores at every eval epoch.
/// `on_checkpoint` receives each evaluated state.
pub fn run_unlearning(
    target: &ModelState,
    job: &UnlearnJob<'_>,
    on_checkpoint: &mut dyn FnMut(usize, &ModelState, &ScoreReport) -> Result<()>,
) -> Result<(ModelState, RunLog)> {
    let start = with_fresh_lora(target, job.rank, job.train.seed)?;
    let forget: Vec<Sample> = job.corpus.forget().into_iter().cloned().collect();
    let retain: Vec<Sample> = job.corpus.retain().into_iter().cloned().collect();
    let samples = job.corpus.samples();
    let mut hook = |epoch: usize, state: &ModelState| -> Result<Option<ScoreReport>> {
        let mut report = evaluate(state, samples, &job.eval)?;
        report.provenance = job.provenance.clone();
        on_checkpoint(epoch, state, &report)?;
        Ok(Some(report))
    };
    let (state, mut log) = unlearn(&start, &forget, &retain, &job.loss, &job.train, &mut hook)?;
    for r in &mut log.records {
        r.provenance = job.provenance.clone();
    }
    Ok((state, log))
}

/// Saves `state` with provenance metadata.
pub fn save_checkpoint(
    dir: &Path,
    state: &ModelState,
    provenance: &Provenance,
    extra: &[(&str, String)],
) -> Result<()> {
    let mut ck = Checkpoint::new(state.clone())
        .with_meta("seed", provenance.seed)
        .with_meta("config_hash", &provenance.config_hash)
        .with_meta("version", &provenance.version);
    for (k, v) in extra {
        ck = ck.with_meta(*k, v);
    }
    ck.save(dir)
}
