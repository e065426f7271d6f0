//! Memorization (backbone fine-tuning that creates the target model) and
//! unlearning (LoRA-only optimization of the combined objective).

mod optim;
mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Sample};
use crate::error::{Error, Result};
use crate::evaluator::ScoreReport;
use crate::losses::{backbone_nll, unlearning_loss, LossBreakdown, LossConfig, Objective};
use crate::model::{argmax, log_probs, lora_named, lora_values_mut, ModelState};
use crate::provenance::Provenance;

pub use optim::{adamw_step, AdamW, Moments};
pub use sweep::{sample_std, sweep, to_csv, CellOutcome, Metric, SweepCell, SweepRow, METRICS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Scores are computed at every multiple of this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            eval_every: 10,
        }
    }
}

fn adam_violations(prefix: &str, a: &AdamW) -> Vec<String> {
    let mut v = Vec::new();
    if !(a.learning_rate.is_finite() && a.learning_rate > 0.0) {
        v.push(format!("{prefix}.learning_rate: must be > 0"));
    }
    if !(0.0..1.0).contains(&a.beta1) {
        v.push(format!("{prefix}.beta1: must be in [0, 1)"));
    }
    if !(0.0..1.0).contains(&a.beta2) {
        v.push(format!("{prefix}.beta2: must be in [0, 1)"));
    }
    if !(a.eps.is_finite() && a.eps > 0.0) {
        v.push(format!("{prefix}.eps: must be > 0"));
    }
    if !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
        v.push(format!("{prefix}.weight_decay: must be >= 0"));
    }
    v
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn is_eval_epoch(&self, epoch: usize) -> bool {
        self.eval_every > 0 && epoch.is_multiple_of(self.eval_every)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = adam_violations("TrainConfig", &self.adamw());
        if self.batch_size == 0 {
            v.push("TrainConfig.batch_size: must be >= 1".into());
        }
        if self.epochs == 0 {
            v.push("TrainConfig.epochs: must be >= 1".into());
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemorizeConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once this fraction of samples is recalled exactly.
    pub target_accuracy: f64,
    /// Below this at `max_epochs` the stage fails.
    pub min_accuracy: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MemorizeConfig {
    fn default() -> Self {
        MemorizeConfig {
            learning_rate: 3e-4,
            batch_size: 4,
            max_epochs: 300,
            target_accuracy: 0.99,
            min_accuracy: 0.9,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl MemorizeConfig {
    pub fn adamw(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = adam_violations("MemorizeConfig", &self.adamw());
        if self.batch_size == 0 {
            v.push("MemorizeConfig.batch_size: must be >= 1".into());
        }
        if self.max_epochs == 0 {
            v.push("MemorizeConfig.max_epochs: must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            v.push("MemorizeConfig.target_accuracy: must be in [0, 1]".into());
        }
        if !(0.0..=self.target_accuracy).contains(&self.min_accuracy) {
            v.push("MemorizeConfig.min_accuracy: must be in [0, target_accuracy]".into());
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorizeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Fraction of examples whose every completion token is the argmax under
/// teacher forcing.
pub fn recall_accuracy(state: &ModelState, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Scoring("recall accuracy of no examples".into()));
    }
    let mut hits = 0;
    for ex in examples {
        let lp = log_probs(state, &ex.inputs, state.lora_enabled)?;
        let exact = (0..ex.targets.len())
            .filter(|&t| ex.mask[t])
            .all(|t| argmax(lp.row(t)) == ex.targets[t]);
        hits += exact as usize;
    }
    Ok(hits as f64 / examples.len() as f64)
}

fn batch_ids(samples: &[&Sample]) -> String {
    samples.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(",")
}

/// Fine-tunes the backbone on `samples` until recall reaches the target. The
/// returned state carries no LoRA pairs.
pub fn memorize(
    state: &ModelState,
    samples: &[Sample],
    cfg: &MemorizeConfig,
) -> Result<(ModelState, Vec<MemorizeEpoch>)> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let mut state = state.clone();
    state.lora = None;
    state.lora_enabled = false;
    let examples: Vec<Example> = samples.iter().map(Sample::example).collect();
    let opt = cfg.adamw();
    let mut moments = Moments::zeros_like(state.backbone.named().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut accuracy = 0.0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = backbone_nll(&state, &batch)?;
            if !loss.is_finite() {
                let ids: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: bi + 1,
                    batch: format!("{} (loss {loss})", batch_ids(&ids)),
                });
            }
            step += 1;
            adamw_step(&mut state.backbone.values_mut(), &grads, &mut moments, &opt, step)?;
            total += loss;
            batches += 1;
        }
        accuracy = recall_accuracy(&state, &examples)?;
        log::debug!("memorize epoch {epoch}: loss {:.4} recall {accuracy:.3}", total / batches as f64);
        log.push(MemorizeEpoch {
            epoch,
            loss: total / batches as f64,
            accuracy,
        });
        if accuracy >= cfg.target_accuracy {
            return Ok((state, log));
        }
    }
    if accuracy < cfg.min_accuracy {
        return Err(Error::Memorization {
            accuracy,
            required: cfg.min_accuracy,
            epochs: cfg.max_epochs,
        });
    }
    Ok((state, log))
}

/// Per-epoch means of the loss terms, optional scores, and timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_npo: f64,
    pub l_rt: f64,
    pub k_rt: f64,
    pub combined: f64,
    pub wall_secs: f64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<ScoreReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records: Vec<EpochRecord> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if r.epoch != records.len() + 1 {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected epoch {}, found {}", records.len() + 1, r.epoch),
                });
            }
            records.push(r);
        }
        Ok(RunLog { records })
    }

    /// The log with timings zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunLog {
        let mut out = self.clone();
        for r in &mut out.records {
            r.wall_secs = 0.0;
        }
        out
    }

    pub fn reports(&self) -> Vec<(usize, &ScoreReport)> {
        self.records
            .iter()
            .filter_map(|r| r.scores.as_ref().map(|s| (r.epoch, s)))
            .collect()
    }
}

/// Called at every evaluation epoch with the current state; may score and
/// checkpoint it.
pub type EvalHook<'a> = dyn FnMut(usize, &ModelState) -> Result<Option<ScoreReport>> + 'a;

/// Optimizes the LoRA pairs of `state` on the combined objective. The backbone
/// is never written.
pub fn unlearn(
    state: &ModelState,
    forget: &[Sample],
    retain: &[Sample],
    loss: &LossConfig,
    train: &TrainConfig,
    on_eval: &mut EvalHook<'_>,
) -> Result<(ModelState, RunLog)> {
    loss.validate()?;
    if train.batch_size == 0 {
        return Err(Error::Config(vec!["TrainConfig.batch_size: must be >= 1".into()]));
    }
    let mut state = state.clone();
    if state.lora.is_none() {
        return Err(Error::Contract("unlearning needs LoRA pairs attached".into()));
    }
    state.lora_enabled = true;
    if forget.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let objective = Objective::from(loss);
    let forget_ex: Vec<Example> = forget.iter().map(Sample::example).collect();
    let retain_ex: Vec<Example> = retain.iter().map(Sample::example).collect();
    let opt = train.adamw();
    let mut moments = Moments::zeros_like(lora_named(state.lora.as_ref().unwrap()).into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut order: Vec<usize> = (0..forget.len()).collect();
    let mut log = RunLog::default();
    let mut step = 0u64;

    for epoch in 1..=train.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (bi, chunk) in order.chunks(train.batch_size).enumerate() {
            let retain_idx: Vec<usize> = if retain.is_empty() {
                Vec::new()
            } else {
                (0..train.batch_size).map(|_| rng.gen_range(0..retain.len())).collect()
            };
            let fb: Vec<&Example> = chunk.iter().map(|&i| &forget_ex[i]).collect();
            let rb: Vec<&Example> = retain_idx.iter().map(|&i| &retain_ex[i]).collect();
            let lg = unlearning_loss(&state, &fb, &rb, &objective)?;
            if !lg.loss.is_finite() || lg.grads.iter().any(|g| !g.is_finite()) {
                let ids: Vec<&Sample> = chunk
                    .iter()
                    .map(|&i| &forget[i])
                    .chain(retain_idx.iter().map(|&i| &retain[i]))
                    .collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: bi + 1,
                    batch: format!("{} ({:?})", batch_ids(&ids), lg.loss),
                });
            }
            step += 1;
            let mut params = lora_values_mut(state.lora.as_mut().unwrap());
            adamw_step(&mut params, &lg.grads, &mut moments, &opt, step)?;
            let LossBreakdown {
                l_forget,
                l_rt,
                k_rt,
                combined,
                ..
            } = lg.loss;
            for (s, x) in sums.iter_mut().zip([l_forget, l_rt, k_rt, combined]) {
                *s += x;
            }
            batches += 1;
        }
        let n = batches as f64;
        let mut record = EpochRecord {
            epoch,
            l_npo: sums[0] / n,
            l_rt: sums[1] / n,
            k_rt: sums[2] / n,
            combined: sums[3] / n,
            wall_secs: 0.0,
            seed: train.seed,
            scores: None,
            provenance: None,
        };
        if train.is_eval_epoch(epoch) {
            record.scores = on_eval(epoch, &state)?;
        }
        record.wall_secs = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: l_npo {:.4} l_rt {:.4} k_rt {:.5} combined {:.4}",
            record.l_npo,
            record.l_rt,
            record.k_rt,
            record.combined
        );
        log.records.push(record);
    }
    Ok((state, log))
}
