//! Unlearning objectives over LoRA parameters.
//!
//! All terms aggregate per token: sums over completion positions of the whole
//! batch divided by the batch's completion-token count. The reference policy is
//! the same state with adapters disabled, evaluated without recording a graph.

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::diff::{kernels, Eager, Exec, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{bind, forward_log_probs, lora_named, Bound, ModelState, Trainable};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub beta: f64,
    /// Weight of the retain negative log-likelihood.
    pub gamma: f64,
    /// Weight of the retain KL term.
    pub delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.5,
            gamma: 1.0,
            delta: 0.5,
        }
    }
}

impl LossConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.beta.is_finite() && self.beta > 0.0) {
            v.push(format!("LossConfig.beta: must be finite and > 0, got {}", self.beta));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            v.push(format!("LossConfig.gamma: must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            v.push(format!("LossConfig.delta: must be finite and >= 0, got {}", self.delta));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// The term applied to forget tokens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ForgetLoss {
    /// `(2/β)·softplus(β·(log πθ − log πref))`.
    Npo { beta: f64 },
    /// `log πθ`: minimizing it is gradient ascent on the likelihood.
    Ga,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub forget: ForgetLoss,
    pub gamma: f64,
    pub delta: f64,
}

impl From<&LossConfig> for Objective {
    fn from(c: &LossConfig) -> Self {
        Objective {
            forget: ForgetLoss::Npo { beta: c.beta },
            gamma: c.gamma,
            delta: c.delta,
        }
    }
}

/// Scalar values of each term for one batch. `l_rt` and `k_rt` are zero when
/// the retain batch is empty.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_forget: f64,
    pub l_rt: f64,
    pub k_rt: f64,
    pub combined: f64,
    pub forget_tokens: usize,
    pub retain_tokens: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.l_forget.is_finite()
            && self.l_rt.is_finite()
            && self.k_rt.is_finite()
            && self.combined.is_finite()
    }
}

/// Loss values plus gradients aligned with [`crate::model::trainable_parameters`].
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: LossBreakdown,
    pub grads: Vec<Tensor>,
}

/// `2σ(β·logratio)`: the per-token factor by which the NPO gradient scales the
/// gradient-ascent direction. Equals 1 where the policies agree.
pub fn npo_weight(logratio: f64, beta: f64) -> f64 {
    2.0 * kernels::sigmoid(beta * logratio)
}

struct Graph {
    tape: Tape,
    root: Var,
    weights: Bound<Var>,
    loss: LossBreakdown,
}

fn reference_log_probs(
    reference: &Bound<std::rc::Rc<Tensor>>,
    state: &ModelState,
    ex: &Example,
) -> Result<Tensor> {
    let lp = forward_log_probs(&mut Eager, &state.config, reference, &ex.inputs)?;
    Ok((*lp).clone())
}

fn accumulate(tape: &mut Tape, acc: Option<Var>, x: Var) -> Result<Var> {
    match acc {
        None => Ok(x),
        Some(a) => tape.add(&a, &x),
    }
}

fn build(
    state: &ModelState,
    forget: &[&Example],
    retain: &[&Example],
    obj: &Objective,
) -> Result<Graph> {
    let cfg = &state.config;
    let mut tape = Tape::new();
    let weights = bind(&mut tape, state, true, Trainable::Lora);
    let reference = bind(&mut Eager, state, false, Trainable::Nothing);

    let n_forget: usize = forget.iter().map(|e| e.completion_tokens()).sum();
    if n_forget == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut forget_sum = None;
    for ex in forget {
        let lp = forward_log_probs(&mut tape, cfg, &weights, &ex.inputs)?;
        let tok = tape.gather(&lp, &ex.targets)?;
        let per_token = match obj.forget {
            ForgetLoss::Ga => tok,
            ForgetLoss::Npo { beta } => {
                let r = reference_log_probs(&reference, state, ex)?;
                let r = tape.constant(kernels::gather(&r, &ex.targets)?);
                let ratio = tape.sub(&tok, &r)?;
                let z = tape.scale(&ratio, beta);
                let sp = tape.softplus(&z);
                tape.scale(&sp, 2.0 / beta)
            }
        };
        let s = tape.masked_sum(&per_token, &ex.mask)?;
        forget_sum = Some(accumulate(&mut tape, forget_sum, s)?);
    }
    let forget_mean = tape.scale(&forget_sum.unwrap(), 1.0 / n_forget as f64);
    let l_forget = tape.value(&forget_mean).item();

    let n_retain: usize = retain.iter().map(|e| e.completion_tokens()).sum();
    if n_retain == 0 && (obj.gamma != 0.0 || obj.delta != 0.0) {
        return Err(Error::EmptyLoss);
    }
    let mut root = forget_mean;
    let (mut l_rt, mut k_rt) = (0.0, 0.0);
    if n_retain > 0 {
        let (mut ll_sum, mut kl_sum) = (None, None);
        for ex in retain {
            let lp = forward_log_probs(&mut tape, cfg, &weights, &ex.inputs)?;
            let tok = tape.gather(&lp, &ex.targets)?;
            let ll = tape.masked_sum(&tok, &ex.mask)?;
            ll_sum = Some(accumulate(&mut tape, ll_sum, ll)?);

            let r = tape.constant(reference_log_probs(&reference, state, ex)?);
            let diff = tape.sub(&lp, &r)?;
            let p = tape.exp(&lp);
            let terms = tape.mul(&p, &diff)?;
            let per_pos = tape.row_sum(&terms)?;
            let kl = tape.masked_sum(&per_pos, &ex.mask)?;
            kl_sum = Some(accumulate(&mut tape, kl_sum, kl)?);
        }
        let nll = tape.scale(&ll_sum.unwrap(), -1.0 / n_retain as f64);
        let kl = tape.scale(&kl_sum.unwrap(), 1.0 / n_retain as f64);
        l_rt = tape.value(&nll).item();
        k_rt = tape.value(&kl).item();
        let a = tape.scale(&nll, obj.gamma);
        let b = tape.scale(&kl, obj.delta);
        root = tape.add(&root, &a)?;
        root = tape.add(&root, &b)?;
    }
    let combined = tape.value(&root).item();
    Ok(Graph {
        tape,
        root,
        weights,
        loss: LossBreakdown {
            l_forget,
            l_rt,
            k_rt,
            combined,
            forget_tokens: n_forget,
            retain_tokens: n_retain,
        },
    })
}

/// Forget term plus `γ·L_RT + δ·K_RT`, with gradients for every LoRA tensor.
pub fn unlearning_loss(
    state: &ModelState,
    forget: &[&Example],
    retain: &[&Example],
    obj: &Objective,
) -> Result<LossGrad> {
    let lora = crate::model::trainable_parameters(state)?;
    let g = build(state, forget, retain, obj)?;
    let grads = g.tape.backward(g.root)?;
    let vars = lora_named(g.weights.lora.as_deref().unwrap_or_default());
    debug_assert_eq!(vars.len(), lora.len());
    let grads = vars
        .iter()
        .zip(&lora)
        .map(|((_, v), (_, t))| grads.get_or_zeros(**v, t))
        .collect();
    Ok(LossGrad { loss: g.loss, grads })
}

/// Loss values only (the backward sweep is skipped).
pub fn unlearning_loss_value(
    state: &ModelState,
    forget: &[&Example],
    retain: &[&Example],
    obj: &Objective,
) -> Result<LossBreakdown> {
    Ok(build(state, forget, retain, obj)?.loss)
}

/// Mean completion-token negative log-likelihood, with gradients for the
/// backbone tensors in [`crate::model::Backbone::named`] order.
pub fn backbone_nll(state: &ModelState, batch: &[&Example]) -> Result<(f64, Vec<Tensor>)> {
    let n: usize = batch.iter().map(|e| e.completion_tokens()).sum();
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut tape = Tape::new();
    let w = bind(&mut tape, state, state.lora_enabled, Trainable::Backbone);
    let mut sum = None;
    for ex in batch {
        let lp = forward_log_probs(&mut tape, &state.config, &w, &ex.inputs)?;
        let tok = tape.gather(&lp, &ex.targets)?;
        let s = tape.masked_sum(&tok, &ex.mask)?;
        sum = Some(accumulate(&mut tape, sum, s)?);
    }
    let root = tape.scale(&sum.unwrap(), -1.0 / n as f64);
    let value = tape.value(&root).item();
    let grads = tape.backward(root)?;
    let out = w
        .backbone
        .named()
        .into_iter()
        .zip(state.backbone.named())
        .map(|((_, v), (_, t))| grads.get_or_zeros(*v, t))
        .collect();
    Ok((value, out))
}

/// Mean NPO weight over the forget completion tokens of `batch`.
pub fn mean_npo_weight(state: &ModelState, batch: &[&Example], beta: f64) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for ex in batch {
        let on = crate::model::log_probs(state, &ex.inputs, true)?;
        let off = crate::model::log_probs(state, &ex.inputs, false)?;
        let on = kernels::gather(&on, &ex.targets)?;
        let off = kernels::gather(&off, &ex.targets)?;
        for ((a, b), &m) in on.data().iter().zip(off.data()).zip(&ex.mask) {
            if m {
                total += npo_weight(a - b, beta);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyLoss);
    }
    Ok(total / n as f64)
}
