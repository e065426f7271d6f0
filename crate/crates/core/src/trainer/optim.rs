use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Moments { v: m.clone(), m }
    }
}

/// One AdamW update with bias correction; `step` counts from 1.
/// Weight decay is decoupled: parameters shrink by `lr·wd` before the Adam step.
pub fn adamw_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    moments: &mut Moments,
    cfg: &AdamW,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("optimizer steps count from 1".into()));
    }
    if params.len() != grads.len() || params.len() != moments.m.len() || params.len() != moments.v.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment pairs",
            params.len(),
            grads.len(),
            moments.m.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        for other in [&grads[i], &moments.m[i], &moments.v[i]] {
            if other.shape() != p.shape() {
                return Err(Error::shape("adamw_step", p.shape(), other.shape()));
            }
        }
    }
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = moments.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = moments.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (moments.m[i].data(), moments.v[i].data());
        for ((x, mj), vj) in p.data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mj / bc1;
            let vhat = vj / bc2;
            *x = *x * decay - cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamW {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut p = Tensor::vector(vec![2.0, -4.0]).unwrap();
        let mut mom = Moments::zeros_like([&p]);
        adamw_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut mom, &cfg, 1).unwrap();
        assert_eq!(p.data(), &[2.0 * 0.95, -4.0 * 0.95]);
        assert!(mom.m[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_scalar_oracle() {
        let cfg = AdamW::default();
        let mut p = Tensor::scalar(0.5);
        let mut mom = Moments::zeros_like([&p]);
        adamw_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut mom, &cfg, 1).unwrap();
        // m̂ = 1, v̂ = 1: update = −lr/(1+eps), decay 0.5·lr·wd.
        let expected = 0.5 * (1.0 - 1e-4 * 0.01) - 1e-4 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() < 1e-15);
        assert!((mom.m[0].item() - 0.1).abs() < 1e-15);
        assert!((mom.v[0].item() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut mom = Moments::zeros_like([&p]);
        let r = adamw_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut mom, &AdamW::default(), 1);
        assert!(matches!(r, Err(Error::Shape { .. })));
        let r = adamw_step(&mut [&mut p], &[], &mut mom, &AdamW::default(), 1);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn identical_runs_have_identical_moments() {
        let run = || {
            let mut p = Tensor::vector(vec![0.3, -0.2, 0.1]).unwrap();
            let mut mom = Moments::zeros_like([&p]);
            for step in 1..=5 {
                let g = p.map(|x| x * x - 0.1 * step as f64);
                adamw_step(&mut [&mut p], &[g], &mut mom, &AdamW::default(), step).unwrap();
            }
            (p, mom)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert!(a.bit_eq(&b));
        assert!(ma.m[0].bit_eq(&mb.m[0]) && ma.v[0].bit_eq(&mb.v[0]));
    }
}
