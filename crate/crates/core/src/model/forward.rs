use crate::diff::{kernels, Eager, Exec, Tensor};
use crate::error::{Error, Result};
use crate::model::{Backbone, BlockLora, LoraPair, ModelConfig, ModelState, Projection};

/// Which tensors become trainable leaves when a state is bound to an executor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Backbone,
    Lora,
}

/// A state's tensors bound as executor values, ready for repeated forward passes.
pub struct Bound<V> {
    pub backbone: Backbone<V>,
    /// `None` when LoRA is disabled or absent: the pass sees only the backbone.
    pub lora: Option<Vec<BlockLora<V>>>,
    scale: f64,
}

pub fn bind<E: Exec>(
    exec: &mut E,
    state: &ModelState,
    use_lora: bool,
    trainable: Trainable,
) -> Bound<E::Value> {
    let backbone = state
        .backbone
        .map(|t| exec.leaf(t, trainable == Trainable::Backbone));
    let lora = match (&state.lora, use_lora) {
        (Some(lora), true) => Some(
            lora.iter()
                .map(|bl| bl.map(|t| exec.leaf(t, trainable == Trainable::Lora)))
                .collect(),
        ),
        _ => None,
    };
    Bound {
        backbone,
        lora,
        scale: state.config.lora_scale(),
    }
}

/// `x · Wᵀ + (α/r)·(x · Aᵀ) · Bᵀ`, i.e. `Wx + (α/r)BAx` applied to each row of `x`.
fn project<E: Exec>(
    exec: &mut E,
    x: &E::Value,
    w: &E::Value,
    lora: Option<&LoraPair<E::Value>>,
    scale: f64,
) -> Result<E::Value> {
    let base = exec.matmul_t(x, w)?;
    match lora {
        None => Ok(base),
        Some(pair) => {
            let xa = exec.matmul_t(x, &pair.a)?;
            let xab = exec.matmul_t(&xa, &pair.b)?;
            let delta = exec.scale(&xab, scale);
            exec.add(&base, &delta)
        }
    }
}

/// Standalone LoRA-augmented linear map on rows of `x: [n × d]`.
pub fn lora_forward(
    w: &Tensor,
    a: &Tensor,
    b: &Tensor,
    alpha: f64,
    rank: usize,
    x: &Tensor,
) -> Result<Tensor> {
    if a.shape() != [rank, w.dims2().1] || b.shape() != [w.dims2().0, rank] {
        return Err(Error::shape("lora_forward", a.shape(), b.shape()));
    }
    let mut ex = Eager;
    let (w, a, b, x) = (
        ex.constant(w.clone()),
        ex.constant(a.clone()),
        ex.constant(b.clone()),
        ex.constant(x.clone()),
    );
    let pair = LoraPair { a, b };
    let out = project(&mut ex, &x, &w, Some(&pair), alpha / rank as f64)?;
    Ok((*out).clone())
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty token sequence".into()));
    }
    if tokens.len() > cfg.context_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.context_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Contract(format!(
            "token id {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

/// Final-layer-normed hidden states `[T × d]`.
pub fn hidden<E: Exec>(
    exec: &mut E,
    cfg: &ModelConfig,
    w: &Bound<E::Value>,
    tokens: &[usize],
) -> Result<E::Value> {
    check_tokens(cfg, tokens)?;
    let t = tokens.len();
    let d = cfg.model_dim;
    let dh = cfg.head_dim();
    let att_scale = 1.0 / (dh as f64).sqrt();
    let positions: Vec<usize> = (0..t).collect();

    let tok = exec.embedding(&w.backbone.tok_emb, tokens)?;
    let pos = exec.embedding(&w.backbone.pos_emb, &positions)?;
    let mut x = exec.add(&tok, &pos)?;

    for (li, block) in w.backbone.blocks.iter().enumerate() {
        let lora = w.lora.as_ref().map(|l| &l[li]);
        let pair = |p: Projection| lora.and_then(|l| l.get(p));

        let h = exec.layer_norm(&x, &block.ln1_gain, &block.ln1_bias)?;
        let q = project(exec, &h, &block.wq, pair(Projection::Q), w.scale)?;
        let k = project(exec, &h, &block.wk, pair(Projection::K), w.scale)?;
        let v = project(exec, &h, &block.wv, pair(Projection::V), w.scale)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let qh = exec.cols(&q, hi * dh, dh)?;
            let kh = exec.cols(&k, hi * dh, dh)?;
            let vh = exec.cols(&v, hi * dh, dh)?;
            let scores = exec.matmul_t(&qh, &kh)?;
            let scores = exec.scale(&scores, att_scale);
            let att = exec.causal_softmax(&scores)?;
            heads.push(exec.matmul(&att, &vh)?);
        }
        let cat = if heads.len() == 1 {
            heads.pop().unwrap()
        } else {
            exec.concat_cols(&heads)?
        };
        let o = project(exec, &cat, &block.wo, pair(Projection::O), w.scale)?;
        x = exec.add(&x, &o)?;

        let h = exec.layer_norm(&x, &block.ln2_gain, &block.ln2_bias)?;
        let m = exec.matmul_t(&h, &block.mlp_in)?;
        let m = exec.add_row(&m, &block.mlp_in_bias)?;
        let m = exec.gelu(&m);
        let m = exec.matmul_t(&m, &block.mlp_out)?;
        let m = exec.add_row(&m, &block.mlp_out_bias)?;
        x = exec.add(&x, &m)?;
    }
    debug_assert_eq!(exec.value(&x).shape(), &[t, d]);
    exec.layer_norm(&x, &w.backbone.lnf_gain, &w.backbone.lnf_bias)
}

/// Causal next-token log-distributions `[T × V]`: row `t` is `log π(· | tokens[..=t])`.
pub fn forward_log_probs<E: Exec>(
    exec: &mut E,
    cfg: &ModelConfig,
    w: &Bound<E::Value>,
    tokens: &[usize],
) -> Result<E::Value> {
    let h = hidden(exec, cfg, w, tokens)?;
    let logits = exec.matmul_t(&h, &w.backbone.head)?;
    let logits = exec.add_row(&logits, &w.backbone.head_bias)?;
    Ok(exec.log_softmax(&logits))
}

/// Log-probabilities without recording a graph. `use_lora = false` sees only
/// the backbone, exactly as if no adapters existed.
pub fn log_probs(state: &ModelState, tokens: &[usize], use_lora: bool) -> Result<Tensor> {
    let mut ex = Eager;
    let w = bind(&mut ex, state, use_lora, Trainable::Nothing);
    let lp = forward_log_probs(&mut ex, &state.config, &w, tokens)?;
    Ok(std::rc::Rc::try_unwrap(lp).unwrap_or_else(|rc| (*rc).clone()))
}

/// Log-distribution of the token following `tokens` only (last row).
pub fn next_token_log_probs(
    ex: &mut Eager,
    cfg: &ModelConfig,
    w: &Bound<std::rc::Rc<Tensor>>,
    tokens: &[usize],
) -> Result<Tensor> {
    let h = hidden(ex, cfg, w, tokens)?;
    let d = cfg.model_dim;
    let last = Tensor::new(vec![1, d], h.row(tokens.len() - 1).to_vec())?;
    let logits = kernels::matmul_t(&last, &w.backbone.head)?;
    let logits = kernels::add_row(&logits, &w.backbone.head_bias)?;
    Ok(kernels::log_softmax(&logits))
}
