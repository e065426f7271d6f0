use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Projection};

const BLOCK_FIELDS: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ln2.gain",
    "ln2.bias",
    "mlp.in",
    "mlp.in_bias",
    "mlp.out",
    "mlp.out_bias",
];

/// One transformer block. Linear weights are stored `[out × in]` and applied as `x · Wᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub mlp_in: T,
    pub mlp_in_bias: T,
    pub mlp_out: T,
    pub mlp_out_bias: T,
}

impl<T> Block<T> {
    fn fields(&self) -> [&T; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in,
            &self.mlp_in_bias,
            &self.mlp_out,
            &self.mlp_out_bias,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in,
            &mut self.mlp_in_bias,
            &mut self.mlp_out,
            &mut self.mlp_out_bias,
        ]
    }

    fn from_fields([a, b, c, d, e, f, g, h, i, j, k, l]: [T; 12]) -> Self {
        Block {
            ln1_gain: a,
            ln1_bias: b,
            wq: c,
            wk: d,
            wv: e,
            wo: f,
            ln2_gain: g,
            ln2_bias: h,
            mlp_in: i,
            mlp_in_bias: j,
            mlp_out: k,
            mlp_out_bias: l,
        }
    }

    pub fn projection(&self, p: Projection) -> &T {
        match p {
            Projection::Q => &self.wq,
            Projection::K => &self.wk,
            Projection::V => &self.wv,
            Projection::O => &self.wo,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut T {
        match p {
            Projection::Q => &mut self.wq,
            Projection::K => &mut self.wk,
            Projection::V => &mut self.wv,
            Projection::O => &mut self.wo,
        }
    }
}

/// All backbone weights. Generic so that the same layout can hold tensors,
/// recorded tape handles, or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub tok_emb: T,
    pub pos_emb: T,
    pub blocks: Vec<Block<T>>,
    pub lnf_gain: T,
    pub lnf_bias: T,
    pub head: T,
    pub head_bias: T,
}

impl<T> Backbone<T> {
    /// Canonical (name, value) order used by checkpoints and optimizers.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out.push(&mut self.head_bias);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Backbone<U> {
        Backbone {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block::from_fields(b.fields().map(&mut f)))
                .collect(),
            lnf_gain: f(&self.lnf_gain),
            lnf_bias: f(&self.lnf_bias),
            head: f(&self.head),
            head_bias: f(&self.head_bias),
        }
    }
}

/// Low-rank pair with `A: [r × d]` and `B: [d × r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    pub a: T,
    pub b: T,
}

/// LoRA pairs of one block, present only for targeted projections.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora<T> {
    pub q: Option<LoraPair<T>>,
    pub k: Option<LoraPair<T>>,
    pub v: Option<LoraPair<T>>,
    pub o: Option<LoraPair<T>>,
}

impl<T> BlockLora<T> {
    pub fn get(&self, p: Projection) -> Option<&LoraPair<T>> {
        match p {
            Projection::Q => self.q.as_ref(),
            Projection::K => self.k.as_ref(),
            Projection::V => self.v.as_ref(),
            Projection::O => self.o.as_ref(),
        }
    }

    pub fn get_mut(&mut self, p: Projection) -> Option<&mut LoraPair<T>> {
        match p {
            Projection::Q => self.q.as_mut(),
            Projection::K => self.k.as_mut(),
            Projection::V => self.v.as_mut(),
            Projection::O => self.o.as_mut(),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockLora<U> {
        let mut pair = |p: &Option<LoraPair<T>>| {
            p.as_ref().map(|p| LoraPair {
                a: f(&p.a),
                b: f(&p.b),
            })
        };
        BlockLora {
            q: pair(&self.q),
            k: pair(&self.k),
            v: pair(&self.v),
            o: pair(&self.o),
        }
    }
}

pub fn lora_named<T>(lora: &[BlockLora<T>]) -> Vec<(String, &T)> {
    let mut out = Vec::new();
    for (i, bl) in lora.iter().enumerate() {
        for p in Projection::ALL {
            if let Some(pair) = bl.get(p) {
                out.push((format!("blocks.{i}.lora.{p}.a"), &pair.a));
                out.push((format!("blocks.{i}.lora.{p}.b"), &pair.b));
            }
        }
    }
    out
}

pub fn lora_values_mut<T>(lora: &mut [BlockLora<T>]) -> Vec<&mut T> {
    let mut out = Vec::new();
    for bl in lora.iter_mut() {
        for pair in [&mut bl.q, &mut bl.k, &mut bl.v, &mut bl.o].into_iter().flatten() {
            out.push(&mut pair.a);
            out.push(&mut pair.b);
        }
    }
    out
}

/// Backbone weights, optional LoRA pairs, and whether the pairs are active.
///
/// `lora == None` means the adapters were merged (or never attached).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub backbone: Backbone<Tensor>,
    pub lora: Option<Vec<BlockLora<Tensor>>>,
    pub lora_enabled: bool,
}

/// Outcome of [`merge_lora`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeStatus {
    Merged,
    /// No LoRA pairs were present; the state is returned unchanged.
    AlreadyMerged,
}

fn init_backbone(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Backbone<Tensor> {
    let d = cfg.model_dim;
    let h = cfg.mlp_dim();
    let w_std = 1.0 / (d as f64).sqrt();
    let resid_std = w_std / (2.0 * cfg.n_layers as f64).sqrt();
    let ones = |n| Tensor::full(&[n], 1.0);
    let zeros = |n| Tensor::zeros(&[n]);

    let tok_emb = Tensor::randn(&[cfg.vocab_size, d], 1.0, rng);
    let pos_emb = Tensor::randn(&[cfg.context_len, d], 0.1, rng);
    let blocks = (0..cfg.n_layers)
        .map(|_| Block {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: Tensor::randn(&[d, d], w_std, rng),
            wk: Tensor::randn(&[d, d], w_std, rng),
            wv: Tensor::randn(&[d, d], w_std, rng),
            wo: Tensor::randn(&[d, d], resid_std, rng),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            mlp_in: Tensor::randn(&[h, d], w_std, rng),
            mlp_in_bias: zeros(h),
            mlp_out: Tensor::randn(&[d, h], resid_std / 2.0, rng),
            mlp_out_bias: zeros(d),
        })
        .collect();
    Backbone {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: ones(d),
        lnf_bias: zeros(d),
        head: Tensor::randn(&[cfg.vocab_size, d], w_std, rng),
        head_bias: zeros(cfg.vocab_size),
    }
}

/// Fresh LoRA pairs: `A ~ N(0, 1/r)` (variance), `B = 0`.
pub fn init_lora(cfg: &ModelConfig, seed: u64) -> Vec<BlockLora<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4c6f_5241);
    let (d, r) = (cfg.model_dim, cfg.lora_rank);
    let std = 1.0 / (r as f64).sqrt();
    (0..cfg.n_layers)
        .map(|_| {
            let mut pair = |p| {
                cfg.targets(p).then(|| LoraPair {
                    a: Tensor::randn(&[r, d], std, &mut rng),
                    b: Tensor::zeros(&[d, r]),
                })
            };
            BlockLora {
                q: pair(Projection::Q),
                k: pair(Projection::K),
                v: pair(Projection::V),
                o: pair(Projection::O),
            }
        })
        .collect()
}

/// Scaled-Gaussian backbone plus fresh LoRA pairs, deterministic in `seed`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = init_backbone(config, &mut rng);
    Ok(ModelState {
        config: config.clone(),
        backbone,
        lora: Some(init_lora(config, seed)),
        lora_enabled: true,
    })
}

impl ModelState {
    /// Replaces any LoRA pairs with fresh ones (B = 0) and enables them.
    pub fn attach_lora(&mut self, seed: u64) {
        self.lora = Some(init_lora(&self.config, seed));
        self.lora_enabled = true;
    }

    /// Changes rank/alpha and re-initializes the adapters.
    pub fn reshape_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.lora_rank = rank;
        cfg.lora_alpha = alpha;
        cfg.validate()?;
        self.config = cfg;
        self.attach_lora(seed);
        Ok(())
    }

    pub fn is_merged(&self) -> bool {
        self.lora.is_none()
    }

    /// Backbone tensors followed by LoRA tensors, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .backbone
            .named()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t))
            .collect();
        if let Some(lora) = &self.lora {
            out.extend(lora_named(lora));
        }
        out
    }
}

/// The LoRA pairs of targeted projections: the only tensors unlearning updates.
pub fn trainable_parameters(state: &ModelState) -> Result<Vec<(String, &Tensor)>> {
    let lora = state
        .lora
        .as_ref()
        .ok_or_else(|| Error::Contract("merged state has no trainable LoRA parameters".into()))?;
    Ok(lora_named(lora))
}

/// Folds `(α/r)·B·A` into each targeted backbone projection and drops the pairs.
pub fn merge_lora(state: &ModelState) -> (ModelState, MergeStatus) {
    let Some(lora) = &state.lora else {
        log::warn!("merge_lora on a state without LoRA pairs; returning it unchanged");
        return (state.clone(), MergeStatus::AlreadyMerged);
    };
    let scale = state.config.lora_scale();
    let mut backbone = state.backbone.clone();
    for (block, bl) in backbone.blocks.iter_mut().zip(lora) {
        for p in Projection::ALL {
            if let Some(pair) = bl.get(p) {
                let delta = kernels::matmul(&pair.b, &pair.a).expect("lora shapes fixed at init");
                for (w, dlt) in block.projection_mut(p).data_mut().iter_mut().zip(delta.data()) {
                    *w += scale * dlt;
                }
            }
        }
    }
    (
        ModelState {
            config: state.config.clone(),
            backbone,
            lora: None,
            lora_enabled: false,
        },
        MergeStatus::Merged,
    )
}
