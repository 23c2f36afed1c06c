//! The two Wasserstein critics: one judging sequential style representations,
//! one judging (soft-)embedded token sequences. Neither applies an output
//! activation — raw ℝ^K scores, as the WGAN objective requires.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{attentive_pool, gelu, linear_head, Ctx, EncoderStack, Linear, StackConfig};
use crate::params::{ParamId, ParameterStore, Role};
use crate::tensor::{Real, Var};

/// Style critic body: the experimental configuration uses self-attention
/// layers; the plain row-wise MLP stays available as a switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleCriticKind {
    SelfAttention,
    Mlp,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StyleCriticConfig {
    pub kind: StyleCriticKind,
    pub d_style: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub styles: usize,
}

impl StyleCriticConfig {
    pub fn new(d_style: usize, styles: usize, heads: usize) -> Self {
        StyleCriticConfig {
            kind: StyleCriticKind::SelfAttention,
            d_style,
            layers: 3,
            heads,
            d_ff: d_style * 2,
            styles,
        }
    }
}

enum StyleCriticBody {
    SelfAttention(EncoderStack),
    Mlp { hidden1: Linear, hidden2: Linear },
}

pub struct StyleDiscriminator<F: Real> {
    pub cfg: StyleCriticConfig,
    pub store: ParameterStore<F>,
    body: StyleCriticBody,
    pool_v: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Real> StyleDiscriminator<F> {
    pub fn new(cfg: StyleCriticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.d_style;
        let body = match cfg.kind {
            StyleCriticKind::SelfAttention => StyleCriticBody::SelfAttention(EncoderStack::new(
                &mut store,
                "style_critic.enc",
                Role::StyleCritic,
                StackConfig {
                    layers: cfg.layers,
                    d_model: d,
                    d_ff: cfg.d_ff,
                    heads: cfg.heads,
                    dropout: 0.0,
                },
                &mut rng,
            )),
            StyleCriticKind::Mlp => StyleCriticBody::Mlp {
                hidden1: Linear::new(&mut store, "style_critic.h1", Role::StyleCritic, d, d, &mut rng),
                hidden2: Linear::new(&mut store, "style_critic.h2", Role::StyleCritic, d, d, &mut rng),
            },
        };
        let pool_v = store.add_glorot("style_critic.pool_v", Role::StyleCritic, d, 1, &mut rng);
        let head_w = store.add_glorot("style_critic.head_w", Role::StyleCritic, d, cfg.styles, &mut rng);
        let head_b = store.add_zeros("style_critic.head_b", Role::StyleCritic, 1, cfg.styles);
        StyleDiscriminator {
            cfg,
            store,
            body,
            pool_v,
            head_w,
            head_b,
        }
    }

    /// Raw scores (1×K) for a sequential style representation (n×d_style).
    pub fn score(&self, ctx: &mut Ctx<F>, style_repr: Var) -> Var {
        let (n, d) = ctx.tape.shape(style_repr);
        assert!(n >= 1);
        assert_eq!(d, self.cfg.d_style);
        let transformed = match &self.body {
            StyleCriticBody::SelfAttention(enc) => enc
                .forward(ctx, &self.store, style_repr, &vec![false; n])
                .expect("style critic shapes are internally consistent"),
            StyleCriticBody::Mlp { hidden1, hidden2 } => {
                let h1 = hidden1.forward(ctx, &self.store, style_repr);
                let a1 = gelu(ctx.tape, h1);
                let h2 = hidden2.forward(ctx, &self.store, a1);
                gelu(ctx.tape, h2)
            }
        };
        let (pooled, _) = attentive_pool(ctx, &self.store, transformed, self.pool_v, None);
        linear_head(ctx, &self.store, pooled, self.head_w, self.head_b)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TextCriticConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub styles: usize,
    pub max_len: usize,
}

impl TextCriticConfig {
    pub fn new(d_model: usize, styles: usize, heads: usize, max_len: usize) -> Self {
        TextCriticConfig {
            d_model,
            heads,
            d_ff: d_model * 2,
            styles,
            max_len,
        }
    }
}

/// Teacher-shaped network over embedded sequences — one attention layer,
/// attentive pooling, linear head, softmax removed.
pub struct TextDiscriminator<F: Real> {
    pub cfg: TextCriticConfig,
    pub store: ParameterStore<F>,
    pos_emb: ParamId,
    encoder: EncoderStack,
    pool_v: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Real> TextDiscriminator<F> {
    pub fn new(cfg: TextCriticConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.d_model;
        let pos_emb = store.add_glorot("text_critic.pos_emb", Role::TextCritic, cfg.max_len, d, &mut rng);
        let encoder = EncoderStack::new(
            &mut store,
            "text_critic.enc",
            Role::TextCritic,
            StackConfig {
                layers: 1,
                d_model: d,
                d_ff: cfg.d_ff,
                heads: cfg.heads,
                dropout: 0.0,
            },
            &mut rng,
        );
        let pool_v = store.add_glorot("text_critic.pool_v", Role::TextCritic, d, 1, &mut rng);
        let head_w = store.add_glorot("text_critic.head_w", Role::TextCritic, d, cfg.styles, &mut rng);
        let head_b = store.add_zeros("text_critic.head_b", Role::TextCritic, 1, cfg.styles);
        TextDiscriminator {
            cfg,
            store,
            pos_emb,
            encoder,
            pool_v,
            head_w,
            head_b,
        }
    }

    /// Raw scores (1×K) for an embedded sequence (m×Q). Accepts looked-up
    /// embeddings of real text or soft embeddings of generated text; its own
    /// positional embedding is added inside.
    pub fn score(&self, ctx: &mut Ctx<F>, emb_seq: Var) -> Var {
        let (m, d) = ctx.tape.shape(emb_seq);
        assert!(m >= 1 && m <= self.cfg.max_len);
        assert_eq!(d, self.cfg.d_model);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let positions: Vec<usize> = (0..m).collect();
        let t = &mut *ctx.tape;
        let p = t.gather_rows(pe, &positions);
        let x = t.add(emb_seq, p);
        let enc = self
            .encoder
            .forward(ctx, &self.store, x, &vec![false; m])
            .expect("text critic shapes are internally consistent");
        let (pooled, _) = attentive_pool(ctx, &self.store, enc, self.pool_v, None);
        linear_head(ctx, &self.store, pooled, self.head_w, self.head_b)
    }
}
