//! The transfer model f(X, s_y): style generator, content encoder, fusion,
//! and the decoder with both teacher-forced and continuous (soft-embedded)
//! autoregressive decoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::nn::{attentive_pool, Ctx, DecoderStack, EncoderStack, StackConfig};
use crate::params::{ParamId, ParameterStore, Role};
use crate::tensor::{Real, Var};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unknown style id {id} (model has {styles} styles)")]
    UnknownStyle { id: usize, styles: usize },
    #[error("row count mismatch: content {content} vs style {style}")]
    RowMismatch { content: usize, style: usize },
    #[error("distribution row {row} sums to {sum}, expected 1 ± 1e-4")]
    NotADistribution { row: usize, sum: f64 },
    #[error("sentence length {len} exceeds positional capacity {max}")]
    TooLong { len: usize, max: usize },
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
}

/// Model geometry and decoding policy.
///
/// `d_model = d_style = 256`, feed-forward 512, 6+6 layers are the reference
/// configuration; desk-scale runs shrink everything.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MssrNetConfig {
    pub d_model: usize,
    pub d_style: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub styles: usize,
    pub vocab_size: usize,
    /// positional capacity for source sentences (the style slot adds one)
    pub max_len: usize,
    /// extra decode steps beyond the source length
    pub decode_margin: usize,
    pub dropout: f64,
    /// ablation: broadcast the attentive-pooled style vector to every position
    pub fixed_style_vector: bool,
}

impl MssrNetConfig {
    /// Reference-scale defaults for a given corpus.
    pub fn reference(vocab_size: usize, styles: usize) -> Self {
        MssrNetConfig {
            d_model: 256,
            d_style: 256,
            d_ff: 512,
            encoder_layers: 6,
            decoder_layers: 6,
            heads: 8,
            styles,
            vocab_size,
            max_len: 64,
            decode_margin: 4,
            dropout: 0.1,
            fixed_style_vector: false,
        }
    }

    /// Small configuration that trains in minutes on a CPU.
    pub fn desk(vocab_size: usize, styles: usize) -> Self {
        MssrNetConfig {
            d_model: 32,
            d_style: 32,
            d_ff: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            styles,
            vocab_size,
            max_len: 16,
            decode_margin: 4,
            dropout: 0.1,
            fixed_style_vector: false,
        }
    }

    fn enc_stack(&self, layers: usize) -> StackConfig {
        StackConfig {
            layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) {
        assert!(self.styles >= 2, "need at least two styles");
        assert!(self.d_model % self.heads == 0);
        assert!(self.vocab_size > 4);
        assert!(self.max_len >= 2);
    }
}

/// A continuous decode result: per-step vocabulary distributions stacked into
/// an m×T tape node, plus the greedy trajectory those steps took.
pub struct SoftDecode {
    /// m×T distribution matrix 𝒴
    pub dists: Var,
    /// argmax token per emitted step (may end with `<eos>`)
    pub trajectory: Vec<usize>,
    /// true when the final step emitted `<eos>` (that step is included in `dists`)
    pub stopped_by_eos: bool,
}

impl SoftDecode {
    /// Content tokens: the trajectory with a terminating `<eos>` removed.
    pub fn tokens(&self) -> Vec<usize> {
        let mut t = self.trajectory.clone();
        if self.stopped_by_eos {
            t.pop();
        }
        t
    }
}

pub struct MssrNet<F: Real> {
    pub cfg: MssrNetConfig,
    pub store: ParameterStore<F>,
    word_emb: ParamId,
    pos_emb: ParamId,
    style_emb: ParamId,
    style_enc: EncoderStack,
    style_proj: Option<ParamId>,
    style_pool_v: ParamId,
    content_enc: EncoderStack,
    fuse_wc: ParamId,
    fuse_ws: ParamId,
    decoder: DecoderStack,
    out_w: ParamId,
    out_b: ParamId,
}

impl<F: Real> MssrNet<F> {
    pub fn new(cfg: MssrNetConfig, seed: u64) -> Self {
        cfg.validate();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.d_model;
        // +1 position for the style slot in front of the source tokens
        let word_emb = store.add_glorot("model.word_emb", Role::TransferModel, cfg.vocab_size, d, &mut rng);
        let pos_emb = store.add_glorot("model.pos_emb", Role::TransferModel, cfg.max_len + 1, d, &mut rng);
        let style_emb = store.add_glorot("style_gen.style_emb", Role::StyleGenerator, cfg.styles, d, &mut rng);
        let style_enc = EncoderStack::new(
            &mut store,
            "style_gen.enc",
            Role::StyleGenerator,
            cfg.enc_stack(cfg.encoder_layers),
            &mut rng,
        );
        let style_proj = if cfg.d_style != cfg.d_model {
            Some(store.add_glorot("style_gen.proj", Role::StyleGenerator, d, cfg.d_style, &mut rng))
        } else {
            None
        };
        let style_pool_v = store.add_glorot("style_gen.pool_v", Role::StyleGenerator, cfg.d_style, 1, &mut rng);
        let content_enc = EncoderStack::new(
            &mut store,
            "content.enc",
            Role::TransferModel,
            cfg.enc_stack(cfg.encoder_layers),
            &mut rng,
        );
        let fuse_wc = store.add_glorot("fusion.wc", Role::TransferModel, d, d, &mut rng);
        let fuse_ws = store.add_glorot("fusion.ws", Role::TransferModel, cfg.d_style, d, &mut rng);
        let decoder = DecoderStack::new(
            &mut store,
            "decoder",
            Role::TransferModel,
            cfg.enc_stack(cfg.decoder_layers),
            &mut rng,
        );
        let out_w = store.add_glorot("decoder.out_w", Role::TransferModel, d, cfg.vocab_size, &mut rng);
        let out_b = store.add_zeros("decoder.out_b", Role::TransferModel, 1, cfg.vocab_size);
        MssrNet {
            cfg,
            store,
            word_emb,
            pos_emb,
            style_emb,
            style_enc,
            style_proj,
            style_pool_v,
            content_enc,
            fuse_wc,
            fuse_ws,
            decoder,
            out_w,
            out_b,
        }
    }

    fn check_len(&self, n: usize) -> Result<(), ModelError> {
        if n > self.cfg.max_len {
            return Err(ModelError::TooLong {
                len: n,
                max: self.cfg.max_len,
            });
        }
        Ok(())
    }

    /// Word + positional embedding rows for `tokens`, positions starting at
    /// `pos_offset`.
    fn embed(&self, ctx: &mut Ctx<F>, tokens: &[usize], pos_offset: usize) -> Var {
        let we = ctx.bind(&self.store, self.word_emb);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let t = &mut *ctx.tape;
        let w = t.gather_rows(we, tokens);
        let positions: Vec<usize> = (pos_offset..pos_offset + tokens.len()).collect();
        let p = t.gather_rows(pe, &positions);
        let emb = t.add(w, p);
        ctx.dropout(emb)
    }

    /// Sequential style representation S_y (n×d_style): the encoder runs on
    /// [style-embedding slot; shifted token embeddings] and the slot row is
    /// discarded.
    pub fn generate_style(&self, ctx: &mut Ctx<F>, tokens: &[usize], target_style: usize) -> Result<Var, ModelError> {
        if target_style >= self.cfg.styles {
            return Err(ModelError::UnknownStyle {
                id: target_style,
                styles: self.cfg.styles,
            });
        }
        assert!(!tokens.is_empty());
        self.check_len(tokens.len())?;
        let n = tokens.len();
        let se = ctx.bind(&self.store, self.style_emb);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let t = &mut *ctx.tape;
        let style_row = t.gather_rows(se, &[target_style]);
        let pos0 = t.gather_rows(pe, &[0]);
        let slot = t.add(style_row, pos0);
        let tok_emb = self.embed(ctx, tokens, 1);
        let full = ctx.tape.concat_rows(&[slot, tok_emb]);
        let encoded = self
            .style_enc
            .forward(ctx, &self.store, full, &vec![false; n + 1])?;
        let s = ctx.tape.slice_rows(encoded, 1, n);
        let s = match self.style_proj {
            Some(p) => {
                let pw = ctx.bind(&self.store, p);
                ctx.tape.matmul(s, pw)
            }
            None => s,
        };
        if self.cfg.fixed_style_vector {
            // ablation: collapse to a single pooled vector broadcast everywhere
            let (pooled, _) = attentive_pool(ctx, &self.store, s, self.style_pool_v, None);
            return Ok(ctx.tape.broadcast_rows(pooled, n));
        }
        Ok(s)
    }

    /// Content representation C (n×d_model); no style indicator in the input.
    pub fn encode_content(&self, ctx: &mut Ctx<F>, tokens: &[usize]) -> Result<Var, ModelError> {
        assert!(!tokens.is_empty());
        self.check_len(tokens.len())?;
        let emb = self.embed(ctx, tokens, 0);
        Ok(self
            .content_enc
            .forward(ctx, &self.store, emb, &vec![false; tokens.len()])?)
    }

    /// H = C·W_c + S_y·W_s, the fused decoder memory. Bias-free by design.
    pub fn fuse(&self, ctx: &mut Ctx<F>, content: Var, style: Var) -> Result<Var, ModelError> {
        let (cn, _) = ctx.tape.shape(content);
        let (sn, _) = ctx.tape.shape(style);
        if cn != sn {
            return Err(ModelError::RowMismatch { content: cn, style: sn });
        }
        let wc = ctx.bind(&self.store, self.fuse_wc);
        let ws = ctx.bind(&self.store, self.fuse_ws);
        let t = &mut *ctx.tape;
        let c = t.matmul(content, wc);
        let s = t.matmul(style, ws);
        Ok(t.add(c, s))
    }

    /// Expected embeddings 𝒴·W_e of a distribution sequence. Rows must sum
    /// to 1 within 1e-4.
    pub fn soft_embed(&self, ctx: &mut Ctx<F>, dists: Var) -> Result<Var, ModelError> {
        let (m, t_dim) = ctx.tape.shape(dists);
        assert_eq!(t_dim, self.cfg.vocab_size);
        for row in 0..m {
            let sum: f64 = ctx.tape.values(dists)[row * t_dim..(row + 1) * t_dim]
                .iter()
                .map(|x| x.to_f64())
                .sum();
            if (sum - 1.0).abs() > 1e-4 {
                return Err(ModelError::NotADistribution { row, sum });
            }
        }
        let we = ctx.bind(&self.store, self.word_emb);
        Ok(ctx.tape.matmul(dists, we))
    }

    /// Output head: logits → distribution. `<pad>` and `<bos>` can never be
    /// emitted; `<eos>` and `<unk>` can.
    fn output_distribution(&self, ctx: &mut Ctx<F>, dec_rows: Var) -> Var {
        let ow = ctx.bind(&self.store, self.out_w);
        let ob = ctx.bind(&self.store, self.out_b);
        let (m, _) = ctx.tape.shape(dec_rows);
        let t = &mut *ctx.tape;
        let logits = t.matmul(dec_rows, ow);
        let bb = t.broadcast_rows(ob, m);
        let logits = t.add(logits, bb);
        let mut mask = vec![F::ZERO; m * self.cfg.vocab_size];
        for row in mask.chunks_mut(self.cfg.vocab_size) {
            row[PAD] = F::from_f64(-1e9);
            row[BOS] = F::from_f64(-1e9);
        }
        let mc = t.constant(m, self.cfg.vocab_size, mask);
        let masked = t.add(logits, mc);
        t.softmax_rows(masked)
    }

    /// Teacher-forced decoding: predicts each gold token plus the closing
    /// `<eos>`, so the result has `gold.len() + 1` distribution rows.
    pub fn decode_teacher_forced(&self, ctx: &mut Ctx<F>, memory: Var, gold: &[usize]) -> Result<Var, ModelError> {
        assert!(!gold.is_empty());
        self.check_len(gold.len())?;
        let mut input = Vec::with_capacity(gold.len() + 1);
        input.push(BOS);
        input.extend_from_slice(gold);
        let emb = self.embed(ctx, &input, 0);
        let (mem_n, _) = ctx.tape.shape(memory);
        let out = self
            .decoder
            .forward(ctx, &self.store, memory, &vec![false; mem_n], emb)?;
        Ok(self.output_distribution(ctx, out))
    }

    /// Continuous autoregressive decoding: each step's full distribution is
    /// soft-embedded and fed back, keeping the whole unroll differentiable.
    /// Stops after `max_len` steps or when the argmax is `<eos>` (that final
    /// step stays in the output). `harden` feeds exact one-hots instead of
    /// the soft rows — the discrete limit used for equivalence checks.
    pub fn decode_soft(&self, ctx: &mut Ctx<F>, memory: Var, max_len: usize, harden: bool) -> Result<SoftDecode, ModelError> {
        assert!(max_len >= 1);
        let steps_cap = max_len.min(self.cfg.max_len);
        let (mem_n, _) = ctx.tape.shape(memory);
        let mem_pad = vec![false; mem_n];
        let we = ctx.bind(&self.store, self.word_emb);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let t_vocab = self.cfg.vocab_size;

        let mut prefix_rows: Vec<Var> = Vec::with_capacity(steps_cap + 1);
        {
            let t = &mut *ctx.tape;
            let bos = t.gather_rows(we, &[BOS]);
            let pos0 = t.gather_rows(pe, &[0]);
            prefix_rows.push(t.add(bos, pos0));
        }
        let mut dist_rows: Vec<Var> = Vec::new();
        let mut trajectory = Vec::new();
        let mut stopped_by_eos = false;

        for step in 0..steps_cap {
            let prefix = ctx.tape.concat_rows(&prefix_rows);
            let dec = self.decoder.forward(ctx, &self.store, memory, &mem_pad, prefix)?;
            let (rows, _) = ctx.tape.shape(dec);
            let last = ctx.tape.slice_rows(dec, rows - 1, 1);
            let dist = self.output_distribution(ctx, last);
            dist_rows.push(dist);
            let values = ctx.tape.values(dist);
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if *v > values[best] {
                    best = i;
                }
            }
            trajectory.push(best);
            if best == EOS {
                stopped_by_eos = true;
                break;
            }
            if step + 1 == steps_cap {
                break;
            }
            // feed back: soft (or hardened) embedding plus the next position
            let fed = if harden {
                let mut onehot = vec![F::ZERO; t_vocab];
                onehot[best] = F::ONE;
                ctx.tape.constant(1, t_vocab, onehot)
            } else {
                dist
            };
            let t = &mut *ctx.tape;
            let emb = t.matmul(fed, we);
            let pos = t.gather_rows(pe, &[step + 1]);
            prefix_rows.push(t.add(emb, pos));
        }

        let dists = ctx.tape.concat_rows(&dist_rows);
        Ok(SoftDecode {
            dists,
            trajectory,
            stopped_by_eos,
        })
    }

    /// Discrete greedy decoding (inference path). Returns content tokens
    /// with the terminating `<eos>` stripped.
    pub fn decode_greedy(&self, ctx: &mut Ctx<F>, memory: Var, max_len: usize) -> Result<Vec<usize>, ModelError> {
        assert!(max_len >= 1);
        let steps_cap = max_len.min(self.cfg.max_len);
        let (mem_n, _) = ctx.tape.shape(memory);
        let mem_pad = vec![false; mem_n];
        let mut tokens: Vec<usize> = Vec::new();
        for _ in 0..steps_cap {
            let mut input = Vec::with_capacity(tokens.len() + 1);
            input.push(BOS);
            input.extend_from_slice(&tokens);
            let emb = self.embed(ctx, &input, 0);
            let dec = self.decoder.forward(ctx, &self.store, memory, &mem_pad, emb)?;
            let (rows, _) = ctx.tape.shape(dec);
            let last = ctx.tape.slice_rows(dec, rows - 1, 1);
            let dist = self.output_distribution(ctx, last);
            let values = ctx.tape.values(dist);
            let mut best = 0;
            for (i, v) in values.iter().enumerate() {
                if *v > values[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            tokens.push(best);
        }
        Ok(tokens)
    }

    /// Plain word-embedding rows for real text (the text critic adds its own
    /// positional signal). Exactly what a one-hot soft embedding produces.
    pub fn lookup_embeddings(&self, ctx: &mut Ctx<F>, tokens: &[usize]) -> Var {
        let we = ctx.bind(&self.store, self.word_emb);
        ctx.tape.gather_rows(we, tokens)
    }

    pub fn word_emb_id(&self) -> ParamId {
        self.word_emb
    }

    pub fn style_emb_id(&self) -> ParamId {
        self.style_emb
    }

    /// Full inference: generate_style → encode_content → fuse → greedy decode.
    pub fn transfer(&self, tokens: &[usize], target_style: usize) -> Result<Vec<usize>, ModelError> {
        let mut tape = crate::tensor::Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let style = self.generate_style(&mut ctx, tokens, target_style)?;
        let content = self.encode_content(&mut ctx, tokens)?;
        let fused = self.fuse(&mut ctx, content, style)?;
        self.decode_greedy(&mut ctx, fused, tokens.len() + self.cfg.decode_margin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Ctx;
    use crate::tensor::Tape;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn tiny(vocab: usize, styles: usize) -> MssrNetConfig {
        MssrNetConfig {
            d_model: 8,
            d_style: 8,
            d_ff: 16,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            styles,
            vocab_size: vocab,
            max_len: 12,
            decode_margin: 4,
            dropout: 0.0,
            fixed_style_vector: false,
        }
    }

    #[test]
    fn style_rows_match_source_length() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 3);
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s = model.generate_style(&mut ctx, &[4, 5, 6, 7], 1).unwrap();
        let s1 = model.generate_style(&mut ctx, &[9], 0).unwrap();
        assert_eq!(tape.shape(s), (4, 8));
        assert_eq!(tape.shape(s1), (1, 8));
    }

    #[test]
    fn unknown_style_is_rejected() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 3);
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        assert!(matches!(
            model.generate_style(&mut ctx, &[4, 5], 2),
            Err(ModelError::UnknownStyle { .. })
        ));
    }

    #[test]
    fn different_target_styles_differ() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 7);
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let a = model.generate_style(&mut ctx, &[4, 5, 6], 0).unwrap();
        let b = model.generate_style(&mut ctx, &[4, 5, 6], 1).unwrap();
        let av = tape.values(a);
        let bv = tape.values(b);
        assert!(av.iter().zip(bv.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn fuse_identity_and_zero_cases() {
        let mut model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 11);
        let d = model.cfg.d_model;
        let mut eye = vec![0.0; d * d];
        for i in 0..d {
            eye[i * d + i] = 1.0;
        }
        // W_c = I, W_s = 0 ⇒ H = C
        model.store.set_values(model.fuse_wc, eye.iter().map(|&x| x).collect());
        model.store.set_values(model.fuse_ws, vec![0.0; d * d]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cv: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sv: Vec<f64> = (0..3 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = tape.constant(3, d, cv.clone());
        let s = tape.constant(3, d, sv.clone());
        let mut ctx = Ctx::frozen(&mut tape);
        let h = model.fuse(&mut ctx, c, s).unwrap();
        assert_eq!(tape.values(h), cv.as_slice());

        // W_c = 0, W_s = I ⇒ H = S
        model.store.set_values(model.fuse_wc, vec![0.0; d * d]);
        model.store.set_values(model.fuse_ws, eye);
        let mut tape = Tape::new();
        let c = tape.constant(3, d, cv.clone());
        let s = tape.constant(3, d, sv.clone());
        let mut ctx = Ctx::frozen(&mut tape);
        let h = model.fuse(&mut ctx, c, s).unwrap();
        assert_eq!(tape.values(h), sv.as_slice());
    }

    #[test]
    fn fuse_rejects_row_mismatch() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 1);
        let mut tape = Tape::new();
        let c = tape.zeros(3, 8);
        let s = tape.zeros(2, 8);
        let mut ctx = Ctx::frozen(&mut tape);
        assert!(matches!(
            model.fuse(&mut ctx, c, s),
            Err(ModelError::RowMismatch { .. })
        ));
    }

    #[test]
    fn fuse_matches_matrix_oracle() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 5);
        let d = model.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cv: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sv: Vec<f64> = (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wc: Vec<f64> = model.store.values(model.fuse_wc).to_vec();
        let ws: Vec<f64> = model.store.values(model.fuse_ws).to_vec();
        // independent dense multiply-and-add
        let mut expect = vec![0.0f64; 2 * d];
        for i in 0..2 {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += cv[i * d + k] * wc[k * d + j];
                    acc += sv[i * d + k] * ws[k * d + j];
                }
                expect[i * d + j] = acc;
            }
        }
        let mut tape = Tape::new();
        let c = tape.constant(2, d, cv);
        let s = tape.constant(2, d, sv);
        let mut ctx = Ctx::frozen(&mut tape);
        let h = model.fuse(&mut ctx, c, s).unwrap();
        for (a, b) in tape.values(h).iter().zip(expect.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn soft_embed_one_hot_equals_lookup() {
        let model: MssrNet<f64> = MssrNet::new(tiny(12, 2), 13);
        let t_vocab = model.cfg.vocab_size;
        let mut tape = Tape::new();
        let mut onehots = vec![0.0; 2 * t_vocab];
        onehots[5] = 1.0;
        onehots[t_vocab + 9] = 1.0;
        let dists = tape.constant(2, t_vocab, onehots);
        let mut ctx = Ctx::frozen(&mut tape);
        let emb = model.soft_embed(&mut ctx, dists).unwrap();
        let we = model.store.values(model.word_emb);
        let d = model.cfg.d_model;
        assert_eq!(&tape.values(emb)[..d], &we[5 * d..6 * d]);
        assert_eq!(&tape.values(emb)[d..], &we[9 * d..10 * d]);
    }

    #[test]
    fn soft_embed_uniform_is_column_mean() {
        let model: MssrNet<f64> = MssrNet::new(tiny(10, 2), 17);
        let t_vocab = model.cfg.vocab_size;
        let d = model.cfg.d_model;
        let mut tape = Tape::new();
        let dists = tape.constant(1, t_vocab, vec![1.0 / t_vocab as f64; t_vocab]);
        let mut ctx = Ctx::frozen(&mut tape);
        let emb = model.soft_embed(&mut ctx, dists).unwrap();
        let we = model.store.values(model.word_emb);
        for j in 0..d {
            let mean: f64 = (0..t_vocab).map(|r| we[r * d + j]).sum::<f64>() / t_vocab as f64;
            assert_relative_eq!(tape.values(emb)[j], mean, epsilon = 1e-9);
        }
    }

    #[test]
    fn soft_embed_rejects_unnormalized_rows() {
        let model: MssrNet<f64> = MssrNet::new(tiny(10, 2), 19);
        let t_vocab = model.cfg.vocab_size;
        let mut tape = Tape::new();
        let mut bad = vec![0.0; t_vocab];
        bad[4] = 0.7;
        let dists = tape.constant(1, t_vocab, bad);
        let mut ctx = Ctx::frozen(&mut tape);
        assert!(matches!(
            model.soft_embed(&mut ctx, dists),
            Err(ModelError::NotADistribution { .. })
        ));
    }

    #[test]
    fn teacher_forced_rows_and_normalization() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 23);
        let gold = [4usize, 7, 9];
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let style = model.generate_style(&mut ctx, &gold, 0).unwrap();
        let content = model.encode_content(&mut ctx, &gold).unwrap();
        let h = model.fuse(&mut ctx, content, style).unwrap();
        let dists = model.decode_teacher_forced(&mut ctx, h, &gold).unwrap();
        assert_eq!(tape.shape(dists), (4, 20)); // three tokens + <eos> row
        for row in 0..4 {
            let sum: f64 = tape.values(dists)[row * 20..(row + 1) * 20].iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn soft_decode_length_cap_and_no_reserved() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 29);
        let src = [4usize, 5, 6];
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let style = model.generate_style(&mut ctx, &src, 1).unwrap();
        let content = model.encode_content(&mut ctx, &src).unwrap();
        let h = model.fuse(&mut ctx, content, style).unwrap();
        let max = src.len() + model.cfg.decode_margin;
        let out = model.decode_soft(&mut ctx, h, max, false).unwrap();
        let (m, _) = tape.shape(out.dists);
        assert!(m <= max);
        assert_eq!(m, out.trajectory.len());
        for tok in out.tokens() {
            assert!(tok != PAD && tok != BOS && tok != EOS);
        }
    }

    #[test]
    fn hardened_soft_decode_matches_greedy() {
        for seed in 0..20 {
            let model: MssrNet<f64> = MssrNet::new(tiny(24, 2), 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..6);
            let src: Vec<usize> = (0..n).map(|_| rng.random_range(4..24)).collect();
            let sty = rng.random_range(0..2);

            let mut tape = Tape::new();
            let mut ctx = Ctx::frozen(&mut tape);
            let style = model.generate_style(&mut ctx, &src, sty).unwrap();
            let content = model.encode_content(&mut ctx, &src).unwrap();
            let h = model.fuse(&mut ctx, content, style).unwrap();
            let max = src.len() + model.cfg.decode_margin;
            let hard = model.decode_soft(&mut ctx, h, max, true).unwrap();
            let greedy = model.decode_greedy(&mut ctx, h, max).unwrap();
            assert_eq!(hard.tokens(), greedy, "seed {seed}");
        }
    }

    #[test]
    fn transfer_is_total_and_deterministic() {
        let model: MssrNet<f32> = MssrNet::new(tiny(20, 2), 31);
        let src = [4usize, 5, 6, 7, 8];
        let a = model.transfer(&src, 1).unwrap();
        let b = model.transfer(&src, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= src.len() + model.cfg.decode_margin);
        assert!(model.transfer(&src, 5).is_err());
    }

    #[test]
    fn fixed_style_vector_broadcasts_pooled_rows() {
        let mut cfg = tiny(20, 2);
        cfg.fixed_style_vector = true;
        let model: MssrNet<f64> = MssrNet::new(cfg, 37);
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s = model.generate_style(&mut ctx, &[4, 5, 6], 0).unwrap();
        let (n, d) = tape.shape(s);
        assert_eq!((n, d), (3, 8));
        let v = tape.values(s);
        for row in 1..n {
            assert_eq!(&v[row * d..(row + 1) * d], &v[..d]);
        }
    }

    #[test]
    fn row_count_conservation_through_pipeline() {
        let model: MssrNet<f64> = MssrNet::new(tiny(20, 3), 41);
        for n in [1usize, 2, 5, 9] {
            let src: Vec<usize> = (0..n).map(|i| 4 + (i % 10)).collect();
            let mut tape = Tape::new();
            let mut ctx = Ctx::frozen(&mut tape);
            let s = model.generate_style(&mut ctx, &src, 2).unwrap();
            let c = model.encode_content(&mut ctx, &src).unwrap();
            let h = model.fuse(&mut ctx, c, s).unwrap();
            assert_eq!(tape.shape(s).0, n);
            assert_eq!(tape.shape(c).0, n);
            assert_eq!(tape.shape(h).0, n);
        }
    }

    #[test]
    fn fuse_is_additive_in_each_slot_exactly() {
        // integer-valued inputs and weights make float arithmetic exact, so
        // additivity of the bias-free fusion holds bitwise
        let mut model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 51);
        let d = model.cfg.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let int = |rng: &mut ChaCha8Rng| rng.random_range(-4..5) as f64;
        let wc: Vec<f64> = (0..d * d).map(|_| int(&mut rng)).collect();
        let ws: Vec<f64> = (0..d * d).map(|_| int(&mut rng)).collect();
        model.store.set_values(model.fuse_wc, wc);
        model.store.set_values(model.fuse_ws, ws);
        let c1: Vec<f64> = (0..2 * d).map(|_| int(&mut rng)).collect();
        let c2: Vec<f64> = (0..2 * d).map(|_| int(&mut rng)).collect();
        let s0: Vec<f64> = (0..2 * d).map(|_| int(&mut rng)).collect();

        let mut tape = Tape::new();
        let c1v = tape.constant(2, d, c1.clone());
        let c2v = tape.constant(2, d, c2.clone());
        let csum = tape.constant(2, d, c1.iter().zip(&c2).map(|(a, b)| a + b).collect());
        let z = tape.zeros(2, d);
        let s0v = tape.constant(2, d, s0.clone());
        let (h_sum, h1, h2, h_zero_s) = {
            let mut ctx = Ctx::frozen(&mut tape);
            let h_sum = model.fuse(&mut ctx, csum, s0v).unwrap();
            let h1 = model.fuse(&mut ctx, c1v, s0v).unwrap();
            let h2 = model.fuse(&mut ctx, c2v, z).unwrap();
            let zz = ctx.tape.zeros(2, d);
            let z2 = ctx.tape.zeros(2, d);
            let h_zero = model.fuse(&mut ctx, zz, z2).unwrap();
            (h_sum, h1, h2, h_zero)
        };
        // fuse(c1+c2, s) == fuse(c1, s) + fuse(c2, 0), exactly
        let lhs = tape.values(h_sum).to_vec();
        let rhs: Vec<f64> = tape
            .values(h1)
            .iter()
            .zip(tape.values(h2).iter())
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(lhs, rhs);
        assert!(tape.values(h_zero_s).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn eos_pinned_head_gives_length_one_output() {
        let mut model: MssrNet<f64> = MssrNet::new(tiny(20, 2), 53);
        // bias the output head so <eos> always wins
        let t_vocab = model.cfg.vocab_size;
        let mut bias = vec![0.0; t_vocab];
        bias[crate::data::EOS] = 1e4;
        model.store.set_values(model.out_b, bias);
        let src = [4usize, 5, 6];
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let style = model.generate_style(&mut ctx, &src, 0).unwrap();
        let content = model.encode_content(&mut ctx, &src).unwrap();
        let h = model.fuse(&mut ctx, content, style).unwrap();
        let soft = model.decode_soft(&mut ctx, h, 7, false).unwrap();
        let greedy = model.decode_greedy(&mut ctx, h, 7).unwrap();
        assert_eq!(tape.shape(soft.dists).0, 1);
        assert!(soft.stopped_by_eos);
        assert!(soft.tokens().is_empty());
        assert!(greedy.is_empty());
    }

    #[test]
    fn end_to_end_gradient_reaches_style_generator() {
        let model: MssrNet<f64> = MssrNet::new(tiny(16, 2), 43);
        let src = [4usize, 5];
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&mut tape);
        let style = model.generate_style(&mut ctx, &src, 1).unwrap();
        let content = model.encode_content(&mut ctx, &src).unwrap();
        let h = model.fuse(&mut ctx, content, style).unwrap();
        let soft = model.decode_soft(&mut ctx, h, 4, false).unwrap();
        let loss = tape.mean_all(soft.dists);
        let grads = tape.backward(loss);
        let se = model.store.bind(&mut tape, model.style_emb);
        let g = grads.get(se).expect("style embedding must receive gradient");
        let nonzero = tape.values(g).iter().any(|&x| x != 0.0);
        assert!(nonzero, "gradient through decode_soft must be non-zero");
    }
}
