//! Transformer building blocks on top of the tape: multi-head attention,
//! encoder/decoder stacks, attentive pooling, classification heads.
//!
//! Layers own [`ParamId`]s into a store; a [`Ctx`] carries the tape plus the
//! forward mode (frozen binding, dropout).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParameterStore, Role};
use crate::tensor::{Real, Tape, Var};

const MASK_NEG: f64 = -1e9;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty memory passed to decoder")]
    EmptyMemory,
}

/// Forward-pass context: tape access, parameter binding mode, dropout.
pub struct Ctx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    frozen: bool,
    dropout: Option<(&'a mut ChaCha8Rng, f64)>,
}

impl<'a, F: Real> Ctx<'a, F> {
    /// Gradient-tracked parameters, dropout off.
    pub fn eval(tape: &'a mut Tape<F>) -> Self {
        Ctx {
            tape,
            frozen: false,
            dropout: None,
        }
    }

    /// Parameters bound without gradients, dropout off.
    pub fn frozen(tape: &'a mut Tape<F>) -> Self {
        Ctx {
            tape,
            frozen: true,
            dropout: None,
        }
    }

    /// Gradient-tracked parameters with dropout at `rate`.
    pub fn train(tape: &'a mut Tape<F>, rng: &'a mut ChaCha8Rng, rate: f64) -> Self {
        Ctx {
            tape,
            frozen: false,
            dropout: if rate > 0.0 { Some((rng, rate)) } else { None },
        }
    }

    pub fn bind(&mut self, store: &ParameterStore<F>, id: ParamId) -> Var {
        if self.frozen {
            store.bind_frozen(self.tape, id)
        } else {
            store.bind(self.tape, id)
        }
    }

    /// Inverted dropout; identity when the context has no dropout source.
    pub fn dropout(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            None => x,
            Some((rng, rate)) => {
                let (r, c) = self.tape.shape(x);
                let keep_scale = F::from_f64(1.0 / (1.0 - *rate));
                let mask: Vec<F> = (0..r * c)
                    .map(|_| {
                        if rng.random::<f64>() < *rate {
                            F::ZERO
                        } else {
                            keep_scale
                        }
                    })
                    .collect();
                let m = self.tape.constant(r, c, mask);
                self.tape.mul(x, m)
            }
        }
    }
}

/// Gaussian error linear unit (tanh form). Smooth everywhere, which keeps
/// central-difference gradient checks meaningful.
pub fn gelu<F: Real>(tape: &mut Tape<F>, x: Var) -> Var {
    let x2 = tape.mul(x, x);
    let x3 = tape.mul(x2, x);
    let x3s = tape.scale(x3, 0.044715);
    let inner = tape.add(x, x3s);
    let scaled = tape.scale(inner, 0.7978845608028654);
    let t = tape.tanh(scaled);
    let onep = tape.add_scalar(t, 1.0);
    let halfx = tape.scale(x, 0.5);
    tape.mul(halfx, onep)
}

/// Additive attention mask hiding padded key positions. `None` when nothing
/// is padded (saves a node).
pub fn pad_attn_mask<F: Real>(tape: &mut Tape<F>, query_len: usize, key_pad: &[bool]) -> Option<Var> {
    if key_pad.iter().all(|&p| !p) {
        return None;
    }
    let kl = key_pad.len();
    let mut vals = vec![F::ZERO; query_len * kl];
    for i in 0..query_len {
        for (j, &p) in key_pad.iter().enumerate() {
            if p {
                vals[i * kl + j] = F::from_f64(MASK_NEG);
            }
        }
    }
    Some(tape.constant(query_len, kl, vals))
}

/// Strict causal mask: position t sees keys ≤ t.
pub fn causal_mask<F: Real>(tape: &mut Tape<F>, t: usize) -> Var {
    let mut vals = vec![F::ZERO; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            vals[i * t + j] = F::from_f64(MASK_NEG);
        }
    }
    tape.constant(t, t, vals)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        role: Role,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Linear {
            w: store.add_glorot(&format!("{name}.w"), role, d_in, d_out, rng),
            b: store.add_zeros(&format!("{name}.b"), role, 1, d_out),
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, store: &ParameterStore<F>, x: Var) -> Var {
        let w = ctx.bind(store, self.w);
        let b = ctx.bind(store, self.b);
        let (n, _) = ctx.tape.shape(x);
        let xw = ctx.tape.matmul(x, w);
        let bb = ctx.tape.broadcast_rows(b, n);
        ctx.tape.add(xw, bb)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParameterStore<F>, name: &str, role: Role, d: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.gamma"), role, 1, d, vec![F::ONE; d]),
            beta: store.add_zeros(&format!("{name}.beta"), role, 1, d),
            eps: 1e-5,
        }
    }

    pub fn forward<F: Real>(&self, ctx: &mut Ctx<F>, store: &ParameterStore<F>, x: Var) -> Var {
        let (n, d) = ctx.tape.shape(x);
        let t = &mut *ctx.tape;
        let mean = {
            let s = t.sum_cols(x);
            t.scale(s, 1.0 / d as f64)
        };
        let mean_b = t.broadcast_cols(mean, d);
        let centered = t.sub(x, mean_b);
        let sq = t.mul(centered, centered);
        let var = {
            let s = t.sum_cols(sq);
            t.scale(s, 1.0 / d as f64)
        };
        let var_eps = t.add_scalar(var, self.eps);
        let inv_std = t.pow_const(var_eps, -0.5);
        let inv_b = t.broadcast_cols(inv_std, d);
        let normed = t.mul(centered, inv_b);
        let gamma = ctx.bind(store, self.gamma);
        let beta = ctx.bind(store, self.beta);
        let t = &mut *ctx.tape;
        let gb = t.broadcast_rows(gamma, n);
        let bb = t.broadcast_rows(beta, n);
        let scaled = t.mul(normed, gb);
        t.add(scaled, bb)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        role: Role,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads >= 1 && d_model % heads == 0, "d_model must divide into heads");
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), role, d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), role, d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), role, d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), role, d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    /// `mask`: optional additive (query_len × key_len) constant.
    pub fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<F>,
        store: &ParameterStore<F>,
        queries: Var,
        keys_values: Var,
        mask: Option<Var>,
    ) -> Var {
        let dk = self.d_model / self.heads;
        let q = self.q.forward(ctx, store, queries);
        let k = self.k.forward(ctx, store, keys_values);
        let v = self.v.forward(ctx, store, keys_values);
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let t = &mut *ctx.tape;
            let qh = t.slice_cols(q, h * dk, dk);
            let kh = t.slice_cols(k, h * dk, dk);
            let vh = t.slice_cols(v, h * dk, dk);
            let kt = t.transpose(kh);
            let scores = t.matmul(qh, kt);
            let scaled = t.scale(scores, 1.0 / (dk as f64).sqrt());
            let masked = match mask {
                Some(m) => t.add(scaled, m),
                None => scaled,
            };
            let attn = t.softmax_rows(masked);
            head_outs.push(t.matmul(attn, vh));
        }
        let merged = ctx.tape.concat_cols(&head_outs);
        self.o.forward(ctx, store, merged)
    }
}

/// Stack geometry shared by encoders and decoders.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl StackConfig {
    pub fn validate(&self) {
        assert!(self.layers >= 1, "stack needs at least one layer");
        assert!(self.d_model % self.heads == 0, "d_model must divide into heads");
        assert!((0.0..1.0).contains(&self.dropout));
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        role: Role,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.ff1"), role, d_model, d_ff, rng),
            outer: Linear::new(store, &format!("{name}.ff2"), role, d_ff, d_model, rng),
        }
    }

    fn forward<F: Real>(&self, ctx: &mut Ctx<F>, store: &ParameterStore<F>, x: Var) -> Var {
        let h = self.inner.forward(ctx, store, x);
        let a = gelu(ctx.tape, h);
        self.outer.forward(ctx, store, a)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

impl EncoderLayer {
    fn forward<F: Real>(&self, ctx: &mut Ctx<F>, store: &ParameterStore<F>, x: Var, mask: Option<Var>) -> Var {
        let attended = self.attn.forward(ctx, store, x, x, mask);
        let dropped = ctx.dropout(attended);
        let res = ctx.tape.add(x, dropped);
        let x = self.ln1.forward(ctx, store, res);
        let ff = self.ff.forward(ctx, store, x);
        let dropped = ctx.dropout(ff);
        let res = ctx.tape.add(x, dropped);
        self.ln2.forward(ctx, store, res)
    }
}

/// Post-norm transformer encoder.
pub struct EncoderStack {
    pub cfg: StackConfig,
    layers: Vec<EncoderLayer>,
}

impl EncoderStack {
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        role: Role,
        cfg: StackConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        cfg.validate();
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer {
                attn: MultiHeadAttention::new(store, &format!("{name}.l{i}.attn"), role, cfg.d_model, cfg.heads, rng),
                ln1: LayerNorm::new(store, &format!("{name}.l{i}.ln1"), role, cfg.d_model),
                ff: FeedForward::new(store, &format!("{name}.l{i}"), role, cfg.d_model, cfg.d_ff, rng),
                ln2: LayerNorm::new(store, &format!("{name}.l{i}.ln2"), role, cfg.d_model),
            })
            .collect();
        EncoderStack { cfg, layers }
    }

    /// `emb`: n×d_model token representations. Padded positions (mask `true`)
    /// cannot influence unpadded outputs.
    pub fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<F>,
        store: &ParameterStore<F>,
        emb: Var,
        pad_mask: &[bool],
    ) -> Result<Var, NnError> {
        let (n, d) = ctx.tape.shape(emb);
        if n == 0 || d != self.cfg.d_model {
            return Err(NnError::ShapeMismatch(format!(
                "encoder expects n×{} embeddings, got {}×{}",
                self.cfg.d_model, n, d
            )));
        }
        if pad_mask.len() != n {
            return Err(NnError::ShapeMismatch(format!(
                "pad mask length {} does not match {} positions",
                pad_mask.len(),
                n
            )));
        }
        let mask = pad_attn_mask(ctx.tape, n, pad_mask);
        let mut x = emb;
        for layer in &self.layers {
            x = layer.forward(ctx, store, x, mask);
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

/// Post-norm transformer decoder with causal self-attention and
/// cross-attention over an encoder memory.
pub struct DecoderStack {
    pub cfg: StackConfig,
    layers: Vec<DecoderLayer>,
}

impl DecoderStack {
    pub fn new<F: Real>(
        store: &mut ParameterStore<F>,
        name: &str,
        role: Role,
        cfg: StackConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        cfg.validate();
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{name}.l{i}.self"), role, cfg.d_model, cfg.heads, rng),
                ln1: LayerNorm::new(store, &format!("{name}.l{i}.ln1"), role, cfg.d_model),
                cross_attn: MultiHeadAttention::new(store, &format!("{name}.l{i}.cross"), role, cfg.d_model, cfg.heads, rng),
                ln2: LayerNorm::new(store, &format!("{name}.l{i}.ln2"), role, cfg.d_model),
                ff: FeedForward::new(store, &format!("{name}.l{i}"), role, cfg.d_model, cfg.d_ff, rng),
                ln3: LayerNorm::new(store, &format!("{name}.l{i}.ln3"), role, cfg.d_model),
            })
            .collect();
        DecoderStack { cfg, layers }
    }

    pub fn forward<F: Real>(
        &self,
        ctx: &mut Ctx<F>,
        store: &ParameterStore<F>,
        memory: Var,
        memory_pad: &[bool],
        target_emb: Var,
    ) -> Result<Var, NnError> {
        let (mem_n, mem_d) = ctx.tape.shape(memory);
        if mem_n == 0 {
            return Err(NnError::EmptyMemory);
        }
        if mem_d != self.cfg.d_model {
            return Err(NnError::ShapeMismatch(format!(
                "memory dim {} != d_model {}",
                mem_d, self.cfg.d_model
            )));
        }
        if memory_pad.len() != mem_n {
            return Err(NnError::ShapeMismatch("memory pad mask length".into()));
        }
        let (t_len, t_d) = ctx.tape.shape(target_emb);
        if t_d != self.cfg.d_model {
            return Err(NnError::ShapeMismatch(format!(
                "target dim {} != d_model {}",
                t_d, self.cfg.d_model
            )));
        }
        let causal = causal_mask(ctx.tape, t_len);
        let cross = pad_attn_mask(ctx.tape, t_len, memory_pad);
        let mut x = target_emb;
        for layer in &self.layers {
            let attended = layer.self_attn.forward(ctx, store, x, x, Some(causal));
            let dropped = ctx.dropout(attended);
            let res = ctx.tape.add(x, dropped);
            let x1 = layer.ln1.forward(ctx, store, res);
            let crossed = layer.cross_attn.forward(ctx, store, x1, memory, cross);
            let dropped = ctx.dropout(crossed);
            let res = ctx.tape.add(x1, dropped);
            let x2 = layer.ln2.forward(ctx, store, res);
            let ff = layer.ff.forward(ctx, store, x2);
            let dropped = ctx.dropout(ff);
            let res = ctx.tape.add(x2, dropped);
            x = layer.ln3.forward(ctx, store, res);
        }
        Ok(x)
    }
}

/// Softmax-weighted average of hidden states: weights ∝ exp(vᵀh_i).
/// Returns (1×d pooled vector, 1×n weight row).
pub fn attentive_pool<F: Real>(
    ctx: &mut Ctx<F>,
    store: &ParameterStore<F>,
    h: Var,
    v: ParamId,
    pad_mask: Option<&[bool]>,
) -> (Var, Var) {
    let (n, _) = ctx.tape.shape(h);
    let vv = ctx.bind(store, v);
    let t = &mut *ctx.tape;
    let logits = t.matmul(h, vv); // n×1
    let masked = match pad_mask {
        Some(pad) => {
            assert_eq!(pad.len(), n);
            let vals: Vec<F> = pad
                .iter()
                .map(|&p| if p { F::from_f64(MASK_NEG) } else { F::ZERO })
                .collect();
            let m = t.constant(n, 1, vals);
            t.add(logits, m)
        }
        None => logits,
    };
    let row = t.transpose(masked); // 1×n
    let weights = t.softmax_rows(row); // 1×n
    let pooled = t.matmul(weights, h); // 1×d
    (pooled, weights)
}

/// Linear layer plus softmax over K classes.
pub fn softmax_linear_head<F: Real>(
    ctx: &mut Ctx<F>,
    store: &ParameterStore<F>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Var {
    let wv = ctx.bind(store, w);
    let bv = ctx.bind(store, b);
    let (n, _) = ctx.tape.shape(x);
    let t = &mut *ctx.tape;
    let logits = t.matmul(x, wv);
    let bb = t.broadcast_rows(bv, n);
    let shifted = t.add(logits, bb);
    t.softmax_rows(shifted)
}

/// Raw (softmax-free) linear scores — the critic heads need unbounded output.
pub fn linear_head<F: Real>(
    ctx: &mut Ctx<F>,
    store: &ParameterStore<F>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Var {
    let wv = ctx.bind(store, w);
    let bv = ctx.bind(store, b);
    let (n, _) = ctx.tape.shape(x);
    let t = &mut *ctx.tape;
    let logits = t.matmul(x, wv);
    let bb = t.broadcast_rows(bv, n);
    t.add(logits, bb)
}
