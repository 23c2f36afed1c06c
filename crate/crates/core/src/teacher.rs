//! The pretrained style classifier: per-token style vectors (Eq. of the
//! attentive-pool classifier), the training loop that freezes it, and the
//! span-disturbance selector that explains which tokens carry the style.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Corpus};
use crate::nn::{attentive_pool, softmax_linear_head, Ctx, EncoderStack, StackConfig};
use crate::params::{AdamConfig, OptimError, ParamId, ParameterStore, Role};
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum TeacherError {
    #[error("teacher needs at least two styles, got {0}")]
    SingleClass(usize),
    #[error("corpus error: {0}")]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("nn error: {0}")]
    Nn(#[from] crate::nn::NnError),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct TeacherConfig {
    pub stack: StackConfig,
    pub vocab_size: usize,
    pub max_len: usize,
    pub styles: usize,
}

impl TeacherConfig {
    pub fn new(vocab_size: usize, styles: usize, d_model: usize, max_len: usize) -> Self {
        TeacherConfig {
            stack: StackConfig {
                layers: 3,
                d_model,
                d_ff: d_model * 2,
                heads: if d_model % 4 == 0 { 4 } else { 1 },
                dropout: 0.1,
            },
            vocab_size,
            max_len,
            styles,
        }
    }
}

pub struct TeacherModel<F: Real> {
    pub cfg: TeacherConfig,
    pub store: ParameterStore<F>,
    word_emb: ParamId,
    pos_emb: ParamId,
    encoder: EncoderStack,
    pool_v: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl<F: Real> TeacherModel<F> {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Self {
        assert!(cfg.styles >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let d = cfg.stack.d_model;
        let word_emb = store.add_glorot("teacher.word_emb", Role::Teacher, cfg.vocab_size, d, &mut rng);
        let pos_emb = store.add_glorot("teacher.pos_emb", Role::Teacher, cfg.max_len, d, &mut rng);
        let encoder = EncoderStack::new(&mut store, "teacher.enc", Role::Teacher, cfg.stack, &mut rng);
        let pool_v = store.add_glorot("teacher.pool_v", Role::Teacher, d, 1, &mut rng);
        let head_w = store.add_zeros("teacher.head_w", Role::Teacher, d, cfg.styles);
        let head_b = store.add_zeros("teacher.head_b", Role::Teacher, 1, cfg.styles);
        TeacherModel {
            cfg,
            store,
            word_emb,
            pos_emb,
            encoder,
            pool_v,
            head_w,
            head_b,
        }
    }

    /// A hand-built classifier whose decision provably depends on marker
    /// tokens alone: marker embeddings are antipodal unit-ish vectors, every
    /// other embedding is exactly zero, attention and feed-forward outputs
    /// are zeroed, and pooling is uniform. Zeroing a marker's pooling weight
    /// collapses the logits to zero, so probability drops land at
    /// p₀ − 0.5 for marker spans and exactly 0 elsewhere — a calibration
    /// instrument for the span selector.
    pub fn marker_probe(
        vocab_size: usize,
        max_len: usize,
        markers_style0: &[usize],
        markers_style1: &[usize],
        head_scale: f64,
    ) -> Self {
        let cfg = TeacherConfig {
            stack: StackConfig {
                layers: 3,
                d_model: 2,
                d_ff: 4,
                heads: 1,
                dropout: 0.0,
            },
            vocab_size,
            max_len,
            styles: 2,
        };
        let mut model = TeacherModel::new(cfg, 0);
        let store = &mut model.store;
        let zero_out = |store: &mut ParameterStore<F>, name: &str| {
            let id = store.id_by_name(name).expect("probe parameter");
            let len = store.values(id).len();
            store.set_values(id, vec![F::ZERO; len]);
        };
        let mut emb = vec![F::ZERO; vocab_size * 2];
        for &m in markers_style0 {
            emb[m * 2] = F::ONE;
            emb[m * 2 + 1] = -F::ONE;
        }
        for &m in markers_style1 {
            emb[m * 2] = -F::ONE;
            emb[m * 2 + 1] = F::ONE;
        }
        store.set_values(store.id_by_name("teacher.word_emb").unwrap(), emb);
        zero_out(store, "teacher.pos_emb");
        for layer in 0..3 {
            zero_out(store, &format!("teacher.enc.l{layer}.attn.o.w"));
            zero_out(store, &format!("teacher.enc.l{layer}.ff2.w"));
        }
        zero_out(store, "teacher.pool_v");
        let w = head_scale;
        store.set_values(
            store.id_by_name("teacher.head_w").unwrap(),
            vec![F::from_f64(w), F::from_f64(-w), F::from_f64(-w), F::from_f64(w)],
        );
        model
    }

    /// Per-token style vectors S_x (n×d). One row per token, no extra slot.
    pub fn encode(&self, ctx: &mut Ctx<F>, tokens: &[usize]) -> Var {
        assert!(!tokens.is_empty(), "teacher cannot encode an empty sentence");
        assert!(tokens.len() <= self.cfg.max_len, "sentence exceeds teacher max_len");
        let we = ctx.bind(&self.store, self.word_emb);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let t = &mut *ctx.tape;
        let w = t.gather_rows(we, tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = t.gather_rows(pe, &positions);
        let emb = t.add(w, p);
        let emb = ctx.dropout(emb);
        self.encoder
            .forward(ctx, &self.store, emb, &vec![false; tokens.len()])
            .expect("teacher encode shapes are internally consistent")
    }

    /// Style vectors for a *distribution* sequence: rows of 𝒴 are soft-embedded
    /// with the teacher's own tables, keeping the path differentiable back
    /// into the distributions.
    pub fn encode_soft(&self, ctx: &mut Ctx<F>, dists: Var) -> Var {
        let (m, t_dim) = ctx.tape.shape(dists);
        assert_eq!(t_dim, self.cfg.vocab_size, "distribution width must match teacher vocab");
        assert!(m >= 1 && m <= self.cfg.max_len);
        let we = ctx.bind(&self.store, self.word_emb);
        let pe = ctx.bind(&self.store, self.pos_emb);
        let t = &mut *ctx.tape;
        let w = t.matmul(dists, we);
        let positions: Vec<usize> = (0..m).collect();
        let p = t.gather_rows(pe, &positions);
        let emb = t.add(w, p);
        let emb = ctx.dropout(emb);
        self.encoder
            .forward(ctx, &self.store, emb, &vec![false; m])
            .expect("teacher soft encode shapes are internally consistent")
    }

    /// Pooling + linear + softmax over any n×d style representation
    /// (its own or the student's). Returns (1×K probabilities, 1×n weights).
    pub fn classify_repr(&self, ctx: &mut Ctx<F>, s: Var) -> (Var, Var) {
        let (pooled, weights) = attentive_pool(ctx, &self.store, s, self.pool_v, None);
        let probs = softmax_linear_head(ctx, &self.store, pooled, self.head_w, self.head_b);
        (probs, weights)
    }

    /// End-to-end classification of a token sequence.
    pub fn classify_tokens(&self, ctx: &mut Ctx<F>, tokens: &[usize]) -> (Var, Var) {
        let s = self.encode(ctx, tokens);
        self.classify_repr(ctx, s)
    }

    /// Frozen evaluation: (class probabilities, pooling weights).
    pub fn predict(&self, tokens: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let mut tape: Tape<F> = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let (probs, weights) = self.classify_tokens(&mut ctx, tokens);
        let p = tape.values(probs).iter().map(|x| x.to_f64()).collect();
        let w = tape.values(weights).iter().map(|x| x.to_f64()).collect();
        (p, w)
    }

    pub fn predict_label(&self, tokens: &[usize]) -> usize {
        let (p, _) = self.predict(tokens);
        argmax(&p)
    }

    pub fn accuracy(&self, corpus: &Corpus) -> f64 {
        if corpus.is_empty() {
            return 0.0;
        }
        let correct = corpus
            .sentences
            .iter()
            .filter(|s| self.predict_label(&s.ids) == s.style)
            .count();
        correct as f64 / corpus.len() as f64
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TeacherTrainOptions {
    pub max_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub eval_every: usize,
    pub seed: u64,
    /// stop as soon as held-out accuracy reaches this
    pub early_stop_acc: Option<f64>,
}

impl Default for TeacherTrainOptions {
    fn default() -> Self {
        TeacherTrainOptions {
            max_steps: 2000,
            batch_size: 32,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            eval_every: 50,
            seed: 1,
            early_stop_acc: Some(0.998),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherTrainReport {
    pub steps_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub best_val_accuracy: f64,
}

/// Cross-entropy training with Adam; returns the best-validation checkpoint.
pub fn train_teacher<F: Real>(
    train: &Corpus,
    val: &Corpus,
    cfg: TeacherConfig,
    opts: &TeacherTrainOptions,
) -> Result<(TeacherModel<F>, TeacherTrainReport), TeacherError> {
    if cfg.styles < 2 {
        return Err(TeacherError::SingleClass(cfg.styles));
    }
    train.validate()?;
    let mut model = TeacherModel::new(cfg, opts.seed);
    let mut rng_drop = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(17));
    let mut stream = BatchStream::new(train, opts.batch_size, opts.seed.wrapping_add(1));

    let mut best_acc = -1.0;
    let mut best_snapshot = model.store.snapshot();
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;

    for step in 0..opts.max_steps {
        let batch = stream.next_batch();
        let scale = 1.0 / batch.sentences.len() as f64;
        model.store.zero_grads();
        let mut batch_loss = 0.0;
        for sent in &batch.sentences {
            let mut tape: Tape<F> = Tape::new();
            let mut ctx = Ctx::train(&mut tape, &mut rng_drop, model.cfg.stack.dropout);
            let (probs, _) = model.classify_tokens(&mut ctx, &sent.ids);
            let p_true = tape.slice_cols(probs, sent.style, 1);
            let lp = tape.ln(p_true);
            let nl = tape.neg(lp);
            let loss = tape.scale(nl, scale);
            let grads = tape.backward(loss);
            model.store.accumulate_grads(&tape, &grads, 1.0);
            batch_loss += tape.scalar_value(loss).to_f64();
        }
        if step == 0 {
            initial_loss = batch_loss;
        }
        final_loss = batch_loss;
        model.store.adam_step(&[Role::Teacher], &opts.adam)?;
        steps_run = step + 1;

        if (step + 1) % opts.eval_every == 0 || step + 1 == opts.max_steps {
            let acc = model.accuracy(val);
            if acc > best_acc {
                best_acc = acc;
                best_snapshot = model.store.snapshot();
            }
            if let Some(target) = opts.early_stop_acc {
                if acc >= target {
                    break;
                }
            }
        }
    }
    model.store.restore(&best_snapshot);
    if best_acc < 0.0 {
        best_acc = model.accuracy(val);
    }
    Ok((
        model,
        TeacherTrainReport {
            steps_run,
            initial_loss,
            final_loss,
            best_val_accuracy: best_acc,
        },
    ))
}

// ---- stylistic token selection ----

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SalienceConfig {
    /// span orders to disturb (1..=max_order)
    pub max_order: usize,
    /// minimum probability drop for a span to qualify
    pub beta: f64,
    /// renormalize surviving pooling weights after zeroing a span
    pub renormalize: bool,
    /// interpret beta as a relative drop (fraction of the original probability)
    pub relative: bool,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        SalienceConfig {
            max_order: 3,
            beta: 0.10,
            renormalize: false,
            relative: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylisticSpan {
    pub start: usize,
    pub len: usize,
    pub tokens: Vec<String>,
    pub drop: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SalienceResult {
    pub spans: Vec<StylisticSpan>,
    /// the explained label was not the predicted one (p < 0.5 before disturbance)
    pub low_confidence: bool,
    pub original_prob: f64,
}

/// Raw ingredients for span disturbance, extracted once per sentence.
pub(crate) struct PoolState {
    pub(crate) n: usize,
    pub(crate) d: usize,
    pub(crate) s: Vec<f64>,     // n×d style vectors
    pub(crate) alpha: Vec<f64>, // n pooling weights
    pub(crate) w: Vec<f64>,     // d×K head
    pub(crate) b: Vec<f64>,     // K
    pub(crate) k: usize,
}

impl PoolState {
    pub(crate) fn prob_with_span_zeroed(&self, span: Option<(usize, usize)>, renormalize: bool, label: usize) -> f64 {
        let mut alpha = self.alpha.clone();
        if let Some((start, len)) = span {
            for a in alpha.iter_mut().skip(start).take(len) {
                *a = 0.0;
            }
            if renormalize {
                let s: f64 = alpha.iter().sum();
                if s > 0.0 {
                    for a in alpha.iter_mut() {
                        *a /= s;
                    }
                }
            }
        }
        let mut pooled = vec![0.0; self.d];
        for i in 0..self.n {
            for j in 0..self.d {
                pooled[j] += alpha[i] * self.s[i * self.d + j];
            }
        }
        let mut logits = self.b.clone();
        for j in 0..self.d {
            for c in 0..self.k {
                logits[c] += pooled[j] * self.w[j * self.k + c];
            }
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps[label] / z
    }
}

impl<F: Real> TeacherModel<F> {
    pub(crate) fn pool_state(&self, tokens: &[usize]) -> PoolState {
        let mut tape: Tape<F> = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s = self.encode(&mut ctx, tokens);
        let (_, weights) = self.classify_repr(&mut ctx, s);
        let d = self.cfg.stack.d_model;
        PoolState {
            n: tokens.len(),
            d,
            s: tape.values(s).iter().map(|x| x.to_f64()).collect(),
            alpha: tape.values(weights).iter().map(|x| x.to_f64()).collect(),
            w: self.store.values(self.head_w).iter().map(|x| x.to_f64()).collect(),
            b: self.store.values(self.head_b).iter().map(|x| x.to_f64()).collect(),
            k: self.cfg.styles,
        }
    }

    /// Span-disturbance explanation: zero the pooling weights of every
    /// contiguous span of order 1..=3 (leaving the remaining weights as they
    /// are, which shrinks the pooled vector — the disturbance the classifier
    /// actually feels), keep spans whose probability for `label` drops by
    /// more than β, prefer minimal spans (a span containing an
    /// already-qualifying sub-span is dropped), then merge overlaps.
    /// `renormalize` switches to convex re-weighting of the survivors.
    pub fn select_stylistic_tokens(
        &self,
        tokens: &[usize],
        label: usize,
        cfg: &SalienceConfig,
        vocab: &crate::data::Vocabulary,
    ) -> SalienceResult {
        assert!(label < self.cfg.styles);
        assert!(cfg.beta > 0.0 && cfg.beta < 1.0);
        let state = self.pool_state(tokens);
        let n = tokens.len();
        let p0 = state.prob_with_span_zeroed(None, cfg.renormalize, label);
        let low_confidence = p0 < 0.5;
        if low_confidence {
            log::warn!("explaining label {label} with pre-disturbance probability {p0:.3}");
        }

        let qualifies = |drop: f64| -> bool {
            if cfg.relative {
                p0 > 0.0 && drop / p0 > cfg.beta
            } else {
                drop > cfg.beta
            }
        };

        // minimal qualifying spans, by increasing order
        let mut selected: Vec<(usize, usize, f64)> = Vec::new();
        for order in 1..=cfg.max_order {
            if order >= n {
                break; // never disturb the whole sentence
            }
            for start in 0..=(n - order) {
                if selected
                    .iter()
                    .any(|&(s, l, _)| s >= start && s + l <= start + order)
                {
                    continue; // contains an already-selected smaller span
                }
                let p = state.prob_with_span_zeroed(Some((start, order)), cfg.renormalize, label);
                let drop = p0 - p;
                if qualifies(drop) {
                    selected.push((start, order, drop));
                }
            }
        }

        // merge overlapping selections into maximal spans
        selected.sort_by_key(|&(s, _, _)| s);
        let mut merged: Vec<(usize, usize)> = Vec::new();
        for (s, l, _) in &selected {
            match merged.last_mut() {
                Some((ms, ml)) if *s < *ms + *ml => {
                    let end = (*ms + *ml).max(s + l);
                    *ml = end - *ms;
                }
                _ => merged.push((*s, *l)),
            }
        }

        let spans = merged
            .into_iter()
            .map(|(start, len)| {
                let p = state.prob_with_span_zeroed(Some((start, len)), cfg.renormalize, label);
                StylisticSpan {
                    start,
                    len,
                    tokens: tokens[start..start + len]
                        .iter()
                        .map(|&id| vocab.token(id).to_string())
                        .collect(),
                    drop: p0 - p,
                }
            })
            .collect();

        SalienceResult {
            spans,
            low_confidence,
            original_prob: p0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_corpus;

    fn tiny_cfg(vocab: usize, styles: usize) -> TeacherConfig {
        TeacherConfig {
            stack: StackConfig {
                layers: 2,
                d_model: 16,
                d_ff: 32,
                heads: 2,
                dropout: 0.0,
            },
            vocab_size: vocab,
            max_len: 16,
            styles,
        }
    }

    #[test]
    fn encode_row_count_matches_tokens() {
        let model: TeacherModel<f32> = TeacherModel::new(tiny_cfg(20, 2), 3);
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s = model.encode(&mut ctx, &[4, 5, 6, 7, 8]);
        assert_eq!(tape.shape(s), (5, 16));
    }

    #[test]
    fn untrained_zero_head_gives_uniform() {
        let model: TeacherModel<f64> = TeacherModel::new(tiny_cfg(20, 2), 5);
        let (p, _) = model.predict(&[4, 5, 6]);
        assert!((p[0] - 0.5).abs() < 1e-9);
        assert!((p[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn classify_composition_equals_end_to_end() {
        let model: TeacherModel<f64> = TeacherModel::new(tiny_cfg(20, 3), 7);
        let tokens = [4usize, 9, 13];
        let mut tape = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let s = model.encode(&mut ctx, &tokens);
        let (p1, _) = model.classify_repr(&mut ctx, s);
        let composed = tape.values(p1).to_vec();
        let (p2, _) = model.predict(&tokens);
        for (a, b) in composed.iter().zip(p2.iter()) {
            assert_eq!(a.to_f64(), *b);
        }
    }

    #[test]
    fn deterministic_under_frozen_parameters() {
        let model: TeacherModel<f32> = TeacherModel::new(tiny_cfg(30, 2), 11);
        let (a, _) = model.predict(&[5, 6, 7]);
        let (b, _) = model.predict(&[5, 6, 7]);
        assert_eq!(a, b);
    }

    #[test]
    fn teacher_gradients_stay_out_of_frozen_binding() {
        // downstream loss through a frozen-bound teacher must leave no
        // gradient on teacher parameters while the student input gets one
        let model: TeacherModel<f64> = TeacherModel::new(tiny_cfg(20, 2), 13);
        let mut tape = Tape::new();
        let student = tape.leaf(3, 16, vec![0.1; 48], true);
        let mut ctx = Ctx::frozen(&mut tape);
        let (probs, _) = model.classify_repr(&mut ctx, student);
        let p = tape.slice_cols(probs, 0, 1);
        let lp = tape.ln(p);
        let loss = tape.neg(lp);
        let grads = tape.backward(loss);
        assert!(grads.get(student).is_some());
        let head_w = model.store.bind_frozen(&mut tape, model.head_w);
        assert!(grads.get(head_w).is_none());
    }

    #[test]
    fn single_class_is_rejected() {
        let cfg = tiny_cfg(20, 1);
        let corpus = gen_synthetic_corpus(2, 5, 1).unwrap();
        let err = train_teacher::<f32>(&corpus, &corpus, cfg, &TeacherTrainOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn pool_state_renormalization_keeps_convexity() {
        // hand-built pooling state: 3 tokens, 2 dims, 2 classes
        let state = PoolState {
            n: 3,
            d: 2,
            s: vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5],
            alpha: vec![0.5, 0.3, 0.2],
            w: vec![2.0, -2.0, -1.0, 1.0],
            b: vec![0.0, 0.0],
            k: 2,
        };
        // zero the middle token: weights renormalize to 0.5/0.7, 0.2/0.7
        let p = state.prob_with_span_zeroed(Some((1, 1)), true, 0);
        let a0 = 0.5 / 0.7;
        let a2 = 0.2 / 0.7;
        let pooled = [a0 * 1.0 + a2 * 0.5, a0 * 0.0 + a2 * 0.5];
        let logit0 = pooled[0] * 2.0 + pooled[1] * -1.0;
        let logit1 = pooled[0] * -2.0 + pooled[1] * 1.0;
        let expect = (logit0).exp() / ((logit0).exp() + (logit1).exp());
        assert!((p - expect).abs() < 1e-12);
        // raw mode keeps unnormalized remainder
        let p_raw = state.prob_with_span_zeroed(Some((1, 1)), false, 0);
        assert!(p_raw != p);
    }

    fn single_marker_fixture() -> (crate::data::Corpus, TeacherModel<f32>) {
        // keep only sentences carrying exactly one style marker
        let corpus = gen_synthetic_corpus(2, 400, 31).unwrap();
        let filtered: Vec<_> = corpus
            .sentences
            .iter()
            .filter(|s| {
                s.ids
                    .iter()
                    .filter(|&&id| crate::data::is_style_marker(corpus.vocab.token(id)).is_some())
                    .count()
                    == 1
            })
            .cloned()
            .collect();
        let single = crate::data::Corpus {
            sentences: filtered,
            styles: 2,
            vocab: corpus.vocab.clone(),
        };
        let splits = single.split(&[0.9, 0.1]);
        let cfg = TeacherConfig {
            stack: StackConfig {
                layers: 2,
                d_model: 16,
                d_ff: 32,
                heads: 2,
                dropout: 0.0,
            },
            vocab_size: single.vocab.size(),
            max_len: 16,
            styles: 2,
        };
        let opts = TeacherTrainOptions {
            max_steps: 800,
            batch_size: 32,
            eval_every: 100,
            seed: 7,
            early_stop_acc: None,
            ..Default::default()
        };
        let (teacher, report) = train_teacher::<f32>(&splits[0], &splits[1], cfg, &opts).unwrap();
        assert!(report.best_val_accuracy >= 0.99, "fixture teacher too weak: {}", report.best_val_accuracy);
        (single, teacher)
    }

    #[test]
    fn salience_selects_exactly_the_marker_on_probe() {
        // classifier built so only the marker token carries signal
        let m0 = [10usize, 11];
        let m1 = [12usize, 13];
        let probe: TeacherModel<f32> = TeacherModel::marker_probe(20, 16, &m0, &m1, 24.0);
        let vocab = crate::data::Vocabulary::from_tokens(
            (0..20).map(|i| format!("t{i}")).collect(),
        );
        let cfg = SalienceConfig::default();
        for (marker, style) in [(10usize, 0usize), (11, 0), (12, 1), (13, 1)] {
            for pos in 0..5 {
                let mut ids = vec![4, 5, 6, 7, 8];
                ids[pos] = marker;
                let result = probe.select_stylistic_tokens(&ids, style, &cfg, &vocab);
                assert!(!result.low_confidence);
                assert_eq!(result.spans.len(), 1, "ids {ids:?} spans {:?}", result.spans);
                assert_eq!((result.spans[0].start, result.spans[0].len), (pos, 1));
                assert!(result.spans[0].drop > cfg.beta);
            }
        }
    }

    #[test]
    fn salience_on_trained_teacher_is_consistent() {
        // a trained desk-scale teacher may pool style evidence at aggregation
        // sites rather than the marker itself, so exact marker identity is a
        // probe-classifier guarantee (see the probe test). Here: confident
        // sentences yield spans, every reported drop clears β, and marker
        // coverage beats a one-token random baseline by a wide margin.
        let (corpus, teacher) = single_marker_fixture();
        let cfg = SalienceConfig::default();
        let mut confident = 0;
        let mut with_spans = 0;
        let mut covered = 0;
        for sent in corpus.sentences.iter().rev().take(60) {
            let marker_pos = sent
                .ids
                .iter()
                .position(|&id| crate::data::is_style_marker(corpus.vocab.token(id)).is_some())
                .unwrap();
            let result = teacher.select_stylistic_tokens(&sent.ids, sent.style, &cfg, &corpus.vocab);
            if result.low_confidence {
                continue;
            }
            confident += 1;
            if !result.spans.is_empty() {
                with_spans += 1;
            }
            for span in &result.spans {
                assert!(span.drop > cfg.beta, "reported span below threshold: {span:?}");
                assert!(span.start + span.len <= sent.ids.len());
            }
            if result
                .spans
                .iter()
                .any(|sp| sp.start <= marker_pos && marker_pos < sp.start + sp.len)
            {
                covered += 1;
            }
        }
        assert!(confident >= 30, "too few confident sentences ({confident})");
        assert!(with_spans * 10 >= confident * 9, "spans found in only {with_spans}/{confident}");
        assert!(covered * 10 >= confident * 4, "marker covered in only {covered}/{confident}");
    }

    #[test]
    fn salience_empty_for_neutral_sentence() {
        let probe: TeacherModel<f32> = TeacherModel::marker_probe(20, 16, &[10], &[12], 24.0);
        let vocab = crate::data::Vocabulary::from_tokens((0..20).map(|i| format!("t{i}")).collect());
        let cfg = SalienceConfig::default();
        // no marker anywhere: every span leaves the (zero) pooled vector alone
        let result = probe.select_stylistic_tokens(&[4, 5, 6, 7], 0, &cfg, &vocab);
        assert!(result.spans.is_empty());
        assert!((result.original_prob - 0.5).abs() < 1e-6); // contentless sentence
    }

    #[test]
    fn training_reduces_loss_and_is_reproducible() {
        let corpus = gen_synthetic_corpus(2, 60, 17).unwrap();
        let splits = corpus.split(&[0.8, 0.2]);
        let cfg = tiny_cfg(corpus.vocab.size(), 2);
        let opts = TeacherTrainOptions {
            max_steps: 60,
            batch_size: 16,
            eval_every: 20,
            seed: 5,
            early_stop_acc: None,
            ..Default::default()
        };
        let (_, r1) = train_teacher::<f32>(&splits[0], &splits[1], cfg, &opts).unwrap();
        let (_, r2) = train_teacher::<f32>(&splits[0], &splits[1], cfg, &opts).unwrap();
        assert!(r1.final_loss < r1.initial_loss);
        assert_eq!(r1.final_loss, r2.final_loss);
        assert_eq!(r1.best_val_accuracy, r2.best_val_accuracy);
    }
}
