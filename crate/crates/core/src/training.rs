//! Loss channels, the WGAN objective with gradient penalty, the interleaved
//! reconstruction / critic / adversarial schedule, gain-gap stability
//! logging, and training checkpoints.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::critics::{StyleCriticConfig, StyleDiscriminator, TextCriticConfig, TextDiscriminator};
use crate::data::{noise_sequence, BatchStream, Corpus, EOS};
use crate::metrics;
use crate::model::{ModelError, MssrNet, MssrNetConfig, SoftDecode};
use crate::nn::Ctx;
use crate::params::{AdamConfig, OptimError, Role};
use crate::teacher::TeacherModel;
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("teacher/corpus mismatch: {0}")]
    TeacherMismatch(String),
    #[error("non-finite loss in {phase} at iteration {iteration}: {value}")]
    NonFiniteLoss {
        phase: &'static str,
        iteration: usize,
        value: f64,
    },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
}

/// Algorithm-style loop constants. The inner counts default to the 5/1/5
/// interleaving; all counts must stay ≥ 1.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    /// outer iterations N
    pub iterations: usize,
    pub n_rc: usize,
    pub n_dr: usize,
    pub n_adr: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// per-token `<unk>` replacement probability on the reconstruction branch
    pub noise_p: f64,
    /// 0 disables periodic checkpoints
    pub checkpoint_every: usize,
    pub validate_every: usize,
    /// validation slice size (sentences)
    pub validation_slice: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            iterations: 100,
            n_rc: 5,
            n_dr: 1,
            n_adr: 5,
            batch_size: 16,
            seed: 123,
            noise_p: 0.1,
            checkpoint_every: 0,
            validate_every: 50,
            validation_slice: 64,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) {
        assert!(self.iterations >= 1);
        assert!(self.n_rc >= 1 && self.n_dr >= 1 && self.n_adr >= 1, "inner counts must be ≥ 1");
        assert!(self.batch_size >= 1);
        assert!((0.0..=1.0).contains(&self.noise_p));
    }
}

/// Combination weights for the named loss channels plus the gradient-penalty
/// coefficient.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cst: f64,
    pub teach: f64,
    pub s_pol: f64,
    pub t_pol: f64,
    pub adv: f64,
    pub gp: f64,
    /// weight of the style-polarity term on sampled targets during
    /// adversarial steps (0 keeps the teacher's supervision confined to the
    /// reconstruction phase)
    #[serde(default)]
    pub s_pol_adv: f64,
    /// extra multiplier on the text critic's generator feedback; the relative
    /// weighting of the two adversarial channels is unstated in the source
    /// material, and the text channel dominates instability at desk scale
    #[serde(default = "default_adv_text_scale")]
    pub adv_text_scale: f64,
}

fn default_adv_text_scale() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cst: 1.0,
            teach: 1.0,
            s_pol: 1.0,
            t_pol: 1.0,
            adv: 1.0,
            gp: 10.0,
            s_pol_adv: 0.0,
            adv_text_scale: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        for (name, w) in [
            ("cst", self.cst),
            ("teach", self.teach),
            ("s_pol", self.s_pol),
            ("t_pol", self.t_pol),
            ("adv", self.adv),
            ("gp", self.gp),
            ("s_pol_adv", self.s_pol_adv),
            ("adv_text_scale", self.adv_text_scale),
        ] {
            assert!(w >= 0.0, "negative loss weight {name}");
        }
    }
}

// ---- loss primitives ----

/// Token-mean negative log-likelihood of `targets` under distribution rows.
pub fn nll_mean<F: Real>(tape: &mut Tape<F>, dists: Var, targets: &[usize]) -> Var {
    let (m, t_dim) = tape.shape(dists);
    assert_eq!(m, targets.len(), "one distribution row per target token");
    let mut onehot = vec![F::ZERO; m * t_dim];
    for (i, &t) in targets.iter().enumerate() {
        assert!(t < t_dim);
        onehot[i * t_dim + t] = F::ONE;
    }
    let oh = tape.constant(m, t_dim, onehot);
    let picked = tape.mul(dists, oh);
    let p = tape.sum_cols(picked); // m×1
    let lp = tape.ln(p);
    let s = tape.sum_all(lp);
    let neg = tape.neg(s);
    tape.scale(neg, 1.0 / m as f64)
}

/// Mean squared error over all entries.
pub fn mse<F: Real>(tape: &mut Tape<F>, a: Var, b: Var) -> Var {
    assert_eq!(tape.shape(a), tape.shape(b), "MSE shape mismatch");
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    tape.mean_all(sq)
}

/// −ln p\[target\] for a probability row.
pub fn cross_entropy<F: Real>(tape: &mut Tape<F>, probs: Var, target: usize) -> Var {
    let p = tape.slice_cols(probs, target, 1);
    let lp = tape.ln(p);
    tape.neg(lp)
}

/// (‖∇_x score‖₂ − 1)² for one example; `interp` must be a gradient-tracked
/// leaf and `score` a scalar depending on it.
pub fn gradient_penalty<F: Real>(tape: &mut Tape<F>, score: Var, interp: Var) -> Var {
    let grads = tape.backward(score);
    let g = grads.get(interp).expect("critic score must depend on its input");
    let sq = tape.mul(g, g);
    let total = tape.sum_all(sq);
    let safe = tape.add_scalar(total, 1e-12);
    let norm = tape.pow_const(safe, 0.5);
    let centered = tape.add_scalar(norm, -1.0);
    tape.mul(centered, centered)
}

/// Empirical WGAN losses: critic minimizes mean(fake) − mean(real) + λ·GP,
/// the generator minimizes −mean(fake).
pub fn wgan_losses<F: Real>(
    tape: &mut Tape<F>,
    real_scores: &[Var],
    fake_scores: &[Var],
    penalties: &[Var],
    lambda_gp: f64,
) -> (Var, Var) {
    assert!(!real_scores.is_empty() && !fake_scores.is_empty());
    let real = stack_scalars(tape, real_scores);
    let fake = stack_scalars(tape, fake_scores);
    let real_mean = tape.mean_all(real);
    let fake_mean = tape.mean_all(fake);
    let diff = tape.sub(fake_mean, real_mean);
    let critic = if penalties.is_empty() || lambda_gp == 0.0 {
        diff
    } else {
        let gp = stack_scalars(tape, penalties);
        let gp_mean = tape.mean_all(gp);
        let weighted = tape.scale(gp_mean, lambda_gp);
        tape.add(diff, weighted)
    };
    let generator = tape.neg(fake_mean);
    (critic, generator)
}

fn stack_scalars<F: Real>(tape: &mut Tape<F>, vars: &[Var]) -> Var {
    if vars.len() == 1 {
        vars[0]
    } else {
        tape.concat_rows(vars)
    }
}

// ---- stability logging ----

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticName {
    Style,
    Text,
}

/// Mean critic score on real vs generated batches, recorded at every critic
/// step; the volatility of `gap` proxies adversarial training stability.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GainGapRecord {
    pub iteration: usize,
    pub critic: CriticName,
    pub real_gain: f64,
    pub fake_gain: f64,
    pub gap: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct RollingStat {
    pub index: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Rolling mean/population-variance over trailing `window` values.
pub fn rolling_stats(values: &[f64], window: usize) -> Vec<RollingStat> {
    assert!(window >= 1);
    values
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let start = (i + 1).saturating_sub(window);
            let slice = &values[start..=i];
            let mean = slice.iter().sum::<f64>() / slice.len() as f64;
            let variance = slice.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / slice.len() as f64;
            RollingStat {
                index: i,
                mean,
                variance,
            }
        })
        .collect()
}

/// Per-critic rolling gap statistics.
pub fn gain_gap_series(records: &[GainGapRecord], window: usize) -> BTreeMap<CriticName, Vec<RollingStat>> {
    let mut out = BTreeMap::new();
    for critic in [CriticName::Style, CriticName::Text] {
        let gaps: Vec<f64> = records.iter().filter(|r| r.critic == critic).map(|r| r.gap).collect();
        if !gaps.is_empty() {
            out.insert(critic, rolling_stats(&gaps, window));
        }
    }
    out
}

impl Ord for CriticName {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (*self as u8).cmp(&(*other as u8))
    }
}

impl PartialOrd for CriticName {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for GainGapRecord {}
impl PartialEq for GainGapRecord {
    fn eq(&self, other: &Self) -> bool {
        self.iteration == other.iteration && self.critic == other.critic
    }
}

/// Drops the terminating `<eos>` distribution row so critics and the teacher
/// see token-like rows (real sentences carry no end symbol).
fn strip_eos_row<F: Real>(ctx: &mut Ctx<F>, soft: &SoftDecode) -> Var {
    let (m, _) = ctx.tape.shape(soft.dists);
    if soft.stopped_by_eos && m > 1 {
        ctx.tape.slice_rows(soft.dists, 0, m - 1)
    } else {
        soft.dists
    }
}

// ---- the training loop ----

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct PhaseCounters {
    pub reconstruction_batches: usize,
    pub critic_batches: usize,
    pub adversarial_batches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub phase: String,
    pub channels: BTreeMap<String, f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: usize,
    pub accuracy: f64,
    pub self_bleu: f64,
    /// 0.5·accuracy + 0.5·self_bleu/100 — the checkpoint-selection criterion
    pub score: f64,
}

pub struct TrainSetup<'a, F: Real> {
    pub train: &'a Corpus,
    pub validation: &'a Corpus,
    pub teacher: &'a TeacherModel<F>,
    pub model_cfg: MssrNetConfig,
    pub schedule: TrainSchedule,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// receives `metrics.jsonl` and `step-<n>.ckpt` files when set
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutcome<F: Real> {
    pub model: MssrNet<F>,
    pub style_critic: StyleDiscriminator<F>,
    pub text_critic: TextDiscriminator<F>,
    pub counters: PhaseCounters,
    pub gain_gaps: Vec<GainGapRecord>,
    pub loss_log: Vec<LossRecord>,
    pub validations: Vec<ValidationRecord>,
    pub best_validation: Option<ValidationRecord>,
    pub iterations_run: usize,
}

/// Mutable training state; checkpointing serializes everything needed to
/// resume bit-exactly at an iteration boundary.
pub struct Trainer<'a, F: Real> {
    pub model: MssrNet<F>,
    pub style_critic: StyleDiscriminator<F>,
    pub text_critic: TextDiscriminator<F>,
    teacher: &'a TeacherModel<F>,
    schedule: TrainSchedule,
    weights: LossWeights,
    adam: AdamConfig,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub counters: PhaseCounters,
    pub stream_epoch: u64,
    pub stream_pos: usize,
}

const MODEL_ROLES: [Role; 2] = [Role::TransferModel, Role::StyleGenerator];

impl<'a, F: Real> Trainer<'a, F> {
    pub fn new(setup: &TrainSetup<'a, F>) -> Result<Self, TrainError> {
        setup.schedule.validate();
        setup.weights.validate();
        setup.model_cfg.validate();
        let teacher = setup.teacher;
        if teacher.cfg.vocab_size != setup.model_cfg.vocab_size {
            return Err(TrainError::TeacherMismatch(format!(
                "teacher vocab {} vs model vocab {}",
                teacher.cfg.vocab_size, setup.model_cfg.vocab_size
            )));
        }
        if teacher.cfg.styles != setup.model_cfg.styles {
            return Err(TrainError::TeacherMismatch(format!(
                "teacher styles {} vs model styles {}",
                teacher.cfg.styles, setup.model_cfg.styles
            )));
        }
        if teacher.cfg.stack.d_model != setup.model_cfg.d_style {
            return Err(TrainError::TeacherMismatch(format!(
                "teacher dim {} must equal d_style {} for the MSE target",
                teacher.cfg.stack.d_model, setup.model_cfg.d_style
            )));
        }
        let seed = setup.schedule.seed;
        let model = MssrNet::new(setup.model_cfg, seed);
        let style_critic = StyleDiscriminator::new(
            StyleCriticConfig::new(setup.model_cfg.d_style, setup.model_cfg.styles, setup.model_cfg.heads),
            seed.wrapping_add(101),
        );
        let text_critic = TextDiscriminator::new(
            TextCriticConfig::new(
                setup.model_cfg.d_model,
                setup.model_cfg.styles,
                setup.model_cfg.heads,
                setup.model_cfg.max_len + setup.model_cfg.decode_margin + 1,
            ),
            seed.wrapping_add(202),
        );
        Ok(Trainer {
            model,
            style_critic,
            text_critic,
            teacher,
            schedule: setup.schedule,
            weights: setup.weights,
            adam: setup.adam,
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(303)),
            iteration: 0,
            counters: PhaseCounters::default(),
            stream_epoch: 0,
            stream_pos: 0,
        })
    }

    /// Rebuilds a trainer from a loaded checkpoint; the teacher is supplied
    /// by the caller and sanity-checked against the recorded corpus shape.
    pub fn resume(
        loaded: crate::checkpoint::LoadedTraining<F>,
        setup: &TrainSetup<'a, F>,
    ) -> Result<Self, TrainError> {
        if setup.teacher.cfg.vocab_size != loaded.teacher_vocab
            || setup.teacher.cfg.styles != loaded.teacher_styles
        {
            return Err(TrainError::TeacherMismatch(format!(
                "checkpoint was trained against a teacher with vocab {} / {} styles",
                loaded.teacher_vocab, loaded.teacher_styles
            )));
        }
        // the caller may extend the run; everything else comes from the checkpoint
        let schedule = TrainSchedule {
            iterations: setup.schedule.iterations,
            ..loaded.schedule
        };
        Ok(Trainer {
            model: loaded.model,
            style_critic: loaded.style_critic,
            text_critic: loaded.text_critic,
            teacher: setup.teacher,
            schedule,
            weights: loaded.weights,
            adam: loaded.adam,
            rng: loaded.rng,
            iteration: loaded.iteration,
            counters: loaded.counters,
            stream_epoch: loaded.stream_epoch,
            stream_pos: loaded.stream_pos,
        })
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn adam(&self) -> &AdamConfig {
        &self.adam
    }

    fn sample_other_style(&mut self, own: usize, styles: usize) -> usize {
        let offset = self.rng.random_range(1..styles);
        (own + offset) % styles
    }

    fn reconstruction_batch(
        &mut self,
        stream: &mut BatchStream,
        log: &mut Vec<LossRecord>,
    ) -> Result<(), TrainError> {
        let batch = stream.next_batch();
        let scale = 1.0 / batch.sentences.len() as f64;
        let w = self.weights;
        self.model.store.zero_grads();
        let mut channels: BTreeMap<String, f64> = BTreeMap::new();
        for sent in &batch.sentences {
            let noised = noise_sequence(sent, self.schedule.noise_p, &mut self.rng);
            let mut tape: Tape<F> = Tape::new();

            // student forward (live parameters, dropout on)
            let (style_repr, dists) = {
                let mut ctx = Ctx::train(&mut tape, &mut self.rng, self.model.cfg.dropout);
                let style_repr = self.model.generate_style(&mut ctx, &noised.ids, sent.style)?;
                let content = self.model.encode_content(&mut ctx, &noised.ids)?;
                let fused = self.model.fuse(&mut ctx, content, style_repr)?;
                let dists = self.model.decode_teacher_forced(&mut ctx, fused, &sent.ids)?;
                (style_repr, dists)
            };

            // Eq. 11: NLL of the clean sentence plus <eos>
            let mut targets = sent.ids.clone();
            targets.push(EOS);
            let l_cst = nll_mean(&mut tape, dists, &targets);

            // teacher-side terms (frozen teacher parameters)
            let (l_teach, l_s_pol, l_t_pol) = {
                let mut ctx = Ctx::frozen(&mut tape);
                let s_teacher = self.teacher.encode(&mut ctx, &sent.ids);
                let l_teach = mse(ctx.tape, style_repr, s_teacher);
                let (probs, _) = self.teacher.classify_repr(&mut ctx, style_repr);
                let l_s_pol = cross_entropy(ctx.tape, probs, sent.style);
                // generated text rows without the <eos> step
                let (m, _) = ctx.tape.shape(dists);
                let content_rows = ctx.tape.slice_rows(dists, 0, m - 1);
                let s_soft = self.teacher.encode_soft(&mut ctx, content_rows);
                let (probs_t, _) = self.teacher.classify_repr(&mut ctx, s_soft);
                let l_t_pol = cross_entropy(ctx.tape, probs_t, sent.style);
                (l_teach, l_s_pol, l_t_pol)
            };

            let total = {
                let t = &mut tape;
                let mut acc = t.scale(l_cst, w.cst);
                for (term, weight) in [(l_teach, w.teach), (l_s_pol, w.s_pol), (l_t_pol, w.t_pol)] {
                    let scaled = t.scale(term, weight);
                    acc = t.add(acc, scaled);
                }
                t.scale(acc, scale)
            };
            let grads = tape.backward(total);
            self.model.store.accumulate_grads(&tape, &grads, 1.0);

            for (name, var) in [
                ("cst", l_cst),
                ("teach", l_teach),
                ("s_pol", l_s_pol),
                ("t_pol", l_t_pol),
                ("total", total),
            ] {
                let v = tape.scalar_value(var).to_f64() * if name == "total" { 1.0 } else { scale };
                *channels.entry(name.to_string()).or_insert(0.0) += v;
            }
        }
        let total = channels.get("total").copied().unwrap_or(0.0);
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "reconstruction",
                iteration: self.iteration,
                value: total,
            });
        }
        self.model.store.adam_step(&MODEL_ROLES, &self.adam)?;
        self.counters.reconstruction_batches += 1;
        log.push(LossRecord {
            iteration: self.iteration,
            phase: "reconstruction".into(),
            channels,
        });
        Ok(())
    }

    fn critic_batch(
        &mut self,
        stream: &mut BatchStream,
        log: &mut Vec<LossRecord>,
        gaps: &mut Vec<GainGapRecord>,
    ) -> Result<(), TrainError> {
        let batch = stream.next_batch();
        let b = batch.sentences.len();
        let scale = 1.0 / b as f64;
        let lambda_gp = self.weights.gp;
        let styles = self.model.cfg.styles;
        // fakes must cover the whole min-max game, including the flip targets
        // the adversarial phase samples; otherwise the generator probes the
        // critic in a region it never learned
        let fake_targets: Vec<usize> = batch
            .sentences
            .iter()
            .map(|_| self.rng.random_range(0..styles))
            .collect();

        // --- style critic ---
        self.style_critic.store.zero_grads();
        let mut style_real_sum = 0.0;
        let mut style_fake_sum = 0.0;
        let mut style_gp_sum = 0.0;
        let mut style_loss_sum = 0.0;
        for (sent, &fake_target) in batch.sentences.iter().zip(fake_targets.iter()) {
            let eps = self.rng.random::<f64>();
            let mut tape: Tape<F> = Tape::new();
            // real: teacher encoding scored at the sentence's own style;
            // fake: generator output scored at its intended target
            let (real_vals, fake_vals, n, d) = {
                let mut ctx = Ctx::frozen(&mut tape);
                let real = self.teacher.encode(&mut ctx, &sent.ids);
                let fake = self.model.generate_style(&mut ctx, &sent.ids, fake_target)?;
                let (n, d) = ctx.tape.shape(real);
                (
                    ctx.tape.values(real).to_vec(),
                    ctx.tape.values(fake).to_vec(),
                    n,
                    d,
                )
            };
            let real = tape.leaf(n, d, real_vals.clone(), false);
            let fake = tape.leaf(n, d, fake_vals.clone(), false);
            let interp_vals: Vec<F> = real_vals
                .iter()
                .zip(fake_vals.iter())
                .map(|(&r, &f)| {
                    let e = F::from_f64(eps);
                    e * r + (F::ONE - e) * f
                })
                .collect();
            let interp = tape.leaf(n, d, interp_vals, true);
            let (loss, real_s, fake_s, gp_v) = {
                let mut ctx = Ctx::eval(&mut tape);
                let sr = self.style_critic.score(&mut ctx, real);
                let sf = self.style_critic.score(&mut ctx, fake);
                let si = self.style_critic.score(&mut ctx, interp);
                let t = &mut *ctx.tape;
                let sr_s = t.slice_cols(sr, sent.style, 1);
                let sf_s = t.slice_cols(sf, fake_target, 1);
                let si_s = t.slice_cols(si, fake_target, 1);
                let gp = gradient_penalty(t, si_s, interp);
                let diff = t.sub(sf_s, sr_s);
                let gp_w = t.scale(gp, lambda_gp);
                let sum = t.add(diff, gp_w);
                let loss = t.scale(sum, scale);
                (
                    loss,
                    t.scalar_value(sr_s).to_f64(),
                    t.scalar_value(sf_s).to_f64(),
                    t.scalar_value(gp).to_f64(),
                )
            };
            let grads = tape.backward(loss);
            self.style_critic.store.accumulate_grads(&tape, &grads, 1.0);
            style_real_sum += real_s;
            style_fake_sum += fake_s;
            style_gp_sum += gp_v;
            style_loss_sum += tape.scalar_value(loss).to_f64();
        }
        if !style_loss_sum.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "style_critic",
                iteration: self.iteration,
                value: style_loss_sum,
            });
        }
        self.style_critic.store.adam_step(&[Role::StyleCritic], &self.adam)?;

        // --- text critic ---
        self.text_critic.store.zero_grads();
        let mut text_real_sum = 0.0;
        let mut text_fake_sum = 0.0;
        let mut text_gp_sum = 0.0;
        let mut text_loss_sum = 0.0;
        for (sent, &fake_target) in batch.sentences.iter().zip(fake_targets.iter()) {
            let eps = self.rng.random::<f64>();
            let mut tape: Tape<F> = Tape::new();
            let (real_vals, fake_vals, d) = {
                let mut ctx = Ctx::frozen(&mut tape);
                let real = self.model.lookup_embeddings(&mut ctx, &sent.ids);
                let style_repr = self.model.generate_style(&mut ctx, &sent.ids, fake_target)?;
                let content = self.model.encode_content(&mut ctx, &sent.ids)?;
                let fused = self.model.fuse(&mut ctx, content, style_repr)?;
                let max_len = sent.len() + self.model.cfg.decode_margin;
                let soft = self.model.decode_soft(&mut ctx, fused, max_len, false)?;
                let rows = strip_eos_row(&mut ctx, &soft);
                let fake = self.model.soft_embed(&mut ctx, rows)?;
                let (_, d) = ctx.tape.shape(real);
                (ctx.tape.values(real).to_vec(), ctx.tape.values(fake).to_vec(), d)
            };
            let n_real = real_vals.len() / d;
            let n_fake = fake_vals.len() / d;
            let real = tape.leaf(n_real, d, real_vals.clone(), false);
            let fake = tape.leaf(n_fake, d, fake_vals.clone(), false);
            // interpolate over the common prefix
            let n_common = n_real.min(n_fake);
            let interp_vals: Vec<F> = (0..n_common * d)
                .map(|i| {
                    let e = F::from_f64(eps);
                    e * real_vals[i] + (F::ONE - e) * fake_vals[i]
                })
                .collect();
            let interp = tape.leaf(n_common, d, interp_vals, true);
            let (loss, real_s, fake_s, gp_v) = {
                let mut ctx = Ctx::eval(&mut tape);
                let sr = self.text_critic.score(&mut ctx, real);
                let sf = self.text_critic.score(&mut ctx, fake);
                let si = self.text_critic.score(&mut ctx, interp);
                let t = &mut *ctx.tape;
                let sr_s = t.slice_cols(sr, sent.style, 1);
                let sf_s = t.slice_cols(sf, fake_target, 1);
                let si_s = t.slice_cols(si, fake_target, 1);
                let gp = gradient_penalty(t, si_s, interp);
                let diff = t.sub(sf_s, sr_s);
                let gp_w = t.scale(gp, lambda_gp);
                let sum = t.add(diff, gp_w);
                let loss = t.scale(sum, scale);
                (
                    loss,
                    t.scalar_value(sr_s).to_f64(),
                    t.scalar_value(sf_s).to_f64(),
                    t.scalar_value(gp).to_f64(),
                )
            };
            let grads = tape.backward(loss);
            self.text_critic.store.accumulate_grads(&tape, &grads, 1.0);
            text_real_sum += real_s;
            text_fake_sum += fake_s;
            text_gp_sum += gp_v;
            text_loss_sum += tape.scalar_value(loss).to_f64();
        }
        if !text_loss_sum.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "text_critic",
                iteration: self.iteration,
                value: text_loss_sum,
            });
        }
        self.text_critic.store.adam_step(&[Role::TextCritic], &self.adam)?;

        self.counters.critic_batches += 1;
        let scale_b = 1.0 / b as f64;
        gaps.push(GainGapRecord {
            iteration: self.iteration,
            critic: CriticName::Style,
            real_gain: style_real_sum * scale_b,
            fake_gain: style_fake_sum * scale_b,
            gap: (style_real_sum - style_fake_sum) * scale_b,
        });
        gaps.push(GainGapRecord {
            iteration: self.iteration,
            critic: CriticName::Text,
            real_gain: text_real_sum * scale_b,
            fake_gain: text_fake_sum * scale_b,
            gap: (text_real_sum - text_fake_sum) * scale_b,
        });
        let mut channels = BTreeMap::new();
        channels.insert("style_critic".to_string(), style_loss_sum);
        channels.insert("text_critic".to_string(), text_loss_sum);
        channels.insert("style_gp".to_string(), style_gp_sum * scale_b);
        channels.insert("text_gp".to_string(), text_gp_sum * scale_b);
        log.push(LossRecord {
            iteration: self.iteration,
            phase: "critic".into(),
            channels,
        });
        Ok(())
    }

    fn adversarial_batch(
        &mut self,
        stream: &mut BatchStream,
        log: &mut Vec<LossRecord>,
    ) -> Result<(), TrainError> {
        let batch = stream.next_batch();
        let scale = 1.0 / batch.sentences.len() as f64;
        let w = self.weights;
        let styles = self.model.cfg.styles;
        self.model.store.zero_grads();
        let mut channels: BTreeMap<String, f64> = BTreeMap::new();
        for sent in &batch.sentences {
            let target = self.sample_other_style(sent.style, styles);
            let mut tape: Tape<F> = Tape::new();

            let (style_repr, soft_rows) = {
                let mut ctx = Ctx::train(&mut tape, &mut self.rng, self.model.cfg.dropout);
                let style_repr = self.model.generate_style(&mut ctx, &sent.ids, target)?;
                let content = self.model.encode_content(&mut ctx, &sent.ids)?;
                let fused = self.model.fuse(&mut ctx, content, style_repr)?;
                let max_len = sent.len() + self.model.cfg.decode_margin;
                let soft = self.model.decode_soft(&mut ctx, fused, max_len, false)?;
                let rows = strip_eos_row(&mut ctx, &soft);
                (style_repr, rows)
            };

            // soft embedding binds the live model W_e (gradient flows into θ)
            let soft_emb = {
                let mut ctx = Ctx::eval(&mut tape);
                self.model.soft_embed(&mut ctx, soft_rows)?
            };
            // critic feedback (critic parameters frozen)
            let (adv_style, adv_text) = {
                let mut ctx = Ctx::frozen(&mut tape);
                let s_scores = self.style_critic.score(&mut ctx, style_repr);
                let t_scores = self.text_critic.score(&mut ctx, soft_emb);
                let t = &mut *ctx.tape;
                let s_sel = t.slice_cols(s_scores, target, 1);
                let t_sel = t.slice_cols(t_scores, target, 1);
                (t.neg(s_sel), t.neg(t_sel))
            };

            // Eq. 15 with the sampled target style (frozen teacher)
            let l_t_pol = {
                let mut ctx = Ctx::frozen(&mut tape);
                let s_soft = self.teacher.encode_soft(&mut ctx, soft_rows);
                let (probs, _) = self.teacher.classify_repr(&mut ctx, s_soft);
                cross_entropy(ctx.tape, probs, target)
            };
            // optional style-polarity anchor on the sampled target
            let l_s_pol = if w.s_pol_adv > 0.0 {
                let mut ctx = Ctx::frozen(&mut tape);
                let (probs, _) = self.teacher.classify_repr(&mut ctx, style_repr);
                Some(cross_entropy(ctx.tape, probs, target))
            } else {
                None
            };

            let total = {
                let t = &mut tape;
                let adv_text_scaled = t.scale(adv_text, w.adv_text_scale);
                let adv = t.add(adv_style, adv_text_scaled);
                let adv_w = t.scale(adv, w.adv);
                let pol_w = t.scale(l_t_pol, w.t_pol);
                let mut sum = t.add(adv_w, pol_w);
                if let Some(sp) = l_s_pol {
                    let sp_w = t.scale(sp, w.s_pol_adv);
                    sum = t.add(sum, sp_w);
                }
                t.scale(sum, scale)
            };
            let grads = tape.backward(total);
            self.model.store.accumulate_grads(&tape, &grads, 1.0);

            for (name, var) in [
                ("adv_style", adv_style),
                ("adv_text", adv_text),
                ("t_pol", l_t_pol),
                ("total", total),
            ] {
                let v = tape.scalar_value(var).to_f64() * if name == "total" { 1.0 } else { scale };
                *channels.entry(name.to_string()).or_insert(0.0) += v;
            }
        }
        let total = channels.get("total").copied().unwrap_or(0.0);
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                phase: "adversarial",
                iteration: self.iteration,
                value: total,
            });
        }
        self.model.store.adam_step(&MODEL_ROLES, &self.adam)?;
        self.counters.adversarial_batches += 1;
        log.push(LossRecord {
            iteration: self.iteration,
            phase: "adversarial".into(),
            channels,
        });
        Ok(())
    }

    /// Teacher-judged accuracy and self-BLEU over a fixed validation slice.
    pub fn validate(&self, validation: &Corpus) -> Result<ValidationRecord, TrainError> {
        let slice = validation
            .sentences
            .iter()
            .take(self.schedule.validation_slice.max(1))
            .collect::<Vec<_>>();
        let styles = self.model.cfg.styles;
        let mut outputs = Vec::with_capacity(slice.len());
        let mut pairs = Vec::with_capacity(slice.len());
        for sent in &slice {
            let target = (sent.style + 1) % styles;
            let out = self.model.transfer(&sent.ids, target)?;
            outputs.push((out.clone(), target));
            pairs.push((out, sent.ids.clone()));
        }
        let accuracy = metrics::transfer_accuracy(&outputs, self.teacher);
        let self_bleu = metrics::self_bleu(&validation.vocab, &pairs)?;
        Ok(ValidationRecord {
            iteration: self.iteration,
            accuracy,
            self_bleu,
            score: 0.5 * accuracy + 0.5 * self_bleu / 100.0,
        })
    }
}

/// Runs the full interleaved schedule. Per outer iteration: `n_rc`
/// reconstruction batches, then `n_dr` critic batches, then `n_adr`
/// adversarial batches with sampled targets ≠ source. When the adversarial
/// weight is zero the critic and adversarial phases contribute nothing to
/// the model and are skipped entirely.
pub fn run_training<F: Real>(setup: TrainSetup<F>) -> Result<TrainOutcome<F>, TrainError> {
    let trainer = Trainer::new(&setup)?;
    run_training_loop(trainer, &setup)
}

/// Continues a checkpointed run to the schedule's end.
pub fn resume_training<F: Real>(
    loaded: crate::checkpoint::LoadedTraining<F>,
    setup: TrainSetup<F>,
) -> Result<TrainOutcome<F>, TrainError> {
    let trainer = Trainer::resume(loaded, &setup)?;
    run_training_loop(trainer, &setup)
}

pub fn run_training_loop<'a, F: Real>(
    mut trainer: Trainer<'a, F>,
    setup: &TrainSetup<'a, F>,
) -> Result<TrainOutcome<F>, TrainError> {
    let schedule = *trainer.schedule();
    let adversarial_active = trainer.weights().adv > 0.0;
    if !adversarial_active {
        log::info!("adversarial weight is zero: skipping critic and adversarial phases");
    }
    let mut stream = BatchStream::new(setup.train, schedule.batch_size, schedule.seed.wrapping_add(404));
    if trainer.iteration > 0 {
        stream.seek(trainer.stream_epoch, trainer.stream_pos);
    }
    let mut loss_log = Vec::new();
    let mut gaps = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(ValidationRecord, Vec<Vec<F>>)> = None;

    let mut log_file = match &setup.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("metrics.jsonl"))?,
            ))
        }
        None => None,
    };
    let flush_records = |log_file: &mut Option<std::io::BufWriter<std::fs::File>>,
                             loss_log: &[LossRecord],
                             gaps: &[GainGapRecord],
                             from_loss: usize,
                             from_gap: usize|
     -> Result<(), TrainError> {
        if let Some(f) = log_file {
            for rec in &loss_log[from_loss..] {
                writeln!(f, "{}", serde_json::json!({"kind": "loss", "record": rec}))?;
            }
            for rec in &gaps[from_gap..] {
                writeln!(f, "{}", serde_json::json!({"kind": "gain_gap", "record": rec}))?;
            }
        }
        Ok(())
    };

    while trainer.iteration < schedule.iterations {
        trainer.iteration += 1;
        let loss_mark = loss_log.len();
        let gap_mark = gaps.len();
        let phase_result = (|| -> Result<(), TrainError> {
            for _ in 0..schedule.n_rc {
                trainer.reconstruction_batch(&mut stream, &mut loss_log)?;
            }
            if adversarial_active {
                for _ in 0..schedule.n_dr {
                    trainer.critic_batch(&mut stream, &mut loss_log, &mut gaps)?;
                }
                for _ in 0..schedule.n_adr {
                    trainer.adversarial_batch(&mut stream, &mut loss_log)?;
                }
            }
            Ok(())
        })();
        if let Err(err) = phase_result {
            // a non-finite loss aborts, but the state is preserved first
            if matches!(err, TrainError::NonFiniteLoss { .. }) {
                if let Some(dir) = &setup.out_dir {
                    let path = dir.join("abort.ckpt");
                    if let Err(save_err) = crate::checkpoint::save_training_checkpoint(&path, &trainer, setup) {
                        log::error!("could not write abort checkpoint: {save_err}");
                    } else {
                        log::error!("aborting; state saved to {}", path.display());
                    }
                }
            }
            return Err(err);
        }
        trainer.stream_epoch = stream.epoch();
        trainer.stream_pos = stream.pos();
        flush_records(&mut log_file, &loss_log, &gaps, loss_mark, gap_mark)?;

        let at_end = trainer.iteration == schedule.iterations;
        if schedule.validate_every > 0 && (trainer.iteration % schedule.validate_every == 0 || at_end) {
            let record = trainer.validate(setup.validation)?;
            if let Some(f) = &mut log_file {
                writeln!(f, "{}", serde_json::json!({"kind": "validation", "record": record}))?;
            }
            // ties go to the later snapshot: same score with more training wins
            let better = best.as_ref().map(|(b, _)| record.score >= b.score).unwrap_or(true);
            if better {
                best = Some((record, trainer.model.store.snapshot()));
            }
            validations.push(record);
        }
        if schedule.checkpoint_every > 0 && trainer.iteration % schedule.checkpoint_every == 0 {
            if let Some(dir) = &setup.out_dir {
                let path = dir.join(format!("step-{}.ckpt", trainer.iteration));
                crate::checkpoint::save_training_checkpoint(&path, &trainer, setup)?;
            }
        }
    }
    if let Some(f) = &mut log_file {
        f.flush()?;
    }

    // final model = best validation snapshot when validation ran
    let best_validation = best.map(|(record, snapshot)| {
        trainer.model.store.restore(&snapshot);
        record
    });

    Ok(TrainOutcome {
        model: trainer.model,
        style_critic: trainer.style_critic,
        text_critic: trainer.text_critic,
        counters: trainer.counters,
        gain_gaps: gaps,
        loss_log,
        validations,
        best_validation,
        iterations_run: trainer.iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_corpus;
    use crate::teacher::{train_teacher, TeacherConfig, TeacherTrainOptions};
    use approx::assert_relative_eq;

    #[test]
    fn nll_closed_forms() {
        // probability 1 on every gold token ⇒ 0
        let mut tape: Tape<f64> = Tape::new();
        let mut rows = vec![0.0; 2 * 5];
        rows[3] = 1.0;
        rows[5 + 1] = 1.0;
        let dists = tape.constant(2, 5, rows);
        let l = nll_mean(&mut tape, dists, &[3, 1]);
        assert_relative_eq!(tape.scalar_value(l), 0.0, epsilon = 1e-12);

        // uniform rows ⇒ ln T per token
        let mut tape: Tape<f64> = Tape::new();
        let dists = tape.constant(3, 8, vec![1.0 / 8.0; 24]);
        let l = nll_mean(&mut tape, dists, &[0, 4, 7]);
        assert_relative_eq!(tape.scalar_value(l), (8f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn nll_matches_cross_entropy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape: Tape<f64> = Tape::new();
        let t_dim = 6;
        let m = 4;
        let mut rows = Vec::new();
        for _ in 0..m {
            let logits: Vec<f64> = (0..t_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            rows.extend(exps.iter().map(|e| e / z));
        }
        let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..t_dim)).collect();
        let expected: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -rows[i * t_dim + t].ln())
            .sum::<f64>()
            / m as f64;
        let dists = tape.constant(m, t_dim, rows.clone());
        let l = nll_mean(&mut tape, dists, &targets);
        assert_relative_eq!(tape.scalar_value(l), expected, epsilon = 1e-10);
    }

    #[test]
    fn mse_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(2, 3, vec![1.0; 6]);
        let l = mse(&mut tape, a, a);
        assert_eq!(tape.scalar_value(l), 0.0);

        let b = tape.constant(2, 3, vec![3.0; 6]);
        let l = mse(&mut tape, a, b);
        assert_relative_eq!(tape.scalar_value(l), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape: Tape<f64> = Tape::new();
        let uniform = tape.constant(1, 2, vec![0.5, 0.5]);
        let l = cross_entropy(&mut tape, uniform, 1);
        assert_relative_eq!(tape.scalar_value(l), (2f64).ln(), epsilon = 1e-12);

        let certain = tape.constant(1, 3, vec![0.0, 1.0, 0.0]);
        let l = cross_entropy(&mut tape, certain, 1);
        assert_relative_eq!(tape.scalar_value(l), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn wgan_arithmetic_matches_hand_case() {
        let mut tape: Tape<f64> = Tape::new();
        let real = tape.constant(1, 1, vec![2.0]);
        let fake = tape.constant(1, 1, vec![0.5]);
        let (critic, generator) = wgan_losses(&mut tape, &[real], &[fake], &[], 0.0);
        assert_relative_eq!(tape.scalar_value(critic), -1.5, epsilon = 1e-12);
        assert_relative_eq!(tape.scalar_value(generator), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn wgan_equal_distributions_leave_only_gp() {
        let mut tape: Tape<f64> = Tape::new();
        let r1 = tape.constant(1, 1, vec![1.25]);
        let r2 = tape.constant(1, 1, vec![-0.5]);
        let f1 = tape.constant(1, 1, vec![1.25]);
        let f2 = tape.constant(1, 1, vec![-0.5]);
        let gp = tape.constant(1, 1, vec![0.04]);
        let (critic, _) = wgan_losses(&mut tape, &[r1, r2], &[f1, f2], &[gp], 10.0);
        assert_relative_eq!(tape.scalar_value(critic), 0.4, epsilon = 1e-12);
    }

    #[test]
    fn gradient_penalty_of_unit_norm_linear_critic_is_zero() {
        // score = w·x with ‖w‖ = 1 ⇒ ∇x score = w ⇒ penalty = 0
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.constant(3, 1, vec![0.6, 0.0, 0.8]);
        let x = tape.leaf(1, 3, vec![0.2, -0.9, 0.4], true);
        let score = tape.matmul(x, w);
        let gp = gradient_penalty(&mut tape, score, x);
        assert_relative_eq!(tape.scalar_value(gp), 0.0, epsilon = 1e-6);
    }

    #[test]
    fn gradient_penalty_flows_into_critic_parameters() {
        // d/dw of (‖w‖−1)² is nonzero for ‖w‖ ≠ 1
        let mut tape: Tape<f64> = Tape::new();
        let w = tape.leaf(3, 1, vec![1.0, 2.0, 2.0], true);
        let x = tape.leaf(1, 3, vec![0.3, 0.1, -0.2], true);
        let score = tape.matmul(x, w);
        let gp = gradient_penalty(&mut tape, score, x);
        let grads = tape.backward(gp);
        let gw = grads.get(w).expect("second-order path to critic weights");
        // analytic: gp = (‖w‖−1)², ∂gp/∂w = 2(‖w‖−1)·w/‖w‖, ‖w‖ = 3
        let expect = [2.0 * 2.0 * (1.0 / 3.0), 2.0 * 2.0 * (2.0 / 3.0), 2.0 * 2.0 * (2.0 / 3.0)];
        for (a, e) in tape.values(gw).iter().zip(expect.iter()) {
            assert_relative_eq!(a, e, epsilon = 1e-6);
        }
    }

    #[test]
    fn rolling_stats_closed_forms() {
        let constant = vec![2.5; 6];
        let stats = rolling_stats(&constant, 3);
        for s in &stats {
            assert_relative_eq!(s.mean, 2.5, epsilon = 1e-12);
            assert_relative_eq!(s.variance, 0.0, epsilon = 1e-12);
        }
        let single = rolling_stats(&[4.0], 5);
        assert_eq!(single.len(), 1);
        assert_relative_eq!(single[0].mean, 4.0, epsilon = 1e-12);

        // independent windowed oracle on a random series
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = 7;
        let stats = rolling_stats(&xs, w);
        for (i, s) in stats.iter().enumerate() {
            let start = (i + 1).saturating_sub(w);
            let window = &xs[start..=i];
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            let var = window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / window.len() as f64;
            assert_relative_eq!(s.mean, mean, epsilon = 1e-12);
            assert_relative_eq!(s.variance, var, epsilon = 1e-12);
        }
    }

    fn desk_fixture() -> (Corpus, Corpus, TeacherModel<f32>) {
        let corpus = gen_synthetic_corpus(2, 60, 5).unwrap();
        let splits = corpus.split(&[0.8, 0.2]);
        let tc = TeacherConfig {
            stack: crate::nn::StackConfig {
                layers: 2,
                d_model: 16,
                d_ff: 32,
                heads: 2,
                dropout: 0.0,
            },
            vocab_size: corpus.vocab.size(),
            max_len: 24,
            styles: 2,
        };
        let opts = TeacherTrainOptions {
            max_steps: 40,
            batch_size: 16,
            eval_every: 20,
            seed: 3,
            early_stop_acc: None,
            ..Default::default()
        };
        let (teacher, _) = train_teacher::<f32>(&splits[0], &splits[1], tc, &opts).unwrap();
        (splits[0].clone(), splits[1].clone(), teacher)
    }

    fn desk_model_cfg(vocab: usize) -> MssrNetConfig {
        MssrNetConfig {
            d_model: 16,
            d_style: 16,
            d_ff: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            styles: 2,
            vocab_size: vocab,
            max_len: 16,
            decode_margin: 2,
            dropout: 0.0,
            fixed_style_vector: false,
        }
    }

    #[test]
    fn schedule_counts_are_exact() {
        let (train, val, teacher) = desk_fixture();
        let setup = TrainSetup {
            train: &train,
            validation: &val,
            teacher: &teacher,
            model_cfg: desk_model_cfg(train.vocab.size()),
            schedule: TrainSchedule {
                iterations: 2,
                validate_every: 0,
                batch_size: 4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let outcome = run_training(setup).unwrap();
        assert_eq!(outcome.counters.reconstruction_batches, 10);
        assert_eq!(outcome.counters.critic_batches, 2);
        assert_eq!(outcome.counters.adversarial_batches, 10);
        // one gain-gap record per critic per critic step
        assert_eq!(outcome.gain_gaps.len(), 4);
    }

    #[test]
    fn role_isolation_is_bitwise() {
        let (train, val, teacher) = desk_fixture();
        let teacher_before = teacher.store.snapshot();
        let setup = TrainSetup {
            train: &train,
            validation: &val,
            teacher: &teacher,
            model_cfg: desk_model_cfg(train.vocab.size()),
            schedule: TrainSchedule {
                iterations: 1,
                validate_every: 0,
                batch_size: 4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let mut trainer = Trainer::new(&setup).unwrap();
        let mut stream = BatchStream::new(&train, 4, 99);
        let mut log = Vec::new();
        let mut gaps = Vec::new();

        // generator step: critics bit-identical
        let sc_before = trainer.style_critic.store.snapshot();
        let tc_before = trainer.text_critic.store.snapshot();
        trainer.reconstruction_batch(&mut stream, &mut log).unwrap();
        trainer.adversarial_batch(&mut stream, &mut log).unwrap();
        assert_eq!(trainer.style_critic.store.snapshot(), sc_before);
        assert_eq!(trainer.text_critic.store.snapshot(), tc_before);

        // critic step: model and teacher bit-identical
        let model_before = trainer.model.store.snapshot();
        trainer.critic_batch(&mut stream, &mut log, &mut gaps).unwrap();
        assert_eq!(trainer.model.store.snapshot(), model_before);
        assert_eq!(teacher.store.snapshot(), teacher_before);
    }

    #[test]
    fn identical_seeds_identical_losses() {
        let (train, val, teacher) = desk_fixture();
        let make = || TrainSetup {
            train: &train,
            validation: &val,
            teacher: &teacher,
            model_cfg: desk_model_cfg(train.vocab.size()),
            schedule: TrainSchedule {
                iterations: 2,
                validate_every: 0,
                batch_size: 4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let a = run_training(make()).unwrap();
        let b = run_training(make()).unwrap();
        let totals = |o: &TrainOutcome<f32>| -> Vec<f64> {
            o.loss_log
                .iter()
                .filter_map(|r| r.channels.get("total").copied())
                .collect()
        };
        assert_eq!(totals(&a), totals(&b));
        assert_eq!(a.model.store.snapshot(), b.model.store.snapshot());
    }

    #[test]
    fn loss_channels_are_nonnegative() {
        let (train, val, teacher) = desk_fixture();
        let setup = TrainSetup {
            train: &train,
            validation: &val,
            teacher: &teacher,
            model_cfg: desk_model_cfg(train.vocab.size()),
            schedule: TrainSchedule {
                iterations: 1,
                validate_every: 0,
                batch_size: 4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let outcome = run_training(setup).unwrap();
        for rec in outcome.loss_log.iter().filter(|r| r.phase == "reconstruction") {
            for name in ["cst", "teach", "s_pol", "t_pol"] {
                let v = rec.channels[name];
                assert!(v >= 0.0, "{name} = {v}");
            }
        }
    }

    #[test]
    fn gradients_reach_both_parameter_groups() {
        let (train, val, teacher) = desk_fixture();
        let setup = TrainSetup {
            train: &train,
            validation: &val,
            teacher: &teacher,
            model_cfg: desk_model_cfg(train.vocab.size()),
            schedule: TrainSchedule {
                iterations: 1,
                validate_every: 0,
                batch_size: 4,
                ..Default::default()
            },
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            out_dir: None,
        };
        let mut trainer = Trainer::new(&setup).unwrap();
        let mut stream = BatchStream::new(&train, 4, 7);
        let theta_before = trainer.model.store.snapshot();
        let mut log = Vec::new();
        trainer.adversarial_batch(&mut stream, &mut log).unwrap();
        // some θ parameter and some φ parameter must have moved
        let after = trainer.model.store.snapshot();
        let mut theta_moved = false;
        let mut phi_moved = false;
        for ((_, entry), (before, now)) in trainer.model.store.entries().zip(theta_before.iter().zip(after.iter())) {
            if before != now {
                match entry.role {
                    Role::TransferModel => theta_moved = true,
                    Role::StyleGenerator => phi_moved = true,
                    _ => {}
                }
            }
        }
        assert!(theta_moved, "θ untouched by adversarial step");
        assert!(phi_moved, "φ untouched by adversarial step");
    }
}
