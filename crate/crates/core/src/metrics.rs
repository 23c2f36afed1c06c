//! Evaluation harness: corpus BLEU, interpolated Kneser–Ney 5-gram
//! perplexity, classifier-judged transfer accuracy, the stylistic-token
//! transfer ratio, and representation dumps for external visualization.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{TokenSequence, Vocabulary};
use crate::model::MssrNet;
use crate::nn::Ctx;
use crate::teacher::{SalienceConfig, TeacherModel};
use crate::tensor::{Real, Tape};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("candidate/reference line counts differ: {candidates} vs {references}")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("empty evaluation text")]
    EmptyEvaluation,
    #[error("empty training corpus for the language model")]
    EmptyLmCorpus,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---- BLEU ----

const BLEU_MAX_N: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Corpus-level BLEU in [0, 100]: clipped modified n-gram precisions up to
/// 4-grams, uniform weights, geometric mean, brevity penalty exp(1 − r/c)
/// when the candidate corpus is shorter. Orders with no candidate n-grams at
/// all (corpus of very short sentences) are left out of the mean; a present
/// order with zero matches still zeroes the score, like the reference
/// `multi-bleu` behaviour.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let mut clipped = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references.iter()) {
        cand_len += cand.len();
        ref_len += reference.len();
        for n in 1..=BLEU_MAX_N {
            let cand_counts = ngram_counts(cand, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &c) in &cand_counts {
                totals[n - 1] += c;
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += c.min(r);
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut available = 0usize;
    for n in 0..BLEU_MAX_N {
        if totals[n] == 0 {
            continue;
        }
        available += 1;
        if clipped[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[n] as f64 / totals[n] as f64).ln();
    }
    if available == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / available as f64).exp();
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * precision)
}

pub fn tokenize_lines(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(|t| t.to_lowercase()).collect())
        .collect()
}

// ---- Kneser–Ney n-gram language model ----

const LM_UNK: u32 = 0;
const LM_BOS: u32 = 1;
const LM_EOS: u32 = 2;

/// Interpolated Kneser–Ney model with a single fixed discount and a uniform
/// base distribution, so every token (even an unseen one) keeps positive
/// probability.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NGramLM {
    pub order: usize,
    pub discount: f64,
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    /// level k (1-based length): n-gram → adjusted count
    counts: Vec<HashMap<Vec<u32>, u32>>,
    /// level k: context → total adjusted count
    context_totals: Vec<HashMap<Vec<u32>, u32>>,
    /// level k: context → number of distinct continuations
    distinct_follow: Vec<HashMap<Vec<u32>, u32>>,
}

impl NGramLM {
    /// Trains on whitespace-tokenized sentences. The highest order uses raw
    /// counts; lower orders use continuation counts.
    pub fn train(sentences: &[Vec<String>], order: usize, discount: f64) -> Result<Self, MetricsError> {
        assert!(order >= 1);
        assert!((0.0..1.0).contains(&discount));
        if sentences.is_empty() || sentences.iter().all(|s| s.is_empty()) {
            return Err(MetricsError::EmptyLmCorpus);
        }
        let mut vocab = vec!["<unk>".to_string(), "<s>".to_string(), "</s>".to_string()];
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut seen: Vec<Vec<u32>> = Vec::new();
        for sent in sentences {
            let mut ids = vec![LM_BOS; order.saturating_sub(1)];
            for tok in sent {
                let id = *index.entry(tok.clone()).or_insert_with(|| {
                    vocab.push(tok.clone());
                    (vocab.len() - 1) as u32
                });
                ids.push(id);
            }
            ids.push(LM_EOS);
            seen.push(ids);
        }

        // raw counts at the highest level
        let mut counts: Vec<HashMap<Vec<u32>, u32>> = vec![HashMap::new(); order];
        for ids in &seen {
            if ids.len() < order {
                continue;
            }
            for w in ids.windows(order) {
                *counts[order - 1].entry(w.to_vec()).or_insert(0) += 1;
            }
        }
        // continuation counts downwards: count distinct left extensions
        for k in (1..order).rev() {
            let mut next: HashMap<Vec<u32>, u32> = HashMap::new();
            for gram in counts[k].keys() {
                *next.entry(gram[1..].to_vec()).or_insert(0) += 1;
            }
            counts[k - 1] = next;
        }

        let mut context_totals: Vec<HashMap<Vec<u32>, u32>> = vec![HashMap::new(); order];
        let mut distinct_follow: Vec<HashMap<Vec<u32>, u32>> = vec![HashMap::new(); order];
        for k in 0..order {
            for (gram, &c) in &counts[k] {
                let ctx = gram[..k].to_vec();
                *context_totals[k].entry(ctx.clone()).or_insert(0) += c;
                *distinct_follow[k].entry(ctx).or_insert(0) += 1;
            }
        }

        Ok(NGramLM {
            order,
            discount,
            vocab,
            index,
            counts,
            context_totals,
            distinct_follow,
        })
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(LM_UNK)
    }

    /// p(w | context), context given oldest-first; always positive.
    fn prob(&self, context: &[u32], word: u32) -> f64 {
        self.prob_level(self.order, context, word)
    }

    fn prob_level(&self, level: usize, context: &[u32], word: u32) -> f64 {
        if level == 0 {
            // uniform base over the vocabulary (minus <s>, which is never predicted)
            return 1.0 / (self.vocab.len() - 1) as f64;
        }
        let k = level - 1;
        let ctx: Vec<u32> = context[context.len().saturating_sub(level - 1)..].to_vec();
        let total = self.context_totals[k].get(&ctx).copied().unwrap_or(0);
        if total == 0 {
            return self.prob_level(level - 1, context, word);
        }
        let mut gram = ctx.clone();
        gram.push(word);
        let c = self.counts[k].get(&gram).copied().unwrap_or(0) as f64;
        let follow = self.distinct_follow[k].get(&ctx).copied().unwrap_or(0) as f64;
        let lower = self.prob_level(level - 1, context, word);
        let d = self.discount;
        ((c - d).max(0.0) + d * follow * lower) / total as f64
    }

    /// Mean negative log-probability, exponentiated, over every token of
    /// every sentence plus the end symbol.
    pub fn perplexity(&self, sentences: &[Vec<String>]) -> Result<f64, MetricsError> {
        let mut log_sum = 0.0;
        let mut tokens = 0usize;
        for sent in sentences {
            let mut ids = vec![LM_BOS; self.order - 1];
            for tok in sent {
                ids.push(self.id(tok));
            }
            ids.push(LM_EOS);
            for i in (self.order - 1)..ids.len() {
                let ctx = &ids[i + 1 - self.order..i];
                let p = self.prob(ctx, ids[i]);
                log_sum += p.ln();
                tokens += 1;
            }
        }
        if tokens == 0 {
            return Err(MetricsError::EmptyEvaluation);
        }
        Ok((-log_sum / tokens as f64).exp())
    }
}

// ---- classifier-based metrics ----

/// Fraction of outputs the classifier assigns to their intended target style.
/// Empty outputs count as failures.
pub fn transfer_accuracy<F: Real>(outputs: &[(Vec<usize>, usize)], classifier: &TeacherModel<F>) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let correct = outputs
        .iter()
        .filter(|(tokens, target)| !tokens.is_empty() && classifier.predict_label(tokens) == *target)
        .count();
    correct as f64 / outputs.len() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RatioSummary {
    pub count: usize,
    pub excluded: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferRatioReport {
    /// one entry per input sentence; `None` when no stylistic span was found
    pub per_sentence: Vec<Option<f64>>,
    pub summary: Option<RatioSummary>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

fn contains_contiguous(haystack: &[usize], needle: &[usize]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack.windows(needle.len()).any(|w| w == needle)
}

/// r = num_s / num_a per sentence: the fraction of source stylistic spans
/// that no longer occur contiguously in the transferred output. Sentences
/// without any selected span are excluded from the summary.
pub fn stylistic_transfer_ratio<F: Real>(
    pairs: &[(Vec<usize>, usize, Vec<usize>)],
    teacher: &TeacherModel<F>,
    cfg: &SalienceConfig,
    vocab: &Vocabulary,
) -> TransferRatioReport {
    let mut per_sentence = Vec::with_capacity(pairs.len());
    for (source, style, output) in pairs {
        let result = teacher.select_stylistic_tokens(source, *style, cfg, vocab);
        if result.spans.is_empty() {
            per_sentence.push(None);
            continue;
        }
        let num_a = result.spans.len();
        let num_s = result
            .spans
            .iter()
            .filter(|span| {
                let ids = &source[span.start..span.start + span.len];
                !contains_contiguous(output, ids)
            })
            .count();
        per_sentence.push(Some(num_s as f64 / num_a as f64));
    }
    let mut ratios: Vec<f64> = per_sentence.iter().flatten().copied().collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let summary = if ratios.is_empty() {
        None
    } else {
        Some(RatioSummary {
            count: ratios.len(),
            excluded: per_sentence.len() - ratios.len(),
            mean: ratios.iter().sum::<f64>() / ratios.len() as f64,
            q1: quantile(&ratios, 0.25),
            median: quantile(&ratios, 0.5),
            q3: quantile(&ratios, 0.75),
        })
    };
    TransferRatioReport {
        per_sentence,
        summary,
    }
}

// ---- representation dumps ----

/// Writes one TSV row per token per role (`content`, `style_student`,
/// `style_teacher`): `id<TAB>role<TAB>style<TAB>v0,v1,…`. Student and
/// teacher style rows pair one-to-one per token.
pub fn dump_representations<F: Real>(
    model: &MssrNet<F>,
    teacher: &TeacherModel<F>,
    sentences: &[TokenSequence],
    path: &Path,
) -> Result<usize, MetricsError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut rows = 0usize;
    for (si, sent) in sentences.iter().enumerate() {
        let mut tape: Tape<F> = Tape::new();
        let mut ctx = Ctx::frozen(&mut tape);
        let content = model
            .encode_content(&mut ctx, &sent.ids)
            .expect("dump sentences fit the model");
        let style = model
            .generate_style(&mut ctx, &sent.ids, sent.style)
            .expect("dump sentences fit the model");
        let teach = teacher.encode(&mut ctx, &sent.ids);
        for (role, var) in [("content", content), ("style_student", style), ("style_teacher", teach)] {
            let (n, d) = tape.shape(var);
            let values = tape.values(var);
            for tok in 0..n {
                let vec_str = values[tok * d..(tok + 1) * d]
                    .iter()
                    .map(|x| format!("{:.6}", x.to_f64()))
                    .collect::<Vec<_>>()
                    .join(",");
                writeln!(file, "{si}:{tok}\t{role}\t{}\t{vec_str}", sent.style)?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

// ---- aggregated report ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StyleBreakdown {
    pub sentences: usize,
    pub accuracy: f64,
    pub self_bleu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub perplexity: f64,
    pub bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transfer_ratio: Option<RatioSummary>,
    pub per_style: BTreeMap<String, StyleBreakdown>,
}

/// Inputs for a one-direction evaluation run.
pub struct EvalInputs<'a, F: Real> {
    /// (source tokens, source style, output tokens, target style)
    pub pairs: &'a [(Vec<usize>, usize, Vec<usize>, usize)],
    pub classifier: &'a TeacherModel<F>,
    pub lm: &'a NGramLM,
    pub vocab: &'a Vocabulary,
    /// gold transfers, line-aligned with `pairs`
    pub gold_references: Option<&'a [Vec<String>]>,
    /// teacher + salience config for the transfer-ratio statistic
    pub salience: Option<(&'a TeacherModel<F>, SalienceConfig)>,
}

pub fn evaluate<F: Real>(inputs: &EvalInputs<F>) -> Result<EvalReport, MetricsError> {
    if inputs.pairs.is_empty() {
        return Err(MetricsError::EmptyEvaluation);
    }
    let to_tokens = |ids: &[usize]| -> Vec<String> {
        ids.iter().map(|&i| inputs.vocab.token(i).to_string()).collect()
    };
    let outputs: Vec<(Vec<usize>, usize)> = inputs
        .pairs
        .iter()
        .map(|(_, _, out, target)| (out.clone(), *target))
        .collect();
    let accuracy = transfer_accuracy(&outputs, inputs.classifier);

    let cand_tokens: Vec<Vec<String>> = inputs.pairs.iter().map(|(_, _, out, _)| to_tokens(out)).collect();
    let src_tokens: Vec<Vec<String>> = inputs.pairs.iter().map(|(src, _, _, _)| to_tokens(src)).collect();
    let bleu_score = bleu(&cand_tokens, &src_tokens)?;
    let perplexity = inputs.lm.perplexity(&cand_tokens)?;
    let r_bleu = match inputs.gold_references {
        Some(refs) => Some(bleu(&cand_tokens, refs)?),
        None => None,
    };
    let transfer_ratio = match &inputs.salience {
        Some((teacher, cfg)) => {
            let triples: Vec<(Vec<usize>, usize, Vec<usize>)> = inputs
                .pairs
                .iter()
                .map(|(src, s, out, _)| (src.clone(), *s, out.clone()))
                .collect();
            stylistic_transfer_ratio(&triples, teacher, cfg, inputs.vocab).summary
        }
        None => None,
    };

    let mut per_style = BTreeMap::new();
    let styles: Vec<usize> = {
        let mut s: Vec<usize> = inputs.pairs.iter().map(|(_, st, _, _)| *st).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for style in styles {
        let idx: Vec<usize> = inputs
            .pairs
            .iter()
            .enumerate()
            .filter(|(_, (_, s, _, _))| *s == style)
            .map(|(i, _)| i)
            .collect();
        let sub_outputs: Vec<(Vec<usize>, usize)> = idx.iter().map(|&i| outputs[i].clone()).collect();
        let sub_cands: Vec<Vec<String>> = idx.iter().map(|&i| cand_tokens[i].clone()).collect();
        let sub_srcs: Vec<Vec<String>> = idx.iter().map(|&i| src_tokens[i].clone()).collect();
        per_style.insert(
            format!("style{style}"),
            StyleBreakdown {
                sentences: idx.len(),
                accuracy: transfer_accuracy(&sub_outputs, inputs.classifier),
                self_bleu: bleu(&sub_cands, &sub_srcs)?,
            },
        );
    }

    Ok(EvalReport {
        accuracy,
        perplexity,
        bleu: bleu_score,
        r_bleu,
        transfer_ratio,
        per_style,
    })
}

/// Self-BLEU of transferred output against its sources (content preservation).
pub fn self_bleu(corpus_vocab: &Vocabulary, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64, MetricsError> {
    let cands: Vec<Vec<String>> = pairs
        .iter()
        .map(|(out, _)| out.iter().map(|&i| corpus_vocab.token(i).to_string()).collect())
        .collect();
    let refs: Vec<Vec<String>> = pairs
        .iter()
        .map(|(_, src)| src.iter().map(|&i| corpus_vocab.token(i).to_string()).collect())
        .collect();
    bleu(&cands, &refs)
}
