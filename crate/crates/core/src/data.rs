//! Vocabulary, corpora, noising, batching, and the synthetic benchmark
//! generator used by the desk-scale training and evaluation tests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("empty input corpus")]
    EmptyInput,
    #[error("style label {label} out of range for {styles} styles")]
    BadLabel { label: usize, styles: usize },
    #[error("style {0} has no sentences")]
    EmptyStyle(usize),
    #[error("malformed TSV line {0}: expected `label<TAB>sentence`")]
    MalformedTsv(usize),
    #[error("unsupported style count {0}: synthetic generator covers 2..=4")]
    BadStyleCount(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token inventory with fixed reserved ids.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocabulary {
            tokens,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", self.token(id));
        }
        out
    }
}

/// Frequency-ordered vocabulary: reserved ids first, then tokens with
/// count ≥ min_freq sorted by (count desc, token asc).
pub fn build_vocab(lines: &[String], min_freq: usize) -> Result<Vocabulary, DataError> {
    if lines.is_empty() || lines.iter().all(|l| l.split_whitespace().next().is_none()) {
        return Err(DataError::EmptyInput);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for line in lines {
        for tok in line.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t.to_string()));
    Ok(Vocabulary::from_tokens(tokens))
}

/// A tokenized sentence with its style label. Token ids never include
/// reserved ids other than `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub style: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Corpus {
    pub sentences: Vec<TokenSequence>,
    pub styles: usize,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = vec![false; self.styles];
        for s in &self.sentences {
            if s.style >= self.styles {
                return Err(DataError::BadLabel {
                    label: s.style,
                    styles: self.styles,
                });
            }
            seen[s.style] = true;
        }
        if let Some(missing) = seen.iter().position(|&b| !b) {
            return Err(DataError::EmptyStyle(missing));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Deterministic contiguous split by fractional sizes (already-shuffled
    /// synthetic corpora interleave styles, so contiguous is unbiased there).
    pub fn split(&self, fractions: &[f64]) -> Vec<Corpus> {
        let n = self.sentences.len();
        let mut out = Vec::new();
        let mut start = 0;
        for (i, f) in fractions.iter().enumerate() {
            let take = if i + 1 == fractions.len() {
                n - start
            } else {
                ((n as f64) * f).round() as usize
            };
            let end = (start + take).min(n);
            out.push(Corpus {
                sentences: self.sentences[start..end].to_vec(),
                styles: self.styles,
                vocab: self.vocab.clone(),
            });
            start = end;
        }
        out
    }
}

/// Replaces each token independently with `<unk>` with probability `p`.
/// Length and label are preserved.
pub fn noise_sequence(x: &TokenSequence, p: f64, rng: &mut ChaCha8Rng) -> TokenSequence {
    assert!((0.0..=1.0).contains(&p), "noise probability out of range");
    let ids = x
        .ids
        .iter()
        .map(|&id| if rng.random::<f64>() < p { UNK } else { id })
        .collect();
    TokenSequence { ids, style: x.style }
}

/// A padded batch: row-major id matrix plus a pad mask per sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// indices into the source corpus
    pub indices: Vec<usize>,
    pub sentences: Vec<TokenSequence>,
    pub max_len: usize,
}

impl Batch {
    pub fn padded_ids(&self) -> Vec<Vec<usize>> {
        self.sentences
            .iter()
            .map(|s| {
                let mut row = s.ids.clone();
                row.resize(self.max_len, PAD);
                row
            })
            .collect()
    }

    pub fn pad_mask(&self) -> Vec<Vec<bool>> {
        self.sentences
            .iter()
            .map(|s| {
                let mut row = vec![false; s.len()];
                row.resize(self.max_len, true);
                row
            })
            .collect()
    }
}

/// Length-bucketed, shuffled batch stream. A fixed seed yields an identical
/// stream; `epoch` advances the shuffle deterministically.
pub struct BatchStream<'c> {
    corpus: &'c Corpus,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl<'c> BatchStream<'c> {
    pub fn new(corpus: &'c Corpus, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1);
        let mut s = BatchStream {
            corpus,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.reshuffle();
        s
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    /// Restores stream position (checkpoint resume).
    pub fn seek(&mut self, epoch: u64, pos: usize) {
        self.epoch = epoch;
        self.reshuffle_current();
        self.pos = pos.min(self.order.len());
    }

    fn reshuffle(&mut self) {
        self.reshuffle_current();
        self.pos = 0;
    }

    fn reshuffle_current(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx: Vec<usize> = (0..self.corpus.len()).collect();
        idx.shuffle(&mut rng);
        // bucket by length so batches pad less; stable sort keeps the
        // shuffled order inside each length class
        idx.sort_by_key(|&i| self.corpus.sentences[i].len());
        // shuffle whole batches so bucketing does not fix the visit order
        let chunks: Vec<Vec<usize>> = idx.chunks(self.batch_size).map(|c| c.to_vec()).collect();
        let mut chunk_order: Vec<usize> = (0..chunks.len()).collect();
        chunk_order.shuffle(&mut rng);
        self.order = chunk_order.into_iter().flat_map(|ci| chunks[ci].clone()).collect();
    }

    pub fn next_batch(&mut self) -> Batch {
        if self.pos >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.pos..end].to_vec();
        self.pos = end;
        let sentences: Vec<TokenSequence> = indices.iter().map(|&i| self.corpus.sentences[i].clone()).collect();
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        Batch {
            indices,
            sentences,
            max_len,
        }
    }

    /// All batches of one pass over the corpus, in stream order.
    pub fn one_epoch(&mut self) -> Vec<Batch> {
        let mut out = Vec::new();
        let start_epoch = self.epoch;
        loop {
            if self.pos >= self.order.len() {
                break;
            }
            out.push(self.next_batch());
            if self.epoch != start_epoch {
                break;
            }
        }
        out
    }
}

// ---- synthetic corpus ----

const NEUTRAL_SUBJECTS: [&str; 8] = ["food", "service", "movie", "staff", "room", "coffee", "plot", "music"];
const NEUTRAL_VERBS: [&str; 4] = ["was", "is", "seemed", "felt"];
const NEUTRAL_QUALIFIERS: [&str; 5] = ["really", "quite", "very", "honestly", "overall"];
const NEUTRAL_TAILS: [&str; 4] = ["today", "yesterday", "again", "somehow"];

const MARKERS: [[&str; 8]; 4] = [
    ["good", "great", "tasty", "friendly", "lovely", "superb", "pleasant", "charming"],
    ["bad", "terrible", "bland", "rude", "awful", "dreadful", "gross", "tedious"],
    ["calm", "quiet", "plain", "modest", "simple", "tidy", "neat", "mild"],
    ["wild", "loud", "crazy", "messy", "flashy", "bold", "brash", "odd"],
];

/// Style marker lexicon (disjoint across styles by construction).
pub fn style_markers(style: usize) -> &'static [&'static str] {
    &MARKERS[style]
}

pub fn is_style_marker(token: &str) -> Option<usize> {
    MARKERS.iter().position(|set| set.contains(&token))
}

/// One synthetic sentence as tokens; marker slots filled from `style`'s
/// lexicon. Returns the token strings and the marker slot positions.
fn synth_sentence(style: usize, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<usize>) {
    let subj = NEUTRAL_SUBJECTS[rng.random_range(0..NEUTRAL_SUBJECTS.len())];
    let verb = NEUTRAL_VERBS[rng.random_range(0..NEUTRAL_VERBS.len())];
    let qual = NEUTRAL_QUALIFIERS[rng.random_range(0..NEUTRAL_QUALIFIERS.len())];
    let tail = NEUTRAL_TAILS[rng.random_range(0..NEUTRAL_TAILS.len())];
    let markers = style_markers(style);
    let m1 = markers[rng.random_range(0..markers.len())];
    let m2 = markers[rng.random_range(0..markers.len())];
    let template = rng.random_range(0..6);
    let (tokens, marker_pos): (Vec<&str>, Vec<usize>) = match template {
        0 => (vec!["the", subj, verb, m1], vec![3]),
        1 => (vec!["the", subj, verb, qual, m1], vec![4]),
        2 => (vec!["the", subj, verb, m1, "and", m2], vec![3, 5]),
        3 => (vec![qual, ",", "the", subj, verb, m1], vec![5]),
        4 => (vec!["i", "think", "the", subj, verb, m1, tail], vec![5]),
        5 => {
            let subj2 = NEUTRAL_SUBJECTS[rng.random_range(0..NEUTRAL_SUBJECTS.len())];
            let verb2 = NEUTRAL_VERBS[rng.random_range(0..NEUTRAL_VERBS.len())];
            (
                vec!["the", subj, verb, m1, "and", "the", subj2, verb2, qual, m2],
                vec![3, 9],
            )
        }
        _ => unreachable!(),
    };
    (tokens.into_iter().map(|s| s.to_string()).collect(), marker_pos)
}

/// Desk-scale benchmark corpus: shared neutral content, disjoint per-style
/// marker lexicons, every sentence carrying at least one own-style marker and
/// none of any other style. Lengths 4–12, vocabulary well under 200 tokens.
pub fn gen_synthetic_corpus(styles: usize, per_style: usize, seed: u64) -> Result<Corpus, DataError> {
    let (corpus, _) = gen_synthetic_with_references(styles, per_style, seed)?;
    Ok(corpus)
}

/// Like [`gen_synthetic_corpus`], but also returns, for every sentence and
/// every target style, the gold transfer obtained by swapping each marker for
/// the same-index marker of the target lexicon. `references[i][t]` is the
/// gold transfer of sentence `i` into style `t` (equal to the sentence when
/// `t` is its own style).
pub fn gen_synthetic_with_references(
    styles: usize,
    per_style: usize,
    seed: u64,
) -> Result<(Corpus, Vec<Vec<Vec<String>>>), DataError> {
    if !(2..=4).contains(&styles) {
        return Err(DataError::BadStyleCount(styles));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw: Vec<(usize, Vec<String>, Vec<usize>)> = Vec::new();
    for style in 0..styles {
        for _ in 0..per_style {
            let (tokens, marker_pos) = synth_sentence(style, &mut rng);
            raw.push((style, tokens, marker_pos));
        }
    }
    raw.shuffle(&mut rng);

    let lines: Vec<String> = raw.iter().map(|(_, t, _)| t.join(" ")).collect();
    let vocab = build_vocab(&lines, 1)?;

    let mut sentences = Vec::with_capacity(raw.len());
    let mut references = Vec::with_capacity(raw.len());
    for (style, tokens, marker_pos) in &raw {
        let ids = vocab.encode(&tokens.join(" "));
        sentences.push(TokenSequence { ids, style: *style });
        let mut per_target = Vec::with_capacity(styles);
        for target in 0..styles {
            let mut swapped = tokens.clone();
            for &mp in marker_pos {
                let own = style_markers(*style);
                let idx = own.iter().position(|m| *m == tokens[mp]).expect("marker slot");
                swapped[mp] = style_markers(target)[idx].to_string();
            }
            per_target.push(swapped);
        }
        references.push(per_target);
    }

    let corpus = Corpus {
        sentences,
        styles,
        vocab,
    };
    corpus.validate()?;
    Ok((corpus, references))
}

// ---- file I/O ----

/// Reads `style0.txt`, `style1.txt`, … from a directory.
pub fn read_style_files(dir: &Path, styles: usize, max_len: usize) -> Result<(Corpus, usize), DataError> {
    let mut labeled = Vec::new();
    for style in 0..styles {
        let path = dir.join(format!("style{style}.txt"));
        let text = std::fs::read_to_string(&path)?;
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            labeled.push((style, line.to_string()));
        }
    }
    corpus_from_labeled(labeled, styles, max_len)
}

/// Reads a two-column TSV: `label<TAB>sentence`.
pub fn read_tsv(path: &Path, max_len: usize) -> Result<(Corpus, usize), DataError> {
    let text = std::fs::read_to_string(path)?;
    let mut labeled = Vec::new();
    let mut styles = 0;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, sentence) = line.split_once('\t').ok_or(DataError::MalformedTsv(lineno + 1))?;
        let label: usize = label.trim().parse().map_err(|_| DataError::MalformedTsv(lineno + 1))?;
        styles = styles.max(label + 1);
        labeled.push((label, sentence.to_string()));
    }
    corpus_from_labeled(labeled, styles, max_len)
}

fn corpus_from_labeled(
    labeled: Vec<(usize, String)>,
    styles: usize,
    max_len: usize,
) -> Result<(Corpus, usize), DataError> {
    if labeled.is_empty() {
        return Err(DataError::EmptyInput);
    }
    let lines: Vec<String> = labeled.iter().map(|(_, l)| l.clone()).collect();
    let vocab = build_vocab(&lines, 1)?;
    let mut sentences = Vec::new();
    let mut skipped = 0usize;
    for (style, line) in &labeled {
        let ids = vocab.encode(line);
        if ids.is_empty() {
            continue;
        }
        if ids.len() > max_len {
            skipped += 1;
            log::warn!("skipping over-length sentence ({} > {} tokens)", ids.len(), max_len);
            continue;
        }
        sentences.push(TokenSequence { ids, style: *style });
    }
    let corpus = Corpus {
        sentences,
        styles,
        vocab,
    };
    corpus.validate()?;
    Ok((corpus, skipped))
}

/// Writes one file per style (`style0.txt`, …) into `dir`.
pub fn write_style_files(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    for style in 0..corpus.styles {
        let mut out = String::new();
        for s in corpus.sentences.iter().filter(|s| s.style == style) {
            out.push_str(&corpus.vocab.decode(&s.ids));
            out.push('\n');
        }
        std::fs::write(dir.join(format!("style{style}.txt")), out)?;
    }
    Ok(())
}
