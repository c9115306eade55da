//! Corpus ingestion: tokenizer, vocabulary, labeled TSV datasets, a
//! synthetic bag-of-words corpus and seeded mini-batching.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token at index 0. Every out-of-vocabulary token maps here.
pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// Lowercases, splits on whitespace, and breaks punctuation out into
/// standalone tokens. An apostrophe starts a new token so clitics stay
/// attached to it (`it's` becomes `it`, `'s`).
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars().flat_map(char::to_lowercase) {
            if ch == '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                cur.push(ch);
            } else if ch.is_alphanumeric() || ch == '_' {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut index = HashMap::new();
        index.insert(UNK.to_string(), UNK_ID);
        Self {
            index,
            tokens: vec![UNK.to_string()],
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary whose index `i + 1` is the `i`-th token given.
    /// Duplicates and the UNK token itself are rejected.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::default();
        for t in tokens {
            let t = t.into();
            if v.index.contains_key(&t) {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
            v.index.insert(t.clone(), v.tokens.len());
            v.tokens.push(t);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    /// Never true: UNK is always present.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenizes and indexes `text`; an empty result becomes `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![UNK_ID]
        } else {
            ids
        }
    }

    /// One token per line, line number = index.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(UNK) => {}
            _ => {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: format!("vocabulary must start with {UNK}"),
                })
            }
        }
        Self::from_tokens(lines.map(str::to_string))
    }
}

/// Tokens with `count >= min_count` in descending frequency, ties broken
/// lexicographically.
pub fn build_vocab<S: AsRef<str>>(sentences: &[S], min_count: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in sentences {
        for t in tokenize(s.as_ref()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    counts.remove(UNK);
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(_, c)| *c >= min_count.max(1))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)).expect("counts keys are unique")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub token_ids: Vec<usize>,
    pub label: usize,
}

impl Sentence {
    pub fn new(token_ids: Vec<usize>, label: usize) -> Self {
        Self { token_ids, label }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sentences: Vec<Sentence>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(sentences: Vec<Sentence>, num_classes: usize, split: Split) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(s) = sentences.iter().find(|s| s.label >= num_classes) {
            return Err(Error::invalid(format!(
                "label {} out of range for {num_classes} classes",
                s.label
            )));
        }
        if sentences.iter().any(Sentence::is_empty) {
            return Err(Error::invalid("sentence with no tokens"));
        }
        Ok(Self {
            sentences,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Errors if any token id is outside `0..vocab_size`.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        for s in &self.sentences {
            if let Some(&id) = s.token_ids.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
        }
        Ok(())
    }

    /// Keeps at most `max_len` leading tokens of every sentence.
    pub fn truncated(&self, max_len: usize) -> Dataset {
        let max_len = max_len.max(1);
        let mut out = self.clone();
        for s in &mut out.sentences {
            s.token_ids.truncate(max_len);
        }
        out
    }
}

/// Raw `label<TAB>text` records with 1-based line numbers.
fn parse_tsv_records(name: &str, content: &str) -> Result<Vec<(usize, String)>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: name.to_string(),
            line: line_no,
            msg: "expected label<TAB>text".into(),
        })?;
        let label: usize = label.trim().parse().map_err(|_| Error::Parse {
            path: name.to_string(),
            line: line_no,
            msg: format!("label {label:?} is not a non-negative integer"),
        })?;
        out.push((label, text.to_string()));
    }
    Ok(out)
}

/// Parses TSV content. Without a vocabulary (training split) one is built
/// from the text; with one, unseen tokens map to UNK and the vocabulary is
/// returned unchanged.
pub fn parse_tsv(
    name: &str,
    content: &str,
    vocab: Option<&Vocabulary>,
    split: Split,
    min_count: usize,
) -> Result<(Dataset, Vocabulary)> {
    let records = parse_tsv_records(name, content)?;
    if records.is_empty() {
        return Err(Error::invalid(format!("{name}: no records")));
    }
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => {
            let texts: Vec<&str> = records.iter().map(|(_, t)| t.as_str()).collect();
            build_vocab(&texts, min_count)
        }
    };
    let num_classes = records.iter().map(|(l, _)| *l).max().unwrap_or(0) + 1;
    let sentences = records
        .iter()
        .map(|(label, text)| Sentence::new(vocab.encode(text), *label))
        .collect();
    Ok((Dataset::new(sentences, num_classes, split)?, vocab))
}

pub fn load_tsv(
    path: &Path,
    vocab: Option<&Vocabulary>,
    split: Split,
    min_count: usize,
) -> Result<(Dataset, Vocabulary)> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&path.display().to_string(), &content, vocab, split, min_count)
}

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Includes the UNK row.
    pub vocab_size: usize,
    pub sentences_per_class: usize,
    /// Probability that a token is drawn from the sentence's class subset
    /// rather than the shared noise pool.
    pub sep: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            vocab_size: 500,
            sentences_per_class: 625,
            sep: 1.0,
            min_len: 4,
            max_len: 12,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// Token ids owned by each class.
    pub class_tokens: Vec<Vec<usize>>,
    pub noise_tokens: Vec<usize>,
}

/// Class-partitioned bag-of-words corpus split 80/10/10.
///
/// Tokens `1..=n_noise` form a shared noise pool (a fifth of the
/// non-UNK vocabulary); the rest are dealt to classes as disjoint
/// contiguous ranges. Vocabulary tokens are named `w<id>`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    if !(0.0..=1.0).contains(&spec.sep) {
        return Err(Error::invalid(format!("sep {} outside [0, 1]", spec.sep)));
    }
    if spec.num_classes < 2 {
        return Err(Error::invalid("synthetic corpus needs at least 2 classes"));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::invalid("synthetic sentence length range is empty"));
    }
    let usable = spec.vocab_size.saturating_sub(1);
    let n_noise = (usable / 5).max(1);
    let n_class_tokens = usable.saturating_sub(n_noise);
    if n_class_tokens < spec.num_classes {
        return Err(Error::invalid(format!(
            "vocab_size {} too small for {} classes",
            spec.vocab_size, spec.num_classes
        )));
    }
    if spec.sentences_per_class * spec.num_classes < 10 {
        return Err(Error::invalid("synthetic corpus needs at least 10 sentences"));
    }

    let noise_tokens: Vec<usize> = (1..=n_noise).collect();
    let per = n_class_tokens / spec.num_classes;
    let extra = n_class_tokens % spec.num_classes;
    let mut class_tokens = Vec::with_capacity(spec.num_classes);
    let mut next = n_noise + 1;
    for c in 0..spec.num_classes {
        let len = per + usize::from(c < extra);
        class_tokens.push((next..next + len).collect::<Vec<_>>());
        next += len;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut all = Vec::with_capacity(spec.sentences_per_class * spec.num_classes);
    for (label, own) in class_tokens.iter().enumerate() {
        for _ in 0..spec.sentences_per_class {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let ids = (0..len)
                .map(|_| {
                    let pool = if rng.gen_bool(spec.sep) { own } else { &noise_tokens };
                    pool[rng.gen_range(0..pool.len())]
                })
                .collect();
            all.push(Sentence::new(ids, label));
        }
    }
    all.shuffle(&mut rng);
    let n = all.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let test = all.split_off(n_train + n_dev);
    let dev = all.split_off(n_train);

    let vocab = Vocabulary::from_tokens((1..spec.vocab_size).map(|i| format!("w{i}")))?;
    Ok(SyntheticCorpus {
        vocab,
        train: Dataset::new(all, spec.num_classes, Split::Train)?,
        dev: Dataset::new(dev, spec.num_classes, Split::Dev)?,
        test: Dataset::new(test, spec.num_classes, Split::Test)?,
        class_tokens,
        noise_tokens,
    })
}

/// Shuffled index batches for one epoch. The permutation depends only on
/// `(seed, epoch)`; the last batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}
