//! Corpus ingestion, vocabularies, and subsequence batching.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
const RESERVED: [&str; 2] = ["<pad>", "<unk>"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    Word,
    Char,
}

impl fmt::Display for TokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenMode::Word => "word",
            TokenMode::Char => "char",
        })
    }
}

impl FromStr for TokenMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "word" => Ok(TokenMode::Word),
            "char" => Ok(TokenMode::Char),
            _ => Err(Error::config(format!("unknown tokenization {s:?} (expected word or char)"))),
        }
    }
}

/// Dense token ↔ id mapping. Ids `0` and `1` are padding and unknown.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    mode: TokenMode,
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary of at most `max_size` entries (reserved
    /// ids included). Equal counts are ordered lexicographically.
    pub fn build(text: &str, mode: TokenMode, max_size: Option<usize>) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from empty text"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for tok in tokenize(text, mode) {
            *counts.entry(tok).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::contract("text contains no tokens"));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let limit = max_size.map_or(usize::MAX, |m| m.saturating_sub(RESERVED.len()));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(
                ranked
                    .into_iter()
                    .map(|(t, _)| t)
                    .filter(|t| !RESERVED.contains(&t.as_str()))
                    .take(limit),
            )
            .collect();
        Ok(Self::from_tokens(mode, tokens))
    }

    fn from_tokens(mode: TokenMode, tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { mode, tokens, index }
    }

    pub fn mode(&self) -> TokenMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.mode).map(|t| self.id(&t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let toks = ids.iter().map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]));
        match self.mode {
            TokenMode::Char => toks.collect(),
            TokenMode::Word => toks.collect::<Vec<_>>().join(" "),
        }
    }

    /// One token per line in id order, with `\n`, `\r`, `\t` and `\\`
    /// escaped.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{}", escape(t))?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R, mode: TokenMode) -> Result<Self> {
        let mut tokens = Vec::new();
        for line in r.lines() {
            tokens.push(unescape(&line?)?);
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary file must start with <pad> and <unk>".into()));
        }
        Ok(Self::from_tokens(mode, tokens))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, mode: TokenMode) -> Result<Self> {
        Self::read(std::io::BufReader::new(fs::File::open(path)?), mode)
    }
}

fn tokenize(text: &str, mode: TokenMode) -> Box<dyn Iterator<Item = String> + '_> {
    match mode {
        TokenMode::Char => Box::new(text.chars().map(String::from)),
        TokenMode::Word => Box::new(text.split_whitespace().map(String::from)),
    }
}

fn escape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    for c in t.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(t: &str) -> Result<String> {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some('t') => out.push('\t'),
            other => return Err(Error::Format(format!("bad escape \\{other:?} in vocabulary"))),
        }
    }
    Ok(out)
}

/// One split of a corpus as a single id sequence in source order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<u32>,
}

impl TokenStream {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Train, dev and test streams sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: TokenStream,
    pub dev: TokenStream,
    pub test: TokenStream,
}

impl Corpus {
    /// Builds the vocabulary on `train` and encodes every split.
    pub fn from_splits(train: &str, dev: &str, test: &str, mode: TokenMode, max_vocab: Option<usize>) -> Result<Self> {
        let vocab = Vocab::build(train, mode, max_vocab)?;
        Ok(Self {
            train: TokenStream::new(vocab.encode(train)),
            dev: TokenStream::new(vocab.encode(dev)),
            test: TokenStream::new(vocab.encode(test)),
            vocab,
        })
    }

    /// Splits one text into contiguous train / dev / test parts; `dev_frac`
    /// and `test_frac` are fractions of the characters, cut at char
    /// boundaries. The vocabulary covers the whole text.
    pub fn from_single_text(text: &str, mode: TokenMode, dev_frac: f64, test_frac: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::contract("corpus is empty"));
        }
        let vocab = Vocab::build(text, mode, None)?;
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let n = chars.len();
        let byte_at = |k: usize| if k >= n { text.len() } else { chars[k].0 };
        let train_end = byte_at(((1.0 - dev_frac - test_frac) * n as f64) as usize);
        let dev_end = byte_at(((1.0 - test_frac) * n as f64) as usize);
        Ok(Self {
            train: TokenStream::new(vocab.encode(&text[..train_end])),
            dev: TokenStream::new(vocab.encode(&text[train_end..dev_end])),
            test: TokenStream::new(vocab.encode(&text[dev_end..])),
            vocab,
        })
    }
}

/// How a stream is cut into training batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub seq_len: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl BatchPlan {
    pub fn tokens_per_batch(&self) -> usize {
        self.seq_len * self.batch_size
    }
}

/// One row of a batch: `inputs[i]` predicts `targets[i]`, which is the next
/// stream token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subsequence {
    /// Index of the row's contiguous stream.
    pub row: usize,
    /// Stream index of `inputs[0]`.
    pub start: usize,
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<Subsequence>,
}

impl Batch {
    /// All rows present with length `plan.seq_len`.
    pub fn is_full(&self, plan: &BatchPlan) -> bool {
        self.rows.len() == plan.batch_size && self.rows.iter().all(|r| r.inputs.len() == plan.seq_len)
    }

    pub fn flat_inputs(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r.inputs.iter().copied()).collect()
    }

    pub fn flat_targets(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r.targets.iter().copied()).collect()
    }
}

/// Cuts `stream` into nonoverlapping subsequences of `plan.seq_len` inputs.
///
/// The `N − 1` input positions are divided into `batch_size` contiguous
/// streams (earlier streams take the extra positions when the division is
/// uneven). Unshuffled, batch `b` holds piece `b` of every stream, so each
/// row continues the same row of the previous batch. Shuffled, the full
/// pieces are permuted with `seed` and regrouped. Short trailing pieces are
/// emitted in final batches, never padded.
pub fn segment(stream: &TokenStream, plan: &BatchPlan, seed: u64) -> Result<Vec<Batch>> {
    if plan.seq_len == 0 || plan.batch_size == 0 {
        return Err(Error::contract("batch plan needs positive length and batch size"));
    }
    let n = stream.len();
    if n < plan.tokens_per_batch() || n < 2 {
        return Err(Error::contract(format!(
            "stream of {n} tokens is shorter than one batch of {}",
            plan.tokens_per_batch()
        )));
    }
    let ids = stream.ids();
    let positions = n - 1;
    let bs = plan.batch_size;
    let l = plan.seq_len;

    let piece = |row: usize, start: usize, end: usize| Subsequence {
        row,
        start,
        inputs: ids[start..end].to_vec(),
        targets: ids[start + 1..end + 1].to_vec(),
    };

    let mut per_row: Vec<Vec<Subsequence>> = Vec::with_capacity(bs);
    let mut begin = 0;
    for r in 0..bs {
        let len = positions / bs + usize::from(r < positions % bs);
        let end = begin + len;
        per_row.push(
            (begin..end)
                .step_by(l)
                .map(|s| piece(r, s, (s + l).min(end)))
                .collect(),
        );
        begin = end;
    }

    if !plan.shuffle {
        let n_batches = per_row.iter().map(Vec::len).max().unwrap_or(0);
        let mut iters: Vec<_> = per_row.into_iter().map(Vec::into_iter).collect();
        return Ok((0..n_batches)
            .map(|_| Batch {
                rows: iters.iter_mut().filter_map(Iterator::next).collect(),
            })
            .collect());
    }

    let (mut full, short): (Vec<_>, Vec<_>) = per_row.into_iter().flatten().partition(|p| p.inputs.len() == l);
    full.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pieces: Vec<_> = full.into_iter().chain(short).collect();
    Ok(pieces
        .chunks(bs)
        .map(|c| Batch { rows: c.to_vec() })
        .collect())
}
