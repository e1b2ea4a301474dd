use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

/// Default size of the made-up dictionary.
pub const DEFAULT_MADEUP: usize = 10_000;

const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token/id map over three ranges:
///
/// * `[0, 4)` specials (`PAD`, `BOS`, `EOS`, `UNK`)
/// * `[4, V)` real words, most frequent first
/// * `[V, V + M)` made-up slots, which have no surface form
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    madeup: usize,
}

impl Vocabulary {
    /// Builds from whitespace-tokenized sentences. Words are ranked by
    /// frequency with ties broken lexicographically; at most `max_size`
    /// ids (specials included) are real words.
    pub fn build<'a, I>(sentences: I, max_size: usize, madeup: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in sentences {
            for tok in line.split_whitespace() {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);
        Ok(Self::from_words(
            ranked.into_iter().map(|(t, _)| t.to_string()),
            madeup,
        ))
    }

    pub fn build_from_file(path: impl AsRef<Path>, max_size: usize, madeup: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::build(text.lines(), max_size, madeup)
    }

    /// Vocabulary over the given real words, in order, after the specials.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I, madeup: usize) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            madeup,
        }
    }

    /// Number of real ids `V` (specials included).
    pub fn real_size(&self) -> usize {
        self.tokens.len()
    }

    /// Number of made-up slots `M`.
    pub fn madeup_size(&self) -> usize {
        self.madeup
    }

    /// Size of the whole id space, `V + M`.
    pub fn total_size(&self) -> usize {
        self.tokens.len() + self.madeup
    }

    /// Range of real-word ids `[4, V)`.
    pub fn real_word_range(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..self.tokens.len() as u32
    }

    /// Range of made-up ids `[V, V + M)`.
    pub fn madeup_range(&self) -> std::ops::Range<u32> {
        self.tokens.len() as u32..self.total_size() as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < NUM_SPECIALS
    }

    pub fn is_real_word(&self, id: u32) -> bool {
        self.real_word_range().contains(&id)
    }

    pub fn is_madeup(&self, id: u32) -> bool {
        self.madeup_range().contains(&id)
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Surface form; made-up ids render as `<madeup:k>`.
    pub fn token(&self, id: u32) -> String {
        match self.tokens.get(id as usize) {
            Some(t) => t.clone(),
            None if self.is_madeup(id) => format!("<madeup:{}>", id as usize - self.tokens.len()),
            None => SPECIAL_TOKENS[UNK as usize].to_string(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Whitespace join of the ids, dropping `PAD`, `BOS` and `EOS`.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<String> = ids
            .iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.token(i))
            .collect();
        words.join(" ")
    }

    /// `#V=<V> M=<M>` header followed by `token<TAB>id` lines, specials first.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("#V={} M={}\n", self.real_size(), self.madeup);
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::VocabFormat("missing header".into()))?;
        let (v, m) = parse_header(header)?;
        let mut words = Vec::with_capacity(v.saturating_sub(NUM_SPECIALS));
        for (expected, line) in lines.filter(|l| !l.is_empty()).enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::VocabFormat(format!("line `{line}` lacks a tab")))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::VocabFormat(format!("bad id in `{line}`")))?;
            if id != expected {
                return Err(Error::VocabFormat(format!(
                    "id {id} out of order, expected {expected}"
                )));
            }
            if id < NUM_SPECIALS {
                if tok != SPECIAL_TOKENS[id] {
                    return Err(Error::VocabFormat(format!("special {id} is `{tok}`")));
                }
            } else {
                words.push(tok.to_string());
            }
        }
        let vocab = Self::from_words(words, m);
        if vocab.real_size() != v {
            return Err(Error::VocabFormat(format!(
                "header says V={v}, file lists {}",
                vocab.real_size()
            )));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize)> {
    let bad = || Error::VocabFormat(format!("bad header `{header}`"));
    let rest = header.strip_prefix("#V=").ok_or_else(bad)?;
    let (v, m) = rest.split_once(" M=").ok_or_else(bad)?;
    Ok((
        v.trim().parse().map_err(|_| bad())?,
        m.trim().parse().map_err(|_| bad())?,
    ))
}
