//! Corpus ingestion: tokenization, vocabulary, filtering, encoding and
//! message-grouped splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::hash::Hash;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const NUM_RESERVED: usize = 4;
pub const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Minimum response length kept by [`filter_short`] unless configured otherwise.
pub const DEFAULT_MIN_RESPONSE_LEN: usize = 5;
pub const DEFAULT_MAX_LEN: usize = 50;

/// Splits on Unicode whitespace, optionally lowercasing.
pub fn tokenize(text: &str, lowercase: bool) -> Vec<String> {
    text.split_whitespace()
        .map(|w| if lowercase { w.to_lowercase() } else { w.to_string() })
        .collect()
}

/// A tokenized message/response pair before vocabulary encoding.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextPair {
    pub message: Vec<String>,
    pub response: Vec<String>,
}

/// A non-empty sequence of vocabulary ids. BOS/EOS are never stored.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Utterance(Vec<usize>);

impl Utterance {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyUtterance("utterance"));
        }
        if ids.contains(&PAD) {
            return Err(Error::InvalidArgument("utterance contains PAD".into()));
        }
        Ok(Utterance(ids))
    }

    /// The single-token `UNK` utterance used as a retrieval fallback.
    pub fn unk() -> Self {
        Utterance(vec![UNK])
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<usize> {
        self.0
    }
}

/// An encoded message/response pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub message: Utterance,
    pub response: Utterance,
}

/// A pair together with the response candidates retrieved for its message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub message: Utterance,
    pub response: Utterance,
    pub candidates: Vec<Utterance>,
}

/// Word/id mapping. Ids `0..4` are the reserved tokens; the rest are ordered
/// by descending corpus frequency with lexicographic tie-breaking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Vocabulary { words: all, index }
    }

    /// Builds from all message and response tokens of `pairs`, keeping at most
    /// `max_size - 4` non-reserved surfaces.
    pub fn build(pairs: &[TextPair], max_size: usize) -> Result<Self> {
        if max_size < NUM_RESERVED {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size {max_size} cannot hold the reserved tokens"
            )));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for p in pairs {
            for w in p.message.iter().chain(&p.response) {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);
        Ok(Self::from_words(ranked.into_iter().map(|(w, _)| w.to_string())))
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Non-reserved surfaces in id order.
    pub fn surfaces(&self) -> &[String] {
        &self.words[NUM_RESERVED..]
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }

    pub fn decode_text(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }

    /// One surface per line; line `n` (0-based) holds id `n + 4`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for word in self.surfaces() {
            writeln!(w, "{word}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let r = BufReader::new(File::open(path)?);
        let mut words = Vec::new();
        let mut seen = HashSet::new();
        for line in r.lines() {
            let line = line?;
            if !seen.insert(line.clone()) || RESERVED.contains(&line.as_str()) {
                return Err(Error::format(path.display(), format!("duplicate entry {line:?}")));
            }
            words.push(line);
        }
        Ok(Self::from_words(words))
    }
}

/// Keeps pairs whose response has at least `min_len` tokens, preserving order.
pub fn filter_short(pairs: &[TextPair], min_len: usize) -> Vec<TextPair> {
    pairs
        .iter()
        .filter(|p| p.response.len() >= min_len)
        .cloned()
        .collect()
}

/// Encodes token surfaces, counting truncations.
#[derive(Clone, Debug)]
pub struct Encoder<'v> {
    pub vocab: &'v Vocabulary,
    pub max_len: usize,
    truncated: usize,
}

impl<'v> Encoder<'v> {
    pub fn new(vocab: &'v Vocabulary, max_len: usize) -> Self {
        Encoder {
            vocab,
            max_len,
            truncated: 0,
        }
    }

    /// Number of sequences that exceeded `max_len` so far.
    pub fn truncations(&self) -> usize {
        self.truncated
    }

    pub fn encode(&mut self, tokens: &[String]) -> Result<Utterance> {
        let mut ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        if ids.len() > self.max_len {
            self.truncated += 1;
            log::warn!(
                "truncating utterance of {} tokens to {}",
                ids.len(),
                self.max_len
            );
            ids.truncate(self.max_len);
        }
        Utterance::new(ids)
    }

    pub fn encode_pair(&mut self, pair: &TextPair) -> Result<Pair> {
        Ok(Pair {
            message: self.encode(&pair.message)?,
            response: self.encode(&pair.response)?,
        })
    }

    pub fn encode_text(&mut self, text: &str, lowercase: bool) -> Result<Utterance> {
        self.encode(&tokenize(text, lowercase))
    }
}

/// Result of [`split_by_message`].
#[derive(Clone, Debug, PartialEq)]
pub struct Splits<P> {
    pub train: Vec<P>,
    pub valid: Vec<P>,
    pub test: Vec<P>,
}

/// Partitions items by message key: all items sharing a key land in the same
/// split. Items keep their input order inside each split.
pub fn split_by_message<P, K, F>(
    items: &[P],
    key: F,
    seed: u64,
    n_valid: usize,
    n_test: usize,
) -> Result<Splits<P>>
where
    P: Clone,
    K: Eq + Hash + Clone,
    F: Fn(&P) -> K,
{
    let mut order: Vec<K> = Vec::new();
    let mut seen: HashSet<K> = HashSet::new();
    for item in items {
        let k = key(item);
        if seen.insert(k.clone()) {
            order.push(k);
        }
    }
    if n_valid + n_test >= order.len() {
        return Err(Error::InsufficientMessages {
            needed: n_valid + n_test,
            found: order.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let assignment: HashMap<K, u8> = order
        .into_iter()
        .enumerate()
        .map(|(i, k)| {
            let slot = if i < n_valid {
                1
            } else if i < n_valid + n_test {
                2
            } else {
                0
            };
            (k, slot)
        })
        .collect();
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for item in items {
        match assignment[&key(item)] {
            1 => out.valid.push(item.clone()),
            2 => out.test.push(item.clone()),
            _ => out.train.push(item.clone()),
        }
    }
    Ok(out)
}

/// Message-grouped split of encoded pairs.
pub fn split(pairs: &[Pair], seed: u64, n_valid: usize, n_test: usize) -> Result<Splits<Pair>> {
    split_by_message(pairs, |p| p.message.clone(), seed, n_valid, n_test)
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub message: String,
    pub responses: Vec<String>,
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path.display(), format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_corpus(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Flattens records into tokenized pairs, dropping pairs with an empty side.
pub fn records_to_pairs(records: &[CorpusRecord], lowercase: bool) -> Vec<TextPair> {
    let mut out = Vec::new();
    for rec in records {
        let message = tokenize(&rec.message, lowercase);
        if message.is_empty() {
            continue;
        }
        for resp in &rec.responses {
            let response = tokenize(resp, lowercase);
            if !response.is_empty() {
                out.push(TextPair {
                    message: message.clone(),
                    response,
                });
            }
        }
    }
    out
}

/// Regroups pairs by message (first-appearance order) into corpus records.
pub fn pairs_to_records(pairs: &[TextPair]) -> Vec<CorpusRecord> {
    let mut groups: BTreeMap<usize, CorpusRecord> = BTreeMap::new();
    let mut slot: HashMap<&[String], usize> = HashMap::new();
    for p in pairs {
        let next = slot.len();
        let i = *slot.entry(p.message.as_slice()).or_insert(next);
        groups
            .entry(i)
            .or_insert_with(|| CorpusRecord {
                message: p.message.join(" "),
                responses: Vec::new(),
            })
            .responses
            .push(p.response.join(" "));
    }
    groups.into_values().collect()
}
