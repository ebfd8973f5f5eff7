//! Corpus ingestion: tokenization, vocabularies, attribute/language registries,
//! and fixed-size context windows for training.
//!
//! Corpus file format: UTF-8, one record per line,
//! `<attribute-key>\t<language-code>\t<text>`.
//! Vocabulary file format: one word per line, line number = id.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Padding token, id 0. Fills contexts at document starts.
pub const PAD: &str = "<pad>";
/// Out-of-vocabulary token, id 1.
pub const UNK: &str = "<unk>";
/// Number token, id 2. Digit tokens are normalized to this.
pub const NUM: &str = "<#>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const NUM_ID: u32 = 2;

/// Lowercases, splits on whitespace, detaches leading/trailing ASCII
/// punctuation into separate tokens, and normalizes digit tokens to [`NUM`].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let lower = chunk.to_lowercase();
        let mut core: &str = &lower;
        let mut leading = Vec::new();
        let mut trailing = Vec::new();
        while let Some(c) = core.chars().next() {
            if c.is_ascii_punctuation() && core.chars().count() > 1 {
                leading.push(c.to_string());
                core = &core[c.len_utf8()..];
            } else {
                break;
            }
        }
        while let Some(c) = core.chars().last() {
            if c.is_ascii_punctuation() && core.chars().count() > 1 {
                trailing.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.extend(leading);
        if !core.is_empty() {
            out.push(normalize_token(core));
        }
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn normalize_token(token: &str) -> String {
    let mut has_digit = false;
    let numberlike = token.chars().all(|c| {
        if c.is_ascii_digit() {
            has_digit = true;
            true
        } else {
            matches!(c, '.' | ',')
        }
    });
    if numberlike && has_digit {
        NUM.to_string()
    } else {
        token.to_string()
    }
}

/// Word string <-> dense integer id bijection. Ids 0..3 are the special
/// tokens [`PAD`], [`UNK`], [`NUM`], which are always present.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized documents. Words with frequency
    /// below `min_count` are dropped (they map to UNK later). `max_size`
    /// caps the total size including the three special tokens; 0 means
    /// unbounded. Order: specials, then descending frequency, ties broken
    /// lexicographically.
    pub fn build(docs: &[Vec<String>], min_count: usize, max_size: usize) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::EmptyCorpus("no documents"));
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for doc in docs {
            for tok in doc {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        let mut candidates: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|(w, c)| *c >= min_count && !matches!(*w, PAD | UNK | NUM))
            .collect();
        if candidates.is_empty() {
            return Err(Error::EmptyCorpus("no words above min_count"));
        }
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let cap = if max_size == 0 {
            candidates.len()
        } else {
            max_size.saturating_sub(3)
        };
        candidates.truncate(cap);

        let mut words: Vec<String> = vec![PAD.into(), UNK.into(), NUM.into()];
        words.extend(candidates.into_iter().map(|(w, _)| w.to_string()));
        Ok(Self::from_words_unchecked(words))
    }

    /// Reconstructs a vocabulary from an explicit word list (e.g. a
    /// vocabulary file). The first three entries must be the special tokens.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != PAD || words[1] != UNK || words[2] != NUM {
            return Err(Error::Config(format!(
                "vocabulary must start with `{PAD}`, `{UNK}`, `{NUM}`"
            )));
        }
        let mut seen = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if seen.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self::from_words_unchecked(words))
    }

    fn from_words_unchecked(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn is_special(id: u32) -> bool {
        id < 3
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let words = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_words(words)
    }
}

/// Ordered set of opaque attribute keys (book names, language codes,
/// metadata tuples, sentence ids, POS tags) with dense ids.
#[derive(Debug, Clone, Default)]
pub struct AttributeRegistry {
    keys: Vec<String>,
    index: HashMap<String, u32>,
}

impl AttributeRegistry {
    /// Builds from keys in first-seen order, deduplicating.
    pub fn build<I, S>(keys: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut reg = Self::default();
        for k in keys {
            reg.insert(k.as_ref());
        }
        reg
    }

    fn insert(&mut self, key: &str) -> u32 {
        if let Some(&id) = self.index.get(key) {
            return id;
        }
        let id = self.keys.len() as u32;
        self.keys.push(key.to_string());
        self.index.insert(key.to_string(), id);
        id
    }

    pub fn id(&self, key: &str) -> Option<u32> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: u32) -> &str {
        &self.keys[id as usize]
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }
}

/// Languages with per-language vocabularies. Language ids index the
/// per-language parameter blocks of the model.
#[derive(Debug, Clone, Default)]
pub struct LanguageRegistry {
    codes: Vec<String>,
    index: HashMap<String, u32>,
    vocabs: Vec<Vocabulary>,
}

impl LanguageRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a language with its vocabulary; returns the language id.
    /// Re-registering an existing code replaces its vocabulary.
    pub fn register(&mut self, code: &str, vocab: Vocabulary) -> u32 {
        if let Some(&id) = self.index.get(code) {
            self.vocabs[id as usize] = vocab;
            return id;
        }
        let id = self.codes.len() as u32;
        self.codes.push(code.to_string());
        self.index.insert(code.to_string(), id);
        self.vocabs.push(vocab);
        id
    }

    pub fn id(&self, code: &str) -> Option<u32> {
        self.index.get(code).copied()
    }

    pub fn code(&self, id: u32) -> &str {
        &self.codes[id as usize]
    }

    pub fn vocab(&self, id: u32) -> &Vocabulary {
        &self.vocabs[id as usize]
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.vocabs.iter().map(|v| v.len()).collect()
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub attribute: String,
    pub language: String,
    pub text: String,
}

impl RawRecord {
    pub fn new(attribute: &str, language: &str, text: &str) -> Self {
        RawRecord {
            attribute: attribute.to_string(),
            language: language.to_string(),
            text: text.to_string(),
        }
    }
}

/// Reads `<attribute-key>\t<language-code>\t<text>` records.
pub fn read_corpus_file(path: &Path) -> Result<Vec<RawRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (attr, lang, text) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(l), Some(t)) => (a, l, t),
            _ => {
                return Err(Error::CorpusFormat {
                    line: i + 1,
                    reason: "expected `<attribute>\\t<language>\\t<text>`".into(),
                })
            }
        };
        records.push(RawRecord::new(attr, lang, text));
    }
    Ok(records)
}

/// Builds per-language vocabularies from raw records.
pub fn build_language_registry(
    records: &[RawRecord],
    min_count: usize,
    max_size: usize,
) -> Result<LanguageRegistry> {
    let mut by_lang: Vec<(String, Vec<Vec<String>>)> = Vec::new();
    for rec in records {
        let docs = match by_lang.iter_mut().find(|(code, _)| *code == rec.language) {
            Some((_, docs)) => docs,
            None => {
                by_lang.push((rec.language.clone(), Vec::new()));
                &mut by_lang.last_mut().unwrap().1
            }
        };
        docs.push(tokenize(&rec.text));
    }
    let mut registry = LanguageRegistry::new();
    for (code, docs) in &by_lang {
        let vocab = Vocabulary::build(docs, min_count, max_size)?;
        registry.register(code, vocab);
    }
    Ok(registry)
}

/// One encoded document: word ids plus the attribute and language the whole
/// document carries. `token_attributes`, when present, assigns an attribute
/// per token (used when the conditioning signal is the tag of the target
/// word rather than a document-level attribute).
#[derive(Debug, Clone)]
pub struct Document {
    pub words: Vec<u32>,
    pub attribute: u32,
    pub language: u32,
    pub token_attributes: Option<Vec<u32>>,
}

/// Encoded documents plus the context size n-1 used to cut windows.
#[derive(Debug, Clone)]
pub struct EncodedCorpus {
    pub documents: Vec<Document>,
    pub context_size: usize,
}

/// One training window: n-1 context word ids (left-padded with PAD at
/// document starts), the target word id, and the conditioning ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    pub context: Vec<u32>,
    pub target: u32,
    pub attribute: u32,
    pub language: u32,
}

impl EncodedCorpus {
    /// Cuts every window: a document of length T yields exactly T examples.
    pub fn examples(&self) -> Vec<TrainingExample> {
        let n = self.context_size;
        let mut out = Vec::new();
        for doc in &self.documents {
            for t in 0..doc.words.len() {
                let mut context = vec![PAD_ID; n];
                for (slot, pos) in (t.saturating_sub(n)..t).enumerate() {
                    context[n - (t - pos)] = doc.words[pos];
                    let _ = slot;
                }
                let attribute = doc
                    .token_attributes
                    .as_ref()
                    .map_or(doc.attribute, |tags| tags[t]);
                out.push(TrainingExample {
                    context,
                    target: doc.words[t],
                    attribute,
                    language: doc.language,
                });
            }
        }
        out
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(|d| d.words.len()).sum()
    }
}

/// Encodes raw records against closed registries. Unknown words map to UNK;
/// unknown attribute or language keys are errors.
pub fn encode(
    records: &[RawRecord],
    languages: &LanguageRegistry,
    attributes: &AttributeRegistry,
    context_size: usize,
) -> Result<EncodedCorpus> {
    let mut documents = Vec::with_capacity(records.len());
    for rec in records {
        let language = languages
            .id(&rec.language)
            .ok_or_else(|| Error::UnknownLanguage(rec.language.clone()))?;
        let attribute = attributes
            .id(&rec.attribute)
            .ok_or_else(|| Error::UnknownAttribute(rec.attribute.clone()))?;
        let vocab = languages.vocab(language);
        let words = tokenize(&rec.text)
            .iter()
            .map(|t| vocab.id_or_unk(t))
            .collect();
        documents.push(Document {
            words,
            attribute,
            language,
            token_attributes: None,
        });
    }
    Ok(EncodedCorpus {
        documents,
        context_size,
    })
}

/// Splits a `word_TAG` token at the last underscore.
pub fn split_tagged_token(token: &str) -> Option<(&str, &str)> {
    let pos = token.rfind('_')?;
    let (word, tag) = (&token[..pos], &token[pos + 1..]);
    if word.is_empty() || tag.is_empty() {
        return None;
    }
    Some((word, tag))
}

/// Encodes records whose text tokens are `word_TAG` pairs; each window's
/// attribute becomes the tag of its target word. Tags must already be
/// registered as attributes.
pub fn encode_tagged(
    records: &[RawRecord],
    languages: &LanguageRegistry,
    attributes: &AttributeRegistry,
    context_size: usize,
) -> Result<EncodedCorpus> {
    let mut documents = Vec::with_capacity(records.len());
    for (line, rec) in records.iter().enumerate() {
        let language = languages
            .id(&rec.language)
            .ok_or_else(|| Error::UnknownLanguage(rec.language.clone()))?;
        let attribute = attributes
            .id(&rec.attribute)
            .ok_or_else(|| Error::UnknownAttribute(rec.attribute.clone()))?;
        let vocab = languages.vocab(language);
        let mut words = Vec::new();
        let mut tags = Vec::new();
        for chunk in rec.text.split_whitespace() {
            let (word, tag) = split_tagged_token(chunk).ok_or(Error::CorpusFormat {
                line: line + 1,
                reason: format!("expected `word_TAG` token, got `{chunk}`"),
            })?;
            let tag_id = attributes
                .id(tag)
                .ok_or_else(|| Error::UnknownAttribute(tag.to_string()))?;
            words.push(vocab.id_or_unk(&normalize_token(&word.to_lowercase())));
            tags.push(tag_id);
        }
        documents.push(Document {
            words,
            attribute,
            language,
            token_attributes: Some(tags),
        });
    }
    Ok(EncodedCorpus {
        documents,
        context_size,
    })
}

/// Maps ids back to word strings (UNK/NUM substitutions are not reversible).
pub fn decode(vocab: &Vocabulary, ids: &[u32]) -> Vec<String> {
    ids.iter().map(|&id| vocab.word(id).to_string()).collect()
}

/// Seeded permutation of 0..n. Same seed, same order.
pub fn epoch_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order
}

/// One epoch of batches over `items` in a seeded shuffled order. Every item
/// appears exactly once; the final batch may be short.
pub fn iterate_batches<T>(
    items: &[T],
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Vec<&T>> + '_ {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let order = epoch_permutation(items.len(), seed);
    (0..items.len().div_ceil(batch_size)).map(move |b| {
        order[b * batch_size..((b + 1) * batch_size).min(items.len())]
            .iter()
            .map(|&i| &items[i])
            .collect()
    })
}
