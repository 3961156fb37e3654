//! Lexicon and wordlist handling: text parsing, Hangul jamo conversion,
//! vocabulary construction, and deterministic sampling splits.
//!
//! Everything here works on in-memory strings; reading files is the CLI
//! crate's job.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::rng::{SeedRng, Stream};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataError {
    #[error("line {line}: expected `word<TAB>phoneme phoneme ...`")]
    BadLexiconLine { line: usize },
    #[error("no usable entries in lexicon")]
    EmptyLexicon,
    #[error("token `{token}` is not in the vocabulary")]
    UnknownToken { token: String },
    #[error("language tag `{tag}` is not in the vocabulary")]
    UnknownLanguageTag { tag: String },
    #[error("split sizes need {requested} entries but only {available} are available")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("vocabulary payload is malformed: {reason}")]
    BadVocabulary { reason: &'static str },
}

/// One pronunciation: the written word and its phoneme sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LexiconEntry {
    pub word: String,
    pub phonemes: Vec<String>,
}

/// Parse `word<TAB>phoneme phoneme ...` lines. Blank lines are skipped;
/// anything else malformed is an error with its 1-based line number.
pub fn parse_lexicon(text: &str) -> Result<Vec<LexiconEntry>, DataError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((word, pron)) = line.split_once('\t') else {
            return Err(DataError::BadLexiconLine { line: i + 1 });
        };
        let word = word.trim();
        let phonemes: Vec<String> = pron.split_whitespace().map(String::from).collect();
        if word.is_empty() || phonemes.is_empty() {
            return Err(DataError::BadLexiconLine { line: i + 1 });
        }
        entries.push(LexiconEntry {
            word: word.to_string(),
            phonemes,
        });
    }
    if entries.is_empty() {
        return Err(DataError::EmptyLexicon);
    }
    Ok(entries)
}

/// Parse a one-word-per-line list. `#` lines are comments; blank lines and
/// surrounding whitespace are ignored.
pub fn parse_wordlist(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.trim_end_matches('\r').trim())
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// A word's grapheme tokens: one per Unicode scalar.
pub fn word_graphemes(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

// Hangul syllable composition constants (Unicode chapter 3 arithmetic).
const S_BASE: u32 = 0xAC00;
const S_COUNT: u32 = 11_172;
const V_COUNT: u32 = 21;
const T_COUNT: u32 = 28;

const CHOSEONG: [char; 19] = [
    'ㄱ', 'ㄲ', 'ㄴ', 'ㄷ', 'ㄸ', 'ㄹ', 'ㅁ', 'ㅂ', 'ㅃ', 'ㅅ', 'ㅆ', 'ㅇ', 'ㅈ', 'ㅉ', 'ㅊ',
    'ㅋ', 'ㅌ', 'ㅍ', 'ㅎ',
];

const JUNGSEONG: [char; 21] = [
    'ㅏ', 'ㅐ', 'ㅑ', 'ㅒ', 'ㅓ', 'ㅔ', 'ㅕ', 'ㅖ', 'ㅗ', 'ㅘ', 'ㅙ', 'ㅚ', 'ㅛ', 'ㅜ', 'ㅝ',
    'ㅞ', 'ㅟ', 'ㅠ', 'ㅡ', 'ㅢ', 'ㅣ',
];

// Index 0 is the empty tail.
const JONGSEONG: [char; 27] = [
    'ㄱ', 'ㄲ', 'ㄳ', 'ㄴ', 'ㄵ', 'ㄶ', 'ㄷ', 'ㄹ', 'ㄺ', 'ㄻ', 'ㄼ', 'ㄽ', 'ㄾ', 'ㄿ', 'ㅀ',
    'ㅁ', 'ㅂ', 'ㅄ', 'ㅅ', 'ㅆ', 'ㅇ', 'ㅈ', 'ㅊ', 'ㅋ', 'ㅌ', 'ㅍ', 'ㅎ',
];

fn lead_index(c: char) -> Option<u32> {
    CHOSEONG.iter().position(|&x| x == c).map(|i| i as u32)
}

fn vowel_index(c: char) -> Option<u32> {
    JUNGSEONG.iter().position(|&x| x == c).map(|i| i as u32)
}

fn tail_index(c: char) -> Option<u32> {
    JONGSEONG.iter().position(|&x| x == c).map(|i| i as u32 + 1)
}

/// Replace each precomposed Hangul syllable with its compatibility jamo
/// (lead, vowel, and tail when present). Non-syllable characters pass
/// through unchanged.
pub fn decompose_hangul(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        let cp = c as u32;
        if (S_BASE..S_BASE + S_COUNT).contains(&cp) {
            let index = cp - S_BASE;
            let lead = index / (V_COUNT * T_COUNT);
            let vowel = (index % (V_COUNT * T_COUNT)) / T_COUNT;
            let tail = index % T_COUNT;
            out.push(CHOSEONG[lead as usize]);
            out.push(JUNGSEONG[vowel as usize]);
            if tail > 0 {
                out.push(JONGSEONG[tail as usize - 1]);
            }
        } else {
            out.push(c);
        }
    }
    out
}

/// Greedy inverse of [`decompose_hangul`]: a lead+vowel pair starts a
/// syllable and a following tail consonant joins it unless that consonant
/// itself starts the next syllable. Characters that fit no syllable pass
/// through.
pub fn recompose_jamo(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < chars.len() {
        let (Some(l), Some(v)) = (
            lead_index(chars[i]),
            chars.get(i + 1).copied().and_then(vowel_index),
        ) else {
            out.push(chars[i]);
            i += 1;
            continue;
        };
        i += 2;
        let mut tail = 0u32;
        if let Some(&c) = chars.get(i) {
            if let Some(t) = tail_index(c) {
                let starts_next_syllable = lead_index(c).is_some()
                    && chars.get(i + 1).copied().and_then(vowel_index).is_some();
                if !starts_next_syllable {
                    tail = t;
                    i += 1;
                }
            }
        }
        let cp = S_BASE + (l * V_COUNT + v) * T_COUNT + tail;
        out.push(char::from_u32(cp).expect("composed syllable in range"));
    }
    out
}

/// Token table: five reserved tokens, then language tags, then regular
/// tokens in sorted order. Ids are dense and deterministic for a given
/// token set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
    num_tags: usize,
}

impl Vocabulary {
    /// Build from observed tokens (any order, duplicates fine) and language
    /// tags. Observed tokens equal to a reserved token or tag are absorbed.
    pub fn build<I, S>(observed: I, tags: &[&str]) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut tag_list: Vec<String> = tags.iter().map(|s| s.to_string()).collect();
        tag_list.sort();
        tag_list.dedup();
        tokens.extend(tag_list.iter().cloned());
        let head: BTreeSet<&String> = tokens.iter().collect();
        let mut regular: BTreeSet<String> = BTreeSet::new();
        for t in observed {
            let t = t.as_ref();
            if !head.contains(&t.to_string()) {
                regular.insert(t.to_string());
            }
        }
        drop(head);
        tokens.extend(regular);
        Self::from_parts(tokens, tag_list.len())
    }

    /// Rebuild from a serialized token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>, num_tags: usize) -> Result<Self, DataError> {
        if tokens.len() < RESERVED_TOKENS.len() + num_tags {
            return Err(DataError::BadVocabulary {
                reason: "shorter than its reserved head",
            });
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(DataError::BadVocabulary {
                    reason: "reserved token head is wrong",
                });
            }
        }
        let mut seen = BTreeSet::new();
        for t in &tokens {
            if !seen.insert(t) {
                return Err(DataError::BadVocabulary {
                    reason: "duplicate token",
                });
            }
        }
        Ok(Self::from_parts(tokens, num_tags))
    }

    fn from_parts(tokens: Vec<String>, num_tags: usize) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens,
            index,
            num_tags,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    /// First id after the reserved tokens and language tags. Masking and
    /// random-replacement draws stay at or above this id.
    pub fn first_regular(&self) -> u32 {
        (RESERVED_TOKENS.len() + self.num_tags) as u32
    }

    pub fn num_regular(&self) -> usize {
        self.tokens.len() - self.first_regular() as usize
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// True for ids a masked-prediction objective may corrupt or draw as
    /// random replacements.
    pub fn is_maskable(&self, id: u32) -> bool {
        id >= self.first_regular() && (id as usize) < self.tokens.len()
    }

    /// Ids contained in `other`'s regular tokens but missing here.
    pub fn missing_regular_from<'a>(&self, other: &'a Vocabulary) -> Vec<&'a str> {
        other.tokens[other.first_regular() as usize..]
            .iter()
            .filter(|t| self.id(t).is_none())
            .map(|t| t.as_str())
            .collect()
    }
}

/// Encode a word's graphemes, prefixed by an optional language tag.
/// `strict` turns unknown graphemes into errors instead of `<unk>`.
pub fn encode_source(
    vocab: &Vocabulary,
    word: &str,
    tag: Option<&str>,
    strict: bool,
) -> Result<Vec<u32>, DataError> {
    let mut ids = Vec::with_capacity(word.chars().count() + 1);
    if let Some(tag) = tag {
        let id = vocab.id(tag).ok_or_else(|| DataError::UnknownLanguageTag {
            tag: tag.to_string(),
        })?;
        ids.push(id);
    }
    for g in word.chars() {
        let tok = g.to_string();
        match vocab.id(&tok) {
            Some(id) => ids.push(id),
            None if strict => return Err(DataError::UnknownToken { token: tok }),
            None => ids.push(UNK_ID),
        }
    }
    Ok(ids)
}

/// Encode phoneme tokens; `strict` as in [`encode_source`].
pub fn encode_tokens(
    vocab: &Vocabulary,
    tokens: &[String],
    strict: bool,
) -> Result<Vec<u32>, DataError> {
    tokens
        .iter()
        .map(|t| match vocab.id(t) {
            Some(id) => Ok(id),
            None if strict => Err(DataError::UnknownToken { token: t.clone() }),
            None => Ok(UNK_ID),
        })
        .collect()
}

/// Shuffle `items` with the split substream of `seed` and cut consecutive
/// parts of the requested sizes. Parts are disjoint; leftovers are dropped.
pub fn sample_split<T: Clone>(
    items: &[T],
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Vec<T>>, DataError> {
    let requested: usize = sizes.iter().sum();
    if requested > items.len() {
        return Err(DataError::SplitTooLarge {
            requested,
            available: items.len(),
        });
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = SeedRng::for_stream(seed, Stream::Split);
    rng.shuffle(&mut order);
    let mut parts = Vec::with_capacity(sizes.len());
    let mut cursor = 0;
    for &n in sizes {
        let part = order[cursor..cursor + n]
            .iter()
            .map(|&i| items[i].clone())
            .collect();
        parts.push(part);
        cursor += n;
    }
    Ok(parts)
}

/// Drop every word that appears in `excluded` (used to keep evaluation
/// words out of pretraining text).
pub fn exclude_words(words: Vec<String>, excluded: &[String]) -> Vec<String> {
    let block: BTreeSet<&String> = excluded.iter().collect();
    words.into_iter().filter(|w| !block.contains(w)).collect()
}

/// Sort and deduplicate a wordlist into a canonical order.
pub fn dedupe_words(mut words: Vec<String>) -> Vec<String> {
    words.sort();
    words.dedup();
    words
}
