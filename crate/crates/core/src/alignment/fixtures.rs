//! Deterministic fixture tokenizers and a generated text corpus.
//!
//! Token ids below `0x110000` are Unicode code points. Higher ids are
//! special tokens, merge-table pieces and whole words.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{is_special_char, Tokenizer};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

pub const UNK_TOKEN: u32 = 0x11_0000;
pub const BOS_TOKEN: u32 = 0x11_0001;
const MERGE_BASE: u32 = 0x12_0000;
const WORD_BASE: u32 = 0x13_0000;

const MERGES: &[&str] = &[
    "the", "ing", "and", "ion", "ment", "er", "th", "in", "on", "at", "re", "ou", "an", "ed", "st",
    "19", "198", "20", "00",
];

const WORDS: &[&str] = &[
    "the",
    "a",
    "of",
    "and",
    "to",
    "in",
    "is",
    "was",
    "for",
    "on",
    "that",
    "with",
    "as",
    "it",
    "model",
    "models",
    "feature",
    "features",
    "shared",
    "exclusive",
    "concept",
    "concepts",
    "data",
    "training",
    "language",
    "token",
    "tokens",
    "window",
    "text",
    "result",
    "results",
    "small",
    "large",
    "new",
    "old",
    "first",
    "second",
    "river",
    "mountain",
    "city",
    "library",
    "music",
    "garden",
    "station",
    "morning",
    "evening",
    "history",
    "science",
    "report",
    "people",
    "after",
    "before",
    "between",
    "during",
    "under",
    "over",
    "1989",
    "2024",
    "100",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    /// One token per character.
    Char,
    /// Whole vocabulary words, falling back to characters.
    Word,
    /// Greedy longest match over a fixed merge table, else characters.
    Merge,
}

/// A fixture tokenizer. A lossy tokenizer maps every special character
/// (see [`is_special_char`]) to an unknown token that decodes to U+FFFD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureTokenizer {
    pub kind: FixtureKind,
    pub lossy: bool,
}

impl FromStr for FixtureTokenizer {
    type Err = Error;

    /// `char`, `word` or `merge`, optionally suffixed with `+lossy`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, lossy) = match s.strip_suffix("+lossy") {
            Some(n) => (n, true),
            None => (s, false),
        };
        let kind = match name {
            "char" => FixtureKind::Char,
            "word" => FixtureKind::Word,
            "merge" => FixtureKind::Merge,
            other => {
                return Err(Error::config(
                    "tokenizer",
                    format!("unknown fixture `{other}` (expected char, word or merge)"),
                ))
            }
        };
        Ok(Self { kind, lossy })
    }
}

impl FixtureTokenizer {
    pub fn new(kind: FixtureKind, lossy: bool) -> Self {
        Self { kind, lossy }
    }

    fn char_id(&self, c: char) -> u32 {
        if self.lossy && is_special_char(c) {
            UNK_TOKEN
        } else {
            c as u32
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let chars: Vec<char> = text.chars().collect();
        let mut out = Vec::new();
        match self.kind {
            FixtureKind::Char => out.extend(chars.iter().map(|&c| self.char_id(c))),
            FixtureKind::Merge => {
                out.push(BOS_TOKEN);
                let mut i = 0;
                while i < chars.len() {
                    let best = MERGES
                        .iter()
                        .enumerate()
                        .filter(|(_, m)| {
                            let n = m.chars().count();
                            i + n <= chars.len() && chars[i..i + n].iter().copied().eq(m.chars())
                        })
                        .max_by_key(|(idx, m)| (m.chars().count(), usize::MAX - idx));
                    match best {
                        Some((idx, m)) => {
                            out.push(MERGE_BASE + idx as u32);
                            i += m.chars().count();
                        }
                        None => {
                            out.push(self.char_id(chars[i]));
                            i += 1;
                        }
                    }
                }
            }
            FixtureKind::Word => {
                out.push(BOS_TOKEN);
                let mut i = 0;
                while i < chars.len() {
                    if chars[i].is_alphanumeric() {
                        let start = i;
                        while i < chars.len() && chars[i].is_alphanumeric() {
                            i += 1;
                        }
                        let word: String = chars[start..i].iter().collect();
                        match WORDS.iter().position(|w| *w == word) {
                            Some(idx) => out.push(WORD_BASE + idx as u32),
                            None => out.extend(chars[start..i].iter().map(|&c| self.char_id(c))),
                        }
                    } else {
                        out.push(self.char_id(chars[i]));
                        i += 1;
                    }
                }
            }
        }
        out
    }

    fn piece(id: u32) -> String {
        match id {
            UNK_TOKEN => "\u{fffd}".to_string(),
            BOS_TOKEN => String::new(),
            _ if id >= WORD_BASE => WORDS
                .get((id - WORD_BASE) as usize)
                .copied()
                .unwrap_or("\u{fffd}")
                .to_string(),
            _ if id >= MERGE_BASE => MERGES
                .get((id - MERGE_BASE) as usize)
                .copied()
                .unwrap_or("\u{fffd}")
                .to_string(),
            _ => char::from_u32(id)
                .map(String::from)
                .unwrap_or_else(|| "\u{fffd}".to_string()),
        }
    }
}

impl Tokenizer for FixtureTokenizer {
    fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| Self::piece(i)).collect()
    }

    fn is_non_content(&self, id: u32) -> bool {
        id == BOS_TOKEN || Self::piece(id).chars().all(char::is_whitespace)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub text: String,
    /// Carries an injected smart-quote or emoji divergence.
    pub injected: bool,
}

const INJECTIONS: &[(&str, &str)] = &[
    ("\u{201c}", "\u{201d}"),
    ("\u{2018}", "\u{2019}"),
    ("\u{1f642} ", ""),
    ("\u{1f44d}\u{1f3fd} ", ""),
];

/// `n_docs` documents of short sentences over the fixture vocabulary;
/// `round(n_docs * injection_rate)` of them get one smart-quoted word or
/// emoji inserted.
pub fn fixture_corpus(n_docs: usize, injection_rate: f64, seed: u64) -> Vec<Document> {
    let mut pick = stream_rng(seed, Stream::Corpus, u64::MAX);
    let n_inject = ((n_docs as f64) * injection_rate).round() as usize;
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut pick);
    let mut injected = vec![false; n_docs];
    for &d in order.iter().take(n_inject) {
        injected[d] = true;
    }
    (0..n_docs)
        .map(|d| {
            let mut rng = stream_rng(seed, Stream::Corpus, d as u64);
            let mut words: Vec<String> = Vec::new();
            for _ in 0..rng.gen_range(2..=4) {
                let len = rng.gen_range(5..=12);
                for w in 0..len {
                    let mut word = if rng.gen_bool(0.08) {
                        rng.gen_range(0..10_000).to_string()
                    } else {
                        WORDS[rng.gen_range(0..WORDS.len())].to_string()
                    };
                    if w == 0 {
                        let mut cs = word.chars();
                        if let Some(f) = cs.next() {
                            word = f.to_uppercase().chain(cs).collect();
                        }
                    }
                    if w + 1 == len {
                        word.push('.');
                    } else if rng.gen_bool(0.1) {
                        word.push(',');
                    }
                    words.push(word);
                }
            }
            if injected[d] {
                let at = rng.gen_range(1..words.len());
                let (open, close) = INJECTIONS[rng.gen_range(0..INJECTIONS.len())];
                words[at] = format!("{open}{}{close}", words[at]);
            }
            Document {
                text: words.join(" "),
                injected: injected[d],
            }
        })
        .collect()
}

/// One token sequence per line, space-separated integers.
pub fn parse_token_lines(text: &str) -> Result<Vec<Vec<u32>>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<u32>().map_err(|_| {
                        Error::Format(format!("line {}: `{t}` is not a token id", i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_decode() {
        let text = "The 1989 morning, in the station\u{2019}s garden. \u{1f642}";
        for kind in [FixtureKind::Char, FixtureKind::Word, FixtureKind::Merge] {
            let t = FixtureTokenizer::new(kind, false);
            assert_eq!(t.decode(&t.encode(text)), text, "{kind:?}");
        }
        let lossy = FixtureTokenizer::new(FixtureKind::Char, true);
        assert_eq!(lossy.decode(&lossy.encode("a\u{201c}b")), "a\u{fffd}b");
    }

    #[test]
    fn tokenizations_differ() {
        let w = FixtureTokenizer::new(FixtureKind::Word, false).encode("the 1989 station");
        let m = FixtureTokenizer::new(FixtureKind::Merge, false).encode("the 1989 station");
        assert_eq!(w.len(), 6);
        assert_ne!(w.len(), m.len());
        let merge = FixtureTokenizer::new(FixtureKind::Merge, false);
        assert_eq!(merge.decode(&m[3..4]), "198");
        assert_eq!(merge.decode(&m[4..5]), "9");
    }

    #[test]
    fn parse_fixture_names() {
        let t: FixtureTokenizer = "merge+lossy".parse().unwrap();
        assert_eq!(t, FixtureTokenizer::new(FixtureKind::Merge, true));
        assert!("bpe".parse::<FixtureTokenizer>().is_err());
    }

    #[test]
    fn corpus_injection_count_and_determinism() {
        let c = fixture_corpus(200, 0.01, 3);
        assert_eq!(c.iter().filter(|d| d.injected).count(), 2);
        assert_eq!(c, fixture_corpus(200, 0.01, 3));
        assert!(c
            .iter()
            .filter(|d| !d.injected)
            .all(|d| !d.text.chars().any(is_special_char)));
        assert!(c
            .iter()
            .filter(|d| d.injected)
            .all(|d| d.text.chars().any(is_special_char)));
    }

    #[test]
    fn token_lines() {
        assert_eq!(
            parse_token_lines("1 2 3\n\n4").unwrap(),
            vec![vec![1, 2, 3], vec![], vec![4]]
        );
        assert!(parse_token_lines("1 x").is_err());
    }
}
