//! Greedy cross-tokenizer alignment of two token streams over the same
//! text: direct 1-1 matches on normalized decoded text, window expansion
//! on mismatch, and final-token activation extraction.

mod fixtures;

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synthdata::ActivationPairBatch;

pub use fixtures::{
    fixture_corpus, parse_token_lines, Document, FixtureKind, FixtureTokenizer, UNK_TOKEN,
};

pub const DEFAULT_MAX_WINDOW: usize = 16;

pub trait Tokenizer {
    fn decode(&self, ids: &[u32]) -> String;
    /// Whitespace-only or special tokens, skipped between windows.
    fn is_non_content(&self, id: u32) -> bool;
}

/// Token ids together with the tokenizer that produced them.
#[derive(Clone, Copy)]
pub struct TokenStream<'a> {
    pub tokens: &'a [u32],
    pub tokenizer: &'a dyn Tokenizer,
}

impl<'a> TokenStream<'a> {
    pub fn new(tokens: &'a [u32], tokenizer: &'a dyn Tokenizer) -> Self {
        Self { tokens, tokenizer }
    }

    fn text(&self, range: Range<usize>) -> String {
        normalize(&self.tokenizer.decode(&self.tokens[range]))
    }

    fn skip_non_content(&self, mut p: usize) -> usize {
        while p < self.tokens.len() && self.tokenizer.is_non_content(self.tokens[p]) {
            p += 1;
        }
        p
    }
}

/// Unicode canonical composition, lower-casing and trimming of surrounding
/// whitespace.
pub fn normalize(s: &str) -> String {
    s.nfc()
        .collect::<String>()
        .to_lowercase()
        .trim()
        .to_string()
}

/// Non-ASCII characters that are neither alphanumeric nor whitespace:
/// typographic quotes, symbols, box drawing, emoji and the like.
pub fn is_special_char(c: char) -> bool {
    !c.is_ascii() && !c.is_alphanumeric() && !c.is_whitespace()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// The diverging windows contain special characters.
    SpecialCharacters,
    /// Both windows reached the expansion bound without matching.
    WindowOverflow,
    /// Texts diverge (including content left over in only one stream).
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentFailure {
    pub position_a: usize,
    pub position_b: usize,
    pub reason: FailureReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentResult {
    /// Final-token index of each matched window, per stream.
    pub pairs: Vec<(usize, usize)>,
    /// The matched windows themselves.
    pub windows: Vec<(Range<usize>, Range<usize>)>,
    pub consumed_a: usize,
    pub consumed_b: usize,
    pub failure: Option<AlignmentFailure>,
}

impl AlignmentResult {
    pub fn is_success(&self) -> bool {
        self.failure.is_none()
    }
}

/// Aligns two tokenizations. Windows grow one token at a time on the side
/// whose normalized text is shorter (A on ties, B when A cannot grow), up
/// to `max_window` tokens per side.
pub fn align(a: TokenStream<'_>, b: TokenStream<'_>, max_window: usize) -> Result<AlignmentResult> {
    if max_window == 0 {
        return Err(Error::config("max_window", "must be at least 1"));
    }
    let (na, nb) = (a.tokens.len(), b.tokens.len());
    let mut out = AlignmentResult {
        pairs: Vec::new(),
        windows: Vec::new(),
        consumed_a: 0,
        consumed_b: 0,
        failure: None,
    };
    let (mut pa, mut pb) = (0, 0);
    loop {
        pa = a.skip_non_content(pa);
        pb = b.skip_non_content(pb);
        if pa >= na || pb >= nb {
            break;
        }
        let (mut ea, mut eb) = (pa + 1, pb + 1);
        let matched = loop {
            let wa = a.text(pa..ea);
            let wb = b.text(pb..eb);
            if wa == wb {
                break true;
            }
            let a_room = ea < na && ea - pa < max_window;
            let b_room = eb < nb && eb - pb < max_window;
            let a_shorter = wa.chars().count() <= wb.chars().count();
            if a_shorter && a_room {
                ea += 1;
            } else if b_room {
                eb += 1;
            } else if a_room {
                ea += 1;
            } else {
                break false;
            }
        };
        if !matched {
            let wa = a.tokenizer.decode(&a.tokens[pa..ea]);
            let wb = b.tokenizer.decode(&b.tokens[pb..eb]);
            let reason = if wa.chars().chain(wb.chars()).any(is_special_char) {
                FailureReason::SpecialCharacters
            } else if (ea - pa == max_window && ea < na) || (eb - pb == max_window && eb < nb) {
                FailureReason::WindowOverflow
            } else {
                FailureReason::Divergence
            };
            out.failure = Some(AlignmentFailure {
                position_a: pa,
                position_b: pb,
                reason,
            });
            break;
        }
        out.pairs.push((ea - 1, eb - 1));
        out.windows.push((pa..ea, pb..eb));
        pa = ea;
        pb = eb;
    }
    out.consumed_a = pa.min(na);
    out.consumed_b = pb.min(nb);
    if out.failure.is_none() && (pa < na || pb < nb) {
        // One stream ran out while the other still holds content.
        let rest_a = a.skip_non_content(pa);
        let rest_b = b.skip_non_content(pb);
        if rest_a < na || rest_b < nb {
            let tail: String = a
                .tokenizer
                .decode(&a.tokens[rest_a..])
                .chars()
                .chain(b.tokenizer.decode(&b.tokens[rest_b..]).chars())
                .collect();
            out.failure = Some(AlignmentFailure {
                position_a: rest_a,
                position_b: rest_b,
                reason: if tail.chars().any(is_special_char) {
                    FailureReason::SpecialCharacters
                } else {
                    FailureReason::Divergence
                },
            });
        } else {
            out.consumed_a = na;
            out.consumed_b = nb;
        }
    }
    Ok(out)
}

/// Gathers activation rows at the recorded final-token positions.
pub fn extract_aligned_activations<S: Scalar>(
    result: &AlignmentResult,
    acts_a: &Array2<S>,
    acts_b: &Array2<S>,
) -> Result<ActivationPairBatch<S>> {
    let ia: Vec<usize> = result.pairs.iter().map(|p| p.0).collect();
    let ib: Vec<usize> = result.pairs.iter().map(|p| p.1).collect();
    let check = |idx: &[usize], rows: usize, which: &str| -> Result<()> {
        match idx.iter().find(|&&i| i >= rows) {
            Some(i) => Err(Error::Shape(format!(
                "pair index {i} out of bounds for {rows} activation rows of model {which}"
            ))),
            None => Ok(()),
        }
    };
    check(&ia, acts_a.nrows(), "A")?;
    check(&ib, acts_b.nrows(), "B")?;
    ActivationPairBatch::new(acts_a.select(Axis(0), &ia), acts_b.select(Axis(0), &ib))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentStats {
    pub documents: usize,
    pub successes: usize,
    /// `None` for an empty corpus.
    pub success_rate: Option<f64>,
    pub failure_reasons: BTreeMap<FailureReason, usize>,
    pub pairs: usize,
}

pub fn alignment_stats(results: &[AlignmentResult]) -> AlignmentStats {
    let mut failure_reasons = BTreeMap::new();
    for r in results {
        if let Some(f) = &r.failure {
            *failure_reasons.entry(f.reason).or_insert(0) += 1;
        }
    }
    let successes = results.iter().filter(|r| r.is_success()).count();
    AlignmentStats {
        documents: results.len(),
        successes,
        success_rate: (!results.is_empty()).then(|| successes as f64 / results.len() as f64),
        failure_reasons,
        pairs: results.iter().map(|r| r.pairs.len()).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Ids index into a fixed list of pieces; pieces that are blank or start
    /// with `<` are non-content.
    struct Pieces(Vec<&'static str>);

    impl Tokenizer for Pieces {
        fn decode(&self, ids: &[u32]) -> String {
            ids.iter().map(|&i| self.0[i as usize]).collect()
        }
        fn is_non_content(&self, id: u32) -> bool {
            let p = self.0[id as usize];
            p.trim().is_empty() || p.starts_with('<')
        }
    }

    fn run(a: Vec<&'static str>, b: Vec<&'static str>) -> AlignmentResult {
        let ta: Vec<u32> = (0..a.len() as u32).collect();
        let tb: Vec<u32> = (0..b.len() as u32).collect();
        let (pa, pb) = (Pieces(a), Pieces(b));
        align(
            TokenStream::new(&ta, &pa),
            TokenStream::new(&tb, &pb),
            DEFAULT_MAX_WINDOW,
        )
        .unwrap()
    }

    #[test]
    fn year_split_example() {
        let r = run(vec!["1989"], vec!["198", "9"]);
        assert_eq!(r.pairs, vec![(0, 1)]);
        assert!(r.is_success());
    }

    #[test]
    fn identical_streams_pair_diagonally() {
        let r = run(vec!["a", " ", "b", "c"], vec!["a", " ", "b", "c"]);
        assert_eq!(r.pairs, vec![(0, 0), (2, 2), (3, 3)]);
    }

    #[test]
    fn irreconcilable_single_tokens() {
        let r = run(vec!["ab"], vec!["cd"]);
        assert!(r.pairs.is_empty());
        let f = r.failure.unwrap();
        assert_eq!((f.position_a, f.position_b), (0, 0));
        assert_eq!(f.reason, FailureReason::Divergence);
    }

    #[test]
    fn skips_specials_and_whitespace() {
        let r = run(
            vec!["<s>", "Hello", " ", "world"],
            vec!["hel", "lo", "  ", " World"],
        );
        assert_eq!(r.pairs, vec![(1, 1), (3, 3)]);
        assert!(r.is_success());
    }

    #[test]
    fn many_to_many_windows() {
        let r = run(vec!["ab", "cd", "e"], vec!["a", "bcde"]);
        assert_eq!(r.pairs, vec![(2, 1)]);
        assert_eq!(r.windows, vec![(0..3, 0..2)]);
    }

    #[test]
    fn smart_quotes_fail_as_special_characters() {
        let r = run(vec!["\u{201c}hi", "\u{201d}"], vec!["\"hi", "\""]);
        assert_eq!(r.failure.unwrap().reason, FailureReason::SpecialCharacters);
    }

    #[test]
    fn overflow_is_reported() {
        let a = vec!["x"; 20];
        let b = vec!["y"; 20];
        let ta: Vec<u32> = vec![0; 20];
        let tb: Vec<u32> = vec![0; 20];
        let (pa, pb) = (Pieces(a), Pieces(b));
        let r = align(TokenStream::new(&ta, &pa), TokenStream::new(&tb, &pb), 4).unwrap();
        assert_eq!(r.failure.unwrap().reason, FailureReason::WindowOverflow);
    }

    #[test]
    fn leftover_content_is_divergence() {
        let r = run(vec!["a", "b"], vec!["a"]);
        assert_eq!(r.pairs, vec![(0, 0)]);
        assert_eq!(r.failure.unwrap().reason, FailureReason::Divergence);
        let r = run(vec!["a", " "], vec!["a"]);
        assert!(r.is_success());
        assert_eq!((r.consumed_a, r.consumed_b), (2, 1));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize("  Caf\u{0065}\u{0301} "), "caf\u{e9}");
        assert_ne!(normalize("\u{201c}"), normalize("\""));
        assert!(is_special_char('\u{201c}') && is_special_char('\u{1f642}'));
        assert!(!is_special_char('\u{e9}') && !is_special_char('a') && !is_special_char('"'));
    }

    #[test]
    fn extraction_examples() {
        let r = run(vec!["1989"], vec!["198", "9"]);
        let acts_a = array![[0.0f64, 0.5]];
        let acts_b = array![[0.0f64, 0.0], [1.0, 1.5]];
        let batch = extract_aligned_activations(&r, &acts_a, &acts_b).unwrap();
        assert_eq!(batch.x_a, array![[0.0, 0.5]]);
        assert_eq!(batch.x_b, array![[1.0, 1.5]]);
        let empty = run(vec!["ab"], vec!["cd"]);
        assert!(extract_aligned_activations(&empty, &acts_a, &acts_b)
            .unwrap()
            .is_empty());
        let short_b = array![[0.0f64, 0.0]];
        assert!(matches!(
            extract_aligned_activations(&r, &acts_a, &short_b),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn stats_examples() {
        assert_eq!(alignment_stats(&[]).success_rate, None);
        let ok = run(vec!["a"], vec!["a"]);
        let bad = run(vec!["ab"], vec!["cd"]);
        let mut results = vec![ok.clone(); 992];
        results.extend(vec![bad; 8]);
        let s = alignment_stats(&results);
        assert_eq!(s.success_rate, Some(0.992));
        assert_eq!(s.failure_reasons[&FailureReason::Divergence], 8);
        assert_eq!(alignment_stats(&[ok]).success_rate, Some(1.0));
    }
}
