//! Levenshtein-based character and word error rates.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Edit distance plus the operation counts along one optimal path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

/// Minimal substitutions + deletions + insertions turning `reference` into
/// `hypothesis`.
///
/// Operation counts follow the backtrace that prefers substitution (or
/// match), then deletion, then insertion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i * w + j] = (dp[(i - 1) * w + j - 1] + cost)
                .min(dp[(i - 1) * w + j] + 1)
                .min(dp[i * w + j - 1] + 1);
        }
    }

    let mut ops = EditOps {
        distance: dp[n * w + m],
        ..EditOps::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[(i - 1) * w + j - 1] + cost == here {
                ops.substitutions += cost;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}

/// Scoring granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Char => "char",
            Unit::Word => "word",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceRecord {
    pub id: String,
    pub reference_len: usize,
    pub ops: EditOps,
}

/// Corpus-level (micro-averaged) error rate with per-sentence detail.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub unit: Unit,
    pub error_rate: f64,
    pub reference_len: usize,
    pub ops: EditOps,
    pub sentences: Vec<SentenceRecord>,
}

/// One scored pair: id, reference tokens, hypothesis tokens.
pub type ScoredPair<T> = (String, Vec<T>, Vec<T>);

/// Sums distances and reference lengths over the whole corpus.
pub fn score_corpus<T: PartialEq>(pairs: &[ScoredPair<T>], unit: Unit) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = EditOps::default();
    let mut reference_len = 0;
    let mut sentences = Vec::with_capacity(pairs.len());
    for (id, r, h) in pairs {
        if r.is_empty() {
            return Err(Error::EmptyReference(id.clone()));
        }
        let ops = edit_distance(r, h);
        total.distance += ops.distance;
        total.substitutions += ops.substitutions;
        total.deletions += ops.deletions;
        total.insertions += ops.insertions;
        reference_len += r.len();
        sentences.push(SentenceRecord {
            id: id.clone(),
            reference_len: r.len(),
            ops,
        });
    }
    Ok(EvalReport {
        unit,
        error_rate: total.distance as f64 / reference_len as f64,
        reference_len,
        ops: total,
        sentences,
    })
}

/// Column order of [`EvalReport::to_csv`].
pub const REPORT_COLUMNS: &str =
    "id,unit,reference_len,distance,substitutions,deletions,insertions,error_rate";

impl EvalReport {
    /// Per-sentence rows followed by a `TOTAL` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_COLUMNS);
        out.push('\n');
        let mut row = |id: &str, len: usize, ops: &EditOps| {
            let rate = ops.distance as f64 / len as f64;
            let _ = writeln!(
                out,
                "{id},{},{len},{},{},{},{},{rate:.9}",
                self.unit.as_str(),
                ops.distance,
                ops.substitutions,
                ops.deletions,
                ops.insertions
            );
        };
        for s in &self.sentences {
            row(&s.id, s.reference_len, &s.ops);
        }
        row("TOTAL", self.reference_len, &self.ops);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Splits a decoded label sequence into words by aligning it against the
/// reference and inheriting the reference word of each aligned position.
/// Inserted labels join the word of the preceding reference label.
///
/// `word_ends` holds the exclusive end index of each reference word.
pub fn project_words<T: PartialEq + Clone>(
    reference: &[T],
    word_ends: &[usize],
    hypothesis: &[T],
) -> Vec<Vec<T>> {
    let word_of = |pos: usize| word_ends.iter().position(|&e| pos < e).unwrap_or(word_ends.len().saturating_sub(1));
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            dp[i * w + j] = (dp[(i - 1) * w + j - 1] + cost)
                .min(dp[(i - 1) * w + j] + 1)
                .min(dp[i * w + j - 1] + 1);
        }
    }
    // hypothesis index → reference position it attaches to
    let mut anchor = vec![0usize; m];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[(i - 1) * w + j - 1] + cost == here {
                anchor[j - 1] = i - 1;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            i -= 1;
        } else {
            anchor[j - 1] = i.saturating_sub(1);
            j -= 1;
        }
    }
    let mut words: Vec<Vec<T>> = vec![Vec::new(); word_ends.len().max(1)];
    for (h, a) in hypothesis.iter().zip(anchor) {
        words[word_of(a)].push(h.clone());
    }
    words.retain(|w| !w.is_empty());
    words
}

/// Splits a reference label sequence at `word_ends`.
pub fn split_words<T: Clone>(labels: &[T], word_ends: &[usize]) -> Vec<Vec<T>> {
    let mut start = 0;
    word_ends
        .iter()
        .map(|&end| {
            let w = labels[start..end].to_vec();
            start = end;
            w
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    /// Exponential recursion straight from the definition.
    fn brute(a: &[u8], b: &[u8]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = brute(ra, rb) + usize::from(x != y);
                sub.min(brute(ra, b) + 1).min(brute(a, rb) + 1)
            }
        }
    }

    #[test]
    fn identical_is_zero() {
        assert_eq!(edit_distance(b"abc", b"abc").distance, 0);
    }

    #[test]
    fn empty_hypothesis_is_all_deletions() {
        let ops = edit_distance(b"abc", b"");
        assert_eq!((ops.distance, ops.deletions), (3, 3));
    }

    #[test]
    fn tie_break_prefers_substitution() {
        let ops = edit_distance(b"ab", b"ba");
        assert_eq!((ops.distance, ops.substitutions), (2, 2));
    }

    #[test]
    fn corpus_is_micro_averaged() {
        let pairs = vec![
            ("a".to_string(), b"ab".to_vec(), b"ab".to_vec()),
            ("b".to_string(), b"cd".to_vec(), b"ce".to_vec()),
        ];
        let r = score_corpus(&pairs, Unit::Char).unwrap();
        assert_eq!(r.error_rate, 0.25);
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_COLUMNS));
        assert!(csv.lines().last().unwrap().starts_with("TOTAL,char,4,1,1,0,0"));
    }

    #[test]
    fn empty_reference_names_sample() {
        let pairs = vec![("s7".to_string(), Vec::<u8>::new(), vec![1])];
        assert!(matches!(score_corpus(&pairs, Unit::Char), Err(Error::EmptyReference(id)) if id == "s7"));
        assert!(matches!(score_corpus::<u8>(&[], Unit::Char), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn word_projection() {
        let reference = [1, 2, 3, 4, 5];
        let ends = [2, 5];
        assert_eq!(split_words(&reference, &ends), vec![vec![1, 2], vec![3, 4, 5]]);
        assert_eq!(project_words(&reference, &ends, &reference), vec![vec![1, 2], vec![3, 4, 5]]);
        // substitution in the second word, insertion after the first
        let hyp = [1, 2, 9, 3, 7, 5];
        assert_eq!(project_words(&reference, &ends, &hyp), vec![vec![1, 2, 9], vec![3, 7, 5]]);
    }

    proptest! {
        #[test]
        fn matches_recursive_definition(a in prop::collection::vec(0u8..3, 0..=6), b in prop::collection::vec(0u8..3, 0..=6)) {
            let ops = edit_distance(&a, &b);
            prop_assert_eq!(ops.distance, brute(&a, &b));
            prop_assert_eq!(ops.distance, ops.substitutions + ops.deletions + ops.insertions);
        }

        #[test]
        fn is_a_metric(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8), c in prop::collection::vec(0u8..4, 0..8)) {
            let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance;
            prop_assert_eq!(d(&a, &b), d(&b, &a));
            prop_assert_eq!(d(&a, &b) == 0, a == b);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        }

        #[test]
        fn relabeling_preserves_error_rate(a in prop::collection::vec(0u8..4, 1..8), b in prop::collection::vec(0u8..4, 0..8)) {
            let relabel = |x: &[u8]| x.iter().map(|v| (v + 1) % 4).collect::<Vec<_>>();
            prop_assert_eq!(edit_distance(&a, &b), edit_distance(&relabel(&a), &relabel(&b)));
        }
    }
}
