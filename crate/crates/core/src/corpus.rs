//! Nested-NER corpora: sentences with possibly overlapping labeled spans,
//! exhaustive span enumeration, and N-way K-shot episode sampling.
//!
//! Token positions are 1-based and inclusive on both ends, in memory and on
//! disk. A sentence of `n` tokens has spans `(p, q)` with `1 <= p <= q <= n`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label attached to enumerated spans that match no annotation.
pub const NON_ENTITY: &str = "O";

/// Default upper bound on enumerated span width, in tokens.
pub const DEFAULT_MAX_SPAN_LEN: usize = 16;

/// A contiguous token range, 1-based and inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        SpanAnnotation {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn span(&self) -> Span {
        Span::new(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(rename = "entities", default)]
    pub annotations: Vec<SpanAnnotation>,
}

impl Sentence {
    pub fn new(id: impl Into<String>, tokens: Vec<String>, annotations: Vec<SpanAnnotation>) -> Result<Self> {
        let sentence = Sentence {
            id: id.into(),
            tokens,
            annotations,
        };
        sentence.validate()?;
        Ok(sentence)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Validation(format!("sentence `{}` has no tokens", self.id)));
        }
        let mut seen = HashSet::new();
        for a in &self.annotations {
            if a.start < 1 || a.start > a.end || a.end > n {
                return Err(Error::Validation(format!(
                    "sentence `{}`: span ({}, {}) outside 1..={n}",
                    self.id, a.start, a.end
                )));
            }
            if a.label.is_empty() {
                return Err(Error::Validation(format!(
                    "sentence `{}`: empty label on span ({}, {})",
                    self.id, a.start, a.end
                )));
            }
            if a.label == NON_ENTITY {
                return Err(Error::Validation(format!(
                    "sentence `{}`: `{NON_ENTITY}` is reserved for non-entities",
                    self.id
                )));
            }
            if !seen.insert((a.start, a.end, a.label.as_str())) {
                return Err(Error::Validation(format!(
                    "sentence `{}`: duplicate annotation ({}, {}, {})",
                    self.id, a.start, a.end, a.label
                )));
            }
        }
        Ok(())
    }

    /// Gold label of a span. When several annotations share the same
    /// boundaries the first one in annotation order wins.
    pub fn label_of(&self, span: Span) -> Option<&str> {
        self.annotations
            .iter()
            .find(|a| a.start == span.start && a.end == span.end)
            .map(|a| a.label.as_str())
    }

    /// Copy of the sentence keeping only annotations whose label is in `labels`.
    pub fn restricted_to(&self, labels: &LabelSet) -> Sentence {
        Sentence {
            id: self.id.clone(),
            tokens: self.tokens.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| labels.contains(&a.label))
                .cloned()
                .collect(),
        }
    }

    fn label_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for a in &self.annotations {
            *counts.entry(a.label.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

/// Ordered (lexicographic) set of entity categories. Never contains
/// [`NON_ENTITY`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: BTreeSet<String>,
}

impl LabelSet {
    pub fn new<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: BTreeSet<String> = labels.into_iter().map(Into::into).collect();
        if labels.contains(NON_ENTITY) {
            return Err(Error::Validation(format!("label set may not contain `{NON_ENTITY}`")));
        }
        Ok(LabelSet { labels })
    }

    pub fn from_sentences(sentences: &[Sentence]) -> Self {
        LabelSet {
            labels: sentences
                .iter()
                .flat_map(|s| s.annotations.iter().map(|a| a.label.clone()))
                .collect(),
        }
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    pub fn is_disjoint(&self, other: &LabelSet) -> bool {
        self.labels.is_disjoint(&other.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub support: Vec<Sentence>,
    pub query: Vec<Sentence>,
    pub label_set: LabelSet,
}

impl Episode {
    pub fn new(
        way: usize,
        shot: usize,
        support: Vec<Sentence>,
        query: Vec<Sentence>,
        label_set: LabelSet,
    ) -> Result<Self> {
        let episode = Episode {
            way,
            shot,
            support,
            query,
            label_set,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn validate(&self) -> Result<()> {
        let support_ids: HashSet<&str> = self.support.iter().map(|s| s.id.as_str()).collect();
        if let Some(s) = self.query.iter().find(|s| support_ids.contains(s.id.as_str())) {
            return Err(Error::Validation(format!(
                "sentence `{}` appears in both support and query",
                s.id
            )));
        }
        let counts = span_counts(&self.support);
        for label in self.label_set.iter() {
            let have = counts.get(label).copied().unwrap_or(0);
            if have < self.shot {
                return Err(Error::Validation(format!(
                    "label `{label}` has {have} support spans, fewer than K = {}",
                    self.shot
                )));
            }
        }
        for s in self.support.iter().chain(&self.query) {
            if let Some(a) = s.annotations.iter().find(|a| !self.label_set.contains(&a.label)) {
                return Err(Error::Validation(format!(
                    "sentence `{}` carries label `{}` outside the episode label set",
                    s.id, a.label
                )));
            }
        }
        Ok(())
    }

    /// Per-label count of annotated support spans.
    pub fn support_counts(&self) -> BTreeMap<String, usize> {
        span_counts(&self.support)
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }
}

fn span_counts(sentences: &[Sentence]) -> BTreeMap<&str, usize> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for a in &s.annotations {
            *counts.entry(a.label.as_str()).or_insert(0) += 1;
        }
    }
    counts
}

/// Reads Corpus JSONL. Blank lines are ignored; every other line must be a
/// complete record.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Vec<Sentence>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: Sentence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        sentence.validate()?;
        out.push(sentence);
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut writer: W, sentences: &[Sentence]) -> Result<()> {
    for s in sentences {
        serde_json::to_writer(&mut writer, s)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// All spans of width at most `max_len`, ordered by `(start, end)`.
pub fn enumerate_spans(sentence: &Sentence, max_len: usize) -> Vec<Span> {
    spans_for_length(sentence.len(), max_len)
}

pub(crate) fn spans_for_length(n: usize, max_len: usize) -> Vec<Span> {
    let mut spans = Vec::new();
    for p in 1..=n {
        let last = n.min(p + max_len.max(1) - 1);
        for q in p..=last {
            spans.push(Span::new(p, q));
        }
    }
    spans
}

/// Greedily adds sentences (in `order`) until every label in `targets` has
/// at least `shot` spans. A sentence is skipped when it does not help any
/// unfilled label, or when `cap` is set and adding it would push some label
/// past the cap.
fn greedy_fill(
    candidates: &[Sentence],
    order: &[usize],
    targets: &LabelSet,
    shot: usize,
    cap: Option<usize>,
) -> std::result::Result<Vec<usize>, String> {
    let mut counts: BTreeMap<&str, usize> = targets.iter().map(|l| (l, 0)).collect();
    let mut chosen = Vec::new();
    let done = |counts: &BTreeMap<&str, usize>| counts.values().all(|&c| c >= shot);
    for &idx in order {
        if done(&counts) {
            break;
        }
        let local = candidates[idx].label_counts();
        let local: Vec<(&str, usize)> = local.into_iter().filter(|(l, _)| targets.contains(l)).collect();
        if local.is_empty() {
            continue;
        }
        if let Some(cap) = cap {
            if local.iter().any(|(l, c)| counts[l] + c > cap) {
                continue;
            }
        }
        if !local.iter().any(|(l, _)| counts[l] < shot) {
            continue;
        }
        for (l, c) in local {
            *counts.get_mut(l).expect("label in targets") += c;
        }
        chosen.push(idx);
    }
    match counts.iter().find(|(_, &c)| c < shot) {
        Some((label, _)) => Err(label.to_string()),
        None => Ok(chosen),
    }
}

/// Samples an N-way K-shot episode from `pool`.
///
/// Labels with at least `2K` annotated spans are eligible; `way` of them are
/// drawn at random. Support and query are then filled greedily from a
/// shuffled sentence order, each class capped at `2K` spans. Annotations
/// outside the sampled label set are dropped from episode sentences.
pub fn sample_episode(pool: &[Sentence], way: usize, shot: usize, seed: u64) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::Contract("way and shot must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = span_counts(pool);
    let mut eligible: Vec<&str> = counts.iter().filter(|(_, &c)| c >= 2 * shot).map(|(&l, _)| l).collect();
    if eligible.len() < way {
        let deficient = counts
            .iter()
            .filter(|(_, &c)| c < 2 * shot)
            .max_by_key(|(_, &c)| c)
            .map(|(l, c)| (l.to_string(), *c));
        return Err(match deficient {
            Some((label, c)) => Error::Sampling {
                label,
                message: format!(
                    "has {c} spans, fewer than 2K = {}; only {} labels eligible for {way}-way",
                    2 * shot,
                    eligible.len()
                ),
            },
            None => Error::Sampling {
                label: "<none>".into(),
                message: format!("pool has {} labels, fewer than N = {way}", counts.len()),
            },
        });
    }
    eligible.shuffle(&mut rng);
    let label_set = LabelSet::new(eligible[..way].iter().copied())?;

    let projected: Vec<Sentence> = pool.iter().map(|s| s.restricted_to(&label_set)).collect();
    let mut order: Vec<usize> = (0..projected.len())
        .filter(|&i| !projected[i].annotations.is_empty())
        .collect();
    order.shuffle(&mut rng);

    let cap = Some(2 * shot);
    let support_idx = greedy_fill(&projected, &order, &label_set, shot, cap).map_err(|label| Error::Sampling {
        label,
        message: format!("could not reach {shot} support spans"),
    })?;
    let support_ids: HashSet<&str> = support_idx.iter().map(|&i| projected[i].id.as_str()).collect();
    let rest: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| !support_ids.contains(projected[i].id.as_str()))
        .collect();
    let query_idx = greedy_fill(&projected, &rest, &label_set, shot, cap).map_err(|label| Error::Sampling {
        label,
        message: format!("could not reach {shot} query spans"),
    })?;

    Episode::new(
        way,
        shot,
        support_idx.iter().map(|&i| projected[i].clone()).collect(),
        query_idx.iter().map(|&i| projected[i].clone()).collect(),
        label_set,
    )
}

/// Splits a target-domain pool into a K-shot fine-tuning set and the
/// remaining test sentences. Every label in the pool gets at least `shot`
/// support spans; sentences carrying several entities may overshoot.
/// Both halves keep pool order.
pub fn build_support_set(pool: &[Sentence], shot: usize, seed: u64) -> Result<(Vec<Sentence>, Vec<Sentence>)> {
    if shot == 0 {
        return Err(Error::Contract("shot must be positive".into()));
    }
    let labels = LabelSet::from_sentences(pool);
    for (label, c) in span_counts(pool) {
        if c < shot {
            return Err(Error::Sampling {
                label: label.to_string(),
                message: format!("has {c} spans, fewer than K = {shot}"),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let mut chosen = greedy_fill(pool, &order, &labels, shot, None).map_err(|label| Error::Sampling {
        label,
        message: format!("could not reach {shot} support spans"),
    })?;
    chosen.sort_unstable();
    let chosen: HashSet<usize> = chosen.into_iter().collect();
    let mut support = Vec::new();
    let mut rest = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        if chosen.contains(&i) {
            support.push(s.clone());
        } else {
            rest.push(s.clone());
        }
    }
    Ok((support, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn single(id: &str, label: &str) -> Sentence {
        Sentence::new(id, toks(&["a", "b", "c"]), vec![SpanAnnotation::new(2, 2, label)]).unwrap()
    }

    #[test]
    fn parses_nested_example() {
        let line = r#"{"id":"g1","tokens":["PAX-5","transcription","is","regulated"],"entities":[{"start":1,"end":1,"type":"protein_molecule"},{"start":1,"end":2,"type":"other_biological_name"}]}"#;
        let parsed = parse_corpus(line.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 1);
        let s = &parsed[0];
        assert_eq!(s.annotations.len(), 2);
        assert_eq!(s.label_of(Span::new(1, 1)), Some("protein_molecule"));
        assert_eq!(s.label_of(Span::new(1, 2)), Some("other_biological_name"));
    }

    #[test]
    fn parses_record_without_entities() {
        let parsed = parse_corpus(r#"{"id":"e","tokens":["x"],"entities":[]}"#.as_bytes()).unwrap();
        assert!(parsed[0].annotations.is_empty());
    }

    #[test]
    fn rejects_out_of_range_span() {
        let line = r#"{"id":"bad","tokens":["a","b","c"],"entities":[{"start":1,"end":5,"type":"X"}]}"#;
        assert!(matches!(parse_corpus(line.as_bytes()), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "{\"id\":\"a\",\"tokens\":[\"x\"],\"entities\":[]}\n{not json}\n";
        match parse_corpus(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_duplicates_and_reserved_label() {
        let dup = vec![SpanAnnotation::new(1, 1, "A"), SpanAnnotation::new(1, 1, "A")];
        assert!(Sentence::new("d", toks(&["a"]), dup).is_err());
        assert!(Sentence::new("o", toks(&["a"]), vec![SpanAnnotation::new(1, 1, NON_ENTITY)]).is_err());
        // same boundaries, different labels is legal nesting
        let ok = vec![SpanAnnotation::new(1, 1, "A"), SpanAnnotation::new(1, 1, "B")];
        assert!(Sentence::new("n", toks(&["a"]), ok).is_ok());
    }

    #[test]
    fn enumeration_counts() {
        let s = Sentence::new("s", toks(&["a", "b", "c"]), vec![]).unwrap();
        let all = enumerate_spans(&s, 3);
        let expected: Vec<Span> = [(1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]
            .iter()
            .map(|&(p, q)| Span::new(p, q))
            .collect();
        assert_eq!(all, expected);
        assert_eq!(enumerate_spans(&s, 1).len(), 3);
        let five = Sentence::new("f", toks(&["a"; 5]), vec![]).unwrap();
        assert_eq!(enumerate_spans(&five, 2).len(), 9);
    }

    #[test]
    fn minimal_one_way_one_shot() {
        let pool: Vec<Sentence> = (0..6).map(|i| single(&format!("s{i}"), "A")).collect();
        let ep = sample_episode(&pool, 1, 1, 3).unwrap();
        assert_eq!(ep.support.len(), 1);
        assert_eq!(ep.query.len(), 1);
    }

    #[test]
    fn insufficient_pool_names_label() {
        let mut pool: Vec<Sentence> = (0..4).map(|i| single(&format!("a{i}"), "A")).collect();
        pool.push(single("b0", "B"));
        match sample_episode(&pool, 2, 1, 0) {
            Err(Error::Sampling { label, .. }) => assert_eq!(label, "B"),
            other => panic!("expected sampling error, got {other:?}"),
        }
    }

    #[test]
    fn support_set_counts_multi_label_sentences() {
        let multi = Sentence::new(
            "m",
            toks(&["a", "b", "c"]),
            vec![
                SpanAnnotation::new(1, 1, "A"),
                SpanAnnotation::new(2, 2, "B"),
                SpanAnnotation::new(3, 3, "C"),
            ],
        )
        .unwrap();
        let mut pool = vec![multi];
        for l in ["A", "B", "C"] {
            for i in 0..6 {
                pool.push(single(&format!("{l}{i}"), l));
            }
        }
        let (support, rest) = build_support_set(&pool, 5, 11).unwrap();
        assert_eq!(support.len() + rest.len(), pool.len());
        let counts = span_counts(&support);
        for l in ["A", "B", "C"] {
            assert!(counts[l] >= 5);
        }
        let sup_ids: HashSet<_> = support.iter().map(|s| &s.id).collect();
        assert!(rest.iter().all(|s| !sup_ids.contains(&s.id)));
    }

    #[test]
    fn one_shot_support_is_one_sentence_per_label() {
        let pool: Vec<Sentence> = ["A", "B", "C"]
            .iter()
            .flat_map(|l| (0..3).map(move |i| single(&format!("{l}{i}"), l)))
            .collect();
        let (support, _) = build_support_set(&pool, 1, 5).unwrap();
        assert_eq!(support.len(), 3);
    }

    #[test]
    fn episode_rejects_foreign_query_label() {
        let labels = LabelSet::new(["A"]).unwrap();
        let err = Episode::new(1, 1, vec![single("s", "A")], vec![single("q", "B")], labels);
        assert!(err.is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_sentence() -> impl Strategy<Value = Sentence> {
            (1usize..12)
                .prop_flat_map(|n| {
                    let ann = (1..=n, 1..=n, 0usize..4)
                        .prop_map(|(a, b, l)| SpanAnnotation::new(a.min(b), a.max(b), format!("T{l}")));
                    (
                        "[a-z]{1,6}",
                        prop::collection::vec("[A-Za-z0-9\\-\"é]{1,5}", n),
                        prop::collection::vec(ann, 0..6),
                    )
                })
                .prop_map(|(id, tokens, mut ann)| {
                    ann.sort_by(|x, y| (x.start, x.end, &x.label).cmp(&(y.start, y.end, &y.label)));
                    ann.dedup();
                    Sentence::new(id, tokens, ann).unwrap()
                })
        }

        proptest! {
            #[test]
            fn write_then_parse_is_identity(sentences in prop::collection::vec(arb_sentence(), 0..6)) {
                let mut buf = Vec::new();
                write_corpus(&mut buf, &sentences).unwrap();
                prop_assert_eq!(parse_corpus(buf.as_slice()).unwrap(), sentences);
            }

            #[test]
            fn enumeration_matches_brute_force(n in 1usize..=20, max_len in 1usize..=20) {
                let s = Sentence::new("s", vec!["x".to_string(); n], vec![]).unwrap();
                let mut brute = Vec::new();
                for p in 1..=n {
                    for q in p..=n {
                        if q - p < max_len {
                            brute.push(Span::new(p, q));
                        }
                    }
                }
                let got = enumerate_spans(&s, max_len);
                let m = max_len.min(n);
                prop_assert_eq!(got.len(), m * (2 * n - m + 1) / 2);
                prop_assert_eq!(got, brute);
            }
        }
    }
}
