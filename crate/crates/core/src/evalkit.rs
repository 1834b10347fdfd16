//! Exact-match span scoring, multi-seed aggregation and representation
//! dumps.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::error::{Error, Result};
use crate::model::SpanRep;
use crate::protocol::Prediction;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    /// Precision, recall and F1, with 0/0 read as 0.
    pub fn prf1(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_label: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn from_counts(per_label: BTreeMap<String, Counts>) -> Self {
        let total = per_label.values().fold(Counts::default(), |a, c| Counts {
            tp: a.tp + c.tp,
            fp: a.fp + c.fp,
            fn_: a.fn_ + c.fn_,
        });
        let (precision, recall, f1) = total.prf1();
        EvalReport {
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            precision,
            recall,
            f1,
            per_label,
        }
    }
}

/// Micro-averaged exact-match scores. Each gold span can absorb at most one
/// prediction; repeated predictions of the same span count as false
/// positives.
pub fn span_prf1(predictions: &[Prediction], gold: &[Sentence]) -> Result<EvalReport> {
    let ids: HashSet<&str> = gold.iter().map(|s| s.id.as_str()).collect();
    let mut open: HashMap<(&str, usize, usize, &str), usize> = HashMap::new();
    let mut per_label: BTreeMap<String, Counts> = BTreeMap::new();
    for s in gold {
        for a in &s.annotations {
            *open
                .entry((s.id.as_str(), a.start, a.end, a.label.as_str()))
                .or_default() += 1;
            per_label.entry(a.label.clone()).or_default().fn_ += 1;
        }
    }
    for p in predictions {
        if !ids.contains(p.sentence_id.as_str()) {
            return Err(Error::Validation(format!(
                "prediction for unknown sentence `{}`",
                p.sentence_id
            )));
        }
        let counts = per_label.entry(p.label.clone()).or_default();
        match open.get_mut(&(p.sentence_id.as_str(), p.start, p.end, p.label.as_str())) {
            Some(left) if *left > 0 => {
                *left -= 1;
                counts.tp += 1;
                counts.fn_ -= 1;
            }
            _ => counts.fp += 1,
        }
    }
    Ok(EvalReport::from_counts(per_label))
}

/// Mean and sample standard deviation.
pub fn aggregate_runs(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 runs to aggregate, got {}",
            values.len()
        )));
    }
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, &v) in values.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (v - mean);
    }
    Ok((mean, (m2 / (values.len() - 1) as f64).sqrt()))
}

/// `33.71 ± 1.75`.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

const META_COLUMNS: [&str; 4] = ["sentence_id", "start", "end", "label"];

/// CSV with one row per span. Values are written as the shortest decimal
/// that reads back to the same binary32 number.
pub fn write_representations<W: Write>(writer: W, reps: &[SpanRep]) -> Result<()> {
    let Some(first) = reps.first() else {
        return Err(Error::Contract("nothing to dump".into()));
    };
    let d = first.vector.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for r in reps {
        if r.vector.len() != d {
            return Err(Error::dim("representation dump", &[d], &[r.vector.len()]));
        }
        let mut row = vec![
            r.sentence_id.clone(),
            r.start.to_string(),
            r.end.to_string(),
            r.label.clone(),
        ];
        row.extend(r.vector.iter().map(|&x| (x as f32).to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn dump_representations(reps: &[SpanRep], path: &Path) -> Result<()> {
    write_representations(File::create(path)?, reps)
}

pub fn read_representations<R: Read>(reader: R) -> Result<Vec<SpanRep>> {
    let mut r = csv::Reader::from_reader(reader);
    let bad = |line: usize, message: String| Error::Parse { line, message };
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() < META_COLUMNS.len() {
            return Err(bad(line, format!("expected at least 4 columns, got {}", rec.len())));
        }
        let int = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(line, e.to_string()));
        let vector = (4..rec.len())
            .map(|i| {
                rec[i]
                    .parse::<f32>()
                    .map(f64::from)
                    .map_err(|e| bad(line, e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(SpanRep {
            sentence_id: rec[0].to_string(),
            start: int(1)?,
            end: int(2)?,
            label: rec[3].to_string(),
            vector,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{SpanAnnotation, NON_ENTITY};
    use proptest::prelude::*;

    fn pred(id: &str, start: usize, end: usize, label: &str) -> Prediction {
        Prediction {
            sentence_id: id.into(),
            start,
            end,
            label: label.into(),
            score: 1.0,
        }
    }

    fn sentence(id: &str, n: usize, ann: &[(usize, usize, &str)]) -> Sentence {
        Sentence::new(
            id,
            (0..n).map(|i| format!("t{i}")).collect(),
            ann.iter().map(|&(s, e, l)| SpanAnnotation::new(s, e, l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn formula_example() {
        let gold = [sentence("a", 6, &[(1, 1, "A"), (2, 3, "B"), (4, 4, "A"), (5, 6, "B")])];
        let preds = [pred("a", 1, 1, "A"), pred("a", 2, 3, "B"), pred("a", 6, 6, "A")];
        let r = span_prf1(&preds, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (2, 1, 2));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((r.recall - 0.5).abs() < 1e-15);
        assert!((r.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(r.per_label["A"], Counts { tp: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn empty_and_identity() {
        let gold = [sentence("a", 3, &[(1, 1, "P"), (1, 2, "Q")])];
        let r = span_prf1(&[], &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = span_prf1(&[pred("a", 1, 1, "P"), pred("a", 1, 2, "Q")], &gold).unwrap();
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn duplicates_and_unknown_sentence() {
        let gold = [sentence("a", 3, &[(1, 1, "P")])];
        let r = span_prf1(&[pred("a", 1, 1, "P"), pred("a", 1, 1, "P")], &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert!(span_prf1(&[pred("zzz", 1, 1, "P")], &gold).is_err());
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_runs(&[1.0, 2.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(aggregate_runs(&[0.4; 10]).unwrap().1, 0.0);
        assert!(matches!(aggregate_runs(&[1.0]), Err(Error::Contract(_))));
        assert_eq!(format_mean_std(33.71, 1.75), "33.71 ± 1.75");
    }

    #[test]
    fn dump_layout_and_round_trip() {
        let reps = vec![
            SpanRep {
                sentence_id: "s,1".into(),
                start: 1,
                end: 2,
                vector: vec![f64::from(0.1f32), f64::from(-3.4028235e38f32)],
                label: NON_ENTITY.into(),
            },
            SpanRep {
                sentence_id: "s2".into(),
                start: 3,
                end: 3,
                vector: vec![f64::from(1.0e-7f32), 2.5],
                label: "gene".into(),
            },
        ];
        let mut buf = Vec::new();
        write_representations(&mut buf, &reps).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sentence_id,start,end,label,v0,v1\n"));
        let back = read_representations(&buf[..]).unwrap();
        assert_eq!(back, reps);
        assert!(write_representations(Vec::new(), &[]).is_err());
    }

    type Tuple = (usize, usize, usize, usize);

    fn tuples() -> impl Strategy<Value = Vec<Tuple>> {
        prop::collection::vec((0usize..3, 1usize..6, 0usize..3, 0usize..3), 0..25)
    }

    fn to_spans(t: &[Tuple]) -> Vec<(String, usize, usize, String)> {
        t.iter()
            .map(|&(s, p, len, l)| (format!("s{s}"), p, (p + len).min(8), format!("L{l}")))
            .collect()
    }

    fn gold_from(spans: &[(String, usize, usize, String)]) -> Vec<Sentence> {
        (0..3)
            .map(|k| {
                let id = format!("s{k}");
                let mut seen = HashSet::new();
                let ann: Vec<SpanAnnotation> = spans
                    .iter()
                    .filter(|x| x.0 == id && seen.insert((x.1, x.2, x.3.clone())))
                    .map(|x| SpanAnnotation::new(x.1, x.2, x.3.clone()))
                    .collect();
                Sentence::new(id, (0..8).map(|i| format!("t{i}")).collect(), ann).unwrap()
            })
            .collect()
    }

    proptest! {
        #[test]
        fn matches_set_intersection(g in tuples(), p in tuples()) {
            let gold = gold_from(&to_spans(&g));
            let preds: Vec<Prediction> = to_spans(&p).into_iter().map(|x| pred(&x.0, x.1, x.2, &x.3)).collect();
            let gold_set: HashSet<(String, usize, usize, String)> = gold
                .iter()
                .flat_map(|s| s.annotations.iter().map(move |a| (s.id.clone(), a.start, a.end, a.label.clone())))
                .collect();
            let pred_set: HashSet<(String, usize, usize, String)> = preds
                .iter()
                .map(|x| (x.sentence_id.clone(), x.start, x.end, x.label.clone()))
                .collect();
            // without duplicate predictions the report is plain set algebra
            let dedup: Vec<Prediction> = pred_set.iter().map(|x| pred(&x.0, x.1, x.2, &x.3)).collect();
            let r = span_prf1(&dedup, &gold).unwrap();
            let tp = gold_set.intersection(&pred_set).count();
            prop_assert_eq!(r.tp, tp);
            prop_assert_eq!(r.fp, pred_set.len() - tp);
            prop_assert_eq!(r.fn_, gold_set.len() - tp);
            let r = span_prf1(&preds, &gold).unwrap();
            prop_assert_eq!(r.tp + r.fp, preds.len());
            prop_assert_eq!(r.tp, tp);
        }

        #[test]
        fn swapping_roles_swaps_precision_and_recall(g in tuples(), p in tuples()) {
            let gold_a = gold_from(&to_spans(&g));
            let gold_b = gold_from(&to_spans(&p));
            let as_preds = |gold: &[Sentence]| -> Vec<Prediction> {
                gold.iter()
                    .flat_map(|s| s.annotations.iter().map(move |a| pred(&s.id, a.start, a.end, &a.label)))
                    .collect()
            };
            let ab = span_prf1(&as_preds(&gold_b), &gold_a).unwrap();
            let ba = span_prf1(&as_preds(&gold_a), &gold_b).unwrap();
            prop_assert_eq!(ab.tp, ba.tp);
            prop_assert_eq!(ab.fp, ba.fn_);
            prop_assert_eq!(ab.precision, ba.recall);
            prop_assert_eq!(ab.f1, ba.f1);
        }

        #[test]
        fn aggregation_is_permutation_invariant(mut v in prop::collection::vec(0.0f64..100.0, 2..12), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (m, s) = aggregate_runs(&v).unwrap();
            v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (m2, s2) = aggregate_runs(&v).unwrap();
            prop_assert!((m - m2).abs() < 1e-9 && (s - s2).abs() < 1e-9);
        }
    }
}
