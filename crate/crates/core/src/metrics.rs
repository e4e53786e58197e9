//! Micro precision/recall/F1 for triple sets, their element projections, and
//! single-label tasks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{normalize_match, TripleSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(rename = "tp")]
    pub true_positives: usize,
    #[serde(rename = "fp")]
    pub false_positives: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
}

impl MicroScore {
    /// Precision and recall from summed counts. Both are 1 only when the
    /// corpus has no gold items and no predictions at all; a lone zero
    /// denominator scores 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let (precision, recall) = if tp + fp == 0 && tp + fn_ == 0 {
            (1.0, 1.0)
        } else {
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            (p, r)
        };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MicroScore {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

fn check_aligned<T, U>(predictions: &[T], gold: &[U]) -> Result<()> {
    if predictions.len() != gold.len() {
        return Err(Error::AlignmentError { left: predictions.len(), right: gold.len() });
    }
    Ok(())
}

/// Micro score over aligned sentences; a triple counts only when head,
/// relation, and tail all match after normalization.
pub fn score_triples(predictions: &[TripleSet], gold: &[TripleSet]) -> Result<MicroScore> {
    check_aligned(predictions, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, gold) in predictions.iter().zip(gold) {
        let matched = pred.iter().filter(|t| gold.contains(t)).count();
        tp += matched;
        fp += pred.len() - matched;
        fn_ += gold.len() - matched;
    }
    Ok(MicroScore::from_counts(tp, fp, fn_))
}

/// Which component of a triple to project onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Element {
    Head,
    Tail,
    Relation,
}

impl Element {
    fn project<'a>(self, t: &'a crate::model::Triple) -> &'a str {
        match self {
            Element::Head => &t.head,
            Element::Tail => &t.tail,
            Element::Relation => &t.relation,
        }
    }
}

/// Projects every triple onto one element as a per-sentence multiset and
/// micro-scores multiset intersection.
pub fn score_elements(
    predictions: &[TripleSet],
    gold: &[TripleSet],
    element: Element,
) -> Result<MicroScore> {
    check_aligned(predictions, gold)?;
    let counts = |set: &TripleSet| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for t in set.iter() {
            *m.entry(element.project(t).to_string()).or_insert(0) += 1;
        }
        m
    };
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, gold) in predictions.iter().zip(gold) {
        let pc = counts(pred);
        let gc = counts(gold);
        let mut matched = 0;
        for (value, &n) in &pc {
            matched += n.min(gc.get(value).copied().unwrap_or(0));
        }
        let pred_total: usize = pc.values().sum();
        let gold_total: usize = gc.values().sum();
        tp += matched;
        fp += pred_total - matched;
        fn_ += gold_total - matched;
    }
    Ok(MicroScore::from_counts(tp, fp, fn_))
}

/// Single-label micro scoring: a correct prediction is one tp, a wrong one
/// is one fp and one fn, so precision = recall = f1 = accuracy.
pub fn score_labels(predictions: &[String], gold: &[String]) -> Result<MicroScore> {
    check_aligned(predictions, gold)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in predictions.iter().zip(gold) {
        if normalize_match(p) == normalize_match(g) {
            tp += 1;
        } else {
            fp += 1;
            fn_ += 1;
        }
    }
    Ok(MicroScore::from_counts(tp, fp, fn_))
}

/// Named score rows; JSON is the source of truth, the table is derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub score: MicroScore,
}

impl MetricsReport {
    pub fn new(rows: Vec<(&str, MicroScore)>) -> Self {
        MetricsReport {
            rows: rows.into_iter().map(|(name, score)| MetricsRow { name: name.into(), score }).collect(),
        }
    }

    /// Aligned plain-text table with precision/recall/F1 columns.
    pub fn render_table(&self) -> String {
        let name_width =
            self.rows.iter().map(|r| r.name.len()).chain(["metric".len()]).max().unwrap_or(6);
        let mut out = format!(
            "{:<name_width$}  {:>9}  {:>9}  {:>9}  {:>6}  {:>6}  {:>6}\n",
            "metric", "precision", "recall", "f1", "tp", "fp", "fn"
        );
        for row in &self.rows {
            let s = &row.score;
            out.push_str(&format!(
                "{:<name_width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>6}  {:>6}  {:>6}\n",
                row.name,
                s.precision,
                s.recall,
                s.f1,
                s.true_positives,
                s.false_positives,
                s.false_negatives
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Triple;

    fn set(triples: &[(&str, &str, &str)]) -> TripleSet {
        triples.iter().map(|(h, r, t)| Triple::normalized(h, r, t)).collect()
    }

    #[test]
    fn exact_triple_scores_perfectly() {
        let gold = vec![set(&[("Infusion", "treats", "rat")])];
        let pred = vec![set(&[("Infusion", "treats", "rat")])];
        let s = score_triples(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        assert_eq!(s.true_positives, 1);
    }

    #[test]
    fn wrong_head_is_one_fp_and_one_fn() {
        let gold = vec![set(&[("Infusion", "treats", "rat")])];
        let pred = vec![set(&[("injury", "treats", "rat")])];
        let s = score_triples(&pred, &gold).unwrap();
        assert_eq!(s.true_positives, 0);
        assert_eq!(s.false_positives, 1);
        assert_eq!(s.false_negatives, 1);
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn counts_sum_across_sentences() {
        // Sets sized (2,2), (1,2), (0,1) with overlaps 2, 1, 0.
        let gold = vec![
            set(&[("a", "r", "b"), ("c", "r", "d")]),
            set(&[("e", "r", "f"), ("g", "r", "h")]),
            set(&[("i", "r", "j")]),
        ];
        let pred = vec![
            set(&[("a", "r", "b"), ("c", "r", "d")]),
            set(&[("e", "r", "f")]),
            set(&[]),
        ];
        let s = score_triples(&pred, &gold).unwrap();
        assert_eq!((s.true_positives, s.false_positives, s.false_negatives), (3, 0, 2));
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.6);
    }

    #[test]
    fn matching_is_case_insensitive() {
        let gold = vec![set(&[("Infusion", "TREATS", "rat")])];
        let pred = vec![set(&[("infusion", "treats", "RAT")])];
        assert_eq!(score_triples(&pred, &gold).unwrap().f1, 1.0);
    }

    #[test]
    fn element_projection_isolates_errors() {
        let gold = vec![set(&[("Infusion", "treats", "rat")])];
        let pred = vec![set(&[("injury", "treats", "rat")])];
        assert_eq!(score_elements(&pred, &gold, Element::Relation).unwrap().f1, 1.0);
        assert_eq!(score_elements(&pred, &gold, Element::Head).unwrap().f1, 0.0);
        assert_eq!(score_elements(&pred, &gold, Element::Tail).unwrap().f1, 1.0);
    }

    #[test]
    fn element_scoring_uses_multiset_counts() {
        let gold = vec![set(&[("a", "r", "b"), ("c", "r", "d")])];
        let pred = vec![set(&[("a", "r", "b"), ("x", "r", "y")])];
        let s = score_elements(&pred, &gold, Element::Relation).unwrap();
        // Both relation slots match by count even though one triple is wrong.
        assert_eq!(s.true_positives, 2);
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn element_score_never_below_triple_score() {
        let gold = vec![
            set(&[("a", "r1", "b"), ("c", "r2", "d")]),
            set(&[("e", "r1", "f")]),
        ];
        let pred = vec![
            set(&[("a", "r1", "d"), ("c", "r2", "d")]),
            set(&[("e", "r2", "f")]),
        ];
        let triple = score_triples(&pred, &gold).unwrap().f1;
        for el in [Element::Head, Element::Tail, Element::Relation] {
            assert!(score_elements(&pred, &gold, el).unwrap().f1 >= triple);
        }
    }

    #[test]
    fn label_scores_collapse_to_accuracy() {
        let gold: Vec<String> = (0..10).map(|i| format!("L{}", i % 3)).collect();
        let mut pred = gold.clone();
        pred[0] = "WRONG".into();
        pred[4] = "WRONG".into();
        pred[8] = "WRONG".into();
        let s = score_labels(&pred, &gold).unwrap();
        assert_eq!(s.precision, 0.7);
        assert_eq!(s.recall, 0.7);
        assert_eq!(s.f1, 0.7);
    }

    #[test]
    fn label_matching_normalizes() {
        let s = score_labels(&["  effect ".into()], &["Effect".into()]).unwrap();
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn empty_corpus_scores_one_by_convention() {
        let s = score_triples(&[set(&[])], &[set(&[])]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn lone_zero_denominator_scores_zero() {
        // No predictions anywhere but gold exists: precision denominator 0.
        let s = score_triples(&[set(&[])], &[set(&[("a", "r", "b")])]).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn swapping_roles_swaps_precision_and_recall() {
        let a = vec![set(&[("a", "r", "b"), ("x", "r", "y")])];
        let b = vec![set(&[("a", "r", "b"), ("c", "r", "d"), ("e", "r", "f")])];
        let ab = score_triples(&a, &b).unwrap();
        let ba = score_triples(&b, &a).unwrap();
        assert_eq!(ab.precision, ba.recall);
        assert_eq!(ab.recall, ba.precision);
        assert_eq!(ab.f1, ba.f1);
    }

    #[test]
    fn misaligned_lists_are_rejected() {
        let res = score_labels(&["a".into()], &[]);
        assert!(matches!(res, Err(Error::AlignmentError { left: 1, right: 0 })));
    }

    #[test]
    fn table_renders_aligned_rows() {
        let report = MetricsReport::new(vec![
            ("triple", MicroScore::from_counts(89, 11, 11)),
            ("head", MicroScore::from_counts(95, 5, 5)),
        ]);
        let table = report.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("precision"));
        assert!(lines[1].starts_with("triple"));
        assert!(lines[1].contains("0.8900"));
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
