//! Intent accuracy, span-level slot F1, semantic exact match, the slot error
//! taxonomy, and `[CLS]` representation export.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::corpus::{extract_spans, repair_bio, SlotSpan, Utterance};
use crate::error::{Error, Result};
use crate::lajoint::{LaJoint, PredictionLine};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold_intent: String,
    pub pred_intent: String,
    pub gold_tags: Vec<String>,
    pub pred_tags: Vec<String>,
}

impl PredictionRecord {
    pub fn tags_exact(&self) -> bool {
        self.gold_tags == self.pred_tags
    }
}

/// Pairs predictions with gold utterances by id. Predicted tags are
/// lenient-repaired.
pub fn join_predictions(gold: &[Utterance], preds: &[PredictionLine]) -> Result<Vec<PredictionRecord>> {
    let by_id: HashMap<&str, &PredictionLine> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    gold.iter()
        .map(|u| {
            let p = by_id
                .get(u.id.as_str())
                .ok_or_else(|| Error::Validation(format!("no prediction for utterance {}", u.id)))?;
            if p.slots.len() != u.slots.len() {
                return Err(Error::Validation(format!(
                    "utterance {}: {} predicted tags for {} tokens",
                    u.id,
                    p.slots.len(),
                    u.slots.len()
                )));
            }
            let mut pred_tags = p.slots.clone();
            repair_bio(&mut pred_tags);
            Ok(PredictionRecord {
                id: u.id.clone(),
                gold_intent: u.intent.clone(),
                pred_intent: p.intent.clone(),
                gold_tags: u.slots.clone(),
                pred_tags,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub intent_accuracy: f64,
    pub intent_correct: usize,
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub span_true_positives: usize,
    pub pred_spans: usize,
    pub gold_spans: usize,
    pub semantic_em: f64,
    pub em_correct: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn intent_accuracy(records: &[PredictionRecord]) -> f64 {
    ratio(records.iter().filter(|r| r.gold_intent == r.pred_intent).count(), records.len())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpanCounts {
    pub tp: usize,
    pub pred: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        if self.pred == 0 && self.gold == 0 {
            1.0
        } else {
            ratio(self.tp, self.pred)
        }
    }

    pub fn recall(&self) -> f64 {
        if self.pred == 0 && self.gold == 0 {
            1.0
        } else {
            ratio(self.tp, self.gold)
        }
    }

    /// Micro F1; 1.0 when there are no spans on either side.
    pub fn f1(&self) -> f64 {
        if self.pred == 0 && self.gold == 0 {
            return 1.0;
        }
        if self.tp == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / (self.pred + self.gold) as f64
    }
}

pub fn span_counts(records: &[PredictionRecord]) -> SpanCounts {
    let mut c = SpanCounts { tp: 0, pred: 0, gold: 0 };
    for r in records {
        let gold = extract_spans(&r.gold_tags);
        let pred = extract_spans(&r.pred_tags);
        c.tp += pred.iter().filter(|p| gold.contains(p)).count();
        c.pred += pred.len();
        c.gold += gold.len();
    }
    c
}

pub fn slot_f1(records: &[PredictionRecord]) -> f64 {
    span_counts(records).f1()
}

pub fn semantic_em(records: &[PredictionRecord]) -> f64 {
    ratio(
        records
            .iter()
            .filter(|r| r.gold_intent == r.pred_intent && r.tags_exact())
            .count(),
        records.len(),
    )
}

pub fn evaluate(records: &[PredictionRecord]) -> MetricsReport {
    let c = span_counts(records);
    let intent_correct = records.iter().filter(|r| r.gold_intent == r.pred_intent).count();
    let em_correct = records
        .iter()
        .filter(|r| r.gold_intent == r.pred_intent && r.tags_exact())
        .count();
    MetricsReport {
        n: records.len(),
        intent_accuracy: ratio(intent_correct, records.len()),
        intent_correct,
        slot_f1: c.f1(),
        slot_precision: c.precision(),
        slot_recall: c.recall(),
        span_true_positives: c.tp,
        pred_spans: c.pred,
        gold_spans: c.gold,
        semantic_em: ratio(em_correct, records.len()),
        em_correct,
    }
}

pub const PAIRING_CONVENTION: &str =
    "spans paired left-to-right; utterances with both type and boundary errors count as slot_both";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub n_utterance_err: usize,
    pub n_slot_num: usize,
    pub n_slot_type: usize,
    pub n_slot_bound: usize,
    pub n_slot_both: usize,
    pub convention: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotError {
    None,
    Num,
    Type,
    Bound,
    Both,
}

fn pair_error(g: &SlotSpan, p: &SlotSpan) -> (bool, bool) {
    let bound = g.start != p.start || g.end != p.end;
    let ty = g.slot != p.slot;
    (ty, bound)
}

/// Error category of one utterance's slot tags.
pub fn classify(r: &PredictionRecord) -> SlotError {
    if r.tags_exact() {
        return SlotError::None;
    }
    let gold = extract_spans(&r.gold_tags);
    let pred = extract_spans(&r.pred_tags);
    if gold.len() != pred.len() {
        return SlotError::Num;
    }
    let (mut ty, mut bound, mut both) = (false, false, false);
    for (gs, ps) in gold.iter().zip(&pred) {
        match pair_error(gs, ps) {
            (true, true) => both = true,
            (true, false) => ty = true,
            (false, true) => bound = true,
            (false, false) => {}
        }
    }
    if both || (ty && bound) {
        SlotError::Both
    } else if ty {
        SlotError::Type
    } else {
        SlotError::Bound
    }
}

pub fn error_statistics(records: &[PredictionRecord]) -> ErrorStats {
    let mut s = ErrorStats {
        n_utterance_err: 0,
        n_slot_num: 0,
        n_slot_type: 0,
        n_slot_bound: 0,
        n_slot_both: 0,
        convention: PAIRING_CONVENTION.to_string(),
    };
    for r in records {
        let c = classify(r);
        if c != SlotError::None {
            s.n_utterance_err += 1;
        }
        match c {
            SlotError::None => {}
            SlotError::Num => s.n_slot_num += 1,
            SlotError::Type => s.n_slot_type += 1,
            SlotError::Bound => s.n_slot_bound += 1,
            SlotError::Both => s.n_slot_both += 1,
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub id: String,
    pub locale: String,
    pub intent: String,
    pub vector: Vec<f64>,
}

/// `[CLS]` encoder outputs for every utterance.
pub fn cls_representations(model: &LaJoint, store: &ParamStore, us: &[Utterance]) -> Result<Vec<Representation>> {
    us.iter()
        .map(|u| {
            let input = model.assemble(&u.tokens)?;
            let mut g = Graph::new();
            let out = model.forward(&mut g, store, &input, None)?;
            Ok(Representation {
                id: u.id.clone(),
                locale: u.locale.clone(),
                intent: u.intent.clone(),
                vector: g.value(out.cls).iter().copied().collect(),
            })
        })
        .collect()
}

/// TSV with a header row; floats use Rust's shortest round-trip formatting.
pub fn representations_tsv(reps: &[Representation]) -> String {
    let d = reps.first().map_or(0, |r| r.vector.len());
    let mut out = String::from("id\tlocale\tintent");
    for j in 0..d {
        write!(out, "\tdim_{j}").unwrap();
    }
    out.push('\n');
    for r in reps {
        write!(out, "{}\t{}\t{}", r.id, r.locale, r.intent).unwrap();
        for v in &r.vector {
            write!(out, "\t{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_representations_tsv(text: &str) -> Result<Vec<Representation>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Validation("empty representation table".into()))?;
    let d = header.split('\t').count().saturating_sub(3);
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != d + 3 {
                return Err(Error::Validation(format!("row {}: expected {} fields", i + 2, d + 3)));
            }
            let vector = f[3..]
                .iter()
                .map(|x| {
                    x.parse::<f64>()
                        .map_err(|e| Error::Validation(format!("row {}: {e}", i + 2)))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(Representation {
                id: f[0].into(),
                locale: f[1].into(),
                intent: f[2].into(),
                vector,
            })
        })
        .collect()
}

pub fn export_representations(model: &LaJoint, store: &ParamStore, us: &[Utterance], out: &Path) -> Result<usize> {
    let reps = cls_representations(model, store, us)?;
    std::fs::write(out, representations_tsv(&reps)).map_err(|e| Error::io(out, e))?;
    Ok(reps.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    fn rec(gi: &str, pi: &str, gold: &[&str], pred: &[&str]) -> PredictionRecord {
        PredictionRecord {
            id: "r".into(),
            gold_intent: gi.into(),
            pred_intent: pi.into(),
            gold_tags: s(gold),
            pred_tags: s(pred),
        }
    }

    #[test]
    fn intent_accuracy_examples() {
        let ok = rec("a", "a", &["O"], &["O"]);
        let bad = rec("a", "b", &["O"], &["O"]);
        assert_eq!(intent_accuracy(&[ok.clone(), ok.clone()]), 1.0);
        assert_eq!(intent_accuracy(std::slice::from_ref(&bad)), 0.0);
        assert_eq!(intent_accuracy(&[ok.clone(), ok.clone(), ok, bad]), 0.75);
    }

    #[test]
    fn slot_f1_worked_example() {
        let r = rec("a", "a", &["O", "O", "B-fromloc", "O", "O"], &["O", "O", "B-fromloc", "O", "B-toloc"]);
        let c = span_counts(std::slice::from_ref(&r));
        assert_eq!(c.precision(), 0.5);
        assert_eq!(c.recall(), 1.0);
        assert_eq!(slot_f1(&[r]), 2.0 / 3.0);
        let same = rec("a", "a", &["B-x", "I-x"], &["B-x", "I-x"]);
        assert_eq!(slot_f1(&[same]), 1.0);
        assert_eq!(slot_f1(&[rec("a", "a", &["O"], &["O"])]), 1.0);
    }

    #[test]
    fn slot_f1_crafted_corpus() {
        let rs = [
            rec("a", "a", &["B-x", "I-x", "O"], &["B-x", "I-x", "O"]),
            rec("a", "a", &["B-x", "O", "B-y"], &["B-x", "O", "O"]),
            rec("a", "a", &["O", "B-y"], &["B-y", "I-y"]),
            rec("a", "a", &["B-x", "B-y"], &["B-y", "B-x"]),
            rec("a", "a", &["O", "O"], &["O", "B-z"]),
        ];
        // Gold spans 1+2+1+2+0 = 6, pred 1+1+1+2+1 = 6, matches 1+1+0+0+0 = 2.
        let c = span_counts(&rs);
        assert_eq!((c.tp, c.pred, c.gold), (2, 6, 6));
        assert!((slot_f1(&rs) - 2.0 * 2.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn semantic_em_examples() {
        let exact = rec("a", "a", &["B-x"], &["B-x"]);
        let tag_wrong = rec("a", "a", &["B-x", "O"], &["B-x", "B-y"]);
        assert_eq!(semantic_em(&[exact.clone(), tag_wrong.clone()]), 0.5);
        assert_eq!(semantic_em(&[tag_wrong]), 0.0);
        let intent_wrong = rec("a", "b", &["B-x"], &["B-x"]);
        let m = evaluate(&[exact, intent_wrong]);
        assert_eq!((m.em_correct, m.intent_correct, m.n), (1, 1, 2));
    }

    #[test]
    fn error_categories() {
        assert_eq!(classify(&rec("a", "a", &["B-x", "B-y"], &["B-x", "O"])), SlotError::Num);
        assert_eq!(classify(&rec("a", "a", &["B-x", "B-y"], &["B-x", "B-z"])), SlotError::Type);
        assert_eq!(classify(&rec("a", "a", &["B-x", "I-x"], &["B-x", "O"])), SlotError::Bound);
        assert_eq!(classify(&rec("a", "a", &["B-x", "I-x"], &["O", "B-y"])), SlotError::Both);
        assert_eq!(
            classify(&rec("a", "a", &["B-x", "I-x", "B-y"], &["B-x", "O", "B-z"])),
            SlotError::Both
        );
        assert_eq!(classify(&rec("a", "b", &["B-x"], &["B-x"])), SlotError::None);
    }

    #[test]
    fn invariants_on_random_records() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tags = ["O", "B-x", "I-x", "B-y", "I-y"];
        for _ in 0..300 {
            let n = rng.gen_range(1..6);
            let rs: Vec<PredictionRecord> = (0..n)
                .map(|_| {
                    let t = rng.gen_range(1..6);
                    let mut gold: Vec<String> = (0..t).map(|_| tags[rng.gen_range(0..5)].to_string()).collect();
                    let mut pred: Vec<String> = (0..t).map(|_| tags[rng.gen_range(0..5)].to_string()).collect();
                    repair_bio(&mut gold);
                    repair_bio(&mut pred);
                    PredictionRecord {
                        id: "r".into(),
                        gold_intent: ["a", "b"][rng.gen_range(0..2)].into(),
                        pred_intent: ["a", "b"][rng.gen_range(0..2)].into(),
                        gold_tags: gold,
                        pred_tags: pred,
                    }
                })
                .collect();
            let m = evaluate(&rs);
            assert!(m.semantic_em <= m.intent_accuracy);
            let exact = rs.iter().filter(|r| r.tags_exact()).count() as f64 / rs.len() as f64;
            assert!(m.semantic_em <= exact);
            // Brute-force matcher: compare every (start, end, slot) triple.
            let (mut tp, mut np, mut ng) = (0, 0, 0);
            for r in &rs {
                let t = r.gold_tags.len();
                for a in 0..t {
                    for b in a..t {
                        for slot in ["x", "y"] {
                            let is_span = |tags: &[String]| {
                                tags[a] == format!("B-{slot}")
                                    && (a + 1..=b).all(|q| tags[q] == format!("I-{slot}"))
                                    && (b + 1 == t || tags[b + 1] != format!("I-{slot}"))
                            };
                            let (g, p) = (is_span(&r.gold_tags), is_span(&r.pred_tags));
                            ng += g as usize;
                            np += p as usize;
                            tp += (g && p) as usize;
                        }
                    }
                }
            }
            let bf = if np + ng == 0 {
                1.0
            } else if tp == 0 {
                0.0
            } else {
                2.0 * tp as f64 / (np + ng) as f64
            };
            assert!((m.slot_f1 - bf).abs() < 1e-12);
            let es = error_statistics(&rs);
            assert!(es.n_slot_type + es.n_slot_bound + es.n_slot_both + es.n_slot_num == es.n_utterance_err);
        }
    }

    #[test]
    fn join_repairs_and_checks_ids() {
        let u = Utterance {
            id: "1".into(),
            locale: "en".into(),
            intent: "a".into(),
            tokens: s(&["x", "y"]),
            slots: s(&["B-x", "I-x"]),
        };
        let p = PredictionLine {
            id: "1".into(),
            intent: "a".into(),
            slots: s(&["I-x", "I-x"]),
        };
        let rs = join_predictions(std::slice::from_ref(&u), &[p]).unwrap();
        assert_eq!(rs[0].pred_tags, s(&["B-x", "I-x"]));
        assert!(join_predictions(&[u], &[]).is_err());
    }

    #[test]
    fn representation_tsv_round_trip() {
        let reps = vec![
            Representation {
                id: "a".into(),
                locale: "en".into(),
                intent: "i".into(),
                vector: vec![0.1, -1.0 / 3.0, 1e-300],
            },
            Representation {
                id: "b".into(),
                locale: "xx".into(),
                intent: "j".into(),
                vector: vec![2.0, 0.0, f64::MIN_POSITIVE],
            },
        ];
        let text = representations_tsv(&reps);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("id\tlocale\tintent\tdim_0\tdim_1\tdim_2\n"));
        assert_eq!(parse_representations_tsv(&text).unwrap(), reps);
    }
}
