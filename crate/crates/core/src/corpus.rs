//! SLU corpus data model: utterances with BIO slot tags, the slot/intent
//! schema, span extraction and slot-value statistics.
//!
//! The on-disk format is JSONL, one utterance per line:
//!
//! ```text
//! {"id": "0", "locale": "en", "intent": "flight", "tokens": ["to", "boston"], "slots": ["O", "B-toloc"]}
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTSIDE: &str = "O";

/// Texts fed to the encoder for the abstract labels s_O, s_B and s_I.
pub const ABSTRACT_LABEL_TEXTS: [&str; 3] = ["outside", "begin", "inside"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub locale: String,
    pub intent: String,
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
}

impl Utterance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Vec<SlotSpan> {
        extract_spans(&self.slots)
    }
}

/// A parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Tag<'a> {
    pub fn parse(tag: &'a str) -> Option<Tag<'a>> {
        if tag == OUTSIDE {
            return Some(Tag::Outside);
        }
        let (prefix, slot) = tag.split_at_checked(2)?;
        if slot.is_empty() {
            return None;
        }
        match prefix {
            "B-" => Some(Tag::Begin(slot)),
            "I-" => Some(Tag::Inside(slot)),
            _ => None,
        }
    }

    pub fn slot(&self) -> Option<&'a str> {
        match self {
            Tag::Outside => None,
            Tag::Begin(s) | Tag::Inside(s) => Some(s),
        }
    }
}

/// Ordered slot and intent inventories plus the derived BIO label space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct SlotSchema {
    pub slots: Vec<String>,
    pub intents: Vec<String>,
    slot_index: HashMap<String, usize>,
    intent_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    slots: Vec<String>,
    intents: Vec<String>,
}

impl TryFrom<RawSchema> for SlotSchema {
    type Error = Error;

    fn try_from(r: RawSchema) -> Result<Self> {
        SlotSchema::new(r.slots, r.intents)
    }
}

impl From<SlotSchema> for RawSchema {
    fn from(s: SlotSchema) -> Self {
        RawSchema {
            slots: s.slots,
            intents: s.intents,
        }
    }
}

impl SlotSchema {
    pub fn new(slots: Vec<String>, intents: Vec<String>) -> Result<Self> {
        let mut slot_index = HashMap::new();
        for (i, s) in slots.iter().enumerate() {
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid slot name {s:?}")));
            }
            if slot_index.insert(s.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate slot name {s:?}")));
            }
        }
        let mut intent_index = HashMap::new();
        for (i, s) in intents.iter().enumerate() {
            if intent_index.insert(s.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate intent {s:?}")));
            }
        }
        if intents.is_empty() {
            return Err(Error::Validation("schema has no intents".into()));
        }
        Ok(SlotSchema {
            slots,
            intents,
            slot_index,
            intent_index,
        })
    }

    /// Builds a schema from the slots and intents observed in the given
    /// utterances, each sorted lexicographically.
    pub fn infer<'a>(utterances: impl IntoIterator<Item = &'a Utterance>) -> Result<Self> {
        let mut slots = BTreeSet::new();
        let mut intents = BTreeSet::new();
        for u in utterances {
            intents.insert(u.intent.clone());
            for tag in &u.slots {
                if let Some(slot) = Tag::parse(tag).and_then(|t| t.slot()) {
                    slots.insert(slot.to_string());
                }
            }
        }
        SlotSchema::new(slots.into_iter().collect(), intents.into_iter().collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn num_labels(&self) -> usize {
        2 * self.slots.len() + 1
    }

    pub fn slot_id(&self, slot: &str) -> Option<usize> {
        self.slot_index.get(slot).copied()
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_index.get(intent).copied()
    }

    /// `[O, B-s1, I-s1, ..., B-sK, I-sK]`.
    pub fn bio_labels(&self) -> Vec<String> {
        let mut labels = Vec::with_capacity(self.num_labels());
        labels.push(OUTSIDE.to_string());
        for s in &self.slots {
            labels.push(format!("B-{s}"));
            labels.push(format!("I-{s}"));
        }
        labels
    }

    /// Index of a tag in [`SlotSchema::bio_labels`].
    pub fn label_id(&self, tag: &str) -> Option<usize> {
        match Tag::parse(tag)? {
            Tag::Outside => Some(0),
            Tag::Begin(s) => self.slot_id(s).map(|k| 1 + 2 * k),
            Tag::Inside(s) => self.slot_id(s).map(|k| 2 + 2 * k),
        }
    }

    pub fn label_name(&self, id: usize) -> String {
        if id == 0 {
            OUTSIDE.to_string()
        } else {
            let k = (id - 1) / 2;
            let prefix = if (id - 1).is_multiple_of(2) { "B-" } else { "I-" };
            format!("{prefix}{}", self.slots[k])
        }
    }
}

/// A slot value occupying tokens `start..=end`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotSpan {
    pub start: usize,
    pub end: usize,
    pub slot: String,
}

impl SlotSpan {
    pub fn new(start: usize, end: usize, slot: impl Into<String>) -> Self {
        SlotSpan {
            start,
            end,
            slot: slot.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BioMode {
    Strict,
    Lenient,
}

impl std::str::FromStr for BioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(BioMode::Strict),
            "lenient" => Ok(BioMode::Lenient),
            _ => Err(Error::Config(format!("unknown BIO mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub schema: SlotSchema,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

/// Warnings collected while loading in lenient mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub repaired_tags: usize,
    pub dropped_unknown_slots: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> usize {
        self.repaired_tags + self.dropped_unknown_slots
    }
}

/// Rewrites every orphan `I-x` (not preceded by `B-x` or `I-x`) to `B-x`.
/// Returns the number of rewritten tags. Unparseable tags are left alone.
pub fn repair_bio(tags: &mut [String]) -> usize {
    let mut repaired = 0;
    let mut prev_slot: Option<String> = None;
    for tag in tags.iter_mut() {
        let fix = match Tag::parse(tag) {
            Some(Tag::Inside(s)) if prev_slot.as_deref() != Some(s) => Some(format!("B-{s}")),
            _ => None,
        };
        if let Some(fixed) = fix {
            *tag = fixed;
            repaired += 1;
        }
        prev_slot = Tag::parse(tag).and_then(|t| t.slot()).map(str::to_string);
    }
    repaired
}

/// Checks the BIO grammar only (no schema membership).
pub fn check_bio(tags: &[String]) -> Result<()> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        match Tag::parse(tag) {
            None => return Err(Error::Validation(format!("malformed tag {tag:?} at index {i}"))),
            Some(Tag::Inside(s)) if prev != Some(s) => {
                return Err(Error::Validation(format!("orphan I- tag at index {i}")))
            }
            Some(t) => prev = t.slot(),
        }
    }
    Ok(())
}

/// Validates an utterance against the schema. In lenient mode the utterance
/// is repaired in place (orphan `I-x` becomes `B-x`, unknown slots become `O`).
pub fn validate_utterance(
    u: &mut Utterance,
    schema: &SlotSchema,
    mode: BioMode,
    report: &mut LoadReport,
) -> Result<()> {
    if u.tokens.is_empty() {
        return Err(Error::Validation(format!("utterance {:?} has no tokens", u.id)));
    }
    if u.tokens.len() != u.slots.len() {
        return Err(Error::Validation(format!(
            "utterance {:?}: {} tokens but {} slot tags",
            u.id,
            u.tokens.len(),
            u.slots.len()
        )));
    }
    if schema.intent_id(&u.intent).is_none() {
        return Err(Error::Validation(format!(
            "utterance {:?}: unknown intent {:?}",
            u.id, u.intent
        )));
    }
    for (i, tag) in u.slots.iter_mut().enumerate() {
        let parsed = Tag::parse(tag).ok_or_else(|| {
            Error::Validation(format!("utterance {:?}: malformed tag {tag:?} at index {i}", u.id))
        })?;
        if let Some(slot) = parsed.slot() {
            if schema.slot_id(slot).is_none() {
                match mode {
                    BioMode::Strict => {
                        return Err(Error::Validation(format!(
                            "utterance {:?}: unknown slot {slot:?} at index {i}",
                            u.id
                        )))
                    }
                    BioMode::Lenient => {
                        *tag = OUTSIDE.to_string();
                        report.dropped_unknown_slots += 1;
                    }
                }
            }
        }
    }
    match mode {
        BioMode::Strict => check_bio(&u.slots)
            .map_err(|e| Error::Validation(format!("utterance {:?}: {}", u.id, strip(e)))),
        BioMode::Lenient => {
            report.repaired_tags += repair_bio(&mut u.slots);
            Ok(())
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Validation(msg) => msg,
        other => other.to_string(),
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates a JSONL corpus.
pub fn load_dataset(
    path: &Path,
    schema: &SlotSchema,
    mode: BioMode,
    split: Split,
) -> Result<(Dataset, LoadReport)> {
    let mut utterances: Vec<Utterance> = read_jsonl(path)?;
    let mut report = LoadReport::default();
    for (i, u) in utterances.iter_mut().enumerate() {
        validate_utterance(u, schema, mode, &mut report).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: strip(e),
        })?;
    }
    if report.warnings() > 0 {
        log::warn!(
            "{}: repaired {} orphan I- tags, dropped {} unknown slot tags",
            path.display(),
            report.repaired_tags,
            report.dropped_unknown_slots
        );
    }
    Ok((
        Dataset {
            utterances,
            schema: schema.clone(),
            split,
        },
        report,
    ))
}

/// Maximal `B-x I-x ...` runs, left to right. A stray `I-x` opens a new span,
/// so repaired and unrepaired sequences yield the same spans.
pub fn extract_spans(tags: &[String]) -> Vec<SlotSpan> {
    let mut spans: Vec<SlotSpan> = Vec::new();
    let mut open: Option<SlotSpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        match Tag::parse(tag) {
            Some(Tag::Inside(s)) if open.as_ref().is_some_and(|sp| sp.slot == s) => {
                if let Some(sp) = open.as_mut() {
                    sp.end = i;
                }
            }
            Some(Tag::Begin(s)) | Some(Tag::Inside(s)) => {
                spans.extend(open.take());
                open = Some(SlotSpan::new(i, i, s));
            }
            _ => spans.extend(open.take()),
        }
    }
    spans.extend(open);
    spans
}

/// Inverse of [`extract_spans`].
pub fn spans_to_bio(spans: &[SlotSpan], len: usize) -> Result<Vec<String>> {
    let mut tags = vec![OUTSIDE.to_string(); len];
    let mut used = vec![false; len];
    for sp in spans {
        if sp.start > sp.end || sp.end >= len {
            return Err(Error::Validation(format!(
                "span ({},{},{}) out of range for length {len}",
                sp.start, sp.end, sp.slot
            )));
        }
        for i in sp.start..=sp.end {
            if used[i] {
                return Err(Error::Validation(format!(
                    "overlap at index {i} for span ({},{},{})",
                    sp.start, sp.end, sp.slot
                )));
            }
            used[i] = true;
            tags[i] = if i == sp.start {
                format!("B-{}", sp.slot)
            } else {
                format!("I-{}", sp.slot)
            };
        }
    }
    Ok(tags)
}

/// Case-folded, space-joined surface string of a span.
pub fn span_value(tokens: &[String], span: &SlotSpan) -> String {
    tokens[span.start..=span.end]
        .iter()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits a slot name into lowercase words on `.`, `_`, `-` and
/// lower-to-upper case boundaries: `depart_time.period_of_day` gives
/// `[depart, time, period, of, day]`.
pub fn slot_name_tokens(name: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in name.chars() {
        if matches!(ch, '.' | '_' | '-') || ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        cur.extend(ch.to_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub type FrequencyTable = BTreeMap<String, Vec<(String, usize)>>;

/// Per slot, observed values ordered by count descending, ties lexicographic.
pub fn value_frequency_table(d: &Dataset) -> FrequencyTable {
    let mut counts: BTreeMap<String, HashMap<String, usize>> = BTreeMap::new();
    for u in &d.utterances {
        for sp in extract_spans(&u.slots) {
            let value = span_value(&u.tokens, &sp);
            *counts.entry(sp.slot).or_default().entry(value).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|(slot, values)| {
            let mut v: Vec<(String, usize)> = values.into_iter().collect();
            v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            (slot, v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn utt(id: &str, toks: &[&str], slots: &[&str], intent: &str) -> Utterance {
        Utterance {
            id: id.into(),
            locale: "en".into(),
            intent: intent.into(),
            tokens: tags(toks),
            slots: tags(slots),
        }
    }

    fn schema() -> SlotSchema {
        SlotSchema::new(
            tags(&["fromloc", "toloc", "x"]),
            tags(&["flight", "fare"]),
        )
        .unwrap()
    }

    #[test]
    fn bio_labels_layout() {
        let s = schema();
        assert_eq!(
            s.bio_labels(),
            tags(&["O", "B-fromloc", "I-fromloc", "B-toloc", "I-toloc", "B-x", "I-x"])
        );
        for (i, l) in s.bio_labels().iter().enumerate() {
            assert_eq!(s.label_id(l), Some(i));
            assert_eq!(&s.label_name(i), l);
        }
    }

    #[test]
    fn duplicate_slots_rejected() {
        assert!(SlotSchema::new(tags(&["a", "a"]), tags(&["i"])).is_err());
    }

    #[test]
    fn spans_examples() {
        assert_eq!(
            extract_spans(&tags(&["O", "O", "B-fromloc", "O", "B-toloc"])),
            vec![SlotSpan::new(2, 2, "fromloc"), SlotSpan::new(4, 4, "toloc")]
        );
        assert_eq!(extract_spans(&tags(&["B-x", "I-x", "O"])), vec![SlotSpan::new(0, 1, "x")]);
        assert!(extract_spans(&tags(&["O", "O", "O"])).is_empty());
    }

    #[test]
    fn spans_to_bio_examples() {
        assert_eq!(
            spans_to_bio(&[SlotSpan::new(0, 1, "x")], 3).unwrap(),
            tags(&["B-x", "I-x", "O"])
        );
        assert_eq!(spans_to_bio(&[], 2).unwrap(), tags(&["O", "O"]));
        let err = spans_to_bio(&[SlotSpan::new(0, 0, "x"), SlotSpan::new(0, 0, "y")], 2)
            .unwrap_err();
        assert!(err.to_string().contains("overlap"));
        assert!(spans_to_bio(&[SlotSpan::new(1, 3, "x")], 3).is_err());
    }

    #[test]
    fn strict_rejects_orphan() {
        let mut u = utt("a", &["a", "b"], &["I-x", "O"], "flight");
        let err = validate_utterance(&mut u, &schema(), BioMode::Strict, &mut LoadReport::default())
            .unwrap_err();
        assert!(err.to_string().contains("orphan I- tag at index 0"), "{err}");
    }

    #[test]
    fn lenient_repairs_orphan() {
        let mut u = utt("a", &["a", "b"], &["I-x", "O"], "flight");
        let mut report = LoadReport::default();
        validate_utterance(&mut u, &schema(), BioMode::Lenient, &mut report).unwrap();
        assert_eq!(u.slots, tags(&["B-x", "O"]));
        assert_eq!(report.warnings(), 1);
    }

    #[test]
    fn unknown_slot_and_intent() {
        let mut u = utt("a", &["a"], &["B-zzz"], "flight");
        assert!(validate_utterance(&mut u, &schema(), BioMode::Strict, &mut LoadReport::default())
            .is_err());
        let mut report = LoadReport::default();
        validate_utterance(&mut u, &schema(), BioMode::Lenient, &mut report).unwrap();
        assert_eq!(u.slots, tags(&["O"]));
        let mut u = utt("a", &["a"], &["O"], "nope");
        assert!(
            validate_utterance(&mut u, &schema(), BioMode::Lenient, &mut LoadReport::default())
                .is_err()
        );
    }

    #[test]
    fn length_mismatch_rejected() {
        let mut u = utt("a", &["a", "b"], &["O"], "flight");
        let err = validate_utterance(&mut u, &schema(), BioMode::Lenient, &mut LoadReport::default())
            .unwrap_err();
        assert!(err.to_string().contains("2 tokens but 1"));
    }

    #[test]
    fn load_dataset_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = serde_json::to_string(&utt("1", &["to", "x"], &["O", "B-toloc"], "flight"))
            .unwrap();
        std::fs::write(&path, format!("{good}\n{good}\n")).unwrap();
        let (d, report) = load_dataset(&path, &schema(), BioMode::Strict, Split::Train).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(report.warnings(), 0);

        std::fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        let err = load_dataset(&path, &schema(), BioMode::Strict, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn slot_name_tokenization() {
        assert_eq!(
            slot_name_tokens("depart_time.period_of_day"),
            vec!["depart", "time", "period", "of", "day"]
        );
        assert_eq!(slot_name_tokens("alarmName"), vec!["alarm", "name"]);
        assert_eq!(slot_name_tokens("fromloc.city_name"), vec!["fromloc", "city", "name"]);
        assert_eq!(slot_name_tokens("ATIS"), vec!["atis"]);
    }

    #[test]
    fn frequency_table_small() {
        let mut us = Vec::new();
        for i in 0..3 {
            us.push(utt(&i.to_string(), &["A", "b", "z"], &["B-x", "I-x", "O"], "flight"));
        }
        us.push(utt("3", &["c"], &["B-x"], "flight"));
        let d = Dataset {
            utterances: us,
            schema: schema(),
            split: Split::Train,
        };
        let t = value_frequency_table(&d);
        assert_eq!(t["x"], vec![("a b".to_string(), 3), ("c".to_string(), 1)]);

        let empty = Dataset {
            utterances: vec![],
            schema: schema(),
            split: Split::Train,
        };
        assert!(value_frequency_table(&empty).is_empty());
    }

    #[test]
    fn frequency_table_matches_hand_count() {
        // 10 utterances, counts tallied by hand:
        // fromloc: boston x4, denver x2, new york x2 ; toloc: dallas x3, boston x1
        let rows: [(&[&str], &[&str]); 10] = [
            (&["from", "boston"], &["O", "B-fromloc"]),
            (&["from", "Boston", "to", "dallas"], &["O", "B-fromloc", "O", "B-toloc"]),
            (&["from", "boston"], &["O", "B-fromloc"]),
            (&["BOSTON"], &["B-fromloc"]),
            (&["from", "denver", "to", "boston"], &["O", "B-fromloc", "O", "B-toloc"]),
            (&["denver"], &["B-fromloc"]),
            (&["new", "york"], &["B-fromloc", "I-fromloc"]),
            (&["New", "York", "dallas"], &["B-fromloc", "I-fromloc", "B-toloc"]),
            (&["to", "dallas"], &["O", "B-toloc"]),
            (&["nothing"], &["O"]),
        ];
        let us: Vec<_> = rows
            .iter()
            .enumerate()
            .map(|(i, (t, s))| utt(&i.to_string(), t, s, "flight"))
            .collect();
        let d = Dataset {
            utterances: us,
            schema: schema(),
            split: Split::Train,
        };
        let t = value_frequency_table(&d);
        assert_eq!(
            t["fromloc"],
            vec![
                ("boston".to_string(), 4),
                ("denver".to_string(), 2),
                ("new york".to_string(), 2)
            ]
        );
        assert_eq!(t["toloc"], vec![("dallas".to_string(), 3), ("boston".to_string(), 1)]);
        assert_eq!(t.len(), 2);
    }

    fn valid_tags() -> impl Strategy<Value = Vec<String>> {
        // Each step: 0 => O, 1..=3 => B-slot, 4 => continue (I-) if possible.
        prop::collection::vec((0u8..5, 0usize..3), 1..20).prop_map(|steps| {
            let names = ["a", "b", "c"];
            let mut out: Vec<String> = Vec::new();
            let mut cur: Option<&str> = None;
            for (kind, slot) in steps {
                match (kind, cur) {
                    (4, Some(s)) => out.push(format!("I-{s}")),
                    (0, _) | (4, None) => {
                        out.push("O".into());
                        cur = None;
                    }
                    _ => {
                        out.push(format!("B-{}", names[slot]));
                        cur = Some(names[slot]);
                    }
                }
            }
            out
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn bio_round_trip(t in valid_tags()) {
            prop_assert!(check_bio(&t).is_ok());
            let spans = extract_spans(&t);
            for w in spans.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            prop_assert_eq!(spans_to_bio(&spans, t.len()).unwrap(), t);
        }

        #[test]
        fn repair_yields_strict(raw in prop::collection::vec((0u8..3, 0usize..2), 1..15)) {
            let mut t: Vec<String> = raw.iter().map(|(k, s)| match k {
                0 => "O".to_string(),
                1 => format!("B-{}", ["a", "b"][*s]),
                _ => format!("I-{}", ["a", "b"][*s]),
            }).collect();
            let spans_before = extract_spans(&t);
            repair_bio(&mut t);
            prop_assert!(check_bio(&t).is_ok());
            prop_assert_eq!(extract_spans(&t), spans_before);
        }
    }
}
