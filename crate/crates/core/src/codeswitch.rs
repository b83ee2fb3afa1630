//! Dictionary-driven multilingual token replacement (code-switching).
//!
//! Replacement is strictly one token for one token, so slot tags carry over
//! unchanged from the source utterance.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilingualDictionary {
    pub source_locale: String,
    pub target_locale: String,
    /// Case-folded source word to its translations, in file order.
    pub entries: BTreeMap<String, Vec<String>>,
}

impl BilingualDictionary {
    pub fn from_pairs<'a>(
        source_locale: &str,
        target_locale: &str,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (src, tgt) in pairs {
            let list = entries.entry(src.to_lowercase()).or_default();
            if !list.iter().any(|t| t == tgt) {
                list.push(tgt.to_string());
            }
        }
        if entries.is_empty() {
            return Err(Error::Validation("empty dictionary".into()));
        }
        Ok(BilingualDictionary {
            source_locale: source_locale.to_string(),
            target_locale: target_locale.to_string(),
            entries,
        })
    }

    pub fn lookup(&self, word: &str) -> Option<&[String]> {
        self.entries.get(&word.to_lowercase()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a MUSE-style lexicon: one whitespace-separated `source target` pair per line.
pub fn load_dictionary(
    path: &Path,
    source_locale: &str,
    target_locale: &str,
) -> Result<BilingualDictionary> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected 2 fields at line {}", i + 1),
            });
        }
        pairs.push((fields[0].to_string(), fields[1].to_string()));
    }
    BilingualDictionary::from_pairs(
        source_locale,
        target_locale,
        pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())),
    )
    .map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "empty dictionary file".into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeSwitchConfig {
    pub sentence_ratio: f64,
    pub word_ratio: f64,
    /// Dictionaries whose target locale is not listed are ignored.
    pub target_locales: Vec<String>,
    pub seed: u64,
}

impl Default for CodeSwitchConfig {
    fn default() -> Self {
        CodeSwitchConfig {
            sentence_ratio: 1.0,
            word_ratio: 0.9,
            target_locales: Vec::new(),
            seed: 0,
        }
    }
}

impl CodeSwitchConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sentence_ratio", self.sentence_ratio),
            ("word_ratio", self.word_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }

    /// True when this config can never replace a token.
    pub fn is_disabled(&self) -> bool {
        self.sentence_ratio == 0.0 || self.word_ratio == 0.0
    }

    fn accepts(&self, dict: &BilingualDictionary) -> bool {
        self.target_locales.is_empty() || self.target_locales.contains(&dict.target_locale)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenProvenance {
    pub index: usize,
    pub replaced: bool,
    pub locale: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchedUtterance {
    pub base: Utterance,
    pub tokens: Vec<String>,
    pub provenance: Vec<TokenProvenance>,
}

impl SwitchedUtterance {
    /// The identity switch: no token replaced.
    pub fn unchanged(base: &Utterance) -> Self {
        SwitchedUtterance {
            tokens: base.tokens.clone(),
            provenance: (0..base.tokens.len())
                .map(|index| TokenProvenance {
                    index,
                    replaced: false,
                    locale: None,
                })
                .collect(),
            base: base.clone(),
        }
    }

    pub fn replaced_count(&self) -> usize {
        self.provenance.iter().filter(|p| p.replaced).count()
    }

    /// The switched tokens with the base utterance's labels.
    pub fn to_utterance(&self) -> Utterance {
        Utterance {
            tokens: self.tokens.clone(),
            ..self.base.clone()
        }
    }
}

/// Replacement for a single token, or `None` if it stays. Consumes RNG draws
/// only for tokens that at least one dictionary covers.
fn switch_token<'d, R: Rng + ?Sized>(
    token: &str,
    dicts: &[&'d BilingualDictionary],
    word_ratio: f64,
    rng: &mut R,
) -> Option<(&'d str, &'d str)> {
    let covering: Vec<(&'d BilingualDictionary, &'d [String])> = dicts
        .iter()
        .filter_map(|d| d.lookup(token).map(|tr| (*d, tr)))
        .filter(|(_, tr)| !tr.is_empty())
        .collect();
    if covering.is_empty() || !rng.gen_bool(word_ratio) {
        return None;
    }
    let (dict, translations) = covering[rng.gen_range(0..covering.len())];
    let word = &translations[rng.gen_range(0..translations.len())];
    Some((word.as_str(), dict.target_locale.as_str()))
}

fn usable<'d>(
    dicts: &'d [BilingualDictionary],
    cfg: &CodeSwitchConfig,
    source_locale: Option<&str>,
) -> Vec<&'d BilingualDictionary> {
    dicts
        .iter()
        .filter(|d| cfg.accepts(d))
        .filter(|d| source_locale.is_none_or(|l| d.source_locale == l))
        .collect()
}

pub fn code_switch<R: Rng + ?Sized>(
    u: &Utterance,
    dicts: &[BilingualDictionary],
    cfg: &CodeSwitchConfig,
    rng: &mut R,
) -> SwitchedUtterance {
    let mut out = SwitchedUtterance::unchanged(u);
    if !rng.gen_bool(cfg.sentence_ratio) {
        return out;
    }
    let usable = usable(dicts, cfg, Some(&u.locale));
    for (i, token) in u.tokens.iter().enumerate() {
        if let Some((word, locale)) = switch_token(token, &usable, cfg.word_ratio, rng) {
            out.tokens[i] = word.to_string();
            out.provenance[i].replaced = true;
            out.provenance[i].locale = Some(locale.to_string());
        }
    }
    out
}

/// Code-switches a bare slot value (no labels, no locale filter on the source side).
pub fn code_switch_value<R: Rng + ?Sized>(
    value_tokens: &[String],
    dicts: &[BilingualDictionary],
    cfg: &CodeSwitchConfig,
    rng: &mut R,
) -> Vec<String> {
    if value_tokens.is_empty() || !rng.gen_bool(cfg.sentence_ratio) {
        return value_tokens.to_vec();
    }
    let usable = usable(dicts, cfg, None);
    value_tokens
        .iter()
        .map(|t| match switch_token(t, &usable, cfg.word_ratio, rng) {
            Some((word, _)) => word.to_string(),
            None => t.clone(),
        })
        .collect()
}

/// Maps [`code_switch`] over a dataset in order, sharing one RNG stream.
pub fn code_switch_dataset<R: Rng + ?Sized>(
    d: &Dataset,
    dicts: &[BilingualDictionary],
    cfg: &CodeSwitchConfig,
    rng: &mut R,
) -> Vec<SwitchedUtterance> {
    d.utterances
        .iter()
        .map(|u| code_switch(u, dicts, cfg, rng))
        .collect()
}
