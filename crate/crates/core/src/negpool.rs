//! Hard negative slot values: slot descriptors, descriptor-similarity
//! neighborhoods, per-slot value pools, and negative utterance generation.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Mat;
use crate::codeswitch::{code_switch_value, BilingualDictionary, CodeSwitchConfig, SwitchedUtterance};
use crate::corpus::{
    check_bio, extract_spans, slot_name_tokens, span_value, value_frequency_table, Dataset, SlotSchema, SlotSpan,
    Utterance,
};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDescriptor {
    pub slot: String,
    /// `A_k`: the tokenized slot name.
    pub name_tokens: Vec<String>,
    /// `B_k`: up to `p_v` most frequent training values.
    pub top_values: Vec<String>,
}

impl SlotDescriptor {
    /// True when the slot never occurs in the training data.
    pub fn is_valueless(&self) -> bool {
        self.top_values.is_empty()
    }

    /// Embedder input: `A_k` followed by the words of every value in `B_k`.
    pub fn text(&self) -> Vec<String> {
        let mut out = self.name_tokens.clone();
        for v in &self.top_values {
            out.extend(v.split_whitespace().map(str::to_string));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegPoolConfig {
    pub p_v: usize,
    pub p_s: usize,
    pub n_s: usize,
}

impl Default for NegPoolConfig {
    fn default() -> Self {
        NegPoolConfig { p_v: 20, p_s: 5, n_s: 2 }
    }
}

impl NegPoolConfig {
    pub fn validate(&self, num_slots: usize) -> Result<()> {
        if self.p_s == 0 || self.n_s == 0 {
            return Err(Error::Config("p_s and n_s must be positive".into()));
        }
        if self.p_s >= num_slots {
            return Err(Error::Config(format!(
                "p_s ({}) must be smaller than the number of slots ({num_slots})",
                self.p_s
            )));
        }
        Ok(())
    }
}

/// Maps a token sequence to a fixed-dimension vector.
pub trait Embedder {
    fn embed(&self, tokens: &[String]) -> Vec<f64>;

    fn id(&self) -> String {
        "custom".into()
    }
}

impl<F: Fn(&[String]) -> Vec<f64>> Embedder for F {
    fn embed(&self, tokens: &[String]) -> Vec<f64> {
        self(tokens)
    }
}

/// L2-normalized mean of token embedding rows.
pub struct TokenMeanEmbedder<'a> {
    pub vocab: &'a Vocabulary,
    pub table: &'a Mat,
}

impl Embedder for TokenMeanEmbedder<'_> {
    fn embed(&self, tokens: &[String]) -> Vec<f64> {
        let d = self.table.ncols();
        let mut v = vec![0.0; d];
        if tokens.is_empty() {
            return v;
        }
        for id in self.vocab.ids(tokens) {
            for (a, b) in v.iter_mut().zip(self.table.row(id)) {
                *a += b;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    fn id(&self) -> String {
        format!("token-mean:{}x{}", self.table.nrows(), self.table.ncols())
    }
}

/// One descriptor per schema slot, in schema order.
pub fn build_descriptors(train: &Dataset, schema: &SlotSchema, p_v: usize) -> Vec<SlotDescriptor> {
    let table = value_frequency_table(train);
    schema
        .slots
        .iter()
        .map(|slot| {
            let top_values: Vec<String> = table
                .get(slot)
                .map(|vals| vals.iter().take(p_v).map(|(v, _)| v.clone()).collect())
                .unwrap_or_default();
            if top_values.is_empty() && p_v > 0 {
                log::warn!("slot {slot} has no training values");
            }
            SlotDescriptor {
                slot: slot.clone(),
                name_tokens: slot_name_tokens(slot),
                top_values,
            }
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub type Neighbors = BTreeMap<String, Vec<String>>;

/// Top-`p_s` most similar other slots per slot, ties broken by descriptor order.
pub fn similar_slots(descriptors: &[SlotDescriptor], embedder: &dyn Embedder, p_s: usize) -> Result<Neighbors> {
    if p_s >= descriptors.len() {
        return Err(Error::Config(format!(
            "p_s ({p_s}) needs at least {} slots, have {}",
            p_s + 1,
            descriptors.len()
        )));
    }
    let embs: Vec<Vec<f64>> = descriptors.iter().map(|d| embedder.embed(&d.text())).collect();
    for (d, e) in descriptors.iter().zip(&embs) {
        let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::Numerical(format!("degenerate descriptor embedding for slot {}", d.slot)));
        }
    }
    let mut out = Neighbors::new();
    for (k, d) in descriptors.iter().enumerate() {
        let mut others: Vec<(usize, f64)> = (0..descriptors.len())
            .filter(|&j| j != k)
            .map(|j| (j, cosine(&embs[k], &embs[j])))
            .collect();
        others.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out.insert(
            d.slot.clone(),
            others.iter().take(p_s).map(|&(j, _)| descriptors[j].slot.clone()).collect(),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativePool {
    pub neighbors: Neighbors,
    /// `V_k`, neighbor value lists concatenated in neighbor order.
    pub pools: BTreeMap<String, Vec<String>>,
    /// For each entry of `pools[k]`, the neighbor slot it was taken from.
    #[serde(default)]
    pub sources: BTreeMap<String, Vec<String>>,
}

impl NegativePool {
    /// Slots whose pool is empty.
    pub fn empty_slots(&self) -> Vec<&str> {
        self.pools
            .iter()
            .filter(|(_, v)| v.is_empty())
            .map(|(k, _)| k.as_str())
            .collect()
    }

    /// Checks neighbor counts, self-exclusion and pool/neighbor consistency.
    pub fn audit(&self, descriptors: &[SlotDescriptor], p_s: usize) -> Result<()> {
        let by_slot: BTreeMap<&str, &SlotDescriptor> = descriptors.iter().map(|d| (d.slot.as_str(), d)).collect();
        for d in descriptors {
            let nb = self
                .neighbors
                .get(&d.slot)
                .ok_or_else(|| Error::Validation(format!("slot {} has no neighbor list", d.slot)))?;
            if nb.len() != p_s {
                return Err(Error::Validation(format!("slot {} has {} neighbors, expected {p_s}", d.slot, nb.len())));
            }
            if nb.contains(&d.slot) {
                return Err(Error::Validation(format!("slot {} lists itself as a neighbor", d.slot)));
            }
            let expected: Vec<String> = nb
                .iter()
                .flat_map(|n| by_slot.get(n.as_str()).map(|x| x.top_values.clone()).unwrap_or_default())
                .collect();
            if self.pools.get(&d.slot) != Some(&expected) {
                return Err(Error::Validation(format!("pool for slot {} is not its neighbors' values", d.slot)));
            }
            if let Some(src) = self.sources.get(&d.slot) {
                if src.len() != expected.len() || src.iter().any(|s| !nb.contains(s)) {
                    return Err(Error::Validation(format!("bad provenance for slot {}", d.slot)));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

pub fn build_pools(descriptors: &[SlotDescriptor], neighbors: &Neighbors) -> NegativePool {
    let by_slot: BTreeMap<&str, &SlotDescriptor> = descriptors.iter().map(|d| (d.slot.as_str(), d)).collect();
    let mut pool = NegativePool {
        neighbors: neighbors.clone(),
        ..Default::default()
    };
    for d in descriptors {
        let mut values = Vec::new();
        let mut sources = Vec::new();
        for n in neighbors.get(&d.slot).map(Vec::as_slice).unwrap_or_default() {
            if let Some(nd) = by_slot.get(n.as_str()) {
                values.extend(nd.top_values.iter().cloned());
                sources.extend(std::iter::repeat_n(n.clone(), nd.top_values.len()));
            }
        }
        if values.is_empty() {
            log::warn!("negative pool for slot {} is empty", d.slot);
        }
        pool.pools.insert(d.slot.clone(), values);
        pool.sources.insert(d.slot.clone(), sources);
    }
    pool
}

/// Descriptors, neighborhoods and pools for a training set in one call.
pub fn build_negative_pool(
    train: &Dataset,
    embedder: &dyn Embedder,
    cfg: &NegPoolConfig,
) -> Result<(Vec<SlotDescriptor>, NegativePool)> {
    cfg.validate(train.schema.num_slots())?;
    let desc = build_descriptors(train, &train.schema, cfg.p_v);
    let nb = similar_slots(&desc, embedder, cfg.p_s)?;
    let pool = build_pools(&desc, &nb);
    Ok((desc, pool))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSpan {
    /// Span position in the negative utterance.
    pub span: SlotSpan,
    pub original: String,
    /// `None` when the slot's pool was empty and the span was kept.
    pub negative: Option<String>,
    pub source_slot: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeUtterance {
    pub utterance: Utterance,
    pub spans: Vec<NegativeSpan>,
}

impl NegativeUtterance {
    pub fn flagged(&self) -> bool {
        self.spans.iter().any(|s| s.negative.is_none())
    }
}

/// `n_s` negatives of a code-switched utterance: every span's value is replaced
/// by a code-switched value drawn uniformly (with replacement) from its pool.
pub fn generate_negatives<R: Rng + ?Sized>(
    switched: &SwitchedUtterance,
    pool: &NegativePool,
    n_s: usize,
    dicts: &[BilingualDictionary],
    cs_cfg: &CodeSwitchConfig,
    rng: &mut R,
) -> Result<Vec<NegativeUtterance>> {
    let spans = extract_spans(&switched.base.slots);
    if spans.is_empty() {
        return Err(Error::Validation(format!("utterance {} has no spans", switched.base.id)));
    }
    let mut out = Vec::with_capacity(n_s);
    for j in 0..n_s {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let mut neg_spans = Vec::new();
        let mut cursor = 0;
        for sp in &spans {
            tokens.extend_from_slice(&switched.tokens[cursor..sp.start]);
            tags.extend_from_slice(&switched.base.slots[cursor..sp.start]);
            let original = span_value(&switched.tokens, sp);
            let empty = Vec::new();
            let values = pool.pools.get(&sp.slot).unwrap_or(&empty);
            let (value_tokens, negative, source_slot) = if values.is_empty() {
                (switched.tokens[sp.start..=sp.end].to_vec(), None, None)
            } else {
                let i = rng.gen_range(0..values.len());
                let raw: Vec<String> = values[i].split_whitespace().map(str::to_string).collect();
                let cs = code_switch_value(&raw, dicts, cs_cfg, rng);
                let src = pool.sources.get(&sp.slot).and_then(|s| s.get(i)).cloned();
                (cs, Some(values[i].clone()), src)
            };
            let start = tokens.len();
            for (q, t) in value_tokens.iter().enumerate() {
                tokens.push(t.clone());
                tags.push(format!("{}-{}", if q == 0 { "B" } else { "I" }, sp.slot));
            }
            neg_spans.push(NegativeSpan {
                span: SlotSpan::new(start, tokens.len() - 1, sp.slot.clone()),
                original,
                negative,
                source_slot,
            });
            cursor = sp.end + 1;
        }
        tokens.extend_from_slice(&switched.tokens[cursor..]);
        tags.extend_from_slice(&switched.base.slots[cursor..]);
        let utterance = Utterance {
            id: format!("{}#neg{j}", switched.base.id),
            locale: switched.base.locale.clone(),
            intent: switched.base.intent.clone(),
            tokens,
            slots: tags,
        };
        check_bio(&utterance.slots)?;
        out.push(NegativeUtterance {
            utterance,
            spans: neg_spans,
        });
    }
    Ok(out)
}
