//! Reference transformer encoder built on the [`autograd`](crate::autograd) tape.
//!
//! Post-LN layout: embeddings (token + learned absolute position) followed by
//! layer normalization, then `L` blocks of multi-head self-attention and a GELU
//! feed-forward, each wrapped in residual + layer normalization.

use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

/// Word-level vocabulary. Lookups are case-folded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Reserved tokens first, then the case-folded words in first-seen order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = [PAD, UNK, CLS, SEP].iter().map(|s| s.to_string()).collect();
        let mut seen: std::collections::HashSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.as_ref().to_lowercase();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Vocabulary::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(word)
            .or_else(|| self.index.get(&word.to_lowercase()))
            .copied()
            .unwrap_or(self.unk())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(&word.to_lowercase())
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn cls(&self) -> usize {
        self.index[CLS]
    }

    pub fn sep(&self) -> usize {
        self.index[SEP]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return Err(Error::Config("d_ff, max_len and vocab_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Xavier-uniform matrix.
pub fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..a))
}

/// Sinusoidal position table scaled by `amp`, used as the trainable starting point.
pub fn sinusoidal(n: usize, d: usize, amp: f64) -> Mat {
    Array2::from_shape_fn((n, d), |(p, j)| {
        let rate = 1.0 / 10_000f64.powf((j / 2 * 2) as f64 / d as f64);
        let a = p as f64 * rate;
        amp * if j % 2 == 0 { a.sin() } else { a.cos() }
    })
}

pub fn zeros_row(d: usize) -> Mat {
    Array2::zeros((1, d))
}

pub fn ones_row(d: usize) -> Mat {
    Array2::ones((1, d))
}

/// One input segment: vocabulary ids or externally supplied `n x d` embeddings.
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<usize>),
    Embedded(Var),
}

/// Hidden states of the embedding layer followed by each transformer layer.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub hidden: Vec<Var>,
}

impl EncoderOutput {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("encoder output has no layers")
    }
}

/// Shortens the trait-object lifetime so the RNG can be lent out repeatedly.
pub fn reborrow<'s>(d: &'s mut Option<&mut dyn RngCore>) -> Option<&'s mut dyn RngCore> {
    d.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
}

impl Encoder {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let enc = ParamGroup::Encoder;
        let tok_emb = store.add(
            "encoder.tok_emb",
            Array2::from_shape_fn((config.vocab_size, d), |_| rng.gen_range(-0.5..0.5)),
            enc,
        );
        let pos_emb = store.add(
            "encoder.pos_emb",
            sinusoidal(config.max_len, d, 0.5),
            enc,
        );
        let emb_ln_g = store.add("encoder.emb_ln.gamma", ones_row(d), enc);
        let emb_ln_b = store.add("encoder.emb_ln.beta", zeros_row(d), enc);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |n: &str| format!("encoder.layer{l}.{n}");
            layers.push(LayerParams {
                wq: store.add(p("wq"), xavier(rng, d, d), enc),
                bq: store.add(p("bq"), zeros_row(d), enc),
                wk: store.add(p("wk"), xavier(rng, d, d), enc),
                bk: store.add(p("bk"), zeros_row(d), enc),
                wv: store.add(p("wv"), xavier(rng, d, d), enc),
                bv: store.add(p("bv"), zeros_row(d), enc),
                wo: store.add(p("wo"), xavier(rng, d, d), enc),
                bo: store.add(p("bo"), zeros_row(d), enc),
                ln1_g: store.add(p("ln1.gamma"), ones_row(d), enc),
                ln1_b: store.add(p("ln1.beta"), zeros_row(d), enc),
                w1: store.add(p("w1"), xavier(rng, d, f), enc),
                b1: store.add(p("b1"), zeros_row(f), enc),
                w2: store.add(p("w2"), xavier(rng, f, d), enc),
                b2: store.add(p("b2"), zeros_row(d), enc),
                ln2_g: store.add(p("ln2.gamma"), ones_row(d), enc),
                ln2_b: store.add(p("ln2.beta"), zeros_row(d), enc),
            });
        }
        Ok(Encoder {
            config,
            tok_emb,
            pos_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
        })
    }

    /// Re-binds an encoder to parameters already present in `store` (checkpoint load).
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let get = |n: String| {
            store
                .find(&n)
                .ok_or_else(|| Error::Shape(format!("missing parameter {n}")))
        };
        let mut layers = Vec::new();
        for l in 0..config.layers {
            let p = |n: &str| format!("encoder.layer{l}.{n}");
            layers.push(LayerParams {
                wq: get(p("wq"))?,
                bq: get(p("bq"))?,
                wk: get(p("wk"))?,
                bk: get(p("bk"))?,
                wv: get(p("wv"))?,
                bv: get(p("bv"))?,
                wo: get(p("wo"))?,
                bo: get(p("bo"))?,
                ln1_g: get(p("ln1.gamma"))?,
                ln1_b: get(p("ln1.beta"))?,
                w1: get(p("w1"))?,
                b1: get(p("b1"))?,
                w2: get(p("w2"))?,
                b2: get(p("b2"))?,
                ln2_g: get(p("ln2.gamma"))?,
                ln2_b: get(p("ln2.beta"))?,
            });
        }
        Ok(Encoder {
            tok_emb: get("encoder.tok_emb".into())?,
            pos_emb: get("encoder.pos_emb".into())?,
            emb_ln_g: get("encoder.emb_ln.gamma".into())?,
            emb_ln_b: get("encoder.emb_ln.beta".into())?,
            layers,
            config,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn token_embeddings(&self) -> ParamId {
        self.tok_emb
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        segments: &[Segment],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<EncoderOutput> {
        self.encode_opts(g, store, segments, dropout, true)
    }

    /// As [`Encoder::encode`], optionally without positional embeddings.
    pub fn encode_opts(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        segments: &[Segment],
        mut dropout: Option<&mut dyn RngCore>,
        positions: bool,
    ) -> Result<EncoderOutput> {
        let d = self.config.d_model;
        let tok = g.param(store, self.tok_emb);
        let mut parts = Vec::with_capacity(segments.len());
        for seg in segments {
            match seg {
                Segment::Tokens(ids) if ids.is_empty() => {}
                Segment::Tokens(ids) => {
                    if let Some(bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
                        return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
                    }
                    parts.push(g.rows(tok, ids));
                }
                Segment::Embedded(v) => {
                    if g.shape(*v).1 != d {
                        return Err(Error::Shape(format!(
                            "injected embedding width {} != d_model {d}",
                            g.shape(*v).1
                        )));
                    }
                    parts.push(*v);
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::Shape("empty encoder input".into()));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        let n = g.shape(x).0;
        if n > self.config.max_len {
            return Err(Error::Shape(format!(
                "input length {n} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let p = self.config.dropout;
        if positions {
            let pos = g.param(store, self.pos_emb);
            let pos = g.row_range(pos, 0, n);
            x = g.add(x, pos);
        }
        let (lg, lb) = (g.param(store, self.emb_ln_g), g.param(store, self.emb_ln_b));
        x = g.layer_norm(x, lg, lb);
        if let Some(rng) = reborrow(&mut dropout) {
            x = g.dropout(x, p, rng);
        }
        let mut hidden = vec![x];
        for layer in &self.layers {
            x = self.layer_forward(g, store, layer, x, reborrow(&mut dropout));
            hidden.push(x);
        }
        Ok(EncoderOutput { hidden })
    }

    fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn layer_forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        lp: &LayerParams,
        x: Var,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Var {
        let h = self.config.heads;
        let dh = self.config.d_model / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = Self::linear(g, store, x, lp.wq, lp.bq);
        let k = Self::linear(g, store, x, lp.wk, lp.bk);
        let v = Self::linear(g, store, x, lp.wv, lp.bv);
        let mut heads = Vec::with_capacity(h);
        for i in 0..h {
            let qh = g.cols(q, i * dh, dh);
            let kh = g.cols(k, i * dh, dh);
            let vh = g.cols(v, i * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let cat = if h == 1 { heads[0] } else { g.concat_cols(&heads) };
        let mut o = Self::linear(g, store, cat, lp.wo, lp.bo);
        if let Some(rng) = reborrow(&mut dropout) {
            o = g.dropout(o, self.config.dropout, rng);
        }
        let res = g.add(x, o);
        let (g1, b1) = (g.param(store, lp.ln1_g), g.param(store, lp.ln1_b));
        let x1 = g.layer_norm(res, g1, b1);
        let f = Self::linear(g, store, x1, lp.w1, lp.b1);
        let f = g.gelu(f);
        let mut f = Self::linear(g, store, f, lp.w2, lp.b2);
        if let Some(rng) = reborrow(&mut dropout) {
            f = g.dropout(f, self.config.dropout, rng);
        }
        let res = g.add(x1, f);
        let (g2, b2) = (g.param(store, lp.ln2_g), g.param(store, lp.ln2_b));
        g.layer_norm(res, g2, b2)
    }

    /// Number of bottom hidden states pooled by [`Encoder::embed_label_text`]:
    /// the embedding layer plus the first two transformer layers, clipped to
    /// what the encoder has.
    pub fn label_pool_depth(&self) -> usize {
        3.min(self.config.layers + 1)
    }

    /// Encodes label tokens alone (evaluation mode), averages the bottom
    /// [`label_pool_depth`](Encoder::label_pool_depth) hidden states per
    /// token, averages over tokens and L2-normalizes.
    pub fn embed_label_text(&self, store: &ParamStore, token_ids: &[usize]) -> Result<Vec<f64>> {
        if token_ids.is_empty() {
            return Err(Error::Validation("empty label token list".into()));
        }
        let mut g = Graph::new();
        let out = self.encode(&mut g, store, &[Segment::Tokens(token_ids.to_vec())], None)?;
        let depth = self.label_pool_depth();
        let d = self.d_model();
        let mut acc = vec![0.0; d];
        for layer in &out.hidden[..depth] {
            let m = g.value(*layer);
            for row in m.rows() {
                for (a, v) in acc.iter_mut().zip(row.iter()) {
                    *a += v;
                }
            }
        }
        let denom = (depth * token_ids.len()) as f64;
        acc.iter_mut().for_each(|a| *a /= denom);
        let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numerical("degenerate label embedding".into()));
        }
        acc.iter_mut().for_each(|a| *a /= norm);
        Ok(acc)
    }
}
