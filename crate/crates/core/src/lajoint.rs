//! Label-aware joint intent detection and slot filling.
//!
//! The encoder input is `[CLS] s_O s_B s_I s_1..s_K [SEP] x_1..x_T`. Label
//! positions carry a trainable embedding table initialized from the encoder's
//! own embedding of each label's text. After encoding, B-/I- label vectors are
//! built by the label compressor, projected together with the word vectors,
//! and each word is scored against the L2-normalized label bank.

use ndarray::Array2;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::corpus::{repair_bio, slot_name_tokens, SlotSchema, Utterance, ABSTRACT_LABEL_TEXTS};
use crate::encoder::{reborrow, xavier, zeros_row, Encoder, EncoderConfig, Segment, Vocabulary};
use crate::error::{Error, Result};

/// Architecture switches for the "-Compressor" / "-Projector" ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// When false, `E^B_k = E_B + E_k` and `E^I_k = E_I + E_k`.
    pub compressor: bool,
    /// When false, the projector is the identity.
    pub projector: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            compressor: true,
            projector: true,
        }
    }
}

/// Offsets and lengths of each region of the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Regions {
    pub cls: (usize, usize),
    pub abstract_labels: (usize, usize),
    pub slots: (usize, usize),
    pub sep: (usize, usize),
    pub words: (usize, usize),
}

impl Regions {
    pub fn lengths(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.cls.1,
            self.abstract_labels.1,
            self.slots.1,
            self.sep.1,
            self.words.1,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelInput {
    pub word_ids: Vec<usize>,
    pub num_slots: usize,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        5 + self.num_slots + self.word_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn regions(&self) -> Regions {
        let k = self.num_slots;
        Regions {
            cls: (0, 1),
            abstract_labels: (1, 3),
            slots: (4, k),
            sep: (4 + k, 1),
            words: (5 + k, self.word_ids.len()),
        }
    }
}

/// Builds the `5 + K + T` input layout for a token sequence.
pub fn assemble_input(
    tokens: &[String],
    schema: &SlotSchema,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ModelInput> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot assemble an empty utterance".into()));
    }
    let input = ModelInput {
        word_ids: vocab.ids(tokens),
        num_slots: schema.num_slots(),
    };
    if input.len() > max_len {
        return Err(Error::Shape(format!(
            "assembled length {} (5 + K={} + T={}) exceeds max_len {max_len}",
            input.len(),
            schema.num_slots(),
            tokens.len()
        )));
    }
    Ok(input)
}

/// Tape handles for one forward pass.
#[derive(Debug, Clone)]
pub struct JointOutputs {
    /// `1 x d` encoder output at `[CLS]`.
    pub cls: Var,
    pub e_o: Var,
    pub e_b: Var,
    pub e_i: Var,
    /// `K x d` encoder outputs at the slot positions.
    pub slots: Var,
    /// `T x d` encoder outputs at the word positions.
    pub words: Var,
    /// `(2K+1) x d` projected label vectors in [`SlotSchema::bio_labels`] order.
    pub bank: Var,
    /// `T x d` projected word vectors.
    pub h_words: Var,
    pub intent_logits: Var,
    /// `T x (2K+1)` word-label scores.
    pub slot_logits: Var,
}

#[derive(Debug, Clone)]
pub struct LaJoint {
    pub schema: SlotSchema,
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub arch: ArchConfig,
    label_emb: ParamId,
    w_cb: ParamId,
    b_cb: ParamId,
    w_ci: ParamId,
    b_ci: ParamId,
    w_p: ParamId,
    b_p: ParamId,
    w_i: ParamId,
    b_i: ParamId,
}

/// Label texts in input order: the three abstract labels, then each slot name.
pub fn label_texts(schema: &SlotSchema) -> Vec<Vec<String>> {
    ABSTRACT_LABEL_TEXTS
        .iter()
        .map(|t| vec![t.to_string()])
        .chain(schema.slots.iter().map(|s| slot_name_tokens(s)))
        .collect()
}

impl LaJoint {
    pub fn new<R: Rng + ?Sized>(
        schema: SlotSchema,
        vocab: Vocabulary,
        enc_cfg: EncoderConfig,
        arch: ArchConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(enc_cfg, store, rng)?;
        let d = encoder.d_model();
        let texts = label_texts(&schema);
        let mut table = Array2::zeros((texts.len(), d));
        for (i, t) in texts.iter().enumerate() {
            let v = encoder.embed_label_text(store, &vocab.ids(t))?;
            table.row_mut(i).assign(&ndarray::ArrayView1::from(&v));
        }
        let enc = ParamGroup::Encoder;
        let head = ParamGroup::Head;
        let label_emb = store.add("lajoint.label_emb", table, enc);
        let w_cb = store.add("lajoint.compressor.w_b", xavier(rng, 2 * d, d), enc);
        let b_cb = store.add("lajoint.compressor.b_b", zeros_row(d), enc);
        let w_ci = store.add("lajoint.compressor.w_i", xavier(rng, 2 * d, d), enc);
        let b_ci = store.add("lajoint.compressor.b_i", zeros_row(d), enc);
        let w_p = store.add("lajoint.projector.w", xavier(rng, d, d), enc);
        let b_p = store.add("lajoint.projector.b", zeros_row(d), enc);
        let n_int = schema.num_intents();
        let w_i = store.add("lajoint.intent.w", xavier(rng, d, n_int), head);
        let b_i = store.add("lajoint.intent.b", zeros_row(n_int), head);
        Ok(LaJoint {
            schema,
            vocab,
            encoder,
            arch,
            label_emb,
            w_cb,
            b_cb,
            w_ci,
            b_ci,
            w_p,
            b_p,
            w_i,
            b_i,
        })
    }

    /// Re-binds to parameters already in `store` (checkpoint load).
    pub fn bind(
        schema: SlotSchema,
        vocab: Vocabulary,
        enc_cfg: EncoderConfig,
        arch: ArchConfig,
        store: &ParamStore,
    ) -> Result<Self> {
        let encoder = Encoder::bind(enc_cfg, store)?;
        let get = |n: &str| {
            store
                .find(n)
                .ok_or_else(|| Error::Shape(format!("missing parameter {n}")))
        };
        let model = LaJoint {
            label_emb: get("lajoint.label_emb")?,
            w_cb: get("lajoint.compressor.w_b")?,
            b_cb: get("lajoint.compressor.b_b")?,
            w_ci: get("lajoint.compressor.w_i")?,
            b_ci: get("lajoint.compressor.b_i")?,
            w_p: get("lajoint.projector.w")?,
            b_p: get("lajoint.projector.b")?,
            w_i: get("lajoint.intent.w")?,
            b_i: get("lajoint.intent.b")?,
            schema,
            vocab,
            encoder,
            arch,
        };
        if store.value(model.label_emb).nrows() != 3 + model.schema.num_slots() {
            return Err(Error::Shape("label embedding table does not match schema".into()));
        }
        Ok(model)
    }

    pub fn d_model(&self) -> usize {
        self.encoder.d_model()
    }

    pub fn label_embeddings(&self) -> ParamId {
        self.label_emb
    }

    pub fn assemble(&self, tokens: &[String]) -> Result<ModelInput> {
        assemble_input(tokens, &self.schema, &self.vocab, self.encoder.config.max_len)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &ModelInput,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<JointOutputs> {
        let k = input.num_slots;
        let t = input.word_ids.len();
        if k != self.schema.num_slots() {
            return Err(Error::Shape("input slot count does not match schema".into()));
        }
        let labels = g.param(store, self.label_emb);
        let mut words_seg = vec![self.vocab.sep()];
        words_seg.extend_from_slice(&input.word_ids);
        let segments = [
            Segment::Tokens(vec![self.vocab.cls()]),
            Segment::Embedded(labels),
            Segment::Tokens(words_seg),
        ];
        let out = self.encoder.encode(g, store, &segments, reborrow(&mut dropout))?;
        let e = out.last();
        let r = input.regions();
        let cls = g.row_range(e, r.cls.0, 1);
        let e_o = g.row_range(e, r.abstract_labels.0, 1);
        let e_b = g.row_range(e, r.abstract_labels.0 + 1, 1);
        let e_i = g.row_range(e, r.abstract_labels.0 + 2, 1);
        let slots = g.row_range(e, r.slots.0, k);
        let words = g.row_range(e, r.words.0, t);

        let (eb_k, ei_k) = self.compress_labels(g, store, e_b, e_i, slots);
        // Interleave into [O, B-1, I-1, ..., B-K, I-K].
        let stacked = g.concat_rows(&[e_o, eb_k, ei_k]);
        let mut order = vec![0];
        for j in 0..k {
            order.push(1 + j);
            order.push(1 + k + j);
        }
        let labels_pre = g.rows(stacked, &order);
        let bank = self.project(g, store, labels_pre);
        let h_words = self.project(g, store, words);
        let slot_logits = slot_scores(g, h_words, bank)?;
        let intent_logits = self.intent_logits(g, store, cls);
        Ok(JointOutputs {
            cls,
            e_o,
            e_b,
            e_i,
            slots,
            words,
            bank,
            h_words,
            intent_logits,
            slot_logits,
        })
    }

    /// `E^B_k = (E_B || E_k) W_cb + b_cb` and `E^I_k = (E_I || E_k) W_ci + b_ci`,
    /// for all `K` slots at once.
    pub fn compress_labels(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        e_b: Var,
        e_i: Var,
        slots: Var,
    ) -> (Var, Var) {
        let k = g.shape(slots).0;
        let rep = vec![0; k];
        let eb = g.rows(e_b, &rep);
        let ei = g.rows(e_i, &rep);
        if !self.arch.compressor {
            return (g.add(eb, slots), g.add(ei, slots));
        }
        let cat_b = g.concat_cols(&[eb, slots]);
        let cat_i = g.concat_cols(&[ei, slots]);
        let (w_cb, b_cb) = (g.param(store, self.w_cb), g.param(store, self.b_cb));
        let (w_ci, b_ci) = (g.param(store, self.w_ci), g.param(store, self.b_ci));
        let b = g.matmul(cat_b, w_cb);
        let b = g.add_row(b, b_cb);
        let i = g.matmul(cat_i, w_ci);
        let i = g.add_row(i, b_ci);
        (b, i)
    }

    /// `H = E W_p + b_p`, row-wise.
    pub fn project(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Var {
        if !self.arch.projector {
            return e;
        }
        let (w, b) = (g.param(store, self.w_p), g.param(store, self.b_p));
        let h = g.matmul(e, w);
        g.add_row(h, b)
    }

    pub fn intent_logits(&self, g: &mut Graph, store: &ParamStore, cls: Var) -> Var {
        let (w, b) = (g.param(store, self.w_i), g.param(store, self.b_i));
        let z = g.matmul(cls, w);
        g.add_row(z, b)
    }

    /// Gold label ids for an utterance's tags.
    pub fn tag_ids(&self, tags: &[String]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.schema
                    .label_id(t)
                    .ok_or_else(|| Error::Validation(format!("tag {t:?} not in schema")))
            })
            .collect()
    }

    pub fn predict(&self, store: &ParamStore, tokens: &[String]) -> Result<Prediction> {
        let input = self.assemble(tokens)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, &input, None)?;
        Ok(decode(&self.schema, &g, &out))
    }
}

/// `H_t . normalize(H_k)^T` for every word and label.
pub fn slot_scores(g: &mut Graph, h_words: Var, bank: Var) -> Result<Var> {
    let normed = g
        .l2_normalize_rows(bank)
        .map_err(|e| Error::Numerical(format!("zero-norm label vector: {e}")))?;
    let nt = g.transpose(normed);
    Ok(g.matmul(h_words, nt))
}

/// `L_I = -log p_I[gold]` and `L_S = sum_t -log p^S_t[gold_t]`.
pub fn joint_loss(g: &mut Graph, out: &JointOutputs, intent: usize, tags: &[usize]) -> (Var, Var) {
    let lp_i = g.log_softmax_rows(out.intent_logits);
    let li = g.pick_sum(lp_i, &[(0, intent)]);
    let li = g.scale(li, -1.0);
    let lp_s = g.log_softmax_rows(out.slot_logits);
    let idx: Vec<(usize, usize)> = tags.iter().enumerate().map(|(t, &y)| (t, y)).collect();
    let ls = g.pick_sum(lp_s, &idx);
    let ls = g.scale(ls, -1.0);
    (li, ls)
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `p^S_t` for a single word vector against a label bank (rows in BIO order).
pub fn slot_distribution(h_t: &[f64], bank: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let h = g.row(h_t);
    let rows: Vec<Var> = bank.iter().map(|b| g.row(b)).collect();
    let b = g.concat_rows(&rows);
    let s = slot_scores(&mut g, h, b)?;
    Ok(softmax(g.value(s).row(0).as_slice().unwrap()))
}

/// `p_I = softmax(E_CLS W_I + b_I)`.
pub fn intent_distribution(cls: &[f64], w: &Array2<f64>, b: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..w.ncols())
        .map(|j| b[j] + cls.iter().enumerate().map(|(i, x)| x * w[[i, j]]).sum::<f64>())
        .collect();
    softmax(&logits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub intent: String,
    pub slots: Vec<String>,
}

/// Argmax intent and per-token argmax tags, lenient-repaired.
pub fn decode(schema: &SlotSchema, g: &Graph, out: &JointOutputs) -> Prediction {
    let argmax = |row: ndarray::ArrayView1<f64>| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    let intent = argmax(g.value(out.intent_logits).row(0));
    let mut slots: Vec<String> = g
        .value(out.slot_logits)
        .rows()
        .into_iter()
        .map(|r| schema.label_name(argmax(r)))
        .collect();
    repair_bio(&mut slots);
    Prediction {
        intent: schema.intents[intent].clone(),
        slots,
    }
}

/// Prediction output record: `{"id", "intent", "slots"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub id: String,
    pub intent: String,
    pub slots: Vec<String>,
}

pub fn predict_utterances(model: &LaJoint, store: &ParamStore, us: &[Utterance]) -> Result<Vec<PredictionLine>> {
    us.iter()
        .map(|u| {
            let p = model.predict(store, &u.tokens)?;
            Ok(PredictionLine {
                id: u.id.clone(),
                intent: p.intent,
                slots: p.slots,
            })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    pub(crate) fn tiny_model(k_slots: usize, arch: ArchConfig) -> (LaJoint, ParamStore) {
        let slots: Vec<String> = (0..k_slots).map(|i| format!("slot_{i}")).collect();
        let schema = SlotSchema::new(slots, s(&["a", "b", "c", "d"])).unwrap();
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let mut vocab_words = words.clone();
        vocab_words.extend(s(&["outside", "begin", "inside", "slot"]));
        vocab_words.extend((0..k_slots).map(|i| i.to_string()));
        let vocab = Vocabulary::build(vocab_words);
        let cfg = EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            max_len: 24,
            vocab_size: vocab.len(),
            dropout: 0.0,
            seed: 0,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = LaJoint::new(schema, vocab, cfg, arch, &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn assemble_lengths_and_regions() {
        let (m, _) = tiny_model(2, ArchConfig::default());
        let inp = m.assemble(&s(&["w1"])).unwrap();
        assert_eq!(inp.len(), 8);
        assert_eq!(inp.regions().lengths(), (1, 3, 2, 1, 1));
        assert!(m.assemble(&[]).is_err());
        // K = 84, T = 20 gives 109 positions.
        let big = ModelInput {
            word_ids: vec![0; 20],
            num_slots: 84,
        };
        assert_eq!(big.len(), 109);
        assert_eq!(big.regions().words, (89, 20));
        let long: Vec<String> = (0..30).map(|_| "w1".to_string()).collect();
        assert!(m.assemble(&long).is_err());
    }

    #[test]
    fn forward_shapes_for_several_sizes() {
        for (k, t) in [(1usize, 1usize), (3, 4), (4, 6)] {
            let (m, store) = tiny_model(k, ArchConfig::default());
            let toks: Vec<String> = (0..t).map(|i| format!("w{i}")).collect();
            let inp = m.assemble(&toks).unwrap();
            let mut g = Graph::new();
            let o = m.forward(&mut g, &store, &inp, None).unwrap();
            assert_eq!(g.shape(o.slots), (k, 8));
            assert_eq!(g.shape(o.words), (t, 8));
            assert_eq!(g.shape(o.bank), (2 * k + 1, 8));
            assert_eq!(g.shape(o.slot_logits), (t, 2 * k + 1));
            assert_eq!(g.shape(o.intent_logits), (1, 4));
        }
    }

    #[test]
    fn label_table_initialized_from_label_text() {
        let (m, store) = tiny_model(2, ArchConfig::default());
        let table = store.value(m.label_embeddings());
        let expected = m
            .encoder
            .embed_label_text(&store, &m.vocab.ids(&s(&["slot", "1"])))
            .unwrap();
        for j in 0..8 {
            assert!((table[[4, j]] - expected[j]).abs() < 1e-12);
        }
        let norm: f64 = table.row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    fn rand_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn compressor_zero_weights_gives_bias() {
        let (m, mut store) = tiny_model(3, ArchConfig::default());
        store.get_mut(m.w_cb).value.fill(0.0);
        store.get_mut(m.b_cb).value.fill(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let eb = g.constant(rand_rows(&mut rng, 1, 8));
        let ei = g.constant(rand_rows(&mut rng, 1, 8));
        let sl = g.constant(rand_rows(&mut rng, 3, 8));
        let (b, _) = m.compress_labels(&mut g, &store, eb, ei, sl);
        assert!(g.value(b).iter().all(|&x| x == 0.25));
    }

    #[test]
    fn compressor_block_identity_gives_abstract_label() {
        let (m, mut store) = tiny_model(3, ArchConfig::default());
        let mut w = Array2::zeros((16, 8));
        for i in 0..8 {
            w[[i, i]] = 1.0;
        }
        store.get_mut(m.w_cb).value = w;
        store.get_mut(m.b_cb).value.fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let ebv = rand_rows(&mut rng, 1, 8);
        let eb = g.constant(ebv.clone());
        let ei = g.constant(rand_rows(&mut rng, 1, 8));
        let sl = g.constant(rand_rows(&mut rng, 3, 8));
        let (b, _) = m.compress_labels(&mut g, &store, eb, ei, sl);
        for r in 0..3 {
            for j in 0..8 {
                assert_eq!(g.value(b)[[r, j]], ebv[[0, j]]);
            }
        }
    }

    #[test]
    fn compressor_and_projector_match_matrix_oracle() {
        let (m, store) = tiny_model(2, ArchConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ebv = rand_rows(&mut rng, 1, 8);
        let eiv = rand_rows(&mut rng, 1, 8);
        let slv = rand_rows(&mut rng, 2, 8);
        let mut g = Graph::new();
        let (eb, ei, sl) = (g.constant(ebv.clone()), g.constant(eiv.clone()), g.constant(slv.clone()));
        let (b, i) = m.compress_labels(&mut g, &store, eb, ei, sl);
        let hb = m.project(&mut g, &store, b);
        let w_cb = store.value(m.w_cb);
        let b_cb = store.value(m.b_cb);
        let w_ci = store.value(m.w_ci);
        let b_ci = store.value(m.b_ci);
        let w_p = store.value(m.w_p);
        let b_p = store.value(m.b_p);
        for r in 0..2 {
            let cat_b: Vec<f64> = ebv.row(0).iter().chain(slv.row(r).iter()).cloned().collect();
            let cat_i: Vec<f64> = eiv.row(0).iter().chain(slv.row(r).iter()).cloned().collect();
            let mut eb_k = [0.0; 8];
            for j in 0..8 {
                let vb: f64 = (0..16).map(|q| cat_b[q] * w_cb[[q, j]]).sum::<f64>() + b_cb[[0, j]];
                let vi: f64 = (0..16).map(|q| cat_i[q] * w_ci[[q, j]]).sum::<f64>() + b_ci[[0, j]];
                assert!((g.value(b)[[r, j]] - vb).abs() < 1e-12);
                assert!((g.value(i)[[r, j]] - vi).abs() < 1e-12);
                eb_k[j] = vb;
            }
            for j in 0..8 {
                let h: f64 = (0..8).map(|q| eb_k[q] * w_p[[q, j]]).sum::<f64>() + b_p[[0, j]];
                assert!((g.value(hb)[[r, j]] - h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projector_identity_and_zero() {
        let (m, mut store) = tiny_model(2, ArchConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_rows(&mut rng, 3, 8);
        store.get_mut(m.w_p).value = Array2::eye(8);
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let h = m.project(&mut g, &store, e);
        assert_eq!(g.value(h), &x);
        store.get_mut(m.w_p).value.fill(0.0);
        let mut g = Graph::new();
        let e = g.constant(x.clone());
        let h = m.project(&mut g, &store, e);
        assert!(g.value(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slot_distribution_examples() {
        let bank = vec![vec![1.0, 2.0]; 5];
        let p = slot_distribution(&[0.3, -0.7], &bank).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-12);
        }
        // Hand case: h = (1, 0), labels (1,0), (0,2), (-3,0) -> normalized scores 1, 0, -1.
        let p = slot_distribution(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 2.0], vec![-3.0, 0.0]])
            .unwrap();
        let e = std::f64::consts::E;
        let z = e + 1.0 + 1.0 / e;
        let expect = [e / z, 1.0 / z, 1.0 / (e * z)];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(slot_distribution(&[1.0, 0.0], &[vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn slot_distribution_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let h: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = slot_distribution(&h, &bank).unwrap();
        let scaled: Vec<Vec<f64>> = bank.iter().map(|r| r.iter().map(|x| x * 4.0).collect()).collect();
        let q = slot_distribution(&h, &scaled).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn intent_distribution_examples() {
        let w = Array2::zeros((2, 4));
        let p = intent_distribution(&[1.0, 2.0], &w, &[0.0; 4]);
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        // Hand case: logits = [1, 0] -> [e/(e+1), 1/(e+1)].
        let w = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = intent_distribution(&[1.0, 5.0], &w, &[0.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_closed_forms() {
        // Uniform predictions: |intents| = 4, 2K+1 = 5, T = 2 -> ln 4 + 2 ln 5.
        let mut g = Graph::new();
        let il = g.constant(Array2::zeros((1, 4)));
        let sl = g.constant(Array2::zeros((2, 5)));
        let dummy = g.constant(Array2::zeros((1, 1)));
        let out = JointOutputs {
            cls: dummy,
            e_o: dummy,
            e_b: dummy,
            e_i: dummy,
            slots: dummy,
            words: dummy,
            bank: dummy,
            h_words: dummy,
            intent_logits: il,
            slot_logits: sl,
        };
        let (li, ls) = joint_loss(&mut g, &out, 2, &[0, 3]);
        let total = g.scalar(li) + g.scalar(ls);
        assert!((total - (4f64.ln() + 2.0 * 5f64.ln())).abs() < 1e-12);
        assert!((total - 4.605).abs() < 1e-3);

        // Near one-hot predictions drive the loss to 0.
        let mut g = Graph::new();
        let mut il = Array2::zeros((1, 4));
        il[[0, 1]] = 800.0;
        let mut slv = Array2::zeros((2, 5));
        slv[[0, 4]] = 800.0;
        slv[[1, 0]] = 800.0;
        let il = g.constant(il);
        let sl = g.constant(slv);
        let out = JointOutputs {
            intent_logits: il,
            slot_logits: sl,
            ..out
        };
        let (li, ls) = joint_loss(&mut g, &out, 1, &[4, 0]);
        assert_eq!(g.scalar(li) + g.scalar(ls), 0.0);
    }

    #[test]
    fn decode_argmax_and_repair() {
        let schema = SlotSchema::new(s(&["x", "y"]), s(&["a", "b"])).unwrap();
        let mut g = Graph::new();
        let il = g.constant(Array2::from_shape_vec((1, 2), vec![0.1, 0.9]).unwrap());
        // Token 0 argmax I-x (orphan, repaired to B-x), token 1 argmax I-x, token 2 argmax B-y.
        let sl = g.constant(
            Array2::from_shape_vec(
                (3, 5),
                vec![0.0, 0.1, 0.7, 0.1, 0.1, 0.0, 0.1, 0.5, 0.2, 0.2, 0.1, 0.1, 0.1, 0.6, 0.1],
            )
            .unwrap(),
        );
        let dummy = g.constant(Array2::zeros((1, 1)));
        let out = JointOutputs {
            cls: dummy,
            e_o: dummy,
            e_b: dummy,
            e_i: dummy,
            slots: dummy,
            words: dummy,
            bank: dummy,
            h_words: dummy,
            intent_logits: il,
            slot_logits: sl,
        };
        let p = decode(&schema, &g, &out);
        assert_eq!(p.intent, "b");
        assert_eq!(p.slots, s(&["B-x", "I-x", "B-y"]));
    }

    #[test]
    fn ablated_architecture_runs() {
        let arch = ArchConfig {
            compressor: false,
            projector: false,
        };
        let (m, store) = tiny_model(3, arch);
        let p = m.predict(&store, &s(&["w1", "w2"])).unwrap();
        assert_eq!(p.slots.len(), 2);
    }
}
