//! Utterance-, slot- and word-level contrastive losses.
//!
//! Every loss is a margin triplet over a distance `f`: `max(0, f_ap - f_an + r)`.
//! Graph versions feed training; the plain `f64` helpers at the bottom are the
//! same formulas written out directly and back the tests.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::corpus::SlotSpan;
use crate::encoder::xavier;
use crate::error::{Error, Result};

/// Keeps the Euclidean distance differentiable at zero.
const DIST_EPS: f64 = 1e-12;
/// Floor on vector norms in cosine distances; zero vectors get distance 1.
const COS_EPS: f64 = 1e-8;

/// `g(x) = ReLU(x W1) W2`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHead {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl ProjectionHead {
    pub fn new<R: Rng + ?Sized>(name: &str, d: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        ProjectionHead {
            w1: store.add(format!("mcl.{name}.w1"), xavier(rng, d, d), ParamGroup::Head),
            w2: store.add(format!("mcl.{name}.w2"), xavier(rng, d, d), ParamGroup::Head),
        }
    }

    pub fn bind(name: &str, store: &ParamStore) -> Result<Self> {
        let get = |p: &str| {
            let n = format!("mcl.{name}.{p}");
            store.find(&n).ok_or_else(|| Error::Shape(format!("missing parameter {n}")))
        };
        Ok(ProjectionHead {
            w1: get("w1")?,
            w2: get("w2")?,
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let h = g.matmul(x, w1);
        let h = g.relu(h);
        g.matmul(h, w2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub utterance: ProjectionHead,
    pub slot: ProjectionHead,
    pub word: ProjectionHead,
}

impl ProjectionHeads {
    pub fn new<R: Rng + ?Sized>(d: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        ProjectionHeads {
            utterance: ProjectionHead::new("g_u", d, store, rng),
            slot: ProjectionHead::new("g_s", d, store, rng),
            word: ProjectionHead::new("g_w", d, store, rng),
        }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        Ok(ProjectionHeads {
            utterance: ProjectionHead::bind("g_u", store)?,
            slot: ProjectionHead::bind("g_s", store)?,
            word: ProjectionHead::bind("g_w", store)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClConfig {
    pub margin_u: f64,
    pub margin_s: f64,
    pub margin_w: f64,
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub lambda_w: f64,
    pub n_w: usize,
}

impl Default for ClConfig {
    fn default() -> Self {
        ClConfig {
            margin_u: 0.5,
            margin_s: 0.5,
            margin_w: 0.5,
            lambda_u: 0.5,
            lambda_s: 0.5,
            lambda_w: 0.5,
            n_w: 2,
        }
    }
}

impl ClConfig {
    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.margin_u,
            self.margin_s,
            self.margin_w,
            self.lambda_u,
            self.lambda_s,
            self.lambda_w,
        ];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("margins and lambdas must be finite and non-negative".into()));
        }
        if self.n_w == 0 {
            return Err(Error::Config("n_w must be positive".into()));
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.lambda_u > 0.0 || self.lambda_s > 0.0 || self.lambda_w > 0.0
    }

    pub fn with_lambdas(self, l: f64) -> Self {
        ClConfig {
            lambda_u: l,
            lambda_s: l,
            lambda_w: l,
            ..self
        }
    }
}

fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

/// Column vector of row sums.
fn row_sums(g: &mut Graph, x: Var) -> Var {
    let c = g.shape(x).1;
    let o = g.constant(ones(c, 1));
    g.matmul(x, o)
}

/// Mean of `relu(f_ap - f_an + r)` over aligned `n x 1` columns.
fn triplet_mean(g: &mut Graph, f_ap: Var, f_an: Var, r: f64) -> Var {
    let n = g.shape(f_ap).0;
    let d = g.sub(f_ap, f_an);
    let d = g.add_const(d, r);
    let t = g.relu(d);
    let s = g.sum(t);
    g.scale(s, 1.0 / n as f64)
}

/// Utterance-level loss over `[CLS]` vectors of a source batch and its
/// code-switched counterpart. Each of the `2N` vectors anchors once; its pair
/// is the positive and the other `2(N-1)` are negatives.
pub fn ucl_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &ProjectionHead,
    src_cls: &[Var],
    cs_cls: &[Var],
    r: f64,
) -> Result<Var> {
    let n = src_cls.len();
    if n != cs_cls.len() {
        return Err(Error::Shape("source and code-switched batches differ in size".into()));
    }
    if n < 2 {
        log::warn!("utterance-level loss needs at least 2 utterances per batch; got {n}, using 0");
        return Ok(g.scalar_const(0.0));
    }
    let all: Vec<Var> = src_cls.iter().chain(cs_cls).copied().collect();
    let e = g.concat_rows(&all);
    let z = head.apply(g, store, e);
    let m = 2 * n;
    let partner = |i: usize| if i < n { i + n } else { i - n };
    let mut left = Vec::new();
    let mut right = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if j != i {
                left.push(i);
                right.push(j);
            }
        }
    }
    let pair_index = |i: usize, j: usize| i * (m - 1) + if j > i { j - 1 } else { j };
    let zl = g.rows(z, &left);
    let zr = g.rows(z, &right);
    let diff = g.sub(zl, zr);
    let sq = g.mul(diff, diff);
    let d2 = row_sums(g, sq);
    let d2 = g.add_const(d2, DIST_EPS);
    let dist = g.sqrt(d2);
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..m {
        for j in 0..m {
            if j != i && j != partner(i) {
                pos.push(pair_index(i, partner(i)));
                neg.push(pair_index(i, j));
            }
        }
    }
    let f_ap = g.rows(dist, &pos);
    let f_an = g.rows(dist, &neg);
    Ok(triplet_mean(g, f_ap, f_an, r))
}

/// Mean of the word outputs over the span's positions.
pub fn slot_value_repr(g: &mut Graph, words: Var, span: &SlotSpan) -> Var {
    let r = g.row_range(words, span.start, span.len());
    g.mean_rows(r)
}

/// Slot-level loss for one utterance. `anchors[j]`, `positives[j]` and
/// `negatives[j]` are the value representations of span `j` in the source,
/// code-switched and negative utterances; `slots` is the `K x d` slot block of
/// the source forward pass.
#[allow(clippy::too_many_arguments)]
pub fn scl_utterance_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &ProjectionHead,
    slots: Var,
    anchors: &[Var],
    positives: &[Var],
    negatives: &[Vec<Var>],
    r: f64,
) -> Result<Var> {
    let j = anchors.len();
    if j != positives.len() || j != negatives.len() {
        return Err(Error::Shape("span lists are not aligned".into()));
    }
    let pairs: Vec<(usize, usize)> = negatives
        .iter()
        .enumerate()
        .flat_map(|(s, ns)| (0..ns.len()).map(move |q| (s, q)))
        .collect();
    if pairs.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    let mut rows: Vec<Var> = anchors.iter().chain(positives).copied().collect();
    rows.extend(negatives.iter().flatten());
    let v = g.concat_rows(&rows);
    let z = head.apply(g, store, v);
    let zk = head.apply(g, store, slots);
    let zkt = g.transpose(zk);
    let aff = g.matmul(z, zkt);
    let p = g.softmax_rows(aff);
    let lp = g.log_softmax_rows(aff);

    let mut neg_offsets = Vec::with_capacity(j);
    let mut off = 2 * j;
    for ns in negatives {
        neg_offsets.push(off);
        off += ns.len();
    }
    let anchor_ids: Vec<usize> = (0..j).collect();
    let pos_ids: Vec<usize> = (0..j).map(|s| j + s).collect();
    let kl_pos = kl_rows(g, p, lp, &anchor_ids, &pos_ids);
    let pa: Vec<usize> = pairs.iter().map(|&(s, _)| s).collect();
    let pn: Vec<usize> = pairs.iter().map(|&(s, q)| neg_offsets[s] + q).collect();
    let kl_neg = kl_rows(g, p, lp, &pa, &pn);
    let f_ap = g.rows(kl_pos, &pa);
    // Mean over negatives then spans; equal to the flat mean only when every
    // span has the same number of negatives, so weight explicitly.
    let weights: Vec<f64> = pairs
        .iter()
        .map(|&(s, _)| 1.0 / (negatives[s].len() as f64 * j as f64))
        .collect();
    let d = g.sub(f_ap, kl_neg);
    let d = g.add_const(d, r);
    let t = g.relu(d);
    let w = g.constant(Array2::from_shape_vec((pairs.len(), 1), weights).unwrap());
    let tw = g.mul(t, w);
    Ok(g.sum(tw))
}

/// `KL(p_a || p_b)` for paired rows, as an `n x 1` column.
fn kl_rows(g: &mut Graph, p: Var, lp: Var, a: &[usize], b: &[usize]) -> Var {
    let pa = g.rows(p, a);
    let la = g.rows(lp, a);
    let lb = g.rows(lp, b);
    let d = g.sub(la, lb);
    let m = g.mul(pa, d);
    row_sums(g, m)
}

/// Candidate negatives for anchor `t` with their sampling probabilities
/// `p_r ∝ sin(1/|r - t|)`. Tokens sharing the anchor's tag are masked.
pub fn wcl_probabilities(tags: &[String], t: usize) -> Vec<(usize, f64)> {
    let q: Vec<(usize, f64)> = (0..tags.len())
        .filter(|&r| tags[r] != tags[t])
        .map(|r| (r, (1.0 / r.abs_diff(t) as f64).sin()))
        .collect();
    let z: f64 = q.iter().map(|x| x.1).sum();
    q.into_iter().map(|(r, v)| (r, v / z)).collect()
}

/// Up to `n_w` distinct negative positions drawn by the probabilities above.
pub fn wcl_sample_negatives<R: Rng + ?Sized>(tags: &[String], t: usize, n_w: usize, rng: &mut R) -> Vec<usize> {
    let cand = wcl_probabilities(tags, t);
    if cand.is_empty() {
        return Vec::new();
    }
    let k = n_w.min(cand.len());
    cand.choose_multiple_weighted(rng, k, |c| c.1)
        .expect("sin(1/d) weights are positive and finite")
        .map(|c| c.0)
        .collect()
}

/// One word-level anchor: word `t`, its gold label id `k` and sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordAnchor {
    pub t: usize,
    pub label: usize,
    pub negatives: Vec<usize>,
}

/// Anchors for every non-`O` token with at least one candidate negative.
pub fn wcl_anchors<R: Rng + ?Sized>(tags: &[String], label_ids: &[usize], n_w: usize, rng: &mut R) -> Vec<WordAnchor> {
    (0..tags.len())
        .filter(|&t| tags[t] != crate::corpus::OUTSIDE)
        .filter_map(|t| {
            let negatives = wcl_sample_negatives(tags, t, n_w, rng);
            (!negatives.is_empty()).then_some(WordAnchor {
                t,
                label: label_ids[t],
                negatives,
            })
        })
        .collect()
}

/// Word-level loss for one utterance with cosine distance `f_w = 1 - cos`.
/// Averages over negatives, then anchors; 0 without anchors.
pub fn wcl_utterance_loss(
    g: &mut Graph,
    store: &ParamStore,
    head: &ProjectionHead,
    bank: Var,
    h_words: Var,
    anchors: &[WordAnchor],
    r: f64,
) -> Result<Var> {
    if anchors.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    let zb = head.apply(g, store, bank);
    let zh = head.apply(g, store, h_words);
    let zb = g
        .l2_normalize_rows_eps(zb, COS_EPS)
        .map_err(|e| Error::Numerical(format!("word-level head output: {e}")))?;
    let zh = g
        .l2_normalize_rows_eps(zh, COS_EPS)
        .map_err(|e| Error::Numerical(format!("word-level head output: {e}")))?;
    let zbt = g.transpose(zb);
    let cos = g.matmul(zh, zbt);
    let mut terms = Vec::with_capacity(anchors.len());
    for a in anchors {
        let c_pos = g.pick_sum(cos, &[(a.t, a.label)]);
        let mut per_neg = Vec::with_capacity(a.negatives.len());
        for &n in &a.negatives {
            // (1 - c_pos) - (1 - c_neg) + r
            let c_neg = g.pick_sum(cos, &[(n, a.label)]);
            let d = g.sub(c_neg, c_pos);
            let d = g.add_const(d, r);
            per_neg.push(g.relu(d));
        }
        terms.push(g.mean_all(&per_neg));
    }
    Ok(g.mean_all(&terms))
}

/// `L = L_J + λ1 L_u + λ2 L_s + λ3 L_w`.
pub fn total_loss(g: &mut Graph, l_j: Var, l_u: Var, l_s: Var, l_w: Var, cfg: &ClConfig) -> Var {
    let mut terms = vec![l_j];
    for (l, lam) in [(l_u, cfg.lambda_u), (l_s, cfg.lambda_s), (l_w, cfg.lambda_w)] {
        if lam != 0.0 {
            terms.push(g.scale(l, lam));
        }
    }
    g.add_all(&terms)
}

pub fn triplet(f_ap: f64, f_an: f64, r: f64) -> f64 {
    (f_ap - f_an + r).max(0.0)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `softmax(z Z_K^T)`.
pub fn affinity(z: &[f64], zk: &[Vec<f64>]) -> Vec<f64> {
    let dots: Vec<f64> = zk.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect();
    softmax(&dots)
}

/// `KL(p || q)` in nats; terms with `p_i = 0` contribute 0.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - crate::negpool::cosine(a, b)
}

/// Plain utterance-level loss with an identity head.
pub fn ucl_loss_plain(src: &[Vec<f64>], cs: &[Vec<f64>], r: f64) -> f64 {
    let n = src.len();
    if n < 2 {
        return 0.0;
    }
    let all: Vec<&Vec<f64>> = src.iter().chain(cs).collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..2 * n {
        let p = if i < n { i + n } else { i - n };
        let f_ap = euclidean(all[i], all[p]);
        for j in 0..2 * n {
            if j == i || j == p {
                continue;
            }
            total += triplet(f_ap, euclidean(all[i], all[j]), r);
            count += 1;
        }
    }
    total / count as f64
}
