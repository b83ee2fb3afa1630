//! Seeded training loop: dynamic code-switching per epoch, negative
//! generation, AdamW with linear warmup/decay, validation-EM checkpointing.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamGroup, ParamStore, Var};
use crate::checkpoint::{self, ModelBundle};
use crate::codeswitch::{code_switch, BilingualDictionary, CodeSwitchConfig, SwitchedUtterance};
use crate::corpus::{Dataset, Utterance};
use crate::encoder::{reborrow, Vocabulary};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, join_predictions, MetricsReport};
use crate::lajoint::{joint_loss, predict_utterances, JointOutputs};
use crate::mcl::{
    scl_utterance_loss, slot_value_repr, total_loss, ucl_loss, wcl_anchors, wcl_utterance_loss, ClConfig, WordAnchor,
};
use crate::negpool::{build_negative_pool, generate_negatives, NegPoolConfig, NegativePool, NegativeUtterance, TokenMeanEmbedder};

/// RNG streams derived from `seed ^ epoch`.
const STREAM_CODESWITCH: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;
const STREAM_DROPOUT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub clip_norm: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub cl: ClConfig,
    pub negpool: NegPoolConfig,
    pub codeswitch: CodeSwitchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            lr_encoder: 3e-5,
            lr_head: 1e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.1,
            clip_norm: 1.0,
            train_fraction: 1.0,
            seed: 0,
            cl: ClConfig::default(),
            negpool: NegPoolConfig::default(),
            codeswitch: CodeSwitchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.cl.validate()?;
        self.codeswitch.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.cl.any_enabled() && self.batch_size < 2 {
            return Err(Error::Config("contrastive losses need batch_size >= 2".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!("train_fraction must lie in (0,1], got {}", self.train_fraction)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0,1]".into()));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_head", self.lr_head),
            ("weight_decay", self.weight_decay),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Plain source-language joint training: no code-switching, no contrastive terms.
    pub fn zero_shot(mut self) -> Self {
        self.cl = self.cl.with_lambdas(0.0);
        self.codeswitch.sentence_ratio = 0.0;
        self
    }
}

/// Piecewise-linear multiplier: `k / w` during warmup, then `(n - k) / (n - w)`.
pub fn lr_factor(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        step as f64 / warmup.max(1) as f64
    } else {
        (total.saturating_sub(step)) as f64 / total.saturating_sub(warmup).max(1) as f64
    }
}

pub fn warmup_steps(total: usize, fraction: f64) -> usize {
    (fraction * total as f64).ceil() as usize
}

/// AdamW with per-group learning rates. Weight decay skips row vectors
/// (biases, LayerNorm gains) and is decoupled from the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || -> Vec<Mat> { store.iter().map(|(_, p)| Mat::zeros(p.value.dim())).collect() };
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.0;
            let p = store.get_mut(id);
            let rate = lr(p.group);
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            self.m[i].zip_mut_with(&grads[i], |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(&grads[i], |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            if self.weight_decay > 0.0 && p.value.nrows() > 1 {
                let f = 1.0 - rate * self.weight_decay;
                p.value.mapv_inplace(|x| x * f);
            }
            ndarray::Zip::from(&mut p.value)
                .and(&self.m[i])
                .and(&self.v[i])
                .for_each(|w, &m, &v| *w -= rate * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Mat], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
    norm
}

/// Everything sampled for one training utterance before the loss is built.
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub source: Utterance,
    /// `None` when code-switching is off.
    pub switched: Option<Utterance>,
    pub negatives: Vec<NegativeUtterance>,
    pub anchors: Vec<WordAnchor>,
}

/// Draws the negatives and word-level anchors for a (source, switched) pair.
pub fn plan_item<R: Rng + ?Sized>(
    bundle: &ModelBundle,
    source: &Utterance,
    switched: Option<&SwitchedUtterance>,
    pool: Option<&NegativePool>,
    dicts: &[BilingualDictionary],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<BatchItem> {
    let mut negatives = Vec::new();
    if cfg.cl.lambda_s > 0.0 && !source.spans().is_empty() {
        if let Some(pool) = pool {
            let sw = match switched {
                Some(s) => s.clone(),
                None => SwitchedUtterance::unchanged(source),
            };
            negatives = generate_negatives(&sw, pool, cfg.negpool.n_s, dicts, &cfg.codeswitch, rng)?;
        }
    }
    let anchors = if cfg.cl.lambda_w > 0.0 {
        let ids = bundle.net.tag_ids(&source.slots)?;
        wcl_anchors(&source.slots, &ids, cfg.cl.n_w, rng)
    } else {
        Vec::new()
    };
    Ok(BatchItem {
        source: source.clone(),
        switched: switched.map(|s| s.to_utterance()),
        negatives,
        anchors,
    })
}

/// Scalar loss terms of one batch. `l_i` and `l_s` are the intent and slot
/// parts of `l_j`.
#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub l_i: Var,
    pub l_s: Var,
    pub l_j: Var,
    pub l_u: Var,
    pub l_scl: Var,
    pub l_w: Var,
    pub total: Var,
}

struct Pass {
    out: JointOutputs,
    l_i: Var,
    l_s: Var,
}

fn run_pass(
    g: &mut Graph,
    bundle: &ModelBundle,
    store: &ParamStore,
    u: &Utterance,
    dropout: Option<&mut dyn RngCore>,
) -> Result<Pass> {
    let net = &bundle.net;
    let input = net.assemble(&u.tokens)?;
    let out = net.forward(g, store, &input, dropout)?;
    let intent = net
        .schema
        .intent_id(&u.intent)
        .ok_or_else(|| Error::Validation(format!("intent {:?} not in schema", u.intent)))?;
    let tags = net.tag_ids(&u.slots)?;
    let (l_i, l_s) = joint_loss(g, &out, intent, &tags);
    Ok(Pass { out, l_i, l_s })
}

/// Builds the full training objective for a planned batch on `g`.
pub fn batch_losses(
    g: &mut Graph,
    bundle: &ModelBundle,
    store: &ParamStore,
    items: &[BatchItem],
    cl: &ClConfig,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<BatchLosses> {
    let heads = &bundle.heads;
    let mut li_terms = Vec::new();
    let mut ls_terms = Vec::new();
    let mut src_cls = Vec::new();
    let mut cs_cls = Vec::new();
    let mut scl_terms = Vec::new();
    let mut wcl_terms = Vec::new();
    for item in items {
        let src = run_pass(g, bundle, store, &item.source, reborrow(&mut dropout))?;
        let cs = match &item.switched {
            Some(u) => Some(run_pass(g, bundle, store, u, reborrow(&mut dropout))?),
            None => None,
        };
        match &cs {
            Some(c) => {
                let i = g.add(src.l_i, c.l_i);
                li_terms.push(g.scale(i, 0.5));
                let s = g.add(src.l_s, c.l_s);
                ls_terms.push(g.scale(s, 0.5));
            }
            None => {
                li_terms.push(src.l_i);
                ls_terms.push(src.l_s);
            }
        }
        let pos = cs.as_ref().unwrap_or(&src);
        src_cls.push(src.out.cls);
        cs_cls.push(pos.out.cls);

        if cl.lambda_s > 0.0 {
            let spans = item.source.spans();
            let mut anchors = Vec::new();
            let mut positives = Vec::new();
            let mut negatives: Vec<Vec<Var>> = vec![Vec::new(); spans.len()];
            for neg in &item.negatives {
                let np = run_pass(g, bundle, store, &neg.utterance, reborrow(&mut dropout))?;
                for (j, ns) in neg.spans.iter().enumerate() {
                    if ns.negative.is_some() {
                        negatives[j].push(slot_value_repr(g, np.out.words, &ns.span));
                    }
                }
            }
            let mut kept = Vec::new();
            for (j, sp) in spans.iter().enumerate() {
                if negatives[j].is_empty() {
                    continue;
                }
                anchors.push(slot_value_repr(g, src.out.words, sp));
                positives.push(slot_value_repr(g, pos.out.words, sp));
                kept.push(std::mem::take(&mut negatives[j]));
            }
            scl_terms.push(scl_utterance_loss(
                g,
                store,
                &heads.slot,
                src.out.slots,
                &anchors,
                &positives,
                &kept,
                cl.margin_s,
            )?);
        }
        if cl.lambda_w > 0.0 {
            wcl_terms.push(wcl_utterance_loss(
                g,
                store,
                &heads.word,
                src.out.bank,
                src.out.h_words,
                &item.anchors,
                cl.margin_w,
            )?);
            if let Some(c) = &cs {
                wcl_terms.push(wcl_utterance_loss(
                    g,
                    store,
                    &heads.word,
                    c.out.bank,
                    c.out.h_words,
                    &item.anchors,
                    cl.margin_w,
                )?);
            }
        }
    }
    let l_i = g.mean_all(&li_terms);
    let l_s = g.mean_all(&ls_terms);
    let l_j = g.add(l_i, l_s);
    let l_u = if cl.lambda_u > 0.0 {
        ucl_loss(g, store, &heads.utterance, &src_cls, &cs_cls, cl.margin_u)?
    } else {
        g.scalar_const(0.0)
    };
    let l_scl = g.mean_all(&scl_terms);
    let l_w = g.mean_all(&wcl_terms);
    let total = total_loss(g, l_j, l_u, l_scl, l_w, cl);
    Ok(BatchLosses {
        l_i,
        l_s,
        l_j,
        l_u,
        l_scl,
        l_w,
        total,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_j: f64,
    pub l_u: f64,
    pub l_s: f64,
    pub l_w: f64,
    pub total: f64,
    pub lr_encoder: f64,
    pub lr_head: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub valid: MetricsReport,
    pub improved: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub best_valid_em: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_checkpoint: Option<PathBuf>,
    pub log: Vec<LossRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub struct TrainOutcome {
    /// Parameters at the best validation epoch.
    pub best: ModelBundle,
    pub state: TrainState,
}

/// Source training words, dictionary words on both sides, and label-name words.
pub fn build_vocabulary(train: &Dataset, dicts: &[BilingualDictionary]) -> Vocabulary {
    let mut words: Vec<String> = crate::lajoint::label_texts(&train.schema).into_iter().flatten().collect();
    for u in &train.utterances {
        words.extend(u.tokens.iter().cloned());
    }
    for d in dicts {
        for (k, vs) in &d.entries {
            words.push(k.clone());
            words.extend(vs.iter().cloned());
        }
    }
    Vocabulary::build(words)
}

/// Seeded uniform sample of `ceil(fraction * n)` utterances, original order kept.
pub fn subsample(train: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0,1], got {fraction}")));
    }
    let n = train.len();
    let k = ((fraction * n as f64).ceil() as usize).min(n);
    if k == n {
        return Ok(train.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    Ok(Dataset {
        utterances: idx.into_iter().map(|i| train.utterances[i].clone()).collect(),
        schema: train.schema.clone(),
        split: train.split,
    })
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ epoch as u64);
    r.set_stream(stream);
    r
}

pub fn validation_metrics(bundle: &ModelBundle, store: &ParamStore, valid: &Dataset) -> Result<MetricsReport> {
    let preds = predict_utterances(&bundle.net, store, &valid.utterances)?;
    Ok(evaluate(&join_predictions(&valid.utterances, &preds)?))
}

fn write_json_line<T: Serialize>(path: &Path, rec: &T) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

fn dump_abort_state(run_dir: Option<&Path>, state: &TrainState, rec: &LossRecord, store: &ParamStore) {
    let Some(dir) = run_dir else { return };
    let norms: Vec<(String, f64)> = store
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect();
    let dump = serde_json::json!({
        "step": state.step,
        "epoch": state.epoch,
        "losses": rec,
        "param_norms": norms,
    });
    let path = dir.join("abort_state.json");
    if let Err(e) = std::fs::write(&path, dump.to_string()) {
        log::error!("could not write {}: {e}", path.display());
    }
}

/// Trains `bundle` in place and returns the best-validation parameters.
/// With `run_dir`, writes `loss_log.jsonl`, `epochs.jsonl` and the best
/// checkpoint under `best/`.
pub fn train(
    mut bundle: ModelBundle,
    train_set: &Dataset,
    valid: &Dataset,
    dicts: &[BilingualDictionary],
    pool: Option<&NegativePool>,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid.is_empty() {
        return Err(Error::Validation("training and validation splits must be non-empty".into()));
    }
    let train_set = subsample(train_set, cfg.train_fraction, cfg.seed)?;
    let built_pool;
    let pool = match pool {
        Some(p) => Some(p),
        None if cfg.cl.lambda_s > 0.0 => {
            let mut np = cfg.negpool;
            let k = train_set.schema.num_slots();
            if np.p_s >= k {
                log::warn!("p_s={} needs more than {k} slots; using {}", np.p_s, k.saturating_sub(1));
                np.p_s = k.saturating_sub(1);
            }
            let table = bundle.store.value(bundle.net.encoder.token_embeddings());
            let emb = TokenMeanEmbedder {
                vocab: &bundle.net.vocab,
                table,
            };
            built_pool = build_negative_pool(&train_set, &emb, &np)?.1;
            Some(&built_pool)
        }
        None => None,
    };
    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for f in ["loss_log.jsonl", "epochs.jsonl"] {
            let _ = std::fs::remove_file(dir.join(f));
        }
    }
    let use_cs = !cfg.codeswitch.is_disabled();
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let warm = warmup_steps(total_steps, cfg.warmup_fraction);
    let mut opt = AdamW::new(&bundle.store, cfg.weight_decay);
    let mut state = TrainState::default();
    let mut best_store = bundle.store.clone();
    let dropout_on = bundle.net.encoder.config.dropout > 0.0;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut cs_rng = epoch_rng(cfg.seed, epoch, STREAM_CODESWITCH);
        let switched: Vec<Option<SwitchedUtterance>> = train_set
            .utterances
            .iter()
            .map(|u| use_cs.then(|| code_switch(u, dicts, &cfg.codeswitch, &mut cs_rng)))
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut epoch_rng(cfg.seed, epoch, STREAM_SHUFFLE));
        let mut neg_rng = epoch_rng(cfg.seed, epoch, STREAM_NEGATIVES);
        let mut drop_rng = epoch_rng(cfg.seed, epoch, STREAM_DROPOUT);

        for chunk in order.chunks(cfg.batch_size) {
            let items = chunk
                .iter()
                .map(|&i| {
                    plan_item(
                        &bundle,
                        &train_set.utterances[i],
                        switched[i].as_ref(),
                        pool,
                        dicts,
                        cfg,
                        &mut neg_rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let dropout: Option<&mut dyn RngCore> = if dropout_on { Some(&mut drop_rng) } else { None };
            let losses = batch_losses(&mut g, &bundle, &bundle.store, &items, &cfg.cl, dropout)?;
            let factor = lr_factor(state.step, total_steps, warm);
            let mut rec = LossRecord {
                step: state.step,
                epoch,
                l_j: g.scalar(losses.l_j),
                l_u: g.scalar(losses.l_u),
                l_s: g.scalar(losses.l_scl),
                l_w: g.scalar(losses.l_w),
                total: g.scalar(losses.total),
                lr_encoder: cfg.lr_encoder * factor,
                lr_head: cfg.lr_head * factor,
                grad_norm: 0.0,
            };
            if !rec.total.is_finite() {
                dump_abort_state(run_dir, &state, &rec, &bundle.store);
                return Err(Error::Numerical(format!(
                    "non-finite loss at step {} (epoch {epoch}): L_J={} L_u={} L_s={} L_w={}",
                    state.step, rec.l_j, rec.l_u, rec.l_s, rec.l_w
                )));
            }
            let mut grads = g.backward(losses.total).for_params(&g, &bundle.store);
            rec.grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !rec.grad_norm.is_finite() {
                dump_abort_state(run_dir, &state, &rec, &bundle.store);
                return Err(Error::Numerical(format!("non-finite gradient at step {}", state.step)));
            }
            let (lr_e, lr_h) = (rec.lr_encoder, rec.lr_head);
            opt.step(&mut bundle.store, &grads, |grp| match grp {
                ParamGroup::Encoder => lr_e,
                ParamGroup::Head => lr_h,
            });
            if let Some(dir) = run_dir {
                write_json_line(&dir.join("loss_log.jsonl"), &rec)?;
            }
            log::debug!("step {} total {:.5}", state.step, rec.total);
            state.log.push(rec);
            state.step += 1;
        }

        let valid_m = validation_metrics(&bundle, &bundle.store, valid)?;
        let improved = state.best_valid_em.is_none_or(|b| valid_m.semantic_em > b);
        log::info!(
            "epoch {epoch}: valid EM {:.4} intent {:.4} F1 {:.4}{}",
            valid_m.semantic_em,
            valid_m.intent_accuracy,
            valid_m.slot_f1,
            if improved { " (best)" } else { "" }
        );
        if improved {
            state.best_valid_em = Some(valid_m.semantic_em);
            state.best_epoch = Some(epoch);
            best_store = bundle.store.clone();
            if let Some(dir) = run_dir {
                let ck = dir.join("best");
                checkpoint::save(&ck, &bundle)?;
                state.best_checkpoint = Some(ck);
            }
        }
        let er = EpochRecord {
            epoch,
            valid: valid_m,
            improved,
        };
        if let Some(dir) = run_dir {
            write_json_line(&dir.join("epochs.jsonl"), &er)?;
        }
        state.epochs.push(er);
    }
    bundle.store = best_store;
    Ok(TrainOutcome { best: bundle, state })
}
