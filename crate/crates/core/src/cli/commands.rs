use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, ModelBundle};
use crate::codeswitch::{code_switch_dataset, load_dictionary, BilingualDictionary};
use crate::corpus::{load_dataset, read_jsonl, write_jsonl, Dataset, SlotSchema, Split, Utterance};
use crate::error::{Error, Result};
use crate::evalkit::{error_statistics, evaluate, export_representations, join_predictions};
use crate::lajoint::{predict_utterances, PredictionLine};
use crate::negpool::{build_negative_pool, NegativePool, TokenMeanEmbedder};
use crate::trainer::{build_vocabulary, train, validation_metrics};

use super::config::RunConfig;
use super::toy;

/// Name of the effective configuration written into every output location.
pub const CONFIG_ECHO: &str = "config.cfg";

/// A dictionary argument: `SRC-TGT:PATH`, or a path whose last dotted
/// component before the extension is `SRC-TGT` (as in `dict.en-xx.txt`).
pub fn parse_dict_arg(arg: &str) -> Result<(String, String, PathBuf)> {
    let (pair, path) = match arg.split_once(':') {
        Some((p, path)) if p.contains('-') && !p.contains('/') => (p.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(arg);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let pair = stem.rsplit('.').next().unwrap_or("").to_string();
            (pair, path)
        }
    };
    match pair.split_once('-') {
        Some((s, t)) if !s.is_empty() && !t.is_empty() => Ok((s.to_string(), t.to_string(), path)),
        _ => Err(Error::Config(format!(
            "dictionary {arg:?}: give locales as SRC-TGT:PATH or name the file like dict.en-xx.txt"
        ))),
    }
}

pub fn load_dictionaries(args: &[String]) -> Result<Vec<BilingualDictionary>> {
    args.iter()
        .map(|a| {
            let (s, t, p) = parse_dict_arg(a)?;
            load_dictionary(&p, &s, &t)
        })
        .collect()
}

fn schema_for(schema: Option<&Path>, data: &Path) -> Result<SlotSchema> {
    match schema {
        Some(p) => SlotSchema::load(p),
        None => SlotSchema::infer(&read_jsonl::<Utterance>(data)?),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(CONFIG_ECHO);
    std::fs::write(&p, cfg.render()).map_err(|e| Error::io(&p, e))
}

fn parent_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

/// Code-switches a corpus once and writes the switched utterances with provenance.
pub fn augment(cfg: &RunConfig, data: &Path, dicts: &[String], out: &Path) -> Result<usize> {
    cfg.validate()?;
    let schema = schema_for(None, data)?;
    let (d, _) = load_dataset(data, &schema, cfg.bio_mode, Split::Train)?;
    let dicts = load_dictionaries(dicts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.codeswitch.seed);
    let switched = code_switch_dataset(&d, &dicts, &cfg.train.codeswitch, &mut rng);
    ensure_parent(out)?;
    write_jsonl(out, &switched)?;
    echo_config(cfg, &parent_dir(out))?;
    Ok(switched.len())
}

/// Builds slot neighborhoods and negative value pools. Descriptors are embedded
/// with the token table of `checkpoint`, or of a freshly seeded encoder.
pub fn pools(
    cfg: &RunConfig,
    data: &Path,
    schema: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<NegativePool> {
    cfg.validate()?;
    let schema = SlotSchema::load(schema)?;
    let (d, _) = load_dataset(data, &schema, cfg.bio_mode, Split::Train)?;
    let bundle = match checkpoint {
        Some(dir) => checkpoint::load(dir)?,
        None => fresh_bundle(cfg, &d, &[])?,
    };
    let emb = TokenMeanEmbedder {
        vocab: &bundle.net.vocab,
        table: bundle.store.value(bundle.net.encoder.token_embeddings()),
    };
    let (descs, pool) = build_negative_pool(&d, &emb, &cfg.train.negpool)?;
    pool.audit(&descs, cfg.train.negpool.p_s)?;
    ensure_parent(out)?;
    pool.save(out)?;
    echo_config(cfg, &parent_dir(out))?;
    Ok(pool)
}

/// Untrained model over the training words and dictionary entries, seeded from `cfg`.
pub fn fresh_bundle(cfg: &RunConfig, train: &Dataset, dicts: &[BilingualDictionary]) -> Result<ModelBundle> {
    let vocab = build_vocabulary(train, dicts);
    let enc = cfg.encoder.config(&vocab, cfg.train.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    ModelBundle::new(train.schema.clone(), vocab, enc, cfg.arch, &mut rng)
}

pub struct TrainArgs<'a> {
    pub train: &'a Path,
    pub valid: &'a Path,
    pub dicts: &'a [String],
    pub schema: Option<&'a Path>,
    pub pools: Option<&'a Path>,
    pub outdir: &'a Path,
}

/// Trains and fills `outdir` with the effective config, loss and epoch logs,
/// the best checkpoint under `best/` and its validation metrics.
pub fn train_cmd(cfg: &RunConfig, a: &TrainArgs) -> Result<crate::evalkit::MetricsReport> {
    cfg.validate()?;
    let schema = schema_for(a.schema, a.train)?;
    let (tr, _) = load_dataset(a.train, &schema, cfg.bio_mode, Split::Train)?;
    let (va, _) = load_dataset(a.valid, &schema, cfg.bio_mode, Split::Valid)?;
    let dicts = load_dictionaries(a.dicts)?;
    let pool = a.pools.map(NegativePool::load).transpose()?;
    if a.outdir.join("loss_log.jsonl").exists() {
        return Err(Error::Config(format!("{} already holds a run", a.outdir.display())));
    }
    echo_config(cfg, a.outdir)?;
    let bundle = fresh_bundle(cfg, &tr, &dicts)?;
    let outcome = train(bundle, &tr, &va, &dicts, pool.as_ref(), &cfg.train, Some(a.outdir))?;
    let metrics = validation_metrics(&outcome.best, &outcome.best.store, &va)?;
    write_json(&a.outdir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

/// Scores a checkpoint on a test corpus; optionally keeps the predictions.
pub fn eval(test: &Path, checkpoint_dir: &Path, out: &Path, predictions: Option<&Path>) -> Result<crate::evalkit::MetricsReport> {
    let bundle = checkpoint::load(checkpoint_dir)?;
    let (d, _) = load_dataset(test, &bundle.net.schema, crate::corpus::BioMode::Strict, Split::Test)?;
    let preds = predict_utterances(&bundle.net, &bundle.store, &d.utterances)?;
    if let Some(p) = predictions {
        ensure_parent(p)?;
        write_jsonl(p, &preds)?;
    }
    let report = evaluate(&join_predictions(&d.utterances, &preds)?);
    write_json(out, &report)?;
    Ok(report)
}

pub fn error_stats(pred: &Path, gold: &Path, out: &Path) -> Result<crate::evalkit::ErrorStats> {
    let preds: Vec<PredictionLine> = read_jsonl(pred)?;
    let gold_utts: Vec<Utterance> = read_jsonl(gold)?;
    let stats = error_statistics(&join_predictions(&gold_utts, &preds)?);
    write_json(out, &stats)?;
    Ok(stats)
}

pub fn export_repr(data: &Path, checkpoint_dir: &Path, out: &Path) -> Result<usize> {
    let bundle = checkpoint::load(checkpoint_dir)?;
    let (d, _) = load_dataset(data, &bundle.net.schema, crate::corpus::BioMode::Strict, Split::Test)?;
    ensure_parent(out)?;
    export_representations(&bundle.net, &bundle.store, &d.utterances, out)
}

/// Writes the toy corpus plus a `toy.cfg` tuned for it.
pub fn make_toy(seed: u64, out: &Path) -> Result<toy::ToyCorpus> {
    let corpus = toy::generate(&toy::ToyConfig {
        seed,
        ..Default::default()
    });
    toy::write(&corpus, out)?;
    let mut cfg = RunConfig::toy();
    cfg.set("seed", &seed.to_string())?;
    let p = out.join("toy.cfg");
    std::fs::write(&p, cfg.render()).map_err(|e| Error::io(&p, e))?;
    Ok(corpus)
}
