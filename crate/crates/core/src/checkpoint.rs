//! Checkpoint directories.
//!
//! `manifest.json` records the schema, vocabulary, encoder and architecture
//! configs, a SHA-256 hash of those configs, and a tensor table. `params.bin`
//! holds every tensor back to back as row-major little-endian `f64`; each
//! manifest entry gives its byte `offset` and `shape`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Mat, ParamGroup, ParamStore};
use crate::corpus::SlotSchema;
use crate::encoder::{EncoderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::lajoint::{ArchConfig, LaJoint};
use crate::mcl::ProjectionHeads;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;

/// A joint model with its contrastive heads and parameters.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub net: LaJoint,
    pub heads: ProjectionHeads,
    pub store: ParamStore,
}

impl ModelBundle {
    pub fn new<R: Rng + ?Sized>(
        schema: SlotSchema,
        vocab: Vocabulary,
        encoder: EncoderConfig,
        arch: ArchConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = LaJoint::new(schema, vocab, encoder, arch, &mut store, rng)?;
        let heads = ProjectionHeads::new(net.d_model(), &mut store, rng);
        Ok(ModelBundle { net, heads, store })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub schema: SlotSchema,
    pub vocab: Vocabulary,
    pub encoder: EncoderConfig,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn config_hash(schema: &SlotSchema, vocab: &Vocabulary, encoder: &EncoderConfig, arch: &ArchConfig) -> String {
    let canon = serde_json::json!({
        "schema": schema,
        "vocab": vocab,
        "encoder": encoder,
        "arch": arch,
    });
    let digest = Sha256::digest(canon.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save(dir: &Path, model: &ModelBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.store.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(model.store.len());
    for (_, p) in model.store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.nrows(), p.value.ncols()],
            dtype: "f64le".into(),
            offset: bytes.len() as u64,
            group: p.group,
        });
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let net = &model.net;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&net.schema, &net.vocab, &net.encoder.config, &net.arch),
        schema: net.schema.clone(),
        vocab: net.vocab.clone(),
        encoder: net.encoder.config.clone(),
        arch: net.arch,
        tensors,
    };
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let ppath = dir.join(PARAMS);
    std::fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint format {}", m.format_version)));
    }
    if config_hash(&m.schema, &m.vocab, &m.encoder, &m.arch) != m.config_hash {
        return Err(Error::Validation("checkpoint config hash mismatch".into()));
    }
    Ok(m)
}

pub fn load(dir: &Path) -> Result<ModelBundle> {
    let m = load_manifest(dir)?;
    let ppath = dir.join(PARAMS);
    let bytes = std::fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
    let mut store = ParamStore::new();
    for t in &m.tensors {
        if t.dtype != "f64le" {
            return Err(Error::Validation(format!("tensor {}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        let start = t.offset as usize;
        let end = start + 8 * n;
        let raw = bytes
            .get(start..end)
            .ok_or_else(|| Error::Validation(format!("tensor {} runs past the end of {PARAMS}", t.name)))?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Mat::from_shape_vec((t.shape[0], t.shape[1]), vals).unwrap();
        store.add(t.name.clone(), value, t.group);
    }
    let net = LaJoint::bind(m.schema, m.vocab, m.encoder, m.arch, &store)?;
    let heads = ProjectionHeads::bind(&store)?;
    Ok(ModelBundle { net, heads, store })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bundle() -> ModelBundle {
        let schema = SlotSchema::new(vec!["a".into(), "b_c".into()], vec!["i".into(), "j".into()]).unwrap();
        let vocab = Vocabulary::build(["w", "a", "b", "c", "outside", "begin", "inside"]);
        let enc = EncoderConfig {
            layers: 1,
            d_model: 4,
            heads: 2,
            d_ff: 8,
            max_len: 16,
            vocab_size: vocab.len(),
            dropout: 0.1,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModelBundle::new(schema, vocab, enc, ArchConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = bundle();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(back.store.len(), m.store.len());
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.group, b.group);
            assert_eq!(a.value, b.value);
        }
        let toks = vec!["w".to_string(), "a".to_string()];
        assert_eq!(
            m.net.predict(&m.store, &toks).unwrap(),
            back.net.predict(&back.store, &toks).unwrap()
        );
        let bytes = std::fs::metadata(dir.path().join(PARAMS)).unwrap().len();
        assert_eq!(bytes as usize, 8 * m.store.num_scalars());
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let m = bundle();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &m).unwrap();
        let p = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&p).unwrap().replace("\"b_c\"", "\"b_d\"");
        std::fs::write(&p, text).unwrap();
        assert!(load(dir.path()).unwrap_err().to_string().contains("hash"));
    }
}
