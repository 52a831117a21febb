//! Binary checkpoints.
//!
//! Layout (all integers little-endian): `MLLM`, u32 version, u64 config
//! hash, u32 record count, then per record: u32 name length, UTF-8 name,
//! u32 rank, rank × u64 dims, f64 payload. Training state is stored as
//! records whose names start with `@`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{LanguageModel, LanguageSpec, LayerSharing, ModelConfig, MultilingualModel, SharingPattern, NUM_LAYERS};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MLLM";
pub const VERSION: u32 = 1;

const EPOCH: &str = "@epoch";
const LR: &str = "@lr";
const VALID_PPL: &str = "@valid_ppl";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    /// Parameter arrays in store order.
    pub params: Vec<(String, Tensor)>,
    pub epoch: usize,
    /// Learning rate to resume with (plain SGD keeps no other state).
    pub lr: f64,
    /// Per-language validation perplexity at `epoch`.
    pub valid_ppl: Vec<f64>,
}

impl Checkpoint {
    pub fn from_store(config_hash: u64, store: &ParamStore, epoch: usize, lr: f64, valid_ppl: Vec<f64>) -> Self {
        Checkpoint {
            config_hash,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
            epoch,
            lr,
            valid_ppl,
        }
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        let meta = [
            (EPOCH, Tensor::vector(vec![self.epoch as f64])),
            (LR, Tensor::vector(vec![self.lr])),
            (VALID_PPL, Tensor::vector(self.valid_ppl.clone())),
        ];
        let count = self.params.len() + meta.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        let records = self
            .params
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .chain(meta.iter().map(|(n, t)| (*n, t)));
        for (name, t) in records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::checkpoint("magic", "not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::checkpoint(
                "version",
                format!("unsupported version {version} (expected {VERSION})"),
            ));
        }
        let config_hash = r.u64("config_hash")?;
        let count = r.u32("record_count")? as usize;
        let mut params = Vec::new();
        let mut epoch = None;
        let mut lr = None;
        let mut valid_ppl = None;
        for i in 0..count {
            let field = format!("record[{i}]");
            let name_len = r.u32(&format!("{field}.name_length"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("{field}.name"))?)
                .map_err(|_| Error::checkpoint(format!("{field}.name"), "invalid UTF-8"))?
                .to_string();
            let field = format!("record `{name}`");
            let rank = r.u32(&format!("{field}.rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&format!("{field}.dims"))? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some())
                .ok_or_else(|| Error::checkpoint(format!("{field}.dims"), "size overflow"))?;
            let payload = r.take(n * 8, &format!("{field}.payload"))?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::from_parts(shape, data);
            match name.as_str() {
                EPOCH => epoch = Some(scalar(&t, EPOCH)? as usize),
                LR => lr = Some(scalar(&t, LR)?),
                VALID_PPL => valid_ppl = Some(t.into_data()),
                _ if name.starts_with('@') => {
                    return Err(Error::checkpoint(field, "unknown state record"));
                }
                _ => params.push((name, t)),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("record_count", "trailing bytes after the last record"));
        }
        Ok(Checkpoint {
            config_hash,
            params,
            epoch: epoch.ok_or_else(|| Error::checkpoint(EPOCH, "missing"))?,
            lr: lr.ok_or_else(|| Error::checkpoint(LR, "missing"))?,
            valid_ppl: valid_ppl.ok_or_else(|| Error::checkpoint(VALID_PPL, "missing"))?,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint; with `expected_hash`, refuses one written for a
    /// different architecture.
    pub fn load(path: &Path, expected_hash: Option<u64>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        if let Some(h) = expected_hash {
            if h != ckpt.config_hash {
                return Err(Error::checkpoint(
                    "config_hash",
                    format!("checkpoint was written for configuration {:016x}, expected {h:016x}", ckpt.config_hash),
                ));
            }
        }
        Ok(ckpt)
    }

    /// Copies every array into `store` by name, checking names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::checkpoint(
                "record_count",
                format!("{} parameter arrays in checkpoint, {} in model", self.params.len(), store.len()),
            ));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::checkpoint(format!("record `{name}`"), "no such parameter in model"))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::checkpoint(
                    format!("record `{name}`.dims"),
                    format!("checkpoint has {:?}, model expects {:?}", t.shape(), store.get(id).shape()),
                ));
            }
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Recovers the architecture from array names and shapes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut languages = Vec::new();
        let mut embedding = None;
        for (name, t) in &self.params {
            if let Some(lang) = name.strip_suffix(".embedding") {
                let &[v, e] = t.shape() else {
                    return Err(Error::checkpoint(format!("record `{name}`.dims"), "embedding must be a matrix"));
                };
                languages.push(LanguageSpec {
                    name: lang.to_string(),
                    vocab: v,
                });
                embedding = Some(e);
            }
        }
        let first = languages
            .first()
            .ok_or_else(|| Error::checkpoint("records", "no embedding arrays"))?
            .name
            .clone();
        let mut tags = [LayerSharing::PerLanguage; NUM_LAYERS];
        for (k, tag) in tags.iter_mut().enumerate() {
            if self.param(&format!("shared.lstm{k}.u")).is_some() {
                *tag = LayerSharing::Shared;
            }
        }
        let u0 = self
            .param("shared.lstm0.u")
            .or_else(|| self.param(&format!("{first}.lstm0.u")))
            .ok_or_else(|| Error::checkpoint("records", "first LSTM layer missing"))?;
        let config = ModelConfig {
            embedding: embedding.expect("set with the first language"),
            hidden: u0.shape()[1],
            pattern: SharingPattern::new(&tags)?,
            languages,
        };
        if config.fingerprint() != self.config_hash {
            return Err(Error::checkpoint(
                "config_hash",
                "stored hash does not match the arrays in the file",
            ));
        }
        Ok(config)
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn to_model(&self) -> Result<MultilingualModel> {
        let mut model = MultilingualModel::build(self.model_config()?, 0)?;
        self.restore_into(model.store_mut())?;
        Ok(model)
    }
}

fn scalar(t: &Tensor, field: &str) -> Result<f64> {
    match t.data() {
        [v] => Ok(*v),
        _ => Err(Error::checkpoint(field, "expected a single value")),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, "file truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(m: usize, seed: u64) -> MultilingualModel {
        let languages = (0..m)
            .map(|l| LanguageSpec {
                name: format!("lang{l}"),
                vocab: 5 + l,
            })
            .collect();
        MultilingualModel::build(
            ModelConfig {
                embedding: 3,
                hidden: 4,
                pattern: SharingPattern::PROPOSED,
                languages,
            },
            seed,
        )
        .unwrap()
    }

    fn ckpt(m: &MultilingualModel) -> Checkpoint {
        Checkpoint::from_store(m.config().fingerprint(), m.store(), 7, 7.5, vec![120.5, 99.25])
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = model(2, 1);
        let id = m.language(0).embedding;
        m.store_mut().get_mut(id).data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        let c = ckpt(&m);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let rebuilt = back.to_model().unwrap();
        for id in m.store().ids() {
            let a: Vec<u64> = m.store().get(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = rebuilt.store().get(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{}", m.store().name(id));
        }
        assert_eq!(rebuilt.config(), m.config());
    }

    #[test]
    fn truncation_is_reported_by_field() {
        let bytes = ckpt(&model(2, 1)).to_bytes();
        for cut in [0, 3, 6, 10, 17, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Checkpoint { .. }), "cut {cut}: {err}");
            assert!(err.to_string().contains("truncated") || cut < 4, "{err}");
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = ckpt(&model(2, 1)).to_bytes();
        bytes[4] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn different_language_count_is_a_hash_error() {
        let dir = std::env::temp_dir().join(format!("mllm-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m3.ckpt");
        let m3 = model(3, 1);
        Checkpoint::from_store(m3.config().fingerprint(), m3.store(), 1, 30.0, vec![1.0; 3])
            .save(&path)
            .unwrap();
        let m2 = model(2, 1);
        let err = Checkpoint::load(&path, Some(m2.config().fingerprint())).unwrap_err();
        assert!(err.to_string().contains("config_hash"), "{err}");
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn shape_mismatch_names_the_record() {
        let c = ckpt(&model(2, 1));
        let mut other = MultilingualModel::build(
            ModelConfig {
                embedding: 3,
                hidden: 6,
                ..model(2, 1).config().clone()
            },
            1,
        )
        .unwrap();
        let err = c.restore_into(other.store_mut()).unwrap_err();
        assert!(err.to_string().contains("dims"), "{err}");
    }
}
