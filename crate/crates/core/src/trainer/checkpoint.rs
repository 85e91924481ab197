//! Checkpoint container: magic `MMCK`, format version, JSON metadata record,
//! an index of named little-endian f32 arrays and a trailing CRC-32.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochRecord, MultiTaskModel, TaskSpec, TrainStatus};
use crate::error::{Error, Result};
use crate::model::{BackboneSpec, MetamorphConfig};
use crate::privacy::PrivacyLedger;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMCK";
const VERSION: u32 = 1;

/// Metadata record stored next to the parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneSpec,
    pub metamorph: MetamorphConfig,
    pub tasks: Vec<TaskSpec>,
    pub status: TrainStatus,
    pub ledger: Option<PrivacyLedger>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    /// Snapshot of the experiment configuration that produced the model.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: MultiTaskModel,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: MultiTaskModel, status: TrainStatus, ledger: Option<PrivacyLedger>) -> Self {
        let meta = CheckpointMeta {
            backbone: model.backbone.clone(),
            metamorph: model.metamorph_config,
            tasks: model.tasks.iter().map(|t| t.spec.clone()).collect(),
            status,
            ledger,
            history: Vec::new(),
            config: serde_json::Value::Null,
        };
        Self { model, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = self.meta.clone();
        meta.backbone = self.model.backbone.clone();
        meta.metamorph = self.model.metamorph_config;
        meta.tasks = self.model.tasks.iter().map(|t| t.spec.clone()).collect();
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let entries: Vec<(String, &Tensor)> = self
            .model
            .named_stores()
            .into_iter()
            .flat_map(|(prefix, store)| {
                store
                    .iter()
                    .map(move |(name, t)| (format!("{prefix}/{name}"), t))
                    .collect::<Vec<_>>()
            })
            .collect();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Data(format!("parameter name `{name}` is too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 4 + 8 + 4 + 4 || &bytes[..4] != MAGIC {
            return Err(Error::Integrity("not a checkpoint file (bad magic or truncated)".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Integrity("checkpoint checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Integrity(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = usize::try_from(r.u64()?).map_err(|_| Error::Integrity("metadata length".into()))?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::Integrity(format!("checkpoint metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?;
            let ndim = r.take(1)?[0] as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Integrity("array size".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.insert(name, Tensor::new(shape, data));
        }
        if r.pos != body.len() {
            return Err(Error::Integrity("trailing bytes after the parameter index".into()));
        }

        // Architecture comes from the metadata; every value is then overwritten.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MultiTaskModel::new(meta.backbone.clone(), meta.metamorph, &meta.tasks, &mut rng)?;
        for (prefix, store) in model.named_stores_mut() {
            let names: Vec<String> = store.iter().map(|(n, _)| format!("{prefix}/{n}")).collect();
            for (name, slot) in names.iter().zip(store.tensors_mut()) {
                let t = arrays
                    .remove(name)
                    .ok_or_else(|| Error::Integrity(format!("checkpoint lacks parameter `{name}`")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Integrity(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t;
            }
        }
        if let Some(extra) = arrays.keys().next() {
            return Err(Error::Integrity(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(Self { model, meta })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Integrity("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let bytes = checkpoint.to_bytes()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TaskKind;

    fn model() -> MultiTaskModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let specs = [
            TaskSpec::new("a", TaskKind::Classification { classes: 2 }),
            TaskSpec::new("b", TaskKind::Classification { classes: 3 }).private(),
        ];
        MultiTaskModel::new(BackboneSpec::desk_default(), MetamorphConfig::default(), &specs, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_preserves_parameters_and_metadata() {
        let m = model();
        let mut ck = Checkpoint::new(m.clone(), TrainStatus::Completed, None);
        ck.meta.config = serde_json::json!({"seed": 3});
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        for ((na, a), (nb, b)) in m.named_stores().iter().zip(back.model.named_stores()) {
            assert_eq!(na, &nb);
            assert_eq!(a.fingerprint(), b.fingerprint());
        }
        assert_eq!(back.meta.config["seed"], 3);
        assert!(back.model.tasks[1].spec.is_private);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = Checkpoint::new(model(), TrainStatus::Completed, None).to_bytes().unwrap();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x10;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Integrity(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 9]), Err(Error::Integrity(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mmck");
        let ck = Checkpoint::new(model(), TrainStatus::Completed, None);
        save_checkpoint(&path, &ck).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model.num_params(), ck.model.num_params());
        let err = load_checkpoint(&dir.path().join("missing")).unwrap_err();
        assert!(err.to_string().contains("missing"));
    }
}
