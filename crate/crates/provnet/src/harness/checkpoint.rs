//! PVNT checkpoint container: magic, version, JSON header (model spec,
//! dataset fingerprint, config snapshot, tensor directory), then a
//! contiguous little-endian f32 payload. Round trips are bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{IndexMaps, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::vae::{VaeModel, VaeSpec};
use crate::models::{ModelSpec, SingleBranchModel, TwoBranchModel, Variant};
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::train::CnnModel;

pub const MAGIC: &[u8; 4] = b"PVNT";
pub const VERSION: u32 = 1;

/// Which architecture the tensors belong to.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelHeader {
    Cnn { spec: ModelSpec },
    Vae { spec: VaeSpec },
    /// Bare tensor container (embedding exports).
    Tensors,
}

/// Everything needed to interpret indices without reloading the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub n: usize,
    pub checksum: String,
    pub num_classes: usize,
    pub class_counts: Vec<usize>,
    pub per_class_lists: Vec<Vec<usize>>,
    /// Subset index → original global index, when trained on a subset.
    pub source_index: Option<Vec<usize>>,
    pub norm: Option<(f32, f32)>,
}

impl DatasetMeta {
    pub fn from_dataset(ds: &IndexedDataset) -> Self {
        Self {
            name: ds.name.clone(),
            n: ds.len(),
            checksum: ds.fingerprint.clone(),
            num_classes: ds.num_classes,
            class_counts: ds.class_counts.clone(),
            per_class_lists: ds.per_class_lists.clone(),
            source_index: ds.source_index.clone(),
            norm: ds.norm,
        }
    }

    pub fn index_maps(&self) -> IndexMaps {
        IndexMaps::from_parts(self.per_class_lists.clone(), self.n)
    }

    pub fn to_source_index(&self, i: usize) -> usize {
        match &self.source_index {
            Some(m) => m[i],
            None => i,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelHeader,
    dataset: DatasetMeta,
    config: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelHeader,
    pub dataset: DatasetMeta,
    pub config: BTreeMap<String, String>,
    pub store: ParamStore,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelHeader,
    dataset: &DatasetMeta,
    config: &BTreeMap<String, String>,
    store: &ParamStore,
) -> Result<()> {
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for p in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            trainable: p.trainable,
        });
        offset += (p.value.len() * 4) as u64;
    }
    let header = Header {
        model: model.clone(),
        dataset: dataset.clone(),
        config: config.clone(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    for p in store.iter() {
        for &v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Parse and validate a checkpoint. Fails cleanly (no partial store) on
/// bad magic, version mismatch, or truncation. When
/// `expect_fingerprint` is given, a differing stored fingerprint is
/// refused: indices are meaningless on another dataset ordering.
pub fn load_checkpoint(path: &Path, expect_fingerprint: Option<&str>) -> Result<Checkpoint> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a PVNT checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    if let Some(expected) = expect_fingerprint {
        if expected != header.dataset.checksum {
            return Err(Error::Checkpoint(format!(
                "dataset fingerprint mismatch: checkpoint was trained on {} ({}) with fingerprint {}, got dataset fingerprint {}",
                header.dataset.name, header.dataset.n, header.dataset.checksum, expected
            )));
        }
    }

    let payload = &bytes[payload_start..];
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0);
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", t.dtype)));
        }
        let count: usize = t.shape.iter().product();
        let start = t.offset as usize;
        let end = start + count * 4;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "truncated payload: tensor {} needs bytes {}..{}, have {}",
                t.name,
                start,
                end,
                payload.len()
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let id = store.add(&t.name, &t.shape, crate::nn::Init::Zeros, t.trainable, &mut rng);
        store.value_mut(id).data_mut().copy_from_slice(&data);
    }

    Ok(Checkpoint {
        model: header.model,
        dataset: header.dataset,
        config: header.config,
        store,
    })
}

/// Rebuild the architecture handles over a loaded store. The builder
/// registers parameters in its canonical order into a fresh store, then
/// the loaded values are moved in by name.
pub fn instantiate_cnn(model: &ModelHeader, loaded: &Checkpoint) -> Result<(CnnModel, ParamStore)> {
    let spec = match model {
        ModelHeader::Cnn { spec } => spec,
        _ => return Err(Error::Checkpoint("checkpoint does not hold a CNN model".into())),
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0);
    let handle = match spec.variant {
        Variant::SingleBranch => CnnModel::Single(SingleBranchModel::build(spec, &mut store, &mut rng)?),
        Variant::TwoBranch => CnnModel::Two(TwoBranchModel::build(spec, &mut store, &mut rng)?),
    };
    copy_values(&loaded.store, &mut store)?;
    Ok((handle, store))
}

pub fn instantiate_vae(model: &ModelHeader, loaded: &Checkpoint) -> Result<(VaeModel, ParamStore)> {
    let spec = match model {
        ModelHeader::Vae { spec } => spec,
        _ => return Err(Error::Checkpoint("checkpoint does not hold a VAE model".into())),
    };
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(0);
    let handle = VaeModel::build(spec, &mut store, &mut rng)?;
    copy_values(&loaded.store, &mut store)?;
    Ok((handle, store))
}

fn copy_values(src: &ParamStore, dst: &mut ParamStore) -> Result<()> {
    for i in 0..dst.len() {
        let name = dst.get(i).name.clone();
        let id = src
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor {name}")))?;
        if src.value(id).shape() != dst.value(i).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                src.value(id).shape(),
                dst.value(i).shape()
            )));
        }
        dst.value_mut(i)
            .data_mut()
            .copy_from_slice(src.value(id).data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SharingLevel, SizePreset};

    fn tiny_store() -> (ModelSpec, ParamStore) {
        let spec = ModelSpec {
            variant: Variant::SingleBranch,
            conditional: false,
            size: SizePreset::Small,
            sharing_level: SharingLevel::I,
            num_classes: 4,
            index_output_size: 40,
        };
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(9);
        SingleBranchModel::build(&spec, &mut store, &mut rng).unwrap();
        (spec, store)
    }

    fn tiny_meta() -> DatasetMeta {
        DatasetMeta {
            name: "synthetic".into(),
            n: 40,
            checksum: "abc123".into(),
            num_classes: 4,
            class_counts: vec![10; 4],
            per_class_lists: (0..4).map(|y| (0..10).map(|k| k * 4 + y).collect()).collect(),
            source_index: None,
            norm: Some((0.1307, 0.3081)),
        }
    }

    #[test]
    fn roundtrip_bitwise() {
        let (spec, store) = tiny_store();
        let dir = std::env::temp_dir().join(format!("pvnt-test-{}", std::process::id()));
        let path = dir.join("ck.pvnt");
        save_checkpoint(
            &path,
            &ModelHeader::Cnn { spec },
            &tiny_meta(),
            &BTreeMap::new(),
            &store,
        )
        .unwrap();
        let loaded = load_checkpoint(&path, Some("abc123")).unwrap();
        assert_eq!(loaded.store.len(), store.len());
        for (a, b) in store.iter().zip(loaded.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.trainable, b.trainable);
            assert_eq!(a.value.data(), b.value.data(), "tensor {} not bitwise equal", a.name);
        }
        let (_, st2) = instantiate_cnn(&loaded.model, &loaded).unwrap();
        for (a, b) in store.iter().zip(st2.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn refusals() {
        let (spec, store) = tiny_store();
        let dir = std::env::temp_dir().join(format!("pvnt-test2-{}", std::process::id()));
        let path = dir.join("ck.pvnt");
        save_checkpoint(
            &path,
            &ModelHeader::Cnn { spec },
            &tiny_meta(),
            &BTreeMap::new(),
            &store,
        )
        .unwrap();

        // fingerprint mismatch names both fingerprints
        let err = load_checkpoint(&path, Some("otherfp")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("abc123") && msg.contains("otherfp"), "{msg}");

        // truncated payload → clean error
        let bytes = std::fs::read(&path).unwrap();
        let cut = &bytes[..bytes.len() - 17];
        let tpath = dir.join("trunc.pvnt");
        std::fs::write(&tpath, cut).unwrap();
        assert!(load_checkpoint(&tpath, None).is_err());

        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let bpath = dir.join("bad.pvnt");
        std::fs::write(&bpath, bad).unwrap();
        assert!(load_checkpoint(&bpath, None).is_err());

        // version mismatch
        let mut v2 = bytes.clone();
        v2[4] = 99;
        let vpath = dir.join("v99.pvnt");
        std::fs::write(&vpath, v2).unwrap();
        let err = load_checkpoint(&vpath, None).unwrap_err();
        assert!(err.to_string().contains("version"));

        std::fs::remove_dir_all(&dir).ok();
    }
}
