//! `GSCK` checkpoints: every named parameter tensor plus enough metadata to
//! refuse a mismatched hierarchy at load time.
//!
//! ```text
//! "GSCK" | version u16 | header_len u64 | header JSON | payload | sha256
//! ```
//!
//! The header lists each tensor's name, shape and payload offset. The
//! trailing 32 bytes are a SHA-256 of everything before them, so flipped
//! bits anywhere are caught.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DataError;
use crate::autodiff::{ParamStore, Real, Tensor};
use crate::geodesy::CellId;
use crate::partition::PartitionHierarchy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset within the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub config: serde_json::Value,
    pub hierarchy_sha256: String,
    /// Embedding row order of every level.
    pub levels: Vec<Vec<CellId>>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub store: ParamStore<T>,
}

pub fn encode_checkpoint<T: Real>(
    store: &ParamStore<T>,
    config: &serde_json::Value,
    hierarchy_sha256: &str,
    h: &PartitionHierarchy,
) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        p.value.data().iter().for_each(|x| x.to_le(&mut payload));
    }
    let header = CheckpointHeader {
        dtype: T::NAME.to_string(),
        config: config.clone(),
        hierarchy_sha256: hierarchy_sha256.to_string(),
        levels: h.levels().iter().map(|p| p.cells().iter().map(|c| c.id).collect()).collect(),
        tensors,
    };
    let head = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(14 + head.len() + payload.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8], path: &str) -> Result<Checkpoint<T>, DataError> {
    let truncated = |offset: u64, needed: u64| DataError::Truncated {
        path: path.into(),
        offset,
        needed,
        available: (bytes.len() as u64).saturating_sub(offset),
    };
    let corrupt = |offset: u64, msg: String| DataError::Corrupt {
        path: path.into(),
        offset,
        msg,
    };
    if bytes.len() < 14 {
        return Err(truncated(0, 14));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DataError::BadMagic {
            path: path.into(),
            offset: 0,
            found: bytes[..4].to_vec(),
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version {
            path: path.into(),
            offset: 4,
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let head_len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes"));
    if head_len > bytes.len() as u64 - 14 {
        return Err(truncated(14, head_len));
    }
    let start = 14 + head_len as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[14..start]).map_err(|e| corrupt(14, format!("header: {e}")))?;
    let size = match header.dtype.as_str() {
        "f32" => 4u64,
        "f64" => 8,
        _ => return Err(DataError::Dtype { path: path.into(), offset: 14, code: 0 }),
    };
    let mut payload_len = 0u64;
    for e in &header.tensors {
        let n = e
            .shape
            .iter()
            .try_fold(size, |a, &d| a.checked_mul(d as u64))
            .ok_or_else(|| corrupt(14, format!("{}: size overflows", e.name)))?;
        if e.offset != payload_len {
            return Err(corrupt(14, format!("{}: offset {} breaks the packed layout", e.name, e.offset)));
        }
        payload_len = payload_len.checked_add(n).ok_or_else(|| corrupt(14, "payload size overflows".into()))?;
    }
    let total = (start as u64).saturating_add(payload_len).saturating_add(32);
    if total > bytes.len() as u64 {
        return Err(truncated(start as u64, payload_len + 32));
    }
    if total < bytes.len() as u64 {
        return Err(corrupt(total, format!("{} trailing bytes", bytes.len() as u64 - total)));
    }
    let (bytes, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(bytes).as_slice() != digest {
        return Err(corrupt(bytes.len() as u64, "checksum mismatch".into()));
    }
    if header.dtype != T::NAME {
        return Err(DataError::Dtype {
            path: path.into(),
            offset: 14,
            code: if size == 4 { 1 } else { 2 },
        });
    }
    let payload = &bytes[start..];
    let mut store = ParamStore::new();
    for e in &header.tensors {
        let at = start as u64 + e.offset;
        let len = size * e.shape.iter().product::<usize>() as u64;
        let raw = &payload[e.offset as usize..(e.offset + len) as usize];
        let data: Vec<T> = raw.chunks_exact(size as usize).map(T::from_le).collect();
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| corrupt(at, format!("{}: {err}", e.name)))?;
        store
            .add(e.name.clone(), t)
            .map_err(|err| corrupt(at, format!("{}: {err}", e.name)))?;
    }
    Ok(Checkpoint { header, store })
}

pub fn write_checkpoint(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_checkpoint(&bytes, &path.display().to_string())
}

impl<T> Checkpoint<T> {
    /// The hierarchy must be the one the checkpoint was trained against.
    pub fn verify_hierarchy(&self, sha256: &str, h: &PartitionHierarchy, path: &str) -> Result<(), DataError> {
        if self.header.hierarchy_sha256 != sha256 {
            return Err(DataError::Integrity {
                path: path.into(),
                msg: format!(
                    "checkpoint was trained on hierarchy {}, got {}",
                    self.header.hierarchy_sha256, sha256
                ),
            });
        }
        let same = self.header.levels.len() == h.num_levels()
            && self
                .header
                .levels
                .iter()
                .zip(h.levels())
                .all(|(a, p)| a.len() == p.len() && a.iter().zip(p.cells()).all(|(x, c)| *x == c.id));
        if !same {
            return Err(DataError::Integrity {
                path: path.into(),
                msg: "embedding rows do not match the hierarchy cells".into(),
            });
        }
        Ok(())
    }
}

/// Every tensor of `template` must be present with the same shape, and
/// nothing else may be.
pub fn check_layout<T: Real, U: Real>(loaded: &ParamStore<T>, template: &ParamStore<U>, path: &str) -> Result<(), DataError> {
    let missing: Vec<String> = template
        .iter()
        .filter(|(_, p)| loaded.id(&p.name).is_none())
        .map(|(_, p)| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingTensors {
            path: path.into(),
            names: missing,
        });
    }
    for (_, p) in template.iter() {
        let got = loaded.value(loaded.id(&p.name).expect("checked")).shape();
        if got != p.value.shape() {
            return Err(DataError::Layout {
                path: path.into(),
                msg: format!("{} has shape {got:?}, expected {:?}", p.name, p.value.shape()),
            });
        }
    }
    let extra: Vec<&str> = loaded
        .iter()
        .filter(|(_, p)| template.id(&p.name).is_none())
        .map(|(_, p)| p.name.as_str())
        .collect();
    if !extra.is_empty() {
        return Err(DataError::Layout {
            path: path.into(),
            msg: format!("unexpected tensors: {}", extra.join(", ")),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionConfig;
    use crate::geodesy::GeoPoint;
    use crate::model::Model;
    use crate::partition::{build_hierarchy, Sample};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hierarchy(seed: u64) -> PartitionHierarchy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Sample> = (0..300 + 100 * seed as usize)
            .map(|i| Sample {
                id: format!("s{i}"),
                location: GeoPoint::new(rng.random_range(-50.0..50.0), rng.random_range(-180.0..180.0)).unwrap(),
                feature_ref: i,
            })
            .collect();
        build_hierarchy(&samples, 2, &[100, 30]).unwrap()
    }

    fn tiny() -> FusionConfig {
        FusionConfig {
            d_kv: 8,
            d_s: 8,
            latent: 4,
            heads: 2,
            attn_dim: 8,
            mlp_hidden: 8,
            blocks: 1,
            embed_dim: 6,
            patch: 2,
            classes: 3,
            seg_h: 4,
            seg_w: 4,
            ..FusionConfig::default()
        }
    }

    fn sample_bytes() -> (Vec<u8>, Model<f32>, PartitionHierarchy) {
        let h = hierarchy(1);
        let m = Model::<f32>::init(&tiny(), &h, 3).unwrap();
        let cfg = serde_json::json!({"seed": 3, "note": "x"});
        (encode_checkpoint(&m.store, &cfg, "abc", &h), m, h)
    }

    #[test]
    fn round_trip_is_exact_and_deterministic() {
        let (bytes, m, h) = sample_bytes();
        assert_eq!(bytes, encode_checkpoint(&m.store, &serde_json::json!({"note": "x", "seed": 3}), "abc", &h));
        let ck = decode_checkpoint::<f32>(&bytes, "c").unwrap();
        assert_eq!(ck.store, m.store);
        assert_eq!(ck.header.config["seed"], 3);
        ck.verify_hierarchy("abc", &h, "c").unwrap();
        check_layout(&ck.store, &m.store, "c").unwrap();
        assert!(Model::bind(&tiny(), &h, ck.store).is_ok());
    }

    #[test]
    fn typed_failures() {
        let (bytes, m, h) = sample_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f32>(&bad, "c"), Err(DataError::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_checkpoint::<f32>(&bad, "c"), Err(DataError::Version { found: 2, .. })));
        assert!(matches!(decode_checkpoint::<f64>(&bytes, "c"), Err(DataError::Dtype { code: 1, .. })));
        let last = bytes.len() - 1;
        let mut bad = bytes.clone();
        bad[last] ^= 0x10;
        assert!(matches!(decode_checkpoint::<f32>(&bad, "c"), Err(DataError::Corrupt { .. })));
        for cut in [10, 100, bytes.len() - 40, bytes.len() - 1] {
            assert!(matches!(
                decode_checkpoint::<f32>(&bytes[..cut], "c"),
                Err(DataError::Truncated { .. })
            ));
        }

        let ck = decode_checkpoint::<f32>(&bytes, "c").unwrap();
        assert!(matches!(ck.verify_hierarchy("zzz", &h, "c"), Err(DataError::Integrity { .. })));
        assert!(matches!(ck.verify_hierarchy("abc", &hierarchy(2), "c"), Err(DataError::Integrity { .. })));

        let mut partial = ParamStore::<f32>::new();
        for (_, p) in m.store.iter().filter(|(_, p)| p.name != "fusion/proj_w") {
            partial.add(p.name.clone(), p.value.clone()).unwrap();
        }
        match check_layout(&partial, &m.store, "c") {
            Err(e @ DataError::MissingTensors { .. }) => assert!(e.to_string().contains("fusion/proj_w")),
            other => panic!("{other:?}"),
        }
        let mut extra = m.store.clone();
        extra.add("fusion/stray", Tensor::<f32>::zeros(&[1, 1])).unwrap();
        assert!(matches!(check_layout(&extra, &m.store, "c"), Err(DataError::Layout { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bit_flips_are_typed_errors(seed in any::<u64>(), flips in 1usize..4) {
            let (mut bytes, _, _) = sample_bytes();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..flips {
                let i = rng.random_range(0..bytes.len());
                bytes[i] ^= 1 << rng.random_range(0..8);
            }
            let cut = rng.random_range(0..=bytes.len());
            prop_assert!(decode_checkpoint::<f32>(&bytes, "fuzz").is_err());
            if cut < bytes.len() {
                prop_assert!(decode_checkpoint::<f32>(&bytes[..cut], "fuzz").is_err());
            }
        }
    }
}
