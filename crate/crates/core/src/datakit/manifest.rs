//! JSON-lines dataset manifests and loading their referenced tensors.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlobFile, DataError};
use crate::autodiff::Real;
use crate::fusion::{FusionConfig, RgbTokens, SegMap};
use crate::geodesy::GeoPoint;
use crate::partition::{PartitionHierarchy, Sample};
use crate::trainer::Example;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RgbBlobRef {
    pub file: String,
    pub offset: u64,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegBlobRef {
    pub file: String,
    pub offset: u64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub rgb_blob: RgbBlobRef,
    pub seg_blob: SegBlobRef,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<u32>,
}

impl ManifestRecord {
    pub fn location(&self) -> GeoPoint {
        GeoPoint::new(self.lat, self.lon).expect("validated when parsed")
    }
}

pub fn parse_manifest(text: &str, path: &str) -> Result<Vec<ManifestRecord>, DataError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Manifest {
            path: path.to_string(),
            line: i + 1,
            msg,
        };
        let r: ManifestRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        GeoPoint::new(r.lat, r.lon).map_err(|e| err(e.to_string()))?;
        if !seen.insert(r.id.clone()) {
            return Err(err(format!("duplicate id {:?}", r.id)));
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn render_manifest(records: &[ManifestRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Partition inputs; `feature_ref` is the record's position in `records`.
pub fn samples_of(records: &[ManifestRecord]) -> Vec<Sample> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| Sample {
            id: r.id.clone(),
            location: r.location(),
            feature_ref: i,
        })
        .collect()
}

/// Opens each blob file once; paths resolve against the manifest directory.
pub struct BlobCache {
    base: PathBuf,
    files: BTreeMap<String, BlobFile>,
}

impl BlobCache {
    pub fn new(base: &Path) -> Self {
        Self {
            base: base.to_path_buf(),
            files: BTreeMap::new(),
        }
    }

    pub fn file(&mut self, name: &str) -> Result<&BlobFile, DataError> {
        if !self.files.contains_key(name) {
            let f = BlobFile::open(&self.base.join(name))?;
            self.files.insert(name.to_string(), f);
        }
        Ok(&self.files[name])
    }

    /// RGB tokens and segmentation map of one record, checked against `cfg`.
    pub fn inputs<T: Real>(&mut self, r: &ManifestRecord, cfg: &FusionConfig) -> Result<(RgbTokens<T>, SegMap), DataError> {
        let rb = &r.rgb_blob;
        let f = self.file(&rb.file)?;
        if rb.cols != cfg.d_kv {
            return Err(DataError::Shape {
                path: f.path().to_string(),
                offset: rb.offset,
                expected: vec![rb.rows, cfg.d_kv],
                found: vec![rb.rows, rb.cols],
            });
        }
        let m = f.read_matrix::<T>(rb.offset, rb.rows, rb.cols)?;
        let fusion_err = |f: &BlobFile, source| DataError::Fusion {
            path: format!("{} at offset {}", f.path(), rb.offset),
            source,
        };
        let rgb = RgbTokens::new(m).map_err(|e| fusion_err(f, e))?;
        let sb = &r.seg_blob;
        let f = self.file(&sb.file)?;
        if (sb.h, sb.w) != (cfg.seg_h, cfg.seg_w) {
            return Err(DataError::Shape {
                path: f.path().to_string(),
                offset: sb.offset,
                expected: vec![cfg.seg_h, cfg.seg_w],
                found: vec![sb.h, sb.w],
            });
        }
        let ids = f.read_classes(sb.offset, sb.h, sb.w)?;
        if let Some(&c) = ids.iter().find(|&&c| c as usize >= cfg.classes) {
            return Err(DataError::Corrupt {
                path: f.path().to_string(),
                offset: sb.offset,
                msg: format!("class id {c} outside 0..{}", cfg.classes),
            });
        }
        let seg = SegMap::new(sb.h, sb.w, ids).expect("shape checked");
        Ok((rgb, seg))
    }
}

#[derive(Debug, Clone)]
pub struct LoadedSplit<T> {
    pub examples: Vec<Example<T>>,
    /// Records whose finest cell was discarded from the hierarchy.
    pub excluded: Vec<String>,
}

/// Training examples for records, with embedding rows from `h`.
pub fn load_examples<T: Real>(
    records: &[&ManifestRecord],
    cache: &mut BlobCache,
    cfg: &FusionConfig,
    h: &PartitionHierarchy,
) -> Result<LoadedSplit<T>, DataError> {
    let mut examples = Vec::with_capacity(records.len());
    let mut excluded = Vec::new();
    for r in records {
        let Some(rows) = h.assign_all(r.location()) else {
            excluded.push(r.id.clone());
            continue;
        };
        let (rgb, seg) = cache.inputs(r, cfg)?;
        examples.push(Example {
            id: r.id.clone(),
            rgb,
            seg,
            rows,
        });
    }
    Ok(LoadedSplit { examples, excluded })
}
