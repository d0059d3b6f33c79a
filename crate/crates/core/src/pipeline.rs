//! End-to-end stages driven by a [`RunConfig`]: `synth`, `partition`,
//! `train`, `infer`, `eval` and `inspect`.
//!
//! Every artifact written here either embeds the effective config (JSON
//! and checkpoint files) or gets a `<file>.config.json` sidecar.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::Real;
use crate::config::{ConfigError, RunConfig};
use crate::datakit::{
    check_layout, decode_checkpoint, encode_checkpoint, generate_synthetic, load_examples, read_manifest, samples_of,
    write_dataset, BlobCache, BlobFile, DataError, ManifestRecord,
};
use crate::evalkit::{gcd_accuracy, join_records, read_locations_file, render_report, write_locations_csv, EvalError, ReportFormat, ThresholdReport};
use crate::inference::{InferenceError, PredictionRecord, Predictor};
use crate::model::{Model, ModelError};
use crate::partition::{
    build_hierarchy, coverage_report, hierarchy_from_json, hierarchy_to_json, read_hierarchy, CoverageReport, PartitionError,
    PartitionHierarchy,
};
use crate::trainer::{fit, EpochRecord, FitReport, Precision, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Usage(String),
}

impl PipelineError {
    /// 1 usage or config, 2 data or format, 3 integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Usage(_) => 1,
            Self::Train(TrainError::Config(_)) => 1,
            Self::Eval(EvalError::Thresholds(_) | EvalError::Format(_)) => 1,
            Self::Partition(PartitionError::InvalidTau { .. } | PartitionError::Schedule(_)) => 1,
            Self::Data(DataError::Integrity { .. }) => 3,
            Self::Partition(PartitionError::Integrity(_)) => 3,
            Self::Inference(InferenceError::Integrity(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e).into())
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn write_with_sidecar(path: &Path, bytes: &[u8], cfg: &RunConfig) -> Result<()> {
    write_file(path, bytes)?;
    write_file(&sidecar(path), cfg.provenance_json().as_bytes())
}

fn pretty<T: Serialize>(v: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("serializes");
    out.push(b'\n');
    out
}

fn records_in<'a>(records: &'a [ManifestRecord], split: &str) -> Vec<&'a ManifestRecord> {
    records.iter().filter(|r| r.split == split).collect()
}

fn manifest_dir(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.paths.manifest)
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default()
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSummary {
    pub records: usize,
    pub splits: Vec<(String, usize)>,
    pub dir: String,
}

pub fn run_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let ds = generate_synthetic(&cfg.synth)?;
    let dir = Path::new(&cfg.paths.data_dir);
    let fractions: Vec<(&str, f64)> = cfg.split.fractions.iter().map(|(n, f)| (n.as_str(), *f)).collect();
    let records = write_dataset(&ds, dir, &fractions, cfg.split.seed)?;
    write_file(&dir.join("synth.config.json"), cfg.provenance_json().as_bytes())?;
    let splits = fractions
        .iter()
        .map(|(n, _)| (n.to_string(), records.iter().filter(|r| r.split == *n).count()))
        .collect();
    Ok(SynthSummary {
        records: records.len(),
        splits,
        dir: dir.display().to_string(),
    })
}

/// Builds the hierarchy from the training split only.
pub fn run_partition(cfg: &RunConfig) -> Result<(PartitionHierarchy, CoverageReport)> {
    let records = read_manifest(Path::new(&cfg.paths.manifest))?;
    let train: Vec<ManifestRecord> = records_in(&records, &cfg.split.train).into_iter().cloned().collect();
    if train.is_empty() {
        return Err(PipelineError::Usage(format!(
            "manifest has no records in split {:?}",
            cfg.split.train
        )));
    }
    let samples = samples_of(&train);
    let h = build_hierarchy(&samples, cfg.partition.tau_min, &cfg.partition.tau_max)?;
    let cov = coverage_report(&h, &samples);
    let bytes = hierarchy_to_json(&h, cfg.partition.with_members, Some(cfg.provenance()));
    write_file(Path::new(&cfg.paths.hierarchy), &bytes)?;
    Ok((h, cov))
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub fit: FitReport,
    pub train_examples: usize,
    pub val_examples: usize,
    pub excluded: usize,
    pub parameters: usize,
}

pub fn run_train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg, on_epoch),
        Precision::F64 => train_as::<f64>(cfg, on_epoch),
    }
}

fn train_as<T: Real>(cfg: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainSummary> {
    let (h, _, sha) = read_hierarchy(Path::new(&cfg.paths.hierarchy))?;
    let records = read_manifest(Path::new(&cfg.paths.manifest))?;
    let mut cache = BlobCache::new(&manifest_dir(cfg));
    let train = load_examples::<T>(&records_in(&records, &cfg.split.train), &mut cache, &cfg.fusion, &h)?;
    let val = load_examples::<T>(&records_in(&records, &cfg.split.val), &mut cache, &cfg.fusion, &h)?;
    let mut model = Model::<T>::init(&cfg.fusion, &h, cfg.train.seed)?;
    let report = fit(&mut model, &train.examples, &val.examples, &cfg.train, on_epoch)?;
    let bytes = encode_checkpoint(&model.store, &cfg.provenance(), &sha, &h);
    write_file(Path::new(&cfg.paths.checkpoint), &bytes)?;
    let mut log = String::new();
    for r in &report.log {
        log.push_str(&serde_json::to_string(r).expect("record serializes"));
        log.push('\n');
    }
    write_with_sidecar(Path::new(&cfg.paths.train_log), log.as_bytes(), cfg)?;
    Ok(TrainSummary {
        train_examples: train.examples.len(),
        val_examples: val.examples.len(),
        excluded: train.excluded.len() + val.excluded.len(),
        parameters: model.store.num_scalars(),
        fit: report,
    })
}

#[derive(Debug, Clone)]
pub struct InferSummary {
    pub predictions: Vec<PredictionRecord>,
    pub csv_path: String,
    pub json_path: String,
}

pub fn run_infer(cfg: &RunConfig) -> Result<InferSummary> {
    let path = Path::new(&cfg.paths.checkpoint);
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let name = path.display().to_string();
    match decode_checkpoint::<f32>(&bytes, &name) {
        Ok(ck) => infer_as(cfg, ck, &name),
        Err(DataError::Dtype { code: 2, .. }) => infer_as(cfg, decode_checkpoint::<f64>(&bytes, &name)?, &name),
        Err(e) => Err(e.into()),
    }
}

fn infer_as<T: Real>(cfg: &RunConfig, ck: crate::datakit::Checkpoint<T>, ck_path: &str) -> Result<InferSummary> {
    let (h, _, sha) = read_hierarchy(Path::new(&cfg.paths.hierarchy))?;
    ck.verify_hierarchy(&sha, &h, ck_path)?;
    // The architecture is whatever the checkpoint was trained with.
    let trained = RunConfig::from_value(ck.header.config.clone(), ck_path)?;
    let template = Model::<T>::init(&trained.fusion, &h, 0)?;
    check_layout(&ck.store, &template.store, ck_path)?;
    let model = Model::bind(&trained.fusion, &h, ck.store)?;
    let predictor = Predictor::from_model(&h, &model, cfg.inference.clone())?;

    let records = read_manifest(Path::new(&cfg.paths.manifest))?;
    let queries = records_in(&records, &cfg.split.query);
    if queries.is_empty() {
        return Err(PipelineError::Usage(format!("manifest has no records in split {:?}", cfg.split.query)));
    }
    let mut cache = BlobCache::new(&manifest_dir(cfg));
    let inputs = queries
        .iter()
        .map(|r| cache.inputs::<T>(r, &trained.fusion))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let predictions = inputs
        .par_iter()
        .zip(queries.par_iter())
        .map(|((rgb, seg), r)| -> Result<PredictionRecord> {
            let v = model.features(rgb, seg).map_err(ModelError::from)?;
            let v: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
            Ok(PredictionRecord::new(r.id.clone(), &predictor.predict(&v)?))
        })
        .collect::<Result<Vec<_>>>()?;

    let csv_path = PathBuf::from(&cfg.paths.predictions);
    let json_path = csv_path.with_extension("json");
    let csv = write_locations_csv(predictions.iter().map(|p| (p.query_id.as_str(), geo(p.lat, p.lon))));
    write_with_sidecar(&csv_path, csv.as_bytes(), cfg)?;
    let doc = serde_json::json!({ "config": cfg.provenance(), "predictions": predictions });
    write_file(&json_path, &pretty(&doc))?;
    Ok(InferSummary {
        predictions,
        csv_path: csv_path.display().to_string(),
        json_path: json_path.display().to_string(),
    })
}

fn geo(lat: f64, lon: f64) -> crate::geodesy::GeoPoint {
    crate::geodesy::GeoPoint::new(lat, lon).expect("decoded locations are valid")
}

/// Scores the predictions CSV against the truth CSV. Returns the report and
/// its rendering; the rendering is also written when a report path is set.
pub fn run_eval(cfg: &RunConfig) -> Result<(ThresholdReport, String)> {
    let preds = read_locations_file(Path::new(&cfg.paths.predictions))?;
    let truth = read_locations_file(Path::new(&cfg.paths.truth))?;
    let records = join_records(&preds, &truth)?;
    let report = gcd_accuracy(&records, &cfg.eval.thresholds_km)?;
    let text = match cfg.eval.format {
        ReportFormat::Json => {
            String::from_utf8(pretty(&serde_json::json!({ "config": cfg.provenance(), "report": report }))).expect("utf-8")
        }
        f => render_report(&report, f),
    };
    if !cfg.paths.report.is_empty() {
        let path = Path::new(&cfg.paths.report);
        match cfg.eval.format {
            ReportFormat::Json => write_file(path, text.as_bytes())?,
            _ => write_with_sidecar(path, text.as_bytes(), cfg)?,
        }
    }
    Ok((report, text))
}

/// Human-readable summary of any file this pipeline reads or writes.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    let name = path.display().to_string();
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    if bytes.starts_with(b"GSCK") {
        let header = match decode_checkpoint::<f32>(&bytes, &name) {
            Ok(ck) => ck.header,
            Err(DataError::Dtype { code: 2, .. }) => decode_checkpoint::<f64>(&bytes, &name)?.header,
            Err(e) => return Err(e.into()),
        };
        line(format!("{name}: checkpoint, {} tensors, dtype {}", header.tensors.len(), header.dtype));
        line(format!("hierarchy sha256 {}", header.hierarchy_sha256));
        let sizes: Vec<usize> = header.levels.iter().map(Vec::len).collect();
        line(format!("embedding rows per level {sizes:?}"));
        let scalars: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        line(format!("{scalars} parameters"));
        for t in &header.tensors {
            line(format!("  {} {:?}", t.name, t.shape));
        }
    } else if bytes.starts_with(b"GSRG") {
        let all = BlobFile::from_bytes(name.clone(), bytes).read_all()?;
        line(format!("{name}: blob file, {} tensors", all.len()));
        let mut kinds: std::collections::BTreeMap<String, usize> = Default::default();
        for (_, b) in &all {
            *kinds.entry(format!("{:?} {:?}", b.data().dtype(), b.shape())).or_default() += 1;
        }
        for (k, n) in kinds {
            line(format!("  {n} × {k}"));
        }
    } else if name.ends_with(".jsonl") {
        let records = read_manifest(path)?;
        line(format!("{name}: manifest, {} records", records.len()));
        let mut splits: std::collections::BTreeMap<&str, usize> = Default::default();
        for r in &records {
            *splits.entry(r.split.as_str()).or_default() += 1;
        }
        for (s, n) in splits {
            line(format!("  split {s}: {n}"));
        }
        let clusters: std::collections::BTreeSet<_> = records.iter().filter_map(|r| r.cluster).collect();
        if !clusters.is_empty() {
            line(format!("  {} clusters", clusters.len()));
        }
    } else if name.ends_with(".csv") {
        let rows = read_locations_file(path)?;
        line(format!("{name}: {} located rows", rows.len()));
    } else {
        let v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| {
            PipelineError::Usage(format!("{name}: not a recognized artifact ({e})"))
        })?;
        if v.get("format").and_then(|f| f.as_str()) == Some("geosurge-hierarchy") {
            let (h, _) = hierarchy_from_json(&bytes, &name)?;
            line(format!("{name}: hierarchy, tau_min {}, {} levels", h.tau_min, h.num_levels()));
            for p in h.levels() {
                let counts: Vec<usize> = p.cells().iter().map(|c| c.member_count).collect();
                line(format!(
                    "  tau_max {:>6}: {:>6} cells, members {}..{}",
                    p.tau_max,
                    p.len(),
                    counts.iter().min().unwrap_or(&0),
                    counts.iter().max().unwrap_or(&0)
                ));
            }
        } else if let Some(p) = v.get("predictions").and_then(|p| p.as_array()) {
            line(format!("{name}: {} predictions", p.len()));
        } else if let Some(r) = v.get("report") {
            let r: ThresholdReport = serde_json::from_value(r.clone())
                .map_err(|e| PipelineError::Usage(format!("{name}: {e}")))?;
            line(render_report(&r, ReportFormat::Text).trim_end().to_string());
        } else {
            return Err(PipelineError::Usage(format!("{name}: not a recognized artifact")));
        }
    }
    Ok(out)
}
