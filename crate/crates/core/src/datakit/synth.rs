//! Synthetic geotagged dataset whose features determine location.
//!
//! Cluster centers are uniform on the sphere and samples scatter around them
//! in the tangent plane. Each RGB patch token is a fixed random linear map of
//! the sample's unit vector plus a per-cluster signature; the CLS token only
//! carries a scaled-down copy of its own map. Every token gets Gaussian noise.
//! Segmentation maps are a per-cluster block pattern with pixelwise noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{split, Blob, BlobData, BlobWriter, DataError, ManifestRecord, RgbBlobRef, SegBlobRef};
use crate::autodiff::Tensor;
use crate::evalkit::write_locations_csv;
use crate::geodesy::{GeoPoint, UnitVec3, EARTH_RADIUS_KM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_clusters: usize,
    pub samples_per_cluster: usize,
    /// Standard deviation of the token noise.
    pub noise_sigma: f64,
    /// Per-axis standard deviation of sample locations around their center.
    pub location_jitter_km: f64,
    /// Token rows per sample, CLS included.
    pub rgb_tokens: usize,
    pub d_kv: usize,
    /// Gain of the CLS token's location signal relative to patch tokens.
    pub cls_signal: f64,
    pub signature_scale: f64,
    pub seg_h: usize,
    pub seg_w: usize,
    pub classes: usize,
    /// Side of the square blocks of the class pattern, in pixels.
    pub seg_block: usize,
    /// Probability that a pixel is replaced by a uniformly random class.
    pub seg_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clusters: 50,
            samples_per_cluster: 200,
            noise_sigma: 0.1,
            location_jitter_km: 0.1,
            rgb_tokens: 5,
            d_kv: 64,
            cls_signal: 0.1,
            signature_scale: 0.5,
            seg_h: 28,
            seg_w: 28,
            classes: 16,
            seg_block: 7,
            seg_noise: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Synth(m.to_string()));
        if self.n_clusters == 0 || self.samples_per_cluster == 0 {
            return bad("cluster and sample counts must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.location_jitter_km >= 0.0 && self.signature_scale >= 0.0) {
            return bad("noise_sigma, location_jitter_km and signature_scale must be >= 0");
        }
        if !self.cls_signal.is_finite() || !self.noise_sigma.is_finite() {
            return bad("cls_signal and noise_sigma must be finite");
        }
        if self.rgb_tokens < 2 || self.d_kv == 0 {
            return bad("need at least two RGB tokens of positive width");
        }
        if self.seg_h == 0 || self.seg_w == 0 || self.seg_block == 0 {
            return bad("segmentation sizes must be positive");
        }
        if self.classes == 0 || self.classes > u16::MAX as usize {
            return bad("classes must be in 1..=65535");
        }
        if !(0.0..=1.0).contains(&self.seg_noise) {
            return bad("seg_noise must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    pub cluster: u32,
    pub location: GeoPoint,
    /// `rgb_tokens × d_kv`, CLS first.
    pub rgb: Tensor<f32>,
    pub seg: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub centers: Vec<GeoPoint>,
    pub samples: Vec<SyntheticSample>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_unit(rng: &mut ChaCha8Rng) -> UnitVec3 {
    loop {
        let (x, y, z) = (gauss(rng), gauss(rng), gauss(rng));
        if let Ok(u) = UnitVec3::normalize(x, y, z) {
            return u;
        }
    }
}

/// Orthonormal tangent basis at `u`.
fn tangent_basis(u: UnitVec3) -> ([f64; 3], [f64; 3]) {
    let a = if u.z.abs() < 0.9 { [0.0, 0.0, 1.0] } else { [1.0, 0.0, 0.0] };
    let u = [u.x, u.y, u.z];
    let cross = |p: [f64; 3], q: [f64; 3]| [p[1] * q[2] - p[2] * q[1], p[2] * q[0] - p[0] * q[2], p[0] * q[1] - p[1] * q[0]];
    let e = cross(a, u);
    let n = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
    let e = [e[0] / n, e[1] / n, e[2] / n];
    (e, cross(u, e))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let maps: Vec<Vec<[f64; 3]>> = (0..cfg.rgb_tokens)
        .map(|_| {
            (0..cfg.d_kv)
                .map(|_| [gauss(&mut rng), gauss(&mut rng), gauss(&mut rng)].map(|x| x / 3f64.sqrt()))
                .collect()
        })
        .collect();
    let centers: Vec<UnitVec3> = (0..cfg.n_clusters).map(|_| random_unit(&mut rng)).collect();
    let signatures: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| (0..cfg.rgb_tokens * cfg.d_kv).map(|_| cfg.signature_scale * gauss(&mut rng)).collect())
        .collect();
    let (bh, bw) = (cfg.seg_h.div_ceil(cfg.seg_block), cfg.seg_w.div_ceil(cfg.seg_block));
    let patterns: Vec<Vec<u16>> = (0..cfg.n_clusters)
        .map(|_| (0..bh * bw).map(|_| rng.random_range(0..cfg.classes) as u16).collect())
        .collect();

    let scale = cfg.location_jitter_km / EARTH_RADIUS_KM;
    let mut samples = Vec::with_capacity(cfg.n_clusters * cfg.samples_per_cluster);
    for (c, &center) in centers.iter().enumerate() {
        let (e, n) = tangent_basis(center);
        for j in 0..cfg.samples_per_cluster {
            let (a, b) = (scale * gauss(&mut rng), scale * gauss(&mut rng));
            let u = UnitVec3::normalize(
                center.x + a * e[0] + b * n[0],
                center.y + a * e[1] + b * n[1],
                center.z + a * e[2] + b * n[2],
            )
            .expect("small offset of a unit vector");
            let uv = [u.x, u.y, u.z];
            let mut rgb = Vec::with_capacity(cfg.rgb_tokens * cfg.d_kv);
            for (k, map) in maps.iter().enumerate() {
                let gain = if k == 0 { cfg.cls_signal } else { 1.0 };
                for (d, w) in map.iter().enumerate() {
                    let signal = gain * (w[0] * uv[0] + w[1] * uv[1] + w[2] * uv[2]);
                    let sig = if k == 0 { 0.0 } else { signatures[c][k * cfg.d_kv + d] };
                    rgb.push((signal + sig + cfg.noise_sigma * gauss(&mut rng)) as f32);
                }
            }
            let mut seg = Vec::with_capacity(cfg.seg_h * cfg.seg_w);
            for y in 0..cfg.seg_h {
                for x in 0..cfg.seg_w {
                    let class = if rng.random_bool(cfg.seg_noise) {
                        rng.random_range(0..cfg.classes) as u16
                    } else {
                        patterns[c][(y / cfg.seg_block) * bw + x / cfg.seg_block]
                    };
                    seg.push(class);
                }
            }
            samples.push(SyntheticSample {
                id: format!("c{c:03}_{j:04}"),
                cluster: c as u32,
                location: u.to_geo(),
                rgb: Tensor::matrix(cfg.rgb_tokens, cfg.d_kv, rgb).expect("length matches"),
                seg,
            });
        }
    }
    Ok(SyntheticDataset {
        config: cfg.clone(),
        centers: centers.iter().map(|c| c.to_geo()).collect(),
        samples,
    })
}

/// Writes `manifest.jsonl`, `rgb.gsrg`, `seg.gsrg` and one
/// `truth_<split>.csv` per split into `dir`.
pub fn write_dataset(
    ds: &SyntheticDataset,
    dir: &Path,
    fractions: &[(&str, f64)],
    split_seed: u64,
) -> Result<Vec<ManifestRecord>, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut rgb = BlobWriter::create(&dir.join("rgb.gsrg"))?;
    let mut seg = BlobWriter::create(&dir.join("seg.gsrg"))?;
    let cfg = &ds.config;
    let mut records = Vec::with_capacity(ds.samples.len());
    for s in &ds.samples {
        let ro = rgb.append(&Blob::from_tensor(&s.rgb))?;
        let so = seg.append(&Blob::new(vec![cfg.seg_h, cfg.seg_w], BlobData::U16(s.seg.clone())).expect("shape matches"))?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            lat: s.location.lat(),
            lon: s.location.lon(),
            rgb_blob: RgbBlobRef {
                file: "rgb.gsrg".into(),
                offset: ro,
                rows: cfg.rgb_tokens,
                cols: cfg.d_kv,
            },
            seg_blob: SegBlobRef {
                file: "seg.gsrg".into(),
                offset: so,
                h: cfg.seg_h,
                w: cfg.seg_w,
            },
            split: String::new(),
            cluster: Some(s.cluster),
        });
    }
    rgb.finish()?;
    seg.finish()?;
    split(&mut records, fractions, split_seed)?;
    let manifest = dir.join("manifest.jsonl");
    std::fs::write(&manifest, super::render_manifest(&records)).map_err(|e| DataError::io(&manifest, e))?;
    for (name, _) in fractions {
        let rows = records
            .iter()
            .filter(|r| r.split == *name)
            .map(|r| (r.id.as_str(), r.location()));
        let path = dir.join(format!("truth_{name}.csv"));
        std::fs::write(&path, write_locations_csv(rows)).map_err(|e| DataError::io(&path, e))?;
    }
    Ok(records)
}

/// Mean Pearson correlation, over the three axes, between the unit vector
/// of each held-out sample and a least-squares prediction from the mean of
/// its RGB tokens. Even-indexed samples fit the probe, odd ones score it.
pub fn linear_probe_correlation(ds: &SyntheticDataset) -> f64 {
    let d = ds.config.d_kv;
    let feature = |s: &SyntheticSample| -> Vec<f64> {
        let mut f = vec![0.0; d + 1];
        for r in 0..s.rgb.rows() {
            for (a, &x) in f.iter_mut().zip(s.rgb.row(r)) {
                *a += x as f64 / s.rgb.rows() as f64;
            }
        }
        f[d] = 1.0;
        f
    };
    let target = |s: &SyntheticSample| {
        let u = s.location.to_unit();
        [u.x, u.y, u.z]
    };
    let n = d + 1;
    let mut xtx = vec![0.0; n * n];
    let mut xty = vec![[0.0; 3]; n];
    for s in ds.samples.iter().step_by(2) {
        let f = feature(s);
        let t = target(s);
        for i in 0..n {
            for j in 0..n {
                xtx[i * n + j] += f[i] * f[j];
            }
            for k in 0..3 {
                xty[i][k] += f[i] * t[k];
            }
        }
    }
    for i in 0..n {
        xtx[i * n + i] += 1e-6;
    }
    let w = solve_spd(&mut xtx, &mut xty, n);
    let held: Vec<&SyntheticSample> = ds.samples.iter().skip(1).step_by(2).collect();
    let mut corr = 0.0;
    for k in 0..3 {
        let pred: Vec<f64> = held.iter().map(|s| feature(s).iter().zip(&w).map(|(a, b)| a * b[k]).sum()).collect();
        let truth: Vec<f64> = held.iter().map(|s| target(s)[k]).collect();
        corr += pearson(&pred, &truth);
    }
    corr / 3.0
}

/// Gaussian elimination with partial pivoting on an `n × n` system with
/// three right-hand sides.
fn solve_spd(a: &mut [f64], b: &mut [[f64; 3]], n: usize) -> Vec<[f64; 3]> {
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty");
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            b.swap(col, piv);
        }
        let p = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / p;
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            let bc = b[col];
            for (x, y) in b[row].iter_mut().zip(bc) {
                *x -= f * y;
            }
        }
    }
    let mut x = vec![[0.0; 3]; n];
    for row in (0..n).rev() {
        for k in 0..3 {
            let s: f64 = (row + 1..n).map(|j| a[row * n + j] * x[j][k]).sum();
            x[row][k] = (b[row][k] - s) / a[row * n + row];
        }
    }
    x
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
