//! Shared fixtures for the benchmarks.

use geosurge_core::datakit::{generate_synthetic, SyntheticConfig};
use geosurge_core::fusion::{RgbTokens, SegMap};
use geosurge_core::partition::{build_hierarchy, Sample};
use geosurge_core::trainer::Example;
use geosurge_core::{FusionConfig, Model, PartitionHierarchy};

/// The desk-scale architecture used by the synthetic benchmark.
pub fn desk_fusion() -> FusionConfig {
    FusionConfig {
        d_kv: 64,
        d_s: 32,
        latent: 16,
        heads: 4,
        attn_dim: 32,
        mlp_hidden: 64,
        blocks: 1,
        embed_dim: 32,
        patch: 7,
        classes: 16,
        seg_h: 28,
        seg_w: 28,
        ..FusionConfig::default()
    }
}

pub struct Fixture {
    pub samples: Vec<Sample>,
    pub hierarchy: PartitionHierarchy,
    pub model: Model<f32>,
    pub examples: Vec<Example<f32>>,
}

/// 50 clusters × `per_cluster` synthetic samples, a three-level hierarchy
/// and an untrained desk model.
pub fn fixture(per_cluster: usize) -> Fixture {
    let ds = generate_synthetic(&SyntheticConfig {
        samples_per_cluster: per_cluster,
        ..SyntheticConfig::default()
    })
    .expect("valid synthetic config");
    let samples: Vec<Sample> = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| Sample {
            id: s.id.clone(),
            location: s.location,
            feature_ref: i,
        })
        .collect();
    let hierarchy = build_hierarchy(&samples, 5, &[2000, 600, 200]).expect("hierarchy");
    let cfg = desk_fusion();
    let model = Model::init(&cfg, &hierarchy, 0).expect("model");
    let examples = ds
        .samples
        .iter()
        .filter_map(|s| {
            Some(Example {
                id: s.id.clone(),
                rgb: RgbTokens::new(s.rgb.clone()).ok()?,
                seg: SegMap::new(cfg.seg_h, cfg.seg_w, s.seg.clone()).ok()?,
                rows: hierarchy.assign_all(s.location)?,
            })
        })
        .collect();
    Fixture {
        samples,
        hierarchy,
        model,
        examples,
    }
}
