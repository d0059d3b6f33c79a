//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print. The process
//! exits nonzero when any criterion fails.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use geosurge_core::autodiff::{grad_check, GradCheck, Tape, Tensor, TensorError};
use geosurge_core::evalkit::{gcd_accuracy, EvalRecord, DEFAULT_THRESHOLDS_KM};
use geosurge_core::geodesy::{haversine_km, CellId, Face, GeoPoint};
use geosurge_core::inference::{InferenceConfig, Predictor};
use geosurge_core::partition::{build_hierarchy, build_partition, Sample};
use geosurge_core::trainer::{info_nce_level, total_loss, Example};
use geosurge_core::{FusionConfig, Model, PartitionHierarchy, RgbTokens, SegMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

// Pinned tolerances.
const C1_DATASETS: usize = 24;
const C1_MAX_SAMPLES: usize = 10_000;
const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_SAMPLES: usize = 100_000;
const C2_TAU_MIN: usize = 5;
const C2_TAU_MAX: [usize; 7] = [2500, 1300, 650, 350, 180, 100, 50];
const C3_MAX_REL: f64 = 1e-4;
const C3_BUDGET: Duration = Duration::from_secs(60);
const C4_UNIFORM_TOL: f64 = 1e-6;
const C4_RANDOM_REL: f64 = 0.10;
const C5_MAX_ABS: f64 = 1e-9;
const C5_MAX_FINEST: usize = 1000;
const C6_MIN_2500: f64 = 90.0;
const C6_MIN_750: f64 = 70.0;
const C6_BUDGET: Duration = Duration::from_secs(15 * 60);
/// Percent within each default threshold, measured on the first successful run.
const C6_PINNED: [f64; 5] = [100.0, 100.0, 100.0, 100.0, 100.0];
const C6_PIN_TOL_PP: f64 = 2.0;
const C7_SEEDS: [u64; 3] = [0, 1, 2];
const C8_HAVERSINE_TOL_KM: f64 = 0.1;
const C8_RECORD_SETS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn unit_sphere_point(rng: &mut ChaCha8Rng) -> GeoPoint {
    let z: f64 = rng.random_range(-1.0..1.0);
    GeoPoint::new(z.asin().to_degrees(), rng.random_range(-180.0..180.0)).unwrap()
}

fn clustered_point(rng: &mut ChaCha8Rng, center: GeoPoint, spread_deg: f64) -> GeoPoint {
    let lat = (center.lat() + rng.random_range(-spread_deg..spread_deg)).clamp(-89.9, 89.9);
    let mut lon = center.lon() + rng.random_range(-spread_deg..spread_deg);
    if lon >= 180.0 {
        lon -= 360.0;
    }
    if lon < -180.0 {
        lon += 360.0;
    }
    GeoPoint::new(lat, lon).unwrap()
}

fn mixed_samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<GeoPoint> = (0..rng.random_range(1..40)).map(|_| unit_sphere_point(&mut rng)).collect();
    let uniform = rng.random_range(0.0..1.0);
    (0..n)
        .map(|i| {
            let location = if rng.random_range(0.0..1.0) < uniform {
                unit_sphere_point(&mut rng)
            } else {
                let c = centers[rng.random_range(0..centers.len())];
                let spread = [0.01, 0.5, 5.0][rng.random_range(0..3)];
                clustered_point(&mut rng, c, spread)
            };
            Sample {
                id: format!("s{i:06}"),
                location,
                feature_ref: i,
            }
        })
        .collect()
}

// ---------------------------------------------------------------- 1 ----

/// Face and gnomonic coordinates, written out from the cube-face convention
/// directly, without the library's projection code.
fn oracle_face_uv(p: GeoPoint) -> (u8, f64, f64) {
    let (la, lo) = (p.lat().to_radians(), p.lon().to_radians());
    let (x, y, z) = (la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin());
    let comps = [x, y, z];
    let mut face = 0u8;
    let mut best = -1.0;
    for (axis, &c) in comps.iter().enumerate() {
        let f = axis as u8 + if c < 0.0 { 3 } else { 0 };
        if c.abs() > best {
            best = c.abs();
            face = f;
        }
    }
    let (u, v) = match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    };
    (face, u.clamp(-1.0, 1.0), v.clamp(-1.0, 1.0))
}

fn oracle_contains(c: &CellId, at: &(u8, f64, f64)) -> bool {
    if c.face().index() != at.0 {
        return false;
    }
    let (u0, u1, v0, v1) = c.uv_rect();
    let inside = |s: f64, lo: f64, hi: f64| s >= lo && (s < hi || (hi == 1.0 && s <= 1.0));
    inside(at.1, u0, u1) && inside(at.2, v0, v1)
}

/// Recursive counting: split while a cell holds more than `tau_max`, keep it
/// when it holds at least `tau_min`, drop it otherwise.
fn oracle_partition(samples: &[Sample], tau_min: usize, tau_max: usize) -> Vec<(CellId, Vec<String>)> {
    fn go(
        c: CellId,
        pts: &[(usize, (u8, f64, f64))],
        s: &[Sample],
        tau_min: usize,
        tau_max: usize,
        out: &mut Vec<(CellId, Vec<String>)>,
    ) {
        let inside: Vec<(usize, (u8, f64, f64))> = pts.iter().copied().filter(|(_, at)| oracle_contains(&c, at)).collect();
        if inside.len() > tau_max && c.depth() < 30 {
            for ch in c.children() {
                go(ch, &inside, s, tau_min, tau_max, out);
            }
        } else if inside.len() >= tau_min {
            let mut ids: Vec<String> = inside.iter().map(|(i, _)| s[*i].id.clone()).collect();
            ids.sort();
            out.push((c, ids));
        }
    }
    let pts: Vec<(usize, (u8, f64, f64))> = samples.iter().enumerate().map(|(i, s)| (i, oracle_face_uv(s.location))).collect();
    let mut out = Vec::new();
    for f in Face::all() {
        go(CellId::face_cell(f), &pts, samples, tau_min, tau_max, &mut out);
    }
    out.sort();
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = Vec::new();
    let mut total_cells = 0;
    for k in 0..C1_DATASETS {
        let n = if k == 0 { C1_MAX_SAMPLES } else { rng.random_range(50..=C1_MAX_SAMPLES) };
        let samples = mixed_samples(n, 1000 + k as u64);
        let tau_min = rng.random_range(1..=20);
        let tau_max = tau_min + rng.random_range(0..400);
        let p = build_partition(&samples, tau_min, tau_max).unwrap();
        let got: Vec<(CellId, Vec<String>)> = p.cells().iter().map(|c| (c.id, c.member_ids.clone())).collect();
        let want = oracle_partition(&samples, tau_min, tau_max);
        total_cells += want.len();
        if got != want {
            mismatches.push(k);
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches.is_empty() && elapsed < C1_BUDGET,
        format!(
            "{C1_DATASETS} datasets, {total_cells} oracle cells, mismatching datasets {mismatches:?}, {:.2}s (budget {}s)",
            elapsed.as_secs_f64(),
            C1_BUDGET.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- 2 ----

fn criterion_2() -> Outcome {
    let samples = mixed_samples(C2_SAMPLES, 202);
    let h = build_hierarchy(&samples, C2_TAU_MIN, &C2_TAU_MAX).unwrap();
    // Recount every kept cell from sample ancestors.
    let leaves: Vec<CellId> = samples.iter().map(|s| geosurge_core::geodesy::leaf_cell(s.location)).collect();
    let mut violations = 0usize;
    let mut kept = 0usize;
    let level_sets: Vec<HashSet<CellId>> = h.levels().iter().map(|p| p.cells().iter().map(|c| c.id).collect()).collect();
    for (l, p) in h.levels().iter().enumerate() {
        let mut counts: HashMap<CellId, usize> = HashMap::new();
        for leaf in &leaves {
            for d in 0..=leaf.depth() {
                let a = leaf.ancestor_at(d).unwrap();
                if level_sets[l].contains(&a) {
                    *counts.entry(a).or_default() += 1;
                    break;
                }
            }
        }
        for c in p.cells() {
            kept += 1;
            let n = counts.get(&c.id).copied().unwrap_or(0);
            if n != c.member_count || n < C2_TAU_MIN || n > C2_TAU_MAX[l] {
                violations += 1;
            }
        }
    }
    // Nesting: exactly one ancestor per level, and it is the linked one.
    let mut link_violations = 0usize;
    for (f, cell) in h.finest().cells().iter().enumerate() {
        for (l, p) in h.levels().iter().enumerate() {
            let ancestors: Vec<usize> = (0..=cell.id.depth())
                .filter_map(|d| p.index_of(&cell.id.ancestor_at(d).unwrap()))
                .collect();
            if ancestors.len() != 1 || h.links()[f][l] != ancestors[0] {
                link_violations += 1;
            }
        }
    }
    let sizes: Vec<usize> = h.levels().iter().map(|p| p.len()).collect();
    outcome(
        violations == 0 && link_violations == 0,
        format!(
            "{C2_SAMPLES} samples, cells per level {sizes:?}; {kept} kept cells, {violations} count violations, {link_violations} link violations"
        ),
    )
}

// ---------------------------------------------------------------- 3 ----

fn desk_fusion() -> FusionConfig {
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

fn toy_fusion() -> FusionConfig {
    FusionConfig {
        d_kv: 16,
        d_s: 8,
        latent: 4,
        heads: 2,
        attn_dim: 8,
        mlp_hidden: 12,
        blocks: 1,
        embed_dim: 6,
        patch: 2,
        classes: 3,
        seg_h: 4,
        seg_w: 4,
        ..FusionConfig::default()
    }
}

fn random_examples<T: geosurge_core::Real>(
    h: &PartitionHierarchy,
    samples: &[Sample],
    cfg: &FusionConfig,
    tokens: usize,
    seed: u64,
) -> Vec<Example<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples
        .iter()
        .filter_map(|s| {
            let rows = h.assign_all(s.location)?;
            let data: Vec<T> = (0..tokens * cfg.d_kv).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
            let rgb = RgbTokens::new(Tensor::matrix(tokens, cfg.d_kv, data).unwrap()).unwrap();
            let ids = (0..cfg.seg_h * cfg.seg_w).map(|_| rng.random_range(0..cfg.classes as u16)).collect();
            Some(Example {
                id: s.id.clone(),
                rgb,
                seg: SegMap::new(cfg.seg_h, cfg.seg_w, ids).unwrap(),
                rows,
            })
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let cfg = toy_fusion();
    let samples = mixed_samples(12, 303);
    let h = build_hierarchy(&samples, 1, &[6, 2]).unwrap();
    let model = Model::<f64>::init(&cfg, &h, 304).unwrap();
    let ex = random_examples::<f64>(&h, &samples, &cfg, 3, 305);
    let batch: Vec<&Example<f64>> = ex.iter().take(4).collect();
    let report = grad_check(&model.store, &GradCheck::default(), |tape: &mut Tape<'_, f64>, store| {
        total_loss(tape, store, &model.fusion, &model.geo, &batch, false).map_err(|e| TensorError::Invalid(e.to_string()))
    })
    .unwrap();
    let elapsed = start.elapsed();
    outcome(
        report.max_rel_error < C3_MAX_REL && elapsed < C3_BUDGET && h.num_levels() == 2,
        format!(
            "{} entries over {} levels, max relative error {:.3e} (limit {C3_MAX_REL:e}), {:.2}s",
            report.entries_checked,
            h.num_levels(),
            report.max_rel_error,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 4 ----

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data: Vec<Vec<f64>> = (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    Tensor::from_rows(&data).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let v1 = unit_rows(1, 32, &mut rng);
    let g1 = unit_rows(1, 32, &mut rng);
    let single = info_nce_level(&v1, &g1, 0.07, None).unwrap();

    let b = 16;
    let row = unit_rows(1, 32, &mut rng).row(0).to_vec();
    let same = Tensor::from_rows(&vec![row; b]).unwrap();
    let uniform = info_nce_level(&same, &same, 0.07, None).unwrap();
    let uniform_dev = (uniform - (b as f64).ln()).abs();

    // Untrained model on unclustered inputs, three levels. The ln B
    // expectation rests on near-orthogonal embeddings, so the check runs at
    // the full 768-wide embedding; the 32-wide desk figure is informational.
    let random_loss = |embed_dim: usize| {
        let cfg = FusionConfig {
            embed_dim,
            ..desk_fusion()
        };
        let samples = mixed_samples(4000, 405);
        let h = build_hierarchy(&samples, 1, &[400, 100, 25]).unwrap();
        let model = Model::<f64>::init(&cfg, &h, 406).unwrap();
        let ex = random_examples::<f64>(&h, &samples, &cfg, 5, 407);
        let batch: Vec<&Example<f64>> = ex.iter().take(64).collect();
        assert_eq!(batch.len(), 64);
        let mut tape = Tape::new();
        let loss = total_loss(&mut tape, &model.store, &model.fusion, &model.geo, &batch, false).unwrap();
        (tape.value(loss).item(), h.num_levels() as f64 * 64f64.ln())
    };
    let (random, target) = random_loss(768);
    let (desk, _) = random_loss(32);
    let rel = (random - target).abs() / target;

    outcome(
        single == 0.0 && uniform_dev < C4_UNIFORM_TOL && rel < C4_RANDOM_REL,
        format!(
            "B=1 loss {single}; uniform B={b} |loss - ln B| = {uniform_dev:.1e}; random init B=64 L=3 dim 768 loss {random:.4} vs {target:.4} ({:.1}% off, limit {:.0}%); dim 32 gives {desk:.4}",
            100.0 * rel,
            100.0 * C4_RANDOM_REL
        ),
    )
}

// ---------------------------------------------------------------- 5 ----

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let cfg = FusionConfig {
        embed_dim: 16,
        ..toy_fusion()
    };
    let mut worst: f64 = 0.0;
    let mut largest = 0;
    let mut hierarchies = 0;
    for (k, &n) in [40usize, 200, 800, 1600, 3000].iter().enumerate() {
        let samples = mixed_samples(n, 500 + k as u64);
        let h = build_hierarchy(&samples, 1, &[64, 16, 3]).unwrap();
        if h.finest().len() > C5_MAX_FINEST {
            continue;
        }
        hierarchies += 1;
        largest = largest.max(h.finest().len());
        let mut model = Model::<f64>::init(&cfg, &h, 510 + k as u64).unwrap();
        for l in 0..h.num_levels() {
            let t: f64 = rng.random_range(0.03..0.5);
            *model.store.value_mut(model.geo.levels[l].log_tau) = Tensor::scalar(t.ln());
        }
        let predictor = Predictor::from_model(&h, &model, InferenceConfig::default()).unwrap();
        for _ in 0..4 {
            let v = unit_rows(1, cfg.embed_dim, &mut rng).row(0).to_vec();
            let (joint, _) = predictor.hierarchical_scores(&v).unwrap();
            // Finest cell × level × cells of the level.
            let tables: Vec<Tensor<f64>> = (0..h.num_levels()).map(|l| model.geo.all_normalized(&model.store, l).unwrap()).collect();
            let taus: Vec<f64> = (0..h.num_levels()).map(|l| model.geo.temperature(&model.store, l).unwrap()).collect();
            let sim = |l: usize, c: usize| tables[l].row(c).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let mut want = vec![1.0; h.finest().len()];
            for (f, w) in want.iter_mut().enumerate() {
                for l in 0..h.num_levels() {
                    let cell = &h.finest().cells()[f].id;
                    let anc = h.levels()[l].cells().iter().position(|c| c.id.is_prefix_of(cell)).unwrap();
                    let mut z = 0.0;
                    for c in 0..h.levels()[l].len() {
                        z += (sim(l, c) / taus[l]).exp();
                    }
                    *w *= (sim(l, anc) / taus[l]).exp() / z;
                }
            }
            let total: f64 = want.iter().sum();
            for (a, b) in joint.iter().zip(&want) {
                worst = worst.max((a - b / total).abs());
            }
        }
    }
    outcome(
        worst < C5_MAX_ABS && hierarchies >= 3,
        format!("{hierarchies} hierarchies up to {largest} finest cells, max |deviation| {worst:.2e} (limit {C5_MAX_ABS:e})"),
    )
}

// ------------------------------------------------------------ 6, 7, 9 ----

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geosurge")
}

fn desk_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json")
}

fn geosurge(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(bin())
        .current_dir(dir)
        .arg("--config")
        .arg(desk_config())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("geosurge {args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

struct Run {
    percent: Vec<f64>,
    wall: Duration,
    hashes: BTreeMap<String, String>,
}

/// `synth → partition → train → infer → eval` in a fresh directory with
/// the desk config plus `extra` overrides; the JSON report gives the numbers.
fn pipeline(extra: &[&str]) -> Result<Run, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let mut sets: Vec<&str> = Vec::new();
    for s in extra {
        sets.extend(["--set", s]);
    }
    for cmd in ["synth", "partition", "train", "infer"] {
        let mut args = vec![cmd];
        args.extend(&sets);
        geosurge(dir.path(), &args)?;
    }
    let mut args = vec!["eval", "--format", "json", "--out", "desk/out/report.json"];
    args.extend(&sets);
    geosurge(dir.path(), &args)?;
    let wall = start.elapsed();

    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("desk/out/report.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let percent = report["report"]["rows"]
        .as_array()
        .ok_or("report has no rows")?
        .iter()
        .map(|r| 100.0 * r["fraction"].as_f64().unwrap_or(f64::NAN))
        .collect();
    let mut hashes = BTreeMap::new();
    for f in [
        "desk/out/hierarchy.json",
        "desk/out/model.gsck",
        "desk/out/train_log.jsonl",
        "desk/out/predictions.csv",
        "desk/out/predictions.json",
        "desk/out/report.json",
    ] {
        let bytes = std::fs::read(dir.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        hashes.insert(f.to_string(), hex(&Sha256::digest(&bytes)));
    }
    Ok(Run { percent, wall, hashes })
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn fmt_pct(p: &[f64]) -> String {
    p.iter().map(|x| format!("{x:.1}")).collect::<Vec<_>>().join("/")
}

fn criterion_6(run: &Run) -> Outcome {
    let at = |km: f64| DEFAULT_THRESHOLDS_KM.iter().position(|&t| t == km).map(|i| run.percent[i]).unwrap_or(f64::NAN);
    let pinned_ok = run.percent.len() == C6_PINNED.len()
        && run.percent.iter().zip(&C6_PINNED).all(|(a, b)| (a - b).abs() <= C6_PIN_TOL_PP);
    outcome(
        at(2500.0) >= C6_MIN_2500 && at(750.0) >= C6_MIN_750 && pinned_ok && run.wall < C6_BUDGET,
        format!(
            "1/25/200/750/2500 km: {}% (pinned {} ± {C6_PIN_TOL_PP}pp; floors {C6_MIN_2500}% at 2500 km, {C6_MIN_750}% at 750 km), {:.0}s",
            fmt_pct(&run.percent),
            fmt_pct(&C6_PINNED),
            run.wall.as_secs_f64()
        ),
    )
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (m, var.sqrt())
}

fn criterion_7(full_seed0: &Run) -> Result<Outcome, String> {
    let idx_750 = DEFAULT_THRESHOLDS_KM.iter().position(|&t| t == 750.0).unwrap();
    let idx_fine = 0;
    let mut full = vec![full_seed0.percent.clone()];
    let mut shallow = Vec::new();
    let mut nofuse = Vec::new();
    for &seed in &C7_SEEDS {
        let s = format!("train.seed={seed}");
        if seed != 0 {
            full.push(pipeline(&[&s])?.percent);
        }
        shallow.push(pipeline(&[&s, "partition.tau_max=[2000]"])?.percent);
        nofuse.push(pipeline(&[&s, "fusion.semantic_fusion=false"])?.percent);
    }
    let col = |runs: &[Vec<f64>], i: usize| runs.iter().map(|r| r[i]).collect::<Vec<_>>();
    let (d3, d3s) = mean_std(&col(&full, idx_750));
    let (d1, d1s) = mean_std(&col(&shallow, idx_750));
    let (f1, f1s) = mean_std(&col(&full, idx_fine));
    let (f0, f0s) = mean_std(&col(&nofuse, idx_fine));
    let depth_band = d3s.max(d1s);
    let fusion_band = f1s.max(f0s);
    let depth_ok = d3 - d1 > depth_band;
    let fusion_ok = f1 - f0 > fusion_band;
    Ok(outcome(
        depth_ok && fusion_ok,
        format!(
            "750 km: depth 3 {d3:.1}% vs depth 1 {d1:.1}% (margin {:.1}pp, band {depth_band:.1}pp); 1 km: fusion {f1:.1}% vs features-only {f0:.1}% (margin {:.1}pp, band {fusion_band:.1}pp)",
            d3 - d1,
            f1 - f0
        ),
    ))
}

fn criterion_9(a: &Run) -> Result<Outcome, String> {
    let b = pipeline(&[])?;
    let differing: Vec<&String> = a.hashes.keys().filter(|k| a.hashes.get(*k) != b.hashes.get(*k)).collect();
    Ok(outcome(
        differing.is_empty(),
        format!("{} artifacts compared across two runs, differing: {differing:?}", a.hashes.len()),
    ))
}

// ---------------------------------------------------------------- 8 ----

fn criterion_8() -> Outcome {
    let p = |a, b| GeoPoint::new(a, b).unwrap();
    let same = haversine_km(p(0.0, 0.0), p(0.0, 0.0));
    let half = haversine_km(p(0.0, 0.0), p(0.0, 180.0));
    let paris_vegas = haversine_km(p(48.8584, 2.2945), p(36.1126, -115.1728));
    // Law of cosines as the independent oracle for the third example.
    let (a, b) = (p(48.8584, 2.2945), p(36.1126, -115.1728));
    let (p1, p2) = (a.lat().to_radians(), b.lat().to_radians());
    let dl = (b.lon() - a.lon()).to_radians();
    let oracle = 6371.0 * (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos()).clamp(-1.0, 1.0).acos();
    let examples_ok = same == 0.0
        && (half - std::f64::consts::PI * 6371.0).abs() < 1e-6
        && (paris_vegas - oracle).abs() < C8_HAVERSINE_TOL_KM
        && (paris_vegas - 8733.18).abs() < C8_HAVERSINE_TOL_KM;

    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut non_monotone = 0;
    for s in 0..C8_RECORD_SETS {
        let n = rng.random_range(1..60);
        let recs: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord::new(format!("q{s}_{i}"), unit_sphere_point(&mut rng), unit_sphere_point(&mut rng)))
            .collect();
        let mut th: Vec<f64> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0.0..20000.0)).collect();
        th.sort_by(f64::total_cmp);
        th.dedup();
        let f = gcd_accuracy(&recs, &th).unwrap().fractions();
        if f.windows(2).any(|w| w[0] > w[1]) || f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            non_monotone += 1;
        }
    }
    outcome(
        examples_ok && non_monotone == 0,
        format!(
            "0 → {same} km, antipodal {half:.2} km, Paris→Las Vegas {paris_vegas:.3} km (law-of-cosines oracle {oracle:.3}); {non_monotone}/{C8_RECORD_SETS} record sets with non-monotone fractions"
        ),
    )
}

fn main() {
    // `cargo test --test acceptance -- 4 6` runs only the listed criteria.
    let only: Vec<u8> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |n: u8| only.is_empty() || only.contains(&n);
    let mut results: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |n, name, o: Outcome| {
        println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    let fast: [(u8, &str, fn() -> Outcome); 6] = [
        (1, "partition oracle equivalence", criterion_1),
        (2, "balance and nesting invariants", criterion_2),
        (3, "gradient correctness", criterion_3),
        (4, "InfoNCE sanity", criterion_4),
        (5, "hierarchical inference oracle", criterion_5),
        (8, "haversine and monotone thresholds", criterion_8),
    ];
    for (n, name, f) in fast {
        if want(n) {
            report(n, name, f());
        }
    }
    if want(6) || want(7) || want(9) {
        let failed_run = |e: String| outcome(false, format!("pipeline failed: {e}"));
        match pipeline(&[]) {
            Ok(first) => {
                if want(6) {
                    report(6, "end-to-end synthetic recovery", criterion_6(&first));
                }
                if want(9) {
                    report(9, "determinism", criterion_9(&first).unwrap_or_else(failed_run));
                }
                if want(7) {
                    report(7, "ablation directions", criterion_7(&first).unwrap_or_else(failed_run));
                }
            }
            Err(e) => {
                for (n, name) in [(6, "end-to-end synthetic recovery"), (9, "determinism"), (7, "ablation directions")] {
                    if want(n) {
                        report(n, name, failed_run(e.clone()));
                    }
                }
            }
        }
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
