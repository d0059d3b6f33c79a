//! Balanced geocell partitions and the multi-resolution partition hierarchy.
//!
//! A partition starts from the six face cells and splits every cell holding
//! more than `tau_max` samples into its four children. Once splitting stops,
//! cells with fewer than `tau_min` samples are dropped. Counts used for the
//! split decision include samples that later land in dropped descendants.
//!
//! A hierarchy repeats this with a strictly decreasing `tau_max` schedule and
//! a shared `tau_min`, which makes every finest cell a quadtree descendant of
//! exactly one kept cell per coarser level.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geodesy::{cell_center, leaf_cell, spherical_mean, CellId, Face, GeoPoint, MAX_DEPTH};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("no samples")]
    NoSamples,
    #[error("invalid thresholds: tau_min {tau_min}, tau_max {tau_max}")]
    InvalidTau { tau_min: usize, tau_max: usize },
    #[error("invalid tau_max schedule {0:?}: must be nonempty, strictly decreasing and >= tau_min")]
    Schedule(Vec<usize>),
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("cell {cell} still holds {count} samples at the maximum depth (duplicate coordinates?)")]
    DepthCap { cell: CellId, count: usize },
    #[error("hierarchy integrity violation: {0}")]
    Integrity(String),
    #[error("hierarchy file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("hierarchy file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A geotagged training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub location: GeoPoint,
    /// Index of the record in its dataset.
    pub feature_ref: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoCell {
    pub id: CellId,
    pub member_count: usize,
    /// Member sample ids, sorted. Empty when loaded from a stripped file.
    pub member_ids: Vec<String>,
    /// Spherical mean of member locations (cell center when degenerate).
    pub decoded_location: GeoPoint,
}

/// One balanced partition `ρ(tau_min, tau_max)`; cells in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub tau_min: usize,
    pub tau_max: usize,
    cells: Vec<GeoCell>,
    index: HashMap<CellId, usize>,
}

impl Partition {
    fn from_cells(tau_min: usize, tau_max: usize, mut cells: Vec<GeoCell>) -> Self {
        cells.sort_by(|a, b| a.id.cmp(&b.id));
        let index = cells.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        Self {
            tau_min,
            tau_max,
            cells,
            index,
        }
    }

    pub fn cells(&self) -> &[GeoCell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index_of(&self, id: &CellId) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Index of the kept cell that is `cell` or one of its ancestors.
    pub fn index_covering(&self, cell: &CellId) -> Option<usize> {
        (0..=cell.depth()).find_map(|d| self.index_of(&cell.ancestor_at(d)?))
    }

    /// The kept cell containing `p`, if any.
    pub fn assign(&self, p: GeoPoint) -> Option<CellId> {
        self.index_covering(&leaf_cell(p)).map(|i| self.cells[i].id)
    }
}

/// Free-function form of [`Partition::assign`].
pub fn assign(p: GeoPoint, partition: &Partition) -> Option<CellId> {
    partition.assign(p)
}

struct Sorted<'s> {
    leaves: Vec<CellId>,
    samples: Vec<&'s Sample>,
}

fn sort_samples(samples: &[Sample]) -> Result<Sorted<'_>, PartitionError> {
    if samples.is_empty() {
        return Err(PartitionError::NoSamples);
    }
    let mut seen = HashSet::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(PartitionError::DuplicateId(s.id.clone()));
        }
    }
    let mut keyed: Vec<(CellId, &Sample)> = samples.iter().map(|s| (leaf_cell(s.location), s)).collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let (leaves, samples) = keyed.into_iter().unzip();
    Ok(Sorted { leaves, samples })
}

/// Builds one balanced partition.
pub fn build_partition(samples: &[Sample], tau_min: usize, tau_max: usize) -> Result<Partition, PartitionError> {
    validate_tau(tau_min, tau_max)?;
    let sorted = sort_samples(samples)?;
    build_sorted(&sorted, tau_min, tau_max)
}

fn validate_tau(tau_min: usize, tau_max: usize) -> Result<(), PartitionError> {
    if tau_min < 1 || tau_max < tau_min {
        return Err(PartitionError::InvalidTau { tau_min, tau_max });
    }
    Ok(())
}

fn build_sorted(sorted: &Sorted<'_>, tau_min: usize, tau_max: usize) -> Result<Partition, PartitionError> {
    let mut cells = Vec::new();
    let mut lo = 0;
    for face in Face::all() {
        let hi = lo + sorted.leaves[lo..].partition_point(|l| l.face() == face);
        split(sorted, CellId::face_cell(face), lo, hi, tau_min, tau_max, &mut cells)?;
        lo = hi;
    }
    Ok(Partition::from_cells(tau_min, tau_max, cells))
}

/// Recursively splits `cell`, whose samples occupy `lo..hi` of the sorted leaves.
fn split(
    sorted: &Sorted<'_>,
    cell: CellId,
    lo: usize,
    hi: usize,
    tau_min: usize,
    tau_max: usize,
    out: &mut Vec<GeoCell>,
) -> Result<(), PartitionError> {
    let count = hi - lo;
    if count > tau_max {
        if cell.depth() == MAX_DEPTH {
            return Err(PartitionError::DepthCap { cell, count });
        }
        let depth = cell.depth();
        let mut start = lo;
        for digit in 0..4u8 {
            let end = start + sorted.leaves[start..hi].partition_point(|l| l.digit(depth) == digit);
            split(sorted, cell.child(digit), start, end, tau_min, tau_max, out)?;
            start = end;
        }
        return Ok(());
    }
    if count >= tau_min {
        let members = &sorted.samples[lo..hi];
        let mut member_ids: Vec<String> = members.iter().map(|s| s.id.clone()).collect();
        member_ids.sort();
        let decoded_location =
            spherical_mean(members.iter().map(|s| s.location)).unwrap_or_else(|| cell_center(&cell));
        out.push(GeoCell {
            id: cell,
            member_count: count,
            member_ids,
            decoded_location,
        });
    }
    Ok(())
}

/// `L` partitions, coarsest first, plus links from every finest cell to its
/// covering cell at each level.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionHierarchy {
    pub tau_min: usize,
    levels: Vec<Partition>,
    /// `links[f][l]`: index at level `l` of the ancestor of finest cell `f`.
    links: Vec<Vec<usize>>,
}

impl PartitionHierarchy {
    pub fn levels(&self) -> &[Partition] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &Partition {
        self.levels.last().expect("hierarchy has at least one level")
    }

    pub fn schedule(&self) -> Vec<usize> {
        self.levels.iter().map(|p| p.tau_max).collect()
    }

    /// Ancestor index at `level` for finest cell index `finest`.
    pub fn ancestor_index(&self, finest: usize, level: usize) -> usize {
        self.links[finest][level]
    }

    pub fn links(&self) -> &[Vec<usize>] {
        &self.links
    }

    /// Finest cell id → ancestor cell id per level (the last entry is the cell itself).
    pub fn parent_links(&self) -> BTreeMap<CellId, Vec<CellId>> {
        self.finest()
            .cells()
            .iter()
            .zip(&self.links)
            .map(|(c, row)| {
                let ids = row.iter().enumerate().map(|(l, &i)| self.levels[l].cells[i].id).collect();
                (c.id, ids)
            })
            .collect()
    }

    /// Per-level cell indices for a point, or `None` when its finest cell was
    /// discarded.
    pub fn assign_all(&self, p: GeoPoint) -> Option<Vec<usize>> {
        let f = self.finest().index_covering(&leaf_cell(p))?;
        Some(self.links[f].clone())
    }

    fn from_levels(tau_min: usize, levels: Vec<Partition>) -> Result<Self, PartitionError> {
        let finest = levels.last().ok_or_else(|| PartitionError::Integrity("no levels".into()))?;
        let mut links = Vec::with_capacity(finest.len());
        for c in finest.cells() {
            let mut row = Vec::with_capacity(levels.len());
            for (l, level) in levels.iter().enumerate() {
                let i = level.index_covering(&c.id).ok_or_else(|| {
                    PartitionError::Integrity(format!("finest cell {} has no ancestor at level {l}", c.id))
                })?;
                row.push(i);
            }
            links.push(row);
        }
        Ok(Self {
            tau_min,
            levels,
            links,
        })
    }

    /// Re-links the levels from the file's `parent_links`, checking that every
    /// finest cell has exactly one prefix ancestor per level.
    fn from_file_levels(
        tau_min: usize,
        levels: Vec<Partition>,
        parent_links: &BTreeMap<CellId, Vec<CellId>>,
    ) -> Result<Self, PartitionError> {
        let h = Self::from_levels(tau_min, levels)?;
        for (f, c) in h.finest().cells().iter().enumerate() {
            let listed = parent_links
                .get(&c.id)
                .ok_or_else(|| PartitionError::Integrity(format!("missing parent links for {}", c.id)))?;
            if listed.len() != h.num_levels() {
                return Err(PartitionError::Integrity(format!("{} links {} levels", c.id, listed.len())));
            }
            for (l, anc) in listed.iter().enumerate() {
                if h.levels[l].cells[h.links[f][l]].id != *anc {
                    return Err(PartitionError::Integrity(format!(
                        "{} links {} at level {l}, which does not cover it",
                        c.id, anc
                    )));
                }
            }
        }
        if parent_links.len() != h.finest().len() {
            return Err(PartitionError::Integrity("parent links name unknown finest cells".into()));
        }
        Ok(h)
    }
}

/// Builds one partition per schedule entry from the same samples.
pub fn build_hierarchy(
    samples: &[Sample],
    tau_min: usize,
    tau_max_schedule: &[usize],
) -> Result<PartitionHierarchy, PartitionError> {
    let ok = !tau_max_schedule.is_empty()
        && tau_max_schedule.windows(2).all(|w| w[0] > w[1])
        && tau_max_schedule.iter().all(|&t| t >= tau_min);
    if !ok {
        return Err(PartitionError::Schedule(tau_max_schedule.to_vec()));
    }
    validate_tau(tau_min, *tau_max_schedule.last().expect("nonempty"))?;
    let sorted = sort_samples(samples)?;
    let levels = tau_max_schedule
        .iter()
        .map(|&t| build_sorted(&sorted, tau_min, t))
        .collect::<Result<Vec<_>, _>>()?;
    PartitionHierarchy::from_levels(tau_min, levels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub tau_max: usize,
    pub cells: usize,
    pub min_members: usize,
    pub median_members: usize,
    pub max_members: usize,
    /// Samples falling in a kept cell of this level.
    pub covered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub samples: usize,
    pub levels: Vec<LevelStats>,
    /// Samples covered at every level simultaneously.
    pub covered_all_levels: usize,
    pub coverage_fraction: f64,
    /// Samples whose finest cell was discarded; excluded from training.
    pub excluded: usize,
}

/// Balance and coverage diagnostics. Member counts come from the cells'
/// recorded counts; coverage is recomputed from `samples`.
pub fn coverage_report(h: &PartitionHierarchy, samples: &[Sample]) -> CoverageReport {
    let levels: Vec<LevelStats> = h
        .levels
        .iter()
        .map(|p| {
            let mut counts: Vec<usize> = p.cells.iter().map(|c| c.member_count).collect();
            counts.sort_unstable();
            let covered = samples.iter().filter(|s| p.assign(s.location).is_some()).count();
            LevelStats {
                tau_max: p.tau_max,
                cells: counts.len(),
                min_members: counts.first().copied().unwrap_or(0),
                median_members: if counts.is_empty() { 0 } else { counts[counts.len() / 2] },
                max_members: counts.last().copied().unwrap_or(0),
                covered,
            }
        })
        .collect();
    let covered_all_levels = samples
        .iter()
        .filter(|s| h.levels.iter().all(|p| p.assign(s.location).is_some()))
        .count();
    let coverage_fraction = if samples.is_empty() {
        0.0
    } else {
        covered_all_levels as f64 / samples.len() as f64
    };
    CoverageReport {
        samples: samples.len(),
        levels,
        covered_all_levels,
        coverage_fraction,
        excluded: samples.len() - covered_all_levels,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocationRecord {
    lat: f64,
    lon: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellRecord {
    cell_id: CellId,
    member_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    member_ids: Option<Vec<String>>,
    decoded_location: LocationRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelRecord {
    tau_max: usize,
    cells: Vec<CellRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleRecord {
    tau_min: usize,
    tau_max: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HierarchyFile {
    format: String,
    version: u32,
    schedule: ScheduleRecord,
    levels: Vec<LevelRecord>,
    parent_links: BTreeMap<CellId, Vec<CellId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

const FORMAT_NAME: &str = "geosurge-hierarchy";
const FORMAT_VERSION: u32 = 1;

/// Serializes the hierarchy as pretty JSON. `config` is embedded verbatim.
pub fn hierarchy_to_json(
    h: &PartitionHierarchy,
    with_members: bool,
    config: Option<serde_json::Value>,
) -> Vec<u8> {
    let file = HierarchyFile {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        schedule: ScheduleRecord {
            tau_min: h.tau_min,
            tau_max: h.schedule(),
        },
        levels: h
            .levels
            .iter()
            .map(|p| LevelRecord {
                tau_max: p.tau_max,
                cells: p
                    .cells
                    .iter()
                    .map(|c| CellRecord {
                        cell_id: c.id,
                        member_count: c.member_count,
                        member_ids: with_members.then(|| c.member_ids.clone()),
                        decoded_location: LocationRecord {
                            lat: c.decoded_location.lat(),
                            lon: c.decoded_location.lon(),
                        },
                    })
                    .collect(),
            })
            .collect(),
        parent_links: h.parent_links(),
        config,
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("hierarchy serializes");
    out.push(b'\n');
    out
}

/// Parsed hierarchy plus the embedded config, if any.
pub fn hierarchy_from_json(
    bytes: &[u8],
    path: &str,
) -> Result<(PartitionHierarchy, Option<serde_json::Value>), PartitionError> {
    let file: HierarchyFile = serde_json::from_slice(bytes).map_err(|source| PartitionError::Json {
        path: path.to_string(),
        source,
    })?;
    if file.format != FORMAT_NAME || file.version != FORMAT_VERSION {
        return Err(PartitionError::Integrity(format!(
            "{path}: unsupported format {:?} version {}",
            file.format, file.version
        )));
    }
    let tau_min = file.schedule.tau_min;
    if file.schedule.tau_max.len() != file.levels.len() {
        return Err(PartitionError::Integrity(format!("{path}: schedule and level count differ")));
    }
    let mut levels = Vec::with_capacity(file.levels.len());
    for (lr, &t) in file.levels.into_iter().zip(&file.schedule.tau_max) {
        if lr.tau_max != t {
            return Err(PartitionError::Integrity(format!("{path}: level tau_max {} != schedule {t}", lr.tau_max)));
        }
        let mut cells = Vec::with_capacity(lr.cells.len());
        for c in lr.cells {
            let decoded_location = GeoPoint::new(c.decoded_location.lat, c.decoded_location.lon)
                .map_err(|e| PartitionError::Integrity(format!("{path}: {}: {e}", c.cell_id)))?;
            cells.push(GeoCell {
                id: c.cell_id,
                member_count: c.member_count,
                member_ids: c.member_ids.unwrap_or_default(),
                decoded_location,
            });
        }
        let p = Partition::from_cells(tau_min, t, cells);
        if p.index.len() != p.cells.len() {
            return Err(PartitionError::Integrity(format!("{path}: duplicate cells at tau_max {t}")));
        }
        for (i, a) in p.cells.iter().enumerate() {
            if let Some(b) = p.cells.get(i + 1) {
                if a.id.is_prefix_of(&b.id) {
                    return Err(PartitionError::Integrity(format!("{path}: {} overlaps {}", a.id, b.id)));
                }
            }
        }
        levels.push(p);
    }
    let h = PartitionHierarchy::from_file_levels(tau_min, levels, &file.parent_links)?;
    Ok((h, file.config))
}

pub fn read_hierarchy(path: &Path) -> Result<(PartitionHierarchy, Option<serde_json::Value>, String), PartitionError> {
    let bytes = std::fs::read(path).map_err(|source| PartitionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (h, cfg) = hierarchy_from_json(&bytes, &path.display().to_string())?;
    Ok((h, cfg, sha256_hex(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{cell_contains, cell_id_at_level};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(i: usize, lat: f64, lon: f64) -> Sample {
        Sample {
            id: format!("s{i:06}"),
            location: GeoPoint::new(lat, lon).unwrap(),
            feature_ref: i,
        }
    }

    /// Recursive counting over explicit containment tests, independent of the
    /// sorted-range splitting used by `build_partition`.
    fn oracle(samples: &[Sample], tau_min: usize, tau_max: usize) -> Vec<(CellId, Vec<String>)> {
        fn go(c: CellId, s: &[&Sample], tau_min: usize, tau_max: usize, out: &mut Vec<(CellId, Vec<String>)>) {
            let inside: Vec<&Sample> = s.iter().copied().filter(|x| cell_contains(&c, x.location)).collect();
            if inside.len() > tau_max {
                for ch in c.children() {
                    go(ch, &inside, tau_min, tau_max, out);
                }
            } else if inside.len() >= tau_min {
                let mut ids: Vec<String> = inside.iter().map(|x| x.id.clone()).collect();
                ids.sort();
                out.push((c, ids));
            }
        }
        let all: Vec<&Sample> = samples.iter().collect();
        let mut out = Vec::new();
        for f in Face::all() {
            go(CellId::face_cell(f), &all, tau_min, tau_max, &mut out);
        }
        out.sort();
        out
    }

    fn cells_of(p: &Partition) -> Vec<(CellId, Vec<String>)> {
        p.cells().iter().map(|c| (c.id, c.member_ids.clone())).collect()
    }

    fn quadrant_samples(n: usize, seed: u64) -> Vec<Sample> {
        // Face +X, u and v in (0, 1): the first-quadrant digit 3.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (u, v): (f64, f64) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
                let p = crate::geodesy::UnitVec3::normalize(1.0, u, v).unwrap().to_geo();
                Sample {
                    id: format!("q{i:04}"),
                    location: p,
                    feature_ref: i,
                }
            })
            .collect()
    }

    #[test]
    fn one_sample_per_face_needs_no_split() {
        let pts = [(0.0, 0.0), (0.0, 90.0), (90.0, 0.0), (0.0, 180.0), (0.0, -90.0), (-90.0, 0.0)];
        let samples: Vec<Sample> = pts.iter().enumerate().map(|(i, &(a, b))| sample(i, a, b)).collect();
        let p = build_partition(&samples, 1, 10).unwrap();
        assert_eq!(p.len(), 6);
        for (f, c) in p.cells().iter().enumerate() {
            assert_eq!(c.id, CellId::face_cell(Face::new(f as u8).unwrap()));
            assert_eq!(c.member_count, 1);
        }
    }

    #[test]
    fn sparse_cells_are_excluded() {
        let samples = quadrant_samples(49, 1);
        let p = build_partition(&samples, 50, 100).unwrap();
        assert!(p.is_empty());
        assert_eq!(p.assign(samples[0].location), None);
    }

    #[test]
    fn quadrant_matches_oracle() {
        let samples = quadrant_samples(100, 2);
        let p = build_partition(&samples, 1, 30).unwrap();
        assert_eq!(cells_of(&p), oracle(&samples, 1, 30));
        assert!(p.cells().iter().all(|c| c.id.depth() >= 2));
    }

    #[test]
    fn errors() {
        assert!(matches!(build_partition(&[], 1, 2), Err(PartitionError::NoSamples)));
        let s = vec![sample(0, 0.0, 0.0)];
        assert!(matches!(build_partition(&s, 0, 2), Err(PartitionError::InvalidTau { .. })));
        assert!(matches!(build_partition(&s, 3, 2), Err(PartitionError::InvalidTau { .. })));
        let dup = vec![sample(0, 0.0, 0.0), sample(0, 1.0, 1.0)];
        assert!(matches!(build_partition(&dup, 1, 2), Err(PartitionError::DuplicateId(_))));
        let stacked: Vec<Sample> = (0..5).map(|i| sample(i, 10.0, 10.0)).collect();
        assert!(matches!(build_partition(&stacked, 1, 2), Err(PartitionError::DepthCap { .. })));
        assert!(matches!(build_hierarchy(&s, 1, &[5, 5]), Err(PartitionError::Schedule(_))));
        assert!(matches!(build_hierarchy(&s, 10, &[20, 5]), Err(PartitionError::Schedule(_))));
        assert!(matches!(build_hierarchy(&s, 1, &[]), Err(PartitionError::Schedule(_))));
    }

    fn clustered(n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<(f64, f64)> = (0..20)
            .map(|_| (rng.random_range(-1.0f64..1.0).asin().to_degrees(), rng.random_range(-180.0..180.0)))
            .collect();
        (0..n)
            .map(|i| {
                let (la, lo) = centers[rng.random_range(0..centers.len())];
                let lat = (la + rng.random_range(-3.0..3.0)).clamp(-90.0, 90.0);
                sample(i, lat, lo + rng.random_range(-3.0..3.0))
            })
            .collect()
    }

    #[test]
    fn single_level_hierarchy_links_to_itself() {
        let samples = clustered(2000, 4);
        let h = build_hierarchy(&samples, 5, &[100]).unwrap();
        assert_eq!(h.num_levels(), 1);
        for (c, links) in h.parent_links() {
            assert_eq!(links, vec![c]);
        }
    }

    #[test]
    fn full_scale_schedule_is_accepted() {
        let samples = clustered(3000, 5);
        let h = build_hierarchy(&samples, 50, &[25000, 10000, 5000, 2000, 1000, 750, 500]).unwrap();
        assert_eq!(h.num_levels(), 7);
    }

    #[test]
    fn ancestors_contain_member_sets() {
        let samples = clustered(10_000, 6);
        let h = build_hierarchy(&samples, 5, &[2000, 500, 120, 40]).unwrap();
        for (f, c) in h.finest().cells().iter().enumerate() {
            let fine: HashSet<&String> = c.member_ids.iter().collect();
            for l in 0..h.num_levels() {
                let anc = &h.levels()[l].cells()[h.ancestor_index(f, l)];
                assert!(anc.id.is_prefix_of(&c.id));
                let coarse: HashSet<&String> = anc.member_ids.iter().collect();
                assert!(fine.is_subset(&coarse), "{} not within {}", c.id, anc.id);
                let prefixes = h.levels()[l].cells().iter().filter(|x| x.id.is_prefix_of(&c.id)).count();
                assert_eq!(prefixes, 1);
            }
        }
    }

    #[test]
    fn assign_matches_linear_scan() {
        let samples = clustered(5000, 8);
        let p = build_partition(&samples, 5, 60).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = 0;
        for i in 0..1000 {
            // Half the probes near data, half anywhere.
            let q = if i % 2 == 0 {
                samples[rng.random_range(0..samples.len())].location
            } else {
                GeoPoint::new(rng.random_range(-1.0f64..1.0).asin().to_degrees(), rng.random_range(-180.0..180.0))
                    .unwrap()
            };
            let scan: Vec<CellId> = p.cells().iter().filter(|c| cell_contains(&c.id, q)).map(|c| c.id).collect();
            assert!(scan.len() <= 1);
            assert_eq!(p.assign(q), scan.first().copied());
            hits += usize::from(scan.len() == 1);
        }
        assert!(hits > 400);
        let c = &p.cells()[0];
        assert_eq!(assign(cell_center(&c.id), &p), Some(c.id));
    }

    #[test]
    fn coverage_report_bounds() {
        let samples = clustered(5000, 10);
        let h = build_hierarchy(&samples, 5, &[500, 100, 30]).unwrap();
        let r = coverage_report(&h, &samples);
        for (stats, p) in r.levels.iter().zip(h.levels()) {
            // Recompute counts from raw assignments.
            let mut counts: HashMap<CellId, usize> = HashMap::new();
            for s in &samples {
                if let Some(c) = p.assign(s.location) {
                    *counts.entry(c).or_default() += 1;
                }
            }
            let lo = counts.values().min().copied().unwrap();
            let hi = counts.values().max().copied().unwrap();
            assert_eq!((lo, hi), (stats.min_members, stats.max_members));
            assert!(stats.min_members >= 5 && stats.max_members <= stats.tau_max);
            assert_eq!(stats.cells, counts.len());
        }
        assert_eq!(r.covered_all_levels + r.excluded, samples.len());
        let kept: Vec<Sample> = samples
            .iter()
            .filter(|s| h.assign_all(s.location).is_some())
            .cloned()
            .collect();
        assert_eq!(kept.len(), r.covered_all_levels);
        let r_all = coverage_report(&h, &kept);
        assert_eq!(r_all.coverage_fraction, 1.0);

        let sparse = quadrant_samples(10, 3);
        let empty = build_hierarchy(&sparse, 5, &[8]);
        // Ten samples split once into quadrants of fewer than five: nothing kept.
        let h = empty.unwrap_or_else(|_| build_hierarchy(&sparse, 11, &[11]).unwrap());
        let r = coverage_report(&h, &sparse);
        assert_eq!(r.levels[0].cells, 0);
        assert_eq!(r.coverage_fraction, 0.0);
    }

    #[test]
    fn json_round_trip_and_integrity() {
        let samples = clustered(3000, 12);
        let h = build_hierarchy(&samples, 5, &[400, 100]).unwrap();
        let bytes = hierarchy_to_json(&h, true, None);
        let (back, cfg) = hierarchy_from_json(&bytes, "mem").unwrap();
        assert!(cfg.is_none());
        assert_eq!(back, h);
        assert_eq!(hierarchy_to_json(&back, true, None), bytes);

        let stripped = hierarchy_to_json(&h, false, Some(serde_json::json!({"seed": 1})));
        let (back, cfg) = hierarchy_from_json(&stripped, "mem").unwrap();
        assert_eq!(cfg.unwrap()["seed"], 1);
        assert!(back.finest().cells()[0].member_ids.is_empty());
        assert_eq!(back.finest().cells()[0].decoded_location, h.finest().cells()[0].decoded_location);

        // Corrupt one parent link.
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        let links = v["parent_links"].as_object_mut().unwrap();
        let (k, first) = links.iter().next().map(|(k, v)| (k.clone(), v.clone())).unwrap();
        let mut row = first.as_array().unwrap().clone();
        row[0] = serde_json::Value::String("5/".into());
        links.insert(k, serde_json::Value::Array(row));
        let bad = serde_json::to_vec(&v).unwrap();
        assert!(matches!(hierarchy_from_json(&bad, "mem"), Err(PartitionError::Integrity(_))));
    }

    #[test]
    fn construction_is_deterministic() {
        let mut samples = clustered(4000, 13);
        let a = hierarchy_to_json(&build_hierarchy(&samples, 5, &[300, 60]).unwrap(), true, None);
        samples.reverse();
        let b = hierarchy_to_json(&build_hierarchy(&samples, 5, &[300, 60]).unwrap(), true, None);
        assert_eq!(a, b);
        assert_eq!(sha256_hex(&a), sha256_hex(&b));
    }

    #[test]
    fn decoded_location_is_member_mean() {
        let samples = vec![sample(0, 20.0, 40.0), sample(1, -20.0, 40.0)];
        let p = build_partition(&samples, 1, 5).unwrap();
        let loc = p.cells()[0].decoded_location;
        assert!(loc.lat().abs() < 1e-9 && (loc.lon() - 40.0).abs() < 1e-9);
        let _ = cell_id_at_level(loc, 3).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn points() -> impl Strategy<Value = Vec<(f64, f64)>> {
            // A few tight clumps so splits go several levels deep.
            (
                prop::collection::vec((-80.0f64..80.0, -179.0f64..180.0), 1..4),
                prop::collection::vec((0usize..4, -0.5f64..0.5, -0.5f64..0.5), 20..200),
            )
                .prop_map(|(centers, offs)| {
                    offs.into_iter()
                        .map(|(c, a, b)| {
                            let (la, lo) = centers[c % centers.len()];
                            (la + a, lo + b)
                        })
                        .collect()
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn partition_matches_oracle(pts in points(), tau_min in 1usize..6, extra in 0usize..30) {
                let tau_max = tau_min + extra;
                let samples: Vec<Sample> = pts.iter().enumerate().map(|(i, &(a, b))| sample(i, a, b)).collect();
                let p = build_partition(&samples, tau_min, tau_max).unwrap();
                prop_assert_eq!(cells_of(&p), oracle(&samples, tau_min, tau_max));
                for c in p.cells() {
                    prop_assert!(c.member_count >= tau_min && c.member_count <= tau_max);
                }
                for w in p.cells().windows(2) {
                    prop_assert!(!w[0].id.is_prefix_of(&w[1].id));
                }
                for s in &samples {
                    let n = p.cells().iter().filter(|c| cell_contains(&c.id, s.location)).count();
                    prop_assert!(n <= 1);
                }
            }

            #[test]
            fn hierarchy_nests(pts in points(), tau_min in 1usize..4) {
                let samples: Vec<Sample> = pts.iter().enumerate().map(|(i, &(a, b))| sample(i, a, b)).collect();
                let schedule = [tau_min + 60, tau_min + 20, tau_min + 5];
                let h = build_hierarchy(&samples, tau_min, &schedule).unwrap();
                for (f, c) in h.finest().cells().iter().enumerate() {
                    for l in 0..h.num_levels() {
                        let anc = &h.levels()[l].cells()[h.ancestor_index(f, l)];
                        prop_assert!(anc.id.is_prefix_of(&c.id));
                        prop_assert!(anc.member_count >= c.member_count);
                    }
                }
            }
        }
    }
}
