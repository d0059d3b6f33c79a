//! Spherical coordinates, great-circle distance, the gnomonic cube projection
//! and quadtree cell identifiers.
//!
//! Faces are numbered `0..6` as `+X, +Y, +Z, -X, -Y, -Z`. Each face is the
//! square `[-1, 1]²` in `(u, v)` and is subdivided by repeated midpoint splits.
//! A point is assigned to a cell through integer face coordinates at the
//! maximum depth, so [`cell_id_at_level`] and [`cell_contains`] can never
//! disagree.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Mean Earth radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Deepest supported quadtree level.
pub const MAX_DEPTH: u8 = 30;

const MAX_SIZE: u64 = 1 << MAX_DEPTH;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} is not finite")]
    Longitude(f64),
    #[error("depth {0} exceeds the maximum of {MAX_DEPTH}")]
    Depth(u8),
    #[error("face {0} is not in 0..6")]
    Face(u8),
    #[error("root cell has no parent")]
    RootParent,
    #[error("malformed cell id {0:?}")]
    Parse(String),
    #[error("vector ({0}, {1}, {2}) cannot be normalized")]
    ZeroVector(f64, f64, f64),
}

/// A latitude/longitude pair in degrees.
///
/// Longitude is normalized to `(-180, 180]` on construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !lon.is_finite() {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn to_unit(&self) -> UnitVec3 {
        let (phi, lambda) = (self.lat.to_radians(), self.lon.to_radians());
        UnitVec3 {
            x: phi.cos() * lambda.cos(),
            y: phi.cos() * lambda.sin(),
            z: phi.sin(),
        }
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

fn normalize_lon(lon: f64) -> f64 {
    let mut l = lon % 360.0;
    if l <= -180.0 {
        l += 360.0;
    } else if l > 180.0 {
        l -= 360.0;
    }
    l
}

/// A point on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitVec3 {
    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn normalize(x: f64, y: f64, z: f64) -> Result<Self, GeoError> {
        let n = (x * x + y * y + z * z).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(GeoError::ZeroVector(x, y, z));
        }
        Ok(Self {
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn to_geo(&self) -> GeoPoint {
        let lat = self.z.clamp(-1.0, 1.0).asin().to_degrees();
        let lon = if self.x == 0.0 && self.y == 0.0 {
            0.0
        } else {
            self.y.atan2(self.x).to_degrees()
        };
        GeoPoint::new(lat, lon).expect("unit vector maps to a valid point")
    }

    pub fn dot(&self, other: &UnitVec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }
}

/// Great-circle distance between two points on a sphere of radius
/// [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = p2 - p1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Normalized mean of unit vectors, or `None` when the mean vector is shorter
/// than `1e-6` (antipodal or empty input).
pub fn spherical_mean<I>(points: I) -> Option<GeoPoint>
where
    I: IntoIterator<Item = GeoPoint>,
{
    let (mut sx, mut sy, mut sz, mut n) = (0.0, 0.0, 0.0, 0usize);
    for p in points {
        let u = p.to_unit();
        sx += u.x;
        sy += u.y;
        sz += u.z;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let (mx, my, mz) = (sx / n as f64, sy / n as f64, sz / n as f64);
    if (mx * mx + my * my + mz * mz).sqrt() < 1e-6 {
        return None;
    }
    UnitVec3::normalize(mx, my, mz).ok().map(|u| u.to_geo())
}

/// One of the six cube faces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Face(u8);

impl Face {
    pub const POS_X: Face = Face(0);
    pub const POS_Y: Face = Face(1);
    pub const POS_Z: Face = Face(2);
    pub const NEG_X: Face = Face(3);
    pub const NEG_Y: Face = Face(4);
    pub const NEG_Z: Face = Face(5);

    pub fn new(index: u8) -> Result<Self, GeoError> {
        if index < 6 {
            Ok(Face(index))
        } else {
            Err(GeoError::Face(index))
        }
    }

    pub fn all() -> impl Iterator<Item = Face> {
        (0..6).map(Face)
    }

    pub fn index(self) -> u8 {
        self.0
    }
}

/// Projects a point onto its cube face, returning gnomonic `(u, v)` in `[-1, 1]`.
pub fn to_face_coord(p: GeoPoint) -> (Face, f64, f64) {
    let u = p.to_unit();
    let face = dominant_face(&u);
    let (fu, fv) = xyz_to_face_uv(face, &u);
    (face, fu.clamp(-1.0, 1.0), fv.clamp(-1.0, 1.0))
}

fn dominant_face(p: &UnitVec3) -> Face {
    let comps = [p.x, p.y, p.z];
    let mut best: Option<(f64, u8)> = None;
    for (axis, c) in comps.iter().enumerate() {
        let face = axis as u8 + if *c < 0.0 { 3 } else { 0 };
        let mag = c.abs();
        best = match best {
            None => Some((mag, face)),
            Some((m, f)) if mag > m || (mag == m && face < f) => Some((mag, face)),
            keep => keep,
        };
    }
    Face(best.expect("three components").1)
}

fn xyz_to_face_uv(face: Face, p: &UnitVec3) -> (f64, f64) {
    match face.0 {
        0 => (p.y / p.x, p.z / p.x),
        1 => (-p.x / p.y, p.z / p.y),
        2 => (-p.x / p.z, -p.y / p.z),
        3 => (p.z / p.x, p.y / p.x),
        4 => (p.z / p.y, -p.x / p.y),
        _ => (-p.y / p.z, -p.x / p.z),
    }
}

fn face_uv_to_xyz(face: Face, u: f64, v: f64) -> (f64, f64, f64) {
    match face.0 {
        0 => (1.0, u, v),
        1 => (-u, 1.0, v),
        2 => (-u, -v, 1.0),
        3 => (-1.0, -v, -u),
        4 => (v, -1.0, -u),
        _ => (v, u, -1.0),
    }
}

/// Integer face coordinate at [`MAX_DEPTH`]. Intervals are half-open except
/// the last one on each axis, which also takes `+1`.
fn uv_to_ij(s: f64) -> u64 {
    let t = ((s + 1.0) * 0.5 * MAX_SIZE as f64).floor();
    if t <= 0.0 {
        0
    } else {
        (t as u64).min(MAX_SIZE - 1)
    }
}

/// A cube face plus a quadtree path.
///
/// Path digits are packed two bits each, most significant first. Digit `d`
/// encodes `u` in bit 0 and `v` in bit 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellId {
    face: Face,
    depth: u8,
    path: u64,
}

impl CellId {
    pub fn face_cell(face: Face) -> Self {
        Self {
            face,
            depth: 0,
            path: 0,
        }
    }

    pub fn from_digits(face: Face, digits: &[u8]) -> Result<Self, GeoError> {
        if digits.len() > MAX_DEPTH as usize {
            return Err(GeoError::Depth(digits.len() as u8));
        }
        let mut c = Self::face_cell(face);
        for &d in digits {
            if d > 3 {
                return Err(GeoError::Parse(format!("digit {d}")));
            }
            c = c.child(d);
        }
        Ok(c)
    }

    pub fn face(&self) -> Face {
        self.face
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn digits(&self) -> Vec<u8> {
        (0..self.depth).map(|k| self.digit(k)).collect()
    }

    /// Digit at position `k` (0 = first split below the face).
    pub fn digit(&self, k: u8) -> u8 {
        debug_assert!(k < self.depth);
        ((self.path >> (2 * (self.depth - 1 - k))) & 3) as u8
    }

    /// Child cell by quadrant digit. Panics on digits above 3 or at max depth.
    pub fn child(&self, digit: u8) -> Self {
        assert!(digit < 4 && self.depth < MAX_DEPTH);
        Self {
            face: self.face,
            depth: self.depth + 1,
            path: (self.path << 2) | digit as u64,
        }
    }

    pub fn children(&self) -> [CellId; 4] {
        [self.child(0), self.child(1), self.child(2), self.child(3)]
    }

    pub fn parent(&self) -> Result<Self, GeoError> {
        if self.depth == 0 {
            return Err(GeoError::RootParent);
        }
        Ok(Self {
            face: self.face,
            depth: self.depth - 1,
            path: self.path >> 2,
        })
    }

    /// The ancestor at `depth`, or the cell itself when `depth` equals its own.
    pub fn ancestor_at(&self, depth: u8) -> Option<Self> {
        if depth > self.depth {
            return None;
        }
        Some(Self {
            face: self.face,
            depth,
            path: self.path >> (2 * (self.depth - depth)),
        })
    }

    /// True when `self` is `other` or one of its ancestors.
    pub fn is_prefix_of(&self, other: &CellId) -> bool {
        other.ancestor_at(self.depth) == Some(*self)
    }

    /// Integer `(i, j)` range covered by this cell at [`MAX_DEPTH`].
    fn ij_bounds(&self) -> (u64, u64, u64) {
        let (mut i, mut j) = (0u64, 0u64);
        for k in 0..self.depth {
            let d = self.digit(k) as u64;
            i = (i << 1) | (d & 1);
            j = (j << 1) | (d >> 1);
        }
        let shift = MAX_DEPTH - self.depth;
        (i << shift, j << shift, 1u64 << shift)
    }

    /// `(u_lo, u_hi, v_lo, v_hi)` of the cell on its face.
    pub fn uv_rect(&self) -> (f64, f64, f64, f64) {
        let (i, j, size) = self.ij_bounds();
        let to_uv = |k: u64| 2.0 * k as f64 / MAX_SIZE as f64 - 1.0;
        (to_uv(i), to_uv(i + size), to_uv(j), to_uv(j + size))
    }

    fn sort_key(&self) -> (u8, u64, u8) {
        let aligned = self.path << (2 * (MAX_DEPTH - self.depth) as u32);
        (self.face.0, aligned, self.depth)
    }
}

/// Canonical order: face, then path digits lexicographically, ancestors first.
impl Ord for CellId {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl PartialOrd for CellId {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/", self.face.0)?;
        for k in 0..self.depth {
            write!(f, "{}", self.digit(k))?;
        }
        Ok(())
    }
}

impl FromStr for CellId {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::Parse(s.to_string());
        let (face, path) = s.split_once('/').ok_or_else(bad)?;
        if face.len() != 1 {
            return Err(bad());
        }
        let face: u8 = face.parse().map_err(|_| bad())?;
        let face = Face::new(face).map_err(|_| bad())?;
        let digits = path
            .bytes()
            .map(|b| match b {
                b'0'..=b'3' => Ok(b - b'0'),
                _ => Err(bad()),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if digits.len() > MAX_DEPTH as usize {
            return Err(bad());
        }
        CellId::from_digits(face, &digits)
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The depth-[`MAX_DEPTH`] leaf cell containing `p`.
pub fn leaf_cell(p: GeoPoint) -> CellId {
    let (face, u, v) = to_face_coord(p);
    let (i, j) = (uv_to_ij(u), uv_to_ij(v));
    let mut path = 0u64;
    for k in (0..MAX_DEPTH).rev() {
        let d = ((i >> k) & 1) | (((j >> k) & 1) << 1);
        path = (path << 2) | d;
    }
    CellId {
        face,
        depth: MAX_DEPTH,
        path,
    }
}

/// The unique cell at `depth` containing `p`.
pub fn cell_id_at_level(p: GeoPoint, depth: u8) -> Result<CellId, GeoError> {
    if depth > MAX_DEPTH {
        return Err(GeoError::Depth(depth));
    }
    Ok(leaf_cell(p)
        .ancestor_at(depth)
        .expect("depth within leaf depth"))
}

pub fn cell_contains(c: &CellId, p: GeoPoint) -> bool {
    c.is_prefix_of(&leaf_cell(p))
}

/// The point at the middle of the cell's `(u, v)` rectangle.
pub fn cell_center(c: &CellId) -> GeoPoint {
    let (u0, u1, v0, v1) = c.uv_rect();
    let (x, y, z) = face_uv_to_xyz(c.face, 0.5 * (u0 + u1), 0.5 * (v0 + v1));
    UnitVec3::normalize(x, y, z)
        .expect("cube surface point is nonzero")
        .to_geo()
}

pub fn parent(c: &CellId) -> Result<CellId, GeoError> {
    c.parent()
}
