//! Hierarchical S2 tokenization.
//!
//! A location is represented as a coarse-to-fine token sequence: the cube
//! face (0..=5) followed by one Hilbert-curve child index (0..=3) per level.
//! The sequence is exactly the 2-bit groups of the canonical S2 cell id, so
//! a shared prefix of length `l` means both points lie in the same cell at
//! level `l - 1`.
//!
//! The projection is the quadratic ST<->UV transform used by the reference
//! S2 library, which keeps cell ids bit-compatible with it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deepest S2 subdivision level.
pub const MAX_LEVEL: u8 = 30;
/// Default token count: face token plus 20 quad tokens.
pub const DEFAULT_LEVELS: usize = 21;
/// Number of distinct face tokens.
pub const NUM_FACES: u8 = 6;

const POS_BITS: u32 = 2 * MAX_LEVEL as u32 + 1;
const MAX_SIZE: u32 = 1 << MAX_LEVEL;

const SWAP_MASK: u8 = 0x01;
const INVERT_MASK: u8 = 0x02;

// Hilbert curve tables indexed by [orientation][ij] and [orientation][pos].
const IJ_TO_POS: [[u8; 4]; 4] = [[0, 1, 3, 2], [0, 3, 1, 2], [2, 3, 1, 0], [2, 1, 3, 0]];
const POS_TO_IJ: [[u8; 4]; 4] = [[0, 1, 3, 2], [0, 2, 3, 1], [3, 2, 0, 1], [3, 1, 0, 2]];
const POS_TO_ORIENTATION: [u8; 4] = [SWAP_MASK, 0, 0, INVERT_MASK | SWAP_MASK];

/// Maximum cell diagonal on the unit sphere at level 0 for the quadratic
/// projection; scales as 2^-level.
const MAX_DIAG_DERIV: f64 = 2.438_654_594_434_021;
/// Maximum cell edge on the unit sphere at level 0 for the quadratic projection.
const MAX_EDGE_DERIV: f64 = 1.704_897_179_199_218_5;

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Geodetic coordinate in degrees.
///
/// Latitude lies in `[-90, 90]`; longitude is wrapped into `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    lat_deg: f64,
    lon_deg: f64,
}

impl LatLon {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() {
            return Err(Error::invalid(format!("non-finite coordinate ({lat_deg}, {lon_deg})")));
        }
        if !(-90.0..=90.0).contains(&lat_deg) {
            return Err(Error::invalid(format!("latitude {lat_deg} outside [-90, 90]")));
        }
        Ok(Self {
            lat_deg,
            lon_deg: wrap_longitude(lon_deg),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat_deg
    }

    pub fn lon(&self) -> f64 {
        self.lon_deg
    }

    /// Unit vector on the sphere.
    pub fn to_xyz(&self) -> [f64; 3] {
        let lat = self.lat_deg.to_radians();
        let lon = self.lon_deg.to_radians();
        let c = lat.cos();
        [c * lon.cos(), c * lon.sin(), lat.sin()]
    }

    /// Inverse of [`LatLon::to_xyz`]; the input need not be normalized.
    pub fn from_xyz(p: [f64; 3]) -> Self {
        let lat = p[2].atan2((p[0] * p[0] + p[1] * p[1]).sqrt()).to_degrees();
        let lon = p[1].atan2(p[0]).to_degrees();
        Self {
            lat_deg: lat.clamp(-90.0, 90.0),
            lon_deg: wrap_longitude(lon),
        }
    }
}

fn wrap_longitude(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let wrapped = (lon + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360.
    if wrapped >= 180.0 {
        wrapped - 360.0
    } else {
        wrapped
    }
}

/// Canonical 64-bit S2 cell identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(u64);

impl CellId {
    pub fn from_raw(id: u64) -> Self {
        Self(id)
    }

    pub fn raw(&self) -> u64 {
        self.0
    }

    /// Leaf (level 30) cell containing `p`.
    pub fn leaf_from_latlon(p: LatLon) -> Self {
        let xyz = p.to_xyz();
        let (face, u, v) = xyz_to_face_uv(xyz);
        let i = st_to_ij(uv_to_st(u));
        let j = st_to_ij(uv_to_st(v));
        Self::from_face_ij(face, i, j)
    }

    /// Cell at `level` containing `p`.
    pub fn from_latlon(p: LatLon, level: u8) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::invalid(format!("level {level} exceeds {MAX_LEVEL}")));
        }
        Ok(Self::leaf_from_latlon(p).parent(level))
    }

    fn from_face_ij(face: u8, i: u32, j: u32) -> Self {
        let mut orientation = face & SWAP_MASK;
        let mut pos: u64 = 0;
        for k in (0..MAX_LEVEL as u32).rev() {
            let ij = (((i >> k) & 1) << 1 | ((j >> k) & 1)) as usize;
            let child = IJ_TO_POS[orientation as usize][ij];
            pos = (pos << 2) | child as u64;
            orientation ^= POS_TO_ORIENTATION[child as usize];
        }
        Self(((face as u64) << POS_BITS) | (pos << 1) | 1)
    }

    pub fn face(&self) -> u8 {
        (self.0 >> POS_BITS) as u8
    }

    fn lsb(&self) -> u64 {
        self.0 & self.0.wrapping_neg()
    }

    pub fn level(&self) -> u8 {
        MAX_LEVEL - (self.lsb().trailing_zeros() / 2) as u8
    }

    fn lsb_for_level(level: u8) -> u64 {
        1u64 << (2 * (MAX_LEVEL - level) as u32)
    }

    /// Ancestor at `level`; `level` must not exceed the current level.
    pub fn parent(&self, level: u8) -> Self {
        let lsb = Self::lsb_for_level(level);
        Self((self.0 & lsb.wrapping_neg()) | lsb)
    }

    /// Child position (0..=3) of this cell's ancestor at `level` within its parent.
    pub fn child_position(&self, level: u8) -> u8 {
        debug_assert!(level >= 1 && level <= self.level());
        ((self.0 >> (2 * (MAX_LEVEL - level) as u32 + 1)) & 3) as u8
    }

    pub fn range_min(&self) -> u64 {
        self.0 - (self.lsb() - 1)
    }

    pub fn range_max(&self) -> u64 {
        self.0 + (self.lsb() - 1)
    }

    /// True when `other` is this cell or one of its descendants.
    pub fn contains(&self, other: CellId) -> bool {
        other.0 >= self.range_min() && other.0 <= self.range_max()
    }

    /// Token sequence of `level + 1` tokens for this cell.
    pub fn to_tokens(&self) -> TokenSequence {
        let level = self.level();
        let mut tokens = Vec::with_capacity(level as usize + 1);
        tokens.push(self.face());
        for l in 1..=level {
            tokens.push(self.child_position(l));
        }
        TokenSequence { tokens }
    }

    /// Centre of the cell on the unit sphere.
    pub fn center(&self) -> LatLon {
        let level = self.level();
        let face = self.face();
        let mut orientation = face & SWAP_MASK;
        let (mut i, mut j) = (0u64, 0u64);
        for l in 1..=level {
            let pos = self.child_position(l);
            let ij = POS_TO_IJ[orientation as usize][pos as usize];
            i = (i << 1) | (ij >> 1) as u64;
            j = (j << 1) | (ij & 1) as u64;
            orientation ^= POS_TO_ORIENTATION[pos as usize];
        }
        let cells = (1u64 << level) as f64;
        let s = (i as f64 + 0.5) / cells;
        let t = (j as f64 + 0.5) / cells;
        LatLon::from_xyz(face_uv_to_xyz(face, st_to_uv(s), st_to_uv(t)))
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// Face of the cube containing `p`: largest-magnitude component, later axes
/// winning exact ties, negative axes mapped to faces 3..=5.
fn xyz_face(p: [f64; 3]) -> u8 {
    let a = [p[0].abs(), p[1].abs(), p[2].abs()];
    let axis = if a[0] > a[1] {
        if a[0] > a[2] {
            0
        } else {
            2
        }
    } else if a[1] > a[2] {
        1
    } else {
        2
    };
    if p[axis] < 0.0 {
        axis as u8 + 3
    } else {
        axis as u8
    }
}

fn xyz_to_face_uv(p: [f64; 3]) -> (u8, f64, f64) {
    let face = xyz_face(p);
    let (x, y, z) = (p[0], p[1], p[2]);
    let (u, v) = match face {
        0 => (y / x, z / x),
        1 => (-x / y, z / y),
        2 => (-x / z, -y / z),
        3 => (z / x, y / x),
        4 => (z / y, -x / y),
        _ => (-y / z, -x / z),
    };
    (face, u, v)
}

fn face_uv_to_xyz(face: u8, u: f64, v: f64) -> [f64; 3] {
    match face {
        0 => [1.0, u, v],
        1 => [-u, 1.0, v],
        2 => [-u, -v, 1.0],
        3 => [-1.0, -v, -u],
        4 => [v, -1.0, -u],
        _ => [v, u, -1.0],
    }
}

fn uv_to_st(u: f64) -> f64 {
    if u >= 0.0 {
        0.5 * (1.0 + 3.0 * u).sqrt()
    } else {
        1.0 - 0.5 * (1.0 - 3.0 * u).sqrt()
    }
}

fn st_to_uv(s: f64) -> f64 {
    if s >= 0.5 {
        (1.0 / 3.0) * (4.0 * s * s - 1.0)
    } else {
        (1.0 / 3.0) * (1.0 - 4.0 * (1.0 - s) * (1.0 - s))
    }
}

fn st_to_ij(s: f64) -> u32 {
    let v = (MAX_SIZE as f64 * s).floor();
    v.clamp(0.0, (MAX_SIZE - 1) as f64) as u32
}

/// Coarse-to-fine token representation of an S2 cell.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence {
    tokens: Vec<u8>,
}

impl TokenSequence {
    /// Validates token ranges: face token in 0..=5, quad tokens in 0..=3.
    pub fn new(tokens: Vec<u8>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > MAX_LEVEL as usize + 1 {
            return Err(Error::invalid(format!(
                "token sequence length {} outside 1..={}",
                tokens.len(),
                MAX_LEVEL + 1
            )));
        }
        if tokens[0] >= NUM_FACES {
            return Err(Error::invalid(format!("face token {} outside 0..=5", tokens[0])));
        }
        if let Some((i, t)) = tokens.iter().enumerate().skip(1).find(|(_, &t)| t > 3) {
            return Err(Error::invalid(format!("quad token {t} at position {i} outside 0..=3")));
        }
        Ok(Self { tokens })
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Cell identified by the full sequence (level = len - 1).
    pub fn cell_id(&self) -> CellId {
        let level = (self.tokens.len() - 1) as u32;
        let mut pos: u64 = 0;
        for &t in &self.tokens[1..] {
            pos = (pos << 2) | t as u64;
        }
        let shift = 2 * (MAX_LEVEL as u32 - level);
        let lsb = 1u64 << shift;
        CellId(((self.tokens[0] as u64) << POS_BITS) | (pos << (shift + 1)) | lsb)
    }

    /// Truncated copy with the first `len` tokens.
    pub fn prefix(&self, len: usize) -> Result<TokenSequence> {
        if len == 0 || len > self.tokens.len() {
            return Err(Error::invalid(format!(
                "prefix length {len} outside 1..={}",
                self.tokens.len()
            )));
        }
        Ok(Self {
            tokens: self.tokens[..len].to_vec(),
        })
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Parses the bare digit form ("2013..."); dots between levels are accepted.
impl FromStr for TokenSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = s
            .trim()
            .chars()
            .filter(|&c| c != '.')
            .map(|c| {
                c.to_digit(10)
                    .map(|d| d as u8)
                    .ok_or_else(|| Error::invalid(format!("non-digit '{c}' in token string")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(tokens)
    }
}

impl Serialize for TokenSequence {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TokenSequence {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Token sequence of `levels` tokens for the cell containing `p`.
pub fn tokenize(p: LatLon, levels: usize) -> Result<TokenSequence> {
    if !(1..=MAX_LEVEL as usize + 1).contains(&levels) {
        return Err(Error::invalid(format!("levels {levels} outside 1..=31")));
    }
    let leaf = CellId::leaf_from_latlon(p);
    Ok(leaf.parent((levels - 1) as u8).to_tokens())
}

/// Centre of the cell identified by the full sequence.
pub fn detokenize(t: &TokenSequence) -> LatLon {
    t.cell_id().center()
}

/// Parses and decodes an unchecked raw token slice.
pub fn detokenize_raw(tokens: &[u8]) -> Result<LatLon> {
    Ok(detokenize(&TokenSequence::new(tokens.to_vec())?))
}

/// Length of the longest common prefix of two equal-length sequences.
pub fn common_prefix_len(a: &TokenSequence, b: &TokenSequence) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "sequence lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(prefix_len(a.as_slice(), b.as_slice()))
}

pub(crate) fn prefix_len(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Upper bound on the geodesic diameter of any cell at `level`, in km.
///
/// Uses the maximum diagonal and edge metrics of the quadratic projection,
/// both of which scale as 2^-level.
pub fn cell_diagonal_km(level: u8) -> f64 {
    let deriv = MAX_DIAG_DERIV.max(MAX_EDGE_DERIV);
    deriv / (1u64 << level.min(MAX_LEVEL)) as f64 * EARTH_RADIUS_KM
}
