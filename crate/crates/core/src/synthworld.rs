//! Deterministic synthetic geotagged "images" and the kNN baseline.
//!
//! Locations are drawn from clusters whose sizes follow a power law.
//! An image feature is a fixed random linear map of a smooth multi-scale
//! encoding of the location, plus isotropic Gaussian noise. Every sample is
//! generated from its own RNG stream keyed by (seed, id), so generation is
//! independent of order and thread count.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gallery::Gallery;
use crate::geocell::{LatLon, EARTH_RADIUS_KM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_samples: usize,
    pub n_clusters: usize,
    /// Cluster k (0-based) receives mass proportional to (k + 1)^-exponent.
    pub power_law_exponent: f64,
    /// Standard deviation of sample offsets around a cluster centre.
    pub cluster_spread_km: f64,
    pub feature_dim: usize,
    /// Standard deviation of the per-dimension feature noise.
    pub noise_sigma: f64,
    /// Angular frequency scales (1/radian) of the smooth location encoding.
    pub encoding_scales: Vec<f64>,
    pub encoding_features_per_scale: usize,
    /// One in `test_every` samples (by id hash) goes to the test split.
    pub test_every: u64,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            n_clusters: 400,
            power_law_exponent: 1.0,
            cluster_spread_km: 15.0,
            feature_dim: 64,
            noise_sigma: 0.08,
            encoding_scales: vec![3.0, 30.0, 300.0],
            encoding_features_per_scale: 64,
            test_every: 10,
            seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_clusters == 0 || self.feature_dim == 0 || self.encoding_features_per_scale == 0
        {
            return Err(Error::invalid("world counts must be at least 1"));
        }
        if self.noise_sigma < 0.0 || self.cluster_spread_km < 0.0 || self.test_every < 2 {
            return Err(Error::invalid("noise and spread must be non-negative; test_every >= 2"));
        }
        if self.encoding_scales.is_empty() {
            return Err(Error::invalid("at least one encoding scale is required"));
        }
        Ok(())
    }

    /// Normalized cluster probabilities.
    pub fn cluster_weights(&self) -> Vec<f64> {
        let w: Vec<f64> = (0..self.n_clusters)
            .map(|k| ((k + 1) as f64).powf(-self.power_law_exponent))
            .collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|x| x / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSample {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub text: String,
    pub feat: Vec<f32>,
}

impl SynthSample {
    pub fn location(&self) -> LatLon {
        LatLon::new(self.lat, self.lon).expect("sample coordinates are valid")
    }
}

/// The frozen random quantities shared by all samples of a world.
pub struct World {
    pub cfg: WorldConfig,
    centers: Vec<LatLon>,
    cluster_names: Vec<String>,
    cumulative: Vec<f64>,
    /// (scales * features) x 3 frequencies and phases of the location code
    freqs: Vec<[f64; 3]>,
    phases: Vec<f64>,
    /// feature_dim x code_dim mixing matrix
    mixing: Vec<f64>,
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ra", "ven", "sta", "dor", "eli", "nu", "tar", "ber", "gos", "ia", "mon", "sel", "ur",
];

fn name_from(mut h: u64, parts: usize) -> String {
    let mut s = String::new();
    for _ in 0..parts {
        s.push_str(SYLLABLES[(h % 16) as usize]);
        h /= 16;
    }
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => s,
    }
}

/// SplitMix64 finalizer; used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, u64::MAX));
        let centers = (0..cfg.n_clusters)
            .map(|_| {
                let z: f64 = rng.random_range(-0.95..0.95);
                let lon: f64 = rng.random_range(-180.0..180.0);
                LatLon::new(z.asin().to_degrees(), lon).unwrap()
            })
            .collect();
        let cluster_names = (0..cfg.n_clusters)
            .map(|k| name_from(stream_seed(cfg.seed, k as u64), 3))
            .collect();
        let mut cumulative = Vec::with_capacity(cfg.n_clusters);
        let mut acc = 0.0;
        for w in cfg.cluster_weights() {
            acc += w;
            cumulative.push(acc);
        }
        let mut freqs = Vec::new();
        let mut phases = Vec::new();
        for &scale in &cfg.encoding_scales {
            let normal = Normal::new(0.0, scale).map_err(|e| Error::invalid(e.to_string()))?;
            for _ in 0..cfg.encoding_features_per_scale {
                freqs.push([
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                    normal.sample(&mut rng),
                ]);
                phases.push(rng.random_range(0.0..std::f64::consts::TAU));
            }
        }
        let code_dim = phases.len();
        let inv = 1.0 / (code_dim as f64 / 2.0).sqrt();
        let mixing = (0..cfg.feature_dim * code_dim)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                g * inv
            })
            .collect();
        Ok(Self {
            cfg,
            centers,
            cluster_names,
            cumulative,
            freqs,
            phases,
            mixing,
        })
    }

    pub fn cluster_center(&self, k: usize) -> LatLon {
        self.centers[k]
    }

    /// Noise-free feature of a location.
    pub fn clean_feature(&self, p: LatLon) -> Vec<f64> {
        let xyz = p.to_xyz();
        let code: Vec<f64> = self
            .freqs
            .iter()
            .zip(&self.phases)
            .map(|(w, b)| (w[0] * xyz[0] + w[1] * xyz[1] + w[2] * xyz[2] + b).cos())
            .collect();
        let cd = code.len();
        (0..self.cfg.feature_dim)
            .map(|r| {
                self.mixing[r * cd..(r + 1) * cd]
                    .iter()
                    .zip(&code)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect()
    }

    fn region_name(&self, p: LatLon) -> String {
        // Coarse region: 30-degree latitude band and 45-degree longitude sector.
        let band = ((p.lat() + 90.0) / 30.0).floor() as u64;
        let sector = ((p.lon() + 180.0) / 45.0).floor() as u64;
        name_from(stream_seed(self.cfg.seed ^ 0x7265_6769_6f6e, band * 16 + sector), 2)
    }

    pub fn cluster_of(&self, id: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, id));
        let u: f64 = rng.random();
        self.cumulative.partition_point(|&c| c < u).min(self.cfg.n_clusters - 1)
    }

    pub fn sample(&self, id: u64) -> SynthSample {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.cfg.seed, id));
        let u: f64 = rng.random();
        let k = self.cumulative.partition_point(|&c| c < u).min(self.cfg.n_clusters - 1);
        let north: f64 = StandardNormal.sample(&mut rng);
        let east: f64 = StandardNormal.sample(&mut rng);
        let loc = offset_km(
            self.centers[k],
            north * self.cfg.cluster_spread_km,
            east * self.cfg.cluster_spread_km,
        );
        let clean = self.clean_feature(loc);
        let feat = clean
            .iter()
            .map(|&c| {
                let n: f64 = StandardNormal.sample(&mut rng);
                (c + self.cfg.noise_sigma * n) as f32
            })
            .collect();
        SynthSample {
            id,
            lat: loc.lat(),
            lon: loc.lon(),
            text: format!("{}, {}", self.cluster_names[k], self.region_name(loc)),
            feat,
        }
    }

    pub fn is_test(&self, id: u64) -> bool {
        mix64(id ^ mix64(self.cfg.seed.wrapping_add(0x73706c6974))).is_multiple_of(self.cfg.test_every)
    }
}

/// Moves `p` by local north/east offsets (small-offset approximation).
pub fn offset_km(p: LatLon, north_km: f64, east_km: f64) -> LatLon {
    let dlat = (north_km / EARTH_RADIUS_KM).to_degrees();
    let lat = (p.lat() + dlat).clamp(-89.9, 89.9);
    let coslat = lat.to_radians().cos().max(1e-6);
    let dlon = (east_km / (EARTH_RADIUS_KM * coslat)).to_degrees();
    LatLon::new(lat, p.lon() + dlon).expect("clamped latitude")
}

/// Train and test splits of a synthetic world.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<SynthSample>,
    pub test: Vec<SynthSample>,
}

pub fn generate(cfg: &WorldConfig) -> Result<Splits> {
    let world = World::new(cfg.clone())?;
    let samples: Vec<SynthSample> = (0..cfg.n_samples as u64)
        .into_par_iter()
        .map(|id| world.sample(id))
        .collect();
    let (test, train) = samples.into_iter().partition(|s| world.is_test(s.id));
    Ok(Splits { train, test })
}

/// Spherical centroid of the top-`k` retrieved gallery locations.
///
/// With `gaussian_sigma`, neighbour `j` is weighted by
/// `exp(-d_j^2 / (2 sigma^2))` where `d_j = sqrt(2 - 2 cos_j)` is the
/// embedding distance; otherwise all weights are equal.
pub fn knn_baseline(gallery: &Gallery, query: &[f32], k: usize, gaussian_sigma: Option<f64>) -> Result<LatLon> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let (res, rows) = gallery.top_m_rows(query, k, None)?;
    let weights: Vec<f64> = res
        .neighbors
        .iter()
        .map(|&(_, sim)| match gaussian_sigma {
            Some(sigma) => {
                let d2 = (2.0 - 2.0 * sim as f64).max(0.0);
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
            None => 1.0,
        })
        .collect();
    let locs: Vec<LatLon> = rows.iter().map(|&r| gallery.location(r)).collect();
    Ok(spherical_mean(&locs, &weights))
}

/// Weighted mean of unit vectors, renormalized. A degenerate (zero) mean
/// falls back to the first point.
pub fn spherical_mean(points: &[LatLon], weights: &[f64]) -> LatLon {
    if points.len() == 1 {
        return points[0];
    }
    let mut acc = [0.0; 3];
    for (p, &w) in points.iter().zip(weights) {
        let v = p.to_xyz();
        for i in 0..3 {
            acc[i] += w * v[i];
        }
    }
    let n = (acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]).sqrt();
    if n < 1e-12 {
        return points[0];
    }
    LatLon::from_xyz(acc)
}

pub fn write_jsonl<W: Write>(samples: &[SynthSample], mut w: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `{id, lat, lon, text, feat}` records; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<SynthSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SynthSample =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("dataset line {}: {e}", i + 1)))?;
        LatLon::new(s.lat, s.lon).map_err(|e| Error::data(format!("dataset line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_jsonl(samples: &[SynthSample], path: &Path) -> Result<()> {
    write_jsonl(samples, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SynthSample>> {
    let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_jsonl(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::GalleryEntry;
    use crate::geodesy::haversine_km;

    fn small() -> WorldConfig {
        WorldConfig {
            n_samples: 500,
            n_clusters: 20,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 500);
        let test_ids: std::collections::HashSet<u64> = a.test.iter().map(|s| s.id).collect();
        assert!(a.train.iter().all(|s| !test_ids.contains(&s.id)));
        let frac = a.test.len() as f64 / 500.0;
        assert!((0.05..0.15).contains(&frac), "test fraction {frac}");
    }

    #[test]
    fn noise_free_features_depend_only_on_location() {
        let cfg = WorldConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let w = World::new(cfg).unwrap();
        let s = w.sample(3);
        let again = w.clean_feature(s.location());
        let f: Vec<f32> = again.iter().map(|&x| x as f32).collect();
        assert_eq!(f, s.feat);
    }

    #[test]
    fn samples_near_their_cluster() {
        let w = World::new(small()).unwrap();
        for id in 0..100 {
            let s = w.sample(id);
            let c = w.cluster_center(w.cluster_of(id));
            assert!(haversine_km(s.location(), c) < 15.0 * 6.0);
            assert!(s.text.contains(", "));
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let s = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&s.test, &mut buf).unwrap();
        let back = read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, s.test);
        assert!(read_jsonl(&b"{\"id\":1}\n"[..]).is_err());
    }

    #[test]
    fn spherical_mean_on_equator() {
        let pts: Vec<LatLon> = [0.0, 10.0, 20.0]
            .iter()
            .map(|&l| LatLon::new(0.0, l).unwrap())
            .collect();
        let m = spherical_mean(&pts, &[1.0; 3]);
        assert!(m.lat().abs() < 1e-12);
        assert!((m.lon() - 10.0).abs() < 1e-12);
        // Across the dateline the mean stays on the dateline side.
        let pts: Vec<LatLon> = [170.0, -170.0].iter().map(|&l| LatLon::new(0.0, l).unwrap()).collect();
        let m = spherical_mean(&pts, &[1.0; 2]);
        assert!((m.lon().abs() - 180.0).abs() < 1e-9);
    }

    #[test]
    fn knn_k1_is_rank1_location() {
        let loc = |lat, lon| LatLon::new(lat, lon).unwrap();
        let entries = vec![
            GalleryEntry::new(0, vec![1.0, 0.0, 0.0], loc(10.0, 10.0), 21).unwrap(),
            GalleryEntry::new(1, vec![0.9, 0.1, 0.0], loc(10.0, 10.0), 21).unwrap(),
            GalleryEntry::new(2, vec![0.0, 1.0, 0.0], loc(-30.0, 50.0), 21).unwrap(),
        ];
        let g = Gallery::build(entries).unwrap();
        assert_eq!(knn_baseline(&g, &[0.0, 1.0, 0.1], 1, None).unwrap(), loc(-30.0, 50.0));
        let both = knn_baseline(&g, &[1.0, 0.05, 0.0], 2, None).unwrap();
        assert!(haversine_km(both, loc(10.0, 10.0)) < 1e-6);
        assert!(knn_baseline(&g, &[1.0, 0.0, 0.0], 0, None).is_err());
        let weighted = knn_baseline(&g, &[1.0, 0.0, 0.0], 3, Some(0.2)).unwrap();
        assert!(
            haversine_km(weighted, loc(10.0, 10.0))
                < haversine_km(knn_baseline(&g, &[1.0, 0.0, 0.0], 3, None).unwrap(), loc(10.0, 10.0))
        );
    }
}
