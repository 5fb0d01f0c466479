//! Exact top-M cosine retrieval over the training gallery.
//!
//! Embeddings are L2-normalized at build time and stored contiguously, so a
//! query is a single linear scan of dot products. Results are ordered by
//! similarity descending, ties by ascending entry id.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geocell::{tokenize, LatLon, TokenSequence};

pub const GALLERY_MAGIC: &[u8; 4] = b"GTGL";
pub const GALLERY_VERSION: u32 = 1;
pub const DEFAULT_M: usize = 15;

/// Rows scanned per parallel task.
const SCAN_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub id: u64,
    pub embedding: Vec<f32>,
    pub tokens: TokenSequence,
    pub location: LatLon,
}

impl GalleryEntry {
    /// Entry whose tokens are derived from `location`.
    pub fn new(id: u64, embedding: Vec<f32>, location: LatLon, levels: usize) -> Result<Self> {
        Ok(Self {
            id,
            embedding,
            tokens: tokenize(location, levels)?,
            location,
        })
    }
}

/// (entry id, cosine similarity), best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub neighbors: Vec<(u64, f32)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    dim: usize,
    levels: usize,
    ids: Vec<u64>,
    /// n x dim, unit rows
    vectors: Vec<f32>,
    tokens: Vec<TokenSequence>,
    locations: Vec<LatLon>,
    row_index: HashMap<u64, usize>,
}

#[derive(Clone, Copy)]
struct Hit {
    sim: f64,
    id: u64,
    row: usize,
}

impl Hit {
    /// Greater means better: higher similarity, then smaller id.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialEq for Hit {
    fn eq(&self, other: &Self) -> bool {
        self.rank_cmp(other) == Ordering::Equal
    }
}
impl Eq for Hit {}
impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
// Reversed so BinaryHeap is a min-heap of the current top-m.
impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        other.rank_cmp(self)
    }
}

type RowsResult = (RetrievalResult, Vec<usize>);

/// f32 under `total_cmp`, usable as a heap key.
#[derive(Clone, Copy)]
struct OrdF32(f32);
impl PartialEq for OrdF32 {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OrdF32 {}
impl PartialOrd for OrdF32 {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF32 {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Dot product with f64 accumulation over four lanes.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] as f64 * b[4 * i + l] as f64;
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

fn normalize(v: &[f32]) -> Option<Vec<f32>> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

impl Gallery {
    pub fn build(entries: Vec<GalleryEntry>) -> Result<Self> {
        let first = entries
            .first()
            .ok_or_else(|| Error::invalid("cannot build an empty gallery"))?;
        let dim = first.embedding.len();
        let levels = first.tokens.len();
        if dim == 0 {
            return Err(Error::invalid("gallery embeddings must be non-empty"));
        }
        let mut g = Gallery {
            dim,
            levels,
            ids: Vec::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len() * dim),
            tokens: Vec::with_capacity(entries.len()),
            locations: Vec::with_capacity(entries.len()),
            row_index: HashMap::with_capacity(entries.len()),
        };
        for e in entries {
            if e.embedding.len() != dim {
                return Err(Error::invalid(format!(
                    "entry {} has dim {} (expected {dim})",
                    e.id,
                    e.embedding.len()
                )));
            }
            if e.tokens.len() != levels {
                return Err(Error::invalid(format!("entry {} has {} tokens", e.id, e.tokens.len())));
            }
            if tokenize(e.location, levels)? != e.tokens {
                return Err(Error::invalid(format!(
                    "entry {} tokens do not match its location",
                    e.id
                )));
            }
            if g.row_index.insert(e.id, g.ids.len()).is_some() {
                return Err(Error::invalid(format!("duplicate entry id {}", e.id)));
            }
            let unit = normalize(&e.embedding)
                .ok_or_else(|| Error::invalid(format!("entry {} has a zero or non-finite embedding", e.id)))?;
            g.ids.push(e.id);
            g.vectors.extend_from_slice(&unit);
            g.tokens.push(e.tokens);
            g.locations.push(e.location);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn row_of(&self, id: u64) -> Option<usize> {
        self.row_index.get(&id).copied()
    }

    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    /// Unit-normalized embedding of a row.
    pub fn embedding(&self, row: usize) -> &[f32] {
        &self.vectors[row * self.dim..(row + 1) * self.dim]
    }

    pub fn tokens(&self, row: usize) -> &TokenSequence {
        &self.tokens[row]
    }

    pub fn location(&self, row: usize) -> LatLon {
        self.locations[row]
    }

    /// Row indices for a retrieval result.
    pub fn rows_for(&self, r: &RetrievalResult) -> Vec<usize> {
        r.neighbors
            .iter()
            .map(|(id, _)| self.row_of(*id).expect("result id belongs to gallery"))
            .collect()
    }

    fn scan(&self, q: &[f32], m: usize, exclude: Option<&HashSet<u64>>, rows: std::ops::Range<usize>) -> Vec<Hit> {
        let mut heap: BinaryHeap<Hit> = BinaryHeap::with_capacity(m + 1);
        for row in rows {
            let id = self.ids[row];
            if exclude.is_some_and(|ex| ex.contains(&id)) {
                continue;
            }
            let hit = Hit {
                sim: dot(q, self.embedding(row)),
                id,
                row,
            };
            if heap.len() < m {
                heap.push(hit);
            } else if let Some(worst) = heap.peek() {
                if hit.rank_cmp(worst) == Ordering::Greater {
                    heap.pop();
                    heap.push(hit);
                }
            }
        }
        heap.into_vec()
    }

    fn finish(mut hits: Vec<Hit>, m: usize) -> Vec<Hit> {
        hits.sort_by(|a, b| b.rank_cmp(a));
        hits.truncate(m);
        hits
    }

    fn prepare(&self, query: &[f32], m: usize, exclude: Option<&HashSet<u64>>) -> Result<Vec<f32>> {
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query dim {} != gallery dim {}",
                query.len(),
                self.dim
            )));
        }
        if m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        let excluded = exclude.map_or(0, |ex| ex.iter().filter(|id| self.row_index.contains_key(id)).count());
        if m > self.len() - excluded {
            return Err(Error::invalid(format!(
                "m = {m} exceeds the {} available entries",
                self.len() - excluded
            )));
        }
        normalize(query).ok_or_else(|| Error::invalid("query embedding has zero norm"))
    }

    /// Exact top-`m` by cosine similarity, single-threaded scan.
    pub fn top_m_sequential(&self, query: &[f32], m: usize, exclude: Option<&HashSet<u64>>) -> Result<RetrievalResult> {
        let q = self.prepare(query, m, exclude)?;
        let hits = Self::finish(self.scan(&q, m, exclude, 0..self.len()), m);
        Ok(to_result(&hits))
    }

    /// Exact top-`m` by cosine similarity, scanning contiguous chunks in
    /// parallel. Identical to [`Gallery::top_m_sequential`].
    pub fn top_m(&self, query: &[f32], m: usize, exclude: Option<&HashSet<u64>>) -> Result<RetrievalResult> {
        let q = self.prepare(query, m, exclude)?;
        let n = self.len();
        let partial: Vec<Hit> = (0..n.div_ceil(SCAN_CHUNK))
            .into_par_iter()
            .flat_map_iter(|c| {
                let start = c * SCAN_CHUNK;
                self.scan(&q, m, exclude, start..(start + SCAN_CHUNK).min(n))
            })
            .collect();
        Ok(to_result(&Self::finish(partial, m)))
    }

    /// Retrieval row indices as well as the public result.
    pub fn top_m_rows(
        &self,
        query: &[f32],
        m: usize,
        exclude: Option<&HashSet<u64>>,
    ) -> Result<(RetrievalResult, Vec<usize>)> {
        let q = self.prepare(query, m, exclude)?;
        let hits = Self::finish(self.scan(&q, m, exclude, 0..self.len()), m);
        Ok((to_result(&hits), hits.iter().map(|h| h.row).collect()))
    }

    /// Top-`m` for many queries at once; `exclude[i]` optionally removes
    /// one id (the query's own) from query `i`'s candidates.
    ///
    /// Similarities are first computed in blocks with an f32 matrix
    /// product. Every row whose approximate score is within twice the
    /// worst-case rounding error of the m-th best is then rescored exactly,
    /// so results are identical to [`Gallery::top_m`].
    pub fn top_m_batch(
        &self,
        queries: &[Vec<f32>],
        m: usize,
        exclude: &[Option<u64>],
    ) -> Result<Vec<(RetrievalResult, Vec<usize>)>> {
        if exclude.len() != queries.len() {
            return Err(Error::invalid("one exclusion slot per query is required"));
        }
        const BLOCK: usize = 64;
        let n = self.len();
        let dim = self.dim;
        // |fl(q.g) - q.g| <= dim * u for unit vectors; doubled for safety.
        let margin = 2.0 * (dim as f64 * f32::EPSILON as f64 + 1e-6);
        let blocks: Vec<Result<Vec<RowsResult>>> = queries
            .par_chunks(BLOCK)
            .zip(exclude.par_chunks(BLOCK))
            .map(|(qs, ex)| {
                let mut qmat = Vec::with_capacity(qs.len() * dim);
                let mut units = Vec::with_capacity(qs.len());
                for (q, e) in qs.iter().zip(ex) {
                    let set: Option<HashSet<u64>> = e.map(|id| HashSet::from([id]));
                    let unit = self.prepare(q, m, set.as_ref())?;
                    qmat.extend_from_slice(&unit);
                    units.push(unit);
                }
                let mut sims = vec![0.0f32; qs.len() * n];
                crate::nn::matmul_nt(&qmat, &self.vectors, &mut sims, qs.len(), dim, n, false);
                let mut out = Vec::with_capacity(qs.len());
                for (qi, unit) in units.iter().enumerate() {
                    let row_sims = &sims[qi * n..(qi + 1) * n];
                    let skip = ex[qi].and_then(|id| self.row_of(id));
                    let mut heap: BinaryHeap<std::cmp::Reverse<OrdF32>> = BinaryHeap::with_capacity(m + 1);
                    for (r, &v) in row_sims.iter().enumerate() {
                        if Some(r) == skip {
                            continue;
                        }
                        if heap.len() < m {
                            heap.push(std::cmp::Reverse(OrdF32(v)));
                        } else if v > heap.peek().expect("heap is full").0 .0 {
                            heap.pop();
                            heap.push(std::cmp::Reverse(OrdF32(v)));
                        }
                    }
                    let threshold = heap.peek().expect("m >= 1").0 .0 as f64 - margin;
                    let hits: Vec<Hit> = row_sims
                        .iter()
                        .enumerate()
                        .filter(|&(r, &v)| Some(r) != skip && v as f64 >= threshold)
                        .map(|(row, _)| Hit {
                            sim: dot(unit, self.embedding(row)),
                            id: self.ids[row],
                            row,
                        })
                        .collect();
                    let hits = Self::finish(hits, m);
                    out.push((to_result(&hits), hits.iter().map(|h| h.row).collect()));
                }
                Ok(out)
            })
            .collect();
        let mut all = Vec::with_capacity(queries.len());
        for b in blocks {
            all.extend(b?);
        }
        Ok(all)
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GALLERY_MAGIC)?;
        w.write_all(&GALLERY_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.levels as u32).to_le_bytes())?;
        let mut rec = Vec::with_capacity(24 + self.levels + 4 * self.dim);
        for row in 0..self.len() {
            rec.clear();
            rec.extend_from_slice(&self.ids[row].to_le_bytes());
            rec.extend_from_slice(&self.locations[row].lat().to_le_bytes());
            rec.extend_from_slice(&self.locations[row].lon().to_le_bytes());
            rec.extend_from_slice(self.tokens[row].as_slice());
            for &v in self.embedding(row) {
                rec.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 24];
        r.read_exact(&mut head)
            .map_err(|_| Error::data("truncated gallery header"))?;
        if &head[..4] != GALLERY_MAGIC {
            return Err(Error::data("not a gallery file (bad magic)"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != GALLERY_VERSION {
            return Err(Error::data(format!("unsupported gallery version {version}")));
        }
        let count = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
        let levels = u32::from_le_bytes(head[20..24].try_into().unwrap()) as usize;
        let rec_len = 24 + levels + 4 * dim;
        let mut rec = vec![0u8; rec_len];
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut rec)
                .map_err(|_| Error::data("truncated gallery record"))?;
            let id = u64::from_le_bytes(rec[0..8].try_into().unwrap());
            let lat = f64::from_le_bytes(rec[8..16].try_into().unwrap());
            let lon = f64::from_le_bytes(rec[16..24].try_into().unwrap());
            let tokens = TokenSequence::new(rec[24..24 + levels].to_vec())?;
            let embedding = rec[24 + levels..]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            entries.push(GalleryEntry {
                id,
                embedding,
                tokens,
                location: LatLon::new(lat, lon)?,
            });
        }
        Gallery::build(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn to_result(hits: &[Hit]) -> RetrievalResult {
    RetrievalResult {
        neighbors: hits.iter().map(|h| (h.id, h.sim as f32)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gallery(n: usize, dim: usize, seed: u64) -> Vec<GalleryEntry> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let emb = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                let loc = LatLon::new(rng.random_range(-80.0..80.0), rng.random_range(-180.0..180.0)).unwrap();
                GalleryEntry::new(i as u64 * 3 + 1, emb, loc, 21).unwrap()
            })
            .collect()
    }

    #[test]
    fn self_query_is_rank_one() {
        let entries = random_gallery(200, 16, 1);
        let g = Gallery::build(entries.clone()).unwrap();
        for e in entries.iter().take(20) {
            let r = g.top_m(&e.embedding, 3, None).unwrap();
            assert_eq!(r.neighbors[0].0, e.id);
            assert!((r.neighbors[0].1 - 1.0).abs() < 1e-6);
            let ex: HashSet<u64> = [e.id].into_iter().collect();
            let r2 = g.top_m(&e.embedding, 3, Some(&ex)).unwrap();
            assert!(r2.neighbors.iter().all(|(id, _)| *id != e.id));
        }
    }

    #[test]
    fn batch_matches_single_queries() {
        let mut entries = random_gallery(3000, 24, 11);
        // Duplicated vectors force exact ties.
        for i in 0..50 {
            entries[i + 100].embedding = entries[i].embedding.clone();
        }
        let g = Gallery::build(entries.clone()).unwrap();
        let queries: Vec<Vec<f32>> = entries.iter().step_by(37).map(|e| e.embedding.clone()).collect();
        let exclude: Vec<Option<u64>> = entries
            .iter()
            .step_by(37)
            .enumerate()
            .map(|(i, e)| (i % 2 == 0).then_some(e.id))
            .collect();
        let batch = g.top_m_batch(&queries, 15, &exclude).unwrap();
        for ((q, ex), (res, rows)) in queries.iter().zip(&exclude).zip(&batch) {
            let set: Option<HashSet<u64>> = ex.map(|id| HashSet::from([id]));
            let (single, single_rows) = g.top_m_rows(q, 15, set.as_ref()).unwrap();
            assert_eq!(res, &single);
            assert_eq!(rows, &single_rows);
        }
        assert!(g.top_m_batch(&queries, 15, &[]).is_err());
    }

    #[test]
    fn build_errors() {
        assert!(Gallery::build(vec![]).is_err());
        let mut e = random_gallery(3, 4, 2);
        e[1].embedding = vec![0.0; 4];
        assert!(Gallery::build(e).is_err());
        let mut e = random_gallery(3, 4, 2);
        e[2].embedding.push(1.0);
        assert!(Gallery::build(e).is_err());
        let mut e = random_gallery(3, 4, 2);
        e[0].tokens = e[1].tokens.clone();
        assert!(Gallery::build(e).is_err());
    }

    #[test]
    fn m_bounds() {
        let g = Gallery::build(random_gallery(10, 4, 3)).unwrap();
        let q = vec![1.0, 0.0, 0.0, 0.0];
        assert_eq!(g.top_m(&q, 10, None).unwrap().neighbors.len(), 10);
        assert!(g.top_m(&q, 11, None).is_err());
        assert!(g.top_m(&q, 0, None).is_err());
        let ex: HashSet<u64> = [g.id(0)].into_iter().collect();
        assert!(g.top_m(&q, 10, Some(&ex)).is_err());
        let all = g.top_m(&q, 10, None).unwrap();
        assert!(all.neighbors.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn ties_by_ascending_id() {
        let loc = LatLon::new(0.0, 0.0).unwrap();
        let entries = vec![
            GalleryEntry::new(9, vec![1.0, 0.0], loc, 21).unwrap(),
            GalleryEntry::new(2, vec![2.0, 0.0], loc, 21).unwrap(),
            GalleryEntry::new(5, vec![0.0, 1.0], loc, 21).unwrap(),
        ];
        let g = Gallery::build(entries).unwrap();
        let r = g.top_m(&[1.0, 0.0], 3, None).unwrap();
        let ids: Vec<u64> = r.neighbors.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![2, 9, 5]);
    }

    #[test]
    fn file_round_trip() {
        let g = Gallery::build(random_gallery(50, 8, 4)).unwrap();
        let mut buf = Vec::new();
        g.write(&mut buf).unwrap();
        assert_eq!(buf.len(), 24 + 50 * (24 + 21 + 32));
        let back = Gallery::read(&buf[..]).unwrap();
        assert_eq!(back, g);
        assert!(Gallery::read(&buf[..100]).is_err());
    }

    #[test]
    fn parallel_equals_sequential() {
        let g = Gallery::build(random_gallery(10_000, 32, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let q: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            assert_eq!(
                g.top_m(&q, 15, None).unwrap(),
                g.top_m_sequential(&q, 15, None).unwrap()
            );
        }
    }
}
