//! Geo-alignment encoders.
//!
//! Three encoders are trained jointly with a symmetric InfoNCE objective:
//!
//! * GPS: Mercator projection, multi-scale random Fourier features with
//!   frozen seeded frequencies, then a two-layer GELU network.
//! * Text: hashed character 3-grams into a fixed bucket vector, then a
//!   trainable linear projection.
//! * Image: two linear projections of the raw image feature, one aligned
//!   with text and one with GPS.
//!
//! The retrieval embedding of an image is the L2-normalized concatenation
//! `[raw, image->text, image->gps]`.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocell::LatLon;
use crate::nn::{
    gelu, gelu_grad, l2_normalized, matmul, matmul_nt, matmul_tn, AdamW, AdamWConfig, Grads, Linear, ParamStore,
};

pub const ALIGN_MAGIC: &[u8; 4] = b"GTAL";
/// Mercator latitude limit in degrees.
pub const MERCATOR_MAX_LAT: f64 = 85.05113;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub raw_dim: usize,
    pub proj_dim: usize,
    pub rff_scales: Vec<f64>,
    pub rff_features_per_scale: usize,
    pub gps_hidden: usize,
    pub text_buckets: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            raw_dim: 64,
            proj_dim: 32,
            rff_scales: vec![1.0, 4.0, 16.0, 64.0],
            rff_features_per_scale: 32,
            gps_hidden: 128,
            text_buckets: 4096,
            temperature: 0.07,
            batch_size: 256,
            epochs: 10,
            seed: 17,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl AlignConfig {
    pub fn image_dim(&self) -> usize {
        self.raw_dim + 2 * self.proj_dim
    }

    fn rff_dim(&self) -> usize {
        2 * self.rff_scales.len() * self.rff_features_per_scale
    }
}

/// One aligned triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignSample {
    pub image_feat: Vec<f64>,
    pub location: LatLon,
    pub text: String,
}

/// Frozen random Fourier feature basis.
#[derive(Debug, Clone, PartialEq)]
pub struct RffBasis {
    /// (scales * features) x 2, row-major
    pub frequencies: Vec<f64>,
    /// scales * features
    pub phases: Vec<f64>,
}

impl RffBasis {
    /// Frequencies drawn from N(0, (1/sigma)^2) per scale, phases from U(0, 2pi).
    pub fn sample(scales: &[f64], per_scale: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5246_4642_4153_4953);
        let mut frequencies = Vec::with_capacity(scales.len() * per_scale * 2);
        let mut phases = Vec::with_capacity(scales.len() * per_scale);
        for &sigma in scales {
            let normal = Normal::new(0.0, 1.0 / sigma).expect("positive scale");
            for _ in 0..per_scale {
                frequencies.push(normal.sample(&mut rng));
                frequencies.push(normal.sample(&mut rng));
                phases.push(rng.random_range(0.0..std::f64::consts::TAU));
            }
        }
        Self { frequencies, phases }
    }

    /// `[cos(2pi W m + b), sin(2pi W m + b)]` of the Mercator point `m` (degrees).
    pub fn features(&self, p: LatLon) -> Vec<f64> {
        let (x, y) = mercator_deg(p);
        let n = self.phases.len();
        let mut out = vec![0.0; 2 * n];
        for i in 0..n {
            let z = std::f64::consts::TAU * (self.frequencies[2 * i] * x + self.frequencies[2 * i + 1] * y)
                + self.phases[i];
            out[i] = z.cos();
            out[n + i] = z.sin();
        }
        out
    }
}

/// Mercator projection in degree units; latitude clamped to the Mercator limit.
pub fn mercator_deg(p: LatLon) -> (f64, f64) {
    let lat = p.lat().clamp(-MERCATOR_MAX_LAT, MERCATOR_MAX_LAT).to_radians();
    let y = (std::f64::consts::FRAC_PI_4 + lat / 2.0).tan().ln().to_degrees();
    (p.lon(), y)
}

/// Collapses runs of whitespace and trims the ends.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Sparse hashed character 3-gram counts, L2-normalized, sorted by bucket.
///
/// Strings shorter than three characters hash as a single gram; the empty
/// string yields no entries.
pub fn text_features(s: &str, buckets: usize) -> Vec<(usize, f64)> {
    let norm = normalize_text(s);
    let chars: Vec<char> = norm.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    let mut counts = std::collections::BTreeMap::new();
    let grams: Vec<String> = if chars.len() < 3 {
        vec![chars.iter().collect()]
    } else {
        chars.windows(3).map(|w| w.iter().collect()).collect()
    };
    for g in grams {
        *counts
            .entry((fnv1a(g.as_bytes()) % buckets as u64) as usize)
            .or_insert(0.0) += 1.0;
    }
    let norm2: f64 = counts.values().map(|c: &f64| c * c).sum::<f64>().sqrt();
    counts.into_iter().map(|(b, c)| (b, c / norm2)).collect()
}

/// Trainable encoders plus the frozen Fourier basis.
#[derive(Debug, Clone)]
pub struct AlignModel {
    pub cfg: AlignConfig,
    pub params: ParamStore<f64>,
    pub rff: RffBasis,
    pub img_text: Linear,
    pub img_gps: Linear,
    pub gps_up: Linear,
    pub gps_down: Linear,
    pub text_proj: Linear,
}

struct GpsCache {
    feats: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl AlignModel {
    pub fn new(cfg: AlignConfig) -> Result<Self> {
        if cfg.raw_dim == 0 || cfg.proj_dim == 0 || cfg.rff_scales.is_empty() || cfg.text_buckets == 0 {
            return Err(Error::invalid("align dimensions must be positive"));
        }
        if cfg.rff_scales.iter().any(|&s| s <= 0.0) || cfg.temperature <= 0.0 {
            return Err(Error::invalid("RFF scales and temperature must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let img_text = Linear::new(&mut p, "img_text", cfg.raw_dim, cfg.proj_dim, &mut rng);
        let img_gps = Linear::new(&mut p, "img_gps", cfg.raw_dim, cfg.proj_dim, &mut rng);
        let gps_up = Linear::new(&mut p, "gps.up", cfg.rff_dim(), cfg.gps_hidden, &mut rng);
        let gps_down = Linear::new(&mut p, "gps.down", cfg.gps_hidden, cfg.proj_dim, &mut rng);
        let text_proj = Linear::new(&mut p, "text_proj", cfg.text_buckets, cfg.proj_dim, &mut rng);
        let rff = RffBasis::sample(&cfg.rff_scales, cfg.rff_features_per_scale, cfg.seed);
        Ok(Self {
            cfg,
            params: p,
            rff,
            img_text,
            img_gps,
            gps_up,
            gps_down,
            text_proj,
        })
    }

    fn gps_forward(&self, locs: &[LatLon]) -> (Vec<f64>, GpsCache) {
        let n = locs.len();
        let feats: Vec<f64> = locs.iter().flat_map(|&p| self.rff.features(p)).collect();
        let pre = self.gps_up.forward(&self.params, &feats, n);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.gps_down.forward(&self.params, &act, n);
        (out, GpsCache { feats, pre, act })
    }

    /// GPS embedding (unnormalized).
    pub fn encode_gps(&self, p: LatLon) -> Vec<f64> {
        self.gps_forward(&[p]).0
    }

    pub fn encode_gps_batch(&self, locs: &[LatLon]) -> Vec<Vec<f64>> {
        let d = self.cfg.proj_dim;
        self.gps_forward(locs).0.chunks(d).map(|c| c.to_vec()).collect()
    }

    fn text_forward(&self, feats: &[Vec<(usize, f64)>]) -> Vec<f64> {
        let d = self.cfg.proj_dim;
        let w = self.params.get(self.text_proj.w);
        let b = self.params.get(self.text_proj.b);
        let mut out = Vec::with_capacity(feats.len() * d);
        for f in feats {
            let mut row = b.to_vec();
            for &(bucket, v) in f {
                for (r, &wv) in row.iter_mut().zip(&w[bucket * d..(bucket + 1) * d]) {
                    *r += v * wv;
                }
            }
            out.extend(row);
        }
        out
    }

    /// Text embedding (unnormalized).
    pub fn encode_text(&self, s: &str) -> Vec<f64> {
        self.text_forward(&[text_features(s, self.cfg.text_buckets)])
    }

    /// Returns `(e_image_text, e_image_gps, e_image)`; `e_image` is the
    /// normalized concatenation.
    pub fn project_image(&self, raw: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        if raw.len() != self.cfg.raw_dim {
            return Err(Error::invalid(format!(
                "raw feature dim {} != configured {}",
                raw.len(),
                self.cfg.raw_dim
            )));
        }
        let et = self.img_text.forward(&self.params, raw, 1);
        let eg = self.img_gps.forward(&self.params, raw, 1);
        let mut cat = raw.to_vec();
        cat.extend_from_slice(&et);
        cat.extend_from_slice(&eg);
        Ok((et, eg, l2_normalized(&cat)))
    }

    /// Retrieval embedding `e_image` for each raw feature.
    pub fn image_embeddings(&self, raws: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        raws.iter().map(|r| self.project_image(r).map(|x| x.2)).collect()
    }

    /// Symmetric InfoNCE loss over a batch and the gradient of every
    /// trainable tensor.
    pub fn geoalign_loss(&self, batch: &[AlignSample]) -> Result<(f64, Grads<f64>)> {
        let n = batch.len();
        if n < 2 {
            return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
        }
        let cfg = &self.cfg;
        let d = cfg.proj_dim;
        let p = &self.params;
        let mut raw = Vec::with_capacity(n * cfg.raw_dim);
        for s in batch {
            if s.image_feat.len() != cfg.raw_dim {
                return Err(Error::invalid("raw feature dim mismatch in batch"));
            }
            raw.extend_from_slice(&s.image_feat);
        }
        let locs: Vec<LatLon> = batch.iter().map(|s| s.location).collect();
        let tfeats: Vec<_> = batch.iter().map(|s| text_features(&s.text, cfg.text_buckets)).collect();

        let it = self.img_text.forward(p, &raw, n);
        let ig = self.img_gps.forward(p, &raw, n);
        let tx = self.text_forward(&tfeats);
        let (gp, gcache) = self.gps_forward(&locs);

        let (it_n, it_norm) = normalize_rows(&it, d);
        let (ig_n, ig_norm) = normalize_rows(&ig, d);
        let (tx_n, tx_norm) = normalize_rows(&tx, d);
        let (gp_n, gp_norm) = normalize_rows(&gp, d);

        let (l_text, d_it_n, d_tx_n) = symmetric_info_nce(&it_n, &tx_n, n, d, cfg.temperature);
        let (l_gps, d_ig_n, d_gp_n) = symmetric_info_nce(&ig_n, &gp_n, n, d, cfg.temperature);
        let loss = 0.5 * (l_text + l_gps);
        if !loss.is_finite() {
            return Err(Error::numerical(format!("non-finite alignment loss {loss}")));
        }
        // symmetric_info_nce returns gradients of its own sum; apply the 1/2.
        let half = |v: Vec<f64>| v.into_iter().map(|x| 0.5 * x).collect::<Vec<_>>();
        let d_it = normalize_rows_backward(&it_n, &it_norm, &half(d_it_n), d);
        let d_ig = normalize_rows_backward(&ig_n, &ig_norm, &half(d_ig_n), d);
        let d_tx = normalize_rows_backward(&tx_n, &tx_norm, &half(d_tx_n), d);
        let d_gp = normalize_rows_backward(&gp_n, &gp_norm, &half(d_gp_n), d);

        let mut g = p.zero_grads();
        self.img_text.backward_params(&mut g, &raw, &d_it, n);
        self.img_gps.backward_params(&mut g, &raw, &d_ig, n);
        // Sparse text projection.
        {
            let (gw, gb) = (self.text_proj.w, self.text_proj.b);
            for (i, f) in tfeats.iter().enumerate() {
                let dy = &d_tx[i * d..(i + 1) * d];
                let w = g.get_mut(gw);
                for &(bucket, v) in f {
                    for (x, &dv) in w[bucket * d..(bucket + 1) * d].iter_mut().zip(dy) {
                        *x += v * dv;
                    }
                }
                for (x, &dv) in g.get_mut(gb).iter_mut().zip(dy) {
                    *x += dv;
                }
            }
        }
        let mut dact = self.gps_down.backward(p, &mut g, &gcache.act, &d_gp, n);
        for (x, &h) in dact.iter_mut().zip(&gcache.pre) {
            *x *= gelu_grad(h);
        }
        self.gps_up.backward_params(&mut g, &gcache.feats, &dact, n);
        Ok((loss, g))
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        let mut store = self.params.clone();
        let n = self.rff.phases.len();
        store.add("rff.frequencies", vec![n, 2], self.rff.frequencies.clone());
        store.add("rff.phases", vec![n], self.rff.phases.clone());
        store.write_checkpoint(ALIGN_MAGIC, w)
    }

    /// Loads a checkpoint into a model built from `cfg`.
    pub fn read_checkpoint<R: Read>(cfg: AlignConfig, r: R) -> Result<Self> {
        let store = ParamStore::<f64>::read_checkpoint(ALIGN_MAGIC, r)?;
        let mut model = AlignModel::new(cfg)?;
        model.params.load_from(&store)?;
        let get = |name: &str| {
            store
                .id(name)
                .map(|id| store.get(id).to_vec())
                .ok_or_else(|| Error::data(format!("checkpoint lacks {name}")))
        };
        let freqs = get("rff.frequencies")?;
        let phases = get("rff.phases")?;
        if phases.len() != model.rff.phases.len() || freqs.len() != model.rff.frequencies.len() {
            return Err(Error::data("RFF basis shape differs from config"));
        }
        model.rff = RffBasis {
            frequencies: freqs,
            phases,
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(cfg: AlignConfig, path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Self::read_checkpoint(cfg, std::io::BufReader::new(f))
    }

    /// Rounds trainable and frozen values through f32 so the in-memory
    /// model equals its checkpoint.
    pub fn quantize_f32(&mut self) {
        self.params.quantize_f32();
        for v in self.rff.frequencies.iter_mut().chain(self.rff.phases.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

fn normalize_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v /= n;
        }
        norms.push(n);
    }
    (out, norms)
}

fn normalize_rows_backward(y: &[f64], norms: &[f64], dy: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (r, &nrm) in norms.iter().enumerate() {
        let yr = &y[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for c in 0..d {
            dx[r * d + c] = (dyr[c] - yr[c] * dot) / nrm;
        }
    }
    dx
}

/// `CE(rows of A B^T / tau) + CE(columns)` with diagonal targets, each
/// averaged over the batch. `a` and `b` are `n x d`, already normalized.
/// Returns the loss and its gradients with respect to `a` and `b`.
pub fn symmetric_info_nce(a: &[f64], b: &[f64], n: usize, d: usize, tau: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; n * n];
    matmul_nt(a, b, &mut s, n, d, n, false);
    for v in s.iter_mut() {
        *v /= tau;
    }
    let (row_loss, row_p) = directional_ce(&s, n, false);
    let (col_loss, col_p) = directional_ce(&s, n, true);
    let inv_n = 1.0 / n as f64;
    // dS = (P_row - I)/n + (P_col - I)/n, then chain through 1/tau.
    let mut ds = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let eye = if i == j { 1.0 } else { 0.0 };
            ds[i * n + j] = ((row_p[i * n + j] - eye) + (col_p[i * n + j] - eye)) * inv_n / tau;
        }
    }
    let mut da = vec![0.0; n * d];
    let mut db = vec![0.0; n * d];
    matmul(&ds, b, &mut da, n, n, d, false);
    matmul_tn(&ds, a, &mut db, n, n, d, false);
    (row_loss + col_loss, da, db)
}

/// Mean cross-entropy with diagonal targets over rows (or columns), plus the
/// softmax probabilities laid out in `s` orientation.
fn directional_ce(s: &[f64], n: usize, by_column: bool) -> (f64, Vec<f64>) {
    let at = |i: usize, j: usize| if by_column { s[j * n + i] } else { s[i * n + j] };
    let mut probs = vec![0.0; n * n];
    let mut loss = 0.0;
    for i in 0..n {
        let mx = (0..n).map(|j| at(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).map(|j| (at(i, j) - mx).exp()).sum();
        let lse = mx + sum.ln();
        loss += lse - at(i, i);
        for j in 0..n {
            let pv = (at(i, j) - lse).exp();
            if by_column {
                probs[j * n + i] = pv;
            } else {
                probs[i * n + j] = pv;
            }
        }
    }
    (loss / n as f64, probs)
}

/// Training progress: (step, loss) pairs.
pub type LossCurve = Vec<(usize, f64)>;

/// Minibatch AdamW training of the alignment objective.
pub fn train_align(model: &mut AlignModel, data: &[AlignSample]) -> Result<LossCurve> {
    if data.is_empty() {
        return Err(Error::invalid("alignment dataset is empty"));
    }
    let cfg = model.cfg.clone();
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let bs = cfg.batch_size.max(2).min(data.len().max(2));
    let mut curve = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<AlignSample> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (loss, grads) = model.geoalign_loss(&batch)?;
            if !grads.all_finite() {
                return Err(Error::numerical(format!(
                    "non-finite alignment gradient at step {step}"
                )));
            }
            opt.step(&mut model.params, &grads);
            curve.push((step, loss));
            step += 1;
        }
    }
    model.quantize_f32();
    Ok(curve)
}

pub fn write_loss_curve<W: Write>(curve: &[(usize, f64)], mut w: W) -> Result<()> {
    writeln!(w, "step,loss")?;
    for (s, l) in curve {
        writeln!(w, "{s},{l:.8}")?;
    }
    Ok(())
}

/// Fraction of held-out samples whose image->gps embedding retrieves its
/// own location embedding at rank 1.
pub fn gps_retrieval_top1(model: &AlignModel, data: &[AlignSample]) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    let d = model.cfg.proj_dim;
    let raw: Vec<f64> = data.iter().flat_map(|s| s.image_feat.iter().copied()).collect();
    let ig = model.img_gps.forward(&model.params, &raw, n);
    let locs: Vec<LatLon> = data.iter().map(|s| s.location).collect();
    let (gp, _) = model.gps_forward(&locs);
    let (a, _) = normalize_rows(&ig, d);
    let (b, _) = normalize_rows(&gp, d);
    let mut s = vec![0.0; n * n];
    matmul_nt(&a, &b, &mut s, n, d, n, false);
    let hits = (0..n)
        .filter(|&i| {
            let row = &s[i * n..(i + 1) * n];
            let best = (0..n).fold(0, |bi, j| if row[j] > row[bi] { j } else { bi });
            best == i
        })
        .count();
    Ok(hits as f64 / n as f64)
}
