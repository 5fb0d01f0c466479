//! Retrieval-conditioned encoder-decoder transformer over S2 token sequences.
//!
//! The encoder reads one sequence per query:
//!
//! ```text
//! [CLS] v_q | v_1 t_1,0 .. t_1,L-1 | ... | v_M t_M,0 .. t_M,L-1 | (meta slots)
//! ```
//!
//! where `v` are projected image embeddings and `t` are neighbour tokens
//! embedded with the single shared token table. The decoder predicts the
//! query's tokens left to right from a learned start embedding, using
//! causal self-attention and cross-attention to the encoder memory.
//! Blocks are pre-LayerNorm; the unified vocabulary has six entries and
//! tokens 4..=5 are masked at every step after the first.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocell::{TokenSequence, DEFAULT_LEVELS, NUM_FACES};
use crate::nn::layers::{FeedForwardCache, LayerNormCache};
use crate::nn::{
    log_sum_exp, AdamW, AdamWConfig, Attention, AttentionCache, FeedForward, Grads, LayerNorm, Linear, ParamId,
    ParamStore, Real,
};

pub const MODEL_MAGIC: &[u8; 4] = b"GTSM";
pub const VOCAB: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ffn: usize,
    /// Tokens per sequence (face + quad levels).
    pub levels: usize,
    /// Retrieved neighbours per query.
    pub neighbors: usize,
    pub vocab: usize,
    /// Dimension of the image embeddings fed to the encoder.
    pub input_dim: usize,
    /// Appends query metadata slots (training-time only inputs).
    pub query_metadata_slots: bool,
    /// Dimension of each metadata slot vector.
    pub metadata_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_ffn: 128,
            levels: DEFAULT_LEVELS,
            neighbors: 15,
            vocab: VOCAB,
            input_dim: 128,
            query_metadata_slots: false,
            metadata_dim: 32,
            seed: 23,
        }
    }

    /// Architecture of the full-size published model.
    pub fn full_scale() -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            n_layers_enc: 10,
            n_layers_dec: 10,
            d_ffn: 1024,
            input_dim: 768 + 2 * 768,
            metadata_dim: 768,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::invalid("d_model must be a positive multiple of n_heads"));
        }
        if self.vocab < VOCAB {
            return Err(Error::invalid("vocab must be at least 6"));
        }
        if self.levels == 0 || self.levels > 31 || self.input_dim == 0 || self.d_ffn == 0 {
            return Err(Error::invalid("levels must be in 1..=31 and dims positive"));
        }
        Ok(())
    }

    /// Slots without metadata: CLS, query, and M neighbour blocks.
    pub fn base_slots(&self) -> usize {
        2 + self.neighbors * (1 + self.levels)
    }

    pub fn max_slots(&self) -> usize {
        self.base_slots() + if self.query_metadata_slots { 2 } else { 0 }
    }

    /// Position weights `2 - t / (L - 1)`.
    pub fn position_weights(&self) -> Vec<f64> {
        let denom = (self.levels.max(2) - 1) as f64;
        (0..self.levels).map(|t| 2.0 - t as f64 / denom).collect()
    }

    pub fn hash_text(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Number of valid tokens at decoding step `step`.
pub fn valid_tokens(step: usize) -> usize {
    if step == 0 {
        NUM_FACES as usize
    } else {
        4
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborContext<T> {
    pub embedding: Vec<T>,
    pub tokens: TokenSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput<T> {
    pub query: Vec<T>,
    pub neighbors: Vec<NeighborContext<T>>,
    /// Optional metadata slot vectors (location and text embeddings).
    pub metadata: Option<[Vec<T>; 2]>,
}

impl<T: Real> EncoderInput<T> {
    pub fn slots(&self, levels: usize) -> usize {
        2 + self.neighbors.len() * (1 + levels) + if self.metadata.is_some() { 2 } else { 0 }
    }
}

/// Encoder output: one `d_model` row per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Memory<T> {
    pub rows: Vec<T>,
    pub len: usize,
}

/// Next-token logits with the step's validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    /// Masked entries are `-inf`.
    pub logits: Vec<f64>,
}

impl StepDistribution {
    pub fn from_raw<T: Real>(raw: &[T], step: usize) -> Self {
        let valid = valid_tokens(step);
        let logits = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| if i < valid { v.to_f64() } else { f64::NEG_INFINITY })
            .collect();
        Self { logits }
    }

    pub fn valid_count(&self) -> usize {
        self.logits.iter().filter(|v| v.is_finite()).count()
    }

    /// Natural-log probabilities; masked entries are `-inf`.
    pub fn log_probs(&self) -> Vec<f64> {
        self.log_probs_at(1.0)
    }

    /// Log-softmax of `logits / temperature`, max-subtracted.
    pub fn log_probs_at(&self, temperature: f64) -> Vec<f64> {
        let scaled: Vec<f64> = self.logits.iter().map(|&l| l / temperature).collect();
        let mx = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = scaled.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + sum.ln();
        scaled.iter().map(|&v| v - lse).collect()
    }

    pub fn probs_at(&self, temperature: f64) -> Vec<f64> {
        self.log_probs_at(temperature).into_iter().map(f64::exp).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    ln1: LayerNorm,
    self_attn: Attention,
    ln2: LayerNorm,
    cross_attn: Attention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct SeqModel<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub token_embedding: ParamId,
    image_proj: Linear,
    meta_proj: Option<Linear>,
    enc_pos: ParamId,
    dec_pos: ParamId,
    cls: ParamId,
    sos: ParamId,
    enc: Vec<EncLayer>,
    dec: Vec<DecLayer>,
    final_ln: LayerNorm,
    head: Linear,
}

struct EmbedCache<T> {
    image_in: Vec<T>,
    meta_in: Option<Vec<T>>,
}

struct EncLayerCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    att: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    ffn: FeedForwardCache<T>,
}

struct DecLayerCache<T> {
    ln1: LayerNormCache<T>,
    h1: Vec<T>,
    sa: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    h2: Vec<T>,
    ca: AttentionCache<T>,
    ln3: LayerNormCache<T>,
    h3: Vec<T>,
    ffn: FeedForwardCache<T>,
}

/// Incremental decoding state: cached self-attention keys/values.
#[derive(Debug, Clone)]
pub struct DecoderState<T> {
    step: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T> DecoderState<T> {
    pub fn step(&self) -> usize {
        self.step
    }
}

/// Memory with cross-attention keys/values projected once per layer.
#[derive(Debug, Clone)]
pub struct PreparedMemory<T> {
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

/// Random positional tables with shared structure: the embedding of token
/// `s` of neighbour block `j` is `block_j + pos_s`, and decoder step `s`
/// starts from the same `pos_s`. Entries are uniform with the Xavier bound
/// of the encoder table, split evenly between the two components.
fn structured_positions<T: Real, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> (Vec<T>, Vec<T>) {
    let d = cfg.d_model;
    let l = cfg.levels;
    let a = (6.0 / (cfg.max_slots() + d) as f64).sqrt();
    let half = a / std::f64::consts::SQRT_2;
    let mut draw = |n: usize, bound: f64| -> Vec<f64> { (0..n * d).map(|_| rng.random_range(-bound..bound)).collect() };
    let blocks = draw(cfg.neighbors, half);
    // pos_0 .. pos_{L-1} for tokens, pos_L for the neighbour image slot.
    let pos = draw(l + 1, half);
    let specials = draw(2 + if cfg.query_metadata_slots { 2 } else { 0 }, a);
    let mut enc = Vec::with_capacity(cfg.max_slots() * d);
    enc.extend_from_slice(&specials[..2 * d]);
    for j in 0..cfg.neighbors {
        let b = &blocks[j * d..(j + 1) * d];
        for s in std::iter::once(l).chain(0..l) {
            enc.extend(b.iter().zip(&pos[s * d..(s + 1) * d]).map(|(x, y)| x + y));
        }
    }
    enc.extend_from_slice(&specials[2 * d..]);
    let dec = pos[..l * d]
        .iter()
        .map(|&x| x * std::f64::consts::SQRT_2)
        .collect::<Vec<f64>>();
    let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect();
    (cast(enc), cast(dec))
}

fn add_in_place<T: Real>(a: &mut [T], b: &[T]) {
    for (x, &y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

impl<T: Real> SeqModel<T> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = ParamStore::new();
        let d = cfg.d_model;
        let token_embedding = p.xavier("token_embedding", vec![cfg.vocab, d], &mut rng);
        let image_proj = Linear::new(&mut p, "image_proj", cfg.input_dim, d, &mut rng);
        let meta_proj = if cfg.query_metadata_slots {
            Some(Linear::new(&mut p, "meta_proj", cfg.metadata_dim, d, &mut rng))
        } else {
            None
        };
        let (enc_init, dec_init) = structured_positions(&cfg, &mut rng);
        let enc_pos = p.add("enc_pos", vec![cfg.max_slots(), d], enc_init);
        let dec_pos = p.add("dec_pos", vec![cfg.levels, d], dec_init);
        let cls = p.xavier("cls", vec![1, d], &mut rng);
        let sos = p.xavier("sos", vec![1, d], &mut rng);
        let enc = (0..cfg.n_layers_enc)
            .map(|i| EncLayer {
                ln1: LayerNorm::new(&mut p, &format!("enc{i}.ln1"), d),
                attn: Attention::new(&mut p, &format!("enc{i}.attn"), d, cfg.n_heads, &mut rng),
                ln2: LayerNorm::new(&mut p, &format!("enc{i}.ln2"), d),
                ffn: FeedForward::new(&mut p, &format!("enc{i}.ffn"), d, cfg.d_ffn, &mut rng),
            })
            .collect();
        let dec = (0..cfg.n_layers_dec)
            .map(|i| DecLayer {
                ln1: LayerNorm::new(&mut p, &format!("dec{i}.ln1"), d),
                self_attn: Attention::new(&mut p, &format!("dec{i}.self"), d, cfg.n_heads, &mut rng),
                ln2: LayerNorm::new(&mut p, &format!("dec{i}.ln2"), d),
                cross_attn: Attention::new(&mut p, &format!("dec{i}.cross"), d, cfg.n_heads, &mut rng),
                ln3: LayerNorm::new(&mut p, &format!("dec{i}.ln3"), d),
                ffn: FeedForward::new(&mut p, &format!("dec{i}.ffn"), d, cfg.d_ffn, &mut rng),
            })
            .collect();
        let final_ln = LayerNorm::new(&mut p, "final_ln", d);
        let head = Linear::new(&mut p, "head", d, cfg.vocab, &mut rng);
        Ok(Self {
            cfg,
            params: p,
            token_embedding,
            image_proj,
            meta_proj,
            enc_pos,
            dec_pos,
            cls,
            sos,
            enc,
            dec,
            final_ln,
            head,
        })
    }

    /// Sets the output projections of every attention and feed-forward
    /// branch to zero, making each residual block the identity.
    pub fn zero_residual_branches(&mut self) {
        let mut ids = Vec::new();
        for l in &self.enc {
            ids.extend([l.attn.o.w, l.attn.o.b, l.ffn.down.w, l.ffn.down.b]);
        }
        for l in &self.dec {
            ids.extend([
                l.self_attn.o.w,
                l.self_attn.o.b,
                l.cross_attn.o.w,
                l.cross_attn.o.b,
                l.ffn.down.w,
                l.ffn.down.b,
            ]);
        }
        for id in ids {
            self.params.get_mut(id).fill(T::ZERO);
        }
    }

    pub fn enc_pos_id(&self) -> ParamId {
        self.enc_pos
    }

    fn check_input(&self, inp: &EncoderInput<T>) -> Result<()> {
        let cfg = &self.cfg;
        if inp.query.len() != cfg.input_dim {
            return Err(Error::invalid(format!(
                "query dim {} != {}",
                inp.query.len(),
                cfg.input_dim
            )));
        }
        if inp.neighbors.len() != cfg.neighbors {
            return Err(Error::invalid(format!(
                "{} neighbours supplied, model expects {}",
                inp.neighbors.len(),
                cfg.neighbors
            )));
        }
        for n in &inp.neighbors {
            if n.embedding.len() != cfg.input_dim || n.tokens.len() != cfg.levels {
                return Err(Error::invalid("neighbour embedding or token length mismatch"));
            }
        }
        match (&inp.metadata, cfg.query_metadata_slots) {
            (Some(_), false) => return Err(Error::invalid("model has no metadata slots")),
            (Some(m), true) if m.iter().any(|v| v.len() != cfg.metadata_dim) => {
                return Err(Error::invalid("metadata slot dim mismatch"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Embedded encoder input (before any attention layer).
    fn embed(&self, inp: &EncoderInput<T>) -> (Vec<T>, usize, EmbedCache<T>) {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let l = cfg.levels;
        let n = inp.slots(l);
        let p = &self.params;
        let mut x = vec![T::ZERO; n * d];
        let mut image_in = Vec::with_capacity((1 + inp.neighbors.len()) * cfg.input_dim);
        image_in.extend_from_slice(&inp.query);
        for nb in &inp.neighbors {
            image_in.extend_from_slice(&nb.embedding);
        }
        let img = self.image_proj.forward(p, &image_in, 1 + inp.neighbors.len());
        let tok = p.get(self.token_embedding);
        x[..d].copy_from_slice(p.get(self.cls));
        x[d..2 * d].copy_from_slice(&img[..d]);
        for (j, nb) in inp.neighbors.iter().enumerate() {
            let base = 2 + j * (1 + l);
            x[base * d..(base + 1) * d].copy_from_slice(&img[(1 + j) * d..(2 + j) * d]);
            for (s, &t) in nb.tokens.as_slice().iter().enumerate() {
                let r = base + 1 + s;
                x[r * d..(r + 1) * d].copy_from_slice(&tok[t as usize * d..(t as usize + 1) * d]);
            }
        }
        let mut meta_in = None;
        if let (Some(meta), Some(proj)) = (&inp.metadata, &self.meta_proj) {
            let m_in: Vec<T> = meta.iter().flat_map(|v| v.iter().copied()).collect();
            let y = proj.forward(p, &m_in, 2);
            let base = n - 2;
            x[base * d..n * d].copy_from_slice(&y);
            meta_in = Some(m_in);
        }
        add_in_place(&mut x, &p.get(self.enc_pos)[..n * d]);
        (x, n, EmbedCache { image_in, meta_in })
    }

    fn embed_backward(&self, g: &mut Grads<T>, inp: &EncoderInput<T>, cache: &EmbedCache<T>, dx: &[T], n: usize) {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let l = cfg.levels;
        add_in_place(&mut g.get_mut(self.enc_pos)[..n * d], dx);
        add_in_place(g.get_mut(self.cls), &dx[..d]);
        let mut dimg = Vec::with_capacity((1 + inp.neighbors.len()) * d);
        dimg.extend_from_slice(&dx[d..2 * d]);
        for (j, nb) in inp.neighbors.iter().enumerate() {
            let base = 2 + j * (1 + l);
            dimg.extend_from_slice(&dx[base * d..(base + 1) * d]);
            let gt = g.get_mut(self.token_embedding);
            for (s, &t) in nb.tokens.as_slice().iter().enumerate() {
                let r = base + 1 + s;
                add_in_place(&mut gt[t as usize * d..(t as usize + 1) * d], &dx[r * d..(r + 1) * d]);
            }
        }
        self.image_proj
            .backward_params(g, &cache.image_in, &dimg, 1 + inp.neighbors.len());
        if let (Some(m_in), Some(proj)) = (&cache.meta_in, &self.meta_proj) {
            proj.backward_params(g, m_in, &dx[(n - 2) * d..n * d], 2);
        }
    }

    fn encode_with_cache(&self, inp: &EncoderInput<T>) -> (Memory<T>, EmbedCache<T>, Vec<EncLayerCache<T>>) {
        let p = &self.params;
        let (mut x, n, ecache) = self.embed(inp);
        let mut caches = Vec::with_capacity(self.enc.len());
        for layer in &self.enc {
            let (h1, ln1) = layer.ln1.forward(p, &x, n);
            let (a, att) = layer.attn.forward(p, &h1, n, &h1, n, false);
            add_in_place(&mut x, &a);
            let (h2, ln2) = layer.ln2.forward(p, &x, n);
            let (f, ffn) = layer.ffn.forward(p, &h2, n);
            add_in_place(&mut x, &f);
            caches.push(EncLayerCache {
                ln1,
                h1,
                att,
                ln2,
                h2,
                ffn,
            });
        }
        (Memory { rows: x, len: n }, ecache, caches)
    }

    /// Self-attention encoder output, one row per input slot.
    pub fn encode(&self, inp: &EncoderInput<T>) -> Result<Memory<T>> {
        self.check_input(inp)?;
        Ok(self.encode_with_cache(inp).0)
    }

    fn encode_backward(
        &self,
        g: &mut Grads<T>,
        inp: &EncoderInput<T>,
        ecache: &EmbedCache<T>,
        caches: &[EncLayerCache<T>],
        dmem: Vec<T>,
        n: usize,
    ) {
        let p = &self.params;
        let mut dx = dmem;
        for (layer, c) in self.enc.iter().zip(caches).rev() {
            let dh2 = layer.ffn.backward(p, g, &c.h2, &c.ffn, &dx, n);
            let dx1 = layer.ln2.backward(p, g, &c.ln2, &dh2, n);
            add_in_place(&mut dx, &dx1);
            let (dq, dkv) = layer.attn.backward(p, g, &c.h1, n, &c.h1, n, &c.att, &dx);
            let mut dh1 = dq;
            add_in_place(&mut dh1, &dkv);
            let dx0 = layer.ln1.backward(p, g, &c.ln1, &dh1, n);
            add_in_place(&mut dx, &dx0);
        }
        self.embed_backward(g, inp, ecache, &dx, n);
    }

    /// Decoder input rows for a (teacher-forced) prefix of `len` positions.
    fn decoder_inputs(&self, prefix: &[u8], len: usize) -> Vec<T> {
        let d = self.cfg.d_model;
        let p = &self.params;
        let tok = p.get(self.token_embedding);
        let pos = p.get(self.dec_pos);
        let mut x = vec![T::ZERO; len * d];
        for r in 0..len {
            let row = &mut x[r * d..(r + 1) * d];
            if r == 0 {
                row.copy_from_slice(p.get(self.sos));
            } else {
                let t = prefix[r - 1] as usize;
                row.copy_from_slice(&tok[t * d..(t + 1) * d]);
            }
            add_in_place(row, &pos[r * d..(r + 1) * d]);
        }
        x
    }

    fn decode_full(
        &self,
        prefix: &[u8],
        len: usize,
        mem: &Memory<T>,
    ) -> (Vec<T>, Vec<T>, LayerNormCache<T>, Vec<DecLayerCache<T>>) {
        let p = &self.params;
        let m = mem.len;
        let mut x = self.decoder_inputs(prefix, len);
        let mut caches = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let (h1, ln1) = layer.ln1.forward(p, &x, len);
            let (a, sa) = layer.self_attn.forward(p, &h1, len, &h1, len, true);
            add_in_place(&mut x, &a);
            let (h2, ln2) = layer.ln2.forward(p, &x, len);
            let (c, ca) = layer.cross_attn.forward(p, &h2, len, &mem.rows, m, false);
            add_in_place(&mut x, &c);
            let (h3, ln3) = layer.ln3.forward(p, &x, len);
            let (f, ffn) = layer.ffn.forward(p, &h3, len);
            add_in_place(&mut x, &f);
            caches.push(DecLayerCache {
                ln1,
                h1,
                sa,
                ln2,
                h2,
                ca,
                ln3,
                h3,
                ffn,
            });
        }
        let (hf, lnf) = self.final_ln.forward(p, &x, len);
        let logits = self.head.forward(p, &hf, len);
        (logits, hf, lnf, caches)
    }

    /// Distribution of token `prefix.len()` given the prefix and memory.
    pub fn decode_step(&self, prefix: &[u8], mem: &Memory<T>) -> Result<StepDistribution> {
        let s = prefix.len();
        if s >= self.cfg.levels {
            return Err(Error::invalid(format!(
                "prefix length {s} must be below {}",
                self.cfg.levels
            )));
        }
        for (i, &t) in prefix.iter().enumerate() {
            if t as usize >= valid_tokens(i) {
                return Err(Error::invalid(format!("token {t} invalid at position {i}")));
            }
        }
        let (logits, ..) = self.decode_full(prefix, s + 1, mem);
        let v = self.cfg.vocab;
        Ok(StepDistribution::from_raw(&logits[s * v..s * v + VOCAB], s))
    }

    /// Projects cross-attention keys/values for incremental decoding.
    pub fn prepare_memory(&self, mem: &Memory<T>) -> PreparedMemory<T> {
        let mut keys = Vec::with_capacity(self.dec.len());
        let mut values = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let (k, v) = layer.cross_attn.project_kv(&self.params, &mem.rows, mem.len);
            keys.push(k);
            values.push(v);
        }
        PreparedMemory {
            len: mem.len,
            keys,
            values,
        }
    }

    pub fn start_state(&self) -> DecoderState<T> {
        DecoderState {
            step: 0,
            keys: vec![Vec::new(); self.dec.len()],
            values: vec![Vec::new(); self.dec.len()],
        }
    }

    /// Feeds the previous token (`None` at step 0) and returns the next
    /// step's distribution, advancing the state.
    pub fn step_incremental(
        &self,
        pm: &PreparedMemory<T>,
        state: &mut DecoderState<T>,
        prev: Option<u8>,
    ) -> StepDistribution {
        let p = &self.params;
        let d = self.cfg.d_model;
        let s = state.step;
        assert!(s < self.cfg.levels, "decoder already produced every level");
        let mut x = vec![T::ZERO; d];
        match prev {
            None => x.copy_from_slice(p.get(self.sos)),
            Some(t) => {
                let t = t as usize;
                x.copy_from_slice(&p.get(self.token_embedding)[t * d..(t + 1) * d]);
            }
        }
        add_in_place(&mut x, &p.get(self.dec_pos)[s * d..(s + 1) * d]);
        for (li, layer) in self.dec.iter().enumerate() {
            let (h1, _) = layer.ln1.forward(p, &x, 1);
            let q = layer.self_attn.q.forward(p, &h1, 1);
            let k = layer.self_attn.k.forward(p, &h1, 1);
            let v = layer.self_attn.v.forward(p, &h1, 1);
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            let (ctx, _) = layer
                .self_attn
                .attend(&q, &state.keys[li], &state.values[li], 1, s + 1, false);
            add_in_place(&mut x, &layer.self_attn.o.forward(p, &ctx, 1));
            let (h2, _) = layer.ln2.forward(p, &x, 1);
            let q = layer.cross_attn.q.forward(p, &h2, 1);
            let (ctx, _) = layer
                .cross_attn
                .attend(&q, &pm.keys[li], &pm.values[li], 1, pm.len, false);
            add_in_place(&mut x, &layer.cross_attn.o.forward(p, &ctx, 1));
            let (h3, _) = layer.ln3.forward(p, &x, 1);
            let (f, _) = layer.ffn.forward(p, &h3, 1);
            add_in_place(&mut x, &f);
        }
        let (hf, _) = self.final_ln.forward(p, &x, 1);
        let logits = self.head.forward(p, &hf, 1);
        state.step += 1;
        StepDistribution::from_raw(&logits[..VOCAB], s)
    }

    /// Teacher-forced position-weighted cross-entropy for one example,
    /// with gradients (scaled by `scale`) accumulated into `g`.
    fn example_loss(&self, inp: &EncoderInput<T>, target: &TokenSequence, scale: f64, g: &mut Grads<T>) -> Result<f64> {
        let cfg = &self.cfg;
        let l = cfg.levels;
        let v = cfg.vocab;
        let p = &self.params;
        let (mem, ecache, ecaches) = self.encode_with_cache(inp);
        let y = target.as_slice();
        let (logits, hf, lnf, dcaches) = self.decode_full(y, l, &mem);
        let weights = cfg.position_weights();
        let wsum: f64 = weights.iter().sum();
        let mut loss = 0.0;
        let mut dlogits = vec![T::ZERO; l * v];
        for t in 0..l {
            let valid = valid_tokens(t);
            let row = &logits[t * v..t * v + valid];
            let lse = log_sum_exp(row).to_f64();
            let ce = lse - row[y[t] as usize].to_f64();
            if !ce.is_finite() {
                return Err(Error::numerical(format!("non-finite cross-entropy at position {t}")));
            }
            let w = weights[t] / wsum;
            loss += w * ce;
            for k in 0..valid {
                let pk = (row[k].to_f64() - lse).exp();
                let onehot = if k == y[t] as usize { 1.0 } else { 0.0 };
                dlogits[t * v + k] = T::from_f64(scale * w * (pk - onehot));
            }
        }
        // Backward through head and decoder.
        let dhf = self.head.backward(p, g, &hf, &dlogits, l);
        let mut dx = self.final_ln.backward(p, g, &lnf, &dhf, l);
        let mut dmem = vec![T::ZERO; mem.rows.len()];
        for (layer, c) in self.dec.iter().zip(&dcaches).rev() {
            let dh3 = layer.ffn.backward(p, g, &c.h3, &c.ffn, &dx, l);
            let t3 = layer.ln3.backward(p, g, &c.ln3, &dh3, l);
            add_in_place(&mut dx, &t3);
            let (dq, dm) = layer
                .cross_attn
                .backward(p, g, &c.h2, l, &mem.rows, mem.len, &c.ca, &dx);
            add_in_place(&mut dmem, &dm);
            let t2 = layer.ln2.backward(p, g, &c.ln2, &dq, l);
            add_in_place(&mut dx, &t2);
            let (dq, dkv) = layer.self_attn.backward(p, g, &c.h1, l, &c.h1, l, &c.sa, &dx);
            let mut dh1 = dq;
            add_in_place(&mut dh1, &dkv);
            let t1 = layer.ln1.backward(p, g, &c.ln1, &dh1, l);
            add_in_place(&mut dx, &t1);
        }
        // Decoder input embeddings.
        let d = cfg.d_model;
        add_in_place(g.get_mut(self.dec_pos), &dx);
        add_in_place(g.get_mut(self.sos), &dx[..d]);
        {
            let gt = g.get_mut(self.token_embedding);
            for r in 1..l {
                let t = y[r - 1] as usize;
                add_in_place(&mut gt[t * d..(t + 1) * d], &dx[r * d..(r + 1) * d]);
            }
        }
        self.encode_backward(g, inp, &ecache, &ecaches, dmem, mem.len);
        Ok(loss)
    }

    /// Mean position-weighted CE over a batch and its full gradient.
    ///
    /// Examples are processed in fixed chunks whose partial gradients are
    /// summed in chunk order, so the result does not depend on the number
    /// of worker threads.
    pub fn sequence_loss(&self, batch: &[(EncoderInput<T>, TokenSequence)]) -> Result<(f64, Grads<T>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for (inp, target) in batch {
            self.check_input(inp)?;
            if target.len() != self.cfg.levels {
                return Err(Error::invalid("target length differs from model levels"));
            }
        }
        const CHUNK: usize = 4;
        let scale = 1.0 / batch.len() as f64;
        let partials: Vec<Result<(f64, Grads<T>)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut g = self.params.zero_grads();
                let mut loss = 0.0;
                for (inp, target) in chunk {
                    loss += self.example_loss(inp, target, scale, &mut g)?;
                }
                Ok((loss, g))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.params.zero_grads();
        for part in partials {
            let (l, g) = part?;
            total += l;
            grads.add_assign(&g);
        }
        let loss = total * scale;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::numerical(format!("non-finite sequence loss {loss}")));
        }
        Ok((loss, grads))
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        self.params.write_checkpoint(MODEL_MAGIC, w)
    }

    pub fn read_checkpoint<R: Read>(cfg: ModelConfig, r: R) -> Result<Self> {
        let store = ParamStore::<T>::read_checkpoint(MODEL_MAGIC, r)?;
        let mut m = Self::new(cfg)?;
        m.params.load_from(&store)?;
        Ok(m)
    }

    /// Writes `<path>` (tensors) and `<path>.toml` (versioned config).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let doc = format!("version = 1\n\n[model]\n{}", self.cfg.hash_text());
        std::fs::write(config_path(path), doc)?;
        Ok(())
    }

    /// Loads tensors and the sidecar config written by [`SeqModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(config_path(path))
            .map_err(|e| Error::data(format!("missing model config next to {}: {e}", path.display())))?;
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            version: u32,
            model: ModelConfig,
        }
        let doc: Doc = toml::from_str(&text).map_err(|e| Error::Config(format!("model config: {e}")))?;
        if doc.version != 1 {
            return Err(Error::data(format!("unsupported model config version {}", doc.version)));
        }
        let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        Self::read_checkpoint(doc.model, std::io::BufReader::new(f))
    }

    pub fn cast<U: Real>(&self) -> SeqModel<U> {
        SeqModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            token_embedding: self.token_embedding,
            image_proj: self.image_proj,
            meta_proj: self.meta_proj,
            enc_pos: self.enc_pos,
            dec_pos: self.dec_pos,
            cls: self.cls,
            sos: self.sos,
            enc: self.enc.clone(),
            dec: self.dec.clone(),
            final_ln: self.final_ln,
            head: self.head,
        }
    }
}

fn config_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".toml");
    s.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the examples visited per epoch (0 = all).
    pub examples_per_epoch: usize,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to this fraction of its peak over
    /// the whole run (1.0 keeps it constant).
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 64,
            examples_per_epoch: 0,
            warmup_steps: 0,
            final_lr_fraction: 1.0,
            seed: 29,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// Learning-rate multiplier at `step` of `total`.
pub fn lr_factor(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine
}

/// Minibatch AdamW training. `make_input(i)` assembles the encoder input
/// (including retrieval context) for training example `i`. Returns the
/// per-step loss curve.
pub fn train<T, F>(
    model: &mut SeqModel<T>,
    n_examples: usize,
    targets: &[TokenSequence],
    make_input: F,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<(usize, f64)>>
where
    T: Real,
    F: Fn(usize) -> EncoderInput<T> + Sync,
{
    if n_examples == 0 || targets.len() != n_examples {
        return Err(Error::invalid("training set is empty or targets are misaligned"));
    }
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let per_epoch = if cfg.examples_per_epoch == 0 {
        n_examples
    } else {
        cfg.examples_per_epoch.min(n_examples)
    };
    let bs = cfg.batch_size.max(1);
    let total = cfg.epochs * per_epoch.div_ceil(bs);
    let mut curve = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order[..per_epoch].chunks(bs) {
            opt.cfg.lr = cfg.optimizer.lr * lr_factor(cfg, step, total);
            let batch: Vec<(EncoderInput<T>, TokenSequence)> =
                chunk.par_iter().map(|&i| (make_input(i), targets[i].clone())).collect();
            let (loss, grads) = model.sequence_loss(&batch)?;
            opt.step(&mut model.params, &grads);
            on_step(step, loss);
            curve.push((step, loss));
            step += 1;
        }
    }
    model.params.quantize_f32();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 1,
            d_ffn: 12,
            levels: 4,
            neighbors: 2,
            input_dim: 5,
            ..ModelConfig::desk()
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, l: usize) -> TokenSequence {
        let mut t = vec![rng.random_range(0..6u8)];
        t.extend((1..l).map(|_| rng.random_range(0..4u8)));
        TokenSequence::new(t).unwrap()
    }

    pub(crate) fn random_input(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> EncoderInput<f64> {
        EncoderInput {
            query: (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            neighbors: (0..cfg.neighbors)
                .map(|_| NeighborContext {
                    embedding: (0..cfg.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    tokens: random_tokens(rng, cfg.levels),
                })
                .collect(),
            metadata: None,
        }
    }

    #[test]
    fn weights_sum_for_21_levels() {
        let w = ModelConfig::desk().position_weights();
        assert_eq!(w.len(), 21);
        assert!((w.iter().sum::<f64>() - 31.5).abs() < 1e-12);
        assert_eq!(w[0], 2.0);
        assert!((w[20] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn step_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = tiny_cfg();
        let m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let inp = random_input(&mut rng, &cfg);
        let mem = m.encode(&inp).unwrap();
        assert_eq!(mem.len, cfg.base_slots());
        assert_eq!(m.decode_step(&[], &mem).unwrap().valid_count(), 6);
        let d = m.decode_step(&[5, 1], &mem).unwrap();
        assert_eq!(d.valid_count(), 4);
        let s: f64 = d.probs_at(1.0).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(m.decode_step(&[0, 1, 2, 3], &mem).is_err());
        assert!(m.decode_step(&[0, 4], &mem).is_err());
    }

    #[test]
    fn incremental_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let inp = random_input(&mut rng, &cfg);
        let mem = m.encode(&inp).unwrap();
        let pm = m.prepare_memory(&mem);
        let mut st = m.start_state();
        let seq = [3u8, 1, 0, 2];
        let mut prev = None;
        for s in 0..4 {
            let inc = m.step_incremental(&pm, &mut st, prev);
            let full = m.decode_step(&seq[..s], &mem).unwrap();
            for (a, b) in inc.logits.iter().zip(&full.logits) {
                assert!(a == b || (a - b).abs() < 1e-12, "{a} vs {b}");
            }
            prev = Some(seq[s]);
        }
    }

    #[test]
    fn causal_prefix_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_cfg();
        let m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let inp = random_input(&mut rng, &cfg);
        let mem = m.encode(&inp).unwrap();
        // Logits at step 1 from the full teacher-forced pass do not depend on
        // tokens at positions >= 1.
        let (a, ..) = m.decode_full(&[2, 0, 0], 4, &mem);
        let (b, ..) = m.decode_full(&[2, 3, 1], 4, &mem);
        assert_eq!(&a[..2 * VOCAB], &b[..2 * VOCAB]);
    }

    #[test]
    fn residual_identity_when_branches_zeroed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = tiny_cfg();
        let mut m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        m.zero_residual_branches();
        let inp = random_input(&mut rng, &cfg);
        let mem = m.encode(&inp).unwrap();
        let (x0, ..) = m.embed(&inp);
        assert_eq!(mem.rows, x0);
    }

    #[test]
    fn neighbor_block_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_cfg();
        let mut m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let inp = random_input(&mut rng, &cfg);
        let mem = m.encode(&inp).unwrap();
        let d = cfg.d_model;
        let block = 1 + cfg.levels;
        // Swap blocks 0 and 1 in the input and in the positional table.
        let mut swapped = inp.clone();
        swapped.neighbors.swap(0, 1);
        let pos = m.params.get_mut(m.enc_pos);
        for r in 0..block {
            let (a, b) = (2 + r, 2 + block + r);
            for c in 0..d {
                pos.swap(a * d + c, b * d + c);
            }
        }
        let mem2 = m.encode(&swapped).unwrap();
        for r in 0..mem.len {
            let src = if (2..2 + block).contains(&r) {
                r + block
            } else if (2 + block..2 + 2 * block).contains(&r) {
                r - block
            } else {
                r
            };
            for c in 0..d {
                let (x, y) = (mem.rows[r * d + c], mem2.rows[src * d + c]);
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_token_table_reaches_every_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = tiny_cfg();
        let mut m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        assert_eq!(
            m.params.tensors().iter().filter(|t| t.name.contains("token")).count(),
            1
        );
        let mut inp = random_input(&mut rng, &cfg);
        inp.neighbors[0].tokens = TokenSequence::new(vec![3, 3, 3, 3]).unwrap();
        let (x0, n, _) = m.embed(&inp);
        let dec0 = m.decoder_inputs(&[3, 3, 3], 4);
        let d = cfg.d_model;
        let tok = m.token_embedding;
        m.params.get_mut(tok)[3 * d] += 1.0;
        let (x1, ..) = m.embed(&inp);
        let dec1 = m.decoder_inputs(&[3, 3, 3], 4);
        for s in 0..4 {
            let r = 3 + s;
            assert!((x1[r * d] - x0[r * d] - 1.0).abs() < 1e-12, "encoder slot {r}");
        }
        for r in 1..4 {
            assert!((dec1[r * d] - dec0[r * d] - 1.0).abs() < 1e-12, "decoder step {r}");
        }
        assert_eq!(n, cfg.base_slots());
    }

    #[test]
    fn input_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cfg = tiny_cfg();
        let m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let mut inp = random_input(&mut rng, &cfg);
        inp.neighbors.pop();
        assert!(m.encode(&inp).is_err());
        let mut inp = random_input(&mut rng, &cfg);
        inp.query.push(0.0);
        assert!(m.encode(&inp).is_err());
        let mut bad = cfg.clone();
        bad.n_heads = 3;
        assert!(SeqModel::<f64>::new(bad).is_err());
    }

    #[test]
    fn metadata_slots_are_optional() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ModelConfig {
            query_metadata_slots: true,
            metadata_dim: 3,
            ..tiny_cfg()
        };
        let m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let mut inp = random_input(&mut rng, &cfg);
        assert_eq!(m.encode(&inp).unwrap().len, cfg.base_slots());
        inp.metadata = Some([vec![0.1, 0.2, 0.3], vec![0.0, -1.0, 0.5]]);
        assert_eq!(m.encode(&inp).unwrap().len, cfg.base_slots() + 2);
        let t = random_tokens(&mut rng, cfg.levels);
        assert!(m.sequence_loss(&[(inp, t)]).is_ok());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gtsm");
        let mut m = SeqModel::<f32>::new(tiny_cfg()).unwrap();
        m.params.quantize_f32();
        m.save(&path).unwrap();
        let back = SeqModel::<f32>::load(&path).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
    }

    #[test]
    fn full_model_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let cfg = ModelConfig {
            query_metadata_slots: true,
            metadata_dim: 3,
            ..tiny_cfg()
        };
        let mut m = SeqModel::<f64>::new(cfg.clone()).unwrap();
        let batch: Vec<_> = (0..3)
            .map(|i| {
                let mut inp = random_input(&mut rng, &cfg);
                if i == 0 {
                    inp.metadata = Some([vec![0.3, -0.2, 0.9], vec![0.5, 0.1, -0.4]]);
                }
                (inp, random_tokens(&mut rng, cfg.levels))
            })
            .collect();
        let (_, g) = m.sequence_loss(&batch).unwrap();
        let h = 1e-5;
        for ti in 0..m.params.len() {
            let len = m.params.tensors()[ti].data.len();
            for k in 0..len.min(6) {
                let idx = (k * 7919) % len;
                let orig = m.params.tensors()[ti].data[idx];
                m.params.tensors_mut()[ti].data[idx] = orig + h;
                let lp = m.sequence_loss(&batch).unwrap().0;
                m.params.tensors_mut()[ti].data[idx] = orig - h;
                let lm = m.sequence_loss(&batch).unwrap().0;
                m.params.tensors_mut()[ti].data[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.data[ti][idx];
                let diff = (fd - an).abs();
                let rel = diff / fd.abs().max(an.abs()).max(1e-12);
                assert!(
                    diff < 1e-8 || rel < 1e-4,
                    "{}[{idx}]: analytic {an} vs fd {fd}",
                    m.params.tensors()[ti].name
                );
            }
        }
    }
}
