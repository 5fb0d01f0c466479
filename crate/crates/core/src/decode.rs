//! Autoregressive decoding: greedy, temperature sampling, candidate pools
//! and beam search.
//!
//! Decoders drive any [`StepModel`]; [`Conditioned`] adapts a trained
//! [`SeqModel`] with its key/value caches. Candidate log-probabilities are
//! always the model's own (temperature 1) natural-log probabilities, even
//! when tokens were drawn at another temperature.

use std::cmp::Ordering;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geocell::{detokenize, LatLon, TokenSequence};
use crate::nn::Real;
use crate::seqmodel::{DecoderState, Memory, PreparedMemory, SeqModel, StepDistribution};
use crate::synthworld::stream_seed;

/// Incremental next-token distributions.
pub trait StepModel: Sync {
    type State: Clone + Send;

    fn levels(&self) -> usize;
    fn start(&self) -> Self::State;
    /// Consumes the previous token (`None` at step 0) and returns the
    /// distribution for the next position.
    fn step(&self, state: &mut Self::State, prev: Option<u8>) -> StepDistribution;
}

/// A sequence model bound to one encoded query.
pub struct Conditioned<'a, T> {
    model: &'a SeqModel<T>,
    memory: PreparedMemory<T>,
}

impl<'a, T: Real> Conditioned<'a, T> {
    pub fn new(model: &'a SeqModel<T>, memory: &Memory<T>) -> Self {
        Self {
            model,
            memory: model.prepare_memory(memory),
        }
    }
}

impl<T: Real> StepModel for Conditioned<'_, T> {
    type State = DecoderState<T>;

    fn levels(&self) -> usize {
        self.model.cfg.levels
    }

    fn start(&self) -> Self::State {
        self.model.start_state()
    }

    fn step(&self, state: &mut Self::State, prev: Option<u8>) -> StepDistribution {
        self.model.step_incremental(&self.memory, state, prev)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub tokens: TokenSequence,
    /// Cumulative natural-log probability under the model.
    pub logprob: f64,
    pub location: LatLon,
}

impl Candidate {
    fn from_tokens(tokens: Vec<u8>, logprob: f64) -> Self {
        let tokens = TokenSequence::new(tokens).expect("decoder emits valid tokens");
        let location = detokenize(&tokens);
        Self {
            tokens,
            logprob,
            location,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePool {
    pub candidates: Vec<Candidate>,
    pub seed: u64,
    pub temperature: f64,
}

fn argmax(log_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in log_probs.iter().enumerate() {
        if v > log_probs[best] {
            best = i;
        }
    }
    best
}

/// Argmax token at every step; ties go to the lowest index.
pub fn greedy<M: StepModel>(model: &M) -> Candidate {
    let mut state = model.start();
    let mut tokens = Vec::with_capacity(model.levels());
    let mut lp = 0.0;
    let mut prev = None;
    for _ in 0..model.levels() {
        let logp = model.step(&mut state, prev).log_probs();
        let k = argmax(&logp);
        lp += logp[k];
        tokens.push(k as u8);
        prev = Some(k as u8);
    }
    Candidate::from_tokens(tokens, lp)
}

/// Inverse-CDF draw from `probs` using one uniform variate.
fn draw<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// One draw per step from `softmax(logits / temperature)` over valid tokens.
pub fn sample<M: StepModel, R: Rng>(model: &M, temperature: f64, rng: &mut R) -> Result<Candidate> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut state = model.start();
    let mut tokens = Vec::with_capacity(model.levels());
    let mut lp = 0.0;
    let mut prev = None;
    for _ in 0..model.levels() {
        let dist = model.step(&mut state, prev);
        let k = draw(&dist.probs_at(temperature), rng);
        lp += dist.log_probs()[k];
        tokens.push(k as u8);
        prev = Some(k as u8);
    }
    Ok(Candidate::from_tokens(tokens, lp))
}

/// Generator for candidate `index` of a pool seeded with `seed`.
pub fn candidate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, index as u64))
}

/// `k` independent samples, each from its own derived stream, in draw order.
pub fn sample_pool<M: StepModel>(model: &M, temperature: f64, k: usize, seed: u64) -> Result<CandidatePool> {
    if k == 0 {
        return Err(Error::invalid("pool size must be at least 1"));
    }
    let candidates = (0..k)
        .into_par_iter()
        .map(|i| sample(model, temperature, &mut candidate_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool {
        candidates,
        seed,
        temperature,
    })
}

/// Log-probability descending, then lexicographic token order.
fn beam_order(a_tokens: &[u8], a_lp: f64, b_tokens: &[u8], b_lp: f64) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a_tokens.cmp(b_tokens))
}

/// Width-`width` beam search; returns candidates sorted by log-probability
/// (descending), ties in lexicographic token order. The width is clamped
/// to the number of available paths.
pub fn beam_search<M: StepModel>(model: &M, width: usize) -> Result<Vec<Candidate>> {
    if width == 0 {
        return Err(Error::invalid("beam width must be at least 1"));
    }
    struct Beam<S> {
        tokens: Vec<u8>,
        logprob: f64,
        state: S,
        next: Vec<f64>,
    }
    let mut state = model.start();
    let next = model.step(&mut state, None).log_probs();
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        logprob: 0.0,
        state,
        next,
    }];
    let levels = model.levels();
    for s in 0..levels {
        let mut children: Vec<(usize, u8, Vec<u8>, f64)> = Vec::new();
        for (bi, b) in beams.iter().enumerate() {
            for (k, &lp) in b.next.iter().enumerate() {
                if lp.is_finite() {
                    let mut t = b.tokens.clone();
                    t.push(k as u8);
                    children.push((bi, k as u8, t, b.logprob + lp));
                }
            }
        }
        children.sort_by(|a, b| beam_order(&a.2, a.3, &b.2, b.3));
        children.truncate(width);
        let last = s + 1 == levels;
        beams = children
            .into_iter()
            .map(|(bi, k, tokens, logprob)| {
                let mut state = beams[bi].state.clone();
                let next = if last {
                    Vec::new()
                } else {
                    model.step(&mut state, Some(k)).log_probs()
                };
                Beam {
                    tokens,
                    logprob,
                    state,
                    next,
                }
            })
            .collect();
    }
    Ok(beams
        .into_iter()
        .map(|b| Candidate::from_tokens(b.tokens, b.logprob))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub query_id: u64,
    pub rank: usize,
    pub tokens: String,
    pub lat: f64,
    pub lon: f64,
    pub logprob: f64,
}

/// Writes one JSON line per candidate in draw order.
pub fn write_pool_jsonl<W: Write>(mut w: W, query_id: u64, pool: &CandidatePool) -> Result<()> {
    for (rank, c) in pool.candidates.iter().enumerate() {
        let rec = PoolRecord {
            query_id,
            rank,
            tokens: c.tokens.to_string(),
            lat: c.location.lat(),
            lon: c.location.lon(),
            logprob: c.logprob,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Step model given by an explicit function of the prefix; used for toy
/// models with known logits.
pub struct FnModel<F> {
    pub levels: usize,
    pub logits: F,
}

impl<F> StepModel for FnModel<F>
where
    F: Fn(&[u8]) -> Vec<f64> + Sync,
{
    type State = Vec<u8>;

    fn levels(&self) -> usize {
        self.levels
    }

    fn start(&self) -> Vec<u8> {
        Vec::new()
    }

    fn step(&self, state: &mut Vec<u8>, prev: Option<u8>) -> StepDistribution {
        if let Some(t) = prev {
            state.push(t);
        }
        StepDistribution::from_raw(&(self.logits)(state), state.len())
    }
}

/// Every valid sequence with its log-probability, sorted like beam output.
pub fn enumerate_all<M: StepModel>(model: &M) -> Vec<Candidate> {
    fn rec<M: StepModel>(
        model: &M,
        state: M::State,
        prev: Option<u8>,
        tokens: Vec<u8>,
        lp: f64,
        out: &mut Vec<(Vec<u8>, f64)>,
    ) {
        if tokens.len() == model.levels() {
            out.push((tokens, lp));
            return;
        }
        let mut st = state;
        let logp = model.step(&mut st, prev).log_probs();
        for (k, &l) in logp.iter().enumerate() {
            if l.is_finite() {
                let mut t = tokens.clone();
                t.push(k as u8);
                rec(model, st.clone(), Some(k as u8), t, lp + l, out);
            }
        }
    }
    let mut out = Vec::new();
    rec(model, model.start(), None, Vec::new(), 0.0, &mut out);
    out.sort_by(|a, b| beam_order(&a.0, a.1, &b.0, b.1));
    out.into_iter().map(|(t, lp)| Candidate::from_tokens(t, lp)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqmodel::{EncoderInput, ModelConfig, NeighborContext};

    fn hashed_logits(prefix: &[u8]) -> Vec<f64> {
        let mut h = 0x9e37_79b9_7f4a_7c15u64;
        for &t in prefix {
            h = crate::synthworld::mix64(h ^ (t as u64 + 1));
        }
        (0..6)
            .map(|k| {
                let v = crate::synthworld::mix64(h.wrapping_add(k));
                (v >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            })
            .collect()
    }

    type Toy = FnModel<fn(&[u8]) -> Vec<f64>>;

    fn toy(levels: usize) -> Toy {
        FnModel {
            levels,
            logits: hashed_logits as fn(&[u8]) -> Vec<f64>,
        }
    }

    #[test]
    fn two_step_greedy_matches_enumeration() {
        let m = FnModel {
            levels: 2,
            logits: |p: &[u8]| match p {
                [] => vec![0.0, 1.0, 3.0, 0.5, 2.9, 0.0],
                [2] => vec![0.0, 0.2, 0.1, 2.0, 9.0, 9.0],
                _ => vec![0.0; 6],
            },
        };
        let g = greedy(&m);
        assert_eq!(g.tokens.as_slice(), &[2, 3]);
        // The greedy path is not necessarily optimal but here it is.
        let all = enumerate_all(&m);
        assert_eq!(all.len(), 24);
        assert_eq!(all[0].tokens, g.tokens);
        assert!((g.logprob - all[0].logprob).abs() < 1e-12);
    }

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let m = FnModel {
            levels: 2,
            logits: |_: &[u8]| vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
        };
        assert_eq!(greedy(&m).tokens.as_slice(), &[0, 0]);
        assert_eq!(beam_search(&m, 1).unwrap()[0].tokens.as_slice(), &[0, 0]);
    }

    #[test]
    fn full_width_beam_is_exhaustive() {
        let m = toy(3);
        let all = enumerate_all(&m);
        assert_eq!(all.len(), 96);
        let beams = beam_search(&m, 96).unwrap();
        assert_eq!(beams, all);
        let clamped = beam_search(&m, 500).unwrap();
        assert_eq!(clamped.len(), 96);
    }

    #[test]
    fn beam_dominates_greedy_and_is_sorted() {
        let m = toy(5);
        let g = greedy(&m);
        for b in 1..8 {
            let beams = beam_search(&m, b).unwrap();
            assert!(beams[0].logprob >= g.logprob - 1e-12);
            assert!(beams.windows(2).all(|w| w[0].logprob >= w[1].logprob));
            assert!(beams.iter().all(|c| c.logprob <= 0.0));
        }
        assert_eq!(beam_search(&m, 1).unwrap()[0].tokens, g.tokens);
    }

    #[test]
    fn low_temperature_sampling_is_greedy() {
        let m = toy(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample(&m, 1e-6, &mut rng).unwrap().tokens, greedy(&m).tokens);
        assert!(sample(&m, 0.0, &mut rng).is_err());
        assert!(sample(&m, -1.0, &mut rng).is_err());
    }

    #[test]
    fn pool_is_deterministic_and_matches_streams() {
        let m = toy(6);
        let a = sample_pool(&m, 0.7, 12, 99).unwrap();
        let b = sample_pool(&m, 0.7, 12, 99).unwrap();
        assert_eq!(a, b);
        let single = sample(&m, 0.7, &mut candidate_rng(99, 0)).unwrap();
        assert_eq!(sample_pool(&m, 0.7, 1, 99).unwrap().candidates[0], single);
        for (i, c) in a.candidates.iter().enumerate() {
            assert_eq!(*c, sample(&m, 0.7, &mut candidate_rng(99, i)).unwrap());
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| sample_pool(&m, 0.7, 12, 99).unwrap());
        assert_eq!(a, c);
        assert!(sample_pool(&m, 0.7, 0, 99).is_err());
    }

    #[test]
    fn candidate_logprob_factorizes_over_model_steps() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers_enc: 1,
            n_layers_dec: 2,
            d_ffn: 8,
            levels: 5,
            neighbors: 1,
            input_dim: 3,
            ..ModelConfig::desk()
        };
        let model = SeqModel::<f64>::new(cfg).unwrap();
        let input = EncoderInput {
            query: vec![0.3, -0.1, 0.8],
            neighbors: vec![NeighborContext {
                embedding: vec![0.5, 0.5, -0.2],
                tokens: TokenSequence::new(vec![4, 1, 2, 3, 0]).unwrap(),
            }],
            metadata: None,
        };
        let mem = model.encode(&input).unwrap();
        let cond = Conditioned::new(&model, &mem);
        let pool = sample_pool(&cond, 1.0, 5, 1).unwrap();
        for c in pool.candidates.iter().chain(std::iter::once(&greedy(&cond))) {
            let t = c.tokens.as_slice();
            let mut prod = 1.0;
            for s in 0..t.len() {
                prod *= model.decode_step(&t[..s], &mem).unwrap().probs_at(1.0)[t[s] as usize];
            }
            let rel = (prod - c.logprob.exp()).abs() / prod;
            assert!(rel < 1e-9, "{prod} vs {}", c.logprob.exp());
        }
    }

    #[test]
    fn pool_dump_lines() {
        let m = toy(3);
        let pool = sample_pool(&m, 1.0, 3, 5).unwrap();
        let mut buf = Vec::new();
        write_pool_jsonl(&mut buf, 42, &pool).unwrap();
        let lines: Vec<PoolRecord> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2].rank, 2);
        assert_eq!(lines[0].query_id, 42);
        assert_eq!(lines[1].tokens, pool.candidates[1].tokens.to_string());
    }
}
