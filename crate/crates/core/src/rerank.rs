//! Choosing one location from a candidate pool.
//!
//! Every selector returns the index of the chosen candidate; ties go to the
//! lowest index. The judge selector delegates to an external multimodal
//! model through a [`JudgeTransport`] and falls back to log-probability
//! selection when the endpoint fails or answers with something unusable.
//!
//! Judge answers are parsed with the first match of
//! `([-+]?\d+(?:\.\d+)?)\s*,\s*([-+]?\d+(?:\.\d+)?)`, read as `lat, lon`.
//! In pool-selection mode a bare integer answer `N` (optionally `[N]` or
//! `#N`) is also accepted and names candidate `N` of the 1-based list.

use std::io::Write;
use std::path::PathBuf;
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::align::AlignModel;
use crate::decode::{Candidate, CandidatePool};
use crate::error::{Error, Result};
use crate::geocell::{prefix_len, LatLon, TokenSequence, NUM_FACES};
use crate::geodesy::haversine_km;
use crate::nn::{AdamW, AdamWConfig, ParamStore};

/// Candidates closer than this to the truth fall in the best bin.
pub const REWARD_BIN_KM: f64 = 200.0;
pub const REWARD_MAGIC: &[u8; 4] = b"GTRM";

fn nonempty(pool: &CandidatePool) -> Result<()> {
    if pool.candidates.is_empty() {
        Err(Error::invalid("candidate pool is empty"))
    } else {
        Ok(())
    }
}

/// Index of the first maximum of `score` over the pool.
fn argmax_by(pool: &CandidatePool, score: impl Fn(&Candidate) -> f64) -> Result<usize> {
    nonempty(pool)?;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in pool.candidates.iter().enumerate() {
        let s = score(c);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

pub fn select_logprob(pool: &CandidatePool) -> Result<usize> {
    argmax_by(pool, |c| c.logprob)
}

/// Cosine similarity between each candidate's location embedding and the
/// query's gps-aligned image embedding.
pub fn select_similarity(pool: &CandidatePool, query_gps: &[f64], align: &AlignModel) -> Result<usize> {
    nonempty(pool)?;
    let qn = query_gps.iter().map(|v| v * v).sum::<f64>().sqrt();
    if qn == 0.0 {
        return Err(Error::invalid("query embedding has zero norm"));
    }
    let locs: Vec<LatLon> = pool.candidates.iter().map(|c| c.location).collect();
    let embs = align.encode_gps_batch(&locs);
    let sims: Vec<f64> = embs
        .iter()
        .map(|e| {
            let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if en == 0.0 {
                return 0.0;
            }
            e.iter().zip(query_gps).map(|(a, b)| a * b).sum::<f64>() / (qn * en)
        })
        .collect();
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Closest candidate to the ground truth (evaluation only).
pub fn select_ideal(pool: &CandidatePool, truth: LatLon) -> Result<usize> {
    argmax_by(pool, |c| -haversine_km(c.location, truth))
}

/// Error bin of a candidate: 0 if strictly closer than 200 km, else 1.
pub fn reward_label(candidate: LatLon, truth: LatLon) -> usize {
    usize::from(haversine_km(candidate, truth) >= REWARD_BIN_KM)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Training queries whose pools are labelled (0 = all).
    pub queries: usize,
    pub pool_size: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            queries: 1000,
            pool_size: 10,
            temperature: 0.7,
            epochs: 200,
            seed: 41,
            optimizer: AdamWConfig {
                lr: 0.05,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Linear softmax classifier over the two error bins.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub levels: usize,
    /// 2 x features, then 2 biases
    pub params: ParamStore<f64>,
}

/// Candidate features: one-hot tokens (levels x 6), the log-probability
/// divided by the number of levels, and for every prefix length `l` the
/// fraction of retrieved neighbours sharing at least `l` leading tokens.
pub fn reward_features(candidate: &Candidate, neighbors: &[TokenSequence]) -> Vec<f64> {
    let levels = candidate.tokens.len();
    let v = NUM_FACES as usize;
    let mut f = vec![0.0; levels * v + 1 + levels];
    for (s, &t) in candidate.tokens.as_slice().iter().enumerate() {
        f[s * v + t as usize] = 1.0;
    }
    f[levels * v] = candidate.logprob / levels as f64;
    if !neighbors.is_empty() {
        let base = levels * v + 1;
        for n in neighbors {
            let shared = prefix_len(candidate.tokens.as_slice(), n.as_slice());
            for l in 0..shared {
                f[base + l] += 1.0;
            }
        }
        let m = neighbors.len() as f64;
        for x in &mut f[base..] {
            *x /= m;
        }
    }
    f
}

pub fn reward_feature_dim(levels: usize) -> usize {
    levels * NUM_FACES as usize + 1 + levels
}

impl RewardModel {
    pub fn new(levels: usize) -> Self {
        let mut params = ParamStore::new();
        params.zeros("w", vec![2, reward_feature_dim(levels)]);
        params.zeros("b", vec![2]);
        Self { levels, params }
    }

    fn logits(&self, x: &[f64]) -> [f64; 2] {
        let t = self.params.tensors();
        let (w, b) = (&t[0].data, &t[1].data);
        let d = x.len();
        let mut out = [b[0], b[1]];
        for (k, o) in out.iter_mut().enumerate() {
            *o += w[k * d..(k + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        out
    }

    /// Bin probabilities `[p(<200 km), p(>=200 km)]`.
    pub fn probs(&self, x: &[f64]) -> [f64; 2] {
        let [a, b] = self.logits(x);
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        [ea / (ea + eb), eb / (ea + eb)]
    }

    /// Full-batch AdamW on the mean cross-entropy.
    pub fn fit(levels: usize, features: &[Vec<f64>], labels: &[usize], cfg: &RewardConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid("reward training needs one label per feature vector"));
        }
        let d = reward_feature_dim(levels);
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::invalid(format!("reward features must have {d} entries")));
        }
        let positives = labels.iter().filter(|&&l| l == 0).count();
        if positives == 0 || positives == labels.len() {
            return Err(Error::data(format!(
                "reward labels are all in bin {}; cannot fit a two-bin classifier",
                labels[0]
            )));
        }
        let mut model = Self::new(levels);
        let mut opt = AdamW::new(cfg.optimizer, &model.params);
        let n = features.len() as f64;
        for epoch in 0..cfg.epochs {
            let mut g = model.params.zero_grads();
            let mut loss = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let p = model.probs(x);
                loss -= p[y].max(1e-300).ln() / n;
                for k in 0..2 {
                    let delta = (p[k] - f64::from(u8::from(k == y))) / n;
                    let gw = g.get_mut(crate::nn::ParamId(0));
                    for (gi, &xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *gi += delta * xi;
                    }
                    g.get_mut(crate::nn::ParamId(1))[k] += delta;
                }
            }
            if !loss.is_finite() {
                return Err(Error::numerical(format!("reward loss diverged at epoch {epoch}")));
            }
            opt.step(&mut model.params, &g);
        }
        Ok(model)
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(x, &y)| {
                let p = self.probs(x);
                usize::from(p[1] > p[0]) == y
            })
            .count();
        hits as f64 / features.len().max(1) as f64
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.params
            .write_checkpoint(REWARD_MAGIC, std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(levels: usize, path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
        let store = ParamStore::<f64>::read_checkpoint(REWARD_MAGIC, std::io::BufReader::new(f))?;
        let mut m = Self::new(levels);
        m.params.load_from(&store)?;
        Ok(m)
    }
}

/// Highest probability of the best (< 200 km) bin.
pub fn select_reward(pool: &CandidatePool, rm: &RewardModel, neighbors: &[TokenSequence]) -> Result<usize> {
    argmax_by(pool, |c| rm.probs(&reward_features(c, neighbors))[0])
}

/// Labels every candidate of a pool by its error bin.
pub fn label_pool(pool: &CandidatePool, truth: LatLon) -> Vec<usize> {
    pool.candidates
        .iter()
        .map(|c| reward_label(c.location, truth))
        .collect()
}

/// Deterministic per-query seed for reward-model pools.
pub fn reward_pool_seed(cfg: &RewardConfig, query_id: u64) -> u64 {
    crate::synthworld::stream_seed(cfg.seed, query_id)
}

/// Shuffles the (feature, label) pairs with the reward seed; used to
/// subsample training queries reproducibly.
pub fn reward_subset(ids: &[u64], cfg: &RewardConfig) -> Vec<u64> {
    use rand::seq::SliceRandom;
    let mut v = ids.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    if cfg.queries > 0 {
        v.truncate(cfg.queries);
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    PoolSelection,
    FreeGeneration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeConfig {
    pub endpoint: String,
    pub model: String,
    pub mode: JudgeMode,
    /// Overrides the bundled pool-selection template.
    pub pool_selection_template: Option<PathBuf>,
    /// Overrides the bundled free-generation template.
    pub free_generation_template: Option<PathBuf>,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/v1/judge".into(),
            model: "judge".into(),
            mode: JudgeMode::PoolSelection,
            pool_selection_template: None,
            free_generation_template: None,
            timeout_secs: 30,
            retries: 2,
        }
    }
}

pub const POOL_SELECTION_TEMPLATE: &str = include_str!("../prompts/pool_selection_v1.txt");
pub const FREE_GENERATION_TEMPLATE: &str = include_str!("../prompts/free_generation_v1.txt");

impl JudgeConfig {
    pub fn template(&self) -> Result<String> {
        let (path, bundled) = match self.mode {
            JudgeMode::PoolSelection => (&self.pool_selection_template, POOL_SELECTION_TEMPLATE),
            JudgeMode::FreeGeneration => (&self.free_generation_template, FREE_GENERATION_TEMPLATE),
        };
        match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read judge template {}: {e}", p.display()))),
            None => Ok(bundled.to_string()),
        }
    }
}

/// Fills `{count}` and `{candidates}`; lines starting with `#` are dropped.
pub fn render_prompt(template: &str, pool: &CandidatePool) -> String {
    let list: Vec<String> = pool
        .candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {:.6}, {:.6}", i + 1, c.location.lat(), c.location.lon()))
        .collect();
    template
        .lines()
        .filter(|l| !l.starts_with('#'))
        .collect::<Vec<_>>()
        .join("\n")
        .replace("{count}", &pool.candidates.len().to_string())
        .replace("{candidates}", &list.join("\n"))
}

/// JSON body posted to the judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub model: String,
    pub prompt: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub image_base64: Option<String>,
}

pub trait JudgeTransport: Sync {
    fn complete(&self, request: &JudgeRequest) -> Result<String>;
}

/// HTTP POST transport. The reply may be plain text or a JSON object with
/// a string field `response`, `text`, or `content`.
pub struct HttpTransport {
    url: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: &str, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            url: url.to_string(),
            agent,
        }
    }
}

impl JudgeTransport for HttpTransport {
    fn complete(&self, request: &JudgeRequest) -> Result<String> {
        let body = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| Error::Transport(e.to_string()))?
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Transport(e.to_string()))?;
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(&body) {
            for key in ["response", "text", "content"] {
                if let Some(serde_json::Value::String(s)) = map.get(key) {
                    return Ok(s.clone());
                }
            }
        }
        Ok(body)
    }
}

static COORD_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"([-+]?\d+(?:\.\d+)?)\s*,\s*([-+]?\d+(?:\.\d+)?)").expect("valid regex"));
static INDEX_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*[\[#]?(\d+)\]?\s*\.?\s*$").expect("valid regex"));

/// First `lat, lon` decimal pair in `text`, if it is a valid coordinate.
pub fn parse_coordinate(text: &str) -> Option<LatLon> {
    let caps = COORD_RE.captures(text)?;
    let lat: f64 = caps[1].parse().ok()?;
    let lon: f64 = caps[2].parse().ok()?;
    if !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    LatLon::new(lat, lon).ok()
}

/// Pool member named by a judge answer (coordinate or 1-based index).
pub fn match_pool_answer(text: &str, pool: &CandidatePool) -> Option<usize> {
    if let Some(p) = parse_coordinate(text) {
        return pool.candidates.iter().position(|c| {
            let dlon = (c.location.lon() - p.lon() + 540.0).rem_euclid(360.0) - 180.0;
            (c.location.lat() - p.lat()).abs() <= 1e-6 && dlon.abs() <= 1e-6
        });
    }
    let caps = INDEX_RE.captures(text)?;
    let k: usize = caps[1].parse().ok()?;
    (1..=pool.candidates.len()).contains(&k).then(|| k - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub location: LatLon,
    /// Pool index of the answer (always set in pool-selection mode).
    pub index: Option<usize>,
    /// True when the judge failed and log-probability selection was used.
    pub fallback: bool,
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    query_id: u64,
    mode: JudgeMode,
    attempt: u32,
    prompt: &'a str,
    response: Option<&'a str>,
    error: Option<String>,
    fallback: bool,
    lat: Option<f64>,
    lon: Option<f64>,
}

/// Shared JSON Lines audit sink.
pub struct AuditLog(Mutex<Box<dyn Write + Send>>);

impl AuditLog {
    pub fn new(w: impl Write + Send + 'static) -> Self {
        Self(Mutex::new(Box::new(w)))
    }

    fn record(&self, rec: &AuditRecord<'_>) {
        let mut w = self.0.lock().unwrap_or_else(|e| e.into_inner());
        if serde_json::to_writer(&mut *w, rec).is_ok() {
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }
}

/// Asks the judge to choose (or generate) a location for one query.
pub fn select_judge(
    query_id: u64,
    pool: &CandidatePool,
    image: Option<&[u8]>,
    cfg: &JudgeConfig,
    transport: &dyn JudgeTransport,
    audit: Option<&AuditLog>,
) -> Result<JudgeOutcome> {
    nonempty(pool)?;
    let prompt = render_prompt(&cfg.template()?, pool);
    let request = JudgeRequest {
        model: cfg.model.clone(),
        prompt,
        image_base64: image.map(|b| base64::engine::general_purpose::STANDARD.encode(b)),
    };
    let attempts = cfg.retries + 1;
    for attempt in 0..attempts {
        let reply = transport.complete(&request);
        let (parsed, error) = match &reply {
            Ok(text) => match cfg.mode {
                JudgeMode::PoolSelection => match match_pool_answer(text, pool) {
                    Some(i) => (Some((pool.candidates[i].location, Some(i))), None),
                    None => (None, Some("answer does not name a pool member".to_string())),
                },
                JudgeMode::FreeGeneration => match parse_coordinate(text) {
                    Some(p) => (Some((p, None)), None),
                    None => (None, Some("no coordinate in answer".to_string())),
                },
            },
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(log) = audit {
            log.record(&AuditRecord {
                query_id,
                mode: cfg.mode,
                attempt,
                prompt: &request.prompt,
                response: reply.as_deref().ok(),
                error: error.clone(),
                fallback: parsed.is_none() && (reply.is_ok() || attempt + 1 == attempts),
                lat: parsed.map(|(p, _)| p.lat()),
                lon: parsed.map(|(p, _)| p.lon()),
            });
        }
        if let Some((location, index)) = parsed {
            return Ok(JudgeOutcome {
                location,
                index,
                fallback: false,
            });
        }
        // Only transport failures are retried; a bad answer falls back at once.
        if reply.is_ok() {
            break;
        }
    }
    let i = select_logprob(pool)?;
    Ok(JudgeOutcome {
        location: pool.candidates[i].location,
        index: Some(i),
        fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geocell::tokenize;

    fn cand(lat: f64, lon: f64, logprob: f64) -> Candidate {
        let location = LatLon::new(lat, lon).unwrap();
        let tokens = tokenize(location, 21).unwrap();
        Candidate {
            location: crate::geocell::detokenize(&tokens),
            tokens,
            logprob,
        }
    }

    fn pool(c: Vec<Candidate>) -> CandidatePool {
        CandidatePool {
            candidates: c,
            seed: 0,
            temperature: 1.0,
        }
    }

    struct Fixed(&'static str);
    impl JudgeTransport for Fixed {
        fn complete(&self, _: &JudgeRequest) -> Result<String> {
            Ok(self.0.to_string())
        }
    }

    struct Down;
    impl JudgeTransport for Down {
        fn complete(&self, _: &JudgeRequest) -> Result<String> {
            Err(Error::Transport("connection refused".into()))
        }
    }

    #[test]
    fn logprob_and_ideal() {
        let p = pool(vec![
            cand(10.0, 10.0, -3.0),
            cand(20.0, 20.0, -1.0),
            cand(30.0, 30.0, -1.0),
        ]);
        assert_eq!(select_logprob(&p).unwrap(), 1);
        let truth = LatLon::new(29.0, 29.5).unwrap();
        assert_eq!(select_ideal(&p, truth).unwrap(), 2);
        assert!(select_logprob(&pool(vec![])).is_err());
        assert!(select_ideal(&pool(vec![]), truth).is_err());
    }

    #[test]
    fn reward_labels_boundary() {
        let a = LatLon::new(0.0, 0.0).unwrap();
        assert_eq!(reward_label(a, a), 0);
        // 200 km along the equator.
        let deg = 200.0 / crate::geocell::EARTH_RADIUS_KM;
        let b = LatLon::new(0.0, deg.to_degrees()).unwrap();
        assert!((haversine_km(a, b) - 200.0).abs() < 1e-9);
        let exact = (haversine_km(a, b) >= REWARD_BIN_KM) as usize;
        assert_eq!(reward_label(b, a), exact);
        let c = LatLon::new(0.0, deg.to_degrees() * 1.0001).unwrap();
        assert_eq!(reward_label(c, a), 1);
    }

    #[test]
    fn reward_separable_and_selection() {
        let levels = 21;
        let near = cand(10.0, 10.0, -5.0);
        let far = cand(-40.0, 120.0, -5.0);
        let neighbors = vec![near.tokens.clone(); 5];
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let (c, y) = if i % 2 == 0 { (&near, 0) } else { (&far, 1) };
            let mut c = c.clone();
            c.logprob = -1.0 - i as f64 * 0.1;
            feats.push(reward_features(&c, &neighbors));
            labels.push(y);
        }
        let rm = RewardModel::fit(levels, &feats, &labels, &RewardConfig::default()).unwrap();
        assert!(rm.accuracy(&feats, &labels) >= 0.99);
        let p = rm.probs(&feats[0]);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-9);
        let pl = pool(vec![far.clone(), near.clone(), far.clone()]);
        assert_eq!(select_reward(&pl, &rm, &neighbors).unwrap(), 1);
        let uniform = RewardModel::new(levels);
        assert_eq!(select_reward(&pl, &uniform, &neighbors).unwrap(), 0);
        assert!(RewardModel::fit(levels, &feats[..1], &labels[..1], &RewardConfig::default()).is_err());
    }

    #[test]
    fn coordinate_parsing() {
        let p = parse_coordinate("I think it is at 48.8566, 2.3522 (Paris).").unwrap();
        assert!((p.lat() - 48.8566).abs() < 1e-12 && (p.lon() - 2.3522).abs() < 1e-12);
        assert!(parse_coordinate("-33.9 ,  +151.2").is_some());
        assert!(parse_coordinate("no idea").is_none());
        assert!(parse_coordinate("95.0, 10.0").is_none());
    }

    #[test]
    fn judge_modes_and_fallback() {
        let p = pool(vec![
            cand(10.0, 10.0, -3.0),
            cand(20.0, 20.0, -1.0),
            cand(30.0, 30.0, -2.0),
            cand(40.0, 40.0, -4.0),
        ]);
        let cfg = JudgeConfig::default();
        let c3 = p.candidates[3].location;
        let answer: &'static str = Box::leak(format!("{:.7}, {:.7}", c3.lat(), c3.lon()).into_boxed_str());
        let out = select_judge(1, &p, None, &cfg, &Fixed(answer), None).unwrap();
        assert_eq!(out.index, Some(3));
        assert!(!out.fallback);
        let out = select_judge(1, &p, Some(b"img"), &cfg, &Fixed("lorem ipsum"), None).unwrap();
        assert!(out.fallback);
        assert_eq!(out.index, Some(1));
        let out = select_judge(1, &p, None, &cfg, &Fixed("12.5, 77.25"), None).unwrap();
        assert!(out.fallback, "coordinate outside the pool");
        let out = select_judge(1, &p, None, &cfg, &Down, None).unwrap();
        assert!(out.fallback);
        assert_eq!(
            select_judge(1, &p, None, &cfg, &Fixed("3"), None).unwrap().index,
            Some(2)
        );
        let free = JudgeConfig {
            mode: JudgeMode::FreeGeneration,
            ..JudgeConfig::default()
        };
        let out = select_judge(1, &p, None, &free, &Fixed("12.5, 77.25"), None).unwrap();
        assert!(!out.fallback);
        assert_eq!(out.location, LatLon::new(12.5, 77.25).unwrap());
    }

    #[test]
    fn prompt_lists_candidates() {
        let p = pool(vec![cand(10.0, 10.0, -3.0), cand(20.0, 20.0, -1.0)]);
        let text = render_prompt(POOL_SELECTION_TEMPLATE, &p);
        assert!(text.contains("Candidates (2)"));
        assert!(text.contains("2. 20.0"));
        assert!(!text.contains('#'));
    }

    #[test]
    fn audit_log_records_attempts() {
        #[derive(Clone, Default)]
        struct Buf(std::sync::Arc<Mutex<Vec<u8>>>);
        impl Write for Buf {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().unwrap().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let buf = Buf::default();
        let log = AuditLog::new(buf.clone());
        let p = pool(vec![cand(10.0, 10.0, -3.0)]);
        select_judge(9, &p, None, &JudgeConfig::default(), &Down, Some(&log)).unwrap();
        let text = String::from_utf8(buf.0.lock().unwrap().clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().last().unwrap().contains("\"fallback\":true"));
    }
}
