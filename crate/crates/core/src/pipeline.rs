//! End-to-end commands over a run directory.
//!
//! Every command reads and writes fixed file names inside one directory,
//! records the resolved configuration in `config_<command>.toml`, and embeds the
//! configuration hash in the artifacts it emits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{train_align, write_loss_curve, AlignModel, AlignSample};
use crate::config::{DecodeMode, RunConfig, SelectorKind};
use crate::decode::{beam_search, greedy, sample_pool, write_pool_jsonl, CandidatePool, Conditioned};
use crate::error::{Error, Result};
use crate::gallery::{Gallery, GalleryEntry};
use crate::geocell::{tokenize, LatLon, TokenSequence};
use crate::geodesy::{evaluate as evaluate_metrics, haversine_km, median, AccuracyReport, STANDARD_THRESHOLDS_KM};
use crate::rerank::{
    label_pool, reward_features, reward_pool_seed, reward_subset, select_ideal, select_judge, select_logprob,
    select_reward, select_similarity, AuditLog, JudgeTransport, RewardModel,
};
use crate::seqmodel::{self, EncoderInput, NeighborContext, SeqModel};
use crate::synthworld::{generate, load_jsonl, save_jsonl, spherical_mean, stream_seed, SynthSample};

/// Fixed artifact names inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn train_data(&self) -> PathBuf {
        self.file("train.jsonl")
    }
    pub fn test_data(&self) -> PathBuf {
        self.file("test.jsonl")
    }
    pub fn align(&self) -> PathBuf {
        self.file("align.gtal")
    }
    pub fn gallery(&self) -> PathBuf {
        self.file("gallery.gtgl")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.gtsm")
    }
    pub fn reward(&self) -> PathBuf {
        self.file("reward.gtrm")
    }
    /// Takes the directory's advisory lock for the lifetime of the guard.
    pub fn lock(&self) -> Result<DirLock> {
        let path = self.file(".lock");
        match File::create_new(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::data(format!(
                "{} is locked by another invocation (remove {} if it is stale)",
                self.root.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }

    /// Records the resolved config used by `command` as
    /// `config_<command>.toml`, headed by its hash.
    pub fn record_config(&self, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
        let path = self.file(&format!("config_{command}.toml"));
        std::fs::write(&path, format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml()))?;
        Ok(path)
    }
}

pub struct DirLock {
    path: PathBuf,
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Generates the synthetic world and writes both splits.
pub fn cmd_gen(cfg: &RunConfig, dir: &RunDir) -> Result<(usize, usize)> {
    let splits = generate(&cfg.world)?;
    save_jsonl(&splits.train, &dir.train_data())?;
    save_jsonl(&splits.test, &dir.test_data())?;
    Ok((splits.train.len(), splits.test.len()))
}

pub fn align_samples(data: &[SynthSample]) -> Vec<AlignSample> {
    data.iter()
        .map(|s| AlignSample {
            image_feat: to_f64(&s.feat),
            location: s.location(),
            text: s.text.clone(),
        })
        .collect()
}

pub fn cmd_train_align(cfg: &RunConfig, dir: &RunDir) -> Result<AlignModel> {
    let train = load_jsonl(&dir.train_data())?;
    let mut model = AlignModel::new(cfg.align.clone())?;
    let curve = train_align(&mut model, &align_samples(&train))?;
    model.save(&dir.align())?;
    let mut w = BufWriter::new(File::create(dir.file("align_loss.csv"))?);
    writeln!(w, "# config_hash = {}", cfg.hash())?;
    write_loss_curve(&curve, &mut w)?;
    Ok(model)
}

/// Retrieval embeddings (`e_image`) of raw features.
pub fn embed_samples(align: &AlignModel, data: &[SynthSample]) -> Result<Vec<Vec<f32>>> {
    data.par_iter()
        .map(|s| {
            let (_, _, e) = align.project_image(&to_f64(&s.feat))?;
            Ok(e.iter().map(|&x| x as f32).collect())
        })
        .collect()
}

pub fn cmd_build_gallery(cfg: &RunConfig, dir: &RunDir) -> Result<Gallery> {
    let train = load_jsonl(&dir.train_data())?;
    let align = AlignModel::load(cfg.align.clone(), &dir.align())?;
    let embs = embed_samples(&align, &train)?;
    let entries = train
        .iter()
        .zip(embs)
        .map(|(s, e)| GalleryEntry::new(s.id, e, s.location(), cfg.model.levels))
        .collect::<Result<Vec<_>>>()?;
    let g = Gallery::build(entries)?;
    g.save(&dir.gallery())?;
    Ok(g)
}

/// Neighbour rows for every query (best first), `m` per query.
pub fn retrieve(
    gallery: &Gallery,
    queries: &[Vec<f32>],
    m: usize,
    exclude_self: Option<&[u64]>,
) -> Result<Vec<Vec<usize>>> {
    let exclude: Vec<Option<u64>> = match exclude_self {
        Some(ids) => ids.iter().map(|&id| Some(id)).collect(),
        None => vec![None; queries.len()],
    };
    Ok(gallery
        .top_m_batch(queries, m, &exclude)?
        .into_iter()
        .map(|(_, rows)| rows)
        .collect())
}

/// Encoder input from a query embedding and its neighbour rows.
pub fn encoder_input(gallery: &Gallery, query: &[f32], rows: &[usize]) -> EncoderInput<f32> {
    EncoderInput {
        query: query.to_vec(),
        neighbors: rows
            .iter()
            .map(|&r| NeighborContext {
                embedding: gallery.embedding(r).to_vec(),
                tokens: gallery.tokens(r).clone(),
            })
            .collect(),
        metadata: None,
    }
}

pub fn cmd_train_model(cfg: &RunConfig, dir: &RunDir, mut progress: impl FnMut(usize, f64)) -> Result<SeqModel<f32>> {
    let gallery = Gallery::load(&dir.gallery())?;
    if gallery.dim() != cfg.model.input_dim || gallery.levels() != cfg.model.levels {
        return Err(Error::Config(
            "gallery dimensions disagree with the model config".into(),
        ));
    }
    let align = if cfg.model.query_metadata_slots {
        Some(AlignModel::load(cfg.align.clone(), &dir.align())?)
    } else {
        None
    };
    let train = load_jsonl(&dir.train_data())?;
    let rows: Vec<usize> = train
        .iter()
        .map(|s| {
            gallery
                .row_of(s.id)
                .ok_or_else(|| Error::data(format!("training sample {} is missing from the gallery", s.id)))
        })
        .collect::<Result<_>>()?;
    let queries: Vec<Vec<f32>> = rows.iter().map(|&r| gallery.embedding(r).to_vec()).collect();
    let ids: Vec<u64> = train.iter().map(|s| s.id).collect();
    let context = retrieve(&gallery, &queries, cfg.model.neighbors, Some(&ids))?;
    let targets: Vec<TokenSequence> = rows.iter().map(|&r| gallery.tokens(r).clone()).collect();
    let metadata: Option<Vec<[Vec<f32>; 2]>> = align.as_ref().map(|a| {
        train
            .iter()
            .map(|s| {
                let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
                [cast(a.encode_gps(s.location())), cast(a.encode_text(&s.text))]
            })
            .collect()
    });
    let mut model = SeqModel::<f32>::new(cfg.model.clone())?;
    let curve = seqmodel::train(
        &mut model,
        train.len(),
        &targets,
        |i| {
            let mut inp = encoder_input(&gallery, &queries[i], &context[i]);
            inp.metadata = metadata.as_ref().map(|m| m[i].clone());
            inp
        },
        &cfg.train,
        &mut progress,
    )?;
    model.save(&dir.model())?;
    let mut w = BufWriter::new(File::create(dir.file("model_loss.csv"))?);
    writeln!(w, "# config_hash = {}", cfg.hash())?;
    write_loss_curve(&curve, &mut w)?;
    Ok(model)
}

/// Trained artifacts plus the embedded and retrieved test queries.
pub struct Inference {
    pub align: AlignModel,
    pub gallery: Gallery,
    pub model: Option<SeqModel<f32>>,
    pub queries: Vec<SynthSample>,
    pub embeddings: Vec<Vec<f32>>,
    /// max(M, knn_k) neighbour rows per query
    pub neighbors: Vec<Vec<usize>>,
}

impl Inference {
    pub fn load(cfg: &RunConfig, dir: &RunDir, need_model: bool) -> Result<Self> {
        let align = AlignModel::load(cfg.align.clone(), &dir.align())?;
        let gallery = Gallery::load(&dir.gallery())?;
        let model = if need_model {
            let m = SeqModel::<f32>::load(&dir.model())?;
            if m.cfg.levels != gallery.levels() || m.cfg.input_dim != gallery.dim() {
                return Err(Error::data("model checkpoint is incompatible with the gallery"));
            }
            Some(m)
        } else {
            None
        };
        let queries = load_jsonl(&dir.test_data())?;
        let embeddings = embed_samples(&align, &queries)?;
        let m = cfg.model.neighbors.max(cfg.predict.knn_k);
        let neighbors = retrieve(&gallery, &embeddings, m, None)?;
        Ok(Self {
            align,
            gallery,
            model,
            queries,
            embeddings,
            neighbors,
        })
    }

    fn model(&self) -> Result<&SeqModel<f32>> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::invalid("no sequence model loaded"))
    }

    fn input(&self, q: usize) -> Result<EncoderInput<f32>> {
        let m = self.model()?.cfg.neighbors;
        Ok(encoder_input(
            &self.gallery,
            &self.embeddings[q],
            &self.neighbors[q][..m],
        ))
    }

    fn neighbor_tokens(&self, q: usize) -> Result<Vec<TokenSequence>> {
        let m = self.model()?.cfg.neighbors;
        Ok(self.neighbors[q][..m]
            .iter()
            .map(|&r| self.gallery.tokens(r).clone())
            .collect())
    }

    /// Spherical mean of the top-`k` neighbour locations.
    pub fn knn(&self, q: usize, k: usize, sigma: Option<f64>) -> LatLon {
        let rows = &self.neighbors[q][..k];
        let locs: Vec<LatLon> = rows.iter().map(|&r| self.gallery.location(r)).collect();
        let weights: Vec<f64> = rows
            .iter()
            .map(|&r| match sigma {
                Some(s) => {
                    let sim: f64 = self
                        .gallery
                        .embedding(r)
                        .iter()
                        .zip(&self.embeddings[q])
                        .map(|(&a, &b)| a as f64 * b as f64)
                        .sum::<f64>()
                        / self.embeddings[q]
                            .iter()
                            .map(|&x| x as f64 * x as f64)
                            .sum::<f64>()
                            .sqrt();
                    (-(2.0 - 2.0 * sim).max(0.0) / (2.0 * s * s)).exp()
                }
                None => 1.0,
            })
            .collect();
        spherical_mean(&locs, &weights)
    }

    /// Candidate pool for query `q`; the seed is derived from the query id.
    pub fn pool(&self, q: usize, temperature: f64, k: usize, seed: u64) -> Result<CandidatePool> {
        let model = self.model()?;
        let mem = model.encode(&self.input(q)?)?;
        let cond = Conditioned::new(model, &mem);
        sample_pool(&cond, temperature, k, stream_seed(seed, self.queries[q].id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
    pub tokens: String,
    pub logprob: Option<f64>,
    pub mode: DecodeMode,
    pub selector: Option<SelectorKind>,
    pub fallback: bool,
    pub config_hash: String,
}

/// Everything a prediction run needs beyond the config.
#[derive(Default)]
pub struct PredictExtras<'a> {
    pub transport: Option<&'a dyn JudgeTransport>,
    pub reward: Option<&'a RewardModel>,
}

/// Predictions for every test query, in file order.
pub fn predict_all(
    cfg: &RunConfig,
    inf: &Inference,
    extras: &PredictExtras<'_>,
    pools_out: Option<&Path>,
    audit: Option<&AuditLog>,
) -> Result<Vec<Prediction>> {
    let p = &cfg.predict;
    let hash = cfg.hash();
    let levels = cfg.model.levels;
    if p.mode == DecodeMode::Pool {
        match p.selector {
            SelectorKind::Judge if extras.transport.is_none() => {
                return Err(Error::Config("judge selector requires a transport".into()))
            }
            SelectorKind::Reward if extras.reward.is_none() => {
                return Err(Error::Config("reward selector requires a trained reward model".into()))
            }
            _ => {}
        }
    }
    let results: Vec<Result<(Prediction, Option<CandidatePool>)>> = (0..inf.queries.len())
        .into_par_iter()
        .map(|q| {
            let id = inf.queries[q].id;
            let mut pred = Prediction {
                id,
                lat: 0.0,
                lon: 0.0,
                tokens: String::new(),
                logprob: None,
                mode: p.mode,
                selector: None,
                fallback: false,
                config_hash: hash.clone(),
            };
            let mut kept_pool = None;
            let (loc, tokens) = match p.mode {
                DecodeMode::Knn => {
                    let loc = inf.knn(q, p.knn_k, p.knn_sigma);
                    (loc, tokenize(loc, levels)?)
                }
                DecodeMode::Greedy | DecodeMode::Beam => {
                    let model = inf.model()?;
                    let mem = model.encode(&inf.input(q)?)?;
                    let cond = Conditioned::new(model, &mem);
                    let c = if p.mode == DecodeMode::Greedy {
                        greedy(&cond)
                    } else {
                        beam_search(&cond, p.beam_width)?.swap_remove(0)
                    };
                    pred.logprob = Some(c.logprob);
                    (c.location, c.tokens)
                }
                DecodeMode::Pool => {
                    let pool = inf.pool(q, p.temperature, p.pool_size, p.seed)?;
                    pred.selector = Some(p.selector);
                    let chosen = match p.selector {
                        SelectorKind::Logprob => Some(select_logprob(&pool)?),
                        SelectorKind::Ideal => Some(select_ideal(&pool, inf.queries[q].location())?),
                        SelectorKind::Similarity => {
                            let (_, eg, _) = inf.align.project_image(&to_f64(&inf.queries[q].feat))?;
                            Some(select_similarity(&pool, &eg, &inf.align)?)
                        }
                        SelectorKind::Reward => {
                            let rm = extras.reward.expect("checked above");
                            Some(select_reward(&pool, rm, &inf.neighbor_tokens(q)?)?)
                        }
                        SelectorKind::Judge => {
                            let t = extras.transport.expect("checked above");
                            let out = select_judge(id, &pool, None, &cfg.judge, t, audit)?;
                            pred.fallback = out.fallback;
                            match out.index {
                                Some(i) => Some(i),
                                None => {
                                    pred.lat = out.location.lat();
                                    pred.lon = out.location.lon();
                                    pred.tokens = tokenize(out.location, levels)?.to_string();
                                    None
                                }
                            }
                        }
                    };
                    let result = match chosen {
                        Some(i) => {
                            let c = &pool.candidates[i];
                            pred.logprob = Some(c.logprob);
                            (c.location, c.tokens.clone())
                        }
                        None => {
                            let loc = LatLon::new(pred.lat, pred.lon)?;
                            (loc, tokenize(loc, levels)?)
                        }
                    };
                    kept_pool = Some(pool);
                    result
                }
            };
            pred.lat = loc.lat();
            pred.lon = loc.lon();
            pred.tokens = tokens.to_string();
            Ok((pred, kept_pool))
        })
        .collect();
    let mut preds = Vec::with_capacity(results.len());
    let mut pool_writer = match pools_out {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };
    for r in results {
        let (pred, pool) = r?;
        if let (Some(w), Some(pool)) = (pool_writer.as_mut(), pool.as_ref()) {
            write_pool_jsonl(&mut *w, pred.id, pool)?;
        }
        preds.push(pred);
    }
    if let Some(mut w) = pool_writer {
        w.flush()?;
    }
    Ok(preds)
}

/// Artifact tag such as `greedy`, `beam5`, `pool30_t0.7_logprob`, `knn5`.
pub fn prediction_tag(cfg: &RunConfig) -> String {
    let p = &cfg.predict;
    match p.mode {
        DecodeMode::Greedy => "greedy".into(),
        DecodeMode::Beam => format!("beam{}", p.beam_width),
        DecodeMode::Knn => format!("knn{}", p.knn_k),
        DecodeMode::Pool => {
            let sel = serde_json::to_value(p.selector).expect("selector serializes");
            format!(
                "pool{}_t{}_{}",
                p.pool_size,
                p.temperature,
                sel.as_str().unwrap_or("selector")
            )
        }
    }
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = File::open(path).map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Prediction =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        LatLon::new(p.lat, p.lon).map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(p);
    }
    Ok(out)
}

/// Runs prediction and writes `predictions_<tag>.jsonl`.
pub fn cmd_predict(cfg: &RunConfig, dir: &RunDir, transport: Option<&dyn JudgeTransport>) -> Result<PathBuf> {
    let need_model = cfg.predict.mode != DecodeMode::Knn;
    let inf = Inference::load(cfg, dir, need_model)?;
    let reward = if cfg.predict.mode == DecodeMode::Pool && cfg.predict.selector == SelectorKind::Reward {
        Some(RewardModel::load(cfg.model.levels, &dir.reward())?)
    } else {
        None
    };
    let tag = prediction_tag(cfg);
    let pools = cfg.predict.dump_pools.then(|| dir.file(&format!("pools_{tag}.jsonl")));
    let audit = if cfg.predict.selector == SelectorKind::Judge {
        Some(AuditLog::new(BufWriter::new(File::create(
            dir.file("judge_audit.jsonl"),
        )?)))
    } else {
        None
    };
    let extras = PredictExtras {
        transport,
        reward: reward.as_ref(),
    };
    let preds = predict_all(cfg, &inf, &extras, pools.as_deref(), audit.as_ref())?;
    let path = dir.file(&format!("predictions_{tag}.jsonl"));
    write_predictions(&preds, &path)?;
    Ok(path)
}

/// Samples pools for training queries, labels them, and fits the reward
/// classifier.
pub fn cmd_train_reward(cfg: &RunConfig, dir: &RunDir) -> Result<(RewardModel, f64)> {
    let gallery = Gallery::load(&dir.gallery())?;
    let model = SeqModel::<f32>::load(&dir.model())?;
    let train = load_jsonl(&dir.train_data())?;
    let by_id: HashMap<u64, &SynthSample> = train.iter().map(|s| (s.id, s)).collect();
    let ids: Vec<u64> = train.iter().map(|s| s.id).collect();
    let chosen = reward_subset(&ids, &cfg.reward);
    let queries: Vec<Vec<f32>> = chosen
        .iter()
        .map(|id| {
            let row = gallery
                .row_of(*id)
                .ok_or_else(|| Error::data(format!("training sample {id} is missing from the gallery")))?;
            Ok(gallery.embedding(row).to_vec())
        })
        .collect::<Result<_>>()?;
    let m = model.cfg.neighbors;
    let context = retrieve(&gallery, &queries, m, Some(&chosen))?;
    type Labelled = (Vec<Vec<f64>>, Vec<usize>);
    let rows: Vec<Result<Labelled>> = chosen
        .par_iter()
        .enumerate()
        .map(|(i, id)| {
            let input = encoder_input(&gallery, &queries[i], &context[i]);
            let mem = model.encode(&input)?;
            let cond = Conditioned::new(&model, &mem);
            let pool = sample_pool(
                &cond,
                cfg.reward.temperature,
                cfg.reward.pool_size,
                reward_pool_seed(&cfg.reward, *id),
            )?;
            let neighbors: Vec<TokenSequence> = context[i].iter().map(|&r| gallery.tokens(r).clone()).collect();
            let feats = pool.candidates.iter().map(|c| reward_features(c, &neighbors)).collect();
            Ok((feats, label_pool(&pool, by_id[id].location())))
        })
        .collect();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for r in rows {
        let (f, l) = r?;
        feats.extend(f);
        labels.extend(l);
    }
    let rm = RewardModel::fit(model.cfg.levels, &feats, &labels, &cfg.reward)?;
    let acc = rm.accuracy(&feats, &labels);
    rm.save(&dir.reward())?;
    Ok((rm, acc))
}

/// Scores predictions against ground truth.
pub fn evaluate_predictions(preds: &[Prediction], truths: &[SynthSample]) -> Result<AccuracyReport> {
    let by_id: HashMap<u64, LatLon> = truths.iter().map(|s| (s.id, s.location())).collect();
    let mut seen = std::collections::HashSet::new();
    let mut p = Vec::with_capacity(preds.len());
    let mut t = Vec::with_capacity(preds.len());
    for pr in preds {
        if !seen.insert(pr.id) {
            return Err(Error::data(format!("duplicate prediction for id {}", pr.id)));
        }
        let truth = by_id
            .get(&pr.id)
            .ok_or_else(|| Error::data(format!("no ground truth for id {}", pr.id)))?;
        p.push(LatLon::new(pr.lat, pr.lon)?);
        t.push(*truth);
    }
    evaluate_metrics(&p, &t, &STANDARD_THRESHOLDS_KM)
}

/// Writes the report CSV, preceded by a config-hash comment line.
pub fn write_report(report: &AccuracyReport, config_hash: &str, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# config_hash = {config_hash}")?;
    report.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_evaluate(predictions: &Path, truths: &Path, out: &Path) -> Result<AccuracyReport> {
    let preds = read_predictions(predictions)?;
    let truths = load_jsonl(truths)?;
    let report = evaluate_predictions(&preds, &truths)?;
    let hash = preds.first().map(|p| p.config_hash.clone()).unwrap_or_default();
    if preds.iter().any(|p| p.config_hash != hash) {
        return Err(Error::data("predictions mix several config hashes"));
    }
    write_report(&report, &hash, out)?;
    Ok(report)
}

/// Median closest-in-pool error for each (pool size, temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub pool_sizes: Vec<usize>,
    pub temperatures: Vec<f64>,
    /// `medians[i][j]`: pool size `i`, temperature `j`.
    pub medians: Vec<Vec<f64>>,
    pub queries: usize,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, mut w: W, config_hash: &str) -> Result<()> {
        writeln!(w, "# config_hash = {config_hash}")?;
        write!(w, "k")?;
        for t in &self.temperatures {
            write!(w, ",T={t}")?;
        }
        writeln!(w)?;
        for (k, row) in self.pool_sizes.iter().zip(&self.medians) {
            write!(w, "{k}")?;
            for v in row {
                write!(w, ",{v:.6}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Closest-in-pool grid. Smaller pools are prefixes of the largest one,
/// so every column is non-increasing in the pool size.
pub fn sweep(cfg: &RunConfig, inf: &Inference) -> Result<SweepTable> {
    let s = &cfg.sweep;
    let kmax = *s
        .pool_sizes
        .iter()
        .max()
        .ok_or_else(|| Error::Config("empty sweep".into()))?;
    let nq = if s.max_queries == 0 {
        inf.queries.len()
    } else {
        s.max_queries.min(inf.queries.len())
    };
    let errors: Vec<Result<Vec<Vec<f64>>>> = (0..nq)
        .into_par_iter()
        .map(|q| {
            let truth = inf.queries[q].location();
            let model = inf.model()?;
            let mem = model.encode(&inf.input(q)?)?;
            let cond = Conditioned::new(model, &mem);
            s.temperatures
                .iter()
                .map(|&t| {
                    let pool = sample_pool(&cond, t, kmax, stream_seed(s.seed, inf.queries[q].id))?;
                    let d: Vec<f64> = pool
                        .candidates
                        .iter()
                        .map(|c| haversine_km(c.location, truth))
                        .collect();
                    Ok(s.pool_sizes
                        .iter()
                        .map(|&k| d[..k].iter().copied().fold(f64::INFINITY, f64::min))
                        .collect())
                })
                .collect()
        })
        .collect();
    let errors: Vec<Vec<Vec<f64>>> = errors.into_iter().collect::<Result<_>>()?;
    let medians = (0..s.pool_sizes.len())
        .map(|ki| {
            (0..s.temperatures.len())
                .map(|ti| {
                    let col: Vec<f64> = errors.iter().map(|e| e[ti][ki]).collect();
                    median(&col)
                })
                .collect()
        })
        .collect();
    Ok(SweepTable {
        pool_sizes: s.pool_sizes.clone(),
        temperatures: s.temperatures.clone(),
        medians,
        queries: nq,
    })
}

pub fn cmd_sweep(cfg: &RunConfig, dir: &RunDir) -> Result<SweepTable> {
    let inf = Inference::load(cfg, dir, true)?;
    let table = sweep(cfg, &inf)?;
    table.write_csv(BufWriter::new(File::create(dir.file("sweep.csv"))?), &cfg.hash())?;
    Ok(table)
}

/// Outcome of [`run_all`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub train_samples: usize,
    pub test_samples: usize,
    pub model: AccuracyReport,
    pub knn: AccuracyReport,
    /// Prediction and report files, in the order written.
    pub artifacts: Vec<PathBuf>,
}

/// Generate, align, build the gallery, train, then predict and evaluate
/// both the configured decoder and the kNN baseline.
pub fn run_all(cfg: &RunConfig, dir: &RunDir, mut log: impl FnMut(&str)) -> Result<RunSummary> {
    let (train_samples, test_samples) = cmd_gen(cfg, dir)?;
    log(&format!(
        "generated {train_samples} train / {test_samples} test samples"
    ));
    cmd_train_align(cfg, dir)?;
    log("trained alignment encoders");
    cmd_build_gallery(cfg, dir)?;
    log("built gallery");
    cmd_train_model(cfg, dir, |_, _| {})?;
    log("trained sequence model");
    let mut artifacts = Vec::new();
    let mut reports = Vec::new();
    let mut knn_cfg = cfg.clone();
    knn_cfg.predict.mode = DecodeMode::Knn;
    for c in [cfg, &knn_cfg] {
        let preds = cmd_predict(c, dir, None)?;
        let report_path = dir.file(&format!("report_{}.csv", prediction_tag(c)));
        let report = cmd_evaluate(&preds, &dir.test_data(), &report_path)?;
        log(&format!(
            "{}: median {:.2} km",
            prediction_tag(c),
            report.median_error_km
        ));
        artifacts.push(preds);
        artifacts.push(report_path);
        reports.push(report);
    }
    let knn = reports.pop().expect("two reports");
    let model = reports.pop().expect("two reports");
    Ok(RunSummary {
        train_samples,
        test_samples,
        model,
        knn,
        artifacts,
    })
}
