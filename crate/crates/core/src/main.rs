use std::io::{self, BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use geotoken::config::{DecodeMode, RunConfig, SelectorKind};
use geotoken::geocell::{detokenize, tokenize, DEFAULT_LEVELS};
use geotoken::pipeline::{self, prediction_tag, RunDir};
use geotoken::rerank::HttpTransport;
use geotoken::synthworld::stream_seed;
use geotoken::{Error, LatLon, Result, TokenSequence};

/// GeoToken: hierarchical S2 token geolocalization on a synthetic world.
#[derive(Parser)]
#[command(name = "geotoken", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every module seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding all artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    mode: Option<DecodeMode>,
    #[arg(long, value_enum)]
    selector: Option<SelectorKind>,
    /// Pool size K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Beam width B.
    #[arg(long)]
    beam: Option<usize>,
    /// Also write every candidate pool.
    #[arg(long)]
    dump_pools: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world's train and test splits.
    Gen(Common),
    /// Train the contrastive image/GPS/text encoders.
    TrainAlign(Common),
    /// Embed the training split into the retrieval gallery.
    BuildGallery(Common),
    /// Train the retrieval-augmented sequence model.
    TrainModel(Common),
    /// Train the pool reward classifier.
    TrainReward(Common),
    /// Predict locations for the test split.
    Predict(PredictArgs),
    /// Score a predictions file against ground truth.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        /// Ground-truth samples; defaults to the run's test split.
        #[arg(long)]
        truths: Option<PathBuf>,
        /// Report path; defaults to report_<predictions stem>.csv in the run directory.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Closest-in-pool median error over pool sizes and temperatures.
    Sweep(Common),
    /// Every stage from generation to evaluation, plus the kNN baseline.
    Run(Common),
    /// Convert "lat,lon" to a token string, or back with --reverse.
    /// Reads stdin lines when no value is given.
    Tokenize {
        #[arg(allow_hyphen_values = true)]
        value: Option<String>,
        #[arg(long)]
        reverse: bool,
        #[arg(long, default_value_t = DEFAULT_LEVELS)]
        levels: usize,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        // TOML integers are signed, so derived seeds keep 63 bits.
        let derive = |i| stream_seed(seed, i) >> 1;
        cfg.world.seed = derive(0);
        cfg.align.seed = derive(1);
        cfg.model.seed = derive(2);
        cfg.train.seed = derive(3);
        cfg.predict.seed = derive(4);
        cfg.sweep.seed = derive(5);
        cfg.reward.seed = derive(6);
    }
    if let Ok(url) = std::env::var("GEOTOKEN_JUDGE_URL") {
        cfg.judge.endpoint = url;
    }
    Ok(cfg)
}

/// Validates the config, locks the run directory and records the config.
fn prepare(c: &Common, cfg: &RunConfig, command: &str) -> Result<(RunDir, pipeline::DirLock)> {
    cfg.validate()?;
    let dir = RunDir::new(&c.out)?;
    let lock = dir.lock()?;
    dir.record_config(cfg, command)?;
    Ok((dir, lock))
}

fn tokenize_line(line: &str, reverse: bool, levels: usize) -> Result<String> {
    if reverse {
        let t: TokenSequence = line.parse()?;
        let p = detokenize(&t);
        return Ok(format!("{},{}", p.lat(), p.lon()));
    }
    let (lat, lon) = line
        .split_once(',')
        .ok_or_else(|| Error::invalid(format!("expected \"lat,lon\", got {line:?}")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad coordinate {s:?}")))
    };
    Ok(tokenize(LatLon::new(parse(lat)?, parse(lon)?)?, levels)?.to_string())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "gen")?;
            let (train, test) = pipeline::cmd_gen(&cfg, &dir)?;
            eprintln!(
                "wrote {train} train and {test} test samples to {}",
                dir.root().display()
            );
        }
        Command::TrainAlign(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "train_align")?;
            pipeline::cmd_train_align(&cfg, &dir)?;
            eprintln!("saved {}", dir.align().display());
        }
        Command::BuildGallery(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "build_gallery")?;
            let g = pipeline::cmd_build_gallery(&cfg, &dir)?;
            eprintln!("gallery of {} entries saved to {}", g.len(), dir.gallery().display());
        }
        Command::TrainModel(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "train_model")?;
            pipeline::cmd_train_model(&cfg, &dir, |step, loss| {
                if step % 100 == 0 {
                    eprintln!("step {step}: loss {loss:.4}");
                }
            })?;
            eprintln!("saved {}", dir.model().display());
        }
        Command::TrainReward(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "train_reward")?;
            let (_, acc) = pipeline::cmd_train_reward(&cfg, &dir)?;
            eprintln!("reward model training accuracy {acc:.4}");
        }
        Command::Predict(a) => {
            let mut cfg = load_config(&a.common)?;
            let p = &mut cfg.predict;
            p.mode = a.mode.unwrap_or(p.mode);
            p.selector = a.selector.unwrap_or(p.selector);
            p.pool_size = a.k.unwrap_or(p.pool_size);
            p.temperature = a.temperature.unwrap_or(p.temperature);
            p.beam_width = a.beam.unwrap_or(p.beam_width);
            p.dump_pools |= a.dump_pools;
            let (dir, _lock) = prepare(&a.common, &cfg, &format!("predict_{}", prediction_tag(&cfg)))?;
            let transport = (cfg.predict.mode == DecodeMode::Pool && cfg.predict.selector == SelectorKind::Judge)
                .then(|| HttpTransport::new(&cfg.judge.endpoint, Duration::from_secs(cfg.judge.timeout_secs)));
            let path = pipeline::cmd_predict(&cfg, &dir, transport.as_ref().map(|t| t as _))?;
            println!("{}", path.display());
        }
        Command::Evaluate {
            common,
            predictions,
            truths,
            report,
        } => {
            let dir = RunDir::new(&common.out)?;
            let _lock = dir.lock()?;
            let truths = truths.unwrap_or_else(|| dir.test_data());
            let report = report.unwrap_or_else(|| {
                let stem = predictions
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("predictions");
                dir.file(&format!("report_{}.csv", stem.trim_start_matches("predictions_")))
            });
            let r = pipeline::cmd_evaluate(&predictions, &truths, &report)?;
            r.write_csv(io::stdout().lock())?;
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "sweep")?;
            let table = pipeline::cmd_sweep(&cfg, &dir)?;
            table.write_csv(io::stdout().lock(), &cfg.hash())?;
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let (dir, _lock) = prepare(&c, &cfg, "run")?;
            let s = pipeline::run_all(&cfg, &dir, |msg| eprintln!("{msg}"))?;
            let acc = |r: &geotoken::geodesy::AccuracyReport| r.accuracy_at(25.0).unwrap_or(0.0);
            println!("model acc@25km {:.4}  knn acc@25km {:.4}", acc(&s.model), acc(&s.knn));
        }
        Command::Tokenize { value, reverse, levels } => {
            let mut out = io::stdout().lock();
            match value {
                Some(v) => writeln!(out, "{}", tokenize_line(&v, reverse, levels)?)?,
                None => {
                    for line in io::stdin().lock().lines() {
                        let line = line?;
                        if !line.trim().is_empty() {
                            writeln!(out, "{}", tokenize_line(line.trim(), reverse, levels)?)?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
