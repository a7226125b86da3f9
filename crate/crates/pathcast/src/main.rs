use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use candle_core::DType;
use clap::{Parser, Subcommand};
use log::info;
use serde_json::json;

use pathcast::baseline::Baseline;
use pathcast::checkpoint::Checkpoint;
use pathcast::codec::{Codec, CodecConfig, Modality};
use pathcast::dataset::{build_dataset, tags, Condition, Dataset, Schedule};
use pathcast::experiment::{self, Codecs, ExperimentPlan, ModelSpec, Variant};
use pathcast::pipeline::{fit_mapper_config, Pipeline};
use pathcast::report::{NmseReport, NmseRow, Provenance, ReportFormat};
use pathcast::train::{configure_threads, train_codec, train_mapper, Stage, TrainConfig, SEED_ENV};
use pathcast::{Error, Result};

const DTYPE: DType = DType::F32;

#[derive(Parser)]
#[command(name = "pathcast", version, about = "Scene-to-pathloss map generation")]
struct Cli {
    /// Overrides the seed from the config file and the environment.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training config (train verbs) or model spec (ablate, run-plan), TOML.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Raise log verbosity; repeatable.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        schedule: PathBuf,
    },
    /// Train one codec.
    TrainCodec {
        #[arg(long)]
        modality: Modality,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the token mapper against two frozen codecs.
    TrainMapper {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "codec-s")]
        codec_s: PathBuf,
        #[arg(long = "codec-c")]
        codec_c: PathBuf,
    },
    /// Train the direct-regression baseline.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fine-tune a mapper on a few samples of a new condition.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "codec-s")]
        codec_s: PathBuf,
        #[arg(long = "codec-c")]
        codec_c: PathBuf,
        #[arg(long)]
        mapper: PathBuf,
        /// Target condition, e.g. crossroad/70m/15GHz.
        #[arg(long)]
        target: Condition,
        #[arg(long)]
        fraction: f64,
    },
    /// Score a mapper or baseline on the held-out split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "codec-s", requires = "codec_c", requires = "mapper")]
        codec_s: Option<PathBuf>,
        #[arg(long = "codec-c")]
        codec_c: Option<PathBuf>,
        #[arg(long, conflicts_with = "baseline")]
        mapper: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Conditions to score; defaults to every condition in the dataset.
        #[arg(long = "condition")]
        conditions: Vec<Condition>,
        /// Allow bands the mapper was never trained on.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Compare the full mapper against its ablations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "condition")]
        conditions: Vec<Condition>,
        #[arg(long = "codec-s", requires = "codec_c")]
        codec_s: Option<PathBuf>,
        #[arg(long = "codec-c")]
        codec_c: Option<PathBuf>,
    },
    /// Merge reports and re-emit them; format follows the output extension.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Execute an experiment plan.
    RunPlan {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "codec-s", requires = "codec_c")]
        codec_s: Option<PathBuf>,
        #[arg(long = "codec-c")]
        codec_c: Option<PathBuf>,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn required(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref().ok_or_else(|| Error::contract("--out is required"))
}

impl Cli {
    fn seed_override(&self) -> Result<Option<u64>> {
        if self.seed.is_some() {
            return Ok(self.seed);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::contract(format!("{SEED_ENV}={v} is not an unsigned integer"))),
            Err(_) => Ok(None),
        }
    }

    fn train_config(&self, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
            None => TrainConfig::desk(stage),
        };
        if cfg.stage != stage {
            return Err(Error::contract(format!("config is for stage {:?}, verb needs {stage:?}", cfg.stage)));
        }
        if let Some(seed) = self.seed_override()? {
            cfg.seed = seed;
        }
        configure_threads(cfg.reproducible);
        Ok(cfg)
    }

    fn spec(&self) -> Result<ModelSpec> {
        let spec = match &self.config {
            Some(p) => ModelSpec::from_toml(&read_text(p)?)?,
            None => ModelSpec::desk(),
        };
        configure_threads(spec.codec_train.reproducible);
        Ok(spec)
    }
}

fn load_codec(path: &Path, modality: Modality) -> Result<Arc<Codec>> {
    let (ckpt, _) = Checkpoint::load(path)?;
    let codec = Codec::from_checkpoint(&ckpt, DTYPE)?;
    if codec.config.modality != modality {
        return Err(Error::contract(format!(
            "{} holds a {} codec, expected {}",
            path.display(),
            codec.config.modality.as_str(),
            modality.as_str()
        )));
    }
    Ok(Arc::new(codec))
}

fn load_codecs(s: &Option<PathBuf>, c: &Option<PathBuf>) -> Result<Option<Codecs>> {
    match (s, c) {
        (Some(s), Some(c)) => Ok(Some(Codecs {
            sensory: load_codec(s, Modality::Sensory)?,
            channel: load_codec(c, Modality::Channel)?,
        })),
        _ => Ok(None),
    }
}

fn load_pipeline(s: &Path, c: &Path, mapper: &Path) -> Result<(Pipeline, Checkpoint)> {
    let (ckpt, _) = Checkpoint::load(mapper)?;
    let p = Pipeline::load_mapper(load_codec(s, Modality::Sensory)?, load_codec(c, Modality::Channel)?, &ckpt)?;
    Ok((p, ckpt))
}

fn train_filter(dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<Condition>> {
    dataset.select(&cfg.filter)?;
    Ok(if cfg.filter.is_empty() { dataset.conditions() } else { cfg.filter.clone() })
}

fn save(ckpt: &Checkpoint, out: &Path) -> Result<()> {
    let id = ckpt.save(out)?;
    println!("{} {id}", out.display());
    Ok(())
}

fn print_rows(rows: &[NmseRow]) {
    for r in rows {
        println!(
            "{:<12} {:<28} frac {:<6} nmse {:.5} ({:.2} dB) n={}",
            r.mode, r.test_tag, r.fraction, r.nmse_pooled, r.nmse_db, r.n_test
        );
    }
}

fn emit(report: &NmseReport, out: &Option<PathBuf>) -> Result<()> {
    print_rows(&report.rows);
    if let Some(path) = out {
        report.emit(ReportFormat::from_path(path)?, path)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { schedule } => {
            let schedule = Schedule::from_toml(&read_text(schedule)?)?;
            let seed = cli.seed_override()?.unwrap_or(0);
            let manifest = build_dataset(&schedule, seed, required(&cli.out)?)?;
            println!("{} samples in {}", manifest.records.len(), required(&cli.out)?.display());
        }
        Command::TrainCodec { modality, data } => {
            let stage = match modality {
                Modality::Sensory => Stage::CodecSensory,
                Modality::Channel => Stage::CodecChannel,
            };
            let cfg = cli.train_config(stage)?;
            let out = required(&cli.out)?;
            let dataset = Dataset::open(data)?;
            let split = dataset.split();
            let samples = split.train_for(&train_filter(&dataset, &cfg)?);
            let images: Vec<&[u8]> = samples
                .iter()
                .map(|s| match modality {
                    Modality::Sensory => s.raster.as_slice(),
                    Modality::Channel => s.map.as_slice(),
                })
                .collect();
            let arch = cfg.codec.clone().unwrap_or_else(|| CodecConfig::for_modality(*modality));
            if arch.modality != *modality {
                return Err(Error::contract("codec config modality differs from --modality"));
            }
            let codec = Codec::new(arch, cfg.seed, DTYPE)?;
            let log = train_codec(&codec, &images, &cfg)?;
            let meta = json!({ "seed": cfg.seed, "manifest": dataset.manifest_hash, "log": log });
            save(&codec.to_checkpoint(cfg.epochs as u64, meta)?, out)?;
        }
        Command::TrainMapper { data, codec_s, codec_c } => {
            let cfg = cli.train_config(Stage::Mapper)?;
            let out = required(&cli.out)?;
            let dataset = Dataset::open(data)?;
            let split = dataset.split();
            let conds = train_filter(&dataset, &cfg)?;
            let (s, c) = (load_codec(codec_s, Modality::Sensory)?, load_codec(codec_c, Modality::Channel)?);
            let bands: Vec<f64> = conds.iter().map(|c| c.frequency_hz).collect();
            let bands = pathcast_core::freq::BandRegistry::from_frequencies(bands).frequencies().to_vec();
            let template = cfg.mapper.clone().unwrap_or_default();
            let mapper_cfg = fit_mapper_config(&template, &s.config, &c.config, &bands);
            let mapper = pathcast::mapper::Mapper::new(mapper_cfg, cfg.seed, DTYPE)?;
            let pipeline = Pipeline::new(s, c, mapper)?;
            let examples = pipeline.examples(&split.train_for(&conds))?;
            let log = train_mapper(&pipeline.mapper, &examples, &cfg)?;
            let meta = json!({ "seed": cfg.seed, "train_tag": tags(&conds), "manifest": dataset.manifest_hash, "log": log });
            save(&pipeline.mapper_checkpoint(cfg.epochs as u64, meta)?, out)?;
        }
        Command::TrainBaseline { data } => {
            let cfg = cli.train_config(Stage::Mapper)?;
            let out = required(&cli.out)?;
            let dataset = Dataset::open(data)?;
            let split = dataset.split();
            let conds = train_filter(&dataset, &cfg)?;
            let arch = pathcast::baseline::BaselineConfig {
                image_hw: dataset.manifest.image_hw,
                grid_n: dataset.manifest.grid_n,
                ..Default::default()
            };
            let b = Baseline::new(arch, cfg.seed, DTYPE)?;
            let log = b.train(&split.train_for(&conds), &cfg)?;
            let meta = json!({ "seed": cfg.seed, "train_tag": tags(&conds), "manifest": dataset.manifest_hash, "log": log });
            save(&b.to_checkpoint(cfg.epochs as u64, meta)?, out)?;
        }
        Command::Finetune { data, codec_s, codec_c, mapper, target, fraction } => {
            let mut cfg = cli.train_config(Stage::Finetune)?;
            cfg.fewshot_fraction = *fraction;
            cfg.validate()?;
            let out = required(&cli.out)?;
            let dataset = Dataset::open(data)?;
            dataset.select(std::slice::from_ref(target))?;
            let split = dataset.split();
            let (base, ckpt) = load_pipeline(codec_s, codec_c, mapper)?;
            let spec = ModelSpec { finetune_train: cfg.clone(), ..ModelSpec::desk() };
            let (tuned, k) = experiment::fine_tune(&spec, &base, &split, target, *fraction, cfg.seed)?;
            info!("fine-tuned on {k} samples of {}", target.tag());
            let train_tag = ckpt.meta.get("train_tag").and_then(|v| v.as_str()).unwrap_or("");
            let meta = json!({
                "seed": cfg.seed,
                "train_tag": format!("{train_tag}+{}@{fraction}", target.tag()),
                "manifest": dataset.manifest_hash,
                "fewshot_samples": k,
            });
            save(&tuned.mapper_checkpoint(cfg.epochs as u64, meta)?, out)?;
        }
        Command::Eval { data, codec_s, codec_c, mapper, baseline, conditions, zero_shot } => {
            let dataset = Dataset::open(data)?;
            dataset.select(conditions)?;
            let split = dataset.split();
            let conds = if conditions.is_empty() { dataset.conditions() } else { conditions.clone() };
            let seed = cli.seed_override()?.unwrap_or(0);
            let mut rows = Vec::new();
            let mut ids = Vec::new();
            match (codec_s, codec_c, mapper, baseline) {
                (Some(s), Some(c), Some(m), None) => {
                    let (p, ckpt) = load_pipeline(s, c, m)?;
                    let (si, ci) = p.codec_ids()?;
                    ids = vec![si, ci, ckpt.id()?];
                    let train_tag = ckpt.meta.get("train_tag").and_then(|v| v.as_str()).unwrap_or("").to_string();
                    let mode = if *zero_shot { "zero_shot" } else { "eval" };
                    for t in &conds {
                        let test = split.test_for(std::slice::from_ref(t));
                        rows.push(NmseRow::new(&train_tag, t.tag(), mode, 1.0, p.evaluate(&test, *zero_shot)?, test.len(), seed, ids.clone()));
                    }
                }
                (None, None, None, Some(b)) => {
                    let (ckpt, id) = Checkpoint::load(b)?;
                    let model = Baseline::from_checkpoint(&ckpt, DTYPE)?;
                    ids.push(id);
                    let train_tag = ckpt.meta.get("train_tag").and_then(|v| v.as_str()).unwrap_or("").to_string();
                    for t in &conds {
                        let test = split.test_for(std::slice::from_ref(t));
                        rows.push(NmseRow::new(&train_tag, t.tag(), "baseline", 1.0, model.evaluate(&test)?, test.len(), seed, ids.clone()));
                    }
                }
                _ => return Err(Error::contract("eval needs --codec-s, --codec-c and --mapper, or --baseline")),
            }
            let provenance = Provenance {
                seeds: vec![seed],
                checkpoint_hashes: ids,
                manifest_hash: dataset.manifest_hash.clone(),
                split_hash: split.hash.clone(),
            };
            emit(&NmseReport { rows, provenance }, &cli.out)?;
        }
        Command::Ablate { data, conditions, codec_s, codec_c } => {
            let spec = cli.spec()?;
            let dataset = Dataset::open(data)?;
            let conds = if conditions.is_empty() { dataset.conditions() } else { conditions.clone() };
            let codecs = load_codecs(codec_s, codec_c)?;
            let seed = cli.seed_override()?.unwrap_or(0);
            let report = experiment::run_ablation(&dataset, &conds, &Variant::ALL, &spec, codecs.as_ref(), seed)?;
            emit(&report, &cli.out)?;
        }
        Command::Report { inputs } => {
            let mut merged: Option<NmseReport> = None;
            for p in inputs {
                let r = NmseReport::load(p)?;
                match &mut merged {
                    Some(m) => m.merge(r),
                    None => merged = Some(r),
                }
            }
            emit(&merged.expect("clap requires one input"), &cli.out)?;
        }
        Command::RunPlan { plan, data, codec_s, codec_c } => {
            let spec = cli.spec()?;
            let mut plan = ExperimentPlan::from_toml(&read_text(plan)?)?;
            if let Some(seed) = cli.seed_override()? {
                plan.seed = seed;
            }
            let dataset = Dataset::open(data)?;
            let codecs = load_codecs(codec_s, codec_c)?;
            let report = experiment::run_plan(&plan, &dataset, &spec, codecs.as_ref())?;
            emit(&report, &cli.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
