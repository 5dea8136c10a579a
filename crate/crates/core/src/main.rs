use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ezvc::audio::{load_waveform, write_mel, write_waveform};
use ezvc::config::{Preset, RunConfig};
use ezvc::decoder::{Checkpoint, DitModel, SamplerConfig, Trainer};
use ezvc::encoder::{export_embeddings, import_embeddings, EncoderKind, EncoderSpec, SurrogateEncoder};
use ezvc::eval::{eval_batch, read_pairs};
use ezvc::pipeline::{
    check_codebook_encoder, load_training_items, parallel_map, prepare_training_set, read_manifest, scan_audio_dir,
    units_from_embeddings, write_jsonl, ConversionRequest, Converter,
};
use ezvc::quantizer::{load_codebook, save_codebook, train_kmeans_run, KMeansMode};
use ezvc::units::{write_unit_records, UnitRecord};
use ezvc::{Error, Result};

/// Textless voice conversion with discrete units and a flow-matching decoder.
#[derive(Parser)]
#[command(name = "ezvc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan a directory for WAV files and write a manifest.
    PrepManifest {
        dir: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Compute surrogate embeddings for every manifest entry.
    ExtractEmbeddings {
        manifest: PathBuf,
        /// Only `surrogate` runs in process; imported embeddings are made elsewhere.
        #[arg(long, value_enum, default_value = "surrogate")]
        encoder: EncoderKind,
        /// Seed of the surrogate projection (config key encoder.seed).
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Cluster embedding files into a codebook.
    TrainKmeans {
        embeddings_dir: PathBuf,
        /// Number of clusters (config key kmeans.k).
        #[arg(short)]
        k: Option<usize>,
        /// Seeding and minibatch sampling seed (config key kmeans.seed).
        #[arg(long)]
        seed: u64,
        /// Lloyd iteration cap (config key kmeans.max_iters).
        #[arg(long)]
        max_iters: Option<usize>,
        /// Keep every n-th frame (config key kmeans.subsample).
        #[arg(long)]
        subsample: Option<usize>,
        /// Use minibatch updates with this batch size.
        #[arg(long)]
        minibatch: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Quantize every manifest entry to deduplicated units.
    EncodeUnits {
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
        /// Read precomputed `<id>.emb` files from this directory instead of embedding audio.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write mels, units and an index for decoder training.
    PrepareData {
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        encoder: EncoderArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the flow-matching decoder on a prepared dataset.
    TrainDecoder {
        data: PathBuf,
        /// Parameter initialization and data-order seed (config key decoder.trainer.seed).
        #[arg(long)]
        seed: u64,
        /// Number of updates (config key decoder.optim.total_steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Required to start a paper-scale run.
        #[arg(long)]
        acknowledge_scale: bool,
        #[command(flatten)]
        run: RunArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Speak the source content in the target voice.
    Convert {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the generated log-mel.
        #[arg(long)]
        dump_mel: Option<PathBuf>,
    },
    /// Self-conversion of one utterance.
    Resynth {
        #[arg(long)]
        audio: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        dump_mel: Option<PathBuf>,
    },
    /// Convert and score every pair of a pairs manifest.
    EvalBatch {
        pairs: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Print the fully resolved configuration as TOML.
    ShowConfig {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML config; its `preset` key picks the base values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

#[derive(Args, Clone)]
struct EncoderArgs {
    /// Surrogate projection seed (config key encoder.seed).
    #[arg(long)]
    encoder_seed: Option<u64>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// Sampling seed.
    #[arg(long)]
    seed: u64,
    /// Euler steps (config key sampler.steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance weight (config key sampler.guidance_w).
    #[arg(long, allow_hyphen_values = true)]
    guidance_w: Option<f64>,
    /// Sway coefficient (config key sampler.sway_s).
    #[arg(long, allow_hyphen_values = true)]
    sway_s: Option<f64>,
    /// Griffin-Lim iterations (config key vocoder.gl_iters).
    #[arg(long)]
    gl_iters: Option<usize>,
    #[command(flatten)]
    encoder: EncoderArgs,
    #[command(flatten)]
    run: RunArgs,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => {
                let cfg = RunConfig::load(path)?;
                if let Some(p) = self.preset {
                    if p != cfg.preset {
                        return Err(Error::Config(format!(
                            "--preset {p:?} contradicts the config file's preset {:?}",
                            cfg.preset
                        )));
                    }
                }
                Ok(cfg)
            }
            None => {
                let cfg = RunConfig::preset(self.preset.unwrap_or(Preset::Desk));
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

impl EncoderArgs {
    fn spec(&self, cfg: &RunConfig) -> EncoderSpec {
        let mut spec = cfg.encoder.clone();
        if let Some(seed) = self.encoder_seed {
            spec.seed = seed;
        }
        spec
    }
}

impl ModelArgs {
    fn sampler(&self, cfg: &RunConfig) -> SamplerConfig {
        let mut s = cfg.sampler.clone();
        s.steps = self.steps.unwrap_or(s.steps);
        s.guidance_w = self.guidance_w.unwrap_or(s.guidance_w);
        s.sway_s = self.sway_s.unwrap_or(s.sway_s);
        s
    }
}

/// Files created by a command; removed again unless the command succeeds.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    keep: bool,
}

impl Outputs {
    fn track(&mut self, path: &Path) -> PathBuf {
        self.paths.push(path.to_path_buf());
        path.to_path_buf()
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for p in &self.paths {
            if p.is_dir() {
                let _ = fs::remove_dir_all(p);
            } else {
                let _ = fs::remove_file(p);
            }
        }
    }
}

fn create_dir(path: &Path, outputs: &mut Outputs) -> Result<()> {
    if !path.exists() {
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        outputs.track(path);
    }
    Ok(())
}

struct Loaded {
    cfg: RunConfig,
    model: DitModel,
    codebook: ezvc::quantizer::Codebook,
    encoder: EncoderSpec,
}

fn load_model(args: &ModelArgs) -> Result<Loaded> {
    let cfg = args.run.resolve()?;
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let codebook = load_codebook(&args.codebook)?;
    let encoder = args.encoder.spec(&cfg);
    check_codebook_encoder(&codebook, &encoder)?;
    let model = ckpt.to_model(DType::F32)?;
    Ok(Loaded {
        cfg,
        model,
        codebook,
        encoder,
    })
}

fn converter<'a>(l: &'a Loaded, args: &ModelArgs) -> Converter<'a> {
    let mut vocoder = l.cfg.vocoder.clone();
    vocoder.gl_iters = args.gl_iters.unwrap_or(vocoder.gl_iters);
    Converter {
        model: &l.model,
        codebook: &l.codebook,
        encoder: l.encoder.clone(),
        vocoder,
    }
}

/// Outcome of a command that can partly fail.
enum Status {
    Done,
    Partial(String),
}

fn run(cli: Cli) -> Result<Status> {
    let mut outputs = Outputs::default();
    let status = match cli.command {
        Command::PrepManifest { dir, output } => {
            let entries = scan_audio_dir(&dir)?;
            if entries.is_empty() {
                return Err(Error::domain(format!("no .wav files under {}", dir.display())));
            }
            write_jsonl(&outputs.track(&output), &entries)?;
            Status::Done
        }
        Command::ExtractEmbeddings {
            manifest,
            encoder,
            seed,
            run,
            workers,
            output,
        } => {
            let cfg = run.resolve()?;
            if encoder == EncoderKind::Imported {
                return Err(Error::Config(
                    "imported embeddings are produced out of process; point encode-units at them with --embeddings".into(),
                ));
            }
            let mut spec = cfg.encoder.clone();
            spec.seed = seed;
            let enc = SurrogateEncoder::new(spec)?;
            let entries = read_manifest(&manifest)?;
            create_dir(&output, &mut outputs)?;
            let results = parallel_map(&entries, workers, |e| -> Result<()> {
                let w = load_waveform(&e.audio_path)?.to_model_rate()?;
                export_embeddings(output.join(format!("{}.emb", e.id)), &enc.embed(&w)?)
            })?;
            partial_status(&entries.iter().map(|e| e.id.clone()).collect::<Vec<_>>(), results)?
        }
        Command::TrainKmeans {
            embeddings_dir,
            k,
            seed,
            max_iters,
            subsample,
            minibatch,
            run,
            output,
        } => {
            let cfg = run.resolve()?;
            let mut km = cfg.kmeans.clone();
            km.seed = seed;
            km.k = k.unwrap_or(km.k);
            km.max_iters = max_iters.unwrap_or(km.max_iters);
            km.subsample = subsample.unwrap_or(km.subsample);
            if let Some(batch_size) = minibatch {
                km.mode = KMeansMode::MiniBatch { batch_size };
            }
            let mut files: Vec<PathBuf> = fs::read_dir(&embeddings_dir)
                .map_err(|e| Error::io(&embeddings_dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "emb"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::domain(format!("no .emb files in {}", embeddings_dir.display())));
            }
            let embs = files
                .iter()
                .map(|p| import_embeddings(p, cfg.encoder.dim))
                .collect::<Result<Vec<_>>>()?;
            let run = train_kmeans_run(embs.iter(), &km)?;
            tracing::info!(iterations = run.iterations, inertia = run.codebook.inertia, "k-means done");
            save_codebook(&run.codebook, outputs.track(&output))?;
            Status::Done
        }
        Command::EncodeUnits {
            manifest,
            codebook,
            encoder,
            embeddings,
            run,
            workers,
            output,
        } => {
            let cfg = run.resolve()?;
            let cb = load_codebook(&codebook)?;
            let spec = encoder.spec(&cfg);
            let entries = read_manifest(&manifest)?;
            let surrogate = match &embeddings {
                Some(_) => None,
                None => {
                    check_codebook_encoder(&cb, &spec)?;
                    Some(SurrogateEncoder::new(spec)?)
                }
            };
            let results = parallel_map(&entries, workers, |e| -> Result<UnitRecord> {
                let emb = match (&embeddings, &surrogate) {
                    (Some(dir), _) => import_embeddings(dir.join(format!("{}.emb", e.id)), cb.dim)?,
                    (None, Some(enc)) => enc.embed(&load_waveform(&e.audio_path)?.to_model_rate()?)?,
                    (None, None) => unreachable!("encoder built when no embeddings dir is given"),
                };
                Ok(UnitRecord::new(&e.id, &units_from_embeddings(&emb, &cb)?))
            })?;
            let mut records = Vec::new();
            let mut failed = Vec::new();
            for (e, r) in entries.iter().zip(results) {
                match r {
                    Ok(rec) => records.push(rec),
                    Err(err) => {
                        tracing::warn!(id = %e.id, error = %err, "skipping utterance");
                        failed.push(e.id.clone());
                    }
                }
            }
            if records.is_empty() {
                return Err(Error::Data("no manifest entry could be encoded".into()));
            }
            write_unit_records(outputs.track(&output), &records)?;
            if failed.is_empty() {
                Status::Done
            } else {
                Status::Partial(format!("skipped {}", failed.join(", ")))
            }
        }
        Command::PrepareData {
            manifest,
            codebook,
            encoder,
            run,
            workers,
            output,
        } => {
            let cfg = run.resolve()?;
            let cb = load_codebook(&codebook)?;
            let spec = encoder.spec(&cfg);
            check_codebook_encoder(&cb, &spec)?;
            let entries = read_manifest(&manifest)?;
            create_dir(&output, &mut outputs)?;
            let set = prepare_training_set(&entries, &spec, &cb, &output, workers)?;
            if set.skipped.is_empty() {
                Status::Done
            } else {
                let ids: Vec<&str> = set.skipped.iter().map(|s| s.id.as_str()).collect();
                Status::Partial(format!("skipped {}", ids.join(", ")))
            }
        }
        Command::TrainDecoder {
            data,
            seed,
            steps,
            resume,
            acknowledge_scale,
            run,
            output,
        } => {
            let cfg = run.resolve()?;
            if cfg.preset == Preset::Paper && !acknowledge_scale {
                return Err(Error::Config(
                    "preset `paper` trains a ~300M-parameter model for 1.35M updates; \
                     use --preset desk on a CPU, or pass --acknowledge-scale to proceed"
                        .into(),
                ));
            }
            let items = load_training_items(&data)?;
            let mut optim = cfg.decoder.optim.clone();
            optim.total_steps = steps.unwrap_or(optim.total_steps);
            let mut tcfg = cfg.decoder.trainer.clone();
            tcfg.seed = seed;
            let k = cfg.decoder.model.vocabulary().k_units;
            if let Some(bad) = items.iter().find(|i| i.units.check_range(k).is_err()) {
                return Err(Error::contract(format!("{}: units exceed the decoder vocabulary of {k}", bad.id)));
            }
            let mut trainer = match &resume {
                Some(path) => Trainer::resume(&Checkpoint::load(path)?, tcfg)?,
                None => Trainer::new(DitModel::new(cfg.decoder.model.clone(), DType::F32, seed)?, optim.clone(), tcfg)?,
            };
            create_dir(&output, &mut outputs)?;
            let remaining = optim.total_steps.saturating_sub(trainer.step_count());
            trainer.fit(
                &items,
                remaining,
                |r| tracing::info!(step = r.step, loss = r.loss, lr = r.lr, "train"),
                |ck| ck.save(&output.join(format!("step-{:08}.ckpt", ck.step))),
            )?;
            // every update of this run, not only the logged ones
            write_jsonl(&output.join("loss.jsonl"), trainer.history())?;
            trainer.checkpoint(true)?.save(&output.join("model.ckpt"))?;
            Status::Done
        }
        Command::Convert {
            source,
            target,
            model,
            output,
            dump_mel,
        } => {
            let loaded = load_model(&model)?;
            let conv = converter(&loaded, &model);
            let mut req = ConversionRequest::new(load_waveform(&source)?, load_waveform(&target)?, model.seed);
            req.sampler = model.sampler(&loaded.cfg);
            let result = conv.convert(&req)?;
            write_waveform(outputs.track(&output), &result.audio)?;
            if let Some(p) = dump_mel {
                write_mel(outputs.track(&p), &result.generated_mel)?;
            }
            Status::Done
        }
        Command::Resynth {
            audio,
            model,
            output,
            dump_mel,
        } => {
            let loaded = load_model(&model)?;
            let conv = converter(&loaded, &model);
            let result = conv.resynthesize(&load_waveform(&audio)?, model.sampler(&loaded.cfg), model.seed)?;
            write_waveform(outputs.track(&output), &result.audio)?;
            if let Some(p) = dump_mel {
                write_mel(outputs.track(&p), &result.generated_mel)?;
            }
            Status::Done
        }
        Command::EvalBatch { pairs, model, output } => {
            let loaded = load_model(&model)?;
            let conv = converter(&loaded, &model);
            let pairs = read_pairs(&pairs)?;
            let report = eval_batch(&pairs, &conv, &loaded.cfg.eval.speaker, &model.sampler(&loaded.cfg), model.seed);
            outputs.track(&output.with_extension("txt"));
            report.write(&outputs.track(&output))?;
            print!("{}", report.render());
            match report.failures() {
                0 => Status::Done,
                n => Status::Partial(format!("{n} of {} pairs failed", pairs.len())),
            }
        }
        Command::ShowConfig { run } => {
            print!("{}", run.resolve()?.to_toml_string());
            Status::Done
        }
    };
    outputs.keep = true;
    Ok(status)
}

fn partial_status(ids: &[String], results: Vec<Result<()>>) -> Result<Status> {
    let mut failed = Vec::new();
    for (id, r) in ids.iter().zip(results) {
        if let Err(e) = r {
            tracing::warn!(id = %id, error = %e, "skipping utterance");
            failed.push(id.as_str());
        }
    }
    if failed.len() == ids.len() {
        return Err(Error::Data("every manifest entry failed".into()));
    }
    Ok(if failed.is_empty() {
        Status::Done
    } else {
        Status::Partial(format!("skipped {}", failed.join(", ")))
    })
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "internal" | "external" => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("EZVC_LOG").unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Partial(msg)) => {
            eprintln!("{}", json!({"error": "partial", "message": msg}));
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(exit_code(&e))
        }
    }
}
