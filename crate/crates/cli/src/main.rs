use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rqwav_core::audio::{load_corpus, trim_pad, AudioBatch, Waveform};
use rqwav_core::checkpoint::load_model;
use rqwav_core::config::resolve_config;
use rqwav_core::diagnostics::{diagnostics_report, featurizer_target_report, TargetInputs};
use rqwav_core::features::ConvFeaturizer;
use rqwav_core::model::Featurizer;
use rqwav_core::params::ParamStore;
use rqwav_core::probe::probe_train;
use rqwav_core::rng::{stream_rng, Stream};
use rqwav_core::synth::{synthetic_corpus, toy_dataset, write_corpus, ToyTask};
use rqwav_core::train::pretrain;
use rqwav_core::{count_params, load_config, Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "rqwav", version, about = "Random-projection-quantizer speech pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config layered over the built-in defaults.
    #[arg(long, env = "RQWAV_CONFIG")]
    config: Option<PathBuf>,
    /// `section.key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus as WAV files plus a manifest.
    PrepareData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run masked-prediction pretraining.
    Pretrain {
        /// TOML config layered over the built-in defaults.
        #[arg(long, env = "RQWAV_CONFIG")]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; defaults to `runs/<config hash>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a layer-weighted linear probe on a frozen checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// tones, chirps or textures
        #[arg(long)]
        task: String,
        /// Overrides applied to the checkpoint's config (probe section).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Metrics log to append to; defaults to metrics.jsonl beside the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Codebook and target-stability report for both featurizers.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest of 16 kHz mono WAV files.
        #[arg(long)]
        corpus: PathBuf,
        /// Report path; a JSON twin is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        eps: f64,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 16)]
        max_utterances: usize,
    },
    /// Print trainable and frozen parameter counts.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn announce(cfg: &RunConfig) {
    println!("config-hash: {}", cfg.hash());
}

fn corpus_for(cfg: &RunConfig, config_path: Option<&Path>) -> Result<Vec<Waveform>> {
    if cfg.data.manifest.is_empty() {
        return synthetic_corpus(cfg.data.synthetic_count, cfg.data.synthetic_seconds, cfg.data.synthetic_seed);
    }
    let manifest = PathBuf::from(&cfg.data.manifest);
    let manifest = match config_path.and_then(Path::parent) {
        Some(dir) if manifest.is_relative() => dir.join(manifest),
        _ => manifest,
    };
    load_corpus(&manifest)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData { cfg, out } => {
            let c = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            announce(&c);
            let corpus = synthetic_corpus(c.data.synthetic_count, c.data.synthetic_seconds, c.data.synthetic_seed)?;
            let manifest = write_corpus(&out, &corpus)?;
            println!("wrote {} utterances; manifest {}", corpus.len(), manifest.display());
        }
        Command::Pretrain {
            config,
            overrides,
            resume,
            out,
        } => {
            let c = load_config(Some(&config), &overrides)?;
            announce(&c);
            let corpus = corpus_for(&c, Some(&config))?;
            let out = out.unwrap_or_else(|| PathBuf::from("runs").join(c.hash()));
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), c.echo())?;
            let s = pretrain(&c, &corpus, &out, resume.as_deref())?;
            if let Some(r) = s.records.last() {
                println!(
                    "step {} loss {:.4} masked_acc {:.4} utilization {:.4}",
                    r.step, r.loss, r.masked_acc, r.codebook_utilization
                );
            }
            for ckpt in &s.checkpoints {
                println!("checkpoint {}", ckpt.display());
            }
            println!("metrics {}", s.metrics_path.display());
        }
        Command::Probe {
            checkpoint,
            task,
            overrides,
            metrics,
        } => {
            let mut model = load_model(&checkpoint)?;
            let cfg = resolve_config(model.cfg.clone(), None, &overrides)?;
            model.cfg.probe = cfg.probe.clone();
            announce(&model.cfg);
            let task: ToyTask = task.parse()?;
            let mut pc = cfg.probe.clone();
            if pc.num_classes != task.num_classes() {
                return Err(Error::InvalidArgument(format!(
                    "class count mismatch: task {} has {} classes, probe.num_classes is {}",
                    task.name(),
                    task.num_classes(),
                    pc.num_classes
                )));
            }
            let data = toy_dataset(task, pc.per_class, pc.seconds, pc.seed)?;
            let real = probe_train(&model, &data, &pc)?;
            pc.shuffle_labels = true;
            let control = probe_train(&model, &data, &pc)?;
            let record = serde_json::json!({
                "event": "probe",
                "task": task.name(),
                "checkpoint": checkpoint.display().to_string(),
                "config_hash": model.cfg.hash(),
                "probe": real,
                "shuffled_control": control,
            });
            println!(
                "task {} test_acc {:.4} (chance {:.4}) shuffled_test_acc {:.4} frozen {}",
                task.name(),
                real.test_accuracy,
                real.chance,
                control.test_accuracy,
                real.frozen() && control.frozen()
            );
            let metrics = metrics.unwrap_or_else(|| checkpoint.with_file_name("metrics.jsonl"));
            let mut f = OpenOptions::new().create(true).append(true).open(&metrics)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        Command::Diagnose {
            checkpoint,
            corpus,
            out,
            eps,
            trials,
            seeds,
            max_utterances,
        } => {
            let model = load_model(&checkpoint)?;
            announce(&model.cfg);
            let cfg = &model.cfg;
            let wavs = load_corpus(&corpus)?;
            let mut rng = stream_rng(cfg.train.seed, Stream::Trim, 0);
            let padded = wavs
                .iter()
                .take(max_utterances.max(1))
                .map(|w| trim_pad(w, cfg.data.target_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let batch = AudioBatch::from_padded(padded)?;
            let mut fresh_params = ParamStore::new();
            let fresh;
            let (conv, conv_params) = match &model.featurizer {
                Featurizer::Conv(c) => (c, &model.params),
                Featurizer::Logmel(_) => {
                    let mut r = stream_rng(cfg.train.seed, Stream::Init, 0);
                    fresh = ConvFeaturizer::new(&mut fresh_params, &cfg.featurizer.conv, &mut r)?;
                    (&fresh, &fresh_params)
                }
            };
            let inputs = TargetInputs {
                batch: &batch,
                conv,
                conv_params,
                logmel: &cfg.featurizer.logmel,
                quantizer: &cfg.quantizer,
                eps,
                trials,
            };
            let comparisons = featurizer_target_report(&inputs, &seeds)?;
            let report = diagnostics_report(comparisons, eps, cfg.echo())?;
            let text = format!(
                "{}\nconfig-hash: {}\n\n[config]\n{}",
                report.render(),
                cfg.hash(),
                cfg.echo()
            );
            std::fs::write(&out, &text)?;
            let json_path = out.with_extension("json");
            std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
            print!("{}", report.render());
            println!("report {} ({})", out.display(), json_path.display());
        }
        Command::CountParams { cfg } => {
            let c = load_config(cfg.config.as_deref(), &cfg.overrides)?;
            announce(&c);
            print!("{}", count_params(&c).render());
        }
    }
    Ok(())
}
