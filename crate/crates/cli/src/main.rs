use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Parser, Subcommand};
use prosody_core::corpus::{synth_corpus, SynthConfig};
use prosody_core::pipeline::{
    evaluate, latent_noise, train_duration, train_sampler, train_stage1, write_inference, write_report, LatentSource,
    RunConfig, RunData, RunLayout,
};
use prosody_core::samplers::SamplerVariant;
use prosody_core::Error;

#[derive(Parser, Debug)]
#[command(name = "prosody", version, about = "Two-stage prosody latent training and inference")]
struct Cli {
    /// JSON run config; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run output root; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus directory; overrides the config.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus with planted text-to-prosody structure.
    SynthCorpus {
        #[arg(long, default_value_t = 200)]
        size: usize,
    },
    /// Train the reference encoder and acoustic model.
    TrainStage1,
    /// Train a text sampler against the frozen Stage I posterior.
    TrainSampler {
        /// semantic, graph or combined; overrides the config.
        #[arg(long)]
        variant: Option<SamplerVariant>,
        /// Stage I checkpoint; defaults to `<out>/stage1`.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Train the duration model on latents drawn from the sampler.
    TrainDuration {
        /// Sampler checkpoint; defaults to `<out>/sampler`.
        #[arg(long)]
        sampler: Option<PathBuf>,
        /// Text-only durations, no latent input.
        #[arg(long)]
        baseline: bool,
    },
    /// Synthesize mels for corpus utterances.
    Infer {
        /// Utterance ids; repeatable.
        #[arg(long = "id", required = true)]
        ids: Vec<String>,
        /// Scales the sampler's standard deviation; 0 uses its mean.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        /// Take z from the reference encoder run on the recorded mel.
        #[arg(long, conflicts_with = "prior")]
        use_oracle_z: bool,
        /// Use z = 0.
        #[arg(long)]
        prior: bool,
    },
    /// Compare prior, sampler and oracle latents on the held-out split.
    Eval,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_divergence() => 3,
        Some(Error::Io { .. }) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    if let Some(corpus) = cli.corpus {
        config.corpus = corpus;
    }
    config.validate()?;
    let layout = RunLayout::new(&config.out);

    match cli.command {
        Command::SynthCorpus { size } => {
            let mut synth = SynthConfig {
                size,
                seed: config.seed,
                embedding_dim: config.embedding_dim,
                ..SynthConfig::default()
            };
            synth.mel.mel_bins = config.mel_bins;
            synth_corpus(&config.corpus, &synth)?;
            println!("wrote {size} utterances to {}", config.corpus.display());
        }
        Command::TrainStage1 => {
            let data = RunData::load(&config.corpus, &config)?;
            let d = train_stage1(&config, &data, &layout.stage1())?;
            println!(
                "stage1: recon {:.5} -> {:.5}, mean posterior KL {:.4}",
                d.initial_recon, d.final_recon, d.mean_kl
            );
        }
        Command::TrainSampler { variant, stage1 } => {
            if let Some(v) = variant {
                config.sampler.variant = v;
            }
            let data = RunData::load(&config.corpus, &config)?;
            let stage1 = stage1.unwrap_or_else(|| layout.stage1());
            let d = train_sampler(&config, &data, &stage1, &layout.sampler())?;
            println!(
                "{} sampler: held-out KL {:.4} (prior {:.4})",
                config.sampler.variant, d.final_heldout_kl, d.prior_heldout_kl
            );
        }
        Command::TrainDuration { sampler, baseline } => {
            if baseline {
                config.duration.conditioned = false;
            }
            let data = RunData::load(&config.corpus, &config)?;
            let sampler = sampler.unwrap_or_else(|| layout.sampler());
            let d = train_duration(&config, &data, &sampler, &layout.duration())?;
            println!("duration: loss {:.4} -> {:.4}", d.initial_loss, d.final_loss);
        }
        Command::Infer {
            ids,
            temperature,
            use_oracle_z,
            prior,
        } => {
            if !(temperature >= 0.0) {
                bail!(Error::Config(format!("temperature {temperature} must be non-negative")));
            }
            let data = RunData::load(&config.corpus, &config)?;
            let pipeline = layout.load_pipeline()?;
            let source = if use_oracle_z {
                LatentSource::Oracle
            } else if prior {
                LatentSource::Prior
            } else {
                LatentSource::Sampler
            };
            for id in &ids {
                let u = data
                    .train
                    .iter()
                    .chain(&data.held_out)
                    .find(|u| &u.id == id)
                    .ok_or_else(|| Error::Config(format!("no utterance `{id}` in {}", config.corpus.display())))?;
                let noise = latent_noise(config.seed, id, pipeline.latent_dim());
                let result = pipeline.infer(u, source, &noise, temperature)?;
                let path = write_inference(&layout.infer(), id, &result)?;
                println!("{id}: {} frames -> {}", result.mel.rows(), path.display());
            }
        }
        Command::Eval => {
            let data = RunData::load(&config.corpus, &config)?;
            let pipeline = layout.load_pipeline()?;
            let report = evaluate(&pipeline, &data.held_out, config.sampler.kl_direction)?;
            write_report(&layout.eval(), &report)?;
            println!("condition  teacher_mse  free_mse  dur_rmse  kl");
            for m in &report.conditions {
                println!(
                    "{:<9}  {:.5}      {:.5}   {:.3}     {:.4}",
                    format!("{:?}", m.condition).to_lowercase(),
                    m.teacher_mel_mse,
                    m.free_mel_mse,
                    m.duration_rmse,
                    m.heldout_kl
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
