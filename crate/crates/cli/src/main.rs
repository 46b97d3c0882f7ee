mod bench;
mod corpus;
mod evaluate;
mod models;
mod synth;

use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use voicerank_core::plda::IndexPrecision;

#[derive(Debug, Parser)]
#[command(name = "voicerank", version, about = "Closed-set speaker identification toolkit")]
struct Cli {
    /// Configuration file: training recipe (TOML) for `train`, service config for `serve`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configured one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Primary output path of the command.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F64,
    F32,
}

impl From<Precision> for IndexPrecision {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F64 => IndexPrecision::F64,
            Precision::F32 => IndexPrecision::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// 1024 components, 800-d i-vectors, 350-d speaker subspace, 1/30 and 1/15 subsets.
    Full,
    /// 64 components, 100-d i-vectors, 40-d speaker subspace, full data in every stage.
    Desk,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train UBM, PPCA and PLDA models from an utterance list; writes a model container.
    Train {
        #[arg(long)]
        utterances: PathBuf,
        /// Recipe used when --config is not given.
        #[arg(long, value_enum, default_value = "full")]
        preset: Preset,
        /// Write the ids of utterances used by any training stage to this file.
        #[arg(long)]
        ids_out: Option<PathBuf>,
    },
    /// Embed utterances with trained models; writes i-vectors as JSON lines.
    Enroll {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        utterances: PathBuf,
    },
    /// Build the identification index and gallery into a container.
    BuildIndex {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Gallery metadata, one JSON object per utterance.
        #[arg(long)]
        metadata: PathBuf,
        /// Keep only speakers with more than 5 utterances of at least 5 s.
        #[arg(long)]
        select: bool,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Equal error rate over a verification trial list.
    EvalEer {
        #[arg(long)]
        models: PathBuf,
        /// Utterance lists that resolve the trial ids (repeatable).
        #[arg(long, required = true)]
        utterances: Vec<PathBuf>,
        #[arg(long)]
        trials: PathBuf,
        /// Utterance ids used in training, to label the split clean or contaminated.
        #[arg(long)]
        train_ids: Option<PathBuf>,
    },
    /// Top-5 rank of the true speaker for each labeled clip.
    RankTest {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        /// Count clips of speakers missing from the gallery as misses instead of failing.
        #[arg(long)]
        allow_unknown: bool,
    },
    /// Top-1/3/5 accuracy with clips truncated to each length.
    LengthSweep {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        clips: PathBuf,
        /// Comma-separated lengths in seconds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
        lengths: Vec<f64>,
    },
    /// Per-stage identification timings on synthetic galleries of the given sizes.
    Bench {
        /// Trained models for the full pipeline; without them only PLDA scoring is timed.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "10000,100000")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 10.0)]
        probe_seconds: f64,
        /// Speaker subspace dimension in scoring-only mode.
        #[arg(long, default_value_t = 350)]
        speaker_dim: usize,
        /// i-vector dimension in scoring-only mode.
        #[arg(long, default_value_t = 800)]
        ivector_dim: usize,
        #[arg(long, value_enum, default_value = "f64")]
        precision: Precision,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Write a synthetic speaker corpus: WAV files, lists, metadata and trials.
    Synth {
        #[arg(long, default_value_t = 50)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        enroll_per_speaker: usize,
        #[arg(long, default_value_t = 5)]
        test_per_speaker: usize,
        #[arg(long, default_value_t = voicerank_core::synth::SEPARATION_MODERATE)]
        separation: f64,
        #[arg(long, default_value_t = 10.0)]
        test_seconds: f64,
        /// Target/impostor trial pairs per test utterance.
        #[arg(long, default_value_t = 2)]
        trial_pairs: usize,
    },
}

impl Cli {
    fn output(&self) -> anyhow::Result<&PathBuf> {
        self.output.as_ref().context("--output is required for this command")
    }
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Train {
            utterances,
            preset,
            ids_out,
        } => models::train(
            utterances,
            cli.config.as_deref(),
            *preset,
            cli.seed,
            cli.output()?,
            ids_out.as_deref(),
        ),
        Command::Enroll { models, utterances } => models::enroll(models, utterances, cli.output()?),
        Command::BuildIndex {
            models,
            embeddings,
            metadata,
            select,
            precision,
        } => models::build_index(models, embeddings, metadata, *select, (*precision).into(), cli.output()?),
        Command::EvalEer {
            models,
            utterances,
            trials,
            train_ids,
        } => evaluate::eval_eer(models, utterances, trials, train_ids.as_deref(), cli.output.as_deref()),
        Command::RankTest {
            models,
            clips,
            allow_unknown,
        } => evaluate::rank_test(models, clips, *allow_unknown, cli.output.as_deref()),
        Command::LengthSweep { models, clips, lengths } => {
            evaluate::length_sweep(models, clips, lengths, cli.output.as_deref())
        }
        Command::Bench {
            models,
            sizes,
            runs,
            probe_seconds,
            speaker_dim,
            ivector_dim,
            precision,
        } => bench::run(&bench::BenchArgs {
            models: models.clone(),
            sizes: sizes.clone(),
            runs: *runs,
            probe_seconds: *probe_seconds,
            speaker_dim: *speaker_dim,
            ivector_dim: *ivector_dim,
            precision: (*precision).into(),
            seed: cli.seed.unwrap_or(0),
            output: cli.output.clone(),
        }),
        Command::Serve { host, port } => {
            let mut cfg = voicerank_service::ServiceConfig::load(cli.config.as_deref())?;
            if let Some(h) = host {
                cfg.server.host = h.clone();
            }
            if let Some(p) = port {
                cfg.server.port = *p;
            }
            tokio::runtime::Runtime::new()?.block_on(voicerank_service::serve(cfg))
        }
        Command::Synth {
            speakers,
            enroll_per_speaker,
            test_per_speaker,
            separation,
            test_seconds,
            trial_pairs,
        } => synth::write_corpus(
            &synth::SynthArgs {
                speakers: *speakers,
                enroll_per_speaker: *enroll_per_speaker,
                test_per_speaker: *test_per_speaker,
                separation: *separation,
                test_seconds: *test_seconds,
                trial_pairs: *trial_pairs,
                seed: cli.seed.unwrap_or(1),
            },
            cli.output()?,
        ),
    }
}
