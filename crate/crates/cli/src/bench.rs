use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use voicerank_core::audio::encode_wav_pcm16;
use voicerank_core::container::ModelBundle;
use voicerank_core::eval::{linear_fit, summarize, Summary};
use voicerank_core::pipeline::{Engine, STAGES};
use voicerank_core::plda::IndexPrecision;
use voicerank_core::synth::{random_plda_model, random_unit_ivector, speaker_utterance, synthetic_index, VoiceConfig};

/// Utterances per synthetic gallery speaker, close to the full VoxCeleb gallery's average.
const PER_SPEAKER: usize = 123;

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub models: Option<PathBuf>,
    pub sizes: Vec<usize>,
    pub runs: usize,
    pub probe_seconds: f64,
    pub speaker_dim: usize,
    pub ivector_dim: usize,
    pub precision: IndexPrecision,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

struct Row {
    n: usize,
    stage: &'static str,
    summary: Summary,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run(args: &BenchArgs) -> anyhow::Result<()> {
    if args.sizes.is_empty() || args.runs == 0 {
        bail!("need at least one size and one run");
    }
    let rows = match &args.models {
        Some(path) => full_pipeline(args, ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?)?,
        None => scoring_only(args)?,
    };

    let mut csv = String::from("n,stage,median_ms,mean_ms,sd_ms\n");
    for r in &rows {
        let s = r.summary;
        let _ = writeln!(csv, "{},{},{:.4},{:.4},{:.4}", r.n, r.stage, s.median, s.mean, s.sd);
    }
    for &n in &args.sizes {
        println!("n = {n} ({} runs)", args.runs);
        println!("{:<16} {:>10} {:>10} {:>10}", "stage", "median", "mean", "SD");
        for r in rows.iter().filter(|r| r.n == n) {
            let s = r.summary;
            println!("{:<16} {:>10.2} {:>10.2} {:>10.2}", r.stage, s.median, s.mean, s.sd);
        }
        println!();
    }
    if args.sizes.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.stage == "plda_score")
            .map(|r| (r.n as f64, r.summary.median))
            .unzip();
        let fit = linear_fit(&x, &y);
        println!(
            "plda_score median vs n: {:.3e} ms/row + {:.3} ms, r2 = {:.4}",
            fit.slope, fit.intercept, fit.r2
        );
    }
    if let Some(out) = &args.output {
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn full_pipeline(args: &BenchArgs, bundle: ModelBundle) -> anyhow::Result<Vec<Row>> {
    let clip = speaker_utterance(args.seed, 0, 0, args.probe_seconds, &VoiceConfig::default());
    let wav = encode_wav_pcm16(clip.samples(), clip.sample_rate_hz());
    let k = bundle.plda.speaker_dim();
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let (index, gallery) = synthetic_index(args.seed, n, k, PER_SPEAKER, args.precision)?;
        let engine = Engine::new(
            ModelBundle {
                index: Some(index),
                gallery: Some(gallery),
                ..bundle.clone()
            },
            None,
        )?;
        engine.identify_wav(&wav, 5)?;
        let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(args.runs); STAGES.len()];
        for _ in 0..args.runs {
            let t = engine.identify_wav(&wav, 5)?.timing;
            for (col, v) in samples.iter_mut().zip(t.values()) {
                col.push(v);
            }
        }
        for (stage, col) in STAGES.iter().zip(&samples) {
            rows.push(Row {
                n,
                stage,
                summary: summarize(col),
            });
        }
    }
    Ok(rows)
}

fn scoring_only(args: &BenchArgs) -> anyhow::Result<Vec<Row>> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let model = random_plda_model(&mut rng, args.ivector_dim, args.speaker_dim)?;
    let probe = random_unit_ivector(&mut rng, args.ivector_dim);
    let mut rows = Vec::new();
    for &n in &args.sizes {
        let (index, _) = synthetic_index(args.seed, n, args.speaker_dim, PER_SPEAKER, args.precision)?;
        index.score_projected(&model.project(&probe)?)?;
        let (mut project, mut score) = (Vec::new(), Vec::new());
        for _ in 0..args.runs {
            let t = Instant::now();
            let projected = model.project(&probe)?;
            project.push(ms(t));
            let t = Instant::now();
            std::hint::black_box(index.score_projected(&projected)?);
            score.push(ms(t));
        }
        rows.push(Row {
            n,
            stage: "plda_project",
            summary: summarize(&project),
        });
        rows.push(Row {
            n,
            stage: "plda_score",
            summary: summarize(&score),
        });
    }
    Ok(rows)
}
