use std::path::Path;

use anyhow::{bail, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use voicerank_core::audio::encode_wav_pcm16;
use voicerank_core::gallery::{write_metadata, DEFAULT_FPS};
use voicerank_core::synth::{gallery_records, generate_corpus, CorpusPlan, CorpusUtterance, Role, VoiceConfig};

use crate::corpus::{write_csv, TrialLabel, TrialRow, UtteranceRow};

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub speakers: usize,
    pub enroll_per_speaker: usize,
    pub test_per_speaker: usize,
    pub separation: f64,
    pub test_seconds: f64,
    pub trial_pairs: usize,
    pub seed: u64,
}

/// Each test utterance is paired with `pairs` enrollment utterances of its own
/// speaker and `pairs` of other speakers.
fn trials(corpus: &[CorpusUtterance], speakers: usize, pairs: usize, seed: u64) -> Vec<TrialRow> {
    let mut enroll_of: Vec<Vec<&str>> = vec![Vec::new(); speakers];
    for u in corpus.iter().filter(|u| u.role == Role::Enroll) {
        enroll_of[u.speaker_index].push(&u.utterance_id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7431_a1e5);
    let mut rows = Vec::new();
    for t in corpus.iter().filter(|u| u.role == Role::Test) {
        for _ in 0..pairs {
            let own = &enroll_of[t.speaker_index];
            rows.push(TrialRow {
                enroll_utterance_id: own[rng.random_range(0..own.len())].to_string(),
                test_utterance_id: t.utterance_id.clone(),
                label: TrialLabel::Same,
            });
            let mut other = rng.random_range(0..speakers - 1);
            if other >= t.speaker_index {
                other += 1;
            }
            let theirs = &enroll_of[other];
            rows.push(TrialRow {
                enroll_utterance_id: theirs[rng.random_range(0..theirs.len())].to_string(),
                test_utterance_id: t.utterance_id.clone(),
                label: TrialLabel::Different,
            });
        }
    }
    rows
}

pub fn write_corpus(args: &SynthArgs, out: &Path) -> anyhow::Result<()> {
    if args.speakers < 2 || args.enroll_per_speaker == 0 {
        bail!("need at least 2 speakers and 1 enrollment utterance per speaker");
    }
    let plan = CorpusPlan {
        speakers: args.speakers,
        enroll_per_speaker: args.enroll_per_speaker,
        test_per_speaker: args.test_per_speaker,
        test_s: args.test_seconds,
        seed: args.seed,
        voice: VoiceConfig {
            separation: args.separation,
            ..VoiceConfig::default()
        },
        ..CorpusPlan::default()
    };
    let corpus = generate_corpus(&plan);
    let wav_dir = out.join("wav");
    std::fs::create_dir_all(&wav_dir).with_context(|| format!("creating {}", wav_dir.display()))?;
    corpus.par_iter().try_for_each(|u| {
        let path = wav_dir.join(format!("{}.wav", u.utterance_id));
        std::fs::write(&path, encode_wav_pcm16(u.clip.samples(), u.clip.sample_rate_hz()))
            .with_context(|| format!("writing {}", path.display()))
    })?;

    let rows = |role: Role| -> Vec<UtteranceRow> {
        corpus
            .iter()
            .filter(|u| u.role == role)
            .map(|u| UtteranceRow {
                utterance_id: u.utterance_id.clone(),
                speaker_id: u.speaker_id.clone(),
                path: format!("wav/{}.wav", u.utterance_id).into(),
            })
            .collect()
    };
    write_csv(&out.join("enroll.csv"), &rows(Role::Enroll))?;
    write_csv(&out.join("test.csv"), &rows(Role::Test))?;
    std::fs::write(
        out.join("metadata.jsonl"),
        write_metadata(&gallery_records(&corpus), DEFAULT_FPS),
    )?;
    write_csv(
        &out.join("trials.csv"),
        &trials(&corpus, args.speakers, args.trial_pairs, args.seed),
    )?;
    std::fs::write(out.join("plan.json"), serde_json::to_string_pretty(&plan)?)?;
    println!(
        "wrote {} utterances of {} speakers to {}",
        corpus.len(),
        args.speakers,
        out.display()
    );
    Ok(())
}
