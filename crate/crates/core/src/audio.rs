//! WAV ingestion and sample-rate conversion.
//!
//! Everything downstream of [`decode_wav`] assumes mono audio at
//! [`CANONICAL_RATE_HZ`] with amplitudes in `[-1, 1]`.

use std::f64::consts::PI;
use std::io::Cursor;

use crate::error::{Error, Result};

pub const CANONICAL_RATE_HZ: u32 = 16_000;

/// Taps per polyphase branch of the resampling filter.
pub const RESAMPLER_TAPS: usize = 64;

const MIN_INPUT_RATE_HZ: u32 = 4_000;
const MAX_INPUT_RATE_HZ: u32 = 384_000;

/// Mono PCM audio normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Wraps samples that are already at the canonical rate, clamping them into `[-1, 1]`.
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        Self::with_rate(samples, CANONICAL_RATE_HZ)
    }

    /// Accepts samples at any supported rate and converts them to the canonical rate.
    pub fn with_rate(mut samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyAudio);
        }
        if !(MIN_INPUT_RATE_HZ..=MAX_INPUT_RATE_HZ).contains(&sample_rate_hz) {
            return Err(Error::UnsupportedEncoding(format!(
                "sample rate {sample_rate_hz} Hz"
            )));
        }
        if sample_rate_hz != CANONICAL_RATE_HZ {
            samples = resample(&samples, sample_rate_hz, CANONICAL_RATE_HZ);
        }
        for s in samples.iter_mut() {
            *s = s.clamp(-1.0, 1.0);
        }
        Ok(Self {
            samples,
            sample_rate_hz: CANONICAL_RATE_HZ,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Keeps at most the first `seconds` of audio.
    pub fn truncated(&self, seconds: f64) -> AudioClip {
        let n = ((seconds * self.sample_rate_hz as f64).round() as usize)
            .clamp(1, self.samples.len());
        AudioClip {
            samples: self.samples[..n].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Decodes a RIFF/WAVE byte buffer into a canonical-rate mono clip.
///
/// Integer PCM of any bit depth and 32-bit IEEE float are accepted. Multichannel
/// input is downmixed by averaging channels.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::MalformedContainer("missing RIFF/WAVE header".into()));
    }
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound_error)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::MalformedContainer("zero channels".into()));
    }

    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Int => {
            if spec.bits_per_sample == 0 || spec.bits_per_sample > 32 {
                return Err(Error::UnsupportedEncoding(format!(
                    "{}-bit integer PCM",
                    spec.bits_per_sample
                )));
            }
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound_error)?
        }
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::UnsupportedEncoding(format!(
                    "{}-bit float",
                    spec.bits_per_sample
                )));
            }
            let samples: Vec<f32> = reader
                .into_samples::<f32>()
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound_error)?;
            if samples.iter().any(|s| !s.is_finite()) {
                return Err(Error::MalformedContainer("non-finite float sample".into()));
            }
            samples
        }
    };

    let mono: Vec<f32> = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    AudioClip::with_rate(mono, spec.sample_rate)
}

fn map_hound_error(err: hound::Error) -> Error {
    match err {
        hound::Error::Unsupported => Error::UnsupportedEncoding("compressed or unknown codec".into()),
        hound::Error::FormatError(msg) => Error::MalformedContainer(msg.to_string()),
        hound::Error::IoError(e) => Error::MalformedContainer(format!("truncated data: {e}")),
        other => Error::MalformedContainer(other.to_string()),
    }
}

/// Encodes samples as mono 16-bit PCM WAV.
pub fn encode_wav_pcm16(samples: &[f32], sample_rate_hz: u32) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + samples.len() * 2));
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory writer");
        for &s in samples {
            let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
            writer.write_sample(v).expect("in-memory write");
        }
        writer.finalize().expect("in-memory finalize");
    }
    cursor.into_inner()
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Rational-ratio polyphase resampler with a Blackman-windowed sinc kernel.
pub fn resample(input: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || input.is_empty() {
        return input.to_vec();
    }
    let g = gcd(from_hz as u64, to_hz as u64);
    let up = (to_hz as u64 / g) as usize;
    let down = (from_hz as u64 / g) as usize;

    // Cutoff as a fraction of the input Nyquist, with a little rolloff margin.
    let cutoff = 0.94 * (up as f64 / down as f64).min(1.0);
    let half = (RESAMPLER_TAPS / 2) as f64;
    let bank: Vec<[f64; RESAMPLER_TAPS]> = (0..up)
        .map(|phase| {
            let frac = phase as f64 / up as f64;
            let mut taps = [0.0; RESAMPLER_TAPS];
            for (k, tap) in taps.iter_mut().enumerate() {
                let x = k as f64 - (half - 1.0) - frac;
                *tap = cutoff * sinc(cutoff * x) * blackman(x, half);
            }
            let sum: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= sum);
            taps
        })
        .collect();

    let n_out = (input.len() * up).div_ceil(down);
    let offset = RESAMPLER_TAPS as isize / 2 - 1;
    (0..n_out)
        .map(|j| {
            let pos = j * down;
            let base = (pos / up) as isize - offset;
            let taps = &bank[pos % up];
            let mut acc = 0.0;
            for (k, &h) in taps.iter().enumerate() {
                let idx = base + k as isize;
                if idx >= 0 && (idx as usize) < input.len() {
                    acc += h * input[idx as usize] as f64;
                }
            }
            acc as f32
        })
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn blackman(x: f64, half: f64) -> f64 {
    if x.abs() >= half {
        return 0.0;
    }
    let r = x / half;
    0.42 + 0.5 * (PI * r).cos() + 0.08 * (2.0 * PI * r).cos()
}
