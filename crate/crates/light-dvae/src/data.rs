//! Corpus ingestion: 16-bit PCM WAV I/O, manifests with deterministic
//! splits, a synthetic harmonic corpus for desk-scale runs, and batching.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{
    power_spectrogram, preprocess_waveform, segment, stft, PowerSpectrogram, StftConfig, Waveform,
};
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

// ---------------------------------------------------------------------------
// WAV I/O (16-bit PCM, mono, 16 kHz)
// ---------------------------------------------------------------------------

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

struct WavInfo {
    sample_rate: u32,
    channels: u16,
    bits: u16,
    format: u16,
    data_start: usize,
    data_len: usize,
}

fn parse_wav_header(bytes: &[u8]) -> Result<WavInfo> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::WavFormat("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<(usize, usize)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if body + 16 > bytes.len() {
                return Err(Error::WavFormat("truncated fmt chunk".into()));
            }
            fmt = Some((
                read_u16(bytes, body),
                read_u16(bytes, body + 2),
                read_u32(bytes, body + 4),
                read_u16(bytes, body + 14),
            ));
        } else if id == b"data" {
            if body + size > bytes.len() {
                return Err(Error::WavFormat("truncated data chunk".into()));
            }
            data = Some((body, size));
        }
        pos = body + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::WavFormat("missing fmt chunk".into()))?;
    let (data_start, data_len) =
        data.ok_or_else(|| Error::WavFormat("missing data chunk".into()))?;
    Ok(WavInfo {
        sample_rate,
        channels,
        bits,
        format,
        data_start,
        data_len,
    })
}

fn validate_wav(info: &WavInfo) -> Result<()> {
    if info.format != 1 {
        return Err(Error::WavFormat(format!(
            "expected PCM (format 1), got format {}",
            info.format
        )));
    }
    if info.channels != 1 {
        return Err(Error::WavFormat(format!(
            "expected mono, got {} channels",
            info.channels
        )));
    }
    if info.bits != 16 {
        return Err(Error::WavFormat(format!(
            "expected 16-bit samples, got {}",
            info.bits
        )));
    }
    if info.sample_rate != SAMPLE_RATE {
        return Err(Error::WavFormat(format!(
            "expected {SAMPLE_RATE} Hz, got {} Hz (resampling is out of scope)",
            info.sample_rate
        )));
    }
    Ok(())
}

/// Loads a 16-bit PCM mono 16 kHz WAV, scaling samples to [-1, 1). Any
/// other layout is rejected with an explicit error.
pub fn load_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let info = parse_wav_header(&bytes)?;
    validate_wav(&info)?;
    let n = info.data_len / 2;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let at = info.data_start + 2 * i;
        let v = i16::from_le_bytes([bytes[at], bytes[at + 1]]);
        samples.push(v as f64 / 32768.0);
    }
    Ok(Waveform::new(samples, info.sample_rate))
}

/// Sample rate and length without decoding the payload.
pub fn wav_info(path: &Path) -> Result<(u32, usize)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let info = parse_wav_header(&bytes)?;
    validate_wav(&info)?;
    Ok((info.sample_rate, info.data_len / 2))
}

/// Writes a mono 16-bit PCM WAV; samples are clamped to [-1, 1].
pub fn save_wav(path: &Path, wav: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let n = wav.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&wav.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wav.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &wav.samples {
        // Symmetric with the read scaling (1/32768) so a round trip stays
        // within one quantization step.
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(v: &str) -> Result<Self> {
        match v {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split: {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration_secs: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

/// Split assignment rule for [`build_manifest`].
#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Seeded random fractions; the remainder goes to the test split.
    Fractions { train: f64, valid: f64, seed: u64 },
    /// Explicit membership by path relative to the corpus root; files not
    /// listed go to the test split.
    Explicit {
        train: Vec<PathBuf>,
        valid: Vec<PathBuf>,
    },
}

impl Manifest {
    pub fn paths_for(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.path.as_path())
            .collect()
    }

    /// One entry per line, tab-delimited: path, duration in seconds, split.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{:.6}\t{}\n",
                e.path.display(),
                e.duration_secs,
                e.split
            ));
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (p, d, s) = (parts.next(), parts.next(), parts.next());
            let (Some(p), Some(d), Some(s)) = (p, d, s) else {
                return Err(Error::InvalidArgument(format!(
                    "manifest line {} is malformed",
                    i + 1
                )));
            };
            entries.push(ManifestEntry {
                path: PathBuf::from(p),
                duration_secs: d.parse().map_err(|e| {
                    Error::InvalidArgument(format!("manifest line {}: {e}", i + 1))
                })?,
                split: s.parse()?,
            });
        }
        Ok(Manifest { entries })
    }
}

fn collect_wavs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_wavs(&path, out)?;
        } else if path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("wav"))
            .unwrap_or(false)
        {
            out.push(path);
        }
    }
    Ok(())
}

/// Scans a directory tree for WAV files (lexicographic order) and assigns
/// splits. Non-audio files are ignored; an empty corpus is an error.
pub fn build_manifest(root: &Path, spec: &SplitSpec) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_wavs(root, &mut paths)?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptySignal(format!(
            "no wav files under {}",
            root.display()
        )));
    }
    let n = paths.len();
    let splits: Vec<Split> = match spec {
        SplitSpec::Fractions { train, valid, seed } => {
            if !(0.0..=1.0).contains(train) || !(0.0..=1.0).contains(valid) || train + valid > 1.0
            {
                return Err(Error::InvalidConfig(
                    "split fractions must be nonnegative and sum to <= 1".into(),
                ));
            }
            let n_train = (n as f64 * train).round() as usize;
            let n_valid = ((n as f64 * valid).round() as usize).min(n - n_train);
            let mut order: Vec<usize> = (0..n).collect();
            use rand::seq::SliceRandom;
            order.shuffle(&mut ChaCha20Rng::seed_from_u64(*seed));
            let mut splits = vec![Split::Test; n];
            for &i in &order[..n_train] {
                splits[i] = Split::Train;
            }
            for &i in &order[n_train..n_train + n_valid] {
                splits[i] = Split::Valid;
            }
            splits
        }
        SplitSpec::Explicit { train, valid } => paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(root).unwrap_or(p);
                if train.iter().any(|t| t == rel) {
                    Split::Train
                } else if valid.iter().any(|v| v == rel) {
                    Split::Valid
                } else {
                    Split::Test
                }
            })
            .collect(),
    };
    let mut entries = Vec::with_capacity(n);
    for (path, split) in paths.into_iter().zip(splits) {
        let (sr, len) = wav_info(&path)?;
        entries.push(ManifestEntry {
            duration_secs: len as f64 / sr as f64,
            path,
            split,
        });
    }
    Ok(Manifest { entries })
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Deterministic speech-like signals: 3-5 harmonics of a drifting
/// fundamental in [100, 300] Hz under a slow amplitude envelope, plus
/// -30 dB noise, peak-normalized.
pub fn synth_corpus(n: usize, duration_secs: f64, seed: u64) -> Vec<Waveform> {
    assert!(n >= 1, "synth_corpus requires n >= 1");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let samples_per = (duration_secs * SAMPLE_RATE as f64).round() as usize;
    (0..n)
        .map(|_| {
            let f0: f64 = rng.random_range(100.0..300.0);
            let n_harm: usize = rng.random_range(3..=5);
            let amps: Vec<f64> = (1..=n_harm)
                .map(|k| rng.random_range(0.7..1.0) / k as f64)
                .collect();
            let env_freq: f64 = rng.random_range(0.3..1.5);
            let env_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let drift_freq: f64 = rng.random_range(0.2..0.8);
            let drift_phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);

            let mut phases = vec![0.0f64; n_harm];
            let mut samples = Vec::with_capacity(samples_per);
            for i in 0..samples_per {
                let t = i as f64 / SAMPLE_RATE as f64;
                let drift =
                    1.0 + 0.01 * (std::f64::consts::TAU * drift_freq * t + drift_phase).sin();
                let env = 0.55 + 0.45 * (std::f64::consts::TAU * env_freq * t + env_phase).sin();
                let mut v = 0.0;
                for (k, phase) in phases.iter_mut().enumerate() {
                    *phase += std::f64::consts::TAU * (k + 1) as f64 * f0 * drift
                        / SAMPLE_RATE as f64;
                    v += amps[k] * phase.sin();
                }
                samples.push(env * v);
            }
            let rms =
                (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
            let noise_sigma = rms * 10f64.powf(-30.0 / 20.0);
            for s in &mut samples {
                let e: f64 = StandardNormal.sample(&mut rng);
                *s += noise_sigma * e;
            }
            let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            if peak > 0.0 {
                for s in &mut samples {
                    *s /= peak;
                }
            }
            Waveform::new(samples, SAMPLE_RATE)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Fixed batch of power-spectrogram segments (each F x t_seg).
#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<PowerSpectrogram>,
}

/// Deterministic segment order for an epoch: a seeded shuffle, different
/// per epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Full preprocessing chain for a corpus in memory: trim, normalize, STFT,
/// power, segment. No segment crosses an utterance boundary.
pub fn corpus_segments(
    waves: &[Waveform],
    stft_cfg: &StftConfig,
    t_seg: usize,
    trim_threshold_db: f64,
) -> Result<Vec<PowerSpectrogram>> {
    let mut segments = Vec::new();
    for wav in waves {
        let trimmed = preprocess_waveform(wav, trim_threshold_db)?;
        let spec = stft(&trimmed, stft_cfg)?;
        let power = power_spectrogram(&spec);
        segments.extend(segment(&power, t_seg));
    }
    Ok(segments)
}

/// One epoch of seed-shuffled batches; the final partial batch is emitted
/// smaller.
pub fn batch_iter<'a>(
    segments: &'a [PowerSpectrogram],
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let order = epoch_order(segments.len(), seed, 0);
    let chunks: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    chunks.into_iter().map(move |chunk| Batch {
        sequences: chunk.iter().map(|&i| segments[i].clone()).collect(),
    })
}

/// Frames-as-rows views of segments (T x F), the layout the model wants.
pub fn segments_as_frames(segments: &[PowerSpectrogram]) -> Vec<Array2<f64>> {
    segments.iter().map(|s| s.values.t().to_owned()).collect()
}
