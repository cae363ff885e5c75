//! Waveform-to-spectrogram pipeline: silence trimming, peak normalization,
//! STFT/ISTFT with a sine window, power spectrograms, fixed-length
//! segmentation and Griffin-Lim phase reconstruction.
//!
//! All operations are pure functions of their inputs and safe to call
//! concurrently.

use ndarray::{s, Array1, Array2};
use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Floor applied to power spectrograms; exact zeros are singular under the
/// log inside the Itakura-Saito divergence.
pub const EPS_POWER: f64 = 1e-10;

/// Frame length used by the silence trimmer, in seconds.
const TRIM_FRAME_SECS: f64 = 0.032;

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        assert!(sample_rate > 0, "sample rate must be positive");
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Analysis settings: sine window of `window_length` samples, hop of `hop`
/// samples. The defaults give 75% overlap and F = 513 frequency bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_length: 1024,
            hop: 256,
        }
    }
}

impl StftConfig {
    pub fn new(window_length: usize, hop: usize) -> Result<Self> {
        let cfg = StftConfig { window_length, hop };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(Error::InvalidConfig("window and hop must be positive".into()));
        }
        if self.window_length % self.hop != 0 {
            return Err(Error::InvalidConfig(format!(
                "hop {} must divide window length {}",
                self.hop, self.window_length
            )));
        }
        if self.window_length % 2 != 0 {
            return Err(Error::InvalidConfig("window length must be even".into()));
        }
        Ok(())
    }

    /// Number of frequency bins (positive frequencies only).
    pub fn f_bins(&self) -> usize {
        self.window_length / 2 + 1
    }

    /// Frame count for a signal of `n` samples (no center padding).
    pub fn frame_count(&self, n: usize) -> usize {
        if n < self.window_length {
            0
        } else {
            1 + (n - self.window_length) / self.hop
        }
    }
}

/// Half-offset sine analysis/synthesis window; its squared shifts satisfy
/// constant overlap-add at any integer window/hop ratio.
pub fn sine_window(n: usize) -> Array1<f64> {
    Array1::from_shape_fn(n, |i| {
        (std::f64::consts::PI * (i as f64 + 0.5) / n as f64).sin()
    })
}

/// Complex STFT values (F x T) plus the settings that produced them.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex<f64>>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn f_bins(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|c| c.norm())
    }
}

/// Nonnegative power spectrogram (F x T), floored at [`EPS_POWER`].
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub values: Array2<f64>,
}

impl PowerSpectrogram {
    /// Floors every entry; use this for externally produced arrays.
    pub fn from_values(values: Array2<f64>) -> Self {
        PowerSpectrogram {
            values: values.mapv(|v| v.max(EPS_POWER)),
        }
    }

    pub fn f_bins(&self) -> usize {
        self.values.dim().0
    }

    pub fn frames(&self) -> usize {
        self.values.dim().1
    }
}

/// Trims leading/trailing low-energy frames and peak-normalizes.
///
/// Energy is measured on non-overlapping 32 ms frames as mean power; frames
/// more than `threshold_db` below the loudest frame count as silence.
/// Interior silence is kept. Returns an error when every frame is silent
/// (an all-zero or empty signal).
pub fn preprocess_waveform(wav: &Waveform, threshold_db: f64) -> Result<Waveform> {
    if wav.is_empty() {
        return Err(Error::EmptySignal("empty waveform".into()));
    }
    let frame_len = ((wav.sample_rate as f64 * TRIM_FRAME_SECS).round() as usize).max(1);
    let frames: Vec<&[f64]> = wav.samples.chunks(frame_len).collect();
    let mean_power: Vec<f64> = frames
        .iter()
        .map(|f| f.iter().map(|&v| v * v).sum::<f64>() / f.len() as f64)
        .collect();
    let peak_power = mean_power.iter().cloned().fold(0.0f64, f64::max);
    if peak_power <= 0.0 {
        return Err(Error::EmptySignal("all-silence signal".into()));
    }
    let threshold = peak_power * 10f64.powf(-threshold_db / 10.0);
    let keep = |p: &f64| *p >= threshold;
    let first = mean_power.iter().position(keep).expect("peak frame exists");
    let last = mean_power.iter().rposition(keep).expect("peak frame exists");

    let start = first * frame_len;
    let end = (last * frame_len + frames[last].len()).min(wav.samples.len());
    let mut samples = wav.samples[start..end].to_vec();
    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut samples {
            *v /= peak;
        }
    }
    Ok(Waveform::new(samples, wav.sample_rate))
}

/// STFT with a sine window and no center padding:
/// T = 1 + floor((N - window_length) / hop).
pub fn stft(wav: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let n = wav.len();
    let wl = cfg.window_length;
    if n < wl {
        return Err(Error::InvalidArgument(format!(
            "signal of {n} samples is shorter than one window ({wl})"
        )));
    }
    let t_frames = cfg.frame_count(n);
    let f_bins = cfg.f_bins();
    let window = sine_window(wl);

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(wl);
    let mut values = Array2::zeros((f_bins, t_frames));
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); wl];
    for t in 0..t_frames {
        let offset = t * cfg.hop;
        for i in 0..wl {
            buf[i] = Complex::new(wav.samples[offset + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..f_bins {
            values[(f, t)] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        values,
        config: *cfg,
    })
}

/// Inverse STFT: per-frame inverse FFT, sine synthesis window, overlap-add,
/// then division by the accumulated squared window.
pub fn istft(spec: &ComplexSpectrogram, cfg: &StftConfig) -> Result<Waveform> {
    if spec.config != *cfg {
        return Err(Error::InvalidConfig(format!(
            "spectrogram was produced with {:?}, not {:?}",
            spec.config, cfg
        )));
    }
    if spec.f_bins() != cfg.f_bins() {
        return Err(Error::shape(
            "istft",
            format!("{} bins", cfg.f_bins()),
            format!("{} bins", spec.f_bins()),
        ));
    }
    let wl = cfg.window_length;
    let t_frames = spec.frames();
    let out_len = wl + (t_frames.saturating_sub(1)) * cfg.hop;
    let window = sine_window(wl);

    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(wl);
    let mut out = vec![0.0f64; out_len];
    let mut norm = vec![0.0f64; out_len];
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); wl];
    for t in 0..t_frames {
        buf[0] = spec.values[(0, t)];
        buf[wl / 2] = spec.values[(wl / 2, t)];
        for f in 1..wl / 2 {
            buf[f] = spec.values[(f, t)];
            buf[wl - f] = spec.values[(f, t)].conj();
        }
        ifft.process(&mut buf);
        let offset = t * cfg.hop;
        for i in 0..wl {
            // rustfft leaves the inverse unnormalized; divide by wl here.
            out[offset + i] += buf[i].re / wl as f64 * window[i];
            norm[offset + i] += window[i] * window[i];
        }
    }
    for (o, n) in out.iter_mut().zip(&norm) {
        if *n > 0.0 {
            *o /= n;
        }
    }
    Ok(Waveform::new(out, 16_000))
}

/// Squared modulus per bin, floored at [`EPS_POWER`].
pub fn power_spectrogram(spec: &ComplexSpectrogram) -> PowerSpectrogram {
    PowerSpectrogram::from_values(spec.values.mapv(|c| c.norm_sqr()))
}

/// Splits into consecutive non-overlapping segments of exactly `t_seg`
/// frames; a trailing remainder is dropped. Empty output when the input is
/// shorter than one segment.
pub fn segment(power: &PowerSpectrogram, t_seg: usize) -> Vec<PowerSpectrogram> {
    assert!(t_seg >= 1, "segment length must be >= 1");
    let t_total = power.frames();
    (0..t_total / t_seg)
        .map(|k| PowerSpectrogram {
            values: power
                .values
                .slice(s![.., k * t_seg..(k + 1) * t_seg])
                .to_owned(),
        })
        .collect()
}

/// Griffin-Lim phase reconstruction from a magnitude spectrogram, starting
/// from zero phase. Returns the waveform after `iters` projections.
pub fn griffin_lim(mag: &Array2<f64>, cfg: &StftConfig, iters: usize) -> Result<Waveform> {
    Ok(griffin_lim_trace(mag, cfg, iters)?.0)
}

/// Griffin-Lim together with the spectral-convergence trace
/// || |STFT(x_k)| - mag ||_F / ||mag||_F, one entry per iteration.
pub fn griffin_lim_trace(
    mag: &Array2<f64>,
    cfg: &StftConfig,
    iters: usize,
) -> Result<(Waveform, Vec<f64>)> {
    assert!(iters >= 1, "griffin_lim requires at least one iteration");
    cfg.validate()?;
    if mag.dim().0 != cfg.f_bins() {
        return Err(Error::shape(
            "griffin_lim",
            format!("{} bins", cfg.f_bins()),
            format!("{} bins", mag.dim().0),
        ));
    }
    let mag_norm = mag.iter().map(|&v| v * v).sum::<f64>().sqrt();
    let mut estimate = ComplexSpectrogram {
        values: mag.mapv(|m| Complex::new(m, 0.0)),
        config: *cfg,
    };
    let mut trace = Vec::with_capacity(iters);
    let mut wav = istft(&estimate, cfg)?;
    for _ in 0..iters {
        let rebuilt = stft(&wav, cfg)?;
        let rebuilt_mag = rebuilt.magnitude();
        let diff = (&rebuilt_mag - mag).mapv(|v| v * v).sum().sqrt();
        trace.push(if mag_norm > 0.0 { diff / mag_norm } else { 0.0 });
        // Keep the rebuilt phase, restore the target magnitude.
        estimate.values = ndarray::Zip::from(&rebuilt.values)
            .and(mag)
            .map_collect(|&c, &m| {
                let r = c.norm();
                if r > 0.0 {
                    c * (m / r)
                } else {
                    Complex::new(m, 0.0)
                }
            });
        wav = istft(&estimate, cfg)?;
    }
    Ok((wav, trace))
}
