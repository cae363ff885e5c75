//! End-to-end helpers tying the model to the signal path: waveform in,
//! resynthesized or generated waveform out.

use ndarray::Array2;
use num_complex::Complex;
use rand_chacha::ChaCha20Rng;

use crate::dsp::{
    griffin_lim, istft, power_spectrogram, preprocess_waveform, stft, ComplexSpectrogram,
    PowerSpectrogram, StftConfig, Waveform,
};
use crate::error::Result;
use crate::metrics::{log_spectral_distance, rmse, si_sdr, UtteranceMetrics};
use crate::model::{DvaeModel, Mode};

/// Default silence-trim threshold in dB below the loudest frame.
pub const TRIM_DB: f64 = 30.0;

/// Everything produced by one analysis-resynthesis run.
pub struct ResynthResult {
    /// Trimmed, peak-normalized input (the metric reference).
    pub reference: Waveform,
    /// Waveform rebuilt from the model variances and the original phase.
    pub estimate: Waveform,
    pub ref_power: PowerSpectrogram,
    pub est_power: PowerSpectrogram,
}

/// Analysis-resynthesis of one utterance: preprocess, analyze, run the
/// model in the given feedback mode, then invert using the model magnitude
/// sqrt(v_s) with the original phase.
pub fn analysis_resynthesis(
    model: &DvaeModel,
    stft_cfg: &StftConfig,
    wav: &Waveform,
    mode: Mode,
    trim_db: f64,
    rng: &mut ChaCha20Rng,
) -> Result<ResynthResult> {
    let reference = preprocess_waveform(wav, trim_db)?;
    let spec = stft(&reference, stft_cfg)?;
    let ref_power = power_spectrogram(&spec);
    let v_s = model.resynthesize(&ref_power, mode, rng)?;
    let est_power = PowerSpectrogram::from_values(v_s.t().to_owned());

    // Original phase with the model magnitude.
    let est_values = Array2::from_shape_fn(spec.values.dim(), |(f, t)| {
        let c = spec.values[(f, t)];
        let mag = est_power.values[(f, t)].sqrt();
        let r = c.norm();
        if r > 0.0 {
            c * (mag / r)
        } else {
            Complex::new(mag, 0.0)
        }
    });
    let estimate = istft(
        &ComplexSpectrogram {
            values: est_values,
            config: *stft_cfg,
        },
        stft_cfg,
    )?;
    Ok(ResynthResult {
        reference,
        estimate,
        ref_power,
        est_power,
    })
}

/// Samples a spectrogram from the model and reconstructs a waveform with
/// Griffin-Lim phase (magnitude = sqrt of the generated power).
pub fn generate_waveform(
    model: &DvaeModel,
    stft_cfg: &StftConfig,
    t_frames: usize,
    gl_iters: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Waveform> {
    let power = model.generate(t_frames, rng, None)?;
    let mag = power.values.mapv(f64::sqrt);
    griffin_lim(&mag, stft_cfg, gl_iters)
}

/// RMSE, SI-SDR and LSD for one reference/estimate pair. The LSD is
/// computed on power spectrograms of the two waveforms, truncated to the
/// common frame count.
pub fn evaluate_pair(
    name: &str,
    reference: &Waveform,
    estimate: &Waveform,
    stft_cfg: &StftConfig,
) -> Result<UtteranceMetrics> {
    let r = rmse(reference, estimate)?;
    let sdr = si_sdr(reference, estimate)?;
    let ref_spec = power_spectrogram(&stft(reference, stft_cfg)?);
    let est_spec = power_spectrogram(&stft(estimate, stft_cfg)?);
    let t = ref_spec.frames().min(est_spec.frames());
    let cut = |p: &PowerSpectrogram| PowerSpectrogram {
        values: p.values.slice(ndarray::s![.., ..t]).to_owned(),
    };
    let lsd = log_spectral_distance(&cut(&ref_spec), &cut(&est_spec))?;
    Ok(UtteranceMetrics {
        name: name.to_string(),
        rmse: r,
        si_sdr_db: sdr,
        lsd_db: lsd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_corpus;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn resynthesis_round_trip_shapes_and_determinism() {
        let cfg = StftConfig::new(128, 32).unwrap();
        let mcfg = ModelConfig {
            f_bins: 65,
            ..ModelConfig::desk()
        };
        let model = DvaeModel::new(mcfg, 3).unwrap();
        let wav = &synth_corpus(1, 1.0, 5)[0];

        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let a = analysis_resynthesis(&model, &cfg, wav, Mode::Tf, TRIM_DB, &mut rng).unwrap();
        assert_eq!(a.ref_power.f_bins(), 65);
        assert_eq!(a.est_power.values.dim(), a.ref_power.values.dim());
        assert!(!a.estimate.is_empty());

        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let b = analysis_resynthesis(&model, &cfg, wav, Mode::Tf, TRIM_DB, &mut rng).unwrap();
        assert_eq!(a.estimate.samples, b.estimate.samples);

        let m = evaluate_pair("x", &a.reference, &a.estimate, &cfg).unwrap();
        assert!(m.rmse.is_finite());
        assert!(m.lsd_db.is_finite());
    }

    #[test]
    fn generation_produces_audio() {
        let cfg = StftConfig::new(128, 32).unwrap();
        let mcfg = ModelConfig {
            f_bins: 65,
            ..ModelConfig::desk()
        };
        let model = DvaeModel::new(mcfg, 4).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let wav = generate_waveform(&model, &cfg, 20, 8, &mut rng).unwrap();
        let expected_len = cfg.window_length + 19 * cfg.hop;
        assert_eq!(wav.len(), expected_len);
        assert!(wav.samples.iter().any(|&v| v != 0.0));
    }
}
