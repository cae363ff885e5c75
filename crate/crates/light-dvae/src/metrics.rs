//! Waveform- and spectrogram-domain evaluation: RMSE, scale-invariant
//! signal-to-distortion ratio, and log-spectral distance.

use serde::{Deserialize, Serialize};

use crate::dsp::{PowerSpectrogram, Waveform};
use crate::error::{Error, Result};

/// Root mean squared error over the aligned prefix (lengths are aligned by
/// truncation to the shorter signal).
pub fn rmse(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.sample_rate != estimate.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rate mismatch: {} vs {}",
            reference.sample_rate, estimate.sample_rate
        )));
    }
    let n = reference.len().min(estimate.len());
    if n == 0 {
        return Err(Error::EmptySignal("rmse: empty overlap".into()));
    }
    let sum: f64 = reference.samples[..n]
        .iter()
        .zip(&estimate.samples[..n])
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sum / n as f64).sqrt())
}

/// Scale-invariant SDR in dB: the estimate is compared against its
/// projection alpha * ref with alpha = <est, ref> / ||ref||^2. A zero
/// residual yields +inf; an estimate orthogonal to the reference -inf.
pub fn si_sdr(reference: &Waveform, estimate: &Waveform) -> Result<f64> {
    if reference.sample_rate != estimate.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "sample rate mismatch: {} vs {}",
            reference.sample_rate, estimate.sample_rate
        )));
    }
    let n = reference.len().min(estimate.len());
    if n == 0 {
        return Err(Error::EmptySignal("si_sdr: empty overlap".into()));
    }
    let r = &reference.samples[..n];
    let e = &estimate.samples[..n];
    let ref_energy: f64 = r.iter().map(|v| v * v).sum();
    if ref_energy == 0.0 {
        return Err(Error::EmptySignal("si_sdr: all-zero reference".into()));
    }
    let dot: f64 = r.iter().zip(e).map(|(&a, &b)| a * b).sum();
    let alpha = dot / ref_energy;
    let target_energy = alpha * alpha * ref_energy;
    let residual_energy: f64 = r
        .iter()
        .zip(e)
        .map(|(&a, &b)| {
            let d = alpha * a - b;
            d * d
        })
        .sum();
    if residual_energy == 0.0 {
        return Ok(f64::INFINITY);
    }
    if target_energy == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (target_energy / residual_energy).log10())
}

/// Log-spectral distance in dB: mean over frames of the per-frame RMS of
/// 10 log10(ref / est). Symmetric in its arguments.
pub fn log_spectral_distance(
    ref_power: &PowerSpectrogram,
    est_power: &PowerSpectrogram,
) -> Result<f64> {
    if ref_power.values.dim() != est_power.values.dim() {
        return Err(Error::shape(
            "log_spectral_distance",
            format!("{:?}", ref_power.values.dim()),
            format!("{:?}", est_power.values.dim()),
        ));
    }
    let (f_bins, t_frames) = ref_power.values.dim();
    let mut acc = 0.0;
    for t in 0..t_frames {
        let mut sq = 0.0;
        for f in 0..f_bins {
            let d = 10.0 * (ref_power.values[(f, t)] / est_power.values[(f, t)]).log10();
            sq += d * d;
        }
        acc += (sq / f_bins as f64).sqrt();
    }
    Ok(acc / t_frames as f64)
}

/// Per-utterance metric values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub rmse: f64,
    pub si_sdr_db: f64,
    pub lsd_db: f64,
}

/// Per-utterance list plus corpus means (arithmetic mean of the
/// per-utterance values).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub utterances: Vec<UtteranceMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, m: UtteranceMetrics) {
        self.utterances.push(m);
    }

    pub fn mean_rmse(&self) -> f64 {
        mean(self.utterances.iter().map(|m| m.rmse))
    }

    pub fn mean_si_sdr_db(&self) -> f64 {
        mean(self.utterances.iter().map(|m| m.si_sdr_db))
    }

    pub fn mean_lsd_db(&self) -> f64 {
        mean(self.utterances.iter().map(|m| m.lsd_db))
    }

    /// Tab-delimited text: one row per utterance, then a `mean` row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("name\trmse\tsi_sdr_db\tlsd_db\n");
        for m in &self.utterances {
            out.push_str(&format!(
                "{}\t{:e}\t{:.4}\t{:.4}\n",
                m.name, m.rmse, m.si_sdr_db, m.lsd_db
            ));
        }
        out.push_str(&format!(
            "mean\t{:e}\t{:.4}\t{:.4}\n",
            self.mean_rmse(),
            self.mean_si_sdr_db(),
            self.mean_lsd_db()
        ));
        out
    }

    /// Machine-readable summary. Keys: `utterances` (per-utterance list
    /// with `name`, `rmse`, `si_sdr_db`, `lsd_db`) and `mean` (same metric
    /// keys).
    pub fn to_json(&self) -> Result<String> {
        let summary = serde_json::json!({
            "utterances": self.utterances,
            "mean": {
                "rmse": self.mean_rmse(),
                "si_sdr_db": self.mean_si_sdr_db(),
                "lsd_db": self.mean_lsd_db(),
            },
        });
        Ok(serde_json::to_string_pretty(&summary)?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn wav(samples: Vec<f64>) -> Waveform {
        Waveform::new(samples, 16000)
    }

    #[test]
    fn rmse_basics() {
        let a = wav(vec![1.0, -1.0]);
        let b = wav(vec![0.0, 0.0]);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn rmse_empty_overlap_errors() {
        let a = wav(vec![]);
        let b = wav(vec![1.0]);
        assert!(rmse(&a, &b).is_err());
    }

    #[test]
    fn si_sdr_scale_of_reference_is_perfect() {
        let r = wav(vec![0.3, -0.7, 0.2, 0.9]);
        let e = wav(r.samples.iter().map(|v| v * 0.5).collect());
        assert_eq!(si_sdr(&r, &e).unwrap(), f64::INFINITY);
    }

    #[test]
    fn si_sdr_hand_case() {
        // ref [1, 0], est [1, 1]: alpha 1, target [1, 0], residual [0, -1].
        let r = wav(vec![1.0, 0.0]);
        let e = wav(vec![1.0, 1.0]);
        assert!((si_sdr(&r, &e).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn si_sdr_zero_reference_errors_and_orthogonal_is_neg_inf() {
        let z = wav(vec![0.0, 0.0]);
        let e = wav(vec![1.0, 0.0]);
        assert!(si_sdr(&z, &e).is_err());

        let r = wav(vec![1.0, 0.0]);
        let orth = wav(vec![0.0, 1.0]);
        assert_eq!(si_sdr(&r, &orth).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn si_sdr_orthogonal_noise_at_known_level() {
        // est = ref + n with n orthogonal and ||n||^2 = ||ref||^2 / 10^k
        // gives exactly 10 k dB.
        let n = 1024usize;
        let reference: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 7.0 * i as f64 / n as f64).sin())
            .collect();
        let noise_dir: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 11.0 * i as f64 / n as f64).cos())
            .collect();
        let (re, ne): (f64, f64) = (
            reference.iter().map(|v| v * v).sum(),
            noise_dir.iter().map(|v| v * v).sum(),
        );
        let dot: f64 = reference.iter().zip(&noise_dir).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-9, "test vectors must be orthogonal");
        for k in [1.0f64, 2.0, 3.0] {
            let scale = (re / (ne * 10f64.powf(k))).sqrt();
            let est: Vec<f64> = reference
                .iter()
                .zip(&noise_dir)
                .map(|(&r, &d)| r + scale * d)
                .collect();
            let got = si_sdr(&wav(reference.clone()), &wav(est)).unwrap();
            assert!((got - 10.0 * k).abs() < 1e-9, "k {k}: got {got}");
        }
    }

    #[test]
    fn lsd_basics() {
        let p = PowerSpectrogram::from_values(Array2::from_elem((4, 3), 2.0));
        assert_eq!(log_spectral_distance(&p, &p).unwrap(), 0.0);

        let q = PowerSpectrogram::from_values(Array2::from_elem((4, 3), 20.0));
        let d = log_spectral_distance(&p, &q).unwrap();
        assert!((d - 10.0).abs() < 1e-12);
        let d2 = log_spectral_distance(&q, &p).unwrap();
        assert_eq!(d, d2);

        let wrong = PowerSpectrogram::from_values(Array2::from_elem((4, 2), 1.0));
        assert!(log_spectral_distance(&p, &wrong).is_err());
    }

    #[test]
    fn report_means_are_arithmetic() {
        let mut rep = MetricReport::default();
        rep.push(UtteranceMetrics {
            name: "a".into(),
            rmse: 0.1,
            si_sdr_db: 10.0,
            lsd_db: 2.0,
        });
        rep.push(UtteranceMetrics {
            name: "b".into(),
            rmse: 0.3,
            si_sdr_db: 20.0,
            lsd_db: 4.0,
        });
        assert!((rep.mean_rmse() - 0.2).abs() < 1e-15);
        assert!((rep.mean_si_sdr_db() - 15.0).abs() < 1e-15);
        assert!((rep.mean_lsd_db() - 3.0).abs() < 1e-15);
        assert!(rep.to_tsv().lines().count() == 4);
        assert!(rep.to_json().unwrap().contains("si_sdr_db"));
    }

    proptest! {
        #[test]
        fn si_sdr_invariant_under_joint_scaling(
            samples in proptest::collection::vec(-1.0f64..1.0, 8..64),
            noise in proptest::collection::vec(-0.1f64..0.1, 8..64),
            c in prop_oneof![0.01f64..100.0, -100.0f64..-0.01],
        ) {
            let n = samples.len().min(noise.len());
            let r: Vec<f64> = samples[..n].to_vec();
            prop_assume!(r.iter().any(|&v| v.abs() > 1e-6));
            let e: Vec<f64> = r.iter().zip(&noise[..n]).map(|(&a, &b)| a + b).collect();
            let base = si_sdr(&wav(r.clone()), &wav(e.clone())).unwrap();
            let scaled = si_sdr(
                &wav(r.iter().map(|v| v * c).collect()),
                &wav(e.iter().map(|v| v * c).collect()),
            )
            .unwrap();
            if base.is_finite() {
                prop_assert!((base - scaled).abs() < 1e-9 * base.abs().max(1.0));
            } else {
                prop_assert_eq!(base, scaled);
            }
        }

        #[test]
        fn rmse_triangle_bound(
            a in proptest::collection::vec(-1.0f64..1.0, 16),
            b in proptest::collection::vec(-1.0f64..1.0, 16),
            c in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let (wa, wb, wc) = (wav(a), wav(b), wav(c));
            let ab = rmse(&wa, &wb).unwrap();
            let bc = rmse(&wb, &wc).unwrap();
            let ac = rmse(&wa, &wc).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
