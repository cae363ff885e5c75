//! Diagonal-Gaussian parameterizations, closed-form divergences and
//! reparameterized sampling.
//!
//! Means and log-variances are tensors so every divergence is
//! differentiable end to end. A `DiagGaussianParams` may hold a single
//! vector (1 x L) or a per-frame stack (T x L); the divergences sum over
//! all entries, so the stacked form yields the summed per-frame divergence
//! directly.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-variances are clamped to this range before exponentiation so the
/// Itakura-Saito term can never divide by a collapsed variance.
pub const LOG_VAR_CLAMP: (f64, f64) = (-15.0, 15.0);

/// Mean and log-variance of a diagonal Gaussian (or a stack of them).
#[derive(Debug, Clone)]
pub struct DiagGaussianParams {
    pub mean: Tensor,
    pub log_var: Tensor,
}

impl DiagGaussianParams {
    /// Wraps raw network outputs, clamping the log-variance.
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() {
            return Err(Error::shape(
                "DiagGaussianParams",
                format!("{:?}", mean.shape()),
                format!("{:?}", log_var.shape()),
            ));
        }
        Ok(DiagGaussianParams {
            mean,
            log_var: log_var.clamp(LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1),
        })
    }

    /// The standard normal N(0, I) with the given shape.
    pub fn standard(rows: usize, cols: usize) -> Self {
        DiagGaussianParams {
            mean: Tensor::zeros(rows, cols),
            log_var: Tensor::zeros(rows, cols),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mean.shape()
    }

    pub fn variance(&self) -> Tensor {
        self.log_var.exp()
    }
}

/// Reparameterized draw: mean + exp(log_var / 2) * noise. Differentiable
/// with respect to the parameters; the noise is a fixed standard-normal
/// sample.
pub fn reparam_sample(params: &DiagGaussianParams, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != params.shape() {
        return Err(Error::shape(
            "reparam_sample noise",
            format!("{:?}", params.shape()),
            format!("{:?}", noise.shape()),
        ));
    }
    let std = params.log_var.scale(0.5).exp();
    Ok(params.mean.add(&std.mul(noise)))
}

/// KL(q || p) between diagonal Gaussians, summed over all entries:
/// sum 1/2 (log vp/vq + (vq + (mq - mp)^2) / vp - 1).
pub fn kl_diag_gaussian(q: &DiagGaussianParams, p: &DiagGaussianParams) -> Result<Tensor> {
    if q.shape() != p.shape() {
        return Err(Error::shape(
            "kl_diag_gaussian",
            format!("{:?}", q.shape()),
            format!("{:?}", p.shape()),
        ));
    }
    let log_ratio = p.log_var.sub(&q.log_var);
    let var_ratio = q.log_var.sub(&p.log_var).exp();
    let mean_diff = q.mean.sub(&p.mean);
    let mean_term = mean_diff.mul(&mean_diff).mul(&p.log_var.neg().exp());
    let per_entry = log_ratio
        .add(&var_ratio)
        .add(&mean_term)
        .add_scalar(-1.0)
        .scale(0.5);
    Ok(per_entry.sum_all())
}

/// KL(q || N(0, I)); delegates to the general form so the two agree
/// bit for bit.
pub fn kl_to_standard_normal(q: &DiagGaussianParams) -> Tensor {
    let (r, c) = q.shape();
    kl_diag_gaussian(q, &DiagGaussianParams::standard(r, c)).expect("shapes match by construction")
}

/// Itakura-Saito divergence sum_i (x_i/v_i - log(x_i/v_i) - 1) between a
/// nonnegative power tensor and a positive variance tensor. Equals the
/// negative log-likelihood of a circular complex Gaussian up to the
/// additive constant `sum log(pi x) + n`.
pub fn itakura_saito(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return Err(Error::shape(
            "itakura_saito",
            format!("{:?}", x.shape()),
            format!("{:?}", v.shape()),
        ));
    }
    if v.values().iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidArgument(
            "itakura_saito: variance entries must be positive".into(),
        ));
    }
    if x.values().iter().any(|&e| e <= 0.0) {
        return Err(Error::InvalidArgument(
            "itakura_saito: power entries must be positive (floor at epsilon first)".into(),
        ));
    }
    let ratio = x.div(v);
    Ok(ratio.sub(&ratio.ln()).add_scalar(-1.0).sum_all())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha20Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    #[test]
    fn reparam_zero_noise_gives_mean() {
        let p = DiagGaussianParams::new(
            Tensor::constant(array![[1.0, -2.0, 0.5]]),
            Tensor::constant(array![[0.3, -0.7, 2.0]]),
        )
        .unwrap();
        let s = reparam_sample(&p, &Tensor::zeros(1, 3)).unwrap();
        assert_eq!(s.values(), &array![[1.0, -2.0, 0.5]]);
    }

    #[test]
    fn reparam_identity_case() {
        let p = DiagGaussianParams::standard(1, 4);
        let noise = Tensor::constant(array![[0.3, -1.2, 0.0, 2.5]]);
        let s = reparam_sample(&p, &noise).unwrap();
        assert_eq!(s.values(), noise.values());
    }

    #[test]
    fn reparam_rejects_length_mismatch() {
        let p = DiagGaussianParams::standard(1, 4);
        assert!(reparam_sample(&p, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn reparam_monte_carlo_moments() {
        // Empirical mean/variance over 1e6 draws within 1% of the parameters.
        let mean = 0.7;
        let log_var = -0.4;
        let p = DiagGaussianParams::new(
            Tensor::constant(Array2::from_elem((1, 1), mean)),
            Tensor::constant(Array2::from_elem((1, 1), log_var)),
        )
        .unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 1_000_000usize;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x = reparam_sample(&p, &Tensor::constant(Array2::from_elem((1, 1), eps)))
                .unwrap()
                .item();
            sum += x;
            sum_sq += x * x;
        }
        let emp_mean = sum / n as f64;
        let emp_var = sum_sq / n as f64 - emp_mean * emp_mean;
        assert!((emp_mean - mean).abs() < 0.01 * mean.abs().max(1.0));
        let var = log_var.exp();
        assert!((emp_var - var).abs() / var < 0.01);
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let q = DiagGaussianParams::new(
            Tensor::constant(array![[0.3, -1.0]]),
            Tensor::constant(array![[0.5, -0.2]]),
        )
        .unwrap();
        let p = DiagGaussianParams::new(
            Tensor::constant(array![[0.3, -1.0]]),
            Tensor::constant(array![[0.5, -0.2]]),
        )
        .unwrap();
        assert_eq!(kl_diag_gaussian(&q, &p).unwrap().item(), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift_is_half() {
        let q = DiagGaussianParams::new(
            Tensor::constant(array![[1.0]]),
            Tensor::constant(array![[0.0]]),
        )
        .unwrap();
        let p = DiagGaussianParams::standard(1, 1);
        let kl = kl_diag_gaussian(&q, &p).unwrap().item();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q - log p] over 1e6 samples vs the closed form, within 1%.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (mq, lq) = (0.8, -0.3);
        let (mp, lp) = (-0.2, 0.4);
        let q = DiagGaussianParams::new(
            Tensor::constant(Array2::from_elem((1, 1), mq)),
            Tensor::constant(Array2::from_elem((1, 1), lq)),
        )
        .unwrap();
        let p = DiagGaussianParams::new(
            Tensor::constant(Array2::from_elem((1, 1), mp)),
            Tensor::constant(Array2::from_elem((1, 1), lp)),
        )
        .unwrap();
        let closed = kl_diag_gaussian(&q, &p).unwrap().item();

        let (vq, vp) = (lq.exp(), lp.exp());
        let log_pdf = |x: f64, m: f64, v: f64, lv: f64| {
            -0.5 * ((x - m) * (x - m) / v + lv + (2.0 * std::f64::consts::PI).ln())
        };
        let n = 1_000_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x = mq + vq.sqrt() * eps;
            acc += log_pdf(x, mq, vq, lq) - log_pdf(x, mp, vp, lp);
        }
        let mc = acc / n as f64;
        assert!(
            (closed - mc).abs() / closed.abs() < 0.01,
            "closed {closed} vs mc {mc}"
        );
    }

    #[test]
    fn kl_standard_specialization_is_bit_exact() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = DiagGaussianParams::new(
            Tensor::constant(randn(&mut rng, 4, 3)),
            Tensor::constant(randn(&mut rng, 4, 3)),
        )
        .unwrap();
        let a = kl_to_standard_normal(&q).item();
        let b = kl_diag_gaussian(&q, &DiagGaussianParams::standard(4, 3))
            .unwrap()
            .item();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn kl_standard_one_dim_log_var_one() {
        let q = DiagGaussianParams::new(
            Tensor::constant(array![[0.0]]),
            Tensor::constant(array![[1.0]]),
        )
        .unwrap();
        let expected = 0.5 * (1f64.exp() - 1.0 - 1.0);
        assert!((kl_to_standard_normal(&q).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn is_divergence_values() {
        let x = Tensor::constant(array![[2.0]]);
        let v = Tensor::constant(array![[1.0]]);
        let d = itakura_saito(&x, &v).unwrap().item();
        assert!((d - (2.0 - 2f64.ln() - 1.0)).abs() < 1e-15);

        let same = itakura_saito(&v, &v).unwrap().item();
        assert_eq!(same, 0.0);
    }

    #[test]
    fn is_rejects_non_positive_variance() {
        let x = Tensor::constant(array![[1.0]]);
        let v = Tensor::constant(array![[0.0]]);
        assert!(itakura_saito(&x, &v).is_err());
    }

    #[test]
    fn is_equals_complex_gaussian_nll_up_to_constant() {
        // d_IS(x, v) + sum log(pi x) + n == -log N_c(s; 0, diag(v)) for |s|^2 = x.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 6usize;
        let x_arr = randn(&mut rng, 1, n).mapv(|v: f64| v * v + 0.1);
        let v_arr = randn(&mut rng, 1, n).mapv(|v: f64| v.exp());
        let d = itakura_saito(
            &Tensor::constant(x_arr.clone()),
            &Tensor::constant(v_arr.clone()),
        )
        .unwrap()
        .item();
        let constant: f64 = x_arr
            .iter()
            .map(|&x| (std::f64::consts::PI * x).ln())
            .sum::<f64>()
            + n as f64;
        // -log N_c = sum log(pi v) + x/v for circular complex Gaussians.
        let nll: f64 = x_arr
            .iter()
            .zip(v_arr.iter())
            .map(|(&x, &v)| (std::f64::consts::PI * v).ln() + x / v)
            .sum();
        assert!(
            ((d + constant) - nll).abs() < 1e-8,
            "identity violated: {} vs {}",
            d + constant,
            nll
        );
    }

    #[test]
    fn divergence_gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let dims = (1, 5);
        let arrays: Vec<Array2<f64>> = (0..4).map(|_| randn(&mut rng, dims.0, dims.1)).collect();

        // KL as a function of (mq, lq, mp, lp).
        let kl_fn = |inputs: &[Tensor]| {
            let q = DiagGaussianParams::new(inputs[0].clone(), inputs[1].clone()).unwrap();
            let p = DiagGaussianParams::new(inputs[2].clone(), inputs[3].clone()).unwrap();
            kl_diag_gaussian(&q, &p).unwrap()
        };
        let err = crate::nn::grad_check(kl_fn, &arrays, 1e-4);
        assert!(err < 1e-6, "kl gradient error {err}");

        // IS as a function of (x, v) with positive reparameterization
        // exp(a), exp(b) so finite differences stay in-domain.
        let is_fn =
            |inputs: &[Tensor]| itakura_saito(&inputs[0].exp(), &inputs[1].exp()).unwrap();
        let err = crate::nn::grad_check(is_fn, &arrays[..2], 1e-4);
        assert!(err < 1e-6, "is gradient error {err}");
    }

    #[test]
    fn divergences_nonnegative_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let q = DiagGaussianParams::new(
                Tensor::constant(randn(&mut rng, 1, 3)),
                Tensor::constant(randn(&mut rng, 1, 3)),
            )
            .unwrap();
            let p = DiagGaussianParams::new(
                Tensor::constant(randn(&mut rng, 1, 3)),
                Tensor::constant(randn(&mut rng, 1, 3)),
            )
            .unwrap();
            assert!(kl_diag_gaussian(&q, &p).unwrap().item() >= 0.0);

            let x = Tensor::constant(randn(&mut rng, 1, 3).mapv(|v: f64| v.exp()));
            let v = Tensor::constant(randn(&mut rng, 1, 3).mapv(|v: f64| v.exp()));
            assert!(itakura_saito(&x, &v).unwrap().item() >= 0.0);
        }
    }

    #[test]
    fn is_scale_invariance() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let x = randn(&mut rng, 1, 8).mapv(|v: f64| v.exp());
        let v = randn(&mut rng, 1, 8).mapv(|v: f64| v.exp());
        let base = itakura_saito(&Tensor::constant(x.clone()), &Tensor::constant(v.clone()))
            .unwrap()
            .item();
        for &alpha in &[0.25, 3.0, 1e4] {
            let scaled = itakura_saito(
                &Tensor::constant(&x * alpha),
                &Tensor::constant(&v * alpha),
            )
            .unwrap()
            .item();
            assert!(
                (scaled - base).abs() < 1e-10 * base.abs().max(1.0),
                "alpha {alpha}: {scaled} vs {base}"
            );
        }
    }
}
