//! Per-sample clipping, Gaussian noising and privacy accounting for the
//! producer-side parameters.

mod rdp;

pub use rdp::{calibrate_sigma, compute_epsilon, compute_rdp, default_orders, rdp_to_epsilon, PrivacyLedger};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Differential-privacy parameters of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// L2 bound C on each per-sample gradient. May be infinite.
    pub clip_threshold: f64,
    /// Noise multiplier σ; the noise standard deviation is σ·C.
    pub noise_multiplier: f64,
    /// Sampling rate q = batch size / dataset size.
    pub sample_rate: f64,
    pub target_epsilon: f64,
    pub target_delta: f64,
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_threshold > 0.0) {
            return Err(Error::Config(format!("dp.clip_threshold = {} must be > 0", self.clip_threshold)));
        }
        if !(self.noise_multiplier >= 0.0) || self.noise_multiplier.is_infinite() {
            return Err(Error::Config(format!(
                "dp.noise_multiplier = {} must be finite and ≥ 0",
                self.noise_multiplier
            )));
        }
        if self.noise_multiplier > 0.0 && self.clip_threshold.is_infinite() {
            return Err(Error::Config("dp.noise_multiplier > 0 requires a finite clip_threshold".into()));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!("dp.sample_rate = {} must lie in (0, 1]", self.sample_rate)));
        }
        if !(self.target_epsilon > 0.0) {
            return Err(Error::Config(format!("dp.target_epsilon = {} must be > 0", self.target_epsilon)));
        }
        if !(self.target_delta > 0.0 && self.target_delta < 1.0) {
            return Err(Error::Config(format!("dp.target_delta = {} must lie in (0, 1)", self.target_delta)));
        }
        Ok(())
    }

    /// No clipping, no noise, unbounded budget.
    pub fn disabled(sample_rate: f64) -> Self {
        Self {
            clip_threshold: f64::INFINITY,
            noise_multiplier: 0.0,
            sample_rate,
            target_epsilon: f64::INFINITY,
            target_delta: 1e-5,
        }
    }
}

fn norm(g: &[f32]) -> f64 {
    g.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Scales `g` in place to g / max(1, ‖g‖₂ / C) and returns the original norm.
/// Gradients already inside the ball are left untouched. The threshold is
/// applied at f32 precision, rounded down: the result's norm, evaluated in
/// f64 over the stored values, never exceeds `c`.
pub fn clip_in_place(g: &mut [f32], c: f64) -> Result<f64> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient entry at coordinate {i}")));
    }
    let n = norm(g);
    if n <= c {
        return Ok(n);
    }
    let mut cf = c as f32;
    if f64::from(cf) > c {
        cf = cf.next_down();
    }
    let c = f64::from(cf);
    let original: Vec<f32> = g.to_vec();
    let mut factor = c / n;
    loop {
        for (o, &v) in g.iter_mut().zip(&original) {
            *o = (f64::from(v) * factor) as f32;
        }
        if norm(g) <= c {
            return Ok(n);
        }
        factor *= 1.0 - 4.0 * f64::from(f32::EPSILON);
    }
}

/// Clips every per-sample gradient to L2 norm at most `c`.
pub fn clip_per_sample(grads: &[Vec<f32>], c: f64) -> Result<Vec<Vec<f32>>> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("clip threshold {c} must be > 0")));
    }
    grads
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut out = g.clone();
            clip_in_place(&mut out, c).map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("sample {i}: {msg}")),
                other => other,
            })?;
            Ok(out)
        })
        .collect()
}

/// (1/n)·(Σᵢ ḡᵢ + ν) with ν ~ N(0, σ²C²·I) drawn once per call.
pub fn noisy_aggregate<R: Rng + ?Sized>(clipped: &[Vec<f32>], sigma: f64, c: f64, rng: &mut R) -> Result<Vec<f32>> {
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("noise multiplier {sigma} must be ≥ 0")));
    }
    let Some(first) = clipped.first() else {
        return Err(Error::Config("noisy aggregation needs at least one sample".into()));
    };
    let dim = first.len();
    if clipped.iter().any(|g| g.len() != dim) {
        return Err(Error::Config("per-sample gradients differ in dimension".into()));
    }
    let std = if sigma > 0.0 { sigma * c } else { 0.0 };
    if !std.is_finite() {
        return Err(Error::Config("noise requires a finite clip threshold".into()));
    }
    let mut acc = vec![0.0f64; dim];
    for g in clipped {
        for (a, &v) in acc.iter_mut().zip(g) {
            *a += f64::from(v);
        }
    }
    if std > 0.0 {
        for a in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *a += std * z;
        }
    }
    let n = clipped.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn below_threshold_is_unchanged() {
        let g = vec![0.3f32, 0.4];
        let out = clip_per_sample(&[g.clone()], 1.2).unwrap();
        assert_eq!(out[0], g);
    }

    #[test]
    fn scales_by_norm_ratio() {
        let out = clip_per_sample(&[vec![2.4, 0.0, 0.0]], 1.2).unwrap();
        // 1.2f32 rounds above 1.2, so the threshold drops one ulp.
        assert_eq!(out[0], vec![1.2f32.next_down(), 0.0, 0.0]);
        let out = clip_per_sample(&[vec![2.5, 0.0, 0.0]], 1.25).unwrap();
        assert_eq!(out[0], vec![1.25, 0.0, 0.0]);
    }

    #[test]
    fn large_gradient_keeps_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g: Vec<f32> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = 7.3 / norm(&g);
        g.iter_mut().for_each(|v| *v = (f64::from(*v) * s) as f32);
        let out = &clip_per_sample(&[g.clone()], 1.2).unwrap()[0];
        // Independent arithmetic on the two vectors.
        let (mut dot, mut nn, mut gg) = (0.0f64, 0.0f64, 0.0f64);
        for (a, b) in out.iter().zip(&g) {
            dot += f64::from(*a) * f64::from(*b);
            nn += f64::from(*a).powi(2);
            gg += f64::from(*b).powi(2);
        }
        assert!((nn.sqrt() - 1.2).abs() < 1e-6);
        assert!((dot / (nn.sqrt() * gg.sqrt()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_names_the_sample() {
        let err = clip_per_sample(&[vec![1.0], vec![f32::NAN]], 1.0).unwrap_err();
        assert!(err.to_string().contains("sample 1"), "{err}");
    }

    #[test]
    fn infinite_threshold_is_identity() {
        let g = vec![1e6f32, -3e5];
        assert_eq!(clip_per_sample(&[g.clone()], f64::INFINITY).unwrap()[0], g);
    }

    #[test]
    fn zero_noise_is_exact_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = noisy_aggregate(&[vec![1.0, 2.0], vec![3.0, -2.0]], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(out, vec![2.0, 0.0]);
        let out = noisy_aggregate(&[vec![0.5, -1.5], vec![-0.5, 1.5]], 0.0, 1.0, &mut rng).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            noisy_aggregate(&[vec![0.0]], -1.0, 1.0, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_sample_noise_has_std_sigma_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let draws = noisy_aggregate(&[vec![0.0; n]], 1.0, 1.2, &mut rng).unwrap();
        let mean = draws.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
        let var = draws.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!((var.sqrt() - 1.2).abs() / 1.2 < 0.02);
        assert!(mean.abs() < 3.0 * 1.2 / (n as f64).sqrt());
    }

    #[test]
    fn seeded_noise_is_deterministic() {
        let g = vec![vec![0.1f32; 64]; 3];
        let a = noisy_aggregate(&g, 1.0, 1.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = noisy_aggregate(&g, 1.0, 1.2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_threshold(
            g in proptest::collection::vec(-100.0f32..100.0, 1..300),
            c in 1e-3f64..50.0,
        ) {
            let out = clip_per_sample(&[g.clone()], c).unwrap();
            prop_assert!(norm(&out[0]) <= c);
            if norm(&g) <= c {
                prop_assert_eq!(&out[0], &g);
            }
        }
    }
}
