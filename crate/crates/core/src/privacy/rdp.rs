//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};

use super::DpConfig;
use crate::error::{Error, Result};

/// {1.25, 1.5, …, 63.5} ∪ {64, …, 256}.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=254).map(|i| f64::from(i) * 0.25).collect();
    orders.extend((64..=256).map(f64::from));
    orders
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// log(eᵃ − eᵇ) for a ≥ b.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 20.0 {
        return libm::erfc(x).ln();
    }
    // Asymptotic expansion; erfc underflows long before the series degrades.
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - x.ln() - 0.5 * std::f64::consts::PI.ln() + series.ln()
}

fn ln_binom(n: u64, k: u64) -> f64 {
    (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)).max(0.0)
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

fn log_a_int(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let mut log_a = f64::NEG_INFINITY;
    for i in 0..=alpha {
        let fi = i as f64;
        let coef = ln_binom(alpha, i) + fi * lq + (alpha - i) as f64 * l1q;
        log_a = log_add(log_a, coef + (fi * fi - fi) / (2.0 * sigma * sigma));
    }
    log_a
}

fn log_a_frac(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let z0 = sigma * sigma * (1.0 / q - 1.0).ln() + 0.5;
    let s2 = std::f64::consts::SQRT_2 * sigma;
    // Generalized binomial coefficient C(alpha, i), tracked as log|C| and sign.
    let mut log_coef = 0.0f64;
    let mut positive = true;
    let mut i = 0u64;
    loop {
        let fi = i as f64;
        let j = alpha - fi;
        let log_t0 = log_coef + fi * lq + j * l1q;
        let log_t1 = log_coef + j * lq + fi * l1q;
        let log_e0 = 0.5f64.ln() + log_erfc((fi - z0) / s2);
        let log_e1 = 0.5f64.ln() + log_erfc((z0 - j) / s2);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * sigma * sigma) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * sigma * sigma) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 || i > 100_000 {
            break;
        }
        let factor = alpha - fi;
        log_coef += factor.abs().ln() - (fi + 1.0).ln();
        if factor < 0.0 {
            positive = !positive;
        }
        i += 1;
    }
    log_add(log_a0, log_a1)
}

fn rdp_single(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_int(q, sigma, alpha as u64)
    } else {
        log_a_frac(q, sigma, alpha)
    };
    log_a / (alpha - 1.0)
}

/// Rényi divergence at each order after `steps` compositions.
pub fn compute_rdp(q: f64, sigma: f64, steps: u64, orders: &[f64]) -> Vec<f64> {
    orders
        .iter()
        .map(|&a| if steps == 0 { 0.0 } else { rdp_single(q, sigma, a) * steps as f64 })
        .collect()
}

/// Tightest (ε, δ) conversion over the tracked orders.
pub fn rdp_to_epsilon(orders: &[f64], rdp: &[f64], delta: f64) -> f64 {
    orders
        .iter()
        .zip(rdp)
        .map(|(&a, &r)| {
            if r == 0.0 {
                return 0.0;
            }
            let eps = r - (delta.ln() + a.ln()) / (a - 1.0) + ((a - 1.0) / a).ln();
            eps.max(0.0)
        })
        .filter(|e| !e.is_nan())
        .fold(f64::INFINITY, f64::min)
}

/// ε after `steps` applications of the subsampled Gaussian mechanism.
/// Returns +∞ when σ = 0 and at least one step was taken.
pub fn compute_epsilon(q: f64, sigma: f64, steps: u64, delta: f64) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    let orders = default_orders();
    rdp_to_epsilon(&orders, &compute_rdp(q, sigma, steps, &orders), delta)
}

const SIGMA_RANGE: (f64, f64) = (1e-2, 1e3);

/// Smallest σ (to within 1e-3) whose ε after `steps` stays within the target.
pub fn calibrate_sigma(config: &DpConfig, steps: u64) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Calibration("calibration needs at least one step".into()));
    }
    let (q, eps, delta) = (config.sample_rate, config.target_epsilon, config.target_delta);
    let at = |s: f64| compute_epsilon(q, s, steps, delta);
    let (mut lo, mut hi) = SIGMA_RANGE;
    let (best, worst) = (at(hi), at(lo));
    if best > eps {
        return Err(Error::Calibration(format!(
            "target ε = {eps} is unattainable: σ ∈ [{lo}, {hi}] gives ε ∈ [{best:.4}, {worst:.4}]"
        )));
    }
    if worst <= eps {
        return Ok(lo);
    }
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        if at(mid) <= eps {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Running privacy cost of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    pub config: DpConfig,
    steps: u64,
    orders: Vec<f64>,
    rdp: Vec<f64>,
    #[serde(skip)]
    per_step: Option<Vec<f64>>,
}

impl PrivacyLedger {
    pub fn new(config: DpConfig) -> Self {
        let orders = default_orders();
        Self {
            config,
            steps: 0,
            rdp: vec![0.0; orders.len()],
            orders,
            per_step: None,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn rdp(&self) -> &[f64] {
        &self.rdp
    }

    fn step_cost(&mut self) -> &[f64] {
        let (q, sigma) = (self.config.sample_rate, self.config.noise_multiplier);
        let orders = &self.orders;
        self.per_step.get_or_insert_with(|| compute_rdp(q, sigma, 1, orders))
    }

    pub fn record_step(&mut self) {
        let cost = self.step_cost().to_vec();
        for (r, c) in self.rdp.iter_mut().zip(cost) {
            *r += c;
        }
        self.steps += 1;
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon_at(self.config.target_delta)
    }

    pub fn epsilon_at(&self, delta: f64) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        rdp_to_epsilon(&self.orders, &self.rdp, delta)
    }

    /// ε the ledger would report after `extra` more steps.
    pub fn projected_epsilon(&mut self, extra: u64) -> f64 {
        if self.steps + extra == 0 {
            return 0.0;
        }
        let cost = self.step_cost().to_vec();
        let rdp: Vec<f64> = self.rdp.iter().zip(cost).map(|(r, c)| r + c * extra as f64).collect();
        rdp_to_epsilon(&self.orders, &rdp, self.config.target_delta)
    }

    /// Whether one more step keeps ε within the target.
    pub fn can_step(&mut self) -> bool {
        self.projected_epsilon(1) <= self.config.target_epsilon
    }
}
