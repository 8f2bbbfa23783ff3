//! Finite-state-machine appliance simulator and Monte Carlo checks of the
//! multi-state variance argument.
//!
//! Generated appliance power is `max(0, N(mu_s, sigma_s))` for the current
//! Markov state `s`. The verification routines use the unclamped normal
//! model so they can be compared against closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};

use crate::error::{Error, Result};
use crate::signal::PowerSeries;
use crate::states::StateSequence;

/// Markov-chain appliance with Gaussian per-state power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplianceFsm {
    pub name: String,
    /// Per-state mean power in watts; must be distinct.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Row-stochastic `M x M` matrix, `transition[a][b] = Pr(b | a)`.
    pub transition: Vec<Vec<f64>>,
    /// Initial state distribution; defaults to always starting in state 0.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
}

impl ApplianceFsm {
    pub fn num_states(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.means.len();
        let bad = |msg: String| Err(Error::InvalidArgument(format!("appliance '{}': {msg}", self.name)));
        if m == 0 || self.stds.len() != m || self.transition.len() != m {
            return bad(format!(
                "{} means, {} stds and {} transition rows must agree and be non-empty",
                m,
                self.stds.len(),
                self.transition.len()
            ));
        }
        if self.stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return bad("state standard deviations must be finite and >= 0".into());
        }
        for (i, a) in self.means.iter().enumerate() {
            if !a.is_finite() || self.means[..i].contains(a) {
                return bad("state means must be finite and distinct".into());
            }
        }
        let check_row = |row: &[f64], what: &str| -> Result<()> {
            if row.len() != m || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "appliance '{}': {what} must hold {m} non-negative probabilities",
                    self.name
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "appliance '{}': {what} sums to {sum}, not 1",
                    self.name
                )));
            }
            Ok(())
        };
        for (i, row) in self.transition.iter().enumerate() {
            check_row(row, &format!("transition row {i}"))?;
        }
        if let Some(init) = &self.initial {
            check_row(init, "initial distribution")?;
        }
        Ok(())
    }
}

/// Time axis of generated series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start_timestamp: f64,
    pub interval: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            start_timestamp: 1_300_000_000.0,
            interval: 3.0,
        }
    }
}

fn sample_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the accumulated mass; take the last reachable state.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Runs the Markov chain for `len` steps and draws power per step.
pub fn simulate_appliance(
    fsm: &ApplianceFsm,
    grid: TimeGrid,
    len: usize,
    seed: u64,
) -> Result<(PowerSeries, StateSequence)> {
    fsm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dists: Vec<Normal<f64>> = fsm
        .means
        .iter()
        .zip(&fsm.stds)
        .map(|(&mu, &sd)| Normal::new(mu, sd).expect("validated parameters"))
        .collect();
    let mut state = match &fsm.initial {
        Some(init) => sample_categorical(&mut rng, init),
        None => 0,
    };
    let mut values = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            state = sample_categorical(&mut rng, &fsm.transition[state]);
        }
        labels.push(state);
        values.push(dists[state].sample(&mut rng).max(0.0));
    }
    Ok((
        PowerSeries::new(grid.start_timestamp, grid.interval, values)?,
        StateSequence::new(labels, fsm.num_states())?,
    ))
}

/// Power drawn by loads outside the modelled appliance set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseLoad {
    Constant { watts: f64 },
    /// `mean + amplitude * sin(2 pi t / period)` with `t` in seconds.
    Sinusoid {
        mean: f64,
        amplitude: f64,
        period_seconds: f64,
    },
}

impl BaseLoad {
    pub fn at(&self, seconds: f64) -> f64 {
        match *self {
            BaseLoad::Constant { watts } => watts,
            BaseLoad::Sinusoid {
                mean,
                amplitude,
                period_seconds,
            } => mean + amplitude * (std::f64::consts::TAU * seconds / period_seconds).sin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationNoiseSpec {
    pub base_load: BaseLoad,
    /// Standard deviation of the additive Gaussian meter noise, watts.
    pub noise_std: f64,
}

impl Default for AggregationNoiseSpec {
    fn default() -> Self {
        Self {
            base_load: BaseLoad::Constant { watts: 30.0 },
            noise_std: 5.0,
        }
    }
}

/// `x_t = sum_i y_t^i + z_t + eps_t`, clamped at zero.
pub fn aggregate(appliances: &[PowerSeries], noise: &AggregationNoiseSpec, seed: u64) -> Result<PowerSeries> {
    let first = appliances
        .first()
        .ok_or_else(|| Error::InvalidArgument("no appliance series to aggregate".into()))?;
    let len = first.len();
    for a in appliances {
        if a.len() != len {
            return Err(Error::LengthMismatch {
                what: "appliance series",
                expected: len,
                found: a.len(),
            });
        }
    }
    if !(noise.noise_std >= 0.0 && noise.noise_std.is_finite()) {
        return Err(Error::InvalidArgument("noise std must be finite and >= 0".into()));
    }
    let eps = Normal::new(0.0, noise.noise_std).expect("validated noise");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..len)
        .map(|t| {
            let sum: f64 = appliances.iter().map(|a| a.values()[t]).sum();
            let z = noise.base_load.at(t as f64 * first.interval);
            let e = if noise.noise_std > 0.0 { eps.sample(&mut rng) } else { 0.0 };
            sum + z + e
        })
        .collect();
    PowerSeries::new(first.start_timestamp, first.interval, values)
}

/// Mixture used by the variance checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VarianceExperimentSpec {
    pub probs: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Single-state standard deviation; defaults to the largest state std.
    #[serde(default)]
    pub sigma: Option<f64>,
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl VarianceExperimentSpec {
    pub fn num_states(&self) -> usize {
        self.probs.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
            .unwrap_or_else(|| self.stds.iter().copied().fold(0.0, f64::max))
    }

    pub fn mixture_mean(&self) -> f64 {
        self.probs.iter().zip(&self.means).map(|(p, m)| p * m).sum()
    }

    /// `sum_s (p_s sigma_s)^2`.
    pub fn mixture_variance(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.stds)
            .map(|(p, s)| (p * s).powi(2))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.probs.len();
        if m == 0 || self.means.len() != m || self.stds.len() != m {
            return Err(Error::InvalidArgument(
                "probs, means and stds must have the same non-zero length".into(),
            ));
        }
        if self.probs.iter().any(|p| !(*p >= 0.0)) || (self.probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("state probabilities must be >= 0 and sum to 1".into()));
        }
        if self.stds.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("state stds must be finite and >= 0".into()));
        }
        if self.samples < 2 {
            return Err(Error::InvalidArgument("need at least 2 samples".into()));
        }
        Ok(())
    }

    fn check_assumption(&self) -> Result<()> {
        let sigma = self.sigma();
        if let Some((s, sd)) = self.stds.iter().enumerate().find(|(_, &sd)| sd > sigma) {
            return Err(Error::AssumptionViolation(format!(
                "state {s} has std {sd} W above the single-state std {sigma} W; \
                 per-state spread must not exceed the aggregate spread"
            )));
        }
        Ok(())
    }

    fn multi_state_draws(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let dists: Vec<Normal<f64>> = self
            .means
            .iter()
            .zip(&self.stds)
            .map(|(&m, &s)| Normal::new(m, s).expect("validated"))
            .collect();
        (0..self.samples)
            .map(|_| {
                self.probs
                    .iter()
                    .zip(&dists)
                    .map(|(p, d)| p * d.sample(rng))
                    .sum()
            })
            .collect()
    }

    fn single_state_draws(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = Normal::new(self.mixture_mean(), self.sigma()).expect("validated");
        (0..self.samples).map(|_| d.sample(rng)).collect()
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Relative tolerance on empirical variances.
pub const VARIANCE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Fact1Report {
    pub empirical_mean: f64,
    pub analytic_mean: f64,
    pub empirical_variance: f64,
    pub analytic_variance: f64,
    pub pass: bool,
}

/// The probability-weighted mix of independent normals has mean
/// `sum p_s mu_s` and variance `sum (p_s sigma_s)^2`.
pub fn verify_fact1(spec: &VarianceExperimentSpec) -> Result<Fact1Report> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws = spec.multi_state_draws(&mut rng);
    let (mean, var) = mean_var(&draws);
    let analytic_mean = spec.mixture_mean();
    let analytic_variance = spec.mixture_variance();
    let se = (analytic_variance / spec.samples as f64).sqrt();
    let mean_ok = (mean - analytic_mean).abs() <= 4.0 * se + 1e-9 * (1.0 + analytic_mean.abs());
    let var_ok = if analytic_variance == 0.0 {
        var.abs() < 1e-12 * (1.0 + analytic_mean.powi(2))
    } else {
        ((var - analytic_variance) / analytic_variance).abs() <= VARIANCE_TOLERANCE
    };
    Ok(Fact1Report {
        empirical_mean: mean,
        analytic_mean,
        empirical_variance: var,
        analytic_variance,
        pass: mean_ok && var_ok,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Report {
    pub mean_multi: f64,
    pub mean_single: f64,
    pub variance_multi: f64,
    pub variance_single: f64,
    /// `variance_multi / variance_single` from the samples.
    pub ratio_empirical: f64,
    /// `sum (p_s sigma_s)^2 / sigma^2`; equals `sum p_s^2` when every
    /// state std equals sigma.
    pub ratio_analytic: f64,
    pub means_agree: bool,
    pub variance_reduced: bool,
    pub pass: bool,
}

/// Multi-state vs single-state estimator: equal means, smaller variance.
pub fn verify_theorem1(spec: &VarianceExperimentSpec) -> Result<Theorem1Report> {
    spec.validate()?;
    spec.check_assumption()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let multi = spec.multi_state_draws(&mut rng);
    let single = spec.single_state_draws(&mut rng);
    let (mean_multi, variance_multi) = mean_var(&multi);
    let (mean_single, variance_single) = mean_var(&single);
    let sigma = spec.sigma();
    let n = spec.samples as f64;

    let se = ((variance_multi + variance_single) / n).sqrt();
    let means_agree = (mean_multi - mean_single).abs() <= 4.0 * se + 1e-9 * (1.0 + mean_multi.abs());
    let ratio_analytic = if sigma > 0.0 {
        spec.mixture_variance() / sigma.powi(2)
    } else {
        1.0
    };
    let ratio_empirical = if variance_single > 0.0 {
        variance_multi / variance_single
    } else {
        1.0
    };
    let variance_reduced = if spec.num_states() >= 2 {
        variance_multi < variance_single
    } else {
        variance_multi <= variance_single * (1.0 + VARIANCE_TOLERANCE)
    };
    Ok(Theorem1Report {
        mean_multi,
        mean_single,
        variance_multi,
        variance_single,
        ratio_empirical,
        ratio_analytic,
        means_agree,
        variance_reduced,
        pass: means_agree && variance_reduced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorollaryReport {
    pub xi: f64,
    pub prob_multi: f64,
    pub prob_single: f64,
    /// `2 Phi(xi / sigma_multi) - 1`.
    pub analytic_multi: f64,
    /// `2 Phi(xi / sigma) - 1`.
    pub analytic_single: f64,
    /// Monte Carlo standard error of `prob_multi - prob_single`.
    pub std_error: f64,
    pub pass: bool,
}

fn within_prob(xi: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return 1.0;
    }
    let phi = StatNormal::new(0.0, 1.0).expect("standard normal");
    2.0 * phi.cdf(xi / sd) - 1.0
}

/// The multi-state estimate lands within `xi` of the mean more often.
pub fn verify_corollary(spec: &VarianceExperimentSpec, xi: f64) -> Result<CorollaryReport> {
    spec.validate()?;
    spec.check_assumption()?;
    if spec.num_states() < 2 {
        return Err(Error::InvalidArgument("the corollary needs at least 2 states".into()));
    }
    if !(xi > 0.0) {
        return Err(Error::InvalidArgument(format!("xi must be positive, got {xi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let multi = spec.multi_state_draws(&mut rng);
    let single = spec.single_state_draws(&mut rng);
    let mu = spec.mixture_mean();
    let n = spec.samples as f64;
    let hit = |xs: &[f64]| xs.iter().filter(|x| (*x - mu).abs() < xi).count() as f64 / n;
    let prob_multi = hit(&multi);
    let prob_single = hit(&single);
    let std_error =
        (prob_multi * (1.0 - prob_multi) / n + prob_single * (1.0 - prob_single) / n).sqrt();
    Ok(CorollaryReport {
        xi,
        prob_multi,
        prob_single,
        analytic_multi: within_prob(xi, spec.mixture_variance().sqrt()),
        analytic_single: within_prob(xi, spec.sigma()),
        std_error,
        pass: prob_multi - prob_single > 3.0 * std_error,
    })
}
