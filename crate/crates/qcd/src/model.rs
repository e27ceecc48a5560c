//! Observation model for quickest change detection.
//!
//! A path is a sequence of observations `Y_1, Y_2, ...` together with a
//! latent change time `tau_a` drawn once per path: `Y_k` follows the
//! pre-change law for `k < tau_a` and the post-change law for `k >= tau_a`.
//! A change time of zero means every observation is post-change. The
//! detection problem is scored by the delay `(tau_s - tau_a)_+`, the
//! eagerness `(tau_s - tau_a)_-`, and their weighted sum.

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Change-time laws
// ---------------------------------------------------------------------------

/// Distribution of the change time `tau_a` on `{0, 1, 2, ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChangeTimeLaw {
    /// `P{tau = k} = p (1-p)^k`. Mean `(1-p)/p`, tail `P{tau >= n} = (1-p)^n`.
    Geometric { p: f64 },
    /// Two-component geometric mixture: slow component with probability `w`.
    Mixture { w: f64, p_slow: f64, p_fast: f64 },
}

impl ChangeTimeLaw {
    pub fn validate(&self) -> Result<()> {
        let check_p = |p: f64, name: &str| {
            if !(p > 0.0 && p <= 1.0) {
                Err(Error::InvalidConfig(format!(
                    "{name} must lie in (0, 1], got {p}"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            ChangeTimeLaw::Geometric { p } => check_p(p, "geometric p"),
            ChangeTimeLaw::Mixture { w, p_slow, p_fast } => {
                check_p(p_slow, "mixture p_slow")?;
                check_p(p_fast, "mixture p_fast")?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidConfig(format!(
                        "mixture weight must lie in [0, 1], got {w}"
                    )));
                }
                if p_slow > p_fast {
                    return Err(Error::InvalidConfig(format!(
                        "mixture requires p_slow <= p_fast, got {p_slow} > {p_fast}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Draw a change time.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match *self {
            ChangeTimeLaw::Geometric { p } => sample_geometric(p, rng),
            ChangeTimeLaw::Mixture { w, p_slow, p_fast } => {
                let u: f64 = rng.gen();
                if u < w {
                    sample_geometric(p_slow, rng)
                } else {
                    sample_geometric(p_fast, rng)
                }
            }
        }
    }

    /// `E[tau]`.
    pub fn mean(&self) -> f64 {
        match *self {
            ChangeTimeLaw::Geometric { p } => (1.0 - p) / p,
            ChangeTimeLaw::Mixture { w, p_slow, p_fast } => {
                w * (1.0 - p_slow) / p_slow + (1.0 - w) * (1.0 - p_fast) / p_fast
            }
        }
    }

    /// Expected remaining time to the change given it has not occurred by
    /// `k`: `E[tau - k | tau > k]`.
    ///
    /// Geometric laws are memoryless, so the residual is `1/p` for every
    /// `k`. For the mixture the posterior over components shifts toward the
    /// slower one as `k` grows, so the residual rises from a blend of the
    /// component means toward `1/p_slow`. Weights are combined in log space
    /// so large `k` does not underflow.
    pub fn mean_residual(&self, k: u64) -> Result<f64> {
        match *self {
            ChangeTimeLaw::Geometric { p } => {
                if p >= 1.0 {
                    return Err(Error::ZeroProbabilityEvent(format!(
                        "P{{tau > {k}}} = 0 under geometric p = {p}"
                    )));
                }
                Ok(1.0 / p)
            }
            ChangeTimeLaw::Mixture { w, p_slow, p_fast } => {
                // log posterior weights proportional to component tails;
                // a component contributes only if its weight and tail are
                // both positive, and if neither contributes the
                // conditioning event has probability zero.
                let la = if w > 0.0 && p_slow < 1.0 {
                    w.ln() + (k as f64 + 1.0) * (1.0 - p_slow).ln()
                } else {
                    f64::NEG_INFINITY
                };
                let lb = if w < 1.0 && p_fast < 1.0 {
                    (1.0 - w).ln() + (k as f64 + 1.0) * (1.0 - p_fast).ln()
                } else {
                    f64::NEG_INFINITY
                };
                let m = la.max(lb);
                if m == f64::NEG_INFINITY {
                    return Err(Error::ZeroProbabilityEvent(format!(
                        "P{{tau > {k}}} = 0 under degenerate mixture"
                    )));
                }
                let wa = (la - m).exp();
                let wb = (lb - m).exp();
                Ok((wa / p_slow + wb / p_fast) / (wa + wb))
            }
        }
    }

    /// Exponential tail rate `-lim (1/n) log P{tau >= n}`.
    ///
    /// For a geometric law this is `-log(1-p)`, which differs from `p`
    /// itself in the third decimal at `p = 0.02`; the two are stored and
    /// exposed separately so callers can choose deliberately. A mixture's
    /// tail is governed by its slower component.
    pub fn tail_rate(&self) -> f64 {
        match *self {
            ChangeTimeLaw::Geometric { p } => -(-p).ln_1p(),
            ChangeTimeLaw::Mixture { p_slow, .. } => -(-p_slow).ln_1p(),
        }
    }
}

fn sample_geometric<R: Rng + ?Sized>(p: f64, rng: &mut R) -> u64 {
    if p >= 1.0 {
        return 0;
    }
    // Inverse CDF on {0, 1, ...}: floor(log(U) / log(1-p)) with U in (0, 1].
    let u = 1.0 - rng.gen::<f64>();
    (u.ln() / (1.0 - p).ln()).floor() as u64
}

// ---------------------------------------------------------------------------
// Observation laws
// ---------------------------------------------------------------------------

/// Marginal or transition law of the observations.
///
/// The first three variants are i.i.d. families with closed-form log
/// densities and quantiles. `Ar1` is a linear autoregression
/// `Y_{k+1} = a Y_k + sigma_w W_{k+1}` with standard Gaussian innovations;
/// across a change only the coefficient switches, the lagged value carries
/// over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObservationLaw {
    Gaussian { mu: f64, sigma: f64 },
    Laplace { mu: f64, b: f64 },
    Cauchy { x0: f64, gamma: f64 },
    Ar1 { a: f64, sigma_w: f64 },
}

impl ObservationLaw {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        match *self {
            ObservationLaw::Gaussian { sigma, .. } => positive(sigma, "gaussian sigma"),
            ObservationLaw::Laplace { b, .. } => positive(b, "laplace b"),
            ObservationLaw::Cauchy { gamma, .. } => positive(gamma, "cauchy gamma"),
            ObservationLaw::Ar1 { a, sigma_w } => {
                positive(sigma_w, "ar1 sigma_w")?;
                if a.abs() < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "ar1 coefficient must satisfy |a| < 1, got {a}"
                    )))
                }
            }
        }
    }

    pub fn is_iid(&self) -> bool {
        !matches!(self, ObservationLaw::Ar1 { .. })
    }

    /// Draw one observation (i.i.d. variants only).
    pub fn sample_iid<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ObservationLaw::Gaussian { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                mu + sigma * z
            }
            ObservationLaw::Laplace { mu, b } => {
                // Difference of two unit exponentials avoids log-of-zero
                // edge cases in the inverse CDF.
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                mu + b * (e1 - e2)
            }
            ObservationLaw::Cauchy { x0, gamma } => {
                let u: f64 = rng.gen();
                x0 + gamma * (std::f64::consts::PI * (u - 0.5)).tan()
            }
            ObservationLaw::Ar1 { .. } => {
                unreachable!("ar1 law has no marginal sampler; step through PathSim")
            }
        }
    }

    /// Log density of an i.i.d. variant at `y`; `None` for `Ar1`.
    pub fn log_density(&self, y: f64) -> Option<f64> {
        const LN_2PI: f64 = 1.8378770664093453;
        match *self {
            ObservationLaw::Gaussian { mu, sigma } => {
                let z = (y - mu) / sigma;
                Some(-0.5 * z * z - sigma.ln() - 0.5 * LN_2PI)
            }
            ObservationLaw::Laplace { mu, b } => Some(-(y - mu).abs() / b - (2.0 * b).ln()),
            ObservationLaw::Cauchy { x0, gamma } => {
                let u = (y - x0) / gamma;
                Some(-(std::f64::consts::PI * gamma).ln() - (u * u).ln_1p())
            }
            ObservationLaw::Ar1 { .. } => None,
        }
    }

    /// Quantile function of an i.i.d. variant; `None` for `Ar1`.
    pub fn quantile(&self, q: f64) -> Option<f64> {
        use statrs::distribution::ContinuousCDF;
        match *self {
            ObservationLaw::Gaussian { mu, sigma } => {
                let n = statrs::distribution::Normal::new(mu, sigma).expect("validated");
                Some(n.inverse_cdf(q))
            }
            ObservationLaw::Laplace { mu, b } => Some(if q < 0.5 {
                mu + b * (2.0 * q).ln()
            } else {
                mu - b * (2.0 * (1.0 - q)).ln()
            }),
            ObservationLaw::Cauchy { x0, gamma } => {
                Some(x0 + gamma * (std::f64::consts::PI * (q - 0.5)).tan())
            }
            ObservationLaw::Ar1 { .. } => None,
        }
    }

    /// Standard deviation of the stationary law of an `Ar1` chain.
    pub fn ar1_stationary_sigma(&self) -> Option<f64> {
        match *self {
            ObservationLaw::Ar1 { a, sigma_w } => Some(sigma_w / (1.0 - a * a).sqrt()),
            _ => None,
        }
    }
}

/// Cauchy scale matched to the standard normal: the unique `gamma` with
/// `Cauchy(0, gamma)` CDF at 1 equal to the standard normal CDF at 1,
/// i.e. `1/2 + atan(1/gamma)/pi = Phi(1) = 0.841344746068543`. Solved
/// numerically once; the defining identity is checked in tests.
pub const CAUCHY_MATCH_GAMMA: f64 = 0.5442659078578867;

// ---------------------------------------------------------------------------
// Model and path simulation
// ---------------------------------------------------------------------------

/// Full detection problem: observation laws, change-time law, and the
/// eagerness weight `kappa` used by the cost `J = MDD + kappa * MDE`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcdModel {
    pub pre: ObservationLaw,
    pub post: ObservationLaw,
    pub change: ChangeTimeLaw,
    pub kappa: f64,
}

impl QcdModel {
    pub fn new(
        pre: ObservationLaw,
        post: ObservationLaw,
        change: ChangeTimeLaw,
        kappa: f64,
    ) -> Result<Self> {
        pre.validate()?;
        post.validate()?;
        change.validate()?;
        if !(kappa >= 0.0 && kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kappa must be finite and non-negative, got {kappa}"
            )));
        }
        Ok(QcdModel { pre, post, change, kappa })
    }
}

/// One simulated time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenStep {
    /// Time index of the observation, starting at 1.
    pub k: u64,
    /// The observation `Y_k`.
    pub y: f64,
    /// Whether the change has occurred by time `k` (`k >= tau_a`).
    pub changed: bool,
    /// `E[tau_a - k | tau_a > k]`; zero once changed.
    pub mean_residual: f64,
}

/// Stateful single-path simulator.
///
/// Observations are emitted one at a time so trainers and evaluators can
/// interleave them with statistic updates and stopping decisions. The
/// change time is drawn once at construction; for `Ar1` laws the lagged
/// value is initialized from the stationary pre-change distribution and
/// carried across the change.
pub struct PathSim<'a> {
    model: &'a QcdModel,
    tau_a: u64,
    t: u64,
    last_y: f64,
}

impl<'a> PathSim<'a> {
    pub fn new<R: Rng + ?Sized>(model: &'a QcdModel, rng: &mut R) -> Self {
        let tau_a = model.change.sample(rng);
        let last_y = Self::initial_lag(model, rng);
        PathSim { model, tau_a, t: 0, last_y }
    }

    /// Simulator with a forced change time (diagnostics and tests).
    pub fn with_change_time<R: Rng + ?Sized>(
        model: &'a QcdModel,
        tau_a: u64,
        rng: &mut R,
    ) -> Self {
        let last_y = Self::initial_lag(model, rng);
        PathSim { model, tau_a, t: 0, last_y }
    }

    fn initial_lag<R: Rng + ?Sized>(model: &QcdModel, rng: &mut R) -> f64 {
        match model.pre {
            ObservationLaw::Ar1 { .. } => {
                let s = model.pre.ar1_stationary_sigma().expect("ar1");
                let z: f64 = StandardNormal.sample(rng);
                s * z
            }
            ref law => law.sample_iid(rng),
        }
    }

    pub fn change_time(&self) -> u64 {
        self.tau_a
    }

    /// Elapsed time `t` (number of observations emitted so far).
    pub fn elapsed(&self) -> u64 {
        self.t
    }

    /// Latent state at the current time, before the next observation:
    /// whether the change has occurred and the expected residual time if
    /// not. The residual conditions on `tau_a > t`, which is exactly the
    /// "not yet changed" event.
    pub fn hidden_now(&self) -> (bool, f64) {
        if self.t >= self.tau_a {
            (true, 0.0)
        } else {
            let mres = self
                .model
                .change
                .mean_residual(self.t)
                .expect("tau_a > t has positive probability when it was sampled");
            (false, mres)
        }
    }

    /// Advance one step and emit the next observation.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> HiddenStep {
        self.t += 1;
        let k = self.t;
        let changed = k >= self.tau_a;
        let law = if changed { &self.model.post } else { &self.model.pre };
        let y = match *law {
            ObservationLaw::Ar1 { a, sigma_w } => {
                let w: f64 = StandardNormal.sample(rng);
                a * self.last_y + sigma_w * w
            }
            ref iid => iid.sample_iid(rng),
        };
        self.last_y = y;
        let mean_residual = if changed {
            0.0
        } else {
            self.model.change.mean_residual(k).expect("tau_a > k is possible")
        };
        HiddenStep { k, y, changed, mean_residual }
    }
}

/// Simulate `max_len` steps of one path.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &QcdModel,
    max_len: u64,
    rng: &mut R,
) -> Vec<HiddenStep> {
    let mut sim = PathSim::new(model, rng);
    (0..max_len).map(|_| sim.step(rng)).collect()
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn gaussian_model() -> QcdModel {
        QcdModel::new(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 },
            ChangeTimeLaw::Geometric { p: 0.02 },
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn degenerate_geometric_always_changes_at_zero() {
        let law = ChangeTimeLaw::Geometric { p: 1.0 };
        let mut rng = substream(1, 0);
        for _ in 0..100 {
            assert_eq!(law.sample(&mut rng), 0);
        }
    }

    #[test]
    fn geometric_sample_mean_matches() {
        let law = ChangeTimeLaw::Geometric { p: 0.02 };
        let mut rng = substream(2, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| law.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        assert!((mean - 49.0).abs() < 0.5, "mean = {mean}");
    }

    #[test]
    fn mixture_sample_mean_matches() {
        let law = ChangeTimeLaw::Mixture { w: 0.25, p_slow: 0.02, p_fast: 0.2 };
        let mut rng = substream(3, 0);
        let n = 1_000_000;
        let mean = (0..n).map(|_| law.sample(&mut rng) as f64).sum::<f64>() / n as f64;
        // 0.25 * 49 + 0.75 * 4 = 15.25
        assert!((mean - 15.25).abs() < 0.2, "mean = {mean}");
    }

    #[test]
    fn geometric_residual_is_memoryless() {
        let law = ChangeTimeLaw::Geometric { p: 0.02 };
        for k in [0u64, 1, 10, 1000, 1_000_000] {
            assert_eq!(law.mean_residual(k).unwrap(), 50.0);
        }
    }

    #[test]
    fn mixture_residual_matches_series_oracle() {
        // Oracle: truncated series for E[tau | tau > 0] under the mixture,
        // summed until the tail weight drops below 1e-14.
        let (w, ps, pf) = (0.25, 0.02, 0.2);
        let law = ChangeTimeLaw::Mixture { w, p_slow: ps, p_fast: pf };
        let pmf = |j: u64| {
            w * ps * (1.0 - ps).powi(j as i32) + (1.0 - w) * pf * (1.0 - pf).powi(j as i32)
        };
        let tail0 = w * (1.0 - ps) + (1.0 - w) * (1.0 - pf);
        let mut num = 0.0;
        for j in 1..5000u64 {
            num += j as f64 * pmf(j);
        }
        let oracle = num / tail0;
        let got = law.mean_residual(0).unwrap();
        assert!((got - oracle).abs() < 1e-8, "got {got}, oracle {oracle}");
    }

    #[test]
    fn mixture_residual_approaches_slow_component() {
        let law = ChangeTimeLaw::Mixture { w: 0.25, p_slow: 0.02, p_fast: 0.2 };
        let r = law.mean_residual(2000).unwrap();
        assert!((r - 50.0).abs() < 1e-6, "r = {r}");
    }

    #[test]
    fn mixture_residual_is_monotone_in_elapsed_time() {
        // With p_slow < p_fast the posterior drifts to the slow component,
        // so the expected residual can only grow.
        let law = ChangeTimeLaw::Mixture { w: 0.25, p_slow: 0.02, p_fast: 0.2 };
        let mut prev = law.mean_residual(0).unwrap();
        for k in 1..400u64 {
            let cur = law.mean_residual(k).unwrap();
            assert!(cur >= prev - 1e-12, "residual dropped at k = {k}");
            prev = cur;
        }
    }

    #[test]
    fn residual_errors_on_zero_probability_event() {
        let law = ChangeTimeLaw::Geometric { p: 1.0 };
        assert!(matches!(
            law.mean_residual(1),
            Err(Error::ZeroProbabilityEvent(_))
        ));
    }

    #[test]
    fn tail_rate_is_log_based() {
        let law = ChangeTimeLaw::Geometric { p: 0.02 };
        let rate = law.tail_rate();
        assert!((rate - 0.0202027).abs() < 1e-6, "rate = {rate}");
        // Empirical check: (1/n) log P{tau >= n} at n = 200.
        let mut rng = substream(4, 0);
        let n_draws = 1_000_000;
        let hits = (0..n_draws).filter(|_| law.sample(&mut rng) >= 200).count();
        let emp_rate = -((hits as f64 / n_draws as f64).ln()) / 200.0;
        assert!((emp_rate - rate).abs() < 0.002, "empirical {emp_rate} vs {rate}");
    }

    #[test]
    fn forced_change_at_zero_yields_post_law() {
        let model = gaussian_model();
        let mut rng = substream(5, 0);
        let mut sim = PathSim::with_change_time(&model, 0, &mut rng);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let step = sim.step(&mut rng);
            assert!(step.changed);
            assert_eq!(step.mean_residual, 0.0);
            sum += step.y;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean = {mean}");
    }

    #[test]
    fn pre_change_steps_use_pre_law() {
        let model = gaussian_model();
        let mut rng = substream(6, 0);
        let mut sim = PathSim::with_change_time(&model, 1_000_000_000, &mut rng);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let step = sim.step(&mut rng);
            assert!(!step.changed);
            assert_eq!(step.mean_residual, 50.0);
            sum += step.y;
        }
        assert!((sum / n as f64).abs() < 0.02);
    }

    #[test]
    fn ar1_with_zero_coefficient_is_iid() {
        let model = QcdModel::new(
            ObservationLaw::Ar1 { a: 0.0, sigma_w: 1.0 },
            ObservationLaw::Ar1 { a: 0.0, sigma_w: 1.0 },
            ChangeTimeLaw::Geometric { p: 0.02 },
            1.0,
        )
        .unwrap();
        let mut rng = substream(7, 0);
        let mut sim = PathSim::with_change_time(&model, 1_000_000_000, &mut rng);
        let n = 200_000;
        let ys: Vec<f64> = (0..n).map(|_| sim.step(&mut rng).y).collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let mut cov = 0.0;
        for i in 1..n {
            cov += (ys[i] - mean) * (ys[i - 1] - mean);
        }
        cov /= (n - 1) as f64;
        assert!(cov.abs() < 0.01, "lag-1 covariance = {cov}");
    }

    #[test]
    fn paths_replay_bit_identically() {
        let model = gaussian_model();
        let mut r1 = substream(8, 3);
        let mut r2 = substream(8, 3);
        let p1 = simulate_path(&model, 500, &mut r1);
        let p2 = simulate_path(&model, 500, &mut r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn mixture_order_is_validated() {
        let law = ChangeTimeLaw::Mixture { w: 0.5, p_slow: 0.3, p_fast: 0.1 };
        assert!(law.validate().is_err());
    }

    #[test]
    fn cauchy_match_scale_satisfies_defining_identity() {
        // Standard normal CDF at 1, to arbitrary precision.
        const PHI_AT_1: f64 = 0.841_344_746_068_543;
        let cauchy_cdf_at_1 =
            0.5 + (1.0 / CAUCHY_MATCH_GAMMA).atan() / std::f64::consts::PI;
        assert!((cauchy_cdf_at_1 - PHI_AT_1).abs() < 1e-15);
        // statrs' forward CDF is only good to about 1e-11; keep it as a
        // coarse cross-check.
        use statrs::distribution::ContinuousCDF;
        let phi1 = statrs::distribution::Normal::new(0.0, 1.0).unwrap().cdf(1.0);
        assert!((cauchy_cdf_at_1 - phi1).abs() < 1e-9);
    }
}
