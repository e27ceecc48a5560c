//! Q-learning for the stopping problem on the surrogate statistic.
//!
//! The trainer runs a regenerative exploration chain: the statistic
//! evolves along simulated observation paths and the hidden process
//! restarts from a fresh change time whenever the statistic exceeds the
//! regeneration level. Stop actions are i.i.d. coins that only label
//! each transition for the update; they end the backup, not the path,
//! so the chain keeps the natural coupling between the statistic and
//! the hidden change. Temporal-difference updates run along that chain
//! with an optional matrix (Zap) gain and Polyak-Ruppert averaging.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{features_into, RbfBasis};
use crate::error::{Error, Result};
use crate::model::{PathSim, QcdModel};
use crate::rng::substream;
use crate::sis::{sis_reset, sis_step_in_place, SisSpec, SisState};

/// Hard cap on the length of a single episode.
pub const EPISODE_CAP: u64 = 1_000_000;

// ---------------------------------------------------------------------------
// Q-function over the separable basis
// ---------------------------------------------------------------------------

/// A linear Q-function `Q(s, u) = θᵀ ψ(s, u)` over the two-block basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QFunction {
    pub basis: RbfBasis,
    pub theta: Vec<f64>,
}

impl QFunction {
    pub fn new(basis: RbfBasis, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != basis.feature_dim() {
            return Err(Error::InvalidConfig(format!(
                "theta has {} entries, basis needs {}",
                theta.len(),
                basis.feature_dim()
            )));
        }
        Ok(QFunction { basis, theta })
    }

    /// All-zero weights, handy as a neutral starting point.
    pub fn zero(basis: RbfBasis) -> Self {
        let theta = vec![0.0; basis.feature_dim()];
        QFunction { basis, theta }
    }
}

/// `Q(s, u)` for a single action.
pub fn q_value(qf: &QFunction, s: &[f64], u: u8) -> f64 {
    assert!(u <= 1, "action must be 0 (continue) or 1 (stop)");
    let k = qf.basis.k();
    let phi = qf.basis.rbf(s);
    dot(&phi, &qf.theta[usize::from(u) * k..][..k])
}

/// `(Q(s, 0), Q(s, 1))` with one basis evaluation.
pub fn q_pair(qf: &QFunction, s: &[f64]) -> (f64, f64) {
    let mut phi = vec![0.0; qf.basis.k()];
    q_pair_buf(&qf.basis, &qf.theta, s, &mut phi)
}

/// Greedy action; ties stop, per the `≥` in the policy definition.
pub fn greedy(qf: &QFunction, s: &[f64]) -> u8 {
    let (q0, q1) = q_pair(qf, s);
    u8::from(q0 >= q1)
}

fn q_pair_buf(basis: &RbfBasis, theta: &[f64], s: &[f64], phi: &mut [f64]) -> (f64, f64) {
    basis.rbf_into(s, phi);
    let k = basis.k();
    (dot(phi, &theta[..k]), dot(phi, &theta[k..]))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Threshold extraction
// ---------------------------------------------------------------------------

/// Uniform scan grid `s_j = hi · j / (n − 1)` over `[0, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub hi: f64,
    pub n: usize,
}

impl ScanGrid {
    /// Grid over `[0, eta]` with step `10⁻³ · eta`.
    pub fn for_eta(eta: f64) -> Self {
        ScanGrid { hi: eta, n: 1001 }
    }

    pub fn point(&self, j: usize) -> f64 {
        self.hi * j as f64 / (self.n - 1) as f64
    }
}

/// Whether a greedy policy reads as a one-sided threshold rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThresholdForm {
    /// The grid stop region is exactly `{s ≥ h}`.
    Threshold(f64),
    /// Grid points inside `{s ≥ h}` where the policy continues; an empty
    /// list means the policy never stops on the grid.
    NotThreshold { violations: Vec<f64> },
}

/// Threshold extraction from the sign of `diff(s) = Q(s,0) − Q(s,1)`.
///
/// The candidate is the first grid point where the policy stops
/// (`diff ≥ 0`); the rest of the grid is then checked against the
/// half-line form.
pub fn threshold_of_fn<F: Fn(f64) -> f64>(diff: F, grid: ScanGrid) -> ThresholdForm {
    assert!(grid.n >= 2, "scan grid needs at least two points");
    assert!(grid.hi > 0.0 && grid.hi.is_finite(), "scan grid needs a positive endpoint");
    let stops: Vec<bool> = (0..grid.n).map(|j| diff(grid.point(j)) >= 0.0).collect();
    let Some(first) = stops.iter().position(|&b| b) else {
        return ThresholdForm::NotThreshold { violations: Vec::new() };
    };
    let violations: Vec<f64> =
        (first..grid.n).filter(|&j| !stops[j]).map(|j| grid.point(j)).collect();
    if violations.is_empty() {
        ThresholdForm::Threshold(grid.point(first))
    } else {
        ThresholdForm::NotThreshold { violations }
    }
}

/// `threshold_of_fn` for a trained Q-function on a scalar statistic.
pub fn threshold_of(qf: &QFunction, grid: ScanGrid) -> ThresholdForm {
    assert_eq!(qf.basis.dim(), 1, "threshold scan needs a one-dimensional statistic");
    threshold_of_fn(
        |s| {
            let (q0, q1) = q_pair(qf, &[s]);
            q0 - q1
        },
        grid,
    )
}

// ---------------------------------------------------------------------------
// Temporal-difference error
// ---------------------------------------------------------------------------

/// One-step cost: continuing pays one unit per post-change step, stopping
/// pays `κ` times the expected residual time when fired before the change.
pub fn stage_cost(changed: bool, mean_residual: f64, u: u8, kappa: f64) -> f64 {
    match (u, changed) {
        (1, false) => kappa * mean_residual,
        (1, true) => 0.0,
        (_, true) => 1.0,
        (_, false) => 0.0,
    }
}

/// Everything the temporal-difference error needs from one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TdStep {
    pub s: Vec<f64>,
    pub u: u8,
    /// Next statistic; ignored when the step is terminal.
    pub s_next: Vec<f64>,
    /// Hidden change indicator at the current step.
    pub changed: bool,
    /// Expected residual time to the change; zero once it has happened.
    pub mean_residual: f64,
    /// Whether the current statistic lies in the regeneration set.
    pub in_delta: bool,
}

/// TD error with regeneration:
/// `D = −Q(s,u) + c(Φ,u) + γ(1−u)·1{Φ∉Δ}·min_u' Q(s',u')`.
pub fn td_regen(qf: &QFunction, step: &TdStep, gamma: f64, kappa: f64) -> f64 {
    let cost = stage_cost(step.changed, step.mean_residual, step.u, kappa);
    let mut d = cost - q_value(qf, &step.s, step.u);
    if step.u == 0 && !step.in_delta {
        let (q0, q1) = q_pair(qf, &step.s_next);
        d += gamma * q0.min(q1);
    }
    d
}

// ---------------------------------------------------------------------------
// The exploring regenerative chain
// ---------------------------------------------------------------------------

/// One transition of the exploring chain, plus whether the backup ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep {
    pub td: TdStep,
    /// Set when the step carries no continuation value (stop coin or
    /// regeneration set); the statistic path itself flows on through
    /// stop-labeled steps.
    pub terminal: bool,
}

/// Regenerative exploration chain. Stop actions are i.i.d. Bernoulli
/// coins with success `explore_p` that label each transition for the
/// update; the path ignores them and keeps evolving. After an excursion
/// with `‖S‖∞ ≥ eta` the hidden process restarts from a fresh change
/// time and the statistic from zero.
pub struct RegenChain<'a, R: Rng> {
    model: &'a QcdModel,
    spec: &'a SisSpec,
    eta: f64,
    explore_p: f64,
    rng: R,
    path: PathSim<'a>,
    state: SisState,
    steps_in_episode: u64,
    episodes_done: u64,
}

impl<'a, R: Rng> RegenChain<'a, R> {
    pub fn new(
        model: &'a QcdModel,
        spec: &'a SisSpec,
        eta: f64,
        explore_p: f64,
        mut rng: R,
    ) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "regeneration level must be positive and finite, got {eta}"
            )));
        }
        if !(explore_p > 0.0 && explore_p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "exploration rate must lie strictly inside (0, 1), got {explore_p}"
            )));
        }
        let path = PathSim::new(model, &mut rng);
        let state = sis_reset(spec);
        Ok(RegenChain {
            model,
            spec,
            eta,
            explore_p,
            rng,
            path,
            state,
            steps_in_episode: 0,
            episodes_done: 0,
        })
    }

    /// Completed regenerations (excursions past `eta`) so far.
    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    /// Advance one transition, regenerating internally once the
    /// statistic has entered the regeneration set. A stop-labeled step
    /// outside that set still consumes an observation: the label ends
    /// the backup, not the path.
    pub fn next_step(&mut self) -> Result<ChainStep> {
        let (changed, mean_residual) = self.path.hidden_now();
        let s = self.state.s.clone();
        let u = u8::from(self.rng.gen_bool(self.explore_p));
        let in_delta = self.state.sup_norm() >= self.eta;
        self.steps_in_episode += 1;
        if self.steps_in_episode > EPISODE_CAP {
            return Err(Error::EpisodeCapExceeded { cap: EPISODE_CAP });
        }
        let terminal = u == 1 || in_delta;
        let s_next = if in_delta {
            self.path = PathSim::new(self.model, &mut self.rng);
            self.state = sis_reset(self.spec);
            self.steps_in_episode = 0;
            self.episodes_done += 1;
            s.clone()
        } else {
            let obs = self.path.step(&mut self.rng);
            sis_step_in_place(self.spec, &mut self.state, obs.y)?;
            self.state.s.clone()
        };
        Ok(ChainStep {
            td: TdStep { s, u, s_next, changed, mean_residual, in_delta },
            terminal,
        })
    }
}

// ---------------------------------------------------------------------------
// Training configuration and result
// ---------------------------------------------------------------------------

/// Matrix-gain settings. `beta0`/`beta_rho` set the averaging schedule
/// `β_n = min(β₀, n^{−β_ρ})` for the Jacobian estimate and `ridge`
/// regularizes its inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZapConfig {
    pub enabled: bool,
    pub beta0: f64,
    pub beta_rho: f64,
    pub ridge: f64,
}

impl Default for ZapConfig {
    fn default() -> Self {
        ZapConfig { enabled: true, beta0: 1.0, beta_rho: 0.85, ridge: 1e-6 }
    }
}

/// Trainer settings. Step sizes follow `α_n = min(α₀, n^{−ρ})`; the
/// default `ρ = 1` is the pairing the matrix gain expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_regens: u64,
    pub alpha0: f64,
    pub rho: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub eta: f64,
    pub explore_p: f64,
    pub reset_bound: f64,
    pub zap: ZapConfig,
    pub averaging: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_regens: 200_000,
            alpha0: 1.0,
            rho: 1.0,
            gamma: 1.0,
            kappa: 27.0,
            eta: 30.0,
            explore_p: 0.5,
            reset_bound: 5e3,
            zap: ZapConfig::default(),
            averaging: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha0 > 0.0 && self.alpha0.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "alpha0 must be positive and finite, got {}",
                self.alpha0
            )));
        }
        if !(self.rho > 0.5 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "step exponent rho must lie in (0.5, 1], got {}",
                self.rho
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "discount gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "kappa must be finite and non-negative, got {}",
                self.kappa
            )));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "regeneration level eta must be positive and finite, got {}",
                self.eta
            )));
        }
        if !(self.explore_p > 0.0 && self.explore_p < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "exploration rate must lie strictly inside (0, 1), got {}",
                self.explore_p
            )));
        }
        if !(self.reset_bound > 0.0 && self.reset_bound.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "reset bound must be positive and finite, got {}",
                self.reset_bound
            )));
        }
        if !(self.zap.beta0 > 0.0 && self.zap.beta0 <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "zap beta0 must lie in (0, 1], got {}",
                self.zap.beta0
            )));
        }
        if !(self.zap.beta_rho > 0.5 && self.zap.beta_rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "zap beta_rho must lie in (0.5, 1], got {}",
                self.zap.beta_rho
            )));
        }
        if !(self.zap.ridge > 0.0 && self.zap.ridge.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "zap ridge must be positive and finite, got {}",
                self.zap.ridge
            )));
        }
        Ok(())
    }
}

/// Output of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub theta_final: Vec<f64>,
    /// Averaged iterate, present exactly when averaging was enabled.
    pub theta_pr: Option<Vec<f64>>,
    /// Total TD samples processed.
    #[serde(rename = "S")]
    pub sample_count: u64,
    pub regen_count: u64,
    pub reset_count: u64,
    /// Thinned trajectory `(n, θ_n)`, including `(0, θ₀)`. The stride
    /// doubles whenever the log would pass 2·10⁴ entries, so it ends up
    /// within a factor of two of one entry per `⌈S/10⁴⌉` samples.
    #[serde(skip)]
    pub iterate_log: Vec<(u64, Vec<f64>)>,
}

struct IterateLog {
    entries: Vec<(u64, Vec<f64>)>,
    stride: u64,
}

impl IterateLog {
    const CAP: usize = 20_000;

    fn new() -> Self {
        IterateLog { entries: Vec::new(), stride: 1 }
    }

    fn push(&mut self, n: u64, theta: &[f64]) {
        if n % self.stride != 0 {
            return;
        }
        self.entries.push((n, theta.to_vec()));
        if self.entries.len() >= Self::CAP {
            self.stride *= 2;
            let stride = self.stride;
            self.entries.retain(|(k, _)| k % stride == 0);
        }
    }
}

// ---------------------------------------------------------------------------
// The trainer
// ---------------------------------------------------------------------------

/// Run TD learning until `config.n_regens` regenerations have completed
/// and return the final (and, when enabled, averaged) weights. All
/// randomness derives from `config.seed`, so reruns reproduce results
/// bit for bit.
pub fn train(
    model: &QcdModel,
    spec: &SisSpec,
    basis: &RbfBasis,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    basis.validate()?;
    if spec.dim() != basis.dim() {
        return Err(Error::InvalidConfig(format!(
            "statistic dimension {} does not match basis dimension {}",
            spec.dim(),
            basis.dim()
        )));
    }

    let d = basis.feature_dim();
    let k = basis.k();
    let mut theta_rng = substream(config.seed, 0);
    let mut theta =
        DVector::from_fn(d, |_, _| theta_rng.gen_range(-50.0..50.0));
    let mut chain =
        RegenChain::new(model, spec, config.eta, config.explore_p, substream(config.seed, 1))?;

    let mut theta_bar = theta.clone();
    let mut a_hat = DMatrix::from_diagonal_element(d, d, -1.0);
    let mut zeta = DVector::zeros(d);
    let mut w = DVector::zeros(d);
    let mut phi = vec![0.0; k];
    let mut n: u64 = 0;
    let mut reset_count: u64 = 0;
    let mut log = IterateLog::new();
    log.push(0, theta.as_slice());

    while chain.episodes_done() < config.n_regens {
        let step = chain.next_step()?;
        n += 1;

        features_into(basis, &step.td.s, step.td.u, zeta.as_mut_slice());
        debug_assert!(
            zeta.as_slice()[(1 - usize::from(step.td.u)) * k..][..k]
                .iter()
                .all(|&v| v == 0.0),
            "update direction leaked outside the acted block"
        );

        let cost =
            stage_cost(step.td.changed, step.td.mean_residual, step.td.u, config.kappa);
        let mut d_err = cost - theta.dot(&zeta);
        let continuing = step.td.u == 0 && !step.td.in_delta;
        let mut greedy_next = 0u8;
        if continuing {
            let (q0, q1) = q_pair_buf(basis, theta.as_slice(), &step.td.s_next, &mut phi);
            d_err += config.gamma * q0.min(q1);
            greedy_next = u8::from(q0 >= q1);
        }

        let alpha = config.alpha0.min((n as f64).powf(-config.rho));
        if config.zap.enabled {
            if continuing {
                features_into(basis, &step.td.s_next, greedy_next, w.as_mut_slice());
                w *= config.gamma;
                w -= &zeta;
            } else {
                w.copy_from(&zeta);
                w.neg_mut();
            }
            let beta = config.zap.beta0.min((n as f64).powf(-config.zap.beta_rho));
            a_hat.ger(beta, &zeta, &w, 1.0 - beta);
            let mut m = a_hat.clone();
            for i in 0..d {
                m[(i, i)] -= config.zap.ridge;
            }
            let rhs = &zeta * d_err;
            match m.lu().solve(&rhs) {
                // θ ← θ + α G ζ D with G = −(Â − ridge·I)⁻¹.
                Some(x) => theta.axpy(-alpha, &x, 1.0),
                // An exactly singular gain falls back to the plain direction.
                None => theta.axpy(alpha * d_err, &zeta, 1.0),
            }
        } else {
            theta.axpy(alpha * d_err, &zeta, 1.0);
        }

        if !theta.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericalBlowUp { at_sample: n });
        }
        if theta.amax() > config.reset_bound {
            for v in theta.iter_mut() {
                *v = theta_rng.gen_range(-50.0..50.0);
            }
            reset_count += 1;
        }
        if config.averaging {
            for (b, t) in theta_bar.iter_mut().zip(theta.iter()) {
                *b += (*t - *b) / n as f64;
            }
        }
        log.push(n, theta.as_slice());
    }

    Ok(TrainResult {
        theta_final: theta.as_slice().to_vec(),
        theta_pr: config.averaging.then(|| theta_bar.as_slice().to_vec()),
        sample_count: n,
        regen_count: chain.episodes_done(),
        reset_count,
        iterate_log: log.entries,
    })
}

// ---------------------------------------------------------------------------
// Projection diagnostics
// ---------------------------------------------------------------------------

/// Least-squares projection of the stopping cost onto an arbitrary
/// feature map, sampled along an independent exploring chain:
/// `x = R̂⁻¹ Ê[f(S) c_•(Φ)]` with `R̂ = Ê[f(S) f(S)ᵀ]`.
pub fn projection_ls<F, R>(
    model: &QcdModel,
    spec: &SisSpec,
    eta: f64,
    explore_p: f64,
    kappa: f64,
    n_samples: u64,
    rng: R,
    feat: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
    R: Rng,
{
    let mut chain = RegenChain::new(model, spec, eta, explore_p, rng)?;
    let p = feat(&vec![0.0; spec.dim()]).len();
    if p == 0 {
        return Err(Error::InvalidConfig("feature map returns no coordinates".into()));
    }
    let mut r = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    for _ in 0..n_samples {
        let step = chain.next_step()?;
        let f = DVector::from_vec(feat(&step.td.s));
        assert_eq!(f.len(), p, "feature map changed dimension mid-run");
        let c = stage_cost(step.td.changed, step.td.mean_residual, 1, kappa);
        r.ger(1.0, &f, &f, 1.0);
        b.axpy(c, &f, 1.0);
    }
    r /= n_samples as f64;
    b /= n_samples as f64;
    let chol = r.cholesky().ok_or_else(|| {
        Error::RankDeficient("stationary feature covariance is singular".into())
    })?;
    Ok(chol.solve(&b).as_slice().to_vec())
}

/// Compare the trained stop-block weights against the direct projection
/// of the stopping cost. Returns `(θ¹ trained, θ¹ least squares)`; the
/// projection uses the model's `κ` and a fresh chain driven by `rng`.
pub fn projection_check<R: Rng>(
    qf: &QFunction,
    model: &QcdModel,
    spec: &SisSpec,
    eta: f64,
    explore_p: f64,
    n_samples: u64,
    rng: R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = qf.basis.k();
    let theta1_hat = qf.theta[k..].to_vec();
    let theta1_ls = projection_ls(model, spec, eta, explore_p, model.kappa, n_samples, rng, |s| {
        qf.basis.rbf(s)
    })?;
    Ok((theta1_hat, theta1_ls))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::{ChangeTimeLaw, ObservationLaw};
    use crate::sis::{DriftFn, StatKind};

    fn model_1a(kappa: f64) -> QcdModel {
        QcdModel::new(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 },
            ChangeTimeLaw::Geometric { p: 0.02 },
            kappa,
        )
        .unwrap()
    }

    fn cusum_spec(shift: f64) -> SisSpec {
        let drift = DriftFn::iid_llr(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 },
            shift,
        )
        .unwrap();
        SisSpec::single(StatKind::Cusum, drift).unwrap()
    }

    fn basis_1d(centers: &[f64], b: f64) -> RbfBasis {
        RbfBasis::new(centers.iter().map(|&c| vec![c]).collect(), b).unwrap()
    }

    #[test]
    fn q_values_pick_the_right_block() {
        let basis = basis_1d(&[0.0, 5.0], 0.4);
        let qf = QFunction::zero(basis.clone());
        assert_eq!(q_value(&qf, &[1.0], 0), 0.0);
        assert_eq!(q_value(&qf, &[1.0], 1), 0.0);

        let qf = QFunction::new(basis, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(q_value(&qf, &[0.0], 0), 0.0);
        let q1 = q_value(&qf, &[0.0], 1);
        assert!((q1 - 3.0).abs() < 1e-12);
        let (q0, q1b) = q_pair(&qf, &[0.0]);
        assert_eq!(q0, 0.0);
        assert_eq!(q1, q1b);
    }

    #[test]
    fn greedy_stops_on_ties() {
        let basis = basis_1d(&[0.0, 5.0], 0.4);
        let qf = QFunction::zero(basis.clone());
        assert_eq!(greedy(&qf, &[2.0]), 1);

        let cheaper_to_stop = QFunction::new(basis.clone(), vec![2.0, 2.0, 1.0, 1.0]).unwrap();
        assert_eq!(greedy(&cheaper_to_stop, &[1.0]), 1);
        let cheaper_to_continue = QFunction::new(basis, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(greedy(&cheaper_to_continue, &[1.0]), 0);
    }

    #[test]
    fn threshold_scan_reads_the_stop_region() {
        let grid = ScanGrid { hi: 30.0, n: 30_001 };

        // Indifference everywhere stops everywhere: the first grid point.
        let basis = basis_1d(&[0.0, 5.0], 0.4);
        let qf = QFunction::zero(basis);
        assert_eq!(threshold_of(&qf, grid), ThresholdForm::Threshold(0.0));

        // A clean sign change lands within one step of the crossing.
        match threshold_of_fn(|s| s - 5.0, grid) {
            ThresholdForm::Threshold(h) => assert!((h - 5.0).abs() <= grid.hi / 30_000.0),
            other => panic!("expected a threshold, got {other:?}"),
        }

        // Never stopping is flagged with an empty violation list.
        assert_eq!(
            threshold_of_fn(|_| -1.0, grid),
            ThresholdForm::NotThreshold { violations: Vec::new() }
        );

        // An interior stop window breaks the half-line form.
        match threshold_of_fn(|s| if (10.0..=20.0).contains(&s) { 1.0 } else { -1.0 }, grid) {
            ThresholdForm::NotThreshold { violations } => {
                assert!(!violations.is_empty());
                assert!(violations.iter().all(|&v| v > 20.0));
            }
            other => panic!("expected a violation list, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn monotone_policies_always_read_as_thresholds(a in 0.0f64..5.0, b in -3.0f64..3.0) {
            let grid = ScanGrid { hi: 10.0, n: 1001 };
            match threshold_of_fn(|s| a * s - b, grid) {
                ThresholdForm::Threshold(h) => prop_assert!((0.0..=grid.hi).contains(&h)),
                ThresholdForm::NotThreshold { violations } => prop_assert!(violations.is_empty()),
            }
        }
    }

    #[test]
    fn stage_costs_cover_all_four_cases() {
        assert_eq!(stage_cost(false, 50.0, 1, 2.0), 100.0);
        assert_eq!(stage_cost(true, 0.0, 1, 2.0), 0.0);
        assert_eq!(stage_cost(true, 0.0, 0, 2.0), 1.0);
        assert_eq!(stage_cost(false, 50.0, 0, 2.0), 0.0);
    }

    #[test]
    fn td_error_matches_hand_cases() {
        let basis = basis_1d(&[0.0, 5.0], 0.4);

        // Stopping early with Q(s,1) = 100 exactly cancels the penalty.
        let qf = QFunction::new(basis.clone(), vec![0.0, 0.0, 100.0, 0.0]).unwrap();
        let stop_early = TdStep {
            s: vec![0.0],
            u: 1,
            s_next: vec![0.0],
            changed: false,
            mean_residual: 50.0,
            in_delta: false,
        };
        assert_eq!(td_regen(&qf, &stop_early, 1.0, 2.0), 0.0);

        // Continuing inside the regeneration set keeps only the stage cost.
        let qf = QFunction::new(basis.clone(), vec![7.0, 0.0, 0.0, 0.0]).unwrap();
        let capped = TdStep {
            s: vec![0.0],
            u: 0,
            s_next: vec![0.3],
            changed: true,
            mean_residual: 0.0,
            in_delta: true,
        };
        assert_eq!(td_regen(&qf, &capped, 1.0, 2.0), 1.0 - 7.0);

        // Zero weights before the change make every term vanish.
        let qf = QFunction::zero(basis);
        let neutral = TdStep {
            s: vec![0.2],
            u: 0,
            s_next: vec![0.4],
            changed: false,
            mean_residual: 50.0,
            in_delta: false,
        };
        assert_eq!(td_regen(&qf, &neutral, 1.0, 2.0), 0.0);
    }

    #[test]
    fn chain_regenerates_only_on_excursions() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let mut chain = RegenChain::new(&model, &spec, 5.0, 0.5, substream(7, 0)).unwrap();

        let mut regens = 0u64;
        let mut stops_mid_path = 0u64;
        let mut stops_that_moved = 0u64;
        let mut expect_fresh = true;
        for _ in 0..2_000 {
            let step = chain.next_step().unwrap();
            if expect_fresh {
                assert_eq!(step.td.s, vec![0.0]);
            }
            assert_eq!(step.terminal, step.td.u == 1 || step.td.in_delta);
            if step.td.in_delta {
                assert!(step.td.s[0] >= 5.0);
                assert_eq!(step.td.s_next, step.td.s);
                regens += 1;
            } else if step.td.u == 1 {
                // A stop label outside the regeneration set advances the
                // path instead of resetting it; away from the reflecting
                // barrier at zero the statistic almost surely moves.
                stops_mid_path += 1;
                if step.td.s_next != step.td.s {
                    stops_that_moved += 1;
                } else {
                    assert_eq!(step.td.s, vec![0.0]);
                }
            }
            expect_fresh = step.td.in_delta;
        }
        assert_eq!(chain.episodes_done(), regens);
        assert!(regens >= 3, "excursions past eta = 5 should recur, got {regens}");
        assert!(stops_mid_path > 500, "half the steps carry stop labels");
        assert!(stops_that_moved > stops_mid_path / 4);
    }

    #[test]
    fn endless_episodes_hit_the_cap() {
        // Identical laws give zero drift, so the statistic never reaches
        // eta; stop labels do not reset the excursion, so the episode
        // cap is the only way out.
        let model = QcdModel::new(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ChangeTimeLaw::Geometric { p: 0.02 },
            2.0,
        )
        .unwrap();
        let drift = DriftFn::iid_llr(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            0.0,
        )
        .unwrap();
        let spec = SisSpec::single(StatKind::Cusum, drift).unwrap();
        let mut chain =
            RegenChain::new(&model, &spec, 30.0, 0.5, substream(1, 0)).unwrap();
        let err = loop {
            match chain.next_step() {
                Ok(_) => continue,
                Err(e) => break e,
            }
        };
        assert_eq!(err, Error::EpisodeCapExceeded { cap: EPISODE_CAP });
    }

    #[test]
    fn zero_episodes_leave_the_start_point() {
        let config = TrainConfig { n_regens: 0, kappa: 2.0, seed: 11, ..TrainConfig::default() };
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        let out = train(&model, &spec, &basis, &config).unwrap();
        assert_eq!(out.sample_count, 0);
        assert_eq!(out.regen_count, 0);
        assert_eq!(out.reset_count, 0);
        assert_eq!(out.iterate_log.len(), 1);
        assert_eq!(out.iterate_log[0].0, 0);
        assert_eq!(out.iterate_log[0].1, out.theta_final);
        assert_eq!(out.theta_pr.as_deref(), Some(out.theta_final.as_slice()));
        assert!(out.theta_final.iter().all(|v| v.abs() <= 50.0));
    }

    #[test]
    fn reruns_reproduce_bit_for_bit() {
        let config = TrainConfig {
            n_regens: 300,
            kappa: 27.0,
            seed: 42,
            ..TrainConfig::default()
        };
        let model = model_1a(27.0);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        let a = train(&model, &spec, &basis, &config).unwrap();
        let b = train(&model, &spec, &basis, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn training_smoke_run_stays_finite() {
        let config = TrainConfig {
            n_regens: 2_000,
            kappa: 2.0,
            seed: 3,
            averaging: false,
            ..TrainConfig::default()
        };
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        let out = train(&model, &spec, &basis, &config).unwrap();
        assert_eq!(out.regen_count, 2_000);
        assert!(out.sample_count >= out.regen_count);
        assert!(out.theta_pr.is_none());
        assert!(out.theta_final.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn oversized_iterates_are_reset_and_recovered() {
        // A huge stopping penalty makes the first stop-labeled updates
        // overshoot the reset bound while the step sizes are still large;
        // the trainer rerolls the weights and finishes finite.
        let config = TrainConfig { n_regens: 50, kappa: 1e4, seed: 5, ..TrainConfig::default() };
        let model = model_1a(1e4);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        let out = train(&model, &spec, &basis, &config).unwrap();
        assert!(out.reset_count > 0);
        assert!(out.theta_final.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn runaway_weights_are_reported_not_propagated() {
        // A stopping penalty near the float ceiling overflows the stage
        // cost on the first early stop.
        let config = TrainConfig {
            n_regens: 200,
            kappa: 1e308,
            seed: 5,
            zap: ZapConfig { enabled: false, ..ZapConfig::default() },
            ..TrainConfig::default()
        };
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        match train(&model, &spec, &basis, &config) {
            Err(Error::NumericalBlowUp { at_sample }) => assert!(at_sample > 0),
            other => panic!("expected a blow-up report, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let base = TrainConfig::default();
        let bad = [
            TrainConfig { rho: 0.4, ..base.clone() },
            TrainConfig { rho: 1.2, ..base.clone() },
            TrainConfig { gamma: 1.5, ..base.clone() },
            TrainConfig { explore_p: 0.0, ..base.clone() },
            TrainConfig { explore_p: 1.0, ..base.clone() },
            TrainConfig { alpha0: 0.0, ..base.clone() },
            TrainConfig { eta: 0.0, ..base.clone() },
            TrainConfig { reset_bound: 0.0, ..base.clone() },
            TrainConfig {
                zap: ZapConfig { ridge: 0.0, ..ZapConfig::default() },
                ..base.clone()
            },
        ];
        for config in bad {
            assert!(matches!(config.validate(), Err(Error::InvalidConfig(_))));
        }
        assert!(base.validate().is_ok());
    }

    #[test]
    fn iterate_log_thins_to_a_constant_stride() {
        let config = TrainConfig {
            n_regens: 30_000,
            kappa: 2.0,
            seed: 9,
            averaging: false,
            zap: ZapConfig { enabled: false, ..ZapConfig::default() },
            ..TrainConfig::default()
        };
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0, 10.0], 0.4);
        let out = train(&model, &spec, &basis, &config).unwrap();
        assert!(out.sample_count > 20_000);
        let log = &out.iterate_log;
        assert!(log.len() <= 20_000);
        assert!(log.len() >= 5_000);
        let stride = log[1].0 - log[0].0;
        assert!(stride >= 1);
        for pair in log.windows(2) {
            assert_eq!(pair[1].0 - pair[0].0, stride);
        }
        assert_eq!(log[0].0, 0);
    }

    #[test]
    fn plain_updates_converge_to_the_batch_projection() {
        // With no discounting and no matrix gain the TD recursion is block
        // least-mean-squares, so the averaged weights must land on the
        // batch projections of the two stage costs.
        let kappa = 27.0;
        let model = model_1a(kappa);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0], 0.5);
        let config = TrainConfig {
            n_regens: 400_000,
            alpha0: 1.0,
            rho: 0.6,
            gamma: 0.0,
            kappa,
            seed: 17,
            zap: ZapConfig { enabled: false, ..ZapConfig::default() },
            ..TrainConfig::default()
        };
        let out = train(&model, &spec, &basis, &config).unwrap();
        let theta = out.theta_pr.expect("averaging is on");

        // Batch estimate on an independent stream.
        let mut chain =
            RegenChain::new(&model, &spec, config.eta, config.explore_p, substream(1234, 0))
                .unwrap();
        let p = basis.k();
        let mut r = DMatrix::zeros(p, p);
        let mut b0 = DVector::zeros(p);
        let mut b1 = DVector::zeros(p);
        let n = 400_000u64;
        for _ in 0..n {
            let step = chain.next_step().unwrap();
            let f = DVector::from_vec(basis.rbf(&step.td.s));
            r.ger(1.0, &f, &f, 1.0);
            b0.axpy(stage_cost(step.td.changed, step.td.mean_residual, 0, kappa), &f, 1.0);
            b1.axpy(stage_cost(step.td.changed, step.td.mean_residual, 1, kappa), &f, 1.0);
        }
        let chol = (r / n as f64).cholesky().unwrap();
        let star0 = chol.solve(&(&b0 / n as f64));
        let star1 = chol.solve(&(&b1 / n as f64));

        // The stop block carries the kappa-sized costs and is judged
        // relatively; the continue block projects an indicator that the
        // short episodes rarely see, so its scale is a few units at most
        // and an absolute band is the sharper check.
        let rel = |got: &[f64], want: &DVector<f64>| {
            let diff: f64 =
                got.iter().zip(want.iter()).map(|(g, w)| (g - w) * (g - w)).sum::<f64>().sqrt();
            diff / want.norm()
        };
        assert!(
            rel(&theta[p..], &star1) < 0.02,
            "stop block off by {:.4}",
            rel(&theta[p..], &star1)
        );
        for (got, want) in theta[..p].iter().zip(star0.iter()) {
            assert!((got - want).abs() < 1.0, "continue weight {got} vs batch {want}");
        }
    }

    #[test]
    fn constant_feature_projection_is_the_sample_mean() {
        let kappa = 2.0;
        let model = model_1a(kappa);
        let spec = cusum_spec(0.0);
        let n = 500_000u64;

        let ls = projection_ls(&model, &spec, 30.0, 0.5, kappa, n, substream(88, 0), |_| {
            vec![1.0]
        })
        .unwrap();

        // Identical stream, mean computed by hand.
        let mut chain = RegenChain::new(&model, &spec, 30.0, 0.5, substream(88, 0)).unwrap();
        let mut mean = 0.0;
        for _ in 0..n {
            let step = chain.next_step().unwrap();
            mean += stage_cost(step.td.changed, step.td.mean_residual, 1, kappa);
        }
        mean /= n as f64;
        assert_eq!(ls, vec![mean]);

        // The mean itself is kappa times the residual mean times the
        // pre-change occupancy, estimated here from an independent stream.
        let mut chain = RegenChain::new(&model, &spec, 30.0, 0.5, substream(99, 0)).unwrap();
        let mut pre = 0u64;
        for _ in 0..n {
            pre += u64::from(!chain.next_step().unwrap().td.changed);
        }
        // Excursions are hundreds of steps long, so the two streams share
        // only a few thousand independent blocks; the tolerance reflects
        // that.
        let expected = kappa * 50.0 * pre as f64 / n as f64;
        assert!(
            (ls[0] - expected).abs() / expected < 0.08,
            "got {} want about {expected}",
            ls[0]
        );
    }

    #[test]
    fn projection_check_reports_both_estimates() {
        let kappa = 2.0;
        let model = model_1a(kappa);
        let spec = cusum_spec(0.0);
        let basis = basis_1d(&[0.0, 2.0, 5.0], 0.4);
        let qf = QFunction::new(basis, vec![0.0, 0.0, 0.0, 4.0, 5.0, 6.0]).unwrap();
        let (hat, ls) =
            projection_check(&qf, &model, &spec, 30.0, 0.5, 50_000, substream(3, 0)).unwrap();
        assert_eq!(hat, vec![4.0, 5.0, 6.0]);
        assert_eq!(ls.len(), 3);
        assert!(ls.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn degenerate_features_are_reported() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.0);
        let err = projection_ls(&model, &spec, 30.0, 0.5, 2.0, 1_000, substream(4, 0), |_| {
            vec![1.0, 1.0]
        })
        .unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }
}
