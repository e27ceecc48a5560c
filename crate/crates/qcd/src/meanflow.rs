//! Stability diagnostics for the TD recursion: Monte-Carlo estimates of
//! the mean-flow vector field, Euler integration of the flow, the
//! instability construction with a non-separable basis, and exact
//! contraction/rank checks on small finite chains.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::basis::RbfBasis;
use crate::error::{Error, Result};
use crate::model::QcdModel;
use crate::numerics::blocked;
use crate::qlearn::{stage_cost, RegenChain};
use crate::rng::substream;
use crate::sis::SisSpec;

/// Norm at which `integrate_flow` declares the flow divergent.
pub const DIVERGENCE_GUARD: f64 = 1e8;

const MIN_SAMPLES: usize = 1_000;
const BURN_IN_REGENS: u64 = 1_000;
const BLOCK: u64 = 1 << 14;

// ---------------------------------------------------------------------------
// The frozen-pool flow estimator
// ---------------------------------------------------------------------------

/// Feature map of the estimator: either the separable two-block RBF
/// basis, or the deliberately non-separable pair `ψ⁰(s) = s`,
/// `ψ¹(s) = ξ·s` used by the instability construction.
#[derive(Debug, Clone, PartialEq)]
enum FlowBasis {
    Rbf(RbfBasis),
    Scaled { xi: f64 },
}

impl FlowBasis {
    fn feature_dim(&self, state_dim: usize) -> usize {
        match self {
            FlowBasis::Rbf(b) => b.feature_dim(),
            FlowBasis::Scaled { .. } => state_dim,
        }
    }
}

/// Monte-Carlo estimator of the mean-flow field `f̄(θ) = E[ζ D^θ]`.
///
/// Construction draws one pool of stationary-regime transitions and
/// freezes it, so every later evaluation shares the same randomness:
/// `estimate_barf` is a deterministic function of `θ` and the flow seen
/// by the integrator is smooth.
pub struct FlowEstimator {
    basis: FlowBasis,
    gamma: f64,
    state_dim: usize,
    n: usize,
    // transition pool, struct-of-arrays, states flattened row-major
    s: Vec<f64>,
    s_next: Vec<f64>,
    u: Vec<u8>,
    cost: Vec<f64>,
    continuing: Vec<u8>,
}

impl FlowEstimator {
    /// Pool sampled from the exploring regenerative chain of a change
    /// detection model, after a burn-in of 10³ regenerations.
    pub fn for_model(
        model: &QcdModel,
        spec: &SisSpec,
        basis: &RbfBasis,
        explore_p: f64,
        gamma: f64,
        eta: f64,
        n_samples: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_samples < MIN_SAMPLES {
            return Err(Error::InvalidConfig(format!(
                "flow estimation needs at least {MIN_SAMPLES} samples, got {n_samples}"
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!(
                "discount gamma must lie in [0, 1], got {gamma}"
            )));
        }
        basis.validate()?;
        if spec.dim() != basis.dim() {
            return Err(Error::InvalidConfig(format!(
                "statistic dimension {} does not match basis dimension {}",
                spec.dim(),
                basis.dim()
            )));
        }

        let dim = spec.dim();
        let mut chain = RegenChain::new(model, spec, eta, explore_p, substream(seed, 0))?;
        while chain.episodes_done() < BURN_IN_REGENS {
            chain.next_step()?;
        }
        let mut pool = FlowEstimator {
            basis: FlowBasis::Rbf(basis.clone()),
            gamma,
            state_dim: dim,
            n: n_samples,
            s: Vec::with_capacity(n_samples * dim),
            s_next: Vec::with_capacity(n_samples * dim),
            u: Vec::with_capacity(n_samples),
            cost: Vec::with_capacity(n_samples),
            continuing: Vec::with_capacity(n_samples),
        };
        for _ in 0..n_samples {
            let step = chain.next_step()?;
            pool.s.extend_from_slice(&step.td.s);
            pool.s_next.extend_from_slice(&step.td.s_next);
            pool.u.push(step.td.u);
            pool.cost.push(stage_cost(
                step.td.changed,
                step.td.mean_residual,
                step.td.u,
                model.kappa,
            ));
            pool.continuing.push(u8::from(step.td.u == 0 && !step.td.in_delta));
        }
        Ok(pool)
    }

    pub fn n_samples(&self) -> usize {
        self.n
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.feature_dim(self.state_dim)
    }
}

/// Parameters of the instability construction at scale `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleParams {
    /// State-switch probability `δ = ξ⁻²`.
    pub delta: f64,
    /// Stop-coin probability `p₁ = ξ⁻³`.
    pub p1: f64,
    pub gamma: f64,
}

pub fn counterexample_params(xi: f64) -> CounterexampleParams {
    CounterexampleParams { delta: xi.powi(-2), p1: xi.powi(-3), gamma: 0.99 }
}

/// The instability construction: a symmetric two-state chain on
/// `{−1, +1}` with switch probability `δ = ξ⁻²`, scalar features
/// `ψ⁰(s) = s` and `ψ¹(s) = ξ·s` (deliberately not separable), stop
/// coins at `p₁ = ξ⁻³`, zero costs, and `γ = 0.99`. The mean flow
/// points away from the root at the origin.
pub fn counterexample_instance(xi: f64, n_samples: usize, seed: u64) -> Result<FlowEstimator> {
    if !(xi > 1.0 && xi.is_finite()) {
        return Err(Error::InvalidConfig(format!("scale xi must exceed one, got {xi}")));
    }
    if n_samples < MIN_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "flow estimation needs at least {MIN_SAMPLES} samples, got {n_samples}"
        )));
    }
    let params = counterexample_params(xi);
    let mut rng = substream(seed, 0);
    let mut pool = FlowEstimator {
        basis: FlowBasis::Scaled { xi },
        gamma: params.gamma,
        state_dim: 1,
        n: n_samples,
        s: Vec::with_capacity(n_samples),
        s_next: Vec::with_capacity(n_samples),
        u: Vec::with_capacity(n_samples),
        cost: Vec::with_capacity(n_samples),
        continuing: Vec::with_capacity(n_samples),
    };
    // The chain starts in its stationary law, so no burn-in is needed.
    let mut x: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    for _ in 0..n_samples {
        let u = u8::from(rng.gen_bool(params.p1));
        let x_next = if rng.gen_bool(params.delta) { -x } else { x };
        pool.s.push(x);
        pool.s_next.push(x_next);
        pool.u.push(u);
        pool.cost.push(0.0);
        pool.continuing.push(u8::from(u == 0));
        x = x_next;
    }
    Ok(pool)
}

// ---------------------------------------------------------------------------
// Field evaluation
// ---------------------------------------------------------------------------

struct BlockSums {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl FlowEstimator {
    /// `f̄(θ)` as the pool average of `ζ D^θ`, with per-coordinate
    /// standard errors. Evaluation parallelizes over fixed sample
    /// blocks and folds them in order, so results are reproducible.
    pub fn estimate_barf(&self, theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.feature_dim();
        assert_eq!(theta.len(), d, "weight dimension mismatch");
        let sums = blocked(self.n as u64, BLOCK, |range| {
            let mut acc = BlockSums { sum: vec![0.0; d], sum_sq: vec![0.0; d] };
            let mut zeta = vec![0.0; d];
            let mut phi = match &self.basis {
                FlowBasis::Rbf(b) => vec![0.0; b.k()],
                FlowBasis::Scaled { .. } => Vec::new(),
            };
            for idx in range {
                let i = idx as usize;
                self.fill_zeta(i, &mut zeta);
                let d_err = self.td_error(theta, i, &zeta, &mut phi);
                for (j, z) in zeta.iter().enumerate() {
                    let v = z * d_err;
                    acc.sum[j] += v;
                    acc.sum_sq[j] += v * v;
                }
            }
            acc
        });
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        for b in sums {
            for j in 0..d {
                sum[j] += b.sum[j];
                sum_sq[j] += b.sum_sq[j];
            }
        }
        let n = self.n as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / n).collect();
        let se: Vec<f64> = mean
            .iter()
            .zip(&sum_sq)
            .map(|(m, sq)| {
                let var = (sq / n - m * m).max(0.0) * n / (n - 1.0);
                (var / n).sqrt()
            })
            .collect();
        (mean, se)
    }

    /// Write `ζ = ψ(s, u)` for pool entry `i` into `zeta`.
    fn fill_zeta(&self, i: usize, zeta: &mut [f64]) {
        let dim = self.state_dim;
        let s = &self.s[i * dim..(i + 1) * dim];
        let u = self.u[i];
        match &self.basis {
            FlowBasis::Rbf(basis) => {
                let k = basis.k();
                zeta.fill(0.0);
                basis.rbf_into(s, &mut zeta[usize::from(u) * k..][..k]);
            }
            FlowBasis::Scaled { xi } => {
                let scale = if u == 1 { *xi } else { 1.0 };
                for (z, v) in zeta.iter_mut().zip(s) {
                    *z = scale * v;
                }
            }
        }
    }

    /// TD error of pool entry `i` under `θ`, with `zeta` already filled.
    fn td_error(&self, theta: &[f64], i: usize, zeta: &[f64], phi: &mut [f64]) -> f64 {
        let dim = self.state_dim;
        let s_next = &self.s_next[i * dim..(i + 1) * dim];
        let mut d_err = self.cost[i] - dot(zeta, theta);
        if self.continuing[i] == 1 {
            match &self.basis {
                FlowBasis::Rbf(basis) => {
                    let k = basis.k();
                    basis.rbf_into(s_next, phi);
                    let q0 = dot(phi, &theta[..k]);
                    let q1 = dot(phi, &theta[k..]);
                    d_err += self.gamma * q0.min(q1);
                }
                FlowBasis::Scaled { xi } => {
                    let q0 = dot(theta, s_next);
                    d_err += self.gamma * q0.min(*xi * q0);
                }
            }
        }
        d_err
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pool moments of the feature process: `R̂ = Ê[ζζᵀ]` and
/// `b̂ = Ê[ζ c]`, each with entrywise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMoments {
    pub r: Vec<Vec<f64>>,
    pub r_se: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub b_se: Vec<f64>,
}

pub fn estimate_moments(est: &FlowEstimator) -> ChainMoments {
    let d = est.feature_dim();
    let cells = d * d + d;
    let sums = blocked(est.n as u64, BLOCK, |range| {
        let mut acc = BlockSums { sum: vec![0.0; cells], sum_sq: vec![0.0; cells] };
        let mut zeta = vec![0.0; d];
        for idx in range {
            let i = idx as usize;
            est.fill_zeta(i, &mut zeta);
            for a in 0..d {
                for bb in 0..d {
                    let v = zeta[a] * zeta[bb];
                    acc.sum[a * d + bb] += v;
                    acc.sum_sq[a * d + bb] += v * v;
                }
                let v = zeta[a] * est.cost[i];
                acc.sum[d * d + a] += v;
                acc.sum_sq[d * d + a] += v * v;
            }
        }
        acc
    });
    let mut sum = vec![0.0; cells];
    let mut sum_sq = vec![0.0; cells];
    for blk in sums {
        for j in 0..cells {
            sum[j] += blk.sum[j];
            sum_sq[j] += blk.sum_sq[j];
        }
    }
    let n = est.n as f64;
    let mean = |j: usize| sum[j] / n;
    let se = |j: usize| {
        let m = mean(j);
        let var = (sum_sq[j] / n - m * m).max(0.0) * n / (n - 1.0);
        (var / n).sqrt()
    };
    let r = (0..d).map(|a| (0..d).map(|bb| mean(a * d + bb)).collect()).collect();
    let r_se = (0..d).map(|a| (0..d).map(|bb| se(a * d + bb)).collect()).collect();
    let b = (0..d).map(|a| mean(d * d + a)).collect();
    let b_se = (0..d).map(|a| se(d * d + a)).collect();
    ChainMoments { r, r_se, b, b_se }
}

// ---------------------------------------------------------------------------
// Flow integration
// ---------------------------------------------------------------------------

/// Euler trajectory of `θ̇ = f̄(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrace {
    pub times: Vec<f64>,
    pub thetas: Vec<Vec<f64>>,
    /// `‖θ_t − θ_ref‖₂` alongside each recorded state.
    pub dist_to_ref: Vec<f64>,
    /// Set when the state left the guard region or stopped being finite;
    /// the trace then ends at the last good state.
    pub diverged: bool,
}

/// Integrate the mean flow from `theta0` with Euler steps of size `dt`
/// up to `t_end`, recording the distance to `theta_ref` along the way.
pub fn integrate_flow(
    est: &FlowEstimator,
    theta0: &[f64],
    dt: f64,
    t_end: f64,
    theta_ref: &[f64],
) -> Result<FlowTrace> {
    let d = est.feature_dim();
    if theta0.len() != d || theta_ref.len() != d {
        return Err(Error::InvalidConfig(format!(
            "flow integration needs {d}-dimensional start and reference points"
        )));
    }
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::InvalidConfig(format!(
            "Euler step must lie in (0, 0.1], got {dt}"
        )));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "integration horizon must be positive and finite, got {t_end}"
        )));
    }

    let n_steps = (t_end / dt).ceil() as usize;
    let mut theta: Vec<f64> = theta0.to_vec();
    let mut trace = FlowTrace {
        times: Vec::with_capacity(n_steps + 1),
        thetas: Vec::with_capacity(n_steps + 1),
        dist_to_ref: Vec::with_capacity(n_steps + 1),
        diverged: false,
    };
    let record = |trace: &mut FlowTrace, t: f64, theta: &[f64]| {
        let dist =
            theta.iter().zip(theta_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        trace.times.push(t);
        trace.thetas.push(theta.to_vec());
        trace.dist_to_ref.push(dist);
    };
    record(&mut trace, 0.0, &theta);
    for k in 1..=n_steps {
        let (f, _) = est.estimate_barf(&theta);
        for (t, df) in theta.iter_mut().zip(&f) {
            *t += dt * df;
        }
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_GUARD {
            trace.diverged = true;
            break;
        }
        record(&mut trace, k as f64 * dt, &theta);
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Exact contraction checks on finite chains
// ---------------------------------------------------------------------------

/// A fully specified finite ergodic chain with features and a kill set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    /// Row-stochastic transition matrix, at most 50 states.
    pub p: Vec<Vec<f64>>,
    /// Stationary distribution of `p`.
    pub pi: Vec<f64>,
    /// Feature rows, one per state.
    pub psi: Vec<Vec<f64>>,
    /// Kill-set membership per state.
    pub delta: Vec<bool>,
}

const ROW_TOL: f64 = 1e-12;
const PI_TOL: f64 = 1e-10;
const EIG_TOL: f64 = 1e-10;

impl FiniteInstance {
    pub fn new(
        p: Vec<Vec<f64>>,
        pi: Vec<f64>,
        psi: Vec<Vec<f64>>,
        delta: Vec<bool>,
    ) -> Result<Self> {
        let n = p.len();
        if n == 0 || n > 50 {
            return Err(Error::InvalidConfig(format!(
                "finite instance needs 1 to 50 states, got {n}"
            )));
        }
        if pi.len() != n || psi.len() != n || delta.len() != n {
            return Err(Error::InvalidConfig(
                "stationary vector, features, and kill set must have one entry per state".into(),
            ));
        }
        let d = psi[0].len();
        if d == 0 || psi.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidConfig(
                "feature rows must share one positive dimension".into(),
            ));
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidConfig(format!("transition row {i} has wrong length")));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidConfig(format!(
                    "transition row {i} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_TOL {
                return Err(Error::InvalidConfig(format!(
                    "transition row {i} sums to {sum}, not 1"
                )));
            }
        }
        if pi.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidConfig("stationary entries must lie in [0, 1]".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > PI_TOL {
            return Err(Error::InvalidConfig(format!("stationary vector sums to {total}, not 1")));
        }
        for j in 0..n {
            let image: f64 = (0..n).map(|i| pi[i] * p[i][j]).sum();
            if (image - pi[j]).abs() > PI_TOL {
                return Err(Error::InvalidConfig(format!(
                    "vector is not stationary: coordinate {j} maps to {image}, expected {}",
                    pi[j]
                )));
            }
        }
        Ok(FiniteInstance { p, pi, psi, delta })
    }

    /// Build the instance solving for the stationary distribution of `p`.
    pub fn with_stationary(
        p: Vec<Vec<f64>>,
        psi: Vec<Vec<f64>>,
        delta: Vec<bool>,
    ) -> Result<Self> {
        let n = p.len();
        if n == 0 || n > 50 {
            return Err(Error::InvalidConfig(format!(
                "finite instance needs 1 to 50 states, got {n}"
            )));
        }
        // πP = π with Σπ = 1: replace the last balance equation by the
        // normalization to pin the scale.
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                a[(j, i)] = p[i][j] - f64::from(u8::from(i == j));
            }
        }
        for i in 0..n {
            a[(n - 1, i)] = 1.0;
        }
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = 1.0;
        let pi = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| {
                Error::InvalidConfig("chain has no unique stationary distribution".into())
            })?
            .iter()
            .map(|&v| v.max(0.0))
            .collect::<Vec<f64>>();
        let total: f64 = pi.iter().sum();
        let pi = pi.into_iter().map(|v| v / total).collect();
        Self::new(p, pi, psi, delta)
    }

    pub fn n_states(&self) -> usize {
        self.p.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.psi[0].len()
    }
}

/// Result of the exact contraction analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    /// Tight constant `ϱ` with `‖P_Δ g‖²_π ≤ ϱ ‖g‖²_π` over the span.
    pub rho_hat: f64,
    pub feature_dim: usize,
    /// Rank of the feature covariance `R`.
    pub rank_r: usize,
    /// Rank of the noise term `Σ_{k+1|k} + M^Δ`.
    pub rank_noise: usize,
}

/// Exact contraction constant of the killed transition operator on the
/// feature span: the largest generalized eigenvalue of
/// `R − Σ_{k+1|k} − M^Δ` against `R = Ψᵀ diag(π) Ψ`.
pub fn contraction_check(inst: &FiniteInstance) -> Result<ContractionReport> {
    let n = inst.n_states();
    let d = inst.feature_dim();
    let psi = DMatrix::from_fn(n, d, |i, j| inst.psi[i][j]);
    // Killed features: zero at states inside Δ.
    let psi_kill = DMatrix::from_fn(n, d, |i, j| if inst.delta[i] { 0.0 } else { inst.psi[i][j] });
    let p = DMatrix::from_fn(n, n, |i, j| inst.p[i][j]);

    let weighted = |m: &DMatrix<f64>, w: &[f64]| -> DMatrix<f64> {
        let mut scaled = m.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            row *= w[i];
        }
        m.transpose() * scaled
    };

    let r = weighted(&psi, &inst.pi);
    // Second moment of the killed next feature, and its conditional mean.
    let r_kill = weighted(&psi_kill, &inst.pi);
    let m_delta = &r - &r_kill;
    let pm = &p * &psi_kill;
    let n_mat = weighted(&pm, &inst.pi);
    // Conditional covariance of the killed next feature given the state.
    let mut row_second = DMatrix::zeros(d, d);
    for x in 0..n {
        for y in 0..n {
            if inst.p[x][y] == 0.0 || inst.delta[y] {
                continue;
            }
            let f = inst.psi[y].as_slice();
            let w = inst.pi[x] * inst.p[x][y];
            for a in 0..d {
                for b in 0..d {
                    row_second[(a, b)] += w * f[a] * f[b];
                }
            }
        }
    }
    let sigma = &row_second - &n_mat;

    let chol = r.clone().cholesky().ok_or_else(|| null_space_error(&r))?;
    let l_inv = chol.l().try_inverse().ok_or_else(|| null_space_error(&r))?;
    // The printed form R − Σ − M^Δ equals E_π[(P_Δψ)(P_Δψ)ᵀ] exactly.
    let printed = &r - &sigma - &m_delta;
    let mut b_mat = &l_inv * printed * l_inv.transpose();
    // Symmetrize away the subtraction round-off before the eigensolve.
    b_mat = (&b_mat + b_mat.transpose()) * 0.5;
    let eig = b_mat.symmetric_eigen();
    let rho_hat = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)).max(0.0);

    Ok(ContractionReport {
        rho_hat,
        feature_dim: d,
        rank_r: sym_rank(&r),
        rank_noise: sym_rank(&(&sigma + &m_delta)),
    })
}

fn sym_rank(m: &DMatrix<f64>) -> usize {
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    eig.eigenvalues.iter().filter(|&&v| v.abs() > EIG_TOL * scale).count()
}

fn null_space_error(r: &DMatrix<f64>) -> Error {
    let eig = r.clone().symmetric_eigen();
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1.0);
    let mut basis = Vec::new();
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v.abs() <= EIG_TOL * scale {
            basis.push(eig.eigenvectors.column(i).iter().copied().collect());
        }
    }
    Error::SingularCovariance { null_space: basis }
}
