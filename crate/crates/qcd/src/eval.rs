//! Monte-Carlo benchmarking of detection rules.
//!
//! Everything here scores a stopping rule by simulating whole paths: the
//! delay `(tau_s - tau_a)_+`, the eagerness `(tau_s - tau_a)_-`, and the
//! cost `J = MDD + kappa * MDE`. Threshold rules are swept over an entire
//! grid in one pass per path: the first crossing of a level equals the
//! first crossing by the running maximum, which is monotone, so a table
//! over 10^3 thresholds costs the same simulation work as a single rule.
//!
//! Path `i` always draws from substream `i` of the master seed, and
//! per-path statistics are reduced in fixed blocks combined in index
//! order. Estimates are therefore bit-reproducible regardless of worker
//! count, and two evaluators given the same seed see identical paths: a
//! threshold rule scored by [`eval_policy`] reproduces the matching
//! [`threshold_sweep`] table entry to the last bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::RbfBasis;
use crate::error::{Error, Result};
use crate::model::{PathSim, QcdModel};
use crate::numerics::blocked;
use crate::qlearn::{
    greedy, threshold_of, train, QFunction, ScanGrid, ThresholdForm, TrainConfig,
};
use crate::rng::{child_seed, substream};
use crate::sis::{drift_eval, sis_reset, sis_step_in_place, DriftFn, SisSpec};

/// Per-path step budget. A rule that has not stopped by this time
/// contributes `tau_s` equal to the cap and is counted separately.
pub const PATH_STEP_CAP: u64 = 1_000_000;

/// Paths per reduction block. Shared by every evaluator so that equal
/// seeds give bitwise-equal sums.
const PATH_BLOCK: u64 = 1 << 12;

fn mean_se(sum: f64, sum_sq: f64, n: u64) -> (f64, f64) {
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
    (mean, (var / nf).sqrt())
}

fn check_n_paths(n_paths: u64) -> Result<()> {
    if n_paths < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 paths for standard errors, got {n_paths}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Threshold tables
// ---------------------------------------------------------------------------

/// MDE/MDD estimates over a grid of thresholds, all from the same paths.
///
/// Because every grid point is scored on common paths, `mde` is exactly
/// non-increasing and `mdd` exactly non-decreasing along the grid, not
/// just up to noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub grid: Vec<f64>,
    pub mde: Vec<f64>,
    pub mdd: Vec<f64>,
    pub se_mde: Vec<f64>,
    pub se_mdd: Vec<f64>,
    pub n_paths: u64,
    pub seed: u64,
    /// Paths that hit the step cap before crossing the largest threshold.
    pub capped: u64,
}

/// `n` evenly spaced thresholds on `(0, h_max]`.
pub fn uniform_grid(h_max: f64, n: usize) -> Result<Vec<f64>> {
    if !(h_max > 0.0 && h_max.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "grid upper end must be positive and finite, got {h_max}"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("grid needs at least one point".into()));
    }
    Ok((1..=n).map(|t| h_max * t as f64 / n as f64).collect())
}

/// `n` evenly spaced points in the open interval `(0, 1)`.
pub fn open_unit_grid(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("grid needs at least one point".into()));
    }
    Ok((1..=n).map(|t| t as f64 / (n + 1) as f64).collect())
}

fn check_grid(grid: &[f64], lo: f64, hi: f64) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("threshold grid is empty".into()));
    }
    for &h in grid {
        if !(h >= lo && h <= hi) || h.is_nan() {
            return Err(Error::InvalidConfig(format!(
                "threshold {h} outside [{lo}, {hi}]"
            )));
        }
    }
    for w in grid.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::InvalidConfig(format!(
                "grid must be strictly increasing, got {} then {}",
                w[0], w[1]
            )));
        }
    }
    Ok(())
}

struct SweepBlock {
    mde: Vec<f64>,
    mdd: Vec<f64>,
    mde_sq: Vec<f64>,
    mdd_sq: Vec<f64>,
    capped: u64,
}

impl SweepBlock {
    fn zeros(g: usize) -> Self {
        SweepBlock {
            mde: vec![0.0; g],
            mdd: vec![0.0; g],
            mde_sq: vec![0.0; g],
            mdd_sq: vec![0.0; g],
            capped: 0,
        }
    }

    fn absorb(&mut self, other: &SweepBlock) {
        for g in 0..self.mde.len() {
            self.mde[g] += other.mde[g];
            self.mdd[g] += other.mdd[g];
            self.mde_sq[g] += other.mde_sq[g];
            self.mdd_sq[g] += other.mdd_sq[g];
        }
        self.capped += other.capped;
    }
}

/// Sweep a scalar detection statistic over a threshold grid. The
/// statistic starts at zero on every path; `advance` consumes one
/// observation and returns the new value.
fn sweep_scalar_stat<St, New, Adv>(
    model: &QcdModel,
    new_stat: New,
    advance: Adv,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<ThresholdTable>
where
    New: Fn() -> St + Sync,
    Adv: Fn(&mut St, f64) -> Result<f64> + Sync,
{
    check_n_paths(n_paths)?;
    let g_n = grid.len();
    let blocks = blocked(n_paths, PATH_BLOCK, |range| -> Result<SweepBlock> {
        let mut acc = SweepBlock::zeros(g_n);
        let mut tau = vec![0u64; g_n];
        for i in range {
            let mut rng = substream(seed, i);
            let mut path = PathSim::new(model, &mut rng);
            let tau_a = path.change_time();
            let mut stat = new_stat();
            let mut ptr = 0;
            while ptr < g_n && grid[ptr] <= 0.0 {
                tau[ptr] = 0;
                ptr += 1;
            }
            let mut n = 0u64;
            while ptr < g_n && n < PATH_STEP_CAP {
                n += 1;
                let y = path.step(&mut rng).y;
                let v = advance(&mut stat, y)?;
                while ptr < g_n && grid[ptr] <= v {
                    tau[ptr] = n;
                    ptr += 1;
                }
            }
            if ptr < g_n {
                acc.capped += 1;
                for t in &mut tau[ptr..] {
                    *t = PATH_STEP_CAP;
                }
            }
            for g in 0..g_n {
                let d = tau[g].saturating_sub(tau_a) as f64;
                let e = tau_a.saturating_sub(tau[g]) as f64;
                acc.mdd[g] += d;
                acc.mdd_sq[g] += d * d;
                acc.mde[g] += e;
                acc.mde_sq[g] += e * e;
            }
        }
        Ok(acc)
    });

    let mut total = SweepBlock::zeros(g_n);
    for block in blocks {
        total.absorb(&block?);
    }
    let mut table = ThresholdTable {
        grid: grid.to_vec(),
        mde: Vec::with_capacity(g_n),
        mdd: Vec::with_capacity(g_n),
        se_mde: Vec::with_capacity(g_n),
        se_mdd: Vec::with_capacity(g_n),
        n_paths,
        seed,
        capped: total.capped,
    };
    for g in 0..g_n {
        let (mde, se_mde) = mean_se(total.mde[g], total.mde_sq[g], n_paths);
        let (mdd, se_mdd) = mean_se(total.mdd[g], total.mdd_sq[g], n_paths);
        table.mde.push(mde);
        table.se_mde.push(se_mde);
        table.mdd.push(mdd);
        table.se_mdd.push(se_mdd);
    }
    Ok(table)
}

/// Tabulate MDE and MDD of the threshold rules `1{S_n >= h}` for every
/// `h` in `grid`, driving a one-dimensional statistic over `n_paths`
/// simulated paths.
pub fn threshold_sweep(
    model: &QcdModel,
    spec: &SisSpec,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<ThresholdTable> {
    if spec.dim() != 1 {
        return Err(Error::InvalidConfig(format!(
            "threshold sweep needs a one-dimensional statistic, got {}",
            spec.dim()
        )));
    }
    check_grid(grid, 0.0, f64::INFINITY)?;
    sweep_scalar_stat(
        model,
        || sis_reset(spec),
        |state, y| {
            sis_step_in_place(spec, state, y)?;
            Ok(state.s[0])
        },
        grid,
        n_paths,
        seed,
    )
}

/// Grid minimizer of `kappa * MDE(h) + MDD(h)`; ties go to the smaller
/// threshold. Returns `(h_star, j_star)` with `j_star` read straight
/// from the table.
pub fn cusum_star(table: &ThresholdTable, kappa: f64) -> (f64, f64) {
    let mut best = 0;
    let mut best_j = kappa * table.mde[0] + table.mdd[0];
    for g in 1..table.grid.len() {
        let j = kappa * table.mde[g] + table.mdd[g];
        if j < best_j {
            best = g;
            best_j = j;
        }
    }
    (table.grid[best], best_j)
}

// ---------------------------------------------------------------------------
// Shiryaev's test
// ---------------------------------------------------------------------------

/// One update of the change-point posterior under a geometric prior with
/// parameter `rho`, written in likelihood-ratio form so neither density
/// is needed on its own:
///
/// `p' = N / (N + (1 - p)(1 - rho))`, `N = (p + (1 - p) rho) exp(llr)`.
///
/// The output is clamped to 1 when the ratio overflows; it lies in
/// `[0, 1]` for every finite `llr`.
pub fn shiryaev_posterior(p: f64, rho: f64, llr: f64) -> f64 {
    let num = (p + (1.0 - p) * rho) * llr.exp();
    if num.is_infinite() {
        return 1.0;
    }
    let den = (1.0 - p) * (1.0 - rho);
    num / (num + den)
}

/// Threshold sweep of Shiryaev's test: the posterior `p_k` that a change
/// has occurred, run against thresholds in `(0, 1]`. The model's own
/// geometric parameter drives the recursion.
///
/// The recursion is exact only under a geometric change law; any other
/// law is rejected. To run the geometric-prior detector on a model whose
/// true change law differs (a deliberately misspecified baseline), pick
/// the recursion parameter explicitly via [`shiryaev_eval_with_rho`].
pub fn shiryaev_eval(
    model: &QcdModel,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<ThresholdTable> {
    match model.change {
        crate::model::ChangeTimeLaw::Geometric { p } => {
            shiryaev_eval_with_rho(model, p, grid, n_paths, seed)
        }
        _ => Err(Error::ShiryaevRequiresGeometric),
    }
}

/// [`shiryaev_eval`] with the recursion's geometric parameter supplied by
/// the caller instead of read off the model.
pub fn shiryaev_eval_with_rho(
    model: &QcdModel,
    rho: f64,
    grid: &[f64],
    n_paths: u64,
    seed: u64,
) -> Result<ThresholdTable> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "shiryaev recursion parameter must lie in (0, 1], got {rho}"
        )));
    }
    if !model.pre.is_iid() || !model.post.is_iid() {
        return Err(Error::InvalidConfig(
            "shiryaev evaluation needs closed-form observation densities; \
             autoregressive laws are not supported"
                .into(),
        ));
    }
    check_grid(grid, 0.0, 1.0)?;
    let drift = DriftFn::iid_llr(model.pre.clone(), model.post.clone(), 0.0)?;
    sweep_scalar_stat(
        model,
        || 0.0f64,
        |p, y| {
            let llr = drift_eval(&drift, None, y)?;
            *p = shiryaev_posterior(*p, rho, llr);
            Ok(*p)
        },
        grid,
        n_paths,
        seed,
    )
}

// ---------------------------------------------------------------------------
// Policy evaluation
// ---------------------------------------------------------------------------

/// A stopping rule applied to the running statistic.
pub enum StopRule<'a> {
    /// Stop when the first component reaches `h` (one-dimensional).
    Threshold(f64),
    /// Stop when either component reaches its own level (two-dimensional).
    Box { h1: f64, h2: f64 },
    /// Stop where the greedy action of a learned Q-function is to stop.
    Greedy(&'a QFunction),
}

impl StopRule<'_> {
    fn validate(&self, spec: &SisSpec) -> Result<()> {
        let need = |d: usize| -> Result<()> {
            if spec.dim() == d {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!(
                    "stop rule expects a {d}-dimensional statistic, got {}",
                    spec.dim()
                )))
            }
        };
        match self {
            StopRule::Threshold(h) => {
                if h.is_nan() {
                    return Err(Error::InvalidConfig("threshold is NaN".into()));
                }
                need(1)
            }
            StopRule::Box { h1, h2 } => {
                if h1.is_nan() || h2.is_nan() {
                    return Err(Error::InvalidConfig("box level is NaN".into()));
                }
                need(2)
            }
            StopRule::Greedy(qf) => need(qf.basis.dim()),
        }
    }

    fn stops(&self, s: &[f64]) -> bool {
        match self {
            StopRule::Threshold(h) => s[0] >= *h,
            StopRule::Box { h1, h2 } => s[0] >= *h1 || s[1] >= *h2,
            StopRule::Greedy(qf) => greedy(qf, s) == 1,
        }
    }
}

/// Monte-Carlo scores of one stopping rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mdd: f64,
    pub se_mdd: f64,
    pub mde: f64,
    pub se_mde: f64,
    /// `mdd + kappa * mde`, by that identity rather than re-estimated.
    pub j: f64,
    pub se_j: f64,
    /// Probability of a strict false alarm, `P{tau_s < tau_a}`.
    pub p_fa: f64,
    pub se_p_fa: f64,
    pub kappa: f64,
    pub n_paths: u64,
    pub seed: u64,
    pub capped: u64,
}

#[derive(Default)]
struct EvalBlock {
    d: f64,
    d_sq: f64,
    e: f64,
    e_sq: f64,
    j: f64,
    j_sq: f64,
    fa: f64,
    capped: u64,
}

/// Score a stopping rule on `n_paths` fresh paths.
///
/// Paths that outlive [`PATH_STEP_CAP`] contribute `tau_s` equal to the
/// cap; if more than 1% of them do, the rule is deemed non-stopping and
/// an error is returned instead of a report.
pub fn eval_policy(
    model: &QcdModel,
    spec: &SisSpec,
    rule: &StopRule,
    kappa: f64,
    n_paths: u64,
    seed: u64,
) -> Result<EvalReport> {
    rule.validate(spec)?;
    check_n_paths(n_paths)?;
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "kappa must be finite and non-negative, got {kappa}"
        )));
    }
    let blocks = blocked(n_paths, PATH_BLOCK, |range| -> Result<EvalBlock> {
        let mut acc = EvalBlock::default();
        for i in range {
            let mut rng = substream(seed, i);
            let mut path = PathSim::new(model, &mut rng);
            let tau_a = path.change_time();
            let mut state = sis_reset(spec);
            let mut tau_s = if rule.stops(&state.s) { Some(0u64) } else { None };
            let mut n = 0u64;
            while tau_s.is_none() && n < PATH_STEP_CAP {
                n += 1;
                let y = path.step(&mut rng).y;
                sis_step_in_place(spec, &mut state, y)?;
                if rule.stops(&state.s) {
                    tau_s = Some(n);
                }
            }
            let tau_s = tau_s.unwrap_or_else(|| {
                acc.capped += 1;
                PATH_STEP_CAP
            });
            let d = tau_s.saturating_sub(tau_a) as f64;
            let e = tau_a.saturating_sub(tau_s) as f64;
            let j = d + kappa * e;
            acc.d += d;
            acc.d_sq += d * d;
            acc.e += e;
            acc.e_sq += e * e;
            acc.j += j;
            acc.j_sq += j * j;
            if tau_s < tau_a {
                acc.fa += 1.0;
            }
        }
        Ok(acc)
    });

    let mut total = EvalBlock::default();
    for block in blocks {
        let b = block?;
        total.d += b.d;
        total.d_sq += b.d_sq;
        total.e += b.e;
        total.e_sq += b.e_sq;
        total.j += b.j;
        total.j_sq += b.j_sq;
        total.fa += b.fa;
        total.capped += b.capped;
    }
    let cap_fraction = total.capped as f64 / n_paths as f64;
    if cap_fraction > 0.01 {
        return Err(Error::PolicyFailsToStop { cap_fraction });
    }
    let (mdd, se_mdd) = mean_se(total.d, total.d_sq, n_paths);
    let (mde, se_mde) = mean_se(total.e, total.e_sq, n_paths);
    let (_, se_j) = mean_se(total.j, total.j_sq, n_paths);
    // an indicator squares to itself
    let (p_fa, se_p_fa) = mean_se(total.fa, total.fa, n_paths);
    Ok(EvalReport {
        mdd,
        se_mdd,
        mde,
        se_mde,
        j: mdd + kappa * mde,
        se_j,
        p_fa,
        se_p_fa,
        kappa,
        n_paths,
        seed,
        capped: total.capped,
    })
}

// ---------------------------------------------------------------------------
// Batch means
// ---------------------------------------------------------------------------

/// One successful training run inside a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRun {
    pub index: u32,
    /// The run's estimate: the averaged weights when averaging is on.
    pub theta: Vec<f64>,
    #[serde(rename = "S")]
    pub sample_count: u64,
}

/// A failed run, kept for the record rather than aborting the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFailure {
    pub index: u32,
    pub message: String,
}

/// Spread of independently trained weights, scaled for the asymptotic
/// covariance: `Z^i = sqrt(S^i) (theta^i - theta_bar)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeansReport {
    pub m: u32,
    pub runs: Vec<BatchRun>,
    pub failures: Vec<BatchFailure>,
    pub theta_bar: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// `(1/M) sum Z Z^T` over successful runs; `None` when fewer than
    /// `max(2, M/2)` runs survive. Symmetric positive semidefinite by
    /// construction.
    pub sigma: Option<Vec<Vec<f64>>>,
    /// Induced stopping threshold of each successful run, when its
    /// greedy policy has threshold form on a one-dimensional statistic.
    pub thresholds: Vec<Option<f64>>,
}

/// Train `m` independent instances with seeds derived from `master_seed`
/// and assemble the scaled spread of their estimates.
pub fn batch_means(
    model: &QcdModel,
    spec: &SisSpec,
    basis: &RbfBasis,
    config: &TrainConfig,
    m: u32,
    master_seed: u64,
) -> Result<BatchMeansReport> {
    let seeds: Vec<u64> = (0..u64::from(m)).map(|i| child_seed(master_seed, i)).collect();
    batch_means_with_seeds(model, spec, basis, config, &seeds)
}

/// [`batch_means`] with explicit per-run seeds. Runs execute in
/// parallel; each is internally sequential and fully determined by its
/// own seed.
pub fn batch_means_with_seeds(
    model: &QcdModel,
    spec: &SisSpec,
    basis: &RbfBasis,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<BatchMeansReport> {
    let m = seeds.len();
    if m < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch means needs at least 2 runs, got {m}"
        )));
    }
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            train(model, spec, basis, &cfg)
        })
        .collect();

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => {
                let theta = r.theta_pr.unwrap_or(r.theta_final);
                runs.push(BatchRun {
                    index: i as u32,
                    theta,
                    sample_count: r.sample_count,
                });
            }
            Err(e) => failures.push(BatchFailure { index: i as u32, message: e.to_string() }),
        }
    }

    let d = basis.feature_dim();
    let n_ok = runs.len();
    let mut theta_bar = vec![0.0; if n_ok > 0 { d } else { 0 }];
    for run in &runs {
        for (b, t) in theta_bar.iter_mut().zip(&run.theta) {
            *b += t;
        }
    }
    for b in &mut theta_bar {
        *b /= n_ok as f64;
    }

    let z: Vec<Vec<f64>> = runs
        .iter()
        .map(|run| {
            let w = (run.sample_count as f64).sqrt();
            run.theta.iter().zip(&theta_bar).map(|(t, b)| w * (t - b)).collect()
        })
        .collect();

    let sigma = if n_ok as f64 >= (m as f64 / 2.0).max(2.0) {
        let mut sig = vec![vec![0.0; d]; d];
        for zi in &z {
            for a in 0..d {
                for b in a..d {
                    sig[a][b] += zi[a] * zi[b];
                }
            }
        }
        for a in 0..d {
            for b in a..d {
                sig[a][b] /= n_ok as f64;
                sig[b][a] = sig[a][b];
            }
        }
        Some(sig)
    } else {
        None
    };

    let thresholds = runs
        .iter()
        .map(|run| {
            if basis.dim() != 1 {
                return None;
            }
            let qf = QFunction::new(basis.clone(), run.theta.clone()).expect("matching basis");
            match threshold_of(&qf, ScanGrid::for_eta(config.eta)) {
                ThresholdForm::Threshold(h) => Some(h),
                ThresholdForm::NotThreshold { .. } => None,
            }
        })
        .collect();

    Ok(BatchMeansReport {
        m: m as u32,
        runs,
        failures,
        theta_bar,
        z,
        sigma,
        thresholds,
    })
}

// ---------------------------------------------------------------------------
// Decision regions
// ---------------------------------------------------------------------------

/// One grid point of a two-dimensional policy map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionPoint {
    pub s1: f64,
    pub s2: f64,
    /// Greedy action of the Q-function at `(s1, s2)`; 1 stops.
    pub policy: u8,
    /// The box rule `1{s1 >= h1 or s2 >= h2}`.
    pub box_rule: u8,
}

/// Evaluate the greedy policy and a box rule over the product grid
/// `grid1 x grid2`, in row-major order (`grid1` outer, `grid2` inner).
pub fn decision_region(
    qf: &QFunction,
    grid1: &[f64],
    grid2: &[f64],
    h_box: (f64, f64),
) -> Result<Vec<RegionPoint>> {
    if qf.basis.dim() != 2 {
        return Err(Error::InvalidConfig(format!(
            "decision region needs a two-dimensional basis, got {}",
            qf.basis.dim()
        )));
    }
    if grid1.is_empty() || grid2.is_empty() {
        return Err(Error::InvalidConfig("region grid is empty".into()));
    }
    let mut out = Vec::with_capacity(grid1.len() * grid2.len());
    for &s1 in grid1 {
        for &s2 in grid2 {
            let s = [s1, s2];
            out.push(RegionPoint {
                s1,
                s2,
                policy: greedy(qf, &s),
                box_rule: u8::from(s1 >= h_box.0 || s2 >= h_box.1),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// Equal-width histogram: `counts[i]` covers `[edges[i], edges[i+1])`,
/// with the last bin closed on the right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Bin samples with the Freedman-Diaconis width `2 IQR / n^(1/3)`,
/// falling back to `sqrt(n)` bins when the interquartile range is zero.
pub fn histogram(samples: &[f64]) -> Result<Histogram> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("histogram needs at least one sample".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("histogram samples must be finite".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = sorted.len();
    let (min, max) = (sorted[0], sorted[n - 1]);
    if min == max {
        return Ok(Histogram { edges: vec![min - 0.5, min + 0.5], counts: vec![n as u64] });
    }
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let width = 2.0 * iqr / (n as f64).cbrt();
    let n_bins = if width > 0.0 {
        ((max - min) / width).ceil() as usize
    } else {
        (n as f64).sqrt().ceil() as usize
    }
    .clamp(1, 10_000);

    let edges: Vec<f64> =
        (0..=n_bins).map(|i| min + (max - min) * i as f64 / n_bins as f64).collect();
    let mut counts = vec![0u64; n_bins];
    for &x in samples {
        let idx = ((x - min) / (max - min) * n_bins as f64) as usize;
        counts[idx.min(n_bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    use super::*;
    use crate::model::{ChangeTimeLaw, ObservationLaw};
    use crate::sis::StatKind;

    fn gaussian(mu: f64) -> ObservationLaw {
        ObservationLaw::Gaussian { mu, sigma: 1.0 }
    }

    fn model_1a(kappa: f64) -> QcdModel {
        QcdModel::new(
            gaussian(0.0),
            gaussian(0.5),
            ChangeTimeLaw::Geometric { p: 0.02 },
            kappa,
        )
        .unwrap()
    }

    fn cusum_spec(shift: f64) -> SisSpec {
        SisSpec::single(
            StatKind::Cusum,
            DriftFn::iid_llr(gaussian(0.0), gaussian(0.5), shift).unwrap(),
        )
        .unwrap()
    }

    fn basis_1d() -> RbfBasis {
        RbfBasis::new(vec![vec![0.0], vec![2.0]], 0.5).unwrap()
    }

    fn quick_train_config(n_regens: u64) -> TrainConfig {
        TrainConfig {
            n_regens,
            zap: crate::qlearn::ZapConfig { enabled: false, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn zero_threshold_stops_immediately() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let table = threshold_sweep(&model, &spec, &[0.0, 1.0], 20_000, 3).unwrap();
        assert_eq!(table.mdd[0], 0.0);
        assert_eq!(table.se_mdd[0], 0.0);
        // E[tau_a] = (1 - p)/p = 49 for p = 0.02.
        assert!(
            (table.mde[0] - 49.0).abs() < 4.0 * table.se_mde[0],
            "mde = {} +- {}",
            table.mde[0],
            table.se_mde[0]
        );
        assert_eq!(table.capped, 0);
    }

    #[test]
    fn detection_delay_matches_the_asymptotic_slope() {
        // With post-change drift mean m1 = 0.125 + 0.02 the leading-order
        // delay at level h is h/m1, about 55.2 at h = 8.
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let grid = uniform_grid(10.0, 500).unwrap();
        let table = threshold_sweep(&model, &spec, &grid, 100_000, 11).unwrap();
        let idx = 399;
        assert_eq!(table.grid[idx], 8.0);
        let expected = 8.0 / 0.145;
        let got = table.mdd[idx];
        assert!(
            (got - expected).abs() < 0.15 * expected,
            "mdd(8) = {got}, expected about {expected}"
        );
    }

    #[test]
    fn common_paths_make_the_table_exactly_monotone() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let grid = uniform_grid(5.0, 50).unwrap();
        let table = threshold_sweep(&model, &spec, &grid, 10_000, 7).unwrap();
        for g in 1..grid.len() {
            assert!(table.mde[g] <= table.mde[g - 1], "mde rose at {g}");
            assert!(table.mdd[g] >= table.mdd[g - 1], "mdd fell at {g}");
        }
    }

    #[test]
    fn unreachable_threshold_caps_the_paths() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let table = threshold_sweep(&model, &spec, &[0.5, 1e9], 16, 19).unwrap();
        assert_eq!(table.capped, 16);
        assert!(table.mdd[1] > 9e5, "capped mdd = {}", table.mdd[1]);
    }

    #[test]
    fn star_extraction_minimizes_and_breaks_ties_low() {
        let table = ThresholdTable {
            grid: vec![1.0, 2.0, 3.0],
            mde: vec![2.0, 1.0, 1.0],
            mdd: vec![0.0, 1.0, 1.0],
            se_mde: vec![0.0; 3],
            se_mdd: vec![0.0; 3],
            n_paths: 2,
            seed: 0,
            capped: 0,
        };
        // kappa = 1: J = [2, 2, 2], a three-way tie -> smallest h.
        assert_eq!(cusum_star(&table, 1.0), (1.0, 2.0));
        // kappa = 0 minimizes MDD alone.
        assert_eq!(cusum_star(&table, 0.0), (1.0, 0.0));
        // Large kappa favors the late thresholds; the tie at h = 2, 3
        // again resolves low.
        let (h, j) = cusum_star(&table, 10.0);
        assert_eq!(h, 2.0);
        assert_eq!(j, 10.0 * 1.0 + 1.0);
    }

    #[test]
    fn star_threshold_grows_with_kappa() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let grid = uniform_grid(6.0, 60).unwrap();
        let table = threshold_sweep(&model, &spec, &grid, 5_000, 23).unwrap();
        let (h2, _) = cusum_star(&table, 2.0);
        let (h27, _) = cusum_star(&table, 27.0);
        let (h100, _) = cusum_star(&table, 100.0);
        assert!(h2 <= h27 && h27 <= h100, "h* = {h2}, {h27}, {h100}");
    }

    #[test]
    fn threshold_rule_reproduces_the_sweep_bitwise() {
        let model = model_1a(27.0);
        let spec = cusum_spec(0.02);
        let grid = uniform_grid(6.0, 40).unwrap();
        let n_paths = 4_000;
        let seed = 5;
        let table = threshold_sweep(&model, &spec, &grid, n_paths, seed).unwrap();
        let idx = 25;
        let report = eval_policy(
            &model,
            &spec,
            &StopRule::Threshold(grid[idx]),
            27.0,
            n_paths,
            seed,
        )
        .unwrap();
        assert_eq!(report.mdd, table.mdd[idx]);
        assert_eq!(report.mde, table.mde[idx]);
        assert_eq!(report.se_mdd, table.se_mdd[idx]);
        assert_eq!(report.se_mde, table.se_mde[idx]);
        assert_eq!(report.j, report.mdd + 27.0 * report.mde);
    }

    #[test]
    fn always_stopping_pays_kappa_times_the_prior_mean() {
        let model = model_1a(3.0);
        let spec = cusum_spec(0.02);
        let report =
            eval_policy(&model, &spec, &StopRule::Threshold(0.0), 3.0, 20_000, 13).unwrap();
        assert_eq!(report.mdd, 0.0);
        assert_eq!(report.j, 3.0 * report.mde);
        assert!((report.mde - 49.0).abs() < 4.0 * report.se_mde);
        // tau_s = 0 < tau_a unless the change arrived at time zero.
        assert!((report.p_fa - 0.98).abs() < 4.0 * report.se_p_fa);
    }

    #[test]
    fn zero_weights_act_like_a_zero_threshold() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let qf = QFunction::zero(basis_1d());
        let greedy_report =
            eval_policy(&model, &spec, &StopRule::Greedy(&qf), 2.0, 5_000, 29).unwrap();
        let threshold_report =
            eval_policy(&model, &spec, &StopRule::Threshold(0.0), 2.0, 5_000, 29).unwrap();
        assert_eq!(greedy_report, threshold_report);
    }

    #[test]
    fn a_rule_that_never_stops_is_an_error() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let err = eval_policy(
            &model,
            &spec,
            &StopRule::Threshold(f64::INFINITY),
            2.0,
            16,
            31,
        )
        .unwrap_err();
        match err {
            Error::PolicyFailsToStop { cap_fraction } => assert_eq!(cap_fraction, 1.0),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn posterior_update_matches_hand_values() {
        // Equal densities at y leave the likelihood ratio at 1; from
        // p = 0 the update is then the prior hazard itself.
        let p1 = shiryaev_posterior(0.0, 0.02, 0.0);
        assert!((p1 - 0.02).abs() < 1e-15, "p1 = {p1}");
    }

    #[test]
    fn uninformative_observations_follow_the_prior_cdf() {
        let rho = 0.02;
        let mut p = 0.0;
        for k in 1..=500u32 {
            p = shiryaev_posterior(p, rho, 0.0);
            let want = 1.0 - (1.0 - rho).powi(k as i32);
            assert!((p - want).abs() < 1e-12, "k = {k}: {p} vs {want}");
        }
    }

    #[test]
    fn shiryaev_rejects_non_geometric_change_laws() {
        let mixture = QcdModel::new(
            gaussian(0.0),
            gaussian(0.5),
            ChangeTimeLaw::Mixture { w: 0.25, p_slow: 0.02, p_fast: 0.2 },
            27.0,
        )
        .unwrap();
        let grid = open_unit_grid(10).unwrap();
        assert!(matches!(
            shiryaev_eval(&mixture, &grid, 100, 1),
            Err(Error::ShiryaevRequiresGeometric)
        ));
        // The explicit-parameter form runs the (misspecified) detector.
        let table = shiryaev_eval_with_rho(&mixture, 0.02, &grid, 200, 1).unwrap();
        assert_eq!(table.grid.len(), 10);
    }

    #[test]
    fn shiryaev_sweep_is_monotone_and_terminates() {
        let model = model_1a(27.0);
        let grid = open_unit_grid(20).unwrap();
        let table = shiryaev_eval(&model, &grid, 2_000, 17).unwrap();
        assert_eq!(table.capped, 0);
        for g in 1..grid.len() {
            assert!(table.mde[g] <= table.mde[g - 1]);
            assert!(table.mdd[g] >= table.mdd[g - 1]);
        }
    }

    proptest! {
        #[test]
        fn posterior_stays_in_the_unit_interval(
            p in 0.0..=1.0f64,
            rho in 0.001..0.999f64,
            llr in -700.0..700.0f64,
        ) {
            let next = shiryaev_posterior(p, rho, llr);
            prop_assert!((0.0..=1.0).contains(&next), "p' = {next}");
        }
    }

    #[test]
    fn identical_seeds_center_the_batch_to_zero() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let basis = basis_1d();
        let config = quick_train_config(50);
        let report =
            batch_means_with_seeds(&model, &spec, &basis, &config, &[9, 9]).unwrap();
        assert_eq!(report.runs.len(), 2);
        assert_eq!(report.theta_bar, report.runs[0].theta);
        for zi in &report.z {
            assert!(zi.iter().all(|&v| v == 0.0), "z = {zi:?}");
        }
        let sigma = report.sigma.unwrap();
        assert!(sigma.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(report.thresholds.len(), 2);
    }

    #[test]
    fn batch_covariance_is_symmetric_and_psd() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let basis = basis_1d();
        let config = quick_train_config(100);
        let report = batch_means(&model, &spec, &basis, &config, 4, 77).unwrap();
        assert_eq!(report.runs.len() + report.failures.len(), 4);
        let sigma = report.sigma.expect("enough successes");
        let d = sigma.len();
        for a in 0..d {
            for b in 0..d {
                assert_eq!(sigma[a][b], sigma[b][a]);
            }
        }
        let mat = DMatrix::from_fn(d, d, |a, b| sigma[a][b]);
        let trace = mat.trace();
        let min_eig = mat
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10 * trace.max(1.0), "min eig = {min_eig}");
    }

    #[test]
    fn failed_runs_are_recorded_not_fatal() {
        // An astronomically large kappa overflows the stopping cost on
        // the first exploratory stop, so every run ends in a reported
        // blowup and no covariance can be formed.
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        let basis = basis_1d();
        let config = TrainConfig { kappa: 1e308, ..quick_train_config(50) };
        let report = batch_means(&model, &spec, &basis, &config, 3, 4).unwrap();
        assert!(report.runs.is_empty());
        assert_eq!(report.failures.len(), 3);
        assert!(report.sigma.is_none());
        assert!(report.z.is_empty());
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        assert!(matches!(
            batch_means(&model, &spec, &basis_1d(), &quick_train_config(10), 1, 0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn region_reports_tie_stops_and_box_membership() {
        let basis = RbfBasis::new(vec![vec![0.0, 0.0], vec![1.0, 1.0]], 0.5).unwrap();
        let qf = QFunction::zero(basis);
        let grid1 = [0.0, 0.4, 0.6];
        let grid2 = [0.0, 0.69, 0.7];
        let region = decision_region(&qf, &grid1, &grid2, (0.5, 0.7)).unwrap();
        assert_eq!(region.len(), 9);
        // Zero weights tie every comparison, and ties stop.
        assert!(region.iter().all(|p| p.policy == 1));
        let at = |s1: f64, s2: f64| {
            region
                .iter()
                .find(|p| p.s1 == s1 && p.s2 == s2)
                .unwrap()
                .box_rule
        };
        assert_eq!(at(0.6, 0.0), 1);
        assert_eq!(at(0.4, 0.69), 0);
        assert_eq!(at(0.4, 0.7), 1);
    }

    #[test]
    fn histogram_bins_track_the_freedman_diaconis_width() {
        let mut rng = crate::rng::substream(41, 0);
        let samples: Vec<f64> = (0..10_000).map(|_| rand::Rng::gen::<f64>(&mut rng)).collect();
        let hist = histogram(&samples).unwrap();
        // IQR of U(0,1) is 0.5, so the width is about 1/n^(1/3) and the
        // span close to 1: roughly 22 bins.
        let bins = hist.counts.len();
        assert!((20..=24).contains(&bins), "bins = {bins}");
        assert_eq!(hist.edges.len(), bins + 1);
        assert_eq!(hist.counts.iter().sum::<u64>(), 10_000);
        assert!(hist.edges.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_samples_fall_into_one_bin() {
        let hist = histogram(&[3.0; 17]).unwrap();
        assert_eq!(hist.counts, vec![17]);
        assert_eq!(hist.edges, vec![2.5, 3.5]);
    }

    #[test]
    fn eval_validation_rejects_mismatched_rules() {
        let model = model_1a(2.0);
        let spec = cusum_spec(0.02);
        assert!(eval_policy(
            &model,
            &spec,
            &StopRule::Box { h1: 1.0, h2: 1.0 },
            2.0,
            100,
            0
        )
        .is_err());
        assert!(eval_policy(&model, &spec, &StopRule::Threshold(1.0), -1.0, 100, 0).is_err());
        assert!(threshold_sweep(&model, &spec, &[2.0, 1.0], 100, 0).is_err());
        assert!(threshold_sweep(&model, &spec, &[], 100, 0).is_err());
    }
}
