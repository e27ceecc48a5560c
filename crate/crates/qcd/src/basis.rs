//! Separable radial-basis features over statistic space.
//!
//! A basis is a set of `K` centers `μ_i` with widths `σ_i`, evaluated
//! as `φ_i(s) = exp(−‖s − μ_i‖² / (2 σ_i²))`. The widths follow the
//! nearest-neighbor rule `σ_i = b · min_{l≠i} ‖μ_i − μ_l‖` with a fixed
//! multiplier `b`, so kernels in dense center regions stay narrow and
//! isolated kernels stretch to cover their surroundings.
//!
//! Features for a state-action pair stack two copies of the same RBF
//! vector in a block layout that keeps the function class separable:
//!
//! ```text
//! ψ(s, u) = [(1−u)·φ(s); u·φ(s)]
//! ```
//!
//! so exactly one block is populated for any action. Centers are fitted
//! by k-means over statistic samples collected from simulated paths of
//! the detection problem, each run until the regeneration radius.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PathSim, QcdModel};
use crate::sis::{sis_reset, sis_step_in_place, SisSpec};

/// Gaussian radial basis over points in statistic space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RbfBasis {
    pub centers: Vec<Vec<f64>>,
    pub widths: Vec<f64>,
    pub b: f64,
}

impl RbfBasis {
    /// Build a basis from distinct centers, deriving the scales from
    /// the nearest-neighbor rule.
    pub fn new(centers: Vec<Vec<f64>>, b: f64) -> Result<Self> {
        if centers.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "basis needs at least 2 centers, got {}",
                centers.len()
            )));
        }
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "width multiplier b must be positive and finite, got {b}"
            )));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::InvalidConfig(
                "basis centers must share a nonzero dimension".into(),
            ));
        }
        let widths = nearest_neighbor_widths(&centers, b)?;
        Ok(RbfBasis { centers, widths, b })
    }

    /// Re-check the structural invariants, including that the stored
    /// widths reproduce the nearest-neighbor rule exactly. Used after
    /// deserialization.
    pub fn validate(&self) -> Result<()> {
        let reference = RbfBasis::new(self.centers.clone(), self.b)?;
        if self.widths != reference.widths {
            return Err(Error::InvalidConfig(
                "stored widths do not match the nearest-neighbor rule".into(),
            ));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    /// Dimension of the stacked feature vector, `2K`.
    pub fn feature_dim(&self) -> usize {
        2 * self.centers.len()
    }

    /// The raw RBF values `φ_i(s)`, shared by both blocks.
    pub fn rbf(&self, s: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k()];
        self.rbf_into(s, &mut out);
        out
    }

    /// `rbf` writing into a caller-provided buffer of length `K`.
    pub fn rbf_into(&self, s: &[f64], out: &mut [f64]) {
        assert_eq!(s.len(), self.dim(), "statistic dimension mismatch");
        assert_eq!(out.len(), self.k());
        for ((o, c), &w) in out.iter_mut().zip(&self.centers).zip(&self.widths) {
            *o = (-0.5 * dist2(s, c) / (w * w)).exp();
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_neighbor_widths(centers: &[Vec<f64>], b: f64) -> Result<Vec<f64>> {
    let mut widths = Vec::with_capacity(centers.len());
    for (i, ci) in centers.iter().enumerate() {
        let mut min2 = f64::INFINITY;
        for (l, cl) in centers.iter().enumerate() {
            if l != i {
                min2 = min2.min(dist2(ci, cl));
            }
        }
        let w = b * min2.sqrt();
        if !(w > 0.0) {
            return Err(Error::InvalidConfig(
                "duplicate centers leave a zero-width basis function".into(),
            ));
        }
        widths.push(w);
    }
    Ok(widths)
}

// ---------------------------------------------------------------------------
// Feature evaluation
// ---------------------------------------------------------------------------

/// Stacked feature vector `ψ(s, u)` of dimension `2K`; block `u` holds
/// the RBF values, the other block is zero.
pub fn features(basis: &RbfBasis, s: &[f64], u: u8) -> Vec<f64> {
    let mut out = vec![0.0; basis.feature_dim()];
    features_into(basis, s, u, &mut out);
    out
}

/// `features` writing into a caller-provided buffer (hot path).
pub fn features_into(basis: &RbfBasis, s: &[f64], u: u8, out: &mut [f64]) {
    let k = basis.k();
    assert_eq!(out.len(), 2 * k);
    assert!(u <= 1, "action must be 0 or 1");
    assert_eq!(s.len(), basis.dim(), "statistic dimension mismatch");
    out.fill(0.0);
    let off = usize::from(u) * k;
    for i in 0..k {
        let w = basis.widths[i];
        out[off + i] = (-0.5 * dist2(s, &basis.centers[i]) / (w * w)).exp();
    }
}

// ---------------------------------------------------------------------------
// Center fitting
// ---------------------------------------------------------------------------

/// Fit `k` centers to statistic samples by Lloyd's k-means with
/// k-means++ seeding, then build the basis. Centers are sorted
/// lexicographically so the result is deterministic given the sample
/// order and seed.
pub fn fit_centers<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    k: usize,
    b: f64,
    rng: &mut R,
) -> Result<RbfBasis> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need k >= 2 clusters, got {k}")));
    }
    let distinct = count_distinct(samples);
    if distinct < k {
        return Err(Error::DistinctCentersUnavailable { requested: k, available: distinct });
    }

    let seeds = kmeans_pp_seed(samples, k, rng);
    let (mut centers, _) = lloyd(samples, seeds, 100);

    centers.sort_by(|a, c| lex_cmp(a, c));
    centers.dedup();
    if centers.len() < k {
        return Err(Error::DistinctCentersUnavailable {
            requested: k,
            available: centers.len(),
        });
    }
    RbfBasis::new(centers, b)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            ord => return ord,
        }
    }
    std::cmp::Ordering::Equal
}

fn count_distinct(samples: &[Vec<f64>]) -> usize {
    let mut sorted: Vec<&Vec<f64>> = samples.iter().collect();
    sorted.sort_by(|a, b| lex_cmp(a, b));
    sorted.dedup();
    sorted.len()
}

/// k-means++: first center uniform, subsequent centers drawn with
/// probability proportional to the squared distance to the nearest
/// center chosen so far.
fn kmeans_pp_seed<R: Rng + ?Sized>(samples: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = samples.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(samples[rng.gen_range(0..n)].clone());
    let mut d2: Vec<f64> = samples.iter().map(|x| dist2(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &w) in d2.iter().enumerate() {
            target -= w;
            if target <= 0.0 {
                pick = i;
                break;
            }
        }
        let c = samples[pick].clone();
        for (dist, x) in d2.iter_mut().zip(samples) {
            *dist = dist.min(dist2(x, &c));
        }
        centers.push(c);
    }
    centers
}

/// Lloyd iterations until the relative inertia change drops below
/// `1e−6` or the iteration budget runs out; empty clusters are reseeded
/// at the sample farthest from its assigned center. Returns the centers
/// and the final inertia.
fn lloyd(
    samples: &[Vec<f64>],
    mut centers: Vec<Vec<f64>>,
    max_iters: usize,
) -> (Vec<Vec<f64>>, f64) {
    let k = centers.len();
    let dim = samples[0].len();
    let mut assign = vec![0usize; samples.len()];
    let mut prev_inertia = f64::INFINITY;

    for _ in 0..max_iters {
        let mut inertia = 0.0;
        let mut farthest = (0usize, -1.0);
        for (j, x) in samples.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (i, c) in centers.iter().enumerate() {
                let d = dist2(x, c);
                if d < best.1 {
                    best = (i, d);
                }
            }
            assign[j] = best.0;
            inertia += best.1;
            if best.1 > farthest.1 {
                farthest = (j, best.1);
            }
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (j, x) in samples.iter().enumerate() {
            counts[assign[j]] += 1;
            for (acc, v) in sums[assign[j]].iter_mut().zip(x) {
                *acc += v;
            }
        }
        for i in 0..k {
            if counts[i] == 0 {
                centers[i] = samples[farthest.0].clone();
            } else {
                for (c, s) in centers[i].iter_mut().zip(&sums[i]) {
                    *c = s / counts[i] as f64;
                }
            }
        }

        if (prev_inertia - inertia).abs() < 1e-6 * inertia.max(f64::MIN_POSITIVE) {
            break;
        }
        prev_inertia = inertia;
    }
    let inertia = inertia_of(samples, &centers);
    (centers, inertia)
}

/// Total squared distance of each sample to its nearest center.
pub fn inertia_of(samples: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    samples
        .iter()
        .map(|x| {
            centers
                .iter()
                .map(|c| dist2(x, c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum()
}

// ---------------------------------------------------------------------------
// Sample collection
// ---------------------------------------------------------------------------

/// Collect statistic samples for center fitting: `n_paths` paths of the
/// statistic recursion under the model, each started at zero with a
/// fresh change time and run until the statistic reaches the
/// regeneration radius `eta`. Every visited state is recorded, so one
/// observation path drives all components of a multivariate statistic
/// and the samples cover the full excursion range the trainer sees.
pub fn collect_sis_samples<R: Rng + ?Sized>(
    model: &QcdModel,
    spec: &SisSpec,
    n_paths: u64,
    eta: f64,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    const EPISODE_CAP: u64 = 1_000_000;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let mut out = Vec::new();
    for _ in 0..n_paths {
        let mut path = PathSim::new(model, rng);
        let mut state = sis_reset(spec);
        out.push(state.s.clone());
        let mut steps = 0u64;
        while state.sup_norm() < eta {
            let obs = path.step(rng);
            sis_step_in_place(spec, &mut state, obs.y)?;
            out.push(state.s.clone());
            steps += 1;
            if steps >= EPISODE_CAP {
                return Err(Error::EpisodeCapExceeded { cap: EPISODE_CAP });
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ObservationLaw;
    use crate::rng::{substream, Stream};
    use crate::sis::{drift_eval, DriftFn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    fn basis_0_5() -> RbfBasis {
        // Two centers 5 apart with b = 0.16 give widths 0.8.
        RbfBasis::new(vec![vec![0.0], vec![5.0]], 0.16).unwrap()
    }

    #[test]
    fn identical_samples_cannot_be_clustered() {
        let samples = vec![vec![0.0]; 100];
        let mut rng = Stream::seed_from_u64(1);
        match fit_centers(&samples, 2, 0.4, &mut rng) {
            Err(Error::DistinctCentersUnavailable { requested: 2, available: 1 }) => {}
            other => panic!("expected DistinctCentersUnavailable, got {other:?}"),
        }
    }

    #[test]
    fn two_point_clustering_is_exact() {
        let mut samples = vec![vec![0.0]; 50];
        samples.extend(vec![vec![10.0]; 50]);
        let mut rng = Stream::seed_from_u64(7);
        let basis = fit_centers(&samples, 2, 0.4, &mut rng).unwrap();
        assert_eq!(basis.centers, vec![vec![0.0], vec![10.0]]);
        assert_eq!(basis.widths, vec![4.0, 4.0]);
    }

    #[test]
    fn rbf_value_at_unit_distance() {
        let basis = basis_0_5();
        assert_eq!(basis.widths, vec![0.8, 0.8]);
        let f = features(&basis, &[1.0], 0);
        assert!((f[0] - (-0.5f64 / 0.64).exp()).abs() < 1e-15);
    }

    #[test]
    fn feature_blocks_select_by_action() {
        let basis = basis_0_5();
        let at_center = features(&basis, &[0.0], 0);
        assert_eq!(at_center[0], 1.0);
        assert_eq!(&at_center[2..], &[0.0, 0.0]);

        let stopped = features(&basis, &[0.0], 1);
        assert_eq!(&stopped[..2], &[0.0, 0.0]);
        assert_eq!(stopped[2], 1.0);
    }

    #[test]
    fn cusum_samples_cluster_within_range() {
        // Pre-change CUSUM path of the Gaussian mean-shift drift.
        let g0 = ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 };
        let g1 = ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 };
        let drift = DriftFn::iid_llr(g0, g1, 0.02).unwrap();
        let mut rng = substream(42, 0);
        let mut s = 0.0;
        let samples: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let y: f64 = rng.sample(StandardNormal);
                s = (s + drift_eval(&drift, None, y).unwrap()).max(0.0);
                vec![s]
            })
            .collect();
        let max = samples.iter().map(|v| v[0]).fold(0.0, f64::max);

        let mut fit_rng = substream(42, 1);
        let basis = fit_centers(&samples, 20, 0.4, &mut fit_rng).unwrap();
        assert_eq!(basis.k(), 20);
        for c in &basis.centers {
            assert!(c[0] >= 0.0 && c[0] <= max, "center {c:?} outside [0, {max}]");
        }

        // The seeded fit should do at least as well as the best of ten
        // plain random restarts.
        let ours = inertia_of(&samples, &basis.centers);
        let mut best = f64::INFINITY;
        let mut restart_rng = substream(42, 2);
        for _ in 0..10 {
            let mut picked = Vec::new();
            while picked.len() < 20 {
                let c = samples[restart_rng.gen_range(0..samples.len())].clone();
                if !picked.contains(&c) {
                    picked.push(c);
                }
            }
            let (_, inertia) = lloyd(&samples, picked, 100);
            best = best.min(inertia);
        }
        assert!(ours <= best * 1.0000001, "inertia {ours} vs best restart {best}");
    }

    #[test]
    fn fitting_is_deterministic() {
        let samples: Vec<Vec<f64>> = (0..500).map(|i| vec![(i % 37) as f64 * 0.3]).collect();
        let a = fit_centers(&samples, 8, 0.4, &mut substream(5, 0)).unwrap();
        let b = fit_centers(&samples, 8, 0.4, &mut substream(5, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn collected_samples_start_at_zero_and_stay_finite() {
        use crate::model::{ChangeTimeLaw, QcdModel};
        let model = QcdModel::new(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 },
            ChangeTimeLaw::Geometric { p: 0.02 },
            27.0,
        )
        .unwrap();
        let drift = DriftFn::iid_llr(
            ObservationLaw::Gaussian { mu: 0.0, sigma: 1.0 },
            ObservationLaw::Gaussian { mu: 0.5, sigma: 1.0 },
            0.02,
        )
        .unwrap();
        let spec = SisSpec::single(crate::sis::StatKind::Cusum, drift).unwrap();
        let mut rng = substream(9, 0);
        let samples = collect_sis_samples(&model, &spec, 200, 30.0, &mut rng).unwrap();
        assert!(samples.len() >= 200);
        assert_eq!(samples[0], vec![0.0]);
        assert!(samples.iter().all(|s| s[0].is_finite() && s[0] >= 0.0));
        let max = samples.iter().map(|s| s[0]).fold(0.0, f64::max);
        assert!(max >= 30.0, "paths run until the radius, max visited {max}");
    }

    proptest! {
        #[test]
        fn features_are_separable_and_bounded(
            x in -100.0f64..100.0,
            y in -100.0f64..100.0,
        ) {
            let basis = RbfBasis::new(
                vec![vec![0.0, 0.0], vec![3.0, 1.0], vec![-2.0, 4.0]],
                0.4,
            ).unwrap();
            let f0 = features(&basis, &[x, y], 0);
            let f1 = features(&basis, &[x, y], 1);
            for (a, b) in f0.iter().zip(&f1) {
                prop_assert_eq!(a * b, 0.0);
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
            }
        }
    }
}
