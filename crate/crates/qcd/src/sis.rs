//! Surrogate information states: drift functions and statistic recursions.
//!
//! A drift is a per-observation log-likelihood ratio, optionally shifted
//! by a constant `r`. Each statistic component applies one of two
//! recursions to its drift, starting from zero:
//!
//! * CUSUM: `S' = max(0, S + F)`
//! * Shiryaev-Roberts: `S' = exp(F) (S + 1)`
//!
//! A specification bundles several components; all of them are driven by
//! the same observation stream, so a two-component state is a point in
//! the plane traced by two statistics over one path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ObservationLaw;

// ---------------------------------------------------------------------------
// Drift functions
// ---------------------------------------------------------------------------

/// The likelihood-ratio part of a drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftKind {
    /// `log(f1(y) / f0(y))` for i.i.d. observation laws.
    IidLlr { f0: ObservationLaw, f1: ObservationLaw },
    /// `log(g1(y_prev, y) / g0(y_prev, y))` for autoregressive transition
    /// densities `g_i(x, z) = noise_i(z - a_i x)`.
    MarkovLlr {
        a0: f64,
        a1: f64,
        noise0: ObservationLaw,
        noise1: ObservationLaw,
    },
}

/// A drift `F(y) = LLR(y) + shift`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftFn {
    #[serde(flatten)]
    pub kind: DriftKind,
    pub shift: f64,
}

impl DriftFn {
    pub fn iid_llr(f0: ObservationLaw, f1: ObservationLaw, shift: f64) -> Result<Self> {
        let d = DriftFn { kind: DriftKind::IidLlr { f0, f1 }, shift };
        d.validate()?;
        Ok(d)
    }

    /// Markov drift over explicit transition structure.
    pub fn markov_llr(
        a0: f64,
        noise0: ObservationLaw,
        a1: f64,
        noise1: ObservationLaw,
        shift: f64,
    ) -> Result<Self> {
        let d = DriftFn { kind: DriftKind::MarkovLlr { a0, a1, noise0, noise1 }, shift };
        d.validate()?;
        Ok(d)
    }

    /// Markov drift matching a pair of `Ar1` observation laws (Gaussian
    /// innovations with the laws' own scales).
    pub fn markov_llr_from_ar1(g0: &ObservationLaw, g1: &ObservationLaw, shift: f64) -> Result<Self> {
        match (g0, g1) {
            (
                &ObservationLaw::Ar1 { a: a0, sigma_w: s0 },
                &ObservationLaw::Ar1 { a: a1, sigma_w: s1 },
            ) => Self::markov_llr(
                a0,
                ObservationLaw::Gaussian { mu: 0.0, sigma: s0 },
                a1,
                ObservationLaw::Gaussian { mu: 0.0, sigma: s1 },
                shift,
            ),
            _ => Err(Error::InvalidConfig(
                "markov drift from observation laws requires two ar1 laws".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shift.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "drift shift must be finite, got {}",
                self.shift
            )));
        }
        match &self.kind {
            DriftKind::IidLlr { f0, f1 } => {
                f0.validate()?;
                f1.validate()?;
                if !f0.is_iid() || !f1.is_iid() {
                    return Err(Error::InvalidConfig(
                        "iid drift requires i.i.d. observation laws".into(),
                    ));
                }
            }
            DriftKind::MarkovLlr { a0, a1, noise0, noise1 } => {
                noise0.validate()?;
                noise1.validate()?;
                if !noise0.is_iid() || !noise1.is_iid() {
                    return Err(Error::InvalidConfig(
                        "markov drift noise must be an i.i.d. law".into(),
                    ));
                }
                if !(a0.abs() < 1.0 && a1.abs() < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "markov drift coefficients must satisfy |a| < 1, got {a0}, {a1}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_markov(&self) -> bool {
        matches!(self.kind, DriftKind::MarkovLlr { .. })
    }

    /// Same drift with the shift removed.
    pub fn unshifted(&self) -> DriftFn {
        DriftFn { kind: self.kind.clone(), shift: 0.0 }
    }

    /// Same drift with a different shift.
    pub fn with_shift(&self, shift: f64) -> DriftFn {
        DriftFn { kind: self.kind.clone(), shift }
    }
}

/// Evaluate a drift at observation `y` given the previous observation.
///
/// Markov drifts need `y_prev`; on the first step after a reset, when no
/// previous observation exists, they emit exactly zero while the lag is
/// primed. I.i.d. drifts ignore `y_prev`.
pub fn drift_eval(d: &DriftFn, y_prev: Option<f64>, y: f64) -> Result<f64> {
    let llr = match &d.kind {
        DriftKind::IidLlr { f0, f1 } => pairwise_llr(f0, f1, y),
        DriftKind::MarkovLlr { a0, a1, noise0, noise1 } => match y_prev {
            None => return Ok(0.0),
            Some(x) => {
                let z0 = y - a0 * x;
                let z1 = y - a1 * x;
                if noise0 == noise1 {
                    shared_noise_llr(noise0, z0, z1)
                } else {
                    log_density_closed(noise1, z1) - log_density_closed(noise0, z0)
                }
            }
        },
    };
    let f = llr + d.shift;
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::DriftUndefined { y })
    }
}

/// `log f(z1) - log f(z0)` for one innovation law, with the normalizing
/// constant cancelled:
///
/// * Gaussian: `((z0 - mu)^2 - (z1 - mu)^2) / (2 sigma^2)` — for matched
///   AR(1) chains this reduces to the quadratic `a x^2 - b x z` form;
/// * Laplace: `(|z0 - mu| - |z1 - mu|) / b`;
/// * Cauchy: `log1p(u0^2) - log1p(u1^2)`.
fn shared_noise_llr(law: &ObservationLaw, z0: f64, z1: f64) -> f64 {
    use ObservationLaw::*;
    match *law {
        Gaussian { mu, sigma } => {
            let d0 = z0 - mu;
            let d1 = z1 - mu;
            0.5 * (d0 * d0 - d1 * d1) / (sigma * sigma)
        }
        Laplace { mu, b } => ((z0 - mu).abs() - (z1 - mu).abs()) / b,
        Cauchy { x0, gamma } => {
            let u0 = (z0 - x0) / gamma;
            let u1 = (z1 - x0) / gamma;
            (u0 * u0).ln_1p() - (u1 * u1).ln_1p()
        }
        Ar1 { .. } => unreachable!("validated i.i.d. law"),
    }
}

fn log_density_closed(law: &ObservationLaw, y: f64) -> f64 {
    law.log_density(y).expect("validated i.i.d. law")
}

/// Closed-form log-likelihood ratio `log(f1(y)/f0(y))`.
///
/// Same-family pairs cancel their normalizing constants analytically:
///
/// * Gaussian, equal scales: `(mu1 - mu0)(y - (mu0 + mu1)/2) / sigma^2`
/// * Gaussian, general: `log(s0/s1) + z0^2/2 - z1^2/2`
/// * Laplace: `|y - mu0|/b0 - |y - mu1|/b1 + log(b0/b1)` (piecewise linear)
/// * Cauchy: `log(g0/g1) + log1p(u0^2) - log1p(u1^2)` (log of a rational)
///
/// Mixed-family pairs fall back to the difference of closed-form log
/// densities. No density is ever exponentiated, so far-tail observations
/// cannot underflow to a zero denominator.
fn pairwise_llr(f0: &ObservationLaw, f1: &ObservationLaw, y: f64) -> f64 {
    use ObservationLaw::*;
    match (f0, f1) {
        (&Gaussian { mu: m0, sigma: s0 }, &Gaussian { mu: m1, sigma: s1 }) => {
            if s0 == s1 {
                (m1 - m0) * (y - 0.5 * (m0 + m1)) / (s0 * s0)
            } else {
                let z0 = (y - m0) / s0;
                let z1 = (y - m1) / s1;
                (s0 / s1).ln() + 0.5 * (z0 * z0 - z1 * z1)
            }
        }
        (&Laplace { mu: m0, b: b0 }, &Laplace { mu: m1, b: b1 }) => {
            (y - m0).abs() / b0 - (y - m1).abs() / b1 + (b0 / b1).ln()
        }
        (&Cauchy { x0: c0, gamma: g0 }, &Cauchy { x0: c1, gamma: g1 }) => {
            let u0 = (y - c0) / g0;
            let u1 = (y - c1) / g1;
            (g0 / g1).ln() + (u0 * u0).ln_1p() - (u1 * u1).ln_1p()
        }
        (f0, f1) => log_density_closed(f1, y) - log_density_closed(f0, y),
    }
}

// ---------------------------------------------------------------------------
// Statistic recursions
// ---------------------------------------------------------------------------

/// Which recursion a component applies to its drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatKind {
    Cusum,
    /// Shiryaev-Roberts.
    Sr,
}

/// One statistic component: a recursion kind and its drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisComponent {
    pub stat: StatKind,
    pub drift: DriftFn,
}

/// A vector of statistic components sharing one observation stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SisSpec {
    pub components: Vec<SisComponent>,
}

impl SisSpec {
    pub fn new(components: Vec<SisComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidConfig("statistic needs at least one component".into()));
        }
        for c in &components {
            c.drift.validate()?;
        }
        Ok(SisSpec { components })
    }

    pub fn single(stat: StatKind, drift: DriftFn) -> Result<Self> {
        Self::new(vec![SisComponent { stat, drift }])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn has_markov(&self) -> bool {
        self.components.iter().any(|c| c.drift.is_markov())
    }
}

/// Current statistic values plus the lagged observation for Markov drifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SisState {
    pub s: Vec<f64>,
    /// Last observation; tracked only when some component is Markov.
    pub y_prev: Option<f64>,
}

impl SisState {
    /// Sup norm of the statistic vector.
    pub fn sup_norm(&self) -> f64 {
        self.s.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Fresh state: every component at zero, no lagged observation.
pub fn sis_reset(spec: &SisSpec) -> SisState {
    SisState { s: vec![0.0; spec.dim()], y_prev: None }
}

/// Advance every component by one observation, in place.
pub fn sis_step_in_place(spec: &SisSpec, state: &mut SisState, y: f64) -> Result<()> {
    for (comp, s) in spec.components.iter().zip(state.s.iter_mut()) {
        let f = drift_eval(&comp.drift, state.y_prev, y)?;
        *s = match comp.stat {
            StatKind::Cusum => (*s + f).max(0.0),
            StatKind::Sr => f.exp() * (*s + 1.0),
        };
    }
    if spec.has_markov() {
        state.y_prev = Some(y);
    }
    Ok(())
}

/// Advance every component by one observation.
pub fn sis_step(spec: &SisSpec, state: &SisState, y: f64) -> Result<SisState> {
    let mut next = state.clone();
    sis_step_in_place(spec, &mut next, y)?;
    Ok(next)
}

// ---------------------------------------------------------------------------
