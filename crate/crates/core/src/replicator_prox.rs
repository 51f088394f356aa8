//! Implicit replicator step: a minimizing movement of the payoff functional
//! in the spherical Hellinger geometry, solved on the square-root sphere.

use serde::{Deserialize, Serialize};

use crate::ensemble::EmpiricalMeasure;
use crate::error::{check_dim, Error, Result};
use crate::explicit_scheme::{run_alternating, Dynamics, LabelMode, LabelUpdate, SchemeConfig, Trajectory};
use crate::fields::{payoff_vector, replicator_from_payoff, LabelOperator, PayoffKernel, VelocityField};
use crate::label_geometry::{bl_norm, LabelDistribution, LabelMetricSpace, SignedLabelMeasure};
use crate::par;

/// Target norm of the Riemannian gradient.
pub const PROX_GRAD_TOL: f64 = 1e-10;
/// Gradient norm accepted when the line search stalls at rounding level.
pub const PROX_STALL_TOL: f64 = 1e-7;
pub const PROX_MAX_ITER: usize = 10_000;
const ARMIJO_C: f64 = 1e-4;
const SERIES_ANGLE: f64 = 1e-4;

/// How the squared distance in the proximal objective is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HsConvention {
    /// `HS²` with `HS = arccos(Σ√(a b))`, the sphere angle.
    #[default]
    Geodesic,
    /// `arccos(1 − H⁴/2)` applied to the Hellinger distance `H`.
    Literal,
}

impl HsConvention {
    /// Penalty from the chord `|√a − √b|` (accurate for nearby points).
    pub fn penalty_from_chord(self, chord: f64) -> f64 {
        match self {
            Self::Geodesic => (2.0 * (chord / 2.0).min(1.0).asin()).powi(2),
            Self::Literal => 2.0 * (chord * chord / 2.0).min(1.0).asin(),
        }
    }

    /// `dD/dc` with `c = 1 − chord²/2`.
    fn slope_from_chord(self, chord: f64) -> f64 {
        match self {
            Self::Geodesic => {
                let th = 2.0 * (chord / 2.0).min(1.0).asin();
                let ratio = if th < SERIES_ANGLE { 1.0 + th * th / 6.0 } else { th / th.sin() };
                -2.0 * ratio
            }
            Self::Literal => {
                let e = chord.powi(4) / 4.0;
                -2.0 / (1.0 - e).max(f64::MIN_POSITIVE).sqrt()
            }
        }
    }

    pub fn penalty(self, a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
        check_dim(a.n(), b.n())?;
        let chord = a
            .weights()
            .iter()
            .zip(b.weights())
            .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
            .sum::<f64>()
            .sqrt();
        Ok(self.penalty_from_chord(chord))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxResult {
    pub lambda_new: LabelDistribution,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// `−¼ Σ_h (J*Ψ)(x, h) λ_h`.
pub fn payoff_functional(x: &[f64], lambda: &LabelDistribution, psi: &EmpiricalMeasure, j: &PayoffKernel) -> f64 {
    let p = payoff_vector(x, lambda.n(), psi, j);
    linear_payoff(&p, lambda.weights())
}

fn linear_payoff(p: &[f64], lambda: &[f64]) -> f64 {
    -0.25 * p.iter().zip(lambda).map(|(a, b)| a * b).sum::<f64>()
}

/// `F(λ) = −¼⟨p, λ⟩ + D(λ, λ̂)/2τ` for a fixed payoff vector `p`.
pub fn hs_objective(
    p: &[f64],
    lambda: &LabelDistribution,
    lambda_hat: &LabelDistribution,
    tau: f64,
    convention: HsConvention,
) -> Result<f64> {
    Ok(linear_payoff(p, lambda.weights()) + convention.penalty(lambda, lambda_hat)? / (2.0 * tau))
}

pub fn prox_hs(
    x: &[f64],
    lambda_hat: &LabelDistribution,
    psi: &EmpiricalMeasure,
    tau: f64,
    j: &PayoffKernel,
) -> Result<ProxResult> {
    prox_hs_with(x, lambda_hat, psi, tau, j, HsConvention::Geodesic)
}

pub fn prox_hs_with(
    x: &[f64],
    lambda_hat: &LabelDistribution,
    psi: &EmpiricalMeasure,
    tau: f64,
    j: &PayoffKernel,
    convention: HsConvention,
) -> Result<ProxResult> {
    let p = payoff_vector(x, lambda_hat.n(), psi, j);
    prox_hs_payoff(&p, lambda_hat, tau, convention)
}

/// Riemannian gradient descent in `q = √λ` on the face spanned by the support
/// of `λ̂`; the minimizer never leaves that face and never touches its boundary.
pub fn prox_hs_payoff(
    p: &[f64],
    lambda_hat: &LabelDistribution,
    tau: f64,
    convention: HsConvention,
) -> Result<ProxResult> {
    check_dim(lambda_hat.n(), p.len())?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::ContractViolation(format!("tau must be positive, got {tau}")));
    }
    let support: Vec<usize> = (0..p.len()).filter(|&h| lambda_hat[h] > 0.0).collect();
    let ps: Vec<f64> = support.iter().map(|&h| p[h]).collect();
    let qh: Vec<f64> = support.iter().map(|&h| lambda_hat[h].sqrt()).collect();

    let objective = |q: &[f64]| -> f64 {
        let lin: f64 = ps.iter().zip(q).map(|(a, b)| a * b * b).sum();
        -0.25 * lin + convention.penalty_from_chord(chord(q, &qh)) / (2.0 * tau)
    };
    let rgrad = |q: &[f64]| -> Vec<f64> {
        let slope = convention.slope_from_chord(chord(q, &qh)) / (2.0 * tau);
        let g: Vec<f64> = ps.iter().zip(q).zip(&qh).map(|((a, b), c)| -0.5 * a * b + slope * c).collect();
        let radial: f64 = g.iter().zip(q).map(|(a, b)| a * b).sum();
        g.iter().zip(q).map(|(a, b)| a - radial * b).collect()
    };

    let mut q = qh.clone();
    let mut f = objective(&q);
    let mut g = rgrad(&q);
    let pmax = ps.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut alpha = tau / (1.0 + tau * pmax);
    let mut iterations = 0;
    let mut converged = support.len() <= 1;
    let mut flat = 0;
    while !converged && iterations < PROX_MAX_ITER {
        let gn = norm(&g);
        if gn <= PROX_GRAD_TOL {
            converged = true;
            break;
        }
        iterations += 1;
        let mut accepted = None;
        let mut a = alpha;
        for _ in 0..80 {
            let mut trial: Vec<f64> = q.iter().zip(&g).map(|(qi, gi)| qi - a * gi).collect();
            let tn = norm(&trial);
            trial.iter_mut().for_each(|v| *v /= tn);
            if trial.iter().all(|&v| v > 0.0) {
                let ft = objective(&trial);
                if ft <= f - ARMIJO_C * a * gn * gn {
                    accepted = Some((trial, ft, a));
                    break;
                }
            }
            a *= 0.5;
        }
        let Some((qn, fnew, a)) = accepted else {
            converged = gn <= PROX_STALL_TOL;
            break;
        };
        flat = if f - fnew <= 1e-15 * (1.0 + f.abs()) { flat + 1 } else { 0 };
        if flat >= 3 {
            converged = gn <= PROX_STALL_TOL;
            q = qn;
            break;
        }
        let gnew = rgrad(&qn);
        let s: Vec<f64> = qn.iter().zip(&q).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        alpha = if sy > 0.0 { (ss / sy).clamp(1e-14, 1e6) } else { 2.0 * a };
        q = qn;
        f = fnew;
        g = gnew;
    }

    let mut full = vec![0.0; p.len()];
    for (&h, qi) in support.iter().zip(&q) {
        full[h] = qi * qi;
    }
    let s: f64 = full.iter().sum();
    full.iter_mut().for_each(|v| *v /= s);
    let lambda_new = LabelDistribution::new(full)?;
    let objective_value = hs_objective(p, &lambda_new, lambda_hat, tau, convention)?;
    Ok(ProxResult { lambda_new, objective_value, iterations, converged })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn chord(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `‖(λ_new − λ̂)/τ − T(x, λ_new, Ψ)‖_BL`.
pub fn el_residual_hs(
    lambda_hat: &LabelDistribution,
    lambda_new: &LabelDistribution,
    tau: f64,
    x: &[f64],
    psi: &EmpiricalMeasure,
    j: &PayoffKernel,
    space: &LabelMetricSpace,
) -> Result<f64> {
    check_dim(lambda_hat.n(), lambda_new.n())?;
    let p = payoff_vector(x, lambda_new.n(), psi, j);
    el_residual_hs_payoff(&p, lambda_hat, lambda_new, tau, space)
}

/// Same residual for a fixed payoff vector `p`.
pub fn el_residual_hs_payoff(
    p: &[f64],
    lambda_hat: &LabelDistribution,
    lambda_new: &LabelDistribution,
    tau: f64,
    space: &LabelMetricSpace,
) -> Result<f64> {
    let t = replicator_from_payoff(p, lambda_new);
    let r: Vec<f64> = lambda_new
        .weights()
        .iter()
        .zip(lambda_hat.weights())
        .zip(t.weights())
        .map(|((a, b), th)| (a - b) / tau - th)
        .collect();
    bl_norm(&SignedLabelMeasure(r), space)
}

pub fn run_implicit_replicator(
    initial: &EmpiricalMeasure,
    v: &VelocityField,
    j: &PayoffKernel,
    config: &SchemeConfig,
) -> Result<Trajectory> {
    run_implicit_replicator_with(initial, v, j, config, HsConvention::Geodesic)
}

/// Same loop as the explicit scheme with the label update replaced by one
/// proximal step per agent; no step-size guard is needed.
pub fn run_implicit_replicator_with(
    initial: &EmpiricalMeasure,
    v: &VelocityField,
    j: &PayoffKernel,
    config: &SchemeConfig,
    convention: HsConvention,
) -> Result<Trajectory> {
    if config.label_mode != LabelMode::ProxHellinger {
        return Err(Error::ContractViolation("label mode must be prox_hellinger".into()));
    }
    let dynamics = Dynamics { velocity: v.clone(), labels: LabelOperator::Replicator(j.clone()) };
    let tau = config.tau();
    run_alternating(initial, &dynamics, config, |step, psi| {
        let agents = psi.agents();
        let labels = par::try_map_indexed(agents.len(), |a| {
            let ag = &agents[a];
            let r = prox_hs_with(&ag.x, &ag.lambda, psi, tau, j, convention)?;
            if !r.converged {
                return Err(Error::ProxNonConvergence {
                    step,
                    agent: a,
                    detail: format!("{} iterations without reaching stationarity", r.iterations),
                });
            }
            Ok(r.lambda_new)
        })?;
        Ok(LabelUpdate::Next(labels))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::AgentState;
    use crate::label_geometry::spherical_hellinger;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ld(w: &[f64]) -> LabelDistribution {
        LabelDistribution::new(w.to_vec()).unwrap()
    }

    fn uniform_opponent() -> EmpiricalMeasure {
        EmpiricalMeasure::single(AgentState::new(vec![0.0], ld(&[0.5, 0.5])).unwrap())
    }

    /// 1-D oracle on the edge: grid with step 1e-5, then golden section.
    fn edge_oracle(p: &[f64], hat: &LabelDistribution, tau: f64) -> f64 {
        let f = |s: f64| hs_objective(p, &ld(&[s, 1.0 - s]), hat, tau, HsConvention::Geodesic).unwrap();
        let m = 100_000;
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..=m {
            let s = i as f64 / m as f64;
            let v = f(s);
            if v < best {
                best = v;
                arg = s;
            }
        }
        let (mut a, mut b) = ((arg - 1e-5).max(0.0), (arg + 1e-5).min(1.0));
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..100 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        best.min(f(0.5 * (a + b)))
    }

    #[test]
    fn payoff_functional_examples() {
        let psi = uniform_opponent();
        let l = ld(&[0.3, 0.7]);
        assert_eq!(payoff_functional(&[0.0], &l, &psi, &PayoffKernel::constant(0.0)), 0.0);
        assert_abs_diff_eq!(payoff_functional(&[0.0], &l, &psi, &PayoffKernel::constant(4.0)), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(payoff_functional(&[0.0], &l, &psi, &PayoffKernel::identity()), -0.125, epsilon = 1e-15);
    }

    #[test]
    fn constant_kernel_is_fixed_point() {
        let hat = ld(&[0.2, 0.5, 0.3]);
        let psi = EmpiricalMeasure::single(AgentState::new(vec![0.0], hat.clone()).unwrap());
        let r = prox_hs(&[0.0], &hat, &psi, 0.3, &PayoffKernel::constant(2.0)).unwrap();
        assert!(r.converged);
        for h in 0..3 {
            assert_abs_diff_eq!(r.lambda_new[h], hat[h], epsilon = 1e-14);
        }
        let res = el_residual_hs(&hat, &r.lambda_new, 0.3, &[0.0], &psi, &PayoffKernel::constant(2.0),
            &LabelMetricSpace::discrete(3)).unwrap();
        assert!(res < 1e-12);
    }

    #[test]
    fn matches_edge_oracle() {
        let hat = ld(&[0.7, 0.3]);
        let psi = uniform_opponent();
        let p = payoff_vector(&[0.0], 2, &psi, &PayoffKernel::identity());
        let r = prox_hs(&[0.0], &hat, &psi, 0.05, &PayoffKernel::identity()).unwrap();
        assert!(r.converged);
        assert_abs_diff_eq!(r.objective_value, edge_oracle(&p, &hat, 0.05), epsilon = 1e-10);
        let game = [0.0, 3.0];
        for tau in [0.01, 0.1, 1.0, 10.0] {
            let r = prox_hs_payoff(&game, &hat, tau, HsConvention::Geodesic).unwrap();
            assert!(r.converged);
            assert_abs_diff_eq!(r.objective_value, edge_oracle(&game, &hat, tau), epsilon = 1e-10);
        }
    }

    #[test]
    fn support_is_preserved() {
        let hat = ld(&[0.0, 0.4, 0.6]);
        let r = prox_hs_payoff(&[5.0, 0.0, 1.0], &hat, 1.0, HsConvention::Geodesic).unwrap();
        assert_eq!(r.lambda_new[0], 0.0);
        assert!(r.lambda_new[1] > 0.0 && r.lambda_new[2] > r.lambda_new[1]);
        let v = LabelDistribution::vertex(3, 1);
        let r = prox_hs_payoff(&[5.0, 0.0, 1.0], &v, 1.0, HsConvention::Geodesic).unwrap();
        assert_eq!(r.lambda_new, v);
    }

    #[test]
    fn distance_is_linear_in_tau() {
        let hat = ld(&[0.6, 0.3, 0.1]);
        let p = [1.0, -0.5, 2.0];
        let d: Vec<f64> = (4..9)
            .map(|e| {
                let tau = 0.5f64.powi(e);
                let r = prox_hs_payoff(&p, &hat, tau, HsConvention::Geodesic).unwrap();
                spherical_hellinger(&r.lambda_new, &hat).unwrap()
            })
            .collect();
        let slope = (d[0] / d[4]).ln() / 16f64.ln();
        assert!(slope >= 0.9, "slope {slope}");
        // d ≤ C τ with C from the payoff oscillation
        assert!(d[4] <= 2.0 * 2.0 * 0.5f64.powi(8));
    }

    #[test]
    fn literal_convention_agrees_to_first_order() {
        let hat = ld(&[0.6, 0.3, 0.1]);
        let p = [1.0, -0.5, 2.0];
        let tau = 1e-3;
        let a = prox_hs_payoff(&p, &hat, tau, HsConvention::Geodesic).unwrap();
        let b = prox_hs_payoff(&p, &hat, tau, HsConvention::Literal).unwrap();
        assert!(b.converged);
        let gap = spherical_hellinger(&a.lambda_new, &b.lambda_new).unwrap();
        let step = spherical_hellinger(&a.lambda_new, &hat).unwrap();
        assert!(gap < 0.05 * step, "{gap} vs {step}");
    }

    #[test]
    fn explicit_step_residual_is_small() {
        let hat = ld(&[0.5, 0.3, 0.2]);
        let p = [1.0, -0.5, 2.0];
        let space = LabelMetricSpace::discrete(3);
        let res: Vec<f64> = [0.02, 0.01, 0.005]
            .iter()
            .map(|&tau| {
                let t = replicator_from_payoff(&p, &hat);
                let next = ld(&hat.weights().iter().zip(t.weights()).map(|(a, b)| a + tau * b).collect::<Vec<_>>());
                el_residual_hs_payoff(&p, &hat, &next, tau, &space).unwrap()
            })
            .collect();
        assert!(res[1] < 0.6 * res[0] && res[2] < 0.6 * res[1]);
    }

    fn simplex3() -> impl Strategy<Value = LabelDistribution> {
        prop::collection::vec(0.01f64..1.0, 3).prop_map(|v| {
            let s: f64 = v.iter().sum();
            ld(&v.iter().map(|x| x / s).collect::<Vec<_>>())
        })
    }

    proptest! {
        #[test]
        fn prox_descends_and_stays_on_simplex(
            hat in simplex3(),
            p in prop::collection::vec(-3.0f64..3.0, 3),
            tau in 0.001f64..5.0,
        ) {
            let r = prox_hs_payoff(&p, &hat, tau, HsConvention::Geodesic).unwrap();
            prop_assert!(r.converged);
            let f0 = hs_objective(&p, &hat, &hat, tau, HsConvention::Geodesic).unwrap();
            prop_assert!(r.objective_value <= f0 + 1e-15);
            prop_assert!(r.lambda_new.min_component() > 0.0);
            prop_assert!((r.lambda_new.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let osc = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let hs = spherical_hellinger(&r.lambda_new, &hat).unwrap();
            prop_assert!(hs <= 4.0 * osc * tau + 1e-12);
        }
    }
}
