//! Implicit Markov-chain step: a minimizing movement of the relative entropy
//! in the discrete Riemannian distance, its linearized surrogate, the
//! Euler–Lagrange residual and a simplex-margin monitor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::EmpiricalMeasure;
use crate::error::{check_dim, Error, Result};
use crate::explicit_scheme::{run_alternating, Dynamics, LabelMode, LabelUpdate, SchemeConfig, Termination, Trajectory};
use crate::fields::{LabelOperator, RateMatrixField, VelocityField};
use crate::label_geometry::LabelDistribution;
use crate::markov_geometry::{
    entropy_gradient, entropy_raw, metric_raw, onsager_raw, path_energy, project_zero_sum, two_state_distance,
    zero_sum_basis,
    MarkovConstants, MarkovGeometry, METRIC_MARGIN,
};
use crate::par;
use crate::replicator_prox::ProxResult;

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_ETA: f64 = 0.1;
/// Starting segment count for the distance inside the full prox.
pub const PROX_SEGMENTS: usize = 8;
/// Relative change of the path energy that fixes the segment count.
pub const PROX_SEGMENT_TOL: f64 = 1e-9;
const PROX_MAX_SEGMENTS: usize = 1024;
const OUTER_MAX_ITER: usize = 500;
const OUTER_TOL: f64 = 1e-12;
const OUTER_STALL_TOL: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 200;

/// Runtime guard keeping every label inside `Λ^δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginMonitor {
    pub delta: f64,
    pub eta: f64,
    pub violated_at: Option<(usize, usize)>,
}

impl MarginMonitor {
    pub fn new(delta: f64, eta: f64) -> Result<Self> {
        if !(delta > 0.0 && eta > delta) {
            return Err(Error::ContractViolation(format!("margins need eta > delta > 0, got eta = {eta}, delta = {delta}")));
        }
        Ok(Self { delta, eta, violated_at: None })
    }

    pub fn check_initial(&self, psi: &EmpiricalMeasure) -> Result<()> {
        for (a, ag) in psi.agents().iter().enumerate() {
            let min = ag.lambda.min_component();
            if min < self.eta {
                return Err(Error::InvalidInitialDatum { agent: a, min, delta: self.eta });
            }
        }
        Ok(())
    }

    /// First agent (in index order) whose label left `Λ^δ`.
    pub fn first_violation(&self, labels: &[LabelDistribution]) -> Option<(usize, f64)> {
        labels.iter().enumerate().map(|(a, l)| (a, l.min_component())).find(|(_, m)| *m < self.delta)
    }

    pub fn terminated(&self) -> bool {
        self.violated_at.is_some()
    }
}

fn check_prox_input(lambda_hat: &LabelDistribution, geom: &MarkovGeometry, tau: f64) -> Result<()> {
    check_dim(geom.n(), lambda_hat.n())?;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::ContractViolation(format!("tau must be positive, got {tau}")));
    }
    let min = lambda_hat.min_component();
    if !(min >= METRIC_MARGIN) {
        return Err(Error::NearSingularMetric { margin: min });
    }
    Ok(())
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Largest step along `dir` keeping every component at least `floor`.
fn max_step(x: &[f64], dir: &[f64], floor: f64) -> f64 {
    x.iter()
        .zip(dir)
        .filter(|(_, d)| **d < 0.0)
        .map(|(xi, d)| (xi - floor) / -d)
        .fold(f64::INFINITY, f64::min)
}

/// Full prox objective `E(λ) + d²_m(λ, λ̂)/2τ` at a fixed segment count.
struct FullObjective<'a> {
    geom: &'a MarkovGeometry,
    hat: Vec<f64>,
    tau: f64,
    m: usize,
}

impl FullObjective<'_> {
    fn eval(&self, l: &[f64], warm: Option<&[Vec<f64>]>) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
        let (d2, dgrad, nodes) = path_energy(&self.hat, l, self.geom, self.m, warm)?;
        let ge = entropy_gradient(l, self.geom);
        let f = entropy_raw(l, self.geom) + d2 / (2.0 * self.tau);
        let g: Vec<f64> = ge.iter().zip(&dgrad).map(|(a, b)| a + b / (2.0 * self.tau)).collect();
        Ok((f, project_zero_sum(&g), nodes))
    }
}

/// Minimizer of `E(λ) + d(λ, λ̂)²/2τ`: natural-gradient descent (preconditioned
/// by the Onsager matrix) with an Armijo search, started from the explicit
/// step; each distance is an optimized discrete geodesic energy.
pub fn prox_markov_full(lambda_hat: &LabelDistribution, geom: &MarkovGeometry, tau: f64) -> Result<ProxResult> {
    prox_markov_full_with(lambda_hat, geom, tau, PROX_SEGMENTS)
}

pub fn prox_markov_full_with(
    lambda_hat: &LabelDistribution,
    geom: &MarkovGeometry,
    tau: f64,
    m0: usize,
) -> Result<ProxResult> {
    check_prox_input(lambda_hat, geom, tau)?;
    let n = geom.n();
    let hat = lambda_hat.weights().to_vec();
    if euclid(&diff(&hat, geom.sigma().weights())) < 1e-15 {
        return finish(lambda_hat.clone(), geom, lambda_hat, tau, 0, true, 0.0);
    }
    if n == 2 {
        return prox_two_state(lambda_hat, geom, tau);
    }
    let floor = 0.5 * lambda_hat.min_component().min(geom.sigma().min_component()) * 1e-3;
    // warm start from the explicit step, pulled back inside if necessary
    let q = geom.q();
    let drift: Vec<f64> = (0..n).map(|h| (0..n).map(|k| q[(h, k)] * hat[k]).sum::<f64>()).collect();
    let s = (tau).min(0.5 * max_step(&hat, &drift, 0.0));
    let mut x: Vec<f64> = hat.iter().zip(&drift).map(|(l, d)| l + s * d).collect();

    // segment count: double until the discrete energy settles at the start point
    let mut m = m0.max(2);
    let mut e_prev = path_energy(&hat, &x, geom, m, None)?.0;
    while m < PROX_MAX_SEGMENTS {
        let e = path_energy(&hat, &x, geom, 2 * m, None)?.0;
        m *= 2;
        let change = (e - e_prev).abs() / e.max(1e-300);
        e_prev = e;
        if change < PROX_SEGMENT_TOL {
            break;
        }
    }
    let obj = FullObjective { geom, hat: hat.clone(), tau, m };
    let (mut f, mut g, mut nodes) = obj.eval(&x, None)?;
    let mut iterations = 0;
    let mut converged = false;
    let mut flat = 0;
    while iterations < OUTER_MAX_ITER {
        let k = onsager_raw(&x, geom);
        let kg = &k * DVector::from_column_slice(&g);
        let dec: f64 = kg.iter().zip(&g).map(|(a, b)| a * b).sum();
        if dec.max(0.0).sqrt() <= OUTER_TOL * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let dir: Vec<f64> = kg.iter().map(|v| -v).collect();
        // initial step from the quadratic model of the distance term
        let mut step = tau.min(0.99 * max_step(&x, &dir, floor));
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if trial.iter().all(|&v| v >= floor) {
                if let Ok((ft, gt, nt)) = obj.eval(&trial, Some(&nodes)) {
                    if ft <= f - 1e-4 * step * dec {
                        accepted = Some((trial, ft, gt, nt));
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some((xt, ft, gt, nt)) = accepted else {
            converged = dec.max(0.0).sqrt() <= OUTER_STALL_TOL;
            break;
        };
        flat = if f - ft <= 1e-15 * (1.0 + f.abs()) { flat + 1 } else { 0 };
        x = xt;
        f = ft;
        g = gt;
        nodes = nt;
        if flat >= 3 {
            let k = onsager_raw(&x, geom);
            let kg = &k * DVector::from_column_slice(&g);
            let dec: f64 = kg.iter().zip(&g).map(|(a, b)| a * b).sum();
            converged = dec.max(0.0).sqrt() <= OUTER_STALL_TOL;
            break;
        }
    }
    let lambda_new = LabelDistribution::new(x)?;
    finish(lambda_new, geom, lambda_hat, tau, iterations, converged, f)
}

/// Two labels: the path is forced, so the first-order condition is a scalar
/// equation between `λ̂` and `σ`, solved by Illinois regula falsi.
fn prox_two_state(lambda_hat: &LabelDistribution, geom: &MarkovGeometry, tau: f64) -> Result<ProxResult> {
    let a = lambda_hat[0];
    let (s0, s1) = (geom.sigma()[0], geom.sigma()[1]);
    let slope = |s: f64| -> Result<f64> {
        let (d, dd) = two_state_distance(a, s, geom)?;
        Ok((s / s0).ln() - ((1.0 - s) / s1).ln() + d * dd / tau)
    };
    let (mut lo, mut hi) = (a, s0);
    let (mut flo, mut fhi) = (slope(lo)?, slope(hi)?);
    let mut side = 0;
    let mut iterations = 0;
    while (hi - lo).abs() > 1e-15 && iterations < 200 {
        iterations += 1;
        let mid = if flo != fhi { (lo * fhi - hi * flo) / (fhi - flo) } else { 0.5 * (lo + hi) };
        let mid = if (mid - lo) * (mid - hi) < 0.0 { mid } else { 0.5 * (lo + hi) };
        let fm = slope(mid)?;
        if fm == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = mid;
            fhi = fm;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    let s = 0.5 * (lo + hi);
    let lambda_new = LabelDistribution::new(vec![s, 1.0 - s])?;
    let d = two_state_distance(a, s, geom)?.0;
    let objective_value = entropy_raw(lambda_new.weights(), geom) + d * d / (2.0 * tau);
    Ok(ProxResult { lambda_new, objective_value, iterations, converged: (hi - lo).abs() <= 1e-15 || iterations < 200 })
}

fn finish(
    lambda_new: LabelDistribution,
    geom: &MarkovGeometry,
    _hat: &LabelDistribution,
    _tau: f64,
    iterations: usize,
    converged: bool,
    objective_value: f64,
) -> Result<ProxResult> {
    let objective_value = if iterations == 0 && converged { entropy_raw(lambda_new.weights(), geom) } else { objective_value };
    Ok(ProxResult { lambda_new, objective_value, iterations, converged })
}

/// Value of the surrogate objective `E(λ) + ‖λ − λ̂‖²_{G(λ_ref)}/2τ`.
pub fn surrogate_objective(
    lambda: &LabelDistribution,
    lambda_hat: &LabelDistribution,
    g_ref: &DMatrix<f64>,
    geom: &MarkovGeometry,
    tau: f64,
) -> f64 {
    let d = DVector::from_vec(diff(lambda.weights(), lambda_hat.weights()));
    entropy_raw(lambda.weights(), geom) + d.dot(&(g_ref * &d)) / (2.0 * tau)
}

/// Unique minimizer of `E(λ) + ‖λ − λ̂‖²_{G(λ_ref)}/2τ` by damped Newton on
/// the zero-sum hyperplane.
pub fn prox_markov_surrogate(
    lambda_hat: &LabelDistribution,
    lambda_ref: &LabelDistribution,
    geom: &MarkovGeometry,
    tau: f64,
) -> Result<ProxResult> {
    check_prox_input(lambda_hat, geom, tau)?;
    let g_ref = metric_raw(lambda_ref.weights(), geom)?;
    let n = geom.n();
    let b = zero_sum_basis(n);
    let hat = lambda_hat.weights();
    let obj = |x: &[f64]| -> f64 {
        let d = DVector::from_vec(diff(x, hat));
        entropy_raw(x, geom) + d.dot(&(&g_ref * &d)) / (2.0 * tau)
    };
    let mut x = hat.to_vec();
    let mut f = obj(&x);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < NEWTON_MAX_ITER {
        let d = DVector::from_vec(diff(&x, hat));
        let gd = &g_ref * &d / tau;
        let grad = DVector::from_iterator(
            n,
            x.iter().zip(geom.sigma().weights()).zip(gd.iter()).map(|((l, s), q)| (l / s).ln() + 1.0 + q),
        );
        let mut h = &g_ref / tau;
        for i in 0..n {
            h[(i, i)] += 1.0 / x[i];
        }
        let gr = b.transpose() * &grad;
        let hr = b.transpose() * &h * &b;
        let Some(step_r) = hr.clone().cholesky().map(|c| c.solve(&gr)) else {
            return Err(Error::NearSingularMetric { margin: x.iter().copied().fold(f64::INFINITY, f64::min) });
        };
        let decrement = gr.dot(&step_r);
        if decrement <= 1e-24 * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        let dir: Vec<f64> = (&b * &step_r).iter().map(|v| -v).collect();
        let mut t = 1.0f64.min(0.99 * max_step(&x, &dir, 0.0));
        let mut moved = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            let ft = obj(&trial);
            if ft <= f - 1e-4 * t * decrement {
                x = trial;
                f = ft;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            converged = decrement <= 1e-16;
            break;
        }
    }
    let s: f64 = x.iter().sum();
    x.iter_mut().for_each(|v| *v /= s);
    let lambda_new = LabelDistribution::new(x)?;
    let objective_value = surrogate_objective(&lambda_new, lambda_hat, &g_ref, geom, tau);
    Ok(ProxResult { lambda_new, objective_value, iterations, converged })
}

/// `|(λ_new − λ̂)/τ − Q λ_new|`.
pub fn el_residual_markov(
    lambda_hat: &LabelDistribution,
    lambda_new: &LabelDistribution,
    geom: &MarkovGeometry,
    tau: f64,
) -> Result<f64> {
    check_dim(geom.n(), lambda_hat.n())?;
    check_dim(geom.n(), lambda_new.n())?;
    let q = geom.q();
    let n = geom.n();
    let l = lambda_new.weights();
    let r: Vec<f64> = (0..n)
        .map(|h| (l[h] - lambda_hat[h]) / tau - (0..n).map(|k| q[(h, k)] * l[k]).sum::<f64>())
        .collect();
    Ok(euclid(&r))
}

/// Proximity condition under which the residual bound is stated:
/// `√(c3/c1)|λ_new − λ̂|` below the distance of `λ̂` to the boundary of `Λ^δ`.
pub fn proximity_condition(
    lambda_hat: &LabelDistribution,
    lambda_new: &LabelDistribution,
    constants: &MarkovConstants,
) -> bool {
    let n = lambda_hat.n() as f64;
    let step = euclid(&diff(lambda_new.weights(), lambda_hat.weights()));
    let room = (lambda_hat.min_component() - constants.delta) / (1.0 - 1.0 / n).sqrt();
    (constants.c3 / constants.c1).sqrt() * step < room
}

/// One implicit label update: the full prox for two labels, the surrogate
/// with one refresh of the reference point otherwise.
pub fn markov_label_step(lambda_hat: &LabelDistribution, geom: &MarkovGeometry, tau: f64) -> Result<ProxResult> {
    if geom.n() <= 2 {
        prox_markov_full(lambda_hat, geom, tau)
    } else {
        let first = prox_markov_surrogate(lambda_hat, lambda_hat, geom, tau)?;
        if !first.converged || first.lambda_new.min_component() < METRIC_MARGIN {
            return Ok(first);
        }
        let second = prox_markov_surrogate(lambda_hat, &first.lambda_new, geom, tau)?;
        Ok(ProxResult { iterations: first.iterations + second.iterations, ..second })
    }
}

/// Implicit scheme with the margin monitor; the run stops cleanly at the
/// last node whose labels all stayed in `Λ^δ`.
pub fn run_implicit_markov(
    initial: &EmpiricalMeasure,
    v: &VelocityField,
    q: &RateMatrixField,
    config: &SchemeConfig,
    monitor: &mut MarginMonitor,
) -> Result<Trajectory> {
    if config.label_mode != LabelMode::ProxMarkov {
        return Err(Error::ContractViolation("label mode must be prox_markov".into()));
    }
    monitor.check_initial(initial)?;
    monitor.violated_at = None;
    let dynamics = Dynamics { velocity: v.clone(), labels: LabelOperator::Markov(q.clone()) };
    let tau = config.tau();
    let mut violation = None;
    let traj = run_alternating(initial, &dynamics, config, |step, psi| {
        let agents = psi.agents();
        let labels = par::try_map_indexed(agents.len(), |a| {
            let ag = &agents[a];
            let geom = MarkovGeometry::new(q.eval(&ag.x, psi))?;
            let r = markov_label_step(&ag.lambda, &geom, tau)?;
            if !r.converged {
                return Err(Error::ProxNonConvergence {
                    step,
                    agent: a,
                    detail: format!("{} iterations without reaching stationarity", r.iterations),
                });
            }
            Ok(r.lambda_new)
        })?;
        if let Some((agent, min_label)) = monitor.first_violation(&labels) {
            violation = Some((step, agent));
            return Ok(LabelUpdate::Stop(Termination { step, agent, time: config.node_time(step), min_label }));
        }
        Ok(LabelUpdate::Next(labels))
    })?;
    monitor.violated_at = violation;
    Ok(traj)
}
