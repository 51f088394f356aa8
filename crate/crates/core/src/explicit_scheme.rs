//! The alternate Lagrangian scheme: a label update, transport of the new
//! labels into an intermediate measure, then a position update driven by it.
//! Trajectories are piecewise affine in time, agent by agent.

use serde::{Deserialize, Serialize};

use crate::ensemble::{euclid, AgentState, EmpiricalMeasure};
use crate::error::{check_dim, Error, Result};
use crate::fields::{delta_estimate, LabelOperator, StateDims, VelocityField};
use crate::label_geometry::LabelDistribution;
use crate::par;

/// Tolerance below zero accepted (and clamped) after an explicit label step.
pub const LABEL_NEGATIVE_TOL: f64 = 1e-10;
/// Samples used by the step-size guard.
pub const GUARD_SAMPLES: usize = 10_000;
/// Safety factor on the estimated `δ_R` applied by [`run_explicit`].
pub const GUARD_SAFETY: f64 = 2.0;
/// Additive slack on the Gronwall support envelope.
pub const ENVELOPE_SLACK: f64 = 1.0;
const GUARD_SEED: u64 = 0x6c61_6265_6c66_6c77;
const NODE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    Explicit,
    ProxHellinger,
    ProxMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub t_final: f64,
    pub k: usize,
    pub label_mode: LabelMode,
    pub snapshot_times: Vec<f64>,
}

impl SchemeConfig {
    /// Snapshots default to eight equally spaced times ending at `t_final`.
    pub fn new(t_final: f64, k: usize, label_mode: LabelMode) -> Result<Self> {
        let snapshot_times = (1..=8).map(|j| t_final * j as f64 / 8.0).collect();
        Self::with_snapshots(t_final, k, label_mode, snapshot_times)
    }

    pub fn with_snapshots(
        t_final: f64,
        k: usize,
        label_mode: LabelMode,
        snapshot_times: Vec<f64>,
    ) -> Result<Self> {
        let cfg = Self { t_final, k, label_mode, snapshot_times };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::ContractViolation("horizon must be positive".into()));
        }
        if self.k == 0 {
            return Err(Error::ContractViolation("k must be positive".into()));
        }
        if self.snapshot_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::ContractViolation("snapshot times must be sorted".into()));
        }
        if self.snapshot_times.iter().any(|&t| !(0.0..=self.t_final).contains(&t)) {
            return Err(Error::ContractViolation("snapshot times must lie in [0, T]".into()));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.t_final / self.k as f64
    }

    pub fn node_time(&self, i: usize) -> f64 {
        if i == self.k {
            self.t_final
        } else {
            i as f64 * self.tau()
        }
    }

    /// Same horizon and snapshots, different step count.
    pub fn with_k(&self, k: usize) -> Result<Self> {
        Self::with_snapshots(self.t_final, k, self.label_mode, self.snapshot_times.clone())
    }
}

/// The velocity field and the label operator driving a run.
#[derive(Debug, Clone)]
pub struct Dynamics {
    pub velocity: VelocityField,
    pub labels: LabelOperator,
}

/// Where and why a run stopped before the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Termination {
    pub step: usize,
    pub agent: usize,
    pub time: f64,
    pub min_label: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    config: SchemeConfig,
    dynamics: Dynamics,
    nodes: Vec<(f64, EmpiricalMeasure)>,
    intermediates: Vec<EmpiricalMeasure>,
    termination: Option<Termination>,
}

impl Trajectory {
    pub fn config(&self) -> &SchemeConfig {
        &self.config
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn nodes(&self) -> &[(f64, EmpiricalMeasure)] {
        &self.nodes
    }

    /// `Ψ̃_{i+1}` for each completed step.
    pub fn intermediates(&self) -> &[EmpiricalMeasure] {
        &self.intermediates
    }

    pub fn termination(&self) -> Option<&Termination> {
        self.termination.as_ref()
    }

    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Time of the last stored node; `T` unless the run was terminated.
    pub fn end_time(&self) -> f64 {
        self.nodes.last().map(|n| n.0).unwrap_or(0.0)
    }

    pub fn final_measure(&self) -> &EmpiricalMeasure {
        &self.nodes.last().expect("trajectory has an initial node").1
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        let tau = self.config.tau();
        let end = self.end_time();
        if !(t >= 0.0 && t <= end + NODE_TOL * tau) {
            return Err(Error::ContractViolation(format!("time {t} outside [0, {end}]")));
        }
        if self.steps() == 0 {
            return Ok((0, 0.0));
        }
        let i = ((t / tau).floor() as usize).min(self.steps() - 1);
        let s = ((t - self.nodes[i].0) / tau).clamp(0.0, 1.0);
        Ok((i, s))
    }

    /// `Ψ^k(t)` from the agent-wise affine interpolants.
    pub fn at(&self, t: f64) -> Result<EmpiricalMeasure> {
        let (i, s) = self.locate(t)?;
        let a = &self.nodes[i].1;
        if s == 0.0 || self.steps() == 0 {
            return Ok(a.clone());
        }
        let b = &self.nodes[i + 1].1;
        let agents = a
            .agents()
            .iter()
            .zip(b.agents())
            .map(|(p, q)| interpolate(p, q, s))
            .collect::<Result<Vec<_>>>()?;
        a.with_agents(agents)
    }

    /// Per-agent `(ẋ, λ̇)` on step interval `i`.
    pub fn interval_velocities(&self, i: usize) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if i >= self.steps() {
            return Err(Error::ContractViolation(format!("no step interval {i}")));
        }
        let tau = self.nodes[i + 1].0 - self.nodes[i].0;
        Ok(self.nodes[i]
            .1
            .agents()
            .iter()
            .zip(self.nodes[i + 1].1.agents())
            .map(|(p, q)| {
                let xd = p.x.iter().zip(&q.x).map(|(a, b)| (b - a) / tau).collect();
                let ld = p
                    .lambda
                    .weights()
                    .iter()
                    .zip(q.lambda.weights())
                    .map(|(a, b)| (b - a) / tau)
                    .collect();
                (xd, ld)
            })
            .collect())
    }
}

fn interpolate(p: &AgentState, q: &AgentState, s: f64) -> Result<AgentState> {
    let x = p.x.iter().zip(&q.x).map(|(a, b)| a + s * (b - a)).collect();
    let l = p
        .lambda
        .weights()
        .iter()
        .zip(q.lambda.weights())
        .map(|(a, b)| a + s * (b - a))
        .collect();
    Ok(AgentState { x, lambda: LabelDistribution::new(l)? })
}

/// Support envelope `(r + 3 M_v T) e^{3 M_v T}` plus a fixed slack.
pub fn gronwall_radius(r: f64, m_v: f64, t_final: f64) -> f64 {
    let a = 3.0 * m_v * t_final;
    (r + a) * a.exp() + ENVELOPE_SLACK
}

/// `max_a |x_a| + 1`: the support radius for probability labels, whose
/// bounded-Lipschitz norm is always one.
pub(crate) fn probability_support_radius(psi: &EmpiricalMeasure) -> f64 {
    psi.agents().iter().map(|a| euclid(&a.x)).fold(0.0, f64::max) + 1.0
}

fn guard_delta(op: &LabelOperator, dims: StateDims, radius: f64) -> Result<f64> {
    delta_estimate(op, dims, radius, GUARD_SAMPLES, GUARD_SEED)
}

/// `τ ≤ 1/δ_R` with `δ_R` from [`delta_estimate`] on [`GUARD_SAMPLES`] points.
pub fn step_size_guard(op: &LabelOperator, dims: StateDims, radius: f64, tau: f64) -> Result<bool> {
    let delta = guard_delta(op, dims, radius)?;
    Ok(delta == 0.0 || tau * delta <= 1.0)
}

/// `λ'_a = λ_a + τ T(x_a, λ_a, Ψ_i)` for every agent.
pub fn label_step_explicit(
    psi: &EmpiricalMeasure,
    op: &LabelOperator,
    tau: f64,
) -> Result<Vec<LabelDistribution>> {
    let agents = psi.agents();
    par::try_map_indexed(agents.len(), |a| {
        let ag = &agents[a];
        let t = op.eval(&ag.x, &ag.lambda, psi)?;
        let mut next = Vec::with_capacity(ag.lambda.n());
        for (h, (l, th)) in ag.lambda.weights().iter().zip(t.weights()).enumerate() {
            let v = l + tau * th;
            if !v.is_finite() {
                return Err(Error::FieldEvaluation { agent: a });
            }
            if v < -LABEL_NEGATIVE_TOL {
                return Err(Error::SimplexViolation { agent: a, component: h, value: v });
            }
            next.push(v.max(0.0));
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= s);
        LabelDistribution::new(next)
    })
}

/// `(id; Λ)_# Ψ_i`: same positions and weights, new labels.
pub fn intermediate_measure(
    psi: &EmpiricalMeasure,
    labels: &[LabelDistribution],
) -> Result<EmpiricalMeasure> {
    check_dim(psi.len(), labels.len())?;
    let agents = psi
        .agents()
        .iter()
        .zip(labels)
        .map(|(a, l)| {
            check_dim(a.lambda.n(), l.n())?;
            Ok(AgentState { x: a.x.clone(), lambda: l.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    psi.with_agents(agents)
}

/// `x'_a = x_a + τ v(x_a, λ'_a, Ψ̃)`: old position, new label, intermediate measure.
pub fn position_step(
    psi: &EmpiricalMeasure,
    psi_tilde: &EmpiricalMeasure,
    labels: &[LabelDistribution],
    v: &VelocityField,
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    check_dim(psi.len(), labels.len())?;
    check_dim(psi.len(), psi_tilde.len())?;
    let agents = psi.agents();
    par::try_map_indexed(agents.len(), |a| {
        let x = &agents[a].x;
        let vel = v.eval(x, &labels[a], psi_tilde);
        check_dim(x.len(), vel.len())?;
        if vel.iter().any(|c| !c.is_finite()) {
            return Err(Error::FieldEvaluation { agent: a });
        }
        Ok(x.iter().zip(&vel).map(|(xi, vi)| xi + tau * vi).collect())
    })
}

pub(crate) enum LabelUpdate {
    Next(Vec<LabelDistribution>),
    Stop(Termination),
}

/// The common loop shared by every label mode.
pub(crate) fn run_alternating<F>(
    initial: &EmpiricalMeasure,
    dynamics: &Dynamics,
    config: &SchemeConfig,
    mut label_step: F,
) -> Result<Trajectory>
where
    F: FnMut(usize, &EmpiricalMeasure) -> Result<LabelUpdate>,
{
    config.validate()?;
    let tau = config.tau();
    let mut nodes = Vec::with_capacity(config.k + 1);
    let mut intermediates = Vec::with_capacity(config.k);
    nodes.push((0.0, initial.clone()));
    let mut termination = None;
    for i in 0..config.k {
        let psi = &nodes[i].1;
        let labels = match label_step(i, psi)? {
            LabelUpdate::Next(l) => l,
            LabelUpdate::Stop(t) => {
                termination = Some(t);
                break;
            }
        };
        let tilde = intermediate_measure(psi, &labels)?;
        let xs = position_step(psi, &tilde, &labels, &dynamics.velocity, tau)?;
        let agents = xs
            .into_iter()
            .zip(labels)
            .map(|(x, lambda)| AgentState { x, lambda })
            .collect();
        let next = psi.with_agents(agents)?;
        nodes.push((config.node_time(i + 1), next));
        intermediates.push(tilde);
    }
    Ok(Trajectory {
        config: config.clone(),
        dynamics: dynamics.clone(),
        nodes,
        intermediates,
        termination,
    })
}

/// The explicit scheme. The step size is checked once against the Gronwall
/// envelope before the run and again whenever the support outgrows it.
pub fn run_explicit(
    initial: &EmpiricalMeasure,
    dynamics: &Dynamics,
    config: &SchemeConfig,
) -> Result<Trajectory> {
    config.validate()?;
    let tau = config.tau();
    let dims = StateDims { d: initial.dim(), n: initial.labels() };
    let mut radius = gronwall_radius(
        probability_support_radius(initial),
        dynamics.velocity.growth(),
        config.t_final,
    );
    let check = |step: usize, radius: f64| -> Result<()> {
        let delta = guard_delta(&dynamics.labels, dims, radius)?;
        if delta > 0.0 && tau * GUARD_SAFETY * delta > 1.0 {
            return Err(Error::GuardFailure { step, tau, limit: 1.0 / (GUARD_SAFETY * delta) });
        }
        Ok(())
    };
    check(0, radius)?;
    run_alternating(initial, dynamics, config, |i, psi| {
        let r = probability_support_radius(psi);
        if r > radius {
            radius = gronwall_radius(r, dynamics.velocity.growth(), config.t_final);
            check(i, radius)?;
        }
        label_step_explicit(psi, &dynamics.labels, tau).map(LabelUpdate::Next)
    })
}

/// Dictionary of test functions with analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestFunction {
    One,
    X(usize),
    Lambda(usize),
    XLambda(usize, usize),
    /// `exp(−|x|²)`.
    Bump,
}

impl TestFunction {
    pub fn value(&self, x: &[f64], lambda: &[f64]) -> f64 {
        match *self {
            Self::One => 1.0,
            Self::X(j) => x[j],
            Self::Lambda(h) => lambda[h],
            Self::XLambda(j, h) => x[j] * lambda[h],
            Self::Bump => (-x.iter().map(|v| v * v).sum::<f64>()).exp(),
        }
    }

    pub fn grad_x(&self, x: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        match *self {
            Self::One | Self::Lambda(_) => {}
            Self::X(j) => g[j] = 1.0,
            Self::XLambda(j, h) => g[j] = lambda[h],
            Self::Bump => {
                let e = self.value(x, lambda);
                g.iter_mut().zip(x).for_each(|(gj, xj)| *gj = -2.0 * xj * e);
            }
        }
        g
    }

    pub fn grad_lambda(&self, x: &[f64], lambda: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; lambda.len()];
        match *self {
            Self::Lambda(h) => g[h] = 1.0,
            Self::XLambda(j, h) => g[h] = x[j],
            _ => {}
        }
        g
    }
}

/// `{1, x_j, λ_h, x_j λ_h, exp(−|x|²)}`.
pub fn dictionary(d: usize, n: usize) -> Vec<TestFunction> {
    let mut v = vec![TestFunction::One];
    v.extend((0..d).map(TestFunction::X));
    v.extend((0..n).map(TestFunction::Lambda));
    for j in 0..d {
        v.extend((0..n).map(|h| TestFunction::XLambda(j, h)));
    }
    v.push(TestFunction::Bump);
    v
}

/// `θ_k(φ)` at an interior time `t` for each test function in `fns`: the exact
/// time derivative of `∫φ dΨ^k(t)` minus `∫∇φ·b dΨ^k(t)`.
pub fn weak_residuals(traj: &Trajectory, fns: &[TestFunction], t: f64) -> Result<Vec<f64>> {
    let tau = traj.config.tau();
    let r = t / tau;
    if (r - r.round()).abs() < NODE_TOL || t <= 0.0 || t >= traj.end_time() {
        return Err(Error::ContractViolation(format!(
            "weak residual needs a time strictly inside a step interval, got {t}"
        )));
    }
    let (i, _) = traj.locate(t)?;
    let rates = traj.interval_velocities(i)?;
    let psi = traj.at(t)?;
    let dynamics = &traj.dynamics;
    let agents = psi.agents();
    let defects = par::try_map_indexed(agents.len(), |a| {
        let ag = &agents[a];
        let v = dynamics.velocity.eval(&ag.x, &ag.lambda, &psi);
        let op = dynamics.labels.eval(&ag.x, &ag.lambda, &psi)?;
        let (xd, ld) = &rates[a];
        let dx: Vec<f64> = xd.iter().zip(&v).map(|(p, q)| p - q).collect();
        let dl: Vec<f64> = ld.iter().zip(op.weights()).map(|(p, q)| p - q).collect();
        Ok::<_, Error>((dx, dl))
    })?;
    Ok(fns
        .iter()
        .map(|phi| {
            let mut theta = 0.0;
            for ((ag, w), (dx, dl)) in agents.iter().zip(psi.weights()).zip(&defects) {
                let l = ag.lambda.weights();
                let gx: f64 = phi.grad_x(&ag.x, l).iter().zip(dx).map(|(p, q)| p * q).sum();
                let gl: f64 = phi.grad_lambda(&ag.x, l).iter().zip(dl).map(|(p, q)| p * q).sum();
                theta += w * (gx + gl);
            }
            theta
        })
        .collect())
}

pub fn weak_residual(traj: &Trajectory, phi: TestFunction, t: f64) -> Result<f64> {
    Ok(weak_residuals(traj, &[phi], t)?[0])
}
