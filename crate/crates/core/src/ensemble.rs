//! Weighted particle clouds on `Y = ℝ^d × simplex`.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::label_geometry::{bl_norm, LabelDistribution, LabelMetricSpace, SignedLabelMeasure};
use crate::{par, transport};

/// Weight-sum tolerance for an empirical measure.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: Vec<f64>,
    pub lambda: LabelDistribution,
}

impl AgentState {
    pub fn new(x: Vec<f64>, lambda: LabelDistribution) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ContractViolation("agent position is not finite".into()));
        }
        Ok(Self { x, lambda })
    }

    /// `|x| + ‖λ‖_BL`.
    pub fn norm(&self, space: &LabelMetricSpace) -> Result<f64> {
        Ok(euclid(&self.x)
            + bl_norm(&SignedLabelMeasure(self.lambda.weights().to_vec()), space)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    agents: Vec<AgentState>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(agents: Vec<AgentState>, weights: Vec<f64>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::ContractViolation("empirical measure needs at least one agent".into()));
        }
        check_dim(agents.len(), weights.len())?;
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::ContractViolation("agent weights must be positive".into()));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::ContractViolation(format!("weights sum to {s}, not 1")));
        }
        let (d, n) = (agents[0].x.len(), agents[0].lambda.n());
        for a in &agents {
            check_dim(d, a.x.len())?;
            check_dim(n, a.lambda.n())?;
        }
        Ok(Self { agents, weights })
    }

    pub fn uniform(agents: Vec<AgentState>) -> Result<Self> {
        let n = agents.len().max(1);
        Self::new(agents, vec![1.0 / n as f64; n])
    }

    pub fn single(agent: AgentState) -> Self {
        Self { agents: vec![agent], weights: vec![1.0] }
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.agents[0].x.len()
    }

    pub fn labels(&self) -> usize {
        self.agents[0].lambda.n()
    }

    pub fn barycenter(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.dim()];
        for (a, w) in self.agents.iter().zip(&self.weights) {
            for (bj, xj) in b.iter_mut().zip(&a.x) {
                *bj += w * xj;
            }
        }
        b
    }

    /// Same weights, agents replaced. Used by the schemes, which never resample.
    pub(crate) fn with_agents(&self, agents: Vec<AgentState>) -> Result<Self> {
        check_dim(self.agents.len(), agents.len())?;
        Ok(Self { agents, weights: self.weights.clone() })
    }
}

pub(crate) fn euclid(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn euclid_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

/// `Σ_a w_a (|x_a| + ‖λ_a‖_BL)`.
pub fn first_moment(psi: &EmpiricalMeasure, space: &LabelMetricSpace) -> Result<f64> {
    let mut m = 0.0;
    for (a, w) in psi.agents.iter().zip(&psi.weights) {
        m += w * a.norm(space)?;
    }
    Ok(m)
}

/// Radius of the smallest `‖·‖_Ȳ` ball around the origin containing the support.
pub fn support_radius(psi: &EmpiricalMeasure, space: &LabelMetricSpace) -> Result<f64> {
    let mut r: f64 = 0.0;
    for a in &psi.agents {
        r = r.max(a.norm(space)?);
    }
    Ok(r)
}

/// Ground cost `|x − x'| + ‖λ − λ'‖_BL`.
pub fn ground_cost(a: &AgentState, b: &AgentState, space: &LabelMetricSpace) -> Result<f64> {
    let dl = SignedLabelMeasure::difference(&a.lambda, &b.lambda)?;
    Ok(euclid_dist(&a.x, &b.x) + bl_norm(&dl, space)?)
}

/// Row-major pairwise ground-cost matrix.
pub fn cost_matrix(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    space: &LabelMetricSpace,
) -> Result<Vec<f64>> {
    let rows = par::try_map_indexed(p.len(), |i| {
        q.agents
            .iter()
            .map(|b| ground_cost(&p.agents[i], b, space))
            .collect::<Result<Vec<f64>>>()
    })?;
    Ok(rows.concat())
}

/// Exact Wasserstein-1 distance between two empirical measures.
pub fn wasserstein1(
    p: &EmpiricalMeasure,
    q: &EmpiricalMeasure,
    space: &LabelMetricSpace,
) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    check_dim(p.labels(), q.labels())?;
    check_dim(space.n(), p.labels())?;
    let cost = cost_matrix(p, q, space)?;
    Ok(transport::solve(&p.weights, &q.weights, &cost).cost.max(0.0))
}

/// Applies `f` to every agent, keeping the weights.
pub fn push_forward<F>(psi: &EmpiricalMeasure, f: F) -> Result<EmpiricalMeasure>
where
    F: Fn(&AgentState) -> Result<AgentState>,
{
    let agents = psi.agents.iter().map(f).collect::<Result<Vec<_>>>()?;
    psi.with_agents(agents)
}
