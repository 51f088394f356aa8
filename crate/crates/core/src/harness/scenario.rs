//! Scenario files: a JSON description of one experiment, validated eagerly.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::ensemble::{AgentState, EmpiricalMeasure};
use crate::error::{Error, Result};
use crate::explicit_scheme::{LabelMode, SchemeConfig};
use crate::fields::{
    builtin_velocity, validate_rate_matrix, LabelOperator, PayoffKernel, RateMatrixField, VelocityField, VelocityKind,
};
use crate::label_geometry::{LabelDistribution, LabelMetricSpace};
use crate::markov_geometry::MarkovGeometry;
use crate::markov_prox::{DEFAULT_DELTA, DEFAULT_ETA};
use crate::replicator_prox::HsConvention;

pub const DEFAULT_K: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelMetricSpec {
    /// Only `"discrete"` is accepted.
    Named(String),
    Matrix(Vec<Vec<f64>>),
}

impl Default for LabelMetricSpec {
    fn default() -> Self {
        LabelMetricSpec::Named("discrete".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VelocitySpec {
    Zero,
    PerLabelDrift { drifts: Vec<Vec<f64>> },
    MeanFieldAttraction { kappa: f64 },
    Sum { terms: Vec<VelocitySpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kernel", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    Constant { value: f64 },
    Identity,
    LocalMatrixGame {
        matrix: Vec<Vec<f64>>,
        #[serde(default)]
        range: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rate", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSpec {
    Constant { matrix: Vec<Vec<f64>> },
    BirthDeath { up: Vec<f64>, down: Vec<f64>, tilt: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelDynamicsSpec {
    Replicator(KernelSpec),
    Markov(RateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionLaw {
    /// Independent coordinates, uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
    Point { at: Vec<f64> },
}

impl Default for PositionLaw {
    fn default() -> Self {
        PositionLaw::Uniform { low: -1.0, high: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case", deny_unknown_fields)]
pub enum LabelLaw {
    /// Dirichlet draws moved into the margin `η`; `alpha` defaults to all ones.
    Dirichlet {
        #[serde(default)]
        alpha: Option<Vec<f64>>,
    },
    Fixed { weights: Vec<f64> },
    Uniform,
}

impl Default for LabelLaw {
    fn default() -> Self {
        LabelLaw::Dirichlet { alpha: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSpec {
    pub agents: usize,
    #[serde(default)]
    pub positions: PositionLaw,
    #[serde(default)]
    pub labels: LabelLaw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub d: usize,
    pub n: usize,
    #[serde(default)]
    pub label_metric: LabelMetricSpec,
    pub velocity: VelocitySpec,
    pub label_dynamics: LabelDynamicsSpec,
    pub initial: InitialSpec,
    pub horizon: f64,
    #[serde(default = "default_mode")]
    pub mode: LabelMode,
    #[serde(default)]
    pub hs_convention: HsConvention,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Snapshot times; eight equally spaced times by default.
    #[serde(default)]
    pub snapshots: Option<Vec<f64>>,
    /// Declared wall-clock budget of a default run, in seconds.
    #[serde(default)]
    pub budget_s: Option<f64>,
}

fn default_mode() -> LabelMode {
    LabelMode::Explicit
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

fn default_eta() -> f64 {
    DEFAULT_ETA
}

fn default_k() -> usize {
    DEFAULT_K
}

/// 1-based line of the first occurrence of `"key"`, or of the file start.
fn line_of(text: &str, key: &str) -> usize {
    let quoted = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&quoted)).map_or(1, |i| i + 1)
}

struct Checker<'a> {
    text: &'a str,
}

impl Checker<'_> {
    fn fail(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Scenario(format!("line {}: `{key}`: {msg}", line_of(self.text, key)))
    }

    fn ensure(&self, ok: bool, key: &str, msg: impl std::fmt::Display) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(key, msg))
        }
    }

    fn wrap<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| self.fail(key, e))
    }
}

fn square(rows: &[Vec<f64>], n: usize) -> bool {
    rows.len() == n && rows.iter().all(|r| r.len() == n)
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_scenario(&text)
}

/// Parses and validates a scenario; errors carry the line of the offending field.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    let sc: Scenario = serde_json::from_str(text)
        .map_err(|e| Error::Scenario(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    sc.validate_against(text)?;
    Ok(sc)
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Scenario(e.to_string()))?;
        self.validate_against(&text)
    }

    fn validate_against(&self, text: &str) -> Result<()> {
        let c = Checker { text };
        let (d, n) = (self.d, self.n);
        c.ensure(d >= 1, "d", "space dimension must be at least 1")?;
        c.ensure(n >= 2, "n", "at least two labels are required")?;
        c.ensure(self.horizon > 0.0 && self.horizon.is_finite(), "horizon", "must be positive and finite")?;
        c.ensure(self.k >= 1, "k", "must be at least 1")?;
        c.ensure(self.initial.agents >= 1, "agents", "at least one agent is required")?;
        match &self.label_metric {
            LabelMetricSpec::Named(s) => c.ensure(s == "discrete", "label_metric", format!("unknown metric `{s}`"))?,
            LabelMetricSpec::Matrix(m) => {
                c.ensure(square(m, n), "label_metric", format!("must be {n}x{n}"))?;
                c.wrap("label_metric", LabelMetricSpace::from_matrix(m))?;
            }
        }
        self.check_velocity(&c, &self.velocity)?;
        match &self.label_dynamics {
            LabelDynamicsSpec::Replicator(k) => {
                if let KernelSpec::Constant { value } = k {
                    c.ensure(value.is_finite(), "value", "must be finite")?;
                }
                if let KernelSpec::LocalMatrixGame { matrix, range } = k {
                    c.ensure(square(matrix, n), "matrix", format!("payoff matrix must be {n}x{n}"))?;
                    c.ensure(matrix.iter().flatten().all(|v| v.is_finite()), "matrix", "entries must be finite")?;
                    if let Some(r) = range {
                        c.ensure(*r > 0.0, "range", "must be positive")?;
                    }
                }
                c.ensure(
                    self.mode != LabelMode::ProxMarkov,
                    "mode",
                    "prox_markov needs markov label dynamics",
                )?;
            }
            LabelDynamicsSpec::Markov(r) => {
                c.ensure(
                    self.delta > 0.0 && self.eta > self.delta,
                    "eta",
                    format!("margins need eta > delta > 0, got eta = {}, delta = {}", self.eta, self.delta),
                )?;
                c.ensure(
                    self.mode != LabelMode::ProxHellinger,
                    "mode",
                    "prox_hellinger needs replicator label dynamics",
                )?;
                match r {
                    RateSpec::Constant { matrix } => {
                        c.ensure(square(matrix, n), "matrix", format!("rate matrix must be {n}x{n}"))?;
                        let q = to_matrix(matrix);
                        c.wrap("matrix", validate_rate_matrix(&q))?;
                        if self.mode == LabelMode::ProxMarkov {
                            c.wrap("matrix", MarkovGeometry::new(q).map(|_| ()))?;
                        }
                    }
                    RateSpec::BirthDeath { up, down, tilt } => {
                        c.ensure(up.len() == n - 1, "up", format!("needs {} rates", n - 1))?;
                        c.ensure(down.len() == n - 1, "down", format!("needs {} rates", n - 1))?;
                        c.wrap("tilt", RateMatrixField::birth_death(up.clone(), down.clone(), *tilt).map(|_| ()))?;
                    }
                }
            }
        }
        match &self.initial.positions {
            PositionLaw::Uniform { low, high } => {
                c.ensure(low < high && low.is_finite() && high.is_finite(), "positions", "needs low < high")?
            }
            PositionLaw::Point { at } => c.ensure(at.len() == d, "at", format!("point must have {d} coordinates"))?,
        }
        match &self.initial.labels {
            LabelLaw::Dirichlet { alpha } => {
                if let Some(a) = alpha {
                    c.ensure(a.len() == n && a.iter().all(|v| *v > 0.0), "alpha", format!("needs {n} positive entries"))?;
                }
                c.ensure(
                    self.eta >= 0.0 && self.eta * (n as f64) < 1.0,
                    "eta",
                    format!("margin {} leaves no room for {n} labels", self.eta),
                )?;
            }
            LabelLaw::Fixed { weights } => {
                c.ensure(weights.len() == n, "weights", format!("needs {n} entries"))?;
                c.wrap("weights", LabelDistribution::new(weights.clone()).map(|_| ()))?;
            }
            LabelLaw::Uniform => {}
        }
        if let Some(s) = &self.snapshots {
            c.ensure(!s.is_empty(), "snapshots", "must not be empty")?;
            c.ensure(s.windows(2).all(|w| w[0] <= w[1]), "snapshots", "must be sorted")?;
            c.ensure(s.iter().all(|t| (0.0..=self.horizon).contains(t)), "snapshots", "must lie in [0, horizon]")?;
        }
        if let Some(b) = self.budget_s {
            c.ensure(b > 0.0, "budget_s", "must be positive")?;
        }
        Ok(())
    }

    fn check_velocity(&self, c: &Checker, v: &VelocitySpec) -> Result<()> {
        match v {
            VelocitySpec::Zero => Ok(()),
            VelocitySpec::PerLabelDrift { drifts } => c.ensure(
                drifts.len() == self.n && drifts.iter().all(|r| r.len() == self.d && r.iter().all(|x| x.is_finite())),
                "drifts",
                format!("needs {} finite vectors of length {}", self.n, self.d),
            ),
            VelocitySpec::MeanFieldAttraction { kappa } => c.ensure(kappa.is_finite(), "kappa", "must be finite"),
            VelocitySpec::Sum { terms } => terms.iter().try_for_each(|t| self.check_velocity(c, t)),
        }
    }

    pub fn label_space(&self) -> Result<LabelMetricSpace> {
        match &self.label_metric {
            LabelMetricSpec::Named(_) => Ok(LabelMetricSpace::discrete(self.n)),
            LabelMetricSpec::Matrix(m) => LabelMetricSpace::from_matrix(m),
        }
    }

    pub fn velocity_field(&self) -> Result<VelocityField> {
        fn build(v: &VelocitySpec) -> Result<VelocityField> {
            match v {
                VelocitySpec::Zero => builtin_velocity(VelocityKind::Zero),
                VelocitySpec::PerLabelDrift { drifts } => {
                    builtin_velocity(VelocityKind::PerLabelDrift { drifts: drifts.clone() })
                }
                VelocitySpec::MeanFieldAttraction { kappa } => {
                    builtin_velocity(VelocityKind::MeanFieldAttraction { kappa: *kappa })
                }
                VelocitySpec::Sum { terms } => Ok(VelocityField::sum(terms.iter().map(build).collect::<Result<_>>()?)),
            }
        }
        build(&self.velocity)
    }

    pub fn payoff_kernel(&self) -> Option<PayoffKernel> {
        match &self.label_dynamics {
            LabelDynamicsSpec::Replicator(KernelSpec::Constant { value }) => Some(PayoffKernel::constant(*value)),
            LabelDynamicsSpec::Replicator(KernelSpec::Identity) => Some(PayoffKernel::identity()),
            LabelDynamicsSpec::Replicator(KernelSpec::LocalMatrixGame { matrix, range }) => {
                Some(PayoffKernel::local_matrix_game(matrix.clone(), *range))
            }
            LabelDynamicsSpec::Markov(_) => None,
        }
    }

    pub fn rate_field(&self) -> Result<Option<RateMatrixField>> {
        match &self.label_dynamics {
            LabelDynamicsSpec::Markov(RateSpec::Constant { matrix }) => {
                RateMatrixField::constant(to_matrix(matrix)).map(Some)
            }
            LabelDynamicsSpec::Markov(RateSpec::BirthDeath { up, down, tilt }) => {
                RateMatrixField::birth_death(up.clone(), down.clone(), *tilt).map(Some)
            }
            LabelDynamicsSpec::Replicator(_) => Ok(None),
        }
    }

    pub fn label_operator(&self) -> Result<LabelOperator> {
        match self.payoff_kernel() {
            Some(j) => Ok(LabelOperator::Replicator(j)),
            None => Ok(LabelOperator::Markov(self.rate_field()?.expect("markov dynamics"))),
        }
    }

    pub fn scheme_config(&self, k: usize, mode: LabelMode) -> Result<SchemeConfig> {
        match &self.snapshots {
            Some(s) => SchemeConfig::with_snapshots(self.horizon, k, mode, s.clone()),
            None => SchemeConfig::new(self.horizon, k, mode),
        }
    }
}

/// Deterministic initial measure with uniform agent weights.
pub fn sample_initial(scenario: &Scenario, seed: u64) -> Result<EmpiricalMeasure> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, n) = (scenario.d, scenario.n);
    let spec = &scenario.initial;
    let gammas = match &spec.labels {
        LabelLaw::Dirichlet { alpha } => {
            let alpha = alpha.clone().unwrap_or_else(|| vec![1.0; n]);
            Some(
                alpha
                    .iter()
                    .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::Scenario(format!("alpha: {e}"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        _ => None,
    };
    let mut agents = Vec::with_capacity(spec.agents);
    for _ in 0..spec.agents {
        let x = match &spec.positions {
            PositionLaw::Uniform { low, high } => (0..d).map(|_| rng.random_range(*low..*high)).collect(),
            PositionLaw::Point { at } => at.clone(),
        };
        let lambda = match (&spec.labels, &gammas) {
            (LabelLaw::Dirichlet { .. }, Some(g)) => {
                let draw: Vec<f64> = g.iter().map(|g| g.sample(&mut rng)).collect();
                let s: f64 = draw.iter().sum();
                let eta = scenario.eta;
                // move the draw into the margin: η + (1 − nη) · draw
                let w = draw.iter().map(|v| eta + (1.0 - n as f64 * eta) * v / s).collect();
                LabelDistribution::new(w)?
            }
            (LabelLaw::Fixed { weights }, _) => LabelDistribution::new(weights.clone())?,
            _ => LabelDistribution::uniform(n),
        };
        agents.push(AgentState::new(x, lambda)?);
    }
    EmpiricalMeasure::uniform(agents)
}
