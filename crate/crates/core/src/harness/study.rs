//! Runs, convergence and residual studies, and log-log rate fitting.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{sample_initial, LabelDynamicsSpec, RateSpec, Scenario, VelocitySpec};
use crate::ensemble::{wasserstein1, AgentState, EmpiricalMeasure};
use crate::error::{Error, Result};
use crate::explicit_scheme::{dictionary, run_explicit, weak_residuals, Dynamics, LabelMode, Trajectory};
use crate::label_geometry::LabelDistribution;
use crate::markov_geometry::MarkovGeometry;
use crate::markov_prox::{el_residual_markov, proximity_condition, run_implicit_markov, MarginMonitor};
use crate::par;
use crate::replicator_prox::{el_residual_hs, run_implicit_replicator_with};

/// Gaps at or below ten times this are treated as solver noise in fits.
pub const SOLVER_TOL: f64 = 1e-10;
pub const BOOTSTRAP_RESAMPLES: usize = 200;

/// A finished (possibly early-terminated) run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub monitor: Option<MarginMonitor>,
}

/// Runs the scenario from its seeded initial measure.
pub fn run_scenario(scenario: &Scenario, k: usize, mode: LabelMode) -> Result<RunOutcome> {
    let initial = sample_initial(scenario, scenario.seed)?;
    run_from(scenario, &initial, k, mode)
}

pub fn run_from(scenario: &Scenario, initial: &EmpiricalMeasure, k: usize, mode: LabelMode) -> Result<RunOutcome> {
    let config = scenario.scheme_config(k, mode)?;
    let velocity = scenario.velocity_field()?;
    match mode {
        LabelMode::Explicit => {
            let dynamics = Dynamics { velocity, labels: scenario.label_operator()? };
            Ok(RunOutcome { trajectory: run_explicit(initial, &dynamics, &config)?, monitor: None })
        }
        LabelMode::ProxHellinger => {
            let j = scenario
                .payoff_kernel()
                .ok_or_else(|| Error::ContractViolation("prox_hellinger needs a payoff kernel".into()))?;
            let trajectory = run_implicit_replicator_with(initial, &velocity, &j, &config, scenario.hs_convention)?;
            Ok(RunOutcome { trajectory, monitor: None })
        }
        LabelMode::ProxMarkov => {
            let q = scenario
                .rate_field()?
                .ok_or_else(|| Error::ContractViolation("prox_markov needs a rate matrix".into()))?;
            let mut monitor = MarginMonitor::new(scenario.delta, scenario.eta)?;
            let trajectory = run_implicit_markov(initial, &velocity, &q, &config, &mut monitor)?;
            Ok(RunOutcome { trajectory, monitor: Some(monitor) })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    Convergence,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub k: usize,
    pub tau: f64,
    pub w1_gap: Option<f64>,
    pub residual_max: Option<f64>,
    pub residual_mean: Option<f64>,
    pub runtime_s: Option<f64>,
    /// Time reached by the run at `k` (below the horizon after a margin stop).
    pub end_time: f64,
    /// Per-time values whose maximum is the row statistic; bootstrap input.
    pub samples: Vec<f64>,
    /// Residual evaluations left out because the proximity condition failed.
    pub excluded: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: String,
    pub kind: StudyKind,
    pub mode: LabelMode,
    pub oracle: bool,
    pub rows: Vec<StudyRow>,
    /// Slope of `log(statistic)` against `log τ`; `None` when undefined.
    pub slope: Option<SlopeFit>,
    pub slope_note: Option<String>,
    pub abort: Option<String>,
    /// The error behind `abort`; not serialized.
    #[serde(skip)]
    pub abort_error: Option<Error>,
}

impl StudyReport {
    pub fn empty(scenario: &str, kind: StudyKind, mode: LabelMode) -> Self {
        Self {
            scenario: scenario.to_string(),
            kind,
            mode,
            oracle: false,
            rows: Vec::new(),
            slope: None,
            slope_note: None,
            abort: None,
            abort_error: None,
        }
    }

    /// The statistic the slope is fitted to.
    pub fn statistic(&self, row: &StudyRow) -> Option<f64> {
        match self.kind {
            StudyKind::Convergence => row.w1_gap,
            StudyKind::Residual => row.residual_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub mode: Option<LabelMode>,
    /// Compare against the closed-form solution instead of the `2k` run.
    pub oracle: bool,
    /// Record wall-clock times (off for byte-identical reports).
    pub timing: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { mode: None, oracle: false, timing: true }
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::ContractViolation(format!("ks must be positive and strictly increasing, got {ks:?}")));
    }
    Ok(())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let m = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

fn row_max(samples: &[f64]) -> Option<f64> {
    samples.iter().copied().reduce(f64::max)
}

/// Point slope over rows whose statistic clears the noise floor, with a
/// percentile interval from resampling each row's per-time samples.
pub fn fit_slope(report: &StudyReport, seed: u64) -> (Option<SlopeFit>, Option<String>) {
    let floor = 10.0 * SOLVER_TOL;
    let usable: Vec<&StudyRow> =
        report.rows.iter().filter(|r| report.statistic(r).is_some_and(|g| g > floor)).collect();
    if usable.len() < 2 {
        return (None, Some(format!("undefined: {} row(s) above the noise floor {floor:e}", usable.len())));
    }
    let points: Vec<(f64, f64)> = usable.iter().map(|r| (r.tau, report.statistic(r).unwrap())).collect();
    let slope = loglog_slope(&points).expect("distinct step sizes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boot = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let pts: Vec<(f64, f64)> = usable
            .iter()
            .map(|r| {
                let m = r.samples.len();
                let g = (0..m).map(|_| r.samples[rng.random_range(0..m)]).fold(0.0, f64::max);
                (r.tau, g)
            })
            .filter(|p| p.1 > floor)
            .collect();
        if let Some(s) = loglog_slope(&pts) {
            boot.push(s);
        }
    }
    boot.sort_by(f64::total_cmp);
    let pick = |q: f64| boot[((q * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
    let (ci_low, ci_high) = if boot.is_empty() { (slope, slope) } else { (pick(0.025), pick(0.975)) };
    (Some(SlopeFit { slope, ci_low, ci_high, points: usable.len() }), None)
}

/// Closed-form solution for one agent under constant rates and per-label drifts.
#[derive(Debug, Clone)]
pub struct ExactSolution {
    generator: DMatrix<f64>,
    z0: DVector<f64>,
    n: usize,
}

impl ExactSolution {
    pub fn for_scenario(scenario: &Scenario, initial: &EmpiricalMeasure) -> Result<Self> {
        let (d, n) = (scenario.d, scenario.n);
        if initial.len() != 1 {
            return Err(Error::ContractViolation("oracle mode needs a single agent".into()));
        }
        let LabelDynamicsSpec::Markov(RateSpec::Constant { matrix }) = &scenario.label_dynamics else {
            return Err(Error::ContractViolation("oracle mode needs a constant rate matrix".into()));
        };
        let drifts = match &scenario.velocity {
            VelocitySpec::Zero => vec![vec![0.0; d]; n],
            VelocitySpec::PerLabelDrift { drifts } => drifts.clone(),
            _ => return Err(Error::ContractViolation("oracle mode needs a zero or per-label drift velocity".into())),
        };
        // z = (λ, x): λ' = Qλ, x' = Cλ
        let mut generator = DMatrix::zeros(n + d, n + d);
        for h in 0..n {
            for l in 0..n {
                generator[(h, l)] = matrix[h][l];
            }
            for j in 0..d {
                generator[(n + j, h)] = drifts[h][j];
            }
        }
        let ag = &initial.agents()[0];
        let z0 = DVector::from_iterator(n + d, ag.lambda.weights().iter().chain(&ag.x).copied());
        Ok(Self { generator, z0, n })
    }

    pub fn at(&self, t: f64) -> Result<EmpiricalMeasure> {
        let z = (&self.generator * t).exp() * &self.z0;
        let lambda = LabelDistribution::new(z.rows(0, self.n).iter().copied().collect())?;
        let x = z.rows(self.n, z.len() - self.n).iter().copied().collect();
        Ok(EmpiricalMeasure::single(AgentState::new(x, lambda)?))
    }
}

fn snapshot_gaps(
    scenario: &Scenario,
    a: &Trajectory,
    reference: impl Fn(f64) -> Result<EmpiricalMeasure>,
    end: f64,
) -> Result<Vec<f64>> {
    let space = scenario.label_space()?;
    a.config()
        .snapshot_times
        .iter()
        .filter(|&&t| t <= end + 1e-12)
        .map(|&t| wasserstein1(&a.at(t.min(a.end_time()))?, &reference(t)?, &space))
        .collect()
}

struct Timed {
    outcome: Result<RunOutcome>,
    seconds: f64,
}

fn run_many(scenario: &Scenario, initial: &EmpiricalMeasure, ks: &[usize], mode: LabelMode) -> Vec<Timed> {
    par::map_indexed(ks.len(), |i| {
        let start = Instant::now();
        let outcome = run_from(scenario, initial, ks[i], mode);
        Timed { outcome, seconds: start.elapsed().as_secs_f64() }
    })
}

fn finish(mut report: StudyReport, seed: u64) -> StudyReport {
    report.rows.sort_by_key(|r| r.k);
    let (slope, note) = fit_slope(&report, seed);
    report.slope = slope;
    report.slope_note = note;
    report
}

/// `g(k)`: the largest W1 distance over snapshot times between the runs at
/// `k` and `2k` (or the closed form in oracle mode), with its fitted rate.
pub fn convergence_study(scenario: &Scenario, ks: &[usize], opts: &StudyOptions) -> Result<StudyReport> {
    check_ks(ks)?;
    let mode = opts.mode.unwrap_or(scenario.mode);
    let mut report = StudyReport::empty(&scenario.name, StudyKind::Convergence, mode);
    report.oracle = opts.oracle;
    let initial = sample_initial(scenario, scenario.seed)?;
    let exact = if opts.oracle { Some(ExactSolution::for_scenario(scenario, &initial)?) } else { None };
    let mut all: Vec<usize> = ks.to_vec();
    if !opts.oracle {
        all.extend(ks.iter().map(|k| 2 * k));
        all.sort_unstable();
        all.dedup();
    }
    let runs = run_many(scenario, &initial, &all, mode);
    let find = |k: usize| &runs[all.iter().position(|&x| x == k).expect("scheduled")];
    for &k in ks {
        let base = find(k);
        let a = match &base.outcome {
            Ok(o) => &o.trajectory,
            Err(e) => {
                report.abort = Some(format!("k = {k}: {e}"));
                report.abort_error = Some(e.clone());
                break;
            }
        };
        let samples = match &exact {
            Some(ex) => snapshot_gaps(scenario, a, |t| ex.at(t), a.end_time()),
            None => match &find(2 * k).outcome {
                Ok(o) => {
                    let b = &o.trajectory;
                    snapshot_gaps(scenario, a, |t| b.at(t.min(b.end_time())), a.end_time().min(b.end_time()))
                }
                Err(e) => Err(e.clone()),
            },
        };
        let samples = match samples {
            Ok(s) => s,
            Err(e) => {
                report.abort = Some(format!("k = {k}: {e}"));
                report.abort_error = Some(e);
                break;
            }
        };
        report.rows.push(StudyRow {
            k,
            tau: a.config().tau(),
            w1_gap: row_max(&samples),
            residual_max: None,
            residual_mean: None,
            runtime_s: opts.timing.then_some(base.seconds),
            end_time: a.end_time(),
            samples,
            excluded: 0,
            evaluated: 0,
        });
    }
    Ok(finish(report, scenario.seed))
}

struct ResidualStats {
    samples: Vec<f64>,
    mean: Option<f64>,
    excluded: usize,
    evaluated: usize,
}

/// Interior times at the middle of the step interval ending at or before each
/// snapshot, so that every `k` samples the same relative position.
fn residual_times(traj: &Trajectory) -> Vec<f64> {
    let tau = traj.config().tau();
    let mut ts: Vec<f64> = traj
        .config()
        .snapshot_times
        .iter()
        .map(|&s| ((s / tau - 0.5).floor().max(0.0) + 0.5) * tau)
        .filter(|&t| t < traj.end_time())
        .collect();
    ts.dedup();
    ts
}

fn explicit_residuals(traj: &Trajectory) -> Result<ResidualStats> {
    let psi0 = &traj.nodes()[0].1;
    let fns = dictionary(psi0.dim(), psi0.labels());
    let mut samples = Vec::new();
    let mut total = 0.0;
    let mut count = 0;
    for t in residual_times(traj) {
        let r = weak_residuals(traj, &fns, t)?;
        let abs: Vec<f64> = r.iter().map(|v| v.abs()).collect();
        total += abs.iter().sum::<f64>();
        count += abs.len();
        samples.push(abs.into_iter().fold(0.0, f64::max));
    }
    Ok(ResidualStats { samples, mean: (count > 0).then(|| total / count as f64), excluded: 0, evaluated: count })
}

fn hellinger_residuals(scenario: &Scenario, traj: &Trajectory) -> Result<ResidualStats> {
    let j = scenario.payoff_kernel().expect("validated");
    let space = scenario.label_space()?;
    let tau = traj.config().tau();
    let mut samples = Vec::new();
    let mut total = 0.0;
    let mut count = 0;
    for (i, tilde) in traj.intermediates().iter().enumerate() {
        let psi = &traj.nodes()[i].1;
        let vals = par::try_map_indexed(psi.len(), |a| {
            let ag = &psi.agents()[a];
            el_residual_hs(&ag.lambda, &tilde.agents()[a].lambda, tau, &ag.x, psi, &j, &space)
        })?;
        total += vals.iter().sum::<f64>();
        count += vals.len();
        samples.push(vals.into_iter().fold(0.0, f64::max));
    }
    Ok(ResidualStats { samples, mean: (count > 0).then(|| total / count as f64), excluded: 0, evaluated: count })
}

fn markov_residuals(scenario: &Scenario, traj: &Trajectory) -> Result<ResidualStats> {
    let q = scenario.rate_field()?.expect("validated");
    let tau = traj.config().tau();
    let mut cache: Vec<(DMatrix<f64>, MarkovGeometry)> = Vec::new();
    let mut samples = Vec::new();
    let (mut total, mut count, mut excluded) = (0.0, 0, 0);
    for (i, tilde) in traj.intermediates().iter().enumerate() {
        let psi = &traj.nodes()[i].1;
        let mut step_max: Option<f64> = None;
        for (a, ag) in psi.agents().iter().enumerate() {
            let qa = q.eval(&ag.x, psi);
            let geom = match cache.iter().find(|(m, _)| *m == qa) {
                Some((_, g)) => g.clone(),
                None => {
                    let g = MarkovGeometry::new(qa.clone())?;
                    cache.push((qa, g.clone()));
                    g
                }
            };
            let new = &tilde.agents()[a].lambda;
            if !proximity_condition(&ag.lambda, new, &geom.constants(scenario.delta)?) {
                excluded += 1;
                continue;
            }
            let r = el_residual_markov(&ag.lambda, new, &geom, tau)?;
            total += r;
            count += 1;
            step_max = Some(step_max.map_or(r, |m: f64| m.max(r)));
        }
        samples.extend(step_max);
    }
    Ok(ResidualStats { samples, mean: (count > 0).then(|| total / count as f64), excluded, evaluated: count + excluded })
}

/// Residual statistics per `k`: the weak-form defect over the test-function
/// dictionary (explicit mode) or the Euler–Lagrange defect of every proximal
/// step (implicit modes).
pub fn residual_study(scenario: &Scenario, ks: &[usize], opts: &StudyOptions) -> Result<StudyReport> {
    check_ks(ks)?;
    let mode = opts.mode.unwrap_or(scenario.mode);
    let mut report = StudyReport::empty(&scenario.name, StudyKind::Residual, mode);
    let initial = sample_initial(scenario, scenario.seed)?;
    let runs = run_many(scenario, &initial, ks, mode);
    for (&k, run) in ks.iter().zip(&runs) {
        let stats = run.outcome.as_ref().map_err(Clone::clone).and_then(|o| {
            let traj = &o.trajectory;
            match mode {
                LabelMode::Explicit => explicit_residuals(traj),
                LabelMode::ProxHellinger => hellinger_residuals(scenario, traj),
                LabelMode::ProxMarkov => markov_residuals(scenario, traj),
            }
            .map(|s| (s, traj.config().tau(), traj.end_time()))
        });
        let (stats, tau, end_time) = match stats {
            Ok(s) => s,
            Err(e) => {
                report.abort = Some(format!("k = {k}: {e}"));
                report.abort_error = Some(e);
                break;
            }
        };
        report.rows.push(StudyRow {
            k,
            tau,
            w1_gap: None,
            residual_max: row_max(&stats.samples),
            residual_mean: stats.mean,
            runtime_s: opts.timing.then_some(run.seconds),
            end_time,
            samples: stats.samples,
            excluded: stats.excluded,
            evaluated: stats.evaluated,
        });
    }
    Ok(finish(report, scenario.seed))
}
