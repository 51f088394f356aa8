//! Discrete Riemannian structure of a reversible Markov chain on the simplex:
//! relative entropy, Onsager matrix with logarithmic-mean mobility, its
//! inverse metric tensor and the induced geodesic distance.

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::fields::validate_rate_matrix;
use crate::label_geometry::LabelDistribution;

/// Tolerance on detailed balance.
pub const DETAILED_BALANCE_TOL: f64 = 1e-8;
/// Below this component the metric tensor is refused.
pub const METRIC_MARGIN: f64 = 1e-12;
/// Relative gap below which the logarithmic mean uses its series.
pub const LOG_MEAN_SERIES_GAP: f64 = 1e-6;
/// Default number of path segments.
pub const GEODESIC_SEGMENTS: usize = 64;
/// Relative change in length that stops segment doubling.
pub const GEODESIC_REL_TOL: f64 = 1e-7;
const GEODESIC_MAX_SEGMENTS: usize = 1 << 14;
const LBFGS_MEMORY: usize = 8;
const LBFGS_MAX_ITER: usize = 2000;
const PROBE_SEED: u64 = 0x6d61_726b_6f76;
/// Samples per probe of the geometric constants.
pub const PROBE_SAMPLES: usize = 10_000;

/// Unique stationary distribution of an irreducible rate matrix, checked
/// for detailed balance.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<LabelDistribution> {
    validate_rate_matrix(q)?;
    let n = q.nrows();
    let mut a = q.clone();
    for l in 0..n {
        a[(n - 1, l)] = 1.0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let (smin, smax) = sv.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    if !(smin > 1e-12 * smax) {
        return Err(Error::Reducible);
    }
    let mut rhs = DVector::zeros(n);
    rhs[n - 1] = 1.0;
    let sigma = a.full_piv_lu().solve(&rhs).ok_or(Error::Reducible)?;
    if sigma.iter().any(|&s| !(s > 1e-14)) {
        return Err(Error::Reducible);
    }
    let mut defect: f64 = 0.0;
    for h in 0..n {
        for l in 0..n {
            defect = defect.max((q[(h, l)] * sigma[l] - q[(l, h)] * sigma[h]).abs());
        }
    }
    if defect > DETAILED_BALANCE_TOL {
        return Err(Error::NotReversible { defect });
    }
    LabelDistribution::new(sigma.iter().copied().collect())
}

/// `Φ(a, b) = (a − b) / (ln a − ln b)`.
pub fn log_mean(a: f64, b: f64) -> Result<f64> {
    if !(a >= 0.0 && b >= 0.0) {
        return Err(Error::Domain(format!("logarithmic mean of ({a}, {b})")));
    }
    Ok(log_mean_unchecked(a, b))
}

fn log_mean_unchecked(a: f64, b: f64) -> f64 {
    if a == 0.0 || b == 0.0 {
        return 0.0;
    }
    if a == b {
        return a;
    }
    let m = 0.5 * (a + b);
    let x = (a - b) / (a + b);
    if x.abs() < LOG_MEAN_SERIES_GAP {
        let x2 = x * x;
        m * (1.0 - x2 / 3.0 - 4.0 * x2 * x2 / 45.0)
    } else {
        (a - b) / ((a - b) / b).ln_1p()
    }
}

/// `∂Φ/∂a` at positive arguments.
fn log_mean_da(a: f64, b: f64) -> f64 {
    let x = (a - b) / (a + b);
    if x.abs() < LOG_MEAN_SERIES_GAP {
        0.5 - x / 3.0 + x * x / 6.0
    } else {
        let l = ((a - b) / b).ln_1p();
        (1.0 - (a - b) / (a * l)) / l
    }
}

/// A rate matrix at a fixed `(x, Ψ)` with its stationary distribution.
#[derive(Debug, Clone)]
pub struct MarkovGeometry {
    q: DMatrix<f64>,
    sigma: LabelDistribution,
    /// Symmetric edge weights `Q_{hl} σ_l` for `h < l`.
    edges: Vec<(usize, usize, f64)>,
    probes: Arc<Mutex<Vec<(f64, MarkovConstants)>>>,
}

impl MarkovGeometry {
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let sigma = stationary_distribution(&q)?;
        let n = q.nrows();
        let mut edges = Vec::new();
        for l in 1..n {
            for h in 0..l {
                let w = 0.5 * (q[(h, l)] * sigma[l] + q[(l, h)] * sigma[h]);
                if w > 0.0 {
                    edges.push((h, l, w));
                }
            }
        }
        Ok(Self { q, sigma, edges, probes: Arc::new(Mutex::new(Vec::new())) })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn sigma(&self) -> &LabelDistribution {
        &self.sigma
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    fn ratios(&self, lambda: &[f64]) -> Vec<f64> {
        lambda.iter().zip(self.sigma.weights()).map(|(l, s)| l / s).collect()
    }

    /// Probed constants on `Λ^δ`, computed once per `δ`.
    pub fn constants(&self, delta: f64) -> Result<MarkovConstants> {
        let mut cache = self.probes.lock().expect("probe cache poisoned");
        if let Some((_, c)) = cache.iter().find(|(d, _)| *d == delta) {
            return Ok(c.clone());
        }
        let c = probe_constants(self, delta, PROBE_SAMPLES, PROBE_SEED)?;
        cache.push((delta, c.clone()));
        Ok(c)
    }
}

/// `Σ_h λ_h ln(λ_h / σ_h)` with `0 ln 0 = 0`.
pub fn entropy(lambda: &LabelDistribution, geom: &MarkovGeometry) -> f64 {
    entropy_raw(lambda.weights(), geom)
}

pub(crate) fn entropy_raw(lambda: &[f64], geom: &MarkovGeometry) -> f64 {
    lambda
        .iter()
        .zip(geom.sigma.weights())
        .map(|(&l, &s)| if l > 0.0 { l * (l / s).ln() } else { 0.0 })
        .sum()
}

/// Zero-sum projection of `∇E = ln(λ/σ) + 1`.
pub(crate) fn entropy_gradient(lambda: &[f64], geom: &MarkovGeometry) -> Vec<f64> {
    let g: Vec<f64> = lambda.iter().zip(geom.sigma.weights()).map(|(l, s)| (l / s).ln()).collect();
    project_zero_sum(&g)
}

pub(crate) fn project_zero_sum(v: &[f64]) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| x - mean).collect()
}

/// `K = Σ_{h<l} Q_{hl} σ_l Φ(λ_h/σ_h, λ_l/σ_l) (e_h − e_l)(e_h − e_l)ᵀ`.
pub fn onsager_matrix(lambda: &LabelDistribution, geom: &MarkovGeometry) -> DMatrix<f64> {
    onsager_raw(lambda.weights(), geom)
}

pub(crate) fn onsager_raw(lambda: &[f64], geom: &MarkovGeometry) -> DMatrix<f64> {
    let n = geom.n();
    let rho = geom.ratios(lambda);
    let mut k = DMatrix::zeros(n, n);
    for &(h, l, w) in &geom.edges {
        let c = w * log_mean_unchecked(rho[h].max(0.0), rho[l].max(0.0));
        k[(h, h)] += c;
        k[(l, l)] += c;
        k[(h, l)] -= c;
        k[(l, h)] -= c;
    }
    k
}

/// Inverse of `K` on the zero-sum hyperplane, extended by zero on constants.
pub fn metric_tensor(lambda: &LabelDistribution, geom: &MarkovGeometry) -> Result<DMatrix<f64>> {
    metric_raw(lambda.weights(), geom)
}

pub(crate) fn metric_raw(lambda: &[f64], geom: &MarkovGeometry) -> Result<DMatrix<f64>> {
    check_dim(geom.n(), lambda.len())?;
    let min = lambda.iter().copied().fold(f64::INFINITY, f64::min);
    if !(min >= METRIC_MARGIN) {
        return Err(Error::NearSingularMetric { margin: min });
    }
    let n = geom.n();
    let j = DMatrix::from_element(n, n, 1.0 / n as f64);
    let a = onsager_raw(lambda, geom) + &j;
    let inv = match a.clone().cholesky() {
        Some(c) => c.inverse(),
        None => a.try_inverse().ok_or(Error::NearSingularMetric { margin: min })?,
    };
    let g = inv - j;
    Ok((&g + g.transpose()) * 0.5)
}

/// Orthonormal basis of the zero-sum hyperplane as columns.
pub(crate) fn zero_sum_basis(n: usize) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(n, n - 1);
    for c in 0..n - 1 {
        let k = (c + 1) as f64;
        let s = 1.0 / (k * (k + 1.0)).sqrt();
        for r in 0..=c {
            b[(r, c)] = s;
        }
        b[(c + 1, c)] = -k * s;
    }
    b
}

/// Extreme eigenvalues of a symmetric matrix restricted to the zero-sum hyperplane.
pub(crate) fn restricted_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let b = zero_sum_basis(m.nrows());
    let r = b.transpose() * m * &b;
    let e = r.symmetric_eigen().eigenvalues;
    e.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicPath {
    pub nodes: Vec<LabelDistribution>,
    pub length: f64,
}

impl GeodesicPath {
    pub fn segments(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

struct PathEval {
    energy: f64,
    length: f64,
    grad: Vec<Vec<f64>>,
    end_grad: Vec<f64>,
}

fn evaluate_path(nodes: &[Vec<f64>], geom: &MarkovGeometry, with_grad: bool) -> Result<PathEval> {
    let m = nodes.len() - 1;
    let n = geom.n();
    let mut energy = 0.0;
    let mut length = 0.0;
    let mut us = Vec::with_capacity(m);
    let mut gms = Vec::with_capacity(m);
    for j in 0..m {
        let mid: Vec<f64> = nodes[j].iter().zip(&nodes[j + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
        let delta: Vec<f64> = nodes[j].iter().zip(&nodes[j + 1]).map(|(a, b)| b - a).collect();
        let g = metric_raw(&mid, geom)?;
        let u = &g * DVector::from_column_slice(&delta);
        let term: f64 = u.iter().zip(&delta).map(|(a, b)| a * b).sum::<f64>().max(0.0);
        energy += term;
        length += term.sqrt();
        if with_grad {
            let rho = geom.ratios(&mid);
            let mut gm = vec![0.0; n];
            for &(h, l, w) in &geom.edges {
                let du2 = (u[h] - u[l]).powi(2);
                gm[h] -= w * du2 * log_mean_da(rho[h], rho[l]) / geom.sigma[h];
                gm[l] -= w * du2 * log_mean_da(rho[l], rho[h]) / geom.sigma[l];
            }
            us.push(u);
            gms.push(gm);
        }
    }
    let mut grad = Vec::new();
    let mut end_grad = Vec::new();
    if with_grad {
        let mf = m as f64;
        let last: Vec<f64> = (0..n).map(|k| mf * (2.0 * us[m - 1][k] + 0.5 * gms[m - 1][k])).collect();
        end_grad = project_zero_sum(&last);
        for j in 1..m {
            let g: Vec<f64> = (0..n)
                .map(|k| mf * (2.0 * us[j - 1][k] - 2.0 * us[j][k] + 0.5 * (gms[j - 1][k] + gms[j][k])))
                .collect();
            grad.push(project_zero_sum(&g));
        }
    }
    Ok(PathEval { energy: energy * m as f64, length, grad, end_grad })
}

fn dot(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()).sum()
}

fn axpy(x: &[Vec<f64>], a: f64, d: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter().zip(d).map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + a * v).collect()).collect()
}

/// Minimizes the discrete path energy over the interior nodes by L-BFGS.
fn optimize_path(
    mut nodes: Vec<Vec<f64>>,
    geom: &MarkovGeometry,
    skip_1d: bool,
) -> Result<(Vec<Vec<f64>>, PathEval)> {
    let m = nodes.len() - 1;
    let mut ev = evaluate_path(&nodes, geom, true)?;
    if (skip_1d && geom.n() <= 2) || m < 2 {
        // in one dimension the path is forced and its length is parametrization-free
        return Ok((nodes, ev));
    }
    let mut hist: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>, f64)> = Vec::new();
    let gtol = 1e-12 * (1.0 + ev.energy);
    let mut flat = 0;
    for _ in 0..LBFGS_MAX_ITER {
        let g = ev.grad.clone();
        let gn = dot(&g, &g).sqrt();
        if gn <= gtol {
            break;
        }
        // two-loop recursion
        let mut qv = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &qv);
            qv = axpy(&qv, -a, y);
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = dot(s, y) / dot(y, y);
            qv.iter_mut().for_each(|v| v.iter_mut().for_each(|c| *c *= gamma));
        } else {
            let scale = 1.0 / (m as f64 * gn).max(1e-300) * 1e-2;
            qv.iter_mut().for_each(|v| v.iter_mut().for_each(|c| *c *= scale));
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &qv);
            qv = axpy(&qv, a - b, s);
        }
        let mut dir: Vec<Vec<f64>> = qv.iter().map(|v| v.iter().map(|c| -c).collect()).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            let scale = 1e-2 / (m as f64 * gn).max(1e-300);
            dir = g.iter().map(|v| v.iter().map(|c| -c * scale).collect()).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = nodes.clone();
            let moved = axpy(&nodes[1..m], step, &dir);
            trial[1..m].clone_from_slice(&moved);
            if let Ok(e) = evaluate_path(&trial, geom, true) {
                if e.energy <= ev.energy + 1e-4 * step * slope {
                    accepted = Some((trial, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, e)) = accepted else {
            break;
        };
        let s: Vec<Vec<f64>> =
            trial[1..m].iter().zip(&nodes[1..m]).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect();
        let y: Vec<Vec<f64>> =
            e.grad.iter().zip(&g).map(|(a, b)| a.iter().zip(b).map(|(p, q)| p - q).collect()).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > LBFGS_MEMORY {
                hist.remove(0);
            }
        }
        let decrease = ev.energy - e.energy;
        nodes = trial;
        ev = e;
        flat = if decrease <= 1e-14 * ev.energy { flat + 1 } else { 0 };
        if flat >= 3 {
            break;
        }
    }
    Ok((nodes, ev))
}

/// Minimal discrete energy `m Σ ⟨G(mid_j) Δ_j, Δ_j⟩` of an `m`-segment path
/// from `from` to `to`, its gradient in `to` (exact by the envelope
/// property of the optimized interior nodes) and the optimal nodes.
/// `warm` supplies interior nodes of a previous solve; they are shifted
/// affinely to the new endpoint.
pub(crate) fn path_energy(
    from: &[f64],
    to: &[f64],
    geom: &MarkovGeometry,
    m: usize,
    warm: Option<&[Vec<f64>]>,
) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let nodes = match warm {
        Some(w) if w.len() == m + 1 => {
            let old_end = &w[m];
            (0..=m)
                .map(|j| {
                    let s = j as f64 / m as f64;
                    w[j].iter().zip(old_end).zip(to).map(|((p, o), t)| p + s * (t - o)).collect()
                })
                .collect::<Vec<Vec<f64>>>()
        }
        _ => straight(from, to, m),
    };
    let (nodes, ev) = match optimize_path(nodes, geom, false) {
        Ok(r) => r,
        Err(_) => optimize_path(straight(from, to, m), geom, false)?,
    };
    Ok((ev.energy, ev.end_grad, nodes))
}

/// Exact distance between two-state labels with first components `a` and
/// `b`, by composite Gauss–Legendre quadrature of the line element, and
/// its derivative in `b`.
pub(crate) fn two_state_distance(a: f64, b: f64, geom: &MarkovGeometry) -> Result<(f64, f64)> {
    if geom.n() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: geom.n() });
    }
    let w: f64 = geom.edges.iter().map(|e| e.2).sum();
    let (s0, s1) = (geom.sigma[0], geom.sigma[1]);
    let speed = |r: f64| -> Result<f64> { Ok(1.0 / (w * log_mean(r / s0, (1.0 - r) / s1)?).sqrt()) };
    const NODES: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const WEIGHTS: [f64; 5] = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
    let (lo, hi) = (a.min(b), a.max(b));
    let rule = |panels: usize| -> Result<f64> {
        let h = (hi - lo) / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let c = lo + (p as f64 + 0.5) * h;
            for (x, wt) in NODES.iter().zip(&WEIGHTS) {
                total += wt * speed(c + 0.5 * h * x)?;
            }
        }
        Ok(0.5 * h * total)
    };
    let mut panels = 4;
    let mut prev = rule(panels)?;
    let d = loop {
        panels *= 2;
        let next = rule(panels)?;
        if (next - prev).abs() <= 1e-14 * next.max(1e-300) || panels >= 1 << 12 {
            break next;
        }
        prev = next;
    };
    let sign = if b >= a { 1.0 } else { -1.0 };
    Ok((d, sign * speed(b)?))
}

fn check_endpoints(l1: &LabelDistribution, l2: &LabelDistribution, geom: &MarkovGeometry) -> Result<()> {
    check_dim(geom.n(), l1.n())?;
    check_dim(geom.n(), l2.n())?;
    let min = l1.min_component().min(l2.min_component());
    if !(min >= METRIC_MARGIN) {
        return Err(Error::NearSingularMetric { margin: min });
    }
    Ok(())
}

fn straight(l1: &[f64], l2: &[f64], m: usize) -> Vec<Vec<f64>> {
    (0..=m)
        .map(|j| {
            let s = j as f64 / m as f64;
            l1.iter().zip(l2).map(|(a, b)| a + s * (b - a)).collect()
        })
        .collect()
}

fn into_path(
    l1: &LabelDistribution,
    l2: &LabelDistribution,
    nodes: Vec<Vec<f64>>,
    length: f64,
) -> Result<GeodesicPath> {
    let m = nodes.len() - 1;
    let mut nodes = nodes.into_iter().map(LabelDistribution::new).collect::<Result<Vec<_>>>()?;
    nodes[0] = l1.clone();
    nodes[m] = l2.clone();
    Ok(GeodesicPath { nodes, length })
}

/// Shortest `m`-segment piecewise-linear path, started from the chord.
pub fn geodesic_distance(
    l1: &LabelDistribution,
    l2: &LabelDistribution,
    geom: &MarkovGeometry,
    m: usize,
) -> Result<GeodesicPath> {
    check_endpoints(l1, l2, geom)?;
    if m < 1 {
        return Err(Error::ContractViolation("a path needs at least one segment".into()));
    }
    if l1 == l2 {
        return into_path(l1, l2, vec![l1.weights().to_vec(), l2.weights().to_vec()], 0.0);
    }
    let (nodes, len) = optimize_path(straight(l1.weights(), l2.weights(), m), geom, true)
        .map_err(|e| Error::GeodesicFailure(e.to_string()))?;
    into_path(l1, l2, nodes, len.length)
}

/// Doubles the segment count from `m0` until the length changes by less than
/// [`GEODESIC_REL_TOL`]; each level starts from the previous path refined.
pub fn geodesic_distance_refined(
    l1: &LabelDistribution,
    l2: &LabelDistribution,
    geom: &MarkovGeometry,
    m0: usize,
) -> Result<GeodesicPath> {
    check_endpoints(l1, l2, geom)?;
    if l1 == l2 {
        return into_path(l1, l2, vec![l1.weights().to_vec(), l2.weights().to_vec()], 0.0);
    }
    let fail = |e: Error| Error::GeodesicFailure(e.to_string());
    let mut m = m0.max(2);
    let (mut nodes, ev) = optimize_path(straight(l1.weights(), l2.weights(), m), geom, true).map_err(fail)?;
    let mut len = ev.length;
    loop {
        if 2 * m > GEODESIC_MAX_SEGMENTS {
            return Err(Error::GeodesicFailure(format!("no length convergence with {m} segments")));
        }
        let mut fine = Vec::with_capacity(2 * m + 1);
        for j in 0..m {
            fine.push(nodes[j].clone());
            fine.push(nodes[j].iter().zip(&nodes[j + 1]).map(|(a, b)| 0.5 * (a + b)).collect());
        }
        fine.push(nodes[m].clone());
        let (next, ev) = optimize_path(fine, geom, true).map_err(fail)?;
        let next_len = ev.length;
        m *= 2;
        let change = (next_len - len).abs() / next_len.max(1e-300);
        nodes = next;
        len = next_len;
        if change < GEODESIC_REL_TOL {
            break;
        }
    }
    into_path(l1, l2, nodes, len)
}

/// Constants of the metric sandwich and Lipschitz/Hölder bounds, estimated
/// by sampling `Λ^δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovConstants {
    pub delta: f64,
    /// `inf ⟨Gμ, μ⟩/|μ|²` over sampled points of `Λ^δ`.
    pub c1: f64,
    /// `sup ⟨Gμ, μ⟩/|μ|²` over sampled points of `Λ^δ`.
    pub c3: f64,
    /// Global lower bound `√(σ_min / λ_max(L_w))` from `Φ ≤ 1/σ_min`.
    pub m1: f64,
    pub m2: f64,
    /// Lipschitz constant of `G` on `Λ^δ` (operator norm).
    pub l_g: f64,
    /// Lipschitz constant of `E` on `Λ^δ`.
    pub l_e: f64,
    pub alpha: f64,
    /// Hölder constant of `E` with exponent `alpha` on the whole simplex.
    pub c_e_alpha: f64,
}

impl MarkovConstants {
    pub fn m3(&self) -> f64 {
        self.l_g.sqrt()
    }

    pub fn m4(&self) -> f64 {
        self.l_g.sqrt() * (self.c3 / self.c1).powf(0.75)
    }
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize, alpha: f64) -> Vec<f64> {
    let g = Gamma::new(alpha, 1.0).expect("positive shape");
    let mut w: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|v| *v /= s);
    } else {
        w = vec![1.0 / n as f64; n];
    }
    w
}

/// Uniform-ish point of `Λ^δ`: an affine image of a Dirichlet draw.
pub(crate) fn sample_margin(rng: &mut ChaCha8Rng, n: usize, delta: f64, alpha: f64) -> Vec<f64> {
    let u = dirichlet(rng, n, alpha);
    let free = 1.0 - n as f64 * delta;
    u.iter().map(|v| delta + free * v).collect()
}

pub fn probe_constants(geom: &MarkovGeometry, delta: f64, samples: usize, seed: u64) -> Result<MarkovConstants> {
    let n = geom.n();
    if !(delta > 0.0 && n as f64 * delta < 1.0) {
        return Err(Error::ContractViolation(format!("margin {delta} leaves no interior for n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c1 = f64::INFINITY;
    let mut c3: f64 = 0.0;
    let mut l_g: f64 = 0.0;
    let mut l_e: f64 = 0.0;
    let mut c_e: f64 = 0.0;
    let alpha = 0.5;
    let free = 1.0 - n as f64 * delta;
    for i in 0..samples.max(n + 1) {
        // vertices of Λ^δ and σ first, then interior draws
        let a: Vec<f64> = if i < n {
            (0..n).map(|h| if h == i { delta + free } else { delta }).collect()
        } else if i == n {
            geom.sigma.weights().to_vec()
        } else {
            sample_margin(&mut rng, n, delta, if i % 2 == 0 { 0.3 } else { 1.0 })
        };
        if a.iter().any(|&v| v < delta - 1e-15) {
            continue;
        }
        let ga = metric_raw(&a, geom)?;
        let (lo, hi) = restricted_extremes(&ga);
        c1 = c1.min(lo);
        c3 = c3.max(hi);
        let ge = entropy_gradient(&a, geom);
        l_e = l_e.max(ge.iter().map(|v| v * v).sum::<f64>().sqrt());
        // nearby partner for the Lipschitz quotient of G
        let b = sample_margin(&mut rng, n, delta, 1.0);
        let s = 0.05;
        let b: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + s * (q - p)).collect();
        let dist = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        if dist > 0.0 {
            let gb = metric_raw(&b, geom)?;
            let diff = &ga - &gb;
            let op = diff.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            l_g = l_g.max(op / dist);
        }
        // Hölder quotient of E over the closed simplex
        let u = dirichlet(&mut rng, n, 0.2);
        let v = dirichlet(&mut rng, n, 0.2);
        let duv = u.iter().zip(&v).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        if duv > 1e-12 {
            let de = (entropy_raw(&u, geom) - entropy_raw(&v, geom)).abs();
            c_e = c_e.max(de / duv.powf(alpha));
        }
    }
    let mut lw = DMatrix::zeros(n, n);
    for &(h, l, w) in &geom.edges {
        lw[(h, h)] += w;
        lw[(l, l)] += w;
        lw[(h, l)] -= w;
        lw[(l, h)] -= w;
    }
    let (_, lmax) = restricted_extremes(&lw);
    let smin = geom.sigma.min_component();
    Ok(MarkovConstants {
        delta,
        c1,
        c3,
        m1: (smin / lmax).sqrt(),
        m2: c3.sqrt(),
        l_g,
        l_e,
        alpha,
        c_e_alpha: c_e,
    })
}
