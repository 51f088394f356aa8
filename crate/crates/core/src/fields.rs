//! Driving fields: velocity fields on positions and label operators on the
//! simplex, with the replicator and reversible-Markov instances.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::ensemble::{euclid, AgentState, EmpiricalMeasure};
use crate::error::{check_dim, Error, Result};
use crate::label_geometry::{LabelDistribution, SignedLabelMeasure};

/// Zero-sum tolerance for label-operator outputs and rate-matrix columns.
pub const ZERO_SUM_TOL: f64 = 1e-10;

type KernelFn = dyn Fn(&[f64], usize, &[f64], usize) -> f64 + Send + Sync;
type RateFn = dyn Fn(&[f64], &EmpiricalMeasure) -> DMatrix<f64> + Send + Sync;
type VelocityFn = dyn Fn(&[f64], &LabelDistribution, &EmpiricalMeasure) -> Vec<f64> + Send + Sync;
type OperatorFn =
    dyn Fn(&[f64], &LabelDistribution, &EmpiricalMeasure) -> SignedLabelMeasure + Send + Sync;

/// Payoff `J(x, u, x', u')` with `|J| ≤ M_J (1 + |x| + |x'|)`.
#[derive(Clone)]
pub struct PayoffKernel {
    f: Arc<KernelFn>,
    growth: f64,
    name: String,
}

impl fmt::Debug for PayoffKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PayoffKernel").field("name", &self.name).field("growth", &self.growth).finish()
    }
}

impl PayoffKernel {
    pub fn new<F>(name: impl Into<String>, growth: f64, f: F) -> Self
    where
        F: Fn(&[f64], usize, &[f64], usize) -> f64 + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), growth, name: name.into() }
    }

    /// `J ≡ c`.
    pub fn constant(c: f64) -> Self {
        Self::new("constant", c.abs(), move |_, _, _, _| c)
    }

    /// `J = 1` when both players use the same pure strategy.
    pub fn identity() -> Self {
        Self::new("identity", 1.0, |_, u, _, v| if u == v { 1.0 } else { 0.0 })
    }

    /// `J = A[u][u'] · exp(−|x − x'|² / 2ℓ²)`; no spatial decay when `range` is `None`.
    pub fn local_matrix_game(matrix: Vec<Vec<f64>>, range: Option<f64>) -> Self {
        let growth = matrix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new("local_matrix_game", growth, move |x, u, y, v| {
            let a = matrix[u][v];
            match range {
                Some(l) => {
                    let r2: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
                    a * (-r2 / (2.0 * l * l)).exp()
                }
                None => a,
            }
        })
    }

    pub fn eval(&self, x: &[f64], u: usize, y: &[f64], v: usize) -> f64 {
        (self.f)(x, u, y, v)
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn name(&self) -> &str {
        &self.name
    }
}

/// `(J * Ψ)(x, h) = Σ_a w_a Σ_h' J(x, h, x_a, h') λ_{a,h'}` for every `h`.
pub fn payoff_vector(x: &[f64], n: usize, psi: &EmpiricalMeasure, j: &PayoffKernel) -> Vec<f64> {
    let mut p = vec![0.0; n];
    for (a, w) in psi.agents().iter().zip(psi.weights()) {
        let la = a.lambda.weights();
        for (h, ph) in p.iter_mut().enumerate() {
            let mut s = 0.0;
            for (hp, &l) in la.iter().enumerate() {
                if l != 0.0 {
                    s += j.eval(x, h, &a.x, hp) * l;
                }
            }
            *ph += w * s;
        }
    }
    p
}

/// Replicator operator `((J*Ψ)(x,·) − ⟨J*Ψ, λ⟩(x)) λ`.
pub fn replicator_operator(
    x: &[f64],
    lambda: &LabelDistribution,
    psi: &EmpiricalMeasure,
    j: &PayoffKernel,
) -> Result<SignedLabelMeasure> {
    if psi.is_empty() {
        return Err(Error::ContractViolation("replicator operator needs a nonempty measure".into()));
    }
    check_dim(psi.dim(), x.len())?;
    check_dim(psi.labels(), lambda.n())?;
    let n = lambda.n();
    let p = payoff_vector(x, n, psi, j);
    Ok(replicator_from_payoff(&p, lambda))
}

pub(crate) fn replicator_from_payoff(p: &[f64], lambda: &LabelDistribution) -> SignedLabelMeasure {
    let l = lambda.weights();
    let mean: f64 = p.iter().zip(l).map(|(a, b)| a * b).sum();
    SignedLabelMeasure(p.iter().zip(l).map(|(ph, lh)| (ph - mean) * lh).collect())
}

/// The map `(x, Ψ) ↦ Q(x, Ψ)`; `Q[h][l]` is the rate from `l` to `h`.
#[derive(Clone)]
pub struct RateMatrixField {
    f: Arc<RateFn>,
    growth: f64,
    n: usize,
    name: String,
}

impl fmt::Debug for RateMatrixField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RateMatrixField").field("name", &self.name).field("n", &self.n).finish()
    }
}

impl RateMatrixField {
    pub fn new<F>(name: impl Into<String>, n: usize, growth: f64, f: F) -> Self
    where
        F: Fn(&[f64], &EmpiricalMeasure) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), growth, n, name: name.into() }
    }

    pub fn constant(q: DMatrix<f64>) -> Result<Self> {
        validate_rate_matrix(&q)?;
        let growth = q.norm();
        let n = q.nrows();
        Ok(Self::new("constant", n, growth, move |_, _| q.clone()))
    }

    /// Nearest-neighbour chain with `up[h]` the rate `h → h+1` and `down[h]`
    /// the rate `h+1 → h`, modulated by `1 ± tilt·tanh(x_0 − b_0)` where `b`
    /// is the barycenter of `Ψ`. Tridiagonal chains are always reversible.
    pub fn birth_death(up: Vec<f64>, down: Vec<f64>, tilt: f64) -> Result<Self> {
        if up.len() != down.len() {
            return Err(Error::DimensionMismatch { expected: up.len(), got: down.len() });
        }
        if up.iter().chain(&down).any(|&r| !(r > 0.0)) {
            return Err(Error::InvalidRateMatrix("birth-death rates must be positive".into()));
        }
        if tilt.abs() >= 1.0 {
            return Err(Error::InvalidRateMatrix("|tilt| must be < 1".into()));
        }
        let n = up.len() + 1;
        let scale = 1.0 + tilt.abs();
        let mut frob = 0.0;
        for h in 0..n {
            let out_up = if h + 1 < n { up[h] } else { 0.0 };
            let out_down = if h > 0 { down[h - 1] } else { 0.0 };
            frob += (out_up + out_down).powi(2) + out_up.powi(2) + out_down.powi(2);
        }
        let growth = scale * frob.sqrt();
        Ok(Self::new("birth_death", n, growth, move |x, psi| {
            let s = if tilt != 0.0 && !x.is_empty() {
                tilt * (x[0] - psi.barycenter()[0]).tanh()
            } else {
                0.0
            };
            let mut q = DMatrix::zeros(n, n);
            for h in 0..n - 1 {
                q[(h + 1, h)] = up[h] * (1.0 + s);
                q[(h, h + 1)] = down[h] * (1.0 - s);
            }
            for h in 0..n {
                let out: f64 = (0..n).filter(|&l| l != h).map(|l| q[(l, h)]).sum();
                q[(h, h)] = -out;
            }
            q
        }))
    }

    pub fn eval(&self, x: &[f64], psi: &EmpiricalMeasure) -> DMatrix<f64> {
        (self.f)(x, psi)
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

/// Checks nonnegative off-diagonal rates and zero column sums.
pub fn validate_rate_matrix(q: &DMatrix<f64>) -> Result<()> {
    if q.nrows() != q.ncols() {
        return Err(Error::InvalidRateMatrix("matrix is not square".into()));
    }
    let n = q.nrows();
    let scale = q.amax().max(1.0);
    for l in 0..n {
        let mut col = 0.0;
        for h in 0..n {
            let v = q[(h, l)];
            if !v.is_finite() {
                return Err(Error::InvalidRateMatrix(format!("entry ({h}, {l}) is not finite")));
            }
            if h != l && v < 0.0 {
                return Err(Error::InvalidRateMatrix(format!("negative rate at ({h}, {l})")));
            }
            col += v;
        }
        if col.abs() > ZERO_SUM_TOL * scale {
            return Err(Error::InvalidRateMatrix(format!("column {l} sums to {col:e}")));
        }
    }
    Ok(())
}

/// `Q(x, Ψ) λ`.
pub fn markov_operator(
    x: &[f64],
    lambda: &LabelDistribution,
    psi: &EmpiricalMeasure,
    q: &RateMatrixField,
) -> Result<SignedLabelMeasure> {
    let m = q.eval(x, psi);
    check_dim(m.nrows(), lambda.n())?;
    validate_rate_matrix(&m)?;
    Ok(apply_rate(&m, lambda))
}

pub(crate) fn apply_rate(q: &DMatrix<f64>, lambda: &LabelDistribution) -> SignedLabelMeasure {
    let l = lambda.weights();
    let n = l.len();
    SignedLabelMeasure((0..n).map(|h| (0..n).map(|k| q[(h, k)] * l[k]).sum()).collect())
}

/// Velocity `v_Ψ(x, λ)` with `|v| ≤ M_v (1 + ‖y‖ + m_1(Ψ))`.
#[derive(Clone)]
pub struct VelocityField {
    f: Arc<VelocityFn>,
    growth: f64,
    name: String,
}

impl fmt::Debug for VelocityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityField").field("name", &self.name).field("growth", &self.growth).finish()
    }
}

impl VelocityField {
    pub fn new<F>(name: impl Into<String>, growth: f64, f: F) -> Self
    where
        F: Fn(&[f64], &LabelDistribution, &EmpiricalMeasure) -> Vec<f64> + Send + Sync + 'static,
    {
        Self { f: Arc::new(f), growth, name: name.into() }
    }

    pub fn eval(&self, x: &[f64], lambda: &LabelDistribution, psi: &EmpiricalMeasure) -> Vec<f64> {
        (self.f)(x, lambda, psi)
    }

    pub fn growth(&self) -> f64 {
        self.growth
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Pointwise sum; growth constants add.
    pub fn sum(fields: Vec<VelocityField>) -> Self {
        let growth = fields.iter().map(|f| f.growth).sum();
        let name = fields.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join("+");
        Self::new(name, growth, move |x, l, psi| {
            let mut v = vec![0.0; x.len()];
            for f in &fields {
                for (a, b) in v.iter_mut().zip(f.eval(x, l, psi)) {
                    *a += b;
                }
            }
            v
        })
    }
}

/// Registry of concrete velocity fields.
#[derive(Debug, Clone, PartialEq)]
pub enum VelocityKind {
    /// `Σ_h c_h λ_h` with one constant drift vector per label.
    PerLabelDrift { drifts: Vec<Vec<f64>> },
    /// `κ (barycenter(Ψ) − x)`.
    MeanFieldAttraction { kappa: f64 },
    Zero,
}

pub fn builtin_velocity(kind: VelocityKind) -> Result<VelocityField> {
    match kind {
        VelocityKind::Zero => Ok(VelocityField::new("zero", 0.0, |x, _, _| vec![0.0; x.len()])),
        VelocityKind::MeanFieldAttraction { kappa } => {
            if !kappa.is_finite() {
                return Err(Error::ContractViolation("kappa must be finite".into()));
            }
            Ok(VelocityField::new("mean_field_attraction", kappa.abs(), move |x, _, psi| {
                psi.barycenter().iter().zip(x).map(|(b, xi)| kappa * (b - xi)).collect()
            }))
        }
        VelocityKind::PerLabelDrift { drifts } => {
            let d = drifts.first().map(Vec::len).unwrap_or(0);
            if drifts.iter().any(|c| c.len() != d) {
                return Err(Error::ContractViolation("drift vectors must share one dimension".into()));
            }
            let growth = drifts.iter().map(|c| euclid(c)).fold(0.0, f64::max);
            Ok(VelocityField::new("per_label_drift", growth, move |_, l, _| {
                let mut v = vec![0.0; d];
                for (c, &w) in drifts.iter().zip(l.weights()) {
                    for (vj, cj) in v.iter_mut().zip(c) {
                        *vj += w * cj;
                    }
                }
                v
            }))
        }
    }
}

/// Label operator `T_Ψ(x, λ)`: zero-sum, with growth constant `M_T`.
#[derive(Clone)]
pub enum LabelOperator {
    Zero,
    Replicator(PayoffKernel),
    Markov(RateMatrixField),
    Custom { f: Arc<OperatorFn>, growth: f64 },
}

impl fmt::Debug for LabelOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => write!(f, "Zero"),
            Self::Replicator(j) => write!(f, "Replicator({})", j.name()),
            Self::Markov(q) => write!(f, "Markov({})", q.name),
            Self::Custom { growth, .. } => write!(f, "Custom(M_T = {growth})"),
        }
    }
}

impl LabelOperator {
    pub fn custom<F>(growth: f64, f: F) -> Self
    where
        F: Fn(&[f64], &LabelDistribution, &EmpiricalMeasure) -> SignedLabelMeasure
            + Send
            + Sync
            + 'static,
    {
        Self::Custom { f: Arc::new(f), growth }
    }

    pub fn eval(
        &self,
        x: &[f64],
        lambda: &LabelDistribution,
        psi: &EmpiricalMeasure,
    ) -> Result<SignedLabelMeasure> {
        match self {
            Self::Zero => Ok(SignedLabelMeasure::zeros(lambda.n())),
            Self::Replicator(j) => replicator_operator(x, lambda, psi, j),
            Self::Markov(q) => markov_operator(x, lambda, psi, q),
            Self::Custom { f, .. } => Ok(f(x, lambda, psi)),
        }
    }

    /// `M_T`; `2 M_J` for the replicator and `2 M_Q` for rate fields.
    pub fn growth(&self) -> f64 {
        match self {
            Self::Zero => 0.0,
            Self::Replicator(j) => 2.0 * j.growth(),
            Self::Markov(q) => 2.0 * q.growth(),
            Self::Custom { growth, .. } => *growth,
        }
    }
}

/// Dimensions of the sampled state space for empirical probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateDims {
    pub d: usize,
    pub n: usize,
}

/// Random states inside `B^Y_R` for empirical probes: every simplex vertex
/// first, then Dirichlet labels with alternating concentration; each sample
/// carries a small random measure supported in the same ball.
pub(crate) struct BallSampler {
    rng: ChaCha8Rng,
    dims: StateDims,
    radius: f64,
    count: usize,
}

impl BallSampler {
    pub fn new(dims: StateDims, radius: f64, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), dims, radius, count: 0 }
    }

    fn position(&mut self) -> Vec<f64> {
        // |x| + ‖λ‖_BL ≤ R with ‖λ‖_BL = 1 for probabilities
        let rmax = (self.radius - 1.0).max(0.0);
        let d = self.dims.d;
        if d == 0 || rmax == 0.0 {
            return vec![0.0; d];
        }
        let dir: Vec<f64> = (0..d).map(|_| self.rng.sample(StandardNormal)).collect();
        let norm = euclid(&dir).max(1e-300);
        let r = rmax * self.rng.random::<f64>().powf(1.0 / d as f64);
        dir.iter().map(|v| v * r / norm).collect()
    }

    fn label(&mut self, alpha: f64) -> LabelDistribution {
        let n = self.dims.n;
        let g = Gamma::new(alpha, 1.0).expect("positive shape");
        let mut w: Vec<f64> = (0..n).map(|_| g.sample(&mut self.rng)).collect();
        let s: f64 = w.iter().sum();
        if !(s > 0.0) {
            return LabelDistribution::uniform(n);
        }
        w.iter_mut().for_each(|v| *v /= s);
        LabelDistribution::new(w).unwrap_or_else(|_| LabelDistribution::uniform(n))
    }

    fn measure(&mut self) -> EmpiricalMeasure {
        let m = self.rng.random_range(1..=4usize);
        let agents = (0..m)
            .map(|_| {
                let x = self.position();
                let l = self.label(1.0);
                AgentState { x, lambda: l }
            })
            .collect();
        EmpiricalMeasure::uniform(agents).expect("nonempty")
    }

    pub fn next_state(&mut self) -> (Vec<f64>, LabelDistribution, EmpiricalMeasure) {
        let k = self.count;
        self.count += 1;
        let x = self.position();
        let lambda = if k < self.dims.n {
            LabelDistribution::vertex(self.dims.n, k)
        } else if k % 2 == 0 {
            self.label(0.1)
        } else {
            self.label(1.0)
        };
        let psi = self.measure();
        (x, lambda, psi)
    }
}

/// Empirical lower bound for `δ_R`: the largest `−T_h / λ_h` over sampled
/// states in `B^Y_R` (0 if `T` is never negative).
pub fn delta_estimate(
    op: &LabelOperator,
    dims: StateDims,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if let LabelOperator::Zero = op {
        return Ok(0.0);
    }
    let mut sampler = BallSampler::new(dims, radius, seed);
    let mut delta: f64 = 0.0;
    for _ in 0..samples.max(1) {
        let (x, lambda, psi) = sampler.next_state();
        let t = op.eval(&x, &lambda, &psi)?;
        for (th, &lh) in t.weights().iter().zip(lambda.weights()) {
            if lh > 0.0 && *th < 0.0 {
                delta = delta.max(-th / lh);
            }
        }
    }
    Ok(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::first_moment;
    use crate::label_geometry::{bl_norm, tv_norm, LabelMetricSpace};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ld(w: &[f64]) -> LabelDistribution {
        LabelDistribution::new(w.to_vec()).unwrap()
    }

    fn single(x: &[f64], l: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::single(AgentState::new(x.to_vec(), ld(l)).unwrap())
    }

    fn q2() -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0])
    }

    #[test]
    fn replicator_examples() {
        let psi = single(&[0.0], &[0.5, 0.5]);
        let t = replicator_operator(&[0.3], &ld(&[0.2, 0.8]), &psi, &PayoffKernel::constant(3.0)).unwrap();
        assert!(t.weights().iter().all(|v| v.abs() < 1e-15));
        let game = PayoffKernel::local_matrix_game(vec![vec![0.0, 3.0], vec![1.0, 2.0]], Some(1.0));
        let t = replicator_operator(&[0.3], &LabelDistribution::vertex(2, 1), &psi, &game).unwrap();
        assert!(t.weights().iter().all(|v| v.abs() < 1e-15));
        // (J*Ψ) = (0.5, 0.5), mean 0.5
        let t = replicator_operator(&[0.0], &ld(&[0.75, 0.25]), &psi, &PayoffKernel::identity()).unwrap();
        assert_eq!(t.weights(), &[0.0, 0.0]);
    }

    #[test]
    fn markov_examples() {
        let q = RateMatrixField::constant(q2()).unwrap();
        let psi = single(&[0.0], &[0.5, 0.5]);
        let t = markov_operator(&[0.0], &ld(&[1.0, 0.0]), &psi, &q).unwrap();
        assert_eq!(t.weights(), &[-1.0, 1.0]);
        let t = markov_operator(&[0.0], &ld(&[2.0 / 3.0, 1.0 / 3.0]), &psi, &q).unwrap();
        assert!(t.weights().iter().all(|v| v.abs() < 1e-15));
        let zero = RateMatrixField::constant(DMatrix::zeros(3, 3)).unwrap();
        let t = markov_operator(&[0.0], &ld(&[0.2, 0.3, 0.5]), &single(&[0.0], &[1.0, 0.0, 0.0]), &zero)
            .unwrap();
        assert_eq!(t.weights(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_rate_matrix() {
        assert!(matches!(
            RateMatrixField::constant(DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.5, -2.0])),
            Err(Error::InvalidRateMatrix(_))
        ));
        let bad = RateMatrixField::new("bad", 2, 1.0, |_, _| {
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.5, 0.0])
        });
        let psi = single(&[0.0], &[0.5, 0.5]);
        assert!(matches!(
            markov_operator(&[0.0], &ld(&[0.5, 0.5]), &psi, &bad),
            Err(Error::InvalidRateMatrix(_))
        ));
    }

    #[test]
    fn velocity_examples() {
        let psi = single(&[2.0], &[0.5, 0.5]);
        let zero = builtin_velocity(VelocityKind::Zero).unwrap();
        assert_eq!(zero.eval(&[1.0, 2.0], &ld(&[0.5, 0.5]), &psi), vec![0.0, 0.0]);
        let drift =
            builtin_velocity(VelocityKind::PerLabelDrift { drifts: vec![vec![1.0], vec![-1.0]] }).unwrap();
        assert_abs_diff_eq!(drift.eval(&[0.0], &ld(&[0.75, 0.25]), &psi)[0], 0.5, epsilon = 1e-15);
        let att = builtin_velocity(VelocityKind::MeanFieldAttraction { kappa: 1.0 }).unwrap();
        assert_abs_diff_eq!(att.eval(&[0.0], &ld(&[0.5, 0.5]), &psi)[0], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn delta_examples() {
        let dims = StateDims { d: 1, n: 2 };
        assert_eq!(delta_estimate(&LabelOperator::Zero, dims, 3.0, 100, 1).unwrap(), 0.0);
        let markov = LabelOperator::Markov(RateMatrixField::constant(q2()).unwrap());
        let est = delta_estimate(&markov, dims, 3.0, 1000, 1).unwrap();
        assert_abs_diff_eq!(est, 2.0, epsilon = 1e-12);
        let rep = LabelOperator::Replicator(PayoffKernel::constant(2.0));
        assert_abs_diff_eq!(delta_estimate(&rep, dims, 3.0, 1000, 1).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn birth_death_is_valid_and_tilted() {
        let q = RateMatrixField::birth_death(vec![1.0, 1.0], vec![2.0, 2.0], 0.5).unwrap();
        let psi = EmpiricalMeasure::uniform(vec![
            AgentState::new(vec![-1.0], ld(&[1.0, 0.0, 0.0])).unwrap(),
            AgentState::new(vec![1.0], ld(&[1.0, 0.0, 0.0])).unwrap(),
        ])
        .unwrap();
        let m = q.eval(&[0.7], &psi);
        validate_rate_matrix(&m).unwrap();
        assert!(m[(1, 0)] > 1.0 && m[(0, 1)] < 2.0);
        assert!(m.norm() <= q.growth());
    }

    fn simplex(n: usize) -> impl Strategy<Value = LabelDistribution> {
        prop::collection::vec(0.001f64..1.0, n).prop_map(|v| {
            let s: f64 = v.iter().sum();
            LabelDistribution::new(v.iter().map(|x| x / s).collect()).unwrap()
        })
    }

    fn opponents() -> impl Strategy<Value = EmpiricalMeasure> {
        prop::collection::vec((-2.0f64..2.0, simplex(3)), 1..5).prop_map(|v| {
            EmpiricalMeasure::uniform(
                v.into_iter().map(|(x, l)| AgentState::new(vec![x], l).unwrap()).collect(),
            )
            .unwrap()
        })
    }

    fn game3() -> PayoffKernel {
        PayoffKernel::local_matrix_game(
            vec![vec![0.0, 2.0, -1.0], vec![-1.0, 0.0, 2.0], vec![2.0, -1.0, 0.0]],
            Some(0.8),
        )
    }

    proptest! {
        #[test]
        fn operators_are_zero_sum(x in -2.0f64..2.0, l in simplex(3), psi in opponents()) {
            let t = replicator_operator(&[x], &l, &psi, &game3()).unwrap();
            prop_assert!(t.total().abs() <= ZERO_SUM_TOL);
            let q = RateMatrixField::birth_death(vec![1.0, 0.5], vec![2.0, 0.7], 0.3).unwrap();
            let t = markov_operator(&[x], &l, &psi, &q).unwrap();
            prop_assert!(t.total().abs() <= ZERO_SUM_TOL);
        }

        #[test]
        fn replicator_favours_unique_best_reply(x in -2.0f64..2.0, l in simplex(3), psi in opponents()) {
            let p = payoff_vector(&[x], 3, &psi, &game3());
            let (best, &pmax) = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            let unique = p.iter().enumerate().all(|(h, &v)| h == best || v < pmax);
            let t = replicator_operator(&[x], &l, &psi, &game3()).unwrap();
            prop_assume!(unique);
            prop_assert!(t.weights()[best] >= 0.0);
        }

        #[test]
        fn markov_operator_is_linear(a in simplex(3), b in simplex(3), s in 0.0f64..1.0, psi in opponents()) {
            let q = RateMatrixField::birth_death(vec![1.0, 0.5], vec![2.0, 0.7], 0.3).unwrap();
            let mix = LabelDistribution::new(
                a.weights().iter().zip(b.weights()).map(|(p, r)| s * p + (1.0 - s) * r).collect(),
            ).unwrap();
            let tm = markov_operator(&[0.1], &mix, &psi, &q).unwrap();
            let ta = markov_operator(&[0.1], &a, &psi, &q).unwrap();
            let tb = markov_operator(&[0.1], &b, &psi, &q).unwrap();
            for h in 0..3 {
                let lin = s * ta.weights()[h] + (1.0 - s) * tb.weights()[h];
                prop_assert!((tm.weights()[h] - lin).abs() < 1e-14);
            }
        }

        #[test]
        fn growth_bounds_hold(x in -3.0f64..3.0, l in simplex(3), psi in opponents()) {
            let space = LabelMetricSpace::discrete(3);
            let ynorm = x.abs() + bl_norm(&SignedLabelMeasure(l.weights().to_vec()), &space).unwrap();
            let m1 = first_moment(&psi, &space).unwrap();
            let envelope = 1.0 + ynorm + m1;
            for k in [game3(), PayoffKernel::identity()] {
                for (u, v) in [(0, 1), (2, 2), (1, 0)] {
                    let y = &psi.agents()[0].x;
                    prop_assert!(k.eval(&[x], u, y, v).abs() <= k.growth() * (1.0 + x.abs() + y[0].abs()));
                }
                let op = LabelOperator::Replicator(k);
                let t = op.eval(&[x], &l, &psi).unwrap();
                prop_assert!(tv_norm(&t) <= op.growth() * envelope + 1e-12);
            }
            let vel = VelocityField::sum(vec![
                builtin_velocity(VelocityKind::MeanFieldAttraction { kappa: 0.7 }).unwrap(),
                builtin_velocity(VelocityKind::PerLabelDrift { drifts: vec![vec![1.0], vec![-0.5], vec![0.2]] }).unwrap(),
            ]);
            prop_assert!(euclid(&vel.eval(&[x], &l, &psi)) <= vel.growth() * envelope + 1e-12);
        }
    }
}
