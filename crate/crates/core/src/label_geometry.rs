//! Measures on a finite label set `U = {0, …, n-1}`: probability vectors,
//! signed measures and the norms/distances between them.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::lp;

/// Sum deviation accepted (and corrected) when building a simplex point.
pub const SIMPLEX_RENORM_TOL: f64 = 1e-9;
/// Negative components down to this size are treated as rounding and zeroed.
pub const NEGATIVE_CLAMP_TOL: f64 = 1e-12;

/// Finite metric space over `n` labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetricSpace {
    n: usize,
    dist: Vec<f64>,
}

impl LabelMetricSpace {
    /// The discrete metric `d(h, l) = 1` for `h != l`.
    pub fn discrete(n: usize) -> Self {
        let mut dist = vec![1.0; n * n];
        for h in 0..n {
            dist[h * n + h] = 0.0;
        }
        Self { n, dist }
    }

    pub fn from_matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::ContractViolation("label metric must have n >= 1".into()));
        }
        let mut dist = Vec::with_capacity(n * n);
        for row in rows {
            check_dim(n, row.len())?;
            dist.extend_from_slice(row);
        }
        let at = |h: usize, l: usize| dist[h * n + l];
        for h in 0..n {
            if at(h, h) != 0.0 {
                return Err(Error::ContractViolation(format!("dist[{h}][{h}] must be 0")));
            }
            for l in 0..n {
                if h == l {
                    continue;
                }
                let d = at(h, l);
                if !(d > 0.0 && d.is_finite()) {
                    return Err(Error::ContractViolation(format!(
                        "dist[{h}][{l}] = {d} must be positive and finite"
                    )));
                }
                if (d - at(l, h)).abs() > 1e-12 * d.max(1.0) {
                    return Err(Error::ContractViolation(format!(
                        "label metric is not symmetric at ({h}, {l})"
                    )));
                }
                for m in 0..n {
                    if d > at(h, m) + at(m, l) + 1e-12 {
                        return Err(Error::ContractViolation(format!(
                            "triangle inequality fails for ({h}, {m}, {l})"
                        )));
                    }
                }
            }
        }
        Ok(Self { n, dist })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dist(&self, h: usize, l: usize) -> f64 {
        self.dist[h * self.n + l]
    }
}

/// A point of the closed probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates and renormalises. Tiny negative components are zeroed and
    /// sums within [`SIMPLEX_RENORM_TOL`] of one are rescaled; anything else
    /// is rejected.
    pub fn new(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidLabel("empty weight vector".into()));
        }
        for (h, w) in weights.iter_mut().enumerate() {
            if !w.is_finite() {
                return Err(Error::InvalidLabel(format!("component {h} is not finite")));
            }
            if *w < 0.0 {
                if *w < -NEGATIVE_CLAMP_TOL {
                    return Err(Error::InvalidLabel(format!("component {h} = {w:e} is negative")));
                }
                *w = 0.0;
            }
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_RENORM_TOL {
            return Err(Error::InvalidLabel(format!("components sum to {s}, not 1")));
        }
        if s != 1.0 {
            weights.iter_mut().for_each(|w| *w /= s);
        }
        Ok(Self(weights))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn vertex(n: usize, h: usize) -> Self {
        let mut w = vec![0.0; n];
        w[h] = 1.0;
        Self(w)
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn min_component(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(l: LabelDistribution) -> Self {
        l.0
    }
}

impl std::ops::Index<usize> for LabelDistribution {
    type Output = f64;
    fn index(&self, h: usize) -> &f64 {
        &self.0[h]
    }
}

/// A finite signed measure on the labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedLabelMeasure(pub Vec<f64>);

impl SignedLabelMeasure {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    /// `a - b`.
    pub fn difference(a: &LabelDistribution, b: &LabelDistribution) -> Result<Self> {
        check_dim(a.n(), b.n())?;
        Ok(Self(a.weights().iter().zip(b.weights()).map(|(x, y)| x - y).collect()))
    }

    pub fn n(&self) -> usize {
        self.0.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub fn tv_norm(mu: &SignedLabelMeasure) -> f64 {
    mu.0.iter().map(|w| w.abs()).sum()
}

/// Bounded-Lipschitz norm: `sup Σ φ_h μ_h` over `‖φ‖_∞ + Lip(φ) ≤ 1`.
///
/// Solved exactly as a linear program in `(ψ, a, b)` with `ψ = φ + a·1`,
/// `ψ_h ≤ 2a`, `ψ_h − ψ_l ≤ b·d(h, l)` and `a + b ≤ 1`.
pub fn bl_norm(mu: &SignedLabelMeasure, space: &LabelMetricSpace) -> Result<f64> {
    let n = space.n();
    check_dim(n, mu.n())?;
    if mu.0.iter().all(|&w| w == 0.0) {
        return Ok(0.0);
    }
    let nv = n + 2;
    let (ia, ib) = (n, n + 1);
    let rows = n + n * (n - 1) + 1;
    let mut a = vec![0.0; rows * nv];
    let mut b = vec![0.0; rows];
    let mut r = 0;
    for h in 0..n {
        a[r * nv + h] = 1.0;
        a[r * nv + ia] = -2.0;
        r += 1;
    }
    for h in 0..n {
        for l in 0..n {
            if h != l {
                a[r * nv + h] = 1.0;
                a[r * nv + l] = -1.0;
                a[r * nv + ib] = -space.dist(h, l);
                r += 1;
            }
        }
    }
    a[r * nv + ia] = 1.0;
    a[r * nv + ib] = 1.0;
    b[r] = 1.0;

    let mut c = vec![0.0; nv];
    c[..n].copy_from_slice(&mu.0);
    c[ia] = -mu.total();
    let sol = lp::maximize(&c, &a, &b)
        .ok_or_else(|| Error::ContractViolation("bounded-Lipschitz program failed".into()))?;
    Ok(sol.value.max(0.0))
}

/// `Σ_h √(a_h b_h)`.
pub fn bhattacharyya(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    check_dim(a.n(), b.n())?;
    Ok(a.weights().iter().zip(b.weights()).map(|(x, y)| (x * y).sqrt()).sum())
}

/// `sqrt(Σ_h (√a_h − √b_h)²)`.
pub fn hellinger(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    check_dim(a.n(), b.n())?;
    Ok(a.weights()
        .iter()
        .zip(b.weights())
        .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Geodesic angle between `√a` and `√b` on the unit sphere.
pub fn spherical_hellinger(a: &LabelDistribution, b: &LabelDistribution) -> Result<f64> {
    Ok(bhattacharyya(a, b)?.clamp(-1.0, 1.0).acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn ld(w: &[f64]) -> LabelDistribution {
        LabelDistribution::new(w.to_vec()).unwrap()
    }

    /// Independent oracle: enumerate all vertices of the feasible polytope in
    /// `(φ, a, b)` and take the best feasible one.
    fn bl_vertex_oracle(mu: &[f64], space: &LabelMetricSpace) -> f64 {
        let n = mu.len();
        let nv = n + 2;
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for h in 0..n {
            let mut r = vec![0.0; nv];
            r[h] = 1.0;
            r[n] = -1.0;
            rows.push((r.clone(), 0.0));
            r[h] = -1.0;
            rows.push((r, 0.0));
        }
        for h in 0..n {
            for l in 0..n {
                if h != l {
                    let mut r = vec![0.0; nv];
                    r[h] = 1.0;
                    r[l] = -1.0;
                    r[n + 1] = -space.dist(h, l);
                    rows.push((r, 0.0));
                }
            }
        }
        let mut r = vec![0.0; nv];
        r[n] = 1.0;
        r[n + 1] = 1.0;
        rows.push((r, 1.0));
        for j in [n, n + 1] {
            let mut r = vec![0.0; nv];
            r[j] = -1.0;
            rows.push((r, 0.0));
        }
        let m = rows.len();
        let mut best = f64::NEG_INFINITY;
        let mut idx: Vec<usize> = (0..nv).collect();
        loop {
            let a = DMatrix::from_fn(nv, nv, |i, j| rows[idx[i]].0[j]);
            let b = DVector::from_fn(nv, |i, _| rows[idx[i]].1);
            if let Some(z) = a.lu().solve(&b) {
                let feasible = rows.iter().all(|(r, rhs)| {
                    r.iter().zip(z.iter()).map(|(p, q)| p * q).sum::<f64>() <= rhs + 1e-9
                });
                if feasible {
                    let val: f64 = (0..n).map(|h| mu[h] * z[h]).sum();
                    best = best.max(val);
                }
            }
            // next combination
            let mut i = nv;
            loop {
                if i == 0 {
                    return best;
                }
                i -= 1;
                if idx[i] < m - nv + i {
                    idx[i] += 1;
                    for j in i + 1..nv {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_norm(&SignedLabelMeasure(vec![0.0, 0.0])), 0.0);
        assert_eq!(tv_norm(&SignedLabelMeasure(vec![1.0, -1.0])), 2.0);
        assert_eq!(tv_norm(&SignedLabelMeasure(vec![0.5, -0.5, 0.0])), 1.0);
    }

    #[test]
    fn bl_examples() {
        let s2 = LabelMetricSpace::discrete(2);
        assert_eq!(bl_norm(&SignedLabelMeasure(vec![0.0, 0.0]), &s2).unwrap(), 0.0);
        let oracle = bl_vertex_oracle(&[1.0, -1.0], &s2);
        assert_abs_diff_eq!(oracle, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            bl_norm(&SignedLabelMeasure(vec![1.0, -1.0]), &s2).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            bl_norm(&SignedLabelMeasure(vec![1.0, 0.0]), &s2).unwrap(),
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn bl_dimension_mismatch() {
        let s3 = LabelMetricSpace::discrete(3);
        assert!(matches!(
            bl_norm(&SignedLabelMeasure(vec![1.0, -1.0]), &s3),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn bl_matches_vertex_oracle() {
        let nonuniform = LabelMetricSpace::from_matrix(&[
            vec![0.0, 0.5, 1.2],
            vec![0.5, 0.0, 0.9],
            vec![1.2, 0.9, 0.0],
        ])
        .unwrap();
        let cases: Vec<(Vec<f64>, LabelMetricSpace)> = vec![
            (vec![0.3, -0.7], LabelMetricSpace::discrete(2)),
            (vec![0.2, 0.1], LabelMetricSpace::discrete(2)),
            (vec![0.4, -0.1, -0.3], LabelMetricSpace::discrete(3)),
            (vec![0.4, -0.1, -0.3], nonuniform.clone()),
            (vec![-1.0, 2.0, 0.5], nonuniform.clone()),
            (vec![0.05, -0.02, -0.03], nonuniform),
        ];
        for (mu, space) in cases {
            let lp = bl_norm(&SignedLabelMeasure(mu.clone()), &space).unwrap();
            let oracle = bl_vertex_oracle(&mu, &space);
            assert_abs_diff_eq!(lp, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn hellinger_examples() {
        let a = ld(&[0.5, 0.5]);
        assert_eq!(hellinger(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(
            hellinger(&ld(&[1.0, 0.0]), &ld(&[0.0, 1.0])).unwrap(),
            2f64.sqrt(),
            epsilon = 1e-15
        );
        let expect = ((0.5f64.sqrt() - 1.0).powi(2) + 0.5).sqrt();
        assert_abs_diff_eq!(hellinger(&a, &ld(&[1.0, 0.0])).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.76537, epsilon = 1e-5);
    }

    #[test]
    fn spherical_examples() {
        let a = ld(&[0.5, 0.5]);
        assert_eq!(spherical_hellinger(&a, &a).unwrap(), 0.0);
        assert_abs_diff_eq!(
            spherical_hellinger(&ld(&[1.0, 0.0]), &ld(&[0.0, 1.0])).unwrap(),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            spherical_hellinger(&a, &ld(&[1.0, 0.0])).unwrap(),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-15
        );
    }

    #[test]
    fn simplex_construction() {
        let l = LabelDistribution::new(vec![0.5, 0.5 + 5e-10]).unwrap();
        assert_abs_diff_eq!(l.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        assert!(LabelDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(LabelDistribution::new(vec![1.1, -0.1]).is_err());
        assert_eq!(LabelDistribution::new(vec![1.0, -1e-13]).unwrap()[1], 0.0);
    }

    #[test]
    fn metric_validation() {
        assert!(LabelMetricSpace::from_matrix(&[vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(LabelMetricSpace::from_matrix(&[
            vec![0.0, 1.0, 3.0],
            vec![1.0, 0.0, 1.0],
            vec![3.0, 1.0, 0.0]
        ])
        .is_err());
    }

    fn simplex(n: usize) -> impl Strategy<Value = LabelDistribution> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| LabelDistribution::new(v.iter().map(|x| x / s).collect()).unwrap())
        })
    }

    proptest! {
        #[test]
        fn probabilities_have_unit_bl(l in (2usize..7).prop_flat_map(simplex)) {
            let s = LabelMetricSpace::discrete(l.n());
            let bl = bl_norm(&SignedLabelMeasure(l.weights().to_vec()), &s).unwrap();
            prop_assert!((bl - 1.0).abs() < 1e-10);
        }

        #[test]
        fn hellinger_identity_and_metric(
            (a, b, c) in (2usize..7).prop_flat_map(|n| (simplex(n), simplex(n), simplex(n)))
        ) {
            let h_ab = hellinger(&a, &b).unwrap();
            let bc = bhattacharyya(&a, &b).unwrap();
            prop_assert!((h_ab * h_ab - 2.0 * (1.0 - bc)).abs() < 1e-12);
            prop_assert!((h_ab - hellinger(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(h_ab <= hellinger(&a, &c).unwrap() + hellinger(&c, &b).unwrap() + 1e-12);
            let s_ab = spherical_hellinger(&a, &b).unwrap();
            prop_assert!((s_ab - spherical_hellinger(&b, &a).unwrap()).abs() < 1e-15);
            prop_assert!(
                s_ab <= spherical_hellinger(&a, &c).unwrap()
                    + spherical_hellinger(&c, &b).unwrap() + 1e-9
            );
        }
    }
}
