//! Dense tableau simplex for small linear programs in the form
//! `max cᵀz  s.t.  A z ≤ b,  z ≥ 0` with `b ≥ 0`.
//!
//! The origin is feasible, so no phase one is needed. Bland's rule is used
//! for both entering and leaving variables; the programs solved here are
//! highly degenerate (most right-hand sides are zero).

const PIVOT_EPS: f64 = 1e-12;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone)]
pub(crate) struct LpSolution {
    pub value: f64,
    #[cfg_attr(not(test), allow(dead_code))]
    pub x: Vec<f64>,
}

/// Returns `None` when the program is unbounded or the pivot cap is hit.
pub(crate) fn maximize(c: &[f64], a: &[f64], b: &[f64]) -> Option<LpSolution> {
    let nv = c.len();
    let m = b.len();
    debug_assert_eq!(a.len(), nv * m);
    debug_assert!(b.iter().all(|&v| v >= 0.0));

    let width = nv + m + 1;
    let rhs = width - 1;
    let mut t = vec![0.0; (m + 1) * width];
    for i in 0..m {
        let row = &mut t[i * width..(i + 1) * width];
        row[..nv].copy_from_slice(&a[i * nv..(i + 1) * nv]);
        row[nv + i] = 1.0;
        row[rhs] = b[i];
    }
    {
        let obj = &mut t[m * width..];
        for j in 0..nv {
            obj[j] = -c[j];
        }
    }
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    for _ in 0..MAX_PIVOTS {
        let obj = &t[m * width..];
        let Some(enter) = (0..width - 1).find(|&j| obj[j] < -PIVOT_EPS) else {
            let mut x = vec![0.0; nv];
            for (i, &bv) in basis.iter().enumerate() {
                if bv < nv {
                    x[bv] = t[i * width + rhs];
                }
            }
            return Some(LpSolution { value: t[m * width + rhs], x });
        };

        let mut leave: Option<(usize, f64)> = None;
        for i in 0..m {
            let coef = t[i * width + enter];
            if coef > PIVOT_EPS {
                let ratio = t[i * width + rhs] / coef;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - PIVOT_EPS
                            || (ratio <= lr + PIVOT_EPS && basis[i] < basis[li])
                        {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        let (row, _) = leave?;
        pivot(&mut t, width, m, row, enter);
        basis[row] = enter;
    }
    None
}

fn pivot(t: &mut [f64], width: usize, m: usize, row: usize, col: usize) {
    let p = t[row * width + col];
    for j in 0..width {
        t[row * width + j] /= p;
    }
    let pivot_row: Vec<f64> = t[row * width..(row + 1) * width].to_vec();
    for i in 0..=m {
        if i == row {
            continue;
        }
        let f = t[i * width + col];
        if f != 0.0 {
            let r = &mut t[i * width..(i + 1) * width];
            for j in 0..width {
                r[j] -= f * pivot_row[j];
            }
            r[col] = 0.0;
        }
    }
}
