//! Exact discrete optimal transport by successive shortest augmenting paths
//! with Dijkstra on reduced costs (dense bipartite graph).

/// Optimal plan together with a dual certificate.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub cost: f64,
    /// Row-major `n_src × n_dst` flow matrix.
    pub flow: Vec<f64>,
    /// Kantorovich potentials with `u_i + v_j ≤ c_ij`.
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl TransportPlan {
    pub fn dual_value(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(&self.u).map(|(p, q)| p * q).sum::<f64>()
            + b.iter().zip(&self.v).map(|(p, q)| p * q).sum::<f64>()
    }
}

const MASS_EPS: f64 = 1e-14;

/// Minimises `Σ f_ij c_ij` over couplings of `a` and `b`. Both marginals must
/// be nonnegative with (nearly) equal totals; costs must be nonnegative.
pub fn solve(a: &[f64], b: &[f64], cost: &[f64]) -> TransportPlan {
    let (n1, n2) = (a.len(), b.len());
    assert_eq!(cost.len(), n1 * n2);
    let c = |i: usize, j: usize| cost[i * n2 + j];

    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut flow = vec![0.0; n1 * n2];
    let mut pi_s = vec![0.0; n1];
    let mut pi_t = vec![0.0; n2];

    let mut dist_s = vec![0.0; n1];
    let mut dist_t = vec![0.0; n2];
    let mut done_s = vec![false; n1];
    let mut done_t = vec![false; n2];
    let mut pred_s = vec![usize::MAX; n1];
    let mut pred_t = vec![usize::MAX; n2];

    loop {
        let remaining: f64 = supply.iter().sum();
        let remaining_d: f64 = demand.iter().sum();
        if remaining.min(remaining_d) <= MASS_EPS {
            break;
        }

        for i in 0..n1 {
            dist_s[i] = if supply[i] > MASS_EPS { 0.0 } else { f64::INFINITY };
            done_s[i] = false;
            pred_s[i] = usize::MAX;
        }
        for j in 0..n2 {
            dist_t[j] = f64::INFINITY;
            done_t[j] = false;
            pred_t[j] = usize::MAX;
        }

        let mut target = None;
        loop {
            let mut best = f64::INFINITY;
            let mut pick: Option<(bool, usize)> = None;
            for i in 0..n1 {
                if !done_s[i] && dist_s[i] < best {
                    best = dist_s[i];
                    pick = Some((true, i));
                }
            }
            for j in 0..n2 {
                if !done_t[j] && dist_t[j] < best {
                    best = dist_t[j];
                    pick = Some((false, j));
                }
            }
            let Some((is_src, k)) = pick else { break };
            if is_src {
                done_s[k] = true;
                let base = dist_s[k] + pi_s[k];
                for j in 0..n2 {
                    if done_t[j] {
                        continue;
                    }
                    let nd = base + c(k, j) - pi_t[j];
                    if nd < dist_t[j] {
                        dist_t[j] = nd;
                        pred_t[j] = k;
                    }
                }
            } else {
                done_t[k] = true;
                if demand[k] > MASS_EPS {
                    target = Some(k);
                    break;
                }
                let base = dist_t[k] + pi_t[k];
                for i in 0..n1 {
                    if done_s[i] || flow[i * n2 + k] <= MASS_EPS {
                        continue;
                    }
                    let nd = base - c(i, k) - pi_s[i];
                    if nd < dist_s[i] {
                        dist_s[i] = nd;
                        pred_s[i] = k;
                    }
                }
            }
        }

        let Some(t) = target else { break };
        let reach = dist_t[t];
        for i in 0..n1 {
            pi_s[i] += dist_s[i].min(reach);
        }
        for j in 0..n2 {
            pi_t[j] += dist_t[j].min(reach);
        }

        // bottleneck along the path t <- i <- j <- i ... <- root source
        let mut delta = demand[t];
        let mut j = t;
        let root = loop {
            let i = pred_t[j];
            match pred_s[i] {
                usize::MAX => break i,
                jp => {
                    delta = delta.min(flow[i * n2 + jp]);
                    j = jp;
                }
            }
        };
        delta = delta.min(supply[root]);

        let mut j = t;
        loop {
            let i = pred_t[j];
            flow[i * n2 + j] += delta;
            match pred_s[i] {
                usize::MAX => break,
                jp => {
                    let f = &mut flow[i * n2 + jp];
                    *f -= delta;
                    if *f < MASS_EPS {
                        *f = 0.0;
                    }
                    j = jp;
                }
            }
        }
        supply[root] -= delta;
        demand[t] -= delta;
    }

    let total: f64 = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
    TransportPlan {
        cost: total,
        flow,
        u: pi_s.iter().map(|p| -p).collect(),
        v: pi_t,
    }
}
