//! Acceptance suite: one line per criterion, exit status 1 if any fails.
//!
//! Run with `cargo test --test acceptance`; pass criterion numbers after `--`
//! to run a subset, e.g. `cargo test --test acceptance -- 2 8`.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use labelflow::ensemble::wasserstein1;
use labelflow::explicit_scheme::LabelMode;
use labelflow::harness::{
    convergence_study, load_scenario, loglog_slope, report_csv, residual_study, run_from, sample_initial, Scenario,
    StudyOptions, StudyReport,
};
use labelflow::label_geometry::{
    bl_norm, hellinger, spherical_hellinger, tv_norm, LabelDistribution, LabelMetricSpace, SignedLabelMeasure,
};
use labelflow::markov_geometry::{
    entropy, geodesic_distance_refined, log_mean, metric_tensor, onsager_matrix, stationary_distribution,
    MarkovGeometry, GEODESIC_SEGMENTS,
};
use labelflow::markov_prox::{prox_markov_full, prox_markov_surrogate};
use labelflow::par;
use labelflow::replicator_prox::{prox_hs_payoff, HsConvention};

const KS: [usize; 4] = [16, 32, 64, 128];
const TAU_LADDER: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn scenario(name: &str) -> Scenario {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    load_scenario(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn dirichlet(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = Gamma::new(1.0, 1.0).unwrap();
    let v: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn statistics(r: &StudyReport) -> Vec<f64> {
    r.rows.iter().filter_map(|row| r.statistic(row)).collect()
}

fn c1_metric_chain() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::INFINITY;
    for n in 2..=6 {
        let space = LabelMetricSpace::discrete(n);
        for _ in 0..1000 {
            let a = LabelDistribution::new(dirichlet(&mut rng, n)).unwrap();
            let b = LabelDistribution::new(dirichlet(&mut rng, n)).unwrap();
            let mu = SignedLabelMeasure::difference(&a, &b).unwrap();
            let bl = bl_norm(&mu, &space).unwrap();
            let tv = tv_norm(&mu);
            let h = hellinger(&a, &b).unwrap();
            let hs = spherical_hellinger(&a, &b).unwrap();
            worst = worst.min(tv - bl).min(2.0 * h - tv).min(2.0 * hs - 2.0 * h);
        }
    }
    verdict(worst >= -1e-9, format!("smallest slack {worst:.3e} over 5000 pairs"))
}

fn c2_exact_oracle() -> Verdict {
    let sc = scenario("oracle_markov.json");
    let opts = StudyOptions { oracle: true, mode: Some(LabelMode::Explicit), timing: false };
    let r = convergence_study(&sc, &[16, 32, 64, 128, 256], &opts).unwrap();
    let errs = statistics(&r);
    let slope = r.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
    let last = *errs.last().unwrap();
    verdict(
        (slope - 1.0).abs() <= 0.2 && last <= 1e-2 && r.abort.is_none(),
        format!("slope {slope:.3}, error at k=256 {last:.3e}; errors [{}]", fmt_list(&errs)),
    )
}

fn c3_cauchy(sc: &Scenario) -> (Verdict, StudyReport) {
    let opts = StudyOptions { mode: Some(LabelMode::Explicit), ..StudyOptions::default() };
    let r = convergence_study(sc, &KS, &opts).unwrap();
    let g = statistics(&r);
    let monotone = g.len() == KS.len() && g.windows(2).all(|w| w[1] < w[0]);
    let slope = r.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
    let ci = r.slope.as_ref().map(|s| format!("[{:.3}, {:.3}]", s.ci_low, s.ci_high)).unwrap_or_default();
    (
        verdict(monotone && slope >= 0.8, format!("g(k) = [{}], slope {slope:.3} {ci}", fmt_list(&g))),
        r,
    )
}

fn c4_weak_residual(sc: &Scenario) -> Verdict {
    let opts = StudyOptions { mode: Some(LabelMode::Explicit), ..StudyOptions::default() };
    let r = residual_study(sc, &KS, &opts).unwrap();
    let th = statistics(&r);
    let slope = r.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
    verdict(
        (slope - 1.0).abs() <= 0.3 && th.len() == KS.len(),
        format!("theta_k = [{}], slope {slope:.3}", fmt_list(&th)),
    )
}

/// Objective of the Hellinger prox written out directly.
fn hs_objective_direct(p: &[f64], l: &[f64], hat: &[f64], tau: f64) -> f64 {
    let bc: f64 = l.iter().zip(hat).map(|(a, b)| (a * b).sqrt()).sum();
    let angle = bc.clamp(-1.0, 1.0).acos();
    -0.25 * p.iter().zip(l).map(|(a, b)| a * b).sum::<f64>() + angle * angle / (2.0 * tau)
}

/// Grid search over the simplex followed by a shrinking compass search.
fn hs_grid_oracle(p: &[f64], hat: &[f64], tau: f64) -> f64 {
    let n = p.len();
    let f = |l: &[f64]| hs_objective_direct(p, l, hat, tau);
    let step: f64 = if n == 2 { 1e-4 } else { 2e-3 };
    let cells = (1.0 / step).round() as usize;
    let mut best = (f64::INFINITY, hat.to_vec());
    for i in 0..=cells {
        if n == 2 {
            let l = [i as f64 * step, 1.0 - i as f64 * step];
            let v = f(&l);
            if v < best.0 {
                best = (v, l.to_vec());
            }
        } else {
            for j in 0..=(cells - i) {
                let l = [i as f64 * step, j as f64 * step, 1.0 - (i + j) as f64 * step];
                let v = f(&l);
                if v < best.0 {
                    best = (v, l.to_vec());
                }
            }
        }
    }
    let (mut fb, mut x) = best;
    let mut h = step;
    while h > 1e-13 {
        let mut improved = false;
        for a in 0..n {
            for b in 0..n {
                if a == b {
                    continue;
                }
                let mut y = x.clone();
                y[a] += h;
                y[b] -= h;
                if y[b] < 0.0 {
                    continue;
                }
                let v = f(&y);
                if v < fb {
                    fb = v;
                    x = y;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    fb
}

fn c5_hellinger_prox() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut unconverged = 0;
    for i in 0..100 {
        let n = if i % 2 == 0 { 2 } else { 3 };
        let hat = dirichlet(&mut rng, n);
        let tau = 10f64.powf(rng.random_range(-2.0..0.0));
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r = prox_hs_payoff(&p, &LabelDistribution::new(hat.clone()).unwrap(), tau, HsConvention::Geodesic).unwrap();
        unconverged += usize::from(!r.converged);
        let solver = hs_objective_direct(&p, r.lambda_new.weights(), &hat, tau);
        worst = worst.max((solver - hs_grid_oracle(&p, &hat, tau)).abs());
    }
    verdict(
        worst <= 1e-8 && unconverged == 0,
        format!("max objective difference {worst:.3e} over 100 instances, {unconverged} unconverged"),
    )
}

fn c6_el_residual(sc: &Scenario) -> Verdict {
    let opts = StudyOptions { mode: Some(LabelMode::ProxHellinger), ..StudyOptions::default() };
    let r = residual_study(sc, &[16, 32, 64, 128, 256], &opts).unwrap();
    let res = statistics(&r);
    let slope = r.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
    verdict(
        slope >= 0.9 && res.len() == 5,
        format!("max residual [{}], slope {slope:.3}", fmt_list(&res)),
    )
}

fn c7_explicit_vs_implicit(sc: &Scenario, cauchy: &StudyReport) -> Verdict {
    let k = 128;
    let initial = sample_initial(sc, sc.seed).unwrap();
    let a = run_from(sc, &initial, k, LabelMode::Explicit).unwrap().trajectory;
    let b = run_from(sc, &initial, k, LabelMode::ProxHellinger).unwrap().trajectory;
    let space = sc.label_space().unwrap();
    let gap = a
        .config()
        .snapshot_times
        .iter()
        .map(|&t| wasserstein1(&a.at(t).unwrap(), &b.at(t).unwrap(), &space).unwrap())
        .fold(0.0, f64::max);
    let g = cauchy.rows.iter().find(|r| r.k == k).and_then(|r| r.w1_gap).unwrap_or(f64::NAN);
    verdict(gap <= 2.0 * g, format!("gap {gap:.3e} vs Cauchy gap {g:.3e} (ratio {:.2})", gap / g))
}

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    if depth == 0 || (left + right - whole).abs() <= 15.0 * eps {
        return left + right + (left + right - whole) / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

fn c8_markov_geometry() -> Verdict {
    let mut err: f64 = 0.0;
    let q2 = DMatrix::from_row_slice(2, 2, &[-1.0, 2.0, 1.0, -2.0]);
    let s = stationary_distribution(&q2).unwrap();
    err = err.max((s[0] - 2.0 / 3.0).abs()).max((s[1] - 1.0 / 3.0).abs());
    let q3 = DMatrix::from_row_slice(3, 3, &[-1.0, 2.0, 0.0, 1.0, -3.0, 2.0, 0.0, 1.0, -2.0]);
    let s3 = stationary_distribution(&q3).unwrap();
    for (a, b) in s3.weights().iter().zip([4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]) {
        err = err.max((a - b).abs());
    }
    let sym = DMatrix::from_row_slice(3, 3, &[-2.0, 1.0, 1.0, 1.0, -2.0, 1.0, 1.0, 1.0, -2.0]);
    for a in stationary_distribution(&sym).unwrap().weights() {
        err = err.max((a - 1.0 / 3.0).abs());
    }
    err = err.max((log_mean(4.0, 1.0).unwrap() - 3.0 / 4f64.ln()).abs()).max((log_mean(1.0, 1.0).unwrap() - 1.0).abs());
    let geom = MarkovGeometry::new(q2).unwrap();
    let e1 = LabelDistribution::vertex(2, 0);
    err = err.max((entropy(&e1, &geom) - 1.5f64.ln()).abs());
    let half = LabelDistribution::uniform(2);
    err = err.max((entropy(&half, &geom) - (0.5 * 0.75f64.ln() + 0.5 * 1.5f64.ln())).abs());
    let k = onsager_matrix(&s, &geom);
    let w = 2.0 / 3.0;
    for (i, j, v) in [(0, 0, w), (0, 1, -w), (1, 0, -w), (1, 1, w)] {
        err = err.max((k[(i, j)] - v).abs());
    }
    let g = metric_tensor(&s, &geom).unwrap();
    let gv = &g * nalgebra::DVector::from_vec(vec![1.0, -1.0]);
    err = err.max((gv[0] - 0.75).abs()).max((gv[1] + 0.75).abs());
    let examples_ok = err <= 1e-10;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let speed = |r: f64| 1.0 / (w * log_mean(r * 1.5, (1.0 - r) * 3.0).unwrap()).sqrt();
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a: f64 = rng.random_range(0.05..0.95);
        let b = rng.random_range(0.05..0.95);
        let (lo, hi) = (a.min(b), a.max(b));
        let coarse = (hi - lo) / 6.0 * (speed(lo) + 4.0 * speed(0.5 * (lo + hi)) + speed(hi));
        let exact = simpson(&speed, lo, hi, speed(lo), speed(0.5 * (lo + hi)), speed(hi), coarse, 1e-14, 40);
        let la = LabelDistribution::new(vec![a, 1.0 - a]).unwrap();
        let lb = LabelDistribution::new(vec![b, 1.0 - b]).unwrap();
        let len = geodesic_distance_refined(&la, &lb, &geom, GEODESIC_SEGMENTS).unwrap().length;
        worst = worst.max((len - exact).abs() / exact);
    }
    verdict(
        examples_ok && worst <= 1e-6,
        format!("largest example error {err:.2e}; geodesic relative error {worst:.2e} on 20 pairs"),
    )
}

fn c9_markov_residual(sc: &Scenario) -> Verdict {
    let ks: Vec<usize> = TAU_LADDER.iter().map(|t| (sc.horizon / t).round() as usize).collect();
    let opts = StudyOptions { mode: Some(LabelMode::ProxMarkov), ..StudyOptions::default() };
    let r = residual_study(sc, &ks, &opts).unwrap();
    let res = statistics(&r);
    let excluded: usize = r.rows.iter().map(|row| row.excluded).sum();
    let evaluated: usize = r.rows.iter().map(|row| row.evaluated).sum();
    let frac = excluded as f64 / evaluated.max(1) as f64;
    let slope = r.slope.as_ref().map(|s| s.slope).unwrap_or(f64::NAN);
    let decreasing = res.windows(2).all(|w| w[1] < w[0]);
    verdict(
        slope >= 0.25 && frac <= 0.1 && decreasing && res.len() == ks.len(),
        format!("residual [{}], slope {slope:.3}, excluded {excluded}/{evaluated}", fmt_list(&res)),
    )
}

fn c10_surrogate_gap(sc: &Scenario) -> Verdict {
    let initial = sample_initial(sc, sc.seed).unwrap();
    let hat = initial.agents()[0].lambda.clone();
    let q = sc.rate_field().unwrap().unwrap();
    let geom = MarkovGeometry::new(q.eval(&initial.agents()[0].x, &initial)).unwrap();
    let pts: Vec<(f64, f64)> = TAU_LADDER
        .iter()
        .map(|&tau| {
            let full = prox_markov_full(&hat, &geom, tau).unwrap();
            let mu = prox_markov_surrogate(&hat, &hat, &geom, tau).unwrap();
            let gap = full
                .lambda_new
                .weights()
                .iter()
                .zip(mu.lambda_new.weights())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            (tau, gap)
        })
        .collect();
    let slope = loglog_slope(&pts).unwrap_or(f64::NAN);
    let gaps: Vec<f64> = pts.iter().map(|p| p.1).collect();
    verdict(slope >= 1.2, format!("gaps [{}], slope {slope:.3}", fmt_list(&gaps)))
}

fn c11_short_time(sc: &Scenario) -> Verdict {
    let initial = sample_initial(sc, sc.seed).unwrap();
    let ks = [16, 32, 64, 128, 256];
    let tf: Vec<f64> = par::map_indexed(ks.len(), |i| {
        let out = run_from(sc, &initial, ks[i], LabelMode::ProxMarkov).unwrap();
        out.trajectory.end_time()
    });
    let (lo, hi) = tf.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &t| (a.min(t), b.max(t)));
    let spread = (hi - lo) / lo;
    let stopped = tf.iter().all(|&t| t < sc.horizon);
    verdict(
        spread < 0.2,
        format!(
            "T_f = [{}], spread {:.1}%{}",
            tf.iter().map(|t| format!("{t:.4}")).collect::<Vec<_>>().join(", "),
            100.0 * spread,
            if stopped { "" } else { " (some runs reached the horizon)" }
        ),
    )
}

fn c12_determinism(sc: &Scenario) -> Verdict {
    let was = par::is_sequential();
    par::set_sequential(true);
    let opts = StudyOptions { mode: Some(LabelMode::Explicit), oracle: false, timing: false };
    let a = report_csv(&convergence_study(sc, &KS, &opts).unwrap()).unwrap();
    let b = report_csv(&convergence_study(sc, &KS, &opts).unwrap()).unwrap();
    par::set_sequential(was);
    verdict(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |i: u32| wanted.is_empty() || wanted.contains(&i);
    let hawk_dove = scenario("hawk_dove.json");
    let two_state = scenario("markov_two_state.json");
    let margin = scenario("markov_margin.json");
    let mut cauchy: Option<StudyReport> = None;
    let mut failures = Vec::new();
    let mut report = |id: u32, name: &str, limit_s: Option<f64>, run: &mut dyn FnMut() -> Verdict| {
        if !selected(id) {
            return;
        }
        let start = Instant::now();
        let v = run();
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit_s.is_none_or(|l| secs < l);
        let pass = v.pass && in_time;
        let limit = limit_s.map(|l| format!(", limit {l} s")).unwrap_or_default();
        println!(
            "criterion {id:>2} {} {name}: {} [{secs:.1} s{limit}]",
            if pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !pass {
            failures.push(id);
        }
    };
    report(1, "metric chain", Some(10.0), &mut c1_metric_chain);
    report(2, "exact-oracle convergence", Some(5.0), &mut c2_exact_oracle);
    report(3, "Cauchy convergence, explicit scheme", Some(300.0), &mut || {
        let (v, r) = c3_cauchy(&hawk_dove);
        cauchy = Some(r);
        v
    });
    report(4, "weak-form residual", Some(300.0), &mut || c4_weak_residual(&hawk_dove));
    report(5, "Hellinger prox vs grid oracle", Some(120.0), &mut c5_hellinger_prox);
    report(6, "Euler-Lagrange residual, Hellinger prox", Some(300.0), &mut || c6_el_residual(&hawk_dove));
    report(7, "explicit/implicit consistency", None, &mut || {
        let r = match &cauchy {
            Some(r) => r.clone(),
            None => c3_cauchy(&hawk_dove).1,
        };
        c7_explicit_vs_implicit(&hawk_dove, &r)
    });
    report(8, "Markov geometry", Some(120.0), &mut c8_markov_geometry);
    report(9, "Markov prox residual", None, &mut || c9_markov_residual(&two_state));
    report(10, "surrogate gap", Some(120.0), &mut || c10_surrogate_gap(&two_state));
    report(11, "short-time stability", None, &mut || c11_short_time(&margin));
    report(12, "determinism in pinned mode", None, &mut || c12_determinism(&hawk_dove));
    if failures.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}
