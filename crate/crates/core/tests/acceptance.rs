//! Acceptance criteria, one PASS/FAIL line each.
//!
//! The process exits nonzero when any criterion fails, except those listed
//! in `KNOWN_FAILURES`, which still print FAIL.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nullctl::carleman_weights::{expansion_order, ExpansionExpr, WeightParams};
use nullctl::experiment::{
    calculus_residuals, carleman_sweep, picard_history, random_duality_residual, run_decay_sweep,
    run_suite, ExperimentConfig, Suite, SweepReport,
};
use nullctl::hum_control::{geometric_fit, lift_defect, solve_hum_linear, solve_hum_semilinear};
use nullctl::mesh::{build_mesh, Regions};
use nullctl::scenario_tree::{
    build_tree, isometry_residual, ito_product_residual, martingale_residual, AdaptedProcess,
    ScenarioTree,
};

/// Criteria that fail for a documented reason.
const KNOWN_FAILURES: &[u32] = &[8];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: String) -> Verdict {
    Verdict { passed, detail }
}

fn criterion(id: u32, name: &str, budget: Duration, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let v = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= budget;
    let ok = v.passed && in_time;
    println!(
        "{} criterion {id} ({name}): {}; runtime {:.2}s (budget {}s){}",
        if ok { "PASS" } else { "FAIL" },
        v.detail,
        elapsed.as_secs_f64(),
        budget.as_secs(),
        if in_time { "" } else { " over budget" }
    );
    ok
}

fn c1() -> Verdict {
    let mut worst = 0.0f64;
    for n in [4, 8, 16, 32, 64] {
        for (_, r) in calculus_residuals(n, 1000, 1).unwrap() {
            worst = worst.max(r);
        }
    }
    verdict(
        worst <= 1e-12,
        format!("max relative residual {worst:.3e} <= 1e-12"),
    )
}

fn c2() -> Verdict {
    let hs: Vec<f64> = [16, 32, 64, 128, 256]
        .iter()
        .map(|k| 1.0 / *k as f64)
        .collect();
    let params = WeightParams {
        lambda: 0.08,
        mu: 0.35,
        m: 1,
        delta: 0.2,
        t_final: 0.9,
    };
    let mut slopes = Vec::new();
    for expr in ExpansionExpr::ALL {
        let rep = expansion_order(&hs, &params, &Regions::default(), expr, 0.03).unwrap();
        slopes.push((expr.name(), rep.slope.unwrap_or(f64::NAN)));
    }
    let good = slopes
        .iter()
        .filter(|(_, s)| (1.8..=2.2).contains(s))
        .count();
    let list: Vec<String> = slopes.iter().map(|(n, s)| format!("{n}={s:.3}")).collect();
    verdict(
        good >= 3,
        format!("{good} slopes in [1.8, 2.2] ({})", list.join(", ")),
    )
}

fn c3() -> Verdict {
    let mut worst = 0.0f64;
    let mut bitwise = true;
    for m in 1..=10 {
        let t = build_tree(m, 0.9, 0).unwrap();
        let w = t.brownian();
        worst = worst.max(martingale_residual(&w).unwrap());
        worst = worst.max(ito_product_residual(&w, &w).unwrap());
        let g = AdaptedProcess::from_fn(1, 0, m - 1, |k, p, out| {
            out[0] = 1.0 + ((k * 7 + p) as f64).sin()
        });
        worst = worst.max(isometry_residual(&t, &g).unwrap());
        let x = w.map(|v| (0.4 * v).cos() + v);
        let b = x.map(|v| v * v);
        worst = worst.max(ito_product_residual(&x, &b).unwrap());

        let tree_value = w.map(|v| (0.3 * v).exp()).expectation(m).unwrap()[0];
        let prob = ScenarioTree::probability(m);
        let mut path_value = 0.0;
        for bits in t.enumerate_paths() {
            let wv = bits.iter().fold(0.0, |acc, up| {
                acc + if *up { t.sqrt_dt() } else { -t.sqrt_dt() }
            });
            path_value += prob * (0.3 * wv).exp();
        }
        bitwise &= tree_value.to_bits() == path_value.to_bits();
    }
    verdict(
        worst <= 1e-12 && bitwise,
        format!("max residual {worst:.3e} <= 1e-12, enumeration bitwise equal: {bitwise}"),
    )
}

fn c4() -> Verdict {
    let mesh = build_mesh(8, Regions::default()).unwrap();
    let tree = build_tree(6, 0.9, 0).unwrap();
    let worst = (0..100u64)
        .map(|i| random_duality_residual(&mesh, &tree, 4, i).unwrap())
        .fold(0.0, f64::max);
    verdict(
        worst <= 1e-10,
        format!("max duality residual {worst:.3e} <= 1e-10 over 100 data sets"),
    )
}

fn c5() -> Verdict {
    let mut gap = 0.0f64;
    let mut err = 0.0f64;
    for seed in 0..5 {
        let c = common::compare_with_oracle(seed, 1e-3);
        gap = gap.max(c.objective_gap);
        err = err.max(c.control_error);
    }
    let mut kkt = 0.0f64;
    for (n, m) in [(4, 4), (8, 6), (16, 8), (32, 10)] {
        let regions = if n == 4 {
            common::small_regions()
        } else {
            Regions::default()
        };
        let s = common::setup(n, m, regions, 3);
        let res = solve_hum_linear(&common::problem(&s, 1e-4)).unwrap();
        kkt = kkt.max(res.kkt_residual);
    }
    verdict(
        gap <= 1e-8 && err <= 1e-6 && kkt <= 1e-6,
        format!("objective gap {gap:.3e} <= 1e-8, control error {err:.3e} <= 1e-6, max KKT {kkt:.3e} <= 1e-6"),
    )
}

fn decay_verdict(sweeps: &nullctl::Result<Vec<SweepReport>>) -> Verdict {
    match sweeps {
        Ok(reports) => {
            let mut ok = reports.len() == 2;
            let mut parts = Vec::new();
            for r in reports {
                let (slope, r2) = r.fit.map_or((f64::NAN, f64::NAN), |f| (f.slope, f.r2));
                let contraction = r.max_contraction();
                let good = slope < 0.0
                    && r2 >= 0.9
                    && r.rows.len() == 3
                    && (r.kind == "linear" || contraction < 0.9);
                ok &= good;
                parts.push(format!(
                    "{}: slope {slope:.4} < 0, R^2 {r2:.4} >= 0.9, contraction {contraction:.3}",
                    r.kind
                ));
            }
            verdict(ok, parts.join("; "))
        }
        Err(e) => verdict(false, format!("sweep failed: {e}")),
    }
}

fn main() -> ExitCode {
    let config = ExperimentConfig::default();
    let mut results = Vec::new();
    let secs = Duration::from_secs;

    results.push((
        1,
        criterion(1, "discrete calculus identities", secs(10), c1),
    ));
    results.push((2, criterion(2, "weight expansion order", secs(30), c2)));
    results.push((3, criterion(3, "tree Ito calculus", secs(30), c3)));
    results.push((4, criterion(4, "discrete duality", secs(60), c4)));
    results.push((5, criterion(5, "HUM optimality", secs(120), c5)));

    let mut sweeps = Err(nullctl::Error::Config("not run".into()));
    results.push((
        6,
        criterion(6, "terminal decay", secs(600), || {
            sweeps = run_decay_sweep(&config);
            decay_verdict(&sweeps)
        }),
    ));

    results.push((
        7,
        criterion(7, "cost uniformity", secs(600), || match &sweeps {
            Ok(reports) => {
                let spreads: Vec<(&str, f64)> =
                    reports.iter().map(|r| (r.kind, r.cost_spread())).collect();
                let ok = spreads.iter().all(|(_, s)| *s <= 10.0);
                let parts: Vec<String> = spreads
                    .iter()
                    .map(|(k, s)| format!("{k} spread {s:.3} <= 10"))
                    .collect();
                verdict(ok, parts.join("; "))
            }
            Err(e) => verdict(false, format!("sweep failed: {e}")),
        }),
    ));

    results.push((
        8,
        criterion(
            8,
            "Carleman ratio h-stability",
            secs(300),
            || match carleman_sweep(&config) {
                Ok(rows) => {
                    let finite = rows.iter().all(|r| r.all_finite);
                    let enough = rows.iter().all(|r| r.samples >= 100);
                    let max = rows.iter().map(|r| r.max).fold(f64::NEG_INFINITY, f64::max);
                    let min = rows.iter().map(|r| r.max).fold(f64::INFINITY, f64::min);
                    let per: Vec<String> = rows
                        .iter()
                        .map(|r| format!("N={} max {:.3e}", r.n, r.max))
                        .collect();
                    verdict(
                        finite && enough && max / min <= 10.0,
                        format!(
                            "finite {finite}, {}, spread {:.3} <= 10",
                            per.join(", "),
                            max / min
                        ),
                    )
                }
                Err(e) => verdict(false, format!("failed: {e}")),
            },
        ),
    ));

    results.push((
        9,
        criterion(9, "semilinear contraction and lift", secs(120), || {
            let n = config.mesh.n;
            let distances = picard_history(&config, n, config.weights.lambda).unwrap();
            let (factor, r2) = geometric_fit(&distances);
            let s = common::setup(n, config.time.steps, Regions::default(), 0);
            let nl = config.nonlinearity();
            let mut pr = common::problem(&s, 1e-4);
            pr.cg = config.cg();
            let semi = solve_hum_semilinear(&pr, &nl, config.picard()).unwrap();
            let lift = lift_defect(&s.mesh, &s.tree, &s.y0, &semi.result.controls, &nl).unwrap();
            verdict(
                factor < 1.0 && r2 >= 0.95 && lift <= 1e-12,
                format!("fit factor {factor:.4} < 1, R^2 {r2:.4} >= 0.95, lift defect {lift:.3e} <= 1e-12"),
            )
        }),
    ));

    results.push((
        10,
        criterion(10, "reproducibility", secs(600), || {
            let dir = tempfile::tempdir().unwrap();
            let suites = [
                Suite::Calculus,
                Suite::Weights,
                Suite::Simulate,
                Suite::HumLinear,
                Suite::HumSemilinear,
                Suite::Carleman,
                Suite::Decay,
            ];
            let mut mismatched = Vec::new();
            for suite in suites {
                let mut bytes = Vec::new();
                for (run, jobs) in [(0, 1), (1, 4)] {
                    let mut cfg = config.clone();
                    cfg.run.jobs = jobs;
                    let out = dir.path().join(format!("{}-{run}", suite.name()));
                    run_suite(&cfg, suite, true)
                        .unwrap()
                        .write(&cfg, &out)
                        .unwrap();
                    bytes.push((
                        fs::read(out.join("results.csv")).unwrap(),
                        fs::read(out.join("report.json")).unwrap(),
                    ));
                }
                if bytes[0] != bytes[1] {
                    mismatched.push(suite.name());
                }
            }
            verdict(
                mismatched.is_empty(),
                format!("7 suites rerun with 1 and 4 threads, mismatches: {mismatched:?}"),
            )
        }),
    ));

    let unexpected: Vec<u32> = results
        .iter()
        .filter(|(id, ok)| !ok && !KNOWN_FAILURES.contains(id))
        .map(|(id, _)| *id)
        .collect();
    for (id, ok) in &results {
        if !ok && KNOWN_FAILURES.contains(id) {
            println!("note: criterion {id} is a known failure");
        }
    }
    let passed = results.iter().filter(|(_, ok)| *ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("unexpected failures: {unexpected:?}");
        ExitCode::FAILURE
    }
}
