mod common;

use common::{compare_with_oracle, problem, setup};
use nullctl::hum_control::{evaluate_functional, solve_hum_linear, Controls};
use nullctl::mesh::Regions;

#[test]
fn cg_matches_dense_qp() {
    for seed in 0..4 {
        for eps in [1e-2, 1e-4] {
            let c = compare_with_oracle(seed, eps);
            assert!(
                c.objective_gap <= 1e-8,
                "seed {seed} eps {eps}: gap {}",
                c.objective_gap
            );
            assert!(
                c.control_error <= 1e-6,
                "seed {seed} eps {eps}: error {}",
                c.control_error
            );
        }
    }
}

#[test]
fn kkt_residual_across_scales() {
    for (n, m) in [(7, 3), (15, 6), (31, 8)] {
        let s = setup(n, m, Regions::default(), 11);
        let res = solve_hum_linear(&problem(&s, 1e-5)).unwrap();
        assert!(res.converged, "N={n} M={m}");
        assert!(
            res.kkt_residual <= 1e-6,
            "N={n} M={m}: {}",
            res.kkt_residual
        );
        assert!(
            res.duality_residual <= 1e-8,
            "N={n} M={m}: {}",
            res.duality_residual
        );
    }
}

#[test]
fn optimum_beats_perturbations() {
    let s = setup(7, 4, Regions::default(), 5);
    let pr = problem(&s, 1e-3);
    let res = solve_hum_linear(&pr).unwrap();
    let mut probe = res.controls.clone();
    for k in 0..4 {
        for (j, v) in probe.v.level_mut(k).iter_mut().enumerate() {
            *v += 1e-3 * ((j + k) as f64).sin();
        }
    }
    assert!(evaluate_functional(&pr, &probe).unwrap() > res.j_value);
    let zero = Controls::zeros(7, 4);
    assert!(evaluate_functional(&pr, &zero).unwrap() >= res.j_value);
}
