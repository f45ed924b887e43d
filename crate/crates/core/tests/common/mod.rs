#![allow(dead_code, clippy::needless_range_loop)]

use nalgebra::{DMatrix, DVector};
use nullctl::carleman_weights::{WeightParams, WeightSet};
use nullctl::hum_control::{solve_hum_linear, CgOptions, Controls, HumProblem, HumResult};
use nullctl::mesh::{build_mesh, Interval, Mesh, Region, Regions};
use nullctl::scenario_tree::{build_tree, AdaptedProcess, ScenarioTree};
use nullctl::spde_solvers::{solve_forward, ForwardSystemSpec, HeatStep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Regions that fit a 4-node mesh.
pub fn small_regions() -> Regions {
    Regions {
        g0: Interval::new(0.1, 0.9),
        g1: Interval::new(0.15, 0.85),
        g2: Interval::new(0.35, 0.65),
    }
}

pub struct Setup {
    pub mesh: Mesh,
    pub tree: ScenarioTree,
    pub weights: WeightSet,
    pub y0: Vec<f64>,
}

pub fn setup(n: usize, m: usize, regions: Regions, seed: u64) -> Setup {
    let mesh = build_mesh(n, regions).unwrap();
    let tree = build_tree(m, 0.9, seed).unwrap();
    let params = WeightParams {
        lambda: 0.08,
        mu: 0.35,
        m: 1,
        delta: 0.3,
        t_final: 0.9,
    };
    let weights = WeightSet::new(&mesh, params, &tree.times()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Setup {
        mesh,
        tree,
        weights,
        y0,
    }
}

pub fn problem(s: &Setup, epsilon: f64) -> HumProblem<'_> {
    HumProblem {
        mesh: &s.mesh,
        tree: &s.tree,
        weights: &s.weights,
        y0: s.y0.clone(),
        source: None,
        epsilon,
        cg: CgOptions {
            rel_tol: 1e-13,
            max_iter: 10_000,
        },
        eps0: 1.0,
    }
}

fn controls_from(v: &[f64], n: usize, m: usize) -> Controls {
    let mut c = Controls::zeros(n, m);
    let half = v.len() / 2;
    let mut it = v[..half].iter();
    for k in 0..m {
        c.u.level_mut(k)
            .iter_mut()
            .for_each(|x| *x = *it.next().unwrap());
    }
    let mut it = v[half..].iter();
    for k in 0..m {
        c.v.level_mut(k)
            .iter_mut()
            .for_each(|x| *x = *it.next().unwrap());
    }
    c
}

fn state(s: &Setup, y0: &[f64], c: &Controls) -> AdaptedProcess {
    let step = HeatStep::for_mesh(&s.mesh, &s.tree);
    let mut spec = ForwardSystemSpec::new(&s.mesh, &s.tree, y0);
    spec.u = Some(&c.u);
    spec.v = Some(&c.v);
    solve_forward(&spec, &step).unwrap()
}

fn flatten(y: &AdaptedProcess) -> Vec<f64> {
    y.levels_iter().flat_map(|(_, l)| l.to_vec()).collect()
}

pub struct Oracle {
    pub controls: Vec<f64>,
    pub objective: f64,
}

/// Minimizes the functional by assembling the forward map column by column
/// and solving the dense normal equations.
pub fn dense_qp(s: &Setup, epsilon: f64) -> Oracle {
    let (n, m, h, dt) = (s.mesh.n(), s.tree.depth(), s.mesh.h(), s.tree.dt());
    let per_level: usize = (0..m).map(|k| n << k).sum();
    let dim = 2 * per_level;
    let zero = Controls::zeros(n, m);
    let free = DVector::from_vec(flatten(&state(s, &s.y0, &zero)));
    let zeros_y0 = vec![0.0; n];
    let mut g = DMatrix::zeros(free.len(), dim);
    for j in 0..dim {
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let col = flatten(&state(s, &zeros_y0, &controls_from(&e, n, m)));
        g.set_column(j, &DVector::from_vec(col));
    }
    // State weights q and control weights d, directly from the weight tables.
    let chi = s.mesh.indicator(Region::G0);
    let mut q = Vec::with_capacity(free.len());
    for k in 0..=m {
        let p = 0.5f64.powi(k as i32);
        let decay: Vec<f64> = (0..n)
            .map(|i| (-2.0 * s.weights.s[k] * s.weights.phi_primal(i + 1)).exp())
            .collect();
        for _ in 0..(1usize << k) {
            for i in 0..n {
                q.push(if k < m {
                    0.5 * dt * h * p * decay[i]
                } else {
                    h * p / epsilon
                });
            }
        }
    }
    let mut d = vec![0.0; dim];
    let mut idx = 0;
    for pass in 0..2 {
        for k in 0..m {
            let p = 0.5f64.powi(k as i32);
            let sk = s.weights.s[k];
            for _ in 0..(1usize << k) {
                for i in 0..n {
                    let decay = (-2.0 * sk * s.weights.phi_primal(i + 1)).exp();
                    d[idx] = if pass == 0 {
                        dt * h * p * chi[i] * decay / sk.powi(3)
                    } else {
                        dt * h * p * decay / (sk * sk)
                    };
                    idx += 1;
                }
            }
        }
    }
    let qd = DMatrix::from_diagonal(&DVector::from_vec(q.clone()));
    let mut lhs = g.transpose() * &qd * &g * 2.0;
    for (i, di) in d.iter().enumerate() {
        lhs[(i, i)] += di;
    }
    let rhs = -(g.transpose() * &qd * &free) * 2.0;
    let c = lhs.lu().solve(&rhs).expect("dense system is singular");
    let y = &g * &c + &free;
    let objective = y.iter().zip(&q).map(|(v, w)| w * v * v).sum::<f64>()
        + 0.5 * c.iter().zip(&d).map(|(v, w)| w * v * v).sum::<f64>();
    Oracle {
        controls: c.iter().copied().collect(),
        objective,
    }
}

pub struct Comparison {
    pub objective_gap: f64,
    pub control_error: f64,
    pub result: HumResult,
}

pub fn compare_with_oracle(seed: u64, epsilon: f64) -> Comparison {
    let s = setup(4, 4, small_regions(), seed);
    let oracle = dense_qp(&s, epsilon);
    let result = solve_hum_linear(&problem(&s, epsilon)).unwrap();
    let cg = result.controls.to_vec();
    let diff: f64 = cg
        .iter()
        .zip(&oracle.controls)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = oracle.controls.iter().map(|v| v * v).sum::<f64>().sqrt();
    Comparison {
        objective_gap: (result.j_value - oracle.objective).abs() / oracle.objective.abs(),
        control_error: diff / norm,
        result,
    }
}
