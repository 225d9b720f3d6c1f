//! Separable heat solution `e^{-2 nu pi^2 t} sin(pi x) sin(pi y)` as oracle
//! for the uncontrolled state, in a regime where time and space errors
//! separate.

use std::f64::consts::PI;
use std::sync::Arc;

use heat_toc::analysis::eoc;
use heat_toc::fem::{l2_project, AssembledOperators};
use heat_toc::mesh::build_unit_square;
use heat_toc::parabolic::{observation, solve_state, TimeGrid};

const NU: f64 = 0.05;

fn terminal_error(base: usize, steps: usize) -> f64 {
    let ops = AssembledOperators::new(Arc::new(build_unit_square(base, 0).unwrap()));
    let u0 = l2_project(&ops, |x, y| (PI * x).sin() * (PI * y).sin()).unwrap();
    let traj = solve_state(&ops, &TimeGrid::uniform(steps).unwrap(), NU, &[], &u0).unwrap();
    let exact = u0.scaled((-2.0 * PI * PI * NU).exp());
    ops.l2_norm(&observation(&traj).sub(&exact))
}

#[test]
fn first_order_in_time() {
    let errors: Vec<f64> = [4, 8, 16, 32].iter().map(|&m| terminal_error(64, m)).collect();
    for r in eoc(&errors, 2.0).unwrap() {
        assert!((0.85..=1.15).contains(&r), "{errors:?}");
    }
}

#[test]
fn second_order_in_space() {
    let errors: Vec<f64> = [4, 8, 16, 32].iter().map(|&b| terminal_error(b, 4096)).collect();
    for r in eoc(&errors, 2.0).unwrap() {
        assert!((1.8..=2.2).contains(&r), "{errors:?}");
    }
}
