//! Exit criteria. Each criterion prints one PASS/FAIL line; the process
//! exits with status 1 if any criterion fails.

use std::f64::consts::PI;
use std::sync::Arc;
use std::time::Instant;

use heat_toc::analysis::{eoc, eoc_fit};
use heat_toc::config::{parse_config, ExperimentConfig};
use heat_toc::control::{Bounds, Control, ControlDiscretization, ControlOperatorSpec};
use heat_toc::distance::{solve_min_distance, DistanceSettings};
use heat_toc::fem::{l2_project, AssembledOperators};
use heat_toc::mesh::{build_unit_square, SubdomainSpec};
use heat_toc::parabolic::{observation, solve_state, TimeGrid};
use heat_toc::problem::{DiscreteProblem, FieldSpec, ProblemSpec};
use heat_toc::study::{run_convergence_study, solve_point, structural_of, OperatorCache};
use heat_toc::time_solver::{
    adjoint_trajectory, eval_dg_dnu, eval_g, eval_value_function, solve_time_optimal, state_trajectory,
    ProblemValueFunction, TimeOptimalSettings,
};
use rand::{Rng, SeedableRng};

type Outcome = (bool, String);
type Criterion = (&'static str, fn() -> Outcome);

fn rates(errors: &[f64]) -> String {
    match eoc(errors, 2.0) {
        Ok(r) => r.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" "),
        Err(e) => format!("n/a ({e})"),
    }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}

fn in_band(v: Option<f64>, band: (f64, f64)) -> bool {
    v.is_some_and(|x| x >= band.0 && x <= band.1)
}

fn fit(errors: &[f64]) -> Option<f64> {
    eoc_fit(errors, 2.0).ok()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.3}"))
}

fn study_config(text: &str) -> (ExperimentConfig, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = parse_config(text).unwrap();
    cfg.outputs = dir.path().join("out");
    (cfg, dir)
}

fn heat_error(ops: &AssembledOperators, m: usize) -> f64 {
    let u0 = l2_project(ops, |x, y| (PI * x).sin() * (PI * y).sin()).unwrap();
    let grid = TimeGrid::uniform(m).unwrap();
    let traj = solve_state(ops, &grid, 1.0, &[], &u0).unwrap();
    let exact = u0.scaled((-2.0 * PI * PI).exp());
    ops.l2_norm(&observation(&traj).sub(&exact))
}

fn heat_oracle() -> Outcome {
    let start = Instant::now();
    let ops32 = AssembledOperators::new(Arc::new(build_unit_square(32, 0).unwrap()));
    let ek: Vec<f64> = [8, 16, 32, 64].iter().map(|&m| heat_error(&ops32, m)).collect();
    let eh: Vec<f64> = [8, 16, 32, 64]
        .iter()
        .map(|&b| heat_error(&AssembledOperators::new(Arc::new(build_unit_square(b, 0).unwrap())), 256))
        .collect();
    let secs = start.elapsed().as_secs_f64();
    let (rk, rh) = (fit(&ek), fit(&eh));
    let ok = in_band(rk, (0.8, 1.2)) && in_band(rh, (1.7, 2.3)) && secs < 120.0;
    (
        ok,
        format!(
            "k: errors {} eoc {} (pairwise {}), h: errors {} eoc {} (pairwise {}), {secs:.1}s",
            sci(&ek),
            fmt_opt(rk),
            rates(&ek),
            sci(&eh),
            fmt_opt(rh),
            rates(&eh)
        ),
    )
}

fn study_line(text: &str, nu_band: (f64, f64), q_band: (f64, f64), limit: f64) -> Outcome {
    let (cfg, _dir) = study_config(text);
    let start = Instant::now();
    let out = match run_convergence_study(&cfg, 1) {
        Ok(o) => o,
        Err(e) => return (false, format!("study failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let en: Vec<f64> = out.table.rows.iter().map(|r| r.err_nu).collect();
    let eq: Vec<f64> = out.table.rows.iter().map(|r| r.err_q).collect();
    let (rn, rq) = (fit(&en), fit(&eq));
    let ok = in_band(rn, nu_band) && in_band(rq, q_band) && secs < limit;
    (
        ok,
        format!(
            "nu ref {:.8}: err_nu {} eoc {} (pairwise {}), err_q {} eoc {} (pairwise {}), {secs:.1}s",
            out.reference.result.nu(),
            sci(&en),
            fmt_opt(rn),
            rates(&en),
            sci(&eq),
            fmt_opt(rq),
            rates(&eq)
        ),
    )
}

fn temporal_5_1() -> Outcome {
    study_line(
        "example = \"5.1\"\nmesh_base = 8\nmesh_levels = [3]\ntime_steps = [10, 20, 40, 80, 160]\n[reference]\nlevel = 3\ntime_steps = 320",
        (0.7, 1.3),
        (0.7, 1.3),
        900.0,
    )
}

fn spatial_5_1() -> Outcome {
    study_line(
        "example = \"5.1\"\nmesh_base = 8\nmesh_levels = [0, 1, 2]\ntime_steps = [320]\n[reference]\nlevel = 3\ntime_steps = 320",
        (1.6, 2.4),
        (1.5, 2.5),
        f64::INFINITY,
    )
}

fn example_5_2() -> Outcome {
    let (k_ok, k_line) = study_line(
        "example = \"5.2\"\nmesh_base = 8\nmesh_levels = [1]\ntime_steps = [10, 20, 40]\n[reference]\nlevel = 1\ntime_steps = 80",
        (0.7, 1.3),
        (0.3, 0.8),
        f64::INFINITY,
    );
    let (h_ok, h_line) = study_line(
        "example = \"5.2\"\nmesh_base = 8\nmesh_levels = [0, 1]\ntime_steps = [40]\n[reference]\nlevel = 2\ntime_steps = 40",
        (1.6, 2.4),
        (0.6, 1.4),
        f64::INFINITY,
    );
    (k_ok && h_ok, format!("in k: {k_line}; in h: {h_line}"))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

fn derivative_checks() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for spec in [ProblemSpec::example_5_1(), ProblemSpec::example_5_2()] {
        let p = DiscreteProblem::new(&spec, 8, 0, TimeGrid::uniform(16).unwrap(), spec.default_discretization()).unwrap();
        let nu = 0.05;
        let q = p.space.midpoint_control(&p.grid);
        let u = state_trajectory(&p, nu, &q).unwrap();
        let r = observation(&u).sub(&p.ud);
        let z = adjoint_trajectory(&p, nu, &r, 1.0).unwrap();
        let dg = eval_dg_dnu(&p, &q, &u, &z).unwrap();
        let h = 1e-4 * nu;
        let fd_g = (eval_g(&p, nu + h, &q).unwrap() - eval_g(&p, nu - h, &q).unwrap()) / (2.0 * h);
        let settings = DistanceSettings { tol_gap: 1e-10, max_iter: 20000, ..Default::default() };
        let (point, _) = eval_value_function(&p, nu, &settings, None).unwrap();
        let hd = 1e-3 * nu;
        let dp = eval_value_function(&p, nu + hd, &settings, None).unwrap().0.delta;
        let dm = eval_value_function(&p, nu - hd, &settings, None).unwrap().0.delta;
        let fd_delta = (dp - dm) / (2.0 * hd);
        let dd = point.derivative.unwrap_or(f64::NAN);
        let (e1, e2) = (rel(dg, fd_g), rel(dd, fd_delta));
        worst = worst.max(e1).max(e2);
        if !(e1.is_finite() && e2.is_finite()) {
            worst = f64::NAN;
        }
        parts.push(format!(
            "{}: dg/dnu {dg:.8e} vs fd {fd_g:.8e} (rel {e1:.1e}), delta' {dd:.8e} vs fd {fd_delta:.8e} (rel {e2:.1e})",
            spec.name
        ));
    }
    (worst <= 1e-4, parts.join("; "))
}

fn single_form_problem() -> ProblemSpec {
    ProblemSpec {
        name: "single form".into(),
        initial: FieldSpec::FirstEigenfunction,
        target: FieldSpec::Zero,
        control: ControlOperatorSpec::Parameter {
            regions: vec![SubdomainSpec { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 }],
        },
        bounds: Bounds { lower: -5.0, upper: 0.0 },
        delta0: 0.1,
    }
}

fn inner_certificates() -> Outcome {
    // logged runs: every inner solve of a full outer solve, plain and accelerated
    let spec = ProblemSpec::example_5_1();
    let p = DiscreteProblem::new(&spec, 8, 0, TimeGrid::uniform(20).unwrap(), spec.default_discretization()).unwrap();
    let mut increases = 0usize;
    let mut min_gap = f64::INFINITY;
    let mut runs = 0usize;
    for accelerate in [true, false] {
        let mut s = TimeOptimalSettings::for_problem(1e-8, spec.delta0);
        s.inner.accelerate = accelerate;
        s.inner.max_iter = 2000;
        let mut vf = ProblemValueFunction::new(&p, s.inner.clone()).keep_inner_results(true);
        heat_toc::time_solver::solve_root(&mut vf, &s.outer).unwrap();
        for (_, res) in vf.inner_results() {
            runs += 1;
            increases += res.log.windows(2).filter(|w| w[1].f > w[0].f).count();
            min_gap = res.log.iter().map(|r| r.gap).fold(min_gap, f64::min);
        }
    }
    // suboptimality certificate against a fine reference
    let spec1 = single_form_problem();
    let p1 = DiscreteProblem::new(&spec1, 4, 0, TimeGrid::uniform(4).unwrap(), ControlDiscretization::Parameter).unwrap();
    let nu = 0.1;
    let op = p1.observation_operator(nu).unwrap();
    let fine = solve_min_distance(op.as_ref(), &p1.ud, &DistanceSettings { tol_gap: 1e-15, max_iter: 100000, ..Default::default() }, None).unwrap();
    let mut violations = 0usize;
    let mut rows = 0usize;
    for accelerate in [true, false] {
        let s = DistanceSettings { tol_gap: 1e-12, accelerate, max_iter: 5000, ..Default::default() };
        let res = solve_min_distance(op.as_ref(), &p1.ud, &s, None).unwrap();
        for r in &res.log {
            rows += 1;
            if r.gap < r.f - fine.f {
                violations += 1;
            }
        }
    }
    let ok = increases == 0 && min_gap >= -1e-12 && violations == 0;
    (
        ok,
        format!(
            "{runs} logged runs: {increases} increases of f, min gap {min_gap:.2e}; certificate: {violations} of {rows} iterations with gap < f - f* (f* = {:.12})",
            fine.f
        ),
    )
}

fn root_certification() -> Outcome {
    let spec = ProblemSpec::example_5_1();
    let p = DiscreteProblem::new(&spec, 16, 0, TimeGrid::uniform(40).unwrap(), spec.default_discretization()).unwrap();
    let s = TimeOptimalSettings::for_problem(1e-8, spec.delta0);
    let newton = solve_time_optimal(&p, &s).unwrap();
    let mut sb = s.clone();
    sb.bisection_only = true;
    let bisection = solve_time_optimal(&p, &sb).unwrap();
    let (delta_star, _) = eval_value_function(
        &p,
        newton.nu(),
        &DistanceSettings { tol_gap: 1e-12, ..Default::default() },
        Some(&newton.control),
    )
    .unwrap();
    let diff = (newton.nu() - bisection.nu()).abs();
    let ok = delta_star.delta.abs() <= 1e-7 && diff <= 1e-6;
    (
        ok,
        format!(
            "nu* {:.10} ({} newton, {} bisection steps), |delta(nu*)| {:.2e}, bisection nu {:.10}, diff {diff:.2e}",
            newton.nu(),
            newton.solution.newton_steps,
            newton.solution.bisection_steps,
            delta_star.delta.abs(),
            bisection.nu()
        ),
    )
}

fn kkt_suite() -> Outcome {
    let spec = ProblemSpec::example_5_1();
    let p = DiscreteProblem::new(&spec, 16, 0, TimeGrid::uniform(40).unwrap(), spec.default_discretization()).unwrap();
    let mut fractions = Vec::new();
    let mut last = None;
    for tol in [1e-5, 1e-7, 1e-9] {
        let mut s = TimeOptimalSettings::for_problem(1e-8, spec.delta0);
        s.inner.tol_gap = tol;
        let r = solve_time_optimal(&p, &s).unwrap();
        fractions.push(r.kkt.interior_fraction);
        last = Some(r);
    }
    let k = last.unwrap().kkt;
    let monotone = fractions.windows(2).all(|w| w[1] <= w[0]);
    let ok = k.mu > 0.0
        && k.hamiltonian_residual <= 1e-9
        && k.feasibility_residual <= 1e-6
        && k.slater_margin > 0.0
        && fractions[2] <= 0.02
        && monotone;
    (
        ok,
        format!(
            "mu {:.6}, hamiltonian {:.1e}, |G| {:.1e}, slater {:.4e}, interior fractions {fractions:?}",
            k.mu, k.hamiltonian_residual, k.feasibility_residual, k.slater_margin
        ),
    )
}

fn variational_equivalence() -> Outcome {
    let spec = ProblemSpec::example_5_1();
    let grid = TimeGrid::uniform(20).unwrap();
    let ops = Arc::new(AssembledOperators::new(Arc::new(build_unit_square(8, 0).unwrap())));
    let var = DiscreteProblem::on_operators(&spec, ops.clone(), grid.clone(), ControlDiscretization::ParameterVariational { samples: 4 }).unwrap();
    let pc = DiscreteProblem::on_operators(&spec, ops, grid, ControlDiscretization::Parameter).unwrap();
    let s = TimeOptimalSettings::for_problem(1e-8, spec.delta0);
    let rv = solve_time_optimal(&var, &s).unwrap();
    let projected: Control = var.space.interval_means(&rv.control).unwrap();
    let nu = rv.nu();
    let obs_var = var.observation_operator(nu).unwrap().observe(&rv.control).unwrap();
    let obs_proj = pc.observation_operator(nu).unwrap().observe(&projected).unwrap();
    let dobs = var.ops.l2_norm(&obs_var.sub(&obs_proj));
    let dg = (eval_g(&var, nu, &rv.control).unwrap() - eval_g(&pc, nu, &projected).unwrap()).abs();
    let rp = solve_time_optimal(&pc, &s).unwrap();
    let dnu = (rp.nu() - nu).abs();
    let ok = dobs <= 1e-12 && dg <= 1e-12 && dnu <= 1e-6;
    (
        ok,
        format!("observation change {dobs:.2e}, g change {dg:.2e}, nu variational {nu:.10} vs piecewise constant {:.10} (diff {dnu:.2e})", rp.nu()),
    )
}

fn structural_report() -> Outcome {
    let cfg = parse_config("example = \"5.1\"\nmesh_base = 8\nmesh_levels = [2]\ntime_steps = [160]").unwrap();
    let point = solve_point(&cfg, &OperatorCache::new(8), 2, 160).unwrap();
    let (report, kappa) = structural_of(&point).unwrap();
    let w = report.default_window();
    let (ok51, line51) = match &kappa {
        Ok(k) => (
            (0.8..=1.2).contains(&k.kappa),
            format!("5.1 kappa {:.4} residual {:.2e} over [{:.2e}, {:.2e}]", k.kappa, k.residual, w.0, w.1),
        ),
        Err(e) => (false, format!("5.1 kappa unavailable over [{:.2e}, {:.2e}]: {e}", w.0, w.1)),
    };
    let cfg = parse_config("example = \"5.2\"\nmesh_base = 8\nmesh_levels = [0]\ntime_steps = [20]").unwrap();
    let line52 = match solve_point(&cfg, &OperatorCache::new(8), 0, 20) {
        Ok(p) => match structural_of(&p) {
            Ok((_, Ok(k))) => format!("5.2 kappa {:.4} residual {:.2e}", k.kappa, k.residual),
            Ok((_, Err(e))) => format!("5.2 report emitted, no fit: {e}"),
            Err(e) => format!("5.2 report failed: {e}"),
        },
        Err(e) => format!("5.2 report not emitted: {e}"),
    };
    (ok51, format!("{line51}; {line52}"))
}

fn lipschitz_in_nu() -> Outcome {
    let spec = ProblemSpec::example_5_1();
    let grid = TimeGrid::uniform(16).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(11);
    let values: Vec<f64> = (0..grid.len() * 2).map(|_| rng.gen_range(-1.5..=0.0)).collect();
    let q = Control { grid: grid.clone(), dofs: 2, values };
    let pairs: Vec<(f64, f64)> = (0..20).map(|_| (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0))).collect();
    let ratio = |base: usize| {
        let p = DiscreteProblem::new(&spec, base, 0, grid.clone(), ControlDiscretization::Parameter).unwrap();
        pairs
            .iter()
            .map(|&(a, b)| {
                let ua = p.observation_operator(a).unwrap().observe(&q).unwrap();
                let ub = p.observation_operator(b).unwrap().observe(&q).unwrap();
                p.ops.l2_norm(&ua.sub(&ub)) / (a - b).abs()
            })
            .fold(0.0, f64::max)
    };
    let (c8, c16) = (ratio(8), ratio(16));
    (c16 <= 1.1 * c8, format!("C fitted at base 8 {c8:.6e}, max ratio at base 16 {c16:.6e} ({:.3} C)", c16 / c8))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("heat solver oracle", heat_oracle),
        ("5.1 temporal study", temporal_5_1),
        ("5.1 spatial study", spatial_5_1),
        ("5.2 convergence", example_5_2),
        ("derivative checks", derivative_checks),
        ("inner certificates", inner_certificates),
        ("root certification", root_certification),
        ("kkt suite", kkt_suite),
        ("variational equivalence", variational_equivalence),
        ("structural report", structural_report),
        ("lipschitz in nu", lipschitz_in_nu),
    ];
    // optional name filters, e.g. `cargo test --test acceptance -- kkt`
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let (ok, detail) = run();
        if !ok {
            failed += 1;
        }
        println!("criterion {:>2} {name}: {} | {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
