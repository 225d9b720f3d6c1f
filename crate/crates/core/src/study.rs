//! Experiment drivers: single solves, convergence studies and structural
//! reports, with all artifacts written as text files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::analysis::{fit_kappa, nu_error, q_error_l1, structural_measure, EocTable, KappaFit, StructuralReport};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::fem::AssembledOperators;
use crate::mesh::build_unit_square;
use crate::parabolic::TimeGrid;
use crate::problem::DiscreteProblem;
use crate::time_solver::{solve_time_optimal, OuterResult, TimeOptimalSettings};

pub fn settings_for(cfg: &ExperimentConfig) -> TimeOptimalSettings {
    let mut s = TimeOptimalSettings::for_problem(cfg.tol_outer, cfg.problem.delta0);
    s.inner.tol_gap = cfg.tol_inner;
    s.inner.max_iter = cfg.max_inner_iter;
    s.inner.accelerate = cfg.accelerate;
    s.inner.bank_capacity = cfg.bank_capacity;
    s.outer.nu0 = cfg.nu0;
    s
}

/// Solved study point.
pub struct PointSolution {
    pub level: usize,
    pub time_steps: usize,
    pub problem: DiscreteProblem,
    pub result: OuterResult,
}

impl PointSolution {
    pub fn n_nodes(&self) -> usize {
        self.problem.ops.mesh.n_vertices()
    }
}

/// Assembled operators per mesh level, shared between study points.
#[derive(Default)]
pub struct OperatorCache {
    base: usize,
    levels: Mutex<BTreeMap<usize, Arc<AssembledOperators>>>,
}

impl OperatorCache {
    pub fn new(base: usize) -> Self {
        Self {
            base,
            levels: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn get(&self, level: usize) -> Result<Arc<AssembledOperators>> {
        if let Some(ops) = self.levels.lock().expect("cache lock").get(&level) {
            return Ok(ops.clone());
        }
        let ops = Arc::new(AssembledOperators::new(Arc::new(build_unit_square(self.base, level)?)));
        self.levels.lock().expect("cache lock").insert(level, ops.clone());
        Ok(ops)
    }
}

pub fn solve_point(cfg: &ExperimentConfig, cache: &OperatorCache, level: usize, time_steps: usize) -> Result<PointSolution> {
    let wrap = |e: Error| Error::PointFailed {
        level,
        time_steps,
        source: Box::new(e),
    };
    let ops = cache.get(level).map_err(wrap)?;
    let grid = TimeGrid::uniform(time_steps).map_err(wrap)?;
    let problem = DiscreteProblem::on_operators(&cfg.problem, ops, grid, cfg.control_discretization).map_err(wrap)?;
    let result = solve_time_optimal(&problem, &settings_for(cfg)).map_err(wrap)?;
    Ok(PointSolution {
        level,
        time_steps,
        problem,
        result,
    })
}

/// Solves all points on `jobs` worker threads; results keep the input order.
pub fn solve_points(cfg: &ExperimentConfig, cache: &OperatorCache, points: &[(usize, usize)], jobs: usize) -> Result<Vec<PointSolution>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<PointSolution>>>> = points.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, points.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= points.len() {
                    break;
                }
                let (l, m) = points[i];
                let r = solve_point(cfg, cache, l, m);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every point is solved"))
        .collect()
}

fn header(cfg: &ExperimentConfig, what: &str) -> String {
    format!("{what}\n{}", cfg.echo().trim_end())
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, content).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating output directory {}", dir.display()), e))
}

fn tag(level: usize, m: usize) -> String {
    format!("L{level}_M{m}")
}

/// Summary line of a solved point.
pub fn summary_row(p: &PointSolution) -> String {
    let r = &p.result;
    let k = &r.kkt;
    format!(
        "{},{},{},{:.17e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
        p.level,
        p.time_steps,
        p.n_nodes(),
        r.nu(),
        r.solution.delta,
        k.mu,
        k.hamiltonian_residual,
        k.feasibility_residual,
        k.variational_residual,
        k.slater_margin,
        k.interior_fraction,
        r.solution.history.len(),
        r.solution.history.iter().map(|h| h.inner_iters).sum::<usize>()
    )
}

const SUMMARY_COLUMNS: &str = "level,M,N,nu,delta,mu,hamiltonian_residual,feasibility_residual,variational_residual,slater_margin,interior_fraction,outer_evaluations,inner_iterations";

fn write_point_logs(cfg: &ExperimentConfig, dir: &Path, p: &PointSolution, files: &mut Vec<PathBuf>) -> Result<()> {
    let t = tag(p.level, p.time_steps);
    files.push(write_file(dir, &format!("outer_{t}.csv"), &p.result.solution.log_csv(&header(cfg, &format!("outer iterations {t}"))))?);
    files.push(write_file(dir, &format!("inner_{t}.csv"), &p.result.inner.log_csv(&header(cfg, &format!("final inner solve {t}"))))?);
    Ok(())
}

/// Structural report of a solution with its fit over the default window.
pub fn structural_of(p: &PointSolution) -> Result<(StructuralReport, Result<KappaFit>)> {
    if p.problem.space.is_variational_distributed() {
        return Err(Error::Unsupported("structural report needs explicit control coefficients".into()));
    }
    let report = structural_measure(&p.result.kkt.switching, &p.problem.space, &p.problem.grid, None);
    let fit = fit_kappa(&report, report.default_window());
    Ok((report, fit))
}

fn structural_text(cfg: &ExperimentConfig, p: &PointSolution, report: &StructuralReport, fit: &Result<KappaFit>) -> String {
    let w = report.default_window();
    let fit_line = match fit {
        Ok(f) => format!("kappa_fit = {:.6} residual = {:.3e} points = {} window = [{:.3e}, {:.3e}]", f.kappa, f.residual, f.points, w.0, w.1),
        Err(e) => format!("kappa_fit unavailable: {e}"),
    };
    report.to_csv(&header(cfg, &format!("structural measure {}\n{fit_line}", tag(p.level, p.time_steps))))
}

pub struct StudyOutput {
    pub table: EocTable,
    pub reference: PointSolution,
    pub points: Vec<PointSolution>,
    pub files: Vec<PathBuf>,
}

/// Reference solve, all study points, errors against the reference and
/// their rates.
pub fn run_convergence_study(cfg: &ExperimentConfig, jobs: usize) -> Result<StudyOutput> {
    let reference = cfg
        .reference
        .clone()
        .ok_or_else(|| Error::config("reference", "a convergence study needs a [reference] table"))?;
    prepare_dir(&cfg.outputs)?;
    let cache = OperatorCache::new(cfg.mesh_base);
    let mut all = cfg.study_points();
    all.push((reference.level, reference.time_steps));
    let mut solved = solve_points(cfg, &cache, &all, jobs)?;
    let reference = solved.pop().expect("reference point");
    let mut err_nu = Vec::new();
    let mut err_q = Vec::new();
    for p in &solved {
        err_nu.push(nu_error(p.result.nu(), reference.result.nu()));
        err_q.push(q_error_l1(&p.problem.space, &p.result.control, &reference.problem.space, &reference.result.control)?);
    }
    let meta: Vec<(usize, usize, usize)> = solved.iter().map(|p| (p.level, p.time_steps, p.n_nodes())).collect();
    let table = EocTable::from_errors(&meta, &err_nu, &err_q);

    let dir = &cfg.outputs;
    let mut files = vec![write_file(
        dir,
        "eoc.csv",
        &table.to_csv(&header(cfg, &format!("errors against reference {}", tag(reference.level, reference.time_steps)))),
    )?];
    let mut summary = String::new();
    for line in header(cfg, "solved points").lines() {
        let _ = writeln!(summary, "# {line}");
    }
    let _ = writeln!(summary, "{SUMMARY_COLUMNS}");
    for p in solved.iter().chain(std::iter::once(&reference)) {
        let _ = writeln!(summary, "{}", summary_row(p));
        write_point_logs(cfg, dir, p, &mut files)?;
    }
    files.push(write_file(dir, "points.csv", &summary)?);
    if let Ok((report, fit)) = structural_of(&reference) {
        files.push(write_file(dir, "structural_reference.csv", &structural_text(cfg, &reference, &report, &fit))?);
    }
    Ok(StudyOutput {
        table,
        reference,
        points: solved,
        files,
    })
}

pub struct SingleOutput {
    pub point: PointSolution,
    pub files: Vec<PathBuf>,
}

/// One solve at the first study point with control, observation, switching
/// function and optimality report dumps.
pub fn run_single(cfg: &ExperimentConfig) -> Result<SingleOutput> {
    prepare_dir(&cfg.outputs)?;
    let cache = OperatorCache::new(cfg.mesh_base);
    let (level, m) = cfg.study_points()[0];
    let point = solve_point(cfg, &cache, level, m)?;
    let dir = &cfg.outputs;
    let mut files = Vec::new();
    write_point_logs(cfg, dir, &point, &mut files)?;
    let r = &point.result;
    let space = &point.problem.space;
    files.push(write_file(dir, "control.txt", &space.control_to_text(&r.control, &header(cfg, "optimal control")))?);

    let ops = &point.problem.ops;
    let full = ops.dofs.extend_vector(&r.inner.observation);
    let mut obs = String::new();
    for line in header(cfg, "observation U_M at the vertices (x y value)").lines() {
        let _ = writeln!(obs, "# {line}");
    }
    for (v, p) in ops.mesh.vertices.iter().enumerate() {
        let _ = writeln!(obs, "{:.17e} {:.17e} {:.17e}", p[0], p[1], full[v]);
    }
    files.push(write_file(dir, "observation.txt", &obs)?);
    let mut mesh = String::new();
    for line in header(cfg, "mesh").lines() {
        let _ = writeln!(mesh, "# {line}");
    }
    mesh.push_str(&ops.mesh.to_text());
    files.push(write_file(dir, "mesh.txt", &mesh)?);

    let grid = &point.problem.grid;
    let dofs = space.dofs_per_interval();
    let mut sw = String::new();
    for line in header(cfg, "switching function mu B^* z per interval and dof").lines() {
        let _ = writeln!(sw, "# {line}");
    }
    let _ = writeln!(sw, "m,t_mid,dof,value");
    for mi in 0..grid.len() {
        let t = 0.5 * (grid.nodes()[mi] + grid.nodes()[mi + 1]);
        for d in 0..dofs {
            let _ = writeln!(sw, "{mi},{t:.17e},{d},{:.17e}", r.kkt.switching[mi * dofs + d]);
        }
    }
    files.push(write_file(dir, "switching.csv", &sw)?);

    let k = &r.kkt;
    let mut kkt = String::new();
    for line in header(cfg, "optimality report").lines() {
        let _ = writeln!(kkt, "# {line}");
    }
    let _ = writeln!(kkt, "nu = {:.17e}", r.nu());
    let _ = writeln!(kkt, "delta = {:.6e}", r.solution.delta);
    let _ = writeln!(kkt, "mu = {:.17e}", k.mu);
    let _ = writeln!(kkt, "hamiltonian_residual = {:.6e}", k.hamiltonian_residual);
    let _ = writeln!(kkt, "feasibility_residual = {:.6e}", k.feasibility_residual);
    let _ = writeln!(kkt, "variational_residual = {:.6e}", k.variational_residual);
    let _ = writeln!(kkt, "slater_margin = {:.6e}", k.slater_margin);
    let _ = writeln!(kkt, "interior_fraction = {:.6e}", k.interior_fraction);
    let _ = writeln!(kkt, "inner_gap = {:.6e}", r.inner.gap);
    let _ = writeln!(kkt, "bank_capacity = {}", r.inner.bank_capacity);
    let _ = writeln!(kkt, "bank_evictions = {}", r.inner.evictions);
    files.push(write_file(dir, "kkt.txt", &kkt)?);
    Ok(SingleOutput { point, files })
}

pub struct StructuralOutput {
    pub point: PointSolution,
    pub report: StructuralReport,
    pub fit: Result<KappaFit>,
    pub files: Vec<PathBuf>,
}

/// Structural report at the reference point if configured, else at the first study point.
pub fn run_structural(cfg: &ExperimentConfig) -> Result<StructuralOutput> {
    prepare_dir(&cfg.outputs)?;
    let cache = OperatorCache::new(cfg.mesh_base);
    let (level, m) = cfg
        .reference
        .as_ref()
        .map_or_else(|| cfg.study_points()[0], |r| (r.level, r.time_steps));
    let point = solve_point(cfg, &cache, level, m)?;
    let (report, fit) = structural_of(&point)?;
    let files = vec![write_file(&cfg.outputs, "structural.csv", &structural_text(cfg, &point, &report, &fit))?];
    Ok(StructuralOutput {
        point,
        report,
        fit,
        files,
    })
}
