//! Minimal distance problem `min_{q in Q_ad} |U_M(q) - u_d|` for a fixed
//! time scale, solved by a conditional gradient method with optional fully
//! corrective acceleration over the bank of generated atoms.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::control::{Control, ControlSpace};
use crate::error::{Error, Result};
use crate::fem::{AssembledOperators, NodalField};
use crate::linalg::{dot, BandedCholesky};
use crate::parabolic::{LinearSolver, Propagator, TimeGrid};

/// Affine control-to-observation map `q -> U_M` and its adjoint.
pub trait ObservationOperator: Sync {
    fn ops(&self) -> &AssembledOperators;
    fn space(&self) -> &ControlSpace;
    fn grid(&self) -> &TimeGrid;
    fn nu(&self) -> f64;
    /// `U_M` for the control `q`, free response of the initial value included.
    fn observe(&self, q: &Control) -> Result<NodalField>;
    /// Pairings `L_d . Z_m` (layout `m * dofs + d`) of the adjoint with
    /// terminal value `v` and unit multiplier.
    fn switching(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Observation through full state and adjoint sweeps.
pub struct SweepObservation<'a> {
    prop: Propagator<'a>,
    space: &'a ControlSpace,
    u0: &'a [f64],
}

impl<'a> SweepObservation<'a> {
    pub fn new(
        ops: &'a AssembledOperators,
        space: &'a ControlSpace,
        grid: &TimeGrid,
        nu: f64,
        u0: &'a [f64],
        solver: LinearSolver,
    ) -> Result<Self> {
        Ok(Self {
            prop: Propagator::new(ops, grid, nu, solver)?,
            space,
            u0,
        })
    }
}

impl ObservationOperator for SweepObservation<'_> {
    fn ops(&self) -> &AssembledOperators {
        self.prop.ops()
    }

    fn space(&self) -> &ControlSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        self.prop.grid()
    }

    fn nu(&self) -> f64 {
        self.prop.nu()
    }

    fn observe(&self, q: &Control) -> Result<NodalField> {
        check_control(self, q)?;
        self.prop
            .sweep_state(self.u0, |m, b| self.space.add_load(q.interval(m), b), |_, _| {})
    }

    fn switching(&self, v: &[f64]) -> Result<Vec<f64>> {
        let dofs = self.space.dofs_per_interval();
        let mut out = vec![0.0; self.grid().len() * dofs];
        self.prop.sweep_adjoint(v, 1.0, |m, z| {
            out[m * dofs..(m + 1) * dofs].copy_from_slice(&self.space.apply_bstar_dual(z));
        })?;
        Ok(out)
    }
}

fn check_control(op: &dyn ObservationOperator, q: &Control) -> Result<()> {
    let want = op.grid().len() * op.space().dofs_per_interval();
    if q.values.len() != want || q.grid.len() != op.grid().len() {
        return Err(Error::Dimension {
            expected: want,
            got: q.values.len(),
        });
    }
    Ok(())
}

/// Precomputed response columns for parameter controls on uniform grids:
/// `U_M = U_M^free + sum_{m,n} qbar_{m,n} w_{m,n}` with interval means `qbar`.
pub struct DenseParameterObservation<'a> {
    ops: &'a AssembledOperators,
    space: &'a ControlSpace,
    grid: TimeGrid,
    nu: f64,
    free: Vec<f64>,
    n_forms: usize,
    samples: usize,
    /// `w_{m,n}` at index `m * n_forms + n`.
    columns: Vec<Vec<f64>>,
}

impl<'a> DenseParameterObservation<'a> {
    pub fn new(
        ops: &'a AssembledOperators,
        space: &'a ControlSpace,
        grid: &TimeGrid,
        nu: f64,
        u0: &[f64],
        solver: LinearSolver,
    ) -> Result<Self> {
        let (forms, samples) = space
            .parameter_forms()
            .ok_or_else(|| Error::Unsupported("dense observation needs a parameter control".into()))?;
        let k = grid.step(0);
        if grid.steps().iter().any(|&s| s != k) {
            return Err(Error::Unsupported("dense observation needs a uniform time grid".into()));
        }
        let prop = Propagator::new(ops, grid, nu, solver)?;
        let free = prop.sweep_state(u0, |_, _| {}, |_, _| {})?.into_inner();
        let m_len = grid.len();
        let n_forms = forms.len();
        let mut columns = vec![Vec::new(); m_len * n_forms];
        // identical step systems: w_{M-1} = R^{-1} nu k L_n and w_{m-1} = R^{-1} M w_m
        let chol = BandedCholesky::factor(&ops.mass.linear_combination(1.0, &ops.stiffness, nu * k))?;
        for (n, form) in forms.iter().enumerate() {
            let mut w: Vec<f64> = form.iter().map(|x| nu * k * x).collect();
            chol.solve_in_place(&mut w);
            for m in (0..m_len).rev() {
                if m + 1 < m_len {
                    w = ops.mass.mul_vec(&w);
                    chol.solve_in_place(&mut w);
                }
                columns[m * n_forms + n] = w.clone();
            }
        }
        Ok(Self {
            ops,
            space,
            grid: grid.clone(),
            nu,
            free,
            n_forms,
            samples,
            columns,
        })
    }
}

impl ObservationOperator for DenseParameterObservation<'_> {
    fn ops(&self) -> &AssembledOperators {
        self.ops
    }

    fn space(&self) -> &ControlSpace {
        self.space
    }

    fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn nu(&self) -> f64 {
        self.nu
    }

    fn observe(&self, q: &Control) -> Result<NodalField> {
        check_control(self, q)?;
        let mut u = self.free.clone();
        let r = self.samples;
        for m in 0..self.grid.len() {
            let qm = q.interval(m);
            for n in 0..self.n_forms {
                let mean = (0..r).map(|s| qm[s * self.n_forms + n]).sum::<f64>() / r as f64;
                if mean != 0.0 {
                    for (ui, wi) in u.iter_mut().zip(&self.columns[m * self.n_forms + n]) {
                        *ui += mean * wi;
                    }
                }
            }
        }
        Ok(NodalField(u))
    }

    fn switching(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mv = self.ops.mass.mul_vec(v);
        let dofs = self.n_forms * self.samples;
        let mut out = vec![0.0; self.grid.len() * dofs];
        for m in 0..self.grid.len() {
            let scale = 1.0 / (self.nu * self.grid.step(m) * self.samples as f64);
            for n in 0..self.n_forms {
                let s = dot(&self.columns[m * self.n_forms + n], &mv) * scale;
                for smp in 0..self.samples {
                    out[m * dofs + smp * self.n_forms + n] = s;
                }
            }
        }
        Ok(out)
    }
}

/// Atom of the conditional gradient step for the pairings `switching`.
pub fn select_atom(space: &ControlSpace, grid: &TimeGrid, switching: &[f64]) -> Control {
    let dofs = space.dofs_per_interval();
    let mut atom = Control::constant(grid, dofs, 0.0);
    for m in 0..grid.len() {
        space.select_atom_interval(&switching[m * dofs..(m + 1) * dofs], atom.interval_mut(m));
    }
    atom
}

/// Exact minimizer of `|(1 - l) a + l b|_M` over `l in [0, 1]`.
pub fn line_search(a: &[f64], b: &[f64], ops: &AssembledOperators) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let dd = ops.mass_inner(&d, &d);
    if dd.sqrt() <= 1e-14 {
        return 0.0;
    }
    (ops.mass_inner(a, &d) / dd).clamp(0.0, 1.0)
}

/// `nu sum_m k_m sum_d s_{m,d} (q_{m,d} - atom_{m,d})`.
pub fn duality_gap(nu: f64, grid: &TimeGrid, switching: &[f64], q: &Control, atom: &Control) -> f64 {
    let dofs = q.dofs;
    let mut gap = 0.0;
    for m in 0..grid.len() {
        let r = m * dofs..(m + 1) * dofs;
        let s: f64 = switching[r.clone()]
            .iter()
            .zip(&q.values[r.clone()])
            .zip(&atom.values[r])
            .map(|((s, a), b)| s * (a - b))
            .sum();
        gap += grid.step(m) * s;
    }
    nu * gap
}

/// Minimizer of `alpha^T G alpha` over the unit simplex by the minimum-norm
/// point algorithm, warm started from `start` (any point of the simplex).
pub fn min_norm_simplex(gram: &DMatrix<f64>, start: &[f64]) -> Vec<f64> {
    let k = gram.nrows();
    assert!(k > 0 && start.len() == k);
    let scale = (0..k).map(|i| gram[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut alpha = start.to_vec();
    let mut support: Vec<usize> = (0..k).filter(|&i| alpha[i] > 0.0).collect();
    if support.is_empty() {
        let best = (0..k).min_by(|&a, &b| gram[(a, a)].total_cmp(&gram[(b, b)])).unwrap();
        alpha = vec![0.0; k];
        alpha[best] = 1.0;
        support = vec![best];
    }
    let max_major = 50 * k + 100;
    for _ in 0..max_major {
        // minor cycle: move to the affine minimizer of the support, dropping
        // indices until it lies in the relative interior
        for _ in 0..=k {
            let beta = affine_minimizer(gram, &support, &alpha);
            if beta.iter().all(|&b| b > 0.0) {
                for (&i, &b) in support.iter().zip(&beta) {
                    alpha[i] = b;
                }
                break;
            }
            let mut theta: f64 = 1.0;
            for (&i, &b) in support.iter().zip(&beta) {
                if b <= 0.0 {
                    let a = alpha[i];
                    let t = if a - b > 0.0 { a / (a - b) } else { 0.0 };
                    theta = theta.min(t);
                }
            }
            for (&i, &b) in support.iter().zip(&beta) {
                alpha[i] += theta * (b - alpha[i]);
            }
            let before = support.len();
            support.retain(|&i| alpha[i] > 1e-15);
            if support.len() == before {
                // drop the most negative direction to guarantee progress
                let worst = support
                    .iter()
                    .zip(&beta)
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(&i, _)| i)
                    .unwrap();
                support.retain(|&i| i != worst);
            }
            for i in 0..k {
                if !support.contains(&i) {
                    alpha[i] = 0.0;
                }
            }
            normalize(&mut alpha);
        }
        let g = gram * DVector::from_column_slice(&alpha);
        let xx = alpha.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
        let (j, gj) = g.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
        if xx - gj <= 1e-15 * scale || support.contains(&j) {
            break;
        }
        support.push(j);
    }
    alpha
}

fn normalize(alpha: &mut [f64]) {
    let s: f64 = alpha.iter().sum();
    if s > 0.0 {
        alpha.iter_mut().for_each(|a| *a /= s);
    }
}

/// Affine minimizer over the support via an anchored least squares problem
/// solved with a pseudo-inverse, so nearly dependent supports stay stable.
fn affine_minimizer(gram: &DMatrix<f64>, support: &[usize], alpha: &[f64]) -> Vec<f64> {
    if support.len() == 1 {
        return vec![1.0];
    }
    let (ri, &r) = support
        .iter()
        .enumerate()
        .max_by(|a, b| alpha[*a.1].total_cmp(&alpha[*b.1]))
        .unwrap();
    let others: Vec<usize> = support.iter().copied().filter(|&i| i != r).collect();
    let n = others.len();
    let mut h = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (a, &i) in others.iter().enumerate() {
        rhs[a] = gram[(r, r)] - gram[(i, r)];
        for (b, &j) in others.iter().enumerate() {
            h[(a, b)] = gram[(i, j)] - gram[(i, r)] - gram[(r, j)] + gram[(r, r)];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(h);
    let top = eig.eigenvalues.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
    let mut coeff = DVector::zeros(n);
    for c in 0..n {
        let lam = eig.eigenvalues[c];
        if lam > 1e-13 * top && lam > 0.0 {
            let v = eig.eigenvectors.column(c);
            coeff += v * (v.dot(&rhs) / lam);
        }
    }
    let mut beta = Vec::with_capacity(support.len());
    let mut idx = 0;
    for (pos, _) in support.iter().enumerate() {
        if pos == ri {
            beta.push(1.0 - coeff.sum());
        } else {
            beta.push(coeff[idx]);
            idx += 1;
        }
    }
    beta
}

/// KKT residual of `alpha` for `min alpha^T G alpha` over the simplex.
pub fn simplex_kkt_residual(gram: &DMatrix<f64>, alpha: &[f64]) -> f64 {
    let g = gram * DVector::from_column_slice(alpha);
    let xx = alpha.iter().zip(g.iter()).map(|(a, b)| a * b).sum::<f64>();
    let mut res: f64 = (alpha.iter().sum::<f64>() - 1.0).abs();
    for (i, &gi) in g.iter().enumerate() {
        res = res.max((xx - gi).max(0.0));
        if alpha[i] > 0.0 {
            res = res.max(alpha[i] * (gi - xx).abs());
        }
        res = res.max((-alpha[i]).max(0.0));
    }
    res
}

/// Best convex combination of observations `obs` with respect to `u_d`.
pub fn reoptimize_simplex(obs: &[NodalField], ud: &[f64], ops: &AssembledOperators) -> Vec<f64> {
    let p: Vec<Vec<f64>> = obs.iter().map(|o| o.iter().zip(ud).map(|(a, b)| a - b).collect()).collect();
    let mp: Vec<Vec<f64>> = p.iter().map(|v| ops.mass.mul_vec(v)).collect();
    let k = p.len();
    let gram = DMatrix::from_fn(k, k, |i, j| dot(&mp[i], &p[j]));
    let best = (0..k).min_by(|&a, &b| gram[(a, a)].total_cmp(&gram[(b, b)])).unwrap();
    let mut start = vec![0.0; k];
    start[best] = 1.0;
    min_norm_simplex(&gram, &start)
}

#[derive(Clone, Debug)]
enum Coefficients {
    /// Codes -1, 0, 1 for `q_a`, midpoint, `q_b`.
    Ternary(Vec<i8>),
    Dense(Vec<f64>),
}

struct BankEntry {
    coeffs: Coefficients,
    /// `obs - u_d`.
    residual: Vec<f64>,
    mass_residual: Vec<f64>,
}

/// Atoms generated so far with their observations and simplex weights. The
/// first entry is a dense base element that absorbs evicted atoms.
pub struct AtomBank {
    entries: Vec<BankEntry>,
    gram: DMatrix<f64>,
    pub weights: Vec<f64>,
    capacity: usize,
    evictions: usize,
    lower: f64,
    upper: f64,
}

impl AtomBank {
    fn new(q0: &Control, obs0: &[f64], ud: &[f64], ops: &AssembledOperators, capacity: usize, space: &ControlSpace) -> Self {
        let residual: Vec<f64> = obs0.iter().zip(ud).map(|(a, b)| a - b).collect();
        let mass_residual = ops.mass.mul_vec(&residual);
        let g = dot(&residual, &mass_residual);
        Self {
            entries: vec![BankEntry {
                coeffs: Coefficients::Dense(q0.values.clone()),
                residual,
                mass_residual,
            }],
            gram: DMatrix::from_element(1, 1, g),
            weights: vec![1.0],
            capacity: capacity.max(2),
            evictions: 0,
            lower: space.bounds.lower,
            upper: space.bounds.upper,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn evictions(&self) -> usize {
        self.evictions
    }

    fn encode(&self, atom: &Control, extremal: bool) -> Coefficients {
        if extremal {
            let mid = 0.5 * (self.lower + self.upper);
            let codes: Option<Vec<i8>> = atom
                .values
                .iter()
                .map(|&v| {
                    if v == self.lower {
                        Some(-1)
                    } else if v == self.upper {
                        Some(1)
                    } else if v == mid {
                        Some(0)
                    } else {
                        None
                    }
                })
                .collect();
            if let Some(c) = codes {
                return Coefficients::Ternary(c);
            }
        }
        Coefficients::Dense(atom.values.clone())
    }

    fn value(&self, c: &Coefficients, i: usize) -> f64 {
        match c {
            Coefficients::Dense(v) => v[i],
            Coefficients::Ternary(t) => {
                let mid = 0.5 * (self.lower + self.upper);
                mid + f64::from(t[i]) * 0.5 * (self.upper - self.lower)
            }
        }
    }

    fn push(&mut self, coeffs: Coefficients, obs: &[f64], ud: &[f64], ops: &AssembledOperators) {
        let residual: Vec<f64> = obs.iter().zip(ud).map(|(a, b)| a - b).collect();
        let mass_residual = ops.mass.mul_vec(&residual);
        let k = self.entries.len();
        let mut gram = DMatrix::zeros(k + 1, k + 1);
        gram.view_mut((0, 0), (k, k)).copy_from(&self.gram);
        for (j, e) in self.entries.iter().enumerate() {
            let v = dot(&mass_residual, &e.residual);
            gram[(k, j)] = v;
            gram[(j, k)] = v;
        }
        gram[(k, k)] = dot(&mass_residual, &residual);
        self.gram = gram;
        self.entries.push(BankEntry {
            coeffs,
            residual,
            mass_residual,
        });
        self.weights.push(0.0);
    }

    /// Folds the non-base atom of least weight (other than the newest) into
    /// the base element; the represented iterate is unchanged.
    fn evict(&mut self, ops: &AssembledOperators) {
        let newest = self.entries.len() - 1;
        let j = (1..newest)
            .min_by(|&a, &b| self.weights[a].total_cmp(&self.weights[b]))
            .expect("eviction needs at least three entries");
        let (a0, aj) = (self.weights[0], self.weights[j]);
        let s = a0 + aj;
        if aj > 0.0 {
            let n = self.entries[0].residual.len();
            let len = match &self.entries[0].coeffs {
                Coefficients::Dense(v) => v.len(),
                Coefficients::Ternary(t) => t.len(),
            };
            let merged: Vec<f64> = (0..len)
                .map(|i| (a0 * self.value(&self.entries[0].coeffs, i) + aj * self.value(&self.entries[j].coeffs, i)) / s)
                .collect();
            let residual: Vec<f64> = (0..n)
                .map(|i| (a0 * self.entries[0].residual[i] + aj * self.entries[j].residual[i]) / s)
                .collect();
            let mass_residual = ops.mass.mul_vec(&residual);
            self.entries[0] = BankEntry {
                coeffs: Coefficients::Dense(merged),
                residual,
                mass_residual,
            };
            self.weights[0] = s;
        }
        self.entries.remove(j);
        self.weights.remove(j);
        self.gram = self.gram.clone().remove_row(j).remove_column(j);
        for i in 0..self.entries.len() {
            let v = dot(&self.entries[0].mass_residual, &self.entries[i].residual);
            self.gram[(0, i)] = v;
            self.gram[(i, 0)] = v;
        }
        self.evictions += 1;
    }

    fn materialize(&self, weights: &[f64], template: &Control) -> Control {
        let mut q = template.clone();
        q.values.iter_mut().for_each(|v| *v = 0.0);
        for (e, &w) in self.entries.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (i, v) in q.values.iter_mut().enumerate() {
                *v += w * self.value(&e.coeffs, i);
            }
        }
        q
    }

    fn residual(&self, weights: &[f64]) -> Vec<f64> {
        let n = self.entries[0].residual.len();
        let mut r = vec![0.0; n];
        for (e, &w) in self.entries.iter().zip(weights) {
            if w != 0.0 {
                for (ri, ei) in r.iter_mut().zip(&e.residual) {
                    *ri += w * ei;
                }
            }
        }
        r
    }
}

#[derive(Clone, Debug)]
pub struct DistanceSettings {
    pub tol_gap: f64,
    pub max_iter: usize,
    pub accelerate: bool,
    pub bank_capacity: usize,
    /// Upper bound on the bytes held by the atom bank.
    pub memory_budget: usize,
    /// `(delta0, band)`: while `|f - delta0| > band` the gap only has to fall
    /// below `|f - delta0| / 10`, which fixes the sign and the value of
    /// `f* - delta0` to within ten percent.
    pub relative_gap: Option<(f64, f64)>,
}

impl Default for DistanceSettings {
    fn default() -> Self {
        Self {
            tol_gap: 1e-8,
            max_iter: 5000,
            accelerate: true,
            bank_capacity: 200,
            memory_budget: 1 << 30,
            relative_gap: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgLogRow {
    pub iter: usize,
    pub f: f64,
    pub gap: f64,
    pub lambda: f64,
    pub n_atoms: usize,
}

#[derive(Clone, Debug)]
pub struct CgResult {
    pub control: Control,
    pub f: f64,
    pub observation: NodalField,
    /// Pairings of the unit-direction adjoint at `control`; empty when the
    /// target was reached.
    pub switching: Vec<f64>,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub target_reached: bool,
    /// The last step could not decrease `f` in floating point.
    pub stalled: bool,
    pub evictions: usize,
    pub bank_capacity: usize,
    pub log: Vec<CgLogRow>,
}

impl CgResult {
    pub fn log_csv(&self, header: &str) -> String {
        let mut out = String::new();
        for line in header.lines() {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "iter,f,gap,lambda,n_atoms");
        for r in &self.log {
            let _ = writeln!(out, "{},{:.17e},{:.17e},{:.17e},{}", r.iter, r.f, r.gap, r.lambda, r.n_atoms);
        }
        out
    }
}

/// Conditional gradient method from `initial` (midpoint control if `None`).
pub fn solve_min_distance(
    op: &dyn ObservationOperator,
    ud: &[f64],
    settings: &DistanceSettings,
    initial: Option<&Control>,
) -> Result<CgResult> {
    let space = op.space();
    let grid = op.grid().clone();
    let ops = op.ops();
    let nu = op.nu();
    let mut q = match initial {
        Some(q0) => q0.clone(),
        None => space.midpoint_control(&grid),
    };
    let mut obs = op.observe(&q)?.into_inner();
    let dofs_total = q.values.len();
    let extremal = space.has_extremal_coefficients();
    let per_atom = if extremal { dofs_total } else { 8 * dofs_total } + 16 * ud.len();
    let capacity = settings
        .bank_capacity
        .min((settings.memory_budget / per_atom.max(1)).max(3))
        .max(3);
    let mut bank = if settings.accelerate {
        Some(AtomBank::new(&q, &obs, ud, ops, capacity, space))
    } else {
        None
    };
    let mut log = Vec::new();
    let mut stalled = false;
    let mut iter = 0;
    loop {
        let a: Vec<f64> = obs.iter().zip(ud).map(|(x, y)| x - y).collect();
        let f = ops.l2_norm(&a);
        let n_atoms = bank.as_ref().map_or(0, AtomBank::len);
        if f < 1e-13 {
            log.push(CgLogRow { iter, f, gap: 0.0, lambda: 0.0, n_atoms });
            return Ok(finish(q, f, obs, Vec::new(), 0.0, iter, true, true, false, bank.as_ref(), capacity, log));
        }
        let v: Vec<f64> = a.iter().map(|x| x / f).collect();
        let s = op.switching(&v)?;
        let atom = select_atom(space, &grid, &s);
        let gap = duality_gap(nu, &grid, &s, &q, &atom);
        let tol = match settings.relative_gap {
            Some((delta0, band)) if (f - delta0).abs() > band => settings.tol_gap.max(0.1 * (f - delta0).abs()),
            _ => settings.tol_gap,
        };
        if gap < tol || iter >= settings.max_iter || stalled {
            log.push(CgLogRow { iter, f, gap, lambda: 0.0, n_atoms });
            let converged = gap < tol;
            return Ok(finish(q, f, obs, s, gap, iter, converged, false, stalled, bank.as_ref(), capacity, log));
        }
        let atom_obs = op.observe(&atom)?.into_inner();
        let b: Vec<f64> = atom_obs.iter().zip(ud).map(|(x, y)| x - y).collect();
        let lambda_ls = line_search(&a, &b, ops);
        let mut lambda = lambda_ls;
        let mut accepted = false;
        if let Some(bank) = bank.as_mut() {
            let coeffs = bank.encode(&atom, extremal);
            bank.push(coeffs, &atom_obs, ud, ops);
            if bank.len() > bank.capacity {
                bank.evict(ops);
            }
            let alpha = min_norm_simplex(&bank.gram, &bank.weights);
            let r = bank.residual(&alpha);
            let f_new = ops.l2_norm(&r);
            if f_new <= f {
                lambda = *alpha.last().unwrap();
                bank.weights = alpha;
                q = bank.materialize(&bank.weights, &q);
                obs = r.iter().zip(ud).map(|(x, y)| x + y).collect();
                accepted = true;
            } else {
                // fall back to the two-point step within the bank
                let mut w: Vec<f64> = bank.weights.iter().map(|x| (1.0 - lambda_ls) * x).collect();
                *w.last_mut().unwrap() += lambda_ls;
                let r = bank.residual(&w);
                if ops.l2_norm(&r) <= f {
                    bank.weights = w;
                    q = bank.materialize(&bank.weights, &q);
                    obs = r.iter().zip(ud).map(|(x, y)| x + y).collect();
                    accepted = true;
                }
            }
        } else {
            let cand_obs: Vec<f64> = obs.iter().zip(&atom_obs).map(|(x, y)| (1.0 - lambda_ls) * x + lambda_ls * y).collect();
            let r: Vec<f64> = cand_obs.iter().zip(ud).map(|(x, y)| x - y).collect();
            if ops.l2_norm(&r) <= f {
                q = q.blend(&atom, lambda_ls);
                obs = cand_obs;
                accepted = true;
            }
        }
        if !accepted {
            lambda = 0.0;
            stalled = true;
        }
        log.push(CgLogRow { iter, f, gap, lambda, n_atoms });
        iter += 1;
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    control: Control,
    f: f64,
    obs: Vec<f64>,
    switching: Vec<f64>,
    gap: f64,
    iterations: usize,
    converged: bool,
    target_reached: bool,
    stalled: bool,
    bank: Option<&AtomBank>,
    bank_capacity: usize,
    log: Vec<CgLogRow>,
) -> CgResult {
    CgResult {
        control,
        f,
        observation: NodalField(obs),
        switching,
        gap,
        iterations,
        converged,
        target_reached,
        stalled,
        evictions: bank.map_or(0, AtomBank::evictions),
        bank_capacity,
        log,
    }
}
