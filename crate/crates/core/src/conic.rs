//! Conic programs with a linear objective, linear constraints, variable bounds
//! and rotated second-order cones, plus the solver front end.
//!
//! Rotated cones are stored natively. [`solve`] maps each one onto a standard
//! second-order cone using `u·w ≥ ‖z‖²  ⇔  ‖(2z, u − w)‖ ≤ u + w` and hands the
//! program to Clarabel. Every solution the solver calls optimal is then
//! re-checked by [`audit`], which only looks at the raw [`ConeProgram`].

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConicError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("invalid solve options: {0}")]
    Options(String),
}

/// A variable reference inside a cone, optionally offset by a constant:
/// the cone sees `x[var] + shift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeTerm {
    pub var: usize,
    pub shift: f64,
}

impl ConeTerm {
    pub fn shifted(var: usize, shift: f64) -> Self {
        ConeTerm { var, shift }
    }

    fn value(&self, x: &[f64]) -> f64 {
        x[self.var] + self.shift
    }
}

impl From<usize> for ConeTerm {
    fn from(var: usize) -> Self {
        ConeTerm { var, shift: 0.0 }
    }
}

/// `u·w ≥ Σ z_k²` with `u, w ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotatedCone {
    pub u: ConeTerm,
    pub w: ConeTerm,
    pub z: Vec<ConeTerm>,
}

/// Sparse row `Σ coef·x[var]` compared against `rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl LinearRow {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(j, a)| a * x[j]).sum()
    }
}

/// Minimize `objective·x` subject to `eq` (= rhs), `ineq` (≤ rhs), bounds and
/// rotated cones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConeProgram {
    pub objective: Vec<f64>,
    pub eq: Vec<LinearRow>,
    pub ineq: Vec<LinearRow>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rsoc: Vec<RotatedCone>,
    pub var_names: Vec<String>,
}

impl ConeProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64) -> usize {
        self.objective.push(0.0);
        self.lower.push(lower);
        self.upper.push(upper);
        self.var_names.push(name.into());
        self.objective.len() - 1
    }

    pub fn free_var(&mut self, name: impl Into<String>) -> usize {
        self.add_var(name, f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn set_cost(&mut self, var: usize, cost: f64) {
        self.objective[var] = cost;
    }

    pub fn add_eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.eq.push(LinearRow { terms, rhs });
    }

    pub fn add_le(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        self.ineq.push(LinearRow { terms, rhs });
    }

    pub fn add_ge(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        let terms = terms.into_iter().map(|(j, a)| (j, -a)).collect();
        self.ineq.push(LinearRow { terms, rhs: -rhs });
    }

    pub fn add_rsoc(&mut self, u: impl Into<ConeTerm>, w: impl Into<ConeTerm>, z: Vec<ConeTerm>) {
        self.rsoc.push(RotatedCone {
            u: u.into(),
            w: w.into(),
            z,
        });
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn validate(&self) -> Result<(), ConicError> {
        let n = self.n_vars();
        if self.lower.len() != n || self.upper.len() != n || self.var_names.len() != n {
            return Err(ConicError::Malformed("per-variable vectors differ in length".into()));
        }
        for (j, (&lo, &hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(ConicError::Malformed(format!("bad bounds [{lo}, {hi}] on variable {j}")));
            }
        }
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(ConicError::Malformed("non-finite objective coefficient".into()));
        }
        for (kind, rows) in [("eq", &self.eq), ("ineq", &self.ineq)] {
            for (i, row) in rows.iter().enumerate() {
                if !row.rhs.is_finite() {
                    return Err(ConicError::Malformed(format!("{kind} row {i} has non-finite rhs")));
                }
                for &(j, a) in &row.terms {
                    if j >= n {
                        return Err(ConicError::Malformed(format!(
                            "{kind} row {i} references variable {j} of {n}"
                        )));
                    }
                    if !a.is_finite() {
                        return Err(ConicError::Malformed(format!("{kind} row {i} has a non-finite coefficient")));
                    }
                }
            }
        }
        for (i, cone) in self.rsoc.iter().enumerate() {
            let terms = [cone.u, cone.w].into_iter().chain(cone.z.iter().copied());
            for t in terms {
                if t.var >= n {
                    return Err(ConicError::Malformed(format!("cone {i} references variable {} of {n}", t.var)));
                }
                if !t.shift.is_finite() {
                    return Err(ConicError::Malformed(format!("cone {i} has a non-finite shift")));
                }
            }
            if cone.u.var == cone.w.var {
                return Err(ConicError::Malformed(format!("cone {i} uses the same variable for u and w")));
            }
        }
        Ok(())
    }

    /// One constraint per line, for diffing against other modelling tools.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# vars {} eq {} ineq {} rsoc {}", self.n_vars(), self.eq.len(), self.ineq.len(), self.rsoc.len());
        for j in 0..self.n_vars() {
            let _ = writeln!(
                out,
                "var x{j} {} [{}, {}] cost {}",
                self.var_names[j], self.lower[j], self.upper[j], self.objective[j]
            );
        }
        let row = |terms: &[(usize, f64)]| {
            terms
                .iter()
                .map(|(j, a)| format!("{a:+} x{j}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for r in &self.eq {
            let _ = writeln!(out, "eq {} = {}", row(&r.terms), r.rhs);
        }
        for r in &self.ineq {
            let _ = writeln!(out, "le {} <= {}", row(&r.terms), r.rhs);
        }
        let term = |t: &ConeTerm| {
            if t.shift == 0.0 {
                format!("x{}", t.var)
            } else {
                format!("(x{} {:+})", t.var, t.shift)
            }
        };
        for c in &self.rsoc {
            let z = c.z.iter().map(|t| format!("{}^2", term(t))).collect::<Vec<_>>().join(" + ");
            let _ = writeln!(out, "rsoc {} * {} >= {}", term(&c.u), term(&c.w), z);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub rel_gap_tol: f64,
    pub max_iter: u32,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            feas_tol: 1e-8,
            rel_gap_tol: 1e-8,
            max_iter: 200,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), ConicError> {
        if !(self.feas_tol > 0.0 && self.feas_tol.is_finite()) {
            return Err(ConicError::Options(format!("feas_tol must be positive, got {}", self.feas_tol)));
        }
        if !(self.rel_gap_tol > 0.0 && self.rel_gap_tol.is_finite()) {
            return Err(ConicError::Options(format!("rel_gap_tol must be positive, got {}", self.rel_gap_tol)));
        }
        if self.max_iter == 0 {
            return Err(ConicError::Options("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    IterationLimit,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::IterationLimit => "iteration-limit",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConeSolution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub obj: f64,
    pub max_primal_residual: f64,
    pub duality_gap_estimate: f64,
    pub iterations: u32,
}

/// Largest constraint violation of `x` and the constraint that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub max: f64,
    pub worst: String,
}

/// Recomputes every constraint violation of `x` directly from `p`.
pub fn audit(p: &ConeProgram, x: &[f64]) -> Residual {
    let mut worst = Residual {
        max: 0.0,
        worst: "none".into(),
    };
    let mut note = |v: f64, what: &dyn Fn() -> String| {
        let v = if v.is_nan() { f64::INFINITY } else { v };
        if v > worst.max {
            worst.max = v;
            worst.worst = what();
        }
    };
    for (i, r) in p.eq.iter().enumerate() {
        note((r.eval(x) - r.rhs).abs(), &|| format!("eq row {i}"));
    }
    for (i, r) in p.ineq.iter().enumerate() {
        note(r.eval(x) - r.rhs, &|| format!("ineq row {i}"));
    }
    for j in 0..p.n_vars() {
        note(p.lower[j] - x[j], &|| format!("lower bound of {}", p.var_names[j]));
        note(x[j] - p.upper[j], &|| format!("upper bound of {}", p.var_names[j]));
    }
    for (i, c) in p.rsoc.iter().enumerate() {
        let u = c.u.value(x);
        let w = c.w.value(x);
        let zz: f64 = c.z.iter().map(|t| 4.0 * t.value(x).powi(2)).sum();
        let norm = (zz + (u - w).powi(2)).sqrt();
        note(norm - (u + w), &|| format!("rsoc {i}"));
        note(-u, &|| format!("rsoc {i} u"));
        note(-w, &|| format!("rsoc {i} w"));
    }
    worst
}

struct Assembly {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

impl Assembly {
    fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f64)>, rhs: f64) {
        let r = self.b.len();
        for (j, a) in terms {
            if a != 0.0 {
                self.rows.push(r);
                self.cols.push(j);
                self.vals.push(a);
            }
        }
        self.b.push(rhs);
    }
}

fn assemble(p: &ConeProgram) -> Assembly {
    let mut asm = Assembly {
        rows: Vec::new(),
        cols: Vec::new(),
        vals: Vec::new(),
        b: Vec::new(),
        cones: Vec::new(),
    };
    let n = p.n_vars();

    // Zero cone: equalities and fixed variables.
    let start = asm.b.len();
    for r in &p.eq {
        asm.push_row(r.terms.iter().copied(), r.rhs);
    }
    for j in 0..n {
        if p.lower[j] == p.upper[j] {
            asm.push_row([(j, 1.0)], p.lower[j]);
        }
    }
    if asm.b.len() > start {
        asm.cones.push(SupportedConeT::ZeroConeT(asm.b.len() - start));
    }

    // Nonnegative cone: b - A x >= 0.
    let start = asm.b.len();
    for r in &p.ineq {
        asm.push_row(r.terms.iter().copied(), r.rhs);
    }
    for j in 0..n {
        if p.lower[j] == p.upper[j] {
            continue;
        }
        if p.lower[j].is_finite() {
            asm.push_row([(j, -1.0)], -p.lower[j]);
        }
        if p.upper[j].is_finite() {
            asm.push_row([(j, 1.0)], p.upper[j]);
        }
    }
    if asm.b.len() > start {
        asm.cones.push(SupportedConeT::NonnegativeConeT(asm.b.len() - start));
    }

    // One SOC block (u + w, 2z, u - w) per rotated cone.
    for c in &p.rsoc {
        let (u, w) = (c.u, c.w);
        asm.push_row([(u.var, -1.0), (w.var, -1.0)], u.shift + w.shift);
        for t in &c.z {
            asm.push_row([(t.var, -2.0)], 2.0 * t.shift);
        }
        asm.push_row([(u.var, -1.0), (w.var, 1.0)], u.shift - w.shift);
        asm.cones.push(SupportedConeT::SecondOrderConeT(2 + c.z.len()));
    }
    asm
}

/// Solves `p`. Only malformed input is an `Err`; solver trouble comes back as
/// a non-optimal status.
pub fn solve(p: &ConeProgram, opts: &SolveOptions) -> Result<ConeSolution, ConicError> {
    p.validate()?;
    opts.validate()?;
    let n = p.n_vars();
    let asm = assemble(p);
    let m = asm.b.len();

    let a = CscMatrix::new_from_triplets(m, n, asm.rows, asm.cols, asm.vals);
    let pmat = CscMatrix::<f64>::zeros((n, n));
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter)
        .tol_feas(opts.feas_tol * 0.1)
        .tol_gap_abs(opts.rel_gap_tol * 0.1)
        .tol_gap_rel(opts.rel_gap_tol * 0.1)
        .build()
        .map_err(|e| ConicError::Options(e.to_string()))?;
    let mut solver = DefaultSolver::new(&pmat, &p.objective, &a, &asm.b, &asm.cones, settings)
        .map_err(|e| ConicError::Malformed(e.to_string()))?;
    solver.solve();

    let sol = &solver.solution;
    let x = sol.x.clone();
    let obj = p.objective_value(&x);
    let gap = (sol.obj_val - sol.obj_val_dual).abs();
    let residual = audit(p, &x);

    let status = match sol.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {
            let gap_ok = gap <= opts.rel_gap_tol * (1.0 + obj.abs());
            if residual.max <= opts.feas_tol && gap_ok {
                SolveStatus::Optimal
            } else {
                SolveStatus::IterationLimit
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
        _ => SolveStatus::IterationLimit,
    };

    Ok(ConeSolution {
        status,
        x,
        obj,
        max_primal_residual: residual.max,
        duality_gap_estimate: gap,
        iterations: sol.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn lp_corner() {
        let mut p = ConeProgram::new();
        let x = p.add_var("x", 3.0, f64::INFINITY);
        p.set_cost(x, 1.0);
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[x] - 3.0).abs() < 1e-7);
    }

    #[test]
    fn unit_rotated_cone() {
        let mut p = ConeProgram::new();
        let u = p.free_var("u");
        let w = p.free_var("w");
        let z = p.free_var("z");
        p.add_eq(vec![(u, 1.0)], 1.0);
        p.add_eq(vec![(w, 1.0)], 1.0);
        p.add_rsoc(u, w, vec![z.into()]);
        p.set_cost(z, -1.0);
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[z] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_cone_minimum() {
        // u = w and u·w ≥ 4 give u = w = 2.
        let mut p = ConeProgram::new();
        let u = p.free_var("u");
        let w = p.free_var("w");
        let z = p.free_var("z");
        p.add_eq(vec![(z, 1.0)], 2.0);
        p.add_eq(vec![(u, 1.0), (w, -1.0)], 0.0);
        p.add_rsoc(u, w, vec![z.into()]);
        p.set_cost(u, 1.0);
        p.set_cost(w, 1.0);
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[u] - 2.0).abs() < 1e-6);
        assert!((s.x[w] - 2.0).abs() < 1e-6);
        assert!((s.obj - 4.0).abs() < 1e-6);
    }

    #[test]
    fn shifted_cone_matches_unshifted() {
        // (a + 1)(b + 1) ≥ (c - 1)², with a = b, c = 3 → a = b = 1.
        let mut p = ConeProgram::new();
        let a = p.free_var("a");
        let b = p.free_var("b");
        let c = p.free_var("c");
        p.add_eq(vec![(c, 1.0)], 3.0);
        p.add_eq(vec![(a, 1.0), (b, -1.0)], 0.0);
        p.add_rsoc(ConeTerm::shifted(a, 1.0), ConeTerm::shifted(b, 1.0), vec![ConeTerm::shifted(c, -1.0)]);
        p.set_cost(a, 1.0);
        let s = solve(&p, &opts()).unwrap();
        assert_eq!(s.status, SolveStatus::Optimal);
        assert!((s.x[a] - 1.0).abs() < 1e-6, "{:?}", s.x);
    }

    #[test]
    fn infeasible_and_unbounded() {
        let mut p = ConeProgram::new();
        let x = p.add_var("x", 0.0, 1.0);
        p.add_ge(vec![(x, 1.0)], 2.0);
        assert_eq!(solve(&p, &opts()).unwrap().status, SolveStatus::Infeasible);

        let mut q = ConeProgram::new();
        let y = q.free_var("y");
        q.set_cost(y, 1.0);
        assert_eq!(solve(&q, &opts()).unwrap().status, SolveStatus::Unbounded);
    }

    #[test]
    fn malformed_programs_are_errors() {
        let mut p = ConeProgram::new();
        let x = p.free_var("x");
        p.add_eq(vec![(x + 4, 1.0)], 0.0);
        assert!(matches!(solve(&p, &opts()), Err(ConicError::Malformed(_))));

        let mut q = ConeProgram::new();
        let u = q.free_var("u");
        q.add_rsoc(u, u, vec![]);
        assert!(q.validate().is_err());

        let mut r = ConeProgram::new();
        r.add_var("x", 2.0, 1.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn audit_reports_worst_constraint() {
        let mut p = ConeProgram::new();
        let u = p.add_var("u", 0.0, 10.0);
        let w = p.free_var("w");
        let z = p.free_var("z");
        p.add_rsoc(u, w, vec![z.into()]);
        let r = audit(&p, &[1.0, 1.0, 0.5]);
        assert_eq!(r.max, 0.0);
        let r = audit(&p, &[1.0, 1.0, 2.0]);
        assert!(r.max > 0.0);
        assert_eq!(r.worst, "rsoc 0");
        let r = audit(&p, &[11.0, 20.0, 0.0]);
        assert_eq!(r.worst, "upper bound of u");
    }

    #[test]
    fn options_validation() {
        assert!(SolveOptions { feas_tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(SolveOptions { max_iter: 0, ..Default::default() }.validate().is_err());
        assert!(SolveOptions::default().validate().is_ok());
    }

    #[test]
    fn dump_lists_every_constraint() {
        let mut p = ConeProgram::new();
        let u = p.free_var("u");
        let w = p.free_var("w");
        p.add_eq(vec![(u, 1.0)], 1.0);
        p.add_le(vec![(w, 1.0)], 2.0);
        p.add_rsoc(u, ConeTerm::shifted(w, 0.5), vec![]);
        let text = p.dump();
        assert_eq!(text.lines().filter(|l| l.starts_with("eq")).count(), 1);
        assert_eq!(text.lines().filter(|l| l.starts_with("le")).count(), 1);
        assert!(text.contains("rsoc x0 * (x1 +0.5)"));
    }
}
