//! Convex iteration: a sequence of delta SOCPs, each carrying a linear cut
//! that forces the feasibility gap to contract, with a damped update.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branchflow::{
    self, feasibility_gap, flow_residuals, power_flow_sweep, BranchFlowState, FlowError, LimitReport,
};
use crate::conic::{self, ConeProgram, ConicError, SolveOptions, SolveStatus};
use crate::feeder::FeederModel;
use crate::relax::{self, binding_constraints, Binding, HostingProgramIndex, Objective, RelaxError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    /// Contraction ratio of the gap cut, in (0, 1).
    pub gamma: f64,
    /// Damping of the update, in (0, 1].
    pub alpha: f64,
    /// Stop once max |e| falls to this value ...
    pub epsilon: f64,
    /// ... and the last step moved Σ p_pv by no more than this (per-unit).
    pub objective_tol: f64,
    pub max_outer: usize,
    /// Reference gap magnitude for the first cut when the starting point is
    /// already on the cone. Defaults to `4·max(epsilon, 1e-4)`; it bounds how
    /// far the first step can move.
    pub initial_gap: Option<f64>,
    pub solve: SolveOptions,
}

impl Default for IterationConfig {
    fn default() -> Self {
        IterationConfig {
            gamma: 0.9,
            alpha: 0.7,
            epsilon: 1e-3,
            objective_tol: 1e-4,
            max_outer: 50,
            initial_gap: None,
            solve: SolveOptions::default(),
        }
    }
}

impl IterationConfig {
    pub fn validate(&self) -> Result<(), IterationError> {
        let bad = |msg: String| Err(IterationError::Config(msg));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.objective_tol > 0.0 && self.objective_tol.is_finite()) {
            return bad(format!("objective_tol must be positive, got {}", self.objective_tol));
        }
        if self.max_outer < 1 {
            return bad("max_outer must be at least 1".to_string());
        }
        if let Some(g) = self.initial_gap {
            if !(g > 0.0 && g.is_finite()) {
                return bad(format!("initial_gap must be positive, got {g}"));
            }
        }
        self.solve
            .validate()
            .map_err(|e| IterationError::Config(e.to_string()))
    }

    pub fn reference_gap(&self) -> f64 {
        self.initial_gap.unwrap_or(4.0 * self.epsilon.max(MIN_REFERENCE_GAP))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IterationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("initialization failed: {0}")]
    Init(FlowError),
    #[error("previous state violates the flow equations (max residual {0:e})")]
    Precondition(f64),
    #[error("delta program at iteration {k} ended with status {status}")]
    Solver {
        k: usize,
        status: SolveStatus,
        trace: IterationTrace,
    },
    #[error(transparent)]
    Conic(#[from] ConicError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub max_abs_gap: f64,
    pub worst_edge: Option<usize>,
    pub gaps: Vec<f64>,
    /// Σ p_pv of the iterate, per-unit.
    pub objective: f64,
    pub status: SolveStatus,
    /// Contraction ratio actually used (differs from the configured one after
    /// a retry).
    pub gamma: f64,
    #[serde(skip)]
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    pub fn max_gaps(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.max_abs_gap).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCapacity {
    pub node: String,
    pub pv_pu: f64,
    pub pv_kw: f64,
}

/// Independent check of the final point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    /// Flow-equation residual of the last iterate.
    pub max_flow_residual: f64,
    /// Worst violation of the PV, voltage, thermal and export limits by the
    /// last iterate.
    pub max_limit_violation: f64,
    /// Exact power flow at the reported injections.
    pub sweep: LimitReport,
    pub passed: bool,
    pub worst: Option<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostingResult {
    pub total_pv_pu: f64,
    pub total_pv_kw: f64,
    pub per_node: Vec<NodeCapacity>,
    /// Exact power flow at the reported injections.
    pub final_state: BranchFlowState,
    /// Last iterate of the convex iteration.
    pub iterate: BranchFlowState,
    pub trace: IterationTrace,
    pub binding: Vec<Binding>,
    pub converged: bool,
    /// PV removed from the last iterate so the exact power flow meets every
    /// limit, per-unit.
    pub repair_pu: f64,
    pub audit: Option<Audit>,
}

/// Tolerances of the final audit.
pub const AUDIT_ITERATE_TOL: f64 = 1e-6;
pub const AUDIT_VOLTAGE_TOL: f64 = 1e-4;
pub const AUDIT_EXPORT_TOL: f64 = 1e-6;
const BINDING_TOL: f64 = 1e-4;
const SURFACE_SLACK: f64 = 0.1;
const MIN_REFERENCE_GAP: f64 = 1e-4;
const PRECONDITION_TOL: f64 = 1e-6;

/// Delta program around `prev` with the cut
/// `2P·ΔP + 2Q·ΔQ − l·Δv_i − v_i·Δl ≥ (γ − 1)·e` on every edge.
pub fn build_delta_program(
    model: &FeederModel,
    prev: &BranchFlowState,
    gamma: f64,
) -> Result<(ConeProgram, HostingProgramIndex), IterationError> {
    let e0 = feasibility_gap(model, prev).e;
    let rhs: Vec<f64> = e0.iter().map(|e| (gamma - 1.0) * e).collect();
    build_with_cut(model, prev, &rhs)
}

/// Delta program whose cut asks the linearized gap to reach `gamma·reference`
/// instead of `gamma·e`. Used for a starting point that is already on the
/// cone, where the plain cut pins the root edges.
pub fn build_delta_program_with_reference(
    model: &FeederModel,
    prev: &BranchFlowState,
    gamma: f64,
    reference: &[f64],
) -> Result<(ConeProgram, HostingProgramIndex), IterationError> {
    let e0 = feasibility_gap(model, prev).e;
    let rhs: Vec<f64> = e0.iter().zip(reference).map(|(e, r)| gamma * r - e).collect();
    build_with_cut(model, prev, &rhs)
}

fn build_with_cut(
    model: &FeederModel,
    prev: &BranchFlowState,
    rhs: &[f64],
) -> Result<(ConeProgram, HostingProgramIndex), IterationError> {
    let residual = flow_residuals(model, prev)?.max_abs();
    if residual > PRECONDITION_TOL {
        return Err(IterationError::Precondition(residual));
    }
    let (mut prog, mut idx) = relax::build_around(model, prev, Objective::Hosting, "d");
    for (e, edge) in model.edges().iter().enumerate() {
        let i = edge.from;
        idx.cut_rows.push(prog.ineq.len());
        prog.add_ge(
            vec![
                (idx.p[e], 2.0 * prev.p[e]),
                (idx.q[e], 2.0 * prev.q[e]),
                (idx.v[i], -prev.l[e]),
                (idx.l[e], -prev.v[i]),
            ],
            rhs[e],
        );
    }
    Ok((prog, idx))
}

/// `prev + alpha·delta` on every field, with `p_sub` recomputed.
pub fn update_state(
    model: &FeederModel,
    prev: &BranchFlowState,
    delta: &BranchFlowState,
    alpha: f64,
) -> Result<BranchFlowState, FlowError> {
    prev.check_dims(model)?;
    delta.check_dims(model)?;
    let step = |a: &[f64], d: &[f64]| a.iter().zip(d).map(|(a, d)| a + alpha * d).collect();
    let mut s = BranchFlowState {
        p: step(&prev.p, &delta.p),
        q: step(&prev.q, &delta.q),
        l: step(&prev.l, &delta.l),
        v: step(&prev.v, &delta.v),
        p_pv: step(&prev.p_pv, &delta.p_pv),
        p_sub: 0.0,
    };
    s.recompute_p_sub(model);
    Ok(s)
}

fn record(model: &FeederModel, k: usize, s: &BranchFlowState, status: SolveStatus, gamma: f64, t: Instant) -> IterationRecord {
    let gaps = feasibility_gap(model, s);
    let (max_abs_gap, worst_edge) = gaps.max_abs();
    IterationRecord {
        k,
        max_abs_gap,
        worst_edge,
        gaps: gaps.e,
        objective: s.total_pv(),
        status,
        gamma,
        elapsed_ms: t.elapsed().as_secs_f64() * 1e3,
    }
}

/// Maximizes hosting capacity on the exact power-flow manifold.
pub fn run(model: &FeederModel, cfg: &IterationConfig) -> Result<HostingResult, IterationError> {
    cfg.validate()?;
    let fixed: Vec<f64> = (0..model.node_count()).map(|i| model.pv_lower(i)).collect();

    if !(0..model.node_count()).any(|i| model.has_pv(i)) {
        let t = Instant::now();
        let s = power_flow_sweep(model, &fixed)?;
        let trace = IterationTrace {
            records: vec![record(model, 1, &s, SolveStatus::Optimal, cfg.gamma, t)],
        };
        return Ok(finish(model, s, trace, true));
    }

    let init = branchflow::lindistflow_init(model).map_err(IterationError::Init)?;
    let mut state = power_flow_sweep(model, &init.p_pv).map_err(IterationError::Init)?;
    let mut trace = IterationTrace::default();
    let mut converged = false;
    let mut objective = state.total_pv();

    for k in 1..=cfg.max_outer {
        let t = Instant::now();
        let e0 = feasibility_gap(model, &state).e;
        // edges sitting on the surface get a sliver of slack so the cut and
        // the cone keep a common interior
        let floor = if k == 1 { -cfg.reference_gap() } else { -SURFACE_SLACK * cfg.epsilon };
        let reference: Vec<f64> = e0.iter().map(|&e| e.min(floor)).collect();

        let mut gamma = cfg.gamma;
        let mut attempt = 0;
        let (sol, idx) = loop {
            let (prog, idx) = build_delta_program_with_reference(model, &state, gamma, &reference)?;
            let sol = conic::solve(&prog, &cfg.solve)?;
            if sol.status == SolveStatus::Optimal || attempt == 1 {
                break (sol, idx);
            }
            attempt += 1;
            gamma = 0.5 * (1.0 + gamma);
        };
        if sol.status != SolveStatus::Optimal {
            return Err(IterationError::Solver {
                k,
                status: sol.status,
                trace,
            });
        }

        let delta = relax::extract_delta(&sol, &idx, model)?;
        state = update_state(model, &state, &delta, cfg.alpha)?;
        let rec = record(model, k, &state, sol.status, gamma, t);
        let moved = (rec.objective - objective).abs();
        objective = rec.objective;
        let done = rec.max_abs_gap <= cfg.epsilon && moved <= cfg.objective_tol;
        trace.records.push(rec);
        if done {
            converged = true;
            break;
        }
    }

    Ok(finish(model, state, trace, converged))
}

/// Worst violation of the hosting constraints by `s`, in their own units.
fn limit_violation(model: &FeederModel, s: &BranchFlowState) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..model.node_count() {
        if model.has_pv(i) {
            worst = worst
                .max(model.pv_lower(i) - s.p_pv[i])
                .max(s.p_pv[i] - model.pv_upper(i));
        }
        if i != model.substation() {
            worst = worst.max(model.v_min_sq() - s.v[i]).max(s.v[i] - model.v_max_sq());
        }
    }
    for e in 0..model.edge_count() {
        worst = worst.max(s.l[e] - model.i_rated(e) * model.i_rated(e));
    }
    worst.max(-s.p_sub)
}

/// Largest fraction `t` of the PV above its lower bounds that the exact power
/// flow admits, by bisection.
fn trim(model: &FeederModel, p_pv: &[f64]) -> Option<(Vec<f64>, BranchFlowState)> {
    let at = |t: f64| -> Vec<f64> {
        p_pv.iter()
            .enumerate()
            .map(|(i, &p)| {
                let lo = model.pv_lower(i);
                (lo + t * (p - lo)).clamp(lo, model.pv_upper(i))
            })
            .collect()
    };
    let feasible = |t: f64| -> Option<BranchFlowState> {
        let s = power_flow_sweep(model, &at(t)).ok()?;
        LimitReport::new(model, &s).within(model, 0.0, 0.0).then_some(s)
    };
    if let Some(s) = feasible(1.0) {
        return Some((at(1.0), s));
    }
    let mut best = feasible(0.0).map(|s| (0.0, s))?;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match feasible(mid) {
            Some(s) => {
                lo = mid;
                best = (mid, s);
            }
            None => hi = mid,
        }
    }
    Some((at(best.0), best.1))
}

fn finish(model: &FeederModel, iterate: BranchFlowState, trace: IterationTrace, converged: bool) -> HostingResult {
    let residual = flow_residuals(model, &iterate).map(|r| r.max_abs()).unwrap_or(f64::INFINITY);
    let violation = limit_violation(model, &iterate);

    let (p_pv, final_state) = match trim(model, &iterate.p_pv) {
        Some(x) => x,
        None => {
            // Nothing admissible: report the iterate's injections as they are.
            let s = power_flow_sweep(model, &iterate.p_pv).unwrap_or_else(|_| iterate.clone());
            (iterate.p_pv.clone(), s)
        }
    };
    let repair_pu = iterate.total_pv() - p_pv.iter().sum::<f64>();

    let audit = converged.then(|| {
        let sweep = LimitReport::new(model, &final_state);
        let mut problems = sweep.violations(model, AUDIT_VOLTAGE_TOL, AUDIT_EXPORT_TOL);
        if residual > AUDIT_ITERATE_TOL {
            problems.push(("flow residual of iterate".to_string(), residual));
        }
        if violation > AUDIT_ITERATE_TOL {
            problems.push(("limit violation of iterate".to_string(), violation));
        }
        problems.sort_by(|a, b| b.1.total_cmp(&a.1));
        Audit {
            max_flow_residual: residual,
            max_limit_violation: violation,
            sweep,
            passed: problems.is_empty(),
            worst: problems.into_iter().next(),
        }
    });

    let total: f64 = p_pv.iter().sum();
    HostingResult {
        total_pv_pu: total,
        total_pv_kw: model.to_kw(total),
        per_node: (0..model.node_count())
            .filter(|&i| model.has_pv(i))
            .map(|i| NodeCapacity {
                node: model.node_id(i).to_string(),
                pv_pu: p_pv[i],
                pv_kw: model.to_kw(p_pv[i]),
            })
            .collect(),
        binding: binding_constraints(model, &final_state, BINDING_TOL),
        final_state,
        iterate,
        trace,
        converged,
        repair_pu,
        audit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::FeederBuilder;

    fn single_edge() -> (FeederModel, BranchFlowState) {
        // P = 1, Q = 0, v_sub = 1, l = 2 satisfies the flow equations with
        // r = 0.1, x = 0 and a 0.8 pu load.
        let m = FeederBuilder::per_unit()
            .substation("a")
            .node_pu("a", 0.0, 0.0, 0.0)
            .node_pu("b", 0.8, 0.0, 0.0)
            .edge_pu("a", "b", 0.1, 0.0)
            .build()
            .unwrap();
        let s = BranchFlowState {
            p: vec![1.0],
            q: vec![0.0],
            l: vec![2.0],
            v: vec![1.0, 0.82],
            p_pv: vec![0.0, 0.0],
            p_sub: 1.0,
        };
        (m, s)
    }

    #[test]
    fn config_validation() {
        assert!(IterationConfig::default().validate().is_ok());
        for cfg in [
            IterationConfig { gamma: 1.5, ..Default::default() },
            IterationConfig { gamma: 0.0, ..Default::default() },
            IterationConfig { alpha: 0.0, ..Default::default() },
            IterationConfig { epsilon: -1.0, ..Default::default() },
            IterationConfig { objective_tol: 0.0, ..Default::default() },
            IterationConfig { max_outer: 0, ..Default::default() },
            IterationConfig { initial_gap: Some(0.0), ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(IterationError::Config(_))), "{cfg:?}");
        }
        assert_eq!(IterationConfig::default().reference_gap(), 4e-3);
    }

    #[test]
    fn hand_evaluated_cut() {
        let (m, s) = single_edge();
        assert!((feasibility_gap(&m, &s).e[0] + 1.0).abs() < 1e-15);
        let (prog, idx) = build_delta_program(&m, &s, 0.9).unwrap();
        let row = &prog.ineq[idx.cut_rows[0]];
        // stored as ≤: −2ΔP + l·Δv_a + v_a·Δl ≤ −0.1
        assert!((row.rhs + 0.1).abs() < 1e-15);
        let coef = |k: usize| row.terms.iter().filter(|t| t.0 == k).map(|t| t.1).sum::<f64>();
        assert_eq!(coef(idx.p[0]), -2.0);
        assert_eq!(coef(idx.q[0]), 0.0);
        assert_eq!(coef(idx.v[0]), 2.0);
        assert_eq!(coef(idx.l[0]), 1.0);
    }

    #[test]
    fn zero_gap_gives_zero_rhs() {
        let m = FeederBuilder::per_unit()
            .substation("a")
            .node_pu("a", 0.0, 0.0, 0.0)
            .node_pu("b", 0.1, 0.05, 0.2)
            .edge_pu("a", "b", 0.01, 0.01)
            .build()
            .unwrap();
        let s = power_flow_sweep(&m, &[0.0, 0.05]).unwrap();
        let (prog, idx) = build_delta_program(&m, &s, 0.9).unwrap();
        let row = &prog.ineq[idx.cut_rows[0]];
        assert!(row.rhs.abs() < 1e-12);
        // Δ = 0 satisfies the cut with equality and every other constraint
        let zero = vec![0.0; prog.n_vars()];
        let mut x = zero.clone();
        x[idx.p_sub] = s.p_sub;
        assert_eq!(row.eval(&zero), 0.0);
        assert!(conic::audit(&prog, &x).max < 1e-12);
    }

    #[test]
    fn precondition_rejects_inconsistent_state() {
        let (m, mut s) = single_edge();
        s.p[0] += 1e-3;
        assert!(matches!(
            build_delta_program(&m, &s, 0.9),
            Err(IterationError::Precondition(_))
        ));
    }

    #[test]
    fn update_examples() {
        let (m, s) = single_edge();
        let zero = BranchFlowState::zeros(&m);
        let same = update_state(&m, &s, &zero, 0.7).unwrap();
        assert_eq!(same, s);
        let full = update_state(&m, &zero, &s, 1.0).unwrap();
        assert_eq!(full.p, s.p);
        assert_eq!(full.v, s.v);
        let mut d = zero.clone();
        d.v[0] = 0.02;
        let one = BranchFlowState { v: vec![1.0, 1.0], ..zero };
        let u = update_state(&m, &one, &d, 0.7).unwrap();
        assert!((u.v[0] - 1.014).abs() < 1e-15);
    }

    #[test]
    fn no_pv_converges_in_one_iteration() {
        let m = FeederBuilder::per_unit()
            .substation("a")
            .node_pu("a", 0.0, 0.0, 0.0)
            .node_pu("b", 0.1, 0.05, 0.0)
            .edge_pu("a", "b", 0.01, 0.01)
            .build()
            .unwrap();
        let r = run(&m, &IterationConfig::default()).unwrap();
        assert!(r.converged);
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.total_pv_pu, 0.0);
        assert!(r.audit.unwrap().passed);
    }

    #[test]
    fn two_node_reverse_flow_limited() {
        let m = FeederBuilder::per_unit()
            .substation("a")
            .node_pu("a", 0.0, 0.0, 0.0)
            .node_pu("b", 0.1, 0.05, 0.5)
            .edge_pu("a", "b", 0.01, 0.01)
            .build()
            .unwrap();
        let r = run(&m, &IterationConfig::default()).unwrap();
        assert!(r.converged);
        let audit = r.audit.as_ref().unwrap();
        assert!(audit.passed, "{audit:?}");
        // exact capacity is load plus line losses at P_sub = 0
        let exact = power_flow_sweep(&m, &[0.0, r.total_pv_pu]).unwrap();
        assert!(exact.p_sub >= 0.0 && exact.p_sub < 1e-4);
        assert!(r.binding.iter().any(|b| b.kind == relax::BindingKind::ReverseFlow));
    }
}
