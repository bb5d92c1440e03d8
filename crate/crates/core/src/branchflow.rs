//! DistFlow branch-flow equations on a radial feeder.
//!
//! Sign convention: flows are sending-end quantities on parent → child edges
//! and the downstream balance uses net consumption `p_load − p_pv`, so
//!
//! ```text
//! P_ij = Σ_k P_jk + r_ij·l_ij + p_load_j − p_pv_j
//! Q_ij = Σ_k Q_jk + x_ij·l_ij + q_load_j
//! v_j  = v_i − 2(r_ij·P_ij + x_ij·Q_ij) + |z_ij|²·l_ij
//! v_i·l_ij = P_ij² + Q_ij²
//! ```
//!
//! PV injects real power only.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conic::{self, ConeProgram, SolveOptions, SolveStatus};
use crate::feeder::FeederModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("state dimensions do not match the feeder: {0}")]
    Dimension(String),
    #[error("injection at node `{node}` is {value} pu, outside [{lower}, {upper}]")]
    InjectionOutOfBounds {
        node: String,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("power flow did not converge after {sweeps} sweeps (last change {last_change:e})")]
    NonConvergence { sweeps: usize, last_change: f64 },
    #[error("state not on cone surface (max |e| = {max_gap:e})")]
    NotOnConeSurface { max_gap: f64 },
    #[error("state violates the flow equations (max residual {max_residual:e})")]
    ResidualTooLarge { max_residual: f64 },
    #[error("linearized hosting problem ended with status {0}")]
    LinearInit(SolveStatus),
    #[error("linearized hosting problem could not be solved: {0}")]
    Solver(String),
    #[error("brute-force search is limited to {max} nodes, feeder has {nodes}")]
    TooManyNodes { nodes: usize, max: usize },
    #[error("grid step must be positive, got {0}")]
    InvalidGridStep(f64),
}

/// One power-flow point of the feeder, all per-unit.
///
/// `p`, `q`, `l` are indexed by edge; `v` and `p_pv` by node. `p_sub` is the
/// real power drawn from the upstream grid at the substation bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlowState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub l: Vec<f64>,
    pub v: Vec<f64>,
    pub p_pv: Vec<f64>,
    pub p_sub: f64,
}

/// Grid import at the substation: root-edge flows plus the substation bus's
/// own net load.
pub fn substation_export(model: &FeederModel, p: &[f64], p_pv: &[f64]) -> f64 {
    let s = model.substation();
    model.children(s).iter().map(|&e| p[e]).sum::<f64>() + model.load_p(s) - p_pv[s]
}

impl BranchFlowState {
    pub fn zeros(model: &FeederModel) -> Self {
        let (ne, nn) = (model.edge_count(), model.node_count());
        BranchFlowState {
            p: vec![0.0; ne],
            q: vec![0.0; ne],
            l: vec![0.0; ne],
            v: vec![0.0; nn],
            p_pv: vec![0.0; nn],
            p_sub: 0.0,
        }
    }

    pub fn check_dims(&self, model: &FeederModel) -> Result<(), FlowError> {
        let (ne, nn) = (model.edge_count(), model.node_count());
        let ok = self.p.len() == ne
            && self.q.len() == ne
            && self.l.len() == ne
            && self.v.len() == nn
            && self.p_pv.len() == nn;
        if ok {
            Ok(())
        } else {
            Err(FlowError::Dimension(format!(
                "expected {ne} edges and {nn} nodes, got P{} Q{} l{} v{} pv{}",
                self.p.len(),
                self.q.len(),
                self.l.len(),
                self.v.len(),
                self.p_pv.len()
            )))
        }
    }

    pub fn recompute_p_sub(&mut self, model: &FeederModel) {
        self.p_sub = substation_export(model, &self.p, &self.p_pv);
    }

    pub fn total_pv(&self) -> f64 {
        self.p_pv.iter().sum()
    }
}

/// Residuals of the three linear DistFlow equations, one entry per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowResiduals {
    pub real: Vec<f64>,
    pub reactive: Vec<f64>,
    pub voltage: Vec<f64>,
}

impl FlowResiduals {
    pub fn max_abs(&self) -> f64 {
        self.real
            .iter()
            .chain(&self.reactive)
            .chain(&self.voltage)
            .fold(0.0, |m, r| m.max(r.abs()))
    }
}

pub fn flow_residuals(model: &FeederModel, s: &BranchFlowState) -> Result<FlowResiduals, FlowError> {
    s.check_dims(model)?;
    let ne = model.edge_count();
    let mut res = FlowResiduals {
        real: Vec::with_capacity(ne),
        reactive: Vec::with_capacity(ne),
        voltage: Vec::with_capacity(ne),
    };
    for (e, edge) in model.edges().iter().enumerate() {
        let (i, j) = (edge.from, edge.to);
        let (r, x) = (model.r(e), model.x(e));
        let down_p: f64 = model.children(j).iter().map(|&k| s.p[k]).sum();
        let down_q: f64 = model.children(j).iter().map(|&k| s.q[k]).sum();
        res.real
            .push(s.p[e] - down_p - r * s.l[e] - (model.load_p(j) - s.p_pv[j]));
        res.reactive.push(s.q[e] - down_q - x * s.l[e] - model.load_q(j));
        res.voltage
            .push(s.v[j] - s.v[i] + 2.0 * (r * s.p[e] + x * s.q[e]) - model.z_sq(e) * s.l[e]);
    }
    Ok(res)
}

/// Per-edge `e_ij = P² + Q² − v_i·l`: zero on the cone surface, negative inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapVector {
    pub e: Vec<f64>,
}

impl GapVector {
    /// Largest |e| and the edge where it occurs (`None` for edgeless feeders).
    pub fn max_abs(&self) -> (f64, Option<usize>) {
        self.e
            .iter()
            .enumerate()
            .fold((0.0, None), |(m, arg), (k, g)| {
                if arg.is_none() || g.abs() > m {
                    (g.abs(), Some(k))
                } else {
                    (m, arg)
                }
            })
    }

    pub fn min(&self) -> f64 {
        self.e.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn feasibility_gap(model: &FeederModel, s: &BranchFlowState) -> GapVector {
    GapVector {
        e: model
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| s.p[e] * s.p[e] + s.q[e] * s.q[e] - s.v[edge.from] * s.l[e])
            .collect(),
    }
}

const SWEEP_TOL: f64 = 1e-12;
const SWEEP_MAX: usize = 200;
const INJECTION_SLACK: f64 = 1e-9;

/// Exact DistFlow solution for fixed PV injections by backward/forward sweep.
pub fn power_flow_sweep(model: &FeederModel, p_pv: &[f64]) -> Result<BranchFlowState, FlowError> {
    let nn = model.node_count();
    if p_pv.len() != nn {
        return Err(FlowError::Dimension(format!("{} injections for {nn} nodes", p_pv.len())));
    }
    for (i, &pv) in p_pv.iter().enumerate() {
        let (lo, hi) = (model.pv_lower(i), model.pv_upper(i));
        if !(pv >= lo - INJECTION_SLACK && pv <= hi + INJECTION_SLACK) {
            return Err(FlowError::InjectionOutOfBounds {
                node: model.node_id(i).to_string(),
                value: pv,
                lower: lo,
                upper: hi,
            });
        }
    }

    let order = model.sweep_order();
    let mut s = BranchFlowState::zeros(model);
    s.p_pv.copy_from_slice(p_pv);
    s.v.iter_mut().for_each(|v| *v = model.v_sub());

    let mut last_change = f64::INFINITY;
    for _ in 0..SWEEP_MAX {
        let mut change: f64 = 0.0;
        // Backward: accumulate flows from the leaves.
        for &e in order.iter().rev() {
            let j = model.edges()[e].to;
            let down_p: f64 = model.children(j).iter().map(|&k| s.p[k]).sum();
            let down_q: f64 = model.children(j).iter().map(|&k| s.q[k]).sum();
            let p = down_p + model.r(e) * s.l[e] + model.load_p(j) - p_pv[j];
            let q = down_q + model.x(e) * s.l[e] + model.load_q(j);
            change = change.max((p - s.p[e]).abs()).max((q - s.q[e]).abs());
            s.p[e] = p;
            s.q[e] = q;
        }
        // Forward: voltages from the root, then currents.
        for &e in order {
            let edge = &model.edges()[e];
            let (i, j) = (edge.from, edge.to);
            let v = s.v[i] - 2.0 * (model.r(e) * s.p[e] + model.x(e) * s.q[e]) + model.z_sq(e) * s.l[e];
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowError::NonConvergence {
                    sweeps: SWEEP_MAX,
                    last_change: change,
                });
            }
            let l = (s.p[e] * s.p[e] + s.q[e] * s.q[e]) / s.v[i];
            change = change.max((v - s.v[j]).abs()).max((l - s.l[e]).abs());
            s.v[j] = v;
            s.l[e] = l;
        }
        last_change = change;
        if change < SWEEP_TOL {
            s.recompute_p_sub(model);
            return Ok(s);
        }
    }
    Err(FlowError::NonConvergence {
        sweeps: SWEEP_MAX,
        last_change,
    })
}

/// Tolerance on residuals and gaps below which a state counts as an exact
/// power flow for angle recovery.
pub const ANGLE_TOL: f64 = 1e-8;

/// Voltage angles (radians, substation at 0) of an exact branch-flow state.
pub fn recover_angles(model: &FeederModel, s: &BranchFlowState) -> Result<Vec<f64>, FlowError> {
    let residual = flow_residuals(model, s)?.max_abs();
    if residual > ANGLE_TOL {
        return Err(FlowError::ResidualTooLarge { max_residual: residual });
    }
    let (max_gap, _) = feasibility_gap(model, s).max_abs();
    if max_gap > ANGLE_TOL {
        return Err(FlowError::NotOnConeSurface { max_gap });
    }
    let mut theta = vec![0.0; model.node_count()];
    for &e in model.sweep_order() {
        let edge = &model.edges()[e];
        let z_conj = Complex64::new(model.r(e), -model.x(e));
        let flow = Complex64::new(s.p[e], s.q[e]);
        // V_i·conj(V_j) = v_i − conj(z)·S_ij
        let w = Complex64::new(s.v[edge.from], 0.0) - z_conj * flow;
        theta[edge.to] = theta[edge.from] - w.arg();
    }
    Ok(theta)
}

/// Complex nodal voltages from squared magnitudes and recovered angles.
pub fn phasors(s: &BranchFlowState, theta: &[f64]) -> Vec<Complex64> {
    s.v.iter()
        .zip(theta)
        .map(|(&v, &t)| Complex64::from_polar(v.sqrt(), t))
        .collect()
}

/// Lossless hosting LP used as the starting point of the convex iteration.
///
/// Drops every current term from the flow equations and the thermal limit,
/// keeps the PV bounds, the voltage window and the reverse-flow limit, and
/// back-fills `l = (P² + Q²)/v` from the LP solution.
pub fn lindistflow_init(model: &FeederModel) -> Result<BranchFlowState, FlowError> {
    let mut prog = ConeProgram::new();
    let ne = model.edge_count();
    let nn = model.node_count();
    let pv: Vec<usize> = (0..ne).map(|e| prog.free_var(format!("P[{}]", model.edge_label(e)))).collect();
    let qv: Vec<usize> = (0..ne).map(|e| prog.free_var(format!("Q[{}]", model.edge_label(e)))).collect();
    let vv: Vec<usize> = (0..nn)
        .map(|i| {
            let name = format!("v[{}]", model.node_id(i));
            if i == model.substation() {
                prog.add_var(name, model.v_sub(), model.v_sub())
            } else {
                prog.add_var(name, model.v_min_sq(), model.v_max_sq())
            }
        })
        .collect();
    let pvar: Vec<Option<usize>> = (0..nn)
        .map(|i| {
            model.has_pv(i).then(|| {
                let k = prog.add_var(format!("pv[{}]", model.node_id(i)), model.pv_lower(i), model.pv_upper(i));
                prog.set_cost(k, -1.0);
                k
            })
        })
        .collect();
    let sub = prog.add_var("P_sub", 0.0, f64::INFINITY);

    for (e, edge) in model.edges().iter().enumerate() {
        let (i, j) = (edge.from, edge.to);
        let mut real = vec![(pv[e], 1.0)];
        let mut reactive = vec![(qv[e], 1.0)];
        for &k in model.children(j) {
            real.push((pv[k], -1.0));
            reactive.push((qv[k], -1.0));
        }
        let mut rhs = model.load_p(j);
        match pvar[j] {
            Some(k) => real.push((k, 1.0)),
            None => rhs -= model.pv_lower(j),
        }
        prog.add_eq(real, rhs);
        prog.add_eq(reactive, model.load_q(j));
        prog.add_eq(
            vec![
                (vv[j], 1.0),
                (vv[i], -1.0),
                (pv[e], 2.0 * model.r(e)),
                (qv[e], 2.0 * model.x(e)),
            ],
            0.0,
        );
    }
    let s = model.substation();
    let mut export: Vec<(usize, f64)> = vec![(sub, 1.0)];
    export.extend(model.children(s).iter().map(|&e| (pv[e], -1.0)));
    let mut rhs = model.load_p(s);
    match pvar[s] {
        Some(k) => export.push((k, 1.0)),
        None => rhs -= model.pv_lower(s),
    }
    prog.add_eq(export, rhs);

    let sol = conic::solve(&prog, &SolveOptions::default()).map_err(|e| FlowError::Solver(e.to_string()))?;
    if sol.status != SolveStatus::Optimal {
        return Err(FlowError::LinearInit(sol.status));
    }

    let x = &sol.x;
    let mut state = BranchFlowState::zeros(model);
    for e in 0..ne {
        state.p[e] = x[pv[e]];
        state.q[e] = x[qv[e]];
    }
    for i in 0..nn {
        state.v[i] = x[vv[i]];
        state.p_pv[i] = match pvar[i] {
            Some(k) => x[k].clamp(model.pv_lower(i), model.pv_upper(i)),
            None => model.pv_lower(i),
        };
    }
    for (e, edge) in model.edges().iter().enumerate() {
        state.l[e] = (state.p[e] * state.p[e] + state.q[e] * state.q[e]) / state.v[edge.from];
    }
    state.recompute_p_sub(model);
    Ok(state)
}

/// Operating-limit summary of a state in physical terms (voltage magnitudes,
/// current magnitudes) for reports and audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitReport {
    pub v_max_pu: f64,
    pub v_max_node: usize,
    pub v_min_pu: f64,
    pub v_min_node: usize,
    /// Largest `|I| − I_rated` over edges (negative when every edge has headroom).
    pub overload_pu: f64,
    pub overload_edge: Option<usize>,
    pub p_sub: f64,
}

impl LimitReport {
    pub fn new(model: &FeederModel, s: &BranchFlowState) -> Self {
        let mut rep = LimitReport {
            v_max_pu: f64::NEG_INFINITY,
            v_max_node: 0,
            v_min_pu: f64::INFINITY,
            v_min_node: 0,
            overload_pu: f64::NEG_INFINITY,
            overload_edge: None,
            p_sub: s.p_sub,
        };
        for (i, &v) in s.v.iter().enumerate() {
            let mag = v.max(0.0).sqrt();
            if mag > rep.v_max_pu {
                rep.v_max_pu = mag;
                rep.v_max_node = i;
            }
            if mag < rep.v_min_pu {
                rep.v_min_pu = mag;
                rep.v_min_node = i;
            }
        }
        for (e, &l) in s.l.iter().enumerate() {
            let over = l.max(0.0).sqrt() - model.i_rated(e);
            if over > rep.overload_pu {
                rep.overload_pu = over;
                rep.overload_edge = Some(e);
            }
        }
        rep
    }

    /// Violations beyond the given slack, worst first: `(constraint, amount)`.
    pub fn violations(&self, model: &FeederModel, v_tol: f64, p_tol: f64) -> Vec<(String, f64)> {
        let vmax = model.v_max_sq().sqrt();
        let vmin = model.v_min_sq().sqrt();
        let mut out = Vec::new();
        if self.v_max_pu > vmax + v_tol {
            out.push((
                format!("voltage-upper at {}", model.node_id(self.v_max_node)),
                self.v_max_pu - vmax,
            ));
        }
        if self.v_min_pu < vmin - v_tol {
            out.push((
                format!("voltage-lower at {}", model.node_id(self.v_min_node)),
                vmin - self.v_min_pu,
            ));
        }
        if let Some(e) = self.overload_edge {
            if self.overload_pu > v_tol {
                out.push((format!("thermal on {}", model.edge_label(e)), self.overload_pu));
            }
        }
        if self.p_sub < -p_tol {
            out.push(("reverse-flow".to_string(), -self.p_sub));
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        out
    }

    pub fn within(&self, model: &FeederModel, v_tol: f64, p_tol: f64) -> bool {
        self.violations(model, v_tol, p_tol).is_empty()
    }
}

/// Result of the exhaustive small-feeder search.
#[derive(Debug, Clone, PartialEq)]
pub struct BruteForce {
    pub capacity: f64,
    pub injections: Vec<f64>,
    pub candidates: usize,
}

pub const BRUTE_FORCE_MAX_NODES: usize = 4;

/// Grid search over PV injections, each candidate checked with the exact sweep
/// against the voltage window, thermal limits and the reverse-flow limit.
pub fn brute_force_hosting(model: &FeederModel, grid_step: f64) -> Result<BruteForce, FlowError> {
    if model.node_count() > BRUTE_FORCE_MAX_NODES {
        return Err(FlowError::TooManyNodes {
            nodes: model.node_count(),
            max: BRUTE_FORCE_MAX_NODES,
        });
    }
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(FlowError::InvalidGridStep(grid_step));
    }
    let nn = model.node_count();
    let grids: Vec<Vec<f64>> = (0..nn)
        .map(|i| {
            let (lo, hi) = (model.pv_lower(i), model.pv_upper(i));
            if !model.has_pv(i) {
                return vec![lo];
            }
            let steps = ((hi - lo) / grid_step).floor() as usize;
            let mut g: Vec<f64> = (0..=steps).map(|k| lo + k as f64 * grid_step).collect();
            if hi - g[g.len() - 1] > 1e-12 {
                g.push(hi);
            }
            g
        })
        .collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut idx = vec![0usize; nn];
    let mut candidates = 0;
    let mut p_pv = vec![0.0; nn];
    loop {
        for i in 0..nn {
            p_pv[i] = grids[i][idx[i]];
        }
        candidates += 1;
        let total: f64 = p_pv.iter().sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            if let Ok(s) = power_flow_sweep(model, &p_pv) {
                if LimitReport::new(model, &s).within(model, 0.0, 0.0) {
                    best = Some((total, p_pv.clone()));
                }
            }
        }
        // odometer increment
        let mut k = 0;
        loop {
            if k == nn {
                let (capacity, injections) = best.unwrap_or((f64::NAN, vec![]));
                return Ok(BruteForce {
                    capacity,
                    injections,
                    candidates,
                });
            }
            idx[k] += 1;
            if idx[k] < grids[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Golden-file CSV: one `edge,label,P,Q,l` row per edge and one `node,id,v`
/// row per node, 12 significant digits.
pub fn state_to_csv(model: &FeederModel, s: &BranchFlowState) -> String {
    let mut out = String::from("kind,name,a,b,c\n");
    for e in 0..model.edge_count() {
        out.push_str(&format!(
            "edge,{},{:.11e},{:.11e},{:.11e}\n",
            model.edge_label(e),
            s.p[e],
            s.q[e],
            s.l[e]
        ));
    }
    for i in 0..model.node_count() {
        out.push_str(&format!("node,{},{:.11e},,\n", model.node_id(i), s.v[i]));
    }
    out
}

/// Reads [`state_to_csv`] output back into `(P, Q, l)` per edge and `v` per
/// node, in file order.
pub fn state_from_csv(text: &str) -> Result<(Vec<[f64; 3]>, Vec<f64>), String> {
    let mut edges = Vec::new();
    let mut nodes = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64, String> {
            f.get(i)
                .ok_or_else(|| format!("line {}: missing field", k + 1))?
                .parse::<f64>()
                .map_err(|e| format!("line {}: {e}", k + 1))
        };
        match f.first().copied() {
            Some("edge") => edges.push([num(2)?, num(3)?, num(4)?]),
            Some("node") => nodes.push(num(2)?),
            Some("") | None => {}
            Some(other) => return Err(format!("line {}: unknown row kind `{other}`", k + 1)),
        }
    }
    Ok((edges, nodes))
}
