//! Relaxed hosting-capacity SOCP and its mapping back to branch-flow states.
//!
//! The builder writes every constraint in absolute quantities around a base
//! point: decision variables are offsets from `base`, so the same code yields
//! the relaxed program (base = 0) and the delta programs of the convex
//! iteration (base = previous iterate).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::branchflow::{substation_export, BranchFlowState};
use crate::conic::{self, ConeProgram, ConeSolution, ConeTerm, ConicError, SolveOptions, SolveStatus};
use crate::feeder::FeederModel;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxError {
    #[error("solver returned status {0}, no state to extract")]
    NotOptimal(SolveStatus),
    #[error("substation export {recomputed} disagrees with program variable {variable}")]
    SubstationMismatch { recomputed: f64, variable: f64 },
    #[error("solution has {got} entries, program has {expected} variables")]
    Dimension { got: usize, expected: usize },
    #[error(transparent)]
    Conic(#[from] ConicError),
}

/// What the program minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Minimize −Σ p_pv with the reverse-flow limit in force.
    Hosting,
    /// Minimize Σ r·l without the reverse-flow limit.
    Losses,
}

/// Variable layout of a hosting program.
#[derive(Debug, Clone, PartialEq)]
pub struct HostingProgramIndex {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
    pub l: Vec<usize>,
    pub v: Vec<usize>,
    /// `None` where the node's injection is fixed.
    pub pv: Vec<Option<usize>>,
    pub p_sub: usize,
    /// Offsets the variables are measured from.
    pub base: BranchFlowState,
    /// Rows of `ineq` holding the gap-contraction cuts, one per edge.
    pub cut_rows: Vec<usize>,
}

impl HostingProgramIndex {
    pub fn pv_var_count(&self) -> usize {
        self.pv.iter().flatten().count()
    }
}

struct Shifted {
    prog: ConeProgram,
    base_of: Vec<f64>,
}

impl Shifted {
    fn var(&mut self, name: String, base: f64, lower: f64, upper: f64) -> usize {
        let k = self.prog.add_var(name, lower - base, upper - base);
        self.base_of.push(base);
        k
    }

    fn shift(&self, terms: &[(usize, f64)]) -> f64 {
        terms.iter().map(|&(k, c)| c * self.base_of[k]).sum()
    }

    /// Σ c·(base + x) = rhs
    fn eq(&mut self, terms: Vec<(usize, f64)>, rhs: f64) {
        let rhs = rhs - self.shift(&terms);
        self.prog.add_eq(terms, rhs);
    }

    fn term(&self, k: usize) -> ConeTerm {
        ConeTerm::shifted(k, self.base_of[k])
    }
}

/// Builds the hosting program around `base`. With a zero base this is the
/// plain relaxed SOCP.
pub(crate) fn build_around(
    model: &FeederModel,
    base: &BranchFlowState,
    objective: Objective,
    prefix: &str,
) -> (ConeProgram, HostingProgramIndex) {
    let ne = model.edge_count();
    let nn = model.node_count();
    let inf = f64::INFINITY;
    let mut b = Shifted {
        prog: ConeProgram::new(),
        base_of: Vec::new(),
    };

    let mut p = Vec::with_capacity(ne);
    let mut q = Vec::with_capacity(ne);
    let mut l = Vec::with_capacity(ne);
    for e in 0..ne {
        let label = model.edge_label(e);
        p.push(b.var(format!("{prefix}P[{label}]"), base.p[e], -inf, inf));
        q.push(b.var(format!("{prefix}Q[{label}]"), base.q[e], -inf, inf));
        let cap = model.i_rated(e) * model.i_rated(e);
        l.push(b.var(format!("{prefix}l[{label}]"), base.l[e], 0.0, cap));
    }
    let v: Vec<usize> = (0..nn)
        .map(|i| {
            let name = format!("{prefix}v[{}]", model.node_id(i));
            if i == model.substation() {
                b.var(name, base.v[i], model.v_sub(), model.v_sub())
            } else {
                b.var(name, base.v[i], model.v_min_sq(), model.v_max_sq())
            }
        })
        .collect();
    let pv: Vec<Option<usize>> = (0..nn)
        .map(|i| {
            model.has_pv(i).then(|| {
                let name = format!("{prefix}pv[{}]", model.node_id(i));
                b.var(name, base.p_pv[i], model.pv_lower(i), model.pv_upper(i))
            })
        })
        .collect();
    let sub_lower = match objective {
        Objective::Hosting => 0.0,
        Objective::Losses => -inf,
    };
    let p_sub = b.prog.add_var("P_sub", sub_lower, inf);
    b.base_of.push(0.0);

    for (e, edge) in model.edges().iter().enumerate() {
        let (i, j) = (edge.from, edge.to);
        let mut real = vec![(p[e], 1.0), (l[e], -model.r(e))];
        let mut reactive = vec![(q[e], 1.0), (l[e], -model.x(e))];
        for &k in model.children(j) {
            real.push((p[k], -1.0));
            reactive.push((q[k], -1.0));
        }
        let mut rhs = model.load_p(j);
        match pv[j] {
            Some(k) => real.push((k, 1.0)),
            None => rhs -= model.pv_lower(j),
        }
        b.eq(real, rhs);
        b.eq(reactive, model.load_q(j));
        b.eq(
            vec![
                (v[j], 1.0),
                (v[i], -1.0),
                (p[e], 2.0 * model.r(e)),
                (q[e], 2.0 * model.x(e)),
                (l[e], -model.z_sq(e)),
            ],
            0.0,
        );
    }

    let s = model.substation();
    let mut export = vec![(p_sub, 1.0)];
    export.extend(model.children(s).iter().map(|&e| (p[e], -1.0)));
    let mut rhs = model.load_p(s);
    match pv[s] {
        Some(k) => export.push((k, 1.0)),
        None => rhs -= model.pv_lower(s),
    }
    b.eq(export, rhs);

    for (e, edge) in model.edges().iter().enumerate() {
        let (u, w) = (b.term(v[edge.from]), b.term(l[e]));
        let z = vec![b.term(p[e]), b.term(q[e])];
        b.prog.add_rsoc(u, w, z);
    }

    // with nothing to host, any current in the cone is optimal; the loss
    // cost picks the exact point
    let has_pv = pv.iter().any(Option::is_some);
    match objective {
        Objective::Hosting if has_pv => {
            for &k in pv.iter().flatten() {
                b.prog.set_cost(k, -1.0);
            }
        }
        _ => {
            // normalized so the largest cost is 1; the argmin is unchanged
            let r_max = (0..ne).map(|e| model.r(e)).fold(0.0, f64::max);
            for e in 0..ne {
                b.prog.set_cost(l[e], model.r(e) / r_max);
            }
        }
    }

    let index = HostingProgramIndex {
        p,
        q,
        l,
        v,
        pv,
        p_sub,
        base: base.clone(),
        cut_rows: Vec::new(),
    };
    (b.prog, index)
}

/// Zero base with fixed injections at nodes that have no PV variable.
fn zero_base(model: &FeederModel) -> BranchFlowState {
    let mut base = BranchFlowState::zeros(model);
    for i in 0..model.node_count() {
        if !model.has_pv(i) {
            base.p_pv[i] = model.pv_lower(i);
        }
    }
    base
}

/// The relaxed hosting SOCP: maximize total PV subject to the branch-flow
/// equations, PV bounds, the voltage window, thermal limits, no reverse flow
/// at the substation, and `v_i·l_ij ≥ P_ij² + Q_ij²` on every edge.
pub fn build_relaxed_hosting(model: &FeederModel) -> (ConeProgram, HostingProgramIndex) {
    build_around(model, &zero_base(model), Objective::Hosting, "")
}

/// Same feasible set without the reverse-flow limit, minimizing losses.
pub fn build_loss_minimization(model: &FeederModel) -> (ConeProgram, HostingProgramIndex) {
    build_around(model, &zero_base(model), Objective::Losses, "")
}

const P_SUB_TOL: f64 = 1e-8;

/// Raw variable values as a state-shaped offset (no base added).
pub fn extract_delta(
    sol: &ConeSolution,
    idx: &HostingProgramIndex,
    model: &FeederModel,
) -> Result<BranchFlowState, RelaxError> {
    if sol.status != SolveStatus::Optimal {
        return Err(RelaxError::NotOptimal(sol.status));
    }
    let x = &sol.x;
    let expected = idx.p_sub + 1;
    if x.len() < expected {
        return Err(RelaxError::Dimension {
            got: x.len(),
            expected,
        });
    }
    let pick = |ks: &[usize]| ks.iter().map(|&k| x[k]).collect::<Vec<_>>();
    Ok(BranchFlowState {
        p: pick(&idx.p),
        q: pick(&idx.q),
        l: pick(&idx.l),
        v: pick(&idx.v),
        p_pv: (0..model.node_count())
            .map(|i| idx.pv[i].map_or(0.0, |k| x[k]))
            .collect(),
        p_sub: x[idx.p_sub],
    })
}

/// Absolute state `base + x`, with `p_sub` recomputed from root edges and
/// checked against the program's substation variable.
pub fn extract_state(
    sol: &ConeSolution,
    idx: &HostingProgramIndex,
    model: &FeederModel,
) -> Result<BranchFlowState, RelaxError> {
    let d = extract_delta(sol, idx, model)?;
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a + b).collect::<Vec<_>>();
    let base = &idx.base;
    let mut s = BranchFlowState {
        p: add(&base.p, &d.p),
        q: add(&base.q, &d.q),
        l: add(&base.l, &d.l),
        v: add(&base.v, &d.v),
        p_pv: add(&base.p_pv, &d.p_pv),
        p_sub: 0.0,
    };
    s.p_sub = substation_export(model, &s.p, &s.p_pv);
    if (s.p_sub - d.p_sub).abs() > P_SUB_TOL {
        return Err(RelaxError::SubstationMismatch {
            recomputed: s.p_sub,
            variable: d.p_sub,
        });
    }
    Ok(s)
}

/// Constraint families reported as binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BindingKind {
    VoltageUpper,
    VoltageLower,
    Thermal,
    ReverseFlow,
    PvCap,
}

impl std::fmt::Display for BindingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BindingKind::VoltageUpper => "voltage-upper",
            BindingKind::VoltageLower => "voltage-lower",
            BindingKind::Thermal => "thermal",
            BindingKind::ReverseFlow => "reverse-flow",
            BindingKind::PvCap => "pv-cap",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub kind: BindingKind,
    /// Node id, edge label, or `substation`.
    pub at: String,
}

/// Constraints of the hosting problem active at `s` within `tol`
/// (per-unit squared voltage, squared current, power).
pub fn binding_constraints(model: &FeederModel, s: &BranchFlowState, tol: f64) -> Vec<Binding> {
    let mut out = Vec::new();
    let sub = model.substation();
    for i in 0..model.node_count() {
        if i == sub {
            continue;
        }
        if s.v[i] >= model.v_max_sq() - tol {
            out.push(Binding {
                kind: BindingKind::VoltageUpper,
                at: model.node_id(i).to_string(),
            });
        }
        if s.v[i] <= model.v_min_sq() + tol {
            out.push(Binding {
                kind: BindingKind::VoltageLower,
                at: model.node_id(i).to_string(),
            });
        }
    }
    for e in 0..model.edge_count() {
        if s.l[e] >= model.i_rated(e) * model.i_rated(e) - tol {
            out.push(Binding {
                kind: BindingKind::Thermal,
                at: model.edge_label(e),
            });
        }
    }
    if s.p_sub <= tol {
        out.push(Binding {
            kind: BindingKind::ReverseFlow,
            at: "substation".to_string(),
        });
    }
    for i in 0..model.node_count() {
        if model.has_pv(i) && s.p_pv[i] >= model.pv_upper(i) - tol {
            out.push(Binding {
                kind: BindingKind::PvCap,
                at: model.node_id(i).to_string(),
            });
        }
    }
    out
}

/// Solved relaxed program.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSolution {
    pub state: BranchFlowState,
    pub objective: f64,
    pub total_pv: f64,
    pub solution: ConeSolution,
}

pub fn solve_relaxed(
    model: &FeederModel,
    objective: Objective,
    opts: &SolveOptions,
) -> Result<RelaxedSolution, RelaxError> {
    let (prog, idx) = match objective {
        Objective::Hosting => build_relaxed_hosting(model),
        Objective::Losses => build_loss_minimization(model),
    };
    let sol = conic::solve(&prog, opts)?;
    let state = extract_state(&sol, &idx, model)?;
    Ok(RelaxedSolution {
        total_pv: state.total_pv(),
        objective: sol.obj,
        state,
        solution: sol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branchflow::{feasibility_gap, flow_residuals};
    use crate::feeder::{bundled_feeder, parse_feeder, FeederBuilder};

    fn two_node() -> FeederModel {
        FeederBuilder::per_unit()
            .substation("sub")
            .node_pu("sub", 0.0, 0.0, 0.0)
            .node_pu("n2", 0.1, 0.05, 0.2)
            .edge_pu("sub", "n2", 0.01, 0.01)
            .build()
            .unwrap()
    }

    #[test]
    fn two_node_counts() {
        let (prog, idx) = build_relaxed_hosting(&two_node());
        // P, Q, l, two voltages, one PV, the substation export
        assert_eq!(prog.n_vars(), 7);
        assert_eq!(idx.pv_var_count(), 1);
        assert_eq!(prog.rsoc.len(), 1);
        assert!(prog.validate().is_ok());
    }

    #[test]
    fn bundled_counts() {
        let m13 = parse_feeder(bundled_feeder("ieee13").unwrap()).unwrap();
        let (prog, idx) = build_relaxed_hosting(&m13);
        assert_eq!(prog.rsoc.len(), 12);
        assert_eq!(idx.pv_var_count(), 13);
        for k in idx.pv.iter().flatten() {
            assert!((prog.upper[*k] - 0.4).abs() < 1e-15);
        }
        let m123 = parse_feeder(bundled_feeder("ieee123").unwrap()).unwrap();
        let (prog, idx) = build_relaxed_hosting(&m123);
        assert_eq!(prog.rsoc.len(), 122);
        for k in idx.pv.iter().flatten() {
            assert!((prog.upper[*k] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_model_extracts_zero_state() {
        // The optimal set is not a single point here (any interior l is
        // optimal), so extraction is checked on the zero solution directly.
        let m = FeederBuilder::per_unit()
            .substation("sub")
            .node_pu("sub", 0.0, 0.0, 0.0)
            .node_pu("n2", 0.0, 0.0, 0.0)
            .edge_pu("sub", "n2", 0.01, 0.01)
            .build()
            .unwrap();
        let (prog, idx) = build_relaxed_hosting(&m);
        let mut x = vec![0.0; prog.n_vars()];
        for &k in &idx.v {
            x[k] = m.v_sub();
        }
        assert!(conic::audit(&prog, &x).max < 1e-15);
        let sol = ConeSolution {
            status: SolveStatus::Optimal,
            x,
            obj: 0.0,
            max_primal_residual: 0.0,
            duality_gap_estimate: 0.0,
            iterations: 0,
        };
        let s = extract_state(&sol, &idx, &m).unwrap();
        assert!(s.p.iter().chain(&s.q).chain(&s.l).chain(&s.p_pv).all(|&x| x == 0.0));
        assert_eq!(s.p_sub, 0.0);
    }

    #[test]
    fn extract_rejects_non_optimal() {
        let m = two_node();
        let (_, idx) = build_relaxed_hosting(&m);
        let sol = ConeSolution {
            status: SolveStatus::Infeasible,
            x: vec![0.0; 7],
            obj: 0.0,
            max_primal_residual: 0.0,
            duality_gap_estimate: 0.0,
            iterations: 0,
        };
        assert_eq!(
            extract_state(&sol, &idx, &m),
            Err(RelaxError::NotOptimal(SolveStatus::Infeasible))
        );
    }

    #[test]
    fn relaxed_two_node_satisfies_flow_equations() {
        let m = two_node();
        let r = solve_relaxed(&m, Objective::Hosting, &SolveOptions::default()).unwrap();
        assert!(flow_residuals(&m, &r.state).unwrap().max_abs() < 1e-7);
        assert!(feasibility_gap(&m, &r.state).e.iter().all(|&e| e <= 1e-7));
        assert!(r.state.p_sub >= -1e-8);
        let binding = binding_constraints(&m, &r.state, 1e-6);
        assert!(binding.iter().any(|b| b.kind == BindingKind::PvCap));
        assert!((r.total_pv - 0.2).abs() < 1e-7);
    }

    #[test]
    fn binding_kinds_display() {
        assert_eq!(BindingKind::VoltageUpper.to_string(), "voltage-upper");
        assert_eq!(BindingKind::PvCap.to_string(), "pv-cap");
    }
}
