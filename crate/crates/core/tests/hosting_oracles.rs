use hostcap_core::branchflow::{brute_force_hosting, lindistflow_init, power_flow_sweep, LimitReport};
use hostcap_core::feeder::{bundled_feeder, parse_feeder, FeederBuilder, FeederModel};
use hostcap_core::iteration::{run, IterationConfig};
use hostcap_core::relax::{binding_constraints, solve_relaxed, BindingKind, Objective};

/// Capacity of [`voltage_limited_two_node`] from the closed-form 2-bus
/// solution at v₂ = 1.05² (computed at 40 digits).
const TWO_NODE_CAPACITY: f64 = 0.18039210989726043;

/// Substation-bus load keeps the export positive, so the upper voltage limit
/// at n2 is what binds.
fn voltage_limited_two_node() -> FeederModel {
    FeederBuilder::per_unit()
        .substation("sub")
        .node_pu("sub", 0.5, 0.0, 0.0)
        .node_pu("n2", 0.05, 0.02, 0.5)
        .edge_pu("sub", "n2", 0.5, 0.5)
        .build()
        .unwrap()
}

fn three_node() -> FeederModel {
    FeederBuilder::per_unit()
        .substation("sub")
        .node_pu("sub", 1.0, 0.0, 0.0)
        .node_pu("a", 0.05, 0.01, 0.6)
        .node_pu("b", 0.02, 0.01, 1.5)
        .edge_pu("sub", "a", 0.03, 0.04)
        .edge_pu("a", "b", 0.03, 0.04)
        .build()
        .unwrap()
}

fn admissible(m: &FeederModel, p_pv: &[f64]) -> bool {
    match power_flow_sweep(m, p_pv) {
        Ok(s) => LimitReport::new(m, &s).within(m, 0.0, 0.0),
        Err(_) => false,
    }
}

/// Direct nonlinear solve for the 3-node fixture: for a split `s` of the
/// total between `a` and `b`, bisection on the total against the exact
/// power flow; the split is then searched on a grid and refined by golden
/// section.
fn nonlinear_three_node(m: &FeederModel) -> f64 {
    let (ia, ib) = (m.node_index("a").unwrap(), m.node_index("b").unwrap());
    let (cap_a, cap_b) = (m.pv_upper(ia), m.pv_upper(ib));
    let max_total = |s: f64| -> f64 {
        let inj = |t: f64| {
            let mut p = vec![0.0; m.node_count()];
            p[ia] = s * t;
            p[ib] = (1.0 - s) * t;
            p
        };
        let hi_cap = if s > 0.0 { cap_a / s } else { f64::INFINITY }.min(if s < 1.0 {
            cap_b / (1.0 - s)
        } else {
            f64::INFINITY
        });
        if admissible(m, &inj(hi_cap)) {
            return hi_cap;
        }
        let (mut lo, mut hi) = (0.0, hi_cap);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if admissible(m, &inj(mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    let grid: Vec<(f64, f64)> = (0..=200).map(|k| k as f64 / 200.0).map(|s| (s, max_total(s))).collect();
    let (best_s, _) = grid.iter().copied().fold((0.0, f64::NEG_INFINITY), |b, g| if g.1 > b.1 { g } else { b });
    let (mut a, mut b) = ((best_s - 0.005).max(0.0), (best_s + 0.005).min(1.0));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if max_total(c) > max_total(d) {
            b = d;
        } else {
            a = c;
        }
    }
    grid.iter().map(|g| g.1).fold(max_total(0.5 * (a + b)), f64::max)
}

#[test]
fn lindistflow_two_node_lossless_balance() {
    let m = FeederBuilder::per_unit()
        .substation("sub")
        .node_pu("sub", 0.0, 0.0, 0.0)
        .node_pu("n2", 0.05, 0.0, 0.1)
        .edge_pu("sub", "n2", 0.01, 0.01)
        .build()
        .unwrap();
    let s = lindistflow_init(&m).unwrap();
    assert!((s.p_pv[1] - 0.05).abs() < 1e-6);
}

#[test]
fn brute_force_two_node_matches_closed_form() {
    let m = voltage_limited_two_node();
    let step = 1e-3;
    let bf = brute_force_hosting(&m, step).unwrap();
    assert!(bf.capacity <= TWO_NODE_CAPACITY + 1e-12);
    assert!(TWO_NODE_CAPACITY - bf.capacity <= step, "{}", bf.capacity);
}

#[test]
fn iteration_two_node_matches_brute_force_and_closed_form() {
    let m = voltage_limited_two_node();
    let cfg = IterationConfig {
        epsilon: 1e-5,
        ..Default::default()
    };
    let r = run(&m, &cfg).unwrap();
    assert!(r.converged);
    assert!(r.audit.as_ref().unwrap().passed);
    assert!((r.total_pv_pu - TWO_NODE_CAPACITY).abs() <= 1e-4, "{}", r.total_pv_pu);

    let bf = brute_force_hosting(&m, 1e-3).unwrap();
    assert!((r.total_pv_pu - bf.capacity).abs() <= 1e-3);
    assert!(r.binding.iter().any(|b| b.kind == BindingKind::VoltageUpper));
}

#[test]
fn three_node_agrees_with_oracles() {
    let m = three_node();
    let step = 1e-3;
    let bf = brute_force_hosting(&m, step).unwrap();
    let nl = nonlinear_three_node(&m);
    let r = run(&m, &IterationConfig::default()).unwrap();
    assert!(r.converged);
    assert!(r.audit.as_ref().unwrap().passed);

    assert!((r.total_pv_pu - bf.capacity).abs() <= step.max(1e-3), "iter {} brute {}", r.total_pv_pu, bf.capacity);
    assert!((r.total_pv_pu - nl).abs() <= 1e-3 * nl, "iter {} nonlinear {nl}", r.total_pv_pu);

    // relaxation bounds everything from above
    let relaxed = solve_relaxed(&m, Objective::Hosting, &Default::default()).unwrap();
    assert!(relaxed.total_pv >= r.total_pv_pu - 1e-7);
    assert!(r.total_pv_pu >= bf.capacity - step);
}

#[test]
fn relaxation_exact_for_losses_inexact_for_hosting() {
    for m in [voltage_limited_two_node(), three_node()] {
        let opts = Default::default();
        let host = solve_relaxed(&m, Objective::Hosting, &opts).unwrap();
        // the relaxation burns fictitious losses inside the cone to host more
        let binding = binding_constraints(&m, &host.state, 1e-6);
        assert!(binding.iter().any(|b| b.kind == BindingKind::PvCap), "{binding:?}");
        let gap = hostcap_core::branchflow::feasibility_gap(&m, &host.state);
        assert!(gap.min() < -1e-4);

        let loss = solve_relaxed(&m, Objective::Losses, &opts).unwrap();
        let gap = hostcap_core::branchflow::feasibility_gap(&m, &loss.state);
        assert!(gap.max_abs().0 <= 1e-6);
    }
}

#[test]
fn bundled_two_bus_is_the_voltage_limited_fixture() {
    let file = parse_feeder(bundled_feeder("two_bus").unwrap()).unwrap();
    let m = voltage_limited_two_node();
    for i in 0..2 {
        let j = file.node_index(m.node_id(i)).unwrap();
        assert_eq!(file.load_p(j), m.load_p(i));
        assert_eq!(file.load_q(j), m.load_q(i));
        assert_eq!(file.pv_upper(j), m.pv_upper(i));
    }
    assert_eq!((file.r(0), file.x(0)), (m.r(0), m.x(0)));

    let zero = parse_feeder(bundled_feeder("two_bus_zero_load").unwrap()).unwrap();
    let r = run(&zero, &IterationConfig::default()).unwrap();
    assert_eq!(r.total_pv_pu, 0.0);
    assert_eq!(r.trace.len(), 1);
}
