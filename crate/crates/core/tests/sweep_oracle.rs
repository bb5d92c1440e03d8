use hostcap_core::branchflow::{
    feasibility_gap, flow_residuals, phasors, power_flow_sweep, recover_angles, state_from_csv, state_to_csv,
};
use hostcap_core::feeder::{FeederBuilder, FeederModel};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: &str = include_str!("golden/two_node_sweep.csv");

fn two_node() -> FeederModel {
    FeederBuilder::per_unit()
        .substation("sub")
        .node_pu("sub", 0.0, 0.0, 0.0)
        .node_pu("n2", 0.1, 0.05, 0.0)
        .edge_pu("sub", "n2", 0.01, 0.01)
        .build()
        .unwrap()
}

/// Random radial feeder: each new node hangs off a uniformly chosen earlier
/// node. Ids are shuffled against the insertion order so that orientation and
/// indexing are exercised too.
fn random_feeder(rng: &mut ChaCha8Rng, with_pv: bool) -> (FeederModel, Vec<f64>) {
    let n = rng.gen_range(2..=30);
    let mut b = FeederBuilder::per_unit().substation("n0");
    let mut pv = Vec::new();
    for i in 0..n {
        let (p, q) = if i == 0 {
            (0.0, 0.0)
        } else {
            (rng.gen_range(0.0..0.03), rng.gen_range(0.0..0.015))
        };
        let cap = if with_pv && i > 0 { rng.gen_range(0.0..0.05) } else { 0.0 };
        pv.push(cap * rng.gen_range(0.0..=1.0));
        b = b.node_pu(&format!("n{i}"), p, q, cap);
    }
    for i in 1..n {
        let parent = rng.gen_range(0..i);
        let (r, x) = (rng.gen_range(0.0005..0.01), rng.gen_range(0.0005..0.01));
        if rng.gen_bool(0.3) {
            b = b.edge_pu(&format!("n{i}"), &format!("n{parent}"), r, x);
        } else {
            b = b.edge_pu(&format!("n{parent}"), &format!("n{i}"), r, x);
        }
    }
    (b.build().unwrap(), pv)
}

#[test]
fn sweep_matches_golden_two_node_state() {
    let m = two_node();
    let s = power_flow_sweep(&m, &[0.0, 0.0]).unwrap();
    let (edges, nodes) = state_from_csv(GOLDEN).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-11 * b.abs().max(1e-3);
    assert!(close(s.p[0], edges[0][0]), "{} vs {}", s.p[0], edges[0][0]);
    assert!(close(s.q[0], edges[0][1]));
    assert!(close(s.l[0], edges[0][2]));
    assert!(close(s.v[0], nodes[0]));
    assert!(close(s.v[1], nodes[1]));
    assert!(flow_residuals(&m, &s).unwrap().max_abs() < 1e-10);
    assert!(feasibility_gap(&m, &s).max_abs().0 < 1e-10);
    // writer output reads back to the frozen values
    let (e2, n2) = state_from_csv(&state_to_csv(&m, &s)).unwrap();
    for (a, b) in e2[0].iter().zip(&edges[0]).chain(n2.iter().zip(&nodes)) {
        assert!(close(*a, *b));
    }
}

#[test]
fn angle_matches_complex_phasor_solve() {
    let m = two_node();
    let s = power_flow_sweep(&m, &[0.0, 0.0]).unwrap();
    let theta = recover_angles(&m, &s).unwrap();

    // V2 = V1 − z·conj(S2 / V2), iterated in complex arithmetic
    let z = Complex64::new(0.01, 0.01);
    let s2 = Complex64::new(0.1, 0.05);
    let v1 = Complex64::new(1.0, 0.0);
    let mut v2 = v1;
    for _ in 0..200 {
        v2 = v1 - z * (s2 / v2).conj();
    }
    assert!((theta[1] - v2.arg()).abs() < 1e-12, "{} vs {}", theta[1], v2.arg());
    assert!((s.v[1] - v2.norm_sqr()).abs() < 1e-12);
    let expected = (Complex64::new(s.v[0], 0.0) - z.conj() * Complex64::new(s.p[0], s.q[0])).arg();
    assert!((theta[1] + expected).abs() < 1e-15);
}

#[test]
fn randomized_radial_feeders() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for case in 0..100 {
        let (m, pv) = random_feeder(&mut rng, case % 2 == 1);
        let s = power_flow_sweep(&m, &pv).unwrap_or_else(|e| panic!("case {case}: {e}"));
        let res = flow_residuals(&m, &s).unwrap().max_abs();
        let gap = feasibility_gap(&m, &s).max_abs().0;
        assert!(res <= 1e-10, "case {case}: residual {res:e}");
        assert!(gap <= 1e-10, "case {case}: gap {gap:e}");
        assert!(s.l.iter().all(|&l| l >= 0.0) && s.v.iter().all(|&v| v > 0.0));

        // phasors rebuilt from the recovered angles reproduce v, l and S
        let theta = recover_angles(&m, &s).unwrap();
        let v = phasors(&s, &theta);
        for (e, edge) in m.edges().iter().enumerate() {
            let z = Complex64::new(m.r(e), m.x(e));
            let i = (v[edge.from] - v[edge.to]) / z;
            let flow = v[edge.from] * i.conj();
            assert!((v[edge.to].norm_sqr() - s.v[edge.to]).abs() < 1e-6);
            assert!((i.norm_sqr() - s.l[e]).abs() < 1e-6, "case {case} edge {e}");
            assert!((flow.re - s.p[e]).abs() < 1e-6 && (flow.im - s.q[e]).abs() < 1e-6);
        }
    }
}

#[test]
fn voltage_drops_along_every_path_without_pv() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let (m, _) = random_feeder(&mut rng, false);
        let s = power_flow_sweep(&m, &vec![0.0; m.node_count()]).unwrap();
        for edge in m.edges() {
            assert!(s.v[edge.to] <= s.v[edge.from] + 1e-15);
        }
    }
}
