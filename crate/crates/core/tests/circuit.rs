use std::collections::HashMap;

use falconbc::circuit::{
    build_network, simulate, summarize, BranchConfig, RcrBoundary, SimSettings, Simulator, StenosisLocation, TopologyConfig,
};
use falconbc::desk;
use falconbc::inflow::FourierInflow;
use proptest::prelude::*;

fn rcr_only(bc: RcrBoundary) -> TopologyConfig {
    TopologyConfig {
        branches: vec![BranchConfig {
            name: "out".into(),
            parent: None,
            segments: vec![],
            outlet: Some(bc),
            side: None,
        }],
        stations: HashMap::new(),
        stenoses: vec![],
        inflow: "q".into(),
    }
}

fn pulsatile(mean: f64) -> FourierInflow {
    let mut q = FourierInflow::constant(1.0, mean);
    q.a[0] = 0.5 * mean;
    q.b[0] = 0.3 * mean;
    q.a[2] = -0.1 * mean;
    q
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // A periodic capacitor carries no net current, so the cycle-mean inlet
    // pressure is the cycle-mean flow times Rp + Rd, plus the reference.
    #[test]
    fn mean_pressure_is_resistive(rp in 50.0..400.0f64, rd in 500.0..3000.0f64, tau in 0.05..0.6f64, p_ref in 0.0..2000.0f64) {
        let bc = RcrBoundary { rp, rd, c: tau / rd, p_ref };
        let net = build_network(&rcr_only(bc)).unwrap();
        let q = pulsatile(10.0);
        let tr = simulate(&net, &q, &SimSettings { n_cycles: 40, ..SimSettings::default() }).unwrap();
        let want = 10.0 * (rp + rd) + p_ref;
        let got = mean(&tr.p_in);
        prop_assert!((got - want).abs() / want < 2e-3, "{got} vs {want}");
    }
}

#[test]
fn outflow_balances_inflow_over_a_cycle() {
    let net = build_network(&desk::topology(Some((StenosisLocation::E, 0.6)))).unwrap();
    let q = desk::nominal_inflow();
    let tr = simulate(&net, &q, &SimSettings::default()).unwrap();
    let total: f64 = tr.mean_outflows().iter().sum();
    let want = q.cycle_volume() / q.period;
    assert!((total - want).abs() / want < 1e-3, "{total} vs {want}");
}

#[test]
fn resistive_limit_tracks_inflow() {
    // with a tiny capacitance the outlet is a pure resistor
    let bc = RcrBoundary {
        rp: 100.0,
        rd: 900.0,
        c: 1e-8,
        p_ref: 0.0,
    };
    let net = build_network(&rcr_only(bc)).unwrap();
    let q = pulsatile(10.0);
    let sim = Simulator::new(&net).unwrap();
    let dt = 0.5 * sim.max_stable_dt().min(1e-3);
    let tr = simulate(&net, &q, &SimSettings { dt, ..SimSettings::default() }).unwrap();
    for (t, p) in tr.t.iter().zip(&tr.p_in) {
        let want = 1000.0 * q.eval(*t);
        assert!((p - want).abs() < 1e-2 * 1000.0 * 10.0, "t={t}: {p} vs {want}");
    }
}

#[test]
fn distal_pressure_decays_with_rd_c() {
    let bc = RcrBoundary {
        rp: 100.0,
        rd: 1000.0,
        c: 2e-4,
        p_ref: 300.0,
    };
    let tau = bc.time_constant();
    let net = build_network(&rcr_only(bc)).unwrap();
    let sim = Simulator::new(&net).unwrap();
    let mut y = sim.steady_state(10.0);
    let start = 10.0 * bc.rd;
    let mut worst: f64 = 0.0;
    sim.integrate(&mut y, 0.0, 1e-3, 600, |_| (0.0, 0.0), |s| {
        let want = bc.p_ref + start * (-s.t / tau).exp();
        worst = worst.max((s.outlet_cap[0] - want).abs() / start);
    })
    .unwrap();
    assert!(worst < 1e-8, "{worst}");
}

#[test]
fn halving_dt_changes_little() {
    let net = build_network(&desk::topology(Some((StenosisLocation::B, 0.5)))).unwrap();
    let q = desk::nominal_inflow();
    let a = summarize(&simulate(&net, &q, &SimSettings::default()).unwrap()).unwrap();
    let b = summarize(&simulate(&net, &q, &SimSettings { dt: 5e-4, ..SimSettings::default() }).unwrap()).unwrap();
    assert!((a.p_sys - b.p_sys).abs() < 0.05, "{} {}", a.p_sys, b.p_sys);
    assert!((a.p_dia - b.p_dia).abs() < 0.05, "{} {}", a.p_dia, b.p_dia);
    assert!((a.flow_split_left - b.flow_split_left).abs() < 0.05);
}

#[test]
fn worse_left_lesion_moves_flow_right() {
    let q = desk::nominal_inflow();
    let mut last_split = f64::INFINITY;
    let mut last_sys = 0.0;
    for sev in [0.0, 0.3, 0.5, 0.7, 0.85] {
        let net = build_network(&desk::topology(Some((StenosisLocation::B, sev)))).unwrap();
        let s = summarize(&simulate(&net, &q, &SimSettings::default()).unwrap()).unwrap();
        assert!(s.flow_split_left < last_split, "severity {sev}: {} after {last_split}", s.flow_split_left);
        assert!(s.p_sys >= last_sys - 1e-9);
        last_split = s.flow_split_left;
        last_sys = s.p_sys;
    }
}

#[test]
fn nominal_desk_case_is_physiological() {
    let net = build_network(&desk::topology(None)).unwrap();
    let s = summarize(&simulate(&net, &desk::nominal_inflow(), &SimSettings::default()).unwrap()).unwrap();
    assert!((60.0..100.0).contains(&s.p_dia) && (100.0..150.0).contains(&s.p_sys), "{s:?}");
    assert!((s.flow_split_left - 42.0).abs() < 3.0);
}
