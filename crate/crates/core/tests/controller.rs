// SPDX-License-Identifier: Apache-2.0

mod common;

use pdsim::controller::{maybe_select, select_frequency, slo_budget, ControllerConfig};
use pdsim::types::{FrequencyLadder, FrequencyMHz, InstanceSnapshot, PhaseKind, SloProfile};
use pdsim::Calibration;
use proptest::prelude::*;

use common::brute_force_select;

fn f(m: u32) -> FrequencyMHz {
    FrequencyMHz::new(m).unwrap()
}

fn cfg(phase: PhaseKind, ttft: f64, itl: f64) -> ControllerConfig {
    ControllerConfig::new(
        FrequencyLadder::five_level(),
        SloProfile::new(ttft, itl).unwrap(),
        phase,
    )
}

fn snapshot() -> impl Strategy<Value = InstanceSnapshot> {
    let prefill = (0usize..3, 0.0f64..900.0, 0u64..9000).prop_map(|(q, wait, n_bt)| {
        InstanceSnapshot::prefill(0, q, wait, n_bt.div_ceil(300), n_bt, f(1410))
    });
    let decode = (0usize..3, 0u64..1100, 1u64..1500)
        .prop_map(|(q, n, kv_per)| InstanceSnapshot::decode(0, q, n, n * kv_per, f(1005)));
    prop_oneof![prefill, decode]
}

#[test]
fn prefill_budget_subtracts_wait() {
    let c = cfg(PhaseKind::Prefill, 600.0, 60.0);
    let s = InstanceSnapshot::prefill(0, 0, 150.0, 1, 100, f(1005));
    assert_eq!(slo_budget(&c, &s).unwrap(), 450.0);
    let s = InstanceSnapshot::prefill(0, 0, 700.0, 1, 100, f(1005));
    assert_eq!(slo_budget(&c, &s).unwrap(), 0.0);
    assert_eq!(
        select_frequency(&c, &s, &Calibration::default()).unwrap(),
        f(1410)
    );
}

#[test]
fn decode_budget_ignores_wait() {
    let c = cfg(PhaseKind::Decode, 600.0, 60.0);
    let mut s = InstanceSnapshot::decode(0, 0, 4, 400, f(1005));
    s.max_wait_ms = 1e6;
    assert_eq!(slo_budget(&c, &s).unwrap(), 60.0);
}

#[test]
fn phase_mismatch_is_a_contract_error() {
    let c = cfg(PhaseKind::Decode, 600.0, 60.0);
    let s = InstanceSnapshot::prefill(0, 0, 0.0, 1, 100, f(1005));
    assert!(matches!(slo_budget(&c, &s), Err(pdsim::Error::Contract(_))));
}

#[test]
fn uncovered_level_is_a_coverage_error() {
    let ladder = FrequencyLadder::from_mhz(&[1005, 1111]).unwrap();
    let c = ControllerConfig::new(ladder, SloProfile::MEDIUM, PhaseKind::Decode);
    let s = InstanceSnapshot::decode(0, 0, 230, 230 * 3000, f(1005));
    assert!(matches!(
        select_frequency(&c, &s, &Calibration::default()),
        Err(pdsim::Error::Coverage(x)) if x == f(1111)
    ));
}

#[test]
fn decode_budget_between_levels() {
    // tile 1 with heavy KV misses 60 ms at 1005 but fits higher up
    let cal = Calibration::default();
    let c = cfg(PhaseKind::Decode, 600.0, 60.0);
    let s = InstanceSnapshot::decode(0, 0, 230, 230 * 300, f(1005));
    let at = |m| cal.predict_itl(f(m), 230, 230 * 300).unwrap();
    assert!(at(1005) > 60.0);
    let expect = [1095, 1200, 1305, 1410]
        .into_iter()
        .find(|&m| at(m) <= 60.0)
        .unwrap();
    assert_eq!(select_frequency(&c, &s, &cal).unwrap(), f(expect));
}

#[test]
fn window_gating() {
    let cal = Calibration::default();
    let mut c = cfg(PhaseKind::Decode, 600.0, 60.0);
    let s = InstanceSnapshot::decode(0, 0, 4, 400, f(1005));
    assert!(maybe_select(&c, 10.0, Some(9.0), &s, &cal)
        .unwrap()
        .is_some());
    c.control_interval_ms = 5000.0;
    assert!(maybe_select(&c, 1200.0, Some(0.0), &s, &cal)
        .unwrap()
        .is_none());
    assert!(maybe_select(&c, 5000.0, Some(0.0), &s, &cal)
        .unwrap()
        .is_some());
    assert!(maybe_select(&c, 0.0, None, &s, &cal).unwrap().is_some());
}

#[test]
fn selection_is_fast() {
    let cal = Calibration::default();
    let c = cfg(PhaseKind::Decode, 600.0, 60.0);
    let s = InstanceSnapshot::decode(0, 0, 900, 900 * 700, f(1005));
    let start = std::time::Instant::now();
    for _ in 0..1000 {
        std::hint::black_box(select_frequency(&c, std::hint::black_box(&s), &cal).unwrap());
    }
    assert!(start.elapsed().as_secs_f64() / 1000.0 < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn matches_brute_force(snap in snapshot(), ttft in 50.0f64..2000.0, itl in 10.0f64..150.0) {
        let cal = Calibration::default();
        let c = cfg(snap.phase, ttft, itl);
        prop_assert_eq!(select_frequency(&c, &snap, &cal).unwrap(), brute_force_select(&c, &snap, &cal));
    }

    #[test]
    fn backlog_forces_max(mut snap in snapshot(), q in 1usize..50) {
        let cal = Calibration::default();
        snap.queue_len = q;
        let c = cfg(snap.phase, 600.0, 60.0);
        prop_assert_eq!(select_frequency(&c, &snap, &cal).unwrap(), f(1410));
    }

    #[test]
    fn relaxing_slo_never_raises_frequency(snap in snapshot(), ttft in 50.0f64..2000.0, itl in 10.0f64..150.0, k in 1.0f64..3.0) {
        let cal = Calibration::default();
        let tight = select_frequency(&cfg(snap.phase, ttft, itl), &snap, &cal).unwrap();
        let loose = select_frequency(&cfg(snap.phase, ttft * k, itl * k), &snap, &cal).unwrap();
        prop_assert!(loose <= tight);
    }
}
