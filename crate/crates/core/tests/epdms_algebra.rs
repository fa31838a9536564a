mod support;

use deskdrive_core::config::EpdmsWeights;
use deskdrive_core::oracle::{aggregate_epdms, MetricVector};
use proptest::prelude::*;
use support::{criteria, epdms_ref};

#[test]
fn exhaustive_grid() {
    let out = criteria::a2_epdms_algebra();
    println!("{}", out.detail);
    assert!(out.pass, "{}", out.detail);
}

#[test]
fn worked_example() {
    let agent = MetricVector {
        ep: 0.5,
        lk: 0.0,
        ..MetricVector::all_pass()
    };
    let v = aggregate_epdms(&agent, &MetricVector::all_pass(), &EpdmsWeights::default());
    assert!((v - 0.6786).abs() < 1e-4);
}

#[test]
fn extended_comfort_joins_the_average_when_enabled() {
    let w = EpdmsWeights {
        enable_ec: true,
        ..Default::default()
    };
    let agent = MetricVector {
        ec: Some(0.0),
        ..MetricVector::all_pass()
    };
    let v = aggregate_epdms(&agent, &MetricVector::all_pass(), &w);
    assert!((v - 14.0 / 16.0).abs() < 1e-12);
    let off = aggregate_epdms(&agent, &MetricVector::all_pass(), &EpdmsWeights::default());
    assert_eq!(off, 1.0);
}

proptest! {
    #[test]
    fn continuous_ep_is_linear(ep in 0.0..=1.0f64, pick in 0..1440usize) {
        let grid = epdms_ref::agent_grid();
        let a = MetricVector { ep, ..grid[pick] };
        let h = MetricVector::all_pass();
        let v = aggregate_epdms(&a, &h, &EpdmsWeights::default());
        prop_assert!((v - epdms_ref::reference_epdms(&a, &h)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&v));
    }
}
