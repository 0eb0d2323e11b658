mod support;

use std::collections::BTreeMap;

use support::grad::{gradient_suite, TOLERANCE};

#[test]
fn every_op_matches_finite_differences() {
    let results = gradient_suite(7);
    assert!(results.len() >= 100, "only {} cases", results.len());
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &results {
        let w = worst.entry(r.op).or_insert(0.0);
        *w = w.max(r.rel_err);
    }
    for (op, err) in &worst {
        println!("{op:<22} {err:.3e}");
    }
    let failing: Vec<_> = worst.iter().filter(|(_, &e)| !(e < TOLERANCE)).collect();
    assert!(failing.is_empty(), "ops over tolerance: {failing:?}");
}
