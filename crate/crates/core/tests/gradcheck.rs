mod common;

use common::gradcheck_case;
use desklm::model::Variant;

fn check(variant: Variant, cache: bool) {
    let results = gradcheck_case(variant, cache, 7);
    assert!(!results.is_empty());
    // only the key bias may have an identically vanishing gradient
    for r in results.iter().filter(|r| r.analytic_norm < common::ZERO_GRAD) {
        assert!(r.name.ends_with("attn.k.bias"), "{}: zero gradient", r.name);
    }
    for r in &results {
        assert!(r.relative_error <= 1e-3, "{}: relative error {}", r.name, r.relative_error);
    }
}

#[test]
fn baseline_without_cache() {
    check(Variant::Baseline, false);
}

#[test]
fn baseline_with_cache() {
    check(Variant::Baseline, true);
}

#[test]
fn infused_without_cache() {
    check(Variant::Pia, false);
}

#[test]
fn infused_with_cache() {
    check(Variant::Pia, true);
}
