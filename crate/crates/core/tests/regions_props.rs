mod common;

use common::nets::{hinge_net, soundness_sweep};
use num_bigint::BigUint;
use patchfeas::archspec::Shape3;
use patchfeas::regions::{
    binom_sum, conv_region_bound, count_regions_exact, fc_region_bound, feasible_region, BigCount,
    BoundMode, FeasibilityQuery, Magnitude,
};
use proptest::prelude::*;

/// Row `n` of Pascal's triangle by repeated addition.
fn pascal_row(n: usize) -> Vec<u128> {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    row
}

fn pascal_sum(n: usize, k: usize) -> u128 {
    pascal_row(n).iter().take(k + 1).sum()
}

proptest! {
    #[test]
    fn binom_sum_matches_pascal(n in 0usize..120, k in 0usize..130) {
        prop_assert_eq!(binom_sum(n as u64, k as u64).into_value(), BigUint::from(pascal_sum(n, k)));
    }

    #[test]
    fn binom_sum_monotone_until_saturation(n in 0u64..200, k in 0u64..200) {
        let here = binom_sum(n, k);
        if k >= 1 {
            prop_assert!(binom_sum(n + 1, k) > here);
        } else {
            prop_assert_eq!(binom_sum(n + 1, k), here.clone());
        }
        if k < n {
            prop_assert!(binom_sum(n, k + 1) > here);
        } else {
            prop_assert_eq!(binom_sum(n, k + 1), here);
        }
    }

    #[test]
    fn digits_agree_with_log10(n in 1u64..3000, k in 0u64..3000) {
        let b = binom_sum(n, k);
        prop_assert_eq!(b.decimal_digits(), b.value().to_string().len() as u64);
        let (floor, frac) = b.log10_parts();
        prop_assert_eq!(floor + 1, b.decimal_digits());
        prop_assert!((0.0..1.0).contains(&frac));
    }

    #[test]
    fn feasible_area_brackets_exact_bound(n in 2u64..600, k in 1u64..600, d in 2u32..40) {
        let bound = binom_sum(n, k);
        let r = feasible_region(&FeasibilityQuery { bound: Magnitude::Exact(bound.clone()), classes: d });
        let d_big = BigUint::from(d);
        let value = bound.value();
        if value <= &d_big {
            prop_assert_eq!(r.max_area, 0);
        } else {
            prop_assert!(&d_big.pow(r.max_area as u32) < value);
            prop_assert!(value <= &d_big.pow(r.max_area as u32 + 1));
        }
        prop_assert_eq!(r.max_side * r.max_side <= r.max_area, true);
        prop_assert!((r.max_side + 1) * (r.max_side + 1) > r.max_area);
    }

    #[test]
    fn log10_view_matches_native(v in 1u64..1_000_000_000_000_000) {
        let b = BigCount::from(v);
        let expected = (v as f64).log10();
        prop_assert!((b.log10() - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn log10_and_exact_routes_agree_away_from_ties(n in 10u64..400, k in 1u64..400, d in 2u32..25) {
        let bound = binom_sum(n, k);
        let exact = feasible_region(&FeasibilityQuery { bound: Magnitude::Exact(bound.clone()), classes: d });
        let approx = feasible_region(&FeasibilityQuery { bound: Magnitude::Log10(bound.log10()), classes: d });
        if !approx.ambiguous {
            prop_assert_eq!(exact.max_area, approx.max_area);
        }
    }
}

#[test]
fn saturation_is_a_power_of_two() {
    for n in 0..=64u64 {
        for k in [n, n + 1, n + 7, 1000] {
            assert_eq!(
                binom_sum(n, k).value(),
                &(BigUint::from(1u8) << n),
                "n={n} k={k}"
            );
        }
    }
}

#[test]
fn exact_count_never_exceeds_the_bound() {
    let sweep = soundness_sweep(200);
    assert_eq!(sweep.checked, 200);
    assert!(sweep.violations.is_empty(), "{:?}", sweep.violations);
    assert!(
        sweep.tight < 200,
        "every network meeting its bound would be suspicious"
    );
}

#[test]
fn single_hidden_layer_bound_is_tight_on_a_line() {
    for n1 in 1..=5 {
        let (spec, params) = hinge_net(n1);
        let count = count_regions_exact(&spec, &params, &[(-2.0, 2.0)], 10_001).unwrap();
        assert_eq!(count, n1 + 1);
        assert_eq!(fc_region_bound(1, n1 as u64), BigCount::from(count as u64));
        assert_eq!(
            conv_region_bound(&spec, spec.input, BoundMode::PerLayerInput).unwrap(),
            BigCount::from(count as u64)
        );
    }
}

#[test]
fn as_printed_versus_per_layer_on_shipped_specs() {
    // The two modes are not ordered in general: a layer whose input volume
    // exceeds the patch volume gets a larger limit under per_layer_input.
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/specs");
    for name in [
        "unet_toy",
        "fcn8",
        "mobilenetv3_large_head",
        "deeplabv3_resnet18",
    ] {
        let text = std::fs::read_to_string(format!("{dir}/{name}.json")).unwrap();
        let spec = patchfeas::archspec::parse_spec(&text).unwrap();
        for side in [2, 20] {
            let patch = Shape3::new(spec.input.c, side, side);
            let a = conv_region_bound(&spec, patch, BoundMode::AsPrinted).unwrap();
            let p = conv_region_bound(&spec, patch, BoundMode::PerLayerInput).unwrap();
            assert!(a.log10() > 0.0 && p.log10() > 0.0);
            if side == 2 {
                assert!(
                    p > a,
                    "{name}: per-layer limits exceed the 12-entry patch volume"
                );
            }
        }
    }
}
