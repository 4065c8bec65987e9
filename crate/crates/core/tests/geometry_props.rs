mod common;

use common::geometry::{brute_force, random_mask};
use patchfeas::geometry::{
    center_patch, largest_inscribed_rect, largest_inscribed_rect_counted, BinaryMask, RectPlacement,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut agree = 0;
    for _ in 0..100 {
        let m = random_mask(&mut rng);
        let fast = largest_inscribed_rect(&m).ok();
        assert_eq!(fast, brute_force(&m), "mask {m:?}");
        agree += 1;
    }
    assert_eq!(agree, 100);
}

#[test]
fn operation_count_is_linear() {
    for n in [8usize, 16, 32, 64, 128] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let m = BinaryMask::from_fn(n, n, |_, _| rng.gen_bool(0.7));
        let (_, ops) = largest_inscribed_rect_counted(&m);
        // Each column index is pushed and popped at most once per row.
        assert!(ops <= 2 * n * n, "{n}x{n}: {ops} ops");
    }
}

proptest! {
    #[test]
    fn result_is_inscribed_and_maximal(bits in prop::collection::vec(any::<bool>(), 1..=64), w in 1usize..=8) {
        let h = bits.len().div_ceil(w);
        let m = BinaryMask::from_fn(h, w, |y, x| bits.get(y * w + x).copied().unwrap_or(false));
        match largest_inscribed_rect(&m) {
            Ok(r) => {
                prop_assert!(r.is_inscribed_in(&m));
                prop_assert_eq!(Some(r.area()), brute_force(&m).map(|b| b.area()));
            }
            Err(_) => prop_assert_eq!(m.count(), 0),
        }
    }

    #[test]
    fn centred_patch_stays_inside(top in 0usize..20, left in 0usize..20, h in 1usize..20, w in 1usize..20, ph in 1usize..20, pw in 1usize..20) {
        let rect = RectPlacement { top, left, height: h, width: w };
        match center_patch(&rect, ph, pw) {
            Ok((t, l)) => {
                prop_assert!(t >= top && t + ph <= top + h);
                prop_assert!(l >= left && l + pw <= left + w);
                let (above, below) = (t - top, top + h - t - ph);
                prop_assert!(below == above || below == above + 1);
            }
            Err(_) => prop_assert!(ph > h || pw > w),
        }
    }
}
