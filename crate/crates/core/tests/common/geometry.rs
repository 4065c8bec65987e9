use patchfeas::geometry::{BinaryMask, RectPlacement};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every all-true rectangle, best by (area, -top, -left, height).
pub fn brute_force(mask: &BinaryMask) -> Option<RectPlacement> {
    let (h, w) = (mask.height(), mask.width());
    let mut best: Option<RectPlacement> = None;
    for top in 0..h {
        for left in 0..w {
            for height in 1..=h - top {
                for width in 1..=w - left {
                    let r = RectPlacement {
                        top,
                        left,
                        height,
                        width,
                    };
                    if !r.is_inscribed_in(mask) {
                        continue;
                    }
                    let key = |r: &RectPlacement| {
                        (
                            r.area(),
                            std::cmp::Reverse(r.top),
                            std::cmp::Reverse(r.left),
                            r.height,
                        )
                    };
                    if best.as_ref().is_none_or(|b| key(&r) > key(b)) {
                        best = Some(r);
                    }
                }
            }
        }
    }
    best
}

pub fn random_mask(rng: &mut ChaCha8Rng) -> BinaryMask {
    let h = rng.gen_range(1..=12);
    let w = rng.gen_range(1..=12);
    let density: f64 = rng.gen_range(0.2..0.95);
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}
