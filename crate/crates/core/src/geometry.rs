//! Largest inscribed rectangle of a binary mask and centred patch placement.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("mask has no true pixels")]
    EmptyMask,
    #[error("patch {patch_h}x{patch_w} does not fit in a {rect_h}x{rect_w} rectangle")]
    PatchTooLarge {
        patch_h: usize,
        patch_w: usize,
        rect_h: usize,
        rect_w: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    /// # Panics
    /// If a dimension is zero or `bits` has the wrong length.
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert!(height >= 1 && width >= 1, "mask dims must be positive");
        assert_eq!(bits.len(), height * width, "mask size");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height)
            .flat_map(|y| (0..width).map(move |x| (y, x)))
            .map(|(y, x)| f(y, x))
            .collect();
        Self::new(height, width, bits)
    }

    /// Pixels of `class` in a class-index map.
    pub fn from_labels(labels: &Array2<u8>, class: u8) -> Self {
        let (h, w) = labels.dim();
        Self::from_fn(h, w, |y, x| labels[[y, x]] == class)
    }

    pub fn from_array(a: &Array2<bool>) -> Self {
        let (h, w) = a.dim();
        Self::from_fn(h, w, |y, x| a[[y, x]])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_array(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| self.get(y, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RectPlacement {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl RectPlacement {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    /// True if every covered pixel is set in `mask`.
    pub fn is_inscribed_in(&self, mask: &BinaryMask) -> bool {
        self.top + self.height <= mask.height()
            && self.left + self.width <= mask.width()
            && (self.top..self.top + self.height)
                .all(|y| (self.left..self.left + self.width).all(|x| mask.get(y, x)))
    }

    /// Orders candidates: larger area, then smaller top, smaller left,
    /// larger height.
    fn beats(&self, other: &RectPlacement) -> bool {
        (
            self.area(),
            std::cmp::Reverse(self.top),
            std::cmp::Reverse(self.left),
            self.height,
        ) > (
            other.area(),
            std::cmp::Reverse(other.top),
            std::cmp::Reverse(other.left),
            other.height,
        )
    }
}

/// Maximum-area all-true axis-aligned rectangle, plus the number of stack
/// pushes and pops performed (linear in the mask size).
///
/// Each row is treated as the floor of a histogram of upward runs of true
/// pixels; a monotonic stack yields every maximal rectangle resting on that
/// row. Ties are broken by smallest top, then smallest left, then largest
/// height.
pub fn largest_inscribed_rect_counted(mask: &BinaryMask) -> (Option<RectPlacement>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut heights = vec![0usize; w];
    let mut stack: Vec<usize> = Vec::with_capacity(w + 1);
    let mut best: Option<RectPlacement> = None;
    let mut ops = 0usize;
    for row in 0..h {
        for (x, hx) in heights.iter_mut().enumerate() {
            *hx = if mask.get(row, x) { *hx + 1 } else { 0 };
        }
        stack.clear();
        for x in 0..=w {
            let cur = if x < w { heights[x] } else { 0 };
            while let Some(&t) = stack.last() {
                if heights[t] <= cur {
                    break;
                }
                stack.pop();
                ops += 1;
                let height = heights[t];
                let left = stack.last().map_or(0, |&s| s + 1);
                let cand = RectPlacement {
                    top: row + 1 - height,
                    left,
                    height,
                    width: x - left,
                };
                if best.as_ref().is_none_or(|b| cand.beats(b)) {
                    best = Some(cand);
                }
            }
            if x < w {
                stack.push(x);
                ops += 1;
            }
        }
    }
    (best, ops)
}

pub fn largest_inscribed_rect(mask: &BinaryMask) -> Result<RectPlacement, GeometryError> {
    largest_inscribed_rect_counted(mask)
        .0
        .ok_or(GeometryError::EmptyMask)
}

/// Top-left corner that centres a `patch_h x patch_w` patch in `rect`; when
/// the margins differ by parity the extra pixel goes to the bottom/right.
pub fn center_patch(
    rect: &RectPlacement,
    patch_h: usize,
    patch_w: usize,
) -> Result<(usize, usize), GeometryError> {
    if patch_h > rect.height || patch_w > rect.width {
        return Err(GeometryError::PatchTooLarge {
            patch_h,
            patch_w,
            rect_h: rect.height,
            rect_w: rect.width,
        });
    }
    Ok((
        rect.top + (rect.height - patch_h) / 2,
        rect.left + (rect.width - patch_w) / 2,
    ))
}
