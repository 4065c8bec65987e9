//! Momentum-iterative patch attacks on a trained segmentation model.
//!
//! The patch replaces a rectangle of the image. Each iteration averages the
//! loss gradient over a batch of patch transforms (only the identity when
//! EOT is off), normalizes it by its L1 norm, folds it into a momentum
//! buffer and steps the patch against the sign of that buffer:
//!
//! ```text
//! g <- mu * g + grad / |grad|_1
//! p <- clip_[0,1](p - alpha * sign(g))
//! ```

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    center_patch, largest_inscribed_rect, BinaryMask, GeometryError, RectPlacement,
};
use crate::segnet::dataset::{BACKGROUND, NUM_CLASSES};
use crate::segnet::ops::{avg_pool3_backward, avg_pool3_forward};
use crate::segnet::{argmax_map, softmax_ce_loss, EngineError, Network};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("class {0} does not occur in the label map")]
    ClassAbsent(u8),
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: u8, classes: usize },
    #[error("mask is {found:?} but the image is {expected:?}")]
    MaskShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(
        "patch at ({top},{left}) of size {height}x{width} leaves the {image_h}x{image_w} image"
    )]
    OutOfBounds {
        top: isize,
        left: isize,
        height: usize,
        width: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
}

/// A patch and where it goes.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    pub top: usize,
    pub left: usize,
    /// `[3, height, width]`, values in `[0, 1]`.
    pub pixels: Array3<f32>,
}

impl PatchSpec {
    /// Uniform 0.5 gray patch.
    pub fn gray(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            pixels: Array3::from_elem((3, height, width), 0.5),
        }
    }

    /// Patch holding the image content under its rectangle.
    pub fn from_image(
        image: &Array3<f32>,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Self {
        Self {
            top,
            left,
            pixels: image
                .slice(s![.., top..top + height, left..left + width])
                .to_owned(),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn rect(&self) -> RectPlacement {
        RectPlacement {
            top: self.top,
            left: self.left,
            height: self.height(),
            width: self.width(),
        }
    }
}

/// Desired per-pixel classes and loss weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub classes: Array2<u8>,
    pub roi_weights: Array2<f32>,
    /// Pixels whose desired class differs from the clean labels.
    pub changed: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetKind {
    ClassSwitch { from: u8, to: u8 },
    Erase { class: u8 },
    Custom(Array2<u8>),
}

fn check_class(class: u8) -> Result<(), AttackError> {
    if class as usize >= NUM_CLASSES {
        return Err(AttackError::ClassOutOfRange {
            class,
            classes: NUM_CLASSES,
        });
    }
    Ok(())
}

/// Build the objective for an attack on an image with clean `labels`.
///
/// Loss weights are 1 on every pixel, so pixels outside the relabeled
/// object are asked to keep their label.
pub fn build_target(labels: &Array2<u8>, kind: &TargetKind) -> Result<AttackTarget, AttackError> {
    let classes = match kind {
        TargetKind::ClassSwitch { from, to } => {
            check_class(*from)?;
            check_class(*to)?;
            if !labels.iter().any(|l| l == from) {
                return Err(AttackError::ClassAbsent(*from));
            }
            labels.mapv(|l| if l == *from { *to } else { l })
        }
        TargetKind::Erase { class } => {
            check_class(*class)?;
            if !labels.iter().any(|l| l == class) {
                return Err(AttackError::ClassAbsent(*class));
            }
            labels.mapv(|l| if l == *class { BACKGROUND } else { l })
        }
        TargetKind::Custom(mask) => {
            if mask.dim() != labels.dim() {
                return Err(AttackError::MaskShape {
                    expected: labels.dim(),
                    found: mask.dim(),
                });
            }
            if let Some(&bad) = mask.iter().find(|&&c| c as usize >= NUM_CLASSES) {
                return Err(AttackError::ClassOutOfRange {
                    class: bad,
                    classes: NUM_CLASSES,
                });
            }
            mask.clone()
        }
    };
    let changed = ndarray::Zip::from(&classes)
        .and(labels)
        .map_collect(|a, b| a != b);
    Ok(AttackTarget {
        roi_weights: Array2::ones(labels.dim()),
        classes,
        changed,
    })
}

impl TargetKind {
    /// The class whose pixels the target rewrites, if there is one.
    pub fn source_class(&self) -> Option<u8> {
        match self {
            TargetKind::ClassSwitch { from, .. } => Some(*from),
            TargetKind::Erase { class } => Some(*class),
            TargetKind::Custom(_) => None,
        }
    }
}

/// Top-left corner of an `height x width` patch centred in the largest
/// rectangle inscribed in the pixels of `class`.
pub fn auto_placement(
    labels: &Array2<u8>,
    class: u8,
    height: usize,
    width: usize,
) -> Result<(usize, usize), AttackError> {
    let rect = largest_inscribed_rect(&BinaryMask::from_labels(labels, class))?;
    Ok(center_patch(&rect, height, width)?)
}

/// Per-application perturbation of the patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchTransform {
    pub dy: isize,
    pub dx: isize,
    /// Zoom of the patch content about its centre; the footprint is fixed.
    pub scale: f32,
    pub brightness: f32,
    /// Seed for additive Gaussian noise, if any.
    pub noise_seed: Option<u64>,
    pub noise_sigma: f32,
    /// Render through a 3x3 stride-1 average pool.
    pub smooth: bool,
}

impl PatchTransform {
    pub const IDENTITY: PatchTransform = PatchTransform {
        dy: 0,
        dx: 0,
        scale: 1.0,
        brightness: 1.0,
        noise_seed: None,
        noise_sigma: 0.0,
        smooth: false,
    };

    pub fn smoothed(smooth: bool) -> Self {
        Self {
            smooth,
            ..Self::IDENTITY
        }
    }
}

/// Intermediate values needed to push an image gradient back to the patch.
struct Rendered {
    values: Array3<f32>,
    source: Vec<(usize, usize)>,
    clip_pass: Array3<bool>,
}

fn zoom_source(i: usize, n: usize, scale: f32) -> usize {
    let c = n as f32 / 2.0;
    let src = ((i as f32 + 0.5 - c) / scale + c).floor();
    src.clamp(0.0, (n - 1) as f32) as usize
}

fn render_patch(pixels: &Array3<f32>, t: &PatchTransform) -> Rendered {
    let (c, h, w) = pixels.dim();
    let base = if t.smooth {
        avg_pool3_forward(pixels)
    } else {
        pixels.clone()
    };
    let source: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .map(|(i, j)| (zoom_source(i, h, t.scale), zoom_source(j, w, t.scale)))
        .collect();
    let mut noise_rng = t.noise_seed.map(ChaCha8Rng::seed_from_u64);
    let normal = Normal::new(0.0f32, t.noise_sigma.max(0.0)).unwrap();
    let mut values = Array3::zeros((c, h, w));
    let mut clip_pass = Array3::from_elem((c, h, w), true);
    for ch in 0..c {
        for (k, &(si, sj)) in source.iter().enumerate() {
            let (i, j) = (k / w, k % w);
            let mut v = base[[ch, si, sj]] * t.brightness;
            if let Some(rng) = noise_rng.as_mut() {
                v += normal.sample(rng);
            }
            clip_pass[[ch, i, j]] = (0.0..=1.0).contains(&v);
            values[[ch, i, j]] = v.clamp(0.0, 1.0);
        }
    }
    Rendered {
        values,
        source,
        clip_pass,
    }
}

/// Gradient with respect to the patch parameters, given the gradient with
/// respect to the rendered patch values.
fn render_backward(r: &Rendered, d_values: &Array3<f32>, t: &PatchTransform) -> Array3<f32> {
    let (c, h, w) = d_values.dim();
    let mut d_base = Array3::zeros((c, h, w));
    for ch in 0..c {
        for (k, &(si, sj)) in r.source.iter().enumerate() {
            let (i, j) = (k / w, k % w);
            if r.clip_pass[[ch, i, j]] {
                d_base[[ch, si, sj]] += d_values[[ch, i, j]] * t.brightness;
            }
        }
    }
    if t.smooth {
        avg_pool3_backward(&d_base)
    } else {
        d_base
    }
}

fn placement(
    image: &Array3<f32>,
    patch: &PatchSpec,
    t: &PatchTransform,
) -> Result<(usize, usize), AttackError> {
    let (_, ih, iw) = image.dim();
    let top = patch.top as isize + t.dy;
    let left = patch.left as isize + t.dx;
    if top < 0
        || left < 0
        || top as usize + patch.height() > ih
        || left as usize + patch.width() > iw
    {
        return Err(AttackError::OutOfBounds {
            top,
            left,
            height: patch.height(),
            width: patch.width(),
            image_h: ih,
            image_w: iw,
        });
    }
    Ok((top as usize, left as usize))
}

/// Copy of `image` with the (transformed) patch pasted in. Every pixel
/// outside the pasted rectangle is bit-identical to `image`.
pub fn apply_patch(
    image: &Array3<f32>,
    patch: &PatchSpec,
    t: &PatchTransform,
) -> Result<Array3<f32>, AttackError> {
    let (top, left) = placement(image, patch, t)?;
    let rendered = render_patch(&patch.pixels, t);
    let mut out = image.clone();
    out.slice_mut(s![
        ..,
        top..top + patch.height(),
        left..left + patch.width()
    ])
    .assign(&rendered.values);
    Ok(out)
}

/// The patch as it appears in the image under `t` (without jitter).
pub fn rendered_patch(patch: &PatchSpec, t: &PatchTransform) -> PatchSpec {
    PatchSpec {
        top: patch.top,
        left: patch.left,
        pixels: render_patch(&patch.pixels, t).values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step: f32,
    pub momentum: f32,
    pub eot: bool,
    pub max_jitter: usize,
    pub noise_sigma: f32,
    pub smooth: bool,
    pub seed: u64,
    /// Transforms averaged per iteration when `eot` is on.
    pub eot_batch: usize,
    /// Worker threads for the transform batch; results do not depend on it.
    pub workers: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            step: 0.01,
            momentum: 0.9,
            eot: false,
            max_jitter: 2,
            noise_sigma: 0.02,
            smooth: false,
            seed: 0,
            eot_batch: 8,
            workers: 1,
        }
    }
}

impl AttackConfig {
    fn validate(&self) -> Result<(), AttackError> {
        if self.step.is_nan() || self.step <= 0.0 {
            return Err(AttackError::InvalidConfig(
                "step size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(AttackError::InvalidConfig(
                "momentum must lie in [0, 1)".into(),
            ));
        }
        if self.eot && self.eot_batch == 0 {
            return Err(AttackError::InvalidConfig(
                "EOT batch must be nonempty".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Best patch parameters found.
    pub patch: PatchSpec,
    /// `patch` as rendered into the image (after optional smoothing).
    pub rendered: PatchSpec,
    /// Loss of the iterate before each update, plus the final iterate.
    pub trace: Vec<f64>,
    pub best_loss: f64,
    pub best_iteration: usize,
}

fn sample_transforms(
    cfg: &AttackConfig,
    rng: &mut ChaCha8Rng,
    image: &Array3<f32>,
    patch: &PatchSpec,
) -> Vec<PatchTransform> {
    if !cfg.eot {
        return vec![PatchTransform::smoothed(cfg.smooth)];
    }
    let (_, ih, iw) = image.dim();
    let j = cfg.max_jitter as isize;
    // Jitter range clipped so every placement stays inside the image.
    let dy_lo = (-j).max(-(patch.top as isize));
    let dy_hi = j.min((ih - patch.height() - patch.top) as isize);
    let dx_lo = (-j).max(-(patch.left as isize));
    let dx_hi = j.min((iw - patch.width() - patch.left) as isize);
    (0..cfg.eot_batch)
        .map(|_| PatchTransform {
            dy: rng.gen_range(dy_lo..=dy_hi),
            dx: rng.gen_range(dx_lo..=dx_hi),
            scale: rng.gen_range(0.9..=1.1),
            brightness: rng.gen_range(0.9..=1.1),
            noise_seed: Some(rng.gen()),
            noise_sigma: cfg.noise_sigma,
            smooth: cfg.smooth,
        })
        .collect()
}

/// Loss and patch gradient for one transform.
fn transform_gradient(
    net: &Network<f32>,
    image: &Array3<f32>,
    target: &AttackTarget,
    patch: &PatchSpec,
    t: &PatchTransform,
) -> Result<(f64, Array3<f32>), AttackError> {
    let (top, left) = placement(image, patch, t)?;
    let (h, w) = (patch.height(), patch.width());
    let rendered = render_patch(&patch.pixels, t);
    let mut x = image.clone();
    x.slice_mut(s![.., top..top + h, left..left + w])
        .assign(&rendered.values);
    let mut pass = net.forward(&x.insert_axis(Axis(0)))?;
    let (loss, dlogits) = softmax_ce_loss(
        pass.output().data(),
        target.classes.view().insert_axis(Axis(0)),
        Some(target.roi_weights.view().insert_axis(Axis(0))),
    )?;
    net.backward(&mut pass, &dlogits, false)?;
    let d_img = pass.input.grad().index_axis(Axis(0), 0);
    let d_values = d_img.slice(s![.., top..top + h, left..left + w]).to_owned();
    Ok((loss as f64, render_backward(&rendered, &d_values, t)))
}

fn batch_gradient(
    net: &Network<f32>,
    image: &Array3<f32>,
    target: &AttackTarget,
    patch: &PatchSpec,
    transforms: &[PatchTransform],
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Array3<f32>), AttackError> {
    let results: Vec<_> = match pool {
        Some(pool) => pool.install(|| {
            transforms
                .par_iter()
                .map(|t| transform_gradient(net, image, target, patch, t))
                .collect()
        }),
        None => transforms
            .iter()
            .map(|t| transform_gradient(net, image, target, patch, t))
            .collect(),
    };
    let mut loss = 0.0;
    let mut grad = Array3::zeros(patch.pixels.raw_dim());
    for r in results {
        let (l, g) = r?;
        loss += l;
        grad += &g;
    }
    let n = transforms.len() as f32;
    Ok((loss / n as f64, grad / n))
}

/// Optimize `patch0` so the model's output on the patched image approaches
/// `target`. Returns the lowest-loss patch seen.
pub fn momentum_patch_attack(
    net: &Network<f32>,
    image: &Array3<f32>,
    target: &AttackTarget,
    patch0: &PatchSpec,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let (_, ih, iw) = image.dim();
    if target.classes.dim() != (ih, iw) || target.roi_weights.dim() != (ih, iw) {
        return Err(AttackError::MaskShape {
            expected: (ih, iw),
            found: target.classes.dim(),
        });
    }
    placement(image, patch0, &PatchTransform::IDENTITY)?;
    let pool = (cfg.workers > 1).then(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .expect("thread pool")
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut patch = patch0.clone();
    let mut velocity = Array3::<f32>::zeros(patch.pixels.raw_dim());
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, 0usize, patch.clone());

    for it in 0..=cfg.iterations {
        let transforms = sample_transforms(cfg, &mut rng, image, &patch);
        let (loss, grad) = batch_gradient(net, image, target, &patch, &transforms, pool.as_ref())?;
        if !loss.is_finite() {
            return Err(AttackError::NonFinite { iteration: it });
        }
        trace.push(loss);
        if loss < best.0 {
            best = (loss, it, patch.clone());
        }
        if it == cfg.iterations {
            break;
        }
        let l1: f32 = grad.iter().map(|g| g.abs()).sum();
        let scale = if l1 > 0.0 { 1.0 / l1 } else { 0.0 };
        velocity.zip_mut_with(&grad, |v, &g| *v = cfg.momentum * *v + g * scale);
        patch.pixels.zip_mut_with(&velocity, |p, &v| {
            let step = if v > 0.0 {
                cfg.step
            } else if v < 0.0 {
                -cfg.step
            } else {
                0.0
            };
            *p = (*p - step).clamp(0.0, 1.0);
        });
    }
    let (best_loss, best_iteration, patch) = best;
    let rendered = rendered_patch(&patch, &PatchTransform::smoothed(cfg.smooth));
    Ok(AttackOutcome {
        patch,
        rendered,
        trace,
        best_loss,
        best_iteration,
    })
}

/// Argmax maps with and without the patch, and how they differ.
#[derive(Debug, Clone)]
pub struct EffectMetrics {
    pub clean_argmax: Array2<u8>,
    pub attacked_argmax: Array2<u8>,
    pub changed_mask: BinaryMask,
    pub changed_pixels: usize,
    /// Weighted fraction of ROI pixels whose attacked class matches the target.
    pub agreement: f64,
    /// Fraction of relabeled target pixels that reached their target class.
    pub object_agreement: f64,
}

/// Compare the model's output on `image` with its output once `patch` is
/// pasted in as-is. `patch` must hold rendered pixel values.
pub fn measure_effect(
    net: &Network<f32>,
    image: &Array3<f32>,
    patch: &PatchSpec,
    target: &AttackTarget,
) -> Result<EffectMetrics, AttackError> {
    let patched = apply_patch(image, patch, &PatchTransform::IDENTITY)?;
    let argmax = |x: Array3<f32>| -> Result<Array2<u8>, AttackError> {
        let logits: Array4<f32> = net.logits(&x.insert_axis(Axis(0)))?;
        Ok(argmax_map(&logits).index_axis_move(Axis(0), 0))
    };
    let clean = argmax(image.clone())?;
    let attacked = argmax(patched)?;
    let diff = ndarray::Zip::from(&clean)
        .and(&attacked)
        .map_collect(|a, b| a != b);
    let changed_mask = BinaryMask::from_array(&diff);
    let (mut hit_w, mut total_w) = (0.0f64, 0.0f64);
    let (mut obj_hits, mut obj_total) = (0usize, 0usize);
    for ((idx, &want), &got) in target.classes.indexed_iter().zip(attacked.iter()) {
        let w = target.roi_weights[idx] as f64;
        total_w += w;
        if want == got {
            hit_w += w;
        }
        if target.changed[idx] {
            obj_total += 1;
            obj_hits += usize::from(want == got);
        }
    }
    Ok(EffectMetrics {
        changed_pixels: changed_mask.count(),
        clean_argmax: clean,
        attacked_argmax: attacked,
        changed_mask,
        agreement: if total_w > 0.0 { hit_w / total_w } else { 1.0 },
        object_agreement: if obj_total > 0 {
            obj_hits as f64 / obj_total as f64
        } else {
            1.0
        },
    })
}
