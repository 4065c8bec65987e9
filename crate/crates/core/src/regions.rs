//! Linear-region upper bounds and the feasible arbitrary-output area.
//!
//! A ReLU network with `n0` inputs and one hidden layer of `n1` units has at
//! most `sum_{i<=n0} C(n1, i)` linear regions. Stacking convolutional layers
//! multiplies per-layer factors of the same form, with the layer's output
//! volume in place of `n1`. If a patch can only reach `R` regions, it can
//! realize at most `R` distinct argmax maps, so an output window of `WH`
//! pixels over `D` classes can only be fully controlled while `D^WH < R`.

use std::collections::HashSet;
use std::fmt;

use ndarray::Array4;
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archspec::{propagate_shapes, LayerKind, NetworkSpec, Shape3, SpecError};
use crate::segnet::{EngineError, ModelParams, Network};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("network exceeds region-counting limits: {0}")]
    LimitExceeded(String),
}

/// Exact nonnegative integer with a floating log10 view.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BigCount(BigUint);

impl BigCount {
    pub fn new(value: BigUint) -> Self {
        Self(value)
    }

    pub fn one() -> Self {
        Self(BigUint::one())
    }

    pub fn value(&self) -> &BigUint {
        &self.0
    }

    pub fn into_value(self) -> BigUint {
        self.0
    }

    /// `log10` of the value; `-inf` for zero.
    pub fn log10(&self) -> f64 {
        log10_biguint(&self.0)
    }

    /// Integer and fractional parts of [`Self::log10`], with the integer
    /// part corrected against the exact digit count.
    pub fn log10_parts(&self) -> (u64, f64) {
        let digits = self.decimal_digits();
        let l = self.log10();
        let floor = digits.saturating_sub(1);
        let frac = (l - floor as f64).clamp(0.0, 1.0 - f64::EPSILON);
        (floor, frac)
    }

    /// Number of decimal digits; zero has one digit.
    pub fn decimal_digits(&self) -> u64 {
        if self.0.is_zero() {
            return 1;
        }
        let estimate = self.log10().floor() as u64;
        // The float estimate can be off by one right at powers of ten.
        let pow = BigUint::from(10u32).pow(estimate as u32);
        if self.0 < pow {
            estimate
        } else if self.0 >= &pow * 10u32 {
            estimate + 2
        } else {
            estimate + 1
        }
    }

    pub fn to_u64(&self) -> Option<u64> {
        self.0.to_u64()
    }
}

impl fmt::Debug for BigCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.bits() <= 128 {
            write!(f, "BigCount({})", self.0)
        } else {
            write!(f, "BigCount(~10^{:.3})", self.log10())
        }
    }
}

impl fmt::Display for BigCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u64> for BigCount {
    fn from(v: u64) -> Self {
        Self(BigUint::from(v))
    }
}

impl std::ops::Mul for &BigCount {
    type Output = BigCount;
    fn mul(self, rhs: &BigCount) -> BigCount {
        BigCount(&self.0 * &rhs.0)
    }
}

fn log10_biguint(v: &BigUint) -> f64 {
    if v.is_zero() {
        return f64::NEG_INFINITY;
    }
    let bits = v.bits();
    if bits <= 64 {
        return (v.to_u64().unwrap() as f64).log10();
    }
    let shift = bits - 64;
    let top = (v >> shift).to_u64().unwrap() as f64;
    top.log10() + shift as f64 * std::f64::consts::LOG10_2
}

/// `sum_{i=0}^{min(k,n)} C(n, i)`, exact.
pub fn binom_sum(n: u64, k: u64) -> BigCount {
    let upper = k.min(n);
    let mut term = BigUint::one();
    let mut total = BigUint::one();
    for i in 1..=upper {
        // C(n,i) = C(n,i-1) * (n-i+1) / i; the division is exact.
        term *= n - i + 1;
        term /= i;
        total += &term;
    }
    BigCount(total)
}

/// Region bound of one fully connected ReLU layer with `n0` inputs and `n1` units.
pub fn fc_region_bound(n0: u64, n1: u64) -> BigCount {
    binom_sum(n1, n0)
}

/// Per-layer factor `sum_{i<=in_vol} C(out_vol, i)`.
pub fn layer_multiplier(in_shape: Shape3, out_shape: Shape3) -> BigCount {
    binom_sum(out_shape.volume() as u64, in_shape.volume() as u64)
}

/// Which sum limit the convolutional product uses at each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    /// The limit is the patch input volume at every layer.
    #[default]
    AsPrinted,
    /// The limit is the volume of the input to the layer itself.
    PerLayerInput,
}

impl BoundMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundMode::AsPrinted => "as_printed",
            BoundMode::PerLayerInput => "per_layer_input",
        }
    }
}

impl std::str::FromStr for BoundMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "as_printed" => Ok(BoundMode::AsPrinted),
            "per_layer_input" => Ok(BoundMode::PerLayerInput),
            other => Err(format!("unknown bound mode `{other}`")),
        }
    }
}

/// Contribution of one nonlinearity to the product bound.
#[derive(Debug, Clone)]
pub struct LayerFactor {
    /// Index of the layer producing the pre-activations.
    pub layer_index: usize,
    /// Sum limit.
    pub in_vol: u64,
    /// Number of units entering the ReLU.
    pub out_vol: u64,
    pub factor: BigCount,
}

/// Per-layer factors of the convolutional bound, in layer order.
///
/// Shapes are propagated from `patch_input`. Every ReLU layer contributes
/// one factor built from the volume of its input; layers without a
/// following ReLU contribute nothing.
pub fn conv_region_factors(
    net: &NetworkSpec,
    patch_input: Shape3,
    mode: BoundMode,
) -> Result<Vec<LayerFactor>, RegionError> {
    let shaped = propagate_shapes(net, patch_input)?;
    let base = patch_input.volume() as u64;
    let mut factors = Vec::new();
    for (r, layer) in shaped.layers.iter().enumerate() {
        if layer.kind != LayerKind::Relu {
            continue;
        }
        let relu_in = shaped.layer_input_shape(r);
        let producer = if r > 0 && shaped.layers[r - 1].kind.is_affine() {
            r - 1
        } else {
            r
        };
        let limit = match mode {
            BoundMode::AsPrinted => base,
            BoundMode::PerLayerInput => shaped.layer_input_shape(producer).volume() as u64,
        };
        let out_vol = relu_in.volume() as u64;
        factors.push(LayerFactor {
            layer_index: producer,
            in_vol: limit,
            out_vol,
            factor: binom_sum(out_vol, limit),
        });
    }
    Ok(factors)
}

/// Product of [`conv_region_factors`], multiplied in layer order.
pub fn conv_region_bound(
    net: &NetworkSpec,
    patch_input: Shape3,
    mode: BoundMode,
) -> Result<BigCount, RegionError> {
    Ok(conv_region_factors(net, patch_input, mode)?
        .iter()
        .fold(BigCount::one(), |acc, f| &acc * &f.factor))
}

/// A region-count bound known exactly or only by magnitude.
#[derive(Debug, Clone)]
pub enum Magnitude {
    Exact(BigCount),
    Log10(f64),
}

impl Magnitude {
    pub fn log10(&self) -> f64 {
        match self {
            Magnitude::Exact(b) => b.log10(),
            Magnitude::Log10(l) => *l,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeasibilityQuery {
    pub bound: Magnitude,
    pub classes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    /// Largest `WH` with `D^WH` strictly below the bound.
    pub max_area: u64,
    /// `floor(sqrt(max_area))`.
    pub max_side: u64,
    /// Set when only a magnitude was given and `log10(bound)/log10(D)` is
    /// within rounding of an integer, so `max_area` may be off by one.
    pub ambiguous: bool,
}

impl FeasibilityResult {
    fn from_area(max_area: u64, ambiguous: bool) -> Self {
        Self {
            max_area,
            max_side: max_area.isqrt(),
            ambiguous,
        }
    }
}

/// Reference magnitudes (log10 of the region bound) per architecture and
/// square patch side, for 19 classes.
pub const REFERENCE_LOG10: [(&str, [(usize, f64); 4]); 4] = [
    (
        "unet",
        [(2, 219.0), (5, 1448.0), (10, 5034.0), (20, 16842.0)],
    ),
    (
        "fcn8",
        [(2, 168.0), (5, 1203.0), (10, 4646.0), (20, 17864.0)],
    ),
    (
        "mobilenetv3_large",
        [(2, 229.0), (5, 1239.0), (10, 3446.0), (20, 9343.0)],
    ),
    (
        "deeplabv3_resnet18",
        [(2, 584.0), (5, 3421.0), (10, 12725.0), (20, 48151.0)],
    ),
];

/// Largest output area whose every class map could be realized.
///
/// # Panics
/// If `classes < 2`.
pub fn feasible_region(q: &FeasibilityQuery) -> FeasibilityResult {
    assert!(q.classes >= 2, "need at least two classes");
    let log_d = (q.classes as f64).log10();
    match &q.bound {
        Magnitude::Exact(bound) => {
            let d = BigUint::from(q.classes);
            let bound = bound.value();
            if *bound <= d {
                return FeasibilityResult::from_area(0, false);
            }
            let mut wh = (log10_biguint(bound) / log_d).floor().max(0.0) as u64;
            while wh > 0 && d.pow(wh as u32) >= *bound {
                wh -= 1;
            }
            while d.pow(wh as u32 + 1) < *bound {
                wh += 1;
            }
            FeasibilityResult::from_area(wh, false)
        }
        Magnitude::Log10(l) => {
            let ratio = l / log_d;
            if ratio <= 1.0 {
                let ambiguous = (ratio - 1.0).abs() <= 1e-9;
                return FeasibilityResult::from_area(0, ambiguous);
            }
            let ambiguous = (ratio - ratio.round()).abs() <= 1e-9 * ratio.abs().max(1.0);
            FeasibilityResult::from_area(ratio.ceil() as u64 - 1, ambiguous)
        }
    }
}

/// Closed box of network inputs, one `(lo, hi)` per input dimension.
pub type InputBox = [(f64, f64)];

pub const MAX_COUNT_INPUT_DIM: usize = 2;
pub const MAX_COUNT_RELU_LAYERS: usize = 3;
pub const MAX_COUNT_UNITS: usize = 8;

struct AffineMap {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

enum Step {
    Affine(AffineMap),
    Relu,
}

/// Seeded parameters with nonzero biases, so hinges are in general position
/// with probability one. Weights follow the engine's initialization; biases
/// are uniform in `[-1, 1)`.
pub fn generic_params(net: &NetworkSpec, seed: u64) -> Result<ModelParams<f64>, RegionError> {
    let shaped = propagate_shapes(net, net.input)?;
    let mut params = ModelParams::<f64>::init(&shaped, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    for p in params.layers.iter_mut().flatten() {
        p.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
    }
    Ok(params)
}

/// Number of distinct ReLU sign patterns over a dense grid on `domain`.
///
/// This is a lower bound on the number of linear regions inside the box and
/// converges to it as `resolution` grows for generic weights. The network
/// input must have at most two entries; at most three ReLU layers of at
/// most eight units each are supported.
pub fn count_regions_exact(
    net: &NetworkSpec,
    params: &ModelParams<f64>,
    domain: &InputBox,
    resolution: usize,
) -> Result<usize, RegionError> {
    let dim = net.input.volume();
    if dim > MAX_COUNT_INPUT_DIM || dim != domain.len() {
        return Err(RegionError::LimitExceeded(format!(
            "input dimension {dim} with a {}-dimensional domain (at most {MAX_COUNT_INPUT_DIM})",
            domain.len()
        )));
    }
    if net.relu_count() > MAX_COUNT_RELU_LAYERS {
        return Err(RegionError::LimitExceeded(format!(
            "{} relu layers (at most {MAX_COUNT_RELU_LAYERS})",
            net.relu_count()
        )));
    }
    if resolution < 2 {
        return Err(RegionError::LimitExceeded(
            "resolution must be at least 2".into(),
        ));
    }
    let shaped = propagate_shapes(net, net.input)?;
    if shaped.layers.iter().any(|l| l.concat.is_some()) {
        return Err(RegionError::LimitExceeded(
            "concat layers are not supported".into(),
        ));
    }
    for (i, layer) in shaped.layers.iter().enumerate() {
        if layer.kind == LayerKind::Relu && shaped.layer_input_shape(i).volume() > MAX_COUNT_UNITS {
            return Err(RegionError::LimitExceeded(format!(
                "layer {i} has {} units (at most {MAX_COUNT_UNITS})",
                shaped.layer_input_shape(i).volume()
            )));
        }
    }
    let engine = Network::new(shaped.clone(), params.clone())?;

    // Each affine layer is probed once with basis vectors to get a dense map.
    let mut steps = Vec::new();
    for (i, layer) in shaped.layers.iter().enumerate() {
        if layer.kind == LayerKind::Relu {
            steps.push(Step::Relu);
            continue;
        }
        let input = shaped.layer_input_shape(i);
        let cols = input.volume();
        let probe = |x: Array4<f64>| -> Result<Vec<f64>, RegionError> {
            Ok(engine.layer_forward(i, &x)?.iter().copied().collect())
        };
        let zero = Array4::zeros((1, input.c, input.h, input.w));
        let bias = probe(zero.clone())?;
        let rows = bias.len();
        let mut weights = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut e = zero.clone();
            e.as_slice_mut().unwrap()[j] = 1.0;
            for (r, v) in probe(e)?.into_iter().enumerate() {
                weights[r * cols + j] = v - bias[r];
            }
        }
        steps.push(Step::Affine(AffineMap {
            rows,
            cols,
            weights,
            bias,
        }));
    }

    let axis = |(lo, hi): (f64, f64), t: usize| lo + (hi - lo) * t as f64 / (resolution - 1) as f64;
    let mut patterns: HashSet<u32> = HashSet::new();
    let mut eval = |point: &[f64]| {
        let mut x = point.to_vec();
        let mut key = 0u32;
        let mut bit = 0;
        for step in &steps {
            match step {
                Step::Affine(m) => {
                    x = (0..m.rows)
                        .map(|r| {
                            m.bias[r]
                                + (0..m.cols)
                                    .map(|c| m.weights[r * m.cols + c] * x[c])
                                    .sum::<f64>()
                        })
                        .collect();
                }
                Step::Relu => {
                    for v in x.iter_mut() {
                        if *v > 0.0 {
                            key |= 1 << bit;
                        } else {
                            *v = 0.0;
                        }
                        bit += 1;
                    }
                }
            }
        }
        patterns.insert(key);
    };
    match dim {
        1 => {
            for t in 0..resolution {
                eval(&[axis(domain[0], t)]);
            }
        }
        _ => {
            for a in 0..resolution {
                for b in 0..resolution {
                    eval(&[axis(domain[0], a), axis(domain[1], b)]);
                }
            }
        }
    }
    Ok(patterns.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(q: u64, classes: u32) -> FeasibilityResult {
        feasible_region(&FeasibilityQuery {
            bound: Magnitude::Exact(BigCount::from(q)),
            classes,
        })
    }

    #[test]
    fn binom_sum_values() {
        assert_eq!(binom_sum(3, 3), BigCount::from(8));
        assert_eq!(binom_sum(3, 1), BigCount::from(4));
        assert_eq!(binom_sum(8, 4), BigCount::from(163));
        assert_eq!(binom_sum(0, 5), BigCount::from(1));
        assert_eq!(binom_sum(10, 0), BigCount::from(1));
    }

    #[test]
    fn fc_bound_values() {
        assert_eq!(fc_region_bound(2, 3), BigCount::from(7));
        assert_eq!(fc_region_bound(5, 3), BigCount::from(8));
        assert_eq!(fc_region_bound(1, 3), BigCount::from(4));
    }

    #[test]
    fn layer_multiplier_values() {
        assert_eq!(
            layer_multiplier(Shape3::new(1, 2, 2), Shape3::new(2, 2, 2)),
            BigCount::from(163)
        );
        assert_eq!(
            layer_multiplier(Shape3::new(1, 1, 1), Shape3::new(1, 1, 1)),
            BigCount::from(2)
        );
    }

    fn conv_relu_net(layers: usize) -> NetworkSpec {
        let mut list = vec![
            crate::archspec::LayerSpec::conv(1, 2, 3),
            crate::archspec::LayerSpec::relu(),
        ];
        for _ in 1..layers {
            list.push(crate::archspec::LayerSpec::conv(2, 2, 3));
            list.push(crate::archspec::LayerSpec::relu());
        }
        NetworkSpec::new("c", Shape3::new(1, 2, 2), list).unwrap()
    }

    #[test]
    fn conv_bound_examples() {
        let one = conv_relu_net(1);
        for mode in [BoundMode::AsPrinted, BoundMode::PerLayerInput] {
            assert_eq!(
                conv_region_bound(&one, Shape3::new(1, 2, 2), mode).unwrap(),
                BigCount::from(163)
            );
        }
        let two = NetworkSpec::new(
            "two",
            Shape3::new(1, 2, 2),
            vec![
                crate::archspec::LayerSpec::conv(1, 2, 3),
                crate::archspec::LayerSpec::relu(),
                crate::archspec::LayerSpec::conv(2, 2, 3),
                crate::archspec::LayerSpec::relu(),
            ],
        )
        .unwrap();
        assert_eq!(
            conv_region_bound(&two, Shape3::new(1, 2, 2), BoundMode::AsPrinted).unwrap(),
            BigCount::from(26569)
        );
        let linear = NetworkSpec::new(
            "lin",
            Shape3::new(1, 2, 2),
            vec![
                crate::archspec::LayerSpec::conv(1, 2, 3),
                crate::archspec::LayerSpec::conv(2, 2, 3),
            ],
        )
        .unwrap();
        assert_eq!(
            conv_region_bound(&linear, Shape3::new(1, 2, 2), BoundMode::AsPrinted).unwrap(),
            BigCount::one()
        );
    }

    #[test]
    fn feasibility_from_magnitudes() {
        let log = |l: f64, classes| {
            feasible_region(&FeasibilityQuery {
                bound: Magnitude::Log10(l),
                classes,
            })
        };
        let r = log(219.0, 19);
        assert_eq!((r.max_area, r.max_side), (171, 13));
        let r = log(584.0, 19);
        assert_eq!((r.max_area, r.max_side), (456, 21));
        let r = log(1500.0, 10);
        assert_eq!((r.max_area, r.max_side), (1499, 38));
        assert!(r.ambiguous);
    }

    #[test]
    fn feasibility_strict_inequality() {
        assert_eq!(exact(19, 19).max_area, 0);
        assert_eq!(exact(20, 19).max_area, 1);
        assert_eq!(exact(361, 19).max_area, 1);
        assert_eq!(exact(362, 19).max_area, 2);
        assert_eq!(exact(3, 4).max_area, 0);
        assert_eq!(exact(1, 4).max_area, 0);
    }

    #[test]
    fn digit_count_at_powers_of_ten() {
        for p in 0..60u32 {
            let v = BigCount::new(BigUint::from(10u32).pow(p));
            assert_eq!(v.decimal_digits(), p as u64 + 1);
            let below = BigCount::new(BigUint::from(10u32).pow(p) - 1u32);
            if p > 0 {
                assert_eq!(below.decimal_digits(), p as u64);
            }
        }
    }

    #[test]
    fn log10_matches_native_floats() {
        for v in [
            1u64,
            2,
            7,
            163,
            26569,
            999_999_999_999_999,
            1_000_000_000_000_000,
        ] {
            let l = BigCount::from(v).log10();
            let native = (v as f64).log10();
            assert!((l - native).abs() <= 1e-9 * native.abs().max(1.0), "{v}");
        }
    }
}
