use ndarray::{Array1, Array4};
use patchfeas::archspec::{propagate_shapes, LayerSpec, NetworkSpec, Shape3};
use patchfeas::regions::{
    conv_region_bound, count_regions_exact, generic_params, BigCount, BoundMode,
};
use patchfeas::segnet::{LayerParams, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn dense_net(dims: &[usize]) -> NetworkSpec {
    let mut layers = Vec::new();
    for w in dims.windows(2) {
        layers.push(LayerSpec::fully_connected(w[0], w[1]));
        layers.push(LayerSpec::relu());
    }
    layers.push(LayerSpec::fully_connected(*dims.last().unwrap(), 1));
    let n = NetworkSpec::new("dense", Shape3::new(dims[0], 1, 1), layers).unwrap();
    propagate_shapes(&n, n.input).unwrap()
}

/// `n1` hinges `relu(x - t_j)` at distinct points inside the domain.
pub fn hinge_net(n1: usize) -> (NetworkSpec, ModelParams<f64>) {
    let spec = dense_net(&[1, n1]);
    let hinges = Array1::from_shape_fn(n1, |j| -(-1.5 + 3.0 * (j as f64 + 0.5) / n1 as f64));
    let params = ModelParams {
        layers: vec![
            Some(LayerParams {
                weight: Array4::ones((n1, 1, 1, 1)),
                bias: hinges,
            }),
            None,
            Some(LayerParams {
                weight: Array4::ones((1, n1, 1, 1)),
                bias: Array1::zeros(1),
            }),
        ],
    };
    (spec, params)
}

pub struct Sweep {
    pub checked: usize,
    /// Networks whose sampled region count exceeded the bound.
    pub violations: Vec<String>,
    /// Networks whose count met the bound exactly.
    pub tight: usize,
}

/// Count regions of `n` seeded random dense networks (input dim <= 2, <= 3
/// ReLU layers of <= 8 units) and compare with the per-layer-input bound.
pub fn soundness_sweep(n: u64) -> Sweep {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut sweep = Sweep {
        checked: 0,
        violations: Vec::new(),
        tight: 0,
    };
    for seed in 0..n {
        let input = rng.gen_range(1..=2usize);
        let depth = rng.gen_range(1..=3usize);
        let mut dims = vec![input];
        dims.extend((0..depth).map(|_| rng.gen_range(1..=8usize)));
        let spec = dense_net(&dims);
        let params = generic_params(&spec, seed).unwrap();
        let resolution = if input == 1 { 4001 } else { 161 };
        let domain = vec![(-3.0, 3.0); input];
        let count = BigCount::from(
            count_regions_exact(&spec, &params, &domain, resolution).unwrap() as u64,
        );
        let bound = conv_region_bound(&spec, spec.input, BoundMode::PerLayerInput).unwrap();
        if count > bound {
            sweep.violations.push(format!(
                "seed {seed}, dims {dims:?}: counted {count} > bound {bound}"
            ));
        }
        sweep.tight += usize::from(count == bound);
        sweep.checked += 1;
    }
    sweep
}
