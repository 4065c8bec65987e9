//! Central finite-difference checks of every differentiable op, in f64.

use ndarray::{Array1, Array3, Array4, Dimension};
use patchfeas::archspec::{propagate_shapes, LayerSpec, NetworkSpec, Shape3};
use patchfeas::segnet::ops::{
    avg_pool3_backward, avg_pool3_forward, conv2d_backward, conv2d_forward,
    conv_transpose_backward, conv_transpose_forward, fc_backward, fc_forward, relu_backward,
    relu_forward,
};
use patchfeas::segnet::{softmax_ce_loss, ModelParams, Network};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-3;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 6;

pub fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-7)
}

/// Max relative error between `analytic` and the central difference of `f`
/// with respect to every entry of `x`.
fn check<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    analytic: &ndarray::Array<f64, D>,
    f: impl Fn(&ndarray::Array<f64, D>) -> f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut worst: f64 = 0.0;
    let mut probe = x.as_standard_layout().into_owned();
    for (k, a) in analytic.iter().enumerate() {
        let orig = probe.as_slice().unwrap()[k];
        probe.as_slice_mut().unwrap()[k] = orig + EPS;
        let up = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig - EPS;
        let down = f(&probe);
        probe.as_slice_mut().unwrap()[k] = orig;
        worst = worst.max(rel_err(*a, (up - down) / (2.0 * EPS)));
    }
    worst
}

pub fn dot4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    (a * b).sum()
}

pub fn conv_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let stride = [1, 2][seed as usize % 2];
            let k = [3, 2, 1][seed as usize % 3];
            let (ci, co, h, w) = (2, 3, 5, 4 + seed as usize % 2);
            let x = rand4(&mut rng, (2, ci, h, w));
            let wt = rand4(&mut rng, (co, ci, k, k));
            let b = Array1::from_shape_simple_fn(co, || rng.gen_range(-1.0..1.0));
            let y = conv2d_forward(&x, &wt, &b, stride);
            let r = rand4(&mut rng, y.dim());
            let g = conv2d_backward(&x, &wt, &r, stride, true);
            let (dw, db) = g.params.unwrap();
            let ex = check(&x, &g.dx, |x| dot4(&conv2d_forward(x, &wt, &b, stride), &r));
            let ew = check(&wt, &dw, |wt| dot4(&conv2d_forward(&x, wt, &b, stride), &r));
            let eb = check(&b, &db, |b| dot4(&conv2d_forward(&x, &wt, b, stride), &r));
            ex.max(ew).max(eb)
        })
        .collect()
}

pub fn conv_transpose_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let stride = [2, 1, 3][seed as usize % 3];
            let k = [3, 4, 2][seed as usize % 3];
            let (ci, co, h, w) = (3, 2, 3, 2 + seed as usize % 2);
            let x = rand4(&mut rng, (2, ci, h, w));
            let wt = rand4(&mut rng, (ci, co, k, k));
            let b = Array1::from_shape_simple_fn(co, || rng.gen_range(-1.0..1.0));
            let y = conv_transpose_forward(&x, &wt, &b, stride);
            assert_eq!(y.dim(), (2, co, h * stride, w * stride));
            let r = rand4(&mut rng, y.dim());
            let g = conv_transpose_backward(&x, &wt, &r, stride, true);
            let (dw, db) = g.params.unwrap();
            let ex = check(&x, &g.dx, |x| {
                dot4(&conv_transpose_forward(x, &wt, &b, stride), &r)
            });
            let ew = check(&wt, &dw, |wt| {
                dot4(&conv_transpose_forward(&x, wt, &b, stride), &r)
            });
            let eb = check(&b, &db, |b| {
                dot4(&conv_transpose_forward(&x, &wt, b, stride), &r)
            });
            ex.max(ew).max(eb)
        })
        .collect()
}

pub fn relu_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            // Keep every entry well away from the kink.
            let x =
                rand4(&mut rng, (1, 2, 3, 4)).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
            let r = rand4(&mut rng, x.dim());
            let dx = relu_backward(&x, &r);
            check(&x, &dx, |x| dot4(&relu_forward(x), &r))
        })
        .collect()
}

pub fn fully_connected_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let (c, h, w, out) = (2, 2, 1 + seed as usize % 3, 3);
            let x = rand4(&mut rng, (2, c, h, w));
            let wt = rand4(&mut rng, (out, c * h * w, 1, 1));
            let b = Array1::from_shape_simple_fn(out, || rng.gen_range(-1.0..1.0));
            let r = rand4(&mut rng, (2, out, 1, 1));
            let g = fc_backward(&x, &wt, &r, true);
            let (dw, db) = g.params.unwrap();
            let ex = check(&x, &g.dx, |x| dot4(&fc_forward(x, &wt, &b), &r));
            let ew = check(&wt, &dw, |wt| dot4(&fc_forward(&x, wt, &b), &r));
            let eb = check(&b, &db, |b| dot4(&fc_forward(&x, &wt, b), &r));
            ex.max(ew).max(eb)
        })
        .collect()
}

pub fn average_pool_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            let (h, w) = (1 + seed as usize, 2 + seed as usize % 3);
            let x = Array3::from_shape_simple_fn((3, h, w), || rng.gen_range(-1.0..1.0));
            let r = Array3::from_shape_simple_fn((3, h, w), || rng.gen_range(-1.0..1.0));
            let dx = avg_pool3_backward(&r);
            check(&x, &dx, |x| (&avg_pool3_forward(x) * &r).sum())
        })
        .collect()
}

pub fn cross_entropy_errors() -> Vec<f64> {
    (0..INSTANCES)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let logits = rand4(&mut rng, (2, 4, 3, 2)).mapv(|v| 3.0 * v);
            let target = Array3::from_shape_simple_fn((2, 3, 2), || rng.gen_range(0..4u8));
            let weights = (seed % 2 == 1)
                .then(|| Array3::from_shape_simple_fn((2, 3, 2), || rng.gen_range(0.0..2.0)));
            let wv = weights.as_ref().map(|w| w.view());
            let (_, grad) = softmax_ce_loss(&logits, target.view(), wv).unwrap();
            let e = check(&logits, &grad, |l| {
                softmax_ce_loss(l, target.view(), weights.as_ref().map(|w| w.view()))
                    .unwrap()
                    .0
            });
            e
        })
        .collect()
}

pub fn tiny_unet() -> NetworkSpec {
    let layers = vec![
        LayerSpec::conv(1, 2, 3),
        LayerSpec::relu(),
        LayerSpec::conv_strided(2, 2, 3, 2),
        LayerSpec::relu(),
        LayerSpec::conv_transpose(2, 2, 3, 2),
        LayerSpec::relu(),
        LayerSpec::conv(4, 2, 3).with_concat(1),
    ];
    let n = NetworkSpec::new("tiny", Shape3::new(1, 4, 4), layers).unwrap();
    propagate_shapes(&n, n.input).unwrap()
}

pub fn tiny_fc() -> NetworkSpec {
    let layers = vec![
        LayerSpec::conv(1, 2, 3),
        LayerSpec::relu(),
        LayerSpec::fully_connected(2 * 3 * 3, 4),
        LayerSpec::relu(),
        LayerSpec::fully_connected(4, 3),
    ];
    let n = NetworkSpec::new("fc", Shape3::new(1, 3, 3), layers).unwrap();
    propagate_shapes(&n, n.input).unwrap()
}

/// Smallest distance of any ReLU input from the kink.
fn kink_margin(net: &Network<f64>, x: &Array4<f64>) -> f64 {
    let pass = net.forward(x).unwrap();
    net.spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == patchfeas::archspec::LayerKind::Relu)
        .flat_map(|(i, _)| {
            pass.layers[i - 1]
                .data()
                .iter()
                .map(|v| v.abs())
                .collect::<Vec<_>>()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Worst relative error of the input and every parameter gradient, for 5
/// instances that keep all ReLU inputs away from the kink.
pub fn network_errors(spec: NetworkSpec, seed_base: u64) -> Vec<f64> {
    let mut errors = Vec::new();
    let mut seed = seed_base;
    while errors.len() < 5 {
        seed += 1;
        assert!(
            seed < seed_base + 200,
            "too many instances near a ReLU kink"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::init(&spec, seed);
        for p in params.layers.iter_mut().flatten() {
            p.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let net = Network::new(spec.clone(), params.clone()).unwrap();
        let s = spec.input;
        let x = rand4(&mut rng, (1, s.c, s.h, s.w));
        // The loss is only differentiable away from the kinks; perturbing
        // parameters moves pre-activations by O(EPS * |input|).
        if kink_margin(&net, &x) < 0.01 {
            continue;
        }
        let out = spec.output_shape().unwrap();
        let r = rand4(&mut rng, (1, out.c, out.h, out.w));
        let mut pass = net.forward(&x).unwrap();
        let grads = net.backward(&mut pass, &r, true).unwrap().unwrap();
        let ex = check(&x, pass.input.grad(), |x| dot4(&net.logits(x).unwrap(), &r));
        let mut worst = ex;
        for (i, g) in grads.layers.iter().enumerate() {
            let Some(g) = g else { continue };
            let w0 = params.layers[i].as_ref().unwrap().weight.clone();
            let ew = check(&w0, &g.weight, |w| {
                let mut p = params.clone();
                p.layers[i].as_mut().unwrap().weight = w.clone();
                dot4(
                    &Network::new(spec.clone(), p).unwrap().logits(&x).unwrap(),
                    &r,
                )
            });
            let b0 = params.layers[i].as_ref().unwrap().bias.clone();
            let eb = check(&b0, &g.bias, |b| {
                let mut p = params.clone();
                p.layers[i].as_mut().unwrap().bias = b.clone();
                dot4(
                    &Network::new(spec.clone(), p).unwrap().logits(&x).unwrap(),
                    &r,
                )
            });
            worst = worst.max(ew).max(eb);
        }
        errors.push(worst);
    }
    errors
}

/// Relative gap |<conv x, y> - <x, conv^T y>| per instance.
pub fn adjoint_errors() -> Vec<f64> {
    (0..8u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
            let stride = 1 + seed as usize % 3;
            let k = [3, 4, 1, 2, 5][seed as usize % 5];
            let (ci, co) = (2, 3);
            let (hs, ws) = (3, 2 + seed as usize % 2);
            let x = rand4(&mut rng, (1, ci, hs * stride, ws * stride));
            let y = rand4(&mut rng, (1, co, hs, ws));
            let w = rand4(&mut rng, (co, ci, k, k));
            let cx = conv2d_forward(&x, &w, &Array1::zeros(co), stride);
            let ty = conv_transpose_forward(&y, &w, &Array1::zeros(ci), stride);
            let lhs = dot4(&cx, &y);
            let rhs = dot4(&x, &ty);
            (lhs - rhs).abs() / lhs.abs().max(rhs.abs())
        })
        .collect()
}

/// Per-op instance errors, in a fixed order.
pub fn all_op_errors() -> Vec<(&'static str, Vec<f64>)> {
    vec![
        ("conv", conv_errors()),
        ("conv_transpose", conv_transpose_errors()),
        ("relu", relu_errors()),
        ("fully_connected", fully_connected_errors()),
        ("average_pool", average_pool_errors()),
        ("cross_entropy", cross_entropy_errors()),
        ("network_with_skip", network_errors(tiny_unet(), 1000)),
        ("network_with_dense", network_errors(tiny_fc(), 2000)),
    ]
}
