//! Finite-difference checks for every trainable layer and model. Each check
//! returns the worst relative error over its random instances.

use mmad_core::decoders::{
    decoder2d_backward, decoder3d_backward, Decoder2DConfig, Decoder2DModel, Decoder3DConfig, Decoder3DModel,
    DecoderSample,
};
use mmad_core::mapnet::{mapper_backward, masked_cosine_loss, mapper_forward, MapperConfig, MapperModel, MapperSample};
use mmad_core::nn::*;
use mmad_core::numcore::SeededRng;
use ndarray::Array2;

use super::*;

fn rand_mat(r: usize, c: usize, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.normal())
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn with_flat(shape: (usize, usize), v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec(shape, v.to_vec()).unwrap()
}

/// Checks `d <R, f(x)> / dx` for a parameter-free map.
fn check_input_grad(
    x: &Array2<f64>,
    r: &Array2<f64>,
    f: &dyn Fn(&Array2<f64>) -> Array2<f64>,
    analytic: Array2<f64>,
) -> f64 {
    let shape = x.dim();
    let n = fd_grad(&mut |v| dot(r, &f(&with_flat(shape, v))), x.as_slice().unwrap(), FD_STEP);
    max_rel_err(&analytic.iter().copied().collect::<Vec<_>>(), &n)
}

pub fn linear(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, din, dout) = (1 + rng.below(6), 1 + rng.below(5), 1 + rng.below(5));
        let mut layer = Linear::new(din, dout, &mut rng);
        layer.b.mapv_inplace(|_| rng.normal());
        let x = rand_mat(p, din, &mut rng);
        let r = rand_mat(p, dout, &mut rng);
        let mut g = layer.zeros_like();
        let dx = layer.backward(&x, &r, &mut g);
        let n = fd_param_grad(&layer, &mut |m| dot(&r, &m.forward(&x)));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| layer.forward(x), dx));
    }
    worst
}

pub fn gelu_act(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let x = rand_mat(3, 4, &mut rng) * 2.0;
        let r = rand_mat(3, 4, &mut rng);
        worst = worst.max(check_input_grad(&x, &r, &gelu, gelu_backward(&x, &r)));
    }
    worst
}

pub fn sigmoid_act(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let x = rand_mat(3, 4, &mut rng) * 3.0;
        let r = rand_mat(3, 4, &mut rng);
        worst = worst.max(check_input_grad(&x, &r, &sigmoid, sigmoid_backward(&sigmoid(&x), &r)));
    }
    worst
}

pub fn layer_norm(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, d) = (1 + rng.below(5), 2 + rng.below(6));
        let mut ln = LayerNorm::new(d);
        ln.gamma.mapv_inplace(|_| rng.normal());
        ln.beta.mapv_inplace(|_| rng.normal());
        let x = rand_mat(p, d, &mut rng);
        let r = rand_mat(p, d, &mut rng);
        let (_, cache) = ln.forward(&x);
        let mut g = ln.zeros_like();
        let dx = ln.backward(&cache, &r, &mut g);
        let n = fd_param_grad(&ln, &mut |m| dot(&r, &m.forward(&x).0));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| ln.forward(x).0, dx));
    }
    worst
}

pub fn attention(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (h, w, c, win) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4), 1 + rng.below(3));
        let mut att = WindowAttention::new(c, win, &mut rng);
        for l in [&mut att.q, &mut att.k, &mut att.v] {
            l.b.mapv_inplace(|_| 0.3 * rng.normal());
        }
        let x = rand_mat(h * w, c, &mut rng);
        let r = rand_mat(h * w, c, &mut rng);
        let (_, cache) = att.forward(&x, h, w);
        let mut g = att.zeros_like();
        let dx = att.backward(&x, &cache, &r, &mut g);
        let n = fd_param_grad(&att, &mut |m| dot(&r, &m.forward(&x, h, w).0));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| att.forward(x, h, w).0, dx));
    }
    worst
}

const GEOMETRIES: [(usize, usize); 5] = [(4, 2), (3, 1), (1, 1), (2, 2), (5, 3)];

pub fn conv_transpose2d(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (k, s) = GEOMETRIES[rng.below(GEOMETRIES.len())];
        let (h, w, ci, co) = (1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3), 1 + rng.below(3));
        let mut ct = ConvTranspose2d::new(ci, co, k, s, &mut rng).unwrap();
        ct.b.mapv_inplace(|_| rng.normal());
        let x = rand_mat(h * w, ci, &mut rng);
        let r = rand_mat(h * w * s * s, co, &mut rng);
        let mut g = ct.zeros_like();
        let dx = ct.backward(&x, h, w, &r, &mut g);
        let n = fd_param_grad(&ct, &mut |m| dot(&r, &m.forward(&x, h, w)));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| ct.forward(x, h, w), dx));
    }
    worst
}

pub fn conv_transpose1d(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (k, s) = GEOMETRIES[rng.below(GEOMETRIES.len())];
        let (len, ci, co) = (1 + rng.below(6), 1 + rng.below(3), 1 + rng.below(3));
        let mut ct = ConvTranspose1d::new(ci, co, k, s, &mut rng).unwrap();
        ct.b.mapv_inplace(|_| rng.normal());
        let x = rand_mat(len, ci, &mut rng);
        let r = rand_mat(len * s, co, &mut rng);
        let mut g = ct.zeros_like();
        let dx = ct.backward(&x, &r, &mut g);
        let n = fd_param_grad(&ct, &mut |m| dot(&r, &m.forward(&x)));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| ct.forward(x), dx));
    }
    worst
}

pub fn conv1d(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let k = [1, 3, 5][rng.below(3)];
        let (len, ci, co) = (1 + rng.below(7), 1 + rng.below(3), 1 + rng.below(3));
        let mut cv = Conv1d::new(ci, co, k, &mut rng).unwrap();
        cv.b.mapv_inplace(|_| rng.normal());
        let x = rand_mat(len, ci, &mut rng);
        let r = rand_mat(len, co, &mut rng);
        let mut g = cv.zeros_like();
        let dx = cv.backward(&x, &r, &mut g);
        let n = fd_param_grad(&cv, &mut |m| dot(&r, &m.forward(&x)));
        worst = worst.max(max_rel_err(&g.flatten(), &n));
        worst = worst.max(check_input_grad(&x, &r, &|x| cv.forward(x), dx));
    }
    worst
}

pub fn pooling(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let f = 1 + rng.below(3);
        let (h, w, c) = (f * (1 + rng.below(3)), f * (1 + rng.below(3)), 1 + rng.below(3));
        let x = rand_mat(h * w, c, &mut rng);
        let r = rand_mat((h / f) * (w / f), c, &mut rng);
        let dx = avg_pool2d_backward(&r, h, w, f);
        worst = worst.max(check_input_grad(&x, &r, &|x| avg_pool2d(x, h, w, f), dx));
        let r1 = rand_mat(h * w / f, c, &mut rng);
        let dx1 = avg_pool1d_backward(&r1, h * w, f);
        worst = worst.max(check_input_grad(&x, &r1, &|x| avg_pool1d(x, f), dx1));
    }
    worst
}

pub fn cosine_loss(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (p, d) = (1 + rng.below(6), 1 + rng.below(5));
        let pred = rand_mat(p, d, &mut rng);
        let target = rand_mat(p, d, &mut rng);
        let mask = random_mask(p, 0.7, &mut rng);
        let (_, g) = masked_cosine_rows(&pred, &target, &mask, true);
        let n = fd_grad(
            &mut |v| masked_cosine_rows(&with_flat((p, d), v), &target, &mask, false).0.unwrap(),
            pred.as_slice().unwrap(),
            FD_STEP,
        );
        worst = worst.max(max_rel_err(&g.unwrap().iter().copied().collect::<Vec<_>>(), &n));
    }
    worst
}

pub fn mapper(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (din, dout) = (1 + rng.below(5), 1 + rng.below(5));
        let cfg = MapperConfig { hidden: Some(2 + rng.below(5)), depth: 1 + rng.below(2) };
        let mut model = MapperModel::new(din, dout, &cfg, &mut rng).unwrap();
        model.visit_mut("", &mut |name, v| {
            if name.ends_with(".b") || name.ends_with(".beta") || name.ends_with(".gamma") {
                v.iter_mut().for_each(|x| *x += 0.2 * rng.normal());
            }
        });
        let (h, w) = (1 + rng.below(4), 1 + rng.below(4));
        let sample = MapperSample {
            source: random_map(h, w, din, &mut rng),
            target: random_map(h, w, dout, &mut rng),
            mask: random_mask(h * w, 0.6, &mut rng),
        };
        let (_, g) = mapper_backward(&model, &sample).unwrap().unwrap();
        let n = fd_param_grad(&model, &mut |m| {
            let pred = mapper_forward(m, &sample.source).unwrap();
            masked_cosine_loss(&pred, &sample.target, &sample.mask).unwrap().value
        });
        worst = worst.max(max_rel_err(&g.flatten(), &n));
    }
    worst
}

pub fn decoder2d(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = 1 + rng.below(3);
        let cfg = Decoder2DConfig { latent: 2 + rng.below(3), window: 1 + rng.below(2), mlp_ratio: 1 + rng.below(2), kernel: 4, stride: 2 };
        let mut model = Decoder2DModel::new(c, &cfg, &mut rng).unwrap();
        model.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += 0.1 * rng.normal()));
        let (h, w) = (4 * (1 + rng.below(2)), 4 * (1 + rng.below(2)));
        let sample = DecoderSample { features: random_map(h, w, c, &mut rng), mask: random_mask(h * w, 0.8, &mut rng) };
        let (_, g) = decoder2d_backward(&model, &sample).unwrap().unwrap();
        let n = fd_param_grad(&model, &mut |m| decoder2d_backward(m, &sample).unwrap().unwrap().0);
        worst = worst.max(max_rel_err(&g.flatten(), &n));
    }
    worst
}

pub fn decoder3d(instances: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let c = 1 + rng.below(3);
        let cfg = Decoder3DConfig { latent: 2 + rng.below(3), kernel: 4, stride: 2, gate_kernel: [1, 3][rng.below(2)] };
        let mut model = Decoder3DModel::new(c, &cfg, &mut rng).unwrap();
        model.visit_mut("", &mut |_, v| v.iter_mut().for_each(|x| *x += 0.1 * rng.normal()));
        let (h, w) = (1 + rng.below(3), 4 * (1 + rng.below(2)));
        let mut features = random_map(h, w, c, &mut rng);
        let validity = random_mask(h * w, 0.8, &mut rng);
        features.validity_mut().copy_from_slice(&validity);
        let sample = DecoderSample { features, mask: validity };
        let (_, g) = decoder3d_backward(&model, &sample).unwrap().unwrap();
        let n = fd_param_grad(&model, &mut |m| decoder3d_backward(m, &sample).unwrap().unwrap().0);
        worst = worst.max(max_rel_err(&g.flatten(), &n));
    }
    worst
}

/// `(name, check)` for every layer and model.
pub fn all() -> Vec<(&'static str, fn(usize, u64) -> f64)> {
    vec![
        ("linear", linear),
        ("gelu", gelu_act),
        ("sigmoid", sigmoid_act),
        ("layer_norm", layer_norm),
        ("window_attention", attention),
        ("conv_transpose2d", conv_transpose2d),
        ("conv_transpose1d", conv_transpose1d),
        ("conv1d", conv1d),
        ("avg_pool", pooling),
        ("masked_cosine", cosine_loss),
        ("mapper", mapper),
        ("decoder2d", decoder2d),
        ("decoder3d", decoder3d),
    ]
}
