#![allow(dead_code)]

use mmad_core::nn::{Parameters, ParametersExt};
use mmad_core::numcore::{DenseFeatureMap, SeededRng};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
/// Denominator floor for relative errors: entries smaller than this are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

/// FD gradient with respect to every parameter of `model`.
pub fn fd_param_grad<M: Parameters + Clone>(model: &M, loss: &mut dyn FnMut(&M) -> f64) -> Vec<f64> {
    let base = model.flatten();
    let mut probe = model.clone();
    fd_grad(
        &mut |p| {
            probe.assign_flat(p);
            loss(&probe)
        },
        &base,
        FD_STEP,
    )
}

pub fn random_map(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> DenseFeatureMap {
    let vals = (0..h * w * c).map(|_| rng.normal()).collect();
    DenseFeatureMap::new(h, w, c, vals, vec![true; h * w]).unwrap()
}

pub mod gradsuite;
pub mod oracles;

pub fn random_mask(n: usize, p_true: f64, rng: &mut SeededRng) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.uniform() < p_true).collect();
    m[0] = true;
    m
}
