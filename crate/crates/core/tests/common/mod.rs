#![allow(dead_code)]

use setnet::dataset::{Channel, NormParams};
use setnet::mlp::{Architecture, MlpModel};
use setnet::trainer::init_params;

pub fn unit_norm() -> NormParams {
    let c = |name| Channel::new(name, -1.0, 1.0).unwrap();
    NormParams { time: c("t"), let_value: c("let"), vd: c("vd"), current: c("i") }
}

pub fn random_model(arch: &Architecture, seed: u64) -> MlpModel {
    MlpModel::from_params(arch, &init_params(arch, seed), unit_norm()).unwrap()
}

/// Central differences of the network output against every parameter.
pub fn fd_jacobian_row(m: &MlpModel, x: [f64; 3], h: f64) -> Vec<f64> {
    let p = m.params();
    (0..p.len())
        .map(|k| {
            let mut up = p.clone();
            up[k] += h;
            let mut dn = p.clone();
            dn[k] -= h;
            (m.with_params(&up).unwrap().forward(x) - m.with_params(&dn).unwrap().forward(x)) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max |b|` over one Jacobian row.
pub fn row_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}
