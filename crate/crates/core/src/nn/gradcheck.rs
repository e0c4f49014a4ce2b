//! Finite-difference gradient verification.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::nn::param::HasParams;
use crate::nn::tensor::Tensor;

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |cd|, 1e-8). `f` must be deterministic.
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(CoreError::InvalidArgument("grad_check: eps must be > 0".into()));
    }
    if analytic.shape() != x.shape() {
        return Err(CoreError::ShapeMismatch(
            "grad_check: analytic gradient shape".into(),
        ));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(CoreError::NonFinite("grad_check: f returned NaN/Inf".into()));
        }
        let cd = (up - down) / (2.0 * eps);
        let an = analytic.data()[i];
        let denom = an.abs().max(cd.abs()).max(1e-8);
        worst = worst.max((an - cd).abs() / denom);
    }
    Ok(worst)
}

/// Central-difference gradients for every coordinate of every parameter of a
/// model, by perturb-evaluate-restore. Used to validate whole-model losses.
pub fn fd_model_grad<M, F>(model: &mut M, mut eval: F, eps: f64) -> Result<BTreeMap<String, Tensor>>
where
    M: HasParams,
    F: FnMut(&M) -> Result<f64>,
{
    let names = model.param_names();
    let mut out = BTreeMap::new();
    for name in names {
        let n = param_len(model, &name);
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = bump(model, &name, i, eps);
            let up = eval(model)?;
            set_coord(model, &name, i, orig - eps);
            let down = eval(model)?;
            set_coord(model, &name, i, orig);
            grad[i] = (up - down) / (2.0 * eps);
        }
        let shape = param_shape(model, &name);
        out.insert(name, Tensor::new(shape, grad)?);
    }
    Ok(out)
}

/// Max relative error between two gradient maps over shared keys; errors if
/// the key sets differ.
pub fn max_rel_err(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> Result<f64> {
    if a.keys().ne(b.keys()) {
        return Err(CoreError::InvalidArgument(
            "gradient maps cover different parameters".into(),
        ));
    }
    let mut worst = 0.0f64;
    for (k, ga) in a {
        let gb = &b[k];
        for (x, y) in ga.data().iter().zip(gb.data()) {
            let denom = x.abs().max(y.abs()).max(1e-8);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    Ok(worst)
}

fn param_len<M: HasParams>(model: &M, name: &str) -> usize {
    let mut n = 0;
    model.visit(&mut |p| {
        if p.name == name {
            n = p.value.numel();
        }
    });
    n
}

fn param_shape<M: HasParams>(model: &M, name: &str) -> Vec<usize> {
    let mut s = Vec::new();
    model.visit(&mut |p| {
        if p.name == name {
            s = p.value.shape().to_vec();
        }
    });
    s
}

fn bump<M: HasParams>(model: &mut M, name: &str, i: usize, eps: f64) -> f64 {
    let mut orig = 0.0;
    model.visit_mut(&mut |p| {
        if p.name == name {
            orig = p.value.data()[i];
            p.value.data_mut()[i] = orig + eps;
        }
    });
    orig
}

fn set_coord<M: HasParams>(model: &mut M, name: &str, i: usize, v: f64) {
    model.visit_mut(&mut |p| {
        if p.name == name {
            p.value.data_mut()[i] = v;
        }
    });
}
