//! Named trainable parameters and tape binding.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::nn::tape::{Gradients, NodeId, Tape};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value,
        }
    }
}

/// Anything exposing a flat, stably ordered view of its parameters.
pub trait HasParams {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.numel());
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |p| names.push(p.name.clone()));
        names
    }
}

/// Records which tape leaf each parameter was bound to during one forward
/// pass, so gradients can be routed back by name afterwards.
#[derive(Default)]
pub struct Binder {
    bound: Vec<(String, NodeId)>,
}

impl Binder {
    pub fn new() -> Self {
        Binder { bound: Vec::new() }
    }

    pub fn bind(&mut self, tape: &mut Tape, p: &Parameter) -> NodeId {
        let id = tape.leaf(p.value.clone());
        self.bound.push((p.name.clone(), id));
        id
    }

    /// Collect per-parameter gradients from a finished backward pass.
    /// Binding the same parameter twice accumulates both contributions.
    pub fn gradients(&self, grads: &Gradients, tape: &Tape) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (name, id) in &self.bound {
            let g = grads.wrt(*id, tape);
            match out.get_mut(name) {
                Some(acc) => {
                    for (o, x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *o += x;
                    }
                }
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// Total number of scalars across a gradient map; used for sanity checks.
pub fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    let mut sq = 0.0;
    for g in grads.values() {
        for v in g.data() {
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// Scale every gradient in place so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(CoreError::InvalidArgument(
            "clip_grad_norm: max_norm must be positive".into(),
        ));
    }
    let norm = grad_norm(grads);
    if !norm.is_finite() {
        return Err(CoreError::NonFinite("gradient norm".into()));
    }
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    Ok(norm)
}
