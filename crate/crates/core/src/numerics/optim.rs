use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{dim_err, Result};

/// Applies a gradient step to the parameters named in `grads`; parameters
/// absent from `grads` are left untouched.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()>;
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = lookup(params, name, g)?;
            p.data_mut().iter_mut().zip(g.data()).for_each(|(w, d)| *w -= self.lr * d);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam with bias correction. Step counts are tracked per parameter so
/// alternating partial updates keep consistent corrections.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, g) in grads {
            let p = lookup(params, name, g)?;
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t);
            let bc2 = 1.0 - self.beta2.powi(st.t);
            for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * d;
                *v = self.beta2 * *v + (1.0 - self.beta2) * d * d;
                *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

fn lookup<'a>(params: &'a mut ParamStore, name: &str, g: &Tensor) -> Result<&'a mut Tensor> {
    let p = params.get_mut(name).ok_or_else(|| dim_err!("gradient for unknown parameter `{name}`"))?;
    if p.shape() != g.shape() {
        return Err(dim_err!("gradient shape {:?} does not match parameter `{name}` {:?}", g.shape(), p.shape()));
    }
    Ok(p)
}
