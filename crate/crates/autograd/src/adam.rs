use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// Moments and step count for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adam with bias correction. Parameters that receive no gradient in a
/// step are left alone, and their step counters do not advance.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<Moments>>,
    /// Round parameters and moments to `f32` after each update so that they
    /// survive a round trip through the `f32` checkpoint format unchanged.
    pub storage_f32: bool,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: Vec::new(), storage_f32: false }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.state.get(id.index()).and_then(Option::as_ref)
    }

    pub fn set_moments(&mut self, id: ParamId, moments: Moments) {
        if self.state.len() <= id.index() {
            self.state.resize(id.index() + 1, None);
        }
        self.state[id.index()] = Some(moments);
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<ParamId, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        for (&id, g) in grads {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at element {i}",
                    params.name(id)
                )));
            }
            if g.len() != params.get(id).len() {
                return Err(Error::Shape(format!(
                    "gradient of {} has {} values for shape {:?}",
                    params.name(id),
                    g.len(),
                    params.get(id).dims()
                )));
            }
        }
        if self.state.len() < params.len() {
            self.state.resize(params.len(), None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (&id, g) in grads {
            let p = params.get_mut(id);
            let st = self.state[id.index()]
                .get_or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            st.t += 1;
            let bc1 = 1.0 - beta1.powi(st.t as i32);
            let bc2 = 1.0 - beta2.powi(st.t as i32);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                st.m[k] = beta1 * st.m[k] + (1.0 - beta1) * g[k];
                st.v[k] = beta2 * st.v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = st.m[k] / bc1;
                let vh = st.v[k] / bc2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
            if self.storage_f32 {
                p.round_to_f32();
                for x in st.m.iter_mut().chain(st.v.iter_mut()) {
                    *x = *x as f32 as f64;
                }
            }
        }
        Ok(())
    }
}

/// Convenience for a single tensor: one Adam step on a throwaway store.
pub fn adam_step(param: &Tensor, grad: &[f64], adam: &mut Adam, lr: f64) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let id = store.add("p", param.clone())?;
    let mut grads = BTreeMap::new();
    grads.insert(id, grad.to_vec());
    adam.step(&mut store, &grads, lr)?;
    Ok(store.get(id).clone())
}
