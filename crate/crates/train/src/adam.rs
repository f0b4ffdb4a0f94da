//! Adam with f64 moments over a fixed list of parameters.

use sdflow_core::{Gradients, ParamGroup, ParamId, ParamStore, Real, Shape, Tensor};

use crate::checkpoint::Checkpoint;
use crate::error::CheckpointError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Per-parameter f64 gradient sums aligned with an optimizer's parameter list.
#[derive(Debug, Clone)]
pub struct GradBuffer {
    pub values: Vec<Vec<f64>>,
}

impl GradBuffer {
    pub fn zeros<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> Self {
        GradBuffer { values: ids.iter().map(|&id| vec![0.0; store.get(id).numel()]).collect() }
    }

    /// Adds `scale` times the gradients of `ids`; untouched parameters add zero.
    pub fn accumulate<T: Real>(&mut self, grads: &Gradients<T>, ids: &[ParamId], scale: f64) {
        for (buf, &id) in self.values.iter_mut().zip(ids) {
            if let Some(g) = grads.param(id) {
                for (b, v) in buf.iter_mut().zip(g.data()) {
                    *b += scale * v.as_f64();
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().flatten().for_each(|v| *v *= k);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    ids: Vec<ParamId>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    /// Optimizer over every parameter of `group`.
    pub fn new<T: Real>(store: &ParamStore<T>, group: ParamGroup) -> Self {
        let ids = store.ids_in(group);
        let zeros = GradBuffer::zeros(store, &ids).values;
        Adam { m: zeros.clone(), v: zeros, ids, steps: 0 }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &GradBuffer, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (k, &id) in self.ids.iter().enumerate() {
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads.values[k]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
                p[i] = T::from_f64(p[i].as_f64() - update);
            }
        }
    }

    /// Stores moments as `<prefix>.m.<param>`, `<prefix>.v.<param>` and the step count.
    pub fn save<T: Real>(&self, ck: &mut Checkpoint, prefix: &str, store: &ParamStore<T>) {
        ck.insert_f64(format!("{prefix}.steps"), &[self.steps as f64]);
        for (k, &id) in self.ids.iter().enumerate() {
            let shape = store.get(id).shape();
            for (tag, data) in [("m", &self.m[k]), ("v", &self.v[k])] {
                let t = Tensor::<f64>::from_vec(shape, data.clone()).expect("moment matches its parameter");
                ck.insert_tensor(format!("{prefix}.{tag}.{}", store.name(id)), &t);
            }
        }
    }

    pub fn restore<T: Real>(&mut self, ck: &Checkpoint, prefix: &str, store: &ParamStore<T>) -> Result<(), CheckpointError> {
        let steps = ck.f64s(&format!("{prefix}.steps"))?;
        self.steps = steps.first().copied().ok_or_else(|| CheckpointError::Malformed(format!("{prefix}.steps is empty")))? as u64;
        for (k, &id) in self.ids.iter().enumerate() {
            let shape: Shape = store.get(id).shape();
            for tag in ["m", "v"] {
                let name = format!("{prefix}.{tag}.{}", store.name(id));
                let t = ck.tensor::<f64>(&name)?;
                if t.shape() != shape {
                    return Err(CheckpointError::Mismatch { entry: name, detail: format!("shape {} in file, {shape} expected", t.shape()) });
                }
                let slot = if tag == "m" { &mut self.m[k] } else { &mut self.v[k] };
                *slot = t.into_vec();
            }
        }
        Ok(())
    }
}
