use ndarray::ArrayD;

use crate::store::{ParamId, ParamStore};
use crate::tape::Gradients;
use crate::TensorData;

/// Adam with per-parameter step counts, so parameter groups that join
/// training late still get correct bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    m: Vec<Option<TensorData>>,
    v: Vec<Option<TensorData>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(lr: f32, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![None; param_count],
            v: vec![None; param_count],
            t: vec![0; param_count],
        }
    }

    /// Apply one update to exactly the parameters in `active`, using the
    /// gradients from a backward pass. Gradient-less parameters are skipped.
    /// `clip_norm`, when set, rescales the gradients of the active set if
    /// their global L2 norm exceeds it.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        active: &[ParamId],
        clip_norm: Option<f32>,
    ) {
        let scale = match clip_norm {
            Some(limit) => {
                let mut sq = 0.0f64;
                for id in active {
                    if let Some(g) = grads.of_param(*id) {
                        sq += g.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>();
                    }
                }
                let norm = sq.sqrt() as f32;
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for id in active {
            let Some(g) = grads.of_param(*id) else { continue };
            self.update_one(store, *id, &g.mapv(|v| v * scale));
        }
    }

    fn update_one(&mut self, store: &mut ParamStore, id: ParamId, grad: &TensorData) {
        let i = id.index();
        if self.m[i].is_none() {
            self.m[i] = Some(ArrayD::zeros(grad.raw_dim()));
            self.v[i] = Some(ArrayD::zeros(grad.raw_dim()));
        }
        self.t[i] += 1;
        let t = self.t[i] as f32;
        let (b1, b2) = (self.beta1, self.beta2);
        let m = self.m[i].as_mut().unwrap();
        let v = self.v[i].as_mut().unwrap();
        ndarray::Zip::from(&mut *m).and(grad).for_each(|mi, &gi| {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        });
        ndarray::Zip::from(&mut *v).and(grad).for_each(|vi, &gi| {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        });
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.lr;
        let eps = self.eps;
        let value = store.value_mut(id);
        ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &mi, &vi| {
            let mhat = mi / bc1;
            let vhat = vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }

    /// State accessors for checkpointing: (t, m, v) for one parameter.
    pub fn state(&self, id: ParamId) -> (u64, Option<&TensorData>, Option<&TensorData>) {
        let i = id.index();
        (self.t[i], self.m[i].as_ref(), self.v[i].as_ref())
    }

    pub fn restore_state(&mut self, id: ParamId, t: u64, m: Option<TensorData>, v: Option<TensorData>) {
        let i = id.index();
        self.t[i] = t;
        self.m[i] = m;
        self.v[i] = v;
    }
}
