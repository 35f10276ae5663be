use crate::autodiff::{GradMap, ParamGroup, ParamStore};

/// Adam with bias correction and a learning rate chosen per parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: GradMap,
    v: GradMap,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            m: GradMap::zeros(params),
            v: GradMap::zeros(params),
            t: 0,
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap, lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let rate = lr(params.group(id));
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (m, &g) in m.iter_mut().zip(g) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            }
            let v = self.v.get_mut(id).data_mut();
            for (v, &g) in v.iter_mut().zip(g) {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            for ((p, &m), &v) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                *p -= rate * (m / c1) / ((v / c2).sqrt() + self.eps);
            }
        }
    }
}
