use super::TensorMap;
use crate::scalar::Scalar;

/// Adaptive-moment optimizer over a [`TensorMap`].
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: TensorMap<T>,
    v: TensorMap<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    /// Updates every parameter accepted by `trainable` that has a gradient.
    pub fn step(&mut self, params: &mut TensorMap<T>, grads: &TensorMap<T>, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let one = T::one();
        let c1 = T::of(1.0 - self.beta1.powi(self.step));
        let c2 = T::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let Ok(g) = grads.get(name) else { continue };
            if self.m.get(name).is_err() {
                self.m.insert(name, ndarray::ArrayD::zeros(p.raw_dim()));
                self.v.insert(name, ndarray::ArrayD::zeros(p.raw_dim()));
            }
            let m = self.m.get_mut(name).expect("moment present");
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            let v = self.v.get_mut(name).expect("moment present");
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            let (m, v) = (self.m.get(name).expect("m"), self.v.get(name).expect("v"));
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let mh = m / c1;
                let vh = v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}
