//! Adam over named tensor lists.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

pub(crate) struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = ArrayViewD<'a, f64>>) -> Self {
        let m: Vec<ArrayD<f64>> = params.into_iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// One bias-corrected update; `params` and `grads` must list tensors in the
    /// order given to [`Adam::new`].
    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = ArrayViewMutD<'a, f64>>,
        grads: impl IntoIterator<Item = ArrayViewD<'b, f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((mut p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut p).and(&g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        }
    }
}
