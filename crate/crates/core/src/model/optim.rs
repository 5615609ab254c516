//! Adam optimizer with bias-corrected moment estimates. Moments are kept in
//! f64 and keyed by registration order, which the network guarantees is the
//! same as its serialization order.

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update over tensors visited in a fixed order. The first
    /// call sizes the moment buffers; later calls must visit the same shapes.
    pub fn step(&mut self, mut visit: impl FnMut(&mut dyn FnMut(&mut [f32], &mut [f64]))) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut idx = 0;
        let m = &mut self.m;
        let v = &mut self.v;
        visit(&mut |params: &mut [f32], grads: &mut [f64]| {
            if m.len() == idx {
                m.push(vec![0.0; params.len()]);
                v.push(vec![0.0; params.len()]);
            }
            let mt = &mut m[idx];
            let vt = &mut v[idx];
            assert_eq!(mt.len(), params.len(), "tensor shape changed between steps");
            for i in 0..params.len() {
                let g = grads[i];
                mt[i] = b1 * mt[i] + (1.0 - b1) * g;
                vt[i] = b2 * vt[i] + (1.0 - b2) * g * g;
                let m_hat = mt[i] / bc1;
                let v_hat = vt[i] / bc2;
                let next = f64::from(params[i]) - lr * m_hat / (v_hat.sqrt() + eps);
                params[i] = next as f32;
            }
            idx += 1;
        });
    }
}
