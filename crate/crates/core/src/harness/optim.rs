use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::transformer::Params;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` from `grads`, which must share their layout.
    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &Params<Tensor>) -> Result<()> {
        let grads: Vec<&Tensor> = grads.named().into_iter().map(|(_, g)| g).collect();
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        }
        if grads.len() != self.m.len() {
            return Err(Error::contract("gradient layout does not match the optimizer state"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let mut i = 0;
        let mut mismatch = None;
        params.for_each_mut(|name, p| {
            let g = grads[i].data();
            if g.len() != p.numel() {
                mismatch.get_or_insert_with(|| name.to_string());
            } else {
                let (m, v) = (&mut self.m[i], &mut self.v[i]);
                for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mj = b1 * *mj + (1.0 - b1) * gj;
                    *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                    *w -= lr * (*mj / c1) / ((*vj / c2).sqrt() + eps);
                }
            }
            i += 1;
        });
        match mismatch {
            Some(name) => Err(Error::contract(format!("gradient shape mismatch for {name}"))),
            None => Ok(()),
        }
    }
}
