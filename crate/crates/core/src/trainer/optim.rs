//! Outer-loop optimizers over [`ModelParams`].

use super::{ModelParams, ParamGrads};

pub trait Optimizer {
    /// Applies one descent step with learning rate `lr`.
    fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64);
}

/// Plain gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        for (m, g) in params.encoder.matrices_mut().into_iter().zip(&grads.encoder) {
            for (w, d) in m.data_mut().iter_mut().zip(g) {
                *w = (*w as f64 - lr * d) as f32;
            }
        }
        for (table, sparse) in [
            (&mut params.embeddings.entities, &grads.entities),
            (&mut params.embeddings.relations, &grads.relations),
        ] {
            for (&row, g) in sparse {
                for (w, d) in table.row_mut(row).iter_mut().zip(g) {
                    *w = (*w as f64 - lr * d) as f32;
                }
            }
        }
    }
}

/// Adam with dense moment estimates over every parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    fn update(&mut self, slot: usize, weights: &mut [f32], grad: &dyn Fn(usize) -> f64, lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (i, w) in weights.iter_mut().enumerate() {
            let g = grad(i);
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w = (*w as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads, lr: f64) {
        if self.m.is_empty() {
            let mut sizes: Vec<usize> = params.encoder.matrices().iter().map(|m| m.data().len()).collect();
            sizes.push(params.embeddings.entities.data().len());
            sizes.push(params.embeddings.relations.data().len());
            self.m = sizes.iter().map(|&n| vec![0.0; n]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        for (slot, (m, g)) in params
            .encoder
            .matrices_mut()
            .into_iter()
            .zip(&grads.encoder)
            .enumerate()
        {
            self.update(slot, m.data_mut(), &|i| g.get(i).copied().unwrap_or(0.0), lr);
        }
        for (slot, table, sparse) in [
            (5, &mut params.embeddings.entities, &grads.entities),
            (6, &mut params.embeddings.relations, &grads.relations),
        ] {
            let dim = table.cols();
            let lookup = |i: usize| sparse.get(&(i / dim)).map_or(0.0, |g| g[i % dim]);
            self.update(slot, table.data_mut(), &lookup, lr);
        }
    }
}
