use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter of `ps` that has a
    /// gradient. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, ps: &mut ParamStore<S>, grads: &Gradients<S>) -> f64 {
        if self.m.len() < ps.len() {
            self.m.resize(ps.len(), None);
            self.v.resize(ps.len(), None);
        }
        let norm = grads.sq_norm(ps).sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let lr_t = S::lit(self.lr * bc2.sqrt() / bc1);
        let eps = S::lit(self.eps);
        let clip = S::lit(clip);
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            if !ps.is_trainable(id) {
                continue;
            }
            let Some(g) = grads.param(ps, id) else { continue };
            let i = id.index();
            let shape = g.shape().to_vec();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = ps.get_mut(id).data_mut();
            for (((pv, mv), vv), &gv) in p
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv * clip;
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                *pv -= lr_t * *mv / (vv.sqrt() + eps);
            }
        }
        norm
    }
}
