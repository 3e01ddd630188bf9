use crate::error::{Error, Result};
use crate::param::ParamRef;
use crate::tensor::Tensor;
use crate::var::Var;

/// Adam with bias correction. Moments are stored per parameter in the order
/// the parameters were given at construction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

/// Serializable optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &[ParamRef], beta1: f32, beta2: f32) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr`. `grads[i]` belongs to `params[i]`.
    pub fn step(&mut self, params: &[ParamRef], grads: &[Var], lr: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Graph(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let value = p.value();
            if g.shape() != value.shape() {
                return Err(Error::Shape(format!("gradient {} for parameter {}", g.shape(), p.name())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let mut w = value.into_vec();
            for (((wi, &gi), mi), vi) in w.iter_mut().zip(g.value().data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.set(Tensor::from_vec(g.shape(), w)?);
        }
        Ok(())
    }

    pub fn state(&self) -> AdamState {
        AdamState { step: self.step, m: self.m.clone(), v: self.v.clone() }
    }

    pub fn load_state(&mut self, state: AdamState) -> Result<()> {
        let sizes_match = state.m.len() == self.m.len()
            && state.m.iter().zip(&self.m).all(|(a, b)| a.len() == b.len())
            && state.v.iter().zip(&self.v).all(|(a, b)| a.len() == b.len());
        if !sizes_match {
            return Err(Error::Shape("optimizer state does not match parameter layout".into()));
        }
        self.step = state.step;
        self.m = state.m;
        self.v = state.v;
        Ok(())
    }
}
