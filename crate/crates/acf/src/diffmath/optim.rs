//! Named parameter storage and the AdamW optimizer.

use std::collections::BTreeMap;

use thiserror::Error;

use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter '{0}': step rejected")]
    NonFiniteGrad(String),
    #[error("gradient for unknown parameter '{0}'")]
    UnknownParam(String),
}

/// Parameters with per-parameter AdamW state. The step count is shared.
#[derive(Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    moment1: BTreeMap<String, Vec<f32>>,
    moment2: BTreeMap<String, Vec<f32>>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.moment1.insert(name.to_string(), vec![0.0; t.len()]);
        self.moment2.insert(name.to_string(), vec![0.0; t.len()]);
        self.params.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn expect(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn from_params(params: BTreeMap<String, Tensor>) -> Self {
        let mut s = Self::new();
        for (k, v) in params {
            s.insert(&k, v);
        }
        s
    }

    pub fn to_params(&self) -> BTreeMap<String, Tensor> {
        self.params.clone()
    }
}

/// AdamW with decoupled weight decay: `p <- p - lr*wd*p - lr*m_hat/(sqrt(v_hat)+eps)`.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    /// One update. Parameters without a gradient entry get a zero gradient
    /// (moments decay, weight decay still applies). Any non-finite gradient
    /// rejects the whole step.
    pub fn step(
        &self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), OptimError> {
        for (name, g) in grads {
            if !store.params.contains_key(name) {
                return Err(OptimError::UnknownParam(name.clone()));
            }
            if !g.all_finite() {
                return Err(OptimError::NonFiniteGrad(name.clone()));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = store.params.keys().cloned().collect();
        for name in names {
            let p = store.params.get(&name).unwrap();
            let m = store.moment1.get_mut(&name).unwrap();
            let v = store.moment2.get_mut(&name).unwrap();
            let zero;
            let gd: &[f32] = match grads.get(&name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0f32; p.len()];
                    &zero
                }
            };
            let mut new_p = Vec::with_capacity(p.len());
            for (i, &pi) in p.data().iter().enumerate() {
                let gi = gd[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let decayed = pi - self.lr * self.weight_decay * pi;
                new_p.push(decayed - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            let shape = p.shape().to_vec();
            store.params.insert(name, Tensor::new(shape, new_p));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(p: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![p]));
        s
    }

    #[test]
    fn zero_grads_no_decay_is_fixed_point() {
        let mut s = store_with(1.5);
        let opt = AdamW::new(0.1, 0.0);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::from_vec(vec![0.0]));
        opt.step(&mut s, &g).unwrap();
        assert_eq!(s.expect("p").data(), &[1.5]);
    }

    #[test]
    fn hand_evaluated_first_step() {
        // p=1, g=1, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0, t=1:
        // m_hat = 1, v_hat = 1, p' = 1 - 0.1*1/(1+1e-8) ~= 0.9
        let mut s = store_with(1.0);
        let opt = AdamW::new(0.1, 0.0);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::from_vec(vec![1.0]));
        opt.step(&mut s, &g).unwrap();
        assert!((s.expect("p").data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_only_update() {
        // wd=0.01, g=0, lr=0.1, p=1 -> 1 - 0.1*0.01 = 0.999
        let mut s = store_with(1.0);
        let opt = AdamW::new(0.1, 0.01);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::from_vec(vec![0.0]));
        opt.step(&mut s, &g).unwrap();
        assert!((s.expect("p").data()[0] - 0.999).abs() < 1e-7);
    }

    #[test]
    fn nan_grad_rejected() {
        let mut s = store_with(1.0);
        let opt = AdamW::new(0.1, 0.0);
        let mut g = BTreeMap::new();
        g.insert("p".to_string(), Tensor::from_vec(vec![f32::NAN]));
        let err = opt.step(&mut s, &g);
        assert!(matches!(err, Err(OptimError::NonFiniteGrad(_))));
        // parameter untouched
        assert_eq!(s.expect("p").data(), &[1.0]);
        assert_eq!(s.step_count(), 0);
    }
}
