use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor with its unique dotted path.
#[derive(Clone, Debug)]
pub struct Param<T: Element> {
    pub path: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    velocity: Option<Tensor<T>>,
}

/// Owns every parameter of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Element> {
    params: Vec<Param<T>>,
    by_path: HashMap<String, ParamId>,
}

/// Half-width of the xavier uniform range.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn path_seed(seed: u64, path: &str) -> u64 {
    // FNV-1a over the path, folded with the global seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in path.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_path: HashMap::new(),
        }
    }

    /// Register a tensor under `path`. Paths must be unique.
    pub fn add(&mut self, path: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.by_path.contains_key(path) {
            return Err(Error::Invalid(format!("duplicate parameter path `{path}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            path: path.to_string(),
            value,
            grad: None,
            velocity: None,
        });
        self.by_path.insert(path.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, path: &str) -> Option<ParamId> {
        self.by_path.get(path).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters, optionally restricted to paths
    /// starting with `prefix`.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.path.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Fill with `U(-a, a)`, `a = sqrt(6/(fan_in+fan_out))`, from a stream
    /// keyed by `(seed, path)`.
    pub fn xavier_init(&mut self, id: ParamId, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::Invalid("xavier fans must be positive".into()));
        }
        let bound = xavier_bound(fan_in, fan_out);
        let p = &mut self.params[id.0];
        let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed, &p.path));
        for v in p.value.data_mut() {
            *v = T::of(rng.gen_range(-bound..=bound));
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add `grads` into the accumulators (`grad += g`).
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Tensor<T>)>) -> Result<()> {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            match p.grad.as_mut() {
                Some(acc) => acc.add_assign(&g)?,
                None => p.grad = Some(g),
            }
        }
        Ok(())
    }

    /// SGD with momentum and L2 weight decay:
    /// `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`.
    ///
    /// Every parameter must have a gradient; see [`ParamStore::fill_missing_grads`]
    /// for parameters the loss did not reach.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
        for p in &mut self.params {
            let g = p.grad.as_ref().ok_or_else(|| Error::MissingGrad(p.path.clone()))?;
            let v = p
                .velocity
                .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((vv, &gg), th) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data_mut()) {
                *vv = mu * *vv + (gg + wd * *th);
                *th -= lr * *vv;
            }
        }
        Ok(())
    }

    /// Give a zero gradient to every parameter that did not receive one.
    pub fn fill_missing_grads(&mut self) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }

    /// Same parameters in another precision (gradients and momentum dropped).
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    path: p.path.clone(),
                    value: p.value.cast(),
                    grad: None,
                    velocity: None,
                })
                .collect(),
            by_path: self.by_path.clone(),
        }
    }

    /// Overwrite values by path. With `strict`, unknown paths are errors;
    /// shapes must always match.
    pub fn load_values(&mut self, entries: Vec<(String, Tensor<T>)>, strict: bool) -> Result<()> {
        for (path, value) in entries {
            match self.by_path.get(&path) {
                Some(id) => {
                    let p = &mut self.params[id.0];
                    if p.value.shape() != value.shape() {
                        return Err(Error::Checkpoint(format!(
                            "shape of `{path}`: expected {:?}, file has {:?}",
                            p.value.shape(),
                            value.shape()
                        )));
                    }
                    p.value = value;
                }
                None if strict => return Err(Error::UnknownParam(path)),
                None => {}
            }
        }
        Ok(())
    }

    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        self.params
            .iter()
            .map(|p| {
                let n = p
                    .grad
                    .as_ref()
                    .map(|g| g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt())
                    .unwrap_or(0.0);
                (p.path.clone(), n)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::from_vec(&[vals.len()], vals.to_vec())).unwrap();
        (s, id)
    }

    #[test]
    fn sgd_plain_step_subtracts_grad() {
        let (mut s, id) = store_with(&[1.0, 2.0]);
        s.accumulate(vec![(id, Tensor::from_vec(&[2], vec![0.5, -1.0]))]).unwrap();
        s.sgd_step(1.0, 0.0, 0.0).unwrap();
        assert_eq!(s.value(id).data(), &[0.5, 3.0]);
    }

    #[test]
    fn sgd_zero_grad_is_inert() {
        let (mut s, id) = store_with(&[1.0, 2.0]);
        s.fill_missing_grads();
        s.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.value(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn sgd_missing_grad_is_an_error() {
        let (mut s, _) = store_with(&[1.0]);
        assert!(matches!(s.sgd_step(0.1, 0.9, 0.0), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn sgd_two_momentum_steps_match_unrolled_recurrence() {
        let (lr, mu, wd) = (0.1, 0.9, 0.0005);
        let (mut s, id) = store_with(&[1.5]);
        let (g1, g2) = (0.3, -0.7);
        s.accumulate(vec![(id, Tensor::scalar(g1))]).unwrap();
        s.sgd_step(lr, mu, wd).unwrap();
        s.zero_grads();
        s.accumulate(vec![(id, Tensor::scalar(g2))]).unwrap();
        s.sgd_step(lr, mu, wd).unwrap();

        let th0 = 1.5;
        let v1 = g1 + wd * th0;
        let th1 = th0 - lr * v1;
        let v2 = mu * v1 + (g2 + wd * th1);
        let th2 = th1 - lr * v2;
        assert!((s.value(id).data()[0] - th2).abs() < 1e-7);
    }

    #[test]
    fn accumulate_adds_across_calls() {
        let (mut s, id) = store_with(&[0.0]);
        s.accumulate(vec![(id, Tensor::scalar(1.0))]).unwrap();
        s.accumulate(vec![(id, Tensor::scalar(2.0))]).unwrap();
        assert_eq!(s.get(id).grad.as_ref().unwrap().data(), &[3.0]);
        s.zero_grads();
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn xavier_bounds_determinism_and_mean() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("layer.weight", Tensor::zeros(&[100_000])).unwrap();
        let b = s.add("layer.other", Tensor::zeros(&[100_000])).unwrap();
        s.xavier_init(a, 30, 70, 7).unwrap();
        s.xavier_init(b, 30, 70, 7).unwrap();
        let bound = xavier_bound(30, 70);
        assert!(s.value(a).data().iter().all(|v| v.abs() <= bound));
        assert!(s.value(a).mean().abs() < 0.01);
        assert_ne!(s.value(a), s.value(b));

        let mut t = ParamStore::<f64>::new();
        let a2 = t.add("layer.weight", Tensor::zeros(&[100_000])).unwrap();
        t.xavier_init(a2, 30, 70, 7).unwrap();
        assert_eq!(s.value(a), t.value(a2));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let (mut s, _) = store_with(&[0.0]);
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
    }
}
