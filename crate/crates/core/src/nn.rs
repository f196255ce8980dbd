//! Parameter storage, dense layers and the Adam optimizer.

use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every value, keeping names and shapes.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (cur, new) in self.tensors.iter().zip(&values) {
            if cur.shape() != new.shape() {
                return Err(Error::shape("load_values", cur.shape(), new.shape()));
            }
        }
        self.tensors = values;
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] registered on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap leaves created elsewhere, in store order (e.g. by [`crate::autodiff::grad_check`]).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients in store order.
    pub fn grads(&self, grads: &Gradients, store: &ParamStore) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }
}

/// `y = x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights and biases drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let b = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: store.add(format!("{name}.weight"), Tensor::new(vec![in_dim, out_dim], w).expect("shape")),
            bias: store.add(format!("{name}.bias"), Tensor::new(vec![1, out_dim], b).expect("shape")),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = g.matmul(x, p.var(self.weight))?;
        g.add(h, p.var(self.bias))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidArgument("gradient count does not match parameters".into()));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = store.tensors[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        let l = Linear::new(&mut s, "l", 16, 8, &mut rng);
        let b = 0.25;
        assert!(s.get(l.weight).data().iter().all(|x| x.abs() <= b));
        assert_eq!(s.get(l.weight).shape(), &[16, 8]);
        assert_eq!(s.get(l.bias).shape(), &[1, 8]);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(5.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..500 {
            let mut g = Graph::new();
            let b = s.bind(&mut g, true);
            let sq = g.square(b.var(x));
            let grads = g.backward(sq).unwrap();
            let gs = b.grads(&grads, &s);
            opt.update(&mut s, &gs).unwrap();
        }
        assert!(s.get(x).data()[0].abs() < 1e-2);
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(5.0));
        let before = s.clone();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s);
        opt.update(&mut s, &[Tensor::scalar(3.0)]).unwrap();
        assert_eq!(s, before);
    }
}
