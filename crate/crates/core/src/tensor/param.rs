use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform with the given fan-in / fan-out.
    Xavier(usize, usize),
}

/// A named learnable tensor plus its Adam moments.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Ordered collection of parameters. Insertion order is the canonical order
/// for checkpoints and checksums.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::of(d.sample(rng))).collect()
            }
            Init::Xavier(fan_in, fan_out) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
            }
        };
        self.insert(name, Tensor::new(shape, data).expect("shape matches"))
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = value.len();
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Inserts the parameter's current value as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Result<Var> {
        tape.param_leaf(id, self.params[id.0].value.clone())
    }

    pub fn zero_buffer(&self) -> GradBuffer<T> {
        GradBuffer { grads: self.params.iter().map(|p| vec![T::zero(); p.value.len()]).collect() }
    }

    /// Adds the gradients of every parameter leaf on `tape` into `grad`.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for &(var, id) in tape.param_leaves() {
            let Some(g) = grads.get(var) else { continue };
            let p = &mut self.params[id.0];
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            slot.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }

    pub fn set_grads(&mut self, buf: &GradBuffer<T>) {
        for (p, g) in self.params.iter_mut().zip(&buf.grads) {
            p.grad = Some(Tensor::new(p.value.shape(), g.clone()).expect("buffer shape"));
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// One Adam update with bias correction. Every parameter must carry a
    /// gradient; gradients are cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {} has no gradient", p.name)));
        }
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for p in &mut self.params {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let bc1 = T::one() - T::of(cfg.beta1.powi(p.step as i32));
            let bc2 = T::one() - T::of(cfg.beta2.powi(p.step as i32));
            for (((w, m), v), &gv) in
                p.value.data_mut().iter_mut().zip(&mut p.m).zip(&mut p.v).zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * gv;
                *v = b2 * *v + (T::one() - b2) * gv * gv;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient sums, used to merge episode gradients in a fixed order.
#[derive(Clone, Debug)]
pub struct GradBuffer<T> {
    grads: Vec<Vec<T>>,
}

impl<T: Scalar> GradBuffer<T> {
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) {
        for &(var, id) in tape.param_leaves() {
            if let Some(g) = grads.get(var) {
                self.grads[id.0].iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    pub fn add(&mut self, other: &GradBuffer<T>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::of(s);
        self.grads.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("theta", Tensor::scalar(0.0));
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        store.adam_step(&AdamConfig::default()).unwrap();
        assert!((store.value(id).data()[0] + 1e-3).abs() < 1e-9);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap());
        store.get_mut(id).grad = Some(Tensor::zeros(&[2]));
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value(id).data(), &[0.5, -1.5]);
    }

    #[test]
    fn two_steps_follow_adam_recurrences() {
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(1.0));
        let gs = [0.3, -0.7];
        let (mut m, mut v, mut w) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in gs.iter().enumerate() {
            store.get_mut(id).grad = Some(Tensor::scalar(g));
            store.adam_step(&cfg).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            w -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.value(id).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut store = ParamStore::<f32>::new();
        store.insert("w", Tensor::scalar(1.0));
        assert!(matches!(store.adam_step(&AdamConfig::default()), Err(Error::Contract(_))));
    }
}
