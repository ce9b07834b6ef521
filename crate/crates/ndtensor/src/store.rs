use indexmap::IndexMap;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub trainable: bool,
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T = f32> {
    params: IndexMap<String, Parameter<T>>,
}

/// Parameters bound into one graph as leaves.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter `{name}` not bound"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.params.insert(
            name,
            Parameter {
                value,
                grad: None,
                trainable: true,
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    /// Sets every gradient to zeros.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            match p.grad.as_mut() {
                Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
                None => p.grad = Some(vec![T::zero(); p.value.numel()]),
            }
        }
    }

    /// Adds `scale * grad` to the named gradient.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[T], scale: T) -> Result<()> {
        let p = self.get_mut(name)?;
        let n = p.value.numel();
        let acc = p.grad.get_or_insert_with(|| vec![T::zero(); n]);
        acc.iter_mut().zip(grad).for_each(|(a, &g)| *a = *a + g * scale);
        Ok(())
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), graph.leaf(p.value.clone(), requires_grad && p.trainable)))
            .collect();
        Bound { vars }
    }

    /// Gradients of every bound parameter after `graph.backward`, in store
    /// order. Frozen or unreached parameters yield zeros.
    pub fn collect_grads(&self, graph: &Graph<T>, bound: &Bound) -> Vec<Vec<T>> {
        self.params
            .iter()
            .map(|(name, p)| match bound.try_get(name).and_then(|v| graph.grad(v)) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); p.value.numel()],
            })
            .collect()
    }

    /// Adds per-parameter gradients (store order) scaled by `scale`.
    pub fn accumulate_all(&mut self, grads: &[Vec<T>], scale: T) {
        for (p, g) in self.params.values_mut().zip(grads) {
            let n = p.value.numel();
            let acc = p.grad.get_or_insert_with(|| vec![T::zero(); n]);
            acc.iter_mut().zip(g).for_each(|(a, &x)| *a = *a + x * scale);
        }
    }

    /// Rescales all gradients so their joint L2 norm is at most `max_norm`.
    /// Returns the norm before rescaling.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .params
            .values()
            .filter_map(|p| p.grad.as_ref())
            .flatten()
            .map(|&x| x.to_f64_lossy().powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let s = T::lit(max_norm / norm);
            for g in self.params.values_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x = *x * s);
            }
        }
        norm
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            value: p.value.cast(),
                            grad: p
                                .grad
                                .as_ref()
                                .map(|g| g.iter().map(|&x| U::lit(x.to_f64_lossy())).collect()),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Parameter values only, for bitwise comparisons.
    pub fn values_equal(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.value == b.value)
    }
}
