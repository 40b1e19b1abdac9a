use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    /// Removes every entry whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let keep: Vec<bool> = self.names.iter().map(|n| !n.starts_with(prefix)).collect();
        let mut k = keep.iter();
        self.names.retain(|_| *k.next().unwrap());
        let mut k = keep.iter();
        self.tensors.retain(|_| *k.next().unwrap());
        self.index = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on `tape`; names for which `trainable` is false
    /// become constants.
    pub fn bind<'p>(
        &'p self,
        tape: &mut Tape<'p, T>,
        trainable: impl Fn(&str) -> bool,
    ) -> Bound<'p> {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if trainable(n) {
                    tape.param(t)
                } else {
                    tape.constant_ref(t)
                }
            })
            .collect();
        Bound {
            vars,
            index: &self.index,
        }
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound<'p> {
    vars: Vec<Var>,
    index: &'p HashMap<String, usize>,
}

impl Bound<'_> {
    /// Handle for `name`. Panics if the model does not define it, which is a
    /// programming error rather than an input error.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Gradients in parameter order (zeros for constants and unused entries).
    pub fn collect<T: Element>(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}
