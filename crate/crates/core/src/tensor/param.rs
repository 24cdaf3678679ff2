use std::collections::HashMap;

use super::{Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor plus its Adam state.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step: u64,
    pub trainable: bool,
}

impl<T: Float> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name,
            value,
            grad: None,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step: 0,
            trainable: true,
        }
    }
}

/// Ordered, named collection of parameters owned by one model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Resets every trainable gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad = Some(Tensor::zeros(p.value.shape().to_vec()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Replaces the value of a named parameter, checking its shape.
    pub fn load(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "load",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.value.cast());
        }
        out
    }

    /// Places every parameter on `graph`. Trainable bindings receive
    /// gradients; frozen ones act as constants.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable && p.trainable {
                    graph.leaf(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect();
        ParamVars { vars }
    }

    /// Adds the gradients of bound parameters into their `grad` slots.
    pub fn accumulate(&mut self, vars: &ParamVars, grads: &super::Gradients<T>) {
        for (p, &v) in self.params.iter_mut().zip(&vars.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(v) {
                match &mut p.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b),
                    None => {
                        p.grad = Some(Tensor::new(p.value.shape().to_vec(), g.to_vec()).unwrap())
                    }
                }
            }
        }
    }
}

/// Graph handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    /// Wraps graph variables given in store order, e.g. the inputs of a
    /// gradient check.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl std::ops::Index<ParamId> for ParamVars {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}
