//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: [usize; 4], init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Builds parameter specs under a dotted prefix.
#[derive(Default)]
pub struct SpecBuilder {
    specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: [usize; 4], init: Init) {
        self.specs.push(ParamSpec::new(name, shape, init));
    }

    /// Weight `[cout, cin/groups, k, k]` with He-normal init, plus a zero bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, groups: usize, gain: f64) {
        let fan_in = (cin / groups * k * k) as f64;
        self.push(
            format!("{prefix}.w"),
            [cout, cin / groups, k, k],
            Init::Normal(gain / fan_in.sqrt()),
        );
        self.push(format!("{prefix}.b"), [1, cout, 1, 1], Init::Zeros);
    }

    pub fn layer_norm(&mut self, prefix: &str, c: usize) {
        self.push(format!("{prefix}.g"), [1, c, 1, 1], Init::Constant(1.0));
        self.push(format!("{prefix}.b"), [1, c, 1, 1], Init::Zeros);
    }

    /// Appends the specs of a sub-module, prefixing their names.
    pub fn nest(&mut self, prefix: &str, specs: Vec<ParamSpec>) {
        self.specs.extend(specs.into_iter().map(|s| ParamSpec {
            name: format!("{prefix}.{}", s.name),
            ..s
        }));
    }

    pub fn finish(self) -> Vec<ParamSpec> {
        self.specs
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: Arc<HashMap<String, usize>>,
}

impl ParamSet {
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::param("parameter names and tensors differ in count"));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::param(format!("duplicate parameter name {n}")));
            }
        }
        Ok(Self {
            names,
            tensors,
            index: Arc::new(index),
        })
    }

    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let tensors = specs
            .iter()
            .map(|s| match s.init {
                Init::Zeros => Tensor::zeros(s.shape),
                Init::Constant(v) => Tensor::full(s.shape, v),
                Init::Normal(std) => Tensor::normal(s.shape, std, rng),
            })
            .collect();
        Self::from_parts(specs.iter().map(|s| s.name.clone()).collect(), tensors)
            .expect("spec names are unique")
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        Self::from_parts(
            specs.iter().map(|s| s.name.clone()).collect(),
            specs.iter().map(|s| Tensor::zeros(s.shape)).collect(),
        )
        .expect("spec names are unique")
    }

    /// Checks that names and shapes match `specs` exactly and that all values are finite.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.names.len() {
            return Err(Error::param(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.names.len()
            )));
        }
        for (s, (n, t)) in specs.iter().zip(self.names.iter().zip(&self.tensors)) {
            if &s.name != n || s.shape != t.shape() {
                return Err(Error::param(format!(
                    "parameter {n} {:?} does not match expected {} {:?}",
                    t.shape(),
                    s.name,
                    s.shape
                )));
            }
            t.check_finite(n)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn shapes(&self) -> Vec<[usize; 4]> {
        self.tensors.iter().map(Tensor::shape).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    /// Replaces one tensor, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| Error::param(format!("unknown parameter {name}")))?;
        value.expect_shape(slot.shape(), name)?;
        *slot = value;
        Ok(())
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (n, t) in self.names.iter().zip(&mut self.tensors) {
            if n.starts_with(prefix) {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Records every tensor on `tape`; as leaves when `trainable`, else as constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound {
            index: Arc::clone(&self.index),
            vars,
        }
    }
}

/// Parameters recorded on a tape.
pub struct Bound<'t> {
    index: Arc<HashMap<String, usize>>,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Pairs externally created variables with the names of `set`, in order.
    pub fn from_vars(set: &ParamSet, vars: Vec<Var<'t>>) -> Self {
        assert_eq!(set.len(), vars.len(), "one variable per parameter");
        Self {
            index: Arc::clone(&set.index),
            vars,
        }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::param(format!("missing parameter {name}")))
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 't> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }
}

/// Name-prefixed view of a [`Bound`].
#[derive(Clone)]
pub struct Scope<'a, 't> {
    bound: &'a Bound<'t>,
    prefix: String,
}

impl<'a, 't> Scope<'a, 't> {
    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.bound.get(&self.full(name))
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.index.contains_key(&self.full(name))
    }

    pub fn sub(&self, name: &str) -> Scope<'a, 't> {
        Scope {
            bound: self.bound,
            prefix: self.full(name),
        }
    }
}
