use std::collections::BTreeMap;

use rand::Rng as _;

use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A trainable tensor together with its adaptive-moment optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_counter: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.len();
        Parameter {
            name: name.into(),
            tensor,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step_counter: 0,
        }
    }
}

/// Handle to a parameter inside one [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of parameters owned by one model component.
///
/// The `tag` identifies the set inside a recorded graph, so two sets used in
/// the same graph must carry different tags.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    tag: String,
    params: Vec<Parameter>,
    by_name: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new(tag: impl Into<String>) -> Self {
        ParamSet {
            tag: tag.into(),
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.by_name.contains_key(&param.name) {
            return Err(Error::invalid(format!("duplicate parameter `{}`", param.name)));
        }
        let id = self.params.len();
        self.by_name.insert(param.name.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    /// Uniform `±sqrt(1/fan_in)` initialization.
    pub fn add_weight(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(Parameter::new(name, Tensor::new(shape, values)?))
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(Parameter::new(name, Tensor::zeros(shape)))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.set_grad(None);
        }
    }

    /// Replaces values of every parameter named in `other` (shapes must agree).
    pub fn load_values_from(&mut self, other: &ParamSet) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            crate::error::ensure_shape(p.tensor.shape(), src.tensor.shape())?;
            p.tensor.values_mut().copy_from_slice(src.tensor.values());
        }
        Ok(())
    }
}
