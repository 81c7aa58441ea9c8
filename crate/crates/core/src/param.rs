//! Named parameters grouped by what is allowed to train them.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// θ1 is `Halora`, θ2 is `Gate`; `Frozen` covers the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Halora,
    Gate,
    Frozen,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Halora => "halora",
            ParamGroup::Gate => "gate",
            ParamGroup::Frozen => "frozen",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

/// Insertion-ordered parameter collection with unique names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        group: ParamGroup,
    ) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(alloc::format!(
                "duplicate parameter name {name}"
            )));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, group });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Unknown(name.into()))
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        Ok(&self.params[self.id(name)?])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn by_id(&self, id: usize) -> &Parameter {
        &self.params[id]
    }

    /// Overwrite a value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name)?;
        let p = &mut self.params[id];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(alloc::format!(
                "{name}: {:?} cannot take {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub(crate) fn value_mut_by_id(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn total_values(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Rebuild the name index, e.g. after deserialization.
    pub fn reindex(&mut self) -> Result<()> {
        self.index.clear();
        for (i, p) in self.params.iter().enumerate() {
            if self.index.insert(p.name.clone(), i).is_some() {
                return Err(Error::invalid(alloc::format!(
                    "duplicate parameter name {}",
                    p.name
                )));
            }
        }
        Ok(())
    }

    pub fn merge_from(&mut self, other: &ParamSet) -> Result<()> {
        for p in &other.params {
            self.insert(p.name.clone(), p.value.clone(), p.group)?;
        }
        Ok(())
    }

    /// Place every parameter on the tape. Frozen ones become constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| match p.group {
                ParamGroup::Frozen => tape.constant(p.value.clone()),
                _ => tape.param(p.value.clone()),
            })
            .collect();
        Binding { vars }
    }

    /// Like [`ParamSet::bind`], but parameter `id` uses `given(id)` when that
    /// returns a node already on the tape.
    pub fn bind_with(&self, tape: &mut Tape, given: impl Fn(usize) -> Option<Var>) -> Binding {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(id, p)| match (given(id), p.group) {
                (Some(v), _) => v,
                (None, ParamGroup::Frozen) => tape.constant(p.value.clone()),
                (None, _) => tape.param(p.value.clone()),
            })
            .collect();
        Binding { vars }
    }
}

/// Tape handles for a bound [`ParamSet`], indexed by parameter id.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Reverse-mode gradients of `output` for the named parameters.
pub fn reverse_grad(
    tape: &Tape,
    output: Var,
    params: &ParamSet,
    binding: &Binding,
    names: &[&str],
) -> Result<GradMap> {
    let ids = names
        .iter()
        .map(|n| params.id(n))
        .collect::<Result<Vec<_>>>()?;
    let vars: Vec<Var> = ids.iter().map(|&i| binding.var(i)).collect();
    let grads = tape.reverse_grad(output, &vars)?;
    Ok(names.iter().map(|n| String::from(*n)).zip(grads).collect())
}
