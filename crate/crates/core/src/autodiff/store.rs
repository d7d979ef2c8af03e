use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AutodiffError, Matrix};

/// Parameter group. Membership is fixed when the parameter is registered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    /// Generator.
    Theta,
    /// Inference network.
    Phi,
    /// Density estimator.
    Eta,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Theta, Group::Phi, Group::Eta];

    pub fn tag(self) -> u8 {
        match self {
            Group::Theta => 0,
            Group::Phi => 1,
            Group::Eta => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        match tag {
            0 => Some(Group::Theta),
            1 => Some(Group::Phi),
            2 => Some(Group::Eta),
            _ => None,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Theta => "theta",
            Group::Phi => "phi",
            Group::Eta => "eta",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub group: Group,
    pub value: Matrix,
}

/// Named parameter matrices for the three networks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    params: Vec<Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: Group,
        value: Matrix,
    ) -> Result<ParamId, AutodiffError> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(AutodiffError::DuplicateParameter(name));
        }
        self.params.push(Parameter { name, group, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) -> Result<(), AutodiffError> {
        let slot = &mut self.params[id.0];
        if slot.value.dim() != value.dim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "set",
                left: slot.value.dim(),
                right: value.dim(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.get(id).group == group)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalars in a group.
    pub fn count(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values from `other` by name. Every parameter here must be present
    /// there with the same group and shape.
    pub fn load_from(&mut self, other: &ParameterStore) -> Result<(), AutodiffError> {
        for p in &mut self.params {
            let id = other
                .find(&p.name)
                .ok_or_else(|| AutodiffError::MissingParameter(p.name.clone()))?;
            let src = other.get(id);
            if src.group != p.group {
                return Err(AutodiffError::GroupMismatch(p.name.clone()));
            }
            if src.value.dim() != p.value.dim() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "load",
                    left: p.value.dim(),
                    right: src.value.dim(),
                });
            }
            p.value.assign(&src.value);
        }
        Ok(())
    }
}

/// Gradients for every parameter in a store, aligned by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Matrix>,
    groups: Vec<Group>,
}

impl ParamGrads {
    pub fn zeros(store: &ParameterStore) -> Self {
        Self {
            grads: store
                .params
                .iter()
                .map(|p| Array2::zeros(p.value.dim()))
                .collect(),
            groups: store.params.iter().map(|p| p.group).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn norm(&self, group: Group) -> f64 {
        self.grads
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .flat_map(|(m, _)| m.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Rescales a group so its norm does not exceed `max_norm`.
    pub fn clip(&mut self, group: Group, max_norm: f64) {
        let n = self.norm(group);
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for (m, g) in self.grads.iter_mut().zip(&self.groups) {
                if *g == group {
                    m.mapv_inplace(|v| v * s);
                }
            }
        }
    }
}
