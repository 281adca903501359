//! Named parameter storage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a parameter tensor is for. Drives initialization and cost accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight { fan_in: usize, fan_out: usize },
    ConvBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    L2Scale,
}

impl ParamRole {
    /// Learned parameters count toward the headline total; running statistics do not.
    pub fn is_learned(&self) -> bool {
        !matches!(self, ParamRole::BnRunningMean | ParamRole::BnRunningVar)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub role: ParamRole,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!("param dims {dims:?} but {} values", data.len())));
        }
        Ok(Self { dims, data })
    }
}

/// Parameters keyed by `"<layer>.<field>"`, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Option<Param> {
        self.entries.insert(name.into(), param)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn data(&self, name: &str) -> Result<&[f32]> {
        self.get(name).map(|p| p.data.as_slice()).ok_or_else(|| Error::Incompatible { names: vec![name.to_string()] })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Store with every spec zero-filled.
    pub fn zeros(specs: &[ParamSpec]) -> Self {
        let entries = specs
            .iter()
            .map(|s| (s.name.clone(), Param { dims: s.dims.clone(), data: vec![0.0; s.numel()] }))
            .collect();
        Self { entries }
    }

    /// Checks that the store holds exactly the parameters `specs` describe,
    /// with matching dimensions. Reports every offending name.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut bad = Vec::new();
        for s in specs {
            match self.entries.get(&s.name) {
                Some(p) if p.dims == s.dims => {}
                _ => bad.push(s.name.clone()),
            }
        }
        for name in self.entries.keys() {
            if !specs.iter().any(|s| &s.name == name) {
                bad.push(name.clone());
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            bad.sort();
            Err(Error::Incompatible { names: bad })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, dims: &[usize]) -> ParamSpec {
        ParamSpec { name: name.into(), dims: dims.to_vec(), role: ParamRole::ConvBias }
    }

    #[test]
    fn check_reports_all_offenders() {
        let specs = vec![spec("a.bias", &[3]), spec("b.bias", &[2])];
        let mut store = ParamStore::zeros(&specs);
        assert!(store.check_against(&specs).is_ok());
        store.insert("b.bias", Param::new(vec![4], vec![0.0; 4]).unwrap());
        store.insert("extra", Param::new(vec![1], vec![1.0]).unwrap());
        match store.check_against(&specs) {
            Err(Error::Incompatible { names }) => assert_eq!(names, vec!["b.bias", "extra"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
