//! Dense f64 tensors and the named parameter store.
//!
//! Tensors are row-major with explicit shapes; rank 0 is represented as shape
//! `[1]`. A tensor that requires gradients always owns a gradient buffer of
//! the same length, so "frozen" and "has no gradient storage" coincide.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            values: vec![v],
            grad: None,
        }
    }

    /// Enables gradient storage. Idempotent.
    pub fn with_grad(mut self) -> Tensor {
        self.enable_grad();
        self
    }

    pub fn enable_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
    }

    /// Drops gradient storage, freezing the tensor.
    pub fn disable_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Rows of a rank-2 tensor (or 1 for rank-1).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Columns of a rank-2 tensor (or the length for rank-1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.values.len(),
        }
    }

    pub fn assert_finite(&self, ctx: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }
}

/// Optimization group a parameter belongs to.
///
/// Groups drive freezing and per-group learning rates: base weights train
/// during base training only, code projections train jointly with the base,
/// speaker codes and low-rank deltas are the test-time adaptation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    CodeProjection,
    SpeakerCode,
    Lora,
}

impl ParamGroup {
    pub fn parse(s: &str) -> Result<ParamGroup> {
        match s {
            "base" => Ok(ParamGroup::Base),
            "code_projection" => Ok(ParamGroup::CodeProjection),
            "speaker_code" => Ok(ParamGroup::SpeakerCode),
            "lora" => Ok(ParamGroup::Lora),
            other => Err(Error::contract(format!("unknown parameter group '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::CodeProjection => "code_projection",
            ParamGroup::SpeakerCode => "speaker_code",
            ParamGroup::Lora => "lora",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Named parameter collection. Iteration order is the name order (BTreeMap),
/// which keeps every consumer deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> ParameterStore {
        ParameterStore::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, group: ParamGroup) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter '{name}'")));
        }
        tensor.assert_finite(&format!("parameter '{name}'"))?;
        self.params.insert(name.to_string(), Param { tensor, group });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.get_mut(name)?.tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let t = &mut self.get_mut(name)?.tensor;
        if trainable {
            t.enable_grad();
        } else {
            t.disable_grad();
        }
        Ok(())
    }

    /// Freezes or thaws every tensor in `group`.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for (_, p) in self.params.iter_mut() {
            if p.group == group {
                if trainable {
                    p.tensor.enable_grad();
                } else {
                    p.tensor.disable_grad();
                }
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.tensor.disable_grad();
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params.iter_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Scalar count of parameters in `group`.
    pub fn count_parameters(&self, group: ParamGroup) -> usize {
        self.params
            .values()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.clone())
            .collect()
    }
}
