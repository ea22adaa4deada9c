//! Adam with lazily created per-tensor state.
//!
//! Each tensor keeps its own step counter, created on first update. Speaker
//! codes enter training at different times (and only the codes of speakers in
//! the current batch are updated), so bias correction must run on per-tensor
//! counts rather than a global step.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::{ParamGroup, ParameterStore};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    slots: BTreeMap<String, Slot>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: ADAM_EPS,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every trainable tensor in `groups` that has a
    /// gradient buffer. Frozen tensors and tensors outside `groups` are left
    /// bitwise untouched. Returns the names updated.
    pub fn step(&mut self, store: &mut ParameterStore, groups: &[ParamGroup]) -> Result<Vec<String>> {
        let names: Vec<String> = store
            .iter()
            .filter(|(_, p)| groups.contains(&p.group) && p.tensor.requires_grad())
            .map(|(n, _)| n.clone())
            .collect();
        self.step_named(store, &names)
    }

    /// Like `step` but over an explicit name list. Used for sparse updates
    /// where only the speaker codes present in a batch may move; a tensor
    /// skipped here keeps its state and step count for next time.
    pub fn step_named(&mut self, store: &mut ParameterStore, names: &[String]) -> Result<Vec<String>> {
        let mut updated = Vec::new();
        for name in names {
            let t = store.tensor_mut(name)?;
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
            let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
            let grads = t.grad().expect("trainable tensor owns a gradient buffer").to_vec();
            let vals = t.values_mut();
            for j in 0..n {
                let g = grads[j];
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * g;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * g * g;
                let mhat = slot.m[j] / bc1;
                let vhat = slot.v[j] / bc2;
                vals[j] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
            updated.push(name.clone());
        }
        Ok(updated)
    }

    pub fn forget(&mut self, name: &str) {
        self.slots.remove(name);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate_over_root_vhat() {
        // With g = 1: mhat = 1, vhat = 1, so the first update is lr/(1+eps).
        let mut store = ParameterStore::new();
        store
            .insert("p", Tensor::from_vec(&[1], vec![1.0]).unwrap().with_grad(), ParamGroup::Base)
            .unwrap();
        store.tensor_mut("p").unwrap().grad_mut().unwrap()[0] = 1.0;
        let mut opt = Adam::new(0.1);
        opt.step(&mut store, &[ParamGroup::Base]).unwrap();
        let got = store.tensor("p").unwrap().values()[0];
        let want = 1.0 - 0.1 / (1.0 + ADAM_EPS);
        assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
    }

    #[test]
    fn frozen_tensors_stay_bitwise_identical() {
        let mut store = ParameterStore::new();
        store
            .insert("frozen", Tensor::from_vec(&[2], vec![0.1, -0.7]).unwrap(), ParamGroup::Base)
            .unwrap();
        store
            .insert("live", Tensor::from_vec(&[1], vec![0.5]).unwrap().with_grad(), ParamGroup::Base)
            .unwrap();
        store.tensor_mut("live").unwrap().grad_mut().unwrap()[0] = 2.0;
        let before = store.tensor("frozen").unwrap().values().to_vec();
        let mut opt = Adam::new(0.05);
        let updated = opt.step(&mut store, &[ParamGroup::Base]).unwrap();
        assert_eq!(updated, vec!["live".to_string()]);
        let after = store.tensor("frozen").unwrap().values();
        assert_eq!(before, after);
    }

    #[test]
    fn per_tensor_steps_advance_independently() {
        // A tensor that joins later gets fresh bias correction: two tensors
        // receiving identical gradients must land on identical values even if
        // one sat out earlier steps.
        let mut store = ParameterStore::new();
        store
            .insert("a", Tensor::from_vec(&[1], vec![1.0]).unwrap().with_grad(), ParamGroup::SpeakerCode)
            .unwrap();
        let mut opt = Adam::new(0.1);
        for _ in 0..3 {
            store.tensor_mut("a").unwrap().grad_mut().unwrap()[0] = 0.3;
            opt.step(&mut store, &[ParamGroup::SpeakerCode]).unwrap();
            store.zero_grads();
        }
        store
            .insert("b", Tensor::from_vec(&[1], vec![1.0]).unwrap().with_grad(), ParamGroup::SpeakerCode)
            .unwrap();
        for _ in 0..3 {
            store.tensor_mut("b").unwrap().grad_mut().unwrap()[0] = 0.3;
            store.tensor_mut("a").unwrap().grad_mut().unwrap()[0] = 0.0;
            opt.step(&mut store, &[ParamGroup::SpeakerCode]).unwrap();
            store.zero_grads();
        }
        // b took 3 steps with g=0.3 from 1.0, same as a's first 3 steps.
        let a3 = {
            let mut s2 = ParameterStore::new();
            s2.insert("x", Tensor::from_vec(&[1], vec![1.0]).unwrap().with_grad(), ParamGroup::SpeakerCode)
                .unwrap();
            let mut o2 = Adam::new(0.1);
            for _ in 0..3 {
                s2.tensor_mut("x").unwrap().grad_mut().unwrap()[0] = 0.3;
                o2.step(&mut s2, &[ParamGroup::SpeakerCode]).unwrap();
                s2.zero_grads();
            }
            s2.tensor("x").unwrap().values()[0]
        };
        let b3 = store.tensor("b").unwrap().values()[0];
        assert!((a3 - b3).abs() < 1e-15);
    }
}
