//! SGD with momentum over named parameter groups.
//!
//! Groups exist so one optimizer step can apply different learning rates
//! to different parts of the model (the incremental protocol trains
//! domain-specific parameters at the base rate and shared parameters at a
//! reduced one). A learning rate of exactly 0 is the freeze-shared
//! sentinel: those parameters are left bitwise unchanged, but their grads
//! are still cleared so the next step starts clean.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::param::Parameter;
use crate::tensor::{Scalar, Tensor};

/// Parameters sharing one learning rate. Construction rejects frozen
/// parameters: freezing is expressed by omission, not by a zero rate.
pub struct ParamGroup<S: Scalar> {
    name: String,
    lr: S,
    params: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamGroup<S> {
    pub fn new(name: impl Into<String>, lr: S, params: &[&Parameter<S>]) -> Result<Self> {
        let name = name.into();
        for p in params {
            if p.frozen() {
                return Err(Error::InvalidArgument(format!(
                    "frozen parameter `{}` passed to optimizer group `{name}`",
                    p.name()
                )));
            }
        }
        Ok(ParamGroup {
            name,
            lr,
            params: params.iter().map(|p| (p.name().to_string(), p.tensor().clone())).collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn lr(&self) -> S {
        self.lr
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// v <- momentum * v + g; w <- w - lr * v.
pub struct SgdMomentum<S: Scalar> {
    momentum: S,
    velocity: HashMap<u64, Vec<S>>,
}

impl<S: Scalar> SgdMomentum<S> {
    pub fn new(momentum: S) -> Self {
        SgdMomentum { momentum, velocity: HashMap::new() }
    }

    /// Apply one update to every group, then clear all gradients.
    pub fn step(&mut self, groups: &[ParamGroup<S>]) -> Result<()> {
        for group in groups {
            for (name, tensor) in &group.params {
                if !tensor.requires_grad() {
                    return Err(Error::InvalidArgument(format!(
                        "parameter `{name}` in group `{}` was frozen after the group was built",
                        group.name
                    )));
                }
                if group.lr == S::ZERO {
                    tensor.clear_grad();
                    continue;
                }
                let grad = tensor.grad();
                let id = tensor.id();
                let has_velocity = self.velocity.contains_key(&id);
                if grad.is_none() && !has_velocity {
                    continue; // untouched by any loss so far: exact no-op
                }
                let n = tensor.numel();
                let v = self.velocity.entry(id).or_insert_with(|| vec![S::ZERO; n]);
                match &grad {
                    Some(g) => {
                        for (vi, gi) in v.iter_mut().zip(g) {
                            *vi = self.momentum * *vi + *gi;
                        }
                    }
                    None => {
                        for vi in v.iter_mut() {
                            *vi *= self.momentum;
                        }
                    }
                }
                let lr = group.lr;
                tensor.with_data_mut(|w| {
                    for (wi, vi) in w.iter_mut().zip(v.iter()) {
                        *wi -= lr * *vi;
                    }
                });
                tensor.clear_grad();
            }
        }
        Ok(())
    }

    /// Drop all velocity state (used between incremental steps).
    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::param::{ParamKind, Parameter};
    use crate::tensor::{backward, ops};

    fn param(name: &str, data: Vec<f32>) -> Parameter<f32> {
        let n = data.len();
        Parameter::new(name, ParamKind::Shared, Tensor::new(&[n], data).unwrap())
    }

    fn seed_grad(p: &Parameter<f32>, g: &[f32]) {
        let loss = ops::weighted_sum(p.tensor(), g).unwrap();
        backward(&loss).unwrap();
    }

    #[test]
    fn plain_sgd_subtracts_lr_times_grad() {
        let p = param("w", vec![1.0, 2.0]);
        seed_grad(&p, &[0.5, -1.0]);
        let group = ParamGroup::new("all", 0.1f32, &[&p]).unwrap();
        let mut opt = SgdMomentum::new(0.0);
        opt.step(&[group]).unwrap();
        assert_eq!(p.tensor().to_vec(), vec![1.0 - 0.1 * 0.5, 2.0 + 0.1]);
        assert!(p.tensor().grad().is_none());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let p = param("w", vec![0.0]);
        let group = ParamGroup::new("all", 1.0f32, &[&p]).unwrap();
        let mut opt = SgdMomentum::new(0.5);
        // Constant unit gradient: velocities 1, 1.5, 1.75.
        let mut expect = 0.0f32;
        let mut v = 0.0f32;
        for _ in 0..3 {
            seed_grad(&p, &[1.0]);
            opt.step(std::slice::from_ref(&group)).unwrap();
            v = 0.5 * v + 1.0;
            expect -= v;
            assert_eq!(p.tensor().to_vec(), vec![expect]);
        }
    }

    #[test]
    fn momentum_coasts_when_gradient_is_absent() {
        let p = param("w", vec![0.0]);
        let group = ParamGroup::new("all", 1.0f32, &[&p]).unwrap();
        let mut opt = SgdMomentum::new(0.5);
        seed_grad(&p, &[1.0]);
        opt.step(std::slice::from_ref(&group)).unwrap();
        assert_eq!(p.tensor().to_vec(), vec![-1.0]);
        // No new gradient: velocity decays but still moves the weight.
        opt.step(std::slice::from_ref(&group)).unwrap();
        assert_eq!(p.tensor().to_vec(), vec![-1.5]);
    }

    #[test]
    fn two_groups_update_magnitudes_scale_with_their_rates() {
        // Identical unit gradients; rates lr and lr/100. The applied deltas
        // must equal each group's rate bitwise, i.e. differ exactly 100x.
        let a = param("fast", vec![0.0]);
        let b = param("slow", vec![0.0]);
        let lr = 0.5f32;
        let dlr = 100.0f32;
        let groups = [
            ParamGroup::new("fast", lr, &[&a]).unwrap(),
            ParamGroup::new("slow", lr / dlr, &[&b]).unwrap(),
        ];
        let mut opt = SgdMomentum::new(0.0);
        seed_grad(&a, &[1.0]);
        seed_grad(&b, &[1.0]);
        opt.step(&groups).unwrap();
        let da = -a.tensor().get(0);
        let db = -b.tensor().get(0);
        assert_eq!(da.to_bits(), lr.to_bits());
        assert_eq!(db.to_bits(), (lr / dlr).to_bits());
        // With a power-of-two ratio the quotient is exact as well.
        let c = param("slow2", vec![0.0]);
        let g2 = [ParamGroup::new("slow2", lr / 4.0, &[&c]).unwrap()];
        seed_grad(&c, &[1.0]);
        opt.step(&g2).unwrap();
        assert_eq!(da / -c.tensor().get(0), 4.0);
    }

    #[test]
    fn zero_lr_leaves_weights_bitwise_unchanged_but_clears_grads() {
        let p = param("w", vec![0.1, -0.2, 0.3]);
        let before: Vec<u32> = p.tensor().to_vec().iter().map(|v| v.to_bits()).collect();
        let group = ParamGroup::new("frozen-shared", 0.0f32, &[&p]).unwrap();
        let mut opt = SgdMomentum::new(0.9);
        seed_grad(&p, &[5.0, 5.0, 5.0]);
        opt.step(&[group]).unwrap();
        let after: Vec<u32> = p.tensor().to_vec().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
        assert!(p.tensor().grad().is_none());
    }

    #[test]
    fn group_construction_rejects_frozen_parameters() {
        let mut p = param("w", vec![1.0]);
        p.freeze();
        assert!(ParamGroup::new("g", 0.1f32, &[&p]).is_err());
    }

    #[test]
    fn step_rejects_parameters_frozen_after_grouping() {
        let mut p = param("w", vec![1.0]);
        let group = ParamGroup::new("g", 0.1f32, &[&p]).unwrap();
        p.freeze();
        let mut opt = SgdMomentum::new(0.0);
        assert!(opt.step(&[group]).is_err());
    }

    #[test]
    fn parameter_without_gradient_is_untouched() {
        let p = param("w", vec![0.25]);
        let bits = p.tensor().get(0).to_bits();
        let group = ParamGroup::new("g", 0.1f32, &[&p]).unwrap();
        let mut opt = SgdMomentum::new(0.9);
        opt.step(&[group]).unwrap();
        assert_eq!(p.tensor().get(0).to_bits(), bits);
    }
}
