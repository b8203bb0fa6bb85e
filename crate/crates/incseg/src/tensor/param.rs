//! Named, freezable trainable parameters.

use crate::tensor::{Scalar, Tensor};

/// Which side of the shared/domain-specific partition a parameter sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained by every domain (encoder convolution kernels, single-head
    /// decoders).
    Shared,
    /// Encoder-side parameter owned by one domain (adapters, DS-BN),
    /// indexed by arrival order.
    Domain(usize),
    /// Decoder-head parameter owned by one domain.
    Decoder(usize),
}

impl ParamKind {
    /// The domain that owns this parameter, if any. Adapters and decoder
    /// heads together form W_t.
    pub fn owner(self) -> Option<usize> {
        match self {
            ParamKind::Shared => None,
            ParamKind::Domain(t) | ParamKind::Decoder(t) => Some(t),
        }
    }
}

/// A leaf tensor registered with a model: it has a stable name (used for
/// checkpoints and optimizer grouping), a partition label, and a freeze
/// bit that removes it from differentiation entirely.
#[derive(Clone, Debug)]
pub struct Parameter<S: Scalar> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<S>,
    frozen: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, kind: ParamKind, tensor: Tensor<S>) -> Self {
        tensor.set_requires_grad(true);
        Parameter { name: name.into(), kind, tensor, frozen: false }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Stop gradient flow into this parameter and drop any pending grad.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.tensor.set_requires_grad(false);
        self.tensor.clear_grad();
    }

    pub fn thaw(&mut self) {
        self.frozen = false;
        self.tensor.set_requires_grad(true);
    }

    /// Copy with independent storage; keeps name, kind and freeze state.
    pub fn deep_clone(&self) -> Self {
        let tensor = self.tensor.deep_clone();
        tensor.set_requires_grad(!self.frozen);
        Parameter { name: self.name.clone(), kind: self.kind, tensor, frozen: self.frozen }
    }

    /// Overwrite this parameter's values from another of the same shape.
    pub fn copy_data_from(&self, other: &Parameter<S>) {
        self.tensor.set_data(&other.tensor.to_vec());
    }
}
