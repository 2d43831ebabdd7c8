//! Feature-to-attribute regressor: two linear layers with a leaky-ReLU
//! between, mapping a CLS feature to a synthetic attribute vector. The
//! synthetic attribute later serves as the attention query, so the net is
//! trained jointly with the attention module (see `aam`), never on unseen
//! classes.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const F2A_LEAKY_SLOPE: f64 = 0.2;

/// Value placed at the single active position of a one-hot probe.
pub const ONE_HOT_PROBE_VALUE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeKind {
    /// Ground-truth class attribute.
    Real,
    /// Output of the feature-to-attribute net.
    Synthetic,
    /// Diagnostic query with exactly one non-zero entry.
    OneHotProbe,
}

#[derive(Debug, Clone)]
pub struct AttributeVector {
    /// Row vector [1 x A].
    pub values: Tensor,
    pub kind: AttributeKind,
}

impl AttributeVector {
    pub fn new(values: Tensor, kind: AttributeKind) -> Result<Self> {
        let values = values.as_row_matrix()?;
        Ok(AttributeVector { values, kind })
    }

    pub fn real(values: Tensor) -> Result<Self> {
        Self::new(values, AttributeKind::Real)
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Zeros except `ONE_HOT_PROBE_VALUE` at `index`.
pub fn make_one_hot_attribute(index: usize, a: usize) -> Result<AttributeVector> {
    if index >= a {
        return Err(Error::IndexOutOfRange { index, len: a });
    }
    let mut values = Tensor::zeros(&[1, a]);
    values.as_mut_slice()[index] = ONE_HOT_PROBE_VALUE;
    AttributeVector::new(values, AttributeKind::OneHotProbe)
}

/// Mean squared error between a prediction and a real attribute vector,
/// averaged over the attribute dimension.
pub fn f2a_mse_loss(pred: &AttributeVector, target: &AttributeVector) -> Result<f64> {
    if target.kind != AttributeKind::Real {
        return Err(Error::KindMismatch(format!(
            "MSE target must be a real attribute, got {:?}",
            target.kind
        )));
    }
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "attribute lengths {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred
        .values
        .as_slice()
        .iter()
        .zip(target.values.as_slice())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / pred.len() as f64)
}

pub struct F2aNet {
    store: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy)]
pub struct F2aBound {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl F2aBound {
    /// Rebuild from vars in parameter-registration order (w1, b1, w2, b2).
    pub fn from_vars(vars: &[Var]) -> Self {
        F2aBound { w1: vars[0], b1: vars[1], w2: vars[2], b2: vars[3] }
    }
}

impl F2aNet {
    /// Hidden width is max(in, out), keeping capacity proportional to the
    /// larger side of the mapping.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let hidden = in_dim.max(out_dim);
        let mut store = ParamStore::new();
        let w1 = store.add("w1", rng::trunc_normal_tensor(&[in_dim, hidden], 0.02, rng));
        let b1 = store.add("b1", Tensor::zeros(&[1, hidden]));
        let w2 = store.add("w2", rng::trunc_normal_tensor(&[hidden, out_dim], 0.02, rng));
        let b2 = store.add("b2", Tensor::zeros(&[1, out_dim]));
        F2aNet { store, w1, b1, w2, b2, in_dim, out_dim }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape) -> F2aBound {
        F2aBound {
            w1: tape.watch(self.w1, self.store.value(self.w1)),
            b1: tape.watch(self.b1, self.store.value(self.b1)),
            w2: tape.watch(self.w2, self.store.value(self.w2)),
            b2: tape.watch(self.b2, self.store.value(self.b2)),
        }
    }

    /// Tape-level forward over a batch of CLS rows [B x D] -> [B x A].
    pub fn forward_on(&self, tape: &mut Tape, bound: &F2aBound, cls: Var) -> Result<Var> {
        if tape.value(cls).cols() != self.in_dim {
            return Err(Error::ShapeMismatch(format!(
                "cls width {} does not match f2a input {}",
                tape.value(cls).cols(),
                self.in_dim
            )));
        }
        let h = tape.linear(cls, bound.w1, bound.b1)?;
        let act = tape.leaky_relu(h, F2A_LEAKY_SLOPE);
        tape.linear(act, bound.w2, bound.b2)
    }

    /// Inference: one CLS feature to a synthetic attribute vector.
    pub fn synthesize_attribute(&self, cls: &Tensor) -> Result<AttributeVector> {
        let row = cls.as_row_matrix()?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(&row);
        let out = self.forward_on(&mut tape, &bound, x)?;
        AttributeVector::new(tape.value(out).clone(), AttributeKind::Synthetic)
    }
}
