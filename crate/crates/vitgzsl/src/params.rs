//! Named parameter storage and the Adam optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to one parameter. Unique across stores, so several stores can bind
/// onto a single tape and each absorbs only its own gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId {
    store: u64,
    index: usize,
}

/// One trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    entries: Vec<Parameter>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { uid: STORE_COUNTER.fetch_add(1, Ordering::Relaxed), entries: Vec::new() }
    }

    /// Register a parameter. Names must be unique within one store.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            self.entries.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Parameter { name: name.to_string(), value, grad });
        ParamId { store: self.uid, index: self.entries.len() - 1 }
    }

    fn index_of(&self, id: ParamId) -> usize {
        assert_eq!(id.store, self.uid, "ParamId belongs to a different store");
        id.index
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[self.index_of(id)].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        let i = self.index_of(id);
        &mut self.entries[i].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[self.index_of(id)].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[self.index_of(id)].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(|i| ParamId { store: self.uid, index: i })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId { store: self.uid, index: i }, p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|p| p.name == name)
            .map(|i| ParamId { store: self.uid, index: i })
    }

    /// Put every parameter on the tape, in registration order; gradients flow
    /// back into this store through `absorb_grads`.
    pub fn bind_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.iter().map(|(id, p)| tape.watch(id, &p.value)).collect()
    }

    /// All parameter values concatenated into one row tensor, in registration
    /// order. Inverse of `vars_from_flat`'s layout.
    pub fn flatten(&self) -> Tensor {
        let data: Vec<f64> =
            self.entries.iter().flat_map(|p| p.value.as_slice().iter().copied()).collect();
        Tensor::from_vec(&[1, data.len()], data).expect("flatten layout")
    }

    /// Overwrite parameter values from a flat row tensor laid out like
    /// `flatten`.
    pub fn load_flat(&mut self, flat: &Tensor) -> Result<()> {
        if flat.numel() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values, store holds {}",
                flat.numel(),
                self.num_scalars()
            )));
        }
        let mut at = 0;
        for p in &mut self.entries {
            let n = p.value.numel();
            p.value.as_mut_slice().copy_from_slice(&flat.as_slice()[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Carve a flat row var on the tape into per-parameter vars with this
    /// store's shapes, in registration order. Lets a whole module be
    /// differentiated with respect to one flat input, which is what the
    /// finite-difference harness wants.
    pub fn vars_from_flat(&self, tape: &mut Tape, flat: Var) -> Result<Vec<Var>> {
        if tape.value(flat).numel() != self.num_scalars() {
            return Err(Error::ShapeMismatch(format!(
                "flat var has {} values, store holds {}",
                tape.value(flat).numel(),
                self.num_scalars()
            )));
        }
        let mut out = Vec::with_capacity(self.entries.len());
        let mut at = 0;
        for p in &self.entries {
            let n = p.value.numel();
            let piece = tape.slice_cols(flat, at, n)?;
            out.push(tape.reshape(piece, p.value.shape())?);
            at += n;
        }
        Ok(out)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Add the tape's watched gradients into the store, ignoring entries that
    /// belong to other stores. Errors on non-finite gradient values.
    pub fn absorb_grads(&mut self, tape: &Tape) -> Result<()> {
        for (id, g) in tape.watched_grads() {
            if id.store != self.uid {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(self.entries[id.index].name.clone()));
            }
            let acc = &mut self.entries[id.index].grad;
            debug_assert_eq!(acc.shape(), g.shape());
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Total number of scalar values across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Bitwise equality of all parameter values, for freeze audits.
    pub fn values_bitwise_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .as_slice()
                        .iter()
                        .zip(b.value.as_slice())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Adam with bias correction.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update from the store's accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (i, &id) in ids.iter().enumerate() {
            let g = store.grad(id).clone();
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(store.name(id).to_string()));
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((mj, vj), &gj) in
                m.as_mut_slice().iter_mut().zip(v.as_mut_slice()).zip(g.as_slice())
            {
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * gj;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * gj * gj;
            }
            let value = store.value_mut(id);
            for ((wj, &mj), &vj) in
                value.as_mut_slice().iter_mut().zip(m.as_slice()).zip(v.as_slice())
            {
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                *wj -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}
