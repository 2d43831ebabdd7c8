//! Attribute attention module: multi-head cross-attention where a synthetic
//! attribute vector queries patch features.
//!
//!   Q = Linear_Q(a_hat)            [1 x d]
//!   K = Linear_K(X_patch)          [N x d]
//!   V = X_patch + Linear_V(X_patch)
//!   A_p = Softmax(Q K^T / sqrt(d_h))  per head
//!   x_AAM = [A_p V]_heads concatenated
//!
//! Dropout hits only the linear projection outputs, never the value residual,
//! and only in training mode. An auxiliary classifier (leaky-ReLU then
//! linear) over x_AAM supplies the CE term of the joint loss; the MSE term
//! pulls the feature-to-attribute net toward real attributes. Patch features
//! arrive precomputed, so the backbone sits outside the gradient path.

use crate::error::{Error, Result};
use crate::f2a::{AttributeKind, AttributeVector, F2aBound, F2aNet};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const AAM_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct AamConfig {
    /// Patch feature width d (the backbone embed dim).
    pub feat_dim: usize,
    /// Attribute vector length A.
    pub attr_dim: usize,
    pub num_heads: usize,
    /// Seen-class count, the auxiliary classifier's output width.
    pub num_seen: usize,
    pub dropout: f64,
    /// Scale attention scores by sqrt(d) instead of the per-head sqrt(d_h).
    pub scale_by_model_width: bool,
}

impl AamConfig {
    pub fn new(feat_dim: usize, attr_dim: usize, num_heads: usize, num_seen: usize) -> Self {
        AamConfig {
            feat_dim,
            attr_dim,
            num_heads,
            num_seen,
            dropout: 0.5,
            scale_by_model_width: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feat_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.attr_dim == 0 || self.num_seen == 0 {
            return Err(Error::ShapeMismatch("aam dimensions must be positive".into()));
        }
        if self.num_heads == 0 || self.feat_dim % self.num_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "feat_dim {} not divisible by {} heads",
                self.feat_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::OutOfRange(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub struct Aam {
    pub cfg: AamConfig,
    store: ParamStore,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wc: ParamId,
    bc: ParamId,
}

#[derive(Clone, Copy)]
pub struct AamBound {
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wc: Var,
    bc: Var,
}

impl AamBound {
    /// Rebuild from vars in registration order (wq, bq, wk, bk, wv, bv, wc, bc).
    pub fn from_vars(vars: &[Var]) -> Self {
        AamBound {
            wq: vars[0],
            bq: vars[1],
            wk: vars[2],
            bk: vars[3],
            wv: vars[4],
            bv: vars[5],
            wc: vars[6],
            bc: vars[7],
        }
    }
}

/// Per-head plus aggregated attention over the patch grid.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// One [1 x N] row-stochastic map per head.
    pub per_head: Vec<Tensor>,
    /// Mean over heads, [1 x N].
    pub averaged: Tensor,
    /// `averaged` reshaped to the patch grid, row-major.
    pub grid: Tensor,
    /// Min-max normalized grid in [0, 1]; all zeros when the map is constant.
    pub normalized: Tensor,
}

/// (x - min) / (max - min) elementwise; a constant input maps to all zeros.
pub fn min_max_normalize(t: &Tensor) -> Tensor {
    let lo = t.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Tensor::zeros(t.shape());
    }
    t.map(|v| (v - lo) / (hi - lo))
}

/// Scaled dot-product attention row for one head: Softmax(q k^T / sqrt(scale)).
pub fn patch_attention(q: &Tensor, k: &Tensor, scale_dim: usize) -> Result<Tensor> {
    if q.rows() != 1 || q.cols() != k.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query {:?} against keys {:?}",
            q.shape(),
            k.shape()
        )));
    }
    let mut tape = Tape::new();
    let qv = tape.leaf(q);
    let kv = tape.leaf(k);
    let kt = tape.transpose(kv)?;
    let scores = tape.matmul(qv, kt)?;
    let scaled = tape.affine(scores, 1.0 / (scale_dim as f64).sqrt(), 0.0);
    let attn = tape.softmax_rows(scaled)?;
    Ok(tape.value(attn).clone())
}

/// Map global class labels to indices into `seen_classes`, rejecting any
/// label outside the seen set.
pub fn seen_index_map(labels: &[usize], seen_classes: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            seen_classes
                .iter()
                .position(|&s| s == l)
                .ok_or(Error::UnseenClassInBatch(l))
        })
        .collect()
}

/// Eval-mode loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLossValue {
    pub total: f64,
    pub mse: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AamTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub use_mse: bool,
}

impl Default for AamTrainConfig {
    fn default() -> Self {
        AamTrainConfig { epochs: 60, lr: 1e-2, batch_size: 16, use_mse: true }
    }
}

/// One sample's precomputed inputs to the joint training stage.
pub struct AamTrainData<'a> {
    /// CLS features from layer l1, [n x D].
    pub cls: &'a Tensor,
    /// Patch features from layer l2, n entries of [N x d].
    pub patches: &'a [Tensor],
    /// Real per-sample attribute rows, [n x A].
    pub attributes: &'a Tensor,
    /// Global class ids.
    pub labels: &'a [usize],
}

impl Aam {
    pub fn new(cfg: AamConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let (d, a, s) = (cfg.feat_dim, cfg.attr_dim, cfg.num_seen);
        let wq = store.add("wq", rng::trunc_normal_tensor(&[a, d], 0.02, rng));
        let bq = store.add("bq", Tensor::zeros(&[1, d]));
        let wk = store.add("wk", rng::trunc_normal_tensor(&[d, d], 0.02, rng));
        let bk = store.add("bk", Tensor::zeros(&[1, d]));
        let wv = store.add("wv", rng::trunc_normal_tensor(&[d, d], 0.02, rng));
        let bv = store.add("bv", Tensor::zeros(&[1, d]));
        let wc = store.add("wc", rng::trunc_normal_tensor(&[d, s], 0.02, rng));
        let bc = store.add("bc", Tensor::zeros(&[1, s]));
        Ok(Aam { cfg, store, wq, bq, wk, bk, wv, bv, wc, bc })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn bind(&self, tape: &mut Tape) -> AamBound {
        let mut get = |id: ParamId| tape.watch(id, self.store.value(id));
        AamBound {
            wq: get(self.wq),
            bq: get(self.bq),
            wk: get(self.wk),
            bk: get(self.bk),
            wv: get(self.wv),
            bv: get(self.bv),
            wc: get(self.wc),
            bc: get(self.bc),
        }
    }

    fn drop_maybe(
        &self,
        tape: &mut Tape,
        x: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        if training && self.cfg.dropout > 0.0 {
            tape.dropout(x, self.cfg.dropout, true, rng)
        } else {
            Ok(x)
        }
    }

    /// Tape-level Q/K/V projections with the value-side residual.
    pub fn project_qkv_on(
        &self,
        tape: &mut Tape,
        bound: &AamBound,
        attr: Var,
        patches: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Var, Var)> {
        if tape.value(attr).cols() != self.cfg.attr_dim || tape.value(attr).rows() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "attribute query {:?}, expected [1 x {}]",
                tape.value(attr).shape(),
                self.cfg.attr_dim
            )));
        }
        if tape.value(patches).cols() != self.cfg.feat_dim {
            return Err(Error::ShapeMismatch(format!(
                "patch features {:?}, expected width {}",
                tape.value(patches).shape(),
                self.cfg.feat_dim
            )));
        }
        let q = tape.linear(attr, bound.wq, bound.bq)?;
        let q = self.drop_maybe(tape, q, training, rng)?;
        let k = tape.linear(patches, bound.wk, bound.bk)?;
        let k = self.drop_maybe(tape, k, training, rng)?;
        let vlin = tape.linear(patches, bound.wv, bound.bv)?;
        let vlin = self.drop_maybe(tape, vlin, training, rng)?;
        let v = tape.add(patches, vlin)?;
        Ok((q, k, v))
    }

    /// Tape-level attended feature; returns x_AAM [1 x d] and the per-head
    /// attention rows.
    pub fn feature_on(
        &self,
        tape: &mut Tape,
        bound: &AamBound,
        attr: Var,
        patches: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let (q, k, v) = self.project_qkv_on(tape, bound, attr, patches, training, rng)?;
        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();
        let scale_dim = if self.cfg.scale_by_model_width { self.cfg.feat_dim } else { dh };
        let inv = 1.0 / (scale_dim as f64).sqrt();

        let mut parts = Vec::with_capacity(heads);
        let mut attns = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.affine(scores, inv, 0.0);
            let attn = tape.softmax_rows(scaled)?;
            attns.push(attn);
            parts.push(tape.matmul(attn, vh)?);
        }
        let x = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts)? };
        Ok((x, attns))
    }

    /// Tape-level auxiliary classifier logits.
    pub fn aux_classify_on(&self, tape: &mut Tape, bound: &AamBound, x: Var) -> Result<Var> {
        let act = tape.leaky_relu(x, AAM_LEAKY_SLOPE);
        tape.linear(act, bound.wc, bound.bc)
    }

    fn check_query_kind(attr: &AttributeVector) -> Result<()> {
        if attr.kind == AttributeKind::Real {
            return Err(Error::KindMismatch(
                "attention queries must be synthetic attributes or one-hot probes".into(),
            ));
        }
        Ok(())
    }

    /// Eval-mode Q/K/V for one query against one patch matrix.
    pub fn project_qkv(
        &self,
        attr: &AttributeVector,
        patches: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        Self::check_query_kind(attr)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let a = tape.leaf(&attr.values);
        let p = tape.leaf(patches);
        let mut dummy = rng::seeded(0);
        let (q, k, v) = self.project_qkv_on(&mut tape, &bound, a, p, false, &mut dummy)?;
        Ok((tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()))
    }

    /// Eval-mode attended feature x_AAM [1 x d].
    pub fn aam_feature(&self, attr: &AttributeVector, patches: &Tensor) -> Result<Tensor> {
        Self::check_query_kind(attr)?;
        let (x, _) = self.feature_and_attention(attr, patches)?;
        Ok(x)
    }

    fn feature_and_attention(
        &self,
        attr: &AttributeVector,
        patches: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let a = tape.leaf(&attr.values);
        let p = tape.leaf(patches);
        let mut dummy = rng::seeded(0);
        let (x, attns) = self.feature_on(&mut tape, &bound, a, p, false, &mut dummy)?;
        let x_val = tape.value(x).clone();
        if !x_val.is_finite() {
            return Err(Error::NonFinite("aam feature".into()));
        }
        Ok((x_val, attns.iter().map(|&a| tape.value(a).clone()).collect()))
    }

    /// Eval-mode auxiliary logits for a batch of attended features [B x d].
    pub fn aux_classify(&self, x_aam: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(&x_aam.as_row_matrix()?);
        let logits = self.aux_classify_on(&mut tape, &bound, x)?;
        Ok(tape.value(logits).clone())
    }

    /// Attention maps for any query kind, including real attributes.
    pub fn attention_map(&self, attr: &AttributeVector, patches: &Tensor) -> Result<AttentionMap> {
        let (_, per_head) = self.feature_and_attention(attr, patches)?;
        let n = patches.rows();
        let mut averaged = Tensor::zeros(&[1, n]);
        for head in &per_head {
            for (o, v) in averaged.as_mut_slice().iter_mut().zip(head.as_slice()) {
                *o += v / per_head.len() as f64;
            }
        }
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(Error::ShapeMismatch(format!("{n} patches do not form a square grid")));
        }
        let grid = averaged.reshape(&[g, g])?;
        let normalized = min_max_normalize(&grid);
        Ok(AttentionMap { per_head, averaged, grid, normalized })
    }

    /// Build the joint loss graph over one batch. Returns (total, mse, ce);
    /// `total` is ce alone when `use_mse` is false, though the mse value is
    /// still reported.
    #[allow(clippy::too_many_arguments)]
    pub fn joint_loss_on(
        &self,
        tape: &mut Tape,
        bound: &AamBound,
        f2a: &F2aNet,
        f2a_bound: &F2aBound,
        cls: &Tensor,
        patches: &[&Tensor],
        attributes: &Tensor,
        seen_idx: &[usize],
        use_mse: bool,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Var, Var)> {
        let b = cls.rows();
        if b == 0 {
            return Err(Error::EmptyDataset);
        }
        if patches.len() != b || attributes.rows() != b || seen_idx.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "batch pieces disagree: {b} cls rows, {} patch sets, {} attribute rows, {} labels",
                patches.len(),
                attributes.rows(),
                seen_idx.len()
            )));
        }
        for &s in seen_idx {
            if s >= self.cfg.num_seen {
                return Err(Error::LabelOutOfRange { label: s, classes: self.cfg.num_seen });
            }
        }

        let cls_var = tape.leaf(cls);
        let synth = f2a.forward_on(tape, f2a_bound, cls_var)?;

        let mut feats = Vec::with_capacity(b);
        for (i, p) in patches.iter().enumerate() {
            let a_i = tape.slice_rows(synth, i, 1)?;
            let p_i = tape.leaf(p);
            let (x, _) = self.feature_on(tape, bound, a_i, p_i, training, rng)?;
            feats.push(x);
        }
        let x_all = tape.concat_rows(&feats)?;
        let logits = self.aux_classify_on(tape, bound, x_all)?;
        let ce = tape.cross_entropy(logits, seen_idx)?;

        // Per-sample squared attribute-vector norm, averaged over the batch.
        // mse_loss divides by every element, so scale the per-dim mean back
        // up to a norm; the CE term is a batch mean of per-sample scalars,
        // and the two must stay on the same footing.
        let target = tape.leaf(attributes);
        let mse_per_dim = tape.mse_loss(synth, target)?;
        let mse = tape.affine(mse_per_dim, attributes.cols() as f64, 0.0);

        let total = if use_mse { tape.add(mse, ce)? } else { ce };
        Ok((total, mse, ce))
    }

    /// Eval-mode joint loss over a full set, dropout off.
    pub fn joint_loss(
        &self,
        f2a: &F2aNet,
        data: &AamTrainData,
        seen_classes: &[usize],
        use_mse: bool,
    ) -> Result<JointLossValue> {
        let seen_idx = seen_index_map(data.labels, seen_classes)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let f2a_bound = f2a.bind(&mut tape);
        let patch_refs: Vec<&Tensor> = data.patches.iter().collect();
        let mut dummy = rng::seeded(0);
        let (total, mse, ce) = self.joint_loss_on(
            &mut tape,
            &bound,
            f2a,
            &f2a_bound,
            data.cls,
            &patch_refs,
            data.attributes,
            &seen_idx,
            use_mse,
            false,
            &mut dummy,
        )?;
        Ok(JointLossValue {
            total: tape.value(total).item(),
            mse: tape.value(mse).item(),
            ce: tape.value(ce).item(),
        })
    }
}

/// Joint minibatch training of the attention module and the
/// feature-to-attribute net. Returns the eval-mode loss after every epoch.
pub fn train_aam_f2a(
    aam: &mut Aam,
    f2a: &mut F2aNet,
    data: &AamTrainData,
    seen_classes: &[usize],
    cfg: &AamTrainConfig,
    rng: &mut Rng,
) -> Result<Vec<JointLossValue>> {
    let n = data.cls.rows();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let seen_idx = seen_index_map(data.labels, seen_classes)?;
    if data.patches.len() != n || data.attributes.rows() != n || data.labels.len() != n {
        return Err(Error::ShapeMismatch("training pieces differ in length".into()));
    }
    let mut adam_aam = Adam::new(cfg.lr);
    let mut adam_f2a = Adam::new(cfg.lr);
    let bs = cfg.batch_size.max(1);
    let a = data.attributes.cols();

    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let order = rng::permutation(n, rng);
        for chunk in order.chunks(bs) {
            let mut cls = Tensor::zeros(&[chunk.len(), data.cls.cols()]);
            let mut attrs = Tensor::zeros(&[chunk.len(), a]);
            let mut patches = Vec::with_capacity(chunk.len());
            let mut idx = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                cls.as_mut_slice()[r * data.cls.cols()..(r + 1) * data.cls.cols()]
                    .copy_from_slice(data.cls.row_slice(i));
                attrs.as_mut_slice()[r * a..(r + 1) * a]
                    .copy_from_slice(data.attributes.row_slice(i));
                patches.push(&data.patches[i]);
                idx.push(seen_idx[i]);
            }

            let mut tape = Tape::new();
            let bound = aam.bind(&mut tape);
            let f2a_bound = f2a.bind(&mut tape);
            let (total, _, _) = aam.joint_loss_on(
                &mut tape,
                &bound,
                f2a,
                &f2a_bound,
                &cls,
                &patches,
                &attrs,
                &idx,
                cfg.use_mse,
                true,
                rng,
            )?;
            if !tape.value(total).is_finite() {
                return Err(Error::NonFinite("joint training loss".into()));
            }
            tape.backward(total)?;
            aam.store_mut().absorb_grads(&tape)?;
            f2a.store_mut().absorb_grads(&tape)?;
            adam_aam.step(aam.store_mut())?;
            adam_f2a.step(f2a.store_mut())?;
        }
        curve.push(aam.joint_loss(f2a, data, seen_classes, cfg.use_mse)?);
    }
    Ok(curve)
}
