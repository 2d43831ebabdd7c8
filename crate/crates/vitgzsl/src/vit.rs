//! Miniature vision transformer backbone.
//!
//! An image is cut into non-overlapping patches, linearly embedded, prefixed
//! with a learned CLS token, summed with a learned positional embedding, and
//! pushed through pre-norm transformer layers:
//!
//!   Z^l = MHSA(LN(X^{l-1})) + X^{l-1}
//!   X^l = MLP(LN(Z^l)) + Z^l
//!
//! Per-layer CLS and patch features are exposed for the downstream modules.
//! Once pretrained on seen-class labels, the backbone stays frozen; nothing
//! downstream writes to its parameters.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::weights;

#[derive(Debug, Clone, PartialEq)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4,
        }
    }
}

/// Budget for supervised backbone pretraining. The default is deliberately
/// light: features extracted after a long run cluster so tightly around the
/// training classes that held-out classes become inseparable downstream.
#[derive(Debug, Clone, Copy)]
pub struct BackboneTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for BackboneTrainConfig {
    fn default() -> Self {
        BackboneTrainConfig { epochs: 2, lr: 1e-3, batch_size: 32 }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_row_width(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::IndivisibleImage(format!(
                "size {} and patch {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_layers == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return Err(Error::ShapeMismatch(
                "num_layers, channels, mlp_ratio must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-layer CLS and patch features of one image.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    /// cls[l] is the CLS row after layer l+1; patches[l] the N patch rows.
    pub cls: Vec<Tensor>,
    pub patches: Vec<Tensor>,
}

impl LayerFeatures {
    pub fn num_layers(&self) -> usize {
        self.cls.len()
    }

    /// CLS feature of 1-based layer `l` as a [1 x D] row.
    pub fn cls_at(&self, l: usize) -> Result<&Tensor> {
        self.check_layer(l)?;
        Ok(&self.cls[l - 1])
    }

    /// Patch features of 1-based layer `l`, [N x D].
    pub fn patches_at(&self, l: usize) -> Result<&Tensor> {
        self.check_layer(l)?;
        Ok(&self.patches[l - 1])
    }

    fn check_layer(&self, l: usize) -> Result<()> {
        if l == 0 || l > self.cls.len() {
            return Err(Error::LayerOutOfRange { layer: l, num_layers: self.cls.len() });
        }
        Ok(())
    }
}

struct LayerIds {
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

pub struct VitBackbone {
    pub cfg: VitConfig,
    store: ParamStore,
    embed_w: ParamId,
    embed_b: ParamId,
    cls_token: ParamId,
    pos_embed: ParamId,
    layers: Vec<LayerIds>,
    head_w: Option<ParamId>,
    head_b: Option<ParamId>,
    head_classes: usize,
}

impl VitBackbone {
    pub fn new(cfg: VitConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.embed_dim;
        let n = cfg.num_patches();
        let pw = cfg.patch_row_width();

        let embed_w = store.add("embed.w", rng::trunc_normal_tensor(&[pw, d], 0.02, rng));
        let embed_b = store.add("embed.b", Tensor::zeros(&[1, d]));
        let cls_token = store.add("cls_token", rng::trunc_normal_tensor(&[1, d], 0.02, rng));
        let pos_embed =
            store.add("pos_embed", rng::trunc_normal_tensor(&[n + 1, d], 0.02, rng));

        let hidden = cfg.mlp_hidden();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIds {
                ln1_gain: store.add(&p("ln1.gain"), Tensor::filled(&[1, d], 1.0)),
                ln1_bias: store.add(&p("ln1.bias"), Tensor::zeros(&[1, d])),
                wq: store.add(&p("attn.wq"), rng::trunc_normal_tensor(&[d, d], 0.02, rng)),
                bq: store.add(&p("attn.bq"), Tensor::zeros(&[1, d])),
                wk: store.add(&p("attn.wk"), rng::trunc_normal_tensor(&[d, d], 0.02, rng)),
                bk: store.add(&p("attn.bk"), Tensor::zeros(&[1, d])),
                wv: store.add(&p("attn.wv"), rng::trunc_normal_tensor(&[d, d], 0.02, rng)),
                bv: store.add(&p("attn.bv"), Tensor::zeros(&[1, d])),
                wo: store.add(&p("attn.wo"), rng::trunc_normal_tensor(&[d, d], 0.02, rng)),
                bo: store.add(&p("attn.bo"), Tensor::zeros(&[1, d])),
                ln2_gain: store.add(&p("ln2.gain"), Tensor::filled(&[1, d], 1.0)),
                ln2_bias: store.add(&p("ln2.bias"), Tensor::zeros(&[1, d])),
                w1: store.add(&p("mlp.w1"), rng::trunc_normal_tensor(&[d, hidden], 0.02, rng)),
                b1: store.add(&p("mlp.b1"), Tensor::zeros(&[1, hidden])),
                w2: store.add(&p("mlp.w2"), rng::trunc_normal_tensor(&[hidden, d], 0.02, rng)),
                b2: store.add(&p("mlp.b2"), Tensor::zeros(&[1, d])),
            });
        }

        Ok(VitBackbone {
            cfg,
            store,
            embed_w,
            embed_b,
            cls_token,
            pos_embed,
            layers,
            head_w: None,
            head_b: None,
            head_classes: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Zero a layer's residual-branch output projections (attention output
    /// and second MLP weight/bias). With all layers zeroed the backbone is an
    /// identity map over the embedded sequence.
    pub fn zero_residual_branches(&mut self) {
        for l in 0..self.layers.len() {
            for id in [self.layers[l].wo, self.layers[l].bo, self.layers[l].w2, self.layers[l].b2]
            {
                let t = self.store.value_mut(id);
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        weights::save_weights(path, &[("", &self.store)])
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        weights::load_weights(path, &mut [("", &mut self.store)])
    }

    /// Cut an image [C x H x W] into N rows of C*P*P values, raster order.
    pub fn patchify(image: &Tensor, patch_size: usize) -> Result<Tensor> {
        let shape = image.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "patchify wants [C x H x W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::IndivisibleImage(format!(
                "{h}x{w} and patch {patch_size}"
            )));
        }
        let (gh, gw) = (h / patch_size, w / patch_size);
        let row_width = c * patch_size * patch_size;
        let mut out = Tensor::zeros(&[gh * gw, row_width]);
        let src = image.as_slice();
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let dst = &mut out.as_mut_slice()[row * row_width..(row + 1) * row_width];
                let mut at = 0;
                for ch in 0..c {
                    for py in 0..patch_size {
                        let y = gy * patch_size + py;
                        let base = ch * h * w + y * w + gx * patch_size;
                        dst[at..at + patch_size].copy_from_slice(&src[base..base + patch_size]);
                        at += patch_size;
                    }
                }
            }
        }
        Ok(out)
    }

    fn bind(&self, tape: &mut Tape) -> BoundVit {
        BoundVit::from_ids(self, |id| tape.watch(id, self.store.value(id)))
    }

    /// Linear patch embedding, CLS prepend, positional embedding.
    fn embed_on(&self, tape: &mut Tape, bound: &BoundVit, patches: Var) -> Result<Var> {
        let tokens = tape.linear(patches, bound.embed_w, bound.embed_b)?;
        let seq = tape.concat_rows(&[bound.cls_token, tokens])?;
        tape.add(seq, bound.pos_embed)
    }

    /// One pre-norm transformer layer. Returns the output tokens and the
    /// per-head attention matrices.
    fn layer_on(
        &self,
        tape: &mut Tape,
        bound: &BoundLayer,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.cfg.embed_dim;
        let heads = self.cfg.num_heads;
        let dh = self.cfg.head_dim();

        let xhat = tape.layer_norm(x, bound.ln1_gain, bound.ln1_bias)?;
        let q = tape.linear(xhat, bound.wq, bound.bq)?;
        let k = tape.linear(xhat, bound.wk, bound.bk)?;
        let v = tape.linear(xhat, bound.wv, bound.bv)?;

        let mut sa = Vec::with_capacity(heads);
        let mut attns = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.affine(scores, 1.0 / (dh as f64).sqrt(), 0.0);
            let attn = tape.softmax_rows(scaled)?;
            attns.push(attn);
            sa.push(tape.matmul(attn, vh)?);
        }
        let stacked = if sa.len() == 1 { sa[0] } else { tape.concat_cols(&sa)? };
        debug_assert_eq!(tape.value(stacked).cols(), d);
        let mhsa = tape.linear(stacked, bound.wo, bound.bo)?;
        let z = tape.add(mhsa, x)?;

        let zhat = tape.layer_norm(z, bound.ln2_gain, bound.ln2_bias)?;
        let h1 = tape.linear(zhat, bound.w1, bound.b1)?;
        let act = tape.gelu(h1);
        let mlp = tape.linear(act, bound.w2, bound.b2)?;
        Ok((tape.add(mlp, z)?, attns))
    }

    /// Apply 1-based layer `layer` to an arbitrary token matrix [M x D].
    pub fn transformer_layer(&self, layer: usize, tokens: &Tensor) -> Result<Tensor> {
        if layer == 0 || layer > self.layers.len() {
            return Err(Error::LayerOutOfRange { layer, num_layers: self.layers.len() });
        }
        if tokens.cols() != self.cfg.embed_dim {
            return Err(Error::ShapeMismatch(format!(
                "tokens have {} columns, embed_dim is {}",
                tokens.cols(),
                self.cfg.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.leaf(tokens);
        let (out, _) = self.layer_on(&mut tape, &bound.layers[layer - 1], x)?;
        Ok(tape.value(out).clone())
    }

    /// Per-layer, per-head self-attention matrices for one image, each
    /// [(N+1) x (N+1)] row-stochastic.
    pub fn attention_matrices(&self, image: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let patches = Self::patchify(image, self.cfg.patch_size)?;
        let pv = tape.leaf(&patches);
        let mut x = self.embed_on(&mut tape, &bound, pv)?;
        let mut all = Vec::with_capacity(self.layers.len());
        for layer in &bound.layers {
            let (out, attns) = self.layer_on(&mut tape, layer, x)?;
            x = out;
            all.push(attns.iter().map(|&a| tape.value(a).clone()).collect());
        }
        Ok(all)
    }

    /// Token sequences after every layer, on an existing tape.
    fn forward_on(&self, tape: &mut Tape, bound: &BoundVit, image: &Tensor) -> Result<Vec<Var>> {
        let patches = Self::patchify(image, self.cfg.patch_size)?;
        if patches.cols() != self.cfg.patch_row_width() {
            return Err(Error::ShapeMismatch(format!(
                "patch row width {} does not match config {}",
                patches.cols(),
                self.cfg.patch_row_width()
            )));
        }
        let pv = tape.leaf(&patches);
        let mut x = self.embed_on(tape, bound, pv)?;
        let mut outs = Vec::with_capacity(self.layers.len());
        for layer in &bound.layers {
            let (out, _) = self.layer_on(tape, layer, x)?;
            x = out;
            outs.push(x);
        }
        Ok(outs)
    }

    /// CLS and patch features for every layer of one image.
    pub fn forward_all_layers(&self, image: &Tensor) -> Result<LayerFeatures> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let outs = self.forward_on(&mut tape, &bound, image)?;
        let n = self.cfg.num_patches();
        let mut cls = Vec::with_capacity(outs.len());
        let mut patches = Vec::with_capacity(outs.len());
        for &o in &outs {
            let t = tape.value(o);
            if !t.is_finite() {
                return Err(Error::NonFinite("backbone forward".into()));
            }
            cls.push(Tensor::from_vec(&[1, self.cfg.embed_dim], t.row_slice(0).to_vec())?);
            patches.push(Tensor::from_vec(
                &[n, self.cfg.embed_dim],
                t.as_slice()[self.cfg.embed_dim..].to_vec(),
            )?);
        }
        Ok(LayerFeatures { cls, patches })
    }

    /// The embedded token sequence before any transformer layer.
    pub fn embedded_sequence(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let patches = Self::patchify(image, self.cfg.patch_size)?;
        let pv = tape.leaf(&patches);
        let seq = self.embed_on(&mut tape, &bound, pv)?;
        Ok(tape.value(seq).clone())
    }

    /// Build the classification head if absent. Needed before `load` when
    /// the checkpoint was saved after supervised training.
    pub fn ensure_head(&mut self, classes: usize, rng: &mut Rng) -> Result<()> {
        if self.head_w.is_some() {
            if self.head_classes != classes {
                return Err(Error::ShapeMismatch(format!(
                    "classifier head already built for {} classes, asked for {classes}",
                    self.head_classes
                )));
            }
            return Ok(());
        }
        let d = self.cfg.embed_dim;
        self.head_w =
            Some(self.store.add("head.w", rng::trunc_normal_tensor(&[d, classes], 0.02, rng)));
        self.head_b = Some(self.store.add("head.b", Tensor::zeros(&[1, classes])));
        self.head_classes = classes;
        Ok(())
    }

    /// Supervised pretraining with the default budget.
    pub fn train_supervised_default(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        classes: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        let cfg = BackboneTrainConfig::default();
        self.train_supervised(images, labels, classes, cfg.epochs, cfg.lr, cfg.batch_size, rng)
    }

    /// Supervised pretraining: cross-entropy on final-layer CLS through a
    /// linear head, minibatch Adam. Labels must be dense indices 0..classes.
    /// Returns final-epoch training accuracy in [0, 1].
    pub fn train_supervised(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        classes: usize,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        rng: &mut Rng,
    ) -> Result<f64> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(Error::EmptyDataset);
        }
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        self.ensure_head(classes, rng)?;
        let mut adam = Adam::new(lr);
        let bs = batch_size.max(1);

        for _ in 0..epochs {
            let order = rng::permutation(images.len(), rng);
            for chunk in order.chunks(bs) {
                let mut tape = Tape::new();
                let bound = self.bind(&mut tape);
                let hw = tape.watch(self.head_w.unwrap(), self.store.value(self.head_w.unwrap()));
                let hb = tape.watch(self.head_b.unwrap(), self.store.value(self.head_b.unwrap()));
                let mut losses = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let outs = self.forward_on(&mut tape, &bound, &images[i])?;
                    let last = *outs.last().expect("at least one layer");
                    let cls = tape.slice_rows(last, 0, 1)?;
                    let logits = tape.linear(cls, hw, hb)?;
                    losses.push(tape.cross_entropy(logits, &labels[i..i + 1])?);
                }
                let loss = tape.mean_of(&losses)?;
                if !tape.value(loss).is_finite() {
                    return Err(Error::NonFinite("backbone training loss".into()));
                }
                tape.backward(loss)?;
                self.store.absorb_grads(&tape)?;
                adam.step(&mut self.store)?;
            }
        }

        let mut correct = 0usize;
        for (img, &label) in images.iter().zip(labels) {
            if self.classify(img)? == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / images.len() as f64)
    }

    /// Mean training loss over the given set, for monotonicity checks.
    pub fn training_loss(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let (Some(hw), Some(hb)) = (self.head_w, self.head_b) else {
            return Err(Error::UntrainedModel("backbone classifier head"));
        };
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let hwv = tape.watch(hw, self.store.value(hw));
        let hbv = tape.watch(hb, self.store.value(hb));
        let mut losses = Vec::with_capacity(images.len());
        for (img, &label) in images.iter().zip(labels) {
            let outs = self.forward_on(&mut tape, &bound, img)?;
            let last = *outs.last().expect("at least one layer");
            let cls = tape.slice_rows(last, 0, 1)?;
            let logits = tape.linear(cls, hwv, hbv)?;
            losses.push(tape.cross_entropy(logits, &[label])?);
        }
        let loss = tape.mean_of(&losses)?;
        Ok(tape.value(loss).item())
    }

    /// Predicted class of one image through the training head.
    pub fn classify(&self, image: &Tensor) -> Result<usize> {
        let (Some(hw), Some(hb)) = (self.head_w, self.head_b) else {
            return Err(Error::UntrainedModel("backbone classifier head"));
        };
        let feats = self.forward_all_layers(image)?;
        let cls = feats.cls_at(self.cfg.num_layers)?;
        let logits = crate::tape::matmul_nn(cls, self.store.value(hw));
        let b = self.store.value(hb);
        let row: Vec<f64> =
            logits.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x + y).collect();
        Ok(Tensor::row(&row).argmax())
    }
}

struct BoundLayer {
    ln1_gain: Var,
    ln1_bias: Var,
    wq: Var,
    bq: Var,
    wk: Var,
    bk: Var,
    wv: Var,
    bv: Var,
    wo: Var,
    bo: Var,
    ln2_gain: Var,
    ln2_bias: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct BoundVit {
    embed_w: Var,
    embed_b: Var,
    cls_token: Var,
    pos_embed: Var,
    layers: Vec<BoundLayer>,
}

impl BoundVit {
    fn from_ids(model: &VitBackbone, mut get: impl FnMut(ParamId) -> Var) -> Self {
        BoundVit {
            embed_w: get(model.embed_w),
            embed_b: get(model.embed_b),
            cls_token: get(model.cls_token),
            pos_embed: get(model.pos_embed),
            layers: model
                .layers
                .iter()
                .map(|l| BoundLayer {
                    ln1_gain: get(l.ln1_gain),
                    ln1_bias: get(l.ln1_bias),
                    wq: get(l.wq),
                    bq: get(l.bq),
                    wk: get(l.wk),
                    bk: get(l.bk),
                    wv: get(l.wv),
                    bv: get(l.bv),
                    wo: get(l.wo),
                    bo: get(l.bo),
                    ln2_gain: get(l.ln2_gain),
                    ln2_bias: get(l.ln2_bias),
                    w1: get(l.w1),
                    b1: get(l.b1),
                    w2: get(l.w2),
                    b2: get(l.b2),
                })
                .collect(),
        }
    }
}
