//! Generalized zero-shot evaluation: a softmax classifier over all classes is
//! trained on real seen-class features plus generated unseen-class features,
//! then scored with per-class top-1 accuracy on seen and unseen test splits
//! and their harmonic mean. Every feature row carries a taint so the split
//! hygiene (no test data in any training stage) is checkable, not assumed.

use std::collections::BTreeMap;

use crate::aam::{train_aam_f2a, Aam, AamConfig, AamTrainConfig, AamTrainData};
use crate::assembly::{assemble, FeatureVariant};
use crate::cvae::{train_cvae, Cvae, CvaeConfig, CvaeTrainConfig};
use crate::dataset::{GzslDataset, Taint};
use crate::error::{Error, Result};
use crate::f2a::{AttributeVector, F2aNet};
use crate::params::{Adam, ParamId, ParamStore};
use crate::rng::{self, STREAM_AAM, STREAM_CVAE};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vit::{LayerFeatures, VitBackbone};

/// Features with per-row provenance.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub taints: Vec<Taint>,
}

impl FeatureBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, taints: Vec<Taint>) -> Result<Self> {
        if labels.len() != features.rows() || taints.len() != features.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows with {} labels and {} taints",
                features.rows(),
                labels.len(),
                taints.len()
            )));
        }
        Ok(FeatureBatch { features, labels, taints })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training stages accept only original seen-train rows and generated rows.
pub fn audit_training_taints(taints: &[Taint]) -> Result<()> {
    for &t in taints {
        if t != Taint::SeenTrain && t != Taint::Synthetic {
            return Err(Error::TaintViolation(format!(
                "{t:?} feature offered to a training stage"
            )));
        }
    }
    Ok(())
}

/// Single linear layer plus softmax over the full class set.
#[derive(Debug)]
pub struct SoftmaxClassifier {
    store: ParamStore,
    w: ParamId,
    b: ParamId,
    pub feat_dim: usize,
    pub num_classes: usize,
}

impl SoftmaxClassifier {
    /// Zero initialization: the initial loss is exactly ln(num_classes).
    pub fn new(feat_dim: usize, num_classes: usize) -> Result<Self> {
        if feat_dim == 0 || num_classes == 0 {
            return Err(Error::ShapeMismatch("classifier dimensions must be positive".into()));
        }
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::zeros(&[feat_dim, num_classes]));
        let b = store.add("b", Tensor::zeros(&[1, num_classes]));
        Ok(SoftmaxClassifier { store, w, b, feat_dim, num_classes })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_width(&self, features: &Tensor) -> Result<()> {
        if features.cols() != self.feat_dim {
            return Err(Error::DimMismatch {
                name: "classifier input".into(),
                expected: vec![features.rows(), self.feat_dim],
                found: features.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        self.check_width(features)?;
        let mut tape = Tape::new();
        let x = tape.leaf(features);
        let w = tape.leaf(self.store.value(self.w));
        let b = tape.leaf(self.store.value(self.b));
        let out = tape.linear(x, w, b)?;
        Ok(tape.value(out).clone())
    }

    /// Row-stochastic class posteriors.
    pub fn probabilities(&self, features: &Tensor) -> Result<Tensor> {
        self.check_width(features)?;
        let mut tape = Tape::new();
        let x = tape.leaf(features);
        let w = tape.leaf(self.store.value(self.w));
        let b = tape.leaf(self.store.value(self.b));
        let logits = tape.linear(x, w, b)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(tape.value(probs).clone())
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row_slice(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    /// Mean cross-entropy of the labels under the current parameters.
    pub fn ce_loss(&self, features: &Tensor, labels: &[usize]) -> Result<f64> {
        self.check_width(features)?;
        let mut tape = Tape::new();
        let x = tape.leaf(features);
        let w = tape.leaf(self.store.value(self.w));
        let b = tape.leaf(self.store.value(self.b));
        let logits = tape.linear(x, w, b)?;
        let loss = tape.cross_entropy(logits, labels)?;
        Ok(tape.value(loss).item())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { epochs: 500, lr: 1e-2 }
    }
}

/// Full-batch Adam over the union of the given batches. Every class in
/// 0..num_classes must be represented; every row must carry a training taint.
pub fn train_classifier(
    batches: &[&FeatureBatch],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<SoftmaxClassifier> {
    let total: usize = batches.iter().map(|b| b.len()).sum();
    if total == 0 {
        return Err(Error::EmptyDataset);
    }
    let dim = batches[0].features.cols();
    let mut features = Tensor::zeros(&[total, dim]);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for batch in batches {
        audit_training_taints(&batch.taints)?;
        if batch.features.cols() != dim {
            return Err(Error::DimMismatch {
                name: "classifier training batch".into(),
                expected: vec![batch.features.rows(), dim],
                found: batch.features.shape().to_vec(),
            });
        }
        for r in 0..batch.len() {
            let l = batch.labels[r];
            if l >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
            }
            features.as_mut_slice()[row * dim..(row + 1) * dim]
                .copy_from_slice(batch.features.row_slice(r));
            labels.push(l);
            row += 1;
        }
    }
    for c in 0..num_classes {
        if !labels.contains(&c) {
            return Err(Error::MissingClass(c));
        }
    }

    let mut clf = SoftmaxClassifier::new(dim, num_classes)?;
    let mut adam = Adam::new(cfg.lr);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.leaf(&features);
        let w = tape.watch(clf.w, clf.store.value(clf.w));
        let b = tape.watch(clf.b, clf.store.value(clf.b));
        let logits = tape.linear(x, w, b)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        if !tape.value(loss).is_finite() {
            return Err(Error::NonFinite("classifier loss".into()));
        }
        tape.backward(loss)?;
        clf.store.absorb_grads(&tape)?;
        adam.step(&mut clf.store)?;
    }
    Ok(clf)
}

/// Mean over classes of within-class top-1 accuracy, in percent.
pub fn per_class_top1(preds: &[usize], labels: &[usize], class_set: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions against {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if class_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut acc = 0.0;
    for &c in class_set {
        let mut total = 0usize;
        let mut correct = 0usize;
        for (&p, &l) in preds.iter().zip(labels) {
            if l == c {
                total += 1;
                if p == c {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::EmptyClass(c));
        }
        acc += correct as f64 / total as f64;
    }
    Ok(100.0 * acc / class_set.len() as f64)
}

/// acc_h = 2 * acc_s * acc_u / (acc_s + acc_u), zero when both are zero.
pub fn harmonic_mean(acc_s: f64, acc_u: f64) -> Result<f64> {
    for v in [acc_s, acc_u] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::OutOfRange(format!("accuracy {v} outside [0, 100]")));
        }
    }
    if acc_s + acc_u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_s * acc_u / (acc_s + acc_u))
}

#[derive(Debug, Clone)]
pub struct GzslReport {
    pub acc_s: f64,
    pub acc_u: f64,
    pub acc_h: f64,
    pub per_class: BTreeMap<usize, f64>,
    /// Counts indexed [true group][predicted group], 0 = seen, 1 = unseen.
    pub confusion: [[usize; 2]; 2],
}

impl GzslReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("acc_s,acc_u,acc_h\n");
        out.push_str(&format!("{:.4},{:.4},{:.4}\n", self.acc_s, self.acc_u, self.acc_h));
        out.push_str("class,accuracy\n");
        for (c, a) in &self.per_class {
            out.push_str(&format!("{c},{a:.4}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seen accuracy    {:7.3}%\nunseen accuracy  {:7.3}%\nharmonic mean    {:7.3}%\n",
            self.acc_s, self.acc_u, self.acc_h
        );
        out.push_str(&format!(
            "group confusion  seen->seen {}  seen->unseen {}  unseen->seen {}  unseen->unseen {}\n",
            self.confusion[0][0], self.confusion[0][1], self.confusion[1][0], self.confusion[1][1]
        ));
        for (c, a) in &self.per_class {
            out.push_str(&format!("  class {c:3}  {a:7.3}%\n"));
        }
        out
    }
}

/// Train the joint classifier and score both test splits.
pub fn classify_and_report(
    train_batches: &[&FeatureBatch],
    seen_test: &FeatureBatch,
    unseen_test: &FeatureBatch,
    seen_classes: &[usize],
    unseen_classes: &[usize],
    num_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(SoftmaxClassifier, GzslReport)> {
    let clf = train_classifier(train_batches, num_classes, cfg)?;

    let seen_preds = clf.predict(&seen_test.features)?;
    let unseen_preds = clf.predict(&unseen_test.features)?;
    let acc_s = per_class_top1(&seen_preds, &seen_test.labels, seen_classes)?;
    let acc_u = per_class_top1(&unseen_preds, &unseen_test.labels, unseen_classes)?;
    let acc_h = harmonic_mean(acc_s, acc_u)?;

    let mut per_class = BTreeMap::new();
    for &c in seen_classes {
        per_class.insert(c, per_class_top1(&seen_preds, &seen_test.labels, &[c])?);
    }
    for &c in unseen_classes {
        per_class.insert(c, per_class_top1(&unseen_preds, &unseen_test.labels, &[c])?);
    }

    let mut confusion = [[0usize; 2]; 2];
    let group = |c: usize| usize::from(unseen_classes.contains(&c));
    for (&p, &l) in seen_preds.iter().zip(&seen_test.labels) {
        confusion[group(l)][group(p)] += 1;
    }
    for (&p, &l) in unseen_preds.iter().zip(&unseen_test.labels) {
        confusion[group(l)][group(p)] += 1;
    }

    Ok((clf, GzslReport { acc_s, acc_u, acc_h, per_class, confusion }))
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineConfig {
    pub variant: FeatureVariant,
    pub cls_layer: usize,
    pub aam_layer: usize,
    pub l2norm: bool,
    pub aam_heads: usize,
    pub aam_dropout: f64,
    pub scale_by_model_width: bool,
    pub aam_train: AamTrainConfig,
    pub cvae_hidden: usize,
    pub cvae_z_dim: usize,
    pub cvae_train: CvaeTrainConfig,
    pub samples_per_unseen: usize,
    pub classifier: ClassifierTrainConfig,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            variant: FeatureVariant::ClsPlusAam,
            cls_layer: 2,
            aam_layer: 1,
            l2norm: false,
            aam_heads: 4,
            aam_dropout: 0.5,
            scale_by_model_width: false,
            aam_train: AamTrainConfig::default(),
            cvae_hidden: 256,
            cvae_z_dim: 16,
            cvae_train: CvaeTrainConfig::default(),
            samples_per_unseen: 100,
            classifier: ClassifierTrainConfig::default(),
            seed: 7,
        }
    }
}

/// Everything the protocol produced, for inspection beyond the report.
pub struct PipelineArtifacts {
    pub report: GzslReport,
    pub seen_train: FeatureBatch,
    pub seen_test: FeatureBatch,
    pub unseen_test: FeatureBatch,
    pub synthetic: FeatureBatch,
    pub modules: Option<(Aam, F2aNet)>,
    pub cvae: Cvae,
    pub classifier: SoftmaxClassifier,
}

/// Forward every image once and keep all per-layer features.
pub fn cache_backbone_features(
    backbone: &VitBackbone,
    images: &[Tensor],
) -> Result<Vec<LayerFeatures>> {
    images.iter().map(|im| backbone.forward_all_layers(im)).collect()
}

fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = rows[0].cols();
    let mut out = Tensor::zeros(&[rows.len(), dim]);
    for (r, row) in rows.iter().enumerate() {
        if row.cols() != dim || row.rows() != 1 {
            return Err(Error::ShapeMismatch("stacked rows must share one width".into()));
        }
        out.as_mut_slice()[r * dim..(r + 1) * dim].copy_from_slice(row.as_slice());
    }
    Ok(out)
}

fn gather_attr_rows(dataset: &GzslDataset, indices: &[usize]) -> Tensor {
    let a = dataset.attr_dim();
    let mut out = Tensor::zeros(&[indices.len(), a]);
    for (r, &i) in indices.iter().enumerate() {
        out.as_mut_slice()[r * a..(r + 1) * a]
            .copy_from_slice(dataset.class_attributes.row_slice(dataset.labels[i]));
    }
    out
}

/// Run the full protocol against a precomputed per-image feature cache.
pub fn run_gzsl_protocol_cached(
    dataset: &GzslDataset,
    cache: &[LayerFeatures],
    cfg: &PipelineConfig,
) -> Result<PipelineArtifacts> {
    if cache.len() != dataset.images.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} cached features for {} images",
            cache.len(),
            dataset.images.len()
        )));
    }
    let seen_train_idx = dataset.indices_with_taint(Taint::SeenTrain);
    let seen_test_idx = dataset.indices_with_taint(Taint::SeenTest);
    let unseen_test_idx = dataset.indices_with_taint(Taint::UnseenTest);
    for (name, idx) in [
        ("seen-train", &seen_train_idx),
        ("seen-test", &seen_test_idx),
        ("unseen-test", &unseen_test_idx),
    ] {
        if idx.is_empty() {
            return Err(Error::TaintViolation(format!("dataset has no {name} split")));
        }
    }
    let feat_dim = cache[0].cls_at(cfg.cls_layer)?.cols();

    // Stage 1: joint attention training on seen-train features only.
    let modules = if cfg.variant.needs_aam() {
        let mut aam_rng = rng::substream(cfg.seed, STREAM_AAM);
        let mut aam_cfg = AamConfig::new(
            feat_dim,
            dataset.attr_dim(),
            cfg.aam_heads,
            dataset.seen_classes.len(),
        );
        aam_cfg.dropout = cfg.aam_dropout;
        aam_cfg.scale_by_model_width = cfg.scale_by_model_width;
        let mut aam = Aam::new(aam_cfg, &mut aam_rng)?;
        let mut f2a = F2aNet::new(feat_dim, dataset.attr_dim(), &mut aam_rng);

        let cls_rows: Vec<Tensor> = seen_train_idx
            .iter()
            .map(|&i| cache[i].cls_at(cfg.cls_layer).cloned())
            .collect::<Result<_>>()?;
        let cls = stack_rows(&cls_rows)?;
        let patches: Vec<Tensor> = seen_train_idx
            .iter()
            .map(|&i| cache[i].patches_at(cfg.aam_layer).cloned())
            .collect::<Result<_>>()?;
        let attrs = gather_attr_rows(dataset, &seen_train_idx);
        let labels: Vec<usize> = seen_train_idx.iter().map(|&i| dataset.labels[i]).collect();
        let data =
            AamTrainData { cls: &cls, patches: &patches, attributes: &attrs, labels: &labels };
        train_aam_f2a(&mut aam, &mut f2a, &data, &dataset.seen_classes, &cfg.aam_train, &mut aam_rng)?;
        Some((aam, f2a))
    } else {
        None
    };
    let module_refs = modules.as_ref().map(|(a, f)| (a, f));

    // Stage 2: assemble descriptors for every split.
    let assemble_split = |indices: &[usize], taint: Taint| -> Result<FeatureBatch> {
        let rows: Vec<Tensor> = indices
            .iter()
            .map(|&i| {
                assemble(
                    &cache[i],
                    module_refs,
                    cfg.variant,
                    cfg.cls_layer,
                    cfg.aam_layer,
                    cfg.l2norm,
                )
                .map(|f| f.vector)
            })
            .collect::<Result<_>>()?;
        FeatureBatch::new(
            stack_rows(&rows)?,
            indices.iter().map(|&i| dataset.labels[i]).collect(),
            vec![taint; indices.len()],
        )
    };
    let seen_train = assemble_split(&seen_train_idx, Taint::SeenTrain)?;
    let seen_test = assemble_split(&seen_test_idx, Taint::SeenTest)?;
    let unseen_test = assemble_split(&unseen_test_idx, Taint::UnseenTest)?;

    // Stage 3: feature generator, seen-train pairs only.
    audit_training_taints(&seen_train.taints)?;
    let mut cvae_rng = rng::substream(cfg.seed, STREAM_CVAE);
    let mut cvae_cfg = CvaeConfig::new(seen_train.features.cols(), dataset.attr_dim());
    cvae_cfg.hidden = cfg.cvae_hidden;
    cvae_cfg.z_dim = cfg.cvae_z_dim;
    let mut cvae = Cvae::new(cvae_cfg, &mut cvae_rng)?;
    let train_attrs = gather_attr_rows(dataset, &seen_train_idx);
    train_cvae(
        &mut cvae,
        &seen_train.features,
        &train_attrs,
        &seen_train.labels,
        &dataset.seen_classes,
        &cfg.cvae_train,
        &mut cvae_rng,
    )?;

    // Stage 4: synthesize unseen-class features.
    let mut synth_rows = Vec::new();
    let mut synth_labels = Vec::new();
    for &u in &dataset.unseen_classes {
        let attr = AttributeVector::real(Tensor::row(dataset.class_attributes.row_slice(u)))?;
        let gen = cvae.sample_unseen_features(&attr, cfg.samples_per_unseen, &mut cvae_rng)?;
        for r in 0..gen.rows() {
            synth_rows.push(Tensor::row(gen.row_slice(r)));
            synth_labels.push(u);
        }
    }
    let synthetic = FeatureBatch::new(
        stack_rows(&synth_rows)?,
        synth_labels,
        vec![Taint::Synthetic; synth_rows.len()],
    )?;

    // Stage 5: classifier over all classes, then the scored report.
    let (classifier, report) = classify_and_report(
        &[&seen_train, &synthetic],
        &seen_test,
        &unseen_test,
        &dataset.seen_classes,
        &dataset.unseen_classes,
        dataset.num_classes(),
        &cfg.classifier,
    )?;

    Ok(PipelineArtifacts {
        report,
        seen_train,
        seen_test,
        unseen_test,
        synthetic,
        modules,
        cvae,
        classifier,
    })
}

/// Convenience entry that forwards the images itself.
pub fn run_gzsl_protocol(
    dataset: &GzslDataset,
    backbone: &VitBackbone,
    cfg: &PipelineConfig,
) -> Result<PipelineArtifacts> {
    let cache = cache_backbone_features(backbone, &dataset.images)?;
    run_gzsl_protocol_cached(dataset, &cache, cfg)
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub layer: usize,
    pub variant: FeatureVariant,
    pub acc_s: f64,
    pub acc_u: f64,
    pub acc_h: f64,
}

/// Re-run the protocol per (layer, variant) cell, modules retrained from the
/// same seed each time; both halves read from the swept layer.
pub fn layer_sweep(
    dataset: &GzslDataset,
    cache: &[LayerFeatures],
    layers: &[usize],
    variants: &[FeatureVariant],
    base: &PipelineConfig,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(layers.len() * variants.len());
    for &layer in layers {
        for &variant in variants {
            let cfg = PipelineConfig {
                variant,
                cls_layer: layer,
                aam_layer: layer,
                aam_train: AamTrainConfig { ..base.aam_train },
                cvae_train: CvaeTrainConfig { ..base.cvae_train },
                classifier: ClassifierTrainConfig { ..base.classifier },
                ..*base
            };
            let artifacts = run_gzsl_protocol_cached(dataset, cache, &cfg)?;
            rows.push(SweepRow {
                layer,
                variant,
                acc_s: artifacts.report.acc_s,
                acc_u: artifacts.report.acc_u,
                acc_h: artifacts.report.acc_h,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("layer,variant,acc_s,acc_u,acc_h\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.layer,
            r.variant.as_str(),
            r.acc_s,
            r.acc_u,
            r.acc_h
        ));
    }
    out
}
