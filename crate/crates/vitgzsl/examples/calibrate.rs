//! Calibration harness: trains the backbone on the default synthetic
//! dataset, sweeps layers and variants, and prints the measurements the
//! acceptance thresholds are frozen against.
//!
//!   cargo run -p vitgzsl --example calibrate -- backbone sweep final

use std::path::PathBuf;
use std::time::Instant;

use vitgzsl::aam::{train_aam_f2a, Aam, AamConfig, AamTrainConfig, AamTrainData};
use vitgzsl::assembly::FeatureVariant;
use vitgzsl::dataset::{self, GzslDataset, SyntheticSpec, Taint};
use vitgzsl::eval::{
    cache_backbone_features, layer_sweep, run_gzsl_protocol_cached, sweep_to_csv, PipelineConfig,
};
use vitgzsl::f2a::{make_one_hot_attribute, AttributeVector, F2aNet};
use vitgzsl::rng;
use vitgzsl::tensor::Tensor;
use vitgzsl::vit::{VitBackbone, VitConfig};

fn workdir() -> PathBuf {
    let dir = std::env::temp_dir().join("vitgzsl_calibrate");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn dataset() -> GzslDataset {
    dataset::generate(&SyntheticSpec::default()).unwrap()
}

fn backbone_path() -> PathBuf {
    workdir().join("backbone.bin")
}

fn fresh_backbone() -> VitBackbone {
    let mut rng = rng::substream(7, rng::STREAM_BACKBONE);
    VitBackbone::new(VitConfig::default(), &mut rng).unwrap()
}

fn stage_backbone(epochs: usize, lr: f64) {
    let ds = dataset();
    let train_idx = ds.indices_with_taint(Taint::SeenTrain);
    let images: Vec<Tensor> = train_idx.iter().map(|&i| ds.images[i].clone()).collect();
    let labels: Vec<usize> = train_idx.iter().map(|&i| ds.labels[i]).collect();

    let mut backbone = fresh_backbone();
    let mut rng = rng::substream(7, rng::STREAM_BACKBONE + 100);
    let t0 = Instant::now();
    let acc = backbone
        .train_supervised(&images, &labels, ds.num_classes(), epochs, lr, 32, &mut rng)
        .unwrap();
    println!(
        "backbone: {epochs} epochs lr {lr} -> train acc {acc:.4} in {:.1}s",
        t0.elapsed().as_secs_f64()
    );

    let test_idx = ds.indices_with_taint(Taint::SeenTest);
    let mut correct = 0usize;
    for &i in &test_idx {
        if backbone.classify(&ds.images[i]).unwrap() == ds.labels[i] {
            correct += 1;
        }
    }
    println!(
        "backbone: seen-test acc {:.4} ({correct}/{})",
        correct as f64 / test_idx.len() as f64,
        test_idx.len()
    );
    backbone.save(&backbone_path()).unwrap();
    println!("backbone: saved to {}", backbone_path().display());
}

fn load_backbone() -> VitBackbone {
    let mut backbone = fresh_backbone();
    backbone
        .ensure_head(dataset().num_classes(), &mut rng::substream(7, 999))
        .unwrap();
    backbone.load(&backbone_path()).unwrap();
    backbone
}

fn stage_sweep(cfg: &PipelineConfig) {
    let ds = dataset();
    let backbone = load_backbone();
    let t0 = Instant::now();
    let cache = cache_backbone_features(&backbone, &ds.images).unwrap();
    println!("sweep: cached {} images in {:.1}s", cache.len(), t0.elapsed().as_secs_f64());

    let variants =
        [FeatureVariant::ClsOnly, FeatureVariant::Avg, FeatureVariant::ClsPlusAam];
    for layer in 1..=4usize {
        for variant in variants {
            let t = Instant::now();
            let rows = layer_sweep(&ds, &cache, &[layer], &[variant], cfg).unwrap();
            print!("{}", sweep_to_csv(&rows).lines().nth(1).map(|l| format!("{l}\n")).unwrap());
            println!("  cell time {:.1}s", t.elapsed().as_secs_f64());
        }
    }
}

fn localization(ds: &GzslDataset, cache: &[vitgzsl::vit::LayerFeatures], layer: usize, cfg: &PipelineConfig) {
    // Train AAM+F2A at this layer exactly as the protocol does.
    let mut aam_rng = rng::substream(cfg.seed, rng::STREAM_AAM);
    let mut aam_cfg =
        AamConfig::new(32, ds.attr_dim(), cfg.aam_heads, ds.seen_classes.len());
    aam_cfg.dropout = cfg.aam_dropout;
    let mut aam = Aam::new(aam_cfg, &mut aam_rng).unwrap();
    let mut f2a = F2aNet::new(32, ds.attr_dim(), &mut aam_rng);

    let idx = ds.indices_with_taint(Taint::SeenTrain);
    let cls_rows: Vec<Tensor> =
        idx.iter().map(|&i| cache[i].cls_at(cfg.cls_layer).unwrap().clone()).collect();
    let mut cls = Tensor::zeros(&[cls_rows.len(), 32]);
    for (r, row) in cls_rows.iter().enumerate() {
        cls.as_mut_slice()[r * 32..(r + 1) * 32].copy_from_slice(row.as_slice());
    }
    let patches: Vec<Tensor> =
        idx.iter().map(|&i| cache[i].patches_at(layer).unwrap().clone()).collect();
    let mut attrs = Tensor::zeros(&[idx.len(), ds.attr_dim()]);
    for (r, &i) in idx.iter().enumerate() {
        attrs.as_mut_slice()[r * ds.attr_dim()..(r + 1) * ds.attr_dim()]
            .copy_from_slice(ds.class_attributes.row_slice(ds.labels[i]));
    }
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    let data = AamTrainData { cls: &cls, patches: &patches, attributes: &attrs, labels: &labels };
    let t0 = Instant::now();
    let curve =
        train_aam_f2a(&mut aam, &mut f2a, &data, &ds.seen_classes, &cfg.aam_train, &mut aam_rng)
            .unwrap();
    println!("local: aam trained at layer {layer} in {:.1}s", t0.elapsed().as_secs_f64());
    for (e, l) in curve.iter().enumerate() {
        if e % 10 == 0 || e == curve.len() - 1 {
            println!("  epoch {e}: mse {:.4} ce {:.4}", l.mse, l.ce);
        }
    }

    // Attention mass on ground-truth patches for every test image, split by
    // whether the image's class was seen in training.
    let n_patches = ds.num_patches();
    let mut pass = 0usize;
    let mut total = 0usize;
    let mut ratios: Vec<f64> = Vec::new();
    for taint in [Taint::SeenTest, Taint::UnseenTest] {
        let mut split_pass = 0usize;
        let mut split_total = 0usize;
        for &i in &ds.indices_with_taint(taint) {
            let gt = ds.class_signal_patches(ds.labels[i]).unwrap();
            if gt.is_empty() {
                continue;
            }
            let attr =
                f2a.synthesize_attribute(cache[i].cls_at(cfg.cls_layer).unwrap()).unwrap();
            let map = aam.attention_map(&attr, cache[i].patches_at(layer).unwrap()).unwrap();
            let mass: f64 = gt.iter().map(|&p| map.averaged.as_slice()[p]).sum();
            let uniform = gt.len() as f64 / n_patches as f64;
            ratios.push(mass / uniform);
            if mass >= 2.0 * uniform {
                pass += 1;
                split_pass += 1;
            }
            total += 1;
            split_total += 1;
        }
        println!("local:   {taint:?}: {split_pass}/{split_total}");
    }
    ratios.sort_by(f64::total_cmp);
    println!(
        "local: layer {layer} mass>=2x for {pass}/{total} ({:.1}%), ratio p10 {:.2} p50 {:.2} p90 {:.2}",
        100.0 * pass as f64 / total as f64,
        ratios[ratios.len() / 10],
        ratios[ratios.len() / 2],
        ratios[9 * ratios.len() / 10]
    );

    // Same measurement with the ground-truth class attribute as the query,
    // to separate attention quality from query noise.
    let mut gt_pass = 0usize;
    let mut gt_total = 0usize;
    for taint in [Taint::SeenTest, Taint::UnseenTest] {
        for &i in &ds.indices_with_taint(taint) {
            let gt = ds.class_signal_patches(ds.labels[i]).unwrap();
            if gt.is_empty() {
                continue;
            }
            let row = Tensor::from_vec(
                &[1, ds.attr_dim()],
                ds.class_attributes.row_slice(ds.labels[i]).to_vec(),
            )
            .unwrap();
            let attr = AttributeVector::real(row).unwrap();
            let map = aam.attention_map(&attr, cache[i].patches_at(layer).unwrap()).unwrap();
            let mass: f64 = gt.iter().map(|&p| map.averaged.as_slice()[p]).sum();
            if mass >= 2.0 * gt.len() as f64 / n_patches as f64 {
                gt_pass += 1;
            }
            gt_total += 1;
        }
    }
    println!(
        "local: ground-truth query mass>=2x for {gt_pass}/{gt_total} ({:.1}%)",
        100.0 * gt_pass as f64 / gt_total as f64
    );

    // One-hot probes on disjoint attributes.
    let mut disjoint: Option<(usize, usize)> = None;
    'outer: for a in 0..ds.attr_dim() {
        for b in a + 1..ds.attr_dim() {
            let pa = &ds.templates[a].patches;
            let pb = &ds.templates[b].patches;
            if pa.iter().all(|p| !pb.contains(p)) {
                disjoint = Some((a, b));
                break 'outer;
            }
        }
    }
    let (a, b) = disjoint.expect("no disjoint attribute pair in the default spec");
    println!(
        "local: disjoint attrs {a} (patches {:?}) and {b} (patches {:?})",
        ds.templates[a].patches, ds.templates[b].patches
    );
    let test_idx = ds.indices_with_taint(Taint::SeenTest);
    let mut differs = 0usize;
    for &i in test_idx.iter().take(20) {
        let pa = make_one_hot_attribute(a, ds.attr_dim()).unwrap();
        let pb = make_one_hot_attribute(b, ds.attr_dim()).unwrap();
        let ma = aam.attention_map(&pa, cache[i].patches_at(layer).unwrap()).unwrap();
        let mb = aam.attention_map(&pb, cache[i].patches_at(layer).unwrap()).unwrap();
        let am = ma.averaged.argmax();
        let bm = mb.averaged.argmax();
        if am != bm {
            differs += 1;
        }
    }
    println!("local: probe argmax differs on {differs}/20 seen-test images");
}

fn stage_final(cfg: &PipelineConfig) {
    let ds = dataset();
    let backbone = load_backbone();
    let cache = cache_backbone_features(&backbone, &ds.images).unwrap();

    localization(&ds, &cache, cfg.aam_layer, cfg);

    let t0 = Instant::now();
    let artifacts = run_gzsl_protocol_cached(&ds, &cache, cfg).unwrap();
    println!(
        "final: cls_plus_aam l1={} l2={} -> acc_s {:.2} acc_u {:.2} acc_h {:.2} ({:.1}s)",
        cfg.cls_layer,
        cfg.aam_layer,
        artifacts.report.acc_s,
        artifacts.report.acc_u,
        artifacts.report.acc_h,
        t0.elapsed().as_secs_f64()
    );

    // F2A attribute fidelity per split: cosine between synthesized and true
    // class attribute rows.
    if let Some((_, f2a)) = &artifacts.modules {
        for (name, taint) in [("seen-test", Taint::SeenTest), ("unseen-test", Taint::UnseenTest)]
        {
            let mut cos_sum = 0.0;
            let idx = ds.indices_with_taint(taint);
            for &i in &idx {
                let attr = f2a.synthesize_attribute(cache[i].cls_at(cfg.cls_layer).unwrap()).unwrap();
                let truth = ds.class_attributes.row_slice(ds.labels[i]);
                let pred = attr.values.as_slice();
                let dot: f64 = pred.iter().zip(truth).map(|(p, t)| p * t).sum();
                let np: f64 = pred.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nt: f64 = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
                cos_sum += dot / (np * nt).max(1e-12);
            }
            println!("final: f2a cosine on {name}: {:.3}", cos_sum / idx.len() as f64);
        }
    }

    // How many unseen test images land in any unseen class at all.
    {
        let feats = &artifacts.unseen_test;
        let preds = artifacts.classifier.predict(&feats.features).unwrap();
        let in_unseen =
            preds.iter().filter(|p| ds.unseen_classes.contains(p)).count();
        println!(
            "final: unseen-test predicted into unseen classes {in_unseen}/{}",
            feats.len()
        );
    }

    // Generated unseen means vs true class means on real features.
    let dim = artifacts.seen_train.features.cols();
    let class_mean = |rows: Vec<&[f64]>| -> Vec<f64> {
        let mut m = vec![0.0; dim];
        for r in &rows {
            for (mi, v) in m.iter_mut().zip(*r) {
                *mi += *v / rows.len() as f64;
            }
        }
        m
    };
    let mut true_means: Vec<Vec<f64>> = Vec::new();
    for c in 0..ds.num_classes() {
        let mut rows: Vec<&[f64]> = Vec::new();
        for batch in [&artifacts.seen_train, &artifacts.seen_test, &artifacts.unseen_test] {
            for r in 0..batch.len() {
                if batch.labels[r] == c {
                    rows.push(batch.features.row_slice(r));
                }
            }
        }
        true_means.push(class_mean(rows));
    }
    let mut hits = 0usize;
    for &u in &ds.unseen_classes {
        let mut rows: Vec<&[f64]> = Vec::new();
        for r in 0..artifacts.synthetic.len() {
            if artifacts.synthetic.labels[r] == u {
                rows.push(artifacts.synthetic.features.row_slice(r));
            }
        }
        let gen_mean = class_mean(rows);
        let dist = |c: usize| -> f64 {
            true_means[c]
                .iter()
                .zip(&gen_mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let own = dist(u);
        let nearest = (0..ds.num_classes()).min_by(|&x, &y| dist(x).total_cmp(&dist(y))).unwrap();
        // Real-geometry context: how far this unseen class's real mean sits
        // from the nearest other real class mean.
        let real_sep = (0..ds.num_classes())
            .filter(|&c| c != u)
            .map(|c| {
                true_means[c]
                    .iter()
                    .zip(&true_means[u])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .min_by(f64::total_cmp)
            .unwrap();
        println!(
            "final: unseen {u} gen-to-own {own:.2} real-sep {real_sep:.2} nearest {nearest} ({})",
            if nearest == u { "hit" } else { "miss" }
        );
        if nearest == u {
            hits += 1;
        }
    }
    println!("final: generated-mean hits {hits}/{}", ds.unseen_classes.len());

    // MSE ablation direction.
    let ab = PipelineConfig {
        aam_train: AamTrainConfig { use_mse: false, ..cfg.aam_train },
        ..*cfg
    };
    let t0 = Instant::now();
    let no_mse = run_gzsl_protocol_cached(&ds, &cache, &ab).unwrap();
    println!(
        "final: no-mse acc_h {:.2} vs {:.2} ({:.1}s)",
        no_mse.report.acc_h,
        artifacts.report.acc_h,
        t0.elapsed().as_secs_f64()
    );
}

fn stage_data() {
    let ds = dataset();
    let n = ds.num_patches();
    println!("data: {} classes, {} patches, attr patch counts:", ds.num_classes(), n);
    for (k, t) in ds.templates.iter().enumerate() {
        println!("  attr {k}: {} patches {:?}", t.patches.len(), t.patches);
    }
    let mut impossible = 0usize;
    for c in 0..ds.num_classes() {
        let gt = ds.class_signal_patches(c).unwrap();
        let uniform = gt.len() as f64 / n as f64;
        let cap = 1.0 / uniform;
        let active: Vec<usize> = ds
            .attribute_row(c)
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, _)| k)
            .collect();
        let seen = if ds.is_seen(c) { "seen" } else { "unseen" };
        println!(
            "  class {c} ({seen}): attrs {active:?} gt {} patches, max ratio {cap:.2}",
            gt.len()
        );
        if cap < 2.0 {
            impossible += 1;
        }
    }
    println!("data: {impossible} classes cannot reach 2x uniform mass");
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let has = |s: &str| args.iter().any(|a| a == s);
    let num = |key: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == key)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };

    let mut cfg = PipelineConfig::default();
    cfg.cls_layer = num("--l1", cfg.cls_layer as f64) as usize;
    cfg.aam_layer = num("--l2", cfg.aam_layer as f64) as usize;
    cfg.aam_heads = num("--heads", cfg.aam_heads as f64) as usize;
    cfg.aam_dropout = num("--dropout", cfg.aam_dropout);
    cfg.aam_train.epochs = num("--aam-epochs", cfg.aam_train.epochs as f64) as usize;
    cfg.aam_train.lr = num("--aam-lr", cfg.aam_train.lr);
    cfg.aam_train.batch_size = num("--aam-batch", cfg.aam_train.batch_size as f64) as usize;
    cfg.cvae_train.epochs = num("--cvae-epochs", cfg.cvae_train.epochs as f64) as usize;
    cfg.cvae_train.lr = num("--cvae-lr", cfg.cvae_train.lr);
    cfg.classifier.epochs = num("--clf-epochs", cfg.classifier.epochs as f64) as usize;

    if has("data") {
        stage_data();
    }
    if has("backbone") {
        stage_backbone(num("--epochs", 30.0) as usize, num("--lr", 1e-3));
    }
    if has("sweep") {
        stage_sweep(&cfg);
    }
    if has("final") {
        stage_final(&cfg);
    }
    if !has("data") && !has("backbone") && !has("sweep") && !has("final") {
        eprintln!("stages: data | backbone [--epochs N --lr X] | sweep | final [--l1 N --l2 N ...]");
    }
}
