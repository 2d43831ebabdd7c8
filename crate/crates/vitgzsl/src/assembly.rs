//! Image-feature assembly: the final descriptor concatenates the CLS feature
//! of layer l1 with the attended feature built from layer l2's patches,
//!   x = [x_CLS^l1, x_AAM^l2].
//! The plain patch average over layer l2 serves as the no-attention baseline.

use crate::aam::Aam;
use crate::error::{Error, Result};
use crate::f2a::F2aNet;
use crate::tensor::Tensor;
use crate::vit::{LayerFeatures, VitBackbone};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureVariant {
    ClsOnly,
    AamOnly,
    Avg,
    ClsPlusAam,
}

impl FeatureVariant {
    pub const ALL: [FeatureVariant; 4] =
        [FeatureVariant::ClsOnly, FeatureVariant::AamOnly, FeatureVariant::Avg, FeatureVariant::ClsPlusAam];

    pub fn as_str(&self) -> &'static str {
        match self {
            FeatureVariant::ClsOnly => "cls_only",
            FeatureVariant::AamOnly => "aam_only",
            FeatureVariant::Avg => "avg",
            FeatureVariant::ClsPlusAam => "cls_plus_aam",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_only" => Ok(FeatureVariant::ClsOnly),
            "aam_only" => Ok(FeatureVariant::AamOnly),
            "avg" => Ok(FeatureVariant::Avg),
            "cls_plus_aam" => Ok(FeatureVariant::ClsPlusAam),
            _ => Err(Error::ParseError { line: 0, msg: format!("unknown feature variant {s:?}") }),
        }
    }

    pub fn needs_aam(&self) -> bool {
        matches!(self, FeatureVariant::AamOnly | FeatureVariant::ClsPlusAam)
    }
}

#[derive(Debug, Clone)]
pub struct VitFeature {
    /// Row vector [1 x dim]; cls_plus_aam stacks CLS first, then AAM.
    pub vector: Tensor,
    pub cls_layer: usize,
    pub aam_layer: usize,
    pub variant: FeatureVariant,
}

/// Mean of the patch-feature rows, the attention-free baseline. Each column
/// is summed in sorted order so the result depends only on the multiset of
/// rows, making the mean exactly permutation-invariant.
pub fn average_patch_feature(patches: &Tensor) -> Result<Tensor> {
    let (n, d) = (patches.rows(), patches.cols());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut out = Tensor::zeros(&[1, d]);
    let mut col = vec![0.0f64; n];
    for j in 0..d {
        for i in 0..n {
            col[i] = patches.get2(i, j);
        }
        col.sort_by(f64::total_cmp);
        out.as_mut_slice()[j] = col.iter().sum::<f64>() / n as f64;
    }
    Ok(out)
}

fn l2_normalize_row(t: &Tensor) -> Tensor {
    let norm = t.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return t.clone();
    }
    t.map(|v| v / norm)
}

fn concat_rows_horizontally(a: &Tensor, b: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(&[1, a.cols() + b.cols()]);
    out.as_mut_slice()[..a.cols()].copy_from_slice(a.as_slice());
    out.as_mut_slice()[a.cols()..].copy_from_slice(b.as_slice());
    out
}

/// Assemble one image's descriptor from its per-layer features. `modules`
/// supplies the trained attention stage for the variants that query it; the
/// synthetic attribute comes from the layer-l1 CLS feature. `l2norm`
/// normalizes each concatenated half independently.
pub fn assemble(
    features: &LayerFeatures,
    modules: Option<(&Aam, &F2aNet)>,
    variant: FeatureVariant,
    cls_layer: usize,
    aam_layer: usize,
    l2norm: bool,
) -> Result<VitFeature> {
    let maybe_norm = |t: Tensor| if l2norm { l2_normalize_row(&t) } else { t };
    let aam_half = |(aam, f2a): (&Aam, &F2aNet)| -> Result<Tensor> {
        let cls = features.cls_at(cls_layer)?;
        let attr = f2a.synthesize_attribute(cls)?;
        aam.aam_feature(&attr, features.patches_at(aam_layer)?)
    };
    let vector = match variant {
        FeatureVariant::ClsOnly => maybe_norm(features.cls_at(cls_layer)?.clone()),
        FeatureVariant::Avg => maybe_norm(average_patch_feature(features.patches_at(aam_layer)?)?),
        FeatureVariant::AamOnly => {
            let m = modules.ok_or(Error::MissingModule("aam"))?;
            maybe_norm(aam_half(m)?)
        }
        FeatureVariant::ClsPlusAam => {
            let m = modules.ok_or(Error::MissingModule("aam"))?;
            let cls = maybe_norm(features.cls_at(cls_layer)?.clone());
            let aam = maybe_norm(aam_half(m)?);
            concat_rows_horizontally(&cls, &aam)
        }
    };
    Ok(VitFeature { vector, cls_layer, aam_layer, variant })
}

/// Forward every image through the frozen backbone and stack the assembled
/// descriptors into an [n x dim] matrix.
pub fn assemble_features(
    backbone: &VitBackbone,
    modules: Option<(&Aam, &F2aNet)>,
    variant: FeatureVariant,
    cls_layer: usize,
    aam_layer: usize,
    l2norm: bool,
    images: &[Tensor],
) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows: Vec<Tensor> = Vec::with_capacity(images.len());
    for image in images {
        let feats = backbone.forward_all_layers(image)?;
        rows.push(assemble(&feats, modules, variant, cls_layer, aam_layer, l2norm)?.vector);
    }
    let dim = rows[0].cols();
    let mut out = Tensor::zeros(&[rows.len(), dim]);
    for (r, row) in rows.iter().enumerate() {
        if row.cols() != dim {
            return Err(Error::ShapeMismatch("assembled widths differ across images".into()));
        }
        out.as_mut_slice()[r * dim..(r + 1) * dim].copy_from_slice(row.as_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aam::AamConfig;
    use crate::rng;
    use crate::vit::VitConfig;

    fn tiny_backbone(seed: u64) -> VitBackbone {
        let cfg = VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2,
        };
        let mut rng = rng::seeded(seed);
        VitBackbone::new(cfg, &mut rng).unwrap()
    }

    fn modules(seed: u64) -> (Aam, F2aNet) {
        let mut rng = rng::seeded(seed);
        let aam = Aam::new(AamConfig::new(8, 5, 2, 3), &mut rng).unwrap();
        let f2a = F2aNet::new(8, 5, &mut rng);
        (aam, f2a)
    }

    #[test]
    fn average_of_identical_rows_is_that_row() {
        let mut rng = rng::seeded(5);
        let row = rng::randn_tensor(&[1, 6], 1.0, &mut rng);
        let mut patches = Tensor::zeros(&[4, 6]);
        for r in 0..4 {
            patches.as_mut_slice()[r * 6..(r + 1) * 6].copy_from_slice(row.as_slice());
        }
        let avg = average_patch_feature(&patches).unwrap();
        assert!(avg.max_abs_diff(&row) <= 1e-12);
    }

    #[test]
    fn average_matches_direct_loop_oracle() {
        let mut rng = rng::seeded(7);
        for _ in 0..10 {
            let patches = rng::randn_tensor(&[5, 7], 1.0, &mut rng);
            let avg = average_patch_feature(&patches).unwrap();
            for j in 0..7 {
                let mut acc = 0.0;
                for i in 0..5 {
                    acc += patches.get2(i, j);
                }
                assert!((avg.as_slice()[j] - acc / 5.0).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn average_is_permutation_invariant_exactly() {
        let mut rng = rng::seeded(9);
        let patches = rng::randn_tensor(&[6, 4], 1.0, &mut rng);
        let base = average_patch_feature(&patches).unwrap();
        let perm = rng::permutation(6, &mut rng);
        let mut shuffled = Tensor::zeros(&[6, 4]);
        for (to, &from) in perm.iter().enumerate() {
            shuffled.as_mut_slice()[to * 4..(to + 1) * 4].copy_from_slice(patches.row_slice(from));
        }
        let permuted = average_patch_feature(&shuffled).unwrap();
        assert_eq!(base.as_slice(), permuted.as_slice());
    }

    #[test]
    fn concat_is_cls_then_aam_with_double_width() {
        let backbone = tiny_backbone(11);
        let (aam, f2a) = modules(13);
        let mut rng = rng::seeded(15);
        let image = rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng);
        let feats = backbone.forward_all_layers(&image).unwrap();

        let cls = assemble(&feats, None, FeatureVariant::ClsOnly, 1, 2, false).unwrap();
        let aam_only =
            assemble(&feats, Some((&aam, &f2a)), FeatureVariant::AamOnly, 1, 2, false).unwrap();
        let both =
            assemble(&feats, Some((&aam, &f2a)), FeatureVariant::ClsPlusAam, 1, 2, false).unwrap();

        assert_eq!(cls.vector.cols(), 8);
        assert_eq!(aam_only.vector.cols(), 8);
        assert_eq!(both.vector.cols(), 16);
        assert_eq!(&both.vector.as_slice()[..8], cls.vector.as_slice());
        assert_eq!(&both.vector.as_slice()[8..], aam_only.vector.as_slice());
    }

    #[test]
    fn assembling_twice_yields_identical_vectors() {
        let backbone = tiny_backbone(17);
        let (aam, f2a) = modules(19);
        let mut rng = rng::seeded(21);
        let image = rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng);
        let feats = backbone.forward_all_layers(&image).unwrap();
        for variant in FeatureVariant::ALL {
            let a = assemble(&feats, Some((&aam, &f2a)), variant, 2, 1, false).unwrap();
            let b = assemble(&feats, Some((&aam, &f2a)), variant, 2, 1, false).unwrap();
            assert_eq!(a.vector.as_slice(), b.vector.as_slice());
        }
    }

    #[test]
    fn aam_variants_without_modules_are_missing_module() {
        let backbone = tiny_backbone(23);
        let mut rng = rng::seeded(25);
        let image = rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng);
        let feats = backbone.forward_all_layers(&image).unwrap();
        for variant in [FeatureVariant::AamOnly, FeatureVariant::ClsPlusAam] {
            let err = assemble(&feats, None, variant, 1, 1, false).unwrap_err();
            assert!(matches!(err, Error::MissingModule("aam")));
        }
        assert!(assemble(&feats, None, FeatureVariant::ClsOnly, 1, 1, false).is_ok());
        assert!(assemble(&feats, None, FeatureVariant::Avg, 1, 1, false).is_ok());
    }

    #[test]
    fn layer_indices_are_validated_per_half() {
        let backbone = tiny_backbone(27);
        let mut rng = rng::seeded(29);
        let image = rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng);
        let feats = backbone.forward_all_layers(&image).unwrap();
        assert!(matches!(
            assemble(&feats, None, FeatureVariant::ClsOnly, 3, 1, false),
            Err(Error::LayerOutOfRange { layer: 3, num_layers: 2 })
        ));
        assert!(matches!(
            assemble(&feats, None, FeatureVariant::Avg, 1, 0, false),
            Err(Error::LayerOutOfRange { layer: 0, num_layers: 2 })
        ));
    }

    #[test]
    fn l2norm_normalizes_each_half_independently() {
        let backbone = tiny_backbone(31);
        let (aam, f2a) = modules(33);
        let mut rng = rng::seeded(35);
        let image = rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng);
        let feats = backbone.forward_all_layers(&image).unwrap();
        let both =
            assemble(&feats, Some((&aam, &f2a)), FeatureVariant::ClsPlusAam, 1, 2, true).unwrap();
        let half = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((half(&both.vector.as_slice()[..8]) - 1.0).abs() <= 1e-9);
        assert!((half(&both.vector.as_slice()[8..]) - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FeatureVariant::ALL {
            assert_eq!(FeatureVariant::from_str(v.as_str()).unwrap(), v);
        }
        assert!(FeatureVariant::from_str("cls").is_err());
    }

    #[test]
    fn batch_assembly_stacks_per_image_rows() {
        let backbone = tiny_backbone(37);
        let mut rng = rng::seeded(39);
        let images: Vec<Tensor> =
            (0..3).map(|_| rng::randn_tensor(&[1, 8, 8], 0.5, &mut rng)).collect();
        let batch = assemble_features(
            &backbone,
            None,
            FeatureVariant::ClsOnly,
            2,
            2,
            false,
            &images,
        )
        .unwrap();
        assert_eq!(batch.shape(), &[3, 8]);
        for (i, image) in images.iter().enumerate() {
            let feats = backbone.forward_all_layers(image).unwrap();
            let single =
                assemble(&feats, None, FeatureVariant::ClsOnly, 2, 2, false).unwrap();
            assert_eq!(batch.row_slice(i), single.vector.as_slice());
        }
    }
}
