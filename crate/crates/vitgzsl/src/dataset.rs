//! Synthetic zero-shot dataset with attribute-localized image signal.
//!
//! Every attribute owns a fixed sinusoidal grating stamped onto a fixed set
//! of patches. A class image is the superposition of its active attributes'
//! gratings plus pixel noise, so attention maps can later be scored against
//! exact ground-truth patch masks. Classes split into seen (train + test
//! samples) and unseen (test samples only).
//!
//! On-disk pieces: an attribute CSV, a binary feature store ("VGZF") that
//! also carries per-row split tags, and a dataset directory bundling images,
//! attributes, masks, and metadata.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use crate::weights::{short_magic, Cursor};

pub const FEATURE_MAGIC: [u8; 4] = *b"VGZF";
pub const FEATURE_VERSION: u32 = 1;

/// Fraction of each seen class's samples tagged for training; the rest are
/// held out as seen-test.
pub const SEEN_TRAIN_FRACTION: f64 = 0.8;

/// Split/provenance tag carried with every sample row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Taint {
    SeenTrain,
    SeenTest,
    UnseenTest,
    Synthetic,
}

impl Taint {
    pub fn as_u8(self) -> u8 {
        match self {
            Taint::SeenTrain => 0,
            Taint::SeenTest => 1,
            Taint::UnseenTest => 2,
            Taint::Synthetic => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Taint> {
        Ok(match v {
            0 => Taint::SeenTrain,
            1 => Taint::SeenTest,
            2 => Taint::UnseenTest,
            3 => Taint::Synthetic,
            _ => return Err(Error::CorruptLength(format!("unknown taint tag {v}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub attr_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub attributes_per_class: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_seen: 12,
            num_unseen: 4,
            attr_dim: 20,
            image_size: 32,
            patch_size: 8,
            attributes_per_class: 3,
            samples_per_class: 40,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.num_seen + self.num_unseen
    }

    pub fn patch_grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid() * self.patch_grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_seen == 0 {
            return Err(Error::SpecInvalid("num_seen must be positive".into()));
        }
        if self.attr_dim == 0 {
            return Err(Error::SpecInvalid("attr_dim must be positive".into()));
        }
        if self.attributes_per_class > self.attr_dim {
            return Err(Error::SpecInvalid(format!(
                "attributes_per_class {} exceeds attr_dim {}",
                self.attributes_per_class, self.attr_dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::SpecInvalid("samples_per_class must be positive".into()));
        }
        if self.image_size == 0
            || self.patch_size == 0
            || self.image_size % self.patch_size != 0
        {
            return Err(Error::SpecInvalid(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::SpecInvalid("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Parse a `key = value` spec file; unspecified keys keep their defaults.
    pub fn from_kv_text(text: &str) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default();
        for (line, key, value) in parse_kv_lines(text)? {
            let bad = |msg: &str| Error::ParseError { line, msg: format!("{key}: {msg}") };
            match key.as_str() {
                "num_seen" => spec.num_seen = value.parse().map_err(|_| bad("not a count"))?,
                "num_unseen" => spec.num_unseen = value.parse().map_err(|_| bad("not a count"))?,
                "attr_dim" => spec.attr_dim = value.parse().map_err(|_| bad("not a count"))?,
                "image_size" => spec.image_size = value.parse().map_err(|_| bad("not a count"))?,
                "patch_size" => spec.patch_size = value.parse().map_err(|_| bad("not a count"))?,
                "attributes_per_class" => {
                    spec.attributes_per_class = value.parse().map_err(|_| bad("not a count"))?
                }
                "samples_per_class" => {
                    spec.samples_per_class = value.parse().map_err(|_| bad("not a count"))?
                }
                "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad("not a number"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("not a seed"))?,
                _ => return Err(Error::UnknownKey { line, key }),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_kv_file(path: &Path) -> Result<SyntheticSpec> {
        Self::from_kv_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "num_seen = {}\nnum_unseen = {}\nattr_dim = {}\nimage_size = {}\n\
             patch_size = {}\nattributes_per_class = {}\nsamples_per_class = {}\n\
             noise_sigma = {}\nseed = {}\n",
            self.num_seen,
            self.num_unseen,
            self.attr_dim,
            self.image_size,
            self.patch_size,
            self.attributes_per_class,
            self.samples_per_class,
            self.noise_sigma,
            self.seed
        )
    }
}

/// One attribute's visual identity: a grating and the patches it occupies.
#[derive(Debug, Clone)]
pub struct AttributeTemplate {
    /// Sorted patch indices this attribute stamps, in raster patch order.
    pub patches: Vec<usize>,
    /// Grating values over one patch, [P x P].
    pub grating: Tensor,
}

#[derive(Debug, Clone)]
pub struct GzslDataset {
    /// One [1 x S x S] image per sample.
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub taints: Vec<Taint>,
    /// [num_classes x attr_dim]; zero entries mean the attribute is inactive.
    pub class_attributes: Tensor,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    /// Ground-truth patch ownership per attribute; gratings are kept only on
    /// freshly generated datasets (they are not persisted).
    pub templates: Vec<AttributeTemplate>,
    pub image_size: usize,
    pub patch_size: usize,
}

impl GzslDataset {
    pub fn num_classes(&self) -> usize {
        self.class_attributes.rows()
    }

    pub fn attr_dim(&self) -> usize {
        self.class_attributes.cols()
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.contains(&class)
    }

    pub fn attribute_row(&self, class: usize) -> Result<&[f64]> {
        if class >= self.num_classes() {
            return Err(Error::LabelOutOfRange { label: class, classes: self.num_classes() });
        }
        Ok(self.class_attributes.row_slice(class))
    }

    pub fn indices_with_taint(&self, taint: Taint) -> Vec<usize> {
        (0..self.taints.len()).filter(|&i| self.taints[i] == taint).collect()
    }

    /// Union of ground-truth patches over the class's active attributes.
    pub fn class_signal_patches(&self, class: usize) -> Result<Vec<usize>> {
        let row = self.attribute_row(class)?;
        let mut patches: Vec<usize> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .flat_map(|(k, _)| self.templates[k].patches.iter().copied())
            .collect();
        patches.sort_unstable();
        patches.dedup();
        Ok(patches)
    }

    /// Noiseless superposition of the class's active attribute gratings.
    pub fn render_class_signal(&self, class: usize) -> Result<Tensor> {
        if self.templates.iter().any(|t| t.grating.numel() == 0) {
            return Err(Error::MissingModule("attribute gratings (dataset was loaded from disk)"));
        }
        let row = self.attribute_row(class)?.to_vec();
        let mut img = Tensor::zeros(&[1, self.image_size, self.image_size]);
        for (k, &strength) in row.iter().enumerate() {
            if strength == 0.0 {
                continue;
            }
            stamp(&mut img, &self.templates[k], strength, self.image_size, self.patch_size);
        }
        Ok(img)
    }

    /// Structural invariants: disjoint class sets, full coverage, attribute
    /// rows present, unseen classes free of training samples.
    pub fn validate(&self) -> Result<()> {
        let c = self.num_classes();
        if self.images.len() != self.labels.len() || self.labels.len() != self.taints.len() {
            return Err(Error::SpecInvalid("images, labels, taints differ in length".into()));
        }
        if self.images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for &s in &self.seen_classes {
            if self.unseen_classes.contains(&s) {
                return Err(Error::SpecInvalid(format!("class {s} is both seen and unseen")));
            }
        }
        if self.seen_classes.len() + self.unseen_classes.len() != c {
            return Err(Error::SpecInvalid(format!(
                "{} seen + {} unseen classes but {c} attribute rows",
                self.seen_classes.len(),
                self.unseen_classes.len()
            )));
        }
        if self.templates.len() != self.attr_dim() {
            return Err(Error::SpecInvalid(format!(
                "{} templates for {} attributes",
                self.templates.len(),
                self.attr_dim()
            )));
        }
        for (i, (&label, &taint)) in self.labels.iter().zip(&self.taints).enumerate() {
            if label >= c {
                return Err(Error::LabelOutOfRange { label, classes: c });
            }
            let seen = self.is_seen(label);
            let unseen = self.unseen_classes.contains(&label);
            if !seen && !unseen {
                return Err(Error::SpecInvalid(format!("class {label} is in neither split")));
            }
            match taint {
                Taint::SeenTrain | Taint::SeenTest if !seen => {
                    return Err(Error::TaintViolation(format!(
                        "sample {i} of unseen class {label} is tagged {taint:?}"
                    )));
                }
                Taint::UnseenTest if seen => {
                    return Err(Error::TaintViolation(format!(
                        "sample {i} of seen class {label} is tagged UnseenTest"
                    )));
                }
                Taint::Synthetic => {
                    return Err(Error::TaintViolation(format!(
                        "sample {i} carries a synthetic tag inside a real dataset"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn stamp(img: &mut Tensor, template: &AttributeTemplate, strength: f64, size: usize, patch: usize) {
    let grid = size / patch;
    for &p in &template.patches {
        let (gy, gx) = (p / grid, p % grid);
        for py in 0..patch {
            for px in 0..patch {
                let at = (gy * patch + py) * size + gx * patch + px;
                img.as_mut_slice()[at] += strength * template.grating.as_slice()[py * patch + px];
            }
        }
    }
}

/// Build the full synthetic dataset described by `spec`. Deterministic given
/// the spec, including its seed.
pub fn generate(spec: &SyntheticSpec) -> Result<GzslDataset> {
    spec.validate()?;
    let mut rng = rng::substream(spec.seed, rng::STREAM_DATASET);
    let n_patches = spec.num_patches();
    let p = spec.patch_size;

    // Each attribute paints a small region: one or two patches. Class unions
    // stay well under half the grid, so attending to them is measurable
    // against a uniform baseline.
    let mut templates = Vec::with_capacity(spec.attr_dim);
    for _ in 0..spec.attr_dim {
        let want = 1 + rng::below(&mut rng, 2);
        let mut patches = rng::sample_distinct(n_patches, want.min(n_patches), &mut rng);
        patches.sort_unstable();
        let fx = 1 + rng::below(&mut rng, 3);
        let fy = 1 + rng::below(&mut rng, 3);
        let phase = rng::uniform(&mut rng, 0.0, std::f64::consts::TAU);
        let mut grating = Tensor::zeros(&[p, p]);
        for py in 0..p {
            for px in 0..p {
                let arg = std::f64::consts::TAU * (fx * px + fy * py) as f64 / p as f64 + phase;
                grating.as_mut_slice()[py * p + px] = arg.sin();
            }
        }
        templates.push(AttributeTemplate { patches, grating });
    }

    let total = spec.num_classes();
    let perm = rng::permutation(total, &mut rng);
    let mut seen_classes: Vec<usize> = perm[..spec.num_seen].to_vec();
    let mut unseen_classes: Vec<usize> = perm[spec.num_seen..].to_vec();
    seen_classes.sort_unstable();
    unseen_classes.sort_unstable();

    let mut class_attributes = Tensor::zeros(&[total, spec.attr_dim]);
    for c in 0..total {
        for k in rng::sample_distinct(spec.attr_dim, spec.attributes_per_class, &mut rng) {
            class_attributes.set2(c, k, rng::uniform(&mut rng, 0.5, 1.0));
        }
    }

    let train_per_class =
        ((spec.samples_per_class as f64) * SEEN_TRAIN_FRACTION).ceil() as usize;
    let mut images = Vec::with_capacity(total * spec.samples_per_class);
    let mut labels = Vec::with_capacity(total * spec.samples_per_class);
    let mut taints = Vec::with_capacity(total * spec.samples_per_class);
    for c in 0..total {
        let mut signal = Tensor::zeros(&[1, spec.image_size, spec.image_size]);
        for k in 0..spec.attr_dim {
            let strength = class_attributes.get2(c, k);
            if strength != 0.0 {
                stamp(&mut signal, &templates[k], strength, spec.image_size, p);
            }
        }
        let seen = seen_classes.contains(&c);
        for s in 0..spec.samples_per_class {
            let mut img = signal.clone();
            if spec.noise_sigma > 0.0 {
                for v in img.as_mut_slice() {
                    *v += spec.noise_sigma * rng::randn(&mut rng);
                }
            }
            images.push(img.round_to_f32());
            labels.push(c);
            taints.push(if !seen {
                Taint::UnseenTest
            } else if s < train_per_class {
                Taint::SeenTrain
            } else {
                Taint::SeenTest
            });
        }
    }

    let ds = GzslDataset {
        images,
        labels,
        taints,
        class_attributes,
        seen_classes,
        unseen_classes,
        templates,
        image_size: spec.image_size,
        patch_size: spec.patch_size,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a class-attribute matrix as CSV with a `class_id,attr_0,...` header.
pub fn save_attributes(path: &Path, attrs: &Tensor) -> Result<()> {
    let (c, a) = (attrs.rows(), attrs.cols());
    let mut out = String::from("class_id");
    for k in 0..a {
        write!(out, ",attr_{k}").unwrap();
    }
    out.push('\n');
    for row in 0..c {
        write!(out, "{row}").unwrap();
        for &v in attrs.row_slice(row) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a class-attribute CSV back into a [C x A] matrix.
pub fn load_attributes(path: &Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::ParseError { line: 1, msg: "empty attribute file".into() });
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"class_id") {
        return Err(Error::ParseError {
            line: 1,
            msg: "header must start with class_id".into(),
        });
    }
    for (k, col) in cols[1..].iter().enumerate() {
        if *col != format!("attr_{k}") {
            return Err(Error::ParseError {
                line: 1,
                msg: format!("column {} named {col}, expected attr_{k}", k + 1),
            });
        }
    }
    let a = cols.len() - 1;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != a + 1 {
            return Err(Error::RaggedRow { line, expected: a + 1, found: fields.len() });
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::ParseError { line, msg: format!("bad class_id {}", fields[0]) })?;
        if id != rows.len() {
            return Err(Error::ParseError {
                line,
                msg: format!("class_id {id} out of order, expected {}", rows.len()),
            });
        }
        let mut row = Vec::with_capacity(a);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::ParseError { line, msg: format!("bad float {f}") })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ParseError { line: 1, msg: "no attribute rows".into() });
    }
    Tensor::from_vec(&[rows.len(), a], rows.concat())
}

/// Write a row-major feature matrix with per-row taints and labels.
pub fn save_features(
    path: &Path,
    features: &Tensor,
    labels: &[usize],
    taints: &[Taint],
) -> Result<()> {
    let (rows, cols) = (features.rows(), features.cols());
    if labels.len() != rows || taints.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{rows} feature rows, {} labels, {} taints",
            labels.len(),
            taints.len()
        )));
    }
    let mut buf = Vec::with_capacity(16 + rows * (5 + 4 * cols));
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &t in taints {
        buf.push(t.as_u8());
    }
    for &l in labels {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in features.as_slice() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read a feature store written by [`save_features`].
pub fn load_features(path: &Path) -> Result<(Tensor, Vec<usize>, Vec<Taint>)> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let magic = cur
        .take(4)
        .ok_or(Error::BadMagic { expected: FEATURE_MAGIC, found: short_magic(&bytes) })?;
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let header = |what: &str| Error::CorruptLength(format!("feature store ends inside {what}"));
    let version = cur.take_u32().ok_or_else(|| header("header"))?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let rows = cur.take_u32().ok_or_else(|| header("header"))? as usize;
    let cols = cur.take_u32().ok_or_else(|| header("header"))? as usize;

    let mut taints = Vec::with_capacity(rows);
    for _ in 0..rows {
        let b = cur.take(1).ok_or_else(|| header("taint tags"))?;
        taints.push(Taint::from_u8(b[0])?);
    }
    let mut labels = Vec::with_capacity(rows);
    for _ in 0..rows {
        labels.push(cur.take_u32().ok_or_else(|| header("labels"))? as usize);
    }
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(cur.take_f32().ok_or_else(|| header("feature payload"))? as f64);
    }
    Ok((Tensor::from_vec(&[rows, cols], data)?, labels, taints))
}

/// Write a generated dataset into a directory: flattened images as a feature
/// store, the attribute CSV, ground-truth masks, and metadata.
pub fn save_dataset(dir: &Path, ds: &GzslDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let pixels = ds.image_size * ds.image_size;
    let mut flat = Tensor::zeros(&[ds.images.len(), pixels]);
    for (i, img) in ds.images.iter().enumerate() {
        flat.as_mut_slice()[i * pixels..(i + 1) * pixels].copy_from_slice(img.as_slice());
    }
    save_features(&dir.join("images.vgzf"), &flat, &ds.labels, &ds.taints)?;
    save_attributes(&dir.join("attributes.csv"), &ds.class_attributes)?;

    let mut masks = String::new();
    for (k, t) in ds.templates.iter().enumerate() {
        let list: Vec<String> = t.patches.iter().map(|p| p.to_string()).collect();
        writeln!(masks, "attr_{k} = {}", list.join(" ")).unwrap();
    }
    std::fs::write(dir.join("masks.txt"), masks)?;

    let int_list = |v: &[usize]| {
        v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    };
    let meta = format!(
        "image_size = {}\npatch_size = {}\nseen_classes = {}\nunseen_classes = {}\n",
        ds.image_size,
        ds.patch_size,
        int_list(&ds.seen_classes),
        int_list(&ds.unseen_classes),
    );
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`]. Gratings are not
/// persisted, so [`GzslDataset::render_class_signal`] is unavailable on the
/// result; ground-truth masks are intact.
pub fn load_dataset(dir: &Path) -> Result<GzslDataset> {
    let (flat, labels, taints) = load_features(&dir.join("images.vgzf"))?;
    let class_attributes = load_attributes(&dir.join("attributes.csv"))?;

    let meta = std::fs::read_to_string(dir.join("meta.txt"))?;
    let mut image_size = 0usize;
    let mut patch_size = 0usize;
    let mut seen_classes = Vec::new();
    let mut unseen_classes = Vec::new();
    for (line, key, value) in parse_kv_lines(&meta)? {
        match key.as_str() {
            "image_size" => {
                image_size = value
                    .parse()
                    .map_err(|_| Error::ParseError { line, msg: "bad image_size".into() })?
            }
            "patch_size" => {
                patch_size = value
                    .parse()
                    .map_err(|_| Error::ParseError { line, msg: "bad patch_size".into() })?
            }
            "seen_classes" => seen_classes = parse_int_list(&value, line)?,
            "unseen_classes" => unseen_classes = parse_int_list(&value, line)?,
            _ => return Err(Error::UnknownKey { line, key }),
        }
    }
    if image_size == 0 || patch_size == 0 {
        return Err(Error::SpecInvalid("meta.txt missing image_size or patch_size".into()));
    }

    let masks_text = std::fs::read_to_string(dir.join("masks.txt"))?;
    let mut templates: Vec<AttributeTemplate> = Vec::new();
    for (line, key, value) in parse_kv_lines(&masks_text)? {
        let Some(k) = key.strip_prefix("attr_").and_then(|s| s.parse::<usize>().ok()) else {
            return Err(Error::UnknownKey { line, key });
        };
        if k != templates.len() {
            return Err(Error::ParseError {
                line,
                msg: format!("mask for attr_{k} out of order"),
            });
        }
        templates.push(AttributeTemplate {
            patches: parse_int_list(&value, line)?,
            grating: Tensor::zeros(&[0]),
        });
    }
    if templates.len() != class_attributes.cols() {
        return Err(Error::SpecInvalid(format!(
            "{} masks for {} attributes",
            templates.len(),
            class_attributes.cols()
        )));
    }

    let pixels = image_size * image_size;
    if flat.cols() != pixels {
        return Err(Error::ShapeMismatch(format!(
            "image rows have {} values, expected {}",
            flat.cols(),
            pixels
        )));
    }
    let images: Vec<Tensor> = (0..flat.rows())
        .map(|i| Tensor::from_vec(&[1, image_size, image_size], flat.row_slice(i).to_vec()))
        .collect::<Result<_>>()?;

    let ds = GzslDataset {
        images,
        labels,
        taints,
        class_attributes,
        seen_classes,
        unseen_classes,
        templates,
        image_size,
        patch_size,
    };
    ds.validate()?;
    Ok(ds)
}

fn parse_int_list(value: &str, line: usize) -> Result<Vec<usize>> {
    value
        .split_whitespace()
        .map(|s| {
            s.parse()
                .map_err(|_| Error::ParseError { line, msg: format!("bad integer {s}") })
        })
        .collect()
}

/// Split `key = value` lines, skipping blanks and `#` comments. Returns
/// (1-based line, key, value) triples; key syntax is validated here, key
/// meaning is the caller's job.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let Some((key, value)) = t.split_once('=') else {
            return Err(Error::ParseError { line, msg: format!("expected key = value, got {t}") });
        };
        out.push((line, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Adam, ParamStore};
    use crate::tape::Tape;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_seen: 4,
            num_unseen: 2,
            attr_dim: 8,
            image_size: 16,
            patch_size: 8,
            attributes_per_class: 2,
            samples_per_class: 6,
            noise_sigma: 0.05,
            seed: 5,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.seen_classes, b.seen_classes);
        assert_eq!(a.class_attributes.as_slice(), b.class_attributes.as_slice());
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }

    #[test]
    fn noiseless_images_of_a_class_are_identical() {
        let spec = SyntheticSpec { noise_sigma: 0.0, samples_per_class: 3, ..small_spec() };
        let ds = generate(&spec).unwrap();
        for c in 0..spec.num_classes() {
            let idx: Vec<usize> = (0..ds.labels.len()).filter(|&i| ds.labels[i] == c).collect();
            for &i in &idx[1..] {
                assert_eq!(ds.images[i].as_slice(), ds.images[idx[0]].as_slice());
            }
        }
    }

    #[test]
    fn zero_active_attributes_make_blank_images() {
        let spec = SyntheticSpec {
            attributes_per_class: 0,
            noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate(&spec).unwrap();
        assert!(ds.class_attributes.as_slice().iter().all(|&v| v == 0.0));
        for img in &ds.images {
            assert!(img.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dataset_invariants_hold_for_the_default_spec() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        ds.validate().unwrap();
        assert_eq!(ds.num_classes(), 16);
        assert_eq!(ds.images.len(), 16 * 40);
        assert_eq!(ds.seen_classes.len(), 12);
        assert_eq!(ds.unseen_classes.len(), 4);
        let train = ds.indices_with_taint(Taint::SeenTrain);
        let stest = ds.indices_with_taint(Taint::SeenTest);
        let utest = ds.indices_with_taint(Taint::UnseenTest);
        assert_eq!(train.len(), 12 * 32);
        assert_eq!(stest.len(), 12 * 8);
        assert_eq!(utest.len(), 4 * 40);
    }

    #[test]
    fn unseen_attribute_rows_are_never_all_zero() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        for &u in &ds.unseen_classes {
            let row = ds.attribute_row(u).unwrap();
            assert!(row.iter().any(|&v| v != 0.0), "class {u} has a zero attribute row");
        }
    }

    #[test]
    fn zeroing_an_attribute_changes_exactly_its_owned_patches() {
        let spec = SyntheticSpec { noise_sigma: 0.0, ..small_spec() };
        let mut ds = generate(&spec).unwrap();
        let class = ds.seen_classes[0];
        let active: Vec<usize> = ds
            .attribute_row(class)
            .unwrap()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(k, _)| k)
            .collect();
        let attr = active[0];
        let before = ds.render_class_signal(class).unwrap();
        ds.class_attributes.set2(class, attr, 0.0);
        let after = ds.render_class_signal(class).unwrap();

        let grid = ds.image_size / ds.patch_size;
        let owned = &ds.templates[attr].patches;
        let mut touched = vec![false; grid * grid];
        for y in 0..ds.image_size {
            for x in 0..ds.image_size {
                let v = (before.as_slice()[y * ds.image_size + x]
                    - after.as_slice()[y * ds.image_size + x])
                    .abs();
                if v > 1e-12 {
                    touched[(y / ds.patch_size) * grid + x / ds.patch_size] = true;
                }
            }
        }
        for p in 0..grid * grid {
            if touched[p] {
                assert!(owned.contains(&p), "patch {p} changed but is not owned");
            }
        }
        assert!(owned.iter().any(|&p| touched[p]), "no owned patch carries signal");
    }

    #[test]
    fn attribute_csv_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("attrs.csv");
        let attrs =
            Tensor::from_vec(&[2, 3], vec![0.5, 0.0, 0.987654321, 1.0 / 3.0, 0.75, 0.0]).unwrap();
        save_attributes(&path, &attrs).unwrap();
        let back = load_attributes(&path).unwrap();
        assert_eq!(back.shape(), &[2, 3]);
        assert_eq!(back.as_slice(), attrs.as_slice());
    }

    #[test]
    fn cub_shaped_attribute_file_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cub.csv");
        let mut rng = rng::seeded(3);
        let attrs = rng::randn_tensor(&[200, 312], 1.0, &mut rng);
        save_attributes(&path, &attrs).unwrap();
        let back = load_attributes(&path).unwrap();
        assert_eq!(back.shape(), &[200, 312]);
    }

    #[test]
    fn ragged_attribute_row_is_rejected_with_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "class_id,attr_0,attr_1\n0,1.0,2.0\n1,3.0\n").unwrap();
        assert!(matches!(
            load_attributes(&path),
            Err(Error::RaggedRow { line: 3, expected: 3, found: 2 })
        ));
    }

    #[test]
    fn attribute_parse_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "class_id,attr_0\n0,zebra\n").unwrap();
        assert!(matches!(load_attributes(&path), Err(Error::ParseError { line: 2, .. })));
        std::fs::write(&path, "id,attr_0\n0,1.0\n").unwrap();
        assert!(matches!(load_attributes(&path), Err(Error::ParseError { line: 1, .. })));
    }

    #[test]
    fn feature_store_round_trips_f32_payloads_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vgzf");
        let mut rng = rng::seeded(17);
        let feats = rng::randn_tensor(&[10, 8], 1.0, &mut rng).round_to_f32();
        let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
        let taints: Vec<Taint> = (0..10)
            .map(|i| [Taint::SeenTrain, Taint::SeenTest, Taint::UnseenTest, Taint::Synthetic][i % 4])
            .collect();
        save_features(&path, &feats, &labels, &taints).unwrap();
        let (f2, l2, t2) = load_features(&path).unwrap();
        assert_eq!(f2.as_slice(), feats.as_slice());
        assert_eq!(l2, labels);
        assert_eq!(t2, taints);
    }

    #[test]
    fn truncated_feature_store_is_corrupt_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vgzf");
        let feats = Tensor::filled(&[4, 3], 1.5);
        save_features(&path, &feats, &[0, 1, 2, 3], &[Taint::SeenTrain; 4]).unwrap();
        let full = std::fs::read(&path).unwrap();
        for cut in [3usize, 6, 10, 14, 18, full.len() - 2] {
            std::fs::write(&path, &full[..cut]).unwrap();
            let err = load_features(&path).unwrap_err();
            assert!(
                matches!(err, Error::BadMagic { .. } | Error::CorruptLength(_)),
                "cut {cut} gave {err}"
            );
        }
    }

    #[test]
    fn feature_store_rejects_wrong_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vgzf");
        std::fs::write(&path, b"VGZW\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_features(&path), Err(Error::BadMagic { .. })));
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&FEATURE_MAGIC);
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_features(&path), Err(Error::VersionMismatch(3))));
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec()).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        back.validate().unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.taints, ds.taints);
        assert_eq!(back.seen_classes, ds.seen_classes);
        assert_eq!(back.unseen_classes, ds.unseen_classes);
        assert_eq!(back.class_attributes.as_slice(), ds.class_attributes.as_slice());
        assert_eq!(back.image_size, ds.image_size);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!(a.as_slice(), b.as_slice());
            assert_eq!(a.shape(), b.shape());
        }
        for (a, b) in back.templates.iter().zip(&ds.templates) {
            assert_eq!(a.patches, b.patches);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ds = generate(&small_spec()).unwrap();
        save_dataset(d1.path(), &ds).unwrap();
        save_dataset(d2.path(), &ds).unwrap();
        for f in ["images.vgzf", "attributes.csv", "masks.txt", "meta.txt"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn spec_kv_file_overrides_defaults_and_rejects_unknown_keys() {
        let text = "num_seen = 6\nnoise_sigma = 0.25\n# comment\n\nseed = 99\n";
        let spec = SyntheticSpec::from_kv_text(text).unwrap();
        assert_eq!(spec.num_seen, 6);
        assert_eq!(spec.noise_sigma, 0.25);
        assert_eq!(spec.seed, 99);
        assert_eq!(spec.num_unseen, SyntheticSpec::default().num_unseen);

        assert!(matches!(
            SyntheticSpec::from_kv_text("numseen = 6\n"),
            Err(Error::UnknownKey { line: 1, .. })
        ));
        assert!(matches!(
            SyntheticSpec::from_kv_text("num_seen 6\n"),
            Err(Error::ParseError { line: 1, .. })
        ));
    }

    #[test]
    fn spec_kv_round_trip_preserves_every_field() {
        let spec = SyntheticSpec {
            num_seen: 9,
            num_unseen: 3,
            attr_dim: 11,
            image_size: 24,
            patch_size: 8,
            attributes_per_class: 4,
            samples_per_class: 7,
            noise_sigma: 0.125,
            seed: 1234,
        };
        let back = SyntheticSpec::from_kv_text(&spec.to_kv_text()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SyntheticSpec { num_seen: 0, ..small_spec() },
            SyntheticSpec { attributes_per_class: 99, ..small_spec() },
            SyntheticSpec { samples_per_class: 0, ..small_spec() },
            SyntheticSpec { image_size: 30, ..small_spec() },
            SyntheticSpec { noise_sigma: -1.0, ..small_spec() },
            SyntheticSpec { noise_sigma: f64::NAN, ..small_spec() },
        ];
        for spec in bad {
            assert!(matches!(generate(&spec), Err(Error::SpecInvalid(_))), "{spec:?}");
        }
    }

    /// Multinomial logistic regression on raw pixels, the learnability bar
    /// for the default spec.
    #[test]
    fn linear_probe_on_default_spec_reaches_95_percent() {
        let ds = generate(&SyntheticSpec::default()).unwrap();
        let pixels = ds.image_size * ds.image_size;
        let classes = ds.num_classes();

        let gather = |idx: &[usize]| {
            let mut x = Tensor::zeros(&[idx.len(), pixels]);
            let mut y = Vec::with_capacity(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                x.as_mut_slice()[r * pixels..(r + 1) * pixels]
                    .copy_from_slice(ds.images[i].as_slice());
                y.push(ds.labels[i]);
            }
            (x, y)
        };
        let (xtr, ytr) = gather(&ds.indices_with_taint(Taint::SeenTrain));
        let (xte, yte) = gather(&ds.indices_with_taint(Taint::SeenTest));

        let mut rng = rng::seeded(1);
        let mut store = ParamStore::new();
        let w = store.add("w", rng::trunc_normal_tensor(&[pixels, classes], 0.02, &mut rng));
        let b = store.add("b", Tensor::zeros(&[1, classes]));
        let mut adam = Adam::new(1e-2);
        for _ in 0..150 {
            let mut tape = Tape::new();
            let x = tape.leaf(&xtr);
            let wv = tape.watch(w, store.value(w));
            let bv = tape.watch(b, store.value(b));
            let logits = tape.linear(x, wv, bv).unwrap();
            let loss = tape.cross_entropy(logits, &ytr).unwrap();
            tape.backward(loss).unwrap();
            store.absorb_grads(&tape).unwrap();
            adam.step(&mut store).unwrap();
        }

        let logits = crate::tape::matmul_nn(&xte, store.value(w));
        let mut correct = 0;
        for (r, &label) in yte.iter().enumerate() {
            let row: Vec<f64> = logits
                .row_slice(r)
                .iter()
                .zip(store.value(b).as_slice())
                .map(|(x, y)| x + y)
                .collect();
            if Tensor::row(&row).argmax() == label {
                correct += 1;
            }
        }
        let acc = correct as f64 / yte.len() as f64;
        assert!(acc >= 0.95, "linear probe accuracy {acc}");
    }
}
