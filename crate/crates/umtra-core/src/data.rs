//! Desk-scale datasets: a deterministic procedural glyph generator and
//! the class-level split machinery.
//!
//! A glyph class is a seeded random polyline skeleton; instances render
//! the skeleton with small per-instance jitter (translation, rotation,
//! stroke thickness). Classes use independent random streams, so
//! generation order or parallelism cannot change the output. Splits are
//! always by class, never by instance: every instance of a class lands
//! in exactly one of train/val/test.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Images with per-sample class ids. Class ids are stable across
/// splits (they are never remapped), which is what lets the evaluation
/// layer assert train/test class disjointness.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Vec<Tensor>,
    class_ids: Vec<usize>,
    image_shape: [usize; 3],
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, class_ids: Vec<usize>) -> Result<Self> {
        if images.is_empty() {
            return Err(CoreError::InvalidSpec("no samples found".to_string()));
        }
        if images.len() != class_ids.len() {
            return Err(CoreError::InvalidSpec(
                "images and class ids have different lengths".to_string(),
            ));
        }
        let first = images[0].shape().to_vec();
        if first.len() != 3 {
            return Err(CoreError::InvalidSpec("images must be [C, H, W]".to_string()));
        }
        for img in &images {
            if img.shape() != first.as_slice() {
                return Err(CoreError::InvalidSpec("mixed image shapes".to_string()));
            }
        }
        Ok(LabeledDataset {
            image_shape: [first[0], first[1], first[2]],
            images,
            class_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn class_of(&self, i: usize) -> usize {
        self.class_ids[i]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Distinct class ids, sorted.
    pub fn classes(&self) -> Vec<usize> {
        let mut v = self.class_ids.clone();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Sample indices grouped by class id, ordered by class id.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.class_ids.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }

    /// The subset belonging to the given classes (instance order kept).
    pub fn restrict_to(&self, classes: &[usize]) -> Result<LabeledDataset> {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.class_ids[i]))
            .collect();
        if keep.is_empty() {
            return Err(CoreError::InvalidSpec("empty class restriction".to_string()));
        }
        LabeledDataset::new(
            keep.iter().map(|&i| self.images[i].clone()).collect(),
            keep.iter().map(|&i| self.class_ids[i]).collect(),
        )
    }
}

/// A flat pool of images. Hidden class ids, when present, are carried
/// for diagnostics only; episode construction cannot see them (the
/// builder API touches nothing but `len` and `sample`).
#[derive(Debug, Clone)]
pub struct UnlabeledDataset {
    samples: Vec<Tensor>,
    hidden_labels: Option<Vec<usize>>,
    image_shape: [usize; 3],
}

impl UnlabeledDataset {
    pub fn new(samples: Vec<Tensor>, hidden_labels: Option<Vec<usize>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(CoreError::InvalidSpec("no samples found".to_string()));
        }
        if let Some(labels) = &hidden_labels {
            if labels.len() != samples.len() {
                return Err(CoreError::InvalidSpec(
                    "hidden labels and samples have different lengths".to_string(),
                ));
            }
        }
        let first = samples[0].shape().to_vec();
        for s in &samples {
            if s.shape() != first.as_slice() {
                return Err(CoreError::InvalidSpec("mixed image shapes".to_string()));
            }
        }
        if first.len() != 3 {
            return Err(CoreError::InvalidSpec("images must be [C, H, W]".to_string()));
        }
        Ok(UnlabeledDataset {
            image_shape: [first[0], first[1], first[2]],
            samples,
            hidden_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    /// Diagnostic access to the hidden class ids; never consulted by
    /// episode construction.
    pub fn diagnostics_hidden_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }
}

/// Drops the labels for unsupervised meta-training, retaining them as
/// hidden diagnostics.
pub fn strip_labels(dataset: &LabeledDataset) -> UnlabeledDataset {
    UnlabeledDataset {
        samples: dataset.images.clone(),
        hidden_labels: Some(dataset.class_ids.clone()),
        image_shape: dataset.image_shape,
    }
}

// ----- glyphs -----

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphJitter {
    /// Per-instance translation bound in pixels.
    pub translate_px: f64,
    /// Per-instance rotation bound in degrees.
    pub rotate_deg: f64,
    /// Relative stroke-thickness variation.
    pub thickness: f64,
}

impl Default for GlyphJitter {
    fn default() -> Self {
        GlyphJitter {
            translate_px: 2.0,
            rotate_deg: 10.0,
            thickness: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphSpec {
    pub classes: usize,
    pub instances: usize,
    pub image_size: usize,
    /// Inclusive stroke-count range per class skeleton.
    pub stroke_count: (usize, usize),
    pub jitter: GlyphJitter,
    pub seed: u64,
}

impl GlyphSpec {
    pub fn new(classes: usize, instances: usize, seed: u64) -> Self {
        GlyphSpec {
            classes,
            instances,
            image_size: 14,
            stroke_count: (3, 5),
            jitter: GlyphJitter::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.instances < 2 {
            return Err(CoreError::InvalidSpec(
                "glyph spec needs at least 2 classes and 2 instances".to_string(),
            ));
        }
        if self.image_size < 8 {
            return Err(CoreError::InvalidSpec("image_size must be >= 8".to_string()));
        }
        if self.stroke_count.0 == 0 || self.stroke_count.0 > self.stroke_count.1 {
            return Err(CoreError::InvalidSpec("bad stroke count range".to_string()));
        }
        if self.jitter.translate_px < 0.0
            || self.jitter.rotate_deg < 0.0
            || self.jitter.thickness < 0.0
        {
            return Err(CoreError::InvalidSpec("negative jitter".to_string()));
        }
        Ok(())
    }
}

/// A class skeleton: strokes as unit-square polylines.
struct Skeleton {
    strokes: Vec<Vec<(f64, f64)>>,
}

fn class_skeleton(spec: &GlyphSpec, class: usize) -> Skeleton {
    let mut s = Stream::new(spec.seed, (class as u64) * 2);
    let n_strokes = s.int_in(spec.stroke_count.0 as i64, spec.stroke_count.1 as i64) as usize;
    let strokes = (0..n_strokes)
        .map(|_| {
            let n_pts = s.int_in(2, 4) as usize;
            let mut pts = Vec::with_capacity(n_pts);
            let mut x = s.uniform_in(0.2, 0.8);
            let mut y = s.uniform_in(0.2, 0.8);
            pts.push((x, y));
            for _ in 1..n_pts {
                x = (x + s.uniform_in(-0.4, 0.4)).clamp(0.1, 0.9);
                y = (y + s.uniform_in(-0.4, 0.4)).clamp(0.1, 0.9);
                pts.push((x, y));
            }
            pts
        })
        .collect();
    Skeleton { strokes }
}

fn render_instance(spec: &GlyphSpec, skeleton: &Skeleton, s: &mut Stream) -> Tensor {
    let size = spec.image_size;
    let fsize = size as f64;
    let dx = s.uniform_in(-spec.jitter.translate_px, spec.jitter.translate_px);
    let dy = s.uniform_in(-spec.jitter.translate_px, spec.jitter.translate_px);
    let rad = s.uniform_in(-spec.jitter.rotate_deg, spec.jitter.rotate_deg)
        * core::f64::consts::PI
        / 180.0;
    let thickness = 0.05 * fsize * (1.0 + s.uniform_in(-spec.jitter.thickness, spec.jitter.thickness));
    let (sin, cos) = (libm::sin(rad), libm::cos(rad));
    let center = (fsize - 1.0) / 2.0;

    // Skeleton points in jittered pixel coordinates.
    let transform = |(ux, uy): (f64, f64)| -> (f64, f64) {
        let (px, py) = (ux * (fsize - 1.0) - center, uy * (fsize - 1.0) - center);
        (
            cos * px - sin * py + center + dx,
            sin * px + cos * py + center + dy,
        )
    };
    let strokes: Vec<Vec<(f64, f64)>> = skeleton
        .strokes
        .iter()
        .map(|pts| pts.iter().map(|&p| transform(p)).collect())
        .collect();

    const SOFT: f64 = 0.7;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64, y as f64);
            let mut d = f64::INFINITY;
            for pts in &strokes {
                for seg in pts.windows(2) {
                    d = d.min(segment_distance(p, seg[0], seg[1]));
                }
            }
            data.push(((thickness + SOFT - d) / SOFT).clamp(0.0, 1.0));
        }
    }
    Tensor::new(alloc::vec![1, size, size], data).expect("shape consistent")
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let len_sq = abx * abx + aby * aby;
    let t = if len_sq > 0.0 {
        ((apx * abx + apy * aby) / len_sq).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * abx - p.0, a.1 + t * aby - p.1);
    libm::sqrt(cx * cx + cy * cy)
}

/// Generates the full glyph dataset, `instances` renders per class.
/// Per-class streams make the result independent of generation order.
pub fn gen_glyphs(spec: &GlyphSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut images = Vec::with_capacity(spec.classes * spec.instances);
    let mut class_ids = Vec::with_capacity(spec.classes * spec.instances);
    for class in 0..spec.classes {
        let skeleton = class_skeleton(spec, class);
        let mut s = Stream::new(spec.seed, (class as u64) * 2 + 1);
        for _ in 0..spec.instances {
            images.push(render_instance(spec, &skeleton, &mut s));
            class_ids.push(class);
        }
    }
    LabeledDataset::new(images, class_ids)
}

// ----- splits -----

/// Explicit class-id sets for the three splits.
#[derive(Debug, Clone, Default)]
pub struct SplitProtocol {
    pub train_classes: Vec<usize>,
    pub val_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub enum SplitSpec {
    /// Fractions of classes for (train, val, test); must sum to 1.
    /// Counts are floored for val and test, remainder goes to train.
    Ratios(f64, f64, f64),
    Explicit(SplitProtocol),
}

/// Splits by class: all instances of a class land in one split.
pub fn split(
    dataset: &LabeledDataset,
    spec: &SplitSpec,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let classes = dataset.classes();
    let (train_c, val_c, test_c) = match spec {
        SplitSpec::Ratios(rt, rv, rs) => {
            if !(rt + rv + rs - 1.0).abs().le(&1e-9) || *rt < 0.0 || *rv < 0.0 || *rs < 0.0 {
                return Err(CoreError::InvalidSpec(alloc::format!(
                    "split ratios ({rt}, {rv}, {rs}) must be nonnegative and sum to 1"
                )));
            }
            let c = classes.len();
            let n_val = (c as f64 * rv) as usize;
            let n_test = (c as f64 * rs) as usize;
            let n_train = c - n_val - n_test;
            let mut shuffled = classes.clone();
            Stream::new(seed, 0).shuffle(&mut shuffled);
            (
                shuffled[..n_train].to_vec(),
                shuffled[n_train..n_train + n_val].to_vec(),
                shuffled[n_train + n_val..].to_vec(),
            )
        }
        SplitSpec::Explicit(proto) => {
            let mut all: Vec<usize> = proto
                .train_classes
                .iter()
                .chain(&proto.val_classes)
                .chain(&proto.test_classes)
                .copied()
                .collect();
            let before = all.len();
            all.sort_unstable();
            all.dedup();
            if all.len() != before {
                return Err(CoreError::InvalidSpec("overlapping split sets".to_string()));
            }
            for c in &all {
                if !classes.contains(c) {
                    return Err(CoreError::InvalidSpec(alloc::format!(
                        "split references unknown class {c}"
                    )));
                }
            }
            (
                proto.train_classes.clone(),
                proto.val_classes.clone(),
                proto.test_classes.clone(),
            )
        }
    };
    Ok((
        dataset.restrict_to(&train_c)?,
        dataset.restrict_to(&val_c)?,
        dataset.restrict_to(&test_c)?,
    ))
}
