//! Image augmentation primitives and the preset catalog.
//!
//! An [`AugmentationSpec`] is an ordered composition of primitives; the
//! list order is application order. Every primitive preserves the image
//! shape, keeps values finite, consumes its random stream
//! deterministically, and always writes a fresh buffer (so the output
//! never shares storage with the input, even for the identity).

use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum AugPrimitive {
    Identity,
    /// Zeroes each pixel (all channels of a spatial location)
    /// independently with probability `rate`.
    ZeroPixels { rate: f64 },
    /// Integer translation: per axis, the magnitude is uniform in
    /// [min_px, max_px] and the sign is uniform. Vacated pixels are
    /// zero-filled.
    Shift { min_px: usize, max_px: usize },
    HorizontalFlip { prob: f64 },
    /// Rotation about the image center by an angle uniform in
    /// [-max_degrees, max_degrees], bilinear resampling, zero fill.
    Rotate { max_degrees: f64 },
    /// With probability `prob`, replaces every channel by the channel
    /// mean.
    Grayscale { prob: f64 },
    /// Random brightness shift and contrast scale, each uniform in
    /// [-max_delta, max_delta]; output clamped to [0, 1].
    BrightnessContrast { max_delta: f64 },
    /// One of the sub-compositions, chosen uniformly per call.
    PolicyList { policies: Vec<AugmentationSpec> },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationSpec {
    pub steps: Vec<AugPrimitive>,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            steps: alloc::vec![AugPrimitive::Identity],
        }
    }

    pub fn of(steps: Vec<AugPrimitive>) -> Self {
        AugmentationSpec { steps }
    }

    pub fn validate(&self) -> Result<()> {
        for step in &self.steps {
            match step {
                AugPrimitive::Identity => {}
                AugPrimitive::ZeroPixels { rate } => {
                    if !(0.0..=1.0).contains(rate) {
                        return Err(CoreError::InvalidSpec(alloc::format!(
                            "zero_pixels rate {rate} outside [0, 1]"
                        )));
                    }
                }
                AugPrimitive::Shift { min_px, max_px } => {
                    if min_px > max_px {
                        return Err(CoreError::InvalidSpec(alloc::format!(
                            "shift range {min_px}..{max_px} is empty"
                        )));
                    }
                }
                AugPrimitive::HorizontalFlip { prob } | AugPrimitive::Grayscale { prob } => {
                    if !(0.0..=1.0).contains(prob) {
                        return Err(CoreError::InvalidSpec(alloc::format!(
                            "probability {prob} outside [0, 1]"
                        )));
                    }
                }
                AugPrimitive::Rotate { max_degrees } => {
                    if !max_degrees.is_finite() || *max_degrees < 0.0 {
                        return Err(CoreError::InvalidSpec(alloc::format!(
                            "rotate bound {max_degrees} invalid"
                        )));
                    }
                }
                AugPrimitive::BrightnessContrast { max_delta } => {
                    if !max_delta.is_finite() || *max_delta < 0.0 {
                        return Err(CoreError::InvalidSpec(alloc::format!(
                            "brightness/contrast bound {max_delta} invalid"
                        )));
                    }
                }
                AugPrimitive::PolicyList { policies } => {
                    if policies.is_empty() {
                        return Err(CoreError::InvalidSpec("empty policy list".to_string()));
                    }
                    for p in policies {
                        p.validate()?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies the composition to one [C, H, W] image. The output has the
/// same shape and never shares storage with the input.
pub fn apply_augmentation(aug: &AugmentationSpec, image: &Tensor, stream: &mut Stream) -> Tensor {
    let shape = image.shape();
    debug_assert_eq!(shape.len(), 3, "augmentation expects [C, H, W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut data = image.data().to_vec();
    for step in &aug.steps {
        apply_step(step, &mut data, c, h, w, stream);
    }
    Tensor::new(shape.to_vec(), data).expect("shape preserved")
}

fn apply_step(step: &AugPrimitive, data: &mut Vec<f64>, c: usize, h: usize, w: usize, stream: &mut Stream) {
    match step {
        AugPrimitive::Identity => {}
        AugPrimitive::ZeroPixels { rate } => {
            for p in 0..h * w {
                if stream.bernoulli(*rate) {
                    for ch in 0..c {
                        data[ch * h * w + p] = 0.0;
                    }
                }
            }
        }
        AugPrimitive::Shift { min_px, max_px } => {
            let dy = signed_offset(stream, *min_px, *max_px);
            let dx = signed_offset(stream, *min_px, *max_px);
            let src = data.clone();
            for ch in 0..c {
                let base = ch * h * w;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (sy, sx) = (y - dy, x - dx);
                        data[base + (y as usize) * w + x as usize] =
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                src[base + (sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
        AugPrimitive::HorizontalFlip { prob } => {
            let flip = stream.bernoulli(*prob);
            if flip {
                for ch in 0..c {
                    let base = ch * h * w;
                    for y in 0..h {
                        data[base + y * w..base + (y + 1) * w].reverse();
                    }
                }
            }
        }
        AugPrimitive::Rotate { max_degrees } => {
            let deg = stream.uniform_in(-max_degrees, *max_degrees);
            let rad = deg * core::f64::consts::PI / 180.0;
            let (sin, cos) = (libm::sin(rad), libm::cos(rad));
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let src = data.clone();
            for ch in 0..c {
                let base = ch * h * w;
                for y in 0..h {
                    for x in 0..w {
                        // Inverse map: rotate the destination back.
                        let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                        let sy = cos * ry + sin * rx + cy;
                        let sx = -sin * ry + cos * rx + cx;
                        data[base + y * w + x] = bilinear(&src[base..base + h * w], h, w, sy, sx);
                    }
                }
            }
        }
        AugPrimitive::Grayscale { prob } => {
            let apply = stream.bernoulli(*prob);
            if apply && c > 1 {
                for p in 0..h * w {
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += data[ch * h * w + p];
                    }
                    let mean = s / c as f64;
                    for ch in 0..c {
                        data[ch * h * w + p] = mean;
                    }
                }
            }
        }
        AugPrimitive::BrightnessContrast { max_delta } => {
            let brightness = stream.uniform_in(-max_delta, *max_delta);
            let contrast = 1.0 + stream.uniform_in(-max_delta, *max_delta);
            for v in data.iter_mut() {
                *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
            }
        }
        AugPrimitive::PolicyList { policies } => {
            let pick = stream.below(policies.len());
            for sub in &policies[pick].steps {
                apply_step(sub, data, c, h, w, stream);
            }
        }
    }
}

fn signed_offset(stream: &mut Stream, min_px: usize, max_px: usize) -> isize {
    let magnitude = stream.int_in(min_px as i64, max_px as i64) as isize;
    let negative = stream.bernoulli(0.5);
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = libm::floor(y);
    let x0 = libm::floor(x);
    let (fy, fx) = (y - y0, x - x0);
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 as isize + dy, x0 as isize + dx);
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                acc += wy * wx * plane[yy as usize * w + xx as usize];
            }
        }
    }
    acc
}

/// Default pixel-zeroing rate; the drop probability is a hyperparameter
/// and the shift-range presets keep it fixed while the translation
/// bound varies.
pub const DEFAULT_ZERO_RATE: f64 = 0.4;

/// The named preset catalog.
pub fn augmentation_presets() -> Vec<(&'static str, AugmentationSpec)> {
    use AugPrimitive::*;
    let zero_shift = |min_px: usize, max_px: usize| {
        AugmentationSpec::of(alloc::vec![
            Shift { min_px, max_px },
            ZeroPixels { rate: DEFAULT_ZERO_RATE },
        ])
    };
    alloc::vec![
        ("identity", AugmentationSpec::identity()),
        (
            "zero_pixels",
            AugmentationSpec::of(alloc::vec![ZeroPixels { rate: DEFAULT_ZERO_RATE }]),
        ),
        ("zero_shift", zero_shift(0, 6)),
        (
            "flip_shift",
            AugmentationSpec::of(alloc::vec![
                Shift { min_px: 0, max_px: 6 },
                HorizontalFlip { prob: 0.5 },
            ]),
        ),
        (
            "full_color",
            AugmentationSpec::of(alloc::vec![
                Shift { min_px: 0, max_px: 6 },
                HorizontalFlip { prob: 0.5 },
                Rotate { max_degrees: 15.0 },
                BrightnessContrast { max_delta: 0.2 },
            ]),
        ),
        (
            "policy_list",
            AugmentationSpec::of(alloc::vec![PolicyList {
                policies: alloc::vec![
                    AugmentationSpec::of(alloc::vec![Shift { min_px: 0, max_px: 3 }]),
                    AugmentationSpec::of(alloc::vec![Rotate { max_degrees: 10.0 }]),
                    AugmentationSpec::of(alloc::vec![
                        Shift { min_px: 3, max_px: 6 },
                        HorizontalFlip { prob: 0.5 },
                    ]),
                    AugmentationSpec::of(alloc::vec![
                        ZeroPixels { rate: 0.2 },
                        Shift { min_px: 0, max_px: 3 },
                    ]),
                    AugmentationSpec::of(alloc::vec![
                        Rotate { max_degrees: 15.0 },
                        BrightnessContrast { max_delta: 0.1 },
                    ]),
                ],
            }]),
        ),
        ("shift_0", zero_shift(0, 0)),
        ("shift_0_3", zero_shift(0, 3)),
        ("shift_3_6", zero_shift(3, 6)),
        ("shift_0_6", zero_shift(0, 6)),
        ("shift_6_9", zero_shift(6, 9)),
        ("shift_9_12", zero_shift(9, 12)),
        ("shift_0_9", zero_shift(0, 9)),
    ]
}

/// Looks a preset up by name.
pub fn preset(name: &str) -> Result<AugmentationSpec> {
    augmentation_presets()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, spec)| spec)
        .ok_or_else(|| CoreError::InvalidSpec(alloc::format!("unknown augmentation preset `{name}`")))
}

/// Names of all presets, in catalog order.
pub fn preset_names() -> Vec<String> {
    augmentation_presets()
        .into_iter()
        .map(|(n, _)| n.to_string())
        .collect()
}
