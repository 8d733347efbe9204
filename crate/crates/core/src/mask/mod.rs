//! Objectness, thresholded masks with an uncertainty band, and the
//! self-training label swap.

mod png_io;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use png_io::{read_mask, read_rgb, voc_color, write_color_mask, write_mask, write_overlay, RgbImage};

use crate::attention::RefinedAttention;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::prompt::ClassVocabulary;
use crate::store::{resize_channels, ImageSize};
use crate::{ClassId, BACKGROUND, UNCERTAIN};

pub const DEFAULT_ALPHA: f32 = 0.5;
pub const DEFAULT_BETA: f32 = 0.6;

/// `height × width` label map over `{0} ∪ legend ∪ {255}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
    legend: Vec<ClassId>,
}

impl SegMask {
    pub fn new(width: u32, height: u32, data: Vec<u8>, legend: Vec<ClassId>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            legend,
        })
    }

    /// Builds a mask whose legend is every non-background, non-uncertain
    /// value present.
    pub fn from_labels(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let legend = present_classes(&data);
        Self::new(width, height, data, legend)
    }

    pub fn filled(width: u32, height: u32, value: u8) -> Self {
        Self::from_labels(width, height, vec![value; width as usize * height as usize])
            .expect("consistent size")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size(&self) -> ImageSize {
        ImageSize::new(self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn legend(&self) -> &[ClassId] {
        &self.legend
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[(y * self.width + x) as usize]
    }

    pub fn uncertain_pixels(&self) -> usize {
        self.data.iter().filter(|&&v| v == UNCERTAIN).count()
    }

    pub fn uncertain_fraction(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.uncertain_pixels() as f64 / self.data.len() as f64
        }
    }

    /// Distinct values outside `{0, 255} ∪ legend`, ascending.
    pub fn out_of_legend(&self, legend: &[ClassId]) -> Vec<u8> {
        let allowed: BTreeSet<_> = legend.iter().copied().collect();
        let found: BTreeSet<u8> = self
            .data
            .iter()
            .copied()
            .filter(|v| *v != BACKGROUND && *v != UNCERTAIN && !allowed.contains(v))
            .collect();
        found.into_iter().collect()
    }

    /// Checks every value against the mask's own legend.
    pub fn validate(&self) -> Result<()> {
        let stray = self.out_of_legend(&self.legend);
        if stray.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("mask values {stray:?} are not in its legend")))
        }
    }

    /// Same labels with uncertain pixels relabeled as `value`.
    pub fn with_uncertain_as(&self, value: u8) -> SegMask {
        let data = self
            .data
            .iter()
            .map(|&v| if v == UNCERTAIN { value } else { v })
            .collect();
        SegMask {
            data,
            ..self.clone()
        }
    }

    /// Nearest-neighbour upsampling (or downsampling) to `size`.
    pub fn resize_nearest(&self, size: ImageSize) -> SegMask {
        let (w, h) = (size.width as usize, size.height as usize);
        let (sw, sh) = (self.width as usize, self.height as usize);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            let sy = ((y * 2 + 1) * sh / (h * 2)).min(sh - 1);
            for x in 0..w {
                let sx = ((x * 2 + 1) * sw / (w * 2)).min(sw - 1);
                data.push(self.data[sy * sw + sx]);
            }
        }
        SegMask {
            width: size.width,
            height: size.height,
            data,
            legend: self.legend.clone(),
        }
    }
}

fn present_classes(data: &[u8]) -> Vec<ClassId> {
    let set: BTreeSet<u8> = data
        .iter()
        .copied()
        .filter(|&v| v != BACKGROUND && v != UNCERTAIN)
        .collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Per-channel min-max rescaling to `[0, 1]` over the image.
    #[default]
    MinMax,
    /// Raw refined attention values.
    None,
}

/// Per-pixel maximum class evidence and the class achieving it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectnessField {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
    /// Index into `legend` of the per-pixel argmax.
    pub labels: Vec<u16>,
    pub legend: Vec<ClassId>,
}

/// Min-max rescales every column to `[0, 1]`; constant columns become 0.
pub fn normalize_channels(map: &Matrix) -> Matrix {
    let channels = map.cols();
    let mut data = map.as_slice().to_vec();
    for c in 0..channels {
        let (lo, hi) = data
            .iter()
            .skip(c)
            .step_by(channels)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = f64::from(hi) - f64::from(lo);
        for v in data.iter_mut().skip(c).step_by(channels) {
            *v = if span > 0.0 {
                ((f64::from(*v) - f64::from(lo)) / span) as f32
            } else {
                0.0
            };
        }
    }
    Matrix::from_vec(map.rows(), channels, data).expect("same shape")
}

/// Computes objectness `V` and argmax `S` at `image_size`.
///
/// Channels are normalized on the attention grid (constant channels map to
/// 0), resized bilinearly, then reduced per pixel. Argmax ties go to the
/// earliest legend position.
pub fn objectness(refined: &RefinedAttention, image_size: ImageSize, norm: Normalization) -> Result<ObjectnessField> {
    let channels = refined.map.cols();
    if channels == 0 || refined.class_ids.len() != channels {
        return Err(Error::Contract(format!(
            "objectness needs one channel per class ({} channels, {} classes)",
            channels,
            refined.class_ids.len()
        )));
    }
    let data = match norm {
        Normalization::MinMax => normalize_channels(&refined.map),
        Normalization::None => refined.map.clone(),
    };
    let (h, w) = (image_size.height as usize, image_size.width as usize);
    let resized = resize_channels(
        data.as_slice(),
        (usize::from(refined.grid.h), usize::from(refined.grid.w)),
        channels,
        (h, w),
    );

    let mut values = Vec::with_capacity(h * w);
    let mut labels = Vec::with_capacity(h * w);
    for px in resized.chunks(channels) {
        let mut best = 0;
        for (c, &v) in px.iter().enumerate().skip(1) {
            if v > px[best] {
                best = c;
            }
        }
        values.push(px[best]);
        labels.push(best as u16);
    }
    Ok(ObjectnessField {
        width: image_size.width,
        height: image_size.height,
        values,
        labels,
        legend: refined.class_ids.clone(),
    })
}

/// Three-way threshold: background where `V ≤ α`, uncertain where
/// `α < V < β`, the argmax class where `V ≥ β`.
pub fn decide(field: &ObjectnessField, alpha: f32, beta: f32) -> Result<SegMask> {
    if !(0.0 <= alpha && alpha < beta && beta <= 1.0) {
        return Err(Error::Config(format!(
            "thresholds must satisfy 0 <= alpha < beta <= 1 (alpha {alpha}, beta {beta})"
        )));
    }
    let data = field
        .values
        .iter()
        .zip(&field.labels)
        .map(|(&v, &label)| {
            if v <= alpha {
                BACKGROUND
            } else if v < beta {
                UNCERTAIN
            } else {
                field.legend[usize::from(label)]
            }
        })
        .collect();
    SegMask::new(field.width, field.height, data, field.legend.clone())
}

/// Result of swapping an attention-derived mask for segmenter predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adoption {
    pub mask: SegMask,
    /// Classes the prediction uses that the original legend did not list.
    pub introduced: Vec<ClassId>,
}

/// Replaces `original` with `predicted` for the next training round.
///
/// `predicted` must be free of uncertain pixels and only use vocabulary
/// classes. Classes outside the original legend are accepted and reported.
pub fn adopt_pseudo_labels(original: &SegMask, predicted: &SegMask, vocab: &ClassVocabulary) -> Result<Adoption> {
    if (original.width, original.height) != (predicted.width, predicted.height) {
        return Err(Error::Shape(format!(
            "original is {}x{}, prediction {}x{}",
            original.width, original.height, predicted.width, predicted.height
        )));
    }
    if predicted.uncertain_pixels() > 0 {
        return Err(Error::Contract(format!(
            "pseudo labels contain {} uncertain pixels",
            predicted.uncertain_pixels()
        )));
    }
    let used = present_classes(&predicted.data);
    if let Some(bad) = used.iter().find(|id| !vocab.contains(**id)) {
        return Err(Error::Vocabulary(format!(
            "pseudo labels use class {bad}, which is not in the vocabulary"
        )));
    }
    let introduced = used
        .iter()
        .copied()
        .filter(|id| !original.legend.contains(id))
        .collect();
    Ok(Adoption {
        mask: SegMask::new(predicted.width, predicted.height, predicted.data.clone(), used)?,
        introduced,
    })
}
