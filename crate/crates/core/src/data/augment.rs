//! Geometric augmentation applied identically to a frame and its masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::bilinear_forward;
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    /// Clockwise rotations in degrees, drawn uniformly. Each must be a
    /// multiple of 90; quarter turns are skipped on non-square frames.
    pub rotation_degrees: Vec<u32>,
    /// Side of the random crop relative to the frame; the crop is resized back.
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotation_degrees: vec![0, 90, 180, 270],
            crop_fraction: 0.8,
            seed: 0,
        }
    }
}

impl AugmentationSpec {
    /// A spec that leaves every sample unchanged.
    pub fn identity() -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotation_degrees: vec![0],
            crop_fraction: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("hflip_prob", self.hflip_prob), ("vflip_prob", self.vflip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "crop_fraction must lie in (0, 1], got {}",
                self.crop_fraction
            )));
        }
        if self.rotation_degrees.is_empty() {
            return Err(Error::Config("rotation_degrees must not be empty".into()));
        }
        if let Some(d) = self.rotation_degrees.iter().find(|&&d| !matches!(d, 0 | 90 | 180 | 270)) {
            return Err(Error::Config(format!("rotation {d} is not one of 0/90/180/270")));
        }
        Ok(())
    }
}

/// One concrete draw of the random transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transform {
    /// `(top, left, height, width)` of the crop window.
    pub crop: Option<(usize, usize, usize, usize)>,
    pub hflip: bool,
    pub vflip: bool,
    pub quarter_turns: u32,
}

impl Transform {
    /// Draws crop, flips and rotation in a fixed order so the number of
    /// random values consumed does not depend on the outcome.
    pub fn draw(spec: &AugmentationSpec, (h, w): (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let ch = ((h as f64 * spec.crop_fraction).round() as usize).clamp(1, h);
        let cw = ((w as f64 * spec.crop_fraction).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        let hflip = rng.random::<f64>() < spec.hflip_prob;
        let vflip = rng.random::<f64>() < spec.vflip_prob;
        let pick = rng.random_range(0..spec.rotation_degrees.len());
        let mut quarter_turns = spec.rotation_degrees[pick] / 90;
        if h != w && quarter_turns % 2 == 1 {
            quarter_turns = 0;
        }
        Ok(Self {
            crop: (ch < h || cw < w).then_some((top, left, ch, cw)),
            hflip,
            vflip,
            quarter_turns,
        })
    }
}

/// Applies a random transform drawn from `spec`.
pub fn augment<T: Scalar>(sample: &Sample<T>, spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<Sample<T>> {
    let t = Transform::draw(spec, sample.anat_mask.size(), rng)?;
    apply(sample, &t)
}

pub fn apply<T: Scalar>(sample: &Sample<T>, t: &Transform) -> Result<Sample<T>> {
    let mut image = sample.image.clone();
    let mut anat = sample.anat_mask.clone();
    let mut tool = sample.tool_mask.clone();
    if let Some(window) = t.crop {
        let size = anat.size();
        image = resize_image(&crop_image(&image, window)?, size)?;
        anat = resize_mask(&crop_mask(&anat, window), size);
        tool = resize_mask(&crop_mask(&tool, window), size);
    }
    if t.hflip {
        image = hflip_image(&image)?;
        anat = hflip(&anat);
        tool = hflip(&tool);
    }
    if t.vflip {
        image = vflip_image(&image)?;
        anat = vflip(&anat);
        tool = vflip(&tool);
    }
    for _ in 0..t.quarter_turns {
        image = rot90_image(&image)?;
        anat = rot90(&anat);
        tool = rot90(&tool);
    }
    Ok(Sample {
        image,
        anat_mask: anat,
        tool_mask: tool,
        id: sample.id.clone(),
    })
}

/// Builds an output plane of `out` size whose pixel `(r, c)` copies
/// `src(r, c)` from the input.
fn remap<V: Copy>(data: &[V], w: usize, out: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> Vec<V> {
    let mut v = Vec::with_capacity(out.0 * out.1);
    for r in 0..out.0 {
        for c in 0..out.1 {
            let (sr, sc) = src(r, c);
            v.push(data[sr * w + sc]);
        }
    }
    v
}

fn remap_mask(m: &LabelMask, out: (usize, usize), src: impl Fn(usize, usize) -> (usize, usize)) -> LabelMask {
    let data = remap(m.data(), m.width(), out, src);
    LabelMask::new(out.0, out.1, data).expect("remap preserves size")
}

fn remap_image<T: Scalar>(
    img: &Tensor<T>,
    out: (usize, usize),
    src: impl Fn(usize, usize) -> (usize, usize),
) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    let mut data = Vec::with_capacity(c * out.0 * out.1);
    for ch in 0..c {
        data.extend(remap(&img.data()[ch * h * w..(ch + 1) * h * w], w, out, &src));
    }
    Tensor::from_vec(&[c, out.0, out.1], data)
}

pub fn hflip(m: &LabelMask) -> LabelMask {
    let w = m.width();
    remap_mask(m, m.size(), |r, c| (r, w - 1 - c))
}

pub fn vflip(m: &LabelMask) -> LabelMask {
    let h = m.height();
    remap_mask(m, m.size(), |r, c| (h - 1 - r, c))
}

/// Clockwise quarter turn: input `(r, c)` lands at `(c, h - 1 - r)`.
pub fn rot90(m: &LabelMask) -> LabelMask {
    let h = m.height();
    remap_mask(m, (m.width(), h), |r, c| (h - 1 - c, r))
}

pub fn hflip_image<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = img.dims3()?;
    remap_image(img, (h, w), |r, c| (r, w - 1 - c))
}

pub fn vflip_image<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = img.dims3()?;
    remap_image(img, (h, w), |r, c| (h - 1 - r, c))
}

pub fn rot90_image<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, h, w) = img.dims3()?;
    remap_image(img, (w, h), |r, c| (h - 1 - c, r))
}

pub fn crop_mask(m: &LabelMask, (top, left, h, w): (usize, usize, usize, usize)) -> LabelMask {
    remap_mask(m, (h, w), |r, c| (top + r, left + c))
}

pub fn crop_image<T: Scalar>(img: &Tensor<T>, (top, left, h, w): (usize, usize, usize, usize)) -> Result<Tensor<T>> {
    remap_image(img, (h, w), |r, c| (top + r, left + c))
}

/// Nearest-neighbour resize using pixel-centre sampling.
pub fn resize_mask(m: &LabelMask, (oh, ow): (usize, usize)) -> LabelMask {
    let (h, w) = m.size();
    let near = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    remap_mask(m, (oh, ow), |r, c| (near(r, h, oh), near(c, w, ow)))
}

pub fn resize_image<T: Scalar>(img: &Tensor<T>, (oh, ow): (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = img.dims3()?;
    let mut out = vec![T::zero(); c * oh * ow];
    bilinear_forward(c, (h, w), (oh, ow), img.data(), &mut out);
    Tensor::from_vec(&[c, oh, ow], out)
}
