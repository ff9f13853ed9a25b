//! Fused masks and colour overlays for single frames.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::png_io::{read_rgb, write_mask, write_rgb, RgbImage};
use crate::data::{rgb_to_tensor, Sample};
use crate::error::{Error, Result};
use crate::fusion::{FusionRule, LabelRegistry};
use crate::mask::{LabelMask, BACKGROUND, IGNORE};

use super::evaluate::{fuse_sample, HeadPredictor};

pub const PAD_MULTIPLE: usize = 32;
pub const BLEND: f64 = 0.5;

/// Sidecar metadata written next to the overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayMeta {
    pub source: PathBuf,
    pub original_size: (usize, usize),
    pub padded_size: (usize, usize),
    pub padded: bool,
    pub refine_radius: Option<usize>,
    pub blend: f64,
    pub mask: PathBuf,
    pub overlay: PathBuf,
}

/// Pads bottom and right edges by replication to a multiple of `m`.
pub fn pad_to_multiple(img: &RgbImage, m: usize) -> RgbImage {
    let ph = img.height.div_ceil(m) * m;
    let pw = img.width.div_ceil(m) * m;
    let mut pixels = Vec::with_capacity(ph * pw * 3);
    for r in 0..ph {
        let sr = r.min(img.height - 1);
        for c in 0..pw {
            let sc = c.min(img.width - 1);
            let i = (sr * img.width + sc) * 3;
            pixels.extend_from_slice(&img.pixels[i..i + 3]);
        }
    }
    RgbImage {
        height: ph,
        width: pw,
        pixels,
    }
}

pub fn crop_mask_top_left(mask: &LabelMask, (h, w): (usize, usize)) -> LabelMask {
    LabelMask::from_fn(h, w, |r, c| mask.get(r, c))
}

/// Blends registry colours over `img`; background and ignore stay untouched.
pub fn blend_overlay(img: &RgbImage, mask: &LabelMask, registry: &LabelRegistry, blend: f64) -> Result<RgbImage> {
    if (img.height, img.width) != mask.size() {
        return Err(Error::Shape("overlay mask and image differ in size".into()));
    }
    let palette = registry.global_palette();
    let mut out = img.clone();
    for (i, &label) in mask.data().iter().enumerate() {
        if label == BACKGROUND || label == IGNORE {
            continue;
        }
        let color = palette[label as usize];
        for ch in 0..3 {
            let v = &mut out.pixels[i * 3 + ch];
            *v = ((1.0 - blend) * *v as f64 + blend * color[ch] as f64).round() as u8;
        }
    }
    Ok(out)
}

/// Runs both heads on one image file and writes `<stem>_mask.png`,
/// `<stem>_overlay.png` and `<stem>_overlay.json` into `out_dir`.
pub fn infer_overlay(
    anat: &dyn HeadPredictor<f32>,
    tool: &dyn HeadPredictor<f32>,
    registry: &LabelRegistry,
    image_path: &Path,
    out_dir: &Path,
    refine_radius: Option<usize>,
) -> Result<OverlayMeta> {
    let img = read_rgb(image_path)?;
    let original = (img.height, img.width);
    let padded = pad_to_multiple(&img, PAD_MULTIPLE);
    let sample = Sample {
        image: rgb_to_tensor(&padded),
        anat_mask: LabelMask::filled(padded.height, padded.width, IGNORE),
        tool_mask: LabelMask::filled(padded.height, padded.width, IGNORE),
        id: String::new(),
    };
    let fused = fuse_sample(anat, tool, &sample, registry, FusionRule::Priority, refine_radius)?;
    let fused = crop_mask_top_left(&fused, original);
    let overlay = blend_overlay(&img, &fused, registry, BLEND)?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("frame");
    let mask_path = out_dir.join(format!("{stem}_mask.png"));
    let overlay_path = out_dir.join(format!("{stem}_overlay.png"));
    write_mask(&mask_path, &fused, &registry.global_palette())?;
    write_rgb(&overlay_path, &overlay)?;
    let meta = OverlayMeta {
        source: image_path.to_path_buf(),
        original_size: original,
        padded_size: (padded.height, padded.width),
        padded: (padded.height, padded.width) != original,
        refine_radius,
        blend: BLEND,
        mask: mask_path,
        overlay: overlay_path,
    };
    super::train::write_json(&out_dir.join(format!("{stem}_overlay.json")), &meta)?;
    Ok(meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_replicates_edges() {
        let img = RgbImage::new(1, 2, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let p = pad_to_multiple(&img, 4);
        assert_eq!((p.height, p.width), (4, 4));
        assert_eq!(&p.pixels[..12], &[1, 2, 3, 4, 5, 6, 4, 5, 6, 4, 5, 6]);
        assert_eq!(&p.pixels[36..39], &[1, 2, 3]);
    }

    #[test]
    fn background_is_not_tinted() {
        let reg = LabelRegistry::synthetic(1, 1);
        let img = RgbImage::new(1, 2, vec![10, 20, 30, 40, 50, 60]).unwrap();
        let mask = LabelMask::new(1, 2, vec![0, 2]).unwrap();
        let out = blend_overlay(&img, &mask, &reg, 0.5).unwrap();
        assert_eq!(&out.pixels[..3], &[10, 20, 30]);
        let c = reg.color(2);
        let expect = |a: u8, b: u8| ((a as f64 + b as f64) / 2.0).round() as u8;
        assert_eq!(out.pixels[3], expect(40, c[0]));
    }
}
