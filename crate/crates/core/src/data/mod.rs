//! Dataset folders, augmentation and the synthetic scene generator.
//!
//! Layout on disk:
//!
//! ```text
//! root/
//!   classes.json
//!   images/{split}/<id>.png          8-bit RGB
//!   masks_anatomy/{split}/<id>.png   8-bit indexed, head-local ids, 255 = ignore
//!   masks_tool/{split}/<id>.png      8-bit indexed, head-local ids, 255 = ignore
//! ```

pub mod augment;
pub mod png_io;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{ClassEntry, Head, LabelRegistry};
use crate::mask::{LabelMask, IGNORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentationSpec};
pub use png_io::RgbImage;
pub use synth::{synth_generate, SynthConfig};

pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// One frame with per-head supervision. `image` is `[3, h, w]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub image: Tensor<T>,
    pub anat_mask: LabelMask,
    pub tool_mask: LabelMask,
    pub id: String,
}

impl<T: Scalar> Sample<T> {
    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            image: self.image.cast(),
            anat_mask: self.anat_mask.clone(),
            tool_mask: self.tool_mask.clone(),
            id: self.id.clone(),
        }
    }

    pub fn mask(&self, head: Head) -> &LabelMask {
        match head {
            Head::Anatomy => &self.anat_mask,
            Head::Tool => &self.tool_mask,
        }
    }
}

pub fn image_dir(root: &Path, split: Split) -> PathBuf {
    root.join("images").join(split.as_str())
}

pub fn mask_dir(root: &Path, head: Head, split: Split) -> PathBuf {
    root.join(format!("masks_{}", head.as_str())).join(split.as_str())
}

pub fn read_registry(root: &Path) -> Result<LabelRegistry> {
    let path = root.join(CLASSES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<ClassEntry> = serde_json::from_str(&text)?;
    LabelRegistry::from_entries(&entries)
}

pub fn write_registry(root: &Path, registry: &LabelRegistry) -> Result<()> {
    let path = root.join(CLASSES_FILE);
    let text = serde_json::to_string_pretty(&registry.entries())?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (h, w) = (img.height, img.width);
    let scale = T::of(1.0 / 255.0);
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        T::of(img.pixels[p * 3 + ch] as f64) * scale
    })
}

pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let d = t.data();
    let mut pixels = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for ch in 0..3 {
            let v = d[ch * h * w + p].to_f64_lossy().clamp(0.0, 1.0);
            pixels.push((v * 255.0).round() as u8);
        }
    }
    RgbImage::new(h, w, pixels)
}

/// Frame ids of a split, sorted lexicographically.
pub fn list_ids(root: &Path, split: Split) -> Result<Vec<String>> {
    let dir = image_dir(root, split);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn load_head_mask(
    root: &Path,
    split: Split,
    head: Head,
    id: &str,
    size: (usize, usize),
    registry: &LabelRegistry,
) -> Result<LabelMask> {
    let path = mask_dir(root, head, split).join(format!("{id}.png"));
    if !path.is_file() {
        return Err(Error::MissingFile {
            what: format!("{head} mask"),
            id: id.to_string(),
        });
    }
    let mask = png_io::read_mask(&path)?;
    if mask.size() != size {
        return Err(Error::SizeMismatch {
            path,
            expected: size,
            found: mask.size(),
        });
    }
    let k = registry.head_classes(head);
    if let Some(&id) = mask.data().iter().find(|&&v| v != IGNORE && v as usize >= k) {
        return Err(Error::UnknownClass { path, id });
    }
    Ok(mask)
}

/// Loads one split. Heads not listed in `heads` are neither read nor
/// required; their masks are filled with [`IGNORE`].
pub fn load_dataset<T: Scalar>(
    root: &Path,
    split: Split,
    registry: &LabelRegistry,
    heads: &[Head],
) -> Result<Vec<Sample<T>>> {
    let mut out = Vec::new();
    for id in list_ids(root, split)? {
        let img_path = image_dir(root, split).join(format!("{id}.png"));
        let img = png_io::read_rgb(&img_path)?;
        let size = (img.height, img.width);
        let load = |head: Head| -> Result<LabelMask> {
            if heads.contains(&head) {
                load_head_mask(root, split, head, &id, size, registry)
            } else {
                Ok(LabelMask::filled(size.0, size.1, IGNORE))
            }
        };
        out.push(Sample {
            image: rgb_to_tensor(&img),
            anat_mask: load(Head::Anatomy)?,
            tool_mask: load(Head::Tool)?,
            id,
        });
    }
    Ok(out)
}

/// Writes one frame and both of its masks.
pub fn write_sample<T: Scalar>(root: &Path, split: Split, sample: &Sample<T>, registry: &LabelRegistry) -> Result<()> {
    let file = format!("{}.png", sample.id);
    png_io::write_rgb(&image_dir(root, split).join(&file), &tensor_to_rgb(&sample.image)?)?;
    for head in [Head::Anatomy, Head::Tool] {
        png_io::write_mask(
            &mask_dir(root, head, split).join(&file),
            sample.mask(head),
            &registry.head_palette(head),
        )?;
    }
    Ok(())
}

pub fn create_layout(root: &Path, split: Split) -> Result<()> {
    for dir in [
        image_dir(root, split),
        mask_dir(root, Head::Anatomy, split),
        mask_dir(root, Head::Tool, split),
    ] {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    Ok(())
}
