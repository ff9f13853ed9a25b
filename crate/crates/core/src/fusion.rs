//! Merging the anatomy and tool heads into one global label map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{LabelMask, BACKGROUND, IGNORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Allowed deviation of a pixel's probability sum from one.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Anatomy,
    Tool,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Anatomy => "anatomy",
            Head::Tool => "tool",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anatomy" => Ok(Head::Anatomy),
            "tool" => Ok(Head::Tool),
            _ => Err(Error::Config(format!("unknown head {s:?}"))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One entry of `classes.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub head: Head,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub global_id: u8,
    pub head: Head,
    pub local_id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Global label space shared by both heads. Id 0 is background everywhere.
///
/// Head-local ids are assigned 1, 2, … in increasing global-id order within
/// each head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    background_name: String,
    background_color: [u8; 3],
    classes: Vec<ClassInfo>,
}

impl LabelRegistry {
    pub fn from_entries(entries: &[ClassEntry]) -> Result<Self> {
        let mut background_name = "background".to_string();
        let mut background_color = [0, 0, 0];
        let mut sorted: Vec<&ClassEntry> = Vec::new();
        for e in entries {
            if e.id == BACKGROUND {
                background_name = e.name.clone();
                background_color = e.color;
                continue;
            }
            if e.id == IGNORE {
                return Err(Error::Config(format!(
                    "class id {IGNORE} is reserved for ignore"
                )));
            }
            sorted.push(e);
        }
        sorted.sort_by_key(|e| e.id);
        if sorted.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Config("duplicate class id in registry".into()));
        }
        let mut next = [1u8, 1u8];
        let classes = sorted
            .into_iter()
            .map(|e| {
                let slot = &mut next[e.head as usize];
                let local_id = *slot;
                *slot += 1;
                ClassInfo {
                    global_id: e.id,
                    head: e.head,
                    local_id,
                    name: e.name.clone(),
                    color: e.color,
                }
            })
            .collect();
        Ok(Self {
            background_name,
            background_color,
            classes,
        })
    }

    /// Entries as written to `classes.json`, background first.
    pub fn entries(&self) -> Vec<ClassEntry> {
        let mut out = vec![ClassEntry {
            id: BACKGROUND,
            name: self.background_name.clone(),
            head: Head::Anatomy,
            color: self.background_color,
        }];
        out.extend(self.classes.iter().map(|c| ClassEntry {
            id: c.global_id,
            name: c.name.clone(),
            head: c.head,
            color: c.color,
        }));
        out
    }

    /// Registry with `n_anatomy` then `n_tool` classes and fixed colors.
    pub fn synthetic(n_anatomy: usize, n_tool: usize) -> Self {
        const ANATOMY: [[u8; 3]; 4] = [[200, 60, 60], [230, 160, 120], [150, 40, 110], [210, 200, 90]];
        const TOOLS: [[u8; 3]; 4] = [[60, 200, 230], [90, 230, 90], [240, 240, 240], [120, 120, 250]];
        let mut entries = Vec::new();
        for i in 0..n_anatomy {
            entries.push(ClassEntry {
                id: (entries.len() + 1) as u8,
                name: format!("tissue_{}", i + 1),
                head: Head::Anatomy,
                color: ANATOMY[i % ANATOMY.len()],
            });
        }
        for i in 0..n_tool {
            entries.push(ClassEntry {
                id: (entries.len() + 1) as u8,
                name: format!("tool_{}", i + 1),
                head: Head::Tool,
                color: TOOLS[i % TOOLS.len()],
            });
        }
        Self::from_entries(&entries).expect("synthetic registry is valid")
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    /// Number of rows of a global confusion matrix (largest id + 1).
    pub fn num_global_classes(&self) -> usize {
        self.classes
            .iter()
            .map(|c| c.global_id as usize + 1)
            .max()
            .unwrap_or(1)
    }

    /// Classes of `head` including background.
    pub fn head_classes(&self, head: Head) -> usize {
        1 + self.classes.iter().filter(|c| c.head == head).count()
    }

    pub fn to_global(&self, head: Head, local: u8) -> Result<u8> {
        if local == BACKGROUND {
            return Ok(BACKGROUND);
        }
        self.classes
            .iter()
            .find(|c| c.head == head && c.local_id == local)
            .map(|c| c.global_id)
            .ok_or(Error::UnregisteredLabel {
                head: head.to_string(),
                label: local,
            })
    }

    /// `(head, local id)` for a non-background global id.
    pub fn to_local(&self, global: u8) -> Option<(Head, u8)> {
        self.classes
            .iter()
            .find(|c| c.global_id == global)
            .map(|c| (c.head, c.local_id))
    }

    pub fn name(&self, global: u8) -> Option<&str> {
        if global == BACKGROUND {
            return Some(&self.background_name);
        }
        self.classes
            .iter()
            .find(|c| c.global_id == global)
            .map(|c| c.name.as_str())
    }

    pub fn color(&self, global: u8) -> [u8; 3] {
        if global == BACKGROUND {
            return self.background_color;
        }
        self.classes
            .iter()
            .find(|c| c.global_id == global)
            .map(|c| c.color)
            .unwrap_or([0, 0, 0])
    }

    /// 256-entry palette indexed by global id.
    pub fn global_palette(&self) -> Vec<[u8; 3]> {
        (0..=255u8).map(|i| self.color(i)).collect()
    }

    /// 256-entry palette indexed by `head`-local id.
    pub fn head_palette(&self, head: Head) -> Vec<[u8; 3]> {
        let mut p = vec![[0u8; 3]; 256];
        p[0] = self.background_color;
        for c in self.classes.iter().filter(|c| c.head == head) {
            p[c.local_id as usize] = c.color;
        }
        p
    }

    /// Maps a head-local mask to global ids, keeping [`IGNORE`].
    pub fn mask_to_global(&self, head: Head, mask: &LabelMask) -> Result<LabelMask> {
        let lut = self.local_to_global_lut(head);
        let mut out = mask.clone();
        for v in out.data_mut() {
            if *v == IGNORE {
                continue;
            }
            *v = lut[*v as usize].ok_or(Error::UnregisteredLabel {
                head: head.to_string(),
                label: *v,
            })?;
        }
        Ok(out)
    }

    fn local_to_global_lut(&self, head: Head) -> [Option<u8>; 256] {
        let mut lut = [None; 256];
        lut[0] = Some(BACKGROUND);
        for c in self.classes.iter().filter(|c| c.head == head) {
            lut[c.local_id as usize] = Some(c.global_id);
        }
        lut
    }

    /// Combines per-head ground truth into one global mask: tool foreground,
    /// then anatomy foreground, then ignore if either head ignores, else background.
    pub fn combine_ground_truth(&self, anatomy: &LabelMask, tool: &LabelMask) -> Result<LabelMask> {
        if anatomy.size() != tool.size() {
            return Err(Error::Shape("anatomy and tool masks differ in size".into()));
        }
        let a = self.mask_to_global(Head::Anatomy, anatomy)?;
        let t = self.mask_to_global(Head::Tool, tool)?;
        let data = a
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &t)| match (a, t) {
                (_, t) if t != BACKGROUND && t != IGNORE => t,
                (a, _) if a != BACKGROUND && a != IGNORE => a,
                (IGNORE, _) | (_, IGNORE) => IGNORE,
                _ => BACKGROUND,
            })
            .collect();
        LabelMask::new(anatomy.height(), anatomy.width(), data)
    }
}

/// Head probabilities with their argmax labels and max-probability confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T> {
    /// `[b, k, h, w]`
    pub probs: Tensor<T>,
    /// One head-local label map per batch item.
    pub labels: Vec<LabelMask>,
    /// `[b, h, w]`
    pub confidence: Tensor<T>,
    pub head: Head,
}

/// Computes argmax labels (lowest index wins ties) and confidences.
pub fn derive_output<T: Scalar>(probs: Tensor<T>, head: Head) -> Result<SegOutput<T>> {
    let (b, k, h, w) = probs.dims4()?;
    if k > 255 {
        return Err(Error::Shape(format!("{k} classes do not fit 8-bit labels")));
    }
    let hw = h * w;
    let p = probs.data();
    let mut labels = Vec::with_capacity(b);
    let mut conf = Vec::with_capacity(b * hw);
    for bi in 0..b {
        let mut lab = Vec::with_capacity(hw);
        for i in 0..hw {
            let mut best = 0usize;
            let mut best_p = p[bi * k * hw + i];
            let mut sum = T::zero();
            for c in 0..k {
                let v = p[(bi * k + c) * hw + i];
                if !(v >= T::zero()) {
                    return Err(Error::Normalization {
                        pixel: bi * hw + i,
                        sum: v.to_f64_lossy(),
                    });
                }
                sum += v;
                if v > best_p {
                    best = c;
                    best_p = v;
                }
            }
            if (sum.to_f64_lossy() - 1.0).abs() > NORMALIZATION_TOLERANCE {
                return Err(Error::Normalization {
                    pixel: bi * hw + i,
                    sum: sum.to_f64_lossy(),
                });
            }
            lab.push(best as u8);
            conf.push(best_p);
        }
        labels.push(LabelMask::new(h, w, lab)?);
    }
    Ok(SegOutput {
        probs,
        labels,
        confidence: Tensor::from_vec(&[b, h, w], conf)?,
        head,
    })
}

/// How the two heads are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// Tool label where the tool head predicts a tool and is either more
    /// confident than the anatomy head or the anatomy head predicts background.
    #[default]
    Priority,
    /// Union of foregrounds; tool foreground always wins.
    PlainOr,
}

/// Fuses one pixel. Labels are head-local; the result says which head won.
#[inline]
pub fn fuse_pixel<T: PartialOrd>(
    rule: FusionRule,
    inst_label: u8,
    inst_conf: T,
    anat_label: u8,
    anat_conf: T,
) -> Option<(Head, u8)> {
    let tool_wins = inst_label != BACKGROUND
        && match rule {
            FusionRule::Priority => inst_conf > anat_conf || anat_label == BACKGROUND,
            FusionRule::PlainOr => true,
        };
    if tool_wins {
        Some((Head::Tool, inst_label))
    } else if anat_label != BACKGROUND {
        Some((Head::Anatomy, anat_label))
    } else {
        None
    }
}

/// Priority-weighted fusion into global ids, one mask per batch item.
pub fn priority_fuse<T: Scalar>(
    inst: &SegOutput<T>,
    anat: &SegOutput<T>,
    registry: &LabelRegistry,
) -> Result<Vec<LabelMask>> {
    fuse_with_rule(inst, anat, registry, FusionRule::Priority)
}

pub fn fuse_with_rule<T: Scalar>(
    inst: &SegOutput<T>,
    anat: &SegOutput<T>,
    registry: &LabelRegistry,
    rule: FusionRule,
) -> Result<Vec<LabelMask>> {
    if inst.head != Head::Tool || anat.head != Head::Anatomy {
        return Err(Error::Config(
            "fusion expects a tool output and an anatomy output".into(),
        ));
    }
    if inst.labels.len() != anat.labels.len() || inst.confidence.shape() != anat.confidence.shape() {
        return Err(Error::Shape(format!(
            "tool output {:?} and anatomy output {:?} differ in size",
            inst.confidence.shape(),
            anat.confidence.shape()
        )));
    }
    let tool_lut = head_lut(registry, Head::Tool);
    let anat_lut = head_lut(registry, Head::Anatomy);
    let hw = inst.labels.first().map(|m| m.data().len()).unwrap_or(0);
    let mut out = Vec::with_capacity(inst.labels.len());
    for (bi, (ml, al)) in inst.labels.iter().zip(&anat.labels).enumerate() {
        let pi = &inst.confidence.data()[bi * hw..(bi + 1) * hw];
        let pa = &anat.confidence.data()[bi * hw..(bi + 1) * hw];
        let mut data = Vec::with_capacity(hw);
        for (((&mi, &ci), &ma), &ca) in ml.data().iter().zip(pi).zip(al.data()).zip(pa) {
            let v = match fuse_pixel(rule, mi, ci, ma, ca) {
                None => BACKGROUND,
                Some((Head::Tool, l)) => tool_lut[l as usize].ok_or(Error::UnregisteredLabel {
                    head: "tool".into(),
                    label: l,
                })?,
                Some((Head::Anatomy, l)) => anat_lut[l as usize].ok_or(Error::UnregisteredLabel {
                    head: "anatomy".into(),
                    label: l,
                })?,
            };
            data.push(v);
        }
        out.push(LabelMask::new(ml.height(), ml.width(), data)?);
    }
    Ok(out)
}

fn head_lut(registry: &LabelRegistry, head: Head) -> [Option<u8>; 256] {
    registry.local_to_global_lut(head)
}

fn erode_axis(src: &[bool], h: usize, w: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi, fixed) = if along_rows {
                (x.saturating_sub(r), (x + r).min(w - 1), y)
            } else {
                (y.saturating_sub(r), (y + r).min(h - 1), x)
            };
            out[y * w + x] = (lo..=hi).all(|t| {
                if along_rows {
                    src[fixed * w + t]
                } else {
                    src[t * w + fixed]
                }
            });
        }
    }
    out
}

fn dilate_axis(src: &[bool], h: usize, w: usize, r: usize, along_rows: bool) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi, fixed) = if along_rows {
                (x.saturating_sub(r), (x + r).min(w - 1), y)
            } else {
                (y.saturating_sub(r), (y + r).min(h - 1), x)
            };
            out[y * w + x] = (lo..=hi).any(|t| {
                if along_rows {
                    src[fixed * w + t]
                } else {
                    src[t * w + fixed]
                }
            });
        }
    }
    out
}

/// Square-element erosion; the window is clipped at the image border.
pub fn erode(src: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let t = erode_axis(src, h, w, r, true);
    erode_axis(&t, h, w, r, false)
}

/// Square-element dilation; the window is clipped at the image border.
pub fn dilate(src: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let t = dilate_axis(src, h, w, r, true);
    dilate_axis(&t, h, w, r, false)
}

/// Per-class opening then closing with a `(2r+1)²` square.
///
/// A pixel claimed by exactly one class after filtering takes that class, a
/// pixel claimed by none becomes background, and a pixel claimed by several
/// keeps its original label. [`IGNORE`] pixels are left untouched.
pub fn morph_refine(fused: &LabelMask, radius: usize) -> Result<LabelMask> {
    if radius < 1 {
        return Err(Error::Config("refinement radius must be at least 1".into()));
    }
    let (h, w) = fused.size();
    let n = h * w;
    let mut claims = vec![0u8; n];
    let mut claimer = vec![BACKGROUND; n];
    for class in fused.classes() {
        if class == BACKGROUND || class == IGNORE {
            continue;
        }
        let bin: Vec<bool> = fused.data().iter().map(|&v| v == class).collect();
        let opened = dilate(&erode(&bin, h, w, radius), h, w, radius);
        let closed = erode(&dilate(&opened, h, w, radius), h, w, radius);
        for (i, &on) in closed.iter().enumerate() {
            if on {
                claims[i] = claims[i].saturating_add(1);
                claimer[i] = class;
            }
        }
    }
    let data = fused
        .data()
        .iter()
        .enumerate()
        .map(|(i, &orig)| match (orig, claims[i]) {
            (IGNORE, _) => IGNORE,
            (_, 0) => BACKGROUND,
            (_, 1) => claimer[i],
            (orig, _) => orig,
        })
        .collect();
    LabelMask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn out_from(probs: Vec<f64>, k: usize, head: Head) -> SegOutput<f64> {
        let n = probs.len() / k;
        derive_output(Tensor::from_vec(&[1, k, 1, n], probs).unwrap(), head).unwrap()
    }

    #[test]
    fn derive_argmax_and_confidence() {
        let o = out_from(vec![0.1, 0.7, 0.2], 3, Head::Anatomy);
        assert_eq!(o.labels[0].data(), &[1]);
        assert_eq!(o.confidence.data(), &[0.7]);

        let o = out_from(vec![0.25; 4], 4, Head::Anatomy);
        assert_eq!(o.labels[0].data(), &[0]);
        assert_eq!(o.confidence.data(), &[0.25]);

        let o = out_from(vec![0.0, 0.0, 1.0], 3, Head::Tool);
        assert_eq!(o.confidence.data(), &[1.0]);
    }

    #[test]
    fn derive_rejects_unnormalized() {
        let r = derive_output(
            Tensor::from_vec(&[1, 2, 1, 1], vec![0.5, 0.6]).unwrap(),
            Head::Tool,
        );
        assert!(matches!(r, Err(Error::Normalization { .. })));
    }

    /// registry: anatomy locals 1..=2 -> global 1,2; tool locals 1..=5 -> global 3..=7
    fn registry() -> LabelRegistry {
        LabelRegistry::synthetic(2, 5)
    }

    fn fuse1(mi: u8, pi: f64, ma: u8, pa: f64) -> u8 {
        let k_tool = 6;
        let k_anat = 3;
        let mut tp = vec![(1.0 - pi) / (k_tool - 1) as f64; k_tool];
        tp[mi as usize] = pi;
        let mut ap = vec![(1.0 - pa) / (k_anat - 1) as f64; k_anat];
        ap[ma as usize] = pa;
        let inst = out_from(tp, k_tool, Head::Tool);
        let anat = out_from(ap, k_anat, Head::Anatomy);
        assert_eq!(inst.labels[0].data()[0], mi);
        assert_eq!(anat.labels[0].data()[0], ma);
        priority_fuse(&inst, &anat, &registry()).unwrap()[0].data()[0]
    }

    #[test]
    fn fusion_examples() {
        let reg = registry();
        let tool = |l| reg.to_global(Head::Tool, l).unwrap();
        let anat = |l| reg.to_global(Head::Anatomy, l).unwrap();
        assert_eq!(fuse1(3, 0.5, 0, 0.9), tool(3));
        assert_eq!(fuse1(5, 0.9, 2, 0.6), tool(5));
        assert_eq!(fuse1(5, 0.4, 2, 0.8), anat(2));
        assert_eq!(fuse1(5, 0.7, 2, 0.7), anat(2));
        assert_eq!(fuse1(0, 0.9, 0, 0.9), BACKGROUND);
        // anatomy foreground survives a confident tool-background vote
        assert_eq!(fuse1(0, 0.95, 1, 0.6), anat(1));
    }

    #[test]
    fn fusion_rejects_size_mismatch_and_unregistered() {
        let reg = LabelRegistry::synthetic(1, 1);
        let inst = out_from(vec![0.1, 0.1, 0.8], 3, Head::Tool);
        let anat = out_from(vec![0.5, 0.2, 0.5, 0.8], 2, Head::Anatomy);
        assert!(priority_fuse(&inst, &anat, &reg).is_err());
        let anat = out_from(vec![0.4, 0.6], 2, Head::Anatomy);
        assert!(matches!(
            priority_fuse(&inst, &anat, &reg),
            Err(Error::UnregisteredLabel { .. })
        ));
    }

    #[test]
    fn plain_or_always_prefers_tool_foreground() {
        assert_eq!(
            fuse_pixel(FusionRule::PlainOr, 2, 0.1, 1, 0.9),
            Some((Head::Tool, 2))
        );
        assert_eq!(
            fuse_pixel(FusionRule::Priority, 2, 0.1, 1, 0.9),
            Some((Head::Anatomy, 1))
        );
    }

    #[test]
    fn isolated_pixel_is_removed() {
        let mut m = LabelMask::filled(5, 5, 0);
        m.set(2, 2, 3);
        let r = morph_refine(&m, 1).unwrap();
        assert!(r.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn solid_square_is_unchanged() {
        let m = LabelMask::from_fn(20, 20, |r, c| {
            if (5..15).contains(&r) && (5..15).contains(&c) {
                2
            } else {
                0
            }
        });
        assert_eq!(morph_refine(&m, 1).unwrap(), m);
    }

    #[test]
    fn background_stays_background_and_radius_zero_errors() {
        let m = LabelMask::filled(6, 6, 0);
        assert_eq!(morph_refine(&m, 2).unwrap(), m);
        assert!(morph_refine(&m, 0).is_err());
    }

    #[test]
    fn registry_assigns_head_local_ids() {
        let reg = LabelRegistry::synthetic(2, 2);
        assert_eq!(reg.num_global_classes(), 5);
        assert_eq!(reg.head_classes(Head::Tool), 3);
        assert_eq!(reg.to_global(Head::Tool, 1).unwrap(), 3);
        assert_eq!(reg.to_local(4), Some((Head::Tool, 2)));
        assert!(reg.to_global(Head::Anatomy, 3).is_err());
        let back = LabelRegistry::from_entries(&reg.entries()).unwrap();
        assert_eq!(back, reg);
    }

    #[test]
    fn ground_truth_combination_prefers_tools() {
        let reg = LabelRegistry::synthetic(2, 2);
        let a = LabelMask::new(1, 4, vec![1, 2, 0, IGNORE]).unwrap();
        let t = LabelMask::new(1, 4, vec![1, 0, 0, 0]).unwrap();
        let g = reg.combine_ground_truth(&a, &t).unwrap();
        assert_eq!(g.data(), &[3, 2, 0, IGNORE]);
    }
}
