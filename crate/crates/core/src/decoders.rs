//! Segmentation heads over a [`FeaturePyramid`].
//!
//! Both heads start the same way: every level is linearly projected to
//! `embed_dim` channels, brought to the stride-4 grid with bilinear
//! upsampling and concatenated shallowest-first.
//!
//! * `mlp` fuses the concatenation with a 1×1 conv–norm–GELU block.
//! * `skip` runs two fusion blocks, each of which re-concatenates the
//!   projected stride-4 feature before mixing. The second block uses a 3×3
//!   kernel so fine detail from the skip path can be redistributed spatially.
//!
//! Both classify at stride 4 and bilinearly upsample logits to input size.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::encoder::{FeaturePyramid, PyramidVars, NUM_STAGES, STAGE_STRIDES};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub head_kind: HeadKind,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("decoder embed_dim must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "decoder needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self, stage_channels: &[usize; NUM_STAGES]) -> Vec<ParamSpec> {
        let e = self.embed_dim;
        let tn = Init::TruncNormal(INIT_STD);
        let mut specs = Vec::new();
        for (i, &c) in stage_channels.iter().enumerate() {
            specs.push(ParamSpec::new(format!("decoder.proj{}.weight", i + 1), &[c, e], tn));
            specs.push(ParamSpec::new(format!("decoder.proj{}.bias", i + 1), &[e], Init::Zeros));
        }
        let block = |specs: &mut Vec<ParamSpec>, name: &str, cin: usize, k: usize| {
            specs.push(ParamSpec::new(format!("decoder.{name}.weight"), &[e, cin, k, k], tn));
            specs.push(ParamSpec::new(format!("decoder.{name}.bias"), &[e], Init::Zeros));
            specs.push(ParamSpec::new(format!("decoder.{name}_norm.gamma"), &[e], Init::Ones));
            specs.push(ParamSpec::new(format!("decoder.{name}_norm.beta"), &[e], Init::Zeros));
        };
        match self.head_kind {
            HeadKind::Mlp => block(&mut specs, "fuse", NUM_STAGES * e, 1),
            HeadKind::Skip => {
                block(&mut specs, "block1", (NUM_STAGES + 1) * e, 1);
                block(&mut specs, "block2", 2 * e, 3);
            }
        }
        specs.push(ParamSpec::new("decoder.cls.weight", &[self.num_classes, e, 1, 1], tn));
        specs.push(ParamSpec::new("decoder.cls.bias", &[self.num_classes], Init::Zeros));
        specs
    }
}

/// Full-resolution class logits `[b, k, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLogits<T> {
    pub values: Tensor<T>,
}

/// Whether the skip decoder's stride-4 skip branch is live or zeroed (ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipBranch {
    Live,
    Zeroed,
}

/// Per-pixel linear map of `level[b, c, h, w]` to `[b, embed_dim, h, w]`.
pub fn project_uniform<T: Scalar>(
    g: &mut Graph<T>,
    level: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let (_, c, _, _) = g.value(level).dims4()?;
    if g.shape(weight).first() != Some(&c) {
        return Err(Error::Shape(format!(
            "projection weight {:?} for {c}-channel level",
            g.shape(weight)
        )));
    }
    let t = g.permute(level, &[0, 2, 3, 1])?;
    let t = g.linear(t, weight)?;
    let t = g.add_bias(t, bias, 3)?;
    g.permute(t, &[0, 3, 1, 2])
}

/// Resizes every level to the spatial size of the first (stride-4) level.
pub fn upsample_to_highest<T: Scalar>(g: &mut Graph<T>, levels: &[Var]) -> Result<Vec<Var>> {
    let first = levels
        .first()
        .ok_or_else(|| Error::Shape("no levels to upsample".into()))?;
    let (_, _, h, w) = g.value(*first).dims4()?;
    let mut out = Vec::with_capacity(levels.len());
    for (i, &l) in levels.iter().enumerate() {
        let (_, _, lh, lw) = g.value(l).dims4()?;
        let factor = STAGE_STRIDES.get(i).copied().unwrap_or(0) / STAGE_STRIDES[0];
        if factor == 0 || lh * factor != h || lw * factor != w {
            return Err(Error::Shape(format!(
                "level {} is {lh}x{lw}, violating the stride law for a {h}x{w} base",
                i + 1
            )));
        }
        out.push(g.upsample_bilinear(l, h, w)?);
    }
    Ok(out)
}

/// Concatenates aligned levels along channels, shallowest first.
pub fn fuse_multiscale<T: Scalar>(g: &mut Graph<T>, aligned: &[Var]) -> Result<Var> {
    let first = aligned
        .first()
        .ok_or_else(|| Error::Shape("nothing to fuse".into()))?;
    let (_, _, h, w) = g.value(*first).dims4()?;
    for &a in aligned {
        let (_, _, ah, aw) = g.value(a).dims4()?;
        if (ah, aw) != (h, w) {
            return Err(Error::Shape(format!(
                "cannot fuse {ah}x{aw} with {h}x{w}"
            )));
        }
    }
    g.concat(aligned, 1)
}

/// Layer norm over channels at every pixel of `[b, c, h, w]`.
pub fn channel_norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let t = g.permute(x, &[0, 2, 3, 1])?;
    let t = g.layer_norm(
        t,
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        NORM_EPS,
    )?;
    g.permute(t, &[0, 3, 1, 2])
}

fn conv_norm_act<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let w = p.get(&format!("decoder.{name}.weight"))?;
    let k = g.shape(w)[2];
    let y = g.conv2d(x, w, 1, k / 2, 1)?;
    let y = g.add_bias(y, p.get(&format!("decoder.{name}.bias"))?, 1)?;
    let y = channel_norm(g, y, p, &format!("decoder.{name}_norm"))?;
    Ok(g.gelu(y))
}

fn projected<T: Scalar>(g: &mut Graph<T>, pyramid: &PyramidVars, p: &Bound) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(NUM_STAGES);
    for (i, &level) in pyramid.levels.iter().enumerate() {
        out.push(project_uniform(
            g,
            level,
            p.get(&format!("decoder.proj{}.weight", i + 1))?,
            p.get(&format!("decoder.proj{}.bias", i + 1))?,
        )?);
    }
    Ok(out)
}

fn classify<T: Scalar>(g: &mut Graph<T>, x: Var, pyramid: &PyramidVars, p: &Bound) -> Result<Var> {
    let y = g.conv2d(x, p.get("decoder.cls.weight")?, 1, 0, 1)?;
    let y = g.add_bias(y, p.get("decoder.cls.bias")?, 1)?;
    let (h, w) = pyramid.input_size;
    g.upsample_bilinear(y, h, w)
}

/// Standard all-MLP decoding: project, upsample, concatenate, fuse, classify.
pub fn mlp_decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &PyramidVars,
    config: &DecoderConfig,
    p: &Bound,
) -> Result<Var> {
    if config.head_kind != HeadKind::Mlp {
        return Err(Error::Config("mlp_decode called with a skip head config".into()));
    }
    let proj = projected(g, pyramid, p)?;
    let aligned = upsample_to_highest(g, &proj)?;
    let fused = fuse_multiscale(g, &aligned)?;
    let x = conv_norm_act(g, fused, p, "fuse")?;
    classify(g, x, pyramid, p)
}

/// Dense-skip decoding: the projected stride-4 feature is re-injected into both fusion blocks.
pub fn skip_decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &PyramidVars,
    config: &DecoderConfig,
    p: &Bound,
    branch: SkipBranch,
) -> Result<Var> {
    if config.head_kind != HeadKind::Skip {
        return Err(Error::Config("skip_decode called with an mlp head config".into()));
    }
    let proj = projected(g, pyramid, p)?;
    let aligned = upsample_to_highest(g, &proj)?;
    let fused = fuse_multiscale(g, &aligned)?;
    let skip = match branch {
        SkipBranch::Live => proj[0],
        SkipBranch::Zeroed => {
            let zeros = Tensor::zeros(g.shape(proj[0]));
            g.constant(zeros)
        }
    };
    let x = g.concat(&[fused, skip], 1)?;
    let x = conv_norm_act(g, x, p, "block1")?;
    let x = g.concat(&[x, skip], 1)?;
    let x = conv_norm_act(g, x, p, "block2")?;
    classify(g, x, pyramid, p)
}

/// Dispatches on `config.head_kind`.
pub fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    pyramid: &PyramidVars,
    config: &DecoderConfig,
    p: &Bound,
) -> Result<Var> {
    match config.head_kind {
        HeadKind::Mlp => mlp_decode_graph(g, pyramid, config, p),
        HeadKind::Skip => skip_decode_graph(g, pyramid, config, p, SkipBranch::Live),
    }
}

fn decode_tensor<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    config: &DecoderConfig,
    params: &ParamStore<T>,
    kind: HeadKind,
) -> Result<SegLogits<T>> {
    config.validate()?;
    if config.head_kind != kind {
        return Err(Error::Config(format!(
            "decoder config is {:?}, called as {kind:?}",
            config.head_kind
        )));
    }
    if pyramid.levels.len() != NUM_STAGES {
        return Err(Error::Shape("pyramid must have four levels".into()));
    }
    let channels: Vec<usize> = pyramid.levels.iter().map(|l| l.shape()[1]).collect();
    let channels: [usize; NUM_STAGES] = channels.try_into().expect("four levels");
    pyramid.validate(&channels)?;
    let specs: Vec<(String, Vec<usize>)> = config
        .param_specs(&channels)
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    params.check_shapes(&specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let levels: Vec<Var> = pyramid
        .levels
        .iter()
        .map(|l| g.constant(l.clone()))
        .collect();
    let pv = PyramidVars {
        levels: levels.try_into().expect("four levels"),
        input_size: pyramid.input_size,
    };
    let out = decode_graph(&mut g, &pv, config, &p)?;
    Ok(SegLogits {
        values: g.value(out).clone(),
    })
}

/// Inference-mode all-MLP head.
pub fn mlp_decode<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    config: &DecoderConfig,
    params: &ParamStore<T>,
) -> Result<SegLogits<T>> {
    decode_tensor(pyramid, config, params, HeadKind::Mlp)
}

/// Inference-mode dense-skip head.
pub fn skip_decode<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    config: &DecoderConfig,
    params: &ParamStore<T>,
) -> Result<SegLogits<T>> {
    decode_tensor(pyramid, config, params, HeadKind::Skip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::initialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_projection_is_identity() {
        let mut g = Graph::<f64>::new();
        let x = Tensor::from_fn(&[1, 4, 3, 3], |i| i as f64 * 0.1);
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        let b = g.constant(Tensor::zeros(&[4]));
        let y = project_uniform(&mut g, xv, w, b).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn projection_shape_and_affine_degenerate_case() {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_fn(&[1, 32, 4, 4], |i| (i as f64).sin()));
        let w = g.constant(Tensor::zeros(&[32, 16]));
        let b = g.constant(Tensor::from_fn(&[16], |i| i as f64));
        let y = project_uniform(&mut g, xv, w, b).unwrap();
        assert_eq!(g.shape(y), &[1, 16, 4, 4]);
        for c in 0..16 {
            for s in 0..16 {
                assert_eq!(g.value(y).data()[c * 16 + s], c as f64);
            }
        }
    }

    #[test]
    fn projection_rejects_wrong_channels() {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let w = g.constant(Tensor::zeros(&[16, 4]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(project_uniform(&mut g, xv, w, b).is_err());
    }

    #[test]
    fn upsample_constant_and_passthrough() {
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::from_fn(&[1, 2, 16, 16], |i| i as f64));
        let l2 = g.constant(Tensor::full(&[1, 2, 8, 8], 3.0));
        let l3 = g.constant(Tensor::full(&[1, 2, 4, 4], -1.0));
        let l4 = g.constant(Tensor::full(&[1, 2, 2, 2], 7.5));
        let out = upsample_to_highest(&mut g, &[l1, l2, l3, l4]).unwrap();
        assert_eq!(g.value(out[0]), g.value(l1));
        assert!(g.value(out[2]).data().iter().all(|&v| v == -1.0));
        assert!(g.value(out[3]).data().iter().all(|&v| (v - 7.5).abs() < 1e-12));
        assert_eq!(g.shape(out[3]), &[1, 2, 16, 16]);
    }

    #[test]
    fn upsample_rejects_stride_violation() {
        let mut g = Graph::<f64>::new();
        let l1 = g.constant(Tensor::zeros(&[1, 2, 16, 16]));
        let bad = g.constant(Tensor::zeros(&[1, 2, 6, 8]));
        assert!(upsample_to_highest(&mut g, &[l1, bad]).is_err());
    }

    #[test]
    fn upsampled_ramp_is_monotone_by_hand_oracle() {
        // 2x2 [[0,1],[0,1]] -> 4x4; half-pixel sampling gives x-weights
        // src = (o + 0.5)/2 - 0.5 clamped at 0: 0, 0.25, 0.75, 1 (clamped) per column.
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let y = g.upsample_bilinear(x, 4, 4).unwrap();
        let want_row = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            let row = &g.value(y).data()[r * 4..r * 4 + 4];
            assert_eq!(row, want_row);
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fuse_concatenates_in_order() {
        let mut g = Graph::<f64>::new();
        let xs: Vec<Var> = (0..4)
            .map(|i| g.constant(Tensor::full(&[1, 16, 8, 8], i as f64)))
            .collect();
        let f = fuse_multiscale(&mut g, &xs).unwrap();
        assert_eq!(g.shape(f), &[1, 64, 8, 8]);
        for blk in 0..4 {
            let s = &g.value(f).data()[blk * 16 * 64..(blk + 1) * 16 * 64];
            assert!(s.iter().all(|&v| v == blk as f64));
        }
        let perm = fuse_multiscale(&mut g, &[xs[1], xs[0], xs[2], xs[3]]).unwrap();
        assert_ne!(g.value(f), g.value(perm));
    }

    #[test]
    fn fuse_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[1, 4, 8, 8]));
        let b = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(fuse_multiscale(&mut g, &[a, b]).is_err());
    }

    fn pyramid(seed: u64) -> FeaturePyramid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = [8, 16, 32, 64];
        FeaturePyramid {
            levels: (0..4)
                .map(|i| {
                    crate::params::uniform_tensor(&[1, ch[i], 16 >> i, 16 >> i], -1.0, 1.0, &mut rng)
                })
                .collect(),
            input_size: (64, 64),
        }
    }

    #[test]
    fn classifier_bias_only_gives_constant_logits() {
        let cfg = DecoderConfig {
            embed_dim: 8,
            num_classes: 5,
            head_kind: HeadKind::Mlp,
        };
        let mut params: ParamStore<f64> =
            initialize(&cfg.param_specs(&[8, 16, 32, 64]), &mut ChaCha8Rng::seed_from_u64(2));
        params.insert("decoder.cls.weight", Tensor::zeros(&[5, 8, 1, 1]));
        params.insert("decoder.cls.bias", Tensor::from_fn(&[5], |i| i as f64 - 2.0));
        let out = mlp_decode(&pyramid(1), &cfg, &params).unwrap();
        assert_eq!(out.values.shape(), &[1, 5, 64, 64]);
        for k in 0..5 {
            let plane = &out.values.data()[k * 4096..(k + 1) * 4096];
            assert!(plane.iter().all(|&v| (v - (k as f64 - 2.0)).abs() < 1e-12));
        }
    }

    #[test]
    fn skip_head_shape_and_wrong_kind() {
        let cfg = DecoderConfig {
            embed_dim: 8,
            num_classes: 8,
            head_kind: HeadKind::Skip,
        };
        let params: ParamStore<f64> =
            initialize(&cfg.param_specs(&[8, 16, 32, 64]), &mut ChaCha8Rng::seed_from_u64(2));
        let out = skip_decode(&pyramid(1), &cfg, &params).unwrap();
        assert_eq!(out.values.shape(), &[1, 8, 64, 64]);
        assert!(mlp_decode(&pyramid(1), &cfg, &params).is_err());
    }

    #[test]
    fn rejects_degenerate_config() {
        let cfg = DecoderConfig {
            embed_dim: 8,
            num_classes: 1,
            head_kind: HeadKind::Mlp,
        };
        assert!(cfg.validate().is_err());
    }
}
