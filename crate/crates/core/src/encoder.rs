//! Hierarchical transformer encoder producing a four-level feature pyramid.
//!
//! Each stage is an overlapping patch embedding (strided convolution plus
//! layer norm) followed by pre-norm transformer blocks. Attention keys and
//! values come from a spatially reduced copy of the token grid, and the
//! feed-forward branch carries a depthwise 3×3 convolution that supplies
//! positional information, so there is no explicit positional embedding.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec, ParamStore, INIT_STD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;

/// Cumulative downsampling factor of each pyramid level.
pub const STAGE_STRIDES: [usize; NUM_STAGES] = [4, 8, 16, 32];

/// Stride of each stage's patch embedding relative to its input.
pub const PATCH_STRIDES: [usize; NUM_STAGES] = [4, 2, 2, 2];

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderVariantConfig {
    pub name: String,
    pub in_channels: usize,
    pub stage_channels: [usize; NUM_STAGES],
    pub stage_depths: [usize; NUM_STAGES],
    pub attention_heads: [usize; NUM_STAGES],
    pub spatial_reduction_ratios: [usize; NUM_STAGES],
    pub ffn_expansion: usize,
    pub patch_sizes: [usize; NUM_STAGES],
}

impl EncoderVariantConfig {
    /// Desk-scale preset used by the tests and the synthetic experiments.
    pub fn tiny() -> Self {
        Self {
            name: "tiny".into(),
            in_channels: 3,
            stage_channels: [8, 16, 32, 64],
            stage_depths: [1, 1, 1, 1],
            attention_heads: [1, 2, 4, 8],
            spatial_reduction_ratios: [8, 4, 2, 1],
            ffn_expansion: 4,
            patch_sizes: [7, 3, 3, 3],
        }
    }

    pub fn b0_like() -> Self {
        Self {
            name: "b0-like".into(),
            stage_channels: [32, 64, 160, 256],
            stage_depths: [2, 2, 2, 2],
            attention_heads: [1, 2, 5, 8],
            ..Self::tiny()
        }
    }

    pub fn b2_like() -> Self {
        Self {
            name: "b2-like".into(),
            stage_channels: [64, 128, 320, 512],
            stage_depths: [3, 4, 6, 3],
            attention_heads: [1, 2, 5, 8],
            ..Self::tiny()
        }
    }

    pub fn b5_like() -> Self {
        Self {
            name: "b5-like".into(),
            stage_channels: [64, 128, 320, 512],
            stage_depths: [3, 6, 40, 3],
            attention_heads: [1, 2, 5, 8],
            ..Self::tiny()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "b0-like" => Ok(Self::b0_like()),
            "b2-like" => Ok(Self::b2_like()),
            "b5-like" => Ok(Self::b5_like()),
            other => Err(Error::Config(format!("unknown encoder preset {other:?}"))),
        }
    }

    pub fn preset_names() -> [&'static str; 4] {
        ["tiny", "b0-like", "b2-like", "b5-like"]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |xs: &[usize]| xs.iter().all(|&x| x > 0);
        if self.in_channels == 0
            || self.ffn_expansion == 0
            || !positive(&self.stage_channels)
            || !positive(&self.stage_depths)
            || !positive(&self.attention_heads)
            || !positive(&self.spatial_reduction_ratios)
            || !positive(&self.patch_sizes)
        {
            return Err(Error::Config(format!(
                "encoder {}: all sizes must be positive",
                self.name
            )));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "encoder {}: stage channels {:?} must be strictly increasing",
                self.name, self.stage_channels
            )));
        }
        for (i, (&c, &h)) in self
            .stage_channels
            .iter()
            .zip(&self.attention_heads)
            .enumerate()
        {
            if c % h != 0 {
                return Err(Error::Config(format!(
                    "encoder {}: stage {} has {c} channels not divisible by {h} heads",
                    self.name,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    fn stage_input_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            self.in_channels
        } else {
            self.stage_channels[stage - 1]
        }
    }

    /// Every parameter of the encoder with its initializer.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let tn = Init::TruncNormal(INIT_STD);
        let norm = |specs: &mut Vec<ParamSpec>, name: String, c: usize| {
            specs.push(ParamSpec::new(format!("{name}.gamma"), &[c], Init::Ones));
            specs.push(ParamSpec::new(format!("{name}.beta"), &[c], Init::Zeros));
        };
        for s in 0..NUM_STAGES {
            let c = self.stage_channels[s];
            let cin = self.stage_input_channels(s);
            let p = self.patch_sizes[s];
            let pre = format!("encoder.s{}", s + 1);
            specs.push(ParamSpec::new(format!("{pre}.patch.weight"), &[c, cin, p, p], tn));
            specs.push(ParamSpec::new(format!("{pre}.patch.bias"), &[c], Init::Zeros));
            norm(&mut specs, format!("{pre}.patch_norm"), c);
            let hidden = c * self.ffn_expansion;
            let r = self.spatial_reduction_ratios[s];
            for b in 0..self.stage_depths[s] {
                let bp = format!("{pre}.b{}", b + 1);
                norm(&mut specs, format!("{bp}.norm1"), c);
                for proj in ["q", "k", "v", "proj"] {
                    specs.push(ParamSpec::new(format!("{bp}.attn.{proj}.weight"), &[c, c], tn));
                    specs.push(ParamSpec::new(format!("{bp}.attn.{proj}.bias"), &[c], Init::Zeros));
                }
                if r > 1 {
                    specs.push(ParamSpec::new(format!("{bp}.attn.sr.weight"), &[c, c, r, r], tn));
                    specs.push(ParamSpec::new(format!("{bp}.attn.sr.bias"), &[c], Init::Zeros));
                    norm(&mut specs, format!("{bp}.attn.sr_norm"), c);
                }
                norm(&mut specs, format!("{bp}.norm2"), c);
                specs.push(ParamSpec::new(format!("{bp}.ffn.fc1.weight"), &[c, hidden], tn));
                specs.push(ParamSpec::new(format!("{bp}.ffn.fc1.bias"), &[hidden], Init::Zeros));
                specs.push(ParamSpec::new(format!("{bp}.ffn.dw.weight"), &[hidden, 1, 3, 3], tn));
                specs.push(ParamSpec::new(format!("{bp}.ffn.dw.bias"), &[hidden], Init::Zeros));
                specs.push(ParamSpec::new(format!("{bp}.ffn.fc2.weight"), &[hidden, c], tn));
                specs.push(ParamSpec::new(format!("{bp}.ffn.fc2.bias"), &[c], Init::Zeros));
            }
            norm(&mut specs, format!("{pre}.norm"), c);
        }
        specs
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<Tensor<T>>,
    pub input_size: (usize, usize),
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Checks the pyramid shape law against `channels`.
    pub fn validate(&self, channels: &[usize; NUM_STAGES]) -> Result<()> {
        let (h, w) = self.input_size;
        if self.levels.len() != NUM_STAGES {
            return Err(Error::Shape(format!(
                "pyramid has {} levels, expected {NUM_STAGES}",
                self.levels.len()
            )));
        }
        let batch = self.levels[0].shape()[0];
        for (i, level) in self.levels.iter().enumerate() {
            let want = [batch, channels[i], h / STAGE_STRIDES[i], w / STAGE_STRIDES[i]];
            if level.shape() != want {
                return Err(Error::Shape(format!(
                    "pyramid level {} has shape {:?}, expected {:?}",
                    i + 1,
                    level.shape(),
                    want
                )));
            }
        }
        Ok(())
    }
}

/// Pyramid levels as nodes on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PyramidVars {
    pub levels: [Var; NUM_STAGES],
    pub input_size: (usize, usize),
}

impl PyramidVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<T>) -> FeaturePyramid<T> {
        FeaturePyramid {
            levels: self.levels.iter().map(|&v| g.value(v).clone()).collect(),
            input_size: self.input_size,
        }
    }
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Dimension(format!(
            "input {h}x{w} must be a positive multiple of 32 in both axes"
        )));
    }
    Ok(())
}

/// `[b, c, h, w]` → `[b, h·w, c]`
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    let flat = g.reshape(x, &[b, c, h * w])?;
    g.permute(flat, &[0, 2, 1])
}

/// `[b, h·w, c]` → `[b, c, h, w]`
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: Var, (h, w): (usize, usize)) -> Result<Var> {
    let (b, n, c) = g.value(x).dims3()?;
    if n != h * w {
        return Err(Error::Shape(format!("{n} tokens do not form a {h}x{w} grid")));
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[b, c, h, w])
}

fn linear_bias<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let y = g.linear(x, p.get(&format!("{name}.weight"))?)?;
    let axis = g.shape(y).len() - 1;
    g.add_bias(y, p.get(&format!("{name}.bias"))?, axis)
}

fn norm<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    g.layer_norm(
        x,
        p.get(&format!("{name}.gamma"))?,
        p.get(&format!("{name}.beta"))?,
        LAYER_NORM_EPS,
    )
}

/// `[b, n, c]` → `[b·heads, n, c/heads]`
fn split_heads<T: Scalar>(g: &mut Graph<T>, x: Var, heads: usize) -> Result<Var> {
    let (b, n, c) = g.value(x).dims3()?;
    let d = c / heads;
    let t = g.reshape(x, &[b, n, heads, d])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    g.reshape(t, &[b * heads, n, d])
}

fn merge_heads<T: Scalar>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
    let (bh, n, d) = g.value(x).dims3()?;
    let heads = bh / batch;
    let t = g.reshape(x, &[batch, heads, n, d])?;
    let t = g.permute(t, &[0, 2, 1, 3])?;
    g.reshape(t, &[batch, n, heads * d])
}

/// Spatially reduced multi-head self-attention. Returns `(output, attention weights)`.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    grid: (usize, usize),
    heads: usize,
    reduction: usize,
    p: &Bound,
    pre: &str,
) -> Result<(Var, Var)> {
    let (b, _, c) = g.value(x).dims3()?;
    let q = linear_bias(g, x, p, &format!("{pre}.q"))?;
    let kv_src = if reduction > 1 {
        let img = from_tokens(g, x, grid)?;
        let r = g.conv2d(img, p.get(&format!("{pre}.sr.weight"))?, reduction, 0, 1)?;
        let r = g.add_bias(r, p.get(&format!("{pre}.sr.bias"))?, 1)?;
        let r = to_tokens(g, r)?;
        norm(g, r, p, &format!("{pre}.sr_norm"))?
    } else {
        x
    };
    let k = linear_bias(g, kv_src, p, &format!("{pre}.k"))?;
    let v = linear_bias(g, kv_src, p, &format!("{pre}.v"))?;
    let (q, k, v) = (
        split_heads(g, q, heads)?,
        split_heads(g, k, heads)?,
        split_heads(g, v, heads)?,
    );
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::one() / T::of_usize(c / heads).sqrt());
    let weights = g.softmax(scores, 2)?;
    let out = g.batch_matmul(weights, v, false)?;
    let out = merge_heads(g, out, b)?;
    Ok((linear_bias(g, out, p, &format!("{pre}.proj"))?, weights))
}

fn mix_ffn<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    grid: (usize, usize),
    p: &Bound,
    pre: &str,
) -> Result<Var> {
    let h = linear_bias(g, x, p, &format!("{pre}.fc1"))?;
    let img = from_tokens(g, h, grid)?;
    let hidden = g.shape(img)[1];
    let img = g.conv2d(img, p.get(&format!("{pre}.dw.weight"))?, 1, 1, hidden)?;
    let img = g.add_bias(img, p.get(&format!("{pre}.dw.bias"))?, 1)?;
    let img = g.gelu(img);
    let h = to_tokens(g, img)?;
    linear_bias(g, h, p, &format!("{pre}.fc2"))
}

/// Runs the transformer blocks of one stage over `tokens[b, n, c]`.
///
/// Returns the output tokens and the attention weights of every block
/// (`[b·heads, n, m]`, rows summing to one).
pub fn stage_forward_traced<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: (usize, usize),
    stage: usize,
    config: &EncoderVariantConfig,
    p: &Bound,
) -> Result<(Var, Vec<Var>)> {
    let (_, n, c) = g.value(tokens).dims3()?;
    let heads = config.attention_heads[stage];
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    if n != grid.0 * grid.1 || c != config.stage_channels[stage] {
        return Err(Error::Shape(format!(
            "stage {} expects {}x{} tokens of width {}, got {n} of width {c}",
            stage + 1,
            grid.0,
            grid.1,
            config.stage_channels[stage]
        )));
    }
    let reduction = config.spatial_reduction_ratios[stage];
    if reduction > 1 && (grid.0 % reduction != 0 || grid.1 % reduction != 0) {
        return Err(Error::Dimension(format!(
            "stage {} grid {}x{} not divisible by reduction ratio {reduction}",
            stage + 1,
            grid.0,
            grid.1
        )));
    }
    let mut x = tokens;
    let mut maps = Vec::with_capacity(config.stage_depths[stage]);
    for blk in 0..config.stage_depths[stage] {
        let pre = format!("encoder.s{}.b{}", stage + 1, blk + 1);
        let h = norm(g, x, p, &format!("{pre}.norm1"))?;
        let (a, w) = attention(g, h, grid, heads, reduction, p, &format!("{pre}.attn"))?;
        maps.push(w);
        x = g.add(x, a)?;
        let h = norm(g, x, p, &format!("{pre}.norm2"))?;
        let f = mix_ffn(g, h, grid, p, &format!("{pre}.ffn"))?;
        x = g.add(x, f)?;
    }
    Ok((x, maps))
}

pub fn stage_forward<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    grid: (usize, usize),
    stage: usize,
    config: &EncoderVariantConfig,
    p: &Bound,
) -> Result<Var> {
    stage_forward_traced(g, tokens, grid, stage, config, p).map(|(x, _)| x)
}

/// Encoder forward on a graph; `image` is `[b, in_channels, h, w]`.
pub fn encode<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    config: &EncoderVariantConfig,
    p: &Bound,
) -> Result<PyramidVars> {
    let (_, cin, h, w) = g.value(image).dims4()?;
    check_input_size(h, w)?;
    if cin != config.in_channels {
        return Err(Error::Shape(format!(
            "image has {cin} channels, encoder expects {}",
            config.in_channels
        )));
    }
    let mut x = image;
    let mut levels = [image; NUM_STAGES];
    for (s, level) in levels.iter_mut().enumerate() {
        let pre = format!("encoder.s{}", s + 1);
        let k = config.patch_sizes[s];
        let e = g.conv2d(x, p.get(&format!("{pre}.patch.weight"))?, PATCH_STRIDES[s], k / 2, 1)?;
        let e = g.add_bias(e, p.get(&format!("{pre}.patch.bias"))?, 1)?;
        let (_, _, gh, gw) = g.value(e).dims4()?;
        if (gh, gw) != (h / STAGE_STRIDES[s], w / STAGE_STRIDES[s]) {
            return Err(Error::Shape(format!(
                "stage {} patch embedding produced {gh}x{gw}",
                s + 1
            )));
        }
        let t = to_tokens(g, e)?;
        let t = norm(g, t, p, &format!("{pre}.patch_norm"))?;
        let t = stage_forward(g, t, (gh, gw), s, config, p)?;
        let t = norm(g, t, p, &format!("{pre}.norm"))?;
        x = from_tokens(g, t, (gh, gw))?;
        *level = x;
    }
    Ok(PyramidVars {
        levels,
        input_size: (h, w),
    })
}

/// Inference-mode encoder forward.
pub fn encoder_forward<T: Scalar>(
    image: &Tensor<T>,
    config: &EncoderVariantConfig,
    params: &ParamStore<T>,
) -> Result<FeaturePyramid<T>> {
    let (_, _, h, w) = image.dims4()?;
    check_input_size(h, w)?;
    config.validate()?;
    let specs: Vec<(String, Vec<usize>)> = config
        .param_specs()
        .into_iter()
        .map(|s| (s.name, s.shape))
        .collect();
    params.check_shapes(&specs)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let pyr = encode(&mut g, x, config, &p)?;
    Ok(pyr.materialize(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::initialize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_params(seed: u64) -> ParamStore<f64> {
        initialize(
            &EncoderVariantConfig::tiny().param_specs(),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn presets_validate() {
        for name in EncoderVariantConfig::preset_names() {
            EncoderVariantConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(EncoderVariantConfig::preset("b9").is_err());
    }

    #[test]
    fn rejects_non_increasing_channels_and_bad_heads() {
        let mut c = EncoderVariantConfig::tiny();
        c.stage_channels = [8, 8, 32, 64];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = EncoderVariantConfig::tiny();
        c.attention_heads = [3, 2, 4, 8];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_pyramid_shapes_64() {
        let params = tiny_params(1);
        let img = Tensor::full(&[1, 3, 64, 64], 0.5);
        let pyr = encoder_forward(&img, &EncoderVariantConfig::tiny(), &params).unwrap();
        let shapes: Vec<_> = pyr.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 8, 16, 16],
                vec![1, 16, 8, 8],
                vec![1, 32, 4, 4],
                vec![1, 64, 2, 2]
            ]
        );
    }

    #[test]
    fn batch_preserved_non_square() {
        let params = tiny_params(1);
        let img = Tensor::full(&[2, 3, 96, 64], 0.25);
        let pyr = encoder_forward(&img, &EncoderVariantConfig::tiny(), &params).unwrap();
        assert_eq!(pyr.levels[0].shape(), &[2, 8, 24, 16]);
    }

    #[test]
    fn indivisible_input_is_dimension_error() {
        let params = tiny_params(1);
        let img = Tensor::full(&[1, 3, 50, 50], 0.5);
        let err = encoder_forward(&img, &EncoderVariantConfig::tiny(), &params).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn mismatched_params_are_shape_error() {
        let mut params = tiny_params(1);
        params.insert("encoder.s2.patch.weight", Tensor::zeros(&[16, 8, 5, 5]));
        let img = Tensor::full(&[1, 3, 64, 64], 0.5);
        let err = encoder_forward(&img, &EncoderVariantConfig::tiny(), &params).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
