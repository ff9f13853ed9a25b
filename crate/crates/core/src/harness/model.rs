//! A segmentation model instance: input normalization, encoder and one head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoders::{mlp_decode_graph, skip_decode_graph, DecoderConfig, HeadKind, SkipBranch};
use crate::encoder::{encode, EncoderVariantConfig};
use crate::error::{Error, Result};
use crate::fusion::{derive_output, Head, LabelRegistry, SegOutput};
use crate::params::{initialize, Bound, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderVariantConfig,
    pub decoder: DecoderConfig,
    pub head: Head,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    #[serde(default)]
    pub zero_skip: bool,
}

impl ModelSpec {
    pub fn new(encoder: EncoderVariantConfig, head: Head, head_kind: HeadKind, embed_dim: usize, registry: &LabelRegistry) -> Self {
        Self {
            encoder,
            decoder: DecoderConfig {
                embed_dim,
                num_classes: registry.head_classes(head),
                head_kind,
            },
            head,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            zero_skip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.encoder.param_specs();
        specs.extend(self.decoder.param_specs(&self.encoder.stage_channels));
        specs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh model with parameters drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = initialize(&spec.param_specs(), &mut rng);
        Ok(Self { spec, params })
    }

    /// Wraps existing parameters after checking every name and shape.
    pub fn from_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let expected: Vec<(String, Vec<usize>)> = spec
            .param_specs()
            .into_iter()
            .map(|s| (s.name, s.shape))
            .collect();
        params.check_shapes(&expected)?;
        Ok(Self { spec, params })
    }

    pub fn num_classes(&self) -> usize {
        self.spec.decoder.num_classes
    }

    /// Per-channel `(x - mean) / std` on a `[b, 3, h, w]` batch.
    pub fn normalize(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        let plane = h * w;
        let mean = self.spec.mean.map(T::of);
        let inv = self.spec.std.map(|s| T::of(1.0 / s));
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % 3;
            *v = (*v - mean[ch]) * inv[ch];
        }
        Ok(out)
    }

    /// Records the forward pass on `g`; returns class logits and the bound parameters.
    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>, trainable: bool) -> Result<(Var, Bound)> {
        let p = self.params.bind(g, trainable);
        let x = g.constant(self.normalize(images)?);
        let pyramid = encode(g, x, &self.spec.encoder, &p)?;
        let logits = match self.spec.decoder.head_kind {
            HeadKind::Mlp => mlp_decode_graph(g, &pyramid, &self.spec.decoder, &p)?,
            HeadKind::Skip => {
                let branch = if self.spec.zero_skip {
                    SkipBranch::Zeroed
                } else {
                    SkipBranch::Live
                };
                skip_decode_graph(g, &pyramid, &self.spec.decoder, &p, branch)?
            }
        };
        Ok((logits, p))
    }

    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, images, false)?;
        Ok(g.value(out).clone())
    }

    pub fn probs(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (out, _) = self.forward(&mut g, images, false)?;
        let p = g.softmax(out, 1)?;
        Ok(g.value(p).clone())
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<SegOutput<T>> {
        derive_output(self.probs(images)?, self.spec.head)
    }
}
