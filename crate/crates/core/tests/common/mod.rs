#![allow(dead_code)]

use dualseg::autograd::Graph;
use dualseg::decoders::{decode_graph, DecoderConfig, HeadKind};
use dualseg::encoder::{encode, EncoderVariantConfig};
use dualseg::params::{initialize, uniform_tensor, ParamStore};
use dualseg::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform_tensor(shape, 0.0, 1.0, &mut rng(seed))
}

/// Encoder plus decoder parameters for `config` and `dec`.
pub fn model_params(config: &EncoderVariantConfig, dec: &DecoderConfig, seed: u64) -> ParamStore<f64> {
    let mut specs = config.param_specs();
    specs.extend(dec.param_specs(&config.stage_channels));
    initialize(&specs, &mut rng(seed))
}

pub fn decoder(kind: HeadKind, k: usize, embed_dim: usize) -> DecoderConfig {
    DecoderConfig {
        embed_dim,
        num_classes: k,
        head_kind: kind,
    }
}

/// Full-resolution logits of encoder + decoder on `image`.
pub fn logits(
    image: &Tensor<f64>,
    config: &EncoderVariantConfig,
    dec: &DecoderConfig,
    params: &ParamStore<f64>,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let pyr = encode(&mut g, x, config, &p).unwrap();
    let out = decode_graph(&mut g, &pyr, dec, &p).unwrap();
    g.value(out).clone()
}

/// Relative error used by the finite-difference checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Plain softmax over axis 1 of `[b, k, h, w]`.
pub fn softmax_channels(l: &Tensor<f64>) -> Tensor<f64> {
    let (b, k, h, w) = l.dims4().unwrap();
    let hw = h * w;
    let d = l.data();
    let mut out = vec![0.0; d.len()];
    for bi in 0..b {
        for i in 0..hw {
            let at = |c: usize| bi * k * hw + c * hw + i;
            let m = (0..k).map(|c| d[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (d[at(c)] - m).exp()).sum();
            for c in 0..k {
                out[at(c)] = (d[at(c)] - m).exp() / z;
            }
        }
    }
    Tensor::from_vec(l.shape(), out).unwrap()
}

/// In-memory synthetic split in f32.
pub fn synth_f32(
    seed: u64,
    split: dualseg::data::Split,
    n: usize,
    size: usize,
    reg: &dualseg::fusion::LabelRegistry,
) -> Vec<dualseg::data::Sample<f32>> {
    let cfg = dualseg::data::SynthConfig { seed, train: n, val: n, test: n, size };
    dualseg::data::synth::synth_split(&cfg, split, reg)
        .unwrap()
        .iter()
        .map(|s| s.cast())
        .collect()
}

/// Small, fast training setup used across the harness tests.
pub fn quick_config(instance: dualseg::fusion::Head, embed_dim: usize, epochs: usize) -> dualseg::harness::TrainConfig {
    dualseg::harness::TrainConfig {
        instance,
        embed_dim,
        epochs,
        lr_base: 1e-3,
        scheduler: dualseg::harness::SchedulerConfig::Constant,
        ..Default::default()
    }
}
