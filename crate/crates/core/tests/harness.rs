mod common;

use std::fs;

use common::{quick_config, synth_f32};
use dualseg::data::synth::SynthConfig;
use dualseg::data::{load_dataset, mask_dir, read_registry, synth_generate, Split};
use dualseg::decoders::HeadKind;
use dualseg::encoder::EncoderVariantConfig;
use dualseg::fusion::{FusionRule, Head, LabelRegistry};
use dualseg::harness::checkpoint::check_registries;
use dualseg::harness::evaluate::{batch_images, fused_confusion, head_on_global_confusion};
use dualseg::harness::overlay::PAD_MULTIPLE;
use dualseg::harness::{
    ablate_losses_on, evaluate, infer_overlay, train, train_on, Checkpoint, EvalMode, EvalOptions,
    GroundTruthInjector, ModelSpec, SchedulerConfig, SegModel, TrainConfig, Trainer,
};
use dualseg::data::png_io::{read_palette, read_rgb, write_rgb, RgbImage};
use dualseg::loss::{tversky_loss, LossConfig};
use dualseg::{Error, LabelMask};
use tempfile::tempdir;

fn registry() -> LabelRegistry {
    LabelRegistry::synthetic(2, 2)
}

fn model(head: Head, kind: HeadKind, seed: u64) -> SegModel<f32> {
    let spec = ModelSpec::new(EncoderVariantConfig::tiny(), head, kind, 16, &registry());
    SegModel::new(spec, seed).unwrap()
}

/// Closed-form triangular wave: rises over the first half cycle, falls over the second.
fn triangle(base: f64, max: f64, cycle: u64, t: u64) -> f64 {
    let phase = (t % cycle) as f64;
    let half = cycle as f64 / 2.0;
    let frac = if phase <= half { phase / half } else { (cycle as f64 - phase) / half };
    base + (max - base) * frac
}

#[test]
fn scheduler_follows_closed_form() {
    let s = SchedulerConfig::Cyclic { lr_max: 5e-5, cycle_length_steps: 10 };
    for (step, want) in [(0, 5e-6), (5, 5e-5), (10, 5e-6)] {
        assert!((s.lr_at(5e-6, step) - want).abs() < 1e-18);
    }
    for cycle in [10u64, 16, 38] {
        let s = SchedulerConfig::Cyclic { lr_max: 5e-5, cycle_length_steps: cycle };
        for t in 0..100 {
            let (got, want) = (s.lr_at(5e-6, t), triangle(5e-6, 5e-5, cycle, t));
            assert!((got - want).abs() < 1e-15, "cycle {cycle} step {t}: {got} vs {want}");
        }
    }
    assert_eq!(SchedulerConfig::Constant.lr_at(3e-4, 77), 3e-4);
}

#[test]
fn config_file_rejects_unknown_keys_and_bad_values() {
    let cfg = TrainConfig::from_toml_str(
        "variant = \"tiny\"\ninstance = \"anatomy\"\nepochs = 3\n[scheduler]\nkind = \"cyclic\"\nlr_max = 1e-4\ncycle_length_steps = 50\n[loss]\nalpha = 0.6\n",
    )
    .unwrap();
    assert_eq!(cfg.head_kind(), HeadKind::Mlp);
    assert_eq!(cfg.loss.alpha, 0.6);
    assert_eq!(cfg.loss.beta, 0.3);
    assert_eq!(cfg.batch_size, 4);
    assert!(matches!(TrainConfig::from_toml_str("epochz = 3\n"), Err(Error::Toml(_))));
    assert!(TrainConfig::from_toml_str("[loss]\ngamma = 1\n").is_err());
    let low = TrainConfig { scheduler: SchedulerConfig::Cyclic { lr_max: 1e-7, cycle_length_steps: 10 }, ..Default::default() };
    assert!(low.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { variant: "b7".into(), ..Default::default() }.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let dir = tempdir().unwrap();
    let reg = registry();
    let m = model(Head::Tool, HeadKind::Skip, 3);
    let probe = batch_images(&synth_f32(1, Split::Val, 2, 64, &reg).iter().collect::<Vec<_>>()).unwrap();
    let before = m.logits(&probe).unwrap();
    Checkpoint::new(m.clone(), reg.clone(), serde_json::json!({"note": "probe"}), 12, 3)
        .save(dir.path())
        .unwrap();
    let loaded = Checkpoint::<f32>::load(dir.path()).unwrap();
    assert_eq!(loaded.model, m);
    assert_eq!((loaded.step, loaded.epoch), (12, 3));
    let after = loaded.model.logits(&probe).unwrap();
    let bits = |t: &dualseg::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&before), bits(&after));

    assert!(check_registries(&reg, &[&loaded]).is_ok());
    assert!(check_registries(&LabelRegistry::synthetic(2, 3), &[&loaded]).is_err());

    // a truncated buffer or a future format is refused
    let manifest = dir.path().join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Checkpoint(_))));
    fs::write(&manifest, text).unwrap();
    let bin = dir.path().join("params.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Checkpoint(_))));
}

#[test]
fn nan_parameter_aborts_before_the_update() {
    let reg = registry();
    let cfg = quick_config(Head::Tool, 16, 1);
    let mut tr = Trainer::<f32>::from_model(&cfg, model(Head::Tool, HeadKind::Skip, 0)).unwrap();
    let data = synth_f32(2, Split::Train, 2, 64, &reg);
    let images = batch_images(&data.iter().collect::<Vec<_>>()).unwrap();
    let targets: Vec<LabelMask> = data.iter().map(|s| s.tool_mask.clone()).collect();
    tr.train_step(&images, &targets).unwrap();
    tr.model.params.get_mut("decoder.cls.bias").unwrap().data_mut()[0] = f32::NAN;
    let snapshot = tr.model.params.hash_hex();
    let err = tr.train_step(&images, &targets).unwrap_err();
    assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err:?}");
    assert_eq!(tr.model.params.hash_hex(), snapshot);
    assert_eq!(tr.step_count(), 1);
}

#[test]
fn epoch_one_hash_depends_only_on_seed() {
    let reg = registry();
    let train_set = synth_f32(5, Split::Train, 6, 32, &reg);
    let val_set = synth_f32(5, Split::Val, 2, 32, &reg);
    let run = |seed| {
        let cfg = TrainConfig { seed, batch_size: 2, ..quick_config(Head::Tool, 8, 1) };
        train_on(&cfg, &reg, &train_set, &val_set, |_| {}).unwrap().log[0].clone()
    };
    let (a, b, c) = (run(0), run(0), run(1));
    assert_eq!(a, b);
    assert_ne!(a.param_hash, c.param_hash);
    assert_eq!(a.step, 3);
}

#[test]
fn recorded_tversky_loss_matches_recomputation() {
    let reg = registry();
    let loss = LossConfig::default().with_lambda(1.0);
    let cfg = TrainConfig { loss, ..quick_config(Head::Tool, 8, 1) };
    let spec = ModelSpec::new(EncoderVariantConfig::tiny(), Head::Tool, HeadKind::Skip, 8, &reg);
    let mut tr = Trainer::<f64>::from_model(&cfg, SegModel::new(spec, 4).unwrap()).unwrap();
    let data: Vec<_> = synth_f32(3, Split::Train, 2, 32, &reg).iter().map(|s| s.cast::<f64>()).collect();
    let images = batch_images(&data.iter().collect::<Vec<_>>()).unwrap();
    let targets: Vec<LabelMask> = data.iter().map(|s| s.tool_mask.clone()).collect();
    for _ in 0..3 {
        let probs = common::softmax_channels(&tr.model.logits(&images).unwrap());
        let recomputed = tversky_loss(&probs, &targets, &loss).unwrap();
        let recorded = tr.train_step(&images, &targets).unwrap();
        assert!((recorded - recomputed).abs() < 1e-12, "{recorded} vs {recomputed}");
    }
}

#[test]
fn ground_truth_injection_scores_perfectly() {
    let reg = registry();
    let val = synth_f32(9, Split::Val, 6, 64, &reg);
    let anat = GroundTruthInjector { head: Head::Anatomy, num_classes: reg.head_classes(Head::Anatomy) };
    let tool = GroundTruthInjector { head: Head::Tool, num_classes: reg.head_classes(Head::Tool) };
    for mode in [EvalMode::Fused, EvalMode::Anatomy, EvalMode::Tool] {
        let report = evaluate::<f32>(Some(&anat), Some(&tool), &val, &reg, &EvalOptions::new(mode)).unwrap();
        assert_eq!(report.miou, 1.0, "{mode:?}");
        assert_eq!(report.mean_dice, 1.0);
    }
    // wrong predictor in a slot is refused
    let r = evaluate::<f32>(Some(&tool), Some(&tool), &val, &reg, &EvalOptions::new(EvalMode::Fused));
    assert!(r.is_err());
}

#[test]
fn anatomy_mode_ignores_tool_masks() {
    let dir = tempdir().unwrap();
    let reg = registry();
    synth_generate(dir.path(), &SynthConfig { seed: 2, train: 1, val: 3, test: 0, size: 64 }, &reg).unwrap();
    let m = model(Head::Anatomy, HeadKind::Mlp, 1);
    let report = |heads: &[Head]| {
        let val = load_dataset::<f32>(dir.path(), Split::Val, &reg, heads).unwrap();
        let r = evaluate(Some(&m as &dyn dualseg::harness::HeadPredictor<f32>), None, &val, &reg, &EvalOptions::new(EvalMode::Anatomy)).unwrap();
        serde_json::to_string(&r).unwrap()
    };
    let before = report(&[Head::Anatomy, Head::Tool]);
    fs::remove_dir_all(mask_dir(dir.path(), Head::Tool, Split::Val)).unwrap();
    assert_eq!(report(&[Head::Anatomy]), before);
}

#[test]
fn overlay_crops_padding_and_leaves_background_untinted() {
    let dir = tempdir().unwrap();
    let reg = registry();
    let (h, w) = (40, 50);
    let pixels: Vec<u8> = (0..h * w * 3).map(|i| (i * 37 % 251) as u8).collect();
    let img_path = dir.path().join("frame.png");
    write_rgb(&img_path, &RgbImage::new(h, w, pixels.clone()).unwrap()).unwrap();
    let out = dir.path().join("out");

    // injected ground truth on an unlabeled frame predicts background everywhere
    let anat = GroundTruthInjector { head: Head::Anatomy, num_classes: 3 };
    let tool = GroundTruthInjector { head: Head::Tool, num_classes: 3 };
    let meta = infer_overlay(&anat, &tool, &reg, &img_path, &out, None).unwrap();
    assert_eq!(read_rgb(&meta.overlay).unwrap().pixels, pixels);
    assert!(meta.padded);
    assert_eq!(meta.original_size, (h, w));
    assert_eq!(meta.padded_size, (h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE, w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE));

    let a = model(Head::Anatomy, HeadKind::Mlp, 5);
    let t = model(Head::Tool, HeadKind::Skip, 6);
    let meta = infer_overlay(&a, &t, &reg, &img_path, &out, Some(1)).unwrap();
    let mask = dualseg::data::png_io::read_mask(&meta.mask).unwrap();
    assert_eq!(mask.size(), (h, w));
    let n = reg.num_global_classes();
    assert_eq!(read_palette(&meta.mask).unwrap()[..n], reg.global_palette()[..n]);
    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("frame_overlay.json")).unwrap()).unwrap();
    assert_eq!(sidecar["original_size"], serde_json::json!([h, w]));
    assert!(infer_overlay(&a, &t, &reg, &dir.path().join("missing.png"), &out, None).is_err());
}

#[test]
fn ablation_report_has_three_arms() {
    let reg = registry();
    let train_set = synth_f32(4, Split::Train, 4, 32, &reg);
    let val_set = synth_f32(4, Split::Val, 2, 32, &reg);
    let cfg = TrainConfig { batch_size: 2, ..quick_config(Head::Tool, 8, 1) };
    let mut runs = Vec::new();
    let report = ablate_losses_on(&cfg, &[0, 1], &reg, &train_set, &val_set, |arm, seed, _| runs.push((arm.to_string(), seed))).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.loss.as_str()).collect();
    assert_eq!(labels, ["tversky", "cross_entropy", "combined"]);
    assert_eq!(report.rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), [1.0, 0.0, 0.7]);
    assert_eq!(runs.len(), 6);
    for r in &report.rows {
        assert_eq!(r.miou_per_seed.len(), 2);
        assert!((r.miou - (r.miou_per_seed[0] + r.miou_per_seed[1]) / 2.0).abs() < 1e-12);
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().next(), Some("loss,lambda,miou,dice"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn train_writes_checkpoints_and_log() {
    let dir = tempdir().unwrap();
    let reg = registry();
    let data = dir.path().join("data");
    synth_generate(&data, &SynthConfig { seed: 1, train: 4, val: 2, test: 0, size: 32 }, &reg).unwrap();
    let cfg = TrainConfig {
        dataset_root: data.clone(),
        output_dir: dir.path().join("run"),
        batch_size: 2,
        ..quick_config(Head::Anatomy, 8, 2)
    };
    let mut seen = 0;
    let outcome = train(&cfg, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    let best = Checkpoint::<f32>::load(&cfg.output_dir.join("best")).unwrap();
    let last = Checkpoint::<f32>::load(&cfg.output_dir.join("last")).unwrap();
    assert_eq!(last.step, 4);
    assert_eq!(best.model, outcome.best);
    assert_eq!(best.registry, read_registry(&data).unwrap());
    assert_eq!(best.model.spec.decoder.head_kind, HeadKind::Mlp);
    let log: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("log.json")).unwrap()).unwrap();
    assert_eq!(log.as_array().unwrap().len(), 2);
    assert!(log[0]["val_miou"].as_f64().is_some());
}

/// Informational: fused predictions against single heads on the global label
/// space. Each head alone cannot name the other head's classes.
#[test]
fn fusion_beats_single_heads_on_global_labels() {
    let reg = registry();
    let mut wins = 0;
    for seed in 0..5u64 {
        let train_set = synth_f32(100 + seed, Split::Train, 32, 64, &reg);
        let val_set = synth_f32(100 + seed, Split::Val, 8, 64, &reg);
        let fit = |head| {
            let cfg = TrainConfig { seed, ..quick_config(head, 16, 3) };
            train_on(&cfg, &reg, &train_set, &val_set, |_| {}).unwrap().best
        };
        let (a, t) = (fit(Head::Anatomy), fit(Head::Tool));
        let fused = fused_confusion(&a, &t, &val_set, &reg, FusionRule::Priority, None).unwrap().miou(true).unwrap();
        let a_only = head_on_global_confusion(&a, &val_set, &reg).unwrap().miou(true).unwrap();
        let t_only = head_on_global_confusion(&t, &val_set, &reg).unwrap().miou(true).unwrap();
        println!("seed {seed}: fused {fused:.4} anatomy {a_only:.4} tool {t_only:.4}");
        if fused >= a_only.max(t_only) {
            wins += 1;
        }
    }
    assert!(wins >= 4, "fusion won {wins}/5");
}
