use grsn_core::boxes::BBox;
use grsn_core::data::{generate, DatasetSpec, Object, Split};
use grsn_core::detector::{
    decode_grid, detection_loss, encode_box, images_to_tensor, nms, Detection, LossWeights, ModelConfig,
};
use grsn_core::eval::{evaluate, EvalSettings};
use grsn_core::optim::{Adam, AdamConfig};
use grsn_core::train::{train, train_step, TrainConfig};
use grsn_core::{Detector, Tape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        stage_channels: vec![8, 8, 16],
        scale_channels: vec![16],
        head_width: 8,
        priors: vec![12.0],
        ..ModelConfig::default()
    }
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        image_size: 32,
        min_object_size: 6,
        max_object_size: 12,
        max_objects: 3,
        ..DatasetSpec::default()
    }
}

#[test]
fn decode_inverts_encode_on_random_boxes() {
    let cfg = ModelConfig::default();
    let scales = cfg.scales().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let (w, h) = (rng.random_range(4.0..40.0), rng.random_range(4.0..40.0));
        let (cx, cy) = (rng.random_range(0.5..63.5), rng.random_range(0.5..63.5));
        let bbox = BBox::from_center(cx, cy, w, h);
        let s = rng.random_range(0..2);
        let g = cfg.grid_size(s);
        let ((gx, gy), raw) = encode_box(&bbox, cfg.stride(s), cfg.priors[s], (g, g)).unwrap();
        let mut pred = Tensor::<f64>::zeros(&[9, g, g]);
        for (c, v) in raw.iter().enumerate() {
            pred.set(&[c + 1, gy, gx], *v);
        }
        let d = decode_grid(&pred, &scales[s], cfg.stride(s), cfg.priors[s]).unwrap()[gy * g + gx];
        for (a, b) in [
            (d.bbox.x_min, bbox.x_min),
            (d.bbox.y_min, bbox.y_min),
            (d.bbox.x_max, bbox.x_max),
            (d.bbox.y_max, bbox.y_max),
        ] {
            assert!((a - b).abs() < 1e-4, "{bbox:?} -> {:?}", d.bbox);
        }
    }
}

#[test]
fn decoded_centres_stay_in_their_cell() {
    let cfg = ModelConfig::default();
    let scales = cfg.scales().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pred = Tensor::<f64>::uniform(&[9, 8, 8], 30.0, &mut rng);
    for (i, d) in decode_grid(&pred, &scales[0], 8, 16.0).unwrap().iter().enumerate() {
        let (cx, cy) = d.bbox.center();
        let (gx, gy) = ((i % 8) as f64 * 8.0, (i / 8) as f64 * 8.0);
        assert!(cx >= gx && cx <= gx + 8.0 && cy >= gy && cy <= gy + 8.0);
        assert!(d.bbox.is_valid() && (0.0..=1.0).contains(&d.score));
    }
}

fn perfect_logits(cfg: &ModelConfig, objects: &[Object]) -> Vec<Tensor<f64>> {
    let a = grsn_core::detector::assign_targets(&[objects], cfg).unwrap();
    (0..cfg.n_scales())
        .map(|s| {
            let g = cfg.grid_size(s);
            let mut t = Tensor::zeros(&[1, cfg.pred_channels(), g, g]);
            for y in 0..g {
                for x in 0..g {
                    t.set(&[0, 0, y, x], -25.0);
                }
            }
            for a in a.iter().filter(|a| a.scale == s) {
                let (x, y) = a.cell;
                let logit = |p: f64| (p / (1.0 - p)).ln();
                t.set(&[0, 0, y, x], 25.0);
                t.set(&[0, 1, y, x], logit(a.target[0]));
                t.set(&[0, 2, y, x], logit(a.target[1]));
                t.set(&[0, 3, y, x], a.target[2]);
                t.set(&[0, 4, y, x], a.target[3]);
                t.set(&[0, 5 + a.class_id, y, x], 25.0);
            }
            t
        })
        .collect()
}

#[test]
fn perfect_prediction_has_near_zero_loss() {
    let cfg = ModelConfig::default();
    for scene in generate(3, 20, &DatasetSpec::default()).unwrap() {
        let tape = Tape::<f64>::inference();
        let preds: Vec<_> = perfect_logits(&cfg, &scene.objects).into_iter().map(|t| tape.constant(t)).collect();
        let loss = detection_loss(&preds, &[&scene.objects], &cfg, &LossWeights::default()).unwrap();
        assert!(loss.total.value().item() < 1e-3);
    }
}

#[test]
fn empty_scene_loss_falls_as_objectness_falls() {
    let cfg = ModelConfig::default();
    let mut prev = f64::INFINITY;
    for step in 0..10 {
        let logit = -(step as f64);
        let tape = Tape::<f64>::inference();
        let preds: Vec<_> = (0..2)
            .map(|s| {
                let g = cfg.grid_size(s);
                let mut t = Tensor::zeros(&[1, 9, g, g]);
                t.data_mut()[..g * g].iter_mut().for_each(|v| *v = logit);
                tape.constant(t)
            })
            .collect();
        let loss = detection_loss(&preds, &[&[]], &cfg, &LossWeights::default()).unwrap().total.value().item();
        assert!(loss >= 0.0 && loss < prev);
        prev = loss;
    }
}

#[test]
fn centre_outside_image_is_a_data_error() {
    let cfg = ModelConfig::default();
    let tape = Tape::<f64>::inference();
    let preds = [tape.constant(Tensor::zeros(&[1, 9, 8, 8])), tape.constant(Tensor::zeros(&[1, 9, 4, 4]))];
    let obj = [Object {
        bbox: BBox::from_center(70.0, 10.0, 10.0, 10.0),
        class_id: 0,
    }];
    assert!(matches!(
        detection_loss(&preds, &[&obj], &cfg, &LossWeights::default()),
        Err(grsn_core::Error::Data(_))
    ));
}

#[test]
fn upsample_of_single_cell_is_constant() {
    let tape = Tape::<f32>::inference();
    let x = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![2.5]).unwrap());
    let up = x.upsample2x().unwrap();
    assert_eq!(up.shape(), vec![1, 1, 2, 2]);
    assert!(up.value().data().iter().all(|&v| v == 2.5));
}

#[test]
fn reasoner2_shortcut_reproduces_neck_features() {
    let scene = &generate(4, 1, &DatasetSpec::default()).unwrap()[0];
    let mut model = Detector::<f32>::new(ModelConfig::default().with_variant(Variant::Reasoner2), 4).unwrap();
    model.freeze_reasoning_as_shortcut().unwrap();
    let tape = Tape::inference();
    let fwd = model.forward(&tape, tape.constant(images_to_tensor(std::slice::from_ref(scene)).unwrap())).unwrap();
    for (neck, head_in) in fwd.neck.iter().zip(&fwd.head_inputs) {
        assert_eq!(*neck.value(), *head_in.value());
    }
}

#[test]
fn frozen_reasoning_branch_reproduces_baseline_losses() {
    let scenes = generate(8, 12, &small_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = |variant| {
        let mut model = Detector::<f32>::new(small_config().with_variant(variant), 8).unwrap();
        if variant == Variant::Reasoner2 {
            model.freeze_reasoning_as_shortcut().unwrap();
        }
        let mut adam = Adam::new(AdamConfig::default(), model.store());
        train(&mut model, &mut adam, &scenes, &cfg, |_| {}).unwrap()
    };
    let base = run(Variant::Baseline);
    let frozen = run(Variant::Reasoner2);
    for (a, b) in base.epochs.iter().zip(&frozen.epochs) {
        assert!((a.loss_total - b.loss_total).abs() < 1e-6, "{} vs {}", a.loss_total, b.loss_total);
    }
}

#[test]
fn one_step_lowers_the_loss_on_a_fixed_scene() {
    for seed in 0..10 {
        let scene = generate(100 + seed, 1, &small_spec()).unwrap();
        for variant in Variant::ALL {
            let mut model = Detector::<f32>::new(small_config().with_variant(variant), seed).unwrap();
            let mut adam = Adam::new(AdamConfig::default(), model.store());
            let before = train_step(&mut model, &mut adam, &scene, &LossWeights::default()).unwrap().total;
            let after = train_step(&mut model, &mut adam, &scene, &LossWeights::default()).unwrap().total;
            assert!(after < before, "seed {seed} {variant}: {before} -> {after}");
        }
    }
}

#[test]
fn pixel_gradient_matches_finite_differences_in_f32() {
    let scene = &generate(21, 1, &small_spec()).unwrap()[0];
    let cfg = small_config().with_variant(Variant::Reasoner2);
    let model = Detector::<f32>::new(cfg.clone(), 21).unwrap();
    let twin = Detector::<f64>::new(cfg.clone(), 21).unwrap();
    let image = images_to_tensor::<f64>(std::slice::from_ref(scene)).unwrap();
    let loss_of = |img: &Tensor<f64>| -> f64 {
        let tape = Tape::inference();
        let fwd = twin.forward(&tape, tape.constant(img.clone())).unwrap();
        let l = detection_loss(&fwd.predictions, &[&scene.objects], &cfg, &LossWeights::default()).unwrap();
        let v = l.total.value().item();
        v
    };
    let tape = Tape::new();
    let x = tape.var(images_to_tensor::<f32>(std::slice::from_ref(scene)).unwrap());
    let fwd = model.forward(&tape, x).unwrap();
    let loss = detection_loss(&fwd.predictions, &[&scene.objects], &cfg, &LossWeights::default()).unwrap();
    tape.backward(loss.total).unwrap();
    let grad = x.grad().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let h = 1e-5;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..16 {
        let i = rng.random_range(0..image.len());
        let mut plus = image.clone();
        plus.data_mut()[i] += h;
        let mut minus = image.clone();
        minus.data_mut()[i] -= h;
        numeric.push((loss_of(&plus) - loss_of(&minus)) / (2.0 * h));
        analytic.push(grad.data()[i] as f64);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let rel = norm(&diff) / (norm(&analytic) + norm(&numeric));
    assert!(rel < 1e-2, "relative error {rel}: {analytic:?} vs {numeric:?}");
}

#[test]
fn nms_is_order_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let mut dets: Vec<Detection> = (0..12)
            .map(|_| {
                let (x, y) = (rng.random_range(0..6) as f64 * 4.0, rng.random_range(0..6) as f64 * 4.0);
                Detection {
                    bbox: BBox::new(x, y, x + 10.0, y + 10.0),
                    class_id: rng.random_range(0..3),
                    score: rng.random_range(1..5) as f64 / 5.0,
                    scale_id: 0,
                }
            })
            .collect();
        let reference = nms(dets.clone(), 0.45);
        for _ in 0..5 {
            for i in (1..dets.len()).rev() {
                dets.swap(i, rng.random_range(0..=i));
            }
            assert_eq!(nms(dets.clone(), 0.45), reference);
        }
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let val = generate(1, 200, &DatasetSpec::default().with_split(Split::Val)).unwrap();
    for variant in Variant::ALL {
        let model = Detector::<f32>::new(ModelConfig::default().with_variant(variant), 1).unwrap();
        let r = evaluate(&model, &val, &EvalSettings::default(), 1).unwrap();
        assert!(r.map50 < 0.05, "{variant}: {}", r.map50);
        let again = evaluate(&model, &val, &EvalSettings::default(), 1).unwrap();
        assert_eq!(r, again);
        let mean = r.per_class_ap.values().sum::<f64>() / r.per_class_ap.len() as f64;
        assert_eq!(mean, r.map50);
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let scenes = generate(2, 16, &small_spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = Detector::<f32>::new(small_config().with_variant(Variant::Reasoner1), 3).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), model.store());
        let log = train(&mut model, &mut adam, &scenes, &cfg, |_| {}).unwrap();
        log.epochs.iter().map(|e| (e.loss_total.to_bits(), e.loss_box.to_bits())).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
