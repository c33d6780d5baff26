use ndarray::{array, Array4};

use super::*;
use crate::augment::testutil::{random_clip, translating_square};
use crate::contrastive::{build_positive_bags, loss_out, EmbeddingBatch, LossConfig};
use crate::numerics::{finite_diff_grad, relative_error, SeededRng};

// the tiny nets are strongly curved; a smaller step keeps truncation error
// well under the tolerance
const FD_STEP: f64 = 1e-6;

fn tiny_input() -> InputSpec {
    InputSpec {
        frames: 1,
        height: 2,
        width: 2,
        channels: 1,
        diff_channel: false,
    }
}

fn flat_params<F: Real, P: Parameters<F>>(p: &P) -> Vec<f64> {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter().map(|v| v.as_f64()))
        .collect()
}

fn load_params<P: Parameters<f64>>(p: &mut P, flat: &[f64]) -> usize {
    let mut k = 0;
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = flat[k];
            k += 1;
        }
    }
    k
}

fn flat_grads(grads: &[Linear<f64>]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.tensors().into_iter().flat_map(|t| t.to_vec()))
        .collect()
}

fn tiny_models(seed: u64) -> (Encoder<f64>, Projection<f64>, Matrix<f64>) {
    let mut rng = SeededRng::new(seed, 9);
    let mut enc = Encoder::<f64>::new(tiny_input(), &[3], &mut rng).unwrap();
    // nonzero biases so every path is exercised
    for t in enc.tensors_mut() {
        for v in t.iter_mut() {
            *v += rand::Rng::gen_range(&mut rng, -0.3..0.3);
        }
    }
    let mut proj = Projection::<f64>::new(3, 2, &mut rng);
    for v in proj.tensors_mut()[1].iter_mut() {
        *v = rand::Rng::gen_range(&mut rng, -0.5..0.5);
    }
    let x = Matrix::from_shape_fn((4, 4), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
    (enc, proj, x)
}

fn contrastive_value(
    enc: &Encoder<f64>,
    proj: &Projection<f64>,
    x: &Matrix<f64>,
) -> (f64, Matrix<f64>) {
    let cache = embed(enc, proj, x.clone()).unwrap();
    let batch =
        EmbeddingBatch::views(cache.projection.embeddings().clone(), vec![0, 0, 1, 1]).unwrap();
    let cfg = LossConfig {
        tau_out: 0.5,
        ..LossConfig::default()
    };
    let out = loss_out(&batch, &build_positive_bags(&batch), &cfg).unwrap();
    (out.value, out.grad)
}

#[test]
fn zero_clip_through_zero_bias_net_is_zero() {
    let enc = Encoder::<f32>::new(
        InputSpec::of_clip(&Clip::zeros(4, 8, 8, 1), false),
        &[16, 8],
        &mut SeededRng::new(0, 0),
    )
    .unwrap();
    let f = enc.encode(&Clip::zeros(4, 8, 8, 1)).unwrap();
    assert!(f.iter().all(|&v| v == 0.0));
}

#[test]
fn encoding_is_deterministic() {
    let clip = random_clip(3, (4, 8, 8, 1));
    let spec = InputSpec::of_clip(&clip, true);
    let a = Encoder::<f32>::new(spec, &[16, 8], &mut SeededRng::new(5, 1))
        .unwrap()
        .encode(&clip)
        .unwrap();
    let b = Encoder::<f32>::new(spec, &[16, 8], &mut SeededRng::new(5, 1))
        .unwrap()
        .encode(&clip)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_bias_layer_is_positively_homogeneous() {
    let enc = Encoder::<f64>::new(tiny_input(), &[5], &mut SeededRng::new(1, 0)).unwrap();
    let x = array![[0.1, 0.2, -0.3, 0.4]];
    let once = enc.forward(x.clone()).unwrap().features().clone();
    let twice = enc.forward(x * 2.0).unwrap().features().clone();
    for (a, b) in once.iter().zip(twice.iter()) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn diff_channel_appends_frame_differences() {
    let clip = translating_square(3, 4, 1, 0, 0, 1.0);
    let spec = InputSpec::of_clip(&clip, true);
    let x = spec.batch::<f64>(&[&clip]).unwrap();
    assert_eq!(x.ncols(), 2 * 3 * 16);
    let diff: Vec<f64> = x.row(0).iter().skip(48).copied().collect();
    assert!(diff[..16].iter().all(|&v| v == 0.0));
    // frame 1: pixel (0,1) lights up, (0,0) goes dark
    assert_eq!(diff[16 + 1], 1.0);
    assert_eq!(diff[16], -1.0);
}

#[test]
fn rejects_wrong_clip_shape() {
    let enc = Encoder::<f32>::new(tiny_input(), &[3], &mut SeededRng::new(0, 0)).unwrap();
    assert!(matches!(
        enc.encode(&Clip::zeros(2, 2, 2, 1)),
        Err(EncoderError::ShapeMismatch { .. })
    ));
}

#[test]
fn projection_outputs_unit_vectors() {
    let proj = Projection::<f64>::new(6, 4, &mut SeededRng::new(2, 0));
    for s in 0..20 {
        let mut rng = SeededRng::new(s, 3);
        let f = Vector::from_shape_fn(6, |_| rand::Rng::gen_range(&mut rng, -2.0..2.0));
        let z = proj.project(&f).unwrap();
        assert!((z.dot(&z).sqrt() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn identity_projection_keeps_unit_feature() {
    let mut layer = Linear::<f64>::zeros(3, 3);
    layer.weight = Matrix::eye(3);
    let proj = Projection::from_layer(layer);
    let f = array![0.6, 0.0, 0.8];
    assert_eq!(proj.project(&f).unwrap(), f);
}

#[test]
fn degenerate_feature_is_zero_vector_error() {
    let proj = Projection::from_layer(Linear::<f64>::zeros(3, 3));
    assert!(matches!(
        proj.project(&array![1.0, 2.0, 3.0]),
        Err(EncoderError::Numerics(_))
    ));
}

#[test]
fn contrastive_backward_matches_finite_differences() {
    for seed in 0..10 {
        let (enc, proj, x) = tiny_models(seed);
        let (_, dz) = contrastive_value(&enc, &proj, &x);
        let cache = embed(&enc, &proj, x.clone()).unwrap();
        let (eg, pg) = backward(&enc, &proj, &cache, &dz).unwrap();
        let mut analytic = flat_grads(&eg);
        analytic.extend(flat_grads(std::slice::from_ref(&pg)));

        let mut theta = flat_params(&enc);
        theta.extend(flat_params(&proj));
        let fd = finite_diff_grad(
            |t| {
                let (mut e, mut p) = (enc.clone(), proj.clone());
                let k = load_params(&mut e, t);
                load_params(&mut p, &t[k..]);
                contrastive_value(&e, &p, &x).0
            },
            &theta,
            FD_STEP,
        )
        .unwrap();
        let err = relative_error(&analytic, &fd);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn cross_entropy_backward_matches_finite_differences() {
    for seed in 0..10 {
        let (enc, _, x) = tiny_models(seed);
        let cls = Classifier::<f64>::new(3, 3, &mut SeededRng::new(seed, 4));
        let labels = [0, 2, 1, 2];
        let value = |e: &Encoder<f64>, c: &Classifier<f64>| {
            let cache = e.forward(x.clone()).unwrap();
            softmax_cross_entropy(&c.logits(cache.features()), &labels)
        };
        let cache = enc.forward(x.clone()).unwrap();
        let (_, dlogits) = value(&enc, &cls);
        let (cg, dfeat) = cls.layer().backward(cache.features(), &dlogits);
        let (eg, _) = enc.backward(&cache, &dfeat).unwrap();
        let mut analytic = flat_grads(&eg);
        analytic.extend(flat_grads(std::slice::from_ref(&cg)));

        let mut theta = flat_params(&enc);
        theta.extend(flat_params(&cls));
        let fd = finite_diff_grad(
            |t| {
                let (mut e, mut c) = (enc.clone(), cls.clone());
                let k = load_params(&mut e, t);
                load_params(&mut c, &t[k..]);
                value(&e, &c).0
            },
            &theta,
            FD_STEP,
        )
        .unwrap();
        let err = relative_error(&analytic, &fd);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (enc, proj, x) = tiny_models(1);
    let cache = embed(&enc, &proj, x).unwrap();
    let (eg, pg) = backward(&enc, &proj, &cache, &Matrix::zeros((4, 2))).unwrap();
    assert!(flat_grads(&eg)
        .iter()
        .chain(flat_grads(&[pg]).iter())
        .all(|&g| g == 0.0));
}

#[test]
fn radial_upstream_is_annihilated() {
    let (enc, proj, x) = tiny_models(2);
    let cache = embed(&enc, &proj, x).unwrap();
    let z = cache.projection.embeddings().clone();
    let (_, dfeat) = proj.backward(&cache.projection, &z).unwrap();
    assert!(dfeat.iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn stale_cache_is_rejected() {
    let (mut enc, proj, x) = tiny_models(3);
    let cache = embed(&enc, &proj, x).unwrap();
    enc.tensors_mut()[0][0] += 1.0;
    let err = backward(&enc, &proj, &cache, &Matrix::zeros((4, 2))).unwrap_err();
    assert!(matches!(err, EncoderError::StaleCache { cache, params } if params == cache + 1));
}

#[test]
fn checkpoint_round_trip() {
    let spec = InputSpec {
        frames: 2,
        height: 3,
        width: 3,
        channels: 1,
        diff_channel: true,
    };
    let mut rng = SeededRng::new(4, 0);
    let enc = Encoder::<f32>::new(spec, &[5, 4], &mut rng).unwrap();
    let proj = Projection::<f32>::new(4, 3, &mut rng);
    let cls = Classifier::<f32>::new(4, 6, &mut rng);
    let ckpt = Checkpoint::from_models(&enc, Some(&proj), Some(&cls));
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..4], b"OAPC");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.encoder().unwrap(), enc);
    assert_eq!(back.projection().unwrap(), proj);
    assert_eq!(back.classifier().unwrap(), cls);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.oapc");
    write_checkpoint(&path, &ckpt).unwrap();
    assert_eq!(read_checkpoint(&path).unwrap(), ckpt);

    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad).is_err());
}

/// Two verbs (move right, move down) over three intensity levels.
fn toy_data() -> (Vec<Clip>, Vec<usize>, Vec<usize>) {
    let mut clips = Vec::new();
    let mut verbs = Vec::new();
    let mut objects = Vec::new();
    for k in 0..24 {
        let verb = k % 2;
        let object = (k / 2) % 3;
        let level = [0.4, 0.7, 1.0][object];
        let right = translating_square(4, 8, 2, k % 8, (k / 3) % 8, level);
        let clip = if verb == 0 {
            right
        } else {
            // transpose the spatial axes: rightward motion becomes downward
            let d = right.data();
            Clip::new(Array4::from_shape_fn((4, 8, 8, 1), |(t, y, x, c)| {
                d[[t, x, y, c]]
            }))
            .unwrap()
        };
        clips.push(clip);
        verbs.push(verb);
        objects.push(object);
    }
    (clips, verbs, objects)
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 2,
        finetune_epochs: 2,
        batch_size: 8,
        hidden: vec![16, 8],
        embed_dim: 4,
        queue_size: 16,
        aug: crate::augment::AugConfig {
            guide_bag_size: 2,
            ..Default::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn degenerate_config_is_plain_supervised_contrastive() {
    let (clips, verbs, objects) = toy_data();
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: 2,
    };
    let mut cfg = small_cfg();
    cfg.pretrain_epochs = 1;
    cfg.loss.lambda = 0.0;
    cfg.aug.guide_bag_size = 0;
    let out = train_oap(&data, &cfg).unwrap();
    assert_eq!(out.log.epoch_loss.len(), 1);
    assert!(out.log.epoch_loss[0].is_finite());
}

#[test]
fn guided_loss_without_guides_is_invalid() {
    let (clips, verbs, objects) = toy_data();
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: 2,
    };
    let mut cfg = small_cfg();
    cfg.aug.guide_bag_size = 0;
    assert!(matches!(
        train_oap(&data, &cfg),
        Err(EncoderError::ConfigInvalid(_))
    ));
    cfg = small_cfg();
    cfg.batch_size = 1;
    assert!(matches!(
        train_oap(&data, &cfg),
        Err(EncoderError::ConfigInvalid(_))
    ));
}

#[test]
fn pretraining_is_deterministic() {
    let (clips, verbs, objects) = toy_data();
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: 2,
    };
    let a = train_oap(&data, &small_cfg()).unwrap();
    let b = train_oap(&data, &small_cfg()).unwrap();
    assert_eq!(a.encoder, b.encoder);
    assert_eq!(a.projection, b.projection);
    assert_eq!(a.log, b.log);
}

#[test]
fn momentum_encoder_follows_the_ema_recurrence_only() {
    let (clips, verbs, objects) = toy_data();
    let data = TrainingSet {
        clips: &clips[..8],
        verbs: &verbs[..8],
        objects: &objects[..8],
        num_verbs: 2,
    };
    let mut cfg = small_cfg();
    cfg.pretrain_epochs = 1;
    cfg.momentum = 0.9;
    let out = train_oap(&data, &cfg).unwrap();
    assert_eq!(out.log.steps, 1);
    let init = cfg.init_encoder(*out.encoder.input()).unwrap();
    let m = 0.9f32;
    for ((slow, init), fast) in out
        .momentum_encoder
        .tensors()
        .iter()
        .zip(init.tensors())
        .zip(out.encoder.tensors())
    {
        for ((s, i), f) in slow.iter().zip(init).zip(fast) {
            assert_eq!(s.to_bits(), (m * i + (1.0 - m) * f).to_bits());
        }
    }
}

#[test]
fn linear_probe_fits_separable_features() {
    // 1×2×2 clips labeled by which of the first two pixels is brighter,
    // behind an identity backbone
    let mut rng = SeededRng::new(6, 0);
    let mut clips = Vec::new();
    let mut verbs = Vec::new();
    while clips.len() < 40 {
        let v: Vec<f32> = (0..4)
            .map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0))
            .collect();
        if (v[0] - v[1]).abs() < 0.1 {
            continue;
        }
        verbs.push(usize::from(v[0] < v[1]));
        clips.push(Clip::new(Array4::from_shape_vec((1, 2, 2, 1), v).unwrap()).unwrap());
    }
    let objects = vec![0; clips.len()];
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: 2,
    };
    let mut identity = Linear::<f32>::zeros(4, 4);
    identity.weight = Matrix::eye(4);
    let mut enc = Encoder::from_layers(tiny_input(), vec![identity]).unwrap();
    let before = enc.clone();
    let cfg = TrainConfig {
        finetune_lr: 0.05,
        finetune_jitter: false,
        ..small_cfg()
    };
    let (_, log) = finetune_verb(&mut enc, &data, &cfg, FinetuneMode::LinearProbe, 200).unwrap();
    assert_eq!(enc, before);
    assert_eq!(*log.epoch_accuracy.last().unwrap(), 100.0);
}

#[test]
fn finetuning_is_deterministic() {
    let (clips, verbs, objects) = toy_data();
    let data = TrainingSet {
        clips: &clips,
        verbs: &verbs,
        objects: &objects,
        num_verbs: 2,
    };
    let cfg = small_cfg();
    let run = || {
        let mut enc = cfg
            .init_encoder(InputSpec::of_clip(&clips[0], false))
            .unwrap();
        let (cls, log) = finetune_verb(&mut enc, &data, &cfg, FinetuneMode::Full, 2).unwrap();
        (enc, cls, log)
    };
    assert_eq!(run(), run());
}

#[test]
fn multi_sample_prediction_is_mean_of_single_calls() {
    let spec = InputSpec {
        frames: 4,
        height: 8,
        width: 8,
        channels: 1,
        diff_channel: false,
    };
    let mut rng = SeededRng::new(8, 0);
    let enc = Encoder::<f32>::new(spec, &[8], &mut rng).unwrap();
    let cls = Classifier::<f32>::new(8, 3, &mut rng);
    let clip = random_clip(1, (10, 8, 8, 1));
    let four = predict_verb(&clip, &enc, &cls, 4, &mut SeededRng::new(2, 2)).unwrap();
    let mut single = SeededRng::new(2, 2);
    let mut mean = vec![0.0; 3];
    for _ in 0..4 {
        for (m, p) in mean
            .iter_mut()
            .zip(predict_verb(&clip, &enc, &cls, 1, &mut single).unwrap())
        {
            *m += p / 4.0;
        }
    }
    for (a, b) in four.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn identical_samples_average_to_themselves() {
    let spec = InputSpec {
        frames: 4,
        height: 8,
        width: 8,
        channels: 1,
        diff_channel: false,
    };
    let mut rng = SeededRng::new(8, 0);
    let enc = Encoder::<f32>::new(spec, &[8], &mut rng).unwrap();
    let cls = Classifier::<f32>::new(8, 3, &mut rng);
    let clip = random_clip(1, (4, 8, 8, 1));
    let one = predict_verb(&clip, &enc, &cls, 1, &mut SeededRng::new(0, 0)).unwrap();
    let two = predict_verb(&clip, &enc, &cls, 2, &mut SeededRng::new(0, 0)).unwrap();
    for (a, b) in one.iter().zip(&two) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(predict_verbs(&[&clip], &enc, &cls).unwrap()[0], one);
}

#[test]
fn uniform_logits_give_uniform_distribution() {
    let spec = InputSpec {
        frames: 4,
        height: 8,
        width: 8,
        channels: 1,
        diff_channel: false,
    };
    let enc = Encoder::<f32>::new(spec, &[8], &mut SeededRng::new(0, 0)).unwrap();
    let cls = Classifier::from_layer(Linear::<f32>::zeros(4, 8));
    let p = predict_verb(
        &random_clip(0, (4, 8, 8, 1)),
        &enc,
        &cls,
        1,
        &mut SeededRng::new(0, 0),
    )
    .unwrap();
    assert!(p.iter().all(|&q| (q - 0.25).abs() < 1e-12));
}
