use approx::assert_abs_diff_eq;
use ndarray::{array, Array3};
use rand::Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::numerics::{finite_diff_grad, normalize, relative_error, SeededRng};

const FD_STEP: f64 = 1e-6;

fn provider(dim: usize) -> SyntheticProvider {
    SyntheticProvider::new(SyntheticProviderConfig {
        token_dim: dim,
        embed_dim: dim,
        crop_size: 4,
        channels: 1,
        seed: 3,
    })
    .unwrap()
}

fn random_unit(rng: &mut SeededRng, dim: usize) -> Vector {
    let v: Vector = (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    normalize(v.view()).unwrap()
}

fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("obj{c}")).collect()
}

/// Four base and two novel classes with one noisy pretrained token each,
/// aligned to random image prototypes.
struct Toy {
    provider: SyntheticProvider,
    prototypes: Vec<Vector>,
    vocab: Vocabulary,
}

fn toy(seed: u64, dim: usize, token_noise: f64, m: usize) -> Toy {
    let provider = provider(dim);
    let mut rng = SeededRng::new(seed, 0);
    let prototypes: Vec<Vector> = (0..6).map(|_| random_unit(&mut rng, dim)).collect();
    let pretrained = provider
        .pretrained_tokens(&prototypes, token_noise, 1, &mut rng)
        .unwrap();
    let novel = [false, false, false, false, true, true];
    let vocab = Vocabulary::new(names(6), pretrained, &novel, m).unwrap();
    Toy {
        provider,
        prototypes,
        vocab,
    }
}

fn samples(
    toy: &Toy,
    seed: u64,
    per_class: usize,
    frames: usize,
    noise: f64,
    feature_dim: usize,
) -> Vec<PromptSample> {
    let mut rng = SeededRng::new(seed, 1);
    let dim = toy.provider.embed_dim();
    let mut out = Vec::new();
    for label in toy.vocab.base_ids() {
        for _ in 0..per_class {
            let mut f = Matrix::zeros((frames, dim));
            for mut row in f.outer_iter_mut() {
                let v = &toy.prototypes[label] + &(random_unit(&mut rng, dim) * noise);
                row.assign(&normalize(v.view()).unwrap());
            }
            let feature: Vector = (0..feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            out.push(PromptSample {
                frames: f,
                verb_feature: Some(feature),
                label,
            });
        }
    }
    out
}

fn model_for(toy: &Toy, cfg: &PromptConfig, feature_dim: usize, frames: usize) -> PromptModel {
    PromptModel::from_config(cfg, toy.vocab.clone(), feature_dim, frames).unwrap()
}

fn small_cfg() -> PromptConfig {
    PromptConfig {
        prefix_len: 2,
        postfix_len: 2,
        tokens_per_class: 2,
        context_init_std: 0.1,
        ..PromptConfig::default()
    }
}

#[test]
fn prompt_length_is_prefix_plus_words_plus_postfix() {
    let t = toy(0, 6, 0.1, 1);
    let mut rng = SeededRng::new(0, 9);
    let ctx = ContextPrompts::random(2, 1, 6, 0.1, true, &mut rng);
    assert_eq!(assemble_prompt(&t.vocab, 0, &ctx, None).unwrap().nrows(), 4);
    assert!(matches!(
        assemble_prompt(&t.vocab, 6, &ctx, None),
        Err(PromptError::UnknownClass(6))
    ));
}

#[test]
fn default_context_has_sixteen_prefix_and_postfix_vectors() {
    let cfg = PromptConfig::default();
    assert_eq!(
        (
            cfg.prefix_len,
            cfg.postfix_len,
            cfg.tokens_per_class,
            cfg.epochs
        ),
        (16, 16, 3, 20)
    );
    assert_eq!(cfg.logit_scale, 100.0);
    let t = toy(0, 6, 0.1, 3);
    let model = model_for(&t, &cfg, 32, 4);
    let seq = assemble_prompt(&model.vocab, 0, &model.context, None).unwrap();
    assert_eq!(seq.nrows(), 16 + 3 + 16);
}

#[test]
fn prompt_places_words_between_shifted_context() {
    let t = toy(0, 4, 0.1, 1);
    let ctx = ContextPrompts {
        prefix: Matrix::zeros((1, 4)),
        postfix: Matrix::ones((2, 4)),
        learnable: true,
    };
    let shift = array![1.0, 2.0, 3.0, 4.0];
    let seq = assemble_prompt(&t.vocab, 1, &ctx, Some(&shift)).unwrap();
    assert_eq!(seq.row(0), shift);
    assert_eq!(seq.row(1), t.vocab.class(1).unwrap().pretrained().row(0));
    assert_eq!(seq.row(2), &shift + 1.0);
    assert_eq!(seq.row(3), &shift + 1.0);
}

#[test]
fn zero_initialized_metanet_shifts_nothing() {
    let mut rng = SeededRng::new(1, 0);
    let net = MetaNet::new(64, 6, &mut rng);
    assert_eq!(net.hidden.out_dim(), 4);
    let ctx = ContextPrompts::random(3, 2, 6, 0.5, true, &mut rng);
    for _ in 0..5 {
        let f: Vector = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (shift, _) = net.forward(&f).unwrap();
        assert!(shift.iter().all(|&v| v == 0.0));
        assert_eq!(condition_context(&ctx, &f, &net).unwrap(), ctx);
    }
    let t = toy(0, 6, 0.1, 1);
    let (shift, _) = net.forward(&Vector::zeros(64)).unwrap();
    assert_eq!(
        assemble_prompt(&t.vocab, 2, &ctx, Some(&shift)).unwrap(),
        assemble_prompt(&t.vocab, 2, &ctx, None).unwrap()
    );
}

#[test]
fn zero_feature_through_zero_bias_network_gives_zero_shift() {
    let mut rng = SeededRng::new(2, 0);
    let mut net = MetaNet::new(32, 5, &mut rng);
    net.output.weight = random_matrix(&mut rng, 5, 2, 1.0);
    net.hidden.bias.fill(0.0);
    let (shift, _) = net.forward(&Vector::zeros(32)).unwrap();
    assert!(shift.iter().all(|&v| v == 0.0));
    assert!(matches!(
        net.forward(&Vector::zeros(31)),
        Err(PromptError::ShapeMismatch { .. })
    ));
}

#[test]
fn metanet_gradient_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = SeededRng::new(seed, 0);
        let mut net = MetaNet::new(48, 5, &mut rng);
        net.output = Linear::init(5, 3, &mut rng);
        net.hidden.bias.mapv_inplace(|_| rng.gen_range(0.05..0.5));
        let f: Vector = (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let up = random_unit(&mut rng, 5);
        let (_, cache) = net.forward(&f).unwrap();
        let (gh, go) = net.backward(&cache, &up);
        let analytic: Vec<f64> = [&gh.weight, &go.weight]
            .iter()
            .flat_map(|m| m.iter().copied())
            .chain(gh.bias.iter().copied())
            .chain(go.bias.iter().copied())
            .collect();
        let flat = |n: &MetaNet| -> Vec<f64> {
            [&n.hidden.weight, &n.output.weight]
                .iter()
                .flat_map(|m| m.iter().copied())
                .chain(n.hidden.bias.iter().copied())
                .chain(n.output.bias.iter().copied())
                .collect()
        };
        let x = flat(&net);
        let numeric = finite_diff_grad(
            |p| {
                let mut n = net.clone();
                let (a, b) = (n.hidden.weight.len(), n.output.weight.len());
                n.hidden
                    .weight
                    .iter_mut()
                    .zip(&p[..a])
                    .for_each(|(w, v)| *w = *v);
                n.output
                    .weight
                    .iter_mut()
                    .zip(&p[a..a + b])
                    .for_each(|(w, v)| *w = *v);
                let c = n.hidden.bias.len();
                n.hidden
                    .bias
                    .iter_mut()
                    .zip(&p[a + b..a + b + c])
                    .for_each(|(w, v)| *w = *v);
                n.output
                    .bias
                    .iter_mut()
                    .zip(&p[a + b + c..])
                    .for_each(|(w, v)| *w = *v);
                n.forward(&f).unwrap().0.dot(&up)
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn identical_tokens_encode_to_normalized_map_of_the_token() {
    let p = provider(6);
    let mut rng = SeededRng::new(4, 0);
    let t: Vector = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let seq = t.broadcast((5, 6)).unwrap().to_owned();
    let got = p.encode_text(&seq).unwrap();
    let want = normalize(p.text_map().dot(&t).view()).unwrap();
    for (a, b) in got.iter().zip(&want) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
    assert!(matches!(
        p.encode_text(&Matrix::zeros((0, 6))),
        Err(PromptError::EmptySequence)
    ));
}

#[test]
fn text_map_rows_are_orthonormal() {
    let p = SyntheticProvider::new(SyntheticProviderConfig {
        token_dim: 12,
        embed_dim: 5,
        ..Default::default()
    })
    .unwrap();
    let gram = p.text_map().dot(&p.text_map().t());
    for i in 0..5 {
        for j in 0..5 {
            assert_abs_diff_eq!(
                gram[[i, j]],
                if i == j { 1.0 } else { 0.0 },
                epsilon = 1e-12
            );
        }
    }
    let narrow = SyntheticProviderConfig {
        token_dim: 4,
        embed_dim: 5,
        ..Default::default()
    };
    assert!(matches!(
        SyntheticProvider::new(narrow),
        Err(PromptError::ConfigInvalid(_))
    ));
}

#[test]
fn text_gradient_matches_finite_differences() {
    let p = provider(7);
    let files = FileProvider::new(EmbTable::new(7));
    for seed in 0..10 {
        let mut rng = SeededRng::new(seed, 5);
        let seq = random_matrix(&mut rng, 4, 7, 1.0);
        let up = random_unit(&mut rng, 7);
        let providers: [&dyn EmbeddingProvider; 2] = [&p, &files];
        for prov in providers {
            let analytic = prov.text_vjp(&seq, up.view()).unwrap();
            let numeric = finite_diff_grad(
                |x| {
                    prov.encode_text(&Matrix::from_shape_vec((4, 7), x.to_vec()).unwrap())
                        .unwrap()
                        .dot(&up)
                },
                seq.as_slice().unwrap(),
                FD_STEP,
            )
            .unwrap();
            let err = relative_error(analytic.as_slice().unwrap(), &numeric);
            assert!(err < 1e-5, "seed {seed}: {err:e}");
        }
        // Token i receives the unit-norm vjp of Mᵀ·J·upstream / len at its own direction.
        let norms: Vec<f64> = seq.outer_iter().map(|r| crate::numerics::norm(r)).collect();
        let units = Matrix::from_shape_fn((4, 7), |(i, j)| seq[[i, j]] / norms[i]);
        let v = p
            .text_map()
            .dot(&units.mean_axis(ndarray::Axis(0)).unwrap());
        let z = normalize(v.view()).unwrap();
        let j = (&up - &(&z * z.dot(&up))) / crate::numerics::norm(v.view());
        let shared = p.text_map().t().dot(&j) / 4.0;
        let got = p.text_vjp(&seq, up.view()).unwrap();
        for i in 0..4 {
            let u = units.row(i);
            let want = (&shared - &(&u * u.dot(&shared))) / norms[i];
            for (a, b) in got.row(i).iter().zip(&want) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}

fn textured_frame(seed: u64, h: usize, w: usize) -> Array3<f32> {
    let mut rng = SeededRng::new(seed, 8);
    Array3::from_shape_simple_fn((h, w, 1), || rng.gen_range(0.0..1.0))
}

#[test]
fn single_crop_embeds_as_the_provider_embedding() {
    let p = provider(8);
    let frame = textured_frame(0, 12, 10);
    let obj = Region {
        x1: 2,
        y1: 3,
        x2: 7,
        y2: 9,
    };
    let set = CropSet::new("img", 12, 10, vec![obj], vec![])
        .unwrap()
        .with_pixels(frame.clone())
        .unwrap();
    let e = encode_image(&set, &p, CropStrategy::Objects).unwrap();
    assert!(!e.fell_back);
    assert_eq!(e.vector, p.encode_pixels(frame.view(), &obj).unwrap());
    let twice = CropSet::new("img", 12, 10, vec![obj, obj], vec![])
        .unwrap()
        .with_pixels(frame)
        .unwrap();
    let e2 = encode_image(&twice, &p, CropStrategy::Objects).unwrap();
    for (a, b) in e2.vector.iter().zip(&e.vector) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

fn unit_table() -> EmbTable {
    let mut t = EmbTable::new(3);
    t.push("a#0", vec![0.0, 0.0, 1.0]).unwrap();
    t.push("a#1", vec![1.0, 0.0, 0.0]).unwrap();
    t.push("a#2", vec![0.0, 1.0, 0.0]).unwrap();
    t.push("a#3", vec![0.0, 0.0, 1.0]).unwrap();
    t
}

#[test]
fn orthogonal_crops_average_to_the_diagonal() {
    let p = FileProvider::new(unit_table());
    let boxes = vec![
        Region {
            x1: 0,
            y1: 0,
            x2: 2,
            y2: 2,
        },
        Region {
            x1: 2,
            y1: 2,
            x2: 4,
            y2: 4,
        },
    ];
    let set = CropSet::new("a", 4, 4, boxes, vec![]).unwrap();
    let e = encode_image(&set, &p, CropStrategy::Objects).unwrap();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    assert_abs_diff_eq!(e.vector[0], h, epsilon = 1e-12);
    assert_abs_diff_eq!(e.vector[1], h, epsilon = 1e-12);
    assert_abs_diff_eq!(e.vector[2], 0.0, epsilon = 1e-12);
}

#[test]
fn missing_crops_fall_back_to_the_full_frame() {
    let p = FileProvider::new(unit_table());
    let set = CropSet::new("a", 4, 4, vec![], vec![]).unwrap();
    for strategy in CropStrategy::ALL {
        let e = encode_image(&set, &p, strategy).unwrap();
        assert_eq!(e.fell_back, strategy != CropStrategy::Full);
        assert_eq!(e.vector, array![0.0, 0.0, 1.0]);
    }
}

#[test]
fn crops_follow_the_canonical_order() {
    let obj = Region {
        x1: 1,
        y1: 1,
        x2: 3,
        y2: 3,
    };
    let hand = Region {
        x1: 2,
        y1: 0,
        x2: 4,
        y2: 2,
    };
    let set = CropSet::new("x", 4, 5, vec![obj], vec![hand]).unwrap();
    let kinds: Vec<_> = set.crops().iter().map(|c| (c.index, c.kind)).collect();
    assert_eq!(
        kinds,
        vec![
            (0, CropKind::Full),
            (1, CropKind::Object),
            (2, CropKind::Hand),
            (3, CropKind::Union)
        ]
    );
    assert_eq!(
        set.crops()[3].region,
        Region {
            x1: 1,
            y1: 0,
            x2: 4,
            y2: 3
        }
    );
    let (sel, fb) = set.select(CropStrategy::ObjectsHandsFull);
    assert!(!fb);
    assert_eq!(sel.iter().map(|c| c.index).collect::<Vec<_>>(), vec![3, 0]);
    let outside = Region {
        x1: 0,
        y1: 0,
        x2: 6,
        y2: 1,
    };
    assert!(matches!(
        CropSet::new("x", 4, 5, vec![outside], vec![]),
        Err(PromptError::InvalidCrop(_))
    ));
    for s in CropStrategy::ALL {
        assert_eq!(s.as_str().parse::<CropStrategy>().unwrap(), s);
    }
}

#[test]
fn crop_sets_take_boxes_of_their_frame() {
    use crate::bench::{BoxKind, CropBox};
    let frame = textured_frame(1, 8, 8);
    let boxes = [
        CropBox {
            frame: 0,
            x1: 0.5,
            y1: 1.0,
            x2: 3.2,
            y2: 4.0,
            kind: BoxKind::Object,
        },
        CropBox {
            frame: 1,
            x1: 0.0,
            y1: 0.0,
            x2: 2.0,
            y2: 2.0,
            kind: BoxKind::Object,
        },
        CropBox {
            frame: 0,
            x1: 5.0,
            y1: 5.0,
            x2: 9.0,
            y2: 9.0,
            kind: BoxKind::Hand,
        },
    ];
    let set = CropSet::from_frame("f0", frame.view(), 0, &boxes).unwrap();
    let regions: Vec<_> = set.crops().iter().map(|c| c.region).collect();
    assert_eq!(
        regions[1],
        Region {
            x1: 0,
            y1: 1,
            x2: 4,
            y2: 4
        }
    );
    assert_eq!(
        regions[2],
        Region {
            x1: 5,
            y1: 5,
            x2: 8,
            y2: 8
        }
    );
    assert_eq!(regions.len(), 4);
}

#[test]
fn matching_class_wins_and_uniform_similarity_gives_uniform_scores() {
    let t = toy(0, 6, 0.0, 1);
    let cfg = PromptConfig {
        prefix_len: 0,
        postfix_len: 0,
        tokens_per_class: 1,
        verb_conditioned: false,
        ..Default::default()
    };
    let model = model_for(&t, &cfg, 8, 1);
    // With no context and zero token noise, class c's text embedding is its prototype.
    for c in 0..6 {
        let frames = t.prototypes[c].clone().insert_axis(ndarray::Axis(0));
        let p = classify_embedded(&model, &t.provider, &frames, None).unwrap();
        let best = (0..6).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(best, c);
        assert!(p[c] > 0.5);
    }
    let p = FileProvider::new(EmbTable::new(3));
    let vocab = Vocabulary::new(
        names(3),
        vec![
            array![[1.0, 0.0, 0.0]],
            array![[0.0, 1.0, 0.0]],
            array![[0.0, 0.0, 1.0]],
        ],
        &[false, false, true],
        1,
    )
    .unwrap();
    let ctx = ContextPrompts {
        prefix: Matrix::zeros((0, 3)),
        postfix: Matrix::zeros((0, 3)),
        learnable: false,
    };
    let model = PromptModel::new(vocab, ctx, None, None, 100.0).unwrap();
    let d = 1.0 / 3f64.sqrt();
    let probs = classify_embedded(&model, &p, &array![[d, d, d]], None).unwrap();
    for v in probs.iter() {
        assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
    }
}

#[test]
fn frame_averaged_scores_are_the_mean_of_per_frame_scores() {
    let t = toy(1, 6, 0.3, 2);
    let model = model_for(&t, &small_cfg(), 16, 5);
    let data = samples(&t, 2, 1, 5, 1.0, 16);
    for s in &data {
        let all =
            classify_embedded(&model, &t.provider, &s.frames, s.verb_feature.as_ref()).unwrap();
        // Per-frame log-probabilities differ from per-frame scores by a constant,
        // so their mean re-softmaxed is the softmax of the mean score.
        let mut mean_log = Vector::zeros(6);
        for f in s.frames.outer_iter() {
            let one = f.to_owned().insert_axis(ndarray::Axis(0));
            let p = classify_embedded(&model, &t.provider, &one, s.verb_feature.as_ref()).unwrap();
            mean_log += &(p.mapv(f64::ln) / 5.0);
        }
        let want = crate::numerics::softmax(mean_log.as_slice().unwrap());
        for (a, b) in all.iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }
}

#[test]
fn zero_initialized_conditioning_leaves_scores_unchanged() {
    let t = toy(2, 6, 0.3, 2);
    let model = model_for(&t, &small_cfg(), 16, 3);
    for s in samples(&t, 3, 2, 3, 0.5, 16) {
        let with =
            classify_embedded(&model, &t.provider, &s.frames, s.verb_feature.as_ref()).unwrap();
        let without = classify_embedded(&model, &t.provider, &s.frames, None).unwrap();
        assert_eq!(with, without);
    }
}

/// Trainable parameters of a model in the order the training loop uses.
fn flatten(model: &PromptModel) -> Vec<f64> {
    let mut out: Vec<f64> = model
        .vocab
        .classes()
        .iter()
        .filter_map(|c| c.learned())
        .flat_map(|m| m.iter().copied())
        .collect();
    out.extend(
        model
            .context
            .prefix
            .iter()
            .chain(model.context.postfix.iter()),
    );
    if let Some(n) = &model.metanet {
        for l in [&n.hidden, &n.output] {
            out.extend(l.weight.iter().chain(l.bias.iter()));
        }
    }
    if let Some(a) = &model.frame_attention {
        out.extend(a.iter());
    }
    out
}

fn unflatten(model: &mut PromptModel, x: &[f64]) {
    let mut it = x.iter().copied();
    for m in model.vocab.learned_tokens_mut() {
        m.iter_mut().for_each(|v| *v = it.next().unwrap());
    }
    model
        .context
        .prefix
        .iter_mut()
        .chain(model.context.postfix.iter_mut())
        .for_each(|v| *v = it.next().unwrap());
    if let Some(n) = &mut model.metanet {
        for l in [&mut n.hidden, &mut n.output] {
            l.weight
                .iter_mut()
                .chain(l.bias.iter_mut())
                .for_each(|v| *v = it.next().unwrap());
        }
    }
    if let Some(a) = &mut model.frame_attention {
        a.iter_mut().for_each(|v| *v = it.next().unwrap());
    }
    assert!(it.next().is_none());
}

fn flatten_grads(g: &PromptGrads) -> Vec<f64> {
    let mut out: Vec<f64> = g
        .vocab
        .iter()
        .flatten()
        .flat_map(|m| m.iter().copied())
        .collect();
    out.extend(g.prefix.iter().chain(g.postfix.iter()));
    if let Some((h, o)) = &g.metanet {
        for l in [h, o] {
            out.extend(l.weight.iter().chain(l.bias.iter()));
        }
    }
    if let Some(a) = &g.frame_attention {
        out.extend(a.iter());
    }
    out
}

#[test]
fn prompt_loss_gradient_matches_finite_differences() {
    for seed in 0..4 {
        let t = toy(seed, 6, 0.5, 2);
        let cfg = PromptConfig {
            temporal: true,
            logit_scale: 10.0,
            ..small_cfg()
        };
        let mut model = model_for(&t, &cfg, 32, 3);
        let mut rng = SeededRng::new(seed, 77);
        let net = model.metanet.as_mut().unwrap();
        net.output = Linear::init(6, 2, &mut rng);
        net.hidden.bias.mapv_inplace(|_| rng.gen_range(0.1..0.5));
        model.frame_attention = Some((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let data = samples(&t, seed, 2, 3, 0.8, 32);
        let (_, grads) = base_loss(&model, &t.provider, &data).unwrap();
        let x = flatten(&model);
        let numeric = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                unflatten(&mut m, p);
                base_loss(&m, &t.provider, &data).unwrap().0
            },
            &x,
            FD_STEP,
        )
        .unwrap();
        let err = relative_error(&flatten_grads(&grads), &numeric);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn training_with_nothing_learnable_keeps_the_loss_constant() {
    let t = toy(3, 6, 0.5, 2);
    let cfg = PromptConfig {
        learn_context: false,
        learn_vocab: false,
        verb_conditioned: false,
        epochs: 4,
        lr: 0.1,
        ..small_cfg()
    };
    let mut model = model_for(&t, &cfg, 8, 2);
    let before = model.clone();
    let log = train_prompts(
        &mut model,
        &samples(&t, 4, 10, 2, 0.5, 8),
        &t.provider,
        &cfg,
    )
    .unwrap();
    assert!(
        log.epoch_loss.windows(2).all(|w| w[0] == w[1]),
        "{:?}",
        log.epoch_loss
    );
    assert_eq!(model, before);
}

#[test]
fn training_rejects_novel_labels() {
    let t = toy(4, 6, 0.5, 2);
    let cfg = small_cfg();
    let mut model = model_for(&t, &cfg, 8, 2);
    let mut data = samples(&t, 5, 2, 2, 0.5, 8);
    data[3].label = 5;
    match train_prompts(&mut model, &data, &t.provider, &cfg) {
        Err(PromptError::NovelLabelInTraining { sample: 3, class }) => assert_eq!(class, "obj5"),
        other => panic!("expected NovelLabelInTraining, got {other:?}"),
    }
}

#[test]
fn training_improves_base_accuracy_and_freezes_provider_and_novel_tokens() {
    let t = toy(5, 8, 1.2, 2);
    let cfg = PromptConfig {
        epochs: 10,
        lr: 0.01,
        batch_size: 16,
        warmup_epochs: 0,
        ..small_cfg()
    };
    let mut model = model_for(&t, &cfg, 8, 2);
    let data = samples(&t, 6, 60, 2, 1.0, 8);
    let digest = t.provider.digest();
    let snapshot = t.provider.clone();
    let novel_before: Vec<Matrix> = t
        .vocab
        .novel_ids()
        .iter()
        .map(|&c| t.vocab.class(c).unwrap().tokens().clone())
        .collect();
    let log = train_prompts(&mut model, &data, &t.provider, &cfg).unwrap();
    assert!(
        log.epoch_accuracy[..5].windows(2).all(|w| w[1] > w[0]),
        "{:?}",
        log.epoch_accuracy
    );
    assert_eq!(t.provider.digest(), digest);
    assert_eq!(t.provider, snapshot);
    for (k, &c) in model.vocab.novel_ids().iter().enumerate() {
        let class = model.vocab.class(c).unwrap();
        assert!(class.learned().is_none());
        assert_eq!(class.tokens(), &novel_before[k]);
    }
}

#[test]
fn prompt_model_round_trips_through_json() {
    let t = toy(6, 6, 0.5, 2);
    let model = model_for(
        &t,
        &PromptConfig {
            temporal: true,
            ..small_cfg()
        },
        32,
        4,
    );
    assert_eq!(
        PromptModel::from_json(&model.to_json().unwrap()).unwrap(),
        model
    );
}

#[test]
fn ensemble_examples() {
    let novel = vec![false, true];
    let cfg = EnsembleConfig::new(0.56, novel.clone()).unwrap();
    let p = ensemble(&[0.5, 0.5], &[0.3, 0.7], &cfg).unwrap();
    assert_abs_diff_eq!(p[0], 0.412, epsilon = 1e-15);
    assert_abs_diff_eq!(p[1], 0.44 * 0.5 + 0.56 * 0.7, epsilon = 1e-15);
    let half = ensemble(
        &[0.2, 0.8],
        &[0.6, 0.4],
        &EnsembleConfig::new(0.5, novel.clone()).unwrap(),
    )
    .unwrap();
    assert_abs_diff_eq!(half[0], 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(half[1], 0.6, epsilon = 1e-15);
    let one = ensemble(
        &[0.2, 0.8],
        &[0.6, 0.4],
        &EnsembleConfig::new(1.0, novel.clone()).unwrap(),
    )
    .unwrap();
    assert_eq!(one, array![0.2, 0.4]);
    assert!(matches!(
        ensemble(&[1.0], &[0.3, 0.7], &cfg),
        Err(PromptError::ClassAxisMismatch { .. })
    ));
    assert!(EnsembleConfig::new(1.5, novel).is_err());
}

#[test]
fn emb_table_round_trips_and_rejects_damage() {
    let mut t = EmbTable::new(2);
    t.push("ünï", vec![1.5, -2.0]).unwrap();
    t.push("b#0", vec![f32::MIN_POSITIVE, 3.0]).unwrap();
    let bytes = t.to_bytes();
    assert_eq!(&bytes[..4], b"EMB1");
    assert_eq!(bytes.len(), 4 + 2 + 1 + 4 + 4 + (2 + 5 + 8) + (2 + 3 + 8));
    assert_eq!(EmbTable::from_bytes(&bytes).unwrap(), t);
    assert!(EmbTable::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(EmbTable::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(EmbTable::from_bytes(&magic).is_err());
    assert!(matches!(
        t.push("c", vec![1.0]),
        Err(PromptError::ShapeMismatch { .. })
    ));
    let empty = EmbTable::new(7);
    assert_eq!(EmbTable::from_bytes(&empty.to_bytes()).unwrap().dim(), 7);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.emb");
    write_emb(&path, &t).unwrap();
    assert_eq!(read_emb(&path).unwrap(), t);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn token_table_initializes_a_vocabulary() {
    let mut t = EmbTable::new(2);
    t.push("cup", vec![1.0, 0.0]).unwrap();
    t.push("kitchen#0", vec![0.0, 1.0]).unwrap();
    t.push("kitchen#1", vec![0.5, 0.5]).unwrap();
    let names = vec!["cup".to_string(), "kitchen".to_string()];
    let v = Vocabulary::from_token_table(&t, &names, &[false, true], 3).unwrap();
    assert_eq!(
        v.class(0).unwrap().learned().unwrap(),
        &array![[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]
    );
    assert_eq!(
        v.class(1).unwrap().pretrained(),
        &array![[0.0, 1.0], [0.5, 0.5]]
    );
    assert_eq!(
        v.class(1).unwrap().tokens(),
        &array![[0.0, 1.0], [0.5, 0.5], [0.0, 1.0]]
    );
    assert_eq!(v.base_ids(), vec![0]);
    let missing = Vocabulary::from_token_table(&t, &["pan".to_string()], &[false], 1);
    assert!(matches!(missing, Err(PromptError::MissingToken(n)) if n == "pan"));
}

mod properties {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn embeddings_are_unit_norm(seed in 0u64..1000, len in 1usize..6) {
            let p = provider(6);
            let mut rng = SeededRng::new(seed, 0);
            let seq = random_matrix(&mut rng, len, 6, 1.0);
            let e = p.encode_text(&seq).unwrap();
            prop_assert!((crate::numerics::norm(e.view()) - 1.0).abs() < 1e-6);
            let frame = textured_frame(seed, 9, 7);
            let r = Region { x1: rng.gen_range(0..3), y1: rng.gen_range(0..4), x2: rng.gen_range(4..8), y2: rng.gen_range(5..10) };
            let e = p.encode_pixels(frame.view(), &r).unwrap();
            prop_assert!((crate::numerics::norm(e.view()) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn ensemble_is_affine_and_symmetric_at_one_half(
            seed in 0u64..1000,
            n in 1usize..8,
            gamma in 0.0f64..=1.0,
            t in -2.0f64..2.0,
        ) {
            let mut rng = SeededRng::new(seed, 1);
            let mut draw = || (0..n).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>();
            let (a, b, c) = (draw(), draw(), draw());
            let novel: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
            let cfg = EnsembleConfig::new(gamma, novel.clone()).unwrap();
            let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
            let lhs = ensemble(&mix, &c, &cfg).unwrap();
            let rhs = ensemble(&a, &c, &cfg).unwrap() * t + ensemble(&b, &c, &cfg).unwrap() * (1.0 - t);
            for (x, y) in lhs.iter().zip(&rhs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let half = EnsembleConfig::new(0.5, novel).unwrap();
            prop_assert_eq!(ensemble(&a, &b, &half).unwrap(), ensemble(&b, &a, &half).unwrap());
        }
    }
}
