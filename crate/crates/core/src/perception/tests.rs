use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_corpus, generate_sample, CorpusConfig};
use crate::numcore::gradcheck::{gradcheck, GradcheckConfig};
use crate::numcore::layers::uniform;
use crate::numcore::Tensor;

fn net(prefix: &str, seed: u64) -> (PoseNet, ParamStore) {
    let net = PoseNet::new(prefix, PoseNetConfig::default()).unwrap();
    let mut s = ParamStore::new();
    net.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
    (net, s)
}

fn image(seed: u64, side: usize) -> Tensor {
    uniform(&[side, side, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn loss_value(net: &PoseNet, s: &ParamStore, a: &Tensor, b: &Tensor) -> f32 {
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = pose_perception_loss(&mut tape, s, net, x, y).unwrap();
    tape.value(l).item()
}

#[test]
fn perception_loss_is_zero_on_equal_images_and_symmetric() {
    let (n, s) = net(POSENET_PREFIX, 1);
    let (a, b) = (image(2, 32), image(3, 32));
    assert_eq!(loss_value(&n, &s, &a, &a), 0.0);
    let (ab, ba) = (loss_value(&n, &s, &a, &b), loss_value(&n, &s, &b, &a));
    assert!(ab > 0.0);
    assert_eq!(ab, ba);
}

#[test]
fn constant_channel_offset_costs_its_square() {
    let a = uniform::<f32>(&[4, 4, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let mut b = a.clone();
    for (i, v) in b.data_mut().iter_mut().enumerate() {
        if i % 5 == 2 {
            *v += 0.75;
        }
    }
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a), tape.constant(b));
    let l = feature_distance(&mut tape, x, y).unwrap();
    assert!((tape.value(l).item() - 0.5625).abs() < 1e-6);
}

#[test]
fn perception_loss_matches_double_loop_oracle() {
    let (n, s) = net(POSENET_PREFIX, 5);
    let (a, b) = (image(6, 32), image(7, 32));
    let feats = |img: &Tensor| {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let f = n.features(&mut tape, &s, x).unwrap();
        tape.value(f).clone()
    };
    let (fa, fb) = (feats(&a), feats(&b));
    let (h, w, c) = fa.grid_dims().unwrap();
    let mut total = 0.0f64;
    for i in 0..h {
        for j in 0..w {
            let mut sq = 0.0f64;
            for k in 0..c {
                let d = fa.at(&[i, j, k]) as f64 - fb.at(&[i, j, k]) as f64;
                sq += d * d;
            }
            total += sq;
        }
    }
    let oracle = total / (h * w) as f64;
    let got = loss_value(&n, &s, &a, &b) as f64;
    assert!((got - oracle).abs() <= 1e-6 * oracle.max(1.0), "{got} vs {oracle}");
}

#[test]
fn perception_loss_rejects_mismatched_images() {
    let (n, s) = net(POSENET_PREFIX, 1);
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(image(1, 32)), tape.constant(image(1, 16)));
    assert!(pose_perception_loss(&mut tape, &s, &n, x, y).is_err());
}

#[test]
fn perception_loss_gradient_wrt_generated_image() {
    let n = PoseNet::new(POSENET_PREFIX, PoseNetConfig::default()).unwrap();
    let mut s = ParamStore::<f64>::new();
    n.init(&mut s, &mut ChaCha8Rng::seed_from_u64(8), false).unwrap();
    s.insert("gen", image(9, 16).cast(), true).unwrap();
    let reference: Tensor<f64> = image(10, 16).cast();
    let cfg = GradcheckConfig {
        fraction: 0.05,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(
        &s,
        |tape, st| {
            let g = tape.param(st, "gen")?;
            let r = tape.constant(reference.clone());
            pose_perception_loss(tape, st, &n, g, r)
        },
        &cfg,
    )
    .unwrap();
    assert!(report.passed(), "{}", report.render());
    assert_eq!(report.checked(), (16 * 16 * 3) / 20 + 1);
}

#[test]
fn posenet_weights_pass_gradcheck() {
    let n = PoseNet::new(
        POSENET_PREFIX,
        PoseNetConfig {
            channels: [4, 6, 8],
            ..PoseNetConfig::default()
        },
    )
    .unwrap();
    let mut s = ParamStore::<f64>::new();
    n.init(&mut s, &mut ChaCha8Rng::seed_from_u64(11), true).unwrap();
    let img: Tensor<f64> = image(12, 16).cast();
    let target: Tensor<f64> = uniform(&[8, 8, 9], 1.0, &mut ChaCha8Rng::seed_from_u64(13));
    let report = gradcheck(
        &s,
        |tape, st| {
            let x = tape.constant(img.clone());
            let out = n.forward(tape, st, x)?;
            let feat = tape.sum_squares(out.stages[2]);
            let y = tape.constant(target.clone());
            let hm = tape.mse(out.heatmaps, y)?;
            tape.add(feat, hm)
        },
        &GradcheckConfig::default(),
    )
    .unwrap();
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn total_loss_examples() {
    let cfg = LossConfig::last_epochs(0.01, 20, 5).unwrap();
    assert_eq!(cfg.activation_epoch, 15);
    assert!((total_loss(1.0, 2.0, &cfg, 15) - 1.02).abs() < 1e-7);
    assert_eq!(total_loss(1.0, 2.0, &cfg, 14), 1.0);
    assert_eq!(total_loss(1.0, 1e9, &cfg, 0), 1.0);
    let off = LossConfig::last_epochs(0.0, 20, 5).unwrap();
    for e in 0..20 {
        assert_eq!(total_loss(0.7, 3.0, &off, e), 0.7);
        assert!(!off.active(e));
    }
    let active: Vec<usize> = (0..20).filter(|&e| cfg.active(e)).collect();
    assert_eq!(active, vec![15, 16, 17, 18, 19]);
    assert!(LossConfig::last_epochs(0.01, 3, 5).is_err());
    assert!(LossConfig::last_epochs(-1.0, 20, 5).is_err());
}

#[test]
fn ground_truth_heatmaps_decode_to_full_pck() {
    for s in generate_corpus(3, 50, &CorpusConfig::default()).unwrap() {
        let hm = heatmap_targets(&s.keypoints, 16, 1.0).unwrap();
        let pred = decode_heatmaps(&hm).unwrap();
        assert_eq!(crate::data::compute_pck(&pred, &s.keypoints, 0.1).unwrap(), 1.0);
        assert!(crate::data::mean_keypoint_error(&pred, &s.keypoints).unwrap() < 0.02);
    }
}

#[test]
fn heatmap_modes_count_figures() {
    let two = CorpusConfig {
        two_figure_prob: 1.0,
        ..CorpusConfig::default()
    };
    let s = generate_sample(4, 1, &two);
    let hm = heatmap_targets(&s.keypoints, 16, 1.0).unwrap();
    assert_eq!(count_modes(&hm, 0, 0.5).unwrap(), 2);
    let one = generate_sample(4, 1, &CorpusConfig::default());
    let hm = heatmap_targets(&one.keypoints, 16, 1.0).unwrap();
    assert_eq!(count_modes(&hm, 0, 0.5).unwrap(), 1);
}

#[test]
fn untrained_posenet_is_below_threshold() {
    let (n, s) = net(POSENET_PREFIX, 14);
    let corpus = generate_corpus(15, 40, &CorpusConfig::default()).unwrap();
    let pck = evaluate_pck(&n, &s, &corpus, 0.1).unwrap();
    assert!(pck < 0.9, "{pck}");
}

#[test]
fn failed_training_reports_its_curve() {
    let n = PoseNet::new(POSENET_PREFIX, PoseNetConfig::default()).unwrap();
    let mut s = ParamStore::new();
    n.init(&mut s, &mut ChaCha8Rng::seed_from_u64(16), false).unwrap();
    let corpus = generate_corpus(17, 8, &CorpusConfig::default()).unwrap();
    let cfg = PoseTrainConfig {
        epochs: 2,
        batch: 4,
        ..PoseTrainConfig::default()
    };
    match train_posenet(&n, &mut s, &corpus[..4], &corpus[4..], &cfg) {
        Err(crate::Error::NotConverged(msg)) => assert!(msg.contains("epoch,loss,pck\n0,"), "{msg}"),
        other => panic!("expected NotConverged, got {other:?}"),
    }
    assert!(s.names().all(|k| !s.is_trainable(k)));
}
