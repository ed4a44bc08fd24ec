mod common;

use common::{column_variance, downstream, nearest, pretrained, relative_error, FD_STEP};
use damvp_core::adapt::{adapt, baseline_vp, build_partition, evaluate, prompt_loss_grad, zero_shot, AdaptConfig};
use damvp_core::cluster::{agglomerate, calibrate_threshold, cut, probe_indices, prototypes, FeatureMatrix};
use damvp_core::data::{generate_modemix, ImageDataset, SyntheticSpec};
use damvp_core::diversity::{diversity_score, DiversityMetric};
use damvp_core::encoder::{argmax, head_accuracy, pretrain, EncoderWeights, FrozenEncoder, PretrainConfig, INFER_BATCH};
use damvp_core::head::{build_head, HeadMode, LogitMap};
use damvp_core::meta::{build_groups, inner_update, meta_train, sample_meta_batch, MetaConfig, MetaPrompt};
use damvp_core::prompt::{FrameSpec, PromptBundle, PromptFrame};
use damvp_core::rng;
use damvp_core::tensor::NdArray;

fn active(k: usize) -> HeadMode {
    HeadMode::Active { k, noise_count: 256, seed: 0 }
}

fn frame() -> FrameSpec {
    FrameSpec::scaled(3, 32, 32).unwrap()
}

fn cfg(tau: Option<f64>, epochs: usize, seed: u64) -> AdaptConfig {
    AdaptConfig {
        epochs,
        tau,
        seed,
        ..Default::default()
    }
}

#[test]
fn pretraining_separates_single_mode_classes() {
    let d = downstream(1, 0);
    let c = PretrainConfig { head_dim: 2, ..Default::default() };
    let (enc, report) = pretrain(&d.train, &c).unwrap();
    assert!(report.train_accuracy > 0.95, "{}", report.train_accuracy);
    assert!(head_accuracy(&enc, &d.train).unwrap() > 0.95);
    assert_eq!(pretrain(&d.train, &c).unwrap().0.fingerprint(), enc.fingerprint());
    assert!(pretrain(&d.train, &PretrainConfig { epochs: 0, ..c }).is_err());
}

#[test]
fn features_are_pure_and_anchor_at_zero() {
    let enc = &pretrained().encoder;
    let zero = NdArray::zeros(&[3, 32, 32]).unwrap();
    assert!(enc.forward_features(&zero).unwrap().bit_eq(enc.zero_response()));
    let x = NdArray::randn(&[3, 32, 32], 4).unwrap();
    let f = enc.forward_features(&x).unwrap();
    assert_eq!(f.dims(), &[64]);
    assert!(f.bit_eq(&enc.forward_features(&x).unwrap()));
    assert!(enc.forward_features(&NdArray::zeros(&[3, 16, 16]).unwrap()).is_err());
}

/// Same noise stream, features taken one image at a time, variance by the
/// two-pass formula.
#[test]
fn probe_variance_matches_two_pass_oracle() {
    let enc = &pretrained().encoder;
    let (count, seed) = (100, 5);
    let mut r = rng::stream(seed, "probe-noise", 0);
    let mut rows = Vec::new();
    let mut left = count;
    while left > 0 {
        let b = left.min(INFER_BATCH);
        let noise = NdArray::randn_with(&[b, 3, 32, 32], &mut r).unwrap();
        for i in 0..b {
            rows.push(enc.forward_features(&noise.slab(i).unwrap()).unwrap().to_vec());
        }
        left -= b;
    }
    let got = enc.probe_channel_variance(count, seed).unwrap();
    let want = column_variance(&rows);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-10 * w.abs(), "{g} vs {w}");
    }
    assert_eq!(got, enc.probe_channel_variance(count, seed).unwrap());
}

#[test]
fn dead_feature_channel_has_zero_variance() {
    let enc = FrozenEncoder::random(Default::default(), 2).unwrap();
    let mut layers = enc.weights().layers().to_vec();
    let w = &layers[4];
    let cols = w.dims()[1];
    let mut data = w.to_vec();
    data[3 * cols..4 * cols].iter_mut().for_each(|v| *v = 0.0);
    layers[4] = NdArray::from_vec(w.dims(), data).unwrap();
    let dead = FrozenEncoder::from_weights(*enc.spec(), EncoderWeights::new(layers)).unwrap();
    assert_eq!(dead.probe_channel_variance(16, 0).unwrap()[3], 0.0);
}

#[test]
fn head_mappings() {
    let enc = &pretrained().encoder;
    assert_eq!(build_head(enc, &HeadMode::HardCoded { k: 4 }, 0).unwrap(), LogitMap::HardCoded { channels: vec![0, 1, 2, 3] });
    let a = build_head(enc, &active(8), 0).unwrap();
    assert_eq!(a, build_head(enc, &active(8), 0).unwrap());
    assert!(build_head(enc, &HeadMode::Freezing { k: 17 }, 0).is_err());
    assert!(build_head(enc, &HeadMode::HardCoded { k: 0 }, 0).is_err());
}

#[test]
fn calibration_is_deterministic() {
    let p = pretrained();
    let tau = calibrate_threshold(&p.encoder, &common::reference(), 1000, 1.25, 0).unwrap();
    assert_eq!(tau.to_bits(), p.tau.to_bits());
    let img = NdArray::full(&[3, 32, 32], 0.3).unwrap();
    let same = ImageDataset::new("flat", vec![img; 6], vec![0; 6], 1, [3, 32, 32]).unwrap();
    assert!(calibrate_threshold(&p.encoder, &same, 1000, 0.8, 0).unwrap() <= 0.8 * 1e-3);
}

#[test]
fn single_mode_data_is_one_subset_and_eight_modes_split() {
    let p = pretrained();
    for seed in 0..3 {
        let one = downstream(1, seed);
        let (protos, assignment) = build_partition(&one.train, &p.encoder, Some(p.tau), None, 1000, seed).unwrap();
        assert_eq!(protos.len(), 1);
        assert_eq!(assignment.sizes(), vec![one.train.len()]);
        let eight = downstream(8, seed);
        let (protos, assignment) = build_partition(&eight.train, &p.encoder, Some(p.tau), None, 1000, seed).unwrap();
        assert!(protos.len() >= 4, "seed {seed}: {}", protos.len());
        assert_eq!(assignment.sizes().iter().sum::<usize>(), eight.train.len());
    }
}

/// Routing a clustered probe set back against its own centroids mostly
/// reproduces the clustering.
#[test]
fn partition_consistent_with_probe_clusters() {
    let p = pretrained();
    let d = downstream(4, 0);
    let feats = FeatureMatrix::from_encoder(&p.encoder, &d.train, &probe_indices(d.train.len(), 1000, 0)).unwrap();
    let c = cut(&agglomerate(&feats).unwrap(), p.tau, Some(d.train.num_classes())).unwrap();
    let protos = prototypes(&feats, &c).unwrap();
    let agree = (0..feats.rows()).filter(|&i| nearest(feats.row(i), &protos.centroids) == c.labels[i]).count();
    assert!(agree as f64 >= 0.95 * feats.rows() as f64, "{agree}/{}", feats.rows());
}

#[test]
fn unbounded_threshold_is_the_baseline() {
    let p = pretrained();
    let d = downstream(2, 3);
    let c = cfg(None, 2, 1);
    let (a, ma) = adapt(&d.train, &[&d.val], &p.encoder, None, &c, &active(4)).unwrap();
    let (b, mb) = baseline_vp(&d.train, &[&d.val], &p.encoder, &c, &active(4)).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_eq!(a.len(), 1);
    assert_eq!(ma.records.len(), mb.records.len());
}

#[test]
fn adaptation_leaves_encoder_untouched() {
    let p = pretrained();
    let before = p.encoder.weights().to_bytes();
    let d = downstream(4, 1);
    adapt(&d.train, &[&d.val], &p.encoder, None, &cfg(Some(p.tau), 1, 0), &HeadMode::Tuning { k: 8 }).unwrap();
    assert_eq!(p.encoder.weights().to_bytes(), before);
    assert!(p.encoder.is_frozen());
}

#[test]
fn evaluation_is_deterministic_and_routes_everything() {
    let p = pretrained();
    let d = downstream(4, 2);
    let (bundle, _) = adapt(&d.train, &[], &p.encoder, None, &cfg(Some(p.tau), 2, 0), &active(8)).unwrap();
    let e1 = evaluate(&d.test, &bundle, &p.encoder).unwrap();
    let e2 = evaluate(&d.test, &bundle, &p.encoder).unwrap();
    assert_eq!(e1, e2);
    assert_eq!(e1.routed.iter().sum::<usize>(), d.test.len());
    assert_eq!(e1.routed.len(), bundle.len());
    let other = FrozenEncoder::random(Default::default(), 9).unwrap();
    assert_eq!(evaluate(&d.test, &bundle, &other).unwrap_err().kind(), "fingerprint_mismatch");
}

/// With a zero prompt, evaluation of a tuning head is a plain linear probe.
#[test]
fn zero_prompt_tuning_head_is_linear_probe() {
    let p = pretrained();
    let d = downstream(2, 4);
    let head = build_head(&p.encoder, &HeadMode::Tuning { k: 4 }, 3).unwrap();
    let LogitMap::Tuning { weight, bias } = &head else { unreachable!() };
    let feats = p.encoder.dataset_features(&d.test).unwrap();
    let hits = feats
        .iter()
        .zip(d.test.labels())
        .filter(|(f, &y)| {
            let logits: Vec<f64> = (0..4)
                .map(|k| bias.data()[k] + (0..f.len()).map(|j| weight.data()[k * f.len() + j] * f[j]).sum::<f64>())
                .collect();
            argmax(&logits) == y
        })
        .count();
    let probe = hits as f64 / d.test.len() as f64;
    assert_eq!(zero_shot(&d.test, &p.encoder, &head).unwrap().top1, probe);
}

#[test]
fn prompts_beat_zero_shot_on_eight_modes() {
    let p = pretrained();
    let d = downstream(8, 0);
    let head = build_head(&p.encoder, &active(16), 0).unwrap();
    let before = zero_shot(&d.test, &p.encoder, &head).unwrap().top1;
    let (bundle, _) = adapt(&d.train, &[], &p.encoder, None, &cfg(Some(p.tau), 10, 0), &active(16)).unwrap();
    let after = evaluate(&d.test, &bundle, &p.encoder).unwrap().top1;
    assert!(after >= before + 0.10, "{before} -> {after}");
}

#[test]
fn longer_budget_reaches_lower_train_loss() {
    let p = pretrained();
    let d = downstream(2, 5);
    let (_, short) = adapt(&d.train, &[], &p.encoder, None, &cfg(Some(p.tau), 10, 0), &active(4)).unwrap();
    let (_, long) = adapt(&d.train, &[], &p.encoder, None, &cfg(Some(p.tau), 50, 0), &active(4)).unwrap();
    assert!(long.last("train").unwrap().loss <= short.last("train").unwrap().loss);
    assert_eq!(long.rows("train").count(), 50);
}

fn inner_fixture() -> (ImageDataset, LogitMap) {
    let p = pretrained();
    let d = downstream(2, 6).train;
    let head = build_head(&p.encoder, &active(4), 0).unwrap();
    (d, head)
}

#[test]
fn inner_update_with_zero_rate_is_identity() {
    let p = pretrained();
    let (d, head) = inner_fixture();
    let start = PromptFrame::random(frame(), 1, 0, 0.1).unwrap();
    let idx: Vec<usize> = (0..8).collect();
    let (snap, _) = inner_update(&start, &d.batch(&idx).unwrap(), &d.batch_labels(&idx), &p.encoder, &head, 0.0, 4).unwrap();
    assert!(snap.values().bit_eq(start.values()));
}

/// One inner step moves every band value by `−η · ∂L/∂p`, the derivative
/// taken by central differences.
#[test]
fn inner_step_follows_finite_difference_gradient() {
    let p = pretrained();
    let (d, head) = inner_fixture();
    let start = PromptFrame::random(frame(), 2, 0, 0.1).unwrap();
    let idx: Vec<usize> = (0..6).collect();
    let (images, labels) = (d.batch(&idx).unwrap(), d.batch_labels(&idx));
    let eta = 0.5;
    let (snap, _) = inner_update(&start, &images, &labels, &p.encoder, &head, eta, 1).unwrap();
    let mask = frame().mask();
    let (mut moved, mut want) = (Vec::new(), Vec::new());
    for i in (0..mask.len()).filter(|&i| mask[i] == 1.0).step_by(97) {
        let loss_at = |h: f64| {
            let mut v = start.values().to_vec();
            v[i] += h;
            let q = PromptFrame::from_values(frame(), v).unwrap();
            prompt_loss_grad(&p.encoder, &head, &q, &images, &labels).unwrap().0
        };
        let g = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
        moved.push(snap.values().data()[i] - start.values().data()[i]);
        want.push(-eta * g);
    }
    assert!(relative_error(&moved, &want) < 1e-6);
    assert!(snap.interior_is_zero());
}

#[test]
fn inner_steps_descend_on_fixed_batch() {
    let p = pretrained();
    let (d, head) = inner_fixture();
    for seed in 0..10u64 {
        let mut r = rng::stream(seed, "descent", 0);
        let idx = rng::sample_without_replacement(d.len(), 16, &mut r);
        let (images, labels) = (d.batch(&idx).unwrap(), d.batch_labels(&idx));
        let start = PromptFrame::random(frame(), seed, 0, 0.01).unwrap();
        let (snap, before) = inner_update(&start, &images, &labels, &p.encoder, &head, 0.01, 4).unwrap();
        let after = prompt_loss_grad(&p.encoder, &head, &snap, &images, &labels).unwrap().0;
        assert!(after <= before + 1e-9, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn groups_concatenate_per_dataset_partitions() {
    let p = pretrained();
    let a = downstream(4, 20).train.with_id("a");
    let b = downstream(2, 21).train.with_id("b");
    let groups = build_groups(&[&a, &b], &p.encoder, Some(p.tau), None, 1000, 0).unwrap();
    let (_, pa) = build_partition(&a, &p.encoder, Some(p.tau), None, 1000, 0).unwrap();
    let (_, pb) = build_partition(&b, &p.encoder, Some(p.tau), None, 1000, 0).unwrap();
    assert_eq!(groups.len(), pa.count + pb.count);
    for (i, g) in groups.iter().enumerate() {
        assert_eq!(g.id, i);
        let want = if i < pa.count { pa.members(i) } else { pb.members(i - pa.count) };
        assert_eq!(g.members, want);
    }
    let one = build_groups(&[&downstream(1, 22).train], &p.encoder, Some(p.tau), None, 1000, 0).unwrap();
    assert_eq!(one.len(), 1);

    let batch = sample_meta_batch(&groups, 5, 3, 0).unwrap();
    assert_eq!(batch.iter().map(|(_, m)| m.len()).sum::<usize>(), groups.iter().map(|g| g.members.len().min(5)).sum::<usize>());
    assert_eq!(batch, sample_meta_batch(&groups, 5, 3, 0).unwrap());
    let whole = sample_meta_batch(&groups, 10_000, 3, 0).unwrap();
    for ((_, m), g) in whole.iter().zip(&groups) {
        let mut m = m.clone();
        m.sort_unstable();
        assert_eq!(m, g.members);
    }
}

/// One meta epoch with one group, one inner step and the plain update is a
/// single SGD step of size `γ·η` from zero.
#[test]
fn single_group_meta_epoch_is_sgd() {
    let p = pretrained();
    let d = downstream(1, 30).train;
    let c = MetaConfig {
        meta_epochs: 1,
        inner_steps: 1,
        use_adam: false,
        gamma: 0.5,
        group_batch: 8,
        ..Default::default()
    };
    let meta = meta_train(&[&d], &p.encoder, &c).unwrap();
    let groups = build_groups(&[&d], &p.encoder, None, None, c.probe_size, c.seed).unwrap();
    let (_, members) = &sample_meta_batch(&groups, 8, c.seed, 0).unwrap()[0];
    let head = build_head(&p.encoder, &HeadMode::Active { k: 2, noise_count: c.noise_count, seed: c.noise_seed }, c.seed).unwrap();
    let zero = PromptFrame::zeros(frame()).unwrap();
    let (_, g) = prompt_loss_grad(&p.encoder, &head, &zero, &d.batch(members).unwrap(), &d.batch_labels(members)).unwrap();
    let mask = frame().mask();
    for i in 0..mask.len() {
        let want = -c.gamma * (c.eta * g.data()[i] * mask[i]);
        assert!((meta.frame.values().data()[i] - want).abs() < 1e-15);
    }
}

#[test]
fn meta_training_reduces_group_loss_and_round_trips() {
    let p = pretrained();
    let a = downstream(2, 50).train;
    let b = downstream(8, 51).train;
    let before = p.encoder.weights().to_bytes();
    let c = MetaConfig {
        tau: Some(p.tau),
        ..Default::default()
    };
    let meta = meta_train(&[&a, &b], &p.encoder, &c).unwrap();
    assert_eq!(p.encoder.weights().to_bytes(), before);
    assert_eq!(meta.epoch_losses.len(), 20);
    assert!(meta.epoch_losses[19] < meta.epoch_losses[0], "{:?}", meta.epoch_losses);
    assert!(meta.frame.interior_is_zero());
    let bytes = meta.to_bundle(&p.encoder).to_bytes().unwrap();
    let back = MetaPrompt::from_bundle(&PromptBundle::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back, meta);
    let dup = meta_train(&[&a, &a], &p.encoder, &c).unwrap_err();
    assert_eq!(dup.kind(), "constraint");
}

#[test]
fn diversity_orders_mode_counts() {
    let p = pretrained();
    for seed in 0..3 {
        let one = diversity_score(&downstream(1, seed).train, &p.encoder, DiversityMetric::EncoderFeature, 2000, seed).unwrap();
        let eight = diversity_score(&downstream(8, seed).train, &p.encoder, DiversityMetric::EncoderFeature, 2000, seed).unwrap();
        assert!(eight.score > one.score, "seed {seed}: {} vs {}", eight.score, one.score);
        let raw = |modes| {
            generate_modemix(&SyntheticSpec {
                modes,
                samples_per_class: 80 / modes,
                seed,
                ..Default::default()
            })
            .unwrap()
        };
        let px1 = diversity_score(&raw(1), &p.encoder, DiversityMetric::Pixel, 2000, seed).unwrap();
        let px8 = diversity_score(&raw(8), &p.encoder, DiversityMetric::Pixel, 2000, seed).unwrap();
        assert!(px8.score > px1.score);
    }
    let img = NdArray::full(&[3, 32, 32], 0.5).unwrap();
    let flat = ImageDataset::new("flat", vec![img; 4], vec![0; 4], 1, [3, 32, 32]).unwrap();
    assert_eq!(diversity_score(&flat, &p.encoder, DiversityMetric::EncoderFeature, 100, 0).unwrap().score, 0.0);
}
