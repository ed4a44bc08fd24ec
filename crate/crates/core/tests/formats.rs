use damvp_core::cluster::PrototypeSet;
use damvp_core::encoder::{load_weights, save_weights, EncoderSpec, EncoderWeights, FrozenEncoder};
use damvp_core::head::{build_head, HeadMode};
use damvp_core::prompt::{load_bundle, save_bundle, FrameSpec, PromptBundle, PromptFrame};
use damvp_core::Error;

fn encoder(seed: u64) -> FrozenEncoder {
    FrozenEncoder::random(EncoderSpec::default(), seed).unwrap()
}

fn bundle(enc: &FrozenEncoder, mode: HeadMode, n: usize) -> PromptBundle {
    let spec = FrameSpec::scaled(3, 32, 32).unwrap();
    let d = enc.feature_dim();
    PromptBundle {
        prompts: (0..n as u64).map(|i| PromptFrame::random(spec, 4, i, 0.5).unwrap()).collect(),
        prototypes: PrototypeSet {
            centroids: (0..n).map(|i| (0..d).map(|j| (i * d + j) as f64 * 0.25 - 3.0).collect()).collect(),
            threshold: 2.5,
            fingerprint: enc.fingerprint(),
        },
        head: build_head(enc, &mode, 1).unwrap(),
        fingerprint: enc.fingerprint(),
        config_snapshot: r#"{"kind":"adapt","threshold":2.5}"#.to_string(),
        meta: false,
    }
}

fn kind(e: Error) -> &'static str {
    e.kind()
}

#[test]
fn weights_round_trip_through_file() {
    let enc = encoder(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.damw");
    save_weights(&path, enc.weights()).unwrap();
    let back = load_weights(&path).unwrap();
    assert_eq!(&back, enc.weights());
    assert_eq!(back.fingerprint(), enc.fingerprint());
    assert_eq!(back.to_bytes(), std::fs::read(&path).unwrap());
    let reloaded = FrozenEncoder::load(&path).unwrap();
    assert_eq!(reloaded.spec(), enc.spec());
}

#[test]
fn weight_corruptions_have_distinct_errors() {
    let bytes = encoder(0).weights().to_bytes();
    assert_eq!(kind(EncoderWeights::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err()), "truncated");
    let mut flipped = bytes.clone();
    flipped[40] ^= 0x01;
    assert_eq!(kind(EncoderWeights::from_bytes(&flipped).unwrap_err()), "fingerprint_mismatch");
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert_eq!(kind(EncoderWeights::from_bytes(&magic).unwrap_err()), "bad_magic");
    let mut version = bytes.clone();
    version[4] = 9;
    assert_eq!(kind(EncoderWeights::from_bytes(&version).unwrap_err()), "unsupported_version");
    let mut trailing = bytes;
    trailing.push(0);
    assert!(EncoderWeights::from_bytes(&trailing).is_err());
}

#[test]
fn same_seed_same_fingerprint() {
    assert_eq!(encoder(5).fingerprint(), encoder(5).fingerprint());
    assert_ne!(encoder(5).fingerprint(), encoder(6).fingerprint());
}

#[test]
fn bundles_round_trip_byte_exact() {
    let enc = encoder(1);
    let dir = tempfile::tempdir().unwrap();
    let modes = [
        HeadMode::Tuning { k: 4 },
        HeadMode::Freezing { k: 3 },
        HeadMode::HardCoded { k: 5 },
        HeadMode::Active { k: 6, noise_count: 16, seed: 2 },
    ];
    for (i, mode) in modes.into_iter().enumerate() {
        let b = bundle(&enc, mode, 1 + i);
        let path = dir.path().join(format!("b{i}.damp"));
        save_bundle(&path, &b).unwrap();
        let back = load_bundle(&path).unwrap();
        assert_eq!(back, b, "{}", mode.name());
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        back.check_encoder(&enc).unwrap();
    }
}

#[test]
fn unbounded_threshold_survives_round_trip() {
    let enc = encoder(1);
    let mut b = bundle(&enc, HeadMode::HardCoded { k: 2 }, 1);
    b.prototypes.threshold = f64::INFINITY;
    b.config_snapshot = r#"{"threshold":null}"#.into();
    b.meta = true;
    let back = PromptBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
    assert_eq!(back.prototypes.threshold, f64::INFINITY);
    assert!(back.meta);
}

#[test]
fn bundle_corruptions_have_distinct_errors() {
    let enc = encoder(1);
    let bytes = bundle(&enc, HeadMode::Tuning { k: 4 }, 2).to_bytes().unwrap();
    assert_eq!(kind(PromptBundle::from_bytes(&bytes[..bytes.len() - 1]).unwrap_err()), "truncated");
    let mut version = bytes.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert_eq!(kind(PromptBundle::from_bytes(&version).unwrap_err()), "unsupported_version");
    let mut magic = bytes.clone();
    magic[..4].copy_from_slice(b"DAMW");
    assert_eq!(kind(PromptBundle::from_bytes(&magic).unwrap_err()), "bad_magic");
    // frame width field no longer agrees with the stored learnable count
    let mut frame = bytes.clone();
    frame[24..28].copy_from_slice(&5u32.to_le_bytes());
    assert!(PromptBundle::from_bytes(&frame).is_err());
}

#[test]
fn bundle_rejects_foreign_encoder_at_use() {
    let enc = encoder(1);
    let b = PromptBundle::from_bytes(&bundle(&enc, HeadMode::HardCoded { k: 2 }, 1).to_bytes().unwrap()).unwrap();
    assert_eq!(kind(b.check_encoder(&encoder(2)).unwrap_err()), "fingerprint_mismatch");
}

#[test]
fn inconsistent_bundles_refuse_to_serialize() {
    let enc = encoder(1);
    let mut b = bundle(&enc, HeadMode::HardCoded { k: 2 }, 2);
    b.prototypes.centroids.pop();
    assert!(b.to_bytes().is_err());
    let mut c = bundle(&enc, HeadMode::HardCoded { k: 2 }, 1);
    c.prototypes.fingerprint ^= 1;
    assert_eq!(kind(c.to_bytes().unwrap_err()), "fingerprint_mismatch");
}
