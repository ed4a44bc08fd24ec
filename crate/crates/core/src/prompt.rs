//! Photo-frame pixel prompts and the prompt bundle file.
//!
//! A prompt has the full input extent but only a border band of `width`
//! pixels is learnable; the interior is held at exactly zero by every
//! constructor, optimizer step and decoder.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::PrototypeSet;
use crate::encoder::{ByteReader, FrozenEncoder};
use crate::error::{Error, Result};
use crate::head::LogitMap;
use crate::optim::Optimizer;
use crate::rng;
use crate::tensor::NdArray;

pub const BUNDLE_MAGIC: &[u8; 4] = b"DAMP";
pub const BUNDLE_VERSION: u32 = 1;
pub const DEFAULT_INIT_STD: f64 = 0.01;
/// Frame thickness at a 224-pixel input.
pub const REFERENCE_WIDTH: usize = 30;
pub const REFERENCE_EXTENT: usize = 224;
const META_FLAG: u8 = 0x80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Frame thickness in pixels.
    pub frame: usize,
}

impl FrameSpec {
    pub fn new(channels: usize, height: usize, width: usize, frame: usize) -> Result<Self> {
        let spec = FrameSpec {
            channels,
            height,
            width,
            frame,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Frame width scaled from 30 px at 224 px: `round(30·H/224)`, at least 1.
    pub fn scaled(channels: usize, height: usize, width: usize) -> Result<Self> {
        let frame = ((REFERENCE_WIDTH * height) as f64 / REFERENCE_EXTENT as f64).round().max(1.0) as usize;
        Self::new(channels, height, width, frame)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.frame == 0 || 2 * self.frame >= self.height.min(self.width) {
            return Err(Error::Constraint(format!(
                "frame of width {} does not fit a {}×{}×{} input",
                self.frame, self.channels, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn learnable_per_channel(&self) -> usize {
        self.height * self.width - (self.height - 2 * self.frame) * (self.width - 2 * self.frame)
    }

    pub fn learnable(&self) -> usize {
        self.channels * self.learnable_per_channel()
    }

    pub fn in_band(&self, y: usize, x: usize) -> bool {
        y < self.frame || x < self.frame || y >= self.height - self.frame || x >= self.width - self.frame
    }

    /// 1 on the frame band, 0 inside.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.numel());
        for _ in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    m.push(if self.in_band(y, x) { 1.0 } else { 0.0 });
                }
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptFrame {
    spec: FrameSpec,
    values: NdArray,
    mask: NdArray,
}

fn zero_interior(spec: &FrameSpec, mask: &[f64], values: &mut [f64]) {
    debug_assert_eq!(mask.len(), values.len());
    let _ = spec;
    for (v, &m) in values.iter_mut().zip(mask) {
        if m == 0.0 {
            *v = 0.0;
        }
    }
}

impl PromptFrame {
    pub fn zeros(spec: FrameSpec) -> Result<Self> {
        let mask = NdArray::from_vec(&spec.dims(), spec.mask())?;
        Ok(PromptFrame {
            spec,
            values: NdArray::zeros(&spec.dims())?,
            mask,
        })
    }

    /// Band entries drawn from `N(0, std²)`; `index` picks the stream so
    /// sibling prompts get independent draws.
    pub fn random(spec: FrameSpec, seed: u64, index: u64, std: f64) -> Result<Self> {
        let mut r = rng::stream(seed, "prompt-init", index);
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(format!("prompt init std {std}: {e}")))?;
        let mask = spec.mask();
        let values = mask
            .iter()
            .map(|&m| {
                let v: f64 = dist.sample(&mut r);
                if m == 0.0 {
                    0.0
                } else {
                    v
                }
            })
            .collect();
        Self::from_values(spec, values)
    }

    /// Copy of `meta`'s values; the frame geometry must match.
    pub fn from_meta(spec: FrameSpec, meta: &PromptFrame) -> Result<Self> {
        if meta.spec != spec {
            return Err(Error::Constraint(format!(
                "meta prompt geometry {:?} does not match {:?}",
                meta.spec, spec
            )));
        }
        Ok(meta.clone())
    }

    /// Build from raw values; a nonzero interior is rejected.
    pub fn from_values(spec: FrameSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let mask = spec.mask();
        if values.len() != mask.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} prompt values for a {:?} frame",
                values.len(),
                spec
            )));
        }
        if values.iter().zip(&mask).any(|(v, &m)| m == 0.0 && v.to_bits() != 0) {
            return Err(Error::Malformed {
                what: "prompt",
                msg: "nonzero value inside the frame interior".into(),
            });
        }
        Ok(PromptFrame {
            spec,
            values: NdArray::from_vec(&spec.dims(), values)?,
            mask: NdArray::from_vec(&spec.dims(), mask)?,
        })
    }

    pub fn spec(&self) -> &FrameSpec {
        &self.spec
    }

    pub fn values(&self) -> &NdArray {
        &self.values
    }

    pub fn mask(&self) -> &NdArray {
        &self.mask
    }

    /// True when every interior value is bit-identical to +0.0.
    pub fn interior_is_zero(&self) -> bool {
        self.values
            .data()
            .iter()
            .zip(self.mask.data())
            .all(|(v, &m)| m != 0.0 || v.to_bits() == 0)
    }

    /// `x + p`; no clamping.
    pub fn apply(&self, x: &NdArray) -> Result<NdArray> {
        x.add(&self.values)
    }

    pub fn scaled(&self, a: f64) -> PromptFrame {
        let mut v = self.values.to_vec();
        v.iter_mut().for_each(|x| *x *= a);
        zero_interior(&self.spec, self.mask.data(), &mut v);
        PromptFrame {
            spec: self.spec,
            values: NdArray::from_vec(&self.spec.dims(), v).expect("same extent"),
            mask: self.mask.clone(),
        }
    }

    /// One optimizer update restricted to the frame band.
    pub fn masked_step(&mut self, grad: &NdArray, opt: &mut Optimizer, lr: f64, weight_decay: f64) -> Result<()> {
        self.values.expect_same_shape(grad, "masked_step")?;
        let masked: Vec<f64> = grad.data().iter().zip(self.mask.data()).map(|(g, m)| g * m).collect();
        let mut v = self.values.to_vec();
        opt.step(&mut v, &masked, lr, weight_decay);
        zero_interior(&self.spec, self.mask.data(), &mut v);
        self.values = NdArray::from_vec(&self.spec.dims(), v)?;
        Ok(())
    }

    /// Replace the values wholesale, re-zeroing the interior.
    pub fn set_values(&mut self, mut values: Vec<f64>) -> Result<()> {
        if values.len() != self.spec.numel() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a frame of {}",
                values.len(),
                self.spec.numel()
            )));
        }
        zero_interior(&self.spec, self.mask.data(), &mut values);
        self.values = NdArray::from_vec(&self.spec.dims(), values)?;
        Ok(())
    }
}

/// The deployable result of adaptation: one prompt per subset, the
/// prototypes that route to them, and the logit map.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub prompts: Vec<PromptFrame>,
    pub prototypes: PrototypeSet,
    pub head: LogitMap,
    pub fingerprint: u64,
    /// Free-form JSON describing the run that produced the bundle.
    pub config_snapshot: String,
    pub meta: bool,
}

#[derive(Serialize, Deserialize)]
struct SnapshotThreshold {
    threshold: Option<f64>,
}

/// Read the prototype threshold back from a snapshot; `null` means unbounded.
fn snapshot_threshold(snapshot: &str) -> f64 {
    serde_json::from_str::<SnapshotThreshold>(snapshot)
        .ok()
        .map_or(f64::NAN, |s| s.threshold.unwrap_or(f64::INFINITY))
}

impl PromptBundle {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn check_encoder(&self, encoder: &FrozenEncoder) -> Result<()> {
        if self.fingerprint != encoder.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found: encoder.fingerprint(),
            });
        }
        self.prototypes.check_fingerprint(encoder)
    }

    fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::invalid("bundle without prompts"));
        }
        if self.prompts.len() != self.prototypes.len() {
            return Err(Error::invalid(format!(
                "{} prompts but {} prototypes",
                self.prompts.len(),
                self.prototypes.len()
            )));
        }
        let spec = self.prompts[0].spec;
        if self.prompts.iter().any(|p| p.spec != spec) {
            return Err(Error::invalid("prompts with mixed frame geometry"));
        }
        if self.prototypes.fingerprint != self.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found: self.prototypes.fingerprint,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let spec = self.prompts[0].spec;
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let f64le = |out: &mut Vec<u8>, vs: &[f64]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(BUNDLE_MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        u32le(&mut out, self.prompts.len());
        for v in [spec.channels, spec.height, spec.width, spec.frame, spec.learnable_per_channel()] {
            u32le(&mut out, v);
        }
        u32le(&mut out, self.prototypes.dim());
        for c in &self.prototypes.centroids {
            f64le(&mut out, c);
        }
        out.push(self.head.tag() | if self.meta { META_FLAG } else { 0 });
        match &self.head {
            LogitMap::Tuning { weight, bias } => {
                u32le(&mut out, weight.dims()[0]);
                u32le(&mut out, weight.dims()[1]);
                f64le(&mut out, weight.data());
                f64le(&mut out, bias.data());
            }
            LogitMap::Freezing { classes: idx } | LogitMap::HardCoded { channels: idx } | LogitMap::Active { channels: idx } => {
                u32le(&mut out, idx.len());
                for &i in idx {
                    u32le(&mut out, i);
                }
            }
        }
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        for p in &self.prompts {
            f64le(&mut out, p.values.data());
        }
        u32le(&mut out, self.config_snapshot.len());
        out.extend_from_slice(self.config_snapshot.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "prompt bundle");
        let magic = r.take(4)?;
        if magic != BUNDLE_MAGIC {
            return Err(Error::BadMagic {
                what: "prompt bundle",
                expected: BUNDLE_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let n = r.u32()? as usize;
        let dims: Vec<usize> = (0..5).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let spec = FrameSpec::new(dims[0], dims[1], dims[2], dims[3])?;
        if dims[4] != spec.learnable_per_channel() {
            return Err(Error::Malformed {
                what: "prompt bundle",
                msg: format!("learnable count {} does not match frame {:?}", dims[4], spec),
            });
        }
        let d = r.u32()? as usize;
        let centroids = (0..n).map(|_| r.f64s(d)).collect::<Result<Vec<_>>>()?;
        let tag = r.u8()?;
        let meta = tag & META_FLAG != 0;
        let read_idx = |r: &mut ByteReader| -> Result<Vec<usize>> {
            let k = r.u32()? as usize;
            (0..k).map(|_| r.u32().map(|v| v as usize)).collect()
        };
        let head = match tag & !META_FLAG {
            0 => {
                let k = r.u32()? as usize;
                let dd = r.u32()? as usize;
                let weight = NdArray::from_vec(&[k, dd], r.f64s(k * dd)?)?;
                let bias = NdArray::from_vec(&[k], r.f64s(k)?)?;
                LogitMap::Tuning { weight, bias }
            }
            1 => LogitMap::Freezing { classes: read_idx(&mut r)? },
            2 => LogitMap::HardCoded { channels: read_idx(&mut r)? },
            3 => LogitMap::Active { channels: read_idx(&mut r)? },
            other => {
                return Err(Error::Malformed {
                    what: "prompt bundle",
                    msg: format!("unknown head mode tag {other}"),
                })
            }
        };
        let fingerprint = r.u64()?;
        let prompts = (0..n)
            .map(|_| PromptFrame::from_values(spec, r.f64s(spec.numel())?))
            .collect::<Result<Vec<_>>>()?;
        let len = r.u32()? as usize;
        let config_snapshot = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Malformed {
            what: "prompt bundle",
            msg: format!("config snapshot is not UTF-8: {e}"),
        })?;
        r.finish()?;
        let bundle = PromptBundle {
            prompts,
            prototypes: PrototypeSet {
                centroids,
                threshold: snapshot_threshold(&config_snapshot),
                fingerprint,
            },
            head,
            fingerprint,
            config_snapshot,
            meta,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_bundle(path: &Path, bundle: &PromptBundle) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: &Path) -> Result<PromptBundle> {
    PromptBundle::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    fn spec() -> FrameSpec {
        FrameSpec::scaled(3, 32, 32).unwrap()
    }

    #[test]
    fn frame_geometry() {
        assert_eq!(spec().frame, 4);
        let big = FrameSpec::new(3, 224, 224, 30).unwrap();
        assert_eq!(big.learnable(), 69_840);
        assert_eq!(FrameSpec::scaled(3, 224, 224).unwrap().frame, 30);
        assert!(FrameSpec::new(3, 8, 8, 4).is_err());
        assert_eq!(spec().mask().iter().filter(|&&m| m == 1.0).count(), spec().learnable());
    }

    #[test]
    fn zero_prompt_is_identity() {
        let p = PromptFrame::zeros(spec()).unwrap();
        let x = NdArray::randn(&[3, 32, 32], 1).unwrap();
        assert!(p.apply(&x).unwrap().bit_eq(&x));
    }

    #[test]
    fn random_init_respects_mask() {
        let p = PromptFrame::random(spec(), 3, 0, 0.01).unwrap();
        assert!(p.interior_is_zero());
        assert!(p.values().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn meta_init_copies_and_checks_geometry() {
        let m = PromptFrame::random(spec(), 4, 0, 0.5).unwrap();
        let p = PromptFrame::from_meta(spec(), &m).unwrap();
        assert!(p.values().bit_eq(m.values()));
        let other = FrameSpec::new(3, 32, 32, 3).unwrap();
        assert!(PromptFrame::from_meta(other, &m).is_err());
    }

    #[test]
    fn sgd_step_is_masked_difference() {
        let mut p = PromptFrame::random(spec(), 5, 0, 1.0).unwrap();
        let before = p.values().clone();
        let g = NdArray::randn(&[3, 32, 32], 6).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, spec().numel());
        p.masked_step(&g, &mut opt, 1.0, 0.0).unwrap();
        let want: Vec<f64> = before
            .data()
            .iter()
            .zip(g.data())
            .zip(p.mask().data())
            .map(|((a, b), m)| if *m == 0.0 { 0.0 } else { a - b })
            .collect();
        assert_eq!(p.values().data(), want.as_slice());
    }

    #[test]
    fn interior_survives_many_adam_steps() {
        let mut p = PromptFrame::random(spec(), 7, 0, 0.1).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(), spec().numel());
        for s in 0..100 {
            let g = NdArray::randn(&[3, 32, 32], 100 + s).unwrap();
            p.masked_step(&g, &mut opt, 0.1, 1e-4).unwrap();
        }
        assert!(p.interior_is_zero());
    }

    #[test]
    fn decoder_rejects_nonzero_interior() {
        let mut v = vec![0.0; spec().numel()];
        v[16 * 32 + 16] = 1.0;
        assert!(PromptFrame::from_values(spec(), v).is_err());
    }
}
