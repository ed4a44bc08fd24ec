//! The frozen vision encoder: a fixed two-block convolutional network with a
//! linear feature layer and a classification head, pretrained in-repo and
//! then frozen.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng;
use crate::tensor::{backward, NdArray, Tape, Var};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DAMW";
pub const WEIGHT_VERSION: u32 = 1;

const CONV1_OUT: usize = 16;
const CONV2_OUT: usize = 32;
/// Feature batch size for inference passes.
pub const INFER_BATCH: usize = 64;

/// Architecture: conv 3→16 k3 p1, relu, pool2, conv 16→32 k3 p1, relu,
/// pool2, flatten, linear → `feature_dim`; head linear → `head_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub head_dim: usize,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            channels: 3,
            height: 32,
            width: 32,
            feature_dim: 64,
            head_dim: 16,
        }
    }
}

impl EncoderSpec {
    pub fn input_dims(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn flat_dim(&self) -> usize {
        CONV2_OUT * (self.height / 4) * (self.width / 4)
    }

    /// Shapes of conv1 w/b, conv2 w/b, feature w/b, head w/b.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        vec![
            vec![CONV1_OUT, self.channels, 3, 3],
            vec![CONV1_OUT],
            vec![CONV2_OUT, CONV1_OUT, 3, 3],
            vec![CONV2_OUT],
            vec![self.feature_dim, self.flat_dim()],
            vec![self.feature_dim],
            vec![self.head_dim, self.feature_dim],
            vec![self.head_dim],
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.channels != 3 || self.height < 4 || self.width < 4 || self.feature_dim == 0 || self.head_dim == 0 {
            return Err(Error::invalid(format!("unsupported encoder spec {self:?}")));
        }
        Ok(())
    }

    /// Recover the spec from stored layer shapes. Inputs are assumed square
    /// with an extent divisible by four.
    fn from_layer_shapes(shapes: &[Vec<usize>]) -> Result<Self> {
        let bad = || Error::Malformed {
            what: "encoder weights",
            msg: format!("layer shapes {shapes:?} do not match the encoder architecture"),
        };
        if shapes.len() != 8 || shapes[4].len() != 2 || shapes[6].len() != 2 {
            return Err(bad());
        }
        let flat = shapes[4][1];
        let side = ((flat / CONV2_OUT) as f64).sqrt().round() as usize;
        let spec = EncoderSpec {
            channels: shapes[0].get(1).copied().unwrap_or(0),
            height: side * 4,
            width: side * 4,
            feature_dim: shapes[4][0],
            head_dim: shapes[6][0],
        };
        spec.validate().map_err(|_| bad())?;
        if spec.layer_shapes() != shapes {
            return Err(bad());
        }
        Ok(spec)
    }
}

/// One tensor per parameterized layer plus a fingerprint over all bytes.
#[derive(Clone, Debug)]
pub struct EncoderWeights {
    layers: Vec<NdArray>,
    fingerprint: u64,
}

impl PartialEq for EncoderWeights {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }
}

fn layer_header(layer: &NdArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * layer.dims().len());
    out.extend_from_slice(&(layer.dims().len() as u32).to_le_bytes());
    for &d in layer.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out
}

fn fingerprint_layers(layers: &[NdArray]) -> u64 {
    let mut h = Sha256::new();
    for l in layers {
        h.update(layer_header(l));
        h.update(l.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

impl EncoderWeights {
    pub fn new(layers: Vec<NdArray>) -> Self {
        let fingerprint = fingerprint_layers(&layers);
        EncoderWeights { layers, fingerprint }
    }

    pub fn layers(&self) -> &[NdArray] {
        &self.layers
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            out.extend_from_slice(&layer_header(l));
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "encoder weights");
        let magic = r.take(4)?;
        if magic != WEIGHT_MAGIC {
            return Err(Error::BadMagic {
                what: "encoder weights",
                expected: WEIGHT_MAGIC.to_vec(),
                found: magic.to_vec(),
            });
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut layers = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            if rank == 0 || rank > crate::tensor::MAX_RANK {
                return Err(Error::Malformed {
                    what: "encoder weights",
                    msg: format!("layer rank {rank}"),
                });
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let data = r.f64s(n)?;
            layers.push(NdArray::from_vec(&dims, data).map_err(|e| Error::Malformed {
                what: "encoder weights",
                msg: e.to_string(),
            })?);
        }
        let stored = r.u64()?;
        r.finish()?;
        let found = fingerprint_layers(&layers);
        if found != stored {
            return Err(Error::FingerprintMismatch { expected: stored, found });
        }
        Ok(EncoderWeights {
            layers,
            fingerprint: stored,
        })
    }
}

/// Little-endian cursor shared by the binary formats.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], what: &'static str) -> Self {
        ByteReader { buf, pos: 0, what }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(self.what))?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated(self.what))?;
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::Truncated(self.what))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Malformed {
                what: self.what,
                msg: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Encoder layers recorded on a tape, either as frozen constants or as
/// trainable leaves.
pub struct BoundEncoder<'t> {
    layers: Vec<Var<'t>>,
}

impl<'t> BoundEncoder<'t> {
    pub fn layers(&self) -> &[Var<'t>] {
        &self.layers
    }

    /// `B×C×H×W` images to `B×d` features.
    pub fn features(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let l = &self.layers;
        let h = x.conv2d(&l[0], Some(&l[1]), 1, 1)?.relu().maxpool2d()?;
        let h = h.conv2d(&l[2], Some(&l[3]), 1, 1)?.relu().maxpool2d()?;
        h.flatten()?.linear(&l[4], Some(&l[5]))
    }

    /// Pretraining head applied to `B×d` features.
    pub fn head(&self, features: &Var<'t>) -> Result<Var<'t>> {
        features.linear(&self.layers[6], Some(&self.layers[7]))
    }
}

/// Fixed-weight feature extractor with its pretraining head.
#[derive(Clone, Debug)]
pub struct FrozenEncoder {
    spec: EncoderSpec,
    weights: EncoderWeights,
    frozen: bool,
    zero_response: NdArray,
}

impl FrozenEncoder {
    /// Freeze `weights` under `spec`, recording the all-zeros response.
    pub fn from_weights(spec: EncoderSpec, weights: EncoderWeights) -> Result<Self> {
        spec.validate()?;
        let shapes: Vec<Vec<usize>> = weights.layers.iter().map(|l| l.dims().to_vec()).collect();
        if shapes != spec.layer_shapes() {
            return Err(Error::invalid(format!(
                "weight shapes {shapes:?} do not fit encoder spec {spec:?}"
            )));
        }
        let mut enc = FrozenEncoder {
            spec,
            weights,
            frozen: true,
            zero_response: NdArray::scalar(0.0),
        };
        let zeros = NdArray::zeros(&spec.input_dims())?;
        enc.zero_response = enc.forward_features(&zeros)?;
        Ok(enc)
    }

    /// Untrained encoder with the same initialization `pretrain` starts from.
    pub fn random(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Self::from_weights(spec, EncoderWeights::new(init_layers(&spec, seed)))
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn weights(&self) -> &EncoderWeights {
        &self.weights
    }

    pub fn fingerprint(&self) -> u64 {
        self.weights.fingerprint
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn head_dim(&self) -> usize {
        self.spec.head_dim
    }

    /// Features of the all-zeros image, captured when the encoder was frozen.
    pub fn zero_response(&self) -> &NdArray {
        &self.zero_response
    }

    /// Record the frozen layers as tape constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            layers: self.weights.layers.iter().map(|l| tape.constant(l.clone())).collect(),
        }
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let want = self.spec.input_dims();
        if dims != want {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                left: crate::tensor::Shape::new(dims).unwrap_or_default(),
                right: crate::tensor::Shape::new(&want)?,
            });
        }
        Ok(())
    }

    /// Feature vector of one `C×H×W` image.
    pub fn forward_features(&self, x: &NdArray) -> Result<NdArray> {
        self.check_input(x.dims())?;
        let batch = x.reshape(&[1, self.spec.channels, self.spec.height, self.spec.width])?;
        self.features_batch(&batch)?.reshape(&[self.spec.feature_dim])
    }

    /// `B×d` features of a `B×C×H×W` batch.
    pub fn features_batch(&self, x: &NdArray) -> Result<NdArray> {
        if x.dims().len() != 4 {
            return Err(Error::invalid(format!("features_batch needs a rank-4 batch, got {}", x.shape())));
        }
        self.check_input(&x.dims()[1..])?;
        let tape = Tape::new(0);
        let enc = self.bind(&tape);
        Ok(enc.features(&tape.constant(x.clone()))?.value())
    }

    /// Feature rows for every image in `dataset`, in dataset order.
    pub fn dataset_features(&self, dataset: &ImageDataset) -> Result<Vec<Vec<f64>>> {
        self.features_of(dataset, &(0..dataset.len()).collect::<Vec<_>>())
    }

    pub fn features_of(&self, dataset: &ImageDataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let d = self.spec.feature_dim;
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(INFER_BATCH) {
            let f = self.features_batch(&dataset.batch(chunk)?)?;
            out.extend(f.data().chunks(d).map(|r| r.to_vec()));
        }
        Ok(out)
    }

    /// Unbiased per-channel feature variance over `noise_count` standard
    /// normal noise images.
    pub fn probe_channel_variance(&self, noise_count: usize, seed: u64) -> Result<Vec<f64>> {
        if noise_count < 2 {
            return Err(Error::invalid(format!("variance probe needs at least 2 noise images, got {noise_count}")));
        }
        let dims = self.spec.input_dims();
        let mut r = rng::stream(seed, "probe-noise", 0);
        let d = self.spec.feature_dim;
        // Welford accumulation in sample order.
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        let mut seen = 0usize;
        let mut left = noise_count;
        while left > 0 {
            let b = left.min(INFER_BATCH);
            let noise = NdArray::randn_with(&[b, dims[0], dims[1], dims[2]], &mut r)?;
            let f = self.features_batch(&noise)?;
            for row in f.data().chunks(d) {
                seen += 1;
                for j in 0..d {
                    let delta = row[j] - mean[j];
                    mean[j] += delta / seen as f64;
                    m2[j] += delta * (row[j] - mean[j]);
                }
            }
            left -= b;
        }
        Ok(m2.into_iter().map(|v| (v / (noise_count - 1) as f64).max(0.0)).collect())
    }

    pub fn save_weights(&self, path: &Path) -> Result<()> {
        save_weights(path, &self.weights)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let weights = load_weights(path)?;
        let shapes: Vec<Vec<usize>> = weights.layers.iter().map(|l| l.dims().to_vec()).collect();
        let spec = EncoderSpec::from_layer_shapes(&shapes)?;
        Self::from_weights(spec, weights)
    }
}

pub fn save_weights(path: &Path, weights: &EncoderWeights) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&weights.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<EncoderWeights> {
    EncoderWeights::from_bytes(&std::fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub feature_dim: usize,
    pub head_dim: usize,
    pub hflip: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
            feature_dim: 64,
            head_dim: 16,
            hflip: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
}

fn init_layers(spec: &EncoderSpec, seed: u64) -> Vec<NdArray> {
    let mut r = rng::stream(seed, "encoder-init", 0);
    spec.layer_shapes()
        .into_iter()
        .enumerate()
        .map(|(i, dims)| {
            let n: usize = dims.iter().product();
            if dims.len() == 1 {
                return NdArray::from_vec(&dims, vec![0.0; n]).expect("valid dims");
            }
            let fan_in: usize = dims[1..].iter().product();
            let gain = if i == 6 { 1.0 } else { 2.0 };
            let dist = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..n).map(|_| dist.sample(&mut r)).collect();
            NdArray::from_vec(&dims, data).expect("valid dims")
        })
        .collect()
}

fn hflip(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

/// Train encoder and head with Adam on cross-entropy, then freeze.
pub fn pretrain(dataset: &ImageDataset, cfg: &PretrainConfig) -> Result<(FrozenEncoder, PretrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(dataset.id.clone()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Constraint(format!(
            "pretraining needs epochs ≥ 1, batch ≥ 1, lr > 0 (got {}, {}, {})",
            cfg.epochs, cfg.batch_size, cfg.lr
        )));
    }
    if dataset.num_classes() > cfg.head_dim {
        return Err(Error::Constraint(format!(
            "{} classes exceed the head width {}",
            dataset.num_classes(),
            cfg.head_dim
        )));
    }
    let [c, h, w] = dataset.image_dims();
    let spec = EncoderSpec {
        channels: c,
        height: h,
        width: w,
        feature_dim: cfg.feature_dim,
        head_dim: cfg.head_dim,
    };
    spec.validate()?;
    let mut layers: Vec<Vec<f64>> = init_layers(&spec, cfg.seed).iter().map(|l| l.to_vec()).collect();
    let shapes = spec.layer_shapes();
    let mut opts: Vec<Optimizer> = layers.iter().map(|l| Optimizer::new(OptimizerKind::adam(), l.len())).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order_rng = rng::stream(cfg.seed, "pretrain-shuffle", epoch as u64);
        let order = rng::permutation(dataset.len(), &mut order_rng);
        let mut flip_rng = rng::stream(cfg.seed, "pretrain-flip", epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * c * h * w);
            for &i in chunk {
                let img = dataset.image(i).data();
                if cfg.hflip && rand::Rng::gen_bool(&mut flip_rng, 0.5) {
                    data.extend(hflip(img, c, h, w));
                } else {
                    data.extend_from_slice(img);
                }
            }
            let x = NdArray::from_vec(&[chunk.len(), c, h, w], data)?;
            let labels = dataset.batch_labels(chunk);
            let tape = Tape::new(0);
            let bound = BoundEncoder {
                layers: layers
                    .iter()
                    .zip(&shapes)
                    .map(|(l, s)| NdArray::from_vec(s, l.clone()).map(|a| tape.leaf(a)))
                    .collect::<Result<Vec<_>>>()?,
            };
            let feats = bound.features(&tape.constant(x))?;
            let loss = bound.head(&feats)?.cross_entropy(&labels)?;
            total += loss.value().data()[0] * chunk.len() as f64;
            let grads = backward(&loss)?;
            for ((layer, opt), var) in layers.iter_mut().zip(opts.iter_mut()).zip(bound.layers()) {
                let g = grads.get(var).expect("leaf gradient");
                opt.step(layer, g.data(), cfg.lr, 0.0);
            }
        }
        epoch_loss.push(total / dataset.len() as f64);
        log::debug!("pretrain epoch {epoch}: loss {:.4}", epoch_loss[epoch]);
    }

    let weights = EncoderWeights::new(
        layers
            .into_iter()
            .zip(&shapes)
            .map(|(l, s)| NdArray::from_vec(s, l))
            .collect::<Result<Vec<_>>>()?,
    );
    let encoder = FrozenEncoder::from_weights(spec, weights)?;
    let train_accuracy = head_accuracy(&encoder, dataset)?;
    Ok((encoder, PretrainReport {
        epoch_loss,
        train_accuracy,
    }))
}

/// Top-1 accuracy of the pretraining head.
pub fn head_accuracy(encoder: &FrozenEncoder, dataset: &ImageDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..dataset.len()).collect();
    for chunk in all.chunks(INFER_BATCH) {
        let tape = Tape::new(0);
        let enc = encoder.bind(&tape);
        let logits = enc.head(&enc.features(&tape.constant(dataset.batch(chunk)?))?)?.value();
        let k = encoder.head_dim();
        for (row, &i) in logits.data().chunks(k).zip(chunk) {
            if argmax(row) == dataset.labels()[i] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
