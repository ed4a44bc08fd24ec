use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::NdArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Per-channel affine standardization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Labelled images of a common `C×H×W` extent.
///
/// Pixel values start in `[0,1]`; once [`ImageDataset::standardize`] has been
/// applied the statistics used are kept in `norm` so the transform can be
/// inverted and prompts live in a well-defined coordinate frame.
#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub id: String,
    images: Vec<NdArray>,
    labels: Vec<usize>,
    num_classes: usize,
    image_dims: [usize; 3],
    pub split: Split,
    norm: Option<ChannelNorm>,
}

impl ImageDataset {
    pub fn new(id: impl Into<String>, images: Vec<NdArray>, labels: Vec<usize>, num_classes: usize, image_dims: [usize; 3]) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!("{} images vs {} labels", images.len(), labels.len())));
        }
        if let Some(bad) = images.iter().find(|im| im.dims() != image_dims) {
            return Err(Error::invalid(format!("image of shape {} in a {image_dims:?} dataset", bad.shape())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: l, classes: num_classes });
        }
        Ok(ImageDataset {
            id: id.into(),
            images,
            labels,
            num_classes,
            image_dims,
            split: Split::Train,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_dims(&self) -> [usize; 3] {
        self.image_dims
    }

    pub fn image(&self, i: usize) -> &NdArray {
        &self.images[i]
    }

    pub fn images(&self) -> &[NdArray] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn norm(&self) -> Option<&ChannelNorm> {
        self.norm.as_ref()
    }

    /// Stack the selected images into a `B×C×H×W` array.
    pub fn batch(&self, indices: &[usize]) -> Result<NdArray> {
        let items: Vec<NdArray> = indices.iter().map(|&i| self.images[i].clone()).collect();
        NdArray::stack(&items)
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> ImageDataset {
        ImageDataset {
            id: self.id.clone(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_dims: self.image_dims,
            split: self.split,
            norm: self.norm.clone(),
        }
    }

    /// Same images under new labels.
    pub fn relabeled(&self, labels: Vec<usize>, num_classes: usize) -> Result<ImageDataset> {
        let mut out = ImageDataset::new(self.id.clone(), self.images.clone(), labels, num_classes, self.image_dims)?;
        out.split = self.split;
        out.norm = self.norm.clone();
        Ok(out)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Population mean and standard deviation of every channel.
    pub fn fit_norm(&self) -> Result<ChannelNorm> {
        if self.is_empty() {
            return Err(Error::EmptyDataset(self.id.clone()));
        }
        let [c, h, w] = self.image_dims;
        let plane = h * w;
        let count = (plane * self.len()) as f64;
        let mut mean = vec![0.0; c];
        for im in &self.images {
            for (ch, m) in mean.iter_mut().enumerate() {
                *m += im.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for im in &self.images {
            for (ch, v) in var.iter_mut().enumerate() {
                *v += im.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|x| (x - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        let std = var.iter().map(|v| (v / count).sqrt().max(1e-6)).collect();
        Ok(ChannelNorm { mean, std })
    }

    /// Apply `norm`. Fails if the dataset is already standardized.
    pub fn standardize(&self, norm: &ChannelNorm) -> Result<ImageDataset> {
        if self.norm.is_some() {
            return Err(Error::invalid(format!("dataset {} is already standardized", self.id)));
        }
        if norm.mean.len() != self.image_dims[0] || norm.std.len() != self.image_dims[0] {
            return Err(Error::DimensionMismatch(format!(
                "{}-channel norm for {}-channel images",
                norm.mean.len(),
                self.image_dims[0]
            )));
        }
        let mut out = self.map_channels(|ch, v| (v - norm.mean[ch]) / norm.std[ch])?;
        out.norm = Some(norm.clone());
        Ok(out)
    }

    /// Undo a previous [`standardize`](Self::standardize).
    pub fn destandardize(&self) -> Result<ImageDataset> {
        let norm = self
            .norm
            .clone()
            .ok_or_else(|| Error::invalid(format!("dataset {} is not standardized", self.id)))?;
        let mut out = self.map_channels(|ch, v| v * norm.std[ch] + norm.mean[ch])?;
        out.norm = None;
        Ok(out)
    }

    fn map_channels(&self, f: impl Fn(usize, f64) -> f64) -> Result<ImageDataset> {
        let [_, h, w] = self.image_dims;
        let plane = h * w;
        let images = self
            .images
            .iter()
            .map(|im| {
                let data = im
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| f(i / plane, v))
                    .collect();
                NdArray::from_vec(&self.image_dims, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageDataset {
            images,
            ..self.clone()
        })
    }
}

/// Stratified train/val/test partition.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: ImageDataset,
    pub val: ImageDataset,
    pub test: ImageDataset,
}

impl Splits {
    /// Standardize all three splits with statistics of the training split.
    pub fn standardized(&self) -> Result<Splits> {
        let norm = self.train.fit_norm()?;
        Ok(Splits {
            train: self.train.standardize(&norm)?,
            val: self.val.standardize(&norm)?,
            test: self.test.standardize(&norm)?,
        })
    }
}

/// Per-class counts by largest remainder, so zero fractions get exactly zero.
fn allocate(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = raw[i].floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).filter(|&i| fractions[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Class-stratified split, deterministic per `seed`. Every class needs at
/// least three samples.
pub fn split(dataset: &ImageDataset, fractions: (f64, f64, f64), seed: u64) -> Result<Splits> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f) || f.is_nan()) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Constraint(format!("split fractions {fr:?} must be in [0,1] and sum to 1")));
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..dataset.num_classes() {
        let members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 3 {
            return Err(Error::Constraint(format!(
                "class {class} of {} has {} samples; stratification needs at least 3",
                dataset.id,
                members.len()
            )));
        }
        let mut r = rng::stream(seed, "split", class as u64);
        let order = rng::permutation(members.len(), &mut r);
        let counts = allocate(members.len(), fr);
        let mut cursor = 0;
        for (part, &count) in parts.iter_mut().zip(counts.iter()) {
            part.extend(order[cursor..cursor + count].iter().map(|&o| members[o]));
            cursor += count;
        }
    }
    for p in parts.iter_mut() {
        p.sort_unstable();
    }
    Ok(Splits {
        train: dataset.subset(&parts[0]).with_split(Split::Train),
        val: dataset.subset(&parts[1]).with_split(Split::Val),
        test: dataset.subset(&parts[2]).with_split(Split::Test),
    })
}
