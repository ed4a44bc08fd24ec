//! Dataset diversity as the mean distance between randomly drawn image
//! pairs, measured in encoder feature space or raw pixel space.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cluster::euclidean;
use crate::data::ImageDataset;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::rng;

pub const DEFAULT_PAIRS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityMetric {
    EncoderFeature,
    Pixel,
}

impl DiversityMetric {
    pub fn name(&self) -> &'static str {
        match self {
            DiversityMetric::EncoderFeature => "encoder_feature",
            DiversityMetric::Pixel => "pixel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub dataset: String,
    pub metric: DiversityMetric,
    pub pairs: usize,
    /// Mean pair distance, times 100.
    pub score: f64,
    /// Standard deviation of the pair distances, times 100.
    pub std: f64,
    pub seed: u64,
}

/// `pairs` index pairs with distinct members, drawn uniformly and with
/// replacement across pairs.
pub fn sample_pairs(n: usize, pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n < 2 {
        return Err(Error::invalid(format!("need at least 2 items to draw pairs, have {n}")));
    }
    let mut r = rng::stream(seed, "diversity-pairs", 0);
    Ok((0..pairs)
        .map(|_| {
            let a = r.gen_range(0..n);
            let mut b = r.gen_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        })
        .collect())
}

/// Mean and population standard deviation (both ×100) of the distances of
/// the sampled pairs of `points`.
pub fn pairwise_score(points: &[Vec<f64>], pairs: usize, seed: u64) -> Result<(f64, f64)> {
    if pairs == 0 {
        return Err(Error::invalid("pair count must be ≥ 1"));
    }
    let d: Vec<f64> = sample_pairs(points.len(), pairs, seed)?
        .into_iter()
        .map(|(a, b)| euclidean(&points[a], &points[b]))
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64;
    Ok((100.0 * mean, 100.0 * var.sqrt()))
}

pub fn diversity_score(
    dataset: &ImageDataset,
    encoder: &FrozenEncoder,
    metric: DiversityMetric,
    pairs: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if dataset.len() < 2 {
        return Err(Error::invalid(format!(
            "diversity of {} needs at least 2 images, has {}",
            dataset.id,
            dataset.len()
        )));
    }
    let points = match metric {
        DiversityMetric::EncoderFeature => encoder.dataset_features(dataset)?,
        DiversityMetric::Pixel => dataset.images().iter().map(|im| im.to_vec()).collect(),
    };
    let (score, std) = pairwise_score(&points, pairs, seed)?;
    Ok(DiversityReport {
        dataset: dataset.id.clone(),
        metric,
        pairs,
        score,
        std,
        seed,
    })
}
