//! Ways of turning encoder output into class logits: a trained linear head,
//! a slice of the frozen pretraining head, or a direct pick of feature
//! channels (fixed prefix or the most noise-sensitive ones).

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{BoundEncoder, FrozenEncoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{NdArray, Tape, Var};

pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HeadMode {
    /// Trainable `k×d` linear head, optimized jointly with the prompts.
    Tuning { k: usize },
    /// First `k` logits of the frozen pretraining head.
    Freezing { k: usize },
    /// Feature channels `0..k` used as logits.
    HardCoded { k: usize },
    /// The `k` feature channels with the highest variance under `noise_count`
    /// Gaussian noise images.
    Active { k: usize, noise_count: usize, seed: u64 },
}

impl HeadMode {
    pub fn k(&self) -> usize {
        match *self {
            HeadMode::Tuning { k } | HeadMode::Freezing { k } | HeadMode::HardCoded { k } | HeadMode::Active { k, .. } => k,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Tuning { .. } => "tuning",
            HeadMode::Freezing { .. } => "freezing",
            HeadMode::HardCoded { .. } => "hardcoded",
            HeadMode::Active { .. } => "active",
        }
    }
}

/// A concrete logit map built for one encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum LogitMap {
    Tuning { weight: NdArray, bias: NdArray },
    Freezing { classes: Vec<usize> },
    HardCoded { channels: Vec<usize> },
    Active { channels: Vec<usize> },
}

impl LogitMap {
    pub fn tag(&self) -> u8 {
        match self {
            LogitMap::Tuning { .. } => 0,
            LogitMap::Freezing { .. } => 1,
            LogitMap::HardCoded { .. } => 2,
            LogitMap::Active { .. } => 3,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            LogitMap::Tuning { weight, .. } => weight.dims()[0],
            LogitMap::Freezing { classes } => classes.len(),
            LogitMap::HardCoded { channels } | LogitMap::Active { channels } => channels.len(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, LogitMap::Tuning { .. })
    }

    /// Record the map on `tape`; a tuning head becomes trainable leaves when
    /// `trainable` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundHead<'t> {
        match self {
            LogitMap::Tuning { weight, bias } => {
                let (w, b) = if trainable {
                    (tape.leaf(weight.clone()), tape.leaf(bias.clone()))
                } else {
                    (tape.constant(weight.clone()), tape.constant(bias.clone()))
                };
                BoundHead::Linear { weight: w, bias: b }
            }
            LogitMap::Freezing { classes } => BoundHead::Pretrained(classes.clone()),
            LogitMap::HardCoded { channels } | LogitMap::Active { channels } => BoundHead::Channels(channels.clone()),
        }
    }

    /// Logits for plain `B×d` feature rows, without a tape.
    pub fn logits_from_features(&self, encoder: &FrozenEncoder, features: &NdArray) -> Result<NdArray> {
        let tape = Tape::new(0);
        let enc = encoder.bind(&tape);
        let head = self.bind(&tape, false);
        Ok(head.logits(&enc, &tape.constant(features.clone()))?.value())
    }
}

pub enum BoundHead<'t> {
    Linear { weight: Var<'t>, bias: Var<'t> },
    Pretrained(Vec<usize>),
    Channels(Vec<usize>),
}

impl<'t> BoundHead<'t> {
    pub fn logits(&self, encoder: &BoundEncoder<'t>, features: &Var<'t>) -> Result<Var<'t>> {
        match self {
            BoundHead::Linear { weight, bias } => features.linear(weight, Some(bias)),
            BoundHead::Pretrained(classes) => encoder.head(features)?.select_cols(classes),
            BoundHead::Channels(channels) => features.select_cols(channels),
        }
    }

    /// Trainable leaves (weight, bias) of a tuning head.
    pub fn params(&self) -> Option<(Var<'t>, Var<'t>)> {
        match self {
            BoundHead::Linear { weight, bias } => Some((*weight, *bias)),
            _ => None,
        }
    }
}

/// Indices of the `k` largest entries, largest first; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Build the logit map for `mode`. `seed` initializes a tuning head.
pub fn build_head(encoder: &FrozenEncoder, mode: &HeadMode, seed: u64) -> Result<LogitMap> {
    let k = mode.k();
    if k == 0 {
        return Err(Error::invalid("head needs at least one class"));
    }
    let d = encoder.feature_dim();
    match *mode {
        HeadMode::Tuning { k } => {
            let mut r = rng::stream(seed, "head-init", 0);
            let dist = Normal::new(0.0, HEAD_INIT_STD).expect("positive std");
            let weight = NdArray::from_vec(&[k, d], (0..k * d).map(|_| dist.sample(&mut r)).collect())?;
            Ok(LogitMap::Tuning {
                weight,
                bias: NdArray::zeros(&[k])?,
            })
        }
        HeadMode::Freezing { k } => {
            if k > encoder.head_dim() {
                return Err(Error::Constraint(format!(
                    "{k} classes exceed the frozen head width {}",
                    encoder.head_dim()
                )));
            }
            Ok(LogitMap::Freezing { classes: (0..k).collect() })
        }
        HeadMode::HardCoded { k } => {
            if k > d {
                return Err(Error::Constraint(format!("{k} classes exceed feature width {d}")));
            }
            Ok(LogitMap::HardCoded { channels: (0..k).collect() })
        }
        HeadMode::Active { k, noise_count, seed } => {
            if k > d {
                return Err(Error::Constraint(format!("{k} classes exceed feature width {d}")));
            }
            let var = encoder.probe_channel_variance(noise_count, seed)?;
            Ok(LogitMap::Active { channels: top_k(&var, k) })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_picks_most_active() {
        let mut ch = top_k(&[0.1, 5.0, 0.2, 3.0], 2);
        assert_eq!(ch, vec![1, 3]);
        ch = top_k(&[1.0, 2.0, 2.0, 0.5], 2);
        assert_eq!(ch, vec![1, 2]);
    }
}
