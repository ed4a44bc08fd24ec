//! Mode-mix generator: a family of synthetic image datasets whose diversity
//! is set by the number of modes. Every mode owns a palette colour and a
//! pattern family; classes inside a mode differ in pattern frequency and
//! phase.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::NdArray;

/// Eight RGB anchors on the corners of a shrunken colour cube, ordered so
/// that any prefix is spread out.
pub const PALETTE: [[f64; 3]; 8] = [
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.9, 0.9, 0.9],
    [0.1, 0.1, 0.1],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    HStripes,
    VStripes,
    Checker,
    Blob,
}

pub const PATTERNS: [Pattern; 4] = [Pattern::HStripes, Pattern::VStripes, Pattern::Checker, Pattern::Blob];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub modes: usize,
    pub classes_per_mode: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub jitter: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            modes: 1,
            classes_per_mode: 2,
            samples_per_class: 40,
            jitter: 0.15,
            height: 32,
            width: 32,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.modes * self.classes_per_mode
    }

    pub fn default_id(&self) -> String {
        format!(
            "modemix-m{}-c{}-n{}-s{}",
            self.modes, self.classes_per_mode, self.samples_per_class, self.seed
        )
    }

    fn validate(&self) -> Result<()> {
        if self.modes == 0 || self.modes > PALETTE.len() {
            return Err(Error::Constraint(format!("modes must be in 1..={}, got {}", PALETTE.len(), self.modes)));
        }
        if self.classes_per_mode == 0 || self.samples_per_class == 0 {
            return Err(Error::Constraint("classes_per_mode and samples_per_class must be positive".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Constraint(format!("image extent {}×{} too small", self.height, self.width)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Constraint(format!("jitter must be finite and ≥ 0, got {}", self.jitter)));
        }
        Ok(())
    }
}

/// Pattern intensity in `[0,1]` at pixel `(y, x)`.
fn intensity(pattern: Pattern, freq: f64, phase: f64, y: usize, x: usize, h: usize, w: usize) -> f64 {
    let fy = (y as f64 + 0.5) / h as f64;
    let fx = (x as f64 + 0.5) / w as f64;
    match pattern {
        Pattern::HStripes => 0.5 + 0.5 * (2.0 * PI * freq * fy + phase).sin(),
        Pattern::VStripes => 0.5 + 0.5 * (2.0 * PI * freq * fx + phase).sin(),
        Pattern::Checker => 0.5 + 0.5 * (2.0 * PI * freq * fx + phase).sin() * (2.0 * PI * freq * fy + phase).sin(),
        Pattern::Blob => {
            let r = ((fx - 0.5).powi(2) + (fy - 0.5).powi(2)).sqrt();
            0.5 + 0.5 * (2.0 * PI * freq * r * 1.5 + phase).cos()
        }
    }
}

/// Render the dataset described by `spec`. Labels are mode-major:
/// `mode · classes_per_mode + class`.
pub fn generate_modemix(spec: &SyntheticSpec) -> Result<ImageDataset> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut rng = rng::stream(spec.seed, "modemix", 0);
    let noise = Normal::new(0.0, spec.jitter.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut images = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for mode in 0..spec.modes {
        let color = PALETTE[mode];
        let pattern = PATTERNS[mode % PATTERNS.len()];
        for class in 0..spec.classes_per_mode {
            let freq = 1.0 + class as f64;
            let phase = PI * class as f64 / spec.classes_per_mode as f64;
            let base: Vec<f64> = (0..plane)
                .map(|i| intensity(pattern, freq, phase, i / w, i % w, h, w))
                .collect();
            for _ in 0..spec.samples_per_class {
                let mut data = Vec::with_capacity(3 * plane);
                for &col in &color {
                    for &t in &base {
                        let v = t * col + (1.0 - t) * (1.0 - col);
                        let n = if spec.jitter > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        data.push((v + n).clamp(0.0, 1.0));
                    }
                }
                images.push(NdArray::from_vec(&[3, h, w], data)?);
                labels.push(mode * spec.classes_per_mode + class);
            }
        }
    }
    ImageDataset::new(spec.default_id(), images, labels, spec.num_classes(), [3, h, w])
}
