//! Reptile-style meta prompt learning. Every meta dataset is partitioned
//! into groups; each meta batch chains a few plain gradient steps through
//! the groups in id order and then moves the meta prompt toward the mean of
//! the resulting snapshots.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::adapt::{build_partition, prompt_loss_grad};
use crate::cluster::PrototypeSet;
use crate::data::ImageDataset;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::head::{build_head, HeadMode, LogitMap};
use crate::optim::{Optimizer, OptimizerKind};
use crate::prompt::{FrameSpec, PromptBundle, PromptFrame};
use crate::rng;
use crate::tensor::NdArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    /// Inner (fast) learning rate.
    pub eta: f64,
    /// Meta step size, in (0, 1).
    pub gamma: f64,
    pub inner_steps: usize,
    pub meta_epochs: usize,
    /// Samples drawn from each group per meta batch.
    pub group_batch: usize,
    /// Apply Adam to the Reptile direction instead of the plain moving average.
    pub use_adam: bool,
    pub tau: Option<f64>,
    pub max_clusters: Option<usize>,
    pub probe_size: usize,
    /// Noise images used to pick active channels for each dataset's head.
    pub noise_count: usize,
    /// Seed of the noise stream; keep it equal to the one used at adaptation
    /// so the meta prompt is learned for the same channels.
    pub noise_seed: u64,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            eta: 0.5,
            gamma: 0.5,
            inner_steps: 4,
            meta_epochs: 20,
            group_batch: 32,
            use_adam: true,
            tau: None,
            max_clusters: None,
            probe_size: 1000,
            noise_count: 256,
            noise_seed: 0,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.inner_steps == 0 || self.meta_epochs == 0 || self.group_batch == 0 {
            return Err(Error::Constraint("inner_steps, meta_epochs and group_batch must be ≥ 1".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Constraint(format!("eta must be finite and ≥ 0, got {}", self.eta)));
        }
        Ok(())
    }
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::Constraint(format!("gamma must lie in (0, 1), got {gamma}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaTaskGroup {
    pub id: usize,
    /// Position of the source dataset in the list given to [`build_groups`].
    pub source: usize,
    pub dataset_id: String,
    pub members: Vec<usize>,
    pub classes: usize,
}

/// A meta dataset with the logit map its groups are trained under.
pub struct MetaSource<'a> {
    pub dataset: &'a ImageDataset,
    pub head: LogitMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaPrompt {
    pub frame: PromptFrame,
    /// `‖p' − p‖₂` of every meta update.
    pub update_norms: Vec<f64>,
    /// Mean group loss at the start of each meta epoch's inner loops.
    pub epoch_losses: Vec<f64>,
    pub source_ids: Vec<String>,
    pub config_snapshot: String,
}

#[derive(Serialize, Deserialize)]
struct MetaSnapshot {
    kind: String,
    threshold: Option<f64>,
    sources: Vec<String>,
    update_norms: Vec<f64>,
    epoch_losses: Vec<f64>,
    config: serde_json::Value,
}

impl MetaPrompt {
    /// Store as a one-prompt bundle with the meta flag set.
    pub fn to_bundle(&self, encoder: &FrozenEncoder) -> PromptBundle {
        PromptBundle {
            prompts: vec![self.frame.clone()],
            prototypes: PrototypeSet {
                centroids: vec![vec![0.0; encoder.feature_dim()]],
                threshold: f64::INFINITY,
                fingerprint: encoder.fingerprint(),
            },
            head: LogitMap::HardCoded { channels: Vec::new() },
            fingerprint: encoder.fingerprint(),
            config_snapshot: self.config_snapshot.clone(),
            meta: true,
        }
    }

    pub fn from_bundle(bundle: &PromptBundle) -> Result<Self> {
        if !bundle.meta || bundle.len() != 1 {
            return Err(Error::invalid(format!(
                "expected a meta prompt bundle with one prompt, got meta={} with {} prompts",
                bundle.meta,
                bundle.len()
            )));
        }
        let snap: MetaSnapshot = serde_json::from_str(&bundle.config_snapshot).map_err(|e| Error::Malformed {
            what: "meta prompt snapshot",
            msg: e.to_string(),
        })?;
        Ok(MetaPrompt {
            frame: bundle.prompts[0].clone(),
            update_norms: snap.update_norms,
            epoch_losses: snap.epoch_losses,
            source_ids: snap.sources,
            config_snapshot: bundle.config_snapshot.clone(),
        })
    }
}

/// Partition every meta dataset and number the groups globally.
pub fn build_groups(
    datasets: &[&ImageDataset],
    encoder: &FrozenEncoder,
    tau: Option<f64>,
    max_clusters: Option<usize>,
    probe_size: usize,
    seed: u64,
) -> Result<Vec<MetaTaskGroup>> {
    if datasets.is_empty() {
        return Err(Error::invalid("meta training needs at least one dataset"));
    }
    let mut groups = Vec::new();
    for (source, ds) in datasets.iter().enumerate() {
        let (_, assignment) = build_partition(ds, encoder, tau, max_clusters, probe_size, seed)?;
        for t in 0..assignment.count {
            groups.push(MetaTaskGroup {
                id: groups.len(),
                source,
                dataset_id: ds.id.clone(),
                members: assignment.members(t),
                classes: ds.num_classes(),
            });
        }
    }
    Ok(groups)
}

/// One batch per group, `min(b, |G_j|)` members drawn without replacement,
/// ordered by ascending group id. Empty groups are skipped.
pub fn sample_meta_batch(groups: &[MetaTaskGroup], b: usize, seed: u64, round: u64) -> Result<Vec<(usize, Vec<usize>)>> {
    if b == 0 {
        return Err(Error::invalid("meta batch size must be ≥ 1"));
    }
    let mut order: Vec<&MetaTaskGroup> = groups.iter().collect();
    order.sort_by_key(|g| g.id);
    let mut out = Vec::with_capacity(groups.len());
    for g in order {
        if g.members.is_empty() {
            warn!("meta group {} of {} is empty, skipping it", g.id, g.dataset_id);
            continue;
        }
        let mut r = rng::stream(seed, "meta-batch", round.wrapping_mul(1 << 20).wrapping_add(g.id as u64));
        let picks = rng::sample_without_replacement(g.members.len(), b.min(g.members.len()), &mut r);
        out.push((g.id, picks.into_iter().map(|i| g.members[i]).collect()));
    }
    Ok(out)
}

/// `steps` masked gradient-descent steps with learning rate `eta` on the
/// mean cross entropy of one batch, starting from `start`. Also returns the
/// loss before the first step.
pub fn inner_update(
    start: &PromptFrame,
    images: &NdArray,
    labels: &[usize],
    encoder: &FrozenEncoder,
    head: &LogitMap,
    eta: f64,
    steps: usize,
) -> Result<(PromptFrame, f64)> {
    if steps == 0 {
        return Err(Error::invalid("inner_update needs at least one step"));
    }
    let mut p = start.clone();
    let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, p.spec().numel());
    let mut first = f64::NAN;
    for s in 0..steps {
        let (loss, g) = prompt_loss_grad(encoder, head, &p, images, labels)?;
        if s == 0 {
            first = loss;
        }
        p.masked_step(&g, &mut opt, eta, 0.0)?;
    }
    Ok((p, first))
}

/// `p + γ · (1/K) Σ_j (p_j − p)`.
pub fn meta_update(meta: &PromptFrame, snapshots: &[PromptFrame], gamma: f64) -> Result<PromptFrame> {
    let direction = mean_offset(meta, snapshots)?;
    let mut out = meta.clone();
    let values = meta
        .values()
        .data()
        .iter()
        .zip(&direction)
        .map(|(p, d)| p + gamma * d)
        .collect();
    out.set_values(values)?;
    Ok(out)
}

/// `(1/K) Σ_j (p_j − p)` per component.
fn mean_offset(meta: &PromptFrame, snapshots: &[PromptFrame]) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::invalid("meta update needs at least one snapshot"));
    }
    let base = meta.values().data();
    let mut sum = vec![0.0; base.len()];
    for s in snapshots {
        if s.spec() != meta.spec() {
            return Err(Error::DimensionMismatch(format!(
                "snapshot frame {:?} vs meta frame {:?}",
                s.spec(),
                meta.spec()
            )));
        }
        for ((acc, v), p) in sum.iter_mut().zip(s.values().data()).zip(base) {
            *acc += v - p;
        }
    }
    let k = snapshots.len() as f64;
    Ok(sum.into_iter().map(|v| v / k).collect())
}

/// Active-mapping heads for each meta dataset.
pub fn meta_sources<'a>(datasets: &[&'a ImageDataset], encoder: &FrozenEncoder, cfg: &MetaConfig) -> Result<Vec<MetaSource<'a>>> {
    datasets
        .iter()
        .map(|ds| {
            let mode = HeadMode::Active {
                k: ds.num_classes(),
                noise_count: cfg.noise_count,
                seed: cfg.noise_seed,
            };
            Ok(MetaSource {
                dataset: ds,
                head: build_head(encoder, &mode, cfg.seed)?,
            })
        })
        .collect()
}

/// Fail when any meta dataset id is reused, or appears among `held_out`.
pub fn check_disjoint(meta_ids: &[String], held_out: &[String]) -> Result<()> {
    for (i, a) in meta_ids.iter().enumerate() {
        if meta_ids[..i].contains(a) {
            return Err(Error::Constraint(format!("meta dataset {a} is listed twice")));
        }
        if held_out.contains(a) {
            return Err(Error::Constraint(format!("dataset {a} is used both for meta training and evaluation")));
        }
    }
    Ok(())
}

pub fn meta_train(datasets: &[&ImageDataset], encoder: &FrozenEncoder, cfg: &MetaConfig) -> Result<MetaPrompt> {
    cfg.validate()?;
    let ids: Vec<String> = datasets.iter().map(|d| d.id.clone()).collect();
    check_disjoint(&ids, &[])?;
    let [c, h, w] = encoder.spec().input_dims();
    let spec = FrameSpec::scaled(c, h, w)?;
    for ds in datasets {
        if ds.image_dims() != [c, h, w] {
            return Err(Error::DimensionMismatch(format!(
                "meta dataset {} has images {:?}, encoder expects {:?}",
                ds.id,
                ds.image_dims(),
                [c, h, w]
            )));
        }
    }
    let groups = build_groups(datasets, encoder, cfg.tau, cfg.max_clusters, cfg.probe_size, cfg.seed)?;
    if groups.is_empty() {
        return Err(Error::invalid("meta training produced no groups"));
    }
    info!("meta training over {} groups from {} datasets", groups.len(), datasets.len());
    let sources = meta_sources(datasets, encoder, cfg)?;

    let mut meta = PromptFrame::zeros(spec)?;
    let mut opt = Optimizer::new(OptimizerKind::adam(), spec.numel());
    let mut update_norms = Vec::with_capacity(cfg.meta_epochs);
    let mut epoch_losses = Vec::with_capacity(cfg.meta_epochs);
    for epoch in 0..cfg.meta_epochs {
        let batch = sample_meta_batch(&groups, cfg.group_batch, cfg.seed, epoch as u64)?;
        if batch.is_empty() {
            return Err(Error::invalid("every meta group is empty"));
        }
        let mut current = meta.clone();
        let mut snapshots = Vec::with_capacity(batch.len());
        let mut loss_sum = 0.0;
        for (gid, members) in &batch {
            let src = &sources[groups[*gid].source];
            let images = src.dataset.batch(members)?;
            let labels = src.dataset.batch_labels(members);
            let (next, loss) = inner_update(&current, &images, &labels, encoder, &src.head, cfg.eta, cfg.inner_steps)?;
            loss_sum += loss;
            snapshots.push(next.clone());
            current = next;
        }
        let next = if cfg.use_adam {
            // Reptile direction as a pseudo-gradient, cosine-annealed step size
            let direction = mean_offset(&meta, &snapshots)?;
            let grad: Vec<f64> = direction.iter().map(|d| -d).collect();
            let lr = 0.5 * cfg.gamma * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.meta_epochs as f64).cos());
            let mut out = meta.clone();
            out.masked_step(&NdArray::from_vec(&spec.dims(), grad)?, &mut opt, lr, 0.0)?;
            out
        } else {
            meta_update(&meta, &snapshots, cfg.gamma)?
        };
        update_norms.push(next.values().sub(meta.values())?.norm());
        epoch_losses.push(loss_sum / batch.len() as f64);
        info!("meta epoch {}: mean group loss {:.4}", epoch + 1, loss_sum / batch.len() as f64);
        meta = next;
    }
    let snapshot = MetaSnapshot {
        kind: "meta".into(),
        threshold: cfg.tau,
        sources: ids.clone(),
        update_norms: update_norms.clone(),
        epoch_losses: epoch_losses.clone(),
        config: serde_json::to_value(cfg).expect("config serializes"),
    };
    Ok(MetaPrompt {
        frame: meta,
        update_norms,
        epoch_losses,
        source_ids: ids,
        config_snapshot: serde_json::to_string(&snapshot).expect("snapshot serializes"),
    })
}
