//! Diversity-aware adaptation: partition the training set by feature
//! clustering, learn one frame prompt per subset against the frozen encoder,
//! and evaluate by routing each input to its nearest prototype.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cluster::{self, ClusterCut, FeatureMatrix, PartitionAssignment, PrototypeSet};
use crate::data::ImageDataset;
use crate::encoder::{argmax, BoundEncoder, FrozenEncoder, INFER_BATCH};
use crate::error::{Error, Result};
use crate::head::{build_head, BoundHead, HeadMode, LogitMap};
use crate::optim::{Optimizer, OptimizerKind, WarmupCosine};
use crate::prompt::{FrameSpec, PromptBundle, PromptFrame, DEFAULT_INIT_STD};
use crate::rng;
use crate::tensor::{backward, NdArray, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub probe_size: usize,
    /// Cut threshold; `None` keeps everything in one cluster.
    pub tau: Option<f64>,
    /// Cluster cap; `None` means the training class count.
    pub max_clusters: Option<usize>,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 10,
            optimizer: OptimizerKind::adam(),
            lr: 0.1,
            weight_decay: 0.0,
            warmup_epochs: 10,
            batch_size: 64,
            probe_size: 1000,
            tau: None,
            max_clusters: None,
            init_std: DEFAULT_INIT_STD,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Constraint("epochs must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Constraint(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.probe_size == 0 {
            return Err(Error::Constraint("batch_size and probe_size must be ≥ 1".into()));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Constraint(format!("tau must be > 0, got {t}")));
            }
        }
        if self.max_clusters == Some(0) {
            return Err(Error::Constraint("max_clusters must be ≥ 1".into()));
        }
        if !(self.init_std >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Constraint("init_std and weight_decay must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub top1: f64,
    pub n_clusters: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
    pub n_clusters: usize,
    pub prompt_params: usize,
}

impl Metrics {
    pub fn rows(&self, split: &str) -> impl Iterator<Item = &EpochRecord> {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.rows(split).last()
    }

    pub fn at_epoch(&self, split: &str, epoch: usize) -> Option<&EpochRecord> {
        self.rows(split).find(|r| r.epoch == epoch)
    }
}

/// Loss and accuracy of a bundle on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub top1: f64,
    /// Number of samples routed to each prompt.
    pub routed: Vec<usize>,
}

#[derive(Serialize)]
struct Snapshot<'a> {
    kind: &'static str,
    dataset: &'a str,
    threshold: Option<f64>,
    n_clusters: usize,
    head: &'a HeadMode,
    config: &'a AdaptConfig,
}

fn check_inputs(train: &ImageDataset, encoder: &FrozenEncoder, mode: &HeadMode) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset(train.id.clone()));
    }
    if !encoder.is_frozen() {
        return Err(Error::Constraint("adaptation needs a frozen encoder".into()));
    }
    if train.image_dims() != encoder.spec().input_dims() {
        return Err(Error::DimensionMismatch(format!(
            "dataset {} has images {:?}, encoder expects {:?}",
            train.id,
            train.image_dims(),
            encoder.spec().input_dims()
        )));
    }
    if train.num_classes() > mode.k() {
        return Err(Error::Constraint(format!(
            "dataset {} has {} classes but the {} head maps only {}",
            train.id,
            train.num_classes(),
            mode.name(),
            mode.k()
        )));
    }
    Ok(())
}

/// Cluster a probe subset of `train` and return prototypes plus the
/// assignment of every training sample, with empty subsets folded away.
pub fn build_partition(
    train: &ImageDataset,
    encoder: &FrozenEncoder,
    tau: Option<f64>,
    max_clusters: Option<usize>,
    probe_size: usize,
    seed: u64,
) -> Result<(PrototypeSet, PartitionAssignment)> {
    let probe = cluster::probe_indices(train.len(), probe_size, seed);
    let feats = FeatureMatrix::from_encoder(encoder, train, &probe)?;
    let cut = match tau {
        Some(t) => {
            let dend = cluster::agglomerate(&feats)?;
            debug_assert!(dend.is_monotone());
            cluster::cut(&dend, t, Some(max_clusters.unwrap_or(train.num_classes())))?
        }
        None => ClusterCut {
            labels: vec![0; feats.rows()],
            clusters: 1,
            threshold: f64::INFINITY,
        },
    };
    let mut protos = cluster::prototypes(&feats, &cut)?;
    let mut assignment = cluster::partition(train, encoder, &protos)?;
    // a prototype that captures no training sample is merged into its
    // nearest neighbour; with zero mass there, the neighbour is unchanged
    while let Some(empty) = assignment.sizes().iter().position(|&s| s == 0) {
        warn!(
            "{}: subset {empty} of {} received no training samples, merging it into its nearest prototype",
            train.id,
            protos.len()
        );
        protos.remove(empty);
        assignment = cluster::partition(train, encoder, &protos)?;
    }
    Ok((protos, assignment))
}

/// Mean cross entropy of one prompted group, scaled by `weight`, recorded on
/// `tape`. Returns the scaled loss and the logits.
pub(crate) fn group_loss<'t>(
    tape: &'t Tape,
    enc: &BoundEncoder<'t>,
    head: &BoundHead<'t>,
    prompt: Var<'t>,
    images: NdArray,
    labels: &[usize],
    weight: f64,
) -> Result<(Var<'t>, Var<'t>)> {
    let x = tape.constant(images).add_batch(&prompt)?;
    let logits = head.logits(enc, &enc.features(&x)?)?;
    let loss = logits.cross_entropy(labels)?.scale(weight);
    Ok((loss, logits))
}

/// Mean cross entropy of `prompt` on one batch and its gradient with respect
/// to the prompt values.
pub fn prompt_loss_grad(
    encoder: &FrozenEncoder,
    head: &LogitMap,
    prompt: &PromptFrame,
    images: &NdArray,
    labels: &[usize],
) -> Result<(f64, NdArray)> {
    let tape = Tape::new(0);
    let enc = encoder.bind(&tape);
    let bound = head.bind(&tape, false);
    let p = tape.leaf(prompt.values().clone());
    let (loss, _) = group_loss(&tape, &enc, &bound, p, images.clone(), labels, 1.0)?;
    let grads = backward(&loss)?;
    let g = grads.get(&p).cloned().expect("prompt is a leaf");
    Ok((loss.value().data()[0], g))
}

fn row_hits(logits: &NdArray, labels: &[usize]) -> usize {
    let k = logits.dims()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Route, prompt and classify every sample of `dataset`.
pub fn evaluate(dataset: &ImageDataset, bundle: &PromptBundle, encoder: &FrozenEncoder) -> Result<Evaluation> {
    bundle.check_encoder(encoder)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset(dataset.id.clone()));
    }
    for &y in dataset.labels() {
        if y >= bundle.head.classes() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: bundle.head.classes(),
            });
        }
    }
    let assignment = cluster::partition(dataset, encoder, &bundle.prototypes)?;
    let mut loss = 0.0;
    let mut hits = 0;
    for t in 0..bundle.len() {
        let members = assignment.members(t);
        for chunk in members.chunks(INFER_BATCH) {
            let tape = Tape::new(0);
            let enc = encoder.bind(&tape);
            let head = bundle.head.bind(&tape, false);
            let p = tape.constant(bundle.prompts[t].values().clone());
            let labels = dataset.batch_labels(chunk);
            let (l, logits) = group_loss(&tape, &enc, &head, p, dataset.batch(chunk)?, &labels, chunk.len() as f64)?;
            loss += l.value().data()[0];
            hits += row_hits(&logits.value(), &labels);
        }
    }
    let n = dataset.len() as f64;
    Ok(Evaluation {
        loss: loss / n,
        top1: hits as f64 / n,
        routed: assignment.sizes(),
    })
}

/// Accuracy of the head on unprompted inputs.
pub fn zero_shot(dataset: &ImageDataset, encoder: &FrozenEncoder, head: &LogitMap) -> Result<Evaluation> {
    let bundle = single_prompt_bundle(encoder, head.clone(), PromptFrame::zeros(frame_for(encoder)?)?, dataset)?;
    evaluate(dataset, &bundle, encoder)
}

fn frame_for(encoder: &FrozenEncoder) -> Result<FrameSpec> {
    let [c, h, w] = encoder.spec().input_dims();
    FrameSpec::scaled(c, h, w)
}

fn single_prompt_bundle(encoder: &FrozenEncoder, head: LogitMap, prompt: PromptFrame, dataset: &ImageDataset) -> Result<PromptBundle> {
    Ok(PromptBundle {
        prompts: vec![prompt],
        prototypes: PrototypeSet {
            centroids: vec![vec![0.0; encoder.feature_dim()]],
            threshold: f64::INFINITY,
            fingerprint: encoder.fingerprint(),
        },
        head,
        fingerprint: encoder.fingerprint(),
        config_snapshot: format!("{{\"kind\":\"zero-shot\",\"dataset\":{:?},\"threshold\":null}}", dataset.id),
        meta: false,
    })
}

/// Learn one prompt per subset of `train`. `evals` are scored after every
/// epoch; `meta` initializes every prompt when given.
pub fn adapt(
    train: &ImageDataset,
    evals: &[&ImageDataset],
    encoder: &FrozenEncoder,
    meta: Option<&PromptFrame>,
    cfg: &AdaptConfig,
    mode: &HeadMode,
) -> Result<(PromptBundle, Metrics)> {
    cfg.validate()?;
    check_inputs(train, encoder, mode)?;
    let spec = frame_for(encoder)?;
    let mut head = build_head(encoder, mode, cfg.seed)?;
    let (protos, assignment) = build_partition(train, encoder, cfg.tau, cfg.max_clusters, cfg.probe_size, cfg.seed)?;
    let n_prompts = protos.len();
    info!("{}: {} subsets, sizes {:?}", train.id, n_prompts, assignment.sizes());

    let mut prompts = (0..n_prompts)
        .map(|i| match meta {
            Some(m) => PromptFrame::from_meta(spec, m),
            None => PromptFrame::random(spec, cfg.seed, i as u64, cfg.init_std),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opts: Vec<Optimizer> = (0..n_prompts).map(|_| Optimizer::new(cfg.optimizer, spec.numel())).collect();
    let mut head_opt = match &head {
        LogitMap::Tuning { weight, bias } => Some((
            Optimizer::new(cfg.optimizer, weight.len()),
            Optimizer::new(cfg.optimizer, bias.len()),
        )),
        _ => None,
    };
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let schedule = WarmupCosine {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };

    let mut metrics = Metrics {
        records: Vec::new(),
        n_clusters: n_prompts,
        prompt_params: n_prompts * spec.learnable(),
    };
    let mut step = 0;
    let snapshot = |head: &LogitMap, prompts: &[PromptFrame]| -> Result<PromptBundle> {
        Ok(PromptBundle {
            prompts: prompts.to_vec(),
            prototypes: protos.clone(),
            head: head.clone(),
            fingerprint: encoder.fingerprint(),
            config_snapshot: serde_json::to_string(&Snapshot {
                kind: "adapt",
                dataset: &train.id,
                threshold: cfg.tau,
                n_clusters: n_prompts,
                head: mode,
                config: cfg,
            })
            .expect("snapshot serializes"),
            meta: false,
        })
    };

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let order = rng::permutation(train.len(), &mut rng::stream(cfg.seed, "adapt-shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new(0);
            let enc = encoder.bind(&tape);
            let bound = head.bind(&tape, true);
            let mut total: Option<Var> = None;
            let mut leaves = Vec::new();
            for (t, prompt) in prompts.iter().enumerate() {
                let group: Vec<usize> = batch.iter().copied().filter(|&i| assignment.subsets[i] == t).collect();
                if group.is_empty() {
                    continue;
                }
                let p = tape.leaf(prompt.values().clone());
                let labels = train.batch_labels(&group);
                let weight = group.len() as f64 / batch.len() as f64;
                let (l, logits) = group_loss(&tape, &enc, &bound, p, train.batch(&group)?, &labels, weight)?;
                hits += row_hits(&logits.value(), &labels);
                total = Some(match total {
                    Some(acc) => acc.add(&l)?,
                    None => l,
                });
                leaves.push((t, p));
            }
            let total = total.expect("non-empty batch");
            loss_sum += total.value().data()[0] * batch.len() as f64;
            let grads = backward(&total)?;
            let lr = schedule.lr(step);
            for (t, p) in leaves {
                let g = grads.get(&p).expect("prompt leaf");
                prompts[t].masked_step(g, &mut opts[t], lr, cfg.weight_decay)?;
            }
            if let (Some((w, b)), Some((ow, ob)), LogitMap::Tuning { weight, bias }) = (bound.params(), head_opt.as_mut(), &mut head) {
                let mut wv = weight.to_vec();
                ow.step(&mut wv, grads.get(&w).expect("head weight").data(), lr, cfg.weight_decay);
                let mut bv = bias.to_vec();
                ob.step(&mut bv, grads.get(&b).expect("head bias").data(), lr, 0.0);
                *weight = NdArray::from_vec(weight.dims(), wv)?;
                *bias = NdArray::from_vec(bias.dims(), bv)?;
            }
            step += 1;
        }
        let n = train.len() as f64;
        metrics.records.push(EpochRecord {
            epoch,
            split: train.split.to_string(),
            loss: loss_sum / n,
            top1: hits as f64 / n,
            n_clusters: n_prompts,
            seconds: started.elapsed().as_secs_f64(),
        });
        if !evals.is_empty() {
            let bundle = snapshot(&head, &prompts)?;
            for ds in evals {
                let started = Instant::now();
                let e = evaluate(ds, &bundle, encoder)?;
                metrics.records.push(EpochRecord {
                    epoch,
                    split: ds.split.to_string(),
                    loss: e.loss,
                    top1: e.top1,
                    n_clusters: n_prompts,
                    seconds: started.elapsed().as_secs_f64(),
                });
            }
        }
        info!("{} epoch {epoch}: train loss {:.4}", train.id, loss_sum / n);
    }
    Ok((snapshot(&head, &prompts)?, metrics))
}

/// The single-prompt baseline: the same pipeline with clustering disabled.
pub fn baseline_vp(
    train: &ImageDataset,
    evals: &[&ImageDataset],
    encoder: &FrozenEncoder,
    cfg: &AdaptConfig,
    mode: &HeadMode,
) -> Result<(PromptBundle, Metrics)> {
    let cfg = AdaptConfig { tau: None, ..cfg.clone() };
    adapt(train, evals, encoder, None, &cfg, mode)
}
