//! Diversity-adaptive partition: average-linkage agglomeration of probe
//! features, a distance-threshold cut, per-cluster prototypes and
//! nearest-prototype routing.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::ImageDataset;
use crate::encoder::FrozenEncoder;
use crate::error::{Error, Result};
use crate::rng;

/// Row-major `n×d` feature matrix with the source sample index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    sample_ids: Vec<usize>,
    /// Fingerprint of the encoder that produced the rows (0 when synthetic).
    pub fingerprint: u64,
}

impl FeatureMatrix {
    pub fn new(rows: Vec<Vec<f64>>, sample_ids: Vec<usize>, fingerprint: u64) -> Result<Self> {
        if rows.len() != sample_ids.len() {
            return Err(Error::DimensionMismatch(format!("{} rows for {} sample ids", rows.len(), sample_ids.len())));
        }
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch("ragged feature rows".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature value"));
        }
        Ok(FeatureMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
            sample_ids,
            fingerprint,
        })
    }

    /// Rows indexed `0..n` with no encoder attached.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let ids = (0..rows.len()).collect();
        Self::new(rows, ids, 0)
    }

    /// Unprompted encoder features of `dataset[indices]`.
    pub fn from_encoder(encoder: &FrozenEncoder, dataset: &ImageDataset, indices: &[usize]) -> Result<Self> {
        let rows = encoder.features_of(dataset, indices)?;
        Self::new(rows, indices.to_vec(), encoder.fingerprint())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub left: usize,
    pub right: usize,
    pub distance: f64,
    pub id: usize,
    pub size: usize,
}

/// Stepwise dendrogram. Leaves are `0..n`; the cluster created by merge `k`
/// gets id `n + k`. `left < right` in every merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub observations: usize,
    pub merges: Vec<Merge>,
}

impl Dendrogram {
    /// Largest merge distance, or 0 for a single observation.
    pub fn height(&self) -> f64 {
        self.merges.last().map_or(0.0, |m| m.distance)
    }

    pub fn is_monotone(&self) -> bool {
        self.merges.windows(2).all(|w| w[0].distance <= w[1].distance)
    }
}

/// Candidate order: smaller distance first, then the smaller `(min id, max id)` pair.
fn pair_cmp(d1: f64, k1: (usize, usize), d2: f64, k2: (usize, usize)) -> Ordering {
    d1.total_cmp(&d2).then(k1.cmp(&k2))
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Average-linkage (UPGMA) agglomeration under the Euclidean metric.
///
/// Equal-distance candidates are resolved toward the lexicographically
/// smallest `(min id, max id)` pair of cluster ids.
pub fn agglomerate(features: &FeatureMatrix) -> Result<Dendrogram> {
    let n = features.rows();
    if n == 0 {
        return Err(Error::invalid("cannot cluster zero observations"));
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let d = euclidean(features.row(i), features.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut active = vec![true; n];
    let mut cid: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    let mut nn = vec![usize::MAX; n];

    let best_for = |i: usize, dist: &[f64], active: &[bool], cid: &[usize]| -> usize {
        let mut best = usize::MAX;
        for j in 0..n {
            if j == i || !active[j] {
                continue;
            }
            if best == usize::MAX
                || pair_cmp(dist[i * n + j], key(cid[i], cid[j]), dist[i * n + best], key(cid[i], cid[best])) == Ordering::Less
            {
                best = j;
            }
        }
        best
    };
    for i in 0..n {
        nn[i] = best_for(i, &dist, &active, &cid);
    }

    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut a = usize::MAX;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let j = nn[i];
            if a == usize::MAX
                || pair_cmp(dist[i * n + j], key(cid[i], cid[j]), dist[a * n + nn[a]], key(cid[a], cid[nn[a]])) == Ordering::Less
            {
                a = i;
            }
        }
        let b = nn[a];
        let d = dist[a * n + b];
        let new_id = n + step;
        merges.push(Merge {
            left: cid[a].min(cid[b]),
            right: cid[a].max(cid[b]),
            distance: d,
            id: new_id,
            size: size[a] + size[b],
        });

        // the merged cluster lives in slot `a`
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let v = (sa * dist[a * n + k] + sb * dist[b * n + k]) / (sa + sb);
            dist[a * n + k] = v;
            dist[k * n + a] = v;
        }
        active[b] = false;
        size[a] += size[b];
        cid[a] = new_id;

        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == a || nn[k] == a || nn[k] == b {
                nn[k] = best_for(k, &dist, &active, &cid);
            } else if pair_cmp(dist[k * n + a], key(cid[k], cid[a]), dist[k * n + nn[k]], key(cid[k], cid[nn[k]])) == Ordering::Less {
                nn[k] = a;
            }
        }
    }
    Ok(Dendrogram { observations: n, merges })
}

/// Flat clustering obtained from a dendrogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterCut {
    /// Cluster id per observation, numbered by first appearance.
    pub labels: Vec<usize>,
    pub clusters: usize,
    pub threshold: f64,
}

impl ClusterCut {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.clusters];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Apply merges up to distance `threshold`; if more than `max_clusters`
/// remain, keep merging regardless of distance until the cap is met.
pub fn cut(dendrogram: &Dendrogram, threshold: f64, max_clusters: Option<usize>) -> Result<ClusterCut> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("cut threshold must be > 0, got {threshold}")));
    }
    if max_clusters == Some(0) {
        return Err(Error::invalid("max_clusters must be ≥ 1"));
    }
    let n = dendrogram.observations;
    let cap = max_clusters.unwrap_or(n).max(1);
    let mut parent: Vec<usize> = (0..n + dendrogram.merges.len()).collect();
    let mut remaining = n;
    for m in &dendrogram.merges {
        if m.distance > threshold && remaining <= cap {
            break;
        }
        let (l, r) = (find(&mut parent, m.left), find(&mut parent, m.right));
        parent[l] = m.id;
        parent[r] = m.id;
        remaining -= 1;
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        let label = match roots.iter().position(|&x| x == r) {
            Some(p) => p,
            None => {
                roots.push(r);
                roots.len() - 1
            }
        };
        labels.push(label);
    }
    Ok(ClusterCut {
        labels,
        clusters: roots.len(),
        threshold,
    })
}

/// Cluster centroids in feature space, tied to the encoder that made them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    pub threshold: f64,
    pub fingerprint: u64,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, |c| c.len())
    }

    pub fn check_fingerprint(&self, encoder: &FrozenEncoder) -> Result<()> {
        if self.fingerprint != encoder.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint,
                found: encoder.fingerprint(),
            });
        }
        Ok(())
    }

    /// Drop centroid `index`, shifting later ids down by one.
    pub fn remove(&mut self, index: usize) {
        self.centroids.remove(index);
    }
}

/// Mean feature of every cluster in `cut`.
pub fn prototypes(features: &FeatureMatrix, cut: &ClusterCut) -> Result<PrototypeSet> {
    if cut.labels.len() != features.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} feature rows",
            cut.labels.len(),
            features.rows()
        )));
    }
    let d = features.cols();
    let mut sums = vec![vec![0.0; d]; cut.clusters];
    let mut counts = vec![0usize; cut.clusters];
    for (i, &l) in cut.labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        debug_assert!(c > 0, "cluster cut labels must be surjective");
        s.iter_mut().for_each(|v| *v /= c as f64);
    }
    Ok(PrototypeSet {
        centroids: sums,
        threshold: cut.threshold,
        fingerprint: features.fingerprint,
    })
}

/// Index of the nearest centroid by squared Euclidean distance; ties go to
/// the lowest index.
pub fn route(feature: &[f64], prototypes: &PrototypeSet) -> Result<usize> {
    if prototypes.is_empty() {
        return Err(Error::invalid("routing against an empty prototype set"));
    }
    if feature.len() != prototypes.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature of length {} vs prototypes of dimension {}",
            feature.len(),
            prototypes.dim()
        )));
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in prototypes.centroids.iter().enumerate() {
        let d = squared_distance(feature, c);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok(best)
}

/// Subset index of every sample of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub subsets: Vec<usize>,
    pub count: usize,
}

impl PartitionAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.count];
        for &t in &self.subsets {
            s[t] += 1;
        }
        s
    }

    pub fn members(&self, subset: usize) -> Vec<usize> {
        (0..self.subsets.len()).filter(|&i| self.subsets[i] == subset).collect()
    }
}

/// Route every sample's unprompted features to its nearest prototype.
pub fn partition(dataset: &ImageDataset, encoder: &FrozenEncoder, prototypes: &PrototypeSet) -> Result<PartitionAssignment> {
    prototypes.check_fingerprint(encoder)?;
    let feats = encoder.dataset_features(dataset)?;
    let subsets = feats.iter().map(|f| route(f, prototypes)).collect::<Result<Vec<_>>>()?;
    Ok(PartitionAssignment {
        subsets,
        count: prototypes.len(),
    })
}

/// Uniform probe subset of at most `size` samples, without replacement.
pub fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, "probe", 0);
    let mut idx = rng::sample_without_replacement(n, size, &mut r);
    idx.sort_unstable();
    idx
}

pub const CALIBRATION_RESOLUTION: f64 = 1e-3;

/// Threshold derived from a single-mode reference set: the smallest τ (to
/// within [`CALIBRATION_RESOLUTION`]) that keeps the reference in one
/// cluster, multiplied by `scale`.
pub fn calibrate_threshold(encoder: &FrozenEncoder, reference: &ImageDataset, probe_size: usize, scale: f64, seed: u64) -> Result<f64> {
    if reference.len() < 2 {
        return Err(Error::invalid(format!(
            "calibration reference {} needs at least 2 images, has {}",
            reference.id,
            reference.len()
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Constraint(format!("threshold scale must be positive, got {scale}")));
    }
    let probe = probe_indices(reference.len(), probe_size, seed);
    let feats = FeatureMatrix::from_encoder(encoder, reference, &probe)?;
    Ok(single_cluster_threshold(&agglomerate(&feats)?)? * scale)
}

/// Binary search for the smallest threshold that yields one cluster.
pub fn single_cluster_threshold(dendrogram: &Dendrogram) -> Result<f64> {
    let mut lo = 0.0;
    let mut hi = dendrogram.height() + CALIBRATION_RESOLUTION;
    while hi - lo > CALIBRATION_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if cut(dendrogram, mid, None)?.clusters == 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
