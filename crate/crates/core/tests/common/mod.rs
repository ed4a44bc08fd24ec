//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::sync::OnceLock;

use damvp_core::cluster::calibrate_threshold;
use damvp_core::data::config::DEFAULT_TAU_SCALE;
use damvp_core::data::{generate_modemix, split, ImageDataset, Splits, SyntheticSpec};
use damvp_core::encoder::{pretrain, FrozenEncoder, PretrainConfig};
use damvp_core::tensor::{backward, NdArray, Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// Largest norm-wise relative error between reverse-mode gradients of the
/// scalar built by `f` and central finite differences, over all inputs.
pub fn gradcheck<F>(inputs: &[NdArray], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new(0);
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &vars);
    let grads = backward(&out).expect("scalar output");
    let eval = |xs: &[NdArray]| -> f64 {
        let t = Tape::new(0);
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        f(&t, &vs).value().data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("leaf gradient").to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut a = plus[k].to_vec();
            a[i] += FD_STEP;
            plus[k] = NdArray::from_vec(inputs[k].dims(), a).unwrap();
            let mut b = minus[k].to_vec();
            b[i] -= FD_STEP;
            minus[k] = NdArray::from_vec(inputs[k].dims(), b).unwrap();
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Reduce any tensor to a scalar through fixed random weights, so every
/// output entry carries a distinct upstream gradient.
pub fn weighted_sum<'t>(tape: &'t Tape, x: Var<'t>, seed: u64) -> Var<'t> {
    let w = tape.constant(NdArray::randn(x.shape().dims(), seed).unwrap());
    x.mul(&w).unwrap().sum()
}

pub type Scalar = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;

/// A differentiable op under test: name, inputs and a scalar reduction.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<NdArray>,
    pub f: Scalar,
}

fn case(name: &'static str, inputs: Vec<NdArray>, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static) -> OpCase {
    OpCase { name, inputs, f: Box::new(f) }
}

/// Every differentiable tape op on random inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let r = |dims: &[usize], k: u64| NdArray::randn(dims, seed.wrapping_mul(31).wrapping_add(k)).unwrap();
    vec![
        case("add", vec![r(&[3, 4], 0), r(&[3, 4], 1)], |t, v| weighted_sum(t, v[0].add(&v[1]).unwrap(), 7)),
        case("sub", vec![r(&[3, 4], 0), r(&[3, 4], 1)], |t, v| weighted_sum(t, v[0].sub(&v[1]).unwrap(), 7)),
        case("mul", vec![r(&[3, 4], 0), r(&[3, 4], 1)], |t, v| weighted_sum(t, v[0].mul(&v[1]).unwrap(), 7)),
        case("scale", vec![r(&[3, 4], 0)], |t, v| weighted_sum(t, v[0].scale(-2.5), 7)),
        case("relu", vec![r(&[3, 4], 0)], |t, v| weighted_sum(t, v[0].relu(), 7)),
        case("sum", vec![r(&[2, 5], 0)], |_, v| v[0].sum()),
        case("mean", vec![r(&[3, 4], 0)], |_, v| v[0].mean()),
        case("add_batch", vec![r(&[2, 3, 4, 4], 0), r(&[3, 4, 4], 1)], |t, v| weighted_sum(t, v[0].add_batch(&v[1]).unwrap(), 3)),
        case("matmul", vec![r(&[3, 5], 0), r(&[5, 2], 1)], |t, v| weighted_sum(t, v[0].matmul(&v[1]).unwrap(), 3)),
        case("linear", vec![r(&[4, 6], 0), r(&[3, 6], 1), r(&[3], 2)], |t, v| weighted_sum(t, v[0].linear(&v[1], Some(&v[2])).unwrap(), 3)),
        case("conv2d", vec![r(&[2, 3, 6, 6], 0), r(&[4, 3, 3, 3], 1), r(&[4], 2)], |t, v| {
            weighted_sum(t, v[0].conv2d(&v[1], Some(&v[2]), 1, 1).unwrap(), 5)
        }),
        case("conv2d_strided", vec![r(&[1, 2, 7, 7], 0), r(&[3, 2, 3, 3], 1)], |t, v| weighted_sum(t, v[0].conv2d(&v[1], None, 2, 0).unwrap(), 5)),
        case("maxpool2d", vec![r(&[2, 3, 6, 6], 0)], |t, v| weighted_sum(t, v[0].maxpool2d().unwrap(), 5)),
        case("flatten", vec![r(&[2, 3, 2, 2], 0)], |t, v| weighted_sum(t, v[0].flatten().unwrap(), 9)),
        case("reshape", vec![r(&[2, 6], 0)], |t, v| weighted_sum(t, v[0].reshape(&[3, 4]).unwrap(), 9)),
        case("softmax", vec![r(&[3, 5], 0)], |t, v| weighted_sum(t, v[0].softmax().unwrap(), 9)),
        case("select_cols", vec![r(&[3, 6], 0)], |t, v| weighted_sum(t, v[0].select_cols(&[4, 0, 2]).unwrap(), 9)),
        case("cross_entropy", vec![r(&[4, 5], 0).scale(3.0)], |_, v| v[0].cross_entropy(&[0, 4, 2, 2]).unwrap()),
    ]
}

/// Gradient error of the full prompt objective (prompt added to images,
/// random 16×16 encoder, tuning head, cross entropy) for every prompt pixel.
pub fn prompt_objective_error(seed: u64) -> f64 {
    use damvp_core::encoder::EncoderSpec;
    use damvp_core::head::{build_head, HeadMode};
    let spec = EncoderSpec {
        height: 16,
        width: 16,
        ..Default::default()
    };
    let enc = FrozenEncoder::random(spec, seed).unwrap();
    let images = NdArray::randn(&[2, 3, 16, 16], 50 + seed).unwrap();
    let head = build_head(&enc, &HeadMode::Tuning { k: 4 }, seed).unwrap();
    let prompt = NdArray::randn(&[3, 16, 16], 70 + seed).unwrap().scale(0.1);
    gradcheck(&[prompt], |t, v| {
        let be = enc.bind(t);
        let x = t.constant(images.clone()).add_batch(&v[0]).unwrap();
        let logits = head.bind(t, false).logits(&be, &be.features(&x).unwrap()).unwrap();
        logits.cross_entropy(&[1, 3]).unwrap()
    })
}

/// One merge of the brute-force oracle: `(left id, right id, distance)`.
pub type OracleMerge = (usize, usize, f64);

/// Average linkage by exhaustive search: at every step the mean pairwise
/// distance of every pair of live clusters is recomputed from the raw
/// points. Ties go to the smallest `(min id, max id)`.
pub fn brute_force_upgma(points: &[Vec<f64>]) -> Vec<OracleMerge> {
    let n = points.len();
    let dist = |a: usize, b: usize| -> f64 { points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
    let mut live: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::new();
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..live.len() {
            for j in i + 1..live.len() {
                let (ida, ma) = &live[i];
                let (idb, mb) = &live[j];
                let mut total = 0.0;
                for &a in ma {
                    for &b in mb {
                        total += dist(a, b);
                    }
                }
                let d = total / (ma.len() * mb.len()) as f64;
                let key = ((*ida).min(*idb), (*ida).max(*idb));
                let better = match &best {
                    None => true,
                    Some((bd, bk, _, _)) => d < *bd || (d == *bd && key < *bk),
                };
                if better {
                    best = Some((d, key, i, j));
                }
            }
        }
        let (d, key, i, j) = best.unwrap();
        let (_, mb) = live.remove(j);
        let (_, mut ma) = live.remove(i);
        ma.extend(mb);
        live.push((n + step, ma));
        merges.push((key.0, key.1, d));
    }
    merges
}

/// Mean of the rows selected by `mask`.
pub fn mean_rows(rows: &[Vec<f64>], mask: impl Fn(usize) -> bool) -> Vec<f64> {
    let d = rows[0].len();
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for (i, r) in rows.iter().enumerate() {
        if mask(i) {
            count += 1;
            for (a, v) in acc.iter_mut().zip(r) {
                *a += v;
            }
        }
    }
    acc.into_iter().map(|v| v / count as f64).collect()
}

/// Index of the nearest centroid by exhaustive scan, lowest index on ties.
pub fn nearest(feature: &[f64], centroids: &[Vec<f64>]) -> usize {
    let d2 = |c: &Vec<f64>| feature.iter().zip(c).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut best = 0;
    for i in 1..centroids.len() {
        if d2(&centroids[i]) < d2(&centroids[best]) {
            best = i;
        }
    }
    best
}

/// Two-pass sample variance of each column.
pub fn column_variance(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mean = mean_rows(rows, |_| true);
    (0..mean.len())
        .map(|j| rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0))
        .collect()
}

/// Synthetic mode-mixture set with `80 / modes` samples per class, split
/// 0.6/0.2/0.2 and standardized on its training split.
pub fn downstream(modes: usize, seed: u64) -> Splits {
    let ds = generate_modemix(&SyntheticSpec {
        modes,
        classes_per_mode: 2,
        samples_per_class: 80 / modes,
        seed,
        ..Default::default()
    })
    .unwrap();
    split(&ds, (0.6, 0.2, 0.2), seed).unwrap().standardized().unwrap()
}

/// The pretext set: eight modes, labelled by mode.
pub fn pretext() -> Splits {
    let ds = generate_modemix(&SyntheticSpec {
        modes: 8,
        classes_per_mode: 2,
        samples_per_class: 40,
        seed: 100,
        ..Default::default()
    })
    .unwrap();
    let by_mode: Vec<usize> = ds.labels().iter().map(|l| l / 2).collect();
    let ds = ds.relabeled(by_mode, 8).unwrap().with_id("pretext-8mode");
    split(&ds, (0.8, 0.1, 0.1), 0).unwrap().standardized().unwrap()
}

/// Single-mode calibration reference.
pub fn reference() -> ImageDataset {
    let ds = generate_modemix(&SyntheticSpec {
        modes: 1,
        classes_per_mode: 2,
        samples_per_class: 100,
        seed: 999,
        ..Default::default()
    })
    .unwrap();
    split(&ds, (0.6, 0.2, 0.2), 0).unwrap().standardized().unwrap().train
}

pub struct Pretrained {
    pub encoder: FrozenEncoder,
    pub tau: f64,
    pub pretrain_seconds: f64,
}

/// Encoder pretrained on the pretext set (seed 0, 5 epochs) and its
/// calibrated threshold, built once per test binary.
pub fn pretrained() -> &'static Pretrained {
    static CELL: OnceLock<Pretrained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = std::time::Instant::now();
        let (encoder, _) = pretrain(&pretext().train, &PretrainConfig::default()).unwrap();
        let pretrain_seconds = t.elapsed().as_secs_f64();
        let tau = calibrate_threshold(&encoder, &reference(), 1000, DEFAULT_TAU_SCALE, 0).unwrap();
        Pretrained {
            encoder,
            tau,
            pretrain_seconds,
        }
    })
}
