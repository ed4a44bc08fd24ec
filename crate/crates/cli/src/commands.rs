use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use damvp_core::adapt::{adapt, evaluate, EpochRecord};
use damvp_core::cluster::calibrate_threshold;
use damvp_core::data::config::{TauName, TauSetting};
use damvp_core::data::{split, ImageDataset, RunConfig, Splits};
use damvp_core::diversity::diversity_score;
use damvp_core::encoder::{head_accuracy, pretrain, FrozenEncoder};
use damvp_core::head::HeadMode;
use damvp_core::meta::{check_disjoint, meta_train, MetaPrompt};
use damvp_core::prompt::PromptBundle;
use log::info;
use serde::Serialize;
use serde_json::json;

use crate::artifacts::{metrics_csv, read_sidecar, sidecar_path, with_suffix, write_atomic, write_json, EncoderSidecar, ManifestBuilder};
use crate::source::{parse_source, DataSource};
use crate::{HeadArg, SplitArg, UsageError};

pub fn source(text: &str) -> anyhow::Result<DataSource> {
    parse_source(text).map_err(|e| UsageError(format!("--data {text}: {e}")).into())
}

pub fn load_config(path: Option<&Path>, seed: u64) -> anyhow::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).expect("config serializes")
}

/// Split with the configured fractions and standardize with train statistics.
fn prepare(ds: &ImageDataset, cfg: &RunConfig) -> anyhow::Result<Splits> {
    Ok(split(ds, cfg.fractions(), cfg.seed)?.standardized()?)
}

struct LoadedEncoder {
    encoder: FrozenEncoder,
    sidecar: Option<EncoderSidecar>,
}

fn load_encoder(path: &Path) -> anyhow::Result<LoadedEncoder> {
    let encoder = FrozenEncoder::load(path).with_context(|| format!("loading encoder {}", path.display()))?;
    let sidecar = read_sidecar(&sidecar_path(path))?;
    if let Some(s) = &sidecar {
        let fp = format!("{:016x}", encoder.fingerprint());
        if s.fingerprint != fp {
            return Err(damvp_core::Error::Constraint(format!(
                "encoder metadata {} belongs to fingerprint {}, weights have {fp}",
                sidecar_path(path).display(),
                s.fingerprint
            ))
            .into());
        }
    }
    Ok(LoadedEncoder { encoder, sidecar })
}

impl LoadedEncoder {
    /// Refuse datasets that share an id with the pretext set.
    fn check_not_pretext(&self, id: &str) -> anyhow::Result<()> {
        if let Some(s) = &self.sidecar {
            if s.pretext == id {
                return Err(damvp_core::Error::Constraint(format!("dataset {id} was used to pretrain the encoder")).into());
            }
        }
        Ok(())
    }

    fn resolve_tau(&self, cfg: &RunConfig) -> anyhow::Result<Option<f64>> {
        Ok(match cfg.tau {
            _ if cfg.single_prompt => None,
            TauSetting::Value(t) => Some(t),
            TauSetting::Named(TauName::Inf) => None,
            TauSetting::Named(TauName::Calibrate) => Some(self.sidecar.as_ref().and_then(|s| s.tau).ok_or_else(|| {
                damvp_core::Error::Constraint("encoder has no calibrated threshold; run `damvp calibrate` or set tau in the config".into())
            })?),
        })
    }
}

fn print_csv_row(header: &[&str], row: &[String]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    w.write_record(row)?;
    Ok(w.into_inner()?)
}

pub fn pretrain_cmd(data: &str, out: &Path, epochs: Option<usize>, seed: u64, config: Option<&Path>) -> anyhow::Result<()> {
    let src = source(data)?;
    let mut cfg = load_config(config, seed)?;
    if let Some(e) = epochs {
        cfg.pretrain_epochs = e;
    }
    cfg.validate()?;
    let ds = src.load()?;
    let splits = prepare(&ds, &cfg)?;
    let (encoder, report) = pretrain(&splits.train, &cfg.pretrain_config())?;
    let val = if splits.val.is_empty() { None } else { Some(head_accuracy(&encoder, &splits.val)?) };
    encoder.save_weights(out).with_context(|| format!("writing {}", out.display()))?;
    let sidecar = EncoderSidecar {
        fingerprint: format!("{:016x}", encoder.fingerprint()),
        pretext: ds.id.clone(),
        tau: None,
        tau_scale: None,
        reference: None,
    };
    let side = sidecar_path(out);
    write_json(&side, &sidecar)?;
    let mut m = ManifestBuilder::new("pretrain", config_json(&cfg), seed);
    m.input(src.describe());
    m.encoder_fingerprint = Some(encoder.fingerprint());
    m.output(out)?;
    m.output(&side)?;
    m.write(&with_suffix(out, ".manifest.json"))?;
    println!(
        "{}",
        json!({
            "fingerprint": sidecar.fingerprint,
            "pretext": ds.id,
            "epoch_loss": report.epoch_loss,
            "train_accuracy": report.train_accuracy,
            "val_accuracy": val,
        })
    );
    Ok(())
}

pub fn calibrate_cmd(encoder: &Path, reference: &str, out: Option<&Path>, seed: u64, config: Option<&Path>) -> anyhow::Result<()> {
    let src = source(reference)?;
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let ds = src.load()?;
    enc.check_not_pretext(&ds.id)?;
    let train = prepare(&ds, &cfg)?.train;
    let tau = calibrate_threshold(&enc.encoder, &train, cfg.probe_size, cfg.tau_scale, seed)?;
    let mut sidecar = enc.sidecar.clone().unwrap_or_else(|| EncoderSidecar {
        fingerprint: format!("{:016x}", enc.encoder.fingerprint()),
        pretext: String::new(),
        tau: None,
        tau_scale: None,
        reference: None,
    });
    sidecar.tau = Some(tau);
    sidecar.tau_scale = Some(cfg.tau_scale);
    sidecar.reference = Some(ds.id.clone());
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| sidecar_path(encoder));
    write_json(&out, &sidecar)?;
    let mut m = ManifestBuilder::new("calibrate", config_json(&cfg), seed);
    m.input(encoder.display().to_string());
    m.input(src.describe());
    m.encoder_fingerprint = Some(enc.encoder.fingerprint());
    m.output(&out)?;
    m.write(&with_suffix(&out, ".manifest.json"))?;
    println!("{}", json!({ "tau": tau, "tau_scale": cfg.tau_scale, "reference": ds.id }));
    Ok(())
}

#[derive(Serialize)]
struct DiversitySummary<'a> {
    command: &'static str,
    dataset: &'a str,
    metric: &'static str,
    pairs: usize,
    seed: u64,
    score: f64,
    std: f64,
}

pub fn diversity_cmd(data: &str, encoder: &Path, pairs: Option<usize>, seed: u64, config: Option<&Path>, out: Option<&Path>) -> anyhow::Result<()> {
    let src = source(data)?;
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let ds = src.load()?;
    let train = prepare(&ds, &cfg)?.train;
    let pairs = pairs.unwrap_or(cfg.pairs);
    let r = diversity_score(&train, &enc.encoder, cfg.diversity_metric, pairs, seed)?;
    let csv = print_csv_row(
        &["dataset", "metric", "pairs", "seed", "score"],
        &[ds.id.clone(), r.metric.name().into(), pairs.to_string(), seed.to_string(), format!("{:.6}", r.score)],
    )?;
    print!("{}", String::from_utf8_lossy(&csv));
    if let Some(dir) = out {
        let csv_path = dir.join("diversity.csv");
        write_atomic(&csv_path, &csv)?;
        let summary = dir.join("summary.json");
        write_json(
            &summary,
            &DiversitySummary {
                command: "diversity",
                dataset: &ds.id,
                metric: r.metric.name(),
                pairs,
                seed,
                score: r.score,
                std: r.std,
            },
        )?;
        let mut m = ManifestBuilder::new("diversity", config_json(&cfg), seed);
        m.input(src.describe());
        m.input(encoder.display().to_string());
        m.encoder_fingerprint = Some(enc.encoder.fingerprint());
        m.output(&csv_path)?;
        m.output(&summary)?;
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

pub fn meta_train_cmd(datasets: &[String], encoder: &Path, config: Option<&Path>, out: &Path, seed: u64) -> anyhow::Result<()> {
    let sources = datasets.iter().map(|d| source(d)).collect::<anyhow::Result<Vec<_>>>()?;
    if sources.is_empty() {
        return Err(UsageError("--datasets needs at least one dataset".into()).into());
    }
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let tau = enc.resolve_tau(&cfg)?;
    let mut trains = Vec::new();
    for s in &sources {
        let ds = s.load()?;
        enc.check_not_pretext(&ds.id)?;
        trains.push(prepare(&ds, &cfg)?.train);
    }
    let ids: Vec<String> = trains.iter().map(|d| d.id.clone()).collect();
    check_disjoint(&ids, &[])?;
    let refs: Vec<&ImageDataset> = trains.iter().collect();
    let mp = meta_train(&refs, &enc.encoder, &cfg.meta_config(tau))?;
    let bundle_path = out.join("meta.damp");
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&bundle_path, &mp.to_bundle(&enc.encoder).to_bytes()?)?;
    let summary = out.join("summary.json");
    write_json(
        &summary,
        &json!({
            "command": "meta-train",
            "sources": ids,
            "threshold": tau,
            "epoch_losses": mp.epoch_losses,
            "update_norms": mp.update_norms,
        }),
    )?;
    let mut m = ManifestBuilder::new("meta-train", config_json(&cfg), seed);
    for s in &sources {
        m.input(s.describe());
    }
    m.input(encoder.display().to_string());
    m.encoder_fingerprint = Some(enc.encoder.fingerprint());
    m.output(&bundle_path)?;
    m.output(&summary)?;
    m.write(&out.join("manifest.json"))?;
    info!("meta prompt written to {}", bundle_path.display());
    Ok(())
}

fn head_mode(arg: HeadArg, cfg: &RunConfig, classes: usize) -> HeadMode {
    let k = cfg.head_classes.unwrap_or(classes);
    match arg {
        HeadArg::Tuning => HeadMode::Tuning { k },
        HeadArg::Freezing => HeadMode::Freezing { k },
        HeadArg::Hardcoded => HeadMode::HardCoded { k },
        HeadArg::Active => HeadMode::Active {
            k,
            noise_count: cfg.noise_count,
            seed: cfg.noise_seed,
        },
    }
}

#[derive(Serialize)]
struct AdaptSummary<'a> {
    command: &'static str,
    dataset: &'a str,
    method: &'static str,
    mode: &'static str,
    meta: Option<Vec<String>>,
    threshold: Option<f64>,
    n_clusters: usize,
    prompt_params: usize,
    train_loss: Option<f64>,
    val_top1: Option<f64>,
    test_top1: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn adapt_cmd(data: &str, encoder: &Path, meta: Option<&Path>, mode: HeadArg, config: Option<&Path>, out: &Path, seed: u64) -> anyhow::Result<()> {
    let src = source(data)?;
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let ds = src.load()?;
    enc.check_not_pretext(&ds.id)?;
    let meta_prompt = match meta {
        Some(p) => {
            let bundle = PromptBundle::load(p).with_context(|| format!("loading meta prompt {}", p.display()))?;
            bundle.check_encoder(&enc.encoder)?;
            let mp = MetaPrompt::from_bundle(&bundle)?;
            check_disjoint(&mp.source_ids, std::slice::from_ref(&ds.id))?;
            Some(mp)
        }
        None => None,
    };
    let tau = enc.resolve_tau(&cfg)?;
    let splits = prepare(&ds, &cfg)?;
    let head = head_mode(mode, &cfg, ds.num_classes());
    let evals: Vec<&ImageDataset> = [&splits.val, &splits.test].into_iter().filter(|d| !d.is_empty()).collect();
    let acfg = cfg.adapt_config(tau);
    let (bundle, metrics) = adapt(&splits.train, &evals, &enc.encoder, meta_prompt.as_ref().map(|m| &m.frame), &acfg, &head)?;

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let bundle_path = out.join("bundle.damp");
    write_atomic(&bundle_path, &bundle.to_bytes()?)?;
    let metrics_path = out.join("metrics.csv");
    write_atomic(&metrics_path, &metrics_csv(&metrics.records)?)?;
    let top1 = |s: &str| metrics.last(s).map(|r| r.top1);
    let summary_path = out.join("summary.json");
    write_json(
        &summary_path,
        &AdaptSummary {
            command: "adapt",
            dataset: &ds.id,
            method: if acfg.tau.is_none() { "vp" } else { "damvp" },
            mode: head.name(),
            meta: meta_prompt.map(|m| m.source_ids),
            threshold: acfg.tau,
            n_clusters: metrics.n_clusters,
            prompt_params: metrics.prompt_params,
            train_loss: metrics.last("train").map(|r| r.loss),
            val_top1: top1("val"),
            test_top1: top1("test"),
        },
    )?;
    let mut m = ManifestBuilder::new("adapt", config_json(&cfg), seed);
    m.input(src.describe());
    m.input(encoder.display().to_string());
    if let Some(p) = meta {
        m.input(p.display().to_string());
    }
    m.encoder_fingerprint = Some(enc.encoder.fingerprint());
    m.output(&bundle_path)?;
    m.output(&metrics_path)?;
    m.output(&summary_path)?;
    m.write(&out.join("manifest.json"))?;
    info!("{}: {} prompts, test top-1 {:?}", ds.id, bundle.len(), top1("test"));
    Ok(())
}

pub fn eval_cmd(data: &str, bundle: &Path, encoder: &Path, split_arg: SplitArg, config: Option<&Path>, seed: u64, out: Option<&Path>) -> anyhow::Result<()> {
    let src = source(data)?;
    let cfg = load_config(config, seed)?;
    let enc = load_encoder(encoder)?;
    let b = PromptBundle::load(bundle).with_context(|| format!("loading bundle {}", bundle.display()))?;
    b.check_encoder(&enc.encoder)?;
    let ds = src.load()?;
    let splits = prepare(&ds, &cfg)?;
    let target = match split_arg {
        SplitArg::Train => &splits.train,
        SplitArg::Val => &splits.val,
        SplitArg::Test => &splits.test,
    };
    let started = std::time::Instant::now();
    let e = evaluate(target, &b, &enc.encoder)?;
    let record = EpochRecord {
        epoch: 0,
        split: target.split.to_string(),
        loss: e.loss,
        top1: e.top1,
        n_clusters: b.len(),
        seconds: started.elapsed().as_secs_f64(),
    };
    let csv = metrics_csv(std::slice::from_ref(&record))?;
    print!("{}", String::from_utf8_lossy(&csv));
    if let Some(dir) = out {
        let metrics_path = dir.join("metrics.csv");
        write_atomic(&metrics_path, &csv)?;
        let summary_path = dir.join("summary.json");
        write_json(
            &summary_path,
            &json!({
                "command": "eval",
                "dataset": ds.id,
                "split": record.split,
                "loss": e.loss,
                "top1": e.top1,
                "routed": e.routed,
            }),
        )?;
        let mut m = ManifestBuilder::new("eval", config_json(&cfg), seed);
        m.input(src.describe());
        m.input(bundle.display().to_string());
        m.input(encoder.display().to_string());
        m.encoder_fingerprint = Some(enc.encoder.fingerprint());
        m.output(&metrics_path)?;
        m.output(&summary_path)?;
        m.write(&dir.join("manifest.json"))?;
    }
    Ok(())
}

fn collect_summaries(dir: &Path, out: &mut Vec<(PathBuf, serde_json::Value)>) -> anyhow::Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_summaries(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "summary.json") {
            let text = std::fs::read_to_string(&p)?;
            let v = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            out.push((p, v));
        }
    }
    Ok(())
}

#[derive(Default)]
struct ReportRow {
    diversity: Vec<f64>,
    vp: Vec<f64>,
    damvp: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn report_cmd(runs: &Path, out: Option<&Path>) -> anyhow::Result<()> {
    let mut summaries = Vec::new();
    collect_summaries(runs, &mut summaries)?;
    let mut rows: BTreeMap<String, ReportRow> = BTreeMap::new();
    for (path, v) in &summaries {
        let (Some(cmd), Some(dataset)) = (v["command"].as_str(), v["dataset"].as_str()) else {
            continue;
        };
        let row = rows.entry(dataset.to_string()).or_default();
        match cmd {
            "diversity" => row.diversity.push(v["score"].as_f64().ok_or_else(|| anyhow!("{}: no score", path.display()))?),
            "adapt" => {
                let Some(acc) = v["test_top1"].as_f64() else { continue };
                match v["method"].as_str() {
                    Some("vp") => row.vp.push(acc),
                    Some("damvp") => row.damvp.push(acc),
                    _ => {}
                }
            }
            _ => {}
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "diversity", "vp_accuracy", "damvp_accuracy", "gain"])?;
    for (id, r) in &rows {
        if r.vp.is_empty() || r.damvp.is_empty() {
            continue;
        }
        let (vp, da) = (mean(&r.vp), mean(&r.damvp));
        let div = if r.diversity.is_empty() { String::new() } else { format!("{:.6}", mean(&r.diversity)) };
        w.write_record([id.clone(), div, format!("{vp:.6}"), format!("{da:.6}"), format!("{:.6}", da - vp)])?;
    }
    let bytes = w.into_inner()?;
    match out {
        Some(p) => {
            write_atomic(p, &bytes)?;
            let mut m = ManifestBuilder::new("report", serde_json::Value::Null, 0);
            m.input(runs.display().to_string());
            m.output(p)?;
            m.write(&with_suffix(p, ".manifest.json"))?;
        }
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    Ok(())
}
