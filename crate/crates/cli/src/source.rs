//! `--data` values: either `synth:key=value:...` or a directory holding an
//! IDX image file and an IDX label file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use damvp_core::data::{generate_modemix, load_idx, ImageDataset, SyntheticSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { spec: SyntheticSpec, by_mode: bool, id: String },
    Idx { dir: PathBuf },
}

/// Parse a `--data` value. Errors here are usage errors.
pub fn parse_source(text: &str) -> Result<DataSource, String> {
    let Some(rest) = text.strip_prefix("synth:") else {
        return Ok(DataSource::Idx { dir: PathBuf::from(text) });
    };
    let mut spec = SyntheticSpec::default();
    let mut by_mode = false;
    let mut id = None;
    for part in rest.split(':').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("synthetic data option `{part}` is not key=value"))?;
        let int = || value.parse::<usize>().map_err(|e| format!("{key}={value}: {e}"));
        match key {
            "modes" => spec.modes = int()?,
            "cpm" => spec.classes_per_mode = int()?,
            "n" => spec.samples_per_class = int()?,
            "size" => {
                spec.height = int()?;
                spec.width = spec.height;
            }
            "seed" => spec.seed = value.parse().map_err(|e| format!("seed={value}: {e}"))?,
            "jitter" => spec.jitter = value.parse().map_err(|e| format!("jitter={value}: {e}"))?,
            "labels" => {
                by_mode = match value {
                    "mode" => true,
                    "class" => false,
                    _ => return Err(format!("labels must be `mode` or `class`, got `{value}`")),
                }
            }
            "id" => id = Some(value.to_string()),
            _ => return Err(format!("unknown synthetic data option `{key}`")),
        }
    }
    let id = id.unwrap_or_else(|| {
        let base = spec.default_id();
        if by_mode {
            format!("{base}-bymode")
        } else {
            base
        }
    });
    Ok(DataSource::Synthetic { spec, by_mode, id })
}

fn find_idx(dir: &Path, needle: &str) -> anyhow::Result<PathBuf> {
    let mut hits: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n.to_string_lossy().contains(needle)))
        .collect();
    hits.sort();
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => bail!("no file containing `{needle}` in {}", dir.display()),
        _ => bail!("several files containing `{needle}` in {}", dir.display()),
    }
}

impl DataSource {
    pub fn load(&self) -> anyhow::Result<ImageDataset> {
        match self {
            DataSource::Synthetic { spec, by_mode, id } => {
                let ds = generate_modemix(spec)?.with_id(id.clone());
                if *by_mode {
                    let labels = ds.labels().iter().map(|l| l / spec.classes_per_mode).collect();
                    Ok(ds.relabeled(labels, spec.modes)?)
                } else {
                    Ok(ds)
                }
            }
            DataSource::Idx { dir } => {
                let images = find_idx(dir, "images")?;
                let labels = find_idx(dir, "labels")?;
                Ok(load_idx(&images, &labels)?)
            }
        }
    }

    /// Input paths recorded in manifests.
    pub fn describe(&self) -> String {
        match self {
            DataSource::Synthetic { id, .. } => format!("synth:{id}"),
            DataSource::Idx { dir } => dir.display().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_options() {
        let s = parse_source("synth:modes=4:cpm=3:n=5:seed=9:labels=mode").unwrap();
        match s {
            DataSource::Synthetic { spec, by_mode, id } => {
                assert_eq!((spec.modes, spec.classes_per_mode, spec.samples_per_class, spec.seed), (4, 3, 5, 9));
                assert!(by_mode);
                assert_eq!(id, "modemix-m4-c3-n5-s9-bymode");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_source("synth:modes").is_err());
        assert!(parse_source("synth:colour=red").is_err());
        assert!(parse_source("synth:labels=mood").is_err());
        assert_eq!(parse_source("some/dir").unwrap(), DataSource::Idx { dir: "some/dir".into() });
    }

    #[test]
    fn mode_labels_collapse_classes() {
        let ds = parse_source("synth:modes=3:cpm=2:n=2:labels=mode").unwrap().load().unwrap();
        assert_eq!(ds.num_classes(), 3);
        assert_eq!(ds.labels(), &[0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
    }
}
