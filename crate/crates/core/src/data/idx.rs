//! IDX (MNIST-style) image/label files: big-endian headers followed by raw
//! unsigned bytes.

use std::path::Path;

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::NdArray;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let bytes = self.take(4)?;
        Ok(u32::from_be_bytes(bytes.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(self.what))?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated(self.what))?;
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.take(4)?;
        if found != expected.to_be_bytes() {
            return Err(Error::BadMagic {
                what: self.what,
                expected: expected.to_be_bytes().to_vec(),
                found: found.to_vec(),
            });
        }
        Ok(())
    }
}

/// Decode an image file and a label file already read into memory.
pub fn parse_idx(id: &str, images: &[u8], labels: &[u8]) -> Result<ImageDataset> {
    let mut ri = Reader {
        buf: images,
        pos: 0,
        what: "idx images",
    };
    ri.magic(IMAGES_MAGIC)?;
    let n = ri.u32()? as usize;
    let rows = ri.u32()? as usize;
    let cols = ri.u32()? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Malformed {
            what: "idx images",
            msg: format!("zero image extent {rows}×{cols}"),
        });
    }
    let pixels = ri.take(n * rows * cols)?;

    let mut rl = Reader {
        buf: labels,
        pos: 0,
        what: "idx labels",
    };
    rl.magic(LABELS_MAGIC)?;
    let nl = rl.u32()? as usize;
    if nl != n {
        return Err(Error::DimensionMismatch(format!("{n} images but {nl} labels")));
    }
    let raw_labels = rl.take(n)?;

    let plane = rows * cols;
    let mut out = Vec::with_capacity(n);
    for img in pixels.chunks(plane) {
        let gray: Vec<f64> = img.iter().map(|&b| b as f64 / 255.0).collect();
        let mut data = Vec::with_capacity(3 * plane);
        for _ in 0..3 {
            data.extend_from_slice(&gray);
        }
        out.push(NdArray::from_vec(&[3, rows, cols], data)?);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    ImageDataset::new(id, out, labels, classes, [3, rows, cols])
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<ImageDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let id = images_path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| images_path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    parse_idx(&id, &images, &labels)
}

/// Encode grayscale bytes (`n` images of `rows×cols`) and labels.
pub fn encode_idx(pixels: &[u8], labels: &[u8], rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols == 0 || pixels.len() != labels.len() * rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "{} pixel bytes for {} labels of {rows}×{cols}",
            pixels.len(),
            labels.len()
        )));
    }
    let mut im = Vec::with_capacity(16 + pixels.len());
    im.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for v in [labels.len(), rows, cols] {
        im.extend_from_slice(&(v as u32).to_be_bytes());
    }
    im.extend_from_slice(pixels);
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    Ok((im, lb))
}
