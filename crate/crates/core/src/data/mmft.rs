//! The `MMFT` multimodal feature container.
//!
//! A single little-endian binary file holding, for every sample, one
//! fixed-width f32 feature block per modality, plus labels:
//!
//! ```text
//! magic   4 bytes  "MMFT"
//! version u32      currently 1
//! n       u32      samples
//! m       u32      modalities
//! dims    u32 * m  feature width per modality
//! kind    u32      0 = class ids, 1 = binary multilabel targets
//! width   u32      number of classes (kind 0) or label arity (kind 1)
//! labels  kind 0: n * u32 class ids; kind 1: n * width * f32 in {0, 1}
//! payload n * sum(dims) * f32, sample-major, modalities in order
//! ```
//!
//! Readers validate the exact byte length before touching the payload and
//! reject out-of-range labels and non-finite features.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MMFT_MAGIC: [u8; 4] = *b"MMFT";
pub const MMFT_VERSION: u32 = 1;

/// Labels for a multimodal dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    /// One class id per sample, each `< n_classes`.
    Classes { ids: Vec<u32>, n_classes: u32 },
    /// `arity` binary targets per sample, stored row-major.
    Multilabel { targets: Vec<f32>, arity: u32 },
}

/// In-memory multimodal dataset. Feature blocks are stored modality-major
/// (`modalities[m]` holds `n * dims[m]` values) for fast batch gathering;
/// the on-disk layout is sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalDataset {
    pub dims: Vec<usize>,
    pub modalities: Vec<Vec<f32>>,
    pub labels: Labels,
}

pub fn write_mmft(path: &Path, ds: &MultimodalDataset) -> Result<()> {
    ds.validate()?;
    let n = ds.len();
    let m = ds.n_modalities();
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(&MMFT_MAGIC);
    out.extend_from_slice(&MMFT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for &d in &ds.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &ds.labels {
        Labels::Classes { ids, n_classes } => {
            out.extend_from_slice(&0u32.to_le_bytes());
            out.extend_from_slice(&n_classes.to_le_bytes());
            for id in ids {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        Labels::Multilabel { targets, arity } => {
            out.extend_from_slice(&1u32.to_le_bytes());
            out.extend_from_slice(&arity.to_le_bytes());
            for t in targets {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
    }
    // Payload: sample-major, modalities in declared order.
    for s in 0..n {
        for (mi, block) in ds.modalities.iter().enumerate() {
            let d = ds.dims[mi];
            for v in &block[s * d..(s + 1) * d] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Data(format!(
                "{}: truncated at byte {} while reading {what} ({} of {} bytes present)",
                self.path,
                self.pos,
                self.bytes.len() - self.pos,
                n
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let s = self.take(4, what)?;
        Ok(u32::from_le_bytes(s.try_into().expect("4 bytes")))
    }
}

pub fn read_mmft(path: &Path) -> Result<MultimodalDataset> {
    let bytes = fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0, path: path.display().to_string() };
    let magic = c.take(4, "magic")?;
    if magic != MMFT_MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected {:?}",
            path.display(),
            &magic,
            &MMFT_MAGIC
        )));
    }
    let version = c.u32_le("version")?;
    if version != MMFT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported container version {version} (reader supports {MMFT_VERSION})",
            path.display()
        )));
    }
    let n = c.u32_le("sample count")? as usize;
    let m = c.u32_le("modality count")? as usize;
    if m == 0 {
        return Err(Error::Data(format!("{}: zero modalities", path.display())));
    }
    let mut dims = Vec::with_capacity(m);
    for i in 0..m {
        let d = c.u32_le(&format!("dim of modality {i}"))? as usize;
        if d == 0 {
            return Err(Error::Data(format!("{}: modality {i} has zero width", path.display())));
        }
        dims.push(d);
    }
    let kind = c.u32_le("label kind")?;
    let width = c.u32_le("label width")?;

    // Validate the exact remaining length before reading anything further.
    let label_bytes = match kind {
        0 => n * 4,
        1 => n * width as usize * 4,
        k => {
            return Err(Error::Data(format!("{}: unknown label kind {k}", path.display())));
        }
    };
    let payload_bytes = n * dims.iter().sum::<usize>() * 4;
    let expected = c.pos + label_bytes + payload_bytes;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "{}: file is {} bytes, expected exactly {expected} ({} samples, dims {:?})",
            path.display(),
            bytes.len(),
            n,
            dims
        )));
    }

    let labels = match kind {
        0 => {
            let raw = c.take(label_bytes, "class ids")?;
            let ids: Vec<u32> = raw
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Labels::Classes { ids, n_classes: width }
        }
        _ => {
            let raw = c.take(label_bytes, "multilabel targets")?;
            let targets: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            Labels::Multilabel { targets, arity: width }
        }
    };

    let raw = c.take(payload_bytes, "features")?;
    let flat: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    // De-interleave sample-major payload into modality-major blocks.
    let mut modalities: Vec<Vec<f32>> = dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    let stride: usize = dims.iter().sum();
    for s in 0..n {
        let mut off = s * stride;
        for (mi, &d) in dims.iter().enumerate() {
            modalities[mi].extend_from_slice(&flat[off..off + d]);
            off += d;
        }
    }
    let ds = MultimodalDataset { dims, modalities, labels };
    ds.validate()?;
    Ok(ds)
}
