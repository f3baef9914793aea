//! Dataset containers and loaders.
//!
//! * [`idx`] — the classic big-endian IDX image/label format.
//! * [`mmft`] — a little-endian multimodal feature container holding
//!   several fixed-width feature blocks per sample plus labels.
//! * [`synth`] — a deterministic synthetic digit corpus written as IDX
//!   files, for running the full pipeline without external downloads.

pub mod idx;
pub mod mmft;
pub mod synth;

pub use mmft::{read_mmft, write_mmft, Labels, MultimodalDataset};

use crate::error::{Error, Result};

impl MultimodalDataset {
    /// Number of samples.
    pub fn len(&self) -> usize {
        match &self.labels {
            Labels::Classes { ids, .. } => ids.len(),
            Labels::Multilabel { targets, arity } => {
                if *arity == 0 {
                    0
                } else {
                    targets.len() / *arity as usize
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_modalities(&self) -> usize {
        self.dims.len()
    }

    /// Full consistency check: block sizes, label ranges, finiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.modalities.len() != self.dims.len() {
            return Err(Error::Data(format!(
                "{} feature blocks for {} declared modalities",
                self.modalities.len(),
                self.dims.len()
            )));
        }
        for (m, block) in self.modalities.iter().enumerate() {
            if block.len() != n * self.dims[m] {
                return Err(Error::Data(format!(
                    "modality {m} has {} values, expected {} ({} samples x dim {})",
                    block.len(),
                    n * self.dims[m],
                    n,
                    self.dims[m]
                )));
            }
            if let Some(pos) = block.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("modality {m} has a non-finite value at offset {pos}")));
            }
        }
        match &self.labels {
            Labels::Classes { ids, n_classes } => {
                if *n_classes == 0 {
                    return Err(Error::Data("class label set is empty".into()));
                }
                if let Some(&bad) = ids.iter().find(|&&c| c >= *n_classes) {
                    return Err(Error::Data(format!("class id {bad} out of range for {n_classes} classes")));
                }
            }
            Labels::Multilabel { targets, arity } => {
                if *arity == 0 {
                    return Err(Error::Data("multilabel arity is zero".into()));
                }
                if targets.len() % *arity as usize != 0 {
                    return Err(Error::Data(format!(
                        "{} multilabel values not divisible by arity {arity}",
                        targets.len()
                    )));
                }
                if targets.iter().any(|&t| t != 0.0 && t != 1.0) {
                    return Err(Error::Data("multilabel targets must be exactly 0 or 1".into()));
                }
            }
        }
        Ok(())
    }

    /// Copy the rows of one modality at `indices` into a contiguous batch.
    pub fn gather(&self, modality: usize, indices: &[usize]) -> Vec<f32> {
        let d = self.dims[modality];
        let block = &self.modalities[modality];
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&block[i * d..(i + 1) * d]);
        }
        out
    }

    /// Class ids at `indices` (class-labeled datasets only).
    pub fn gather_class_labels(&self, indices: &[usize]) -> Result<Vec<u32>> {
        match &self.labels {
            Labels::Classes { ids, .. } => Ok(indices.iter().map(|&i| ids[i]).collect()),
            Labels::Multilabel { .. } => {
                Err(Error::Input("dataset has multilabel targets, not class ids".into()))
            }
        }
    }

    /// Multilabel target rows at `indices` (multilabel datasets only).
    pub fn gather_multilabel_targets(&self, indices: &[usize]) -> Result<Vec<f32>> {
        match &self.labels {
            Labels::Multilabel { targets, arity } => {
                let a = *arity as usize;
                let mut out = Vec::with_capacity(indices.len() * a);
                for &i in indices {
                    out.extend_from_slice(&targets[i * a..(i + 1) * a]);
                }
                Ok(out)
            }
            Labels::Classes { .. } => {
                Err(Error::Input("dataset has class ids, not multilabel targets".into()))
            }
        }
    }

    /// New dataset containing only the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> MultimodalDataset {
        let modalities = (0..self.n_modalities()).map(|m| self.gather(m, indices)).collect();
        let labels = match &self.labels {
            Labels::Classes { ids, n_classes } => Labels::Classes {
                ids: indices.iter().map(|&i| ids[i]).collect(),
                n_classes: *n_classes,
            },
            Labels::Multilabel { targets, arity } => {
                let a = *arity as usize;
                let mut t = Vec::with_capacity(indices.len() * a);
                for &i in indices {
                    t.extend_from_slice(&targets[i * a..(i + 1) * a]);
                }
                Labels::Multilabel { targets: t, arity: *arity }
            }
        };
        MultimodalDataset { dims: self.dims.clone(), modalities, labels }
    }

    /// Number of prediction targets: class count or multilabel arity.
    pub fn target_width(&self) -> usize {
        match &self.labels {
            Labels::Classes { n_classes, .. } => *n_classes as usize,
            Labels::Multilabel { arity, .. } => *arity as usize,
        }
    }

    pub fn is_multilabel(&self) -> bool {
        matches!(self.labels, Labels::Multilabel { .. })
    }
}
