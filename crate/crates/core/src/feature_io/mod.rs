//! Pre-extracted feature sequences: the in-memory record, the `MSFD`
//! container and raw tensor import.
//!
//! # `MSFD` layout (all integers little-endian)
//!
//! ```text
//! "MSFD" u32 version
//! record*:   u32 id_len, id (utf-8), u8 label, u32 t_ao (0 = none), u32 fps,
//!            u32 T, u32 N, u32 d_in,
//!            f32 frames[T·d_in], f32 objects[T·N·d_in], u8 mask[T·N]
//! footer:    JSON index {format_version, records: [{id, offset, length, split}]}
//!            u64 footer_len, "MSFD"
//! ```
//!
//! Readers keep one record in memory at a time.

mod container;
mod raw;

pub use container::{
    read_dataset, write_dataset, DatasetManifest, DatasetReader, DatasetWriter, IndexEntry, RecordIter, Split,
    FORMAT_VERSION, MAGIC,
};
pub use raw::{import_raw_tensor, write_raw_tensor, LabelEntry, RawLayout};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One driving sequence of pre-extracted features.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    /// `[T, d_in]` scene features.
    pub frames: Tensor<f32>,
    /// `[T, N, d_in]` object features; invalid slots are zero.
    pub objects: Tensor<f32>,
    /// `[T × N]` object validity.
    pub mask: Vec<bool>,
    pub label: u8,
    /// 1-based accident frame, positives only.
    pub t_ao: Option<u32>,
    pub fps: u32,
}

impl SequenceRecord {
    pub fn steps(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn n_objects(&self) -> usize {
        self.objects.shape()[1]
    }

    pub fn d_in(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_positive(&self) -> bool {
        self.label == 1
    }

    /// Checks shapes, mask/padding consistency and label/`t_ao` agreement.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::data(self.id.clone(), reason));
        let fs = self.frames.shape();
        let os = self.objects.shape();
        if fs.len() != 2 || os.len() != 3 {
            return bad(format!("frames {fs:?} / objects {os:?} have wrong rank"));
        }
        if os[0] != fs[0] || os[2] != fs[1] {
            return bad(format!("frames {fs:?} and objects {os:?} disagree"));
        }
        let (steps, n, d_in) = (os[0], os[1], os[2]);
        if self.mask.len() != steps * n {
            return bad(format!("mask has {} entries, expected {}", self.mask.len(), steps * n));
        }
        if self.fps == 0 {
            return bad("fps is zero".into());
        }
        match (self.label, self.t_ao) {
            (0, None) => {}
            (0, Some(_)) => return bad("negative record carries t_ao".into()),
            (1, None) => return bad("positive record without t_ao".into()),
            (1, Some(t)) => {
                if t == 0 || t as usize > steps {
                    return bad(format!("t_ao {t} outside [1, {steps}]"));
                }
            }
            (l, _) => return bad(format!("label {l} is not 0 or 1")),
        }
        for (slot, row) in self.objects.data().chunks(d_in).enumerate() {
            if !self.mask[slot] && row.iter().any(|&v| v != 0.0) {
                return bad(format!(
                    "padded object {} at frame {} is not zero-filled",
                    slot % n,
                    slot / n + 1
                ));
            }
        }
        if !self.frames.is_finite() || !self.objects.is_finite() {
            return bad("non-finite features".into());
        }
        Ok(())
    }

    /// First `t` frames. Label metadata is carried over unchanged, so the
    /// result is meant for inference, not for training targets.
    pub fn truncated(&self, t: usize) -> Result<SequenceRecord> {
        let n = self.n_objects();
        Ok(SequenceRecord {
            id: self.id.clone(),
            frames: self.frames.take_rows(t)?,
            objects: self.objects.take_rows(t)?,
            mask: self.mask[..t * n].to_vec(),
            label: self.label,
            t_ao: self.t_ao,
            fps: self.fps,
        })
    }
}
