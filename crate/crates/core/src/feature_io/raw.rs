use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sequence shape of a raw little-endian `f32` blob: `T × C × d_in`,
/// where channel 0 is the frame feature and channels `1..C` are objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawLayout {
    /// `100 × 20 × 4096`: one frame feature and 19 objects.
    Dad,
    /// `150 × 16 × 4096`: one frame feature and 15 objects.
    Dada,
    Custom {
        steps: usize,
        channels: usize,
        d_in: usize,
    },
}

impl RawLayout {
    /// `(T, C, d_in)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            RawLayout::Dad => (100, 20, 4096),
            RawLayout::Dada => (150, 16, 4096),
            RawLayout::Custom { steps, channels, d_in } => (steps, channels, d_in),
        }
    }

    pub fn n_objects(self) -> usize {
        self.dims().1 - 1
    }

    fn sequence_floats(self) -> usize {
        let (t, c, d) = self.dims();
        t * c * d
    }
}

impl fmt::Display for RawLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (t, c, d) = self.dims();
        match self {
            RawLayout::Dad => write!(f, "dad_{t}x{c}x{d}"),
            RawLayout::Dada => write!(f, "dada_{t}x{c}x{d}"),
            RawLayout::Custom { .. } => write!(f, "custom_{t}x{c}x{d}"),
        }
    }
}

impl FromStr for RawLayout {
    type Err = Error;

    /// `dad`, `dada`, or `TxCxD` (optionally prefixed `custom_`).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dad" | "dad_100x20x4096" => return Ok(RawLayout::Dad),
            "dada" | "dada_150x16x4096" => return Ok(RawLayout::Dada),
            _ => {}
        }
        let dims: Vec<usize> = s
            .trim_start_matches("custom_")
            .split('x')
            .map(|p| p.parse().map_err(|_| Error::Config(format!("bad layout `{s}`"))))
            .collect::<Result<_>>()?;
        match dims[..] {
            [steps, channels, d_in] if steps > 0 && channels > 1 && d_in > 0 => {
                Ok(RawLayout::Custom { steps, channels, d_in })
            }
            _ => Err(Error::Config(format!("bad layout `{s}`"))),
        }
    }
}

/// One line of the labels sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub id: String,
    pub label: u8,
    pub t_ao: Option<u32>,
    pub fps: u32,
}

fn read_sidecar(path: &Path) -> Result<Vec<LabelEntry>> {
    let src = path.display().to_string();
    BufReader::new(File::open(path)?)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            serde_json::from_str(&line?).map_err(|e| Error::data(&src, format!("sidecar line {}: {e}", i + 1)))
        })
        .collect()
}

/// Splits a raw blob into records using the sidecar for labels. All-zero
/// object rows are treated as padding.
pub fn import_raw_tensor(
    blob: impl AsRef<Path>,
    layout: RawLayout,
    sidecar: impl AsRef<Path>,
) -> Result<Vec<SequenceRecord>> {
    let blob = blob.as_ref();
    let src = blob.display().to_string();
    let labels = read_sidecar(sidecar.as_ref())?;
    let size = std::fs::metadata(blob)?.len() as usize;
    let per_seq = layout.sequence_floats() * 4;
    if size % per_seq != 0 {
        return Err(Error::data(
            &src,
            format!("{size} bytes is not a multiple of the {layout} sequence size {per_seq}"),
        ));
    }
    let count = size / per_seq;
    if count != labels.len() {
        return Err(Error::data(
            &src,
            format!("{count} sequences but {} sidecar entries", labels.len()),
        ));
    }
    let (steps, channels, d_in) = layout.dims();
    let n = channels - 1;
    let mut reader = BufReader::new(File::open(blob)?);
    let mut buf = vec![0u8; per_seq];
    let mut out = Vec::with_capacity(count);
    for entry in labels {
        reader.read_exact(&mut buf)?;
        let mut frames = Vec::with_capacity(steps * d_in);
        let mut objects = Vec::with_capacity(steps * n * d_in);
        let mut mask = Vec::with_capacity(steps * n);
        for (i, row) in buf.chunks_exact(d_in * 4).enumerate() {
            let vals = row.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
            if i % channels == 0 {
                frames.extend(vals);
            } else {
                let start = objects.len();
                objects.extend(vals);
                mask.push(objects[start..].iter().any(|&v| v != 0.0));
            }
        }
        let rec = SequenceRecord {
            id: entry.id,
            frames: Tensor::new([steps, d_in], frames)?,
            objects: Tensor::new([steps, n, d_in], objects)?,
            mask,
            label: entry.label,
            t_ao: entry.t_ao,
            fps: entry.fps,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Inverse of [`import_raw_tensor`]: writes records sharing one shape as a
/// raw blob plus sidecar. The mask is not stored; padded rows are zero.
pub fn write_raw_tensor(
    blob: impl AsRef<Path>,
    sidecar: impl AsRef<Path>,
    records: &[SequenceRecord],
) -> Result<RawLayout> {
    let first = records
        .first()
        .ok_or_else(|| Error::Contract("no records to export".into()))?;
    let layout = RawLayout::Custom {
        steps: first.steps(),
        channels: first.n_objects() + 1,
        d_in: first.d_in(),
    };
    let mut out = BufWriter::new(File::create(blob)?);
    let mut side = BufWriter::new(File::create(sidecar)?);
    for rec in records {
        rec.validate()?;
        if (rec.steps(), rec.n_objects() + 1, rec.d_in()) != layout.dims() {
            return Err(Error::data(&rec.id, format!("shape differs from {layout}")));
        }
        let d_in = rec.d_in();
        let n = rec.n_objects();
        for t in 0..rec.steps() {
            let rows = std::iter::once(&rec.frames.data()[t * d_in..(t + 1) * d_in])
                .chain(rec.objects.data()[t * n * d_in..(t + 1) * n * d_in].chunks(d_in));
            for row in rows {
                for v in row {
                    out.write_all(&v.to_le_bytes())?;
                }
            }
        }
        let entry = LabelEntry {
            id: rec.id.clone(),
            label: rec.label,
            t_ao: rec.t_ao,
            fps: rec.fps,
        };
        serde_json::to_writer(&mut side, &entry)?;
        side.write_all(b"\n")?;
    }
    out.flush()?;
    side.flush()?;
    Ok(layout)
}
