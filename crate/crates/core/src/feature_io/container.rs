use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SequenceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MSFD";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 8;
const TRAILER_LEN: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub offset: u64,
    pub length: u64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: Vec<IndexEntry>,
}

fn encode(rec: &SequenceRecord, out: &mut Vec<u8>) {
    let (steps, n, d_in) = (rec.steps(), rec.n_objects(), rec.d_in());
    out.clear();
    out.reserve(29 + rec.id.len() + 4 * (steps * d_in + steps * n * d_in) + steps * n);
    out.extend_from_slice(&(rec.id.len() as u32).to_le_bytes());
    out.extend_from_slice(rec.id.as_bytes());
    out.push(rec.label);
    out.extend_from_slice(&rec.t_ao.unwrap_or(0).to_le_bytes());
    for v in [rec.fps, steps as u32, n as u32, d_in as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in rec.frames.data().iter().chain(rec.objects.data()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(rec.mask.iter().map(|&m| m as u8));
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    id: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(self.id, "record payload is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode(bytes: &[u8], expected_id: &str) -> Result<SequenceRecord> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        id: expected_id,
    };
    let id_len = c.u32()? as usize;
    let id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|_| Error::data(expected_id, "id is not utf-8"))?
        .to_string();
    if id != expected_id {
        return Err(Error::data(expected_id, format!("payload carries id `{id}`")));
    }
    let label = c.take(1)?[0];
    let t_ao = c.u32()?;
    let fps = c.u32()?;
    let (steps, n, d_in) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    if steps == 0 || n == 0 || d_in == 0 {
        return Err(Error::data(&id, format!("empty shape T={steps} N={n} d_in={d_in}")));
    }
    let need = (steps * d_in + steps * n * d_in) * 4 + steps * n;
    if bytes.len() - c.pos != need {
        return Err(Error::data(
            &id,
            format!("payload holds {} bytes, shape needs {need}", bytes.len() - c.pos),
        ));
    }
    let frames = Tensor::new([steps, d_in], c.f32s(steps * d_in)?)?;
    let objects = Tensor::new([steps, n, d_in], c.f32s(steps * n * d_in)?)?;
    let mut mask = Vec::with_capacity(steps * n);
    for &b in c.take(steps * n)? {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(Error::data(&id, format!("mask byte {b}"))),
        }
    }
    let rec = SequenceRecord {
        id,
        frames,
        objects,
        mask,
        label,
        t_ao: (t_ao != 0).then_some(t_ao),
        fps,
    };
    rec.validate()?;
    Ok(rec)
}

/// Streaming writer; holds one encoded record plus the index in memory.
pub struct DatasetWriter {
    out: BufWriter<File>,
    offset: u64,
    entries: Vec<IndexEntry>,
    buf: Vec<u8>,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(&MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        Ok(DatasetWriter {
            out,
            offset: HEADER_LEN,
            entries: Vec::new(),
            buf: Vec::new(),
        })
    }

    pub fn append(&mut self, rec: &SequenceRecord, split: Option<Split>) -> Result<()> {
        rec.validate()?;
        encode(rec, &mut self.buf);
        self.out.write_all(&self.buf)?;
        let length = self.buf.len() as u64;
        self.entries.push(IndexEntry {
            id: rec.id.clone(),
            offset: self.offset,
            length,
            split,
        });
        self.offset += length;
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        let manifest = DatasetManifest {
            format_version: FORMAT_VERSION,
            records: self.entries,
        };
        let footer = serde_json::to_vec(&manifest)?;
        self.out.write_all(&footer)?;
        self.out.write_all(&(footer.len() as u64).to_le_bytes())?;
        self.out.write_all(&MAGIC)?;
        self.out.flush()?;
        Ok(manifest)
    }
}

/// Writes `records` without split tags.
pub fn write_dataset<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a SequenceRecord>,
) -> Result<DatasetManifest> {
    let mut w = DatasetWriter::create(path)?;
    for rec in records {
        w.append(rec, None)?;
    }
    w.finish()
}

/// Random-access reader over one container file. Each reader owns its file
/// handle, so several readers may share a file.
pub struct DatasetReader {
    file: BufReader<File>,
    path: PathBuf,
    manifest: DatasetManifest,
}

impl DatasetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = BufReader::new(File::open(&path)?);
        let len = file.get_ref().metadata()?.len();
        let corrupt = |why: &str| Error::CorruptHeader(format!("{}: {why}", path.display()));
        if len < 4 {
            return Err(corrupt("file shorter than the magic"));
        }
        let mut head = [0u8; 8];
        file.read_exact(&mut head[..4])?;
        if head[..4] != MAGIC {
            return Err(Error::BadMagic { path, expected: MAGIC });
        }
        if len < HEADER_LEN + TRAILER_LEN {
            return Err(corrupt("file shorter than header and trailer"));
        }
        file.read_exact(&mut head[4..])?;
        let version = u32::from_le_bytes(head[4..].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mut tail = [0u8; 12];
        file.seek(SeekFrom::Start(len - TRAILER_LEN))?;
        file.read_exact(&mut tail)?;
        if tail[8..] != MAGIC {
            return Err(corrupt("missing trailing magic"));
        }
        let footer_len = u64::from_le_bytes(tail[..8].try_into().unwrap());
        let footer_start = (len - TRAILER_LEN)
            .checked_sub(footer_len)
            .filter(|&s| s >= HEADER_LEN)
            .ok_or_else(|| corrupt("footer length exceeds file"))?;
        let mut footer = vec![0u8; footer_len as usize];
        file.seek(SeekFrom::Start(footer_start))?;
        file.read_exact(&mut footer)?;
        let manifest: DatasetManifest = serde_json::from_slice(&footer).map_err(|e| corrupt(&format!("index: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        let mut expect = HEADER_LEN;
        for e in &manifest.records {
            if e.offset != expect {
                return Err(corrupt(&format!(
                    "record `{}` at offset {}, expected {expect}",
                    e.id, e.offset
                )));
            }
            expect += e.length;
        }
        if expect != footer_start {
            return Err(corrupt("index does not cover the file"));
        }
        file.seek(SeekFrom::Start(HEADER_LEN))?;
        Ok(DatasetReader { file, path, manifest })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Decodes and validates record `i`.
    pub fn read_record(&mut self, i: usize) -> Result<SequenceRecord> {
        let e = self
            .manifest
            .records
            .get(i)
            .ok_or_else(|| Error::Index(format!("record {i} of {}", self.manifest.records.len())))?;
        let mut buf = vec![0u8; e.length as usize];
        self.file.seek(SeekFrom::Start(e.offset))?;
        self.file.read_exact(&mut buf)?;
        decode(&buf, &e.id)
    }

    /// Position of the record with this id.
    pub fn find(&self, id: &str) -> Option<usize> {
        self.manifest.records.iter().position(|e| e.id == id)
    }

    pub fn records(self) -> RecordIter {
        RecordIter { reader: self, next: 0 }
    }

    /// Every record with its split tag.
    pub fn read_all(self) -> Result<Vec<(SequenceRecord, Option<Split>)>> {
        let splits: Vec<_> = self.manifest.records.iter().map(|e| e.split).collect();
        self.records().zip(splits).map(|(r, s)| Ok((r?, s))).collect()
    }
}

/// Sequential decoder over a [`DatasetReader`].
pub struct RecordIter {
    reader: DatasetReader,
    next: usize,
}

impl Iterator for RecordIter {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.reader.len() {
            return None;
        }
        self.next += 1;
        Some(self.reader.read_record(self.next - 1))
    }
}

/// Opens `path` and streams its records in file order.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<RecordIter> {
    Ok(DatasetReader::open(path)?.records())
}
