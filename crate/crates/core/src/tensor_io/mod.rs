//! Reading and writing checkpoints in the safetensors container layout.
//!
//! ```text
//! [u64 LE header length N][N bytes UTF-8 JSON header][contiguous LE payload]
//! ```
//!
//! The header maps each tensor name to `{dtype, shape, data_offsets}`, with
//! offsets relative to the start of the payload, plus an optional
//! `__metadata__` string map. Handles parse only the header; payloads are
//! read with positional reads when a tensor is requested.

mod align;
mod dtype;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{validate_aligned, AlignmentReport, MissingTensor, ShapeConflict};
pub use dtype::{DType, Precision};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_BYTES: u64 = 100 * 1024 * 1024;

/// Number of elements implied by `shape` (1 for scalars).
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A named tensor held in memory as a flat row-major `f64` buffer.
///
/// `dtype` records the storage type the values came from (or are destined
/// for); the buffer itself is always `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: DType,
        data: Vec<f64>,
    ) -> Result<Self> {
        let name = name.into();
        if numel(&shape) != data.len() {
            return Err(Error::InvalidTensor {
                reason: format!(
                    "shape {:?} implies {} values but buffer holds {}",
                    shape,
                    numel(&shape),
                    data.len()
                ),
                tensor: name,
            });
        }
        Ok(TensorRecord {
            name,
            shape,
            dtype,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Euclidean norm of the flattened tensor, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.data)
    }
}

/// Tensors keyed (and therefore iterated) by name, plus free-form metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, TensorRecord>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(&record.name) {
            return Err(Error::InvalidTensor {
                tensor: record.name,
                reason: "duplicate tensor name".into(),
            });
        }
        self.tensors.insert(record.name.clone(), record);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TensorRecord> {
        self.tensors.values()
    }

    /// Load every tensor of the file at `path`.
    pub fn load(path: impl AsRef<Path>, options: LoadOptions) -> Result<Self> {
        let handle = CheckpointHandle::open_with(path, options)?;
        let mut ckpt = Checkpoint {
            tensors: BTreeMap::new(),
            metadata: handle.metadata().clone(),
        };
        for name in handle.names() {
            ckpt.insert(handle.load_tensor(name)?)?;
        }
        Ok(ckpt)
    }

    /// Write all tensors at `dtype` (or each tensor's own dtype when `None`).
    pub fn save(
        &self,
        path: impl AsRef<Path>,
        dtype: Option<DType>,
        options: WriteOptions,
    ) -> Result<()> {
        let records: Vec<TensorRecord> = self
            .iter()
            .map(|r| TensorRecord {
                dtype: dtype.unwrap_or(r.dtype),
                ..r.clone()
            })
            .collect();
        write_records(path.as_ref(), &records, &self.metadata, options)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub precision: Precision,
    /// Reject NaN/Inf payload values.
    pub strict_finite: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            precision: Precision::F32,
            strict_finite: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    /// Saturate finite values that overflow the output dtype instead of failing.
    pub clamp_overflow: bool,
}

/// Index entry for one tensor in an opened container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte range relative to the start of the payload section.
    #[serde(skip)]
    pub offsets: (u64, u64),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

#[derive(Serialize)]
struct RawEntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [u64; 2],
}

/// Lazy view over a container file: header parsed, payloads untouched.
///
/// Safe to share across threads; loads use positional reads and never
/// contend on a file cursor.
#[derive(Debug)]
pub struct CheckpointHandle {
    path: PathBuf,
    file: File,
    data_start: u64,
    entries: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
    options: LoadOptions,
    payload_bytes_read: AtomicU64,
}

/// Open `path` with default load options.
pub fn open_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointHandle> {
    CheckpointHandle::open(path)
}

pub fn load_tensor(handle: &CheckpointHandle, name: &str) -> Result<TensorRecord> {
    handle.load_tensor(name)
}

impl CheckpointHandle {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::open_with(path, LoadOptions::default())
    }

    pub fn open_with(path: impl AsRef<Path>, options: LoadOptions) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();

        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)
            .map_err(|_| Error::malformed(&path, "file shorter than the 8-byte header prefix"))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_BYTES || header_len > file_len - 8 {
            return Err(Error::malformed(
                &path,
                format!("header length {header_len} exceeds file size {file_len}"),
            ));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header)
            .map_err(|e| Error::io(&path, e))?;
        let header = std::str::from_utf8(&header)
            .map_err(|_| Error::malformed(&path, "header is not valid UTF-8"))?;

        let data_start = 8 + header_len;
        let (entries, metadata) = parse_header(&path, header, file_len - data_start)?;
        Ok(CheckpointHandle {
            path,
            file,
            data_start,
            entries,
            metadata,
            options,
            payload_bytes_read: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn options(&self) -> LoadOptions {
        self.options
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    /// Total payload bytes read through this handle so far.
    pub fn payload_bytes_read(&self) -> u64 {
        self.payload_bytes_read.load(Ordering::Relaxed)
    }

    pub fn load_tensor(&self, name: &str) -> Result<TensorRecord> {
        self.load_tensor_with(name, self.options)
    }

    /// Load `name` converted to the requested working precision.
    pub fn load_tensor_with(&self, name: &str, options: LoadOptions) -> Result<TensorRecord> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::TensorNotFound(name.to_string()))?;
        let (begin, end) = info.offsets;
        let mut bytes = vec![0u8; (end - begin) as usize];
        read_at(&self.file, &mut bytes, self.data_start + begin)
            .map_err(|e| Error::io(&self.path, e))?;
        self.payload_bytes_read
            .fetch_add(bytes.len() as u64, Ordering::Relaxed);

        let mut data = Vec::new();
        dtype::decode(info.dtype, &bytes, &mut data);
        if options.precision == Precision::F32 && info.dtype == DType::F64 {
            data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        if options.strict_finite {
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    tensor: name.to_string(),
                    index,
                });
            }
        }
        Ok(TensorRecord {
            name: name.to_string(),
            shape: info.shape.clone(),
            dtype: info.dtype,
            data,
        })
    }
}

#[cfg(unix)]
fn read_at(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<()> {
    use std::os::unix::fs::FileExt;
    file.read_exact_at(buf, offset)
}

#[cfg(windows)]
fn read_at(file: &File, mut buf: &mut [u8], mut offset: u64) -> std::io::Result<()> {
    use std::os::windows::fs::FileExt;
    while !buf.is_empty() {
        match file.seek_read(buf, offset)? {
            0 => return Err(std::io::ErrorKind::UnexpectedEof.into()),
            n => {
                buf = &mut buf[n..];
                offset += n as u64;
            }
        }
    }
    Ok(())
}

type ParsedHeader = (BTreeMap<String, TensorInfo>, BTreeMap<String, String>);

fn parse_header(path: &Path, header: &str, payload_len: u64) -> Result<ParsedHeader> {
    let value: serde_json::Value = serde_json::from_str(header.trim_end_matches(' '))
        .map_err(|e| Error::malformed(path, format!("header JSON: {e}")))?;
    let serde_json::Value::Object(map) = value else {
        return Err(Error::malformed(path, "header is not a JSON object"));
    };

    let mut metadata = BTreeMap::new();
    let mut entries = BTreeMap::new();
    for (name, raw) in map {
        if name == METADATA_KEY {
            metadata = serde_json::from_value(raw).map_err(|e| {
                Error::malformed(
                    path,
                    format!("{METADATA_KEY} must map strings to strings: {e}"),
                )
            })?;
            continue;
        }
        let raw: RawEntry = serde_json::from_value(raw)
            .map_err(|e| Error::malformed(path, format!("entry {name:?}: {e}")))?;
        let dtype = DType::from_header(&raw.dtype).ok_or_else(|| Error::UnsupportedDtype {
            tensor: name.clone(),
            dtype: raw.dtype.clone(),
        })?;
        let [begin, end] = raw.data_offsets;
        let expected = numel(&raw.shape) as u64 * dtype.size_bytes() as u64;
        if end < begin || end - begin != expected {
            return Err(Error::malformed(
                path,
                format!(
                    "entry {name:?}: offsets [{begin}, {end}] do not match shape {:?} of {}",
                    raw.shape, dtype
                ),
            ));
        }
        entries.insert(
            name,
            TensorInfo {
                dtype,
                shape: raw.shape,
                offsets: (begin, end),
            },
        );
    }

    // Payload ranges must tile the data section exactly, without gaps or overlap.
    let mut ranges: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|(n, i)| (i.offsets.0, i.offsets.1, n.as_str()))
        .collect();
    ranges.sort_unstable();
    let mut cursor = 0u64;
    for (begin, end, name) in ranges {
        if begin != cursor {
            return Err(Error::malformed(
                path,
                format!("entry {name:?} starts at {begin}, expected {cursor}"),
            ));
        }
        cursor = end;
    }
    if cursor != payload_len {
        return Err(Error::malformed(
            path,
            format!("payload holds {payload_len} bytes but header describes {cursor}"),
        ));
    }
    Ok((entries, metadata))
}

/// Layout entry for [`CheckpointWriter`].
#[derive(Debug, Clone)]
pub struct TensorLayout {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

/// Streaming writer: the header is fixed up front, then payloads are
/// appended one tensor at a time in name order.
///
/// Output goes to `<path>.partial` and is renamed into place by
/// [`CheckpointWriter::finish`]; dropping an unfinished writer removes it.
pub struct CheckpointWriter {
    path: PathBuf,
    partial: PathBuf,
    out: Option<BufWriter<File>>,
    layout: Vec<TensorLayout>,
    next: usize,
    options: WriteOptions,
    scratch: Vec<u8>,
}

impl CheckpointWriter {
    pub fn create(
        path: impl AsRef<Path>,
        mut layout: Vec<TensorLayout>,
        metadata: &BTreeMap<String, String>,
        options: WriteOptions,
    ) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        layout.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(w) = layout.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::InvalidTensor {
                tensor: w[0].name.clone(),
                reason: "duplicate tensor name".into(),
            });
        }
        if layout.iter().any(|l| l.name == METADATA_KEY) {
            return Err(Error::InvalidTensor {
                tensor: METADATA_KEY.into(),
                reason: "reserved name".into(),
            });
        }

        let mut header = serde_json::Map::new();
        if !metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(metadata).expect("string map serializes"),
            );
        }
        let mut offset = 0u64;
        for l in &layout {
            let len = (numel(&l.shape) * l.dtype.size_bytes()) as u64;
            let entry = RawEntryOut {
                dtype: l.dtype.as_str(),
                shape: &l.shape,
                data_offsets: [offset, offset + len],
            };
            header.insert(
                l.name.clone(),
                serde_json::to_value(entry).expect("entry serializes"),
            );
            offset += len;
        }
        let mut header = serde_json::to_string(&header).expect("header serializes");
        // Pad so the payload starts 8-byte aligned.
        while !(header.len() + 8).is_multiple_of(8) {
            header.push(' ');
        }

        let partial = partial_path(&path);
        let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(header.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(header.as_bytes()))
            .map_err(|e| Error::io(&partial, e))?;
        Ok(CheckpointWriter {
            path,
            partial,
            out: Some(out),
            layout,
            next: 0,
            options,
            scratch: Vec::new(),
        })
    }

    /// Name of the next tensor the writer expects, if any.
    pub fn next_name(&self) -> Option<&str> {
        self.layout.get(self.next).map(|l| l.name.as_str())
    }

    pub fn write_tensor(&mut self, name: &str, data: &[f64]) -> Result<()> {
        let layout = self
            .layout
            .get(self.next)
            .ok_or_else(|| Error::InvalidTensor {
                tensor: name.to_string(),
                reason: "not part of the declared layout".into(),
            })?;
        if layout.name != name {
            return Err(Error::InvalidTensor {
                tensor: name.to_string(),
                reason: format!("written out of order; expected {}", layout.name),
            });
        }
        if data.len() != numel(&layout.shape) {
            return Err(Error::InvalidTensor {
                tensor: name.to_string(),
                reason: format!(
                    "shape {:?} needs {} values, got {}",
                    layout.shape,
                    numel(&layout.shape),
                    data.len()
                ),
            });
        }
        dtype::encode(
            layout.dtype,
            name,
            data,
            self.options.clamp_overflow,
            &mut self.scratch,
        )?;
        let out = self.out.as_mut().expect("writer is open");
        out.write_all(&self.scratch)
            .map_err(|e| Error::io(&self.partial, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(name) = self.next_name() {
            return Err(Error::InvalidTensor {
                tensor: name.to_string(),
                reason: "declared but never written".into(),
            });
        }
        let out = self.out.take().expect("writer is open");
        let file = out
            .into_inner()
            .map_err(|e| Error::io(&self.partial, e.into_error()))?;
        file.sync_all().map_err(|e| Error::io(&self.partial, e))?;
        drop(file);
        fs::rename(&self.partial, &self.path).map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for CheckpointWriter {
    fn drop(&mut self) {
        if self.out.take().is_some() {
            let _ = fs::remove_file(&self.partial);
        }
    }
}

fn partial_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Write `tensors` to `path`, every tensor stored as `output_dtype`.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    tensors: &[TensorRecord],
    output_dtype: DType,
    metadata: &BTreeMap<String, String>,
    options: WriteOptions,
) -> Result<()> {
    let records: Vec<TensorRecord> = tensors
        .iter()
        .map(|r| TensorRecord {
            dtype: output_dtype,
            ..r.clone()
        })
        .collect();
    write_records(path.as_ref(), &records, metadata, options)
}

fn write_records(
    path: &Path,
    tensors: &[TensorRecord],
    metadata: &BTreeMap<String, String>,
    options: WriteOptions,
) -> Result<()> {
    for t in tensors {
        if numel(&t.shape) != t.data.len() {
            return Err(Error::InvalidTensor {
                tensor: t.name.clone(),
                reason: format!("shape {:?} but {} values", t.shape, t.data.len()),
            });
        }
    }
    let layout = tensors
        .iter()
        .map(|t| TensorLayout {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: t.dtype,
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, layout, metadata, options)?;
    let mut order: Vec<&TensorRecord> = tensors.iter().collect();
    order.sort_by(|a, b| a.name.cmp(&b.name));
    for t in order {
        writer.write_tensor(&t.name, &t.data)?;
    }
    writer.finish()
}
