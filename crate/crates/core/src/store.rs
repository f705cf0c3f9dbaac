//! Uncompressed zarr v2 arrays of little-endian `f32` on the local filesystem.
//!
//! An array is a directory holding a `.zarray` metadata document and one file
//! per chunk, named by the chunk's grid coordinates joined with `.`. Chunks that
//! were never written read as the fill value. Trailing chunks are stored at full
//! chunk size, padded with the fill value.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::region;

const METADATA_FILE: &str = ".zarray";
const ATTRIBUTES_FILE: &str = ".zattrs";
const DTYPE: &str = "<f4";
const ELEMENT_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayMetadata {
    shape: Vec<usize>,
    chunks: Vec<usize>,
    fill_value: f32,
}

#[derive(Serialize, Deserialize)]
struct ZArray {
    chunks: Vec<usize>,
    compressor: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dimension_separator: Option<String>,
    dtype: String,
    fill_value: Value,
    filters: Option<Value>,
    order: String,
    shape: Vec<usize>,
    zarr_format: u32,
}

impl ArrayMetadata {
    pub fn new(shape: impl Into<Vec<usize>>, chunks: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let chunks = chunks.into();
        if shape.len() != chunks.len() || shape.is_empty() {
            return Err(Error::Shape(format!(
                "shape {shape:?} and chunk shape {chunks:?} must have the same nonzero rank"
            )));
        }
        if chunks.contains(&0) {
            return Err(Error::Shape(format!(
                "chunk extents must be >= 1, got {chunks:?}"
            )));
        }
        Ok(Self {
            shape,
            chunks,
            fill_value: 0.0,
        })
    }

    pub fn with_fill_value(mut self, fill_value: f32) -> Self {
        self.fill_value = fill_value;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn chunks(&self) -> &[usize] {
        &self.chunks
    }

    pub fn fill_value(&self) -> f32 {
        self.fill_value
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> &'static str {
        DTYPE
    }

    /// Number of chunks along each axis.
    pub fn chunk_grid(&self) -> Vec<usize> {
        self.shape
            .iter()
            .zip(&self.chunks)
            .map(|(&n, &c)| n.div_ceil(c))
            .collect()
    }

    /// Elements per chunk file.
    pub fn chunk_len(&self) -> usize {
        region::volume(&self.chunks)
    }

    pub fn chunk_key(&self, indices: &[usize]) -> Result<String> {
        let grid = self.chunk_grid();
        if indices.len() != grid.len() || indices.iter().zip(&grid).any(|(&i, &n)| i >= n) {
            return Err(Error::OutOfBounds(format!(
                "chunk {indices:?} outside grid {grid:?}"
            )));
        }
        Ok(chunk_key(indices))
    }

    pub fn to_json(&self) -> String {
        let doc = ZArray {
            chunks: self.chunks.clone(),
            compressor: None,
            dimension_separator: None,
            dtype: DTYPE.to_string(),
            fill_value: fill_to_json(self.fill_value),
            filters: None,
            order: "C".to_string(),
            shape: self.shape.clone(),
            zarr_format: 2,
        };
        let mut out = Vec::new();
        let formatter = serde_json::ser::PrettyFormatter::with_indent(b"    ");
        let mut ser = serde_json::Serializer::with_formatter(&mut out, formatter);
        doc.serialize(&mut ser).expect("metadata serializes");
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ZArray =
            serde_json::from_str(text).map_err(|e| Error::Format(format!(".zarray: {e}")))?;
        if doc.zarr_format != 2 {
            return Err(Error::Format(format!(
                "unsupported zarr_format {}",
                doc.zarr_format
            )));
        }
        if doc.dtype != DTYPE {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}, expected {DTYPE:?}",
                doc.dtype
            )));
        }
        if doc.order != "C" {
            return Err(Error::Format(format!("unsupported order {:?}", doc.order)));
        }
        if doc.compressor.is_some() {
            return Err(Error::Format("compressed arrays are not supported".into()));
        }
        if doc.filters.as_ref().is_some_and(|f| !is_empty_list(f)) {
            return Err(Error::Format("filters are not supported".into()));
        }
        if let Some(sep) = doc.dimension_separator.as_deref() {
            if sep != "." {
                return Err(Error::Format(format!(
                    "unsupported dimension separator {sep:?}"
                )));
            }
        }
        let fill_value = fill_from_json(&doc.fill_value)?;
        Ok(Self::new(doc.shape, doc.chunks)?.with_fill_value(fill_value))
    }
}

fn is_empty_list(value: &Value) -> bool {
    value.as_array().is_some_and(Vec::is_empty)
}

fn fill_to_json(fill: f32) -> Value {
    if fill.is_nan() {
        Value::from("NaN")
    } else if fill.is_infinite() {
        Value::from(if fill > 0.0 { "Infinity" } else { "-Infinity" })
    } else {
        Value::from(f64::from(fill))
    }
}

fn fill_from_json(value: &Value) -> Result<f32> {
    match value {
        Value::Null => Ok(0.0),
        Value::Number(n) => n
            .as_f64()
            .map(|v| v as f32)
            .ok_or_else(|| Error::Format(format!("bad fill_value {n}"))),
        Value::String(s) => match s.as_str() {
            "NaN" => Ok(f32::NAN),
            "Infinity" => Ok(f32::INFINITY),
            "-Infinity" => Ok(f32::NEG_INFINITY),
            _ => Err(Error::Format(format!("bad fill_value {s:?}"))),
        },
        other => Err(Error::Format(format!("bad fill_value {other}"))),
    }
}

/// Chunk file name: grid coordinates joined by `.`.
pub fn chunk_key(indices: &[usize]) -> String {
    indices
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(".")
}

fn encode(values: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * ELEMENT_SIZE);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(ELEMENT_SIZE)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

pub(crate) fn write_atomic(dir: &Path, target: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(target)
        .map_err(|e| Error::io(target, e.error))?;
    Ok(())
}

/// An on-disk chunked array.
#[derive(Debug, Clone)]
pub struct ChunkedArray {
    root: PathBuf,
    meta: ArrayMetadata,
}

impl ChunkedArray {
    /// Writes the metadata document. No chunk files are created.
    pub fn create(root: impl AsRef<Path>, meta: ArrayMetadata) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        if Self::exists(&root) {
            return Err(Error::AlreadyExists(root));
        }
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        write_atomic(&root, &root.join(METADATA_FILE), meta.to_json().as_bytes())?;
        Ok(Self { root, meta })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(METADATA_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta = ArrayMetadata::from_json(&text)?;
        Ok(Self { root, meta })
    }

    /// True when `root` holds array metadata.
    pub fn exists(root: impl AsRef<Path>) -> bool {
        root.as_ref().join(METADATA_FILE).is_file()
    }

    /// Rewrites the metadata document in place; chunk files are kept.
    pub(crate) fn set_metadata(&mut self, meta: ArrayMetadata) -> Result<()> {
        write_atomic(
            &self.root,
            &self.root.join(METADATA_FILE),
            meta.to_json().as_bytes(),
        )?;
        self.meta = meta;
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn metadata(&self) -> &ArrayMetadata {
        &self.meta
    }

    pub fn shape(&self) -> &[usize] {
        self.meta.shape()
    }

    fn chunk_path(&self, indices: &[usize]) -> Result<PathBuf> {
        Ok(self.root.join(self.meta.chunk_key(indices)?))
    }

    /// Reads a chunk file; `None` when it has never been written.
    pub fn read_chunk(&self, indices: &[usize]) -> Result<Option<Vec<f32>>> {
        let path = self.chunk_path(indices)?;
        let bytes = match fs::read(&path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(path, e)),
        };
        let expected = self.meta.chunk_len() * ELEMENT_SIZE;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "chunk {} has {} bytes, expected {expected}",
                chunk_key(indices),
                bytes.len()
            )));
        }
        Ok(Some(decode(&bytes)))
    }

    pub fn read_chunk_or_fill(&self, indices: &[usize]) -> Result<Vec<f32>> {
        Ok(self
            .read_chunk(indices)?
            .unwrap_or_else(|| vec![self.meta.fill_value; self.meta.chunk_len()]))
    }

    /// Replaces a whole chunk via write-then-rename.
    pub fn write_chunk(&self, indices: &[usize], values: &[f32]) -> Result<()> {
        let path = self.chunk_path(indices)?;
        if values.len() != self.meta.chunk_len() {
            return Err(Error::Shape(format!(
                "chunk {} needs {} values, got {}",
                chunk_key(indices),
                self.meta.chunk_len(),
                values.len()
            )));
        }
        write_atomic(&self.root, &path, &encode(values))
    }

    fn check_region(&self, start: &[usize], shape: &[usize]) -> Result<()> {
        let rank = self.meta.rank();
        if start.len() != rank || shape.len() != rank {
            return Err(Error::OutOfBounds(format!(
                "region start {start:?} / shape {shape:?} does not match array rank {rank}"
            )));
        }
        for axis in 0..rank {
            if start[axis] + shape[axis] > self.meta.shape[axis] {
                return Err(Error::OutOfBounds(format!(
                    "region start {start:?} shape {shape:?} exceeds array shape {:?}",
                    self.meta.shape
                )));
            }
        }
        Ok(())
    }

    /// Calls `f(chunk_indices, chunk_offset, region_offset, extent)` for each
    /// chunk a region overlaps.
    fn for_each_overlap(
        &self,
        start: &[usize],
        shape: &[usize],
        mut f: impl FnMut(&[usize], &[usize], &[usize], &[usize]) -> Result<()>,
    ) -> Result<()> {
        if shape.contains(&0) {
            return Ok(());
        }
        let chunks = &self.meta.chunks;
        let first: Vec<usize> = start.iter().zip(chunks).map(|(&s, &c)| s / c).collect();
        let counts: Vec<usize> = start
            .iter()
            .zip(shape)
            .zip(chunks)
            .zip(&first)
            .map(|(((&s, &n), &c), &f)| (s + n - 1) / c - f + 1)
            .collect();
        let rank = start.len();
        let mut result = Ok(());
        region::for_each_index(&counts, |rel| {
            if result.is_err() {
                return;
            }
            let mut chunk = vec![0; rank];
            let mut in_chunk = vec![0; rank];
            let mut in_region = vec![0; rank];
            let mut extent = vec![0; rank];
            for axis in 0..rank {
                chunk[axis] = first[axis] + rel[axis];
                let lo = (chunk[axis] * chunks[axis]).max(start[axis]);
                let hi = ((chunk[axis] + 1) * chunks[axis]).min(start[axis] + shape[axis]);
                in_chunk[axis] = lo - chunk[axis] * chunks[axis];
                in_region[axis] = lo - start[axis];
                extent[axis] = hi - lo;
            }
            result = f(&chunk, &in_chunk, &in_region, &extent);
        });
        result
    }

    pub fn read_region(&self, start: &[usize], shape: &[usize]) -> Result<Vec<f32>> {
        self.check_region(start, shape)?;
        let mut out = vec![self.meta.fill_value; region::volume(shape)];
        let chunk_shape = self.meta.chunks.clone();
        self.for_each_overlap(start, shape, |chunk, in_chunk, in_region, extent| {
            if let Some(data) = self.read_chunk(chunk)? {
                region::copy_box(
                    &data,
                    &chunk_shape,
                    in_chunk,
                    &mut out,
                    shape,
                    in_region,
                    extent,
                );
            }
            Ok(())
        })?;
        Ok(out)
    }

    /// Writes a dense row-major block of `shape` at `start`.
    pub fn write_region(&self, start: &[usize], shape: &[usize], values: &[f32]) -> Result<()> {
        self.check_region(start, shape)?;
        if values.len() != region::volume(shape) {
            return Err(Error::Shape(format!(
                "region of shape {shape:?} needs {} values, got {}",
                region::volume(shape),
                values.len()
            )));
        }
        let chunk_shape = self.meta.chunks.clone();
        self.for_each_overlap(start, shape, |chunk, in_chunk, in_region, extent| {
            let mut data = if extent == chunk_shape.as_slice() {
                vec![self.meta.fill_value; self.meta.chunk_len()]
            } else {
                self.read_chunk_or_fill(chunk)?
            };
            region::copy_box(
                values,
                shape,
                in_region,
                &mut data,
                &chunk_shape,
                in_chunk,
                extent,
            );
            self.write_chunk(chunk, &data)
        })
    }

    pub fn read_all(&self) -> Result<Vec<f32>> {
        let start = vec![0; self.meta.rank()];
        self.read_region(&start, &self.meta.shape)
    }

    /// Stores user attributes in `.zattrs`.
    pub fn write_attributes(&self, attrs: &Value) -> Result<()> {
        let text = serde_json::to_string_pretty(attrs).expect("attributes serialize");
        write_atomic(
            &self.root,
            &self.root.join(ATTRIBUTES_FILE),
            text.as_bytes(),
        )
    }

    pub fn read_attributes(&self) -> Result<Option<Value>> {
        let path = self.root.join(ATTRIBUTES_FILE);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| Error::Format(format!(".zattrs: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}
