//! Input volumes for the command-line tools: zarr v2 stores and raw
//! little-endian `f32` files described by a JSON sidecar.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TensorLayout;
use crate::region;
use crate::store::ChunkedArray;
use crate::subsample::{StoreVolume, WindowSource};

/// Sidecar next to a raw file: `volume.f32` is described by `volume.f32.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: Vec<usize>,
    /// Axis names in storage order, e.g. `"NCZYX"`, `"CYX"` or `"ZYX"`.
    /// Omitted `N`/`C` axes have extent 1. Defaults from the rank: 4 → NCYX,
    /// 5 → NCZYX.
    #[serde(default)]
    pub axes: Option<String>,
    #[serde(default)]
    pub dtype: Option<String>,
}

impl RawHeader {
    pub fn layout(&self) -> Result<TensorLayout> {
        let axes = match &self.axes {
            Some(a) => a.to_ascii_uppercase(),
            None => match self.shape.len() {
                4 => "NCYX".to_string(),
                5 => "NCZYX".to_string(),
                n => {
                    return Err(Error::Format(format!(
                        "raw header with {n} axes needs an explicit `axes` field"
                    )))
                }
            },
        };
        if let Some(dtype) = &self.dtype {
            if dtype != "<f4" {
                return Err(Error::Format(format!("unsupported raw dtype {dtype:?}")));
            }
        }
        let valid = ["NCZYX", "NCYX", "CZYX", "CYX", "NZYX", "NYX", "ZYX", "YX"];
        if !valid.contains(&axes.as_str()) || axes.len() != self.shape.len() {
            return Err(Error::Format(format!(
                "axes {axes:?} must be one of {valid:?} and match shape {:?}",
                self.shape
            )));
        }
        let extent = |name: char| axes.find(name).map_or(1, |i| self.shape[i]);
        let spatial: Vec<usize> = axes
            .chars()
            .zip(&self.shape)
            .filter(|(c, _)| matches!(c, 'Z' | 'Y' | 'X'))
            .map(|(_, &n)| n)
            .collect();
        TensorLayout::new(extent('N'), extent('C'), spatial)
    }
}

/// Raw `f32` volume read window by window without loading the whole file.
#[derive(Debug)]
pub struct RawVolume {
    path: PathBuf,
    file: Mutex<File>,
    layout: TensorLayout,
}

impl RawVolume {
    pub fn open(data: &Path, header: &RawHeader) -> Result<Self> {
        let layout = header.layout()?;
        let file = File::open(data).map_err(|e| Error::io(data, e))?;
        let len = file.metadata().map_err(|e| Error::io(data, e))?.len();
        let expected = layout.len() as u64 * 4;
        if len != expected {
            return Err(Error::Format(format!(
                "{} holds {len} bytes, header {:?} needs {expected}",
                data.display(),
                header.shape
            )));
        }
        Ok(Self {
            path: data.to_path_buf(),
            file: Mutex::new(file),
            layout,
        })
    }
}

impl WindowSource for RawVolume {
    fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    fn read_window(&self, item: usize, start: &[usize], shape: &[usize]) -> Result<Vec<f32>> {
        let rank = self.layout.rank();
        if item >= self.layout.items()
            || start.len() != rank
            || shape.len() != rank
            || (0..rank).any(|a| start[a] + shape[a] > self.layout.spatial()[a])
        {
            return Err(Error::OutOfBounds(format!(
                "window item {item} start {start:?} shape {shape:?} outside {:?}",
                self.layout.shape()
            )));
        }
        let channels = self.layout.channels();
        let full = self.layout.shape();
        let mut src_start = vec![item, 0];
        src_start.extend_from_slice(start);
        let mut extent = vec![1, channels];
        extent.extend_from_slice(shape);
        let dst_start = vec![0; extent.len()];
        let mut out = vec![0.0f32; region::volume(&extent)];
        let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
        let mut bytes = Vec::new();
        let mut failure = None;
        region::for_each_row(
            &full,
            &src_start,
            &extent,
            &dst_start,
            &extent,
            |src, dst, run| {
                if failure.is_some() {
                    return;
                }
                bytes.resize(run * 4, 0);
                let read = file
                    .seek(SeekFrom::Start(src as u64 * 4))
                    .and_then(|_| file.read_exact(&mut bytes));
                match read {
                    Ok(()) => {
                        for (k, b) in bytes.chunks_exact(4).enumerate() {
                            out[dst + k] = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                        }
                    }
                    Err(e) => failure = Some(e),
                }
            },
        );
        match failure {
            Some(e) => Err(Error::io(&self.path, e)),
            None => Ok(out),
        }
    }
}

/// Any supported input volume.
#[derive(Debug)]
pub enum Volume {
    Store(StoreVolume),
    Raw(RawVolume),
}

fn sidecar_for(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

impl Volume {
    /// Opens a zarr store directory, a raw file with a `<file>.json` sidecar,
    /// or the sidecar itself.
    pub fn open(path: &Path) -> Result<Self> {
        if ChunkedArray::exists(path) {
            return Ok(Volume::Store(StoreVolume::open(path)?));
        }
        let (data, header_path) = if path.extension().is_some_and(|e| e == "json") {
            (path.with_extension(""), path.to_path_buf())
        } else {
            (path.to_path_buf(), sidecar_for(path))
        };
        if !header_path.is_file() {
            return Err(Error::Unrecognized(path.to_path_buf()));
        }
        let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
        let header: RawHeader = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", header_path.display())))?;
        Ok(Volume::Raw(RawVolume::open(&data, &header)?))
    }

    fn source(&self) -> &dyn WindowSource {
        match self {
            Volume::Store(v) => v,
            Volume::Raw(v) => v,
        }
    }
}

impl WindowSource for Volume {
    fn layout(&self) -> &TensorLayout {
        self.source().layout()
    }

    fn read_window(&self, item: usize, start: &[usize], shape: &[usize]) -> Result<Vec<f32>> {
        self.source().read_window(item, start, shape)
    }
}

/// Writes a raw volume and its sidecar.
pub fn write_raw(path: &Path, layout: &TensorLayout, values: &[f32]) -> Result<()> {
    if values.len() != layout.len() {
        return Err(Error::Shape(format!(
            "layout needs {} values, got {}",
            layout.len(),
            values.len()
        )));
    }
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let axes = if layout.rank() == 3 { "NCZYX" } else { "NCYX" };
    let header = RawHeader {
        shape: layout.shape(),
        axes: Some(axes.to_string()),
        dtype: Some("<f4".to_string()),
    };
    let sidecar = sidecar_for(path);
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&header).expect("header serializes"),
    )
    .map_err(|e| Error::io(sidecar, e))
}
