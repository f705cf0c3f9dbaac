//! Window extraction from dense tensors.

use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{PatchPlan, TensorLayout};
use crate::region;
use crate::store::{ArrayMetadata, ChunkedArray};

pub const PATCHES_FORMAT: &str = "tessellate-patches/1";
const ATTRS_KEY: &str = "tessellate";

/// Contiguous `f32` tensor laid out as `(N, C, spatial...)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    layout: TensorLayout,
    values: Vec<f32>,
}

impl DenseTensor {
    pub fn new(layout: TensorLayout, values: Vec<f32>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "layout {:?} needs {} values, got {}",
                layout.shape(),
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: TensorLayout) -> Self {
        Self::filled(layout, 0.0)
    }

    pub fn filled(layout: TensorLayout, value: f32) -> Self {
        let values = vec![value; layout.len()];
        Self { layout, values }
    }

    /// Builds a tensor by evaluating `f` at every `[n, c, spatial...]` index.
    pub fn from_fn(layout: TensorLayout, mut f: impl FnMut(&[usize]) -> f32) -> Self {
        let mut values = Vec::with_capacity(layout.len());
        region::for_each_index(&layout.shape(), |index| values.push(f(index)));
        Self { layout, values }
    }

    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.values[region::offset(&region::strides(&self.layout.shape()), index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let at = region::offset(&region::strides(&self.layout.shape()), index);
        self.values[at] = value;
    }

    fn copy_window(&self, item: usize, start: &[usize], shape: &[usize], out: &mut [f32]) {
        let full = self.layout.shape();
        let mut src_start = vec![item, 0];
        src_start.extend_from_slice(start);
        let mut extent = vec![1, self.layout.channels()];
        extent.extend_from_slice(shape);
        let dst_start = vec![0; extent.len()];
        region::copy_box(
            &self.values,
            &full,
            &src_start,
            out,
            &extent,
            &dst_start,
            &extent,
        );
    }
}

/// Anything windows can be read from: in-memory tensors, on-disk arrays, raw files.
pub trait WindowSource {
    fn layout(&self) -> &TensorLayout;

    /// Reads all channels of `item` over `[start, start + shape)`, as `(C, shape...)`.
    fn read_window(&self, item: usize, start: &[usize], shape: &[usize]) -> Result<Vec<f32>>;
}

fn check_window(
    layout: &TensorLayout,
    item: usize,
    start: &[usize],
    shape: &[usize],
) -> Result<()> {
    let fits = item < layout.items()
        && start.len() == layout.rank()
        && shape.len() == layout.rank()
        && start
            .iter()
            .zip(shape)
            .zip(layout.spatial())
            .all(|((&s, &n), &e)| s + n <= e);
    if fits {
        Ok(())
    } else {
        Err(Error::OutOfBounds(format!(
            "window item {item} start {start:?} shape {shape:?} outside {:?}",
            layout.shape()
        )))
    }
}

impl WindowSource for DenseTensor {
    fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    fn read_window(&self, item: usize, start: &[usize], shape: &[usize]) -> Result<Vec<f32>> {
        check_window(&self.layout, item, start, shape)?;
        let mut out = vec![0.0; self.layout.channels() * region::volume(shape)];
        self.copy_window(item, start, shape, &mut out);
        Ok(out)
    }
}

/// A chunked array interpreted as an `(N, C, spatial...)` tensor.
#[derive(Debug, Clone)]
pub struct StoreVolume {
    array: ChunkedArray,
    layout: TensorLayout,
}

impl StoreVolume {
    pub fn new(array: ChunkedArray) -> Result<Self> {
        let layout = TensorLayout::from_shape(array.shape())?;
        Ok(Self { array, layout })
    }

    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        Self::new(ChunkedArray::open(root)?)
    }

    pub fn array(&self) -> &ChunkedArray {
        &self.array
    }

    pub fn to_dense(&self) -> Result<DenseTensor> {
        DenseTensor::new(self.layout.clone(), self.array.read_all()?)
    }
}

impl WindowSource for StoreVolume {
    fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    fn read_window(&self, item: usize, start: &[usize], shape: &[usize]) -> Result<Vec<f32>> {
        check_window(&self.layout, item, start, shape)?;
        let mut full_start = vec![item, 0];
        full_start.extend_from_slice(start);
        let mut full_shape = vec![1, self.layout.channels()];
        full_shape.extend_from_slice(shape);
        self.array.read_region(&full_start, &full_shape)
    }
}

/// Patches stacked along a leading batch axis, `(M, C, window...)`.
///
/// `indices[i]` is the plan placement patch `i` was cut from; for a full
/// extraction it is simply `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStack {
    plan: Arc<PatchPlan>,
    indices: Vec<usize>,
    channels: usize,
    values: Vec<f32>,
}

impl PatchStack {
    pub fn from_parts(
        plan: Arc<PatchPlan>,
        indices: Vec<usize>,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape(
                "patch stacks need at least one channel".into(),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= plan.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: plan.len(),
            });
        }
        let expected = indices.len() * channels * plan.spec().window_volume();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} patches of {channels} channels need {expected} values, got {}",
                indices.len(),
                values.len()
            )));
        }
        Ok(Self {
            plan,
            indices,
            channels,
            values,
        })
    }

    pub fn plan(&self) -> &Arc<PatchPlan> {
        &self.plan
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn window(&self) -> &[usize] {
        self.plan.spec().window()
    }

    /// `[M, C, window...]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut shape = vec![self.len(), self.channels];
        shape.extend_from_slice(self.window());
        shape
    }

    /// Values per patch.
    pub fn patch_len(&self) -> usize {
        self.channels * self.plan.spec().window_volume()
    }

    pub fn patch(&self, i: usize) -> &[f32] {
        let n = self.patch_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn patch_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.patch_len();
        &mut self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    /// Two stacks are paired when they hold the same placements of the same
    /// geometry; channel counts may differ.
    pub fn is_paired_with(&self, other: &PatchStack) -> bool {
        self.indices == other.indices
            && (Arc::ptr_eq(&self.plan, &other.plan)
                || (self.plan.layout().same_geometry(other.plan.layout())
                    && self.plan.spec() == other.plan.spec()
                    && self.plan.placements() == other.plan.placements()))
    }

    /// Writes the stack as an array of shape `(M, C, window...)`, one chunk per
    /// patch, with the plan and placement indices recorded in `.zattrs`.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<ChunkedArray> {
        let mut writer =
            PatchStoreWriter::create(root, self.plan.clone(), self.channels, self.len())?;
        for (i, &index) in self.indices.iter().enumerate() {
            writer.push(index, self.patch(i))?;
        }
        writer.finish()
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let reader = PatchStoreReader::open(root)?;
        let mut values = Vec::with_capacity(reader.len() * reader.patch_len());
        for i in 0..reader.len() {
            values.extend(reader.read_patch(i)?);
        }
        Self::from_parts(reader.plan, reader.indices, reader.channels, values)
    }
}

fn patch_array_shape(count: usize, channels: usize, window: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut shape = vec![count, channels];
    shape.extend_from_slice(window);
    let mut chunks = vec![1, channels];
    chunks.extend_from_slice(window);
    (shape, chunks)
}

/// Streams patches into an on-disk patch array.
pub struct PatchStoreWriter {
    array: ChunkedArray,
    plan: Arc<PatchPlan>,
    channels: usize,
    indices: Vec<usize>,
    capacity: usize,
}

impl PatchStoreWriter {
    /// `capacity` is the leading extent of the array; `finish` shrinks the
    /// recorded shape to the number of patches actually pushed.
    pub fn create(
        root: impl AsRef<Path>,
        plan: Arc<PatchPlan>,
        channels: usize,
        capacity: usize,
    ) -> Result<Self> {
        let (shape, chunks) = patch_array_shape(capacity, channels, plan.spec().window());
        let array = ChunkedArray::create(root, ArrayMetadata::new(shape, chunks)?)?;
        Ok(Self {
            array,
            plan,
            channels,
            indices: Vec::new(),
            capacity,
        })
    }

    pub fn push(&mut self, placement_index: usize, patch: &[f32]) -> Result<()> {
        let slot = self.indices.len();
        if slot >= self.capacity {
            return Err(Error::IndexOutOfRange {
                index: slot,
                len: self.capacity,
            });
        }
        let mut chunk = vec![slot, 0];
        chunk.extend(std::iter::repeat_n(0, self.plan.layout().rank()));
        self.array.write_chunk(&chunk, patch)?;
        self.indices.push(placement_index);
        Ok(())
    }

    pub fn finish(mut self) -> Result<ChunkedArray> {
        if self.indices.len() != self.capacity {
            let (shape, chunks) =
                patch_array_shape(self.indices.len(), self.channels, self.plan.spec().window());
            self.array
                .set_metadata(ArrayMetadata::new(shape, chunks)?)?;
        }
        let array = self.array;
        array.write_attributes(&json!({
            ATTRS_KEY: {
                "format": PATCHES_FORMAT,
                "plan": self.plan.document_value(),
                "indices": self.indices,
            }
        }))?;
        Ok(array)
    }
}

/// Random access to an on-disk patch array.
pub struct PatchStoreReader {
    array: ChunkedArray,
    plan: Arc<PatchPlan>,
    indices: Vec<usize>,
    channels: usize,
}

impl PatchStoreReader {
    /// Opens a patch array. Arrays without recorded provenance must be
    /// accompanied by a plan via [`PatchStoreReader::open_with_plan`].
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let array = ChunkedArray::open(root.as_ref())?;
        let attrs = array
            .read_attributes()?
            .and_then(|a| a.get(ATTRS_KEY).cloned())
            .ok_or_else(|| {
                Error::Format(format!(
                    "{} carries no patch provenance",
                    root.as_ref().display()
                ))
            })?;
        let plan = PatchPlan::from_value(attrs["plan"].clone())?;
        Self::with_attrs(array, Arc::new(plan), Some(&attrs))
    }

    /// Opens a patch array, interpreting it against `plan`. Recorded placement
    /// indices are used when present, otherwise patch `i` is placement `i`.
    pub fn open_with_plan(root: impl AsRef<Path>, plan: Arc<PatchPlan>) -> Result<Self> {
        let array = ChunkedArray::open(root)?;
        let attrs = array
            .read_attributes()?
            .and_then(|a| a.get(ATTRS_KEY).cloned());
        Self::with_attrs(array, plan, attrs.as_ref())
    }

    fn with_attrs(
        array: ChunkedArray,
        plan: Arc<PatchPlan>,
        attrs: Option<&serde_json::Value>,
    ) -> Result<Self> {
        let shape = array.shape().to_vec();
        let window = plan.spec().window();
        if shape.len() != window.len() + 2 || &shape[2..] != window {
            return Err(Error::Shape(format!(
                "patch array shape {shape:?} does not match window {window:?}"
            )));
        }
        let indices = match attrs.and_then(|a| a.get("indices")) {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Format(format!("patch indices: {e}")))?,
            None => (0..shape[0]).collect::<Vec<usize>>(),
        };
        if indices.len() != shape[0] {
            return Err(Error::Format(format!(
                "{} recorded indices for {} patches",
                indices.len(),
                shape[0]
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= plan.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: plan.len(),
            });
        }
        Ok(Self {
            channels: shape[1],
            array,
            plan,
            indices,
        })
    }

    pub fn plan(&self) -> &Arc<PatchPlan> {
        &self.plan
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.plan.spec().window_volume()
    }

    pub fn read_patch(&self, i: usize) -> Result<Vec<f32>> {
        if i >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len(),
            });
        }
        let shape = self.array.shape();
        let mut start = vec![0; shape.len()];
        start[0] = i;
        let mut extent = shape.to_vec();
        extent[0] = 1;
        self.array.read_region(&start, &extent)
    }
}

/// Cuts every window of `plan` out of `tensor`.
pub fn extract(tensor: &DenseTensor, plan: &PatchPlan) -> Result<PatchStack> {
    if tensor.layout() != plan.layout() {
        return Err(Error::Shape(format!(
            "tensor layout {:?} differs from plan layout {:?}",
            tensor.layout().shape(),
            plan.layout().shape()
        )));
    }
    Ok(extract_with(tensor, Arc::new(plan.clone())))
}

fn extract_with(tensor: &DenseTensor, plan: Arc<PatchPlan>) -> PatchStack {
    let channels = tensor.layout().channels();
    let window = plan.spec().window().to_vec();
    let patch_len = channels * region::volume(&window);
    let mut values = vec![0.0; plan.len() * patch_len];
    if patch_len > 0 {
        values
            .par_chunks_mut(patch_len)
            .zip(plan.placements().par_iter())
            .for_each(|(out, p)| tensor.copy_window(p.item, &p.start, &window, out));
    }
    PatchStack {
        indices: (0..plan.len()).collect(),
        plan,
        channels,
        values,
    }
}

/// Extracts data and label windows with one plan. Channel counts may differ.
pub fn extract_pair(
    data: &DenseTensor,
    labels: &DenseTensor,
    plan: &PatchPlan,
) -> Result<(PatchStack, PatchStack)> {
    if !labels.layout().same_geometry(data.layout()) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match data {:?} in items or spatial extents",
            labels.layout().shape(),
            data.layout().shape()
        )));
    }
    let data_stack = extract(data, plan)?;
    let label_stack = extract_with(labels, data_stack.plan.clone());
    Ok((data_stack, label_stack))
}

/// Item and half-open spatial intervals covered by one patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRegion {
    pub item: usize,
    pub ranges: Vec<Range<usize>>,
}

impl PatchRegion {
    pub fn start(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.start).collect()
    }

    pub fn contains(&self, spatial: &[usize]) -> bool {
        self.ranges.iter().zip(spatial).all(|(r, v)| r.contains(v))
    }
}

pub fn patch_region(plan: &PatchPlan, index: usize) -> Result<PatchRegion> {
    let p = plan.placement(index)?;
    Ok(PatchRegion {
        item: p.item,
        ranges: p.ranges(plan.spec().window()),
    })
}

/// Sequential patch iterator; holds at most one patch at a time.
pub struct Patches<'a, S: ?Sized> {
    source: &'a S,
    plan: &'a PatchPlan,
    next: usize,
}

/// Streams the patches of `plan` from `source` in plan order.
pub fn patches<'a, S: WindowSource + ?Sized>(
    source: &'a S,
    plan: &'a PatchPlan,
) -> Result<Patches<'a, S>> {
    if !source.layout().same_geometry(plan.layout()) {
        return Err(Error::Shape(format!(
            "source layout {:?} does not match plan layout {:?}",
            source.layout().shape(),
            plan.layout().shape()
        )));
    }
    Ok(Patches {
        source,
        plan,
        next: 0,
    })
}

impl<S: WindowSource + ?Sized> Iterator for Patches<'_, S> {
    type Item = Result<Vec<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        let p = self.plan.placements().get(self.next)?;
        self.next += 1;
        Some(
            self.source
                .read_window(p.item, &p.start, self.plan.spec().window()),
        )
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.plan.len() - self.next;
        (left, Some(left))
    }
}

impl<S: WindowSource + ?Sized> ExactSizeIterator for Patches<'_, S> {}
