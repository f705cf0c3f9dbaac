//! Window placement and per-placement weighting.
//!
//! Everything here is pure arithmetic on shapes: no tensor values are touched.
//! A [`PatchPlan`] enumerates window placements item by item, with the slowest
//! spatial axis outermost. Along each axis the window advances by `step` and a
//! final placement is stepped back so that the last window ends exactly on the
//! tensor boundary.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region;

pub const PLAN_FORMAT: &str = "tessellate-plan/1";

/// Shape of an `(N, C, spatial...)` tensor with two or three spatial axes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLayout")]
pub struct TensorLayout {
    items: usize,
    channels: usize,
    spatial: Vec<usize>,
}

#[derive(Deserialize)]
struct RawLayout {
    items: usize,
    channels: usize,
    spatial: Vec<usize>,
}

impl TryFrom<RawLayout> for TensorLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        TensorLayout::new(raw.items, raw.channels, raw.spatial)
    }
}

impl TensorLayout {
    pub fn new(items: usize, channels: usize, spatial: impl Into<Vec<usize>>) -> Result<Self> {
        let spatial = spatial.into();
        if !(2..=3).contains(&spatial.len()) {
            return Err(Error::Shape(format!(
                "spatial rank must be 2 or 3, got {}",
                spatial.len()
            )));
        }
        if items == 0 || channels == 0 || spatial.contains(&0) {
            return Err(Error::Shape(format!(
                "all extents must be at least 1, got items={items} channels={channels} spatial={spatial:?}"
            )));
        }
        Ok(Self {
            items,
            channels,
            spatial,
        })
    }

    /// Builds a layout from a full `[N, C, spatial...]` shape.
    pub fn from_shape(shape: &[usize]) -> Result<Self> {
        if shape.len() < 4 {
            return Err(Error::Shape(format!(
                "expected an (N, C, spatial...) shape, got {shape:?}"
            )));
        }
        Self::new(shape[0], shape[1], &shape[2..])
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn rank(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial_volume(&self) -> usize {
        region::volume(&self.spatial)
    }

    /// Number of values in the full tensor.
    pub fn len(&self) -> usize {
        self.items * self.channels * self.spatial_volume()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `[N, C, spatial...]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut shape = vec![self.items, self.channels];
        shape.extend_from_slice(&self.spatial);
        shape
    }

    pub fn with_channels(&self, channels: usize) -> Result<Self> {
        Self::new(self.items, channels, self.spatial.clone())
    }

    /// True when both layouts have the same item count and spatial extents.
    pub fn same_geometry(&self, other: &TensorLayout) -> bool {
        self.items == other.items && self.spatial == other.spatial
    }
}

/// Window, step and border sizes per spatial axis plus the border weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct WindowSpec {
    window: Vec<usize>,
    step: Vec<usize>,
    border: Vec<usize>,
    border_weight: f32,
}

#[derive(Deserialize)]
struct RawSpec {
    window: Vec<usize>,
    step: Vec<usize>,
    #[serde(default)]
    border: Option<Vec<usize>>,
    #[serde(default = "one")]
    border_weight: f32,
}

fn one() -> f32 {
    1.0
}

impl TryFrom<RawSpec> for WindowSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        let border = raw.border.unwrap_or_else(|| vec![0; raw.window.len()]);
        WindowSpec::with_border(raw.window, raw.step, border, raw.border_weight)
    }
}

impl WindowSpec {
    /// A spec without a border region.
    pub fn new(window: impl Into<Vec<usize>>, step: impl Into<Vec<usize>>) -> Result<Self> {
        let window = window.into();
        let border = vec![0; window.len()];
        Self::with_border(window, step, border, 1.0)
    }

    pub fn with_border(
        window: impl Into<Vec<usize>>,
        step: impl Into<Vec<usize>>,
        border: impl Into<Vec<usize>>,
        border_weight: f32,
    ) -> Result<Self> {
        let spec = Self {
            window: window.into(),
            step: step.into(),
            border: border.into(),
            border_weight,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same window, step and border on every axis.
    pub fn uniform(
        rank: usize,
        window: usize,
        step: usize,
        border: usize,
        border_weight: f32,
    ) -> Result<Self> {
        Self::with_border(
            vec![window; rank],
            vec![step; rank],
            vec![border; rank],
            border_weight,
        )
    }

    pub fn window(&self) -> &[usize] {
        &self.window
    }

    pub fn step(&self) -> &[usize] {
        &self.step
    }

    pub fn border(&self) -> &[usize] {
        &self.border
    }

    pub fn border_weight(&self) -> f32 {
        self.border_weight
    }

    pub fn rank(&self) -> usize {
        self.window.len()
    }

    pub fn window_volume(&self) -> usize {
        region::volume(&self.window)
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.window.len();
        if !(2..=3).contains(&rank) {
            return Err(Error::InvalidSpec(format!(
                "window must have 2 or 3 axes, got {rank}"
            )));
        }
        if self.step.len() != rank || self.border.len() != rank {
            return Err(Error::InvalidSpec(format!(
                "window, step and border must have the same number of axes ({} / {} / {})",
                rank,
                self.step.len(),
                self.border.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.border_weight) {
            return Err(Error::InvalidSpec(format!(
                "border weight must lie in [0, 1], got {}",
                self.border_weight
            )));
        }
        for axis in 0..rank {
            let (window, step, border) = (self.window[axis], self.step[axis], self.border[axis]);
            if window == 0 {
                return Err(Error::InvalidSpec(format!(
                    "axis {axis}: window must be >= 1"
                )));
            }
            if step == 0 || step > window {
                return Err(Error::InvalidSpec(format!(
                    "axis {axis}: step {step} must lie in [1, window = {window}]"
                )));
            }
            if 2 * border >= window {
                return Err(Error::InvalidSpec(format!(
                    "axis {axis}: border {border} leaves no interior in window {window}"
                )));
            }
            // With zero border weight only interiors contribute, so consecutive
            // interiors must meet or some voxels would never receive weight.
            if self.border_weight == 0.0 && step > window - 2 * border {
                return Err(Error::InvalidSpec(format!(
                    "axis {axis}: with border weight 0 the step {step} must not exceed \
                     window - 2*border = {}",
                    window - 2 * border
                )));
            }
        }
        Ok(())
    }

    /// Checks the spec against the extents it will be applied to.
    pub fn check_layout(&self, layout: &TensorLayout) -> Result<()> {
        self.validate()?;
        if layout.rank() != self.rank() {
            return Err(Error::InvalidSpec(format!(
                "spec has {} axes but tensor has {} spatial axes",
                self.rank(),
                layout.rank()
            )));
        }
        for (axis, (&window, &extent)) in self.window.iter().zip(layout.spatial()).enumerate() {
            if window > extent {
                return Err(Error::InvalidSpec(format!(
                    "axis {axis}: window {window} exceeds extent {extent}"
                )));
            }
        }
        Ok(())
    }
}

/// Window start offsets along one axis, with the final window stepped back to
/// end on the boundary.
pub fn axis_positions(extent: usize, window: usize, step: usize) -> Result<Vec<usize>> {
    if window == 0 || step == 0 {
        return Err(Error::InvalidSpec(format!(
            "window ({window}) and step ({step}) must be >= 1"
        )));
    }
    if window > extent {
        return Err(Error::InvalidSpec(format!(
            "window {window} exceeds extent {extent}"
        )));
    }
    if step > window {
        return Err(Error::InvalidSpec(format!(
            "step {step} exceeds window {window}"
        )));
    }
    let last = extent - window;
    let mut positions: Vec<usize> = (0..=last).step_by(step).collect();
    if positions.last() != Some(&last) {
        positions.push(last);
    }
    Ok(positions)
}

/// One window placement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Placement {
    pub item: usize,
    pub start: Vec<usize>,
    pub touches_low: Vec<bool>,
    pub touches_high: Vec<bool>,
}

impl Placement {
    fn new(item: usize, start: Vec<usize>, layout: &TensorLayout, spec: &WindowSpec) -> Self {
        let touches_low = start.iter().map(|&s| s == 0).collect();
        let touches_high = start
            .iter()
            .zip(layout.spatial())
            .zip(spec.window())
            .map(|((&s, &extent), &window)| s + window == extent)
            .collect();
        Self {
            item,
            start,
            touches_low,
            touches_high,
        }
    }

    /// Half-open `[start, start + window)` interval per axis.
    pub fn ranges(&self, window: &[usize]) -> Vec<std::ops::Range<usize>> {
        self.start
            .iter()
            .zip(window)
            .map(|(&s, &w)| s..s + w)
            .collect()
    }
}

/// Ordered list of placements for one layout and spec.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPlan {
    layout: TensorLayout,
    spec: WindowSpec,
    placements: Vec<Placement>,
}

pub fn build_plan(layout: &TensorLayout, spec: &WindowSpec) -> Result<PatchPlan> {
    spec.check_layout(layout)?;
    let positions = layout
        .spatial()
        .iter()
        .zip(spec.window().iter().zip(spec.step()))
        .map(|(&extent, (&window, &step))| axis_positions(extent, window, step))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = positions.iter().map(Vec::len).collect();
    let per_item = region::volume(&counts);
    let mut placements = Vec::with_capacity(layout.items() * per_item);
    for item in 0..layout.items() {
        region::for_each_index(&counts, |index| {
            let start = index
                .iter()
                .enumerate()
                .map(|(axis, &i)| positions[axis][i])
                .collect();
            placements.push(Placement::new(item, start, layout, spec));
        });
    }
    Ok(PatchPlan {
        layout: layout.clone(),
        spec: spec.clone(),
        placements,
    })
}

#[derive(Serialize, Deserialize)]
struct PlanDocument {
    format: String,
    layout: TensorLayout,
    spec: WindowSpec,
    placements: Vec<PlacementRecord>,
}

#[derive(Serialize, Deserialize)]
struct PlacementRecord {
    item: usize,
    start: Vec<usize>,
}

impl PatchPlan {
    pub fn layout(&self) -> &TensorLayout {
        &self.layout
    }

    pub fn spec(&self) -> &WindowSpec {
        &self.spec
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn len(&self) -> usize {
        self.placements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    pub fn placement(&self, index: usize) -> Result<&Placement> {
        self.placements.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: self.placements.len(),
        })
    }

    /// Distinct start offsets used along each spatial axis.
    pub fn axis_positions(&self) -> Vec<Vec<usize>> {
        (0..self.layout.rank())
            .map(|axis| {
                let mut starts: Vec<usize> =
                    self.placements.iter().map(|p| p.start[axis]).collect();
                starts.sort_unstable();
                starts.dedup();
                starts
            })
            .collect()
    }

    /// Average number of windows containing a voxel.
    pub fn mean_multiplicity(&self) -> f64 {
        let covered = self.placements.len() as f64 * self.spec.window_volume() as f64;
        covered / (self.layout.items() as f64 * self.layout.spatial_volume() as f64)
    }

    /// Same geometry with a different channel count.
    pub fn with_channels(&self, channels: usize) -> Result<PatchPlan> {
        Ok(PatchPlan {
            layout: self.layout.with_channels(channels)?,
            spec: self.spec.clone(),
            placements: self.placements.clone(),
        })
    }

    pub(crate) fn document_value(&self) -> serde_json::Value {
        serde_json::to_value(self.document()).expect("plan serializes")
    }

    fn document(&self) -> PlanDocument {
        PlanDocument {
            format: PLAN_FORMAT.to_string(),
            layout: self.layout.clone(),
            spec: self.spec.clone(),
            placements: self
                .placements
                .iter()
                .map(|p| PlacementRecord {
                    item: p.item,
                    start: p.start.clone(),
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.document()).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PlanDocument =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("plan: {e}")))?;
        Self::from_document(doc)
    }

    pub(crate) fn from_value(value: serde_json::Value) -> Result<Self> {
        let doc: PlanDocument =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("plan: {e}")))?;
        Self::from_document(doc)
    }

    fn from_document(doc: PlanDocument) -> Result<Self> {
        if doc.format != PLAN_FORMAT {
            return Err(Error::Format(format!(
                "expected format {PLAN_FORMAT:?}, found {:?}",
                doc.format
            )));
        }
        let layout = doc.layout;
        let spec = doc.spec;
        spec.check_layout(&layout)?;
        let mut placements: Vec<Placement> = Vec::with_capacity(doc.placements.len());
        for record in doc.placements {
            if record.item >= layout.items() || record.start.len() != layout.rank() {
                return Err(Error::Format(format!(
                    "placement (item {}, start {:?}) does not fit layout",
                    record.item, record.start
                )));
            }
            for (axis, &s) in record.start.iter().enumerate() {
                if s + spec.window()[axis] > layout.spatial()[axis] {
                    return Err(Error::Format(format!(
                        "placement start {:?} runs past the tensor on axis {axis}",
                        record.start
                    )));
                }
            }
            if let Some(prev) = placements.last() {
                if (prev.item, &prev.start) >= (record.item, &record.start) {
                    return Err(Error::Format(
                        "placements must be unique and in item-major ascending order".into(),
                    ));
                }
            }
            placements.push(Placement::new(record.item, record.start, &layout, &spec));
        }
        Ok(Self {
            layout,
            spec,
            placements,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Per-voxel weights of one window placement.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl WeightMap {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.values[region::offset(&region::strides(&self.shape), index)]
    }
}

/// Weight of each position along one axis of the window. Border zones on faces
/// that coincide with the tensor boundary count as interior.
fn axis_profile(window: usize, border: usize, weight: f32, low: bool, high: bool) -> Vec<f32> {
    (0..window)
        .map(|i| {
            let low_zone = (i < border).then_some(if low { 1.0 } else { weight });
            let high_zone = (i >= window - border).then_some(if high { 1.0 } else { weight });
            match (low_zone, high_zone) {
                (None, None) => 1.0,
                (Some(w), None) | (None, Some(w)) => w,
                (Some(a), Some(b)) => a.max(b),
            }
        })
        .collect()
}

/// Weight map for `placement`: 1 inside the interior, `border_weight` within
/// `border` voxels of a face, except faces lying on the tensor boundary.
pub fn weight_map(spec: &WindowSpec, placement: &Placement) -> Result<WeightMap> {
    spec.validate()?;
    let rank = spec.rank();
    if placement.start.len() != rank
        || placement.touches_low.len() != rank
        || placement.touches_high.len() != rank
    {
        return Err(Error::Shape(format!(
            "placement has {} axes, spec has {rank}",
            placement.start.len()
        )));
    }
    let profiles: Vec<Vec<f32>> = (0..rank)
        .map(|axis| {
            axis_profile(
                spec.window()[axis],
                spec.border()[axis],
                spec.border_weight(),
                placement.touches_low[axis],
                placement.touches_high[axis],
            )
        })
        .collect();
    let shape = spec.window().to_vec();
    let mut values = Vec::with_capacity(region::volume(&shape));
    // A voxel inside any unadjusted border zone carries the border weight.
    region::for_each_index(&shape, |index| {
        let w = index
            .iter()
            .zip(&profiles)
            .map(|(&i, profile)| profile[i])
            .fold(1.0f32, f32::min);
        values.push(w);
    });
    Ok(WeightMap { shape, values })
}
