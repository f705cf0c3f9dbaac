//! Training-set cleaning for sparsely annotated volumes.
//!
//! Labels are carried as `f32` class codes. A configurable sentinel marks a
//! voxel as unobserved. A voxel counts as annotated when any of its label
//! channels holds something other than the sentinel.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use fixedbitset::FixedBitSet;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchPlan;
use crate::region;
use crate::subsample::{DenseTensor, PatchStack, WindowSource};

pub const REPORT_FORMAT: &str = "tessellate-report/1";

/// Largest magnitude at which every integer is exact in `f32`.
const EXACT_INTEGER_LIMIT: f32 = 16_777_216.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConvention {
    sentinel: f32,
}

impl Default for LabelConvention {
    fn default() -> Self {
        Self { sentinel: -1.0 }
    }
}

impl LabelConvention {
    pub fn new(sentinel: f32) -> Result<Self> {
        if !sentinel.is_finite() || sentinel.fract() != 0.0 || sentinel.abs() > EXACT_INTEGER_LIMIT
        {
            return Err(Error::InvalidSpec(format!(
                "sentinel {sentinel} must be an integer exactly representable as f32"
            )));
        }
        Ok(Self { sentinel })
    }

    pub fn sentinel(&self) -> f32 {
        self.sentinel
    }

    #[inline]
    pub fn is_labeled(&self, value: f32) -> bool {
        value != self.sentinel
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationReport {
    pub format: String,
    pub total_patches: usize,
    pub retained_patches: usize,
    pub retained_indices: Vec<usize>,
    pub annotated_voxels_unique: u64,
    pub annotated_voxels_in_retained: u64,
    /// `None` when no annotated voxel was retained.
    pub duplication_rate: Option<f64>,
}

impl CurationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))?;
        if report.format != REPORT_FORMAT {
            return Err(Error::Format(format!(
                "expected format {REPORT_FORMAT:?}, found {:?}",
                report.format
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Accumulates annotation counts over a sequence of windows.
pub struct CurationTally<'a> {
    plan: &'a PatchPlan,
    convention: LabelConvention,
    covered: FixedBitSet,
    in_windows: u64,
    seen: usize,
    retained: Vec<usize>,
}

impl<'a> CurationTally<'a> {
    pub fn new(plan: &'a PatchPlan, convention: LabelConvention) -> Self {
        let voxels = plan.layout().items() * plan.layout().spatial_volume();
        Self {
            plan,
            convention,
            covered: FixedBitSet::with_capacity(voxels),
            in_windows: 0,
            seen: 0,
            retained: Vec::new(),
        }
    }

    /// Adds the annotated voxels of one `(C, window...)` label window to the
    /// counts. Returns how many were annotated.
    pub fn count(&mut self, index: usize, labels: &[f32], channels: usize) -> Result<u64> {
        let placement = self.plan.placement(index)?;
        let window = self.plan.spec().window();
        let volume = region::volume(window);
        if labels.len() != channels * volume {
            return Err(Error::Shape(format!(
                "label window has {} values, expected {}",
                labels.len(),
                channels * volume
            )));
        }
        let spatial = self.plan.layout().spatial();
        let strides = region::strides(spatial);
        let base = placement.item * region::volume(spatial);
        let mut offset = 0;
        let mut annotated = 0;
        let mut global = vec![0; window.len()];
        region::for_each_index(window, |local| {
            let hit =
                (0..channels).any(|c| self.convention.is_labeled(labels[c * volume + offset]));
            if hit {
                for axis in 0..local.len() {
                    global[axis] = placement.start[axis] + local[axis];
                }
                self.covered
                    .insert(base + region::offset(&strides, &global));
                annotated += 1;
            }
            offset += 1;
        });
        self.in_windows += annotated;
        Ok(annotated)
    }

    /// Counts a label window and keeps it if it holds any annotation.
    pub fn observe(&mut self, index: usize, labels: &[f32], channels: usize) -> Result<bool> {
        self.seen += 1;
        let keep = self.count(index, labels, channels)? > 0;
        if keep {
            self.retained.push(index);
        }
        Ok(keep)
    }

    pub fn unique(&self) -> u64 {
        self.covered.count_ones(..) as u64
    }

    pub fn in_windows(&self) -> u64 {
        self.in_windows
    }

    pub fn report(self) -> CurationReport {
        let unique = self.unique();
        CurationReport {
            format: REPORT_FORMAT.to_string(),
            total_patches: self.seen,
            retained_patches: self.retained.len(),
            retained_indices: self.retained,
            annotated_voxels_unique: unique,
            annotated_voxels_in_retained: self.in_windows,
            duplication_rate: (unique > 0).then(|| self.in_windows as f64 / unique as f64),
        }
    }
}

fn check_border(window: &[usize], border: &[usize]) -> Result<()> {
    if border.len() != window.len() {
        return Err(Error::InvalidSpec(format!(
            "border has {} axes, window has {}",
            border.len(),
            window.len()
        )));
    }
    for (axis, (&b, &w)) in border.iter().zip(window).enumerate() {
        if 2 * b >= w {
            return Err(Error::InvalidSpec(format!(
                "axis {axis}: border {b} leaves no interior in window {w}"
            )));
        }
    }
    Ok(())
}

/// Sets every voxel within `border` of a window face to `sentinel`, in place.
pub(crate) fn mask_patch(
    patch: &mut [f32],
    channels: usize,
    window: &[usize],
    border: &[usize],
    sentinel: f32,
) {
    if border.iter().all(|&b| b == 0) {
        return;
    }
    let volume = region::volume(window);
    let mut offset = 0;
    region::for_each_index(window, |index| {
        let edge = index
            .iter()
            .zip(window.iter().zip(border))
            .any(|(&i, (&w, &b))| i < b || i >= w - b);
        if edge {
            for c in 0..channels {
                patch[c * volume + offset] = sentinel;
            }
        }
        offset += 1;
    });
}

/// Marks the outer `border` shell of every label patch as unobserved.
pub fn mask_border(
    labels: &PatchStack,
    border: &[usize],
    convention: LabelConvention,
) -> Result<PatchStack> {
    let window = labels.window().to_vec();
    check_border(&window, border)?;
    let mut out = labels.clone();
    for i in 0..out.len() {
        let channels = out.channels();
        mask_patch(
            out.patch_mut(i),
            channels,
            &window,
            border,
            convention.sentinel(),
        );
    }
    Ok(out)
}

/// Drops pairs whose label patch is entirely unobserved.
pub fn filter_unlabeled(
    data: &PatchStack,
    labels: &PatchStack,
    convention: LabelConvention,
) -> Result<(PatchStack, PatchStack, CurationReport)> {
    if !data.is_paired_with(labels) {
        return Err(Error::Shape(
            "data and label stacks do not come from the same placements".into(),
        ));
    }
    let plan = labels.plan().clone();
    let mut tally = CurationTally::new(&plan, convention);
    let mut keep = Vec::new();
    for (i, &index) in labels.indices().iter().enumerate() {
        if tally.observe(index, labels.patch(i), labels.channels())? {
            keep.push(i);
        }
    }
    let report = tally.report();
    let select = |stack: &PatchStack| -> Result<PatchStack> {
        let mut values = Vec::with_capacity(keep.len() * stack.patch_len());
        for &i in &keep {
            values.extend_from_slice(stack.patch(i));
        }
        PatchStack::from_parts(
            Arc::clone(stack.plan()),
            report.retained_indices.clone(),
            stack.channels(),
            values,
        )
    };
    Ok((select(data)?, select(labels)?, report))
}

/// Occurrences of annotated voxels across the retained windows divided by the
/// number of distinct annotated voxels those windows cover.
pub fn duplication_rate(
    plan: &PatchPlan,
    labels: &DenseTensor,
    retained: &[usize],
    convention: LabelConvention,
) -> Result<f64> {
    if !labels.layout().same_geometry(plan.layout()) {
        return Err(Error::Shape(format!(
            "labels {:?} do not match plan layout {:?}",
            labels.layout().shape(),
            plan.layout().shape()
        )));
    }
    let mut tally = CurationTally::new(plan, convention);
    let window = plan.spec().window();
    for &index in retained {
        let p = plan.placement(index)?;
        let patch = labels.read_window(p.item, &p.start, window)?;
        tally.count(index, &patch, labels.layout().channels())?;
    }
    let unique = tally.unique();
    if unique == 0 {
        return Err(Error::UndefinedStatistic(
            "no annotated voxels inside the retained windows".into(),
        ));
    }
    Ok(tally.in_windows() as f64 / unique as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_plan, TensorLayout, WindowSpec};
    use crate::subsample::{extract, extract_pair};

    fn stack_of(window: Vec<usize>, value: f32) -> PatchStack {
        let layout = TensorLayout::new(1, 1, window.clone()).unwrap();
        let plan = build_plan(&layout, &WindowSpec::new(window.clone(), window).unwrap()).unwrap();
        extract(&DenseTensor::filled(layout, value), &plan).unwrap()
    }

    #[test]
    fn sentinel_validation() {
        assert_eq!(LabelConvention::default().sentinel(), -1.0);
        assert!(LabelConvention::new(0.0).is_ok());
        assert!(LabelConvention::new(0.5).is_err());
        assert!(LabelConvention::new(f32::NAN).is_err());
        assert!(LabelConvention::new(1e9).is_err());
    }

    #[test]
    fn zero_border_is_identity() {
        let s = stack_of(vec![4, 4], 3.0);
        assert_eq!(
            mask_border(&s, &[0, 0], LabelConvention::default()).unwrap(),
            s
        );
    }

    #[test]
    fn border_one_on_4x4() {
        let s = stack_of(vec![4, 4], 2.0);
        let m = mask_border(&s, &[1, 1], LabelConvention::default()).unwrap();
        let sentinels = m.patch(0).iter().filter(|&&v| v == -1.0).count();
        assert_eq!(sentinels, 12);
        for (y, x) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
            assert_eq!(m.patch(0)[y * 4 + x], 2.0);
        }
    }

    #[test]
    fn anisotropic_border_on_6_cube() {
        let s = stack_of(vec![6, 6, 6], 1.0);
        let m = mask_border(&s, &[1, 2, 0], LabelConvention::default()).unwrap();
        let interior = m.patch(0).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(interior, 4 * 2 * 6);
    }

    #[test]
    fn oversized_border_rejected() {
        let s = stack_of(vec![4, 4], 1.0);
        assert!(matches!(
            mask_border(&s, &[2, 0], LabelConvention::default()),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn all_sentinel_labels_drop_everything() {
        let layout = TensorLayout::new(1, 1, vec![8, 8]).unwrap();
        let plan = build_plan(&layout, &WindowSpec::new(vec![4, 4], vec![2, 2]).unwrap()).unwrap();
        let data = DenseTensor::filled(layout.clone(), 1.0);
        let labels = DenseTensor::filled(layout, -1.0);
        let (d, l) = extract_pair(&data, &labels, &plan).unwrap();
        let (fd, fl, report) = filter_unlabeled(&d, &l, LabelConvention::default()).unwrap();
        assert!(fd.is_empty() && fl.is_empty());
        assert_eq!(report.total_patches, plan.len());
        assert_eq!(report.retained_patches, 0);
        assert_eq!(report.duplication_rate, None);
    }

    #[test]
    fn filter_requires_pairing() {
        let a = stack_of(vec![4, 4], 1.0);
        let b = stack_of(vec![4, 5], 1.0);
        assert!(matches!(
            filter_unlabeled(&a, &b, LabelConvention::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn no_overlap_rate_is_one() {
        let layout = TensorLayout::new(1, 1, vec![16, 16]).unwrap();
        let plan = build_plan(&layout, &WindowSpec::new(vec![4, 4], vec![4, 4]).unwrap()).unwrap();
        let labels =
            DenseTensor::from_fn(layout, |i| if (i[2] + i[3]) % 3 == 0 { 1.0 } else { -1.0 });
        let all: Vec<usize> = (0..plan.len()).collect();
        let rate = duplication_rate(&plan, &labels, &all, LabelConvention::default()).unwrap();
        assert_eq!(rate, 1.0);
    }

    #[test]
    fn rate_without_annotations_is_undefined() {
        let layout = TensorLayout::new(1, 1, vec![8, 8]).unwrap();
        let plan = build_plan(&layout, &WindowSpec::new(vec![4, 4], vec![4, 4]).unwrap()).unwrap();
        let labels = DenseTensor::filled(layout, -1.0);
        assert!(matches!(
            duplication_rate(&plan, &labels, &[0, 1], LabelConvention::default()),
            Err(Error::UndefinedStatistic(_))
        ));
        assert!(matches!(
            duplication_rate(&plan, &labels, &[99], LabelConvention::default()),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn multi_channel_voxel_counts_once() {
        let layout = TensorLayout::new(1, 2, vec![4, 4]).unwrap();
        let plan = build_plan(&layout, &WindowSpec::new(vec![4, 4], vec![4, 4]).unwrap()).unwrap();
        let labels =
            DenseTensor::from_fn(layout, |i| if i[2] == 0 && i[3] == 0 { 1.0 } else { -1.0 });
        let mut tally = CurationTally::new(&plan, LabelConvention::default());
        assert_eq!(tally.count(0, labels.values(), 2).unwrap(), 1);
    }
}
