//! Weighted reassembly of per-patch results.
//!
//! Each patch result is multiplied by its placement's weight map and added to
//! an on-disk mean array, while the weights themselves are added to a
//! single-channel normalization array. The stitched output is their ratio,
//! computed chunk by chunk.
//!
//! On-disk layout under the accumulator location:
//!
//! ```text
//! manifest.json   tessellate-stitch/1: plan, policy, accumulated patches, state
//! mean/           (N, C_out, spatial...) weighted sums
//! norm/           (N, 1, spatial...) weight sums
//! output/         (N, C_out, spatial...) written by finalize
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use fixedbitset::FixedBitSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{weight_map, PatchPlan, TensorLayout};
use crate::region;
use crate::store::{write_atomic, ArrayMetadata, ChunkedArray};

pub const STITCH_FORMAT: &str = "tessellate-stitch/1";

const MANIFEST_FILE: &str = "manifest.json";
const MEAN_DIR: &str = "mean";
const NORM_DIR: &str = "norm";
const OUTPUT_DIR: &str = "output";
const LOCK_STRIPES: usize = 64;
const CHECKPOINT_EVERY: usize = 64;

/// What to write where no placement contributed any weight.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ZeroCoverage {
    #[default]
    Error,
    Fill {
        value: f32,
    },
}

impl FromStr for ZeroCoverage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "error" {
            return Ok(ZeroCoverage::Error);
        }
        if let Some(v) = s.strip_prefix("fill:") {
            let value = v
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad fill value {v:?}")))?;
            return Ok(ZeroCoverage::Fill { value });
        }
        Err(Error::InvalidSpec(format!(
            "zero-coverage policy must be `error` or `fill:<value>`, got {s:?}"
        )))
    }
}

impl fmt::Display for ZeroCoverage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZeroCoverage::Error => f.write_str("error"),
            ZeroCoverage::Fill { value } => write!(f, "fill:{value}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StitchPolicy {
    pub zero_coverage: ZeroCoverage,
    pub output_channels: usize,
}

impl StitchPolicy {
    pub fn new(output_channels: usize) -> Result<Self> {
        if output_channels == 0 {
            return Err(Error::InvalidSpec(
                "output channel count must be >= 1".into(),
            ));
        }
        Ok(Self {
            zero_coverage: ZeroCoverage::Error,
            output_channels,
        })
    }

    pub fn with_zero_coverage(mut self, zero_coverage: ZeroCoverage) -> Self {
        self.zero_coverage = zero_coverage;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StitchState {
    Accumulating,
    Finalized,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    plan: serde_json::Value,
    output_channels: usize,
    chunk_shape: Vec<usize>,
    policy: Option<StitchPolicy>,
    state: StitchState,
    accumulated: Vec<usize>,
}

/// Summary of the weight sums seen by finalize.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoverageStats {
    pub voxels: u64,
    pub zero_coverage: u64,
    pub min_weight: f32,
    pub max_weight: f32,
}

impl CoverageStats {
    fn empty() -> Self {
        Self {
            voxels: 0,
            zero_coverage: 0,
            min_weight: f32::INFINITY,
            max_weight: f32::NEG_INFINITY,
        }
    }

    fn merge(self, other: Self) -> Self {
        Self {
            voxels: self.voxels + other.voxels,
            zero_coverage: self.zero_coverage + other.zero_coverage,
            min_weight: self.min_weight.min(other.min_weight),
            max_weight: self.max_weight.max(other.max_weight),
        }
    }
}

/// Paired mean and normalization arrays for one plan.
pub struct Accumulators {
    root: PathBuf,
    mean: ChunkedArray,
    norm: ChunkedArray,
    plan: Arc<PatchPlan>,
    output_channels: usize,
    chunk_shape: Vec<usize>,
    locks: Vec<Mutex<()>>,
    accumulated: Mutex<FixedBitSet>,
    manifest_lock: Mutex<()>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn array_shape(leading: &[usize], spatial: &[usize]) -> Vec<usize> {
    leading.iter().chain(spatial).copied().collect()
}

/// Creates zero-initialized accumulators at `location`. `chunk_shape` defaults
/// to the window shape.
pub fn create_accumulators(
    layout: &TensorLayout,
    output_channels: usize,
    plan: &PatchPlan,
    chunk_shape: Option<&[usize]>,
    location: impl AsRef<Path>,
) -> Result<Accumulators> {
    let root = location.as_ref().to_path_buf();
    if !layout.same_geometry(plan.layout()) {
        return Err(Error::Shape(format!(
            "layout {:?} does not match plan layout {:?}",
            layout.shape(),
            plan.layout().shape()
        )));
    }
    if output_channels == 0 {
        return Err(Error::InvalidSpec(
            "output channel count must be >= 1".into(),
        ));
    }
    let chunk_shape = chunk_shape.unwrap_or(plan.spec().window()).to_vec();
    if chunk_shape.len() != layout.rank() || chunk_shape.contains(&0) {
        return Err(Error::InvalidSpec(format!(
            "chunk shape {chunk_shape:?} must have {} axes, each >= 1",
            layout.rank()
        )));
    }
    if root.join(MANIFEST_FILE).exists()
        || ChunkedArray::exists(root.join(MEAN_DIR))
        || ChunkedArray::exists(root.join(NORM_DIR))
    {
        return Err(Error::AlreadyExists(root));
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;

    let items = layout.items();
    let spatial = layout.spatial();
    let mean = ChunkedArray::create(
        root.join(MEAN_DIR),
        ArrayMetadata::new(
            array_shape(&[items, output_channels], spatial),
            array_shape(&[1, output_channels], &chunk_shape),
        )?,
    )?;
    let norm = ChunkedArray::create(
        root.join(NORM_DIR),
        ArrayMetadata::new(
            array_shape(&[items, 1], spatial),
            array_shape(&[1, 1], &chunk_shape),
        )?,
    )?;
    let acc = Accumulators::assemble(
        root,
        mean,
        norm,
        Arc::new(plan.clone()),
        output_channels,
        chunk_shape,
        FixedBitSet::with_capacity(plan.len()),
    );
    acc.write_manifest(None, StitchState::Accumulating)?;
    Ok(acc)
}

impl Accumulators {
    fn assemble(
        root: PathBuf,
        mean: ChunkedArray,
        norm: ChunkedArray,
        plan: Arc<PatchPlan>,
        output_channels: usize,
        chunk_shape: Vec<usize>,
        accumulated: FixedBitSet,
    ) -> Self {
        Self {
            root,
            mean,
            norm,
            plan,
            output_channels,
            chunk_shape,
            locks: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            accumulated: Mutex::new(accumulated),
            manifest_lock: Mutex::new(()),
        }
    }

    /// Reopens accumulators written earlier, e.g. to resume an interrupted run.
    pub fn open(location: impl AsRef<Path>) -> Result<Self> {
        let root = location.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if manifest.format != STITCH_FORMAT {
            return Err(Error::Format(format!(
                "expected format {STITCH_FORMAT:?}, found {:?}",
                manifest.format
            )));
        }
        let plan = PatchPlan::from_value(manifest.plan)?;
        let mean = ChunkedArray::open(root.join(MEAN_DIR))?;
        let norm = ChunkedArray::open(root.join(NORM_DIR))?;
        let expected_mean = array_shape(
            &[plan.layout().items(), manifest.output_channels],
            plan.layout().spatial(),
        );
        if mean.shape() != expected_mean.as_slice() {
            return Err(Error::Format(format!(
                "mean array shape {:?} does not match manifest {expected_mean:?}",
                mean.shape()
            )));
        }
        let mut accumulated = FixedBitSet::with_capacity(plan.len());
        for &i in &manifest.accumulated {
            if i >= plan.len() {
                return Err(Error::Format(format!("manifest lists unknown patch {i}")));
            }
            accumulated.insert(i);
        }
        Ok(Self::assemble(
            root,
            mean,
            norm,
            Arc::new(plan),
            manifest.output_channels,
            manifest.chunk_shape,
            accumulated,
        ))
    }

    pub fn location(&self) -> &Path {
        &self.root
    }

    pub fn plan(&self) -> &Arc<PatchPlan> {
        &self.plan
    }

    pub fn mean_array(&self) -> &ChunkedArray {
        &self.mean
    }

    pub fn norm_array(&self) -> &ChunkedArray {
        &self.norm
    }

    /// Metadata the finalized `output/` array will be created with.
    pub fn output_metadata(&self) -> &ArrayMetadata {
        self.mean.metadata()
    }

    pub fn output_channels(&self) -> usize {
        self.output_channels
    }

    pub fn chunk_shape(&self) -> &[usize] {
        &self.chunk_shape
    }

    pub fn is_accumulated(&self, index: usize) -> bool {
        lock(&self.accumulated).contains(index)
    }

    pub fn accumulated_count(&self) -> usize {
        lock(&self.accumulated).count_ones(..)
    }

    fn write_manifest(&self, policy: Option<StitchPolicy>, state: StitchState) -> Result<()> {
        let _guard = lock(&self.manifest_lock);
        let manifest = Manifest {
            format: STITCH_FORMAT.to_string(),
            plan: self.plan.document_value(),
            output_channels: self.output_channels,
            chunk_shape: self.chunk_shape.clone(),
            policy,
            state,
            accumulated: lock(&self.accumulated).ones().collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_atomic(&self.root, &self.root.join(MANIFEST_FILE), text.as_bytes())
    }

    /// Records the set of accumulated patches in the manifest.
    pub fn checkpoint(&self) -> Result<()> {
        self.write_manifest(None, StitchState::Accumulating)
    }

    /// Adds one `(C_out, window...)` patch result, weighted by its placement's
    /// weight map. Calls for different patches may run concurrently; chunks
    /// shared by two calls are updated under a per-chunk lock.
    pub fn accumulate(&self, index: usize, patch_result: &[f32]) -> Result<()> {
        let placement = self.plan.placement(index)?;
        let spec = self.plan.spec();
        let window = spec.window();
        let window_volume = spec.window_volume();
        if patch_result.len() != self.output_channels * window_volume {
            return Err(Error::Shape(format!(
                "patch result has {} values, expected {} channels x {:?}",
                patch_result.len(),
                self.output_channels,
                window
            )));
        }
        let weights = weight_map(spec, placement)?;

        {
            let mut done = lock(&self.accumulated);
            if done.contains(index) {
                return Err(Error::AlreadyAccumulated { index });
            }
            done.insert(index);
        }
        let result = self.add_weighted(
            placement.item,
            &placement.start,
            patch_result,
            weights.values(),
        );
        if result.is_err() {
            lock(&self.accumulated).set(index, false);
        }
        result
    }

    fn add_weighted(
        &self,
        item: usize,
        start: &[usize],
        values: &[f32],
        weights: &[f32],
    ) -> Result<()> {
        let window = self.plan.spec().window();
        let window_volume = region::volume(window);
        let spatial = self.plan.layout().spatial();
        let rank = spatial.len();
        let chunk = &self.chunk_shape;
        let chunk_volume = region::volume(chunk);
        let channels = self.output_channels;

        let first: Vec<usize> = start.iter().zip(chunk).map(|(&s, &c)| s / c).collect();
        let counts: Vec<usize> = (0..rank)
            .map(|a| (start[a] + window[a] - 1) / chunk[a] - first[a] + 1)
            .collect();
        let grid: Vec<usize> = spatial
            .iter()
            .zip(chunk)
            .map(|(&n, &c)| n.div_ceil(c))
            .collect();
        let grid_strides = region::strides(&grid);

        let mut touched = Vec::new();
        region::for_each_index(&counts, |rel| {
            let idx: Vec<usize> = rel.iter().zip(&first).map(|(r, f)| r + f).collect();
            touched.push(idx);
        });
        let mut stripes: Vec<usize> = touched
            .iter()
            .map(|idx| {
                (item * region::volume(&grid) + region::offset(&grid_strides, idx)) % LOCK_STRIPES
            })
            .collect();
        stripes.sort_unstable();
        stripes.dedup();
        let _guards: Vec<_> = stripes.iter().map(|&s| lock(&self.locks[s])).collect();

        for spatial_chunk in &touched {
            let mut in_chunk = vec![0; rank];
            let mut in_patch = vec![0; rank];
            let mut extent = vec![0; rank];
            for a in 0..rank {
                let origin = spatial_chunk[a] * chunk[a];
                let lo = origin.max(start[a]);
                let hi = (origin + chunk[a])
                    .min(start[a] + window[a])
                    .min(spatial[a]);
                in_chunk[a] = lo - origin;
                in_patch[a] = lo - start[a];
                extent[a] = hi - lo;
            }
            let mean_key = array_shape(&[item, 0], spatial_chunk);
            let norm_key = mean_key.clone();
            let mut mean = self.mean.read_chunk_or_fill(&mean_key)?;
            let mut norm = self.norm.read_chunk_or_fill(&norm_key)?;
            region::for_each_row(
                window,
                &in_patch,
                chunk,
                &in_chunk,
                &extent,
                |src, dst, run| {
                    for k in 0..run {
                        let w = weights[src + k];
                        norm[dst + k] += w;
                        for c in 0..channels {
                            mean[c * chunk_volume + dst + k] +=
                                w * values[c * window_volume + src + k];
                        }
                    }
                },
            );
            self.mean.write_chunk(&mean_key, &mean)?;
            self.norm.write_chunk(&norm_key, &norm)?;
        }
        Ok(())
    }

    /// Accumulates results supplied in plan order, skipping patches that are
    /// already accumulated. Fails with an incomplete-input error if the
    /// sequence ends before every placement has been seen.
    pub fn accumulate_stream<I, P>(&self, results: I) -> Result<()>
    where
        I: IntoIterator<Item = Result<P>>,
        P: AsRef<[f32]>,
    {
        let expected = self.plan.len();
        let mut received = 0;
        for result in results {
            let index = received;
            if index >= expected {
                return Err(Error::Shape(format!(
                    "more patch results than the {expected} placements of the plan"
                )));
            }
            received += 1;
            let patch = result?;
            if !self.is_accumulated(index) {
                self.accumulate(index, patch.as_ref())?;
            }
            if received % CHECKPOINT_EVERY == 0 {
                self.checkpoint()?;
            }
        }
        self.checkpoint()?;
        if received < expected {
            return Err(Error::Incomplete { expected, received });
        }
        Ok(())
    }

    /// Divides the mean array by the normalization array into `output/`.
    pub fn finalize(&self, policy: &StitchPolicy) -> Result<ChunkedArray> {
        self.finalize_with_stats(policy).map(|(array, _)| array)
    }

    /// Like [`Accumulators::finalize`], also returning weight statistics.
    /// Chunks are processed independently on the current rayon pool.
    pub fn finalize_with_stats(
        &self,
        policy: &StitchPolicy,
    ) -> Result<(ChunkedArray, CoverageStats)> {
        if policy.output_channels != self.output_channels {
            return Err(Error::Shape(format!(
                "policy expects {} output channels, accumulators hold {}",
                policy.output_channels, self.output_channels
            )));
        }
        let layout = self.plan.layout();
        let spatial = layout.spatial().to_vec();
        let out_root = self.root.join(OUTPUT_DIR);
        let output = ChunkedArray::create(&out_root, self.output_metadata().clone())?;

        let grid: Vec<usize> = spatial
            .iter()
            .zip(&self.chunk_shape)
            .map(|(&n, &c)| n.div_ceil(c))
            .collect();
        let mut jobs = Vec::new();
        for item in 0..layout.items() {
            region::for_each_index(&grid, |idx| jobs.push((item, idx.to_vec())));
        }
        let stats = jobs
            .par_iter()
            .map(|(item, idx)| self.finalize_chunk(&output, *item, idx, policy.zero_coverage))
            .try_reduce(CoverageStats::empty, |a, b| Ok(a.merge(b)));
        let stats = match stats {
            Ok(stats) => stats,
            Err(e) => {
                let _ = fs::remove_dir_all(&out_root);
                return Err(e);
            }
        };
        if stats.zero_coverage > 0 && policy.zero_coverage == ZeroCoverage::Error {
            let _ = fs::remove_dir_all(&out_root);
            return Err(Error::Coverage {
                count: stats.zero_coverage,
            });
        }
        self.write_manifest(Some(*policy), StitchState::Finalized)?;
        Ok((output, stats))
    }

    fn finalize_chunk(
        &self,
        output: &ChunkedArray,
        item: usize,
        spatial_chunk: &[usize],
        zero: ZeroCoverage,
    ) -> Result<CoverageStats> {
        let key = array_shape(&[item, 0], spatial_chunk);
        let chunk = &self.chunk_shape;
        let chunk_volume = region::volume(chunk);
        let channels = self.output_channels;
        let norm = self.norm.read_chunk_or_fill(&key)?;
        let mean = self.mean.read_chunk_or_fill(&key)?;
        let extent: Vec<usize> = spatial_chunk
            .iter()
            .zip(chunk)
            .zip(self.plan.layout().spatial())
            .map(|((&i, &c), &n)| c.min(n - i * c))
            .collect();
        let zeros = vec![0; chunk.len()];
        let mut out = vec![0.0f32; channels * chunk_volume];
        let mut stats = CoverageStats::empty();
        region::for_each_row(chunk, &zeros, chunk, &zeros, &extent, |at, _, run| {
            for o in at..at + run {
                let w = norm[o];
                stats.voxels += 1;
                stats.min_weight = stats.min_weight.min(w);
                stats.max_weight = stats.max_weight.max(w);
                if w > 0.0 {
                    for c in 0..channels {
                        out[c * chunk_volume + o] = mean[c * chunk_volume + o] / w;
                    }
                } else {
                    stats.zero_coverage += 1;
                    if let ZeroCoverage::Fill { value } = zero {
                        for c in 0..channels {
                            out[c * chunk_volume + o] = value;
                        }
                    }
                }
            }
        });
        output.write_chunk(&key, &out)?;
        Ok(stats)
    }
}

/// Creates accumulators, adds every result in plan order and finalizes.
pub fn stitch_stream<I, P>(
    plan: &PatchPlan,
    results: I,
    policy: &StitchPolicy,
    location: impl AsRef<Path>,
    chunk_shape: Option<&[usize]>,
) -> Result<ChunkedArray>
where
    I: IntoIterator<Item = Result<P>>,
    P: AsRef<[f32]>,
{
    let acc = create_accumulators(
        plan.layout(),
        policy.output_channels,
        plan,
        chunk_shape,
        location,
    )?;
    acc.accumulate_stream(results)?;
    acc.finalize(policy)
}
