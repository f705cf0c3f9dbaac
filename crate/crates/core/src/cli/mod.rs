//! Command-line front end: `plan`, `subsample`, `stitch`, `roundtrip`, `info`.
//!
//! Exit codes: 0 success, 2 validation, 3 I/O or format, 4 zero coverage,
//! 5 incomplete input, 6 round-trip mismatch, 1 anything else.

mod config;
mod volume;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

pub use config::{AxisValues, PipelineConfig};
pub use volume::{write_raw, RawHeader, RawVolume, Volume};

use crate::curate::{mask_patch, CurationReport, CurationTally, REPORT_FORMAT};
use crate::error::{Error, Result};
use crate::geometry::{build_plan, PatchPlan, PLAN_FORMAT};
use crate::stitch::{create_accumulators, Accumulators, StitchPolicy, STITCH_FORMAT};
use crate::store::ChunkedArray;
use crate::subsample::{PatchStoreReader, PatchStoreWriter, WindowSource};

pub const EXIT_MISMATCH: i32 = 6;
const ROUNDTRIP_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "tessellate",
    version,
    about = "Overlapping window tiling and weighted stitching for large tensors"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute window placements for an input volume and write a plan file.
    Plan {
        input: Option<PathBuf>,
        /// Plan file to write.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Cut an input volume (and optionally its labels) into patch stores.
    Subsample {
        input: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Label volume; enables border masking and empty-pair filtering.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory receiving `data/`, `labels/` and `report.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Stitch a store of per-patch results back into a full-size array.
    Stitch {
        results: Option<PathBuf>,
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Accumulator directory; the stitched array lands in `<out>/output`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue an interrupted run recorded in `<out>/manifest.json`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Subsample, stitch the untouched patches and compare with the input.
    Roundtrip {
        input: Option<PathBuf>,
        /// Working directory to keep; a temporary one is used otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Describe a store, plan, report, stitch directory or raw volume.
    Info { path: PathBuf },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Knobs {
    /// JSON or TOML file with any of the settings below; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Window size, `N` or `Z,Y,X`.
    #[arg(long)]
    pub window: Option<AxisValues>,
    /// Step size, `N` or `Z,Y,X` (defaults to the window).
    #[arg(long)]
    pub step: Option<AxisValues>,
    /// Border width, `N` or `Z,Y,X`.
    #[arg(long)]
    pub border: Option<AxisValues>,
    #[arg(long)]
    pub border_weight: Option<f32>,
    /// Label value meaning "unobserved".
    #[arg(long, allow_hyphen_values = true)]
    pub sentinel: Option<f32>,
    /// Accumulator chunk shape, `N` or `Z,Y,X` (defaults to the window).
    #[arg(long)]
    pub chunk: Option<AxisValues>,
    /// `error` or `fill:<value>`.
    #[arg(long)]
    pub on_zero_coverage: Option<String>,
    /// Worker threads for finalization.
    #[arg(long)]
    pub workers: Option<usize>,
}

impl Knobs {
    fn resolve(self, paths: PipelineConfig) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let flags = PipelineConfig {
            window: self.window,
            step: self.step,
            border: self.border,
            border_weight: self.border_weight,
            sentinel: self.sentinel,
            chunk: self.chunk,
            on_zero_coverage: self.on_zero_coverage,
            workers: self.workers,
            ..paths
        };
        let cfg = base.overlay(flags);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required<'a>(value: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::InvalidSpec(format!("missing {what}")))
}

fn fmt_shape(shape: &[usize]) -> String {
    let parts: Vec<String> = shape.iter().map(usize::to_string).collect();
    format!("({})", parts.join(", "))
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Plan { input, out, knobs } => {
            let cfg = knobs.resolve(PipelineConfig {
                input,
                out,
                ..Default::default()
            })?;
            cmd_plan(&cfg)
        }
        Command::Subsample {
            input,
            plan,
            labels,
            out,
            knobs,
        } => {
            let cfg = knobs.resolve(PipelineConfig {
                input,
                plan,
                labels,
                out,
                ..Default::default()
            })?;
            cmd_subsample(&cfg)
        }
        Command::Stitch {
            results,
            plan,
            out,
            resume,
            knobs,
        } => {
            let cfg = knobs.resolve(PipelineConfig {
                results,
                plan,
                out,
                ..Default::default()
            })?;
            cmd_stitch(&cfg, resume)
        }
        Command::Roundtrip { input, out, knobs } => {
            let cfg = knobs.resolve(PipelineConfig {
                input,
                out,
                ..Default::default()
            })?;
            cmd_roundtrip(&cfg)
        }
        Command::Info { path } => cmd_info(&path),
    }
}

/// Parses `std::env::args`, runs and maps errors to exit codes.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn describe_plan(plan: &PatchPlan) -> String {
    let spec = plan.spec();
    let positions = plan.axis_positions();
    let counts: Vec<String> = positions.iter().map(|p| p.len().to_string()).collect();
    // Largest number of windows sharing a voxel, per axis and overall.
    let peak: Vec<usize> = positions
        .iter()
        .zip(spec.window())
        .zip(plan.layout().spatial())
        .map(|((starts, &w), &extent)| {
            (0..extent)
                .map(|v| starts.iter().filter(|&&s| s <= v && v < s + w).count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut stack = vec![plan.len(), plan.layout().channels()];
    stack.extend_from_slice(spec.window());
    [
        format!("layout         {}", fmt_shape(&plan.layout().shape())),
        format!("window         {}", fmt_shape(spec.window())),
        format!("step           {}", fmt_shape(spec.step())),
        format!("border         {}", fmt_shape(spec.border())),
        format!("border weight  {}", spec.border_weight()),
        format!("positions      {} per item", counts.join(" x ")),
        format!("placements     {}", plan.len()),
        format!("patch stack    {}", fmt_shape(&stack)),
        format!(
            "multiplicity   mean {:.3}, peak {} windows per voxel",
            plan.mean_multiplicity(),
            peak.iter().product::<usize>()
        ),
    ]
    .join("\n")
}

fn cmd_plan(cfg: &PipelineConfig) -> Result<i32> {
    let input = required(&cfg.input, "input volume")?;
    let out = required(&cfg.out, "--out plan file")?;
    let volume = Volume::open(input)?;
    let spec = cfg.spec(volume.layout().rank())?;
    let plan = build_plan(volume.layout(), &spec)?;
    plan.save(out)?;
    println!("{}", describe_plan(&plan));
    println!("plan written to {}", out.display());
    Ok(0)
}

fn open_plan_for(path: &Path, layout_source: &dyn WindowSource) -> Result<Arc<PatchPlan>> {
    let plan = PatchPlan::load(path)?;
    if plan.layout() != layout_source.layout() {
        return Err(Error::Shape(format!(
            "plan layout {} does not match input {}",
            fmt_shape(&plan.layout().shape()),
            fmt_shape(&layout_source.layout().shape())
        )));
    }
    Ok(Arc::new(plan))
}

fn write_all_patches(
    volume: &dyn WindowSource,
    plan: &Arc<PatchPlan>,
    root: &Path,
) -> Result<ChunkedArray> {
    let window = plan.spec().window();
    let mut writer =
        PatchStoreWriter::create(root, plan.clone(), volume.layout().channels(), plan.len())?;
    for (i, p) in plan.placements().iter().enumerate() {
        writer.push(i, &volume.read_window(p.item, &p.start, window)?)?;
    }
    writer.finish()
}

fn cmd_subsample(cfg: &PipelineConfig) -> Result<i32> {
    let input = required(&cfg.input, "input volume")?;
    let plan_path = required(&cfg.plan, "--plan")?;
    let out = required(&cfg.out, "--out directory")?;
    let convention = cfg.convention()?;
    let volume = Volume::open(input)?;
    let plan = open_plan_for(plan_path, &volume)?;
    let labels = cfg.labels.as_deref().map(Volume::open).transpose()?;
    if let Some(labels) = &labels {
        if !labels.layout().same_geometry(plan.layout()) {
            return Err(Error::Shape(format!(
                "label volume {} does not match input {} in items or spatial extents",
                fmt_shape(&labels.layout().shape()),
                fmt_shape(&plan.layout().shape())
            )));
        }
    }
    let data_root = out.join("data");
    let label_root = out.join("labels");
    for root in [&data_root, &label_root] {
        if ChunkedArray::exists(root) {
            return Err(Error::AlreadyExists(root.clone()));
        }
    }

    let Some(labels) = labels else {
        let array = write_all_patches(&volume, &plan, &data_root)?;
        println!("patches        {}", fmt_shape(array.shape()));
        println!("written to     {}", data_root.display());
        return Ok(0);
    };

    let window = plan.spec().window();
    let border = plan.spec().border();
    let label_channels = labels.layout().channels();
    let mut data_out = PatchStoreWriter::create(
        &data_root,
        plan.clone(),
        volume.layout().channels(),
        plan.len(),
    )?;
    let mut label_out =
        PatchStoreWriter::create(&label_root, plan.clone(), label_channels, plan.len())?;
    let mut tally = CurationTally::new(&plan, convention);
    for (i, p) in plan.placements().iter().enumerate() {
        let mut label_patch = labels.read_window(p.item, &p.start, window)?;
        mask_patch(
            &mut label_patch,
            label_channels,
            window,
            border,
            convention.sentinel(),
        );
        if tally.observe(i, &label_patch, label_channels)? {
            data_out.push(i, &volume.read_window(p.item, &p.start, window)?)?;
            label_out.push(i, &label_patch)?;
        }
    }
    let data_array = data_out.finish()?;
    label_out.finish()?;
    let report = tally.report();
    let report_path = out.join("report.json");
    report.save(&report_path)?;
    print_report(&report);
    println!("clean stack    {}", fmt_shape(data_array.shape()));
    println!("written to     {}", out.display());
    Ok(0)
}

fn print_report(report: &CurationReport) {
    println!("total patches  {}", report.total_patches);
    println!("retained       {}", report.retained_patches);
    println!(
        "annotated      {} unique voxels, {} in retained windows",
        report.annotated_voxels_unique, report.annotated_voxels_in_retained
    );
    match report.duplication_rate {
        Some(rate) => println!("duplication    {rate:.4}"),
        None => println!("duplication    undefined (no annotated voxels retained)"),
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidSpec(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn stitch_results(
    cfg: &PipelineConfig,
    plan: Arc<PatchPlan>,
    results: &Path,
    out: &Path,
    resume: bool,
) -> Result<ChunkedArray> {
    let reader = PatchStoreReader::open_with_plan(results, plan.clone())?;
    if reader.indices().iter().enumerate().any(|(i, &p)| i != p) {
        return Err(Error::Shape(
            "result patches must follow plan order (was the store filtered?)".into(),
        ));
    }
    let policy = StitchPolicy::new(reader.channels())?.with_zero_coverage(cfg.zero_coverage()?);
    let chunk = cfg.chunk(plan.layout().rank())?;
    let acc = if resume && out.join("manifest.json").is_file() {
        let acc = Accumulators::open(out)?;
        if acc.plan().as_ref() != plan.as_ref() || acc.output_channels() != reader.channels() {
            return Err(Error::Shape(format!(
                "{} was started with a different plan or channel count",
                out.display()
            )));
        }
        acc
    } else {
        create_accumulators(
            plan.layout(),
            reader.channels(),
            &plan,
            chunk.as_deref(),
            out,
        )?
    };
    let before = acc.accumulated_count();
    acc.accumulate_stream((0..reader.len()).map(|i| reader.read_patch(i)))?;
    let (output, stats) = with_workers(cfg.workers, || acc.finalize_with_stats(&policy))??;
    println!(
        "patches        {} accumulated ({} resumed)",
        plan.len(),
        before
    );
    println!("output         {}", fmt_shape(output.shape()));
    println!(
        "coverage       {} voxels, weight sum min {} max {}, {} uncovered ({})",
        stats.voxels, stats.min_weight, stats.max_weight, stats.zero_coverage, policy.zero_coverage
    );
    println!("written to     {}", output.root().display());
    Ok(output)
}

fn cmd_stitch(cfg: &PipelineConfig, resume: bool) -> Result<i32> {
    let results = required(&cfg.results, "results store")?;
    let plan_path = required(&cfg.plan, "--plan")?;
    let out = required(&cfg.out, "--out directory")?;
    let plan = Arc::new(PatchPlan::load(plan_path)?);
    stitch_results(cfg, plan, results, out, resume)?;
    Ok(0)
}

fn cmd_roundtrip(cfg: &PipelineConfig) -> Result<i32> {
    let input = required(&cfg.input, "input volume")?;
    let volume = Volume::open(input)?;
    let spec = cfg.spec(volume.layout().rank())?;
    let plan = Arc::new(build_plan(volume.layout(), &spec)?);
    let _scratch;
    let work = match &cfg.out {
        Some(dir) => dir.clone(),
        None => {
            let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
            let path = dir.path().to_path_buf();
            _scratch = dir;
            path
        }
    };
    println!("{}", describe_plan(&plan));
    let patch_root = work.join("patches");
    write_all_patches(&volume, &plan, &patch_root)?;
    let output = stitch_results(cfg, plan.clone(), &patch_root, &work.join("stitch"), false)?;

    let layout = plan.layout();
    let zeros = vec![0; layout.rank()];
    let mut max_error = 0.0f32;
    for item in 0..layout.items() {
        let original = volume.read_window(item, &zeros, layout.spatial())?;
        let mut start = vec![item, 0];
        start.extend_from_slice(&zeros);
        let mut shape = vec![1, layout.channels()];
        shape.extend_from_slice(layout.spatial());
        let stitched = output.read_region(&start, &shape)?;
        for (a, b) in original.iter().zip(&stitched) {
            max_error = max_error.max((a - b).abs());
        }
    }
    let pass = max_error <= ROUNDTRIP_TOLERANCE;
    println!("max abs error  {max_error:e}");
    println!(
        "roundtrip      {} (tolerance {ROUNDTRIP_TOLERANCE:e})",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { EXIT_MISMATCH })
}

fn describe_array(array: &ChunkedArray) -> Result<String> {
    let meta = array.metadata();
    let mut lines = vec![
        format!("zarr v2 array  {}", array.root().display()),
        format!("shape          {}", fmt_shape(meta.shape())),
        format!("chunks         {}", fmt_shape(meta.chunks())),
        format!("chunk grid     {}", fmt_shape(&meta.chunk_grid())),
        format!("dtype          {}  order C  compressor none", meta.dtype()),
        format!("fill value     {}", meta.fill_value()),
    ];
    if let Some(attrs) = array.read_attributes()? {
        if let Some(prov) = attrs.get("tessellate") {
            let plan = PatchPlan::from_value(prov["plan"].clone())?;
            lines.push(format!(
                "patch store    {} of {} placements",
                meta.shape()[0],
                plan.len()
            ));
        }
    }
    Ok(lines.join("\n"))
}

fn cmd_info(path: &Path) -> Result<i32> {
    if ChunkedArray::exists(path) {
        println!("{}", describe_array(&ChunkedArray::open(path)?)?);
        return Ok(0);
    }
    if path.join("manifest.json").is_file() {
        let acc = Accumulators::open(path)?;
        let manifest: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(path.join("manifest.json")).map_err(|e| Error::io(path, e))?,
        )
        .map_err(|e| Error::Format(e.to_string()))?;
        println!("stitch run     {}", path.display());
        println!(
            "state          {}",
            manifest["state"].as_str().unwrap_or("?")
        );
        println!(
            "accumulated    {} of {}",
            acc.accumulated_count(),
            acc.plan().len()
        );
        println!("output shape   {}", fmt_shape(acc.mean_array().shape()));
        println!("chunks         {}", fmt_shape(acc.chunk_shape()));
        return Ok(0);
    }
    let small = fs::metadata(path).is_ok_and(|m| m.is_file() && m.len() < 64 << 20);
    if small {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = String::from_utf8_lossy(&bytes);
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            match value.get("format").and_then(|f| f.as_str()) {
                Some(PLAN_FORMAT) => {
                    println!("{}", describe_plan(&PatchPlan::from_json(&text)?));
                    return Ok(0);
                }
                Some(REPORT_FORMAT) => {
                    print_report(&CurationReport::from_json(&text)?);
                    return Ok(0);
                }
                Some(STITCH_FORMAT) => {
                    if let Some(dir) = path.parent() {
                        return cmd_info(dir);
                    }
                }
                _ => {}
            }
        }
    }
    match Volume::open(path) {
        Ok(volume) => {
            println!("raw volume     {}", path.display());
            println!("layout         {}", fmt_shape(&volume.layout().shape()));
            Ok(0)
        }
        Err(Error::Unrecognized(_)) | Err(Error::Format(_)) => {
            Err(Error::Unrecognized(path.to_path_buf()))
        }
        Err(e) => Err(e),
    }
}
