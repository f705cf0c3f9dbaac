//! C ABI over `tessellate`.
//!
//! Objects cross the boundary as opaque handles (`TsPlan`, `TsAccumulators`,
//! `TsArray`) created by a `*_new`/`*_open`/`*_create` call and released
//! with the matching `*_free`. Every fallible function returns a `TsStatus`;
//! on failure `ts_last_error_message` describes the error for the calling
//! thread. Buffers are caller-allocated and their capacity is passed
//! explicitly. Panics never unwind into C; they surface as `TS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;
use std::sync::Arc;

use tessellate::{
    build_plan, create_accumulators, extract, weight_map, Accumulators, ChunkedArray, DenseTensor,
    Error, PatchPlan, StitchPolicy, TensorLayout, WindowSpec, ZeroCoverage,
};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or a buffer of the wrong size.
    InvalidArgument = 1,
    InvalidSpec = 2,
    Shape = 3,
    OutOfRange = 4,
    AlreadyExists = 5,
    Io = 6,
    Format = 7,
    AlreadyAccumulated = 8,
    Coverage = 9,
    Incomplete = 10,
    UndefinedStatistic = 11,
    Unrecognized = 12,
    Panic = 13,
}

impl From<&Error> for TsStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidSpec(_) => TsStatus::InvalidSpec,
            Error::Shape(_) => TsStatus::Shape,
            Error::IndexOutOfRange { .. } | Error::OutOfBounds(_) => TsStatus::OutOfRange,
            Error::AlreadyExists(_) => TsStatus::AlreadyExists,
            Error::Io { .. } => TsStatus::Io,
            Error::Format(_) => TsStatus::Format,
            Error::AlreadyAccumulated { .. } => TsStatus::AlreadyAccumulated,
            Error::Coverage { .. } => TsStatus::Coverage,
            Error::Incomplete { .. } => TsStatus::Incomplete,
            Error::UndefinedStatistic(_) => TsStatus::UndefinedStatistic,
            Error::Unrecognized(_) => TsStatus::Unrecognized,
        }
    }
}

/// Immutable list of window placements.
pub struct TsPlan(Arc<PatchPlan>);

/// On-disk stitching state.
pub struct TsAccumulators(Accumulators);

/// Chunked `f32` array on disk.
pub struct TsArray(ChunkedArray);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

struct Failure(TsStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(TsStatus::from(&e), e.to_string())
    }
}

fn bad_arg(message: impl Into<String>) -> Failure {
    Failure(TsStatus::InvalidArgument, message.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            TsStatus::Panic
        }
    }
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| bad_arg(format!("{what} is null")))
}

unsafe fn as_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad_arg(format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn as_slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(bad_arg(format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn as_path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(bad_arg("path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| bad_arg("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(bad_arg("output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn copy_into(dst: &mut [f32], src: &[f32]) -> Result<(), Failure> {
    if dst.len() != src.len() {
        return Err(bad_arg(format!(
            "output buffer holds {} values, {} required",
            dst.len(),
            src.len()
        )));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ts_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a plan for an `(items, channels, spatial...)` tensor. `spatial`,
/// `window`, `step` and `border` each hold `rank` values; `border` may be
/// null for no border.
///
/// # Safety
/// Array arguments must point to `rank` readable values; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn ts_plan_new(
    items: usize,
    channels: usize,
    spatial: *const usize,
    rank: usize,
    window: *const usize,
    step: *const usize,
    border: *const usize,
    border_weight: f32,
    out: *mut *mut TsPlan,
) -> TsStatus {
    guard(|| {
        let spatial = as_slice(spatial, rank, "spatial")?;
        let window = as_slice(window, rank, "window")?;
        let step = as_slice(step, rank, "step")?;
        let border = if border.is_null() {
            vec![0; rank]
        } else {
            as_slice(border, rank, "border")?.to_vec()
        };
        let layout = TensorLayout::new(items, channels, spatial.to_vec())?;
        let spec = WindowSpec::with_border(window.to_vec(), step.to_vec(), border, border_weight)?;
        let plan = build_plan(&layout, &spec)?;
        put(out, TsPlan(Arc::new(plan)))
    })
}

/// # Safety
/// `plan` must be null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_free(plan: *mut TsPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Number of placements, 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_len(plan: *const TsPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.len())
}

/// Number of spatial axes, 0 for a null handle.
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_rank(plan: *const TsPlan) -> usize {
    plan.as_ref().map_or(0, |p| p.0.layout().rank())
}

/// Values in one patch of `channels` channels (`channels * prod(window)`).
///
/// # Safety
/// `plan` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_patch_len(plan: *const TsPlan, channels: usize) -> usize {
    plan.as_ref()
        .map_or(0, |p| channels * p.0.spec().window_volume())
}

/// Writes the item index and `rank` start coordinates of placement `index`.
///
/// # Safety
/// `item` must be writable; `start` must hold `rank` writable values.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_placement(
    plan: *const TsPlan,
    index: usize,
    item: *mut usize,
    start: *mut usize,
) -> TsStatus {
    guard(|| {
        let plan = as_ref(plan, "plan")?;
        let p = plan.0.placement(index)?;
        let start = as_slice_mut(start, p.start.len(), "start")?;
        if item.is_null() {
            return Err(bad_arg("item is null"));
        }
        *item = p.item;
        start.copy_from_slice(&p.start);
        Ok(())
    })
}

/// Serializes the plan; release the string with `ts_string_free`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_to_json(plan: *const TsPlan, out: *mut *mut c_char) -> TsStatus {
    guard(|| {
        let plan = as_ref(plan, "plan")?;
        if out.is_null() {
            return Err(bad_arg("out is null"));
        }
        *out = CString::new(plan.0.to_json())
            .map_err(|_| bad_arg("plan JSON contains a nul byte"))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_plan_from_json(json: *const c_char, out: *mut *mut TsPlan) -> TsStatus {
    guard(|| {
        if json.is_null() {
            return Err(bad_arg("json is null"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| bad_arg("json is not valid UTF-8"))?;
        put(out, TsPlan(Arc::new(PatchPlan::from_json(text)?)))
    })
}

/// Writes the `prod(window)` stitching weights of placement `index`.
///
/// # Safety
/// `out` must hold `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ts_weight_map(
    plan: *const TsPlan,
    index: usize,
    out: *mut f32,
    out_len: usize,
) -> TsStatus {
    guard(|| {
        let plan = as_ref(plan, "plan")?;
        let map = weight_map(plan.0.spec(), plan.0.placement(index)?)?;
        copy_into(as_slice_mut(out, out_len, "out")?, map.values())
    })
}

/// Cuts a dense C-order tensor matching the plan's layout into the
/// `(M, C, window...)` patch stack.
///
/// # Safety
/// `values` must hold `len` readable values and `out` `out_len` writable ones.
#[no_mangle]
pub unsafe extern "C" fn ts_extract(
    plan: *const TsPlan,
    values: *const f32,
    len: usize,
    out: *mut f32,
    out_len: usize,
) -> TsStatus {
    guard(|| {
        let plan = as_ref(plan, "plan")?;
        let values = as_slice(values, len, "values")?;
        let tensor = DenseTensor::new(plan.0.layout().clone(), values.to_vec())?;
        let stack = extract(&tensor, &plan.0)?;
        copy_into(as_slice_mut(out, out_len, "out")?, stack.values())
    })
}

/// Creates stitching state for `output_channels`-channel results in
/// directory `path`, chunked by window.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_create(
    plan: *const TsPlan,
    output_channels: usize,
    path: *const c_char,
    out: *mut *mut TsAccumulators,
) -> TsStatus {
    guard(|| {
        let plan = as_ref(plan, "plan")?;
        let path = as_path(path)?;
        let acc = create_accumulators(plan.0.layout(), output_channels, &plan.0, None, &path)?;
        put(out, TsAccumulators(acc))
    })
}

/// Reopens stitching state left by an earlier, possibly interrupted, run.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_open(
    path: *const c_char,
    out: *mut *mut TsAccumulators,
) -> TsStatus {
    guard(|| put(out, TsAccumulators(Accumulators::open(as_path(path)?)?)))
}

/// # Safety
/// `acc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_free(acc: *mut TsAccumulators) {
    if !acc.is_null() {
        drop(Box::from_raw(acc));
    }
}

/// Whether placement `index` has already been accumulated.
///
/// # Safety
/// `acc` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_contains(
    acc: *const TsAccumulators,
    index: usize,
) -> bool {
    acc.as_ref().is_some_and(|a| a.0.is_accumulated(index))
}

/// Adds the result for placement `index`. Safe to call from several threads
/// on the same handle.
///
/// # Safety
/// `values` must hold `len` readable values.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulate(
    acc: *const TsAccumulators,
    index: usize,
    values: *const f32,
    len: usize,
) -> TsStatus {
    guard(|| {
        let acc = as_ref(acc, "accumulators")?;
        acc.0.accumulate(index, as_slice(values, len, "values")?)?;
        Ok(())
    })
}

/// Persists the set of accumulated placements so a later
/// `ts_accumulators_open` can resume.
///
/// # Safety
/// `acc` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_checkpoint(acc: *const TsAccumulators) -> TsStatus {
    guard(|| Ok(as_ref(acc, "accumulators")?.0.checkpoint()?))
}

/// Divides accumulated sums by weights into `<path>/output`. With a null
/// `fill`, voxels without coverage fail with `TS_COVERAGE`; otherwise they
/// receive `*fill`.
///
/// # Safety
/// `fill` must be null or readable; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_accumulators_finalize(
    acc: *const TsAccumulators,
    fill: *const f32,
    out: *mut *mut TsArray,
) -> TsStatus {
    guard(|| {
        let acc = as_ref(acc, "accumulators")?;
        let zero_coverage = match fill.as_ref() {
            Some(&value) => ZeroCoverage::Fill { value },
            None => ZeroCoverage::Error,
        };
        let policy = StitchPolicy::new(acc.0.output_channels())?.with_zero_coverage(zero_coverage);
        put(out, TsArray(acc.0.finalize(&policy)?))
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_array_open(path: *const c_char, out: *mut *mut TsArray) -> TsStatus {
    guard(|| put(out, TsArray(ChunkedArray::open(as_path(path)?)?)))
}

/// # Safety
/// `array` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_array_free(array: *mut TsArray) {
    if !array.is_null() {
        drop(Box::from_raw(array));
    }
}

/// Number of dimensions, 0 for a null handle.
///
/// # Safety
/// `array` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ts_array_ndim(array: *const TsArray) -> usize {
    array.as_ref().map_or(0, |a| a.0.shape().len())
}

/// Writes the array's `ndim` extents.
///
/// # Safety
/// `shape` must hold `ndim` writable values.
#[no_mangle]
pub unsafe extern "C" fn ts_array_shape(
    array: *const TsArray,
    shape: *mut usize,
    ndim: usize,
) -> TsStatus {
    guard(|| {
        let array = as_ref(array, "array")?;
        let dims = array.0.shape();
        if ndim != dims.len() {
            return Err(bad_arg(format!(
                "array has {} dimensions, not {ndim}",
                dims.len()
            )));
        }
        as_slice_mut(shape, ndim, "shape")?.copy_from_slice(dims);
        Ok(())
    })
}

/// Reads the box at `start` with extents `shape` (each `ndim` long) in C order.
///
/// # Safety
/// `start` and `shape` must hold `ndim` readable values; `out` must hold
/// `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn ts_array_read_region(
    array: *const TsArray,
    start: *const usize,
    shape: *const usize,
    ndim: usize,
    out: *mut f32,
    out_len: usize,
) -> TsStatus {
    guard(|| {
        let array = as_ref(array, "array")?;
        let start = as_slice(start, ndim, "start")?;
        let shape = as_slice(shape, ndim, "shape")?;
        let values = array.0.read_region(start, shape)?;
        copy_into(as_slice_mut(out, out_len, "out")?, &values)
    })
}
