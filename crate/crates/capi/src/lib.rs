//! C ABI over the weak-label / projection pipeline.
//!
//! Every object crossing the boundary is an opaque handle created and
//! destroyed here; all entry points return [`EmipStatus`] and leave a
//! per-thread message retrievable with [`emip_last_error`] on failure.
//! Panics are caught at the boundary and reported as `EMIP_STATUS_PANICKED`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use emip::io::parse_config_text;
use emip::model::{
    validate_volume, AnnotationSet, ChannelVolume, Dims, MultiChannelVolume, PointAnnotation,
};
use emip::pipeline::{classify_cells, run_emip, PipelineConfig};
use emip::projection::{mip, EmipResult, ProjectionPair};

/// Result code of every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmipStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Inputs failed validation (dimensions, intensity range, duplicate
    /// points, bad config text, index out of range).
    InvalidArgument = 2,
    /// An output buffer is smaller than the data it must receive.
    BufferTooSmall = 3,
    /// An internal panic was caught at the ABI boundary.
    Panicked = 4,
}

/// One point annotation: a nucleus center plus its class id.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EmipPoint {
    pub x: u32,
    pub y: u32,
    pub z: u32,
    pub class_id: u32,
}

/// Which 2D plane [`emip_run_plane`] copies out.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmipPlane {
    NucleiMip = 0,
    MarkerMip = 1,
    NucleiEmip = 2,
    MarkerEmip = 3,
}

/// Opaque: a two-channel volume (nuclei + marker, identical dimensions).
pub struct EmipVolume {
    vol: MultiChannelVolume,
}

/// Opaque: an ordered set of point annotations.
pub struct EmipAnnotations {
    ann: AnnotationSet,
}

/// Opaque: the outputs of one pipeline run.
pub struct EmipRun {
    width: u32,
    height: u32,
    mip: ProjectionPair,
    emip: EmipResult,
    classes: Vec<u32>,
    warnings: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure {
    status: EmipStatus,
    msg: String,
}

impl Failure {
    fn invalid(msg: impl Into<String>) -> Self {
        Failure {
            status: EmipStatus::InvalidArgument,
            msg: msg.into(),
        }
    }

    fn null(what: &str) -> Self {
        Failure {
            status: EmipStatus::NullArgument,
            msg: format!("{what} must not be null"),
        }
    }
}

impl From<emip::Error> for Failure {
    fn from(e: emip::Error) -> Self {
        Failure::invalid(e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmipStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmipStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.msg);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            EmipStatus::Panicked
        }
    }
}

/// Version of the library as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emip_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the current thread's most recent failure, or null if
/// none occurred yet. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn emip_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a volume from two row-major `width * height * depth` intensity
/// arrays in [0, 1], slices ordered by z. The data is copied.
///
/// # Safety
/// `nuclei` and `marker` must point to `width * height * depth` readable
/// floats; `out` must be a valid location to store the handle.
#[no_mangle]
pub unsafe extern "C" fn emip_volume_create(
    width: u32,
    height: u32,
    depth: u32,
    nuclei: *const f32,
    marker: *const f32,
    out: *mut *mut EmipVolume,
) -> EmipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        if nuclei.is_null() || marker.is_null() {
            return Err(Failure::null("channel data"));
        }
        let dims = Dims::new(width, height, depth);
        if width == 0 || height == 0 || depth == 0 {
            return Err(Failure::invalid(format!(
                "volume dimensions must be positive, got {width}x{height}x{depth}"
            )));
        }
        let n = dims.voxel_count();
        let nuclei = ChannelVolume::new(dims, slice::from_raw_parts(nuclei, n).to_vec())?;
        let marker = ChannelVolume::new(dims, slice::from_raw_parts(marker, n).to_vec())?;
        let vol = MultiChannelVolume::new(nuclei, marker)?;
        *out = Box::into_raw(Box::new(EmipVolume { vol }));
        Ok(())
    })
}

/// Releases a volume handle. Null is a no-op.
///
/// # Safety
/// `vol` must be null or a handle from [`emip_volume_create`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emip_volume_free(vol: *mut EmipVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// Builds an annotation set from `len` points. Point order defines the cell
/// ids used by every per-cell accessor. Duplicate (x, y) pairs are rejected.
///
/// # Safety
/// `points` must point to `len` readable [`EmipPoint`] values; `out` must be
/// a valid location to store the handle.
#[no_mangle]
pub unsafe extern "C" fn emip_annotations_create(
    points: *const EmipPoint,
    len: usize,
    out: *mut *mut EmipAnnotations,
) -> EmipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        if points.is_null() {
            return Err(Failure::null("points"));
        }
        let pts = slice::from_raw_parts(points, len)
            .iter()
            .map(|p| PointAnnotation {
                x: p.x,
                y: p.y,
                z: p.z,
                class_id: p.class_id,
            })
            .collect();
        let ann = AnnotationSet::new(pts)?;
        *out = Box::into_raw(Box::new(EmipAnnotations { ann }));
        Ok(())
    })
}

/// Releases an annotation handle. Null is a no-op.
///
/// # Safety
/// `ann` must be null or a handle from [`emip_annotations_create`] not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn emip_annotations_free(ann: *mut EmipAnnotations) {
    if !ann.is_null() {
        drop(Box::from_raw(ann));
    }
}

/// Runs the full chain (distance map, clustering, Voronoi label, per-cell
/// slice sets, projections, per-cell classes) and returns a run handle.
///
/// `config` is optional: null for defaults, otherwise flat `key = value`
/// lines (`#` comments allowed) with the same keys as the CLI config file.
///
/// # Safety
/// `vol` and `ann` must be live handles; `config` must be null or a
/// NUL-terminated string; `out` must be a valid location to store the handle.
#[no_mangle]
pub unsafe extern "C" fn emip_run_create(
    vol: *const EmipVolume,
    ann: *const EmipAnnotations,
    config: *const c_char,
    out: *mut *mut EmipRun,
) -> EmipStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let vol = vol.as_ref().ok_or_else(|| Failure::null("vol"))?;
        let ann = ann.as_ref().ok_or_else(|| Failure::null("ann"))?;
        let mut cfg = PipelineConfig::default();
        if !config.is_null() {
            let text = CStr::from_ptr(config)
                .to_str()
                .map_err(|_| Failure::invalid("config text is not valid UTF-8"))?;
            cfg.apply(&parse_config_text(text, Path::new("<config>"))?)?;
        }
        let (volume, points) = validate_volume(
            vol.vol.nuclei().clone(),
            vol.vol.marker().clone(),
            ann.ann.clone(),
        )?;
        let run = run_emip(&volume, &points, &cfg)?;
        let dims = volume.dims();
        let pair = ProjectionPair {
            nuclei_2d: mip(volume.nuclei()),
            marker_2d: mip(volume.marker()),
        };
        let classes = classify_cells(
            &run.result.pair.marker_2d,
            &run.weak.voronoi,
            cfg.marker_threshold,
        );
        let warnings = run
            .warnings
            .iter()
            .map(|w| CString::new(w.replace('\0', " ")).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(EmipRun {
            width: dims.width,
            height: dims.height,
            mip: pair,
            emip: run.result,
            classes,
            warnings,
        }));
        Ok(())
    })
}

/// Releases a run handle. Null is a no-op.
///
/// # Safety
/// `run` must be null or a handle from [`emip_run_create`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn emip_run_free(run: *mut EmipRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Writes the projection width and height.
///
/// # Safety
/// `run` must be a live handle; `width` and `height` must be valid locations.
#[no_mangle]
pub unsafe extern "C" fn emip_run_dims(
    run: *const EmipRun,
    width: *mut u32,
    height: *mut u32,
) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if width.is_null() || height.is_null() {
            return Err(Failure::null("width/height"));
        }
        *width = run.width;
        *height = run.height;
        Ok(())
    })
}

/// Copies one projection plane into `out` as `width * height` row-major
/// floats; `len` must be exactly that count.
///
/// # Safety
/// `run` must be a live handle; `out` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn emip_run_plane(
    run: *const EmipRun,
    plane: EmipPlane,
    out: *mut f32,
    len: usize,
) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let img = match plane {
            EmipPlane::NucleiMip => &run.mip.nuclei_2d,
            EmipPlane::MarkerMip => &run.mip.marker_2d,
            EmipPlane::NucleiEmip => &run.emip.pair.nuclei_2d,
            EmipPlane::MarkerEmip => &run.emip.pair.marker_2d,
        };
        let values = img.values();
        if len != values.len() {
            return Err(Failure {
                status: EmipStatus::BufferTooSmall,
                msg: format!("plane needs {} floats, got buffer for {len}", values.len()),
            });
        }
        std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
        Ok(())
    })
}

/// Writes the number of cells (one per annotation, in annotation order).
///
/// # Safety
/// `run` must be a live handle; `out` must be a valid location.
#[no_mangle]
pub unsafe extern "C" fn emip_run_cell_count(run: *const EmipRun, out: *mut usize) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = run.emip.slice_sets.len();
        Ok(())
    })
}

/// Copies cell `cell`'s slice indices into `out` (capacity `cap`) and writes
/// the count to `written`. With a null `out`, only the count is written, so
/// callers can size the buffer with a first call.
///
/// # Safety
/// `run` must be a live handle; `out` must be null or point to `cap` writable
/// u32 values; `written` must be a valid location.
#[no_mangle]
pub unsafe extern "C" fn emip_run_slice_set(
    run: *const EmipRun,
    cell: usize,
    out: *mut u32,
    cap: usize,
    written: *mut usize,
) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if written.is_null() {
            return Err(Failure::null("written"));
        }
        let set = run
            .emip
            .slice_sets
            .get(cell)
            .ok_or_else(|| Failure::invalid(format!("cell {cell} out of range")))?;
        let indices = set.indices();
        *written = indices.len();
        if out.is_null() {
            return Ok(());
        }
        if cap < indices.len() {
            return Err(Failure {
                status: EmipStatus::BufferTooSmall,
                msg: format!("slice set has {} entries, capacity is {cap}", indices.len()),
            });
        }
        std::ptr::copy_nonoverlapping(indices.as_ptr(), out, indices.len());
        Ok(())
    })
}

/// Writes cell `cell`'s class id (0 = negative, 1 = positive) as read off
/// the projected marker with the configured threshold.
///
/// # Safety
/// `run` must be a live handle; `out` must be a valid location.
#[no_mangle]
pub unsafe extern "C" fn emip_run_cell_class(
    run: *const EmipRun,
    cell: usize,
    out: *mut u32,
) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let class = *run
            .classes
            .get(cell)
            .ok_or_else(|| Failure::invalid(format!("cell {cell} out of range")))?;
        *out = class;
        Ok(())
    })
}

/// Number of warnings the run produced (cells that fell back to the full
/// z range because their slice set came out empty).
///
/// # Safety
/// `run` must be a live handle; `out` must be a valid location.
#[no_mangle]
pub unsafe extern "C" fn emip_run_warning_count(
    run: *const EmipRun,
    out: *mut usize,
) -> EmipStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| Failure::null("run"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = run.warnings.len();
        Ok(())
    })
}

/// Warning `idx` as a NUL-terminated string owned by the run handle, or null
/// if `idx` is out of range. Valid until the handle is freed.
///
/// # Safety
/// `run` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn emip_run_warning(run: *const EmipRun, idx: usize) -> *const c_char {
    let Some(run) = run.as_ref() else {
        return std::ptr::null();
    };
    run.warnings
        .get(idx)
        .map_or(std::ptr::null(), |w| w.as_ptr())
}
