//! C ABI over the voidscan pipeline.
//!
//! Objects are exposed as opaque handles that the caller frees with the
//! matching `vs_*_free` function. Every fallible call returns a [`VsStatus`];
//! on failure the message is available from [`vs_last_error_message`] on the
//! same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use voidscan::balls::{extract_balls, BallGrid, ExtractionConfig, Source};
use voidscan::eval::{postprocess, EvalConfig};
use voidscan::imaging::{load_image, Disc, GrayImage};
use voidscan::segnet::{predict_mask, Network, NetworkParams, Stage};
use voidscan::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    UnsupportedImage = 4,
    Checkpoint = 5,
    OutOfRange = 6,
    Internal = 7,
    Panic = 8,
}

/// How a ball position was obtained.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VsBallSource {
    Detected = 0,
    Interpolated = 1,
    Refined = 2,
}

/// One located ball. `row` and `col` are -1 when the ball is off-grid.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsBall {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub row: i64,
    pub col: i64,
    pub source: VsBallSource,
}

/// Post-processed prediction for one crop.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VsVoidResult {
    /// Void pixels inside the ball disc, in percent.
    pub void_percentage: f64,
    pub region_count: usize,
    /// Pixels in the retained regions.
    pub void_pixels: usize,
}

/// 8-bit grayscale image.
pub struct VsImage(GrayImage);

/// Balls located on one board.
pub struct VsBallGrid(BallGrid);

/// Loaded U-Net checkpoint.
pub struct VsModel(Network);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    let s = CString::new(bytes).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(s));
}

fn status_of(e: &Error) -> VsStatus {
    match e {
        Error::Io { .. } | Error::MissingFile { .. } => VsStatus::Io,
        Error::UnsupportedFormat { .. } | Error::NotGrayscale { .. } => VsStatus::UnsupportedImage,
        Error::Checkpoint(_) | Error::Json(_) => VsStatus::Checkpoint,
        Error::InvalidArgument(_) | Error::DimensionMismatch(_) | Error::Config(_) => VsStatus::InvalidArgument,
        _ => VsStatus::Internal,
    }
}

struct Fail(VsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(VsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    // SAFETY: caller passes a handle created by this library or null.
    unsafe { p.as_ref() }.ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller passes writable storage or null.
    unsafe { p.as_mut() }.ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    // SAFETY: caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(VsStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn vs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads an 8-bit grayscale PNG.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_image_load(path: *const c_char, out: *mut *mut VsImage) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = ptr::null_mut();
        let img = load_image(unsafe { path_arg(path) }?)?;
        *out = Box::into_raw(Box::new(VsImage(img)));
        Ok(())
    })
}

/// Copies a row-major 8-bit buffer with `stride` bytes per row.
///
/// # Safety
/// `pixels` must point to at least `stride * (height - 1) + width` bytes.
#[no_mangle]
pub unsafe extern "C" fn vs_image_from_pixels(
    width: usize,
    height: usize,
    pixels: *const u8,
    stride: usize,
    out: *mut *mut VsImage,
) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = ptr::null_mut();
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if width == 0 || height == 0 || stride < width {
            return Err(Fail(
                VsStatus::InvalidArgument,
                format!("bad image geometry {width}x{height} stride {stride}"),
            ));
        }
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            // SAFETY: the row lies inside the caller's buffer.
            let row = unsafe { std::slice::from_raw_parts(pixels.add(y * stride), width) };
            data.extend_from_slice(row);
        }
        *out = Box::into_raw(Box::new(VsImage(GrayImage::from_raw(width, height, data)?)));
        Ok(())
    })
}

/// # Safety
/// `img` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn vs_image_width(img: *const VsImage) -> usize {
    unsafe { img.as_ref() }.map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn vs_image_height(img: *const VsImage) -> usize {
    unsafe { img.as_ref() }.map_or(0, |i| i.0.height())
}

/// Row-major pixel data, `width * height` bytes, owned by the handle.
///
/// # Safety
/// `img` must be null or a live image handle.
#[no_mangle]
pub unsafe extern "C" fn vs_image_data(img: *const VsImage) -> *const u8 {
    unsafe { img.as_ref() }.map_or(ptr::null(), |i| i.0.pixels().as_ptr())
}

/// # Safety
/// `img` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_image_free(img: *mut VsImage) {
    if !img.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(img) });
    }
}

/// Locates the balls on a board with default extraction settings.
///
/// # Safety
/// `board` must be a live image handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_extract_balls(board: *const VsImage, out: *mut *mut VsBallGrid) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = ptr::null_mut();
        let board = unsafe { borrow(board, "board") }?;
        let grid = extract_balls(&board.0, &ExtractionConfig::default())?;
        *out = Box::into_raw(Box::new(VsBallGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a live grid handle.
#[no_mangle]
pub unsafe extern "C" fn vs_ball_grid_len(grid: *const VsBallGrid) -> usize {
    unsafe { grid.as_ref() }.map_or(0, |g| g.0.balls.len())
}

/// # Safety
/// `grid` must be a live grid handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_ball_grid_get(grid: *const VsBallGrid, index: usize, out: *mut VsBall) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let grid = unsafe { borrow(grid, "grid") }?;
        let b = grid.0.balls.get(index).ok_or_else(|| {
            Fail(
                VsStatus::OutOfRange,
                format!("ball index {index} out of range ({} balls)", grid.0.balls.len()),
            )
        })?;
        let id = |v: Option<usize>| v.map_or(-1, |v| v as i64);
        *out = VsBall {
            cx: b.cx,
            cy: b.cy,
            r: b.r,
            row: id(b.row_id),
            col: id(b.col_id),
            source: match b.source {
                Source::Detected => VsBallSource::Detected,
                Source::Interpolated => VsBallSource::Interpolated,
                Source::Refined => VsBallSource::Refined,
            },
        };
        Ok(())
    })
}

/// Square crop of side `size` centred on ball `index`; off-board pixels are 0.
///
/// # Safety
/// `board` and `grid` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_ball_crop(
    board: *const VsImage,
    grid: *const VsBallGrid,
    index: usize,
    size: usize,
    out: *mut *mut VsImage,
) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = ptr::null_mut();
        let board = unsafe { borrow(board, "board") }?;
        let grid = unsafe { borrow(grid, "grid") }?;
        if size == 0 {
            return Err(Fail(VsStatus::InvalidArgument, "crop size must be > 0".into()));
        }
        let b = grid
            .0
            .balls
            .get(index)
            .ok_or_else(|| Fail(VsStatus::OutOfRange, format!("ball index {index} out of range")))?;
        let half = (size / 2) as i64;
        let crop = board
            .0
            .window(b.cx.round() as i64 - half, b.cy.round() as i64 - half, size, size, 0);
        *out = Box::into_raw(Box::new(VsImage(crop)));
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_ball_grid_free(grid: *mut VsBallGrid) {
    if !grid.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(grid) });
    }
}

/// Loads a U-Net checkpoint (the JSON sidecar must sit next to it).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn vs_model_load(path: *const c_char, out: *mut *mut VsModel) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        *out = ptr::null_mut();
        let params = NetworkParams::load(unsafe { path_arg(path) }?)?;
        if params.network.stage() != Stage::Unet {
            return Err(Fail(VsStatus::Checkpoint, "checkpoint is not a U-Net".into()));
        }
        *out = Box::into_raw(Box::new(VsModel(params.network)));
        Ok(())
    })
}

/// Side length of the square crops the model expects.
///
/// # Safety
/// `model` must be null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn vs_model_input_size(model: *const VsModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.0.arch().input_size)
}

/// Segments one crop and measures its voids inside the ball disc
/// (`cx`, `cy`, `r` in crop coordinates).
///
/// Probabilities above `threshold` are void; regions under `a_min` pixels
/// are dropped. When `mask_out` is not null it receives the final mask,
/// 0 or 255 per pixel, and must hold `mask_len >= size * size` bytes.
///
/// # Safety
/// Handles must be live; `mask_out` must be null or hold `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vs_predict(
    model: *const VsModel,
    crop: *const VsImage,
    cx: f64,
    cy: f64,
    r: f64,
    threshold: f32,
    a_min: usize,
    mask_out: *mut u8,
    mask_len: usize,
    out: *mut VsVoidResult,
) -> VsStatus {
    guard(|| {
        let out = unsafe { out_ptr(out, "out") }?;
        let model = unsafe { borrow(model, "model") }?;
        let crop = unsafe { borrow(crop, "crop") }?;
        let s = model.0.arch().input_size;
        if crop.0.width() != s || crop.0.height() != s {
            return Err(Fail(
                VsStatus::InvalidArgument,
                format!("crop is {}x{}, model expects {s}x{s}", crop.0.width(), crop.0.height()),
            ));
        }
        if !mask_out.is_null() && mask_len < s * s {
            return Err(Fail(
                VsStatus::InvalidArgument,
                format!("mask buffer needs {} bytes", s * s),
            ));
        }
        let cfg = EvalConfig {
            threshold,
            a_min,
            ..EvalConfig::default()
        };
        cfg.validate()?;
        if !(r > 0.0 && cx.is_finite() && cy.is_finite()) {
            return Err(Fail(VsStatus::InvalidArgument, "ball disc is invalid".into()));
        }
        let prob = predict_mask(&model.0, &crop.0)?;
        let res = postprocess("", &prob, &Disc::new(cx, cy, r), &cfg)?;
        if !mask_out.is_null() {
            // SAFETY: checked length above.
            let buf = unsafe { std::slice::from_raw_parts_mut(mask_out, s * s) };
            for (b, &m) in buf.iter_mut().zip(res.mask.bits()) {
                *b = if m { 255 } else { 0 };
            }
        }
        *out = VsVoidResult {
            void_percentage: res.void_percentage,
            region_count: res.region_areas.len(),
            void_pixels: res.region_areas.iter().sum(),
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vs_model_free(model: *mut VsModel) {
    if !model.is_null() {
        // SAFETY: created by Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}
