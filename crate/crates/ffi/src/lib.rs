//! C ABI over the trained system: load a checkpoint, run detection on raw
//! image buffers, query scene labels. All functions return an error code
//! (0 on success); the last error message is kept per thread.

use std::cell::RefCell;
use std::ffi::CStr;
use std::os::raw::{c_char, c_double, c_int};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rxf_core::error::Error;
use rxf_core::scene::TrainedSystem;
use rxf_core::tensor::Tensor;

/// Success code returned by every fallible function.
pub const RXF_OK: c_int = 0;
/// A required pointer argument was null.
pub const RXF_NULL_POINTER: c_int = 1;
/// The callee panicked; state may be inconsistent.
pub const RXF_PANIC: c_int = 2;
/// The output buffer was too small; partial results were written.
pub const RXF_BUFFER_TOO_SMALL: c_int = 3;

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: &str) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.to_string());
}

fn fail(err: Error) -> c_int {
    set_error(&err.to_string());
    err.code() as c_int
}

/// Opaque handle to a loaded detection system.
pub struct RxfSystem {
    inner: TrainedSystem,
}

/// One detection in image coordinates.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct RxfDetection {
    pub x_min: c_double,
    pub y_min: c_double,
    pub x_max: c_double,
    pub y_max: c_double,
    pub score: c_double,
    pub class_id: c_int,
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rxf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies the last error message for the calling thread into `buf`
/// (NUL-terminated, truncated to `cap`). Returns the full message length.
#[no_mangle]
pub extern "C" fn rxf_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Loads a full-system checkpoint. On success `*out` owns the system and
/// must be released with `rxf_system_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_load(path: *const c_char, out: *mut *mut RxfSystem) -> c_int {
    if path.is_null() || out.is_null() {
        set_error("null pointer argument");
        return RXF_NULL_POINTER;
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("path is not valid UTF-8");
                return RXF_NULL_POINTER;
            }
        };
        match TrainedSystem::load(Path::new(path)) {
            Ok(system) => {
                *out = Box::into_raw(Box::new(RxfSystem { inner: system }));
                RXF_OK
            }
            Err(e) => fail(e),
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in rxf_system_load");
        RXF_PANIC
    })
}

/// Releases a system handle. Passing null is a no-op.
///
/// # Safety
/// `system` must be a pointer returned by `rxf_system_load`, released at
/// most once.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_free(system: *mut RxfSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Number of scenes the loaded classifier can route to.
///
/// # Safety
/// `system` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_num_scenes(system: *const RxfSystem) -> usize {
    if system.is_null() {
        return 0;
    }
    (*system).inner.scene_taxonomy().len()
}

/// Side length of the square images the system expects.
///
/// # Safety
/// `system` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_image_size(system: *const RxfSystem) -> usize {
    if system.is_null() {
        return 0;
    }
    (*system).inner.config.image_size
}

/// Copies the scene label at `index` into `buf` (NUL-terminated). Returns
/// the label length, or 0 for an invalid handle or index.
///
/// # Safety
/// `system` must be a valid handle; `buf` must hold `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_scene_name(
    system: *const RxfSystem,
    index: usize,
    buf: *mut c_char,
    cap: usize,
) -> usize {
    if system.is_null() {
        return 0;
    }
    let taxonomy = (*system).inner.scene_taxonomy();
    let Some(name) = taxonomy.get(index) else {
        return 0;
    };
    let bytes = name.as_bytes();
    if !buf.is_null() && cap > 0 {
        let n = bytes.len().min(cap - 1);
        std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
    }
    bytes.len()
}

/// Scene-adaptive detection on one RGB/X image pair.
///
/// `rgb` holds `3 * image_size * image_size` doubles in channel-major
/// order; `x` holds `image_size * image_size` doubles. Up to `cap`
/// detections are written to `detections`; `*out_count` receives the
/// number available. `*out_scene` receives the routed scene index.
///
/// # Safety
/// All pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn rxf_system_detect(
    system: *const RxfSystem,
    rgb: *const c_double,
    x: *const c_double,
    image_size: usize,
    detections: *mut RxfDetection,
    cap: usize,
    out_count: *mut usize,
    out_scene: *mut usize,
) -> c_int {
    if system.is_null() || rgb.is_null() || x.is_null() || out_count.is_null() {
        set_error("null pointer argument");
        return RXF_NULL_POINTER;
    }
    let result = catch_unwind(AssertUnwindSafe(|| {
        let sys = &(*system).inner;
        let hw = image_size * image_size;
        let rgb_data = std::slice::from_raw_parts(rgb, 3 * hw).to_vec();
        let x_data = std::slice::from_raw_parts(x, hw).to_vec();
        let rgb_t = Tensor::new(vec![1, 3, image_size, image_size], rgb_data);
        let x_t = Tensor::new(vec![1, 1, image_size, image_size], x_data);
        let (dets, scene) = match sys.detect_scene_adaptive(&rgb_t, &x_t) {
            Ok(r) => r,
            Err(e) => return fail(e),
        };
        *out_count = dets.len();
        if !out_scene.is_null() {
            *out_scene = sys
                .scene_taxonomy()
                .iter()
                .position(|s| *s == scene)
                .unwrap_or(usize::MAX);
        }
        let n = dets.len().min(cap);
        if !detections.is_null() {
            for (i, d) in dets.iter().take(n).enumerate() {
                *detections.add(i) = RxfDetection {
                    x_min: d.bbox.x_min,
                    y_min: d.bbox.y_min,
                    x_max: d.bbox.x_max,
                    y_max: d.bbox.y_max,
                    score: d.score,
                    class_id: d.class_id as c_int,
                };
            }
        }
        if dets.len() > cap {
            set_error("detection buffer too small");
            RXF_BUFFER_TOO_SMALL
        } else {
            RXF_OK
        }
    }));
    result.unwrap_or_else(|_| {
        set_error("panic in rxf_system_detect");
        RXF_PANIC
    })
}
