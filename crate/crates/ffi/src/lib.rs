//! C ABI for the denoiser: load a checkpoint, run inference on planar
//! f64 buffers, query errors. All functions are thread-compatible; a
//! handle must not be used from two threads at once.
//!
//! Buffer layout is planar channel-major: `data[c*h*w + y*w + x]`,
//! values in [0, 1]. RGB buffers carry 3 planes, the guide carries 1.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use libc::{c_char, c_double, c_int, size_t};

use nirfuse::checkpoint::load_checkpoint;
use nirfuse::net::{DenoiserNet, FusionMode};
use nirfuse::{Error, Shape4, Tensor4};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum NirfuseStatus {
    Ok = 0,
    /// Bad argument or configuration.
    InvalidArgument = 1,
    /// Unreadable or malformed data (checkpoint, image, manifest).
    DataError = 2,
    /// Non-finite values or a failed numerical invariant.
    NumericalError = 3,
    /// A required pointer was null.
    NullPointer = 4,
    /// Internal panic; state may be inconsistent, free the handle.
    Panic = 5,
}

/// Opaque denoiser handle.
pub struct NirfuseModel {
    net: DenoiserNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> NirfuseStatus {
    match err.exit_code() {
        1 => NirfuseStatus::InvalidArgument,
        3 => NirfuseStatus::NumericalError,
        _ => NirfuseStatus::DataError,
    }
}

fn guard(f: impl FnOnce() -> NirfuseStatus) -> NirfuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".to_string());
            NirfuseStatus::Panic
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nirfuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent error on this thread, or null if none.
/// The pointer is valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nirfuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Load a trained model from a checkpoint file. On success writes a
/// handle to `out`; release it with `nirfuse_model_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid
/// pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn nirfuse_model_load(
    path: *const c_char,
    out: *mut *mut NirfuseModel,
) -> NirfuseStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("null pointer".into());
            return NirfuseStatus::NullPointer;
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => PathBuf::from(s),
            Err(_) => {
                set_error("path is not valid UTF-8".into());
                return NirfuseStatus::InvalidArgument;
            }
        };
        match load_checkpoint(&path) {
            Ok((net, _)) => {
                *out = Box::into_raw(Box::new(NirfuseModel { net }));
                NirfuseStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a handle returned by `nirfuse_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a pointer from `nirfuse_model_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn nirfuse_model_free(model: *mut NirfuseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spatial divisor inputs must satisfy (a power of two set by the
/// model's scale count). Returns 0 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn nirfuse_model_spatial_multiple(model: *const NirfuseModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).net.config().spatial_multiple() as size_t
}

/// 1 if the model consumes a guide image, 0 if it denoises RGB alone,
/// -1 for a null handle.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn nirfuse_model_uses_guide(model: *const NirfuseModel) -> c_int {
    if model.is_null() {
        return -1;
    }
    ((*model).net.config().fusion_mode != FusionMode::Single) as c_int
}

/// Denoise one image. `rgb` holds 3*height*width doubles, `guide`
/// holds height*width doubles and may be null for models that ignore
/// it, `out` receives 3*height*width doubles. Width and height must be
/// multiples of `nirfuse_model_spatial_multiple`.
///
/// # Safety
/// All non-null pointers must reference buffers of the documented
/// lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn nirfuse_denoise(
    model: *const NirfuseModel,
    rgb: *const c_double,
    guide: *const c_double,
    height: size_t,
    width: size_t,
    out: *mut c_double,
) -> NirfuseStatus {
    guard(|| {
        if model.is_null() || rgb.is_null() || out.is_null() {
            set_error("null pointer".into());
            return NirfuseStatus::NullPointer;
        }
        let net = &(*model).net;
        let (h, w) = (height as usize, width as usize);
        if h == 0 || w == 0 {
            set_error("height and width must be positive".into());
            return NirfuseStatus::InvalidArgument;
        }
        let m = net.config().spatial_multiple();
        if h % m != 0 || w % m != 0 {
            set_error(format!("dimensions {h}x{w} are not multiples of {m}"));
            return NirfuseStatus::InvalidArgument;
        }
        let uses_guide = net.config().fusion_mode != FusionMode::Single;
        if uses_guide && guide.is_null() {
            set_error("this model requires a guide image".into());
            return NirfuseStatus::NullPointer;
        }
        let rgb_t = match Tensor4::from_vec(
            Shape4::new(1, 3, h, w),
            std::slice::from_raw_parts(rgb, 3 * h * w).to_vec(),
        ) {
            Ok(t) => t,
            Err(e) => {
                set_error(e.to_string());
                return status_of(&e);
            }
        };
        let guide_t = if uses_guide {
            match Tensor4::from_vec(
                Shape4::new(1, 1, h, w),
                std::slice::from_raw_parts(guide, h * w).to_vec(),
            ) {
                Ok(t) => Some(t),
                Err(e) => {
                    set_error(e.to_string());
                    return status_of(&e);
                }
            }
        } else {
            None
        };
        match net.infer(&rgb_t, guide_t.as_ref()) {
            Ok(outputs) => {
                let restored = outputs[0].map(|v| v.clamp(0.0, 1.0));
                if !restored.is_finite() {
                    set_error("inference produced non-finite values".into());
                    return NirfuseStatus::NumericalError;
                }
                std::slice::from_raw_parts_mut(out, 3 * h * w).copy_from_slice(restored.data());
                NirfuseStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nirfuse::checkpoint::save_checkpoint;
    use nirfuse::net::{net_init, NetConfig};
    use std::ffi::CString;

    fn checkpoint_path(dir: &tempfile::TempDir) -> CString {
        let cfg = NetConfig {
            scales: 2,
            base_channels: 4,
            blocks_per_scale: 1,
            sfm_kernel_size: 3,
            seed: 5,
            ..NetConfig::default()
        };
        let net = net_init(&cfg).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &net, None).unwrap();
        CString::new(path.to_str().unwrap()).unwrap()
    }

    #[test]
    fn load_denoise_free_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cpath = checkpoint_path(&dir);
        let mut model: *mut NirfuseModel = std::ptr::null_mut();
        unsafe {
            assert!(nirfuse_model_load(cpath.as_ptr(), &mut model) == NirfuseStatus::Ok);
            assert_eq!(nirfuse_model_spatial_multiple(model), 2);
            assert_eq!(nirfuse_model_uses_guide(model), 1);
            let (h, w) = (8usize, 8usize);
            let rgb = vec![0.5f64; 3 * h * w];
            let guide = vec![0.5f64; h * w];
            let mut out = vec![0.0f64; 3 * h * w];
            let s = nirfuse_denoise(model, rgb.as_ptr(), guide.as_ptr(), h, w, out.as_mut_ptr());
            assert!(s == NirfuseStatus::Ok);
            assert!(out.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
            nirfuse_model_free(model);
        }
    }

    #[test]
    fn null_and_bad_inputs_are_reported() {
        let mut model: *mut NirfuseModel = std::ptr::null_mut();
        unsafe {
            assert!(
                nirfuse_model_load(std::ptr::null(), &mut model) == NirfuseStatus::NullPointer
            );
            let bogus = CString::new("/no/such/checkpoint.ckpt").unwrap();
            assert!(nirfuse_model_load(bogus.as_ptr(), &mut model) == NirfuseStatus::DataError);
            assert!(!nirfuse_last_error().is_null());

            let dir = tempfile::tempdir().unwrap();
            let cpath = checkpoint_path(&dir);
            assert!(nirfuse_model_load(cpath.as_ptr(), &mut model) == NirfuseStatus::Ok);
            // 7x7 violates the spatial multiple of 2
            let rgb = vec![0.5f64; 3 * 49];
            let guide = vec![0.5f64; 49];
            let mut out = vec![0.0f64; 3 * 49];
            let s = nirfuse_denoise(model, rgb.as_ptr(), guide.as_ptr(), 7, 7, out.as_mut_ptr());
            assert!(s == NirfuseStatus::InvalidArgument);
            // guide required but missing
            let s = nirfuse_denoise(model, rgb.as_ptr(), std::ptr::null(), 8, 8, out.as_mut_ptr());
            assert!(s == NirfuseStatus::NullPointer);
            nirfuse_model_free(model);
            nirfuse_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(nirfuse_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }
}
