//! C interface over opaque handles.
//!
//! Every fallible function returns an [`EnerfStatus`]; on failure the message
//! is kept per thread and can be read with [`enerf_last_error`]. Handles are
//! released with their matching `*_free` function, which accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use enerf::events::{simulate, ContrastThresholds, EventStream};
use enerf::metrics::psnr;
use enerf::model::Model;
use enerf::pose_net::PoseSource;
use enerf::raster::Image;
use enerf::rendering::render_log_radiance;
use enerf::scene::AnalyticScene;
use enerf::trajectory::{generate_orbit, SpeedProfile, Trajectory};
use enerf::{checkpoint, presets, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnerfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Decode = 5,
    Numeric = 6,
    InvalidState = 7,
    Unsupported = 8,
    Panic = 9,
}

pub struct EnerfScene(AnalyticScene);
pub struct EnerfTrajectory(Trajectory);
pub struct EnerfEvents(EventStream);
pub struct EnerfModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EnerfStatus {
    match e {
        Error::Range(_) => EnerfStatus::OutOfRange,
        Error::State(_) => EnerfStatus::InvalidState,
        Error::Argument(_) | Error::Domain(_) | Error::Degenerate(_) => EnerfStatus::InvalidArgument,
        Error::Numeric(_) => EnerfStatus::Numeric,
        Error::Capability(_) => EnerfStatus::Unsupported,
        Error::Decode { .. } | Error::Parse { .. } | Error::Json(_) | Error::Image(_) => EnerfStatus::Decode,
        Error::Io(_) => EnerfStatus::Io,
    }
}

enum Fail {
    Null,
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

/// Runs `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> EnerfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EnerfStatus::Ok,
        Ok(Err(Fail::Null)) => {
            set_error("null pointer argument".into());
            EnerfStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            let s = status_of(&e);
            set_error(e.to_string());
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            EnerfStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail::Null
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null());
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::Argument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null());
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free_handle<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn enerf_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// The built-in toy scene.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_scene_toy(out: *mut *mut EnerfScene) -> EnerfStatus {
    guard(|| out_handle(out, EnerfScene(presets::toy_scene())))
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_scene_load(path: *const c_char, out: *mut *mut EnerfScene) -> EnerfStatus {
    guard(|| out_handle(out, EnerfScene(AnalyticScene::load(&path_arg(path)?)?)))
}

/// # Safety
/// `scene` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn enerf_scene_free(scene: *mut EnerfScene) {
    free_handle(scene)
}

/// Circular orbit; `oscillating` selects the variable-speed profile.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_trajectory_orbit(
    radius: f64,
    duration: f64,
    rate: f64,
    oscillating: bool,
    out: *mut *mut EnerfTrajectory,
) -> EnerfStatus {
    guard(|| {
        let profile = if oscillating { SpeedProfile::oscillating() } else { SpeedProfile::uniform() };
        out_handle(out, EnerfTrajectory(generate_orbit(&profile, radius, duration, rate)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_trajectory_load(path: *const c_char, out: *mut *mut EnerfTrajectory) -> EnerfStatus {
    guard(|| out_handle(out, EnerfTrajectory(Trajectory::load(&path_arg(path)?)?)))
}

/// # Safety
/// `traj` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn enerf_trajectory_save(traj: *const EnerfTrajectory, path: *const c_char) -> EnerfStatus {
    guard(|| Ok(traj.as_ref().ok_or_else(null)?.0.save(&path_arg(path)?)?))
}

/// Number of poses, or 0 for null.
///
/// # Safety
/// `traj` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn enerf_trajectory_len(traj: *const EnerfTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.0.len())
}

/// # Safety
/// `traj` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn enerf_trajectory_free(traj: *mut EnerfTrajectory) {
    free_handle(traj)
}

/// Simulates events on the toy camera.
///
/// # Safety
/// `scene` and `traj` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_simulate(
    scene: *const EnerfScene,
    traj: *const EnerfTrajectory,
    c_pos: f64,
    c_neg: f64,
    refractory: f64,
    dt: f64,
    out: *mut *mut EnerfEvents,
) -> EnerfStatus {
    guard(|| {
        let scene = scene.as_ref().ok_or_else(null)?;
        let traj = traj.as_ref().ok_or_else(null)?;
        let th = ContrastThresholds::new(c_pos, c_neg)?;
        let s = simulate(&scene.0, &presets::toy_camera(), &traj.0, &th, refractory, dt)?;
        out_handle(out, EnerfEvents(s))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_load(path: *const c_char, out: *mut *mut EnerfEvents) -> EnerfStatus {
    guard(|| out_handle(out, EnerfEvents(EventStream::load(&path_arg(path)?)?)))
}

/// # Safety
/// `events` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_save(events: *const EnerfEvents, path: *const c_char) -> EnerfStatus {
    guard(|| Ok(events.as_ref().ok_or_else(null)?.0.save(&path_arg(path)?)?))
}

/// Number of events, or 0 for null.
///
/// # Safety
/// `events` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_len(events: *const EnerfEvents) -> usize {
    events.as_ref().map_or(0, |e| e.0.len())
}

/// Sum of signed thresholds over the events of pixel `(x, y)` in `(t_a, t_b]`.
///
/// # Safety
/// `events` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_integrate(
    events: *const EnerfEvents,
    x: u32,
    y: u32,
    t_a: f64,
    t_b: f64,
    out: *mut f64,
) -> EnerfStatus {
    guard(|| {
        let e = events.as_ref().ok_or_else(null)?;
        if x as usize >= e.0.width || y as usize >= e.0.height {
            return Err(Error::Range(format!("pixel ({x}, {y}) outside the sensor")).into());
        }
        *out.as_mut().ok_or_else(null)? = e.0.integrate(x as usize, y as usize, t_a, t_b);
        Ok(())
    })
}

/// # Safety
/// `events` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn enerf_events_free(events: *mut EnerfEvents) {
    free_handle(events)
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_load(path: *const c_char, out: *mut *mut EnerfModel) -> EnerfStatus {
    guard(|| out_handle(out, EnerfModel(checkpoint::load(&path_arg(path)?)?.0)))
}

/// Rendered log-radiance of pixel `(x, y)` at time `t` along `poses`.
///
/// # Safety
/// `model` and `poses` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_render_pixel(
    model: *const EnerfModel,
    poses: *const EnerfTrajectory,
    x: u32,
    y: u32,
    t: f64,
    seed: u64,
    out: *mut f64,
) -> EnerfStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(null)?.0;
        let traj = &poses.as_ref().ok_or_else(null)?.0;
        let source = match &m.pose_net {
            Some(net) => PoseSource::Corrected { net, prior: traj },
            None => PoseSource::Interpolated(traj),
        };
        let v = render_log_radiance(m, &source, x as usize, y as usize, t, seed)?;
        *out.as_mut().ok_or_else(null)? = v;
        Ok(())
    })
}

/// Current `(positive, negative)` contrast thresholds.
///
/// # Safety
/// `model` must be a live handle; `pos` and `neg` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_thresholds(model: *const EnerfModel, pos: *mut f64, neg: *mut f64) -> EnerfStatus {
    guard(|| {
        let th = model.as_ref().ok_or_else(null)?.0.thresholds();
        *pos.as_mut().ok_or_else(null)? = th.positive;
        *neg.as_mut().ok_or_else(null)? = th.negative;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn enerf_model_free(model: *mut EnerfModel) {
    free_handle(model)
}

/// PSNR in dB of two equally sized buffers of `len` values; 99 when identical.
///
/// # Safety
/// `a` and `b` must point to `len` readable values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn enerf_psnr(a: *const f64, b: *const f64, len: usize, peak: f64, out: *mut f64) -> EnerfStatus {
    guard(|| {
        if a.is_null() || b.is_null() {
            return Err(null());
        }
        let ia = Image::new(len, 1, 1, std::slice::from_raw_parts(a, len).to_vec());
        let ib = Image::new(len, 1, 1, std::slice::from_raw_parts(b, len).to_vec());
        *out.as_mut().ok_or_else(null)? = psnr(&ia, &ib, peak)?.db;
        Ok(())
    })
}
