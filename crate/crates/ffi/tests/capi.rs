use std::ffi::{c_char, CString};
use std::ptr;

use enerf_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { enerf_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn simulate_save_load_and_integrate() {
    unsafe {
        let mut scene = ptr::null_mut();
        assert_eq!(enerf_scene_toy(&mut scene), EnerfStatus::Ok);
        let mut traj = ptr::null_mut();
        assert_eq!(enerf_trajectory_orbit(4.0, 0.1, 250.0, false, &mut traj), EnerfStatus::Ok);
        assert_eq!(enerf_trajectory_len(traj), 26);
        let mut events = ptr::null_mut();
        assert_eq!(enerf_events_simulate(scene, traj, 0.25, 0.25, 0.0, 1e-3, &mut events), EnerfStatus::Ok);
        let n = enerf_events_len(events);
        assert!(n > 0);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("ev.bin").to_str().unwrap()).unwrap();
        assert_eq!(enerf_events_save(events, path.as_ptr()), EnerfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(enerf_events_load(path.as_ptr(), &mut back), EnerfStatus::Ok);
        assert_eq!(enerf_events_len(back), n);

        let mut sum = f64::NAN;
        assert_eq!(enerf_events_integrate(back, 10, 10, 0.0, 0.1, &mut sum), EnerfStatus::Ok);
        assert_eq!((sum / 0.25).fract(), 0.0);
        assert_eq!(enerf_events_integrate(back, 64, 0, 0.0, 0.1, &mut sum), EnerfStatus::OutOfRange);
        assert!(last_error().contains("outside"));

        enerf_events_free(back);
        enerf_events_free(events);
        enerf_trajectory_free(traj);
        enerf_scene_free(scene);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let missing = CString::new("/nonexistent/scene.json").unwrap();
        let mut scene = ptr::null_mut();
        assert_eq!(enerf_scene_load(missing.as_ptr(), &mut scene), EnerfStatus::Io);
        assert!(scene.is_null());
        assert!(!last_error().is_empty());
        assert_eq!(enerf_scene_toy(ptr::null_mut()), EnerfStatus::NullPointer);
        let mut traj = ptr::null_mut();
        assert_eq!(enerf_trajectory_orbit(-1.0, 1.0, 10.0, false, &mut traj), EnerfStatus::InvalidArgument);
        assert_eq!(enerf_trajectory_len(ptr::null()), 0);
        enerf_model_free(ptr::null_mut());
    }
}

#[test]
fn psnr_through_the_c_interface() {
    let a = [0.5; 16];
    let b = [0.6; 16];
    let mut out = 0.0;
    unsafe {
        assert_eq!(enerf_psnr(a.as_ptr(), b.as_ptr(), 16, 1.0, &mut out), EnerfStatus::Ok);
        assert!((out - 20.0).abs() < 1e-9);
        assert_eq!(enerf_psnr(a.as_ptr(), a.as_ptr(), 16, 1.0, &mut out), EnerfStatus::Ok);
        assert_eq!(out, 99.0);
        assert_eq!(enerf_psnr(a.as_ptr(), b.as_ptr(), 16, 0.0, &mut out), EnerfStatus::InvalidArgument);
    }
}

#[test]
fn model_checkpoint_round_trip() {
    use enerf::model::Model;
    use enerf::presets::{toy_camera, toy_model};
    let model = Model::new(toy_model(false), toy_camera(), None, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.ckpt");
    enerf::checkpoint::save(&model, 0, &file).unwrap();
    let path = CString::new(file.to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(enerf_model_load(path.as_ptr(), &mut m), EnerfStatus::Ok);
        let (mut p, mut n) = (0.0, 0.0);
        assert_eq!(enerf_model_thresholds(m, &mut p, &mut n), EnerfStatus::Ok);
        assert!((p - 0.25).abs() < 1e-12 && (n - 0.25).abs() < 1e-12);
        let mut traj = ptr::null_mut();
        assert_eq!(enerf_trajectory_orbit(4.0, 1.0, 50.0, false, &mut traj), EnerfStatus::Ok);
        let mut v = f64::NAN;
        assert_eq!(enerf_model_render_pixel(m, traj, 32, 32, 0.5, 0, &mut v), EnerfStatus::Ok);
        assert!(v.is_finite());
        assert_eq!(enerf_model_render_pixel(m, traj, 99, 0, 0.5, 0, &mut v), EnerfStatus::OutOfRange);
        enerf_trajectory_free(traj);
        enerf_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/enerf.h");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, format!("#include \"{header}\"\nint main(void) {{ EnerfScene *s = 0; return enerf_scene_toy(&s) == ENERF_STATUS_OK ? 0 : 1; }}\n")).unwrap();
    let status = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror"]).arg(&src).status();
    match status {
        Ok(s) => assert!(s.success(), "generated header does not compile"),
        Err(_) => eprintln!("no C compiler on PATH; skipped"),
    }
}
