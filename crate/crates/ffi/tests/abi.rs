use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use stent_tracker::simulate::SimConfig;
use stent_tracker::track::PipelineConfig;
use stent_tracker::train::{generate_corpus, train_models, TrainConfig};
use stent_tracker_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = st_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn trained_models_dir(dir: &Path) {
    let seqs = generate_corpus(&SimConfig::default(), 4, 21).unwrap();
    let mut cfg = TrainConfig::default();
    cfg.classifier.epochs = 20;
    cfg.gcn.epochs = 20;
    let out = train_models(&seqs, &PipelineConfig::default(), &cfg).unwrap();
    stent_tracker::io::save_models(dir, &out.models).unwrap();
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(st_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn simulate_track_evaluate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let models_dir = tmp.path().join("models");
    trained_models_dir(&models_dir);

    unsafe {
        let mut seq: *mut StSequence = ptr::null_mut();
        let cfg = cstr("frames=8\n");
        assert_eq!(st_sequence_simulate(cfg.as_ptr(), 3, &mut seq), StStatus::Ok);
        let mut n = 0usize;
        assert_eq!(st_sequence_frame_count(seq, &mut n), StStatus::Ok);
        assert_eq!(n, 8);

        // saved and reloaded sequences track identically
        let seq_dir = cstr(tmp.path().join("seq").to_str().unwrap());
        assert_eq!(st_sequence_save_dir(seq, seq_dir.as_ptr()), StStatus::Ok);
        let mut reloaded: *mut StSequence = ptr::null_mut();
        assert_eq!(st_sequence_load_dir(seq_dir.as_ptr(), &mut reloaded), StStatus::Ok);

        let mut models: *mut StModels = ptr::null_mut();
        let mdir = cstr(models_dir.to_str().unwrap());
        assert_eq!(st_models_load(mdir.as_ptr(), &mut models), StStatus::Ok);

        let mut a: *mut StTrack = ptr::null_mut();
        let mut b: *mut StTrack = ptr::null_mut();
        assert_eq!(st_track_sequence(seq, models, ptr::null(), &mut a), StStatus::Ok);
        let tcfg = cstr("# defaults spelled out\ntrack.threshold=0.6\n");
        assert_eq!(st_track_sequence(reloaded, models, tcfg.as_ptr(), &mut b), StStatus::Ok);
        let mut len = 0usize;
        assert_eq!(st_track_len(a, &mut len), StStatus::Ok);
        assert_eq!(len, 8);
        for t in 0..len {
            let (mut sa, mut sb) = (StSelection::default(), StSelection::default());
            assert_eq!(st_track_get(a, t, &mut sa), StStatus::Ok);
            assert_eq!(st_track_get(b, t, &mut sb), StStatus::Ok);
            assert_eq!(sa, sb);
            if sa.present == 1 {
                assert!(sa.prob >= 0.6 && sa.prob <= 1.0);
            }
        }
        let mut sel = StSelection::default();
        assert_eq!(st_track_get(a, len, &mut sel), StStatus::OutOfRange);
        assert!(last_error().contains("past track length"));

        let mut r = StEvalResult::default();
        assert_eq!(st_evaluate(a, seq, 5.0, &mut r), StStatus::Ok);
        assert_eq!(r.tp + r.fn_ + r.tn, 8);
        assert!((0.0..=1.0).contains(&r.f1));
        assert!(st_last_error_message().is_null());

        st_track_free(a);
        st_track_free(b);
        st_models_free(models);
        st_sequence_free(seq);
        st_sequence_free(reloaded);
    }
}

#[test]
fn errors_map_to_status_codes() {
    unsafe {
        let mut seq: *mut StSequence = ptr::null_mut();
        let bad = cstr("bogus=1\n");
        assert_eq!(st_sequence_simulate(bad.as_ptr(), 1, &mut seq), StStatus::InvalidConfig);
        assert!(last_error().contains("bogus"));
        assert!(seq.is_null());

        let neg = cstr("frames=0\n");
        assert_eq!(st_sequence_simulate(neg.as_ptr(), 1, &mut seq), StStatus::InvalidConfig);

        assert_eq!(st_sequence_simulate(ptr::null(), 1, ptr::null_mut()), StStatus::NullPointer);
        let mut n = 0usize;
        assert_eq!(st_sequence_frame_count(ptr::null(), &mut n), StStatus::NullPointer);

        let missing = cstr("/nonexistent/stent-tracker-models");
        let mut models: *mut StModels = ptr::null_mut();
        assert_eq!(st_models_load(missing.as_ptr(), &mut models), StStatus::Io);

        let bytes = [0xffu8, 0x00];
        let mut s: *mut StSequence = ptr::null_mut();
        assert_eq!(st_sequence_load_dir(bytes.as_ptr().cast(), &mut s), StStatus::InvalidUtf8);

        // freeing NULL is a no-op
        st_sequence_free(ptr::null_mut());
        st_models_free(ptr::null_mut());
        st_track_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/stent_tracker.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "st_version",
        "st_last_error_message",
        "st_sequence_simulate",
        "st_sequence_load_dir",
        "st_sequence_frame_count",
        "st_sequence_free",
        "st_models_load",
        "st_track_sequence",
        "st_track_get",
        "st_evaluate",
        "typedef struct StSequence StSequence",
        "ST_STATUS_PANIC = 10",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    // a C compiler is optional in the build environment
    if let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    {
        assert!(status.success(), "header does not compile as C");
    }
}
