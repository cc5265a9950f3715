use std::ffi::{CStr, CString};
use std::ptr;

use cavla::harness::save_checkpoint;
use cavla::lang::Vocabulary;
use cavla::policy::{Ablation, ModelConfig, Policy, PolicyParams};
use cavla_ffi::*;

fn last_error() -> String {
    let p = cavla_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn fresh_checkpoint(dir: &std::path::Path) -> CString {
    let vocab = Vocabulary::build();
    let params = PolicyParams::new(&ModelConfig::default(), vocab.len()).unwrap();
    let policy = Policy::new(params, vocab, Ablation::NONE).unwrap();
    let ckpt = dir.join("checkpoint");
    save_checkpoint(&ckpt, &policy, &["ball_basket".to_string()], 0, "none").unwrap();
    CString::new(ckpt.to_str().unwrap()).unwrap()
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(cavla_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn expert_episode_succeeds_without_a_policy() {
    let task = CString::new("ball_basket").unwrap();
    let (mut ok, mut steps) = (false, 0usize);
    let s = unsafe { cavla_run_episode(ptr::null(), task.as_ptr(), 3, 400, &mut ok, &mut steps) };
    assert_eq!(s, CavlaStatus::Ok);
    assert!(ok);
    assert!(steps > 0 && steps <= 400);
    assert!(cavla_last_error().is_null());
}

#[test]
fn unknown_task_sets_code_and_message() {
    let task = CString::new("juggle_knives").unwrap();
    let (mut ok, mut steps) = (false, 0usize);
    let s = unsafe { cavla_run_episode(ptr::null(), task.as_ptr(), 0, 10, &mut ok, &mut steps) };
    assert_eq!(s, CavlaStatus::UnknownTask);
    assert!(last_error().contains("juggle_knives"));
}

#[test]
fn null_arguments_are_rejected() {
    let mut out = ptr::null_mut();
    assert_eq!(
        unsafe { cavla_policy_load(ptr::null(), &mut out) },
        CavlaStatus::NullPointer
    );
    assert!(out.is_null());
    assert!(last_error().contains("dir"));
    let task = CString::new("ball_basket").unwrap();
    let mut steps = 0usize;
    let s = unsafe { cavla_run_episode(ptr::null(), task.as_ptr(), 0, 10, ptr::null_mut(), &mut steps) };
    assert_eq!(s, CavlaStatus::NullPointer);
    unsafe {
        cavla_policy_free(ptr::null_mut());
        cavla_episode_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bad = [0xffu8, 0xfe, 0];
    let (mut ok, mut steps) = (false, 0usize);
    let s = unsafe { cavla_run_episode(ptr::null(), bad.as_ptr().cast(), 0, 10, &mut ok, &mut steps) };
    assert_eq!(s, CavlaStatus::InvalidUtf8);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    let s = unsafe { cavla_policy_load(path.as_ptr(), &mut out) };
    assert_eq!(s, CavlaStatus::Io);
    assert!(out.is_null());
}

#[test]
fn decompose_writes_the_rendered_plan() {
    let instr = CString::new("move the orange into the basket").unwrap();
    let mut len = 0usize;
    let s = unsafe { cavla_decompose(instr.as_ptr(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(s, CavlaStatus::BufferTooSmall);
    let mut buf = vec![0 as std::ffi::c_char; len + 1];
    let s = unsafe { cavla_decompose(instr.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut len) };
    assert_eq!(s, CavlaStatus::Ok);
    let text = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap();
    assert_eq!(text.len(), len);
    assert_eq!(
        text,
        "move the orange into the basket. Steps: locate orange → grasp at center → move over basket → release"
    );
}

#[test]
fn policy_episode_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = fresh_checkpoint(dir.path());
    let mut policy = ptr::null_mut();
    assert_eq!(
        unsafe { cavla_policy_load(path.as_ptr(), &mut policy) },
        CavlaStatus::Ok
    );
    let mut k = 0usize;
    assert_eq!(unsafe { cavla_policy_chunk_len(policy, &mut k) }, CavlaStatus::Ok);
    assert_eq!(k, ModelConfig::default().chunk);

    let task = CString::new("ball_basket").unwrap();
    let mut ep = ptr::null_mut();
    assert_eq!(
        unsafe { cavla_episode_new(policy, task.as_ptr(), 11, &mut ep) },
        CavlaStatus::Ok
    );
    // The episode keeps its own reference to the parameters.
    unsafe { cavla_policy_free(policy) };

    let mut need = 0usize;
    let mut small = [0f32; 3];
    let s = unsafe { cavla_episode_query(ep, small.as_mut_ptr(), small.len(), &mut need) };
    assert_eq!(s, CavlaStatus::BufferTooSmall);
    assert_eq!(need, k * CAVLA_ACTION_DIM);

    let mut actions = vec![0f32; need];
    let s = unsafe { cavla_episode_query(ep, actions.as_mut_ptr(), actions.len(), &mut need) };
    assert_eq!(s, CavlaStatus::Ok);
    assert!(actions.iter().all(|v| v.is_finite()));
    for a in actions.chunks(CAVLA_ACTION_DIM) {
        assert!((0.0..=1.0).contains(&a[CAVLA_ACTION_DIM - 1]));
        let mut ok = true;
        assert_eq!(unsafe { cavla_episode_step(ep, a.as_ptr(), &mut ok) }, CavlaStatus::Ok);
    }
    let mut steps = 0usize;
    assert_eq!(unsafe { cavla_episode_steps(ep, &mut steps) }, CavlaStatus::Ok);
    assert_eq!(steps, k);
    unsafe { cavla_episode_free(ep) };
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cavla.h")).unwrap();
    for name in [
        "cavla_last_error",
        "cavla_version",
        "cavla_policy_load",
        "cavla_policy_free",
        "cavla_episode_new",
        "cavla_episode_query",
        "cavla_episode_step",
        "cavla_run_episode",
        "cavla_decompose",
        "typedef struct CavlaPolicy CavlaPolicy",
        "CAVLA_STATUS_BUFFER_TOO_SMALL",
        "CAVLA_ACTION_DIM",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
