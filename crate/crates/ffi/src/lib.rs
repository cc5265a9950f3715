//! C ABI over the `cavla` library.
//!
//! Every fallible function returns a [`CavlaStatus`]; on failure the message
//! is available from [`cavla_last_error`] on the same thread. Handles are
//! opaque, created by `*_new`/`*_load` and released by the matching `*_free`.
//! No function unwinds across the boundary: panics become
//! [`CavlaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use cavla::harness::eval::{run_episode, ExpertController, PolicyController};
use cavla::harness::load_checkpoint;
use cavla::lang::{decompose_rule_based, Instruction};
use cavla::policy::{EpisodeContext, MaskSource, Policy, ACTION_DIM};
use cavla::roi::DetectorNoiseModel;
use cavla::sim::{observe, task_by_id, CameraRig, World};
use cavla::Error;

/// Width of one action: xyz deltas, roll/pitch/yaw deltas, gripper command.
pub const CAVLA_ACTION_DIM: usize = 7;
const _: () = assert!(CAVLA_ACTION_DIM == ACTION_DIM);

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CavlaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    UnknownTask = 4,
    Io = 5,
    Checkpoint = 6,
    Config = 7,
    BufferTooSmall = 8,
    Numeric = 9,
    Internal = 10,
    Panic = 11,
}

/// A loaded checkpoint.
pub struct CavlaPolicy {
    policy: Arc<Policy>,
}

/// One closed-loop episode driven by a policy.
pub struct CavlaEpisode {
    policy: Arc<Policy>,
    world: World,
    rig: CameraRig,
    ctx: EpisodeContext,
    steps: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|e| {
        let mut bytes = e.into_vec();
        bytes.retain(|&b| b != 0);
        CString::new(bytes).expect("NUL bytes removed")
    });
    LAST_ERROR.with(|s| *s.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|s| *s.borrow_mut() = None);
}

fn status_of(e: &Error) -> CavlaStatus {
    match e {
        Error::UnknownTask(_) => CavlaStatus::UnknownTask,
        Error::Io { .. } => CavlaStatus::Io,
        Error::Checkpoint(_) | Error::Format(_) | Error::Json(_) => CavlaStatus::Checkpoint,
        Error::Config(_) => CavlaStatus::Config,
        Error::NonFinite(_) | Error::Diverged { .. } => CavlaStatus::Numeric,
        Error::InvalidArgument(_)
        | Error::ShapeMismatch { .. }
        | Error::InvalidShape { .. }
        | Error::ZeroExtent { .. }
        | Error::NonScalarLoss(_) => CavlaStatus::InvalidArgument,
        _ => CavlaStatus::Internal,
    }
}

/// Failure carried out of a guarded body.
struct Fail(CavlaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> CavlaStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CavlaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CavlaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(CavlaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string valid for the call.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    non_null(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CavlaStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next `cavla_*` call on the same thread.
#[no_mangle]
pub extern "C" fn cavla_last_error() -> *const c_char {
    LAST_ERROR.with(|s| s.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cavla_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a checkpoint directory into a new policy handle.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_policy_load(dir: *const c_char, out: *mut *mut CavlaPolicy) -> CavlaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let (policy, _) = load_checkpoint(Path::new(dir))?;
        *out = Box::into_raw(Box::new(CavlaPolicy {
            policy: Arc::new(policy),
        }));
        Ok(())
    })
}

/// Release a policy handle. Episodes created from it stay valid.
///
/// # Safety
/// `p` is null or a handle from [`cavla_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cavla_policy_free(p: *mut CavlaPolicy) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Actions returned per query (the chunk length K).
///
/// # Safety
/// `p` is a live policy handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_policy_chunk_len(p: *const CavlaPolicy, out: *mut usize) -> CavlaStatus {
    guard(|| {
        non_null(p, "policy")?;
        non_null(out, "out")?;
        *out = (&*p).policy.params.config.chunk;
        Ok(())
    })
}

/// Reset a scene for `task_id` and prepare the episode context (plan,
/// tokens and ROI mask) once.
///
/// # Safety
/// `p` is a live policy handle; `task_id` is NUL-terminated; `out` is
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_episode_new(
    p: *const CavlaPolicy,
    task_id: *const c_char,
    seed: u64,
    out: *mut *mut CavlaEpisode,
) -> CavlaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(p, "policy")?;
        let task = task_by_id(str_arg(task_id, "task_id")?)?;
        let policy = Arc::clone(&(&*p).policy);
        let world = World::reset(&task, seed)?;
        let rig = CameraRig::new(policy.params.config.wrist);
        let (_, frame) = observe(&world, &rig);
        let noise = DetectorNoiseModel::none();
        let source = MaskSource::FirstFrame {
            world: &world,
            frame: &frame,
            noise: &noise,
        };
        let ctx = policy.prepare_episode(&Instruction::parse(&task.instruction), source, seed)?;
        *out = Box::into_raw(Box::new(CavlaEpisode {
            policy,
            world,
            rig,
            ctx,
            steps: 0,
        }));
        Ok(())
    })
}

/// # Safety
/// `e` is null or a handle from [`cavla_episode_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cavla_episode_free(e: *mut CavlaEpisode) {
    if !e.is_null() {
        drop(Box::from_raw(e));
    }
}

/// Query the policy on the current observation. Writes `K` actions of
/// [`CAVLA_ACTION_DIM`] floats, row-major, in world units. `out_len`
/// receives the number of floats required, also on
/// [`CavlaStatus::BufferTooSmall`].
///
/// # Safety
/// `e` is a live episode; `actions` points to `capacity` writable floats;
/// `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_episode_query(
    e: *mut CavlaEpisode,
    actions: *mut f32,
    capacity: usize,
    out_len: *mut usize,
) -> CavlaStatus {
    guard(|| {
        non_null(e, "episode")?;
        non_null(out_len, "out_len")?;
        let ep = &mut *e;
        let need = ep.policy.params.config.chunk * ACTION_DIM;
        *out_len = need;
        if capacity < need {
            return Err(Fail(
                CavlaStatus::BufferTooSmall,
                format!("need {need} floats, got {capacity}"),
            ));
        }
        non_null(actions, "actions")?;
        let (obs, _) = observe(&ep.world, &ep.rig);
        let chunk = ep.policy.rollout_step(&obs, &ep.ctx)?;
        let dst = std::slice::from_raw_parts_mut(actions, need);
        for (row, a) in dst.chunks_mut(ACTION_DIM).zip(&chunk.actions) {
            row.copy_from_slice(a);
        }
        Ok(())
    })
}

/// Apply one action and report whether the task is now solved.
///
/// # Safety
/// `e` is a live episode; `action` points to [`CAVLA_ACTION_DIM`] floats;
/// `out_success` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_episode_step(
    e: *mut CavlaEpisode,
    action: *const f32,
    out_success: *mut bool,
) -> CavlaStatus {
    guard(|| {
        non_null(e, "episode")?;
        non_null(action, "action")?;
        non_null(out_success, "out_success")?;
        let ep = &mut *e;
        let a: [f32; ACTION_DIM] = std::slice::from_raw_parts(action, ACTION_DIM)
            .try_into()
            .expect("length is ACTION_DIM");
        ep.world.step(&a);
        ep.steps += 1;
        *out_success = ep.world.check_success();
        Ok(())
    })
}

/// Actions applied so far.
///
/// # Safety
/// `e` is a live episode; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_episode_steps(e: *const CavlaEpisode, out: *mut usize) -> CavlaStatus {
    guard(|| {
        non_null(e, "episode")?;
        non_null(out, "out")?;
        *out = (&*e).steps;
        Ok(())
    })
}

/// Run a whole episode with the policy, or with the scripted expert when
/// `p` is null.
///
/// # Safety
/// `p` is null or a live policy handle; `task_id` is NUL-terminated;
/// `out_success` and `out_steps` are writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_run_episode(
    p: *const CavlaPolicy,
    task_id: *const c_char,
    seed: u64,
    max_steps: usize,
    out_success: *mut bool,
    out_steps: *mut usize,
) -> CavlaStatus {
    guard(|| {
        non_null(out_success, "out_success")?;
        non_null(out_steps, "out_steps")?;
        if max_steps == 0 {
            return Err(Fail(CavlaStatus::InvalidArgument, "max_steps must be positive".into()));
        }
        let task = task_by_id(str_arg(task_id, "task_id")?)?;
        let outcome = if p.is_null() {
            run_episode(&mut ExpertController, &task, seed, max_steps, false, None)?
        } else {
            let policy = &(&*p).policy;
            let mut c = PolicyController::new(policy, &task, DetectorNoiseModel::none());
            run_episode(&mut c, &task, seed, max_steps, policy.params.config.wrist, None)?
        };
        *out_success = outcome.success;
        *out_steps = outcome.steps;
        Ok(())
    })
}

/// Rule-based chain-of-thought plan for an instruction, rendered as
/// `"instruction. Steps: s1 → s2 → …"`. Writes a NUL-terminated UTF-8 string
/// into `buf`; `out_len` receives the byte length excluding the NUL, also on
/// [`CavlaStatus::BufferTooSmall`].
///
/// # Safety
/// `instruction` is NUL-terminated; `buf` points to `capacity` writable
/// bytes; `out_len` is writable.
#[no_mangle]
pub unsafe extern "C" fn cavla_decompose(
    instruction: *const c_char,
    buf: *mut c_char,
    capacity: usize,
    out_len: *mut usize,
) -> CavlaStatus {
    guard(|| {
        non_null(out_len, "out_len")?;
        let plan = decompose_rule_based(&Instruction::parse(str_arg(instruction, "instruction")?));
        let bytes = plan.rendered.as_bytes();
        *out_len = bytes.len();
        if capacity <= bytes.len() {
            return Err(Fail(
                CavlaStatus::BufferTooSmall,
                format!("need {} bytes, got {capacity}", bytes.len() + 1),
            ));
        }
        non_null(buf, "buf")?;
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), bytes.len());
        *buf.add(bytes.len()) = 0;
        Ok(())
    })
}
