//! C ABI for loading trained models and retrieval indexes, computing
//! descriptors, querying, and scoring poses.
//!
//! Every fallible function returns a [`ClocStatus`]; on failure the
//! message is available from [`cloc_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cloc::evaluation::pose_error;
use cloc::model::Model;
use cloc::numerics::{ops, Tensor};
use cloc::retrieval::{final_descriptor, read_index, DescriptorIndex, RetrievalOptions};
use cloc::synthworld::{CameraPose, ConditionId};
use cloc::training::load_checkpoint;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptFile = 4,
    EmptyIndex = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// A trained network together with its condition routing.
pub struct ClocModel {
    model: Model,
}

/// A retrieval index and the descriptor options it was built with.
pub struct ClocIndex {
    index: DescriptorIndex,
    options: RetrievalOptions,
}

/// Camera-to-world pose: unit quaternion `[w, x, y, z]` and camera centre.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClocPose {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClocPoseError {
    pub translation_m: f64,
    pub rotation_deg: f64,
}

/// One ranked index entry.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClocMatch {
    pub image_id: u32,
    pub similarity: f64,
    pub pose: ClocPose,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("interior NULs removed"));
}

struct Failure(ClocStatus, String);

impl Failure {
    fn new(status: ClocStatus, msg: impl std::fmt::Display) -> Self {
        Self(status, msg.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ClocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ClocStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ClocStatus::Internal
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(ClocStatus::NullPointer, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    non_null(path, "path")?;
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure::new(ClocStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn existing_file(path: PathBuf) -> Result<PathBuf, Failure> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Failure::new(ClocStatus::Io, format!("{}: no such file", path.display())))
    }
}

fn to_pose(p: &ClocPose) -> CameraPose {
    CameraPose {
        rotation: p.rotation,
        translation: p.translation,
    }
}

fn from_pose(p: &CameraPose) -> ClocPose {
    ClocPose {
        rotation: p.rotation,
        translation: p.translation,
    }
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloc_model_load(path: *const c_char, out: *mut *mut ClocModel) -> ClocStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = existing_file(path_arg(path)?)?;
        let ckpt = load_checkpoint(&path).map_err(|e| Failure::new(ClocStatus::CorruptFile, e))?;
        let model = Model::new(ckpt.network, ckpt.params, &ckpt.condition_names)
            .map_err(|e| Failure::new(ClocStatus::CorruptFile, e))?;
        *out = Box::into_raw(Box::new(ClocModel { model }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from [`cloc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cloc_model_free(model: *mut ClocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Descriptor length produced by `model`.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cloc_model_descriptor_dim(model: *const ClocModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.descriptor_dim())
}

/// Number of declared conditions; condition ids run from 0 to this − 1.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cloc_model_condition_count(model: *const ClocModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.condition_names().len())
}

unsafe fn image_arg(pixels: *const f64, height: usize, width: usize) -> Result<Tensor, Failure> {
    non_null(pixels, "pixels")?;
    let n = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| Failure::new(ClocStatus::InvalidArgument, "image size overflows"))?;
    let data = std::slice::from_raw_parts(pixels, n).to_vec();
    Tensor::new(vec![height, width, 3], data).map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))
}

/// Single-scale descriptor of an `height×width×3` row-major image captured
/// under `condition`, written to `out` (length [`cloc_model_descriptor_dim`]).
///
/// # Safety
/// `pixels` must point to `height·width·3` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn cloc_model_describe(
    model: *const ClocModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    condition: u32,
    out: *mut f64,
    out_len: usize,
) -> ClocStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let m = &(*model).model;
        if out_len < m.config.descriptor_dim() {
            return Err(Failure::new(
                ClocStatus::BufferTooSmall,
                format!("need {} values, got {out_len}", m.config.descriptor_dim()),
            ));
        }
        let image = image_arg(pixels, height, width)?;
        let d = m
            .forward_descriptor(&image, ConditionId(condition as usize))
            .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        std::slice::from_raw_parts_mut(out, d.dim()).copy_from_slice(d.as_slice());
        Ok(())
    })
}

/// Loads an index file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn cloc_index_load(path: *const c_char, out: *mut *mut ClocIndex) -> ClocStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = existing_file(path_arg(path)?)?;
        let (index, options, _) = read_index(&path).map_err(|e| Failure::new(ClocStatus::CorruptFile, e))?;
        *out = Box::into_raw(Box::new(ClocIndex { index, options }));
        Ok(())
    })
}

/// Releases an index; NULL is ignored.
///
/// # Safety
/// `index` must come from [`cloc_index_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cloc_index_free(index: *mut ClocIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// # Safety
/// `index` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn cloc_index_len(index: *const ClocIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

fn write_matches(
    matches: &[cloc::retrieval::Match],
    out: *mut ClocMatch,
    capacity: usize,
    written: *mut usize,
) -> Result<(), Failure> {
    let n = matches.len().min(capacity);
    // SAFETY: the caller provides room for `capacity` matches.
    let slots = unsafe { std::slice::from_raw_parts_mut(out, n) };
    for (slot, m) in slots.iter_mut().zip(matches) {
        *slot = ClocMatch {
            image_id: m.image_id,
            similarity: m.similarity,
            pose: from_pose(&m.pose),
        };
    }
    unsafe { *written = n };
    Ok(())
}

/// Top-`k` entries for an already final (whitened if the index is)
/// descriptor. Writes at most `k` matches to `out` and their count to
/// `written`.
///
/// # Safety
/// `descriptor` must point to `dim` doubles and `out` to room for `k`
/// matches.
#[no_mangle]
pub unsafe extern "C" fn cloc_index_query(
    index: *const ClocIndex,
    descriptor: *const f64,
    dim: usize,
    k: usize,
    out: *mut ClocMatch,
    written: *mut usize,
) -> ClocStatus {
    guard(|| {
        non_null(index, "index")?;
        non_null(descriptor, "descriptor")?;
        non_null(out, "out")?;
        non_null(written, "written")?;
        let idx = &(*index).index;
        if idx.is_empty() {
            return Err(Failure::new(ClocStatus::EmptyIndex, "the index is empty"));
        }
        let d = std::slice::from_raw_parts(descriptor, dim);
        let matches = idx
            .query_topk(d, k)
            .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        write_matches(&matches, out, k, written)
    })
}

/// Describes an image with the index's extraction options (multi-scale,
/// whitening) and returns its top-`k` entries; `out[0].pose` is the
/// localization estimate.
///
/// # Safety
/// Pointer arguments as in [`cloc_model_describe`] and
/// [`cloc_index_query`].
#[no_mangle]
pub unsafe extern "C" fn cloc_localize(
    index: *const ClocIndex,
    model: *const ClocModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    condition: u32,
    k: usize,
    out: *mut ClocMatch,
    written: *mut usize,
) -> ClocStatus {
    guard(|| {
        non_null(index, "index")?;
        non_null(model, "model")?;
        non_null(out, "out")?;
        non_null(written, "written")?;
        let ClocIndex { index, options } = &*index;
        if index.is_empty() {
            return Err(Failure::new(ClocStatus::EmptyIndex, "the index is empty"));
        }
        let image = image_arg(pixels, height, width)?;
        let d = final_descriptor(
            &(*model).model,
            &image,
            ConditionId(condition as usize),
            options,
            index.whitening(),
        )
        .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        let matches = index
            .query_topk(d.as_slice(), k)
            .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        write_matches(&matches, out, k, written)
    })
}

/// Translation and geodesic rotation error between two poses.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cloc_pose_error(
    estimated: *const ClocPose,
    ground_truth: *const ClocPose,
    out: *mut ClocPoseError,
) -> ClocStatus {
    guard(|| {
        non_null(estimated, "estimated")?;
        non_null(ground_truth, "ground_truth")?;
        non_null(out, "out")?;
        let e = pose_error(&to_pose(&*estimated), &to_pose(&*ground_truth))
            .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        *out = ClocPoseError {
            translation_m: e.translation_m,
            rotation_deg: e.rotation_deg,
        };
        Ok(())
    })
}

/// Generalized-mean pooling of a `positions×channels` row-major array
/// into `channels` values.
///
/// # Safety
/// `x` must point to `positions·channels` doubles, `out` to `channels`.
#[no_mangle]
pub unsafe extern "C" fn cloc_gem(x: *const f64, positions: usize, channels: usize, p: f64, out: *mut f64) -> ClocStatus {
    guard(|| {
        non_null(x, "x")?;
        non_null(out, "out")?;
        let n = positions
            .checked_mul(channels)
            .ok_or_else(|| Failure::new(ClocStatus::InvalidArgument, "size overflows"))?;
        let t = Tensor::new(vec![positions, channels], std::slice::from_raw_parts(x, n).to_vec())
            .map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        let d = ops::gem_forward(&t, p).map_err(|e| Failure::new(ClocStatus::InvalidArgument, e))?;
        std::slice::from_raw_parts_mut(out, channels).copy_from_slice(d.data());
        Ok(())
    })
}
