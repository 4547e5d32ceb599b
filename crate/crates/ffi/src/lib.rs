//! C ABI over `mmad-core`.
//!
//! Every fallible function returns an [`MmadStatus`]; on failure the message
//! is available from [`mmad_last_error_message`] on the same thread. Objects
//! cross the boundary as opaque handles released by their `_free` function.
//! Boolean arrays are `uint8_t`, nonzero meaning true.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mmad_core::fusion::{self, DiscrepancyBundle, FusionConfig, Variant};
use mmad_core::metrics;
use mmad_core::numcore::{normalized_distance, AnomalyMap, DenseFeatureMap, SeededRng};
use mmad_core::pipeline::{self, ModelBundle, Sample};
use mmad_core::polyprep::{self, IsolationForestConfig, Point};
use mmad_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmadStatus {
    Ok = 0,
    NullArgument = 1,
    ContractViolation = 2,
    Diverged = 3,
    EmptyImage = 4,
    DegenerateLabels = 5,
    NoRegions = 6,
    FprUndefined = 7,
    NoNominalData = 8,
    ModalityUnavailable = 9,
    ProtocolViolation = 10,
    ParseError = 11,
    SchemaError = 12,
    InvalidConfig = 13,
    IoError = 14,
    InvalidUtf8 = 15,
    Panic = 16,
}

impl From<&Error> for MmadStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => MmadStatus::ContractViolation,
            Error::Diverged { .. } => MmadStatus::Diverged,
            Error::EmptyImage => MmadStatus::EmptyImage,
            Error::DegenerateLabels => MmadStatus::DegenerateLabels,
            Error::NoRegions => MmadStatus::NoRegions,
            Error::FprUndefined => MmadStatus::FprUndefined,
            Error::NoNominalData => MmadStatus::NoNominalData,
            Error::ModalityUnavailable(_) => MmadStatus::ModalityUnavailable,
            Error::ProtocolViolation(_) => MmadStatus::ProtocolViolation,
            Error::Parse { .. } => MmadStatus::ParseError,
            Error::Schema { .. } => MmadStatus::SchemaError,
            Error::Config(_) => MmadStatus::InvalidConfig,
            Error::Io(_) => MmadStatus::IoError,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MmadStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MmadStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> MmadStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MmadStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MmadStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(MmadStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, name: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn write<T>(p: *mut T, v: T, name: &str) -> FfiResult<()> {
    if p.is_null() {
        return Err(null(name));
    }
    p.write(v);
    Ok(())
}

fn area(h: usize, w: usize) -> FfiResult<usize> {
    h.checked_mul(w).ok_or_else(|| Failure(MmadStatus::ContractViolation, "grid size overflows".into()))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mmad_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmad_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---------------------------------------------------------------- handles

/// Dense `H x W x C` feature grid with a validity mask.
pub struct MmadFeatureMap(DenseFeatureMap);

/// `H x W` anomaly score grid.
pub struct MmadAnomalyMap(AnomalyMap);

/// Trained networks loaded from a checkpoint directory.
pub struct MmadModel(ModelBundle);

/// Copies `values` (row-major `H x W x C`) and `validity` (`H x W`, null for
/// all valid) into a new feature map.
///
/// # Safety
/// `values` must hold `h*w*c` doubles and `validity`, when non-null, `h*w`
/// bytes. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_feature_map_new(
    h: usize,
    w: usize,
    c: usize,
    values: *const f64,
    validity: *const u8,
    out: *mut *mut MmadFeatureMap,
) -> MmadStatus {
    guard(|| {
        let n = area(h, w)?;
        let vals = slice(values, n.saturating_mul(c), "values")?.to_vec();
        let valid = if validity.is_null() { vec![true; n] } else { slice(validity, n, "validity")?.iter().map(|&b| b != 0).collect() };
        let map = DenseFeatureMap::new(h, w, c, vals, valid)?;
        write(out, Box::into_raw(Box::new(MmadFeatureMap(map))), "out")
    })
}

/// # Safety
/// `map` must come from [`mmad_feature_map_new`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mmad_feature_map_free(map: *mut MmadFeatureMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Copies `scores` and `validity` (null for all valid) into a new map.
/// Scores at invalid pixels are forced to 0.
///
/// # Safety
/// `scores` must hold `h*w` doubles and `validity`, when non-null, `h*w` bytes.
#[no_mangle]
pub unsafe extern "C" fn mmad_anomaly_map_new(
    h: usize,
    w: usize,
    scores: *const f64,
    validity: *const u8,
    out: *mut *mut MmadAnomalyMap,
) -> MmadStatus {
    guard(|| {
        let n = area(h, w)?;
        let s = slice(scores, n, "scores")?.to_vec();
        let valid = if validity.is_null() { vec![true; n] } else { slice(validity, n, "validity")?.iter().map(|&b| b != 0).collect() };
        write(out, Box::into_raw(Box::new(MmadAnomalyMap(AnomalyMap::new(h, w, s, valid)?))), "out")
    })
}

/// # Safety
/// `map` must be a live handle; `h` and `w` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_anomaly_map_dims(map: *const MmadAnomalyMap, h: *mut usize, w: *mut usize) -> MmadStatus {
    guard(|| {
        let m = &reference(map, "map")?.0;
        write(h, m.height(), "h")?;
        write(w, m.width(), "w")
    })
}

/// Copies the `H*W` scores into `buf`, which must hold exactly that many.
///
/// # Safety
/// `buf` must be writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmad_anomaly_map_scores(map: *const MmadAnomalyMap, buf: *mut f64, len: usize) -> MmadStatus {
    guard(|| {
        let m = &reference(map, "map")?.0;
        if len != m.scores().len() {
            return Err(Failure(MmadStatus::ContractViolation, format!("buffer holds {len}, map has {}", m.scores().len())));
        }
        slice_mut(buf, len, "buf")?.copy_from_slice(m.scores());
        Ok(())
    })
}

/// # Safety
/// `map` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mmad_anomaly_map_free(map: *mut MmadAnomalyMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Loads a checkpoint directory written by `mmad train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_model_load(dir: *const c_char, out: *mut *mut MmadModel) -> MmadStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        let dir = CStr::from_ptr(dir).to_str().map_err(|e| Failure(MmadStatus::InvalidUtf8, e.to_string()))?;
        let bundle = pipeline::load_checkpoint(Path::new(dir))?;
        write(out, Box::into_raw(Box::new(MmadModel(bundle))), "out")
    })
}

/// # Safety
/// `model` must come from [`mmad_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mmad_model_free(model: *mut MmadModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---------------------------------------------------------------- fusion

/// Fusion parameters; the smoothing schedule is fixed to the defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmadFusionParams {
    pub temperature: f64,
    pub eps: f64,
    pub gate_window: usize,
    pub gate_steepness: f64,
    /// 0 = full, 1..6 = the reduced variants.
    pub variant: u32,
}

#[no_mangle]
pub extern "C" fn mmad_fusion_params_default() -> MmadFusionParams {
    let d = FusionConfig::default();
    MmadFusionParams { temperature: d.temperature, eps: d.eps, gate_window: d.gate_window, gate_steepness: d.gate_steepness, variant: 0 }
}

fn fusion_config(p: &MmadFusionParams) -> FfiResult<FusionConfig> {
    let variant = *Variant::ALL
        .get(p.variant as usize)
        .ok_or_else(|| Failure(MmadStatus::InvalidConfig, format!("unknown variant code {}", p.variant)))?;
    let cfg = FusionConfig {
        temperature: p.temperature,
        eps: p.eps,
        gate_window: p.gate_window,
        gate_steepness: p.gate_steepness,
        variant,
        ..FusionConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn params(p: *const MmadFusionParams) -> FfiResult<FusionConfig> {
    if p.is_null() {
        Ok(FusionConfig::default())
    } else {
        fusion_config(&*p)
    }
}

/// Normalized Euclidean distance between two feature vectors.
///
/// # Safety
/// `a` and `b` must each hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_normalized_distance(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> MmadStatus {
    guard(|| {
        let d = normalized_distance(slice(a, len, "a")?, slice(b, len, "b")?)?;
        write(out, d, "out")
    })
}

/// Raw fused map from the four discrepancy maps. `params` may be null for
/// the defaults.
///
/// # Safety
/// All handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_fuse(
    d2d_map: *const MmadAnomalyMap,
    d3d_map: *const MmadAnomalyMap,
    d2d_rec: *const MmadAnomalyMap,
    d3d_rec: *const MmadAnomalyMap,
    params_ptr: *const MmadFusionParams,
    out: *mut *mut MmadAnomalyMap,
) -> MmadStatus {
    guard(|| {
        let cfg = params(params_ptr)?;
        let bundle = DiscrepancyBundle::new(
            reference(d2d_map, "d2d_map")?.0.clone(),
            reference(d3d_map, "d3d_map")?.0.clone(),
            reference(d2d_rec, "d2d_rec")?.0.clone(),
            reference(d3d_rec, "d3d_rec")?.0.clone(),
        )?;
        let psi = fusion::fuse(&bundle, &cfg)?;
        write(out, Box::into_raw(Box::new(MmadAnomalyMap(psi))), "out")
    })
}

/// Smoothed, normalized final map and its image score.
///
/// # Safety
/// `psi` must be live; `out_map` and `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_finalize(
    psi: *const MmadAnomalyMap,
    params_ptr: *const MmadFusionParams,
    out_map: *mut *mut MmadAnomalyMap,
    out_score: *mut f64,
) -> MmadStatus {
    guard(|| {
        let cfg = params(params_ptr)?;
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        let (map, score) = fusion::finalize(&reference(psi, "psi")?.0, &cfg)?;
        write(out_score, score, "out_score")?;
        write(out_map, Box::into_raw(Box::new(MmadAnomalyMap(map))), "out_map")
    })
}

/// Scores one sample with a loaded model. Pass null for a modality the
/// model's mode does not use.
///
/// # Safety
/// Handles must be live or null; `out_map` and `out_score` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_infer(
    model: *const MmadModel,
    f2: *const MmadFeatureMap,
    f3: *const MmadFeatureMap,
    params_ptr: *const MmadFusionParams,
    out_map: *mut *mut MmadAnomalyMap,
    out_score: *mut f64,
) -> MmadStatus {
    guard(|| {
        let model = &reference(model, "model")?.0;
        let cfg = params(params_ptr)?;
        if out_map.is_null() {
            return Err(null("out_map"));
        }
        let sample = Sample {
            id: "ffi".into(),
            anomalous: false,
            f2: f2.as_ref().map(|m| m.0.clone()),
            f3: f3.as_ref().map(|m| m.0.clone()),
            gt: None,
            defect_modes: Vec::new(),
        };
        let r = pipeline::infer(model, &sample, &cfg)?;
        write(out_score, r.score, "out_score")?;
        write(out_map, Box::into_raw(Box::new(MmadAnomalyMap(r.map))), "out_map")
    })
}

// ---------------------------------------------------------------- metrics

/// Rank-based AUROC with midranks for ties.
///
/// # Safety
/// `scores` and `labels` must each hold `n` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> MmadStatus {
    guard(|| {
        let labels: Vec<bool> = slice(labels, n, "labels")?.iter().map(|&b| b != 0).collect();
        write(out, metrics::auroc(slice(scores, n, "scores")?, &labels)?, "out")
    })
}

/// Normalized area under the per-region overlap curve up to `fpr_limit`.
/// `gts[i]` is an `H*W` mask matching `maps[i]`.
///
/// # Safety
/// `maps` and `gts` must each hold `n` valid pointers; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmad_aupro(
    maps: *const *const MmadAnomalyMap,
    gts: *const *const u8,
    n: usize,
    fpr_limit: f64,
    out: *mut f64,
) -> MmadStatus {
    guard(|| {
        let handles = slice(maps, n, "maps")?;
        let masks = slice(gts, n, "gts")?;
        let mut ms = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for (&m, &g) in handles.iter().zip(masks) {
            let m = &reference(m, "maps[i]")?.0;
            gs.push(slice(g, m.scores().len(), "gts[i]")?.iter().map(|&b| b != 0).collect::<Vec<bool>>());
            ms.push(m.clone());
        }
        write(out, metrics::aupro(&ms, &gs, fpr_limit)?, "out")
    })
}

// ---------------------------------------------------------------- point clouds

/// Isolation-forest outlier mask flagging `ceil(contamination * n)` points.
///
/// # Safety
/// `points` must hold `3*n` doubles (xyz rows); `out_mask` must hold `n` bytes.
#[no_mangle]
pub unsafe extern "C" fn mmad_iso_outlier_mask(
    points: *const f64,
    n: usize,
    contamination: f64,
    trees: usize,
    subsample: usize,
    seed: u64,
    out_mask: *mut u8,
) -> MmadStatus {
    guard(|| {
        let flat = slice(points, n.saturating_mul(3), "points")?;
        let pts: Vec<Point> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let cfg = IsolationForestConfig { trees, subsample };
        let scores = polyprep::iso_fit_score(&pts, &cfg, &mut SeededRng::new(seed))?;
        let mask = polyprep::threshold_by_contamination(&scores, contamination)?;
        let out = slice_mut(out_mask, n, "out_mask")?;
        out.iter_mut().zip(mask).for_each(|(o, m)| *o = m as u8);
        Ok(())
    })
}
