//! C ABI over `powfit`.
//!
//! Objects cross the boundary as opaque handles created by a `*_load` or
//! `powfit_quantize` call and released with the matching `*_free`. Every
//! fallible function returns a [`PowfitStatus`]; on failure the message is
//! available from [`powfit_last_error`] until the next failing call on the
//! same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use powfit::fit::{fit, FitConfig, FitMode, Solver};
use powfit::inference::{
    quantize_model, Accumulation, ActRangePolicy, QuantizeOptions, QuantizedModel, WeightScheme,
};
use powfit::intpow::{int_power_newton, IntPowConfig};
use powfit::io::{read_dataset_csv, read_model_dir, read_qmodel_dir, write_qmodel_dir};
use powfit::model::{accuracy, Dataset, Model};
use powfit::quant::{BitWidth, Granularity, Norm};
use powfit::tensor::Tensor;
use powfit::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowfitStatus {
    Ok = 0,
    /// A required pointer was null or a buffer was too small.
    InvalidArgument = 1,
    Dimension = 2,
    Domain = 3,
    NonFinite = 4,
    Structure = 5,
    Training = 6,
    Solver = 7,
    Range = 8,
    Parse = 9,
    Validation = 10,
    Io = 11,
    /// A Rust panic was caught at the boundary.
    Internal = 12,
}

impl From<&Error> for PowfitStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => PowfitStatus::Dimension,
            Error::Domain(_) => PowfitStatus::Domain,
            Error::NonFinite { .. } => PowfitStatus::NonFinite,
            Error::Structure(_) => PowfitStatus::Structure,
            Error::Training { .. } => PowfitStatus::Training,
            Error::Solver { .. } => PowfitStatus::Solver,
            Error::Range(_) => PowfitStatus::Range,
            Error::Parse { .. } => PowfitStatus::Parse,
            Error::Validation { .. } => PowfitStatus::Validation,
            Error::Usage(_) => PowfitStatus::InvalidArgument,
            Error::Io { .. } => PowfitStatus::Io,
        }
    }
}

/// Float model (batch-norms not folded).
pub struct PowfitModel(Model);

pub struct PowfitDataset(Dataset);

pub struct PowfitQModel(QuantizedModel);

/// Quantization settings; obtain defaults from [`powfit_quantize_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PowfitQuantizeConfig {
    pub bits_w: u32,
    pub bits_a: u32,
    /// 1 or 2.
    pub norm_p: u32,
    pub per_channel: bool,
    pub per_layer: bool,
    pub grid_solver: bool,
    /// Fixed global exponent when positive; fitted otherwise.
    pub fixed_a: f64,
    pub dynamic_ranges: bool,
    pub n_sigma: f64,
    pub post_accumulation: bool,
    pub bias_correct: bool,
}

struct Failure {
    status: PowfitStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            status: PowfitStatus::from(&e),
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        status: PowfitStatus::InvalidArgument,
        message: message.into(),
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> PowfitStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PowfitStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal panic");
            PowfitStatus::Internal
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{what} is null")))
}

fn bits(b: u32, what: &str) -> Result<BitWidth, Failure> {
    BitWidth::new(b).map_err(|e| invalid(format!("{what}: {e}")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn powfit_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a model directory (`model.json` + `weights.bin`).
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_load(
    dir: *const c_char,
    out: *mut *mut PowfitModel,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let model = read_model_dir(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(PowfitModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`powfit_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_free(model: *mut PowfitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values in the model's input.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_input_len(model: *const PowfitModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.0.input_shape().iter().product())
}

/// Number of values in the model's output.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_output_len(model: *const PowfitModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.0.output_shape().iter().product())
}

unsafe fn run_forward(
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
    forward: impl FnOnce(&Tensor) -> powfit::Result<Tensor>,
) -> Result<(), Failure> {
    if input.is_null() || output.is_null() {
        return Err(invalid("input or output buffer is null"));
    }
    let x = Tensor::vector(std::slice::from_raw_parts(input, input_len).to_vec())?;
    let y = forward(&x)?;
    if y.len() > output_len {
        return Err(invalid(format!(
            "output buffer holds {output_len} values, need {}",
            y.len()
        )));
    }
    std::slice::from_raw_parts_mut(output, y.len()).copy_from_slice(y.data());
    Ok(())
}

/// Float forward pass of one flattened input.
///
/// # Safety
/// `input` must point to `input_len` doubles and `output` to `output_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_forward(
    model: *const PowfitModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> PowfitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        run_forward(input, input_len, output, output_len, |x| {
            m.0.forward_float(x)
        })
    })
}

/// Loads a dataset CSV (`f0,...,label`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn powfit_dataset_load(
    path: *const c_char,
    out: *mut *mut PowfitDataset,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ds = read_dataset_csv(&path_arg(path, "path")?, None)?;
        *out = Box::into_raw(Box::new(PowfitDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`powfit_dataset_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn powfit_dataset_free(dataset: *mut PowfitDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// `dataset` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn powfit_dataset_len(dataset: *const PowfitDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Float accuracy of `model` on `dataset`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn powfit_model_accuracy(
    model: *const PowfitModel,
    dataset: *const PowfitDataset,
    out: *mut f64,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = accuracy(&handle(model, "model")?.0, &handle(dataset, "dataset")?.0)?;
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn powfit_quantize_config_default() -> PowfitQuantizeConfig {
    PowfitQuantizeConfig {
        bits_w: 4,
        bits_a: 4,
        norm_p: 2,
        per_channel: true,
        per_layer: false,
        grid_solver: false,
        fixed_a: 0.0,
        dynamic_ranges: false,
        n_sigma: 3.0,
        post_accumulation: false,
        bias_correct: true,
    }
}

fn options(cfg: &PowfitQuantizeConfig) -> Result<QuantizeOptions, Failure> {
    let mut o = QuantizeOptions::new(bits(cfg.bits_w, "bits_w")?, bits(cfg.bits_a, "bits_a")?);
    o.norm = Norm::from_p(cfg.norm_p)?;
    o.granularity = if cfg.per_channel {
        Granularity::per_channel()
    } else {
        Granularity::PerTensor
    };
    o.scheme = if cfg.fixed_a > 0.0 {
        WeightScheme::Fixed(powfit::fit::Exponent::Global(cfg.fixed_a))
    } else {
        WeightScheme::Fitted {
            mode: if cfg.per_layer {
                FitMode::PerLayer
            } else {
                FitMode::Global
            },
            solver: if cfg.grid_solver {
                Solver::Grid
            } else {
                Solver::NelderMead
            },
        }
    };
    o.act_policy = if cfg.dynamic_ranges {
        ActRangePolicy::Dynamic
    } else {
        ActRangePolicy::BnStats {
            n_sigma: cfg.n_sigma,
        }
    };
    o.accumulation = if cfg.post_accumulation {
        Accumulation::Post
    } else {
        Accumulation::Pre
    };
    o.bias_correct = cfg.bias_correct;
    Ok(o)
}

/// Fits a global exponent on the BN-folded model and reports `a*`, `ε(a*)`
/// and `ε(1)`. Any output pointer may be null.
///
/// # Safety
/// `model` and `config` must be valid; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn powfit_fit(
    model: *const PowfitModel,
    config: *const PowfitQuantizeConfig,
    a_star: *mut f64,
    epsilon: *mut f64,
    epsilon_uniform: *mut f64,
) -> PowfitStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let cfg = handle(config, "config")?;
        let o = options(cfg)?;
        let solver = if cfg.grid_solver {
            Solver::Grid
        } else {
            Solver::NelderMead
        };
        let fc: FitConfig = o.fit_config(solver);
        let report = fit(&m.0.fold_batchnorm()?, FitMode::Global, &fc)?;
        if let Some(p) = a_star.as_mut() {
            *p = report.a_star.for_layer(0);
        }
        if let Some(p) = epsilon.as_mut() {
            *p = report.epsilon_at_a_star;
        }
        if let Some(p) = epsilon_uniform.as_mut() {
            *p = report.epsilon_at_uniform;
        }
        Ok(())
    })
}

/// Quantizes `model`; `calibration` may be null only with BN-derived
/// ranges for every layer input.
///
/// # Safety
/// Handles and `config` must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn powfit_quantize(
    model: *const PowfitModel,
    calibration: *const PowfitDataset,
    config: *const PowfitQuantizeConfig,
    out: *mut *mut PowfitQModel,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = handle(model, "model")?;
        let o = options(handle(config, "config")?)?;
        let calib = calibration.as_ref().map(|d| &d.0);
        let q = quantize_model(&m.0, &o, calib)?;
        *out = Box::into_raw(Box::new(PowfitQModel(q.model)));
        Ok(())
    })
}

/// Loads a quantized model directory (`qmodel.json` + `qweights.bin`).
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_load(
    dir: *const c_char,
    out: *mut *mut PowfitQModel,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let q = read_qmodel_dir(&path_arg(dir, "dir")?)?;
        *out = Box::into_raw(Box::new(PowfitQModel(q)));
        Ok(())
    })
}

/// # Safety
/// `qmodel` must be live; `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_save(
    qmodel: *const PowfitQModel,
    dir: *const c_char,
) -> PowfitStatus {
    guard(|| {
        let q = handle(qmodel, "qmodel")?;
        write_qmodel_dir(&q.0, &path_arg(dir, "dir")?)?;
        Ok(())
    })
}

/// # Safety
/// `qmodel` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_free(qmodel: *mut PowfitQModel) {
    if !qmodel.is_null() {
        drop(Box::from_raw(qmodel));
    }
}

/// # Safety
/// `qmodel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_output_len(qmodel: *const PowfitQModel) -> usize {
    qmodel.as_ref().map_or(0, |q| q.0.output_len())
}

/// Exponent of weighted layer `layer`, or NaN when out of range.
///
/// # Safety
/// `qmodel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_exponent(qmodel: *const PowfitQModel, layer: usize) -> f64 {
    qmodel
        .as_ref()
        .and_then(|q| q.0.layers.get(layer))
        .map_or(f64::NAN, |l| l.exponent)
}

/// Simulated quantized forward pass of one flattened input.
///
/// # Safety
/// `input` must point to `input_len` doubles and `output` to `output_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_forward(
    qmodel: *const PowfitQModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> PowfitStatus {
    guard(|| {
        let q = handle(qmodel, "qmodel")?;
        run_forward(input, input_len, output, output_len, |x| q.0.forward(x))
    })
}

/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn powfit_qmodel_accuracy(
    qmodel: *const PowfitQModel,
    dataset: *const PowfitDataset,
    out: *mut f64,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = handle(qmodel, "qmodel")?
            .0
            .accuracy(&handle(dataset, "dataset")?.0)?;
        Ok(())
    })
}

/// `code^exponent_inv` by integer Newton iterations, returned as a double.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn powfit_int_power(
    code: u64,
    exponent_inv: f64,
    iterations: u32,
    fraction_bits: u32,
    out: *mut f64,
) -> PowfitStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = IntPowConfig {
            iterations,
            fraction_bits,
        };
        *out = int_power_newton(code, exponent_inv, cfg)?.to_f64();
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn powfit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
