//! C interface.
//!
//! Every function returns an [`AdmlStatus`]; on failure the message is
//! available from [`adml_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use autodml_iv::crossfit::{cross_fit_estimate, EstimateReport, EstimatorConfig, Method};
use autodml_iv::dataset::{load_csv, read_header, ColumnSchema, IvDataset};
use autodml_iv::dictionary::DictionarySpec;
use autodml_iv::error::{Error, ErrorKind};
use autodml_iv::moments::{Feature, Target};
use autodml_iv::simlab::truth_oracle;

/// Result codes. The nonzero library codes match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmlStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Estimation = 4,
    Panic = 5,
}

/// Estimation target selector for [`adml_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmlTarget {
    Late = 0,
    /// Complier means of every covariate.
    Characteristics = 1,
    /// Counterfactual distribution functions on the supplied grid.
    Cdf = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdmlMethod {
    Auto = 0,
    Plugin = 1,
    Kappa = 2,
}

/// Opaque dataset handle.
pub struct AdmlDataset(IvDataset);

/// Opaque estimate handle.
pub struct AdmlReport(EstimateReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn status_of(err: &Error) -> AdmlStatus {
    match err.kind() {
        ErrorKind::Config => AdmlStatus::Config,
        ErrorKind::Data => AdmlStatus::Data,
        ErrorKind::Estimation => AdmlStatus::Estimation,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdmlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdmlStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AdmlStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            AdmlStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn text(p: *const c_char, what: &'static str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(String::from)
        .map_err(|_| Failure::Lib(Error::Config(format!("{what} is not valid UTF-8"))))
}

/// Message of the last failed call on this thread, or NULL. Owned by the library.
#[no_mangle]
pub extern "C" fn adml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from column arrays; `x` is row-major `n x k`.
///
/// # Safety
/// Each pointer must reference the stated number of readable doubles.
#[no_mangle]
pub unsafe extern "C" fn adml_dataset_new(
    y: *const f64,
    d: *const f64,
    z: *const f64,
    x: *const f64,
    n: usize,
    k: usize,
    out: *mut *mut AdmlDataset,
) -> AdmlStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let nk = n
            .checked_mul(k)
            .ok_or_else(|| Error::Config("n * k overflows".into()))?;
        let data = IvDataset::new(
            slice(y, n, "y")?.to_vec(),
            slice(d, n, "d")?.to_vec(),
            slice(z, n, "z")?.to_vec(),
            slice(x, nk, "x")?.to_vec(),
            k,
        )?;
        *out = Box::into_raw(Box::new(AdmlDataset(data)));
        Ok(())
    })
}

/// Loads a CSV; every column other than the three named ones is a covariate.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adml_dataset_load_csv(
    path: *const c_char,
    outcome: *const c_char,
    treatment: *const c_char,
    instrument: *const c_char,
    out: *mut *mut AdmlDataset,
) -> AdmlStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = text(path, "path")?;
        let (y, d, z) = (
            text(outcome, "outcome")?,
            text(treatment, "treatment")?,
            text(instrument, "instrument")?,
        );
        let covariates: Vec<String> = read_header(&path)?
            .into_iter()
            .filter(|c| *c != y && *c != d && *c != z)
            .collect();
        let data = load_csv(&path, &ColumnSchema::new(y, d, z, covariates))?;
        *out = Box::into_raw(Box::new(AdmlDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `data` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn adml_dataset_free(data: *mut AdmlDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `data` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adml_dataset_rows(data: *const AdmlDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.n())
}

/// Cross-fitted estimate with default tuning. `grid` is read only for
/// [`AdmlTarget::Cdf`].
///
/// # Safety
/// `data` must be a live handle, `grid` must hold `grid_len` doubles, and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn adml_fit(
    data: *const AdmlDataset,
    target: AdmlTarget,
    grid: *const f64,
    grid_len: usize,
    method: AdmlMethod,
    folds: usize,
    seed: u64,
    out: *mut *mut AdmlReport,
) -> AdmlStatus {
    guard(|| {
        let data = &data.as_ref().ok_or(Failure::Null("data"))?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let target = match target {
            AdmlTarget::Late => Target::Late,
            AdmlTarget::Characteristics => Target::Characteristics {
                features: (0..data.k()).map(Feature::Covariate).collect(),
            },
            AdmlTarget::Cdf => Target::CounterfactualCdf {
                grid: slice(grid, grid_len, "grid")?.to_vec(),
            },
        };
        let method = match method {
            AdmlMethod::Auto => Method::Auto,
            AdmlMethod::Plugin => Method::Plugin,
            AdmlMethod::Kappa => Method::Kappa,
        };
        let config = EstimatorConfig {
            method,
            folds,
            seed,
            ..EstimatorConfig::default()
        };
        let report = cross_fit_estimate(data, &target, &DictionarySpec::default(), &config)?;
        *out = Box::into_raw(Box::new(AdmlReport(report)));
        Ok(())
    })
}

/// # Safety
/// `report` must be NULL or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn adml_report_free(report: *mut AdmlReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Number of estimated coordinates, or 0 for NULL.
///
/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn adml_report_dim(report: *const AdmlReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.theta.len())
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(Failure::Null("out"));
    }
    if len < src.len() {
        return Err(Failure::Lib(Error::Config(format!(
            "buffer holds {len} values, need {}",
            src.len()
        ))));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Copies the estimates into `out` (capacity `len`, at least the report dimension).
///
/// # Safety
/// `report` must be a live handle and `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn adml_report_theta(
    report: *const AdmlReport,
    out: *mut f64,
    len: usize,
) -> AdmlStatus {
    guard(|| {
        copy_out(
            &report.as_ref().ok_or(Failure::Null("report"))?.0.theta,
            out,
            len,
        )
    })
}

/// Copies the standard errors into `out`.
///
/// # Safety
/// As for [`adml_report_theta`].
#[no_mangle]
pub unsafe extern "C" fn adml_report_se(
    report: *const AdmlReport,
    out: *mut f64,
    len: usize,
) -> AdmlStatus {
    guard(|| {
        copy_out(
            &report.as_ref().ok_or(Failure::Null("report"))?.0.se,
            out,
            len,
        )
    })
}

/// Full report as JSON. Release the string with [`adml_string_free`].
///
/// # Safety
/// `report` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adml_report_json(
    report: *const AdmlReport,
    out: *mut *mut c_char,
) -> AdmlStatus {
    guard(|| {
        let report = &report.as_ref().ok_or(Failure::Null("report"))?.0;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let json = serde_json::to_string(report).map_err(|e| Error::InvalidData(e.to_string()))?;
        *out = CString::new(json)
            .map_err(|e| Error::InvalidData(e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn adml_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Population distribution functions of the simulation design at each grid
/// point; `beta` and `delta` each receive `len` values.
///
/// # Safety
/// All three pointers must reference `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn adml_truth(
    grid: *const f64,
    len: usize,
    beta: *mut f64,
    delta: *mut f64,
) -> AdmlStatus {
    guard(|| {
        let (b, d) = truth_oracle(slice(grid, len, "grid")?)?;
        copy_out(&b, beta, len)?;
        copy_out(&d, delta, len)
    })
}
