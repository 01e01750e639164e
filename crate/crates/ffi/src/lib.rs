//! C ABI over the synthetic-model valuation path of `demoval`.
//!
//! Every fallible function returns a [`DvStatus`]; on failure the message is available through
//! [`dv_last_error`] on the same thread. Handles are opaque and must be released with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use demoval::backends::{SyntheticModel, SyntheticModelSpec};
use demoval::fairness::{base_rate_parity, demographic_parity_difference, equalized_odds, BinaryPredictions, SensitiveDataset};
use demoval::{CandidatePool, Demonstration, EngineConfig, Error, LabeledExample, TaskSpec, ValueTable};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    UnknownId = 3,
    BudgetExceeded = 4,
    Undefined = 5,
    Backend = 6,
    Io = 7,
    Panic = 8,
}

/// A synthetic model together with the pool of demos it knows (in id order).
pub struct DvModel {
    model: SyntheticModel,
    pool: CandidatePool,
    task: TaskSpec,
    dev: Vec<LabeledExample>,
}

pub struct DvTable {
    table: ValueTable,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DvFairness {
    pub m_dpd: f64,
    pub m_tp: f64,
    pub m_fp: f64,
    pub m_eod: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> DvStatus {
    match err {
        Error::Config(_) | Error::Template(_) | Error::Merge(_) | Error::Shortage(_) => DvStatus::InvalidArgument,
        Error::UnknownId(_) => DvStatus::UnknownId,
        Error::BudgetExceeded { .. } => DvStatus::BudgetExceeded,
        Error::Undefined(_) => DvStatus::Undefined,
        Error::Backend(_) | Error::Protocol(_) | Error::Partial { .. } => DvStatus::Backend,
        Error::Parse { .. } | Error::Io { .. } | Error::Json(_) | Error::Csv(_) => DvStatus::Io,
    }
}

/// Runs `f`, recording the error message and mapping panics to [`DvStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), (DvStatus, String)>) -> DvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside demoval".into());
            DvStatus::Panic
        }
    }
}

fn lib(err: Error) -> (DvStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (DvStatus, String) {
    (DvStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (DvStatus, String) {
    (DvStatus::InvalidArgument, msg.into())
}

unsafe fn as_slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (DvStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (DvStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), (DvStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    // SAFETY: checked non-null; the caller provides writable storage.
    unsafe { out.write(value) };
    Ok(())
}

impl DvModel {
    fn new(spec: SyntheticModelSpec) -> Result<Self, Error> {
        let demos: Vec<Demonstration> = spec
            .weights
            .keys()
            .map(|id| Demonstration::new(id.clone(), id.clone(), "a"))
            .collect();
        let pool = CandidatePool::new(demos)?;
        let task = TaskSpec::new("synthetic", vec!["a".into(), "b".into()])?;
        let dev = vec![LabeledExample::new("q", "q", "a")];
        Ok(Self {
            model: SyntheticModel::new(spec)?,
            pool,
            task,
            dev,
        })
    }
}

/// Message of the last failed call on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn dv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Additive model over `n` demos with ids `d0`, `d1`, ... zero-padded to a common width, so
/// table index `i` is demo `i`.
///
/// # Safety
/// `weights` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_model_new_additive(
    v0: f64,
    gamma: f64,
    weights: *const f64,
    n: usize,
    out: *mut *mut DvModel,
) -> DvStatus {
    guard(|| {
        let w = as_slice(weights, n, "weights")?;
        if n == 0 {
            return Err(invalid("at least one weight is required"));
        }
        let width = n.saturating_sub(1).to_string().len();
        let spec = SyntheticModelSpec::additive(v0, gamma, w.iter().enumerate().map(|(i, &x)| (format!("d{i:0width$}"), x)));
        let model = DvModel::new(spec).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// Model from a JSON spec (`v0`, `gamma`, `weights`, optional `interactions`). Demo indices
/// follow the sorted weight ids.
///
/// # Safety
/// `json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_model_from_json(json: *const c_char, out: *mut *mut DvModel) -> DvStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json).to_str().map_err(|e| invalid(e.to_string()))?;
        let spec: SyntheticModelSpec = serde_json::from_str(text).map_err(|e| lib(e.into()))?;
        let model = DvModel::new(spec).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(model)), "out")
    })
}

/// # Safety
/// `model` must come from `dv_model_new_additive` or `dv_model_from_json` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_model_free(model: *mut DvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_model_len(model: *const DvModel) -> usize {
    model.as_ref().map_or(0, |m| m.pool.len())
}

/// Utility of the ordered prompt given by demo indices.
///
/// # Safety
/// `seq` must point to `len` indices; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_model_score(model: *const DvModel, seq: *const usize, len: usize, out: *mut f64) -> DvStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let idx = as_slice(seq, len, "seq")?;
        let ids = idx
            .iter()
            .map(|&i| {
                m.pool
                    .demos()
                    .get(i)
                    .map(|d| d.id.as_str())
                    .ok_or_else(|| (DvStatus::UnknownId, format!("demo index {i} out of range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let v = m.model.score_ids(&ids).map_err(lib)?;
        write_out(out, v, "out")
    })
}

/// Permutation-sampling values: `n_passes` passes of `k`-demo prompts, gate `mu`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_compute_values(
    model: *const DvModel,
    k: usize,
    n_passes: usize,
    mu: f64,
    seed: u64,
    out: *mut *mut DvTable,
) -> DvStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let cfg = EngineConfig::new(k, n_passes, mu, seed);
        let table = demoval::compute_values(&cfg, &m.task, &m.dev, &m.pool, &m.model).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(DvTable { table })), "out")
    })
}

/// Exact expectation over all ordered `k`-arrangements; fails with `BudgetExceeded` past `budget`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_exact_values(model: *const DvModel, k: usize, budget: u64, out: *mut *mut DvTable) -> DvStatus {
    guard(|| {
        let m = as_ref(model, "model")?;
        let table = demoval::exact_values(&m.pool, k, &m.task, &m.dev, &m.model, budget as u128).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(DvTable { table })), "out")
    })
}

/// `((t-1)/t) * phi_prev + v/t`; `t_new` must be at least 1.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_update_running_mean(phi_prev: f64, t_new: u64, v_prime: f64, out: *mut f64) -> DvStatus {
    guard(|| {
        if t_new == 0 {
            return Err(invalid("t_new must be at least 1"));
        }
        write_out(out, demoval::update_running_mean(phi_prev, t_new, v_prime), "out")
    })
}

/// # Safety
/// `table` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_table_free(table: *mut DvTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// # Safety
/// `table` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dv_table_len(table: *const DvTable) -> usize {
    table.as_ref().map_or(0, |t| t.table.len())
}

/// Value and update count of row `index`.
///
/// # Safety
/// `table` must be a live handle; `value` and `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_table_get(table: *const DvTable, index: usize, value: *mut f64, count: *mut u64) -> DvStatus {
    guard(|| {
        let t = as_ref(table, "table")?;
        let id = t
            .table
            .ids()
            .get(index)
            .ok_or_else(|| (DvStatus::UnknownId, format!("row {index} out of range")))?;
        let r = t.table.get(id).expect("id from table");
        write_out(value, r.value, "value")?;
        write_out(count, r.count, "count")
    })
}

/// Copies the id of row `index` into `buf` (nul-terminated, truncated to `cap`). Returns the
/// full id length in bytes, excluding the nul.
///
/// # Safety
/// `table` must be a live handle; `buf` must hold `cap` bytes (or be null with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn dv_table_id(table: *const DvTable, index: usize, buf: *mut c_char, cap: usize) -> usize {
    let Some(id) = table.as_ref().and_then(|t| t.table.ids().get(index)) else {
        return 0;
    };
    if !buf.is_null() && cap > 0 {
        let n = id.len().min(cap - 1);
        ptr::copy_nonoverlapping(id.as_ptr() as *const c_char, buf, n);
        *buf.add(n) = 0;
    }
    id.len()
}

/// Pooled table of two runs over the same ids.
///
/// # Safety
/// `a` and `b` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_table_merge(a: *const DvTable, b: *const DvTable, out: *mut *mut DvTable) -> DvStatus {
    guard(|| {
        let (a, b) = (as_ref(a, "a")?, as_ref(b, "b")?);
        let table = a.table.merge(&b.table).map_err(lib)?;
        write_out(out, Box::into_raw(Box::new(DvTable { table })), "out")
    })
}

/// The table as `demo_id,value,count` CSV. Release with [`dv_string_free`].
///
/// # Safety
/// `table` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_table_to_csv(table: *const DvTable, out: *mut *mut c_char) -> DvStatus {
    guard(|| {
        let t = as_ref(table, "table")?;
        let mut buf = Vec::new();
        t.table.write_csv(&mut buf).map_err(lib)?;
        let s = CString::new(buf).map_err(|e| invalid(e.to_string()))?;
        write_out(out, s.into_raw(), "out")
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Demographic-parity and equalized-odds gaps of `n` binary predictions. Fails with
/// `Undefined` when a group or (Y, A) cell is empty.
///
/// # Safety
/// `y_true`, `y_pred` and `a` must each point to `n` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_fairness_metrics(
    y_true: *const u8,
    y_pred: *const u8,
    a: *const u8,
    n: usize,
    out: *mut DvFairness,
) -> DvStatus {
    guard(|| {
        let preds = BinaryPredictions::from_columns(
            as_slice(y_true, n, "y_true")?,
            as_slice(y_pred, n, "y_pred")?,
            as_slice(a, n, "a")?,
        )
        .map_err(lib)?;
        let m_dpd = demographic_parity_difference(&preds).map_err(lib)?;
        let eo = equalized_odds(&preds).map_err(lib)?;
        write_out(
            out,
            DvFairness {
                m_dpd,
                m_tp: eo.m_tp,
                m_fp: eo.m_fp,
                m_eod: eo.m_eod,
            },
            "out",
        )
    })
}

/// `P(Y = 1 | A = 1) - P(Y = 1 | A = 0)` over `n` labelled rows.
///
/// # Safety
/// `y` and `a` must each point to `n` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dv_base_rate_parity(y: *const u8, a: *const u8, n: usize, out: *mut f64) -> DvStatus {
    guard(|| {
        let (y, a) = (as_slice(y, n, "y")?, as_slice(a, n, "a")?);
        let mut examples = Vec::with_capacity(n);
        for (i, (&y, &a)) in y.iter().zip(a).enumerate() {
            if y > 1 {
                return Err(invalid(format!("y[{i}] = {y} is not binary")));
            }
            examples.push(LabeledExample::new(i.to_string(), "", if y == 1 { "1" } else { "0" }).with_sensitive(a));
        }
        let data = SensitiveDataset::new("1", examples).map_err(lib)?;
        write_out(out, base_rate_parity(&data).map_err(lib)?, "out")
    })
}
