//! C interface to a client-side list replica and the exposure model.
//!
//! Every function returns a [`PopdnsStatus`]. On failure a description is
//! kept per thread and can be copied out with [`popdns_last_error`].
//! Lists are opaque handles created by [`popdns_list_parse`] and released
//! with [`popdns_list_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use popdns::delta::DeltaError;
use popdns::exposure::{exposure_closed_form, exposure_monte_carlo, ExposureParams, Scheme};
use popdns::model::{DomainName, QType, RecordKey};
use popdns::poplist::{LookupResult, PopularityList};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopdnsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidSnapshot = 3,
    VersionGap = 4,
    MalformedBatch = 5,
    NotFound = 6,
    BufferTooSmall = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopdnsQtype {
    A = 1,
    Aaaa = 2,
    Cname = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopdnsScheme {
    Direct = 0,
    SingleRelay = 1,
    Tor3 = 2,
    Popdns = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopdnsExposureParams {
    pub c: f64,
    pub users: u64,
    pub voters: u64,
    pub h: f64,
    pub rounds: u32,
    pub q_v: f64,
    pub scheme: PopdnsScheme,
}

/// Opaque list replica.
pub struct PopdnsList {
    inner: PopularityList,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: PopdnsStatus, message: impl Into<String>) -> PopdnsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn guard(f: impl FnOnce() -> PopdnsStatus) -> PopdnsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(PopdnsStatus::Panic, "internal panic"),
    }
}

impl From<PopdnsQtype> for QType {
    fn from(q: PopdnsQtype) -> Self {
        match q {
            PopdnsQtype::A => QType::A,
            PopdnsQtype::Aaaa => QType::Aaaa,
            PopdnsQtype::Cname => QType::Cname,
        }
    }
}

impl From<PopdnsScheme> for Scheme {
    fn from(s: PopdnsScheme) -> Self {
        match s {
            PopdnsScheme::Direct => Scheme::Direct,
            PopdnsScheme::SingleRelay => Scheme::SingleRelay,
            PopdnsScheme::Tor3 => Scheme::Tor3,
            PopdnsScheme::Popdns => Scheme::Popdns,
        }
    }
}

impl From<&PopdnsExposureParams> for ExposureParams {
    fn from(p: &PopdnsExposureParams) -> Self {
        ExposureParams {
            c: p.c,
            users: p.users,
            voters: p.voters,
            h: p.h,
            rounds: p.rounds,
            q_v: p.q_v,
            scheme: p.scheme.into(),
        }
    }
}

/// Copies `bytes` into a caller buffer, always reporting the full length.
///
/// # Safety
/// `buf` must be valid for `cap` writes when non-null; `out_len` must be
/// valid for one write when non-null.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, out_len: *mut usize) -> PopdnsStatus {
    if !out_len.is_null() {
        *out_len = bytes.len();
    }
    if buf.is_null() || cap < bytes.len() {
        return fail(PopdnsStatus::BufferTooSmall, format!("need {} bytes, buffer holds {cap}", bytes.len()));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    PopdnsStatus::Ok
}

/// Parses a snapshot into a new list handle.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be valid for one
/// write.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_parse(data: *const u8, len: usize, out: *mut *mut PopdnsList) -> PopdnsStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(PopdnsStatus::NullPointer, "data and out must be non-null");
        }
        match PopularityList::parse_snapshot(slice::from_raw_parts(data, len)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PopdnsList { inner }));
                PopdnsStatus::Ok
            }
            Err(e) => fail(PopdnsStatus::InvalidSnapshot, e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `list` must come from [`popdns_list_parse`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_free(list: *mut PopdnsList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// # Safety
/// `list` must be a live handle; `version` and `entries` must be valid for
/// one write each when non-null.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_info(list: *const PopdnsList, version: *mut u64, entries: *mut usize) -> PopdnsStatus {
    let Some(list) = list.as_ref() else {
        return fail(PopdnsStatus::NullPointer, "list is null");
    };
    if !version.is_null() {
        *version = list.inner.version();
    }
    if !entries.is_null() {
        *entries = list.inner.len();
    }
    PopdnsStatus::Ok
}

/// Resolves `name` locally. On a hit the final answer is written as
/// NUL-terminated presentation text; `NotFound` signals a miss.
///
/// # Safety
/// `list` must be a live handle, `name` a NUL-terminated string, `answer`
/// valid for `cap` writes when non-null and `answer_len` valid for one write
/// when non-null. The reported length excludes the terminator.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_lookup(
    list: *const PopdnsList,
    name: *const c_char,
    qtype: PopdnsQtype,
    answer: *mut c_char,
    cap: usize,
    answer_len: *mut usize,
) -> PopdnsStatus {
    guard(|| {
        let Some(list) = list.as_ref() else {
            return fail(PopdnsStatus::NullPointer, "list is null");
        };
        if name.is_null() {
            return fail(PopdnsStatus::NullPointer, "name is null");
        }
        let Ok(text) = CStr::from_ptr(name).to_str() else {
            return fail(PopdnsStatus::InvalidArgument, "name is not UTF-8");
        };
        let name = match DomainName::parse(text) {
            Ok(n) => n,
            Err(e) => return fail(PopdnsStatus::InvalidArgument, e.to_string()),
        };
        let LookupResult::Hit(chain) = list.inner.lookup(&RecordKey::new(name, qtype.into())) else {
            return fail(PopdnsStatus::NotFound, format!("{text} is not in the list"));
        };
        let (_, last) = chain.last().expect("hits carry at least one record");
        let mut bytes = last.to_string().into_bytes();
        if !answer_len.is_null() {
            *answer_len = bytes.len();
        }
        bytes.push(0);
        copy_out(&bytes, answer.cast(), cap, ptr::null_mut())
    })
}

/// Applies one encoded update batch. The list is unchanged on error;
/// `VersionGap` means a fresh snapshot is needed.
///
/// # Safety
/// `list` must be a live handle; `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_apply_batch(list: *mut PopdnsList, data: *const u8, len: usize) -> PopdnsStatus {
    guard(|| {
        let Some(list) = list.as_mut() else {
            return fail(PopdnsStatus::NullPointer, "list is null");
        };
        if data.is_null() {
            return fail(PopdnsStatus::NullPointer, "data is null");
        }
        match list.inner.apply_batch(slice::from_raw_parts(data, len)) {
            Ok(()) => PopdnsStatus::Ok,
            Err(e @ DeltaError::VersionGap { .. }) => fail(PopdnsStatus::VersionGap, e.to_string()),
            Err(e) => fail(PopdnsStatus::MalformedBatch, e.to_string()),
        }
    })
}

/// Serializes the list. Pass a null buffer to learn the size.
///
/// # Safety
/// `list` must be a live handle; `buf` valid for `cap` writes when non-null;
/// `out_len` valid for one write when non-null.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_serialize(
    list: *const PopdnsList,
    buf: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> PopdnsStatus {
    guard(|| {
        let Some(list) = list.as_ref() else {
            return fail(PopdnsStatus::NullPointer, "list is null");
        };
        copy_out(&list.inner.serialize_snapshot(), buf, cap, out_len)
    })
}

/// SHA-256 digest used to compare a replica with the server.
///
/// # Safety
/// `list` must be a live handle; `out` must be valid for 32 writes.
#[no_mangle]
pub unsafe extern "C" fn popdns_list_digest(list: *const PopdnsList, out: *mut u8) -> PopdnsStatus {
    guard(|| {
        let Some(list) = list.as_ref() else {
            return fail(PopdnsStatus::NullPointer, "list is null");
        };
        if out.is_null() {
            return fail(PopdnsStatus::NullPointer, "out is null");
        }
        copy_out(&list.inner.digest(), out, 32, ptr::null_mut())
    })
}

/// # Safety
/// `params` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn popdns_exposure(params: *const PopdnsExposureParams, out: *mut f64) -> PopdnsStatus {
    guard(|| {
        let (Some(p), false) = (params.as_ref(), out.is_null()) else {
            return fail(PopdnsStatus::NullPointer, "params and out must be non-null");
        };
        let p = ExposureParams::from(p);
        if let Err(e) = p.validate() {
            return fail(PopdnsStatus::InvalidArgument, e.to_string());
        }
        *out = exposure_closed_form(&p);
        PopdnsStatus::Ok
    })
}

/// Monte Carlo estimate with its standard error.
///
/// # Safety
/// `params` must be readable; `mean` and `stderr` writable.
#[no_mangle]
pub unsafe extern "C" fn popdns_exposure_monte_carlo(
    params: *const PopdnsExposureParams,
    trials: u64,
    seed: u64,
    mean: *mut f64,
    stderr: *mut f64,
) -> PopdnsStatus {
    guard(|| {
        let (Some(p), false, false) = (params.as_ref(), mean.is_null(), stderr.is_null()) else {
            return fail(PopdnsStatus::NullPointer, "params, mean and stderr must be non-null");
        };
        match exposure_monte_carlo(&ExposureParams::from(p), trials, seed) {
            Ok(est) => {
                *mean = est.mean;
                *stderr = est.stderr;
                PopdnsStatus::Ok
            }
            Err(e) => fail(PopdnsStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to fit, and returns its full length without the terminator.
///
/// # Safety
/// `buf` must be valid for `cap` writes when non-null.
#[no_mangle]
pub unsafe extern "C" fn popdns_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && cap > 0 {
            let n = msg.len().min(cap - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
