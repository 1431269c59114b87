//! C ABI over the gateway: opaque engine handle, status codes, and strings
//! the caller frees. Errors never unwind across the boundary; every call
//! reports a status and stashes a message retrievable per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use permllm_core::checkpoint;
use permllm_core::domain::{DomainId, DomainSet};
use permllm_core::gateway::{CredentialStore, Engine, Gateway, GatewayConfig};
use permllm_core::mechanisms::{AdapterStore, DomainAdapterMap};
use permllm_core::model::StatWeighting;
use permllm_core::tokenizer::Tokenizer;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    InvalidArgument = 1,
    NotFound = 2,
    AuthFailed = 3,
    Unavailable = 4,
    Internal = 5,
}

/// Opaque handle: a loaded model, map, adapters and credential table.
pub struct EngineHandle {
    gateway: Gateway,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn to_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', "?")).map_or(ptr::null_mut(), CString::into_raw)
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Status> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(Status::InvalidArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        Status::InvalidArgument
    })
}

/// Message for the most recent failure on this thread. Valid until the next
/// failing call from the same thread.
#[no_mangle]
pub extern "C" fn permllm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn permllm_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Frees a string returned by this library. Null is a no-op.
///
/// # Safety
/// `s` must have been returned by a `permllm_*` call and not freed before.
#[no_mangle]
pub unsafe extern "C" fn permllm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads an artifact directory (model.pllm, model.vocab.json, adapters.pllm,
/// map.json) produced by the `permllm train` pipeline. On success stores an
/// engine handle in `out`.
///
/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn permllm_engine_open(
    dir: *const c_char,
    expose_provenance: bool,
    out: *mut *mut EngineHandle,
) -> Status {
    if out.is_null() {
        set_error("out pointer is null");
        return Status::InvalidArgument;
    }
    let dir = match read_str(dir, "dir") {
        Ok(s) => Path::new(s),
        Err(st) => return st,
    };
    let load = || -> Result<Gateway, String> {
        let base = checkpoint::load_base(&dir.join("model.pllm")).map_err(|e| e.to_string())?;
        let tokenizer =
            Tokenizer::load(&dir.join("model.vocab.json")).map_err(|e| e.to_string())?;
        let map = DomainAdapterMap::load(&dir.join("map.json")).map_err(|e| e.to_string())?;
        let adapters = AdapterStore::load(&dir.join("adapters.pllm")).map_err(|e| e.to_string())?;
        let engine = Engine::new(base, tokenizer, map, adapters);
        Ok(Gateway::new(
            engine,
            CredentialStore::new(),
            GatewayConfig { expose_provenance, audit_mode: true },
        ))
    };
    match load() {
        Ok(gateway) => {
            *out = Box::into_raw(Box::new(EngineHandle { gateway }));
            Status::Ok
        }
        Err(e) => {
            set_error(e);
            Status::NotFound
        }
    }
}

/// Releases an engine handle. Null is a no-op.
///
/// # Safety
/// `engine` must come from `permllm_engine_open` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn permllm_engine_close(engine: *mut EngineHandle) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Mints a credential bound to a comma-separated domain list (empty string
/// for the empty set). On success stores a token string in `out_token`;
/// free it with `permllm_string_free`.
///
/// # Safety
/// Pointers must be valid; `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn permllm_engine_register(
    engine: *mut EngineHandle,
    domains_csv: *const c_char,
    out_token: *mut *mut c_char,
) -> Status {
    let Some(handle) = engine.as_ref() else {
        set_error("engine is null");
        return Status::InvalidArgument;
    };
    if out_token.is_null() {
        set_error("out_token is null");
        return Status::InvalidArgument;
    }
    let csv = match read_str(domains_csv, "domains") {
        Ok(s) => s,
        Err(st) => return st,
    };
    let mut ids = Vec::new();
    for part in csv.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match DomainId::new(part) {
            Ok(d) => ids.push(d),
            Err(e) => {
                set_error(e.to_string());
                return Status::InvalidArgument;
            }
        }
    }
    match handle.gateway.register_user(DomainSet::new(ids)) {
        Ok(token) => {
            *out_token = to_c_string(token);
            Status::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            Status::InvalidArgument
        }
    }
}

fn gateway_status(e: &permllm_core::gateway::GatewayError) -> Status {
    use permllm_core::gateway::GatewayError as G;
    match e {
        G::AuthFailed => Status::AuthFailed,
        G::UnknownDomain(_) | G::EmptyQuery | G::QueryTooLong(_) | G::TextTooShort => {
            Status::InvalidArgument
        }
        G::UnknownCombination | G::AdapterUnavailable(_) => Status::Unavailable,
        G::AuditDisabled | G::Model(_) => Status::Internal,
    }
}

/// Runs one authenticated query. On success stores the generated text in
/// `out_response`; free it with `permllm_string_free`.
///
/// # Safety
/// Pointers must be valid; `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn permllm_engine_query(
    engine: *mut EngineHandle,
    token: *const c_char,
    query: *const c_char,
    max_new_tokens: usize,
    out_response: *mut *mut c_char,
) -> Status {
    let Some(handle) = engine.as_ref() else {
        set_error("engine is null");
        return Status::InvalidArgument;
    };
    if out_response.is_null() {
        set_error("out_response is null");
        return Status::InvalidArgument;
    }
    let (token, query) = match (read_str(token, "token"), read_str(query, "query")) {
        (Ok(t), Ok(q)) => (t, q),
        (Err(st), _) | (_, Err(st)) => return st,
    };
    match handle.gateway.handle_query("ffi", token, query, Some(max_new_tokens)) {
        Ok(resp) => {
            *out_response = to_c_string(resp.response.unwrap_or_default());
            Status::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            gateway_status(&e)
        }
    }
}

/// Scores a text under the token's activation and returns the per-token
/// trace as a JSON array of {logprob, mu, sigma} objects. Free the string
/// with `permllm_string_free`.
///
/// # Safety
/// Pointers must be valid; `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn permllm_engine_trace(
    engine: *mut EngineHandle,
    token: *const c_char,
    text: *const c_char,
    out_trace_json: *mut *mut c_char,
) -> Status {
    let Some(handle) = engine.as_ref() else {
        set_error("engine is null");
        return Status::InvalidArgument;
    };
    if out_trace_json.is_null() {
        set_error("out_trace_json is null");
        return Status::InvalidArgument;
    }
    let (token, text) = match (read_str(token, "token"), read_str(text, "text")) {
        (Ok(t), Ok(x)) => (t, x),
        (Err(st), _) | (_, Err(st)) => return st,
    };
    let set = match handle.gateway.authenticate(token) {
        Ok(s) => s,
        Err(e) => {
            set_error(e.to_string());
            return Status::AuthFailed;
        }
    };
    match handle.gateway.engine.trace_for(&set, text, StatWeighting::Probability) {
        Ok(stats) => {
            let json = serde_json::to_string(&stats).unwrap_or_default();
            *out_trace_json = to_c_string(json);
            Status::Ok
        }
        Err(e) => {
            set_error(e.to_string());
            gateway_status(&e)
        }
    }
}
