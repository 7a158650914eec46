use std::ffi::{c_char, CStr, CString};
use std::net::Ipv4Addr;
use std::ptr;

use popdns::delta::{diff_states, encode_batch};
use popdns::exposure::{exposure_closed_form, ExposureParams, Scheme};
use popdns::model::{QType, RecordAnswer, RecordKey, Ttl};
use popdns::poplist::{build_list, PopularityList};
use popdns_ffi::*;

fn key(name: &str, q: QType) -> RecordKey {
    RecordKey::new(name.parse().unwrap(), q)
}

fn server_list() -> PopularityList {
    let ttl = Ttl::new(300).unwrap();
    let ranked = vec![
        (key("www.example.com", QType::A), RecordAnswer::A(Ipv4Addr::new(192, 0, 2, 1)), ttl),
        (key("cdn.example.net", QType::A), RecordAnswer::Cname("edge.example.org".parse().unwrap()), ttl),
    ];
    let mut resolver = |k: &RecordKey| {
        (k.name.to_string() == "edge.example.org").then(|| (RecordAnswer::A(Ipv4Addr::new(198, 51, 100, 7)), ttl))
    };
    build_list(ranked, &mut resolver, 2).list
}

unsafe fn parse(bytes: &[u8]) -> *mut PopdnsList {
    let mut handle = ptr::null_mut();
    assert_eq!(popdns_list_parse(bytes.as_ptr(), bytes.len(), &mut handle), PopdnsStatus::Ok);
    handle
}

unsafe fn lookup(list: *const PopdnsList, name: &str) -> Result<String, PopdnsStatus> {
    let name = CString::new(name).unwrap();
    let mut buf = [0 as c_char; 64];
    let mut len = 0usize;
    match popdns_list_lookup(list, name.as_ptr(), PopdnsQtype::A, buf.as_mut_ptr(), buf.len(), &mut len) {
        PopdnsStatus::Ok => {
            let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned();
            assert_eq!(text.len(), len);
            Ok(text)
        }
        other => Err(other),
    }
}

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        popdns_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_str().unwrap().to_owned()
    }
}

#[test]
fn lookup_follows_chains() {
    let server = server_list();
    unsafe {
        let list = parse(&server.serialize_snapshot());
        assert_eq!(lookup(list, "www.example.com").as_deref(), Ok("192.0.2.1"));
        assert_eq!(lookup(list, "cdn.example.net").as_deref(), Ok("198.51.100.7"));
        assert_eq!(lookup(list, "absent.example.com"), Err(PopdnsStatus::NotFound));
        assert_eq!(lookup(list, "bad..name"), Err(PopdnsStatus::InvalidArgument));
        let (mut version, mut entries) = (9u64, 0usize);
        assert_eq!(popdns_list_info(list, &mut version, &mut entries), PopdnsStatus::Ok);
        assert_eq!((version, entries), (0, 3));
        popdns_list_free(list);
    }
}

#[test]
fn batches_keep_replica_in_step() {
    let before = server_list();
    let mut after = before.clone();
    let ttl = Ttl::new(60).unwrap();
    let edit = build_list(
        vec![
            (key("www.example.com", QType::A), RecordAnswer::A(Ipv4Addr::new(192, 0, 2, 99)), ttl),
            (key("cdn.example.net", QType::A), RecordAnswer::Cname("edge.example.org".parse().unwrap()), Ttl::new(300).unwrap()),
        ],
        &mut |_: &RecordKey| Some((RecordAnswer::A(Ipv4Addr::new(198, 51, 100, 7)), Ttl::new(300).unwrap())),
        2,
    )
    .list;
    let batch = diff_states(&before, &edit);
    let bytes = encode_batch(&before, &batch).unwrap();
    after.apply_batch(&bytes).unwrap();

    unsafe {
        let list = parse(&before.serialize_snapshot());
        assert_eq!(popdns_list_apply_batch(list, bytes.as_ptr(), bytes.len()), PopdnsStatus::Ok);
        assert_eq!(lookup(list, "www.example.com").as_deref(), Ok("192.0.2.99"));

        let mut digest = [0u8; 32];
        assert_eq!(popdns_list_digest(list, digest.as_mut_ptr()), PopdnsStatus::Ok);
        assert_eq!(digest, after.digest());

        let mut needed = 0usize;
        assert_eq!(popdns_list_serialize(list, ptr::null_mut(), 0, &mut needed), PopdnsStatus::BufferTooSmall);
        let mut out = vec![0u8; needed];
        assert_eq!(popdns_list_serialize(list, out.as_mut_ptr(), out.len(), &mut needed), PopdnsStatus::Ok);
        assert_eq!(out, after.serialize_snapshot());

        // The same batch again is one version behind.
        assert_eq!(popdns_list_apply_batch(list, bytes.as_ptr(), bytes.len()), PopdnsStatus::VersionGap);
        assert!(last_error().contains("version"), "{}", last_error());
        let garbage = [1u8, 2, 3];
        assert_eq!(popdns_list_apply_batch(list, garbage.as_ptr(), garbage.len()), PopdnsStatus::MalformedBatch);
        assert_eq!(lookup(list, "www.example.com").as_deref(), Ok("192.0.2.99"));
        popdns_list_free(list);
    }
}

#[test]
fn null_and_corrupt_inputs() {
    unsafe {
        let mut handle = ptr::null_mut();
        assert_eq!(popdns_list_parse(ptr::null(), 0, &mut handle), PopdnsStatus::NullPointer);
        let junk = b"PLS1 not really";
        assert_eq!(popdns_list_parse(junk.as_ptr(), junk.len(), &mut handle), PopdnsStatus::InvalidSnapshot);
        assert!(handle.is_null());
        assert_eq!(popdns_list_info(ptr::null(), ptr::null_mut(), ptr::null_mut()), PopdnsStatus::NullPointer);
        assert_eq!(last_error(), "list is null");
        popdns_list_free(ptr::null_mut());

        let mut small = [0 as c_char; 4];
        let len = popdns_last_error(small.as_mut_ptr(), small.len());
        assert_eq!(len, "list is null".len());
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_str().unwrap(), "lis");
    }
}

#[test]
fn exposure_matches_library() {
    let p = PopdnsExposureParams { c: 0.5, users: 10_000, voters: 50, h: 0.944, rounds: 10, q_v: 0.3, scheme: PopdnsScheme::Popdns };
    let lib = ExposureParams { c: 0.5, users: 10_000, voters: 50, h: 0.944, rounds: 10, q_v: 0.3, scheme: Scheme::Popdns };
    unsafe {
        let mut e = 0.0;
        assert_eq!(popdns_exposure(&p, &mut e), PopdnsStatus::Ok);
        assert_eq!(e, exposure_closed_form(&lib));

        let (mut mean, mut se) = (0.0, 0.0);
        assert_eq!(popdns_exposure_monte_carlo(&p, 100_000, 7, &mut mean, &mut se), PopdnsStatus::Ok);
        assert!((mean - e).abs() < 4.0 * se.max(1e-6));

        let bad = PopdnsExposureParams { c: 2.0, ..p };
        assert_eq!(popdns_exposure(&bad, &mut e), PopdnsStatus::InvalidArgument);
        assert_eq!(popdns_exposure_monte_carlo(&p, 10, 7, &mut mean, &mut se), PopdnsStatus::InvalidArgument);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/popdns.h")).unwrap();
    for symbol in [
        "popdns_list_parse",
        "popdns_list_free",
        "popdns_list_info",
        "popdns_list_lookup",
        "popdns_list_apply_batch",
        "popdns_list_serialize",
        "popdns_list_digest",
        "popdns_exposure",
        "popdns_exposure_monte_carlo",
        "popdns_last_error",
        "typedef struct PopdnsList PopdnsList",
        "POPDNS_STATUS_VERSION_GAP = 4",
    ] {
        assert!(header.contains(symbol), "missing {symbol}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", "-std=c99", "-"])
        .arg("-I")
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .stdin(std::process::Stdio::piped())
        .spawn()
        .and_then(|mut child| {
            use std::io::Write;
            child.stdin.take().unwrap().write_all(b"#include \"popdns.h\"\nint main(void) { return POPDNS_STATUS_OK; }\n")?;
            child.wait()
        })
    else {
        eprintln!("no C compiler available; skipping");
        return;
    };
    assert!(status.success());
}
