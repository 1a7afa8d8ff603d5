use std::ffi::CString;
use std::ptr;

use rank1_lab_ffi::*;

fn message() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { r1_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn params(name: &str) -> *mut R1Params {
    let name = CString::new(name).unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { r1_params_lookup(name.as_ptr(), &mut p) }, R1Status::Ok);
    assert!(!p.is_null());
    p
}

#[test]
fn lookup_and_dimensions() {
    let p = params("su21");
    let (mut p1, mut p2, mut hm) = (0usize, 0usize, 0.0);
    assert_eq!(unsafe { r1_params_dims(p, &mut p1, &mut p2, &mut hm) }, R1Status::Ok);
    assert_eq!((p1, p2, hm), (2, 1, 2.0));
    let mut b = R1DimBounds::default();
    assert_eq!(unsafe { r1_hausdorff_bounds(p, &mut b) }, R1Status::Ok);
    assert_eq!((b.lower, b.upper, b.conjecture), (6.0, 7.0, 6.5));
    assert!(b.exact.is_nan());
    unsafe { r1_params_free(p) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let name = CString::new("nope").unwrap();
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { r1_params_lookup(name.as_ptr(), &mut p) }, R1Status::UnknownInstance);
    assert!(p.is_null());
    assert!(message().contains("nope"));

    assert_eq!(unsafe { r1_params_lookup(ptr::null(), &mut p) }, R1Status::NullPointer);
    assert_eq!(unsafe { r1_params_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()) }, R1Status::NullPointer);

    let p = params("rhck2");
    let mut t = ptr::null_mut();
    // synthetic trees need a joining time long enough for the join ball
    assert_eq!(unsafe { r1_tree_build(p, 2, R1Mode::Synthetic, 0, 2, &mut t) }, R1Status::Validation);
    assert!(t.is_null());
    assert_eq!(unsafe { r1_tree_build(p, 2, R1Mode::Synthetic, 0, 0, &mut t) }, R1Status::InvalidArgument);
    unsafe { r1_params_free(p) };
}

#[test]
fn heights_follow_the_closed_form() {
    let p = params("rhck2");
    let x = [0.02];
    let mut h = 0.0;
    assert_eq!(unsafe { r1_height_at(p, 50.0, ptr::null(), 0, x.as_ptr(), 1, 3, &mut h) }, R1Status::Ok);
    let y = (-3.0f64).exp();
    let q = 0.25 * 0.02 * 0.02;
    assert!((h - 50.0 * y / ((y + q) * (y + q))).abs() < 1e-12 * h);
    // wrong number of coordinates
    assert_eq!(unsafe { r1_height_at(p, 50.0, x.as_ptr(), 1, x.as_ptr(), 1, 3, &mut h) }, R1Status::InvalidArgument);
    unsafe { r1_params_free(p) };
}

#[test]
fn frostman_ratio_at_400() {
    let p = params("su21");
    let mut r = 0.0;
    assert_eq!(unsafe { r1_frostman_ratio(p, 400, 10, &mut r) }, R1Status::Ok);
    assert!(r > 2.0 && r < 2.1);
    unsafe { r1_params_free(p) };
}

#[test]
fn trees_through_handles() {
    let p = params("rhck2");
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { r1_tree_build(p, 3, R1Mode::Synthetic, 1, 10, &mut t) }, R1Status::Ok);
    let (mut nodes, mut rp) = (0usize, 0u32);
    assert_eq!(unsafe { r1_tree_info(t, 3, &mut nodes, &mut rp) }, R1Status::Ok);
    // S(R) = floor(e^{R/4}) for R = 6, 7, 8
    assert_eq!(nodes, 4 * 5 * 7);
    assert_eq!(rp, 10);
    let mut buf = [0.0f64; 1];
    assert_eq!(unsafe { r1_tree_point(t, 3, nodes - 1, buf.as_mut_ptr(), 1) }, R1Status::Ok);
    assert!(buf[0].abs() < 0.4);
    assert_eq!(unsafe { r1_tree_point(t, 3, nodes, buf.as_mut_ptr(), 1) }, R1Status::InvalidArgument);
    let mut passed = 0;
    assert_eq!(unsafe { r1_tree_check(t, 0, &mut passed) }, R1Status::Ok);
    assert_eq!(passed, 1);
    unsafe {
        r1_tree_free(t);
        r1_params_free(p);
    }
}

/// The generated header is valid C on its own.
#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/rank1_lab.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["r1_params_lookup", "r1_tree_build", "r1_tree_check", "r1_last_error", "R1_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
