use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use unimoco::corpus::{ModalInput, PatchGrid};
use unimoco::model::{save_checkpoint, ModelConfig, UniMoCo};
use unimoco_ffi::*;

fn small_model() -> UniMoCo {
    let cfg = ModelConfig {
        d_model: 16,
        backbone_layers: 1,
        t2i_layers: 1,
        ..ModelConfig::default()
    };
    UniMoCo::new(cfg, 9).unwrap()
}

fn saved(dir: &Path) -> (UniMoCo, CString) {
    let m = small_model();
    let p = dir.join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    (m, CString::new(p.to_str().unwrap()).unwrap())
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        umc_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn load(path: &CString) -> *mut UmcModel {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { umc_model_load(path.as_ptr(), &mut h) }, UmcStatus::Ok);
    h
}

#[test]
fn embeddings_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (m, path) = saved(dir.path());
    let h = load(&path);
    assert_eq!(unsafe { umc_model_dim(h) }, 16);
    let (mut patches, mut patch_dim) = (0, 0);
    assert_eq!(unsafe { umc_model_image_shape(h, &mut patches, &mut patch_dim) }, UmcStatus::Ok);
    let image: Vec<f64> = (0..patches * patch_dim).map(|i| (i as f64 * 0.37).sin()).collect();
    let input = ModalInput {
        instruction: vec![3],
        content: vec![17, 40, 9],
        image: Some(PatchGrid::new(patches, patch_dim, image.clone()).unwrap()),
    };
    let expected = m.embed(&input).unwrap();
    let mut out = vec![0.0; 16];
    let s = unsafe {
        umc_embed(h, [3u32].as_ptr(), 1, [17u32, 40, 9].as_ptr(), 3, image.as_ptr(), image.len(), out.as_mut_ptr(), 16)
    };
    assert_eq!(s, UmcStatus::Ok, "{}", last_error());
    assert_eq!(out, expected.0);

    let text_only = m.embed(&ModalInput { image: None, ..input }).unwrap();
    let s = unsafe { umc_embed(h, [3u32].as_ptr(), 1, [17u32, 40, 9].as_ptr(), 3, ptr::null(), 0, out.as_mut_ptr(), 16) };
    assert_eq!(s, UmcStatus::Ok);
    assert_eq!(out, text_only.0);
    unsafe { umc_model_free(h) };
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved(dir.path());
    let h = load(&path);
    let mut out = vec![0.0; 4];
    let s = unsafe { umc_embed(h, ptr::null(), 0, [1u32].as_ptr(), 1, ptr::null(), 0, out.as_mut_ptr(), 4) };
    assert_eq!(s, UmcStatus::Dimension);
    assert!(last_error().contains("model width is 16"));

    let mut out = vec![0.0; 16];
    let s = unsafe { umc_embed(h, ptr::null(), 0, [1u32].as_ptr(), 1, [0.5f64].as_ptr(), 1, out.as_mut_ptr(), 16) };
    assert_ne!(s, UmcStatus::Ok);
    let s = unsafe { umc_embed(h, ptr::null(), 0, ptr::null(), 2, ptr::null(), 0, out.as_mut_ptr(), 16) };
    assert_eq!(s, UmcStatus::NullPointer);
    let s = unsafe { umc_embed(h, ptr::null(), 0, [10_000u32].as_ptr(), 1, ptr::null(), 0, out.as_mut_ptr(), 16) };
    assert_ne!(s, UmcStatus::Ok);
    unsafe { umc_model_free(h) };

    let mut h = ptr::null_mut();
    let missing = CString::new(dir.path().join("none.ckpt").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { umc_model_load(missing.as_ptr(), &mut h) }, UmcStatus::Io);
    assert!(h.is_null());
    assert_eq!(unsafe { umc_model_load(ptr::null(), &mut h) }, UmcStatus::NullPointer);

    let garbage = dir.path().join("bad.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let garbage = CString::new(garbage.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { umc_model_load(garbage.as_ptr(), &mut h) }, UmcStatus::Checkpoint);
    assert_eq!(unsafe { umc_model_dim(ptr::null()) }, 0);
    unsafe { umc_model_free(ptr::null_mut()) };
}

#[test]
fn last_error_truncates_and_reports_length() {
    let mut out = 0.0;
    let s = unsafe { umc_cosine_similarity([0.0f64].as_ptr(), [1.0f64].as_ptr(), 1, &mut out) };
    assert_eq!(s, UmcStatus::Degenerate);
    let full = unsafe { umc_last_error(ptr::null_mut(), 0) };
    let mut buf = [1 as std::ffi::c_char; 5];
    assert_eq!(unsafe { umc_last_error(buf.as_mut_ptr(), 5) }, full);
    assert_eq!(buf[4], 0);
}

#[test]
fn similarity_and_matching() {
    let mut out = 0.0;
    let s = unsafe { umc_cosine_similarity([1.0f64, 0.0].as_ptr(), [1.0f64, 1.0].as_ptr(), 2, &mut out) };
    assert_eq!(s, UmcStatus::Ok);
    assert!((out - 0.5f64.sqrt()).abs() < 1e-12);

    let c = [1.0, 0.0, 0.0, 1.0, 0.6, 0.8];
    let mut best = usize::MAX;
    assert_eq!(unsafe { umc_match([0.5f64, 0.9].as_ptr(), c.as_ptr(), 3, 2, &mut best) }, UmcStatus::Ok);
    assert_eq!(best, 2);
    let dup = [0.0, 1.0, 0.0, 1.0];
    assert_eq!(unsafe { umc_match([0.0f64, 1.0].as_ptr(), dup.as_ptr(), 2, 2, &mut best) }, UmcStatus::Ok);
    assert_eq!(best, 0);
    let unnormalized = [3.0, 0.0];
    assert_eq!(
        unsafe { umc_match([1.0f64, 0.0].as_ptr(), unnormalized.as_ptr(), 1, 2, &mut best) },
        UmcStatus::InvalidArgument
    );
    assert_eq!(unsafe { umc_match([1.0f64].as_ptr(), c.as_ptr(), 0, 1, &mut best) }, UmcStatus::InvalidArgument);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(umc_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/unimoco.h")).unwrap();
    for f in [
        "umc_version",
        "umc_last_error",
        "umc_model_load",
        "umc_model_free",
        "umc_model_dim",
        "umc_model_image_shape",
        "umc_embed",
        "umc_cosine_similarity",
        "umc_match",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing");
    }
    assert!(header.contains("typedef struct UmcModel UmcModel;"));
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libunimoco_ffi.a");
    lib.exists().then_some(lib)
}

#[test]
fn c_program_links_against_the_header() {
    let Some(lib) = static_lib() else {
        panic!("static library not found next to the test binary");
    };
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved(dir.path());
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(root.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(root.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).arg(path.to_str().unwrap()).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout} {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout.starts_with("status 0 dim 16 norm 1.000000 best 0"), "{stdout}");
}
