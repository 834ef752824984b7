use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use geomix_ffi::*;

fn data(name: &str) -> CString {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name);
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(geomix_last_error()) }.to_string_lossy().into_owned()
}

struct Loaded {
    model: *mut GeomixModel,
    dataset: *mut GeomixDataset,
}

impl Drop for Loaded {
    fn drop(&mut self) {
        unsafe {
            geomix_dataset_free(self.dataset);
            geomix_model_free(self.model);
        }
    }
}

fn load() -> Loaded {
    let mut model = ptr::null_mut();
    let mut dataset = ptr::null_mut();
    unsafe {
        assert_eq!(geomix_model_load(data("toy-checkpoint.json").as_ptr(), &mut model), GeomixStatus::Ok);
        assert_eq!(geomix_dataset_load(model, data("toy.jsonl").as_ptr(), &mut dataset), GeomixStatus::Ok);
    }
    Loaded { model, dataset }
}

#[test]
fn predictions_match_the_library() {
    let h = load();
    let mut n = 0usize;
    assert_eq!(unsafe { geomix_dataset_len(h.dataset, &mut n) }, GeomixStatus::Ok);
    assert_eq!(n, 24);
    let mut pred = vec![0.0; n];
    assert_eq!(unsafe { geomix_predict(h.model, h.dataset, pred.as_mut_ptr(), n) }, GeomixStatus::Ok);

    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data");
    let model = geomix::training::load_model(&root.join("toy-checkpoint.json")).unwrap();
    let systems = geomix::dataset::parse_dataset_with_cutoff(&root.join("toy.jsonl"), model.config.cutoff).unwrap();
    for (p, s) in pred.iter().zip(&systems) {
        assert_eq!(p.to_bits(), model.predict(s).unwrap().to_bits());
    }
    let mut t = 0.0;
    assert_eq!(unsafe { geomix_dataset_target(h.dataset, 3, &mut t) }, GeomixStatus::Ok);
    assert_eq!(t, systems[3].target);
}

#[test]
fn short_buffer_and_bad_index_are_rejected() {
    let h = load();
    let mut pred = vec![0.0; 5];
    assert_eq!(unsafe { geomix_predict(h.model, h.dataset, pred.as_mut_ptr(), 5) }, GeomixStatus::BufferTooSmall);
    assert!(last_error().contains("24"));
    let mut t = 0.0;
    assert_eq!(unsafe { geomix_dataset_target(h.dataset, 24, &mut t) }, GeomixStatus::InvalidArgument);
}

#[test]
fn missing_and_malformed_files() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/ckpt.json").unwrap();
    assert_eq!(unsafe { geomix_model_load(missing.as_ptr(), &mut model) }, GeomixStatus::Io);
    assert!(model.is_null());
    assert!(last_error().contains("/nonexistent/ckpt.json"));
    let not_a_checkpoint = data("toy.toml");
    assert_ne!(unsafe { geomix_model_load(not_a_checkpoint.as_ptr(), &mut model) }, GeomixStatus::Ok);
    assert!(model.is_null());
}

#[test]
fn verify_through_the_abi() {
    let h = load();
    for mode in [GeomixMode::NodePerm, GeomixMode::Rotation, GeomixMode::GraphPerm] {
        let (mut dev, mut pass) = (f64::NAN, false);
        let st = unsafe { geomix_verify(h.model, h.dataset, mode as i32, 6, 1e-8, 1, &mut dev, &mut pass) };
        assert_eq!(st, GeomixStatus::Ok);
        assert!(pass, "{mode:?}: {dev:e}");
    }
    let (mut dev, mut pass) = (0.0, false);
    let st = unsafe { geomix_verify(h.model, h.dataset, 7, 1, 1e-8, 1, &mut dev, &mut pass) };
    assert_eq!(st, GeomixStatus::InvalidArgument);
}

#[test]
fn model_metadata() {
    let h = load();
    let (mut n, mut cutoff) = (0usize, 0.0);
    unsafe {
        assert_eq!(geomix_model_num_parameters(h.model, &mut n), GeomixStatus::Ok);
        assert_eq!(geomix_model_cutoff(h.model, &mut cutoff), GeomixStatus::Ok);
    }
    assert!(n > 1000);
    assert_eq!(cutoff, 6.0);
}

/// The generated header compiles as C and as C++ when a compiler is present.
#[test]
fn header_compiles() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let src = "#include \"geomix.h\"\nint main(void) { GeomixModel *m = 0; return geomix_model_load(\"x\", &m) == GEOMIX_STATUS_OK; }\n";
    let tmp = std::env::temp_dir().join(format!("geomix_header_{}", std::process::id()));
    std::fs::create_dir_all(&tmp).unwrap();
    for (compiler, file) in [("cc", "probe.c"), ("c++", "probe.cpp")] {
        let path = tmp.join(file);
        std::fs::write(&path, src).unwrap();
        let Ok(out) = std::process::Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(dir.join("include"))
            .arg(&path)
            .output()
        else {
            eprintln!("{compiler} not found; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let _ = std::fs::remove_dir_all(&tmp);
}
