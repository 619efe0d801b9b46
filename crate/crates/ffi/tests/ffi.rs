use std::ffi::{CStr, CString};
use std::ptr;

use neufa_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = neufa_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

const MICRO: &str = r#"{"vocab_size":5,"d_mel":4,"embedding_dim":8,"text_conv_channels":8,"text_conv_kernel":3,
"text_conv_layers":1,"text_hidden":4,"speech_conv_channels":8,"speech_conv_kernel":3,"speech_conv_layers":1,
"speech_hidden":4,"speech_gru_layers":1,"attention_dim":8,"decoder_hidden":4,"decoder_layers":1,
"detector_channels":2,"detector_kernel":3}"#;

const SPEC: &str = r#"{"corpus_size":3,"vocab_size":5,"d_mel":4,"max_tokens":4}"#;

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(neufa_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_roundtrip_and_single_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = cstr(MICRO);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { neufa_model_new(cfg.as_ptr(), &mut model) }, NeufaStatus::Ok);
    let path = cstr(dir.path().join("m.ckpt").to_str().unwrap());
    assert_eq!(unsafe { neufa_model_save(model, path.as_ptr()) }, NeufaStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { neufa_model_load(path.as_ptr(), &mut loaded) }, NeufaStatus::Ok);

    let tokens = [0usize, 3, 1];
    let frames: Vec<f64> = (0..10 * 4).map(|i| (i % 7) as f64 / 7.0).collect();
    let (mut l1, mut r1) = ([0.0; 3], [0.0; 3]);
    let (mut l2, mut r2) = ([0.0; 3], [0.0; 3]);
    let run = |m, l: &mut [f64; 3], r: &mut [f64; 3]| unsafe {
        neufa_align(m, tokens.as_ptr(), 3, frames.as_ptr(), 10, 4, 10.0, l.as_mut_ptr(), r.as_mut_ptr())
    };
    assert_eq!(run(model, &mut l1, &mut r1), NeufaStatus::Ok);
    assert_eq!(run(loaded, &mut l2, &mut r2), NeufaStatus::Ok);
    assert_eq!((l1, r1), (l2, r2));
    for i in 0..3 {
        assert!(0.0 <= l1[i] && l1[i] <= r1[i] && r1[i] <= 100.0);
    }
    unsafe {
        neufa_model_free(model);
        neufa_model_free(loaded);
    }
}

#[test]
fn corpus_align_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, spec) = (cstr(MICRO), cstr(SPEC));
    let (mut model, mut corpus) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(neufa_model_new(cfg.as_ptr(), &mut model), NeufaStatus::Ok);
        assert_eq!(neufa_corpus_generate(spec.as_ptr(), &mut corpus), NeufaStatus::Ok);
        assert_eq!(neufa_corpus_len(corpus), 3);
        let file = cstr(dir.path().join("c.jsonl").to_str().unwrap());
        assert_eq!(neufa_corpus_save(corpus, file.as_ptr()), NeufaStatus::Ok);
        let mut reloaded = ptr::null_mut();
        assert_eq!(neufa_corpus_load(file.as_ptr(), &mut reloaded), NeufaStatus::Ok);
        assert_eq!(neufa_corpus_len(reloaded), 3);

        let out = cstr(dir.path().join("aligned").to_str().unwrap());
        assert_eq!(neufa_align_corpus(model, reloaded, out.as_ptr()), NeufaStatus::Ok);
        let (mut mae, mut median, mut acc) = (f64::NAN, f64::NAN, [f64::NAN; 4]);
        assert_eq!(
            neufa_evaluate(out.as_ptr(), reloaded, &mut mae, &mut median, acc.as_mut_ptr()),
            NeufaStatus::Ok
        );
        assert!(mae >= 0.0 && median >= 0.0);
        assert!(acc.windows(2).all(|w| w[0] <= w[1]) && acc.iter().all(|a| (0.0..=1.0).contains(a)));
        neufa_corpus_free(reloaded);
        neufa_corpus_free(corpus);
        neufa_model_free(model);
    }
}

#[test]
fn errors_map_to_codes_with_messages() {
    let mut model = ptr::null_mut();
    let missing = cstr("/nonexistent/dir/m.ckpt");
    assert_eq!(unsafe { neufa_model_load(missing.as_ptr(), &mut model) }, NeufaStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let bad = cstr(r#"{"text_conv_kernel": 4}"#);
    assert_eq!(unsafe { neufa_model_new(bad.as_ptr(), &mut model) }, NeufaStatus::Config);
    assert!(last_error().contains("odd"), "{}", last_error());

    let junk = cstr("{not json");
    assert_eq!(unsafe { neufa_model_new(junk.as_ptr(), &mut model) }, NeufaStatus::Config);

    assert_eq!(unsafe { neufa_model_new(ptr::null(), ptr::null_mut()) }, NeufaStatus::NullPointer);
    assert_eq!(unsafe { neufa_corpus_len(ptr::null()) }, 0);
    unsafe {
        neufa_model_free(ptr::null_mut());
        neufa_corpus_free(ptr::null_mut());
    }
}

#[test]
fn out_of_vocabulary_token_is_input_error() {
    let cfg = cstr(MICRO);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { neufa_model_new(cfg.as_ptr(), &mut model) }, NeufaStatus::Ok);
    let tokens = [9usize];
    let frames = [0.0f64; 4 * 3];
    let (mut l, mut r) = (0.0, 0.0);
    let st = unsafe { neufa_align(model, tokens.as_ptr(), 1, frames.as_ptr(), 3, 4, 10.0, &mut l, &mut r) };
    assert_eq!(st, NeufaStatus::Input);
    unsafe { neufa_model_free(model) };
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/neufa.h")).unwrap();
    for sym in [
        "neufa_model_new",
        "neufa_model_load",
        "neufa_align",
        "neufa_corpus_load",
        "neufa_evaluate",
        "neufa_last_error",
        "NEUFA_STATUS_OK",
        "typedef struct NeufaModel NeufaModel",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}
