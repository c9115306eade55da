use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use embsqueeze::data::{Sentence, Vocabulary};
use embsqueeze::embedding::{choose_rank, EmbeddingTable};
use embsqueeze::format::ModelFile;
use embsqueeze::linalg::DenseMatrix;
use embsqueeze::models::{DanConfig, DanModel, EmbeddingLayer, Model};
use embsqueeze::quantize::{quantize_model, Bits};
use embsqueeze_ffi::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_model() -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = DenseMatrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
    let emb = EmbeddingLayer::Plain(EmbeddingTable::new(table));
    Model::Dan(DanModel::new(emb, 3, &DanConfig { hidden: [6, 5] }, &mut rng).unwrap())
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = emsq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut EmsqModel {
    let mut h = ptr::null_mut();
    let c = cpath(path);
    assert_eq!(unsafe { emsq_model_load(c.as_ptr(), &mut h) }, EmsqStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn header_is_generated() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/embsqueeze.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "emsq_model_load",
        "emsq_model_predict",
        "emsq_vocab_encode",
        "emsq_last_error",
        "EMSQ_STATUS_BUFFER_TOO_SMALL",
        "typedef struct EmsqModel EmsqModel",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.emsq");
    let model = toy_model();
    ModelFile::from_model(&model).save(&path).unwrap();
    let h = load(&path);

    let mut classes = 0;
    let mut vocab = 0;
    unsafe {
        assert_eq!(emsq_model_num_classes(h, &mut classes), EmsqStatus::Ok);
        assert_eq!(emsq_model_vocab_size(h, &mut vocab), EmsqStatus::Ok);
    }
    assert_eq!((classes, vocab), (3, 5));

    for tokens in [vec![1usize], vec![0, 2, 4], vec![3, 3, 1, 2]] {
        let want = model.forward(&Sentence::new(tokens.clone(), 0)).unwrap();
        let mut probs = [0.0f64; 3];
        let mut class = usize::MAX;
        unsafe {
            let st = emsq_model_probabilities(h, tokens.as_ptr(), tokens.len(), probs.as_mut_ptr(), 3);
            assert_eq!(st, EmsqStatus::Ok);
            let st = emsq_model_predict(h, tokens.as_ptr(), tokens.len(), &mut class);
            assert_eq!(st, EmsqStatus::Ok);
        }
        assert_eq!(probs.to_vec(), want.probabilities);
        assert_eq!(class, model.predict(&Sentence::new(tokens, 0)).unwrap());
    }
    unsafe { emsq_model_free(h) };
}

#[test]
fn quantized_files_load_dequantized() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.emsq");
    let q = quantize_model(&toy_model(), Bits::B8).unwrap();
    ModelFile::from_quantized(&q).save(&path).unwrap();
    let want = q.dequantize().unwrap();
    let h = load(&path);
    let tokens = [1usize, 4];
    let mut probs = [0.0f64; 3];
    let st = unsafe { emsq_model_probabilities(h, tokens.as_ptr(), 2, probs.as_mut_ptr(), 3) };
    assert_eq!(st, EmsqStatus::Ok);
    let expect = want.forward(&Sentence::new(tokens.to_vec(), 0)).unwrap().probabilities;
    assert_eq!(probs.to_vec(), expect);
    unsafe { emsq_model_free(h) };
}

#[test]
fn errors_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut h = ptr::null_mut();

    let missing = cpath(&dir.path().join("nope.emsq"));
    assert_eq!(unsafe { emsq_model_load(missing.as_ptr(), &mut h) }, EmsqStatus::Io);
    assert!(h.is_null());
    assert!(last_error().contains("nope.emsq"));

    let junk = dir.path().join("junk.emsq");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = cpath(&junk);
    assert_eq!(unsafe { emsq_model_load(junk.as_ptr(), &mut h) }, EmsqStatus::Format);

    assert_eq!(unsafe { emsq_model_load(ptr::null(), &mut h) }, EmsqStatus::NullPointer);
    assert_eq!(unsafe { emsq_model_load(junk.as_ptr(), ptr::null_mut()) }, EmsqStatus::NullPointer);

    let path = dir.path().join("m.emsq");
    ModelFile::from_model(&toy_model()).save(&path).unwrap();
    let h = load(&path);
    let mut class = 0;
    let bad = [7usize];
    let st = unsafe { emsq_model_predict(h, bad.as_ptr(), 1, &mut class) };
    assert_eq!(st, EmsqStatus::TokenOutOfRange);
    let st = unsafe { emsq_model_predict(h, bad.as_ptr(), 0, &mut class) };
    assert_eq!(st, EmsqStatus::InvalidArgument);

    let ok = [1usize];
    let mut probs = [0.0f64; 2];
    let st = unsafe { emsq_model_probabilities(h, ok.as_ptr(), 1, probs.as_mut_ptr(), 2) };
    assert_eq!(st, EmsqStatus::BufferTooSmall);
    assert_eq!(probs, [0.0, 0.0]);

    unsafe {
        emsq_model_free(h);
        emsq_model_free(ptr::null_mut());
    }
}

#[test]
fn vocab_encoding_reports_required_length() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let vocab = Vocabulary::from_tokens(["good", "movie", "bad"]).unwrap();
    vocab.save(&path).unwrap();

    let mut h = ptr::null_mut();
    let c = cpath(&path);
    assert_eq!(unsafe { emsq_vocab_load(c.as_ptr(), &mut h) }, EmsqStatus::Ok);

    let text = CString::new("Good movie, unseen words").unwrap();
    let want = vocab.encode("Good movie, unseen words");
    let mut len = 0;
    let st = unsafe { emsq_vocab_encode(h, text.as_ptr(), ptr::null_mut(), 0, &mut len) };
    assert_eq!(st, EmsqStatus::BufferTooSmall);
    assert_eq!(len, want.len());

    let mut ids = vec![usize::MAX; len];
    let st = unsafe { emsq_vocab_encode(h, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) };
    assert_eq!(st, EmsqStatus::Ok);
    assert_eq!(ids, want);
    unsafe { emsq_vocab_free(h) };
}

#[test]
fn numeric_helpers_match_the_library() {
    let mut k = 0;
    assert_eq!(unsafe { emsq_choose_rank(0.1, 10000, 300, &mut k) }, EmsqStatus::Ok);
    assert_eq!(k, choose_rank(0.1, 10000, 300).unwrap().k);
    assert_eq!(k, 29);
    assert_eq!(unsafe { emsq_choose_rank(1.5, 10, 10, &mut k) }, EmsqStatus::InvalidArgument);
    assert!(!last_error().is_empty());

    assert_eq!(emsq_flops_dense(300, 300), 599 * 300);
    assert_eq!(emsq_flops_factorized(300, 300, 75), 89625);
    assert_eq!(emsq_flops_dense(0, 5), 0);
    assert_eq!(emsq_clr(0, 10, 0.1, 1.0), 0.1);
    assert!((emsq_clr(10, 10, 0.1, 1.0) - 1.0).abs() < 1e-15);
}
