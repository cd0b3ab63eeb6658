use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use mkprompt::corpus::{special, BpeModel, Vocab};
use mkprompt::decode::{translate, BeamConfig};
use mkprompt::model::{save_checkpoint, ModelConfig, ModelParams};
use mkprompt_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn take(p: *mut c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_owned();
    mkp_string_free(p);
    s
}

unsafe fn last_error() -> String {
    let p = mkp_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_str().unwrap().to_owned()
}

#[test]
fn retrieval_through_handle() {
    unsafe {
        let mut tm = ptr::null_mut();
        let src = c("the cat sat on the mat\na dog ran\nthe cat sat on a mat");
        let tgt = c("die katze\nein hund\ndie katze matte");
        assert_eq!(
            mkp_tm_from_text(src.as_ptr(), tgt.as_ptr(), &mut tm),
            MkpStatus::MKP_OK
        );
        assert!(mkp_last_error().is_null());
        assert_eq!(mkp_tm_len(tm), 3);

        let mut out = ptr::null_mut();
        let q = c("the cat sat on my mat");
        assert_eq!(
            mkp_tm_retrieve(tm, q.as_ptr(), 0.5, &mut out),
            MkpStatus::MKP_OK
        );
        let v: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["id"], 0);
        assert!((v["score"].as_f64().unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(v["tgt"], "die katze");

        let q = c("nothing alike at all here");
        assert_eq!(
            mkp_tm_retrieve(tm, q.as_ptr(), 0.5, &mut out),
            MkpStatus::MKP_OK
        );
        assert_eq!(take(out), "null");

        assert_eq!(
            mkp_tm_retrieve(tm, q.as_ptr(), 1.5, &mut out),
            MkpStatus::MKP_INVALID_ARGUMENT
        );
        assert!(last_error().contains("lambda"));
        mkp_tm_free(tm);
    }
}

#[test]
fn null_and_malformed_arguments_are_reported() {
    unsafe {
        let mut tm = ptr::null_mut();
        let one = c("a b");
        assert_eq!(
            mkp_tm_from_text(ptr::null(), one.as_ptr(), &mut tm),
            MkpStatus::MKP_NULL_ARGUMENT
        );
        assert!(last_error().contains("source"));
        let two = c("a\nb");
        assert_eq!(
            mkp_tm_from_text(one.as_ptr(), two.as_ptr(), &mut tm),
            MkpStatus::MKP_FORMAT
        );
        assert!(tm.is_null());

        let bad = [0xffu8, 0];
        let mut sim = 0.0;
        assert_eq!(
            mkp_similarity(bad.as_ptr().cast(), one.as_ptr(), &mut sim),
            MkpStatus::MKP_INVALID_UTF8
        );
        assert_eq!(
            mkp_similarity(one.as_ptr(), one.as_ptr(), ptr::null_mut()),
            MkpStatus::MKP_NULL_ARGUMENT
        );
        let other = c("a c");
        assert_eq!(
            mkp_similarity(one.as_ptr(), other.as_ptr(), &mut sim),
            MkpStatus::MKP_OK
        );
        assert_eq!(sim, 0.5);

        let missing = c("/nonexistent/x.tsv");
        let mut m = ptr::null_mut();
        assert_eq!(mkp_terms_load(missing.as_ptr(), &mut m), MkpStatus::MKP_IO);

        // Freeing NULL is a no-op.
        mkp_tm_free(ptr::null_mut());
        mkp_terms_free(ptr::null_mut());
        mkp_model_free(ptr::null_mut());
        mkp_string_free(ptr::null_mut());
        assert_eq!(mkp_tm_len(ptr::null()), 0);
        assert!(!CStr::from_ptr(mkp_version()).to_bytes().is_empty());
    }
}

#[test]
fn soft_match_keeps_overlapping_entries() {
    unsafe {
        let mut m = ptr::null_mut();
        let tsv = c("red cat\trote Katze\ncat\tKatze\ndog\tHund\n");
        assert_eq!(mkp_terms_from_tsv(tsv.as_ptr(), &mut m), MkpStatus::MKP_OK);
        let (s, t) = (c("the red cat sleeps"), c("die rote Katze schläft"));
        let mut out = ptr::null_mut();
        assert_eq!(
            mkp_terms_match(m, s.as_ptr(), t.as_ptr(), &mut out),
            MkpStatus::MKP_OK
        );
        let found: Vec<(String, String)> = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(
            found,
            vec![
                ("red cat".to_owned(), "rote Katze".to_owned()),
                ("cat".to_owned(), "Katze".to_owned())
            ]
        );
        mkp_terms_free(m);
    }
}

#[test]
fn model_translation_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let words = ["a", "b", "c", "x", "y", "z"];
    let bpe = BpeModel::train(
        &[words.iter().map(|w| w.to_string()).collect::<Vec<_>>()],
        0,
    )
    .unwrap();
    let vocab = Vocab::from_tokens(words.iter().flat_map(|w| bpe.encode(w)));
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_encoder_layers: 1,
        n_decoder_layers: 1,
        d_ff: 16,
        vocab_size: vocab.len(),
        max_positions: 32,
        dropout_rate: 0.0,
    };
    let params = ModelParams::init(&cfg, 3).unwrap();
    let (ckpt, vpath, bpath) = (
        dir.path().join("m.ckpt"),
        dir.path().join("vocab.txt"),
        dir.path().join("bpe"),
    );
    save_checkpoint(&ckpt, &params, &vocab.hash()).unwrap();
    vocab.save(&vpath).unwrap();
    bpe.save(&bpath).unwrap();

    let input = format!("{} a b c", special::INPUT);
    let units = bpe.encode_sequence(&mkprompt::corpus::tokenize(&input));
    let beam = BeamConfig {
        beam_size: 2,
        ..BeamConfig::default()
    };
    let (expected, _) = translate(&params, &vocab, &units, &[], &beam).unwrap();

    unsafe {
        let mut m = ptr::null_mut();
        let (ck, vp, bp) = (
            c(ckpt.to_str().unwrap()),
            c(vpath.to_str().unwrap()),
            c(bpath.to_str().unwrap()),
        );
        assert_eq!(
            mkp_model_load(ck.as_ptr(), vp.as_ptr(), bp.as_ptr(), &mut m),
            MkpStatus::MKP_OK
        );
        let mut out = ptr::null_mut();
        let inp = c(&input);
        assert_eq!(
            mkp_model_translate(m, inp.as_ptr(), ptr::null(), 2, &mut out),
            MkpStatus::MKP_OK
        );
        assert_eq!(take(out), expected.join(" "));

        let no_marker = c("a b c");
        assert_eq!(
            mkp_model_translate(m, no_marker.as_ptr(), ptr::null(), 2, &mut out),
            MkpStatus::MKP_INVALID_ARGUMENT
        );
        assert_eq!(
            mkp_model_translate(m, inp.as_ptr(), ptr::null(), 0, &mut out),
            MkpStatus::MKP_INVALID_ARGUMENT
        );
        mkp_model_free(m);

        // A vocabulary that does not belong to the checkpoint is refused.
        let other = Vocab::from_tokens(["q‸"]);
        other.save(&vpath).unwrap();
        assert_eq!(
            mkp_model_load(ck.as_ptr(), vp.as_ptr(), ptr::null(), &mut m),
            MkpStatus::MKP_MODEL
        );
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/mkprompt.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "mkp_tm_retrieve",
        "mkp_terms_match",
        "mkp_model_translate",
        "mkp_string_free",
        "mkp_last_error",
    ] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"mkprompt.h\"\nint main(void) { MkpTmIndex *t = 0; return mkp_tm_len(t) == 0 ? MKP_OK : MKP_PANIC; }\n",
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".to_owned());
    match Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
    {
        Ok(o) => assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr)),
        Err(e) => eprintln!("skipping C compile check: {cc} unavailable ({e})"),
    }
}
