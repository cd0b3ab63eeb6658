use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir =
        PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR is not set"));
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("MKPROMPT_H".to_owned()),
        cpp_compat: true,
        usize_is_size_t: true,
        header: Some("/* Generated by cbindgen; do not edit. */".to_owned()),
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: false,
            ..Default::default()
        },
        ..Default::default()
    };
    cbindgen::generate_with_config(&crate_dir, config)
        .expect("unable to generate C bindings")
        .write_to_file(crate_dir.join("include").join("mkprompt.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
