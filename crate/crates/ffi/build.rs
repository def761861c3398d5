use std::env;
use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    let mut config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("BAYES_LTH_H".into()),
        header: Some("/* Generated by cbindgen. Do not edit. */".into()),
        cpp_compat: true,
        ..Default::default()
    };
    config.enumeration.prefix_with_name = true;
    config.enumeration.rename_variants = cbindgen::RenameRule::ScreamingSnakeCase;

    println!("cargo:rerun-if-changed=src/lib.rs");
    match cbindgen::Builder::new().with_crate(&dir).with_config(config).generate() {
        Ok(bindings) => {
            bindings.write_to_file(dir.join("include/bayes_lth.h"));
        }
        // Keep builds working when the header cannot be regenerated; the
        // checked-in copy stays authoritative.
        Err(e) => println!("cargo:warning=cbindgen: {e}"),
    }
}
