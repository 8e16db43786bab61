fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").expect("manifest dir");
    // Header generation is best-effort: consumers of a pre-built library
    // still get the committed include/dyna.h when cbindgen cannot run.
    if let Ok(bindings) = cbindgen::generate(&crate_dir) {
        bindings.write_to_file(format!("{crate_dir}/include/dyna.h"));
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
