fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(cbindgen::Config {
            language: cbindgen::Language::C,
            cpp_compat: true,
            include_guard: Some("DPADAM_H".into()),
            usize_is_size_t: true,
            documentation: true,
            documentation_style: cbindgen::DocumentationStyle::C,
            enumeration: cbindgen::EnumConfig {
                prefix_with_name: true,
                rename_variants: cbindgen::RenameRule::ScreamingSnakeCase,
                ..Default::default()
            },
            ..Default::default()
        })
        .generate()
        .expect("Unable to generate bindings")
        .write_to_file(format!("{crate_dir}/include/dpadam.h"));
}
