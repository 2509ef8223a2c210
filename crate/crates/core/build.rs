fn main() {
    println!("cargo:rerun-if-changed=build.rs");
    if std::env::var_os("CARGO_FEATURE_HDF5").is_none() {
        return;
    }
    if pkg_config::Config::new()
        .cargo_metadata(true)
        .probe("hdf5")
        .is_err()
    {
        // Debian/Ubuntu ship the serial build under a non-default directory.
        let dir = "/usr/lib/x86_64-linux-gnu/hdf5/serial";
        if std::path::Path::new(dir).exists() {
            println!("cargo:rustc-link-search=native={dir}");
        }
        println!("cargo:rustc-link-lib=hdf5");
    }
}
