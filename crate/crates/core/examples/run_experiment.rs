//! Drives the `insider` command line in-process: a `check` run from a
//! config file, written under a temporary directory.

use std::path::Path;

fn main() {
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/gaussian_lq.json");
    let out = std::env::temp_dir().join("insider-example");
    let code = insider_volterra::cli::main_with_args([
        "insider",
        "check",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    println!("exit code {code}");
}
