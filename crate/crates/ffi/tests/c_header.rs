use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include "flowcryst.h"
#include <stdio.h>
#include <string.h>

int main(void) {
    double f0[3] = {0.1, 0.9, 0.5};
    double f1[3] = {0.9, 0.1, 0.5};
    double v[3];
    if (flowcryst_torus_log(f0, f1, 1, v) != FLOWCRYST_STATUS_OK) return 1;
    if (v[0] > -0.199 || v[0] < -0.201) return 2;
    if (flowcryst_torus_log(NULL, f1, 1, v) != FLOWCRYST_STATUS_NULL_POINTER) return 3;
    char msg[64];
    if (flowcryst_last_error(msg, sizeof msg) == 0 || strlen(msg) == 0) return 4;
    printf("%s\n", flowcryst_version());
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from target/<profile>/deps
    std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir().join("libflowcryst_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    let exe = dir.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("run the C compiler");
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
