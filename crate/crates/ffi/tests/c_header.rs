//! Compiles a small C program against the generated header and static
//! library. Skipped when no C compiler is available.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // test binaries live in <target>/<profile>/deps
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libalchemy_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let exe = tempfile::tempdir().unwrap();
    let bin = exe.path().join("smoke");
    let status = Command::new(&cc)
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "smoke exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("100 0 "), "{text}");
}
