use std::path::Path;
use std::process::Command;

fn exported_functions() -> Vec<String> {
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    src.lines()
        .filter_map(|l| l.trim().strip_prefix("pub unsafe extern \"C\" fn "))
        .map(|rest| rest.split('(').next().unwrap().to_owned())
        .collect()
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/sidemoe.h")).unwrap();
    let names = exported_functions();
    assert!(names.len() >= 20, "{names:?}");
    for name in names {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for handle in ["typedef struct SmQuantized SmQuantized;", "typedef struct SmConfig SmConfig;", "typedef struct SmRun SmRun;"] {
        assert!(header.contains(handle), "{handle}");
    }
}

/// The header must compile as C on its own when a C compiler is present.
#[test]
fn header_compiles_as_c() {
    let Ok(out) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success());
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(dir.join("sidemoe.h"))
        .status()
        .unwrap();
    assert!(status.success());
}
