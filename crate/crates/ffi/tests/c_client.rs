//! Compiles a small C program against the generated header and the static
//! library. Skipped when no C compiler is on PATH.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "residual_lab.h"

int main(void) {
    RlNetwork *net = NULL;
    if (rl_network_new(RL_VARIANT_RESIDUAL, 3, 4, 2, 1, &net) != RL_STATUS_OK) return 1;
    double x[8] = {0, 1, 2, 3, 3, 1, 0, -1};
    double y[8], dy[8], total[3];
    if (rl_network_forward(net, x, 8, y, 8) != RL_STATUS_OK) return 2;
    for (int i = 0; i < 8; i++) dy[i] = y[i];
    if (rl_network_backward(net, dy, 8, total, NULL, NULL, 3) != RL_STATUS_OK) return 3;
    if (rl_network_backward(net, dy, 7, total, NULL, NULL, 3) != RL_STATUS_SHAPE) return 4;
    char msg[128];
    if (rl_last_error(msg, sizeof msg) == 0) return 5;
    rl_network_free(net);

    RlAdam *adam = NULL;
    double g[16] = {0}, kappa = 0;
    if (rl_adam_new(16, 1e-4, 0.9, 0.98, 1e-6, &adam) != RL_STATUS_OK) return 6;
    if (rl_adam_kappa(adam, g, 16, &kappa) != RL_STATUS_OK) return 7;
    rl_adam_free(adam);
    printf("%.6f %s\n", kappa, rl_version());
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler, skipping");
        return;
    }
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test-binary>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libresidual_lab_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let dir = tempfile_dir();
    let src = dir.join("client.c");
    let exe = dir.join("client");
    std::fs::write(&src, PROGRAM).unwrap();
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    let text = String::from_utf8(out.stdout).unwrap();
    let kappa: f64 = text.split_whitespace().next().unwrap().parse().unwrap();
    assert!((kappa - 1e-4 / 1e-6 * 4.0).abs() < 1e-6, "{text}");
    let _ = std::fs::remove_dir_all(&dir);
}

fn tempfile_dir() -> PathBuf {
    let d = std::env::temp_dir().join(format!("rl-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
