use std::ffi::{c_char, CStr, CString};
use std::ptr;

use residual_lab_ffi::*;

fn last_error() -> String {
    let mut buf = [0 as c_char; 256];
    unsafe {
        rl_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn residual_network_roundtrip() {
    let (depth, width, rows) = (4, 8, 3);
    let mut net = ptr::null_mut();
    unsafe {
        assert_eq!(rl_network_new(RlVariant::Residual as i32, depth, width, rows, 3, &mut net), RlStatus::Ok);
        assert_eq!(rl_network_depth(net), depth);
        assert_eq!(rl_network_width(net), width);

        let x: Vec<f64> = (0..rows * width).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let mut y = vec![0.0; x.len()];
        assert_eq!(rl_network_forward(net, x.as_ptr(), x.len(), y.as_mut_ptr(), y.len()), RlStatus::Ok);
        assert!(y.iter().all(|v| v.is_finite()));

        let dy = vec![1.0 / x.len() as f64; x.len()];
        let (mut total, mut post, mut dual) = (vec![0.0; depth], vec![0.0; depth], vec![0.0; depth]);
        let st = rl_network_backward(
            net,
            dy.as_ptr(),
            dy.len(),
            total.as_mut_ptr(),
            post.as_mut_ptr(),
            dual.as_mut_ptr(),
            depth,
        );
        assert_eq!(st, RlStatus::Ok, "{}", last_error());
        for k in 0..depth {
            assert!(total[k] + 1e-12 >= (post[k] - dual[k]).abs());
            assert!(total[k] <= post[k] + dual[k] + 1e-12);
        }
        let mut gx = vec![0.0; x.len()];
        assert_eq!(rl_network_input_grad(net, gx.as_mut_ptr(), gx.len()), RlStatus::Ok);
        assert!(gx.iter().any(|v| *v != 0.0));
        rl_network_free(net);
    }
}

#[test]
fn errors_are_reported() {
    let mut net = ptr::null_mut();
    unsafe {
        assert_eq!(rl_network_new(7, 2, 4, 2, 0, &mut net), RlStatus::InvalidArgument);
        assert!(last_error().contains("variant"));
        assert_eq!(rl_network_new(0, 2, 4, 2, 0, ptr::null_mut()), RlStatus::NullPointer);
        assert_eq!(rl_network_new(RlVariant::PreLn as i32, 2, 4, 2, 0, &mut net), RlStatus::Ok);
        assert!(last_error().is_empty());

        let mut norms = [0.0; 2];
        let dy = [0.0; 8];
        let st = rl_network_backward(net, dy.as_ptr(), 8, norms.as_mut_ptr(), ptr::null_mut(), ptr::null_mut(), 2);
        assert_eq!(st, RlStatus::OutOfOrder);

        let x = [1.0; 6];
        let mut y = [0.0; 6];
        assert_eq!(rl_network_forward(net, x.as_ptr(), 6, y.as_mut_ptr(), 6), RlStatus::Shape);

        // constant rows have zero variance
        let x = [1.0; 8];
        let mut y = [0.0; 8];
        assert_eq!(rl_network_forward(net, x.as_ptr(), 8, y.as_mut_ptr(), 8), RlStatus::Numeric);

        let mut extra = [0.0; 2];
        let x: Vec<f64> = (0..8).map(|i| i as f64).collect();
        assert_eq!(rl_network_forward(net, x.as_ptr(), 8, y.as_mut_ptr(), 8), RlStatus::Ok);
        let st = rl_network_backward(net, dy.as_ptr(), 8, norms.as_mut_ptr(), extra.as_mut_ptr(), ptr::null_mut(), 2);
        assert_eq!(st, RlStatus::InvalidArgument);
        rl_network_free(net);
        rl_network_free(ptr::null_mut());
        assert_eq!(rl_network_depth(ptr::null()), 0);
    }
}

#[test]
fn network_from_json() {
    let json = CString::new(
        r#"{"variant":"post_ln","depth":3,"width":4,"seq_len":2,"hidden":16,"blocks":["ffn_linear","attn","ffn_relu2"],"init":"analysis","ln_mode":"exact","seed":1}"#,
    )
    .unwrap();
    let mut net = ptr::null_mut();
    unsafe {
        let st = rl_network_from_json(json.as_ptr(), &mut net);
        assert_eq!(st, RlStatus::Ok, "{}", last_error());
        assert_eq!(rl_network_depth(net), 3);
        rl_network_free(net);
        let bad = CString::new("{").unwrap();
        assert_ne!(rl_network_from_json(bad.as_ptr(), &mut net), RlStatus::Ok);
    }
}

#[test]
fn adam_first_step_kappa() {
    let d = 1024;
    let mut adam = ptr::null_mut();
    unsafe {
        assert_eq!(rl_adam_new(d, 1e-4, 0.9, 0.98, 1e-6, &mut adam), RlStatus::Ok);
        let g = vec![0.0; d];
        let mut k = 0.0;
        assert_eq!(rl_adam_kappa(adam, g.as_ptr(), d, &mut k), RlStatus::Ok);
        assert!((k - 3200.0).abs() / 3200.0 < 1e-9, "{k}");
        let g = vec![1e-3; d];
        let mut u = vec![0.0; d];
        assert_eq!(rl_adam_update(adam, g.as_ptr(), u.as_mut_ptr(), d), RlStatus::Ok);
        assert!(u.iter().all(|v| *v > 0.0));
        assert_eq!(rl_adam_update(adam, g.as_ptr(), u.as_mut_ptr(), d - 1), RlStatus::Shape);
        rl_adam_free(adam);
        assert_eq!(rl_adam_new(4, 1e-4, 1.0, 0.98, 1e-6, &mut adam), RlStatus::InvalidArgument);
    }
}

#[test]
fn theory_curve_and_version() {
    let mut c = [0.0; 6];
    unsafe {
        assert_eq!(rl_theory_curve(RlVariant::PostLn as i32, 6, c.as_mut_ptr(), 6), RlStatus::Ok);
        assert!(c.iter().all(|v| v.is_finite() && *v > 0.0));
        assert!(c[0] > c[5]);
        assert_eq!(rl_theory_curve(RlVariant::PostLn as i32, 6, c.as_mut_ptr(), 5), RlStatus::Shape);
        let v = CStr::from_ptr(rl_version()).to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/residual_lab.h")).unwrap();
    for name in [
        "rl_network_new",
        "rl_network_from_json",
        "rl_network_forward",
        "rl_network_backward",
        "rl_network_input_grad",
        "rl_network_free",
        "rl_adam_new",
        "rl_adam_update",
        "rl_adam_kappa",
        "rl_adam_free",
        "rl_theory_curve",
        "rl_last_error",
        "rl_version",
        "RL_STATUS_OK",
        "RL_VARIANT_RESIDUAL",
        "typedef struct RlNetwork RlNetwork",
    ] {
        assert!(h.contains(name), "missing {name}");
    }
}
