use std::ffi::{CStr, CString};
use std::ptr;

use sem_ffi::*;

fn last_error() -> String {
    let p = sem_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

/// d = 2, s = 4 with W_e = [I; -I] and W_d = [I, -I]: encode/decode is exact.
fn split_sae() -> *mut SemSae {
    let enc = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
    let dec = [1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0];
    let bias = [0.0, 0.0];
    let mut out = ptr::null_mut();
    let st = unsafe { sem_sae_from_parts(enc.as_ptr(), dec.as_ptr(), bias.as_ptr(), 2, 4, &mut out) };
    assert_eq!(st, SemStatus::Ok);
    out
}

#[test]
fn encode_decode_round_trip() {
    let sae = split_sae();
    unsafe {
        assert_eq!(sem_sae_input_dim(sae), 2);
        assert_eq!(sem_sae_latent_dim(sae), 4);
        let z = [0.5, -2.0];
        let mut h = [0.0; 4];
        assert_eq!(sem_sae_encode(sae, z.as_ptr(), 2, h.as_mut_ptr(), 4), SemStatus::Ok);
        assert_eq!(h, [0.5, 0.0, 0.0, 2.0]);
        let mut back = [0.0; 2];
        assert_eq!(sem_sae_decode(sae, h.as_ptr(), 4, back.as_mut_ptr(), 2), SemStatus::Ok);
        assert_eq!(back, z);
        sem_sae_free(sae);
    }
}

#[test]
fn save_and_load_preserve_weights() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.semw").to_str().unwrap()).unwrap();
    let sae = split_sae();
    unsafe {
        assert_eq!(sem_sae_save(sae, path.as_ptr()), SemStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(sem_sae_load(path.as_ptr(), &mut loaded), SemStatus::Ok);
        let z = [0.25, 0.75];
        let (mut a, mut b) = ([0.0; 4], [0.0; 4]);
        sem_sae_encode(sae, z.as_ptr(), 2, a.as_mut_ptr(), 4);
        sem_sae_encode(loaded, z.as_ptr(), 2, b.as_mut_ptr(), 4);
        assert_eq!(a, b);
        sem_sae_free(loaded);
        sem_sae_free(sae);
    }
}

#[test]
fn errors_set_status_and_message() {
    let sae = split_sae();
    unsafe {
        let z = [1.0, 2.0, 3.0];
        let mut h = [0.0; 4];
        assert_eq!(sem_sae_encode(sae, z.as_ptr(), 3, h.as_mut_ptr(), 4), SemStatus::Format);
        assert!(last_error().contains("dimension mismatch"));

        assert_eq!(sem_sae_encode(ptr::null(), z.as_ptr(), 2, h.as_mut_ptr(), 4), SemStatus::NullPointer);
        assert!(last_error().contains("sae"));

        let missing = CString::new("/nonexistent/w.semw").unwrap();
        let mut out = ptr::null_mut();
        assert_eq!(sem_sae_load(missing.as_ptr(), &mut out), SemStatus::Format);
        assert!(out.is_null());

        let nan = [f64::NAN, 0.0];
        assert_eq!(sem_sae_encode(sae, nan.as_ptr(), 2, h.as_mut_ptr(), 4), SemStatus::Numeric);

        // Success clears the message.
        let ok = [0.0, 0.0];
        assert_eq!(sem_sae_encode(sae, ok.as_ptr(), 2, h.as_mut_ptr(), 4), SemStatus::Ok);
        assert!(sem_last_error_message().is_null());
        sem_sae_free(sae);
        sem_sae_free(ptr::null_mut());
    }
}

#[test]
fn modulation_and_steer_algebra() {
    unsafe {
        let sc = [1.0, 0.5, 0.0];
        let sb = [0.0, 0.5, 1.0];
        let mut m = [0.0; 3];
        assert_eq!(sem_modulation_aware(sc.as_ptr(), sb.as_ptr(), 3, m.as_mut_ptr()), SemStatus::Ok);
        assert_eq!(m, [4.0, 1.0, 0.0]);
        assert_eq!(sem_modulation_agnostic(sc.as_ptr(), 3, m.as_mut_ptr()), SemStatus::Ok);
        assert_eq!(m, [1.0, 0.25, 0.0]);

        let h = [2.0, 4.0, 6.0];
        let div = [1.0, 1.0, 1.0];
        let mut out = [0.0; 3];
        assert_eq!(sem_steer(h.as_ptr(), m.as_ptr(), div.as_ptr(), 3, out.as_mut_ptr()), SemStatus::Ok);
        assert_eq!(out, [2.0, 1.75, 1.0]);

        let mut top = [0.0; 4];
        let v = [3.0, -1.0, 3.0, 2.0];
        assert_eq!(sem_topk_relu(v.as_ptr(), 4, 1, top.as_mut_ptr()), SemStatus::Ok);
        assert_eq!(top, [3.0, 0.0, 0.0, 0.0]);

        let probe = [1.0, 5.0];
        let reference = [0.0, 5.0, 1.0, 4.0, 2.0, 6.0];
        let mut score = [0.0; 2];
        assert_eq!(sem_percentile_score(probe.as_ptr(), 2, reference.as_ptr(), 3, score.as_mut_ptr()), SemStatus::Ok);
        assert_eq!(score, [1.0 / 3.0, 1.0 / 3.0]);
    }
}

#[test]
fn fairness_metrics() {
    unsafe {
        let groups = [0usize, 0, 1, 1];
        let mut kl = -1.0;
        assert_eq!(sem_kl_at_k(groups.as_ptr(), 4, 2, ptr::null(), &mut kl), SemStatus::Ok);
        assert!(kl.abs() < 1e-9);
        let skewed = [0usize, 0, 0, 0];
        let mut ms = 0.0;
        assert_eq!(sem_maxskew_at_k(skewed.as_ptr(), 4, 2, ptr::null(), &mut ms), SemStatus::Ok);
        assert!((ms - (1.0f64 + 1e-10).ln() + 0.5f64.ln()).abs() < 1e-9);
        let pool = [0.75, 0.25];
        assert_eq!(sem_kl_at_k(groups.as_ptr(), 4, 2, pool.as_ptr(), &mut kl), SemStatus::Ok);
        let p: f64 = 0.5 + 1e-10;
        assert!((kl - (p * (p / 0.75).ln() + p * (p / 0.25).ln())).abs() < 1e-9);
        assert_eq!(sem_kl_at_k(groups.as_ptr(), 4, 1, ptr::null(), &mut kl), SemStatus::InvalidArgument);
    }
}

#[test]
fn disentanglement_score_values() {
    unsafe {
        let (mut raw, mut clamped) = (0.0, 0.0);
        assert_eq!(sem_disentanglement_score(0.923, 1.0, 0.5, &mut raw, &mut clamped), SemStatus::Ok);
        assert!((raw - 0.154).abs() < 1e-9);
        assert_eq!(raw, clamped);
        assert_eq!(sem_disentanglement_score(0.5, 0.5, 0.5, &mut raw, ptr::null_mut()), SemStatus::Numeric);
        assert!(last_error().contains("undefined"));
    }
}

#[test]
fn steering_context_matches_core() {
    use sem_core::scoring::{BiasSpec, PromptActivations, PromptRole};
    use sem_core::{SaeWeights, SteeringContext, Variant};

    let sae = split_sae();
    let d = 2;
    let diverse: Vec<f64> = (0..10).flat_map(|i| [(i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()]).collect();
    let bias: Vec<f64> = vec![1.0, 0.1, 0.9, 0.2, -1.0, 0.1, -0.8, 0.0];
    let counts = [2usize, 2];
    let query = [0.6, 0.4];
    let mut ctx = ptr::null_mut();
    unsafe {
        assert_eq!(
            sem_steering_new(sae, SemVariant::SemB, diverse.as_ptr(), 10, bias.as_ptr(), counts.as_ptr(), 2, &mut ctx),
            SemStatus::Ok
        );
        let mut out = [0.0; 2];
        assert_eq!(sem_steering_debias(ctx, sae, query.as_ptr(), ptr::null(), 0, 0, out.as_mut_ptr(), 2), SemStatus::Ok);

        let w = SaeWeights::new(
            ndarray::array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]],
            ndarray::array![[1.0, 0.0, -1.0, 0.0], [0.0, 1.0, 0.0, -1.0]],
            ndarray::array![0.0, 0.0],
        )
        .unwrap();
        let enc = |rows: &[f64]| rows.chunks(d).map(|r| w.encode(r).unwrap()).collect::<Vec<_>>();
        let div = PromptActivations::new("div", PromptRole::Diverse, enc(&diverse)).unwrap();
        let spec = BiasSpec::new(
            "a",
            vec![
                ("x".into(), PromptActivations::new("x", PromptRole::BiasClass, enc(&bias[..4])).unwrap()),
                ("y".into(), PromptActivations::new("y", PromptRole::BiasClass, enc(&bias[4..])).unwrap()),
            ],
        )
        .unwrap();
        let core = SteeringContext::new(Variant::SemB, div, Some(&spec)).unwrap();
        let q = sem_core::steering::QueryLatents {
            original: Some(w.encode(&query).unwrap()),
            paraphrases: vec![],
        };
        let expect = core.debias(&q, &w, false).unwrap().embedding;
        assert_eq!(out.as_slice(), expect.as_slice());

        sem_steering_free(ctx);

        // SemI needs paraphrases.
        let mut agnostic = ptr::null_mut();
        assert_eq!(
            sem_steering_new(sae, SemVariant::SemI, diverse.as_ptr(), 10, ptr::null(), ptr::null(), 0, &mut agnostic),
            SemStatus::Ok
        );
        assert_eq!(
            sem_steering_debias(agnostic, sae, query.as_ptr(), ptr::null(), 0, 0, out.as_mut_ptr(), 2),
            SemStatus::InvalidArgument
        );
        assert!(last_error().contains("paraphrases"));
        sem_steering_free(agnostic);

        // Bias-aware variants need bias prompts.
        let mut bad = ptr::null_mut();
        assert_eq!(
            sem_steering_new(sae, SemVariant::SemB, diverse.as_ptr(), 10, ptr::null(), ptr::null(), 0, &mut bad),
            SemStatus::InvalidArgument
        );
        assert!(bad.is_null());
        sem_sae_free(sae);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sem.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 18, "found {exports:?}");
    for name in exports {
        assert!(header.contains(&format!(" {name}(")) || header.contains(&format!("*{name}(")), "{name} missing from header");
    }
    assert!(header.contains("typedef struct SemSae SemSae;"));
    assert!(header.contains("SEM_STATUS_NUMERIC = 4"));
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(sem_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
