use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use pftseg::generator::{Branch, Decoder, DecoderConfig, LatentCode};
use pftseg::label::LabelMap;
use pftseg::pixclass::{extract_pixel_features, predict, train_classifier, ClassifierConfig};
use pftseg_ffi::*;

fn last_error() -> String {
    let p = pftseg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_config() -> DecoderConfig {
    DecoderConfig {
        output_resolution: 16,
        channels: vec![8, 8, 8],
        latent_dim: 8,
        ..DecoderConfig::default()
    }
}

#[test]
fn palette_round_trip() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { pftseg_palette_new(8, &mut p) }, PftsegStatus::Ok);
    assert_eq!(unsafe { pftseg_palette_k(p) }, 8);

    let mut colors = vec![0.0; 24];
    assert_eq!(
        unsafe { pftseg_palette_colors(p, colors.as_mut_ptr()) },
        PftsegStatus::Ok
    );
    assert_eq!(&colors[..3], &[0.0, 0.0, 0.0]);

    let labels: Vec<u8> = (0..12).map(|i| (i % 8) as u8).collect();
    let mut rgb = vec![0.0; 36];
    let mut back = vec![0u8; 12];
    unsafe {
        assert_eq!(
            pftseg_project_labels(p, labels.as_ptr(), 3, 4, rgb.as_mut_ptr()),
            PftsegStatus::Ok
        );
        assert_eq!(
            pftseg_unproject(p, rgb.as_ptr(), 3, 4, back.as_mut_ptr()),
            PftsegStatus::Ok
        );
        pftseg_palette_free(p);
    }
    assert_eq!(back, labels);
}

#[test]
fn errors_map_to_status_codes() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { pftseg_palette_new(1, &mut p) }, PftsegStatus::Config);
    assert!(p.is_null());
    assert!(last_error().contains("K=1"));

    assert_eq!(
        unsafe { pftseg_palette_new(4, ptr::null_mut()) },
        PftsegStatus::NullPointer
    );
    assert!(last_error().contains("null"));

    unsafe { pftseg_palette_new(4, &mut p) };
    let bad = [0u8, 9];
    let mut rgb = [0.0; 6];
    assert_eq!(
        unsafe { pftseg_project_labels(p, bad.as_ptr(), 1, 2, rgb.as_mut_ptr()) },
        PftsegStatus::Validation
    );
    unsafe { pftseg_palette_free(p) };

    let mut out = ptr::null_mut();
    let missing = CString::new("/nonexistent/decoder.ckpt").unwrap();
    assert_eq!(
        unsafe { pftseg_decoder_load(missing.as_ptr(), &mut out) },
        PftsegStatus::Io
    );
    assert!(last_error().contains("/nonexistent/decoder.ckpt"));
}

#[test]
fn interpolate_and_miou() {
    let x = [1.0; 3];
    let m = [0.0; 3];
    let mut out = [0.0; 3];
    assert_eq!(
        unsafe { pftseg_interpolate(x.as_ptr(), m.as_ptr(), 1, 1, 0.25, out.as_mut_ptr()) },
        PftsegStatus::Ok
    );
    assert_eq!(out, [0.25; 3]);
    assert_eq!(
        unsafe { pftseg_interpolate(x.as_ptr(), m.as_ptr(), 1, 1, 1.5, out.as_mut_ptr()) },
        PftsegStatus::Config
    );

    let pred = [0u8, 0, 1, 1];
    let gt = [0u8, 1, 1, 1];
    let mut v = 0.0;
    let mut counts = [0u64; 4];
    assert_eq!(
        unsafe { pftseg_miou(pred.as_ptr(), gt.as_ptr(), 4, 2, &mut v, counts.as_mut_ptr()) },
        PftsegStatus::Ok
    );
    assert!((v - 7.0 / 12.0).abs() < 1e-12);
    assert_eq!(counts, [1, 0, 1, 2]);
    assert_eq!(
        unsafe { pftseg_miou(pred.as_ptr(), gt.as_ptr(), 4, 1, &mut v, ptr::null_mut()) },
        PftsegStatus::Validation
    );
}

#[test]
fn decoder_and_classifier_match_core() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let single = Decoder::single_stream(&cfg, 3).unwrap();
    let dec = Decoder::init_two_stream(&cfg, &single).unwrap();
    let dec_path = dir.path().join("decoder.ckpt");
    dec.save(&dec_path).unwrap();

    let n = cfg.num_styles();
    let w = LatentCode::random(n, cfg.latent_dim, 0, "ffi");
    let feats = extract_pixel_features(&dec, &w, None).unwrap();
    let gt = LabelMap::from_vec(16, 16, (0..256).map(|i| ((i % 16) >= 8) as u8).collect());
    let clf = train_classifier(
        std::slice::from_ref(&feats),
        &[gt],
        2,
        &ClassifierConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let clf_path = dir.path().join("classifier.ckpt");
    clf.save(&clf_path).unwrap();

    let (mut d, mut c) = (ptr::null_mut(), ptr::null_mut());
    let dp = CString::new(dec_path.to_str().unwrap()).unwrap();
    let cp = CString::new(clf_path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(pftseg_decoder_load(dp.as_ptr(), &mut d), PftsegStatus::Ok);
        assert_eq!(pftseg_classifier_load(cp.as_ptr(), &mut c), PftsegStatus::Ok);
        assert_eq!(pftseg_classifier_k(c), 2);

        let (mut styles, mut dim, mut res) = (0, 0, 0);
        assert_eq!(
            pftseg_decoder_shape(d, &mut styles, &mut dim, &mut res),
            PftsegStatus::Ok
        );
        assert_eq!((styles, dim, res), (n, cfg.latent_dim, 16));

        let mut img = vec![0.0; 3 * 16 * 16];
        assert_eq!(
            pftseg_decoder_synthesize(d, w.data.as_ptr(), w.data.len(), PftsegBranch::Seg, img.as_mut_ptr()),
            PftsegStatus::Ok
        );
        assert_eq!(img, dec.synthesize(&w, Branch::Seg, false).unwrap().0.data);
        assert_eq!(
            pftseg_decoder_synthesize(d, w.data.as_ptr(), 3, PftsegBranch::Img, img.as_mut_ptr()),
            PftsegStatus::Usage
        );

        let mut labels = vec![0u8; 256];
        assert_eq!(
            pftseg_classifier_predict(c, d, w.data.as_ptr(), w.data.len(), labels.as_mut_ptr()),
            PftsegStatus::Ok
        );
        assert_eq!(labels, predict(&clf, &feats).unwrap().data);

        pftseg_classifier_free(c);
        pftseg_decoder_free(d);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pftseg.h");
    assert!(header.exists());
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler found; skipping header check");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"pftseg.h\"\nint main(void) { PftsegPalette *p = 0; \
         return pftseg_palette_new(4, &p) == PFTSEG_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
