//! Golden fixtures. The first run records `tests/golden/fixtures.json`;
//! later runs must reproduce it exactly. Delete the file to re-record after
//! an intentional change.

use std::fs;
use std::path::PathBuf;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use pftseg::finetune::{
    parameter_digests, run_schedule, FinetuneConfig, LabeledExample, StageSchedule, SupportExample, SupportSet,
};
use pftseg::generator::{Branch, Decoder, DecoderConfig, LatentCode};
use pftseg::optim::OptimizerConfig;
use pftseg::palette::make_palette;
use pftseg::ploss::{PerceptualConfig, PerceptualFeatures};
use pftseg::synthdata::{class_histogram, generate_dataset, render_sample, DatasetConfig};

fn digest_f64(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn observed() -> Value {
    let dcfg = DatasetConfig {
        n_test: 64,
        n_pretrain: 0,
        ..Default::default()
    };
    let ds = generate_dataset(&dcfg).unwrap();
    let first = &ds.test[0];

    let cfg = DecoderConfig {
        output_resolution: 16,
        channels: vec![8, 8, 4],
        latent_dim: 8,
        ..Default::default()
    };
    let mut dec = Decoder::init_two_stream(&cfg, &Decoder::single_stream(&cfg, 3).unwrap()).unwrap();
    let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 0, "golden");
    let (img, _) = dec.synthesize(&w, Branch::Img, false).unwrap();

    let small = DatasetConfig {
        resolution: 16,
        ..Default::default()
    };
    let s = render_sample(&small, "train-0000");
    let labeled = vec![LabeledExample {
        sample_id: s.sample_id,
        image: s.image,
        label: s.label,
        latent: w.clone(),
    }];
    let support = SupportSet {
        samples: (0..3)
            .map(|i| SupportExample {
                sample_id: format!("support-{i}"),
                image: render_sample(&small, &format!("support-{i:04}")).image,
                latent: LatentCode::random(cfg.num_styles(), cfg.latent_dim, 0, &format!("s{i}")),
            })
            .collect(),
    };
    let pf = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
    let sched = StageSchedule::progressive(2, OptimizerConfig::rmsprop(1e-2), 0.1);
    let trace = run_schedule(
        &mut dec,
        &sched,
        &labeled,
        &support,
        &make_palette(6).unwrap(),
        &pf,
        &FinetuneConfig::default(),
        |_, _| Ok(()),
    )
    .unwrap();
    let mut params = Sha256::new();
    for d in parameter_digests(&dec) {
        params.update(d);
    }

    json!({
        "palette_k6": make_palette(6).unwrap().colors,
        "test_histogram_seed7_n64": class_histogram(&ds.test, dcfg.k),
        "test0_image_sha256": digest_f64(&first.image.data),
        "decoder_init_image_sha256": digest_f64(&img.data),
        "finetune_seg_losses": trace.iter().map(|r| r.seg_loss).collect::<Vec<_>>(),
        "finetune_params_sha256": hex::encode(params.finalize()),
    })
}

#[test]
fn outputs_match_recorded_fixtures() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/fixtures.json");
    let now = observed();
    if !path.exists() {
        fs::write(&path, serde_json::to_string_pretty(&now).unwrap() + "\n").unwrap();
        eprintln!("recorded {}", path.display());
        return;
    }
    let recorded: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for (key, want) in recorded.as_object().unwrap() {
        assert_eq!(&now[key], want, "fixture {key} drifted");
    }
}
