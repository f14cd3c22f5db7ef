//! Backward-pass bookkeeping. The finite-difference checks live in the
//! acceptance suite.

use pftseg::generator::{Branch, Decoder, DecoderConfig, LatentCode};
use pftseg::rng;
use pftseg::tensor::Tensor3;

fn tiny_config() -> DecoderConfig {
    DecoderConfig {
        base_resolution: 2,
        output_resolution: 8,
        shared_cutoff_resolution: 4,
        channels: vec![6, 5, 4],
        latent_dim: 7,
    }
}

fn projection(seed: u64, c: usize, h: usize) -> Tensor3 {
    let mut r = rng::keyed(seed, "projection", "");
    Tensor3::from_vec(c, h, h, rng::normal_vec(&mut r, c * h * h, 1.0))
}

#[test]
fn partial_requests_match_full_backward() {
    let cfg = tiny_config();
    let pre = Decoder::single_stream(&cfg, 11).unwrap();
    let dec = Decoder::init_two_stream(&cfg, &pre).unwrap();
    let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 5, "gc");
    let proj = projection(9, 3, 8);
    let fwd = dec.forward(&w, Branch::Seg);
    let mut full = dec.grads_for(&vec![true; dec.num_params()]);
    dec.backward(&fwd, &w, &proj, &mut full, false);
    let ids = dec
        .select_parameters(&[pftseg::generator::StreamTag::Seg], &[pftseg::generator::Group::ToRgb])
        .unwrap();
    let mut part = dec.grads_for(&dec.mask(&ids));
    dec.backward(&fwd, &w, &proj, &mut part, false);
    for id in ids {
        assert_eq!(full.get(id).unwrap(), part.get(id).unwrap());
    }
}
