//! Multi-scale image distance over fixed random convolutional features.
//!
//! Three stages (full, /2, /4 resolution) of 3×3 convolution + leaky ReLU,
//! each preceded by 2× average pooling after the first. Feature vectors are
//! unit-normalized per pixel and compared by squared distance, averaged over
//! pixels and weighted per stage; a small pixel-space squared error is added
//! so that the distance vanishes only on identical images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, lrelu, Tensor3, LRELU_SLOPE};

const NORM_EPS: f64 = 1e-10;
pub const DEFAULT_FEATURE_SEED: u64 = 0x5eed_f00d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerceptualConfig {
    pub seed: u64,
    pub channels: Vec<usize>,
    pub stage_weights: Vec<f64>,
    pub pixel_weight: f64,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            seed: DEFAULT_FEATURE_SEED,
            channels: vec![8, 16, 16],
            stage_weights: vec![1.0, 1.0, 1.0],
            pixel_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    c_in: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// Frozen feature extractor; nothing in the crate ever updates it.
#[derive(Clone, Debug)]
pub struct PerceptualFeatures {
    config: PerceptualConfig,
    stages: Vec<Stage>,
}

struct StageCache {
    cols: Vec<f64>,
    pre: Tensor3,
    norm: Tensor3,
    /// Per-pixel feature norm.
    radius: Vec<f64>,
}

/// Precomputed features of a fixed comparison image.
#[derive(Clone, Debug)]
pub struct PerceptualTarget {
    image: Tensor3,
    norms: Vec<Tensor3>,
}

impl PerceptualTarget {
    pub fn image(&self) -> &Tensor3 {
        &self.image
    }
}

impl PerceptualFeatures {
    pub fn new(config: PerceptualConfig) -> Result<Self> {
        if config.channels.is_empty() || config.channels.len() != config.stage_weights.len() {
            return Err(Error::Config(
                "perceptual stages and weights must be nonempty and equal length".into(),
            ));
        }
        let mut r = rng::keyed(config.seed, "perceptual-features", "");
        let mut c_in = 3;
        let stages = config
            .channels
            .iter()
            .map(|&c_out| {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                let s = Stage {
                    c_in,
                    weight: rng::normal_vec(&mut r, c_out * c_in * 9, std),
                    bias: rng::normal_vec(&mut r, c_out, 0.1),
                };
                c_in = c_out;
                s
            })
            .collect();
        Ok(PerceptualFeatures { config, stages })
    }

    pub fn config(&self) -> &PerceptualConfig {
        &self.config
    }

    fn run(&self, image: &Tensor3) -> Vec<StageCache> {
        let mut x = image.clone();
        for v in &mut x.data {
            *v = 2.0 * *v - 1.0;
        }
        let mut out: Vec<StageCache> = Vec::with_capacity(self.stages.len());
        for (s, st) in self.stages.iter().enumerate() {
            let inp = if s == 0 {
                x.clone()
            } else {
                avg_pool2(&lrelu_of(&out[s - 1].pre))
            };
            let (pre, cols) = conv3x3(&inp, &st.weight, &st.bias);
            let hw = pre.hw();
            let mut norm = pre.clone();
            for v in &mut norm.data {
                *v = lrelu(*v);
            }
            let mut radius = vec![0.0; hw];
            for c in 0..norm.c {
                for (r, v) in radius.iter_mut().zip(norm.channel(c)) {
                    *r += v * v;
                }
            }
            for r in &mut radius {
                *r = (*r + NORM_EPS).sqrt();
            }
            for c in 0..norm.c {
                for (v, r) in norm.channel_mut(c).iter_mut().zip(&radius) {
                    *v /= r;
                }
            }
            out.push(StageCache {
                cols,
                pre,
                norm,
                radius,
            });
        }
        out
    }

    fn check(&self, a: &Tensor3, b: &Tensor3) -> Result<()> {
        if a.shape() != b.shape() || a.c != 3 {
            return Err(Error::Usage(format!(
                "perceptual loss needs two 3-channel images of equal shape, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let div = 1 << (self.stages.len() - 1);
        if !a.h.is_multiple_of(div) || !a.w.is_multiple_of(div) {
            return Err(Error::Usage(format!("image size must be divisible by {div}")));
        }
        Ok(())
    }

    pub fn target(&self, image: &Tensor3) -> PerceptualTarget {
        PerceptualTarget {
            image: image.clone(),
            norms: self.run(image).into_iter().map(|c| c.norm).collect(),
        }
    }

    pub fn perceptual_loss(&self, a: &Tensor3, b: &Tensor3) -> Result<f64> {
        self.check(a, b)?;
        Ok(self.loss_against(a, &self.target(b)))
    }

    pub fn loss_against(&self, a: &Tensor3, target: &PerceptualTarget) -> f64 {
        let caches = self.run(a);
        self.combine(a, target, &caches)
    }

    fn combine(&self, a: &Tensor3, target: &PerceptualTarget, caches: &[StageCache]) -> f64 {
        let mut loss = 0.0;
        for ((c, tn), w) in caches.iter().zip(&target.norms).zip(&self.config.stage_weights) {
            let sq: f64 = c.norm.data.iter().zip(&tn.data).map(|(x, y)| (x - y) * (x - y)).sum();
            loss += w * sq / c.norm.hw() as f64;
        }
        let px: f64 = a
            .data
            .iter()
            .zip(&target.image.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        loss + self.config.pixel_weight * px / a.data.len() as f64
    }

    /// Loss and its gradient with respect to `a`.
    pub fn loss_and_grad(&self, a: &Tensor3, target: &PerceptualTarget) -> (f64, Tensor3) {
        let caches = self.run(a);
        let loss = self.combine(a, target, &caches);

        let n = a.data.len() as f64;
        let mut grad = a.clone();
        for (g, t) in grad.data.iter_mut().zip(&target.image.data) {
            *g = 2.0 * self.config.pixel_weight * (*g - t) / n;
        }

        let mut from_above: Option<Tensor3> = None;
        for s in (0..self.stages.len()).rev() {
            let c = &caches[s];
            let tn = &target.norms[s];
            let hw = c.norm.hw();
            let scale = 2.0 * self.config.stage_weights[s] / hw as f64;
            let mut dn = c.norm.clone();
            for (g, t) in dn.data.iter_mut().zip(&tn.data) {
                *g = scale * (*g - t);
            }
            // d(f/|f|) = (dn - n (n·dn)) / |f|
            let mut dot = vec![0.0; hw];
            for ch in 0..dn.c {
                for ((d, g), nv) in dot.iter_mut().zip(dn.channel(ch)).zip(c.norm.channel(ch)) {
                    *d += g * nv;
                }
            }
            let mut dact = dn;
            for ch in 0..dact.c {
                let nc = c.norm.channel(ch).to_vec();
                for (p, g) in dact.channel_mut(ch).iter_mut().enumerate() {
                    *g = (*g - nc[p] * dot[p]) / c.radius[p];
                }
            }
            if let Some(up) = from_above.take() {
                dact.add_assign(&up);
            }
            for (g, p) in dact.data.iter_mut().zip(&c.pre.data) {
                if *p <= 0.0 {
                    *g *= LRELU_SLOPE;
                }
            }
            let st = &self.stages[s];
            let dinp = conv3x3_backward(&dact, &c.cols, &st.weight, st.c_in, None, None, true)
                .expect("input gradient requested");
            if s == 0 {
                for (g, d) in grad.data.iter_mut().zip(&dinp.data) {
                    *g += 2.0 * d;
                }
            } else {
                from_above = Some(avg_pool2_backward(&dinp));
            }
        }
        (loss, grad)
    }
}

fn lrelu_of(t: &Tensor3) -> Tensor3 {
    let mut o = t.clone();
    for v in &mut o.data {
        *v = lrelu(*v);
    }
    o
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, h: usize) -> Tensor3 {
        let mut r = rng::keyed(seed, "ploss-test", "");
        let data = rng::normal_vec(&mut r, 3 * h * h, 1.0)
            .into_iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        Tensor3::from_vec(3, h, h, data)
    }

    #[test]
    fn identity_and_symmetry() {
        let pf = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
        let (a, b) = (img(1, 8), img(2, 8));
        assert_eq!(pf.perceptual_loss(&a, &a).unwrap(), 0.0);
        let ab = pf.perceptual_loss(&a, &b).unwrap();
        let ba = pf.perceptual_loss(&b, &a).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab.to_bits(), ba.to_bits());
    }

    #[test]
    fn small_local_change_is_detected() {
        let pf = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
        let a = img(3, 32);
        let mut b = a.clone();
        // 11 pixels of 1024 (> 1%) shifted by 0.1 in one channel
        for p in 0..11 {
            b.data[p * 7] = (b.data[p * 7] + 0.1).min(1.0);
        }
        assert!(pf.perceptual_loss(&a, &b).unwrap() > 0.0);
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let pf = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
        assert!(matches!(
            pf.perceptual_loss(&img(1, 8), &img(1, 16)),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn features_are_pinned_by_seed() {
        let a = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
        let b = PerceptualFeatures::new(PerceptualConfig::default()).unwrap();
        assert_eq!(a.stages[1].weight, b.stages[1].weight);
    }
}
