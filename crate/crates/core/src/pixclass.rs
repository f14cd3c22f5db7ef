//! Per-pixel classification over decoder activations.
//!
//! Every selected block activation of the segmentation branch is resized
//! bilinearly to the output resolution and concatenated along channels,
//! giving one feature vector per pixel. An MLP trained with cross-entropy
//! and plain SGD maps those vectors to part labels.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{Branch, Decoder, FeatureStack, LatentCode};
use crate::label::LabelMap;
use crate::rng;
use crate::tensor::{gemm, resize_bilinear};

/// `H × W × C`, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl PixelFeatures {
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        &self.data[(y * self.w + x) * self.c..][..self.c]
    }
}

/// Upsamples each selected stack entry to `h × w` and concatenates them in
/// block order. `layers = None` keeps every block.
pub fn features_from_stack(
    stack: &FeatureStack,
    h: usize,
    w: usize,
    layers: Option<&[usize]>,
) -> Result<PixelFeatures> {
    let all: Vec<usize> = (0..stack.0.len()).collect();
    let layers = layers.unwrap_or(&all);
    if layers.is_empty() {
        return Err(Error::Usage("feature layer selection is empty".into()));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= stack.0.len()) {
        return Err(Error::Usage(format!(
            "feature layer {bad} out of range (stack has {})",
            stack.0.len()
        )));
    }
    let c: usize = layers.iter().map(|&l| stack.0[l].c).sum();
    let mut data = vec![0.0; h * w * c];
    let mut offset = 0;
    for &l in layers {
        let up = resize_bilinear(&stack.0[l], h, w);
        for ch in 0..up.c {
            for (p, v) in up.channel(ch).iter().enumerate() {
                data[p * c + offset + ch] = *v;
            }
        }
        offset += up.c;
    }
    Ok(PixelFeatures { h, w, c, data })
}

pub fn extract_pixel_features(dec: &Decoder, w: &LatentCode, layers: Option<&[usize]>) -> Result<PixelFeatures> {
    let (_, stack) = dec.synthesize(w, Branch::Seg, true)?;
    let res = dec.config().output_resolution;
    features_from_stack(&stack.expect("features were requested"), res, res, layers)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial SGD step size; decays on a cosine schedule to zero.
    pub step_size: f64,
    /// Pixels drawn per image per epoch; `0` uses every pixel.
    pub pixels_per_image: usize,
    pub seed: u64,
    pub layers: Option<Vec<usize>>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            hidden: vec![128, 64],
            epochs: 40,
            batch_size: 64,
            step_size: 0.5,
            pixels_per_image: 4096,
            seed: 0,
            layers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PixelClassifier {
    /// `[C, hidden.., K]`
    pub widths: Vec<usize>,
    pub seed: u64,
    pub layers: Option<Vec<usize>>,
    /// Per-feature standardization fitted on the training pixels.
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Row-major `out × in` per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Classes with no training pixels.
    pub missing_classes: Vec<usize>,
}

struct Activations {
    /// Input to each layer, `batch × width`.
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl PixelClassifier {
    pub fn k(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[0]
    }

    fn standardize(&self, rows: &[f64]) -> Vec<f64> {
        let c = self.feature_dim();
        rows.chunks(c)
            .flat_map(|r| {
                r.iter()
                    .zip(&self.mean)
                    .zip(&self.inv_std)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect()
    }

    /// `x` is `n × C`, already standardized.
    fn forward(&self, x: Vec<f64>, n: usize) -> Activations {
        let mut inputs = vec![x];
        let nl = self.weights.len();
        for l in 0..nl {
            let (din, dout) = (self.widths[l], self.widths[l + 1]);
            let mut out: Vec<f64> = (0..n).flat_map(|_| self.biases[l].iter().copied()).collect();
            gemm(n, din, dout, &inputs[l], false, &self.weights[l], true, &mut out, 1.0);
            if l + 1 < nl {
                for v in &mut out {
                    *v = v.max(0.0);
                }
                inputs.push(out);
            } else {
                return Activations { inputs, logits: out };
            }
        }
        unreachable!("classifier has at least one layer")
    }

    pub fn logits(&self, features: &PixelFeatures) -> Result<Vec<f64>> {
        if features.c != self.feature_dim() {
            return Err(Error::Usage(format!(
                "feature dimension {} does not match classifier input {}",
                features.c,
                self.feature_dim()
            )));
        }
        let n = features.h * features.w;
        Ok(self.forward(self.standardize(&features.data), n).logits)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "widths": self.widths,
            "seed": self.seed,
            "layers": self.layers,
            "missing_classes": self.missing_classes,
        });
        let mut ck = Checkpoint::new("classifier", meta);
        let c = self.feature_dim();
        ck.push("input.mean", vec![c], self.mean.clone());
        ck.push("input.inv_std", vec![c], self.inv_std.clone());
        for l in 0..self.weights.len() {
            ck.push(
                format!("layer{l}.weight"),
                vec![self.widths[l + 1], self.widths[l]],
                self.weights[l].clone(),
            );
            ck.push(
                format!("layer{l}.bias"),
                vec![self.widths[l + 1]],
                self.biases[l].clone(),
            );
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: &Path) -> Result<Self> {
        ck.expect_kind("classifier", file)?;
        let meta = |k: &str| ck.meta.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let widths: Vec<usize> =
            serde_json::from_value(meta("widths")).map_err(|e| Error::parse(file, "meta.widths", e))?;
        if widths.len() < 2 {
            return Err(Error::parse(
                file,
                "meta.widths",
                "need at least input and output widths",
            ));
        }
        let tensor = |name: &str, len: usize| -> Result<Vec<f64>> {
            let t = ck.get(name).ok_or_else(|| Error::parse(file, name, "tensor missing"))?;
            if t.data.len() != len {
                return Err(Error::parse(
                    file,
                    name,
                    format!("expected {len} values, found {}", t.data.len()),
                ));
            }
            Ok(t.data.clone())
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            weights.push(tensor(&format!("layer{l}.weight"), widths[l] * widths[l + 1])?);
            biases.push(tensor(&format!("layer{l}.bias"), widths[l + 1])?);
        }
        Ok(PixelClassifier {
            seed: serde_json::from_value(meta("seed")).map_err(|e| Error::parse(file, "meta.seed", e))?,
            layers: serde_json::from_value(meta("layers")).map_err(|e| Error::parse(file, "meta.layers", e))?,
            missing_classes: serde_json::from_value(meta("missing_classes")).unwrap_or_default(),
            mean: tensor("input.mean", widths[0])?,
            inv_std: tensor("input.inv_std", widths[0])?,
            widths,
            weights,
            biases,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PixelClassifier::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn labels_from_logits(logits: &[f64], h: usize, w: usize, k: usize) -> LabelMap {
    LabelMap::from_vec(h, w, logits.chunks(k).map(|r| argmax(r) as u8).collect())
}

pub fn predict(classifier: &PixelClassifier, features: &PixelFeatures) -> Result<LabelMap> {
    let logits = classifier.logits(features)?;
    Ok(labels_from_logits(&logits, features.h, features.w, classifier.k()))
}

pub fn train_classifier(
    features: &[PixelFeatures],
    labels: &[LabelMap],
    k: usize,
    config: &ClassifierConfig,
) -> Result<PixelClassifier> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::Usage(
            "classifier training needs one label map per feature map and at least one pair".into(),
        ));
    }
    if config.epochs == 0 || config.batch_size == 0 || !(config.step_size > 0.0) {
        return Err(Error::Config(
            "classifier epochs, batch size and step size must be positive".into(),
        ));
    }
    let c = features[0].c;
    for (f, l) in features.iter().zip(labels) {
        if f.c != c || (f.h, f.w) != (l.h, l.w) {
            return Err(Error::Usage(
                "feature maps must share a dimension and match their label maps".into(),
            ));
        }
        l.validate(k)?;
    }

    let total_px: usize = features.iter().map(|f| f.h * f.w).sum();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for f in features {
        for row in f.data.chunks(c) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / total_px as f64;
            }
        }
    }
    for f in features {
        for row in f.data.chunks(c) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / total_px as f64;
            }
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();

    let mut counts = vec![0u64; k];
    for l in labels {
        for (c, n) in counts.iter_mut().zip(l.histogram(k)) {
            *c += n;
        }
    }
    let missing_classes: Vec<usize> = (0..k).filter(|&i| counts[i] == 0).collect();
    if !missing_classes.is_empty() {
        log::warn!("classes {missing_classes:?} have no training pixels and will score IoU 0");
    }

    let mut widths = vec![c];
    widths.extend(&config.hidden);
    widths.push(k);
    let mut init = rng::keyed(config.seed, "classifier-init", "");
    let weights: Vec<Vec<f64>> = (0..widths.len() - 1)
        .map(|l| rng::normal_vec(&mut init, widths[l] * widths[l + 1], (2.0 / widths[l] as f64).sqrt()))
        .collect();
    let biases = (0..widths.len() - 1).map(|l| vec![0.0; widths[l + 1]]).collect();
    let mut clf = PixelClassifier {
        widths,
        seed: config.seed,
        layers: config.layers.clone(),
        mean,
        inv_std,
        weights,
        biases,
        missing_classes,
    };

    // (image, pixel) pairs; the per-image cap is redrawn every epoch.
    let epoch_pixels = |epoch: usize| -> Vec<(usize, usize)> {
        let mut r = rng::keyed_idx(config.seed, "classifier-pixels", epoch as u64);
        let mut out = Vec::new();
        for (i, f) in features.iter().enumerate() {
            let mut px: Vec<usize> = (0..f.h * f.w).collect();
            if config.pixels_per_image > 0 && px.len() > config.pixels_per_image {
                px.shuffle(&mut r);
                px.truncate(config.pixels_per_image);
            }
            out.extend(px.into_iter().map(|p| (i, p)));
        }
        out.shuffle(&mut r);
        out
    };
    let steps_per_epoch = epoch_pixels(0).len().div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs) as f64;
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        for batch in epoch_pixels(epoch).chunks(config.batch_size) {
            let lr = config.step_size * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            step += 1;
            let mut x = Vec::with_capacity(batch.len() * c);
            let mut y = Vec::with_capacity(batch.len());
            for &(i, p) in batch {
                x.extend_from_slice(&features[i].data[p * c..][..c]);
                y.push(labels[i].data[p] as usize);
            }
            let x = clf.standardize(&x);
            let loss = sgd_step(&mut clf, x, &y, lr);
            if !loss.is_finite() {
                return Err(Error::Training {
                    stage: "classifier".into(),
                    iteration: step,
                    reason: format!("non-finite cross-entropy {loss}"),
                });
            }
        }
    }
    Ok(clf)
}

/// One step of mean cross-entropy SGD; returns the batch loss.
fn sgd_step(clf: &mut PixelClassifier, x: Vec<f64>, y: &[usize], lr: f64) -> f64 {
    let n = y.len();
    let k = clf.k();
    let act = clf.forward(x, n);
    let mut delta = act.logits;
    let mut loss = 0.0;
    for (row, &t) in delta.chunks_mut(k).zip(y) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        loss -= (row[t] / z).ln();
        for v in row.iter_mut() {
            *v /= z * n as f64;
        }
        row[t] -= 1.0 / n as f64;
    }
    for l in (0..clf.weights.len()).rev() {
        let (din, dout) = (clf.widths[l], clf.widths[l + 1]);
        let input = &act.inputs[l];
        let mut gw = vec![0.0; dout * din];
        gemm(dout, n, din, &delta, true, input, false, &mut gw, 0.0);
        let mut gb = vec![0.0; dout];
        for row in delta.chunks(dout) {
            for (g, d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        if l > 0 {
            let mut below = vec![0.0; n * din];
            gemm(n, dout, din, &delta, false, &clf.weights[l], false, &mut below, 0.0);
            for (b, a) in below.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *b = 0.0;
                }
            }
            delta = below;
        }
        for (p, g) in clf.weights[l].iter_mut().zip(&gw) {
            *p -= lr * g;
        }
        for (p, g) in clf.biases[l].iter_mut().zip(&gb) {
            *p -= lr * g;
        }
    }
    loss / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DecoderConfig;
    use crate::tensor::Tensor3;

    #[test]
    fn default_decoder_gives_176_features() {
        let cfg = DecoderConfig::default();
        let dec = Decoder::single_stream(&cfg, 0).unwrap();
        let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 0, "x");
        let f = extract_pixel_features(&dec, &w, None).unwrap();
        assert_eq!((f.h, f.w, f.c), (32, 32, 176));
        assert!(f.data.iter().all(|v| v.is_finite()));
        assert_eq!(f, extract_pixel_features(&dec, &w, None).unwrap());
        let sub = extract_pixel_features(&dec, &w, Some(&[3])).unwrap();
        assert_eq!(sub.c, 16);
    }

    #[test]
    fn constant_maps_stay_constant() {
        let stack = FeatureStack(vec![Tensor3::filled(2, 4, 4, 0.7), Tensor3::filled(1, 8, 8, -1.5)]);
        let f = features_from_stack(&stack, 16, 16, None).unwrap();
        for p in f.data.chunks(3) {
            assert_eq!(p, [0.7, 0.7, -1.5]);
        }
    }

    /// Independent bilinear reference: half-pixel centres, edge clamping.
    fn bilinear_ref(src: &[[f64; 2]; 2], y: usize, x: usize) -> f64 {
        let coord = |o: usize| ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 1.0);
        let (fy, fx) = (coord(y), coord(x));
        src[0][0] * (1.0 - fy) * (1.0 - fx)
            + src[0][1] * (1.0 - fy) * fx
            + src[1][0] * fy * (1.0 - fx)
            + src[1][1] * fy * fx
    }

    #[test]
    fn two_block_stack_matches_hand_bilinear() {
        let src = [[1.0, 3.0], [-2.0, 5.0]];
        let s0 = Tensor3::from_vec(1, 2, 2, vec![1.0, 3.0, -2.0, 5.0]);
        let s1 = Tensor3::from_vec(1, 4, 4, (0..16).map(|v| v as f64).collect());
        let f = features_from_stack(&FeatureStack(vec![s0, s1]), 4, 4, None).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let px = f.pixel(y, x);
                assert!((px[0] - bilinear_ref(&src, y, x)).abs() < 1e-15, "({y},{x})");
                assert_eq!(px[1], (y * 4 + x) as f64);
            }
        }
        // (1,1) by hand: 0.75·0.75·1 + 0.75·0.25·3 + 0.25·0.75·(−2) + 0.25·0.25·5
        assert!((f.pixel(1, 1)[0] - 1.0625).abs() < 1e-15);
    }

    fn separable() -> (Vec<PixelFeatures>, Vec<LabelMap>) {
        let (h, w) = (8, 8);
        let mut data = Vec::new();
        let mut lab = Vec::new();
        for p in 0..h * w {
            let a = ((p * 37) % 17) as f64 / 17.0 - 0.5;
            let b = ((p * 11) % 13) as f64 / 13.0 - 0.5;
            data.extend([a, b, a * b]);
            lab.push(u8::from(a + 0.3 * b > 0.05));
        }
        (
            vec![PixelFeatures { h, w, c: 3, data }],
            vec![LabelMap::from_vec(h, w, lab)],
        )
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let (f, l) = separable();
        let cfg = ClassifierConfig {
            epochs: 200,
            batch_size: 16,
            ..Default::default()
        };
        let clf = train_classifier(&f, &l, 2, &cfg).unwrap();
        assert_eq!(predict(&clf, &f[0]).unwrap(), l[0]);
        assert_eq!(clf, train_classifier(&f, &l, 2, &cfg).unwrap());
    }

    #[test]
    fn absent_class_is_reported() {
        let (f, l) = separable();
        let clf = train_classifier(
            &f,
            &l,
            3,
            &ClassifierConfig {
                epochs: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(clf.missing_classes, vec![2]);
        assert_eq!(clf.k(), 3);
    }

    #[test]
    fn argmax_rules() {
        assert_eq!(argmax(&[0.1, 2.0, -1.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 3.0, 1.0, 3.0]), 2);
        let row = [0.3, -1.0, 0.9, 0.2];
        let shifted: Vec<f64> = row.iter().map(|v| v + 17.5).collect();
        assert_eq!(argmax(&row), argmax(&shifted));
    }

    #[test]
    fn dimension_mismatch_is_usage_error() {
        let (f, l) = separable();
        let clf = train_classifier(
            &f,
            &l,
            2,
            &ClassifierConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let bad = PixelFeatures {
            h: 1,
            w: 1,
            c: 4,
            data: vec![0.0; 4],
        };
        assert!(matches!(predict(&clf, &bad), Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let (f, l) = separable();
        let clf = train_classifier(
            &f,
            &l,
            2,
            &ClassifierConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();
        let ck = clf.to_checkpoint();
        let back = PixelClassifier::from_checkpoint(
            &Checkpoint::from_bytes(&ck.to_bytes(), Path::new("c")).unwrap(),
            Path::new("c"),
        )
        .unwrap();
        assert_eq!(back, clf);
    }
}
