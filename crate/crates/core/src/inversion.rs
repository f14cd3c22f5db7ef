//! The generator prior and the image-to-latent encoder.
//!
//! The prior is obtained by training a convolutional encoder and a
//! single-stream decoder jointly as an autoencoder on unlabeled images.
//! Encoding an image then means taking the encoder's amortized prediction
//! and refining it by gradient descent on the reconstruction loss through
//! the image branch, returning the best iterate seen.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::generator::{Branch, Decoder, DecoderConfig, LatentCode};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::ploss::PerceptualFeatures;
use crate::rng;
use crate::tensor::{avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, gemm, lrelu, Tensor3, LRELU_SLOPE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Fraction of images held out to measure reconstruction.
    pub heldout_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 2000,
            batch_size: 8,
            step_size: 1e-3,
            seed: 0,
            heldout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentInit {
    EncoderOutput,
    MeanLatent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InvertConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub init: LatentInit,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig {
            iterations: 300,
            step_size: 0.05,
            init: LatentInit::EncoderOutput,
        }
    }
}

/// Perceptual distance plus mean squared error; the objective for both
/// pretraining and latent refinement.
pub fn reconstruction_loss_and_grad(
    pf: &PerceptualFeatures,
    out: &Tensor3,
    target: &crate::ploss::PerceptualTarget,
) -> (f64, Tensor3) {
    let (pl, mut g) = pf.loss_and_grad(out, target);
    let n = out.data.len() as f64;
    let mut mse = 0.0;
    for ((gv, o), t) in g.data.iter_mut().zip(&out.data).zip(&target.image().data) {
        let d = o - t;
        mse += d * d;
        *gv += 2.0 * d / n;
    }
    (pl + mse / n, g)
}

/// Mean over pixels of the Euclidean RGB distance.
pub fn mean_pixel_l2(a: &Tensor3, b: &Tensor3) -> f64 {
    let hw = a.hw();
    let mut s = 0.0;
    for p in 0..hw {
        let mut d2 = 0.0;
        for c in 0..a.c {
            let d = a.data[c * hw + p] - b.data[c * hw + p];
            d2 += d * d;
        }
        s += d2.sqrt();
    }
    s / hw as f64
}

pub fn mean_abs_error(a: &Tensor3, b: &Tensor3) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
struct EncTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Strided-by-pooling convolutional encoder predicting every latent row.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    resolution: usize,
    num_styles: usize,
    latent_dim: usize,
    channels: Vec<usize>,
    /// conv weight/bias per stage, then the linear head weight/bias.
    tensors: Vec<EncTensor>,
    pub mean_latent: LatentCode,
}

struct EncCache {
    stages: Vec<(Vec<f64>, Tensor3)>,
    flat: Vec<f64>,
}

impl Encoder {
    pub fn new(resolution: usize, decoder: &DecoderConfig, seed: u64) -> Result<Self> {
        if resolution != decoder.output_resolution {
            return Err(Error::Config(format!(
                "encoder resolution {resolution} differs from decoder output {}",
                decoder.output_resolution
            )));
        }
        let n_stages = (resolution / decoder.base_resolution).trailing_zeros() as usize;
        let channels: Vec<usize> = (0..n_stages).map(|s| (16usize << s).min(64)).collect();
        let mut r = rng::keyed(seed, "encoder-init", "");
        let mut tensors = Vec::new();
        let mut c_in = 3;
        for (s, &c) in channels.iter().enumerate() {
            tensors.push(EncTensor {
                name: format!("encoder.stage{s}.weight"),
                shape: vec![c, c_in * 9],
                data: rng::normal_vec(&mut r, c * c_in * 9, (2.0 / (c_in * 9) as f64).sqrt()),
            });
            tensors.push(EncTensor {
                name: format!("encoder.stage{s}.bias"),
                shape: vec![c],
                data: vec![0.0; c],
            });
            c_in = c;
        }
        let flat = c_in * decoder.base_resolution * decoder.base_resolution;
        let out = decoder.num_styles() * decoder.latent_dim;
        tensors.push(EncTensor {
            name: "encoder.head.weight".into(),
            shape: vec![out, flat],
            data: rng::normal_vec(&mut r, out * flat, 1.0 / (flat as f64).sqrt()),
        });
        tensors.push(EncTensor {
            name: "encoder.head.bias".into(),
            shape: vec![out],
            data: vec![0.0; out],
        });
        Ok(Encoder {
            resolution,
            num_styles: decoder.num_styles(),
            latent_dim: decoder.latent_dim,
            channels,
            tensors,
            mean_latent: LatentCode::zeros(decoder.num_styles(), decoder.latent_dim),
        })
    }

    fn forward_cached(&self, image: &Tensor3) -> (LatentCode, EncCache) {
        let mut x = image.clone();
        for v in &mut x.data {
            *v = 2.0 * *v - 1.0;
        }
        let mut stages = Vec::with_capacity(self.channels.len());
        for s in 0..self.channels.len() {
            let (pre, cols) = conv3x3(&x, &self.tensors[2 * s].data, &self.tensors[2 * s + 1].data);
            let mut act = pre.clone();
            for v in &mut act.data {
                *v = lrelu(*v);
            }
            x = avg_pool2(&act);
            stages.push((cols, pre));
        }
        let ns = self.channels.len();
        let (hw, hb) = (&self.tensors[2 * ns].data, &self.tensors[2 * ns + 1].data);
        let out_dim = hb.len();
        let mut w = hb.clone();
        gemm(out_dim, x.data.len(), 1, hw, false, &x.data, false, &mut w, 1.0);
        (
            LatentCode::from_vec(self.num_styles, self.latent_dim, w),
            EncCache { stages, flat: x.data },
        )
    }

    pub fn encode_amortized(&self, image: &Tensor3) -> LatentCode {
        self.forward_cached(image).0
    }

    fn backward(&self, cache: &EncCache, dw: &LatentCode, grads: &mut [Vec<f64>]) {
        let ns = self.channels.len();
        let out_dim = dw.data.len();
        let flat_len = cache.flat.len();
        gemm(
            out_dim,
            1,
            flat_len,
            &dw.data,
            false,
            &cache.flat,
            false,
            &mut grads[2 * ns],
            1.0,
        );
        for (g, d) in grads[2 * ns + 1].iter_mut().zip(&dw.data) {
            *g += d;
        }
        let mut dflat = vec![0.0; flat_len];
        gemm(
            flat_len,
            out_dim,
            1,
            &self.tensors[2 * ns].data,
            true,
            &dw.data,
            false,
            &mut dflat,
            0.0,
        );
        let (_, last_pre) = &cache.stages[ns - 1];
        let mut d = Tensor3::from_vec(last_pre.c, last_pre.h / 2, last_pre.w / 2, dflat);
        for s in (0..ns).rev() {
            let (cols, pre) = &cache.stages[s];
            let mut dact = avg_pool2_backward(&d);
            for (g, p) in dact.data.iter_mut().zip(&pre.data) {
                if *p <= 0.0 {
                    *g *= LRELU_SLOPE;
                }
            }
            let c_in = if s == 0 { 3 } else { self.channels[s - 1] };
            let (gw, rest) = grads[2 * s..].split_at_mut(1);
            let dx = conv3x3_backward(
                &dact,
                cols,
                &self.tensors[2 * s].data,
                c_in,
                Some(&mut gw[0]),
                Some(&mut rest[0]),
                s > 0,
            );
            if let Some(dx) = dx {
                d = dx;
            }
        }
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "resolution": self.resolution,
            "num_styles": self.num_styles,
            "latent_dim": self.latent_dim,
            "channels": self.channels,
        });
        let mut ck = Checkpoint::new("encoder", meta);
        for t in &self.tensors {
            ck.push(t.name.clone(), t.shape.clone(), t.data.clone());
        }
        ck.push(
            "encoder.mean_latent",
            vec![self.num_styles, self.latent_dim],
            self.mean_latent.data.clone(),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: &Path) -> Result<Self> {
        ck.expect_kind("encoder", file)?;
        let field = |k: &str| -> Result<usize> {
            ck.meta[k]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::parse(file, format!("meta.{k}"), "missing integer"))
        };
        let channels: Vec<usize> =
            serde_json::from_value(ck.meta["channels"].clone()).map_err(|e| Error::parse(file, "meta.channels", e))?;
        let (num_styles, latent_dim) = (field("num_styles")?, field("latent_dim")?);
        let mut tensors = Vec::new();
        for t in &ck.tensors {
            if t.name == "encoder.mean_latent" {
                continue;
            }
            tensors.push(EncTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: t.data.clone(),
            });
        }
        if tensors.len() != 2 * channels.len() + 2 {
            return Err(Error::parse(file, "tensors", "unexpected encoder tensor count"));
        }
        let ml = ck
            .get("encoder.mean_latent")
            .ok_or_else(|| Error::parse(file, "encoder.mean_latent", "tensor missing"))?;
        Ok(Encoder {
            resolution: field("resolution")?,
            num_styles,
            latent_dim,
            channels,
            tensors,
            mean_latent: LatentCode::from_vec(num_styles, latent_dim, ml.data.clone()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Encoder::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
    pub final_heldout_pixel_l2: f64,
    pub train_loss: Vec<f64>,
}

pub struct Pretrained {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub report: PretrainReport,
}

fn heldout_loss(enc: &Encoder, dec: &Decoder, pf: &PerceptualFeatures, images: &[Tensor3]) -> (f64, f64) {
    let mut loss = 0.0;
    let mut l2 = 0.0;
    for img in images {
        let w = enc.encode_amortized(img);
        let out = dec.forward(&w, Branch::Img).image;
        loss += reconstruction_loss_and_grad(pf, &out, &pf.target(img)).0;
        l2 += mean_pixel_l2(&out, img);
    }
    let n = images.len() as f64;
    (loss / n, l2 / n)
}

/// Trains encoder and single-stream decoder jointly as an autoencoder.
pub fn pretrain(
    images: &[Tensor3],
    decoder_config: &DecoderConfig,
    config: &PretrainConfig,
    pf: &PerceptualFeatures,
) -> Result<Pretrained> {
    if images.len() < 2 {
        return Err(Error::Config("pretraining needs at least two images".into()));
    }
    if config.iterations == 0 || config.batch_size == 0 || !(config.step_size > 0.0) {
        return Err(Error::Config(
            "pretrain iterations, batch size and step size must be positive".into(),
        ));
    }
    let res = images[0].h;
    let n_held = ((images.len() as f64 * config.heldout_fraction).round() as usize).clamp(1, images.len() - 1);
    let (train, held) = images.split_at(images.len() - n_held);

    let mut dec = Decoder::single_stream(decoder_config, config.seed)?;
    let mut enc = Encoder::new(res, decoder_config, config.seed)?;
    let all_mask = vec![true; dec.num_params()];
    let mut dec_opt = Optimizer::new(OptimizerConfig::adam(config.step_size), dec.num_params());
    let mut enc_opt = Optimizer::new(OptimizerConfig::adam(config.step_size), enc.tensors.len());

    let (initial, _) = heldout_loss(&enc, &dec, pf, held);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let mut r = rng::keyed_idx(config.seed, "pretrain-batch", it as u64);
        let mut dgrads = dec.grads_for(&all_mask);
        let mut egrads = enc.zero_grads();
        let mut batch_loss = 0.0;
        let scale = 1.0 / config.batch_size as f64;
        for _ in 0..config.batch_size {
            let img = &train[r.gen_range(0..train.len())];
            let (w, cache) = enc.forward_cached(img);
            let fwd = dec.forward(&w, Branch::Img);
            let (loss, mut g) = reconstruction_loss_and_grad(pf, &fwd.image, &pf.target(img));
            batch_loss += loss * scale;
            for v in &mut g.data {
                *v *= scale;
            }
            let dw = dec
                .backward(&fwd, &w, &g, &mut dgrads, true)
                .expect("latent gradient requested");
            enc.backward(&cache, &dw, &mut egrads);
        }
        if !batch_loss.is_finite() || !dgrads.is_finite() {
            return Err(Error::Training {
                stage: "pretrain".into(),
                iteration: it,
                reason: format!("non-finite loss {batch_loss}"),
            });
        }
        trace.push(batch_loss);
        dec_opt.begin_step();
        for (i, g) in dgrads.0.iter().enumerate() {
            dec_opt.update(i, &mut dec.param_mut(crate::generator::ParamId(i)).data, g);
        }
        enc_opt.begin_step();
        for (i, g) in egrads.iter().enumerate() {
            enc_opt.update(i, &mut enc.tensors[i].data, g);
        }
        if it % 100 == 0 {
            log::debug!("pretrain iter {it}: loss {batch_loss:.5}");
        }
    }

    let mut mean = LatentCode::zeros(decoder_config.num_styles(), decoder_config.latent_dim);
    for img in images {
        for (m, v) in mean.data.iter_mut().zip(enc.encode_amortized(img).data) {
            *m += v / images.len() as f64;
        }
    }
    enc.mean_latent = mean;
    let (final_loss, final_l2) = heldout_loss(&enc, &dec, pf, held);
    Ok(Pretrained {
        encoder: enc,
        decoder: dec,
        report: PretrainReport {
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
            final_heldout_pixel_l2: final_l2,
            train_loss: trace,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub latent: LatentCode,
    pub init_loss: f64,
    pub final_loss: f64,
}

/// Latent code for `image`: the encoder prediction (or mean latent) refined
/// with Adam on the reconstruction loss through the image branch. The
/// returned code is the best iterate, so `final_loss <= init_loss`.
pub fn encode(
    image: &Tensor3,
    encoder: &Encoder,
    decoder: &Decoder,
    config: &InvertConfig,
    pf: &PerceptualFeatures,
) -> Result<Inversion> {
    let res = decoder.config().output_resolution;
    if image.shape() != (3, res, res) {
        return Err(Error::Usage(format!(
            "image shape {:?} does not match decoder output 3x{res}x{res}",
            image.shape()
        )));
    }
    let mut w = match config.init {
        LatentInit::EncoderOutput => encoder.encode_amortized(image),
        LatentInit::MeanLatent => encoder.mean_latent.clone(),
    };
    decoder.check_latent(&w)?;
    let target = pf.target(image);
    let no_params = vec![false; decoder.num_params()];
    let mut opt = Optimizer::new(OptimizerConfig::adam(config.step_size), 1);
    let mut best = (f64::INFINITY, w.clone());
    let mut init_loss = f64::NAN;
    for it in 0..=config.iterations {
        let fwd = decoder.forward(&w, Branch::Img);
        let (loss, g) = reconstruction_loss_and_grad(pf, &fwd.image, &target);
        if !loss.is_finite() {
            return Err(Error::Inversion {
                iteration: it,
                reason: format!("non-finite loss {loss}"),
            });
        }
        if it == 0 {
            init_loss = loss;
        }
        if loss < best.0 {
            best = (loss, w.clone());
        }
        if it == config.iterations {
            break;
        }
        let mut grads = decoder.grads_for(&no_params);
        let dw = decoder
            .backward(&fwd, &w, &g, &mut grads, true)
            .expect("latent gradient requested");
        opt.begin_step();
        opt.update(0, &mut w.data, &dw.data);
    }
    Ok(Inversion {
        latent: best.1,
        init_loss,
        final_loss: best.0,
    })
}
