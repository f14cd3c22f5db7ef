//! Style-modulated synthesis network with a shared coarse trunk and two fine
//! branches.
//!
//! Each block upsamples its input by two (except the first, which starts
//! from a learned constant), applies a style-modulated and demodulated 3×3
//! convolution followed by leaky ReLU, and emits an RGB contribution through
//! a modulated 1×1 "toRGB" head. RGB contributions are accumulated across
//! resolutions by bilinear upsampling; the final image is
//! `clamp(0.5·acc + 0.5, 0, 1)`.
//!
//! Latent row `b` styles both the convolution and the toRGB head of block
//! `b`, so the latent code has one row per block.
//!
//! Parameters live in a flat store. Blocks at or below the shared cutoff
//! resolution keep one convolution referenced by both branches; every
//! branch has its own toRGB head at every block.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{
    col2im3x3, gemm, im2col3x3, lrelu, resize_bilinear, resize_bilinear_backward, Tensor3, LRELU_SLOPE,
};

const DEMOD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamTag {
    Shared,
    Seg,
    Img,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Conv,
    #[serde(rename = "torgb")]
    ToRgb,
}

/// Which output a forward pass produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Seg,
    Img,
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamTag::Shared => "shared",
            StreamTag::Seg => "seg",
            StreamTag::Img => "img",
        })
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Conv => "conv",
            Group::ToRgb => "torgb",
        })
    }
}

impl FromStr for StreamTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(StreamTag::Shared),
            "seg" => Ok(StreamTag::Seg),
            "img" => Ok(StreamTag::Img),
            _ => Err(Error::Usage(format!("unknown stream '{s}'"))),
        }
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(Group::Conv),
            "torgb" => Ok(Group::ToRgb),
            _ => Err(Error::Usage(format!("unknown parameter group '{s}'"))),
        }
    }
}

impl FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" => Ok(Branch::Seg),
            "img" => Ok(Branch::Img),
            _ => Err(Error::Usage(format!("unknown stream '{s}', expected seg or img"))),
        }
    }
}

impl Branch {
    fn index(self) -> usize {
        match self {
            Branch::Seg => 0,
            Branch::Img => 1,
        }
    }

    pub fn tag(self) -> StreamTag {
        match self {
            Branch::Seg => StreamTag::Seg,
            Branch::Img => StreamTag::Img,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub base_resolution: usize,
    pub output_resolution: usize,
    pub shared_cutoff_resolution: usize,
    /// Output channels of each block, coarsest first.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            base_resolution: 4,
            output_resolution: 32,
            shared_cutoff_resolution: 8,
            channels: vec![64, 64, 32, 16],
            latent_dim: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let pow2 = |v: usize| v >= 1 && v.is_power_of_two();
        if !pow2(self.base_resolution) || !pow2(self.output_resolution) || !pow2(self.shared_cutoff_resolution) {
            return Err(Error::Config("decoder resolutions must be powers of two".into()));
        }
        if !(self.base_resolution <= self.shared_cutoff_resolution
            && self.shared_cutoff_resolution < self.output_resolution)
        {
            return Err(Error::Config(format!(
                "need base ({}) <= shared cutoff ({}) < output ({})",
                self.base_resolution, self.shared_cutoff_resolution, self.output_resolution
            )));
        }
        if self.output_resolution > 64 {
            return Err(Error::Config("output resolution above 64 is not supported".into()));
        }
        if self.channels.len() != self.num_blocks() {
            return Err(Error::Config(format!(
                "channel schedule has {} entries, resolutions {}..{} need {}",
                self.channels.len(),
                self.base_resolution,
                self.output_resolution,
                self.num_blocks()
            )));
        }
        if self.channels.contains(&0) || self.latent_dim == 0 {
            return Err(Error::Config("channel counts and latent_dim must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        (self.output_resolution / self.base_resolution).trailing_zeros() as usize + 1
    }

    pub fn resolutions(&self) -> Vec<usize> {
        (0..self.num_blocks()).map(|b| self.base_resolution << b).collect()
    }

    /// Number of latent rows (style-injection sites).
    pub fn num_styles(&self) -> usize {
        self.num_blocks()
    }

    pub fn feature_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    fn block_input_channels(&self, b: usize) -> usize {
        if b == 0 {
            self.channels[0]
        } else {
            self.channels[b - 1]
        }
    }
}

/// Per-block style vectors, `n × c` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub n: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LatentCode {
    pub fn zeros(n: usize, c: usize) -> Self {
        LatentCode {
            n,
            c,
            data: vec![0.0; n * c],
        }
    }

    pub fn from_vec(n: usize, c: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c, "latent length");
        LatentCode { n, c, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.c..(i + 1) * self.c]
    }

    pub fn random(n: usize, c: usize, seed: u64, id: &str) -> Self {
        let mut r = rng::keyed(seed, "latent", id);
        LatentCode::from_vec(n, c, rng::normal_vec(&mut r, n * c, 1.0))
    }
}

/// Pre-toRGB activations of every block of one branch, coarsest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack(pub Vec<Tensor3>);

impl FeatureStack {
    pub fn total_channels(&self) -> usize {
        self.0.iter().map(|t| t.c).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub stream: StreamTag,
    pub group: Group,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadIds {
    style_weight: usize,
    style_bias: usize,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct BlockRoute {
    res: usize,
    c_in: usize,
    c_out: usize,
    conv: HeadIds,
    rgb: HeadIds,
}

/// The decoder. A single-stream (pretrained) decoder tags every parameter
/// `shared` and routes both branches through the same blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    params: Vec<Param>,
    const_id: usize,
    routes: [Vec<BlockRoute>; 2],
}

/// Cached intermediates of one forward pass.
#[derive(Clone, Debug)]
struct BlockCache {
    x_in: Tensor3,
    style: Vec<f64>,
    cols: Vec<f64>,
    z: Tensor3,
    demod: Vec<f64>,
    pre: Tensor3,
    act: Tensor3,
    rgb_style: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub branch: Branch,
    pub image: Tensor3,
    acc: Tensor3,
    blocks: Vec<BlockCache>,
}

impl Forward {
    pub fn features(&self) -> FeatureStack {
        FeatureStack(self.blocks.iter().map(|b| b.act.clone()).collect())
    }

    pub fn feature(&self, block: usize) -> &Tensor3 {
        &self.blocks[block].act
    }
}

/// Gradient buffers aligned with the decoder's parameter list; parameters
/// that were not requested hold an empty vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        let g = &self.0[id.0];
        (!g.is_empty()).then_some(g.as_slice())
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            if b.is_empty() {
                continue;
            }
            if a.is_empty() {
                *a = b.iter().map(|v| v * scale).collect();
            } else {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += scale * y;
                }
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

fn affine(weight: &[f64], bias: &[f64], w: &[f64]) -> Vec<f64> {
    let c = w.len();
    bias.iter()
        .enumerate()
        .map(|(i, &b)| {
            b + weight[i * c..(i + 1) * c]
                .iter()
                .zip(w)
                .map(|(a, x)| a * x)
                .sum::<f64>()
        })
        .collect()
}

impl Decoder {
    fn build(config: &DecoderConfig, two_stream: bool, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let latent = config.latent_dim;
        let mut push = |name: String, stream, group, shape: Vec<usize>, data: Vec<f64>| {
            params.push(Param {
                name,
                stream,
                group,
                shape,
                data,
            });
            params.len() - 1
        };
        let mut r = rng::keyed(seed, "decoder-init", "");
        let base = config.base_resolution;
        let c0 = config.channels[0];
        let const_id = push(
            format!("block{base}.shared.conv.const"),
            StreamTag::Shared,
            Group::Conv,
            vec![c0, base, base],
            rng::normal_vec(&mut r, c0 * base * base, 1.0),
        );

        let lat_std = 1.0 / (latent as f64).sqrt();
        let head = |push: &mut dyn FnMut(String, StreamTag, Group, Vec<usize>, Vec<f64>) -> usize,
                    r: &mut rng::Rng,
                    res: usize,
                    stream: StreamTag,
                    group: Group,
                    c_in: usize,
                    c_out: usize|
         -> HeadIds {
            let p = format!("block{res}.{stream}.{group}");
            let (wshape, wstd, sdim) = match group {
                Group::Conv => (vec![c_out, c_in * 9], 1.0, c_in),
                Group::ToRgb => (vec![3, c_out], 0.2 / (c_out as f64).sqrt(), c_out),
            };
            let out_dim = wshape[0];
            let style_std = match group {
                Group::Conv => lat_std,
                Group::ToRgb => 0.5 * lat_std,
            };
            HeadIds {
                style_weight: push(
                    format!("{p}.style_weight"),
                    stream,
                    group,
                    vec![sdim, latent],
                    rng::normal_vec(r, sdim * latent, style_std),
                ),
                style_bias: push(format!("{p}.style_bias"), stream, group, vec![sdim], vec![1.0; sdim]),
                weight: push(
                    format!("{p}.weight"),
                    stream,
                    group,
                    wshape.clone(),
                    rng::normal_vec(r, wshape.iter().product(), wstd),
                ),
                bias: push(format!("{p}.bias"), stream, group, vec![out_dim], vec![0.0; out_dim]),
            }
        };

        let mut seg = Vec::new();
        let mut img = Vec::new();
        for (b, res) in config.resolutions().into_iter().enumerate() {
            let c_in = config.block_input_channels(b);
            let c_out = config.channels[b];
            let route = |conv, rgb| BlockRoute {
                res,
                c_in,
                c_out,
                conv,
                rgb,
            };
            if !two_stream {
                let conv = head(&mut push, &mut r, res, StreamTag::Shared, Group::Conv, c_in, c_out);
                let rgb = head(&mut push, &mut r, res, StreamTag::Shared, Group::ToRgb, c_in, c_out);
                seg.push(route(conv, rgb));
                img.push(route(conv, rgb));
                continue;
            }
            let (seg_conv, img_conv) = if res <= config.shared_cutoff_resolution {
                let c = head(&mut push, &mut r, res, StreamTag::Shared, Group::Conv, c_in, c_out);
                (c, c)
            } else {
                (
                    head(&mut push, &mut r, res, StreamTag::Seg, Group::Conv, c_in, c_out),
                    head(&mut push, &mut r, res, StreamTag::Img, Group::Conv, c_in, c_out),
                )
            };
            let seg_rgb = head(&mut push, &mut r, res, StreamTag::Seg, Group::ToRgb, c_in, c_out);
            let img_rgb = head(&mut push, &mut r, res, StreamTag::Img, Group::ToRgb, c_in, c_out);
            seg.push(route(seg_conv, seg_rgb));
            img.push(route(img_conv, img_rgb));
        }
        Ok(Decoder {
            config: config.clone(),
            params,
            const_id,
            routes: [seg, img],
        })
    }

    /// Randomly initialized single-stream decoder (the pretraining start point).
    pub fn single_stream(config: &DecoderConfig, seed: u64) -> Result<Self> {
        Decoder::build(config, false, seed)
    }

    /// Two-stream decoder whose parameters are copied from a single-stream
    /// one: coarse convolutions become the shared trunk, fine convolutions
    /// and all toRGB heads are duplicated into both branches.
    pub fn init_two_stream(config: &DecoderConfig, pretrained: &Decoder) -> Result<Self> {
        let mut out = Decoder::build(config, true, 0)?;
        for p in &mut out.params {
            let src_name = pretrained_name(&p.name);
            let src = pretrained
                .params
                .iter()
                .find(|q| q.name == src_name)
                .ok_or_else(|| Error::Shape {
                    block: src_name.clone(),
                    expected: p.shape.clone(),
                    actual: vec![],
                })?;
            if src.shape != p.shape {
                return Err(Error::Shape {
                    block: src_name,
                    expected: p.shape.clone(),
                    actual: src.shape.clone(),
                });
            }
            p.data.clone_from(&src.data);
        }
        Ok(out)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_two_stream(&self) -> bool {
        self.routes[0] != self.routes[1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Every parameter whose (stream, group) tag is in `streams × groups`,
    /// in storage order.
    pub fn select_parameters(&self, streams: &[StreamTag], groups: &[Group]) -> Result<Vec<ParamId>> {
        if streams.is_empty() || groups.is_empty() {
            return Err(Error::Usage(
                "parameter selector needs at least one stream and one group".into(),
            ));
        }
        let ids: Vec<ParamId> = self
            .params
            .iter()
            .enumerate()
            .filter(|(_, p)| streams.contains(&p.stream) && groups.contains(&p.group))
            .map(|(i, _)| ParamId(i))
            .collect();
        if ids.is_empty() {
            return Err(Error::Usage(format!(
                "selector {streams:?} x {groups:?} matches no parameters"
            )));
        }
        Ok(ids)
    }

    /// Boolean mask over parameters for a selection.
    pub fn mask(&self, ids: &[ParamId]) -> Vec<bool> {
        let mut m = vec![false; self.params.len()];
        for id in ids {
            m[id.0] = true;
        }
        m
    }

    pub fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.n != self.config.num_styles() || w.c != self.config.latent_dim {
            return Err(Error::Usage(format!(
                "latent code is {}x{}, decoder expects {}x{}",
                w.n,
                w.c,
                self.config.num_styles(),
                self.config.latent_dim
            )));
        }
        Ok(())
    }

    /// Output image and, optionally, the per-block activations.
    pub fn synthesize(
        &self,
        w: &LatentCode,
        branch: Branch,
        capture_features: bool,
    ) -> Result<(Tensor3, Option<FeatureStack>)> {
        self.check_latent(w)?;
        let fwd = self.forward(w, branch);
        let feats = capture_features.then(|| fwd.features());
        Ok((fwd.image, feats))
    }

    /// Forward pass retaining everything [`Decoder::backward`] needs.
    pub fn forward(&self, w: &LatentCode, branch: Branch) -> Forward {
        let route = &self.routes[branch.index()];
        let mut blocks: Vec<BlockCache> = Vec::with_capacity(route.len());
        let mut acc: Option<Tensor3> = None;
        for (b, blk) in route.iter().enumerate() {
            let x_in = if b == 0 {
                let p = &self.params[self.const_id];
                Tensor3::from_vec(p.shape[0], p.shape[1], p.shape[2], p.data.clone())
            } else {
                resize_bilinear(&blocks[b - 1].act, blk.res, blk.res)
            };
            let wrow = w.row(b);
            let conv = &blk.conv;
            let style = affine(
                &self.params[conv.style_weight].data,
                &self.params[conv.style_bias].data,
                wrow,
            );
            let mut xm = x_in.clone();
            for (i, s) in style.iter().enumerate() {
                for v in xm.channel_mut(i) {
                    *v *= s;
                }
            }
            let cols = im2col3x3(&xm);
            let hw = blk.res * blk.res;
            let weight = &self.params[conv.weight].data;
            let mut z = Tensor3::zeros(blk.c_out, blk.res, blk.res);
            gemm(
                blk.c_out,
                blk.c_in * 9,
                hw,
                weight,
                false,
                &cols,
                false,
                &mut z.data,
                0.0,
            );
            let demod: Vec<f64> = (0..blk.c_out)
                .map(|o| {
                    let row = &weight[o * blk.c_in * 9..(o + 1) * blk.c_in * 9];
                    let mut s2 = DEMOD_EPS;
                    for (j, wv) in row.iter().enumerate() {
                        let s = style[j / 9];
                        s2 += wv * wv * s * s;
                    }
                    1.0 / s2.sqrt()
                })
                .collect();
            let bias = &self.params[conv.bias].data;
            let mut pre = z.clone();
            for o in 0..blk.c_out {
                let (d, bo) = (demod[o], bias[o]);
                for v in pre.channel_mut(o) {
                    *v = d * *v + bo;
                }
            }
            let mut act = pre.clone();
            for v in &mut act.data {
                *v = lrelu(*v);
            }

            let rgbh = &blk.rgb;
            let rgb_style = affine(
                &self.params[rgbh.style_weight].data,
                &self.params[rgbh.style_bias].data,
                wrow,
            );
            let rw = &self.params[rgbh.weight].data;
            let modw: Vec<f64> = (0..3 * blk.c_out).map(|j| rw[j] * rgb_style[j % blk.c_out]).collect();
            let rb = &self.params[rgbh.bias].data;
            let mut rgb = Tensor3::zeros(3, blk.res, blk.res);
            for c in 0..3 {
                rgb.channel_mut(c).fill(rb[c]);
            }
            gemm(3, blk.c_out, hw, &modw, false, &act.data, false, &mut rgb.data, 1.0);
            acc = Some(match acc {
                None => rgb,
                Some(prev) => {
                    let mut up = resize_bilinear(&prev, blk.res, blk.res);
                    up.add_assign(&rgb);
                    up
                }
            });
            blocks.push(BlockCache {
                x_in,
                style,
                cols,
                z,
                demod,
                pre,
                act,
                rgb_style,
            });
        }
        let acc = acc.expect("decoder has at least one block");
        let mut image = acc.clone();
        for v in &mut image.data {
            *v = (0.5 * *v + 0.5).clamp(0.0, 1.0);
        }
        Forward {
            branch,
            image,
            acc,
            blocks,
        }
    }

    /// Fresh gradient buffers for the parameters flagged in `mask`.
    pub fn grads_for(&self, mask: &[bool]) -> Grads {
        Grads(
            self.params
                .iter()
                .zip(mask)
                .map(|(p, &m)| if m { vec![0.0; p.data.len()] } else { Vec::new() })
                .collect(),
        )
    }

    /// Reverse pass for `grad_image = dL/d(image)`. Accumulates into every
    /// non-empty buffer of `grads` and returns `dL/dw` when `want_latent`.
    /// Work for parameters that were not requested is skipped entirely.
    pub fn backward(
        &self,
        fwd: &Forward,
        w: &LatentCode,
        grad_image: &Tensor3,
        grads: &mut Grads,
        want_latent: bool,
    ) -> Option<LatentCode> {
        let route = &self.routes[fwd.branch.index()];
        let nb = route.len();
        let wants = |id: usize, g: &Grads| !g.0[id].is_empty();
        let conv_wanted = |blk: &BlockRoute, g: &Grads| {
            wants(blk.conv.weight, g)
                || wants(blk.conv.bias, g)
                || wants(blk.conv.style_weight, g)
                || wants(blk.conv.style_bias, g)
        };
        // need_act[b]: whether dL/d(act_b) must be formed.
        let mut need_act = vec![false; nb];
        let mut below = want_latent || wants(self.const_id, grads);
        for b in 0..nb {
            below |= conv_wanted(&route[b], grads);
            need_act[b] = below;
        }

        let mut dw = want_latent.then(|| LatentCode::zeros(w.n, w.c));

        let mut dacc = grad_image.clone();
        for (g, a) in dacc.data.iter_mut().zip(&fwd.acc.data) {
            let y = 0.5 * a + 0.5;
            *g = if y > 0.0 && y < 1.0 { 0.5 * *g } else { 0.0 };
        }

        let mut d_act_from_above: Option<Tensor3> = None;
        for b in (0..nb).rev() {
            let blk = &route[b];
            let cache = &fwd.blocks[b];
            let hw = blk.res * blk.res;
            let wrow = w.row(b);

            // toRGB head
            let rgbh = &blk.rgb;
            let rw = &self.params[rgbh.weight].data;
            let need_rgb_style = wants(rgbh.style_weight, grads) || wants(rgbh.style_bias, grads) || want_latent;
            if wants(rgbh.bias, grads) {
                let g = &mut grads.0[rgbh.bias];
                for c in 0..3 {
                    g[c] += dacc.channel(c).iter().sum::<f64>();
                }
            }
            if wants(rgbh.weight, grads) || need_rgb_style {
                let mut dmod = vec![0.0; 3 * blk.c_out];
                gemm(
                    3,
                    hw,
                    blk.c_out,
                    &dacc.data,
                    false,
                    &cache.act.data,
                    true,
                    &mut dmod,
                    0.0,
                );
                if wants(rgbh.weight, grads) {
                    let g = &mut grads.0[rgbh.weight];
                    for j in 0..3 * blk.c_out {
                        g[j] += dmod[j] * cache.rgb_style[j % blk.c_out];
                    }
                }
                if need_rgb_style {
                    let mut ds = vec![0.0; blk.c_out];
                    for j in 0..3 * blk.c_out {
                        ds[j % blk.c_out] += dmod[j] * rw[j];
                    }
                    self.style_backward(rgbh, &ds, wrow, grads, dw.as_mut().map(|d| d.row_mut(b)));
                }
            }

            if need_act[b] {
                let modw: Vec<f64> = (0..3 * blk.c_out)
                    .map(|j| rw[j] * cache.rgb_style[j % blk.c_out])
                    .collect();
                let mut d_act = d_act_from_above
                    .take()
                    .unwrap_or_else(|| Tensor3::zeros(blk.c_out, blk.res, blk.res));
                gemm(blk.c_out, 3, hw, &modw, true, &dacc.data, false, &mut d_act.data, 1.0);
                let mut dpre = d_act;
                for (g, p) in dpre.data.iter_mut().zip(&cache.pre.data) {
                    if *p <= 0.0 {
                        *g *= LRELU_SLOPE;
                    }
                }
                let need_input = if b == 0 {
                    wants(self.const_id, grads)
                } else {
                    need_act[b - 1]
                };
                let dx_in = self.conv_backward(
                    blk,
                    cache,
                    &dpre,
                    wrow,
                    grads,
                    dw.as_mut().map(|d| d.row_mut(b)),
                    need_input,
                );
                if let Some(dx) = dx_in {
                    if b == 0 {
                        for (g, v) in grads.0[self.const_id].iter_mut().zip(&dx.data) {
                            *g += v;
                        }
                    } else {
                        let prev = &route[b - 1];
                        d_act_from_above = Some(resize_bilinear_backward(&dx, prev.res, prev.res));
                    }
                }
            }

            if b > 0 {
                let prev = &route[b - 1];
                dacc = resize_bilinear_backward(&dacc, prev.res, prev.res);
            }
        }
        dw
    }

    fn style_backward(&self, head: &HeadIds, ds: &[f64], wrow: &[f64], grads: &mut Grads, dw_row: Option<&mut [f64]>) {
        let c = wrow.len();
        if !grads.0[head.style_weight].is_empty() {
            let g = &mut grads.0[head.style_weight];
            for (i, d) in ds.iter().enumerate() {
                for (k, x) in wrow.iter().enumerate() {
                    g[i * c + k] += d * x;
                }
            }
        }
        if !grads.0[head.style_bias].is_empty() {
            for (g, d) in grads.0[head.style_bias].iter_mut().zip(ds) {
                *g += d;
            }
        }
        if let Some(dwr) = dw_row {
            let a = &self.params[head.style_weight].data;
            for (i, d) in ds.iter().enumerate() {
                for k in 0..c {
                    dwr[k] += a[i * c + k] * d;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        blk: &BlockRoute,
        cache: &BlockCache,
        dpre: &Tensor3,
        wrow: &[f64],
        grads: &mut Grads,
        dw_row: Option<&mut [f64]>,
        need_input: bool,
    ) -> Option<Tensor3> {
        let conv = &blk.conv;
        let (c_in, c_out) = (blk.c_in, blk.c_out);
        let k9 = c_in * 9;
        let hw = blk.res * blk.res;
        let weight = &self.params[conv.weight].data;
        let style = &cache.style;
        let want_w = !grads.0[conv.weight].is_empty();
        let need_style =
            !grads.0[conv.style_weight].is_empty() || !grads.0[conv.style_bias].is_empty() || dw_row.is_some();

        if !grads.0[conv.bias].is_empty() {
            let g = &mut grads.0[conv.bias];
            for o in 0..c_out {
                g[o] += dpre.channel(o).iter().sum::<f64>();
            }
        }
        if !(want_w || need_style || need_input) {
            return None;
        }

        let mut dz = dpre.clone();
        let mut dd = vec![0.0; c_out];
        for o in 0..c_out {
            let d = cache.demod[o];
            let zc = cache.z.channel(o);
            let dc = dz.channel_mut(o);
            let mut acc = 0.0;
            for (g, zv) in dc.iter_mut().zip(zc) {
                acc += *g * zv;
                *g *= d;
            }
            dd[o] = acc;
        }
        // d(demod_o)/dW[o,j] = -demod_o^3 · W[o,j] · s_{i(j)}^2
        let coef: Vec<f64> = (0..c_out).map(|o| -dd[o] * cache.demod[o].powi(3)).collect();

        if want_w {
            let g = &mut grads.0[conv.weight];
            gemm(c_out, hw, k9, &dz.data, false, &cache.cols, true, g, 1.0);
            for o in 0..c_out {
                for j in 0..k9 {
                    let s = style[j / 9];
                    g[o * k9 + j] += coef[o] * weight[o * k9 + j] * s * s;
                }
            }
        }

        let mut ds = vec![0.0; c_in];
        if need_style {
            for o in 0..c_out {
                for j in 0..k9 {
                    let i = j / 9;
                    let wv = weight[o * k9 + j];
                    ds[i] += coef[o] * wv * wv * style[i];
                }
            }
        }
        let mut dx_in = None;
        if need_style || need_input {
            let mut dcols = vec![0.0; k9 * hw];
            gemm(k9, c_out, hw, weight, true, &dz.data, false, &mut dcols, 0.0);
            let mut dxm = col2im3x3(&dcols, c_in, blk.res, blk.res);
            for i in 0..c_in {
                let s = style[i];
                let xin = cache.x_in.channel(i);
                let dc = dxm.channel_mut(i);
                let mut acc = 0.0;
                for (g, x) in dc.iter_mut().zip(xin) {
                    acc += *g * x;
                    *g *= s;
                }
                ds[i] += acc;
            }
            if need_input {
                dx_in = Some(dxm);
            }
        }
        if need_style {
            self.style_backward(conv, &ds, wrow, grads, dw_row);
        }
        dx_in
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "two_stream": self.is_two_stream(),
        });
        let mut ck = Checkpoint::new("decoder", meta);
        for p in &self.params {
            ck.push(p.name.clone(), p.shape.clone(), p.data.clone());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, file: &std::path::Path) -> Result<Self> {
        ck.expect_kind("decoder", file)?;
        let config: DecoderConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| Error::parse(file, "meta.config", e))?;
        let two_stream = ck.meta["two_stream"]
            .as_bool()
            .ok_or_else(|| Error::parse(file, "meta.two_stream", "missing boolean"))?;
        let mut dec = Decoder::build(&config, two_stream, 0).map_err(|e| Error::parse(file, "meta.config", e))?;
        for p in &mut dec.params {
            let t = ck
                .get(&p.name)
                .ok_or_else(|| Error::parse(file, &p.name, "tensor missing"))?;
            if t.shape != p.shape {
                return Err(Error::parse(
                    file,
                    &p.name,
                    format!("shape {:?}, expected {:?}", t.shape, p.shape),
                ));
            }
            p.data.clone_from(&t.data);
        }
        Ok(dec)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Decoder::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

fn pretrained_name(name: &str) -> String {
    let mut parts: Vec<&str> = name.splitn(4, '.').collect();
    parts[1] = "shared";
    parts.join(".")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DecoderConfig {
        DecoderConfig {
            base_resolution: 2,
            output_resolution: 8,
            shared_cutoff_resolution: 4,
            channels: vec![4, 3, 2],
            latent_dim: 5,
        }
    }

    fn two_stream(cfg: &DecoderConfig) -> Decoder {
        let pre = Decoder::single_stream(cfg, 3).unwrap();
        Decoder::init_two_stream(cfg, &pre).unwrap()
    }

    #[test]
    fn default_config_shapes() {
        let cfg = DecoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.resolutions(), vec![4, 8, 16, 32]);
        assert_eq!(cfg.feature_channels(), 176);
        let dec = two_stream(&cfg);
        let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 0, "x");
        let (img, feats) = dec.synthesize(&w, Branch::Seg, true).unwrap();
        assert_eq!(img.shape(), (3, 32, 32));
        let feats = feats.unwrap();
        assert_eq!(feats.total_channels(), 176);
        assert!(feats.0.windows(2).all(|p| p[0].h <= p[1].h));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let c = DecoderConfig {
            shared_cutoff_resolution: 32,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = DecoderConfig::default();
        c.channels.pop();
        assert!(c.validate().is_err());
        let c = DecoderConfig {
            output_resolution: 24,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn branches_start_identical() {
        let cfg = tiny();
        let dec = two_stream(&cfg);
        for p in dec.params() {
            if p.stream == StreamTag::Seg {
                let twin = dec.find(&p.name.replace(".seg.", ".img.")).unwrap();
                assert_eq!(p.data, dec.param(twin).data);
            }
        }
        let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 1, "w");
        assert_eq!(
            dec.synthesize(&w, Branch::Seg, false).unwrap().0,
            dec.synthesize(&w, Branch::Img, false).unwrap().0
        );
    }

    #[test]
    fn shared_parameter_affects_both_branches() {
        let cfg = tiny();
        let mut dec = two_stream(&cfg);
        let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 1, "w");
        let before_seg = dec.synthesize(&w, Branch::Seg, false).unwrap().0;
        let before_img = dec.synthesize(&w, Branch::Img, false).unwrap().0;
        let id = dec.find("block2.shared.conv.weight").unwrap();
        dec.param_mut(id).data[0] += 0.5;
        assert_ne!(dec.synthesize(&w, Branch::Seg, false).unwrap().0, before_seg);
        assert_ne!(dec.synthesize(&w, Branch::Img, false).unwrap().0, before_img);
    }

    #[test]
    fn selection_semantics() {
        let dec = two_stream(&tiny());
        let ids = dec.select_parameters(&[StreamTag::Seg], &[Group::ToRgb]).unwrap();
        assert!(ids.iter().all(|&i| {
            let p = dec.param(i);
            p.stream == StreamTag::Seg && p.group == Group::ToRgb && p.name.contains(".seg.torgb.")
        }));
        assert_eq!(ids.len(), 3 * 4);

        let all_seg = dec
            .select_parameters(&[StreamTag::Seg, StreamTag::Shared], &[Group::Conv, Group::ToRgb])
            .unwrap();
        assert!(all_seg.iter().all(|&i| dec.param(i).stream != StreamTag::Img));
        assert!(all_seg.contains(&dec.find("block2.shared.conv.const").unwrap()));

        let every = dec
            .select_parameters(
                &[StreamTag::Shared, StreamTag::Seg, StreamTag::Img],
                &[Group::Conv, Group::ToRgb],
            )
            .unwrap();
        assert_eq!(every, (0..dec.num_params()).map(ParamId).collect::<Vec<_>>());

        assert!(matches!(
            dec.select_parameters(&[], &[Group::Conv]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            dec.select_parameters(&[StreamTag::Shared], &[Group::ToRgb]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn tags_partition_parameters() {
        let dec = two_stream(&tiny());
        let mut seen = vec![0; dec.num_params()];
        for s in [StreamTag::Shared, StreamTag::Seg, StreamTag::Img] {
            for g in [Group::Conv, Group::ToRgb] {
                if let Ok(ids) = dec.select_parameters(&[s], &[g]) {
                    for i in ids {
                        seen[i.0] += 1;
                    }
                }
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn fine_rows_do_not_touch_coarse_activations() {
        let cfg = DecoderConfig::default();
        let dec = two_stream(&cfg);
        let w = LatentCode::random(cfg.num_styles(), cfg.latent_dim, 2, "w");
        let mut w2 = w.clone();
        for b in 2..cfg.num_styles() {
            for v in w2.row_mut(b) {
                *v += 0.7;
            }
        }
        let a = dec.forward(&w, Branch::Seg);
        let b = dec.forward(&w2, Branch::Seg);
        for blk in 0..2 {
            let ab: Vec<u64> = a.feature(blk).data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.feature(blk).data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn wrong_latent_shape_is_usage_error() {
        let dec = two_stream(&tiny());
        assert!(matches!(
            dec.synthesize(&LatentCode::zeros(2, 5), Branch::Seg, false),
            Err(Error::Usage(_))
        ));
        assert!("rgb".parse::<Branch>().is_err());
    }

    #[test]
    fn init_rejects_incompatible_pretrained() {
        let pre = Decoder::single_stream(&tiny(), 0).unwrap();
        let mut other = tiny();
        other.channels = vec![4, 3, 3];
        let err = Decoder::init_two_stream(&other, &pre).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }), "{err}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dec = two_stream(&tiny());
        let ck = dec.to_checkpoint();
        let bytes = ck.to_bytes();
        let back = Decoder::from_checkpoint(
            &Checkpoint::from_bytes(&bytes, std::path::Path::new("m")).unwrap(),
            std::path::Path::new("m"),
        )
        .unwrap();
        assert_eq!(back, dec);
        assert!(ck.tensors.iter().all(|t| t.name.starts_with("block")));
    }
}
