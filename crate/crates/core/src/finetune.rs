//! Progressive fine-tuning of the two-stream decoder into a segmentation
//! generator, plus the vanilla and single-stream ablations.
//!
//! Every iteration takes one optimizer step. The segmentation branch is
//! supervised on the labeled samples (their blended or pure RGB label
//! maps); the image branch reconstructs the labeled images and a keyed
//! minibatch of unlabeled support images. Gradients of the two objectives
//! are masked by their own stage selector and summed, so parameters shared
//! by both branches receive both contributions in the same step.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{Branch, Decoder, Grads, Group, LatentCode, ParamId, StreamTag};
use crate::label::LabelMap;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::palette::{interpolate, project_labels, Palette};
use crate::ploss::{PerceptualFeatures, PerceptualTarget};
use crate::tensor::Tensor3;

pub const DEFAULT_ITERATIONS: usize = 200;
pub const DEFAULT_STEP_SIZE: f64 = 2e-3;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegTarget {
    /// `λ·X + (1−λ)·M`
    Interpolated,
    /// `M`
    RgbMap,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selector {
    pub streams: Vec<StreamTag>,
    pub groups: Vec<Group>,
}

impl Selector {
    pub fn new(streams: &[StreamTag], groups: &[Group]) -> Self {
        Selector {
            streams: streams.to_vec(),
            groups: groups.to_vec(),
        }
    }

    pub fn resolve(&self, dec: &Decoder) -> Result<Vec<ParamId>> {
        dec.select_parameters(&self.streams, &self.groups)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seg: Selector,
    /// `None` disables the image-stream objective for this stage.
    pub img: Option<Selector>,
    pub target: SegTarget,
    pub iterations: usize,
    pub optimizer: OptimizerConfig,
    pub lambda: f64,
}

impl Stage {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config(format!("stage {}: iterations must be >= 1", self.name)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "stage {}: lambda {} outside [0, 1]",
                self.name, self.lambda
            )));
        }
        if !(self.optimizer.lr() > 0.0) {
            return Err(Error::Config(format!(
                "stage {}: step size must be positive",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub stages: Vec<Stage>,
}

const ALL_GROUPS: [Group; 2] = [Group::Conv, Group::ToRgb];

impl StageSchedule {
    /// toRGB on the blend, everything on the blend, toRGB on the label map.
    pub fn progressive(iterations: usize, optimizer: OptimizerConfig, lambda: f64) -> Self {
        let stage = |name: &str, seg: Selector, img: Selector, target| Stage {
            name: name.into(),
            seg,
            img: Some(img),
            target,
            iterations,
            optimizer,
            lambda,
        };
        let torgb = |s| Selector::new(&[s], &[Group::ToRgb]);
        let all = |s| Selector::new(&[s, StreamTag::Shared], &ALL_GROUPS);
        StageSchedule {
            stages: vec![
                stage(
                    "step1",
                    torgb(StreamTag::Seg),
                    torgb(StreamTag::Img),
                    SegTarget::Interpolated,
                ),
                stage(
                    "step2",
                    all(StreamTag::Seg),
                    all(StreamTag::Img),
                    SegTarget::Interpolated,
                ),
                stage("step3", torgb(StreamTag::Seg), torgb(StreamTag::Img), SegTarget::RgbMap),
            ],
        }
    }

    /// One all-parameter stage on the label map with the same total budget.
    pub fn vanilla(iterations: usize, optimizer: OptimizerConfig) -> Self {
        let all = |s| Selector::new(&[s, StreamTag::Shared], &ALL_GROUPS);
        StageSchedule {
            stages: vec![Stage {
                name: "vanilla".into(),
                seg: all(StreamTag::Seg),
                img: Some(all(StreamTag::Img)),
                target: SegTarget::RgbMap,
                iterations,
                optimizer,
                lambda: DEFAULT_LAMBDA,
            }],
        }
    }

    /// Drops the image-stream objective from every stage.
    pub fn single_stream(mut self) -> Self {
        for s in &mut self.stages {
            s.img = None;
        }
        self
    }

    pub fn prefix(&self, n: usize) -> Self {
        StageSchedule {
            stages: self.stages[..n.min(self.stages.len())].to_vec(),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.stages.iter().map(|s| s.iterations).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("schedule has no stages".into()));
        }
        self.stages.iter().try_for_each(Stage::validate)
    }
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule::progressive(
            DEFAULT_ITERATIONS,
            OptimizerConfig::rmsprop(DEFAULT_STEP_SIZE),
            DEFAULT_LAMBDA,
        )
    }
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub sample_id: String,
    pub image: Tensor3,
    pub label: LabelMap,
    pub latent: LatentCode,
}

#[derive(Clone, Debug)]
pub struct SupportExample {
    pub sample_id: String,
    pub image: Tensor3,
    pub latent: LatentCode,
}

/// Unlabeled images for the image-stream term.
#[derive(Clone, Debug, Default)]
pub struct SupportSet {
    pub samples: Vec<SupportExample>,
}

impl SupportSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The `k` members with the smallest keyed hash of
    /// `(seed, stage, iteration, sample_id)`; independent of set order.
    pub fn minibatch(&self, seed: u64, stage: &str, iteration: usize, k: usize) -> Vec<usize> {
        let mut keyed: Vec<([u8; 32], &str, usize)> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut h = Sha256::new();
                h.update(seed.to_le_bytes());
                h.update(stage.as_bytes());
                h.update([0]);
                h.update((iteration as u64).to_le_bytes());
                h.update(s.sample_id.as_bytes());
                (h.finalize().into(), s.sample_id.as_str(), i)
            })
            .collect();
        keyed.sort();
        keyed.into_iter().take(k).map(|(_, _, i)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub seed: u64,
    pub support_batch: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            seed: 0,
            support_batch: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: String,
    pub iteration: usize,
    pub seg_loss: f64,
    pub img_loss: f64,
    pub support_loss: f64,
}

struct Prepared<'a> {
    latent: &'a LatentCode,
    seg_target: PerceptualTarget,
    img_target: PerceptualTarget,
}

fn prepare<'a>(
    stage: &Stage,
    labeled: &'a [LabeledExample],
    palette: &Palette,
    pf: &PerceptualFeatures,
) -> Result<Vec<Prepared<'a>>> {
    labeled
        .iter()
        .map(|ex| {
            let m = project_labels(&ex.label, palette)?;
            let target = match stage.target {
                SegTarget::RgbMap => m.0,
                SegTarget::Interpolated => interpolate(&ex.image, &m, stage.lambda)?.pixels,
            };
            Ok(Prepared {
                latent: &ex.latent,
                seg_target: pf.target(&target),
                img_target: pf.target(&ex.image),
            })
        })
        .collect()
}

fn accumulate(
    dec: &Decoder,
    branch: Branch,
    w: &LatentCode,
    target: &PerceptualTarget,
    pf: &PerceptualFeatures,
    scale: f64,
    grads: &mut Grads,
) -> f64 {
    let fwd = dec.forward(w, branch);
    let (loss, mut g) = pf.loss_and_grad(&fwd.image, target);
    for v in &mut g.data {
        *v *= scale;
    }
    dec.backward(&fwd, w, &g, grads, false);
    loss
}

/// Runs one stage in place and returns its per-iteration loss trace.
/// Parameters outside the stage's selectors are never written.
pub fn run_stage(
    dec: &mut Decoder,
    stage: &Stage,
    labeled: &[LabeledExample],
    support: &SupportSet,
    palette: &Palette,
    pf: &PerceptualFeatures,
    config: &FinetuneConfig,
) -> Result<Vec<LossRecord>> {
    stage.validate()?;
    if labeled.is_empty() {
        return Err(Error::Usage("fine-tuning needs at least one labeled sample".into()));
    }
    if stage.img.is_some() && support.is_empty() && config.support_batch > 0 {
        return Err(Error::Usage(format!(
            "stage {}: the image-stream term needs a nonempty support set",
            stage.name
        )));
    }
    let seg_mask = dec.mask(&stage.seg.resolve(dec)?);
    let img_mask = match &stage.img {
        Some(sel) => Some(dec.mask(&sel.resolve(dec)?)),
        None => None,
    };
    let update: Vec<usize> = (0..dec.num_params())
        .filter(|&i| seg_mask[i] || img_mask.as_ref().is_some_and(|m| m[i]))
        .collect();
    let prepared = prepare(stage, labeled, palette, pf)?;
    let support_targets: Vec<PerceptualTarget> = match img_mask {
        Some(_) => support.samples.iter().map(|s| pf.target(&s.image)).collect(),
        None => Vec::new(),
    };
    let mut opt = Optimizer::new(stage.optimizer, dec.num_params());
    let mut trace = Vec::with_capacity(stage.iterations);

    for it in 0..stage.iterations {
        let mut seg_grads = dec.grads_for(&seg_mask);
        let mut seg_loss = 0.0;
        for p in &prepared {
            seg_loss += accumulate(dec, Branch::Seg, p.latent, &p.seg_target, pf, 1.0, &mut seg_grads);
        }
        let (mut img_loss, mut support_loss) = (0.0, 0.0);
        let mut img_grads = None;
        if let Some(mask) = &img_mask {
            let mut g = dec.grads_for(mask);
            for p in &prepared {
                img_loss += accumulate(dec, Branch::Img, p.latent, &p.img_target, pf, 1.0, &mut g);
            }
            let batch = support.minibatch(config.seed, &stage.name, it, config.support_batch);
            let scale = 1.0 / batch.len().max(1) as f64;
            for &i in &batch {
                support_loss += scale
                    * accumulate(
                        dec,
                        Branch::Img,
                        &support.samples[i].latent,
                        &support_targets[i],
                        pf,
                        scale,
                        &mut g,
                    );
            }
            img_grads = Some(g);
        }
        let total = seg_loss + img_loss + support_loss;
        let grads_ok = seg_grads.is_finite() && img_grads.as_ref().is_none_or(Grads::is_finite);
        if !total.is_finite() || !grads_ok {
            return Err(Error::Training {
                stage: stage.name.clone(),
                iteration: it,
                reason: format!("non-finite loss (seg {seg_loss}, img {img_loss}, support {support_loss})"),
            });
        }
        trace.push(LossRecord {
            stage: stage.name.clone(),
            iteration: it,
            seg_loss,
            img_loss,
            support_loss,
        });

        opt.begin_step();
        for &i in &update {
            let id = ParamId(i);
            let g: Vec<f64> = match (seg_grads.get(id), img_grads.as_ref().and_then(|g| g.get(id))) {
                (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| x + y).collect(),
                (Some(a), None) => a.to_vec(),
                (None, Some(b)) => b.to_vec(),
                (None, None) => continue,
            };
            opt.update(i, &mut dec.param_mut(id).data, &g);
        }
    }
    Ok(trace)
}

/// Applies the stages in order; `after_stage(index, decoder)` runs after
/// each one (checkpointing, prefix evaluation).
#[allow(clippy::too_many_arguments)]
pub fn run_schedule(
    dec: &mut Decoder,
    schedule: &StageSchedule,
    labeled: &[LabeledExample],
    support: &SupportSet,
    palette: &Palette,
    pf: &PerceptualFeatures,
    config: &FinetuneConfig,
    mut after_stage: impl FnMut(usize, &Decoder) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    schedule.validate()?;
    if !dec.is_two_stream() {
        return Err(Error::Usage(
            "fine-tuning requires a two-stream decoder; initialize one from the pretrained weights".into(),
        ));
    }
    let mut trace = Vec::new();
    for (i, stage) in schedule.stages.iter().enumerate() {
        trace.extend(run_stage(dec, stage, labeled, support, palette, pf, config)?);
        after_stage(i, dec)?;
    }
    Ok(trace)
}

pub fn write_loss_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let mut out = String::from("stage,iteration,seg_loss,img_loss,support_loss\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.iteration, r.seg_loss, r.img_loss, r.support_loss
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// SHA-256 of each parameter's bytes, in parameter order.
pub fn parameter_digests(dec: &Decoder) -> Vec<[u8; 32]> {
    dec.params()
        .iter()
        .map(|p| {
            let mut h = Sha256::new();
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
            h.finalize().into()
        })
        .collect()
}
