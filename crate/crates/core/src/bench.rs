//! Experiment configuration, benchmark cells and reports.
//!
//! A cell is one (method, shots, seed) triple: the two-stream decoder is
//! initialized from the pretrained prior, fine-tuned according to the
//! method, and scored by training a pixel classifier on the labeled shots
//! and measuring pooled test mIoU.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::finetune::{self, FinetuneConfig, LabeledExample, LossRecord, StageSchedule, SupportExample, SupportSet};
use crate::generator::{Branch, Decoder, DecoderConfig, LatentCode};
use crate::inversion::{encode, Encoder, InvertConfig, PretrainConfig};
use crate::metrics::{confusion, miou, ConfusionMatrix};
use crate::optim::OptimizerKind;
use crate::palette::{make_palette, project_labels, unproject, Palette};
use crate::pixclass::{extract_pixel_features, predict, train_classifier, ClassifierConfig, PixelClassifier};
use crate::ploss::{PerceptualConfig, PerceptualFeatures};
use crate::rng;
use crate::synthdata::{save_image_png, Dataset, DatasetConfig, ImageSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    /// Iterations per stage; vanilla fine-tuning runs three times this.
    pub iterations: usize,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    pub lambda: f64,
    pub support_batch: usize,
    /// Use the test images as the support set.
    pub transductive: bool,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            iterations: finetune::DEFAULT_ITERATIONS,
            optimizer: OptimizerKind::RmsProp,
            step_size: finetune::DEFAULT_STEP_SIZE,
            lambda: finetune::DEFAULT_LAMBDA,
            support_batch: 4,
            transductive: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub shots: Vec<usize>,
    pub seeds: Vec<u64>,
    pub methods: Vec<Method>,
    /// Test samples rendered per cell.
    pub renders: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            shots: vec![1, 2, 3, 4, 5],
            seeds: vec![0, 1, 2],
            methods: vec![Method::Pftgan, Method::Vanilla, Method::SingleStream, Method::Baseline],
            renders: 4,
        }
    }
}

/// Everything a run depends on; its hash goes into every manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub decoder: DecoderConfig,
    pub perceptual: PerceptualConfig,
    pub pretrain: PretrainConfig,
    pub invert: InvertConfig,
    pub finetune: FinetuneSettings,
    pub classifier: ClassifierConfig,
    pub bench: BenchSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, file: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(file, "config", e.message()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.decoder.validate()?;
        if self.dataset.resolution != self.decoder.output_resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} differs from decoder output resolution {}",
                self.dataset.resolution, self.decoder.output_resolution
            )));
        }
        if let Some(&s) = self
            .bench
            .shots
            .iter()
            .find(|&&s| s == 0 || s > self.dataset.n_train_labeled)
        {
            return Err(Error::Config(format!(
                "shot count {s} must be in 1..={} (the labeled pool size)",
                self.dataset.n_train_labeled
            )));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn schedule(&self, method: Method) -> Option<StageSchedule> {
        let f = &self.finetune;
        let opt = f.optimizer.with_lr(f.step_size);
        let progressive = StageSchedule::progressive(f.iterations, opt, f.lambda);
        match method {
            Method::Pftgan => Some(progressive),
            Method::Step1 => Some(progressive.prefix(1)),
            Method::Step12 => Some(progressive.prefix(2)),
            Method::SingleStream => Some(progressive.single_stream()),
            Method::Vanilla => Some(StageSchedule::vanilla(3 * f.iterations, opt)),
            Method::Baseline => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "pftgan")]
    Pftgan,
    #[serde(rename = "vanilla")]
    Vanilla,
    #[serde(rename = "single-stream")]
    SingleStream,
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "step1")]
    Step1,
    #[serde(rename = "step1-2")]
    Step12,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Pftgan,
        Method::Vanilla,
        Method::SingleStream,
        Method::Baseline,
        Method::Step1,
        Method::Step12,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pftgan => "pftgan",
            Method::Vanilla => "vanilla",
            Method::SingleStream => "single-stream",
            Method::Baseline => "baseline",
            Method::Step1 => "step1",
            Method::Step12 => "step1-2",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown method '{s}' (expected one of pftgan, vanilla, single-stream, baseline, step1, step1-2)"
            ))
        })
    }
}

/// Shared inputs of every cell: data, the pretrained prior and the latent
/// codes of all labeled, support and test images.
pub struct Context {
    pub config: ExperimentConfig,
    pub dataset: Dataset,
    pub pretrained: Decoder,
    pub latents: BTreeMap<String, LatentCode>,
    pub palette: Palette,
    pub perceptual: PerceptualFeatures,
}

/// Inverts every image of the given samples.
pub fn invert_all(
    samples: &[&ImageSample],
    encoder: &Encoder,
    decoder: &Decoder,
    config: &InvertConfig,
    pf: &PerceptualFeatures,
) -> Result<BTreeMap<String, LatentCode>> {
    let mut out = BTreeMap::new();
    for s in samples {
        let inv = encode(&s.image, encoder, decoder, config, pf)?;
        log::debug!(
            "inverted {}: loss {:.5} -> {:.5}",
            s.sample_id,
            inv.init_loss,
            inv.final_loss
        );
        out.insert(s.sample_id.clone(), inv.latent);
    }
    Ok(out)
}

impl Context {
    pub fn new(
        config: ExperimentConfig,
        dataset: Dataset,
        pretrained: Decoder,
        latents: BTreeMap<String, LatentCode>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.config.k != config.dataset.k || dataset.config.resolution != config.dataset.resolution {
            return Err(Error::Config(
                "dataset on disk does not match the configured K and resolution".into(),
            ));
        }
        let palette = make_palette(config.dataset.k)?;
        let perceptual = PerceptualFeatures::new(config.perceptual.clone())?;
        let ctx = Context {
            config,
            dataset,
            pretrained,
            latents,
            palette,
            perceptual,
        };
        for s in ctx
            .dataset
            .labeled
            .iter()
            .chain(&ctx.dataset.support)
            .chain(&ctx.dataset.test)
        {
            ctx.latent(&s.sample_id)?;
        }
        Ok(ctx)
    }

    pub fn latent(&self, id: &str) -> Result<&LatentCode> {
        self.latents.get(id).ok_or_else(|| Error::MissingArtifact {
            path: PathBuf::from(format!("latents/{id}")),
            hint: "pftseg invert".into(),
        })
    }

    /// The first `shots` labeled samples of a seed-keyed shuffle.
    pub fn shots(&self, shots: usize, seed: u64) -> Result<Vec<&ImageSample>> {
        if shots == 0 || shots > self.dataset.labeled.len() {
            return Err(Error::Config(format!(
                "{shots}-shot needs 1..={} labeled samples",
                self.dataset.labeled.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.dataset.labeled.len()).collect();
        idx.shuffle(&mut rng::keyed(seed, "shots", ""));
        Ok(idx[..shots].iter().map(|&i| &self.dataset.labeled[i]).collect())
    }

    fn labeled_examples(&self, samples: &[&ImageSample]) -> Result<Vec<LabeledExample>> {
        samples
            .iter()
            .map(|s| {
                Ok(LabeledExample {
                    sample_id: s.sample_id.clone(),
                    image: s.image.clone(),
                    label: s.label.clone(),
                    latent: self.latent(&s.sample_id)?.clone(),
                })
            })
            .collect()
    }

    pub fn support_set(&self) -> Result<SupportSet> {
        let pool = if self.config.finetune.transductive {
            &self.dataset.test
        } else {
            &self.dataset.support
        };
        let samples = pool
            .iter()
            .map(|s| {
                Ok(SupportExample {
                    sample_id: s.sample_id.clone(),
                    image: s.image.clone(),
                    latent: self.latent(&s.sample_id)?.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(SupportSet { samples })
    }

    /// Fine-tunes for `method`. Returns the decoder after every stage (the
    /// last entry is the final decoder; the baseline has only the
    /// untouched initialization) and the loss trace.
    pub fn finetune(&self, method: Method, shots: usize, seed: u64) -> Result<(Vec<Decoder>, Vec<LossRecord>)> {
        let init = Decoder::init_two_stream(&self.config.decoder, &self.pretrained)?;
        let Some(schedule) = self.config.schedule(method) else {
            return Ok((vec![init], Vec::new()));
        };
        let labeled = self.labeled_examples(&self.shots(shots, seed)?)?;
        let support = self.support_set()?;
        let ft = FinetuneConfig {
            seed,
            support_batch: self.config.finetune.support_batch,
        };
        let mut dec = init;
        let mut snapshots = Vec::new();
        let trace = finetune::run_schedule(
            &mut dec,
            &schedule,
            &labeled,
            &support,
            &self.palette,
            &self.perceptual,
            &ft,
            |_, d| {
                snapshots.push(d.clone());
                Ok(())
            },
        )?;
        Ok((snapshots, trace))
    }

    pub fn train_classifier(&self, dec: &Decoder, shots: usize, seed: u64) -> Result<PixelClassifier> {
        let samples = self.shots(shots, seed)?;
        let layers = self.config.classifier.layers.as_deref();
        let feats = samples
            .iter()
            .map(|s| extract_pixel_features(dec, self.latent(&s.sample_id)?, layers))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<_> = samples.iter().map(|s| s.label.clone()).collect();
        let cfg = ClassifierConfig {
            seed,
            ..self.config.classifier.clone()
        };
        train_classifier(&feats, &labels, self.config.dataset.k, &cfg)
    }

    pub fn evaluate(&self, dec: &Decoder, clf: &PixelClassifier, shots: usize, seed: u64) -> Result<Evaluation> {
        let k = self.config.dataset.k;
        let mut cm = ConfusionMatrix::new(k);
        let mut decoded = ConfusionMatrix::new(k);
        let layers = clf.layers.as_deref();
        for s in &self.dataset.test {
            let w = self.latent(&s.sample_id)?;
            let f = extract_pixel_features(dec, w, layers)?;
            cm.accumulate(&confusion(&predict(clf, &f)?, &s.label, k)?)?;
            let seg = dec.synthesize(w, Branch::Seg, false)?.0;
            decoded.accumulate(&confusion(&unproject(&seg, &self.palette), &s.label, k)?)?;
        }
        let mut train_hist = vec![0u64; k];
        for s in self.shots(shots, seed)? {
            for (h, n) in train_hist.iter_mut().zip(s.label.histogram(k)) {
                *h += n;
            }
        }
        let majority = (0..k)
            .max_by_key(|&i| (train_hist[i], std::cmp::Reverse(i)))
            .unwrap_or(0);
        let majority_hits: u64 = (0..k).map(|p| cm.get(majority, p)).sum();
        Ok(Evaluation {
            miou: miou(&cm),
            per_class_iou: cm.per_class_iou(),
            pixel_accuracy: cm.pixel_accuracy(),
            majority_accuracy: majority_hits as f64 / cm.total().max(1) as f64,
            decoded_miou: miou(&decoded),
            missing_classes: clf.missing_classes.clone(),
            confusion: cm,
        })
    }

    /// Predictions for the first `n` test samples as (input, predicted map,
    /// ground-truth map) triples.
    pub fn renders(
        &self,
        dec: &Decoder,
        clf: &PixelClassifier,
        n: usize,
    ) -> Result<Vec<(String, [crate::tensor::Tensor3; 3])>> {
        self.dataset
            .test
            .iter()
            .take(n)
            .map(|s| {
                let f = extract_pixel_features(dec, self.latent(&s.sample_id)?, clf.layers.as_deref())?;
                let pred = project_labels(&predict(clf, &f)?, &self.palette)?.0;
                let gt = project_labels(&s.label, &self.palette)?.0;
                Ok((s.sample_id.clone(), [s.image.clone(), pred, gt]))
            })
            .collect()
    }

    /// Runs one cell; for the progressive schedule the stage prefixes come
    /// for free and are returned too, keyed by their own method.
    pub fn run_cell(&self, method: Method, shots: usize, seed: u64, out: Option<&Path>) -> Result<Vec<CellResult>> {
        let start = Instant::now();
        let (snapshots, trace) = self.finetune(method, shots, seed)?;
        let mut evaluated: Vec<(Method, &Decoder)> = vec![(method, snapshots.last().expect("at least one snapshot"))];
        if method == Method::Pftgan && snapshots.len() == 3 {
            evaluated.insert(0, (Method::Step12, &snapshots[1]));
            evaluated.insert(0, (Method::Step1, &snapshots[0]));
        }
        let mut results = Vec::new();
        for (m, dec) in evaluated {
            let clf = self.train_classifier(dec, shots, seed)?;
            let eval = self.evaluate(dec, &clf, shots, seed)?;
            log::info!("{m} {shots}-shot seed {seed}: mIoU {:.4}", eval.miou);
            if m == method {
                if let Some(dir) = out {
                    self.persist_cell(dir, method, shots, seed, &snapshots, &trace, &clf, &eval)?;
                }
            }
            results.push(CellResult {
                method: m,
                shots,
                seed,
                runtime_s: start.elapsed().as_secs_f64(),
                evaluation: eval,
            });
        }
        Ok(results)
    }

    #[allow(clippy::too_many_arguments)]
    fn persist_cell(
        &self,
        dir: &Path,
        method: Method,
        shots: usize,
        seed: u64,
        snapshots: &[Decoder],
        trace: &[LossRecord],
        clf: &PixelClassifier,
        eval: &Evaluation,
    ) -> Result<()> {
        self.save_finetune(dir, method, shots, seed, snapshots, trace)?;
        clf.save(&dir.join(CLASSIFIER_FILE))?;
        self.save_evaluation(dir, snapshots.last().expect("at least one snapshot"), clf, eval)
    }

    /// Stage checkpoints, loss trace and manifest of a fine-tuning run.
    pub fn save_finetune(
        &self,
        dir: &Path,
        method: Method,
        shots: usize,
        seed: u64,
        snapshots: &[Decoder],
        trace: &[LossRecord],
    ) -> Result<()> {
        let ckpt = dir.join("ckpt");
        fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        if self.config.schedule(method).is_some() {
            for (i, d) in snapshots.iter().enumerate() {
                d.save(&ckpt.join(format!("stage{}.ckpt", i + 1)))?;
            }
        }
        finetune::write_loss_trace(&dir.join("loss_trace.csv"), trace)?;
        write_json(&dir.join("manifest.json"), &self.manifest(Some((method, shots, seed))))
    }

    /// `eval.json` plus (input, prediction, ground truth) PNG triples.
    pub fn save_evaluation(&self, dir: &Path, dec: &Decoder, clf: &PixelClassifier, eval: &Evaluation) -> Result<()> {
        write_json(&dir.join("eval.json"), eval)?;
        self.save_renders(dir, dec, clf)
    }

    pub fn save_renders(&self, dir: &Path, dec: &Decoder, clf: &PixelClassifier) -> Result<()> {
        let renders = dir.join("renders");
        fs::create_dir_all(&renders).map_err(|e| Error::io(&renders, e))?;
        for (id, imgs) in self.renders(dec, clf, self.config.bench.renders)? {
            for (suffix, img) in ["input", "pred", "gt"].iter().zip(&imgs) {
                save_image_png(&renders.join(format!("{id}_{suffix}.png")), img)?;
            }
        }
        Ok(())
    }

    /// The decoder a saved run ends with: its last stage checkpoint, or the
    /// untouched initialization for the baseline.
    pub fn load_run_decoder(&self, dir: &Path, method: Method, shots: usize, seed: u64) -> Result<Decoder> {
        match self.config.schedule(method) {
            None => Decoder::init_two_stream(&self.config.decoder, &self.pretrained),
            Some(s) => {
                let path = dir.join("ckpt").join(format!("stage{}.ckpt", s.stages.len()));
                if !path.exists() {
                    return Err(Error::MissingArtifact {
                        path,
                        hint: format!("pftseg finetune --method {method} --shots {shots} --seed {seed}"),
                    });
                }
                Decoder::load(&path)
            }
        }
    }

    pub fn manifest(&self, cell: Option<(Method, usize, u64)>) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            method: cell.map(|c| c.0),
            shots: cell.map(|c| c.1),
            seed: cell.map(|c| c.2),
            schedule: cell.and_then(|c| self.config.schedule(c.0)),
            palette: self.palette.colors.clone(),
            perceptual_seed: self.config.perceptual.seed,
        }
    }
}

pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

pub fn cell_dir(root: &Path, method: Method, shots: usize, seed: u64) -> PathBuf {
    root.join(format!("{method}-{shots}shot-seed{seed}"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub miou: f64,
    pub per_class_iou: Vec<f64>,
    pub pixel_accuracy: f64,
    /// Accuracy of always predicting the most frequent training class.
    pub majority_accuracy: f64,
    /// mIoU of the segmentation branch output read back through the palette.
    pub decoded_miou: f64,
    pub missing_classes: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub shots: usize,
    pub seed: u64,
    pub runtime_s: f64,
    pub evaluation: Evaluation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub method: Option<Method>,
    pub shots: Option<usize>,
    pub seed: Option<u64>,
    pub schedule: Option<StageSchedule>,
    pub palette: Vec<[f64; 3]>,
    pub perceptual_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub config_hash: String,
    pub absent_class_convention: String,
    pub cells: Vec<CellResult>,
    pub runtime_s: f64,
}

pub const ABSENT_CLASS_CONVENTION: &str =
    "classes with no ground-truth and no predicted test pixels score IoU 0 and stay in the mean; confusion pooled over the test split";

impl BenchmarkReport {
    /// Mean mIoU over seeds for `(method, shots)`.
    pub fn mean_miou(&self, method: Method, shots: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.shots == shots)
            .map(|c| c.evaluation.miou)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let k = self.cells.first().map_or(0, |c| c.evaluation.per_class_iou.len());
        let mut out = String::from("method,shots,seed,miou,pixel_accuracy,majority_accuracy,decoded_miou,runtime_s");
        for i in 0..k {
            out.push_str(&format!(",iou_{i}"));
        }
        out.push('\n');
        for c in &self.cells {
            let e = &c.evaluation;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.3}",
                c.method, c.shots, c.seed, e.miou, e.pixel_accuracy, e.majority_accuracy, e.decoded_miou, c.runtime_s
            ));
            for v in &e.per_class_iou {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut methods: Vec<Method> = self.cells.iter().map(|c| c.method).collect();
        methods.sort();
        methods.dedup();
        let mut shots: Vec<usize> = self.cells.iter().map(|c| c.shots).collect();
        shots.sort();
        shots.dedup();
        let mut out = format!(
            "config hash: {}\nabsent classes: {}\n\nmean test mIoU over seeds\n",
            self.config_hash, self.absent_class_convention
        );
        out.push_str(&format!("{:<14}", "method"));
        for s in &shots {
            out.push_str(&format!("{:>9}", format!("{s}-shot")));
        }
        out.push('\n');
        for m in methods {
            out.push_str(&format!("{:<14}", m.name()));
            for &s in &shots {
                match self.mean_miou(m, s) {
                    Some(v) => out.push_str(&format!("{v:>9.4}")),
                    None => out.push_str(&format!("{:>9}", "-")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("\ntotal runtime: {:.1} s\n", self.runtime_s));
        out
    }
}

/// Runs every configured (method, shots, seed) cell. Progressive runs also
/// report their stage prefixes when those methods are requested.
/// Cells are persisted under `runs` and the report under `out` when given.
pub fn run_benchmark(ctx: &Context, runs: Option<&Path>, out: Option<&Path>) -> Result<BenchmarkReport> {
    let start = Instant::now();
    let b = &ctx.config.bench;
    let wanted = |m: Method| b.methods.contains(&m);
    let mut cells = Vec::new();
    for &shots in &b.shots {
        for &seed in &b.seeds {
            for &method in &b.methods {
                let prefix = matches!(method, Method::Step1 | Method::Step12);
                if prefix && wanted(Method::Pftgan) {
                    continue;
                }
                let dir = runs.map(|o| cell_dir(o, method, shots, seed));
                for r in ctx.run_cell(method, shots, seed, dir.as_deref())? {
                    if wanted(r.method) {
                        cells.push(r);
                    }
                }
            }
        }
    }
    cells.sort_by_key(|a| (a.method, a.shots, a.seed));
    let report = BenchmarkReport {
        config_hash: ctx.config.hash(),
        absent_class_convention: ABSENT_CLASS_CONVENTION.into(),
        cells,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| Error::io(o, e))?;
        let csv = o.join("report.csv");
        fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let sum = o.join("summary.txt");
        fs::write(&sum, report.summary()).map_err(|e| Error::io(&sum, e))?;
        write_json(&o.join("report.json"), &report)?;
    }
    Ok(report)
}

/// Latent codes stored as one checkpoint per sample.
pub fn save_latents(dir: &Path, latents: &BTreeMap<String, LatentCode>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (id, w) in latents {
        let mut ck = Checkpoint::new("latent", serde_json::json!({ "sample_id": id }));
        ck.push("w", vec![w.n, w.c], w.data.clone());
        ck.save(&dir.join(id))?;
    }
    Ok(())
}

pub fn load_latents(dir: &Path, ids: &[&str]) -> Result<BTreeMap<String, LatentCode>> {
    let mut out = BTreeMap::new();
    for &id in ids {
        let path = dir.join(id);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                hint: "pftseg invert".into(),
            });
        }
        let ck = Checkpoint::load(&path)?;
        ck.expect_kind("latent", &path)?;
        let t = ck.get("w").ok_or_else(|| Error::parse(&path, "w", "tensor missing"))?;
        if t.shape.len() != 2 {
            return Err(Error::parse(&path, "w", "expected a 2-d tensor"));
        }
        out.insert(
            id.to_string(),
            LatentCode::from_vec(t.shape[0], t.shape[1], t.data.clone()),
        );
    }
    Ok(out)
}

/// The image branch's reconstruction of a sample from its latent.
pub fn reconstruct(dec: &Decoder, w: &LatentCode) -> Result<crate::tensor::Tensor3> {
    Ok(dec.synthesize(w, Branch::Img, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[finetune]\niterations = 7\n[bench]\nmethods = [\"vanilla\", \"step1-2\"]\n",
            Path::new("c.toml"),
        )
        .unwrap();
        assert_eq!(cfg.finetune.iterations, 7);
        assert_eq!(cfg.bench.methods, vec![Method::Vanilla, Method::Step12]);
        assert_eq!(cfg.dataset, DatasetConfig::default());
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn malformed_toml_names_the_file() {
        let err =
            ExperimentConfig::from_toml("[finetune]\niterations = \"many\"\n", Path::new("bad.toml")).unwrap_err();
        assert!(err.to_string().contains("bad.toml"), "{err}");
    }

    #[test]
    fn vanilla_has_the_progressive_budget() {
        let cfg = ExperimentConfig::default();
        assert_eq!(
            cfg.schedule(Method::Vanilla).unwrap().total_iterations(),
            cfg.schedule(Method::Pftgan).unwrap().total_iterations()
        );
        assert!(cfg.schedule(Method::Baseline).is_none());
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!(matches!("best".parse::<Method>(), Err(Error::Usage(_))));
    }
}
