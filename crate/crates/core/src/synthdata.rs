//! Procedural part-segmentation data: composite objects drawn from ellipses
//! with exact per-pixel part masks.
//!
//! Sample `i` of split `s` is rendered from the keyed stream
//! `rng::keyed(seed, "synthdata", "<s>-<iiii>")`, so each sample is an
//! independent pure function of (config, id). Pixel values are quantized to
//! multiples of 1/255 at generation time, which makes the 8-bit PNG files on
//! disk an exact representation.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::rng::{self, Rng};
use crate::tensor::Tensor3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    /// Head, left eye, right eye, mouth and nose over background (K = 6).
    Faces,
    /// A body with K − 2 attached sub-parts at canonical angles (any K ≥ 2).
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub k: usize,
    pub n_train_labeled: usize,
    pub n_support: usize,
    pub n_test: usize,
    /// Unlabeled images used only to pretrain the generator prior.
    pub n_pretrain: usize,
    pub seed: u64,
    pub shape_family: ShapeFamily,
    /// Object-centre jitter as a fraction of the resolution.
    pub position_jitter: f64,
    /// Relative object-scale jitter.
    pub scale_jitter: f64,
    /// Hue jitter in turns.
    pub hue_jitter: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            resolution: 32,
            k: 6,
            n_train_labeled: 10,
            n_support: 32,
            n_test: 32,
            n_pretrain: 200,
            seed: 7,
            shape_family: ShapeFamily::Faces,
            position_jitter: 0.15,
            scale_jitter: 0.2,
            hue_jitter: 0.06,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub sample_id: String,
    /// `3 × H × W`, values in [0, 1].
    pub image: Tensor3,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub labeled: Vec<ImageSample>,
    pub support: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    pub pretrain: Vec<ImageSample>,
}

/// Smallest part semi-axis of the faces family, as a fraction of the
/// resolution at nominal scale.
const MIN_PART_FRACTION: f64 = 0.06;
/// A part must span at least this many pixels at minimum scale.
const MIN_PART_PIXELS: f64 = 0.75;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > 256 {
            return Err(Error::Config(format!("K={} must be in 2..=256", self.k)));
        }
        if self.resolution < 16 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution {} must be a power of two >= 16",
                self.resolution
            )));
        }
        if self.n_train_labeled == 0 || self.n_support == 0 || self.n_test == 0 {
            return Err(Error::Config("split counts must all be >= 1".into()));
        }
        if self.shape_family == ShapeFamily::Faces && self.k != 6 {
            return Err(Error::Config(format!(
                "the faces family has 6 classes (background, head, eye-L, eye-R, mouth, nose); K={} given",
                self.k
            )));
        }
        if !(0.0..0.5).contains(&self.position_jitter) || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config(
                "position_jitter must be in [0, 0.5) and scale_jitter in [0, 1)".into(),
            ));
        }
        let min_px = MIN_PART_FRACTION * (1.0 - self.scale_jitter) * self.resolution as f64;
        if min_px < MIN_PART_PIXELS {
            return Err(Error::Config(format!(
                "resolution {} too small to place all parts: smallest part spans {min_px:.2} px at minimum scale, need >= {MIN_PART_PIXELS} (resolution * {MIN_PART_FRACTION} * (1 - scale_jitter))",
                self.resolution
            )));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

struct Part {
    class: u8,
    shape: Ellipse,
    color: [f64; 3],
}

fn jitter(r: &mut Rng, amount: f64) -> f64 {
    r.gen_range(-amount..=amount)
}

fn face_parts(cfg: &DatasetConfig, r: &mut Rng) -> (Vec<Part>, [f64; 3], [f64; 3]) {
    let res = cfg.resolution as f64;
    let s = 1.0 + jitter(r, cfg.scale_jitter);
    let cx = res * (0.5 + jitter(r, cfg.position_jitter));
    let cy = res * (0.52 + jitter(r, cfg.position_jitter));
    let hj = jitter(r, cfg.hue_jitter);
    let skin = hsv_to_rgb(0.07 + hj, 0.45 + jitter(r, 0.1), 0.85 + jitter(r, 0.08));
    let bg_top = hsv_to_rgb(r.gen_range(0.0..1.0), r.gen_range(0.1..0.5), r.gen_range(0.3..0.8));
    let bg_bot = hsv_to_rgb(r.gen_range(0.0..1.0), r.gen_range(0.1..0.5), r.gen_range(0.3..0.8));
    let eye = hsv_to_rgb(0.6 + jitter(r, 0.1), 0.5, 0.2 + jitter(r, 0.1));
    let mouth = hsv_to_rgb(0.98 + hj, 0.6, 0.6 + jitter(r, 0.1));
    let nose = hsv_to_rgb(0.05 + hj, 0.55, 0.68 + jitter(r, 0.06));
    let u = res * s;
    let ex = 0.14 + jitter(r, 0.015);
    let ey = -0.08 + jitter(r, 0.015);
    let head = Ellipse {
        cx,
        cy,
        rx: 0.30 * u * (1.0 + jitter(r, 0.08)),
        ry: 0.38 * u * (1.0 + jitter(r, 0.08)),
    };
    let parts = vec![
        Part {
            class: 1,
            shape: head,
            color: skin,
        },
        Part {
            class: 2,
            shape: Ellipse {
                cx: cx - ex * u,
                cy: cy + ey * u,
                rx: 0.075 * u,
                ry: MIN_PART_FRACTION * u,
            },
            color: eye,
        },
        Part {
            class: 3,
            shape: Ellipse {
                cx: cx + ex * u,
                cy: cy + ey * u,
                rx: 0.075 * u,
                ry: MIN_PART_FRACTION * u,
            },
            color: eye,
        },
        Part {
            class: 4,
            shape: Ellipse {
                cx: cx + jitter(r, 0.02) * u,
                cy: cy + (0.20 + jitter(r, 0.02)) * u,
                rx: 0.13 * u,
                ry: 0.065 * u,
            },
            color: mouth,
        },
        Part {
            class: 5,
            shape: Ellipse {
                cx,
                cy: cy + 0.05 * u,
                rx: 0.065 * u,
                ry: 0.085 * u,
            },
            color: nose,
        },
    ];
    (parts, bg_top, bg_bot)
}

fn blob_parts(cfg: &DatasetConfig, r: &mut Rng) -> (Vec<Part>, [f64; 3], [f64; 3]) {
    let res = cfg.resolution as f64;
    let s = 1.0 + jitter(r, cfg.scale_jitter);
    let u = res * s;
    let cx = res * (0.5 + jitter(r, cfg.position_jitter));
    let cy = res * (0.5 + jitter(r, cfg.position_jitter));
    let hj = jitter(r, cfg.hue_jitter);
    let bg_top = hsv_to_rgb(r.gen_range(0.0..1.0), 0.3, r.gen_range(0.3..0.8));
    let bg_bot = hsv_to_rgb(r.gen_range(0.0..1.0), 0.3, r.gen_range(0.3..0.8));
    let mut parts = Vec::new();
    if cfg.k >= 2 {
        parts.push(Part {
            class: 1,
            shape: Ellipse {
                cx,
                cy,
                rx: 0.28 * u,
                ry: 0.28 * u,
            },
            color: hsv_to_rgb(0.55 + hj, 0.5, 0.8),
        });
    }
    let n_sub = cfg.k.saturating_sub(2);
    for j in 0..n_sub {
        let ang = std::f64::consts::TAU * j as f64 / n_sub as f64 + jitter(r, 0.15);
        let rad = 0.18 * u;
        parts.push(Part {
            class: (j + 2) as u8,
            shape: Ellipse {
                cx: cx + rad * ang.cos(),
                cy: cy + rad * ang.sin(),
                rx: 0.08 * u,
                ry: 0.08 * u,
            },
            color: hsv_to_rgb(j as f64 / n_sub as f64 + hj, 0.7, 0.5 + 0.4 * ((j % 2) as f64)),
        });
    }
    (parts, bg_top, bg_bot)
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one sample; a pure function of (config, id).
pub fn render_sample(cfg: &DatasetConfig, id: &str) -> ImageSample {
    let mut r = rng::keyed(cfg.seed, "synthdata", id);
    let (parts, bg_top, bg_bot) = match cfg.shape_family {
        ShapeFamily::Faces => face_parts(cfg, &mut r),
        ShapeFamily::Blobs => blob_parts(cfg, &mut r),
    };
    let n = cfg.resolution;
    let mut label = LabelMap::new(n, n);
    let mut img = Tensor3::zeros(3, n, n);
    let light = (jitter(&mut r, 1.0), jitter(&mut r, 1.0));
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = fy / n as f64;
            let mut col = [0.0; 3];
            for c in 0..3 {
                col[c] = bg_top[c] * (1.0 - t) + bg_bot[c] * t;
            }
            for p in &parts {
                if p.shape.contains(fx, fy) {
                    label.set(y, x, p.class);
                    let dx = (fx - p.shape.cx) / p.shape.rx;
                    let dy = (fy - p.shape.cy) / p.shape.ry;
                    let shade = 1.0 - 0.15 * (dx * dx + dy * dy) + 0.08 * (dx * light.0 + dy * light.1);
                    for c in 0..3 {
                        col[c] = p.color[c] * shade;
                    }
                }
            }
            for c in 0..3 {
                col[c] += jitter(&mut r, 0.03);
                *img.at_mut(c, y, x) = quantize(col[c]);
            }
        }
    }
    // Every part occupies at least the pixel under its centre.
    for p in &parts {
        if !label.data.contains(&p.class) {
            let y = (p.shape.cy.floor().max(0.0) as usize).min(n - 1);
            let x = (p.shape.cx.floor().max(0.0) as usize).min(n - 1);
            label.set(y, x, p.class);
            for c in 0..3 {
                *img.at_mut(c, y, x) = quantize(p.color[c]);
            }
        }
    }
    ImageSample {
        sample_id: id.to_string(),
        image: img,
        label,
    }
}

pub fn sample_id(split: &str, index: usize) -> String {
    format!("{split}-{index:04}")
}

fn split(cfg: &DatasetConfig, name: &str, count: usize) -> Vec<ImageSample> {
    (0..count).map(|i| render_sample(cfg, &sample_id(name, i))).collect()
}

pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    Ok(Dataset {
        config: config.clone(),
        labeled: split(config, "train", config.n_train_labeled),
        support: split(config, "support", config.n_support),
        test: split(config, "test", config.n_test),
        pretrain: split(config, "pretrain", config.n_pretrain),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    k: usize,
    resolution: usize,
    seed: u64,
    config: DatasetConfig,
    splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct Splits {
    labeled: Vec<String>,
    support: Vec<String>,
    test: Vec<String>,
    pretrain: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    for sub in ["images", "labels"] {
        let d = path.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let all = ds.labeled.iter().chain(&ds.support).chain(&ds.test).chain(&ds.pretrain);
    for s in all {
        save_image_png(&path.join("images").join(format!("{}.png", s.sample_id)), &s.image)?;
        let lp = path.join("labels").join(format!("{}.png", s.sample_id));
        let gray: GrayImage =
            ImageBuffer::from_raw(s.label.w as u32, s.label.h as u32, s.label.data.clone()).expect("label buffer size");
        gray.save(&lp).map_err(|e| Error::parse(&lp, "png", e))?;
    }
    let ids = |v: &[ImageSample]| v.iter().map(|s| s.sample_id.clone()).collect();
    let manifest = Manifest {
        format: "pftseg-dataset-1".into(),
        k: ds.config.k,
        resolution: ds.config.resolution,
        seed: ds.config.seed,
        config: ds.config.clone(),
        splits: Splits {
            labeled: ids(&ds.labeled),
            support: ids(&ds.support),
            test: ids(&ds.test),
            pretrain: ids(&ds.pretrain),
        },
    };
    let mp = path.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}

pub fn save_image_png(path: &Path, img: &Tensor3) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            out.put_pixel(
                x as u32,
                y as u32,
                Rgb([to_u8(img.at(0, y, x)), to_u8(img.at(1, y, x)), to_u8(img.at(2, y, x))]),
            );
        }
    }
    out.save(path).map_err(|e| Error::parse(path, "png", e))
}

pub fn load_image_png(path: &Path, res: usize) -> Result<Tensor3> {
    let img = image::open(path).map_err(|e| Error::parse(path, "png", e))?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != res || rgb.height() as usize != res {
        return Err(Error::parse(
            path,
            "dimensions",
            format!("{}x{}, expected {res}x{res}", rgb.width(), rgb.height()),
        ));
    }
    let mut t = Tensor3::zeros(3, res, res);
    for (x, y, Rgb(px)) in rgb.enumerate_pixels() {
        for c in 0..3 {
            *t.at_mut(c, y as usize, x as usize) = px[c] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn load_label_png(path: &Path, res: usize, k: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(|e| Error::parse(path, "png", e))?;
    let gray = img.to_luma8();
    if gray.width() as usize != res || gray.height() as usize != res {
        return Err(Error::parse(
            path,
            "dimensions",
            format!("{}x{}, expected {res}x{res}", gray.width(), gray.height()),
        ));
    }
    let data: Vec<u8> = gray.pixels().map(|Luma([v])| *v).collect();
    let l = LabelMap::from_vec(res, res, data);
    l.validate(k).map_err(|e| match e {
        Error::Validation(msg) => Error::Validation(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    Ok(l)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mp = path.join(MANIFEST_FILE);
    if !mp.exists() {
        return Err(Error::MissingArtifact {
            path: mp,
            hint: "pftseg gen-data".into(),
        });
    }
    let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(&mp, "manifest", e))?;
    if m.k != m.config.k || m.resolution != m.config.resolution {
        return Err(Error::parse(&mp, "k/resolution", "disagree with embedded config"));
    }
    let load = |ids: &[String]| -> Result<Vec<ImageSample>> {
        ids.iter()
            .map(|id| {
                Ok(ImageSample {
                    sample_id: id.clone(),
                    image: load_image_png(&path.join("images").join(format!("{id}.png")), m.resolution)?,
                    label: load_label_png(&path.join("labels").join(format!("{id}.png")), m.resolution, m.k)?,
                })
            })
            .collect()
    };
    Ok(Dataset {
        labeled: load(&m.splits.labeled)?,
        support: load(&m.splits.support)?,
        test: load(&m.splits.test)?,
        pretrain: load(&m.splits.pretrain)?,
        config: m.config,
    })
}

/// Class-pixel histogram over a split.
pub fn class_histogram(samples: &[ImageSample], k: usize) -> Vec<u64> {
    let mut h = vec![0u64; k];
    for s in samples {
        for (a, b) in h.iter_mut().zip(s.label.histogram(k)) {
            *a += b;
        }
    }
    h
}
