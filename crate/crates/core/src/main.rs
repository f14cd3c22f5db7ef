use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pftseg::bench::{invert_all, run_benchmark, save_latents, write_json, ExperimentConfig, Method, CLASSIFIER_FILE};
use pftseg::inversion::{encode, pretrain};
use pftseg::palette::{project_labels, unproject};
use pftseg::pixclass::PixelClassifier;
use pftseg::ploss::PerceptualFeatures;
use pftseg::synthdata::{generate_dataset, load_image_png, save_dataset, save_image_png};
use pftseg::workdir::Workdir;
use pftseg::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pftseg",
    version,
    about = "Few-shot part segmentation with a progressively fine-tuned two-stream generator"
)]
struct Cli {
    /// Experiment directory holding data, weights, latents and runs.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set finetune.iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CellArgs {
    #[arg(long, default_value = "pftgan")]
    method: String,
    #[arg(long, default_value_t = 1)]
    shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into <workdir>/data.
    GenData,
    /// Train the encoder and single-stream decoder prior.
    Pretrain,
    /// Invert every labeled, support and test image, or one PNG.
    Invert {
        /// Invert this image instead and write its latent to --out.
        #[arg(long, requires = "out")]
        image: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the two-stream decoder for one benchmark cell.
    Finetune(CellArgs),
    /// Train the pixel classifier on a fine-tuned decoder's features.
    Classify(CellArgs),
    /// Score a trained cell on the test split.
    Eval(CellArgs),
    /// Run the configured shots x methods x seeds sweep.
    Bench,
    /// Write PNG renders for a cell, or project a label map through the palette.
    Render {
        #[command(flatten)]
        cell: CellArgs,
        /// Project this 8-bit label PNG to an RGB map instead.
        #[arg(long, requires = "out")]
        label: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Usage(format!("empty override key '{key}'")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override '{key}': '{p}' is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let (mut table, file) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let t: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| Error::parse(p, "config", e.message()))?;
            (t, p.clone())
        }
        None => (toml::Table::new(), PathBuf::from("<defaults>")),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override '{o}' is not KEY=VALUE")))?;
        let value = format!("v = {v}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(v.to_string()));
        set_path(&mut table, k.trim(), value)?;
    }
    let cfg = ExperimentConfig::from_toml(&toml::to_string(&table).expect("table serializes"), &file)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cell(args: &CellArgs) -> Result<(Method, usize, u64)> {
    Ok((args.method.parse()?, args.shots, args.seed))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let wd = Workdir::new(&cli.workdir);
    match &cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::GenData => {
            let ds = generate_dataset(&cfg.dataset)?;
            save_dataset(&wd.data(), &ds)?;
            println!(
                "wrote {} labeled, {} support, {} test and {} pretrain samples to {}",
                ds.labeled.len(),
                ds.support.len(),
                ds.test.len(),
                ds.pretrain.len(),
                wd.data().display()
            );
        }
        Command::Pretrain => {
            let ds = wd.load_dataset()?;
            let pf = PerceptualFeatures::new(cfg.perceptual.clone())?;
            let images: Vec<_> = ds.pretrain.iter().map(|s| s.image.clone()).collect();
            let out = pretrain(&images, &cfg.decoder, &cfg.pretrain, &pf)?;
            create_dir(&wd.pretrained())?;
            out.decoder.save(&wd.decoder_ckpt())?;
            out.encoder.save(&wd.encoder_ckpt())?;
            write_json(&wd.pretrained().join("report.json"), &out.report)?;
            write_json(
                &wd.pretrained().join("run_manifest.json"),
                &serde_json::json!({
                    "version": env!("CARGO_PKG_VERSION"),
                    "config_hash": cfg.hash(),
                    "pretrain": cfg.pretrain,
                    "perceptual_seed": cfg.perceptual.seed,
                }),
            )?;
            println!(
                "held-out reconstruction loss {:.5} -> {:.5}, mean pixel L2 {:.5}",
                out.report.initial_heldout_loss, out.report.final_heldout_loss, out.report.final_heldout_pixel_l2
            );
        }
        Command::Invert { image, out } => {
            let (enc, dec) = wd.load_pretrained()?;
            let pf = PerceptualFeatures::new(cfg.perceptual.clone())?;
            if let (Some(img), Some(out)) = (image, out) {
                let x = load_image_png(img, cfg.decoder.output_resolution)?;
                let inv = encode(&x, &enc, &dec, &cfg.invert, &pf)?;
                let dir = out
                    .parent()
                    .filter(|p| !p.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                create_dir(dir)?;
                let w = inv.latent;
                let mut ck = pftseg::checkpoint::Checkpoint::new("latent", serde_json::json!({ "source": img }));
                ck.push("w", vec![w.n, w.c], w.data);
                ck.save(out)?;
                println!(
                    "loss {:.5} -> {:.5}; latent written to {}",
                    inv.init_loss,
                    inv.final_loss,
                    out.display()
                );
            } else {
                let ds = wd.load_dataset()?;
                let samples: Vec<_> = ds.labeled.iter().chain(&ds.support).chain(&ds.test).collect();
                let latents = invert_all(&samples, &enc, &dec, &cfg.invert, &pf)?;
                save_latents(&wd.latents(), &latents)?;
                println!("inverted {} images into {}", latents.len(), wd.latents().display());
            }
        }
        Command::Finetune(args) => {
            let (method, shots, seed) = cell(args)?;
            let ctx = wd.context(&cfg)?;
            let (snapshots, trace) = ctx.finetune(method, shots, seed)?;
            let dir = wd.cell(method, shots, seed);
            ctx.save_finetune(&dir, method, shots, seed, &snapshots, &trace)?;
            if let Some(last) = trace.last() {
                println!("{} iterations; final seg loss {:.5}", trace.len(), last.seg_loss);
            }
            println!("wrote {}", dir.display());
        }
        Command::Classify(args) => {
            let (method, shots, seed) = cell(args)?;
            let ctx = wd.context(&cfg)?;
            let dir = wd.cell(method, shots, seed);
            let dec = ctx.load_run_decoder(&dir, method, shots, seed)?;
            let clf = ctx.train_classifier(&dec, shots, seed)?;
            create_dir(&dir)?;
            clf.save(&dir.join(CLASSIFIER_FILE))?;
            if !clf.missing_classes.is_empty() {
                println!("warning: classes {:?} have no training pixels", clf.missing_classes);
            }
            println!("wrote {}", dir.join(CLASSIFIER_FILE).display());
        }
        Command::Eval(args) => {
            let (method, shots, seed) = cell(args)?;
            let ctx = wd.context(&cfg)?;
            let dir = wd.cell(method, shots, seed);
            let dec = ctx.load_run_decoder(&dir, method, shots, seed)?;
            let clf = load_classifier(&dir, method, shots, seed)?;
            let eval = ctx.evaluate(&dec, &clf, shots, seed)?;
            ctx.save_evaluation(&dir, &dec, &clf, &eval)?;
            println!(
                "{method} {shots}-shot seed {seed}: test mIoU {:.4}, pixel accuracy {:.4}",
                eval.miou, eval.pixel_accuracy
            );
            for (i, v) in eval.per_class_iou.iter().enumerate() {
                println!("  class {i}: IoU {v:.4}");
            }
        }
        Command::Bench => {
            let ctx = wd.context(&cfg)?;
            let report = run_benchmark(&ctx, Some(&wd.runs()), Some(&wd.bench()))?;
            print!("{}", report.summary());
        }
        Command::Render { cell: args, label, out } => {
            if let (Some(label), Some(out)) = (label, out) {
                let palette = pftseg::palette::make_palette(cfg.dataset.k)?;
                let l = pftseg::synthdata::load_label_png(label, cfg.dataset.resolution, cfg.dataset.k)?;
                let rgb = project_labels(&l, &palette)?;
                debug_assert_eq!(unproject(&rgb.0, &palette), l);
                save_image_png(out, &rgb.0)?;
                println!("wrote {}", out.display());
            } else {
                let (method, shots, seed) = cell(args)?;
                let ctx = wd.context(&cfg)?;
                let dir = wd.cell(method, shots, seed);
                let dec = ctx.load_run_decoder(&dir, method, shots, seed)?;
                let clf = load_classifier(&dir, method, shots, seed)?;
                ctx.save_renders(&dir, &dec, &clf)?;
                println!("wrote {}", dir.join("renders").display());
            }
        }
    }
    Ok(())
}

fn load_classifier(dir: &Path, method: Method, shots: usize, seed: u64) -> Result<PixelClassifier> {
    let path = dir.join(CLASSIFIER_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path,
            hint: format!("pftseg classify --method {method} --shots {shots} --seed {seed}"),
        });
    }
    PixelClassifier::load(&path)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
