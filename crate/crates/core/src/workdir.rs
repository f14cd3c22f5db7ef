//! On-disk layout shared by the command-line stages.
//!
//! ```text
//! <root>/data/                 dataset (images/, labels/, manifest.json)
//! <root>/pretrained/           decoder.ckpt, encoder.ckpt, report.json
//! <root>/latents/<sample_id>   one latent checkpoint per image
//! <root>/runs/<method>-<n>shot-seed<s>/
//! <root>/bench/                report.csv, report.json, summary.txt
//! ```

use std::path::{Path, PathBuf};

use crate::bench::{cell_dir, load_latents, Context, ExperimentConfig, Method};
use crate::error::{Error, Result};
use crate::generator::Decoder;
use crate::inversion::Encoder;
use crate::synthdata::{load_dataset, Dataset, MANIFEST_FILE};

#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.root.join("pretrained")
    }

    pub fn decoder_ckpt(&self) -> PathBuf {
        self.pretrained().join("decoder.ckpt")
    }

    pub fn encoder_ckpt(&self) -> PathBuf {
        self.pretrained().join("encoder.ckpt")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents")
    }

    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench")
    }

    pub fn cell(&self, method: Method, shots: usize, seed: u64) -> PathBuf {
        cell_dir(&self.runs(), method, shots, seed)
    }

    fn require(path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: hint.into(),
            })
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        Workdir::require(&self.data().join(MANIFEST_FILE), "pftseg gen-data")?;
        load_dataset(&self.data())
    }

    pub fn load_pretrained(&self) -> Result<(Encoder, Decoder)> {
        Workdir::require(&self.decoder_ckpt(), "pftseg pretrain")?;
        Workdir::require(&self.encoder_ckpt(), "pftseg pretrain")?;
        Ok((
            Encoder::load(&self.encoder_ckpt())?,
            Decoder::load(&self.decoder_ckpt())?,
        ))
    }

    /// Dataset, pretrained decoder and cached latents, checked against the
    /// configuration.
    pub fn context(&self, config: &ExperimentConfig) -> Result<Context> {
        let dataset = self.load_dataset()?;
        let (_, decoder) = self.load_pretrained()?;
        if decoder.config() != &config.decoder {
            return Err(Error::Config(format!(
                "pretrained decoder in {} was built with a different decoder config; rerun `pftseg pretrain`",
                self.decoder_ckpt().display()
            )));
        }
        let ids: Vec<&str> = dataset
            .labeled
            .iter()
            .chain(&dataset.support)
            .chain(&dataset.test)
            .map(|s| s.sample_id.as_str())
            .collect();
        let latents = load_latents(&self.latents(), &ids)?;
        Context::new(config.clone(), dataset, decoder, latents)
    }
}
