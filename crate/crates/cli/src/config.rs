use std::path::{Path, PathBuf};

use grdh::codec::CodecParams;
use grdh::data::SynthStyle;
use grdh::nets::default_extractor_channels;
use grdh::training::{GeneratorArch, TrainConfig, TranslatorArch};
use grdh::Error;
use serde::{Deserialize, Serialize};

/// Whole-experiment configuration. Every key has a default, so an empty
/// file (or no file) describes the toy pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub image_size: usize,
    pub latent_dim: usize,
    pub codec: CodecSection,
    pub data: DataSection,
    pub translator: TranslatorSection,
    pub generator: GeneratorSection,
    pub extractor: ExtractorSection,
    pub evaluate: EvaluateSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub k: u32,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic style used when no folders are given.
    pub style: String,
    /// Images per synthetic domain.
    pub n: usize,
    pub x_dir: Option<PathBuf>,
    pub y_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorSection {
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub downsamplings: usize,
    pub disc_channels: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub base_channels: usize,
    pub disc_channels: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    /// First-stage channels; defaults to the image size.
    pub base_channels: Option<usize>,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub n_messages: usize,
    pub float_path: bool,
    pub k_values: Vec<u32>,
    pub deltas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            image_size: 32,
            latent_dim: 32,
            codec: CodecSection::default(),
            data: DataSection::default(),
            translator: TranslatorSection::default(),
            generator: GeneratorSection::default(),
            extractor: ExtractorSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl Default for CodecSection {
    fn default() -> Self {
        Self { k: 1, delta: 0.01 }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            style: SynthStyle::default().to_string(),
            n: 200,
            x_dir: None,
            y_dir: None,
        }
    }
}

impl Default for TranslatorSection {
    fn default() -> Self {
        let a = TranslatorArch::default();
        Self {
            base_channels: a.base_channels,
            residual_blocks: a.residual_blocks,
            downsamplings: a.downsamplings,
            disc_channels: a.disc_channels,
            train: TrainConfig {
                batch_size: 4,
                steps: 2000,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let a = GeneratorArch::default();
        Self {
            base_channels: a.base_channels,
            disc_channels: a.disc_channels,
            train: TrainConfig {
                batch_size: 16,
                steps: 1000,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            base_channels: None,
            train: TrainConfig {
                batch_size: 32,
                steps: 6000,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            n_messages: 200,
            float_path: false,
            k_values: grdh::metrics::DEFAULT_K_GRID.to_vec(),
            deltas: grdh::metrics::default_delta_grid(),
        }
    }
}

fn field(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::Parameter(m) => Error::Config(format!("{name}.{m}")),
        other => other,
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn codec(&self) -> grdh::Result<CodecParams> {
        CodecParams::new(self.codec.k, self.codec.delta, self.latent_dim).map_err(|e| match e {
            Error::Parameter(m) => Error::Config(format!("codec: {m}")),
            other => other,
        })
    }

    pub fn style(&self) -> grdh::Result<SynthStyle> {
        self.data.style.parse()
    }

    pub fn translator_arch(&self) -> TranslatorArch {
        let a = &self.translator;
        TranslatorArch {
            base_channels: a.base_channels,
            residual_blocks: a.residual_blocks,
            downsamplings: a.downsamplings,
            disc_channels: a.disc_channels,
        }
    }

    pub fn generator_arch(&self) -> GeneratorArch {
        GeneratorArch {
            base_channels: self.generator.base_channels,
            disc_channels: self.generator.disc_channels,
        }
    }

    pub fn extractor_channels(&self) -> usize {
        self.extractor.base_channels.unwrap_or_else(|| default_extractor_channels(self.image_size))
    }

    /// Checks every declared invariant before any work starts.
    pub fn validate(&self) -> grdh::Result<()> {
        let s = self.image_size;
        if !(s.is_power_of_two() && s >= 16) {
            return Err(Error::Config(format!("image_size: {s} must be a power of two >= 16")));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim: must be at least 1".into()));
        }
        self.codec()?;
        self.style().map_err(|e| Error::Config(format!("data.style: {e}")))?;
        if self.data.n == 0 {
            return Err(Error::Config("data.n: must be at least 1".into()));
        }
        match (&self.data.x_dir, &self.data.y_dir) {
            (None, None) => {}
            (Some(x), Some(y)) => {
                for (key, p) in [("data.x_dir", x), ("data.y_dir", y)] {
                    if !p.is_dir() {
                        return Err(Error::Config(format!("{key}: {} is not a directory", p.display())));
                    }
                }
            }
            _ => return Err(Error::Config("data: x_dir and y_dir must be given together".into())),
        }
        for (name, t) in [
            ("translator.train", &self.translator.train),
            ("generator.train", &self.generator.train),
            ("extractor.train", &self.extractor.train),
        ] {
            t.validate().map_err(|e| field(name, e))?;
        }
        let a = &self.translator;
        for (key, v) in [
            ("translator.base_channels", a.base_channels),
            ("translator.disc_channels", a.disc_channels),
            ("generator.base_channels", self.generator.base_channels),
            ("generator.disc_channels", self.generator.disc_channels),
            ("extractor.base_channels", self.extractor_channels()),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{key}: must be at least 1")));
            }
        }
        if self.evaluate.n_messages == 0 {
            return Err(Error::Config("evaluate.n_messages: must be at least 1".into()));
        }
        if self.evaluate.k_values.is_empty() || self.evaluate.deltas.is_empty() {
            return Err(Error::Config("evaluate: k_values and deltas must be nonempty".into()));
        }
        let codec = self.codec()?;
        for &k in &self.evaluate.k_values {
            codec.with_k(k).map_err(|e| Error::Config(format!("evaluate.k_values: {e}")))?;
        }
        for &d in &self.evaluate.deltas {
            codec.with_delta(d).map_err(|e| Error::Config(format!("evaluate.deltas: {e}")))?;
        }
        Ok(())
    }
}
