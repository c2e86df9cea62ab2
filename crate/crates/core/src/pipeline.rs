//! Sender and receiver sides.
//!
//! The sender encodes the message into noise, generates a cover with `G2`
//! and translates it with `G1`; only the marked image leaves the sender.
//! The receiver holds two keys that never need each other:
//!
//! - [`ExtractionKey`]: extractor `E` plus codec parameters, used by
//!   [`reveal_message`];
//! - [`RestorationKey`]: restorer `F`, used by [`restore_cover`].
//!
//! On disk, key material is a directory with `extractor/` and `restorer/`
//! checkpoints and a `codec.toml` file.

use std::fs;
use std::path::Path;

use grdh_autograd::Tensor;
use rand::Rng;

use crate::codec::{self, BitString, CodecParams, NoiseVector};
use crate::data::ImageTensor;
use crate::nets::{self, ArchSpec, Network};
use crate::training::check_chain;
use crate::{Error, Result};

pub const EXTRACTOR_DIR: &str = "extractor";
pub const RESTORER_DIR: &str = "restorer";
pub const CODEC_FILE: &str = "codec.toml";

#[derive(Clone, Debug)]
pub struct HideResult {
    pub marked: ImageTensor,
    /// Sender-side record; never transmitted.
    pub cover: ImageTensor,
    /// Sender-side record; never transmitted.
    pub noise: NoiseVector,
    pub padded_bit_length: usize,
}

/// Encodes `message`, generates the cover and translates it.
pub fn hide<R: Rng + ?Sized>(
    message: &BitString,
    g1: &Network,
    g2: &Network,
    codec: &CodecParams,
    rng: &mut R,
) -> Result<HideResult> {
    let (_, latent_dim) = check_chain(g1, g2)?;
    if latent_dim != codec.latent_dim() {
        return Err(Error::Incompatible(format!(
            "generator latent_dim {latent_dim} differs from codec latent_dim {}",
            codec.latent_dim()
        )));
    }
    let noise = codec::encode(message, codec, rng)?;
    let z = Tensor::new([1, latent_dim], noise.to_f32())?;
    let cover_t = g2.infer(&z)?;
    let marked_t = g1.infer(&cover_t)?;
    Ok(HideResult {
        marked: ImageTensor::from_tensor(&marked_t, 0)?,
        cover: ImageTensor::from_tensor(&cover_t, 0)?,
        noise,
        padded_bit_length: codec.capacity_bits(),
    })
}

/// Anything that recovers the noise vector from a marked image.
pub trait NoiseExtractor {
    fn extract(&self, marked: &ImageTensor) -> Result<Vec<f64>>;
}

impl NoiseExtractor for Network {
    fn extract(&self, marked: &ImageTensor) -> Result<Vec<f64>> {
        if !matches!(self.spec(), ArchSpec::Extractor { .. }) {
            return Err(Error::Incompatible(format!("{} is not an extractor", self.arch_id())));
        }
        let out = self.infer(&marked.to_tensor())?;
        Ok(out.data().iter().map(|&v| f64::from(v)).collect())
    }
}

/// Test stand-in for a perfect extractor: returns the true noise.
#[derive(Clone, Debug)]
pub struct OracleExtractor {
    pub noise: NoiseVector,
}

impl NoiseExtractor for OracleExtractor {
    fn extract(&self, _marked: &ImageTensor) -> Result<Vec<f64>> {
        Ok(self.noise.values().to_vec())
    }
}

/// Decodes the extracted noise and truncates to `message_bit_length`.
pub fn reveal_with(
    marked: &ImageTensor,
    extractor: &dyn NoiseExtractor,
    codec: &CodecParams,
    message_bit_length: usize,
) -> Result<BitString> {
    if message_bit_length > codec.capacity_bits() {
        return Err(Error::Capacity {
            bits: message_bit_length,
            capacity: codec.capacity_bits(),
        });
    }
    if message_bit_length == 0 {
        return Ok(BitString::new());
    }
    let noise = extractor.extract(marked)?;
    Ok(codec::decode(&noise, codec)?.truncated(message_bit_length))
}

/// Extractor plus codec: everything needed to read the message.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionKey {
    pub extractor: Network,
    pub codec: CodecParams,
}

impl ExtractionKey {
    pub fn new(extractor: Network, codec: CodecParams) -> Result<Self> {
        let ArchSpec::Extractor { latent_dim, .. } = extractor.spec() else {
            return Err(Error::Validation(format!("{} is not an extractor", extractor.arch_id())));
        };
        if *latent_dim != codec.latent_dim() {
            return Err(Error::Validation(format!(
                "extractor latent_dim {latent_dim} differs from codec latent_dim {}",
                codec.latent_dim()
            )));
        }
        Ok(Self { extractor, codec })
    }

    pub fn image_size(&self) -> usize {
        self.extractor.spec().image_size()
    }
}

/// Restorer: everything needed to recover the cover.
#[derive(Clone, Debug, PartialEq)]
pub struct RestorationKey {
    pub restorer: Network,
}

impl RestorationKey {
    pub fn new(restorer: Network) -> Result<Self> {
        if !matches!(restorer.spec(), ArchSpec::Translator { .. }) {
            return Err(Error::Validation(format!("{} is not a translator", restorer.arch_id())));
        }
        Ok(Self { restorer })
    }

    pub fn image_size(&self) -> usize {
        self.restorer.spec().image_size()
    }
}

/// Both receiver keys, distributed ahead of time.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyMaterial {
    pub extraction: ExtractionKey,
    pub restoration: RestorationKey,
}

impl KeyMaterial {
    pub fn new(extractor: Network, restorer: Network, codec: CodecParams) -> Result<Self> {
        let extraction = ExtractionKey::new(extractor, codec)?;
        let restoration = RestorationKey::new(restorer)?;
        if extraction.image_size() != restoration.image_size() {
            return Err(Error::Validation(format!(
                "extractor takes {0}x{0} images, restorer {1}x{1}",
                extraction.image_size(),
                restoration.image_size()
            )));
        }
        Ok(Self { extraction, restoration })
    }

    pub fn codec(&self) -> &CodecParams {
        &self.extraction.codec
    }
}

/// Reads the message with the extraction key alone.
pub fn reveal_message(marked: &ImageTensor, key: &ExtractionKey, message_bit_length: usize) -> Result<BitString> {
    check_image(marked, key.image_size())?;
    reveal_with(marked, &key.extractor, &key.codec, message_bit_length)
}

/// Recovers the cover with the restoration key alone.
pub fn restore_cover(marked: &ImageTensor, key: &RestorationKey) -> Result<ImageTensor> {
    check_image(marked, key.image_size())?;
    let out = key.restorer.infer(&marked.to_tensor())?;
    ImageTensor::from_tensor(&out, 0)
}

fn check_image(img: &ImageTensor, size: usize) -> Result<()> {
    if img.shape() != [size, size, 3] {
        return Err(Error::Shape(format!("expected a {size}x{size}x3 image, got {:?}", img.shape())));
    }
    Ok(())
}

pub fn export_key_material(key: &KeyMaterial, dir: &Path) -> Result<()> {
    nets::save_checkpoint(&key.extraction.extractor, &dir.join(EXTRACTOR_DIR))?;
    nets::save_checkpoint(&key.restoration.restorer, &dir.join(RESTORER_DIR))?;
    write_codec(&key.extraction.codec, &dir.join(CODEC_FILE))
}

pub fn write_codec(codec: &CodecParams, path: &Path) -> Result<()> {
    let text = toml::to_string(codec).map_err(|e| Error::Validation(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_codec(path: &Path) -> Result<CodecParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Loads only the extractor and codec parameters.
pub fn import_extraction_key(dir: &Path) -> Result<ExtractionKey> {
    let extractor = nets::load_checkpoint(&dir.join(EXTRACTOR_DIR))?;
    let codec = read_codec(&dir.join(CODEC_FILE))?;
    ExtractionKey::new(extractor, codec)
}

/// Loads only the restorer.
pub fn import_restoration_key(dir: &Path) -> Result<RestorationKey> {
    RestorationKey::new(nets::load_checkpoint(&dir.join(RESTORER_DIR))?)
}

pub fn import_key_material(dir: &Path) -> Result<KeyMaterial> {
    let e = import_extraction_key(dir)?;
    let f = import_restoration_key(dir)?;
    KeyMaterial::new(e.extractor, f.restorer, e.codec)
}
