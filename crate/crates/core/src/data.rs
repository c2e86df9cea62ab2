//! Image tensors, dataset loading and synthetic two-domain data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use grdh_autograd::Tensor;
use image::imageops::FilterType;
use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::seed;
use crate::{Error, Result};

/// `H×W×C` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f32>,
}

/// Byte to `[-1, 1]`: `2·b/255 - 1`.
pub fn byte_to_unit(b: u8) -> f32 {
    2.0 * f32::from(b) / 255.0 - 1.0
}

/// Inverse of [`byte_to_unit`], rounding to the nearest byte.
pub fn unit_to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("{channels} channels; expected 1 or 3")));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn from_bytes(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| byte_to_unit(b)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| unit_to_byte(v)).collect()
    }

    /// The image as it arrives after an 8-bit lossless channel.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| byte_to_unit(unit_to_byte(v))).collect(),
            ..self.clone()
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| f64::from(v)).sum::<f64>() / self.pixels.len() as f64
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w, c) = (self.height, self.width, self.channels);
        Tensor::from_fn([1, c, h, w], |i| {
            let (ch, rest) = (i / (h * w), i % (h * w));
            self.pixels[rest * c + ch]
        })
    }

    /// Image `index` of an `[N, C, H, W]` tensor. Values are clamped into
    /// `[-1, 1]` to absorb rounding at the edges of a bounded activation.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<Self> {
        let &[n, c, h, w] = t.shape() else {
            return Err(Error::Shape(format!("expected NCHW tensor, got {:?}", t.shape())));
        };
        if index >= n {
            return Err(Error::Shape(format!("index {index} out of batch {n}")));
        }
        let plane = &t.data()[index * c * h * w..(index + 1) * c * h * w];
        let mut pixels = vec![0.0; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                pixels[p * c + ch] = plane[ch * h * w + p].clamp(-1.0, 1.0);
            }
        }
        Self::new(h, w, c, pixels)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let (w, h) = (self.width as u32, self.height as u32);
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        image::save_buffer_with_format(path, &bytes, w, h, color, image::ImageFormat::Png)?;
        Ok(())
    }

    /// Loads a PNG without resizing; RGB images keep three channels,
    /// grayscale images keep one.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16);
        if gray {
            let g = img.to_luma8();
            Self::from_bytes(g.height() as usize, g.width() as usize, 1, g.as_raw())
        } else {
            let rgb = img.to_rgb8();
            Self::from_bytes(rgb.height() as usize, rgb.width() as usize, 3, rgb.as_raw())
        }
    }
}

/// Stacks images into an `[N, C, H, W]` tensor.
pub fn stack_images(images: &[&ImageTensor]) -> Result<Tensor<f32>> {
    let parts: Vec<Tensor<f32>> = images.iter().map(|im| im.to_tensor()).collect();
    Ok(Tensor::stack(&parts)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    X,
    Y,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Folder(PathBuf),
    Synthetic { style: SynthStyle, seed: u64 },
}

/// A collection of same-shaped images from one domain.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    images: Vec<ImageTensor>,
    domain: Domain,
    source: DatasetSource,
}

impl DomainDataset {
    pub fn new(images: Vec<ImageTensor>, domain: Domain, source: DatasetSource) -> Result<Self> {
        if let Some(first) = images.first() {
            if let Some(bad) = images.iter().find(|im| im.shape() != first.shape()) {
                return Err(Error::Shape(format!(
                    "dataset mixes {:?} and {:?} images",
                    first.shape(),
                    bad.shape()
                )));
            }
        }
        Ok(Self { images, domain, source })
    }

    pub fn images(&self) -> &[ImageTensor] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn source(&self) -> &DatasetSource {
        &self.source
    }

    /// `[H, W, C]` of the images, if any.
    pub fn image_shape(&self) -> Option<[usize; 3]> {
        self.images.first().map(ImageTensor::shape)
    }

    /// Writes every image as `NNNNN.png` into `dir`.
    pub fn save_folder(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, im) in self.images.iter().enumerate() {
            im.save_png(&dir.join(format!("{i:05}.png")))?;
        }
        Ok(())
    }
}

/// Files skipped while loading a folder.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub loaded: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads every PNG/JPEG in `path` (sorted by file name), resized to
/// `size×size` RGB with a bilinear filter.
pub fn load_image_folder(path: &Path, size: usize, domain: Domain) -> Result<(DomainDataset, LoadReport)> {
    let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    let mut report = LoadReport::default();
    let mut images = Vec::new();
    for f in files {
        match image::open(&f) {
            Ok(img) => {
                let rgb = img.resize_exact(size as u32, size as u32, FilterType::Triangle).to_rgb8();
                images.push(ImageTensor::from_bytes(size, size, 3, rgb.as_raw())?);
                report.loaded += 1;
            }
            Err(e) => {
                warn!("skipping {}: {e}", f.display());
                report.skipped.push((f, e.to_string()));
            }
        }
    }
    if images.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let ds = DomainDataset::new(images, domain, DatasetSource::Folder(path.to_path_buf()))?;
    Ok((ds, report))
}

/// Synthetic domain pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SynthStyle {
    /// Random geometric scenes with per-pixel grain; `Y` swaps the
    /// foreground and background palettes of `X`.
    #[default]
    PaletteSwap,
    /// Random geometric scenes with per-pixel grain; `Y` is the
    /// photographic negative of `X`.
    Negative,
}

impl FromStr for SynthStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "palette-swap" => Ok(Self::PaletteSwap),
            "negative" => Ok(Self::Negative),
            other => Err(Error::Config(format!(
                "unknown synthetic style `{other}` (expected `palette-swap` or `negative`)"
            ))),
        }
    }
}

impl fmt::Display for SynthStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PaletteSwap => "palette-swap",
            Self::Negative => "negative",
        })
    }
}

const PALETTE_A: [f32; 3] = [-0.55, -0.15, 0.35];
const PALETTE_B: [f32; 3] = [0.75, 0.55, -0.45];
/// Per-pixel grain amplitude; `Y` carries the reflected grain of its scene,
/// so the ideal translation stays a per-pixel map.
const GRAIN: f32 = 0.1;

#[derive(Clone, Copy)]
enum Shape {
    Disc { cx: f32, cy: f32, r: f32 },
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
        }
    }
}

fn random_scene(rng: &mut ChaCha8Rng, size: usize) -> Vec<Shape> {
    let s = size as f32;
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            if rng.random_bool(0.5) {
                Shape::Disc {
                    cx: rng.random_range(0.2 * s..0.8 * s),
                    cy: rng.random_range(0.2 * s..0.8 * s),
                    r: rng.random_range(0.12 * s..0.3 * s),
                }
            } else {
                let (w, h) = (rng.random_range(0.2 * s..0.5 * s), rng.random_range(0.2 * s..0.5 * s));
                let (x0, y0) = (rng.random_range(0.0..s - w), rng.random_range(0.0..s - h));
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                }
            }
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| (v + rng.random_range(-amount..amount)).clamp(-1.0, 1.0))
}

/// Renders a scene with 2×2 supersampled coverage.
fn render(scene: &[Shape], size: usize, bg: [f32; 3], fg: [f32; 3]) -> ImageTensor {
    let mut pixels = Vec::with_capacity(size * size * 3);
    for py in 0..size {
        for px in 0..size {
            let mut cover = 0.0f32;
            for (dx, dy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let (x, y) = (px as f32 + dx, py as f32 + dy);
                if scene.iter().any(|s| s.contains(x, y)) {
                    cover += 0.25;
                }
            }
            pixels.extend((0..3).map(|c| (bg[c] * (1.0 - cover) + fg[c] * cover).clamp(-1.0, 1.0)));
        }
    }
    ImageTensor::new(size, size, 3, pixels).expect("valid synthetic image")
}

fn synth_image(rng: &mut ChaCha8Rng, style: SynthStyle, size: usize, domain: Domain) -> ImageTensor {
    let scene = random_scene(rng, size);
    let a = jitter(rng, PALETTE_A, 0.1);
    let b = jitter(rng, PALETTE_B, 0.1);
    let (bg, fg) = match (style, domain) {
        (SynthStyle::PaletteSwap, Domain::X) => (a, b),
        (SynthStyle::PaletteSwap, Domain::Y) => (b, a),
        (SynthStyle::Negative, Domain::X) => (a, b),
        (SynthStyle::Negative, Domain::Y) => (a.map(|v| -v), b.map(|v| -v)),
    };
    let sign = if domain == Domain::X { 1.0 } else { -1.0 };
    let mut img = render(&scene, size, bg, fg);
    for p in img.pixels.iter_mut() {
        *p = (*p + sign * rng.random_range(-GRAIN..GRAIN)).clamp(-1.0, 1.0);
    }
    img
}

/// Two unpaired datasets of `n` images each. The domains share the scene
/// distribution but draw their scenes from independent streams.
pub fn synth_domains(style: SynthStyle, n: usize, size: usize, seed: u64) -> Result<(DomainDataset, DomainDataset)> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    if size < 16 {
        return Err(Error::Config(format!("synthetic image size {size} < 16")));
    }
    let make = |domain: Domain, tag: u64| -> Result<DomainDataset> {
        let mut rng = seed::rng(seed::derive(seed, tag));
        let images = (0..n).map(|_| synth_image(&mut rng, style, size, domain)).collect();
        DomainDataset::new(images, domain, DatasetSource::Synthetic { style, seed })
    };
    Ok((make(Domain::X, 0)?, make(Domain::Y, 1)?))
}

/// One mini-batch: dataset indices and the stacked `[N, C, H, W]` tensor.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
}

/// Endless shuffled batch stream. Each epoch visits every image exactly
/// once; the final batch of an epoch may be short.
pub struct BatchStream<'a> {
    dataset: &'a DomainDataset,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl<'a> BatchStream<'a> {
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

pub fn batches(ds: &DomainDataset, batch_size: usize, rng: ChaCha8Rng) -> Result<BatchStream<'_>> {
    if ds.is_empty() {
        return Err(Error::Config("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(BatchStream {
        dataset: ds,
        batch_size,
        rng,
        order: Vec::new(),
        cursor: 0,
        epoch: 0,
    })
}

impl Iterator for BatchStream<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = (0..self.dataset.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let indices = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let refs: Vec<&ImageTensor> = indices.iter().map(|&i| &self.dataset.images[i]).collect();
        let images = stack_images(&refs).expect("dataset images share a shape");
        Some(Batch { indices, images })
    }
}
