//! Network roles and their architectures.
//!
//! Five roles appear in the hiding scheme:
//!
//! | role | arch | maps |
//! |------|------|------|
//! | cover generator | [`ArchSpec::Generator`] | noise → cover image |
//! | translator / restorer | [`ArchSpec::Translator`] | image → image |
//! | discriminators | [`ArchSpec::Discriminator`] | image → realness logit |
//! | extractor | [`ArchSpec::Extractor`] | marked image → noise |
//!
//! A [`Network`] is a layer table plus named parameter arrays. Forward
//! passes are recorded on a [`Graph`]; a network must first be
//! [attached](Network::attach) to the graph, which places its parameters
//! on the tape either as differentiable leaves or as constants.

mod checkpoint;

use std::fmt;

use grdh_autograd::{Adam, Gradients, Graph, NormStats, Scalar, Tensor, Var};
use indexmap::IndexMap;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::CodecParams;
use crate::seed;
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, TensorEntry, TensorKind, MANIFEST_FILE};

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;
/// Negative slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Standard deviation of the normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorHead {
    /// Convolutional patch logits averaged to one scalar (translation phase).
    Patch,
    /// Strided convolutions down to 4×4 followed by a dense layer
    /// (generator phase).
    Dense,
}

/// Architecture description; enough to rebuild a network from scratch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    Generator {
        latent_dim: usize,
        size: usize,
        base_channels: usize,
    },
    Translator {
        size: usize,
        base_channels: usize,
        residual_blocks: usize,
        /// Stride-2 stages on each side of the residual trunk.
        #[serde(default = "default_downsamplings")]
        downsamplings: usize,
    },
    Discriminator {
        size: usize,
        base_channels: usize,
        head: DiscriminatorHead,
    },
    Extractor {
        size: usize,
        latent_dim: usize,
        base_channels: usize,
    },
}

/// First-stage extractor channels for a given image size: 64 at 64×64,
/// 32 at 32×32.
pub fn default_extractor_channels(size: usize) -> usize {
    size
}

fn default_downsamplings() -> usize {
    2
}

fn log2_exact(n: usize) -> Option<u32> {
    n.is_power_of_two().then(|| n.trailing_zeros())
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl ArchSpec {
    pub fn generator(latent_dim: usize, size: usize, base_channels: usize) -> Self {
        Self::Generator {
            latent_dim,
            size,
            base_channels,
        }
    }

    pub fn translator(size: usize, base_channels: usize, residual_blocks: usize) -> Self {
        Self::Translator {
            size,
            base_channels,
            residual_blocks,
            downsamplings: default_downsamplings(),
        }
    }

    /// Translator with `n` downsampling stages; other variants are returned unchanged.
    pub fn with_downsamplings(mut self, n: usize) -> Self {
        if let Self::Translator { downsamplings, .. } = &mut self {
            *downsamplings = n;
        }
        self
    }

    pub fn discriminator(size: usize, base_channels: usize, head: DiscriminatorHead) -> Self {
        Self::Discriminator {
            size,
            base_channels,
            head,
        }
    }

    pub fn extractor(size: usize, latent_dim: usize, base_channels: usize) -> Self {
        Self::Extractor {
            size,
            latent_dim,
            base_channels,
        }
    }

    pub fn role(&self) -> &'static str {
        match self {
            Self::Generator { .. } => "generator",
            Self::Translator { .. } => "translator",
            Self::Discriminator { head: DiscriminatorHead::Patch, .. } => "patch-discriminator",
            Self::Discriminator { head: DiscriminatorHead::Dense, .. } => "dense-discriminator",
            Self::Extractor { .. } => "extractor",
        }
    }

    pub fn arch_id(&self) -> String {
        match *self {
            Self::Generator { latent_dim, size, base_channels } => {
                format!("generator/l{latent_dim}-s{size}-c{base_channels}")
            }
            Self::Translator { size, base_channels, residual_blocks, downsamplings: 2 } => {
                format!("translator/s{size}-c{base_channels}-r{residual_blocks}")
            }
            Self::Translator { size, base_channels, residual_blocks, downsamplings } => {
                format!("translator/s{size}-c{base_channels}-r{residual_blocks}-d{downsamplings}")
            }
            Self::Discriminator { size, base_channels, .. } => {
                format!("{}/s{size}-c{base_channels}", self.role())
            }
            Self::Extractor { size, latent_dim, base_channels } => {
                format!("extractor/s{size}-l{latent_dim}-c{base_channels}")
            }
        }
    }

    pub fn image_size(&self) -> usize {
        match *self {
            Self::Generator { size, .. }
            | Self::Translator { size, .. }
            | Self::Discriminator { size, .. }
            | Self::Extractor { size, .. } => size,
        }
    }

    pub fn latent_dim(&self) -> Option<usize> {
        match *self {
            Self::Generator { latent_dim, .. } | Self::Extractor { latent_dim, .. } => Some(latent_dim),
            _ => None,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match *self {
            Self::Generator { latent_dim, .. } => vec![latent_dim],
            _ => vec![3, self.image_size(), self.image_size()],
        }
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        match *self {
            Self::Generator { size, .. } | Self::Translator { size, .. } => vec![3, size, size],
            Self::Discriminator { .. } => vec![1],
            Self::Extractor { latent_dim, .. } => vec![latent_dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.image_size();
        match *self {
            Self::Generator { latent_dim, base_channels, .. } => {
                require(log2_exact(size).is_some_and(|p| p >= 4), || {
                    format!("generator size {size} must be a power of two >= 16")
                })?;
                require(latent_dim >= 1 && base_channels >= 1, || {
                    "generator latent_dim and base_channels must be >= 1".into()
                })
            }
            Self::Translator { base_channels, downsamplings: n, .. } => {
                require(n <= 4, || format!("translator downsamplings {n} must be <= 4"))?;
                require(size >= 16 && size % (1 << n) == 0, || {
                    format!("translator size {size} must be >= 16 and divisible by {}", 1 << n)
                })?;
                require(base_channels >= 1, || "translator base_channels must be >= 1".into())
            }
            Self::Discriminator { base_channels, head, .. } => {
                let ok = match head {
                    DiscriminatorHead::Patch => size >= 16 && size % 8 == 0,
                    DiscriminatorHead::Dense => log2_exact(size).is_some_and(|p| p >= 4),
                };
                require(ok, || format!("discriminator size {size} unsupported for {head:?} head"))?;
                require(base_channels >= 1, || "discriminator base_channels must be >= 1".into())
            }
            Self::Extractor { latent_dim, base_channels, .. } => {
                require(log2_exact(size).is_some_and(|p| p >= 4), || {
                    format!("extractor size {size} must be a power of two >= 16")
                })?;
                require(latent_dim >= 1 && base_channels >= 1, || {
                    "extractor latent_dim and base_channels must be >= 1".into()
                })
            }
        }
    }

    /// The layer table.
    pub fn layers(&self) -> Result<Vec<Layer>> {
        self.validate()?;
        let conv = |name: &str, cin, cout, kernel, stride, pad, bias| Layer::Conv {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            stride,
            pad,
            bias,
        };
        let convt = |name: &str, cin, cout, bias| Layer::ConvTranspose {
            name: name.to_string(),
            cin,
            cout,
            kernel: 4,
            stride: 2,
            pad: 1,
            bias,
        };
        let bn = |name: &str, channels| Layer::BatchNorm {
            name: name.to_string(),
            channels,
        };
        let mut l = Vec::new();
        match *self {
            Self::Generator { latent_dim, size, base_channels: b } => {
                let ups = log2_exact(size).unwrap() as usize - 2;
                let mut c = b << (ups - 1);
                l.push(Layer::Dense {
                    name: "project".into(),
                    fin: latent_dim,
                    fout: c * 16,
                    bias: false,
                });
                l.push(Layer::Unflatten { c, h: 4, w: 4 });
                l.push(bn("project_bn", c));
                l.push(Layer::Relu);
                for i in 1..ups {
                    l.push(convt(&format!("up{i}"), c, c / 2, false));
                    l.push(bn(&format!("up{i}_bn"), c / 2));
                    l.push(Layer::Relu);
                    c /= 2;
                }
                l.push(convt("to_rgb", c, 3, true));
                l.push(Layer::Tanh);
            }
            Self::Translator { base_channels: b, residual_blocks, downsamplings, .. } => {
                l.extend([conv("enc", 3, b, 7, 1, 3, false), Layer::InstanceNorm, Layer::Relu]);
                let mut c = b;
                for i in 1..=downsamplings {
                    l.extend([conv(&format!("down{i}"), c, 2 * c, 3, 2, 1, false), Layer::InstanceNorm, Layer::Relu]);
                    c *= 2;
                }
                for i in 0..residual_blocks {
                    l.push(Layer::Residual {
                        body: vec![
                            conv(&format!("res{i}.conv1"), c, c, 3, 1, 1, false),
                            Layer::InstanceNorm,
                            Layer::Relu,
                            conv(&format!("res{i}.conv2"), c, c, 3, 1, 1, false),
                            Layer::InstanceNorm,
                        ],
                    });
                }
                for i in 1..=downsamplings {
                    l.extend([convt(&format!("up{i}"), c, c / 2, false), Layer::InstanceNorm, Layer::Relu]);
                    c /= 2;
                }
                l.extend([conv("to_rgb", b, 3, 7, 1, 3, true), Layer::Tanh]);
            }
            Self::Discriminator { size, base_channels: b, head } => match head {
                DiscriminatorHead::Patch => {
                    l.extend([conv("c1", 3, b, 4, 2, 1, true), Layer::LeakyRelu]);
                    l.extend([conv("c2", b, 2 * b, 4, 2, 1, false), Layer::InstanceNorm, Layer::LeakyRelu]);
                    l.extend([conv("c3", 2 * b, 4 * b, 4, 2, 1, false), Layer::InstanceNorm, Layer::LeakyRelu]);
                    l.extend([conv("patch", 4 * b, 1, 3, 1, 1, true), Layer::SpatialMean]);
                }
                DiscriminatorHead::Dense => {
                    let downs = log2_exact(size).unwrap() as usize - 2;
                    l.extend([conv("c1", 3, b, 4, 2, 1, true), Layer::LeakyRelu]);
                    let mut c = b;
                    for i in 2..=downs {
                        l.push(conv(&format!("c{i}"), c, 2 * c, 4, 2, 1, false));
                        l.push(bn(&format!("c{i}_bn"), 2 * c));
                        l.push(Layer::LeakyRelu);
                        c *= 2;
                    }
                    l.push(Layer::Flatten);
                    l.push(Layer::Dense {
                        name: "score".into(),
                        fin: c * 16,
                        fout: 1,
                        bias: true,
                    });
                }
            },
            Self::Extractor { size, latent_dim, base_channels: b } => {
                let mut cin = 3;
                for i in 1..=4 {
                    let cout = b << (i - 1);
                    l.push(conv(&format!("c{i}"), cin, cout, 4, 2, 1, false));
                    l.push(bn(&format!("c{i}_bn"), cout));
                    l.push(Layer::LeakyRelu);
                    cin = cout;
                }
                let side = size / 16;
                l.push(Layer::Flatten);
                l.push(Layer::Dense {
                    name: "fc".into(),
                    fin: cin * side * side,
                    fout: latent_dim,
                    bias: true,
                });
                l.push(Layer::Tanh);
            }
        }
        Ok(l)
    }
}

/// One entry of a layer table.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    ConvTranspose {
        name: String,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    Dense {
        name: String,
        fin: usize,
        fout: usize,
        bias: bool,
    },
    /// Batch normalization with a learned per-channel affine part.
    BatchNorm {
        name: String,
        channels: usize,
    },
    /// Instance normalization without affine part.
    InstanceNorm,
    Relu,
    LeakyRelu,
    Tanh,
    Flatten,
    Unflatten {
        c: usize,
        h: usize,
        w: usize,
    },
    /// `x + body(x)`.
    Residual {
        body: Vec<Layer>,
    },
    /// `[C, H, W]` → `[C]` spatial average.
    SpatialMean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal { mean: f64, std: f64 },
    Zeros,
    Ones,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Param,
    Buffer,
}

struct ParamDecl {
    name: String,
    shape: Vec<usize>,
    init: Init,
    slot: Slot,
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv { .. } => "conv",
            Layer::ConvTranspose { .. } => "conv-transpose",
            Layer::Dense { .. } => "dense",
            Layer::BatchNorm { .. } => "batch-norm",
            Layer::InstanceNorm => "instance-norm",
            Layer::Relu => "relu",
            Layer::LeakyRelu => "leaky-relu",
            Layer::Tanh => "tanh",
            Layer::Flatten => "flatten",
            Layer::Unflatten { .. } => "unflatten",
            Layer::Residual { .. } => "residual",
            Layer::SpatialMean => "spatial-mean",
        }
    }

    fn name(&self) -> Option<&str> {
        match self {
            Layer::Conv { name, .. }
            | Layer::ConvTranspose { name, .. }
            | Layer::Dense { name, .. }
            | Layer::BatchNorm { name, .. } => Some(name),
            _ => None,
        }
    }

    fn decls(&self, out: &mut Vec<ParamDecl>) {
        let w = |name: &str, shape: Vec<usize>| ParamDecl {
            name: format!("{name}.weight"),
            shape,
            init: Init::Normal { mean: 0.0, std: INIT_STD },
            slot: Slot::Param,
        };
        let b = |name: &str, n: usize| ParamDecl {
            name: format!("{name}.bias"),
            shape: vec![n],
            init: Init::Zeros,
            slot: Slot::Param,
        };
        match self {
            Layer::Conv { name, cin, cout, kernel, bias, .. } => {
                out.push(w(name, vec![*cout, *cin, *kernel, *kernel]));
                if *bias {
                    out.push(b(name, *cout));
                }
            }
            Layer::ConvTranspose { name, cin, cout, kernel, bias, .. } => {
                out.push(w(name, vec![*cin, *cout, *kernel, *kernel]));
                if *bias {
                    out.push(b(name, *cout));
                }
            }
            Layer::Dense { name, fin, fout, bias } => {
                out.push(w(name, vec![*fout, *fin]));
                if *bias {
                    out.push(b(name, *fout));
                }
            }
            Layer::BatchNorm { name, channels } => {
                let c = *channels;
                let decl = |suffix: &str, init, slot| ParamDecl {
                    name: format!("{name}.{suffix}"),
                    shape: vec![c],
                    init,
                    slot,
                };
                out.push(decl("gamma", Init::Normal { mean: 1.0, std: INIT_STD }, Slot::Param));
                out.push(decl("beta", Init::Zeros, Slot::Param));
                out.push(decl("running_mean", Init::Zeros, Slot::Buffer));
                out.push(decl("running_var", Init::Ones, Slot::Buffer));
            }
            Layer::Residual { body } => body.iter().for_each(|l| l.decls(out)),
            _ => {}
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::Shape(format!("{} layer cannot take input {input:?}", self.kind()));
        Ok(match self {
            Layer::Conv { cin, cout, kernel, stride, pad, .. } => {
                let &[c, h, w] = input else { return Err(bad()) };
                if c != *cin || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return Err(bad());
                }
                vec![*cout, (h + 2 * pad - kernel) / stride + 1, (w + 2 * pad - kernel) / stride + 1]
            }
            Layer::ConvTranspose { cin, cout, kernel, stride, pad, .. } => {
                let &[c, h, w] = input else { return Err(bad()) };
                if c != *cin {
                    return Err(bad());
                }
                let grow = |n: usize| (n - 1) * stride + kernel - 2 * pad;
                vec![*cout, grow(h), grow(w)]
            }
            Layer::Dense { fin, fout, .. } => {
                if input != [*fin] {
                    return Err(bad());
                }
                vec![*fout]
            }
            Layer::BatchNorm { channels, .. } => {
                if input.first() != Some(channels) {
                    return Err(bad());
                }
                input.to_vec()
            }
            Layer::Flatten => vec![input.iter().product()],
            Layer::Unflatten { c, h, w } => {
                if input.iter().product::<usize>() != c * h * w {
                    return Err(bad());
                }
                vec![*c, *h, *w]
            }
            Layer::Residual { body } => {
                let mut s = input.to_vec();
                for l in body {
                    s = l.out_shape(&s)?;
                }
                if s != input {
                    return Err(bad());
                }
                s
            }
            Layer::SpatialMean => {
                let &[c, _, _] = input else { return Err(bad()) };
                vec![c]
            }
            Layer::InstanceNorm | Layer::Relu | Layer::LeakyRelu | Layer::Tanh => input.to_vec(),
        })
    }
}

/// One row of the architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub depth: usize,
    pub kind: &'static str,
    pub name: Option<String>,
    pub output_shape: Vec<usize>,
    pub params: usize,
}

impl fmt::Display for LayerRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape: Vec<String> = self.output_shape.iter().map(ToString::to_string).collect();
        write!(
            f,
            "{:indent$}{:<16}{:<14}{:<16}{}",
            "",
            self.kind,
            self.name.as_deref().unwrap_or("-"),
            shape.join("x"),
            self.params,
            indent = 2 * self.depth
        )
    }
}

fn table_rows(layers: &[Layer], input: &[usize], depth: usize, rows: &mut Vec<LayerRow>) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for layer in layers {
        if let Layer::Residual { body } = layer {
            table_rows(body, &shape, depth + 1, rows)?;
        }
        shape = layer.out_shape(&shape)?;
        let mut decls = Vec::new();
        if !matches!(layer, Layer::Residual { .. }) {
            layer.decls(&mut decls);
        }
        rows.push(LayerRow {
            depth,
            kind: layer.kind(),
            name: layer.name().map(str::to_string),
            output_shape: shape.clone(),
            params: decls
                .iter()
                .filter(|d| d.slot == Slot::Param)
                .map(|d| d.shape.iter().product::<usize>())
                .sum(),
        });
    }
    Ok(shape)
}

/// Normalization statistics to use in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Bookkeeping carried into checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetMeta {
    pub step: u64,
    pub seed: u64,
    /// Number of training-mode forward passes folded into the running
    /// normalization statistics.
    pub stat_updates: u64,
    pub codec: Option<CodecParams>,
}

/// A network: architecture, parameters and normalization buffers.
#[derive(Clone, Debug)]
pub struct Network<S = f32> {
    spec: ArchSpec,
    layers: Vec<Layer>,
    params: IndexMap<String, Tensor<S>>,
    buffers: IndexMap<String, Tensor<S>>,
    pub meta: NetMeta,
    attached: Option<(u64, Vec<Var>)>,
}

impl<S: Scalar> PartialEq for Network<S> {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params && self.buffers == other.buffers
    }
}

fn blank_network<S: Scalar>(spec: ArchSpec) -> Result<(Network<S>, Vec<ParamDecl>)> {
    let layers = spec.layers()?;
    let mut decls = Vec::new();
    layers.iter().for_each(|l| l.decls(&mut decls));
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for d in &decls {
        let t = Tensor::zeros(d.shape.clone());
        match d.slot {
            Slot::Param => params.insert(d.name.clone(), t),
            Slot::Buffer => buffers.insert(d.name.clone(), t),
        };
    }
    let net = Network {
        spec,
        layers,
        params,
        buffers,
        meta: NetMeta::default(),
        attached: None,
    };
    Ok((net, decls))
}

impl Network<f32> {
    /// Builds and randomly initializes a network.
    pub fn build(spec: ArchSpec, seed: u64) -> Result<Self> {
        let (mut net, decls) = blank_network::<f32>(spec)?;
        let mut rng = seed::rng(seed);
        for d in decls {
            let t = match d.init {
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, 1.0),
                Init::Normal { mean, std } => {
                    let dist = Normal::new(mean, std).expect("positive std");
                    Tensor::from_fn(d.shape, |_| dist.sample(&mut rng) as f32)
                }
            };
            match d.slot {
                Slot::Param => net.params.insert(d.name, t),
                Slot::Buffer => net.buffers.insert(d.name, t),
            };
        }
        net.meta.seed = seed;
        Ok(net)
    }
}

pub fn build_generator(latent_dim: usize, size: usize, base_channels: usize, seed: u64) -> Result<Network> {
    Network::build(ArchSpec::generator(latent_dim, size, base_channels), seed)
}

pub fn build_translator(size: usize, base_channels: usize, residual_blocks: usize, seed: u64) -> Result<Network> {
    Network::build(ArchSpec::translator(size, base_channels, residual_blocks), seed)
}

pub fn build_discriminator(size: usize, base_channels: usize, head: DiscriminatorHead, seed: u64) -> Result<Network> {
    Network::build(ArchSpec::discriminator(size, base_channels, head), seed)
}

/// Extractor with the size-scaled default channel count.
pub fn build_extractor(size: usize, latent_dim: usize, seed: u64) -> Result<Network> {
    Network::build(ArchSpec::extractor(size, latent_dim, default_extractor_channels(size)), seed)
}

impl<S: Scalar> Network<S> {
    /// A network of the given architecture with all-zero parameters and
    /// buffers, to be filled from a checkpoint.
    pub fn zeroed(spec: ArchSpec) -> Result<Self> {
        Ok(blank_network(spec)?.0)
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn arch_id(&self) -> String {
        self.spec.arch_id()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.spec.input_shape()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape()
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<S>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<S>> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor<S>> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut IndexMap<String, Tensor<S>> {
        &mut self.buffers
    }

    /// Whether inference uses running normalization statistics.
    pub fn uses_running_stats(&self) -> bool {
        !self.buffers.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn architecture_table(&self) -> Result<Vec<LayerRow>> {
        let mut rows = Vec::new();
        table_rows(&self.layers, &self.input_shape(), 0, &mut rows)?;
        Ok(rows)
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        let conv = |m: &IndexMap<String, Tensor<S>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        Network {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            params: conv(&self.params),
            buffers: conv(&self.buffers),
            meta: self.meta.clone(),
            attached: None,
        }
    }

    /// Places the parameters on `g`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn attach(&mut self, g: &mut Graph<S>, trainable: bool) {
        let vars = self
            .params
            .values()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        self.attached = Some((g.id(), vars));
    }

    fn attached_vars(&self, g: &Graph<S>) -> Result<Vec<Var>> {
        match &self.attached {
            Some((id, vars)) if *id == g.id() => Ok(vars.clone()),
            _ => Err(Error::Validation(format!(
                "{} is not attached to this graph",
                self.arch_id()
            ))),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.input_shape();
        if shape.len() != want.len() + 1 || shape[1..] != want[..] {
            return Err(Error::Shape(format!(
                "{} expects [N, {}], got {shape:?}",
                self.arch_id(),
                want.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `g`. In [`Mode::Train`] the running
    /// normalization statistics are updated from the batch.
    pub fn forward(&mut self, g: &mut Graph<S>, x: Var, mode: Mode) -> Result<Var> {
        self.check_input(g.value(x).shape())?;
        let vars = self.attached_vars(g)?;
        let mut stats = Vec::new();
        let y = self.run(&self.layers, g, &vars, x, mode, &mut stats)?;
        if mode == Mode::Train && !stats.is_empty() {
            self.fold_stats(stats);
        }
        Ok(y)
    }

    /// Inference-mode forward pass on a constant batch.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.check_input(x.shape())?;
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.values().map(|t| g.input(t.clone())).collect();
        let xv = g.input(x.clone());
        let y = self.run(&self.layers, &mut g, &vars, xv, Mode::Eval, &mut Vec::new())?;
        Ok(g.value(y).clone())
    }

    fn fold_stats(&mut self, stats: Vec<(String, NormStats<S>)>) {
        let m = S::from_f64_lossy(BN_MOMENTUM);
        let keep = S::one() - m;
        for (name, st) in stats {
            let unbias = if st.count > 1 {
                S::from_f64_lossy(st.count as f64 / (st.count as f64 - 1.0))
            } else {
                S::one()
            };
            if let Some(rm) = self.buffers.get_mut(&format!("{name}.running_mean")) {
                for (r, &b) in rm.data_mut().iter_mut().zip(&st.mean) {
                    *r = keep * *r + m * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&format!("{name}.running_var")) {
                for (r, &b) in rv.data_mut().iter_mut().zip(&st.var) {
                    *r = keep * *r + m * b * unbias;
                }
            }
        }
        self.meta.stat_updates += 1;
    }

    fn var_of(&self, vars: &[Var], name: &str) -> Var {
        vars[self.params.get_index_of(name).expect("declared parameter")]
    }

    fn run(
        &self,
        layers: &[Layer],
        g: &mut Graph<S>,
        vars: &[Var],
        mut x: Var,
        mode: Mode,
        stats: &mut Vec<(String, NormStats<S>)>,
    ) -> Result<Var> {
        let slope = S::from_f64_lossy(LEAKY_SLOPE);
        for layer in layers {
            x = match layer {
                Layer::Conv { name, stride, pad, bias, .. } => {
                    let w = self.var_of(vars, &format!("{name}.weight"));
                    let b = bias.then(|| self.var_of(vars, &format!("{name}.bias")));
                    g.conv2d(x, w, b, *stride, *pad)?
                }
                Layer::ConvTranspose { name, stride, pad, bias, .. } => {
                    let w = self.var_of(vars, &format!("{name}.weight"));
                    let b = bias.then(|| self.var_of(vars, &format!("{name}.bias")));
                    g.conv_transpose2d(x, w, b, *stride, *pad)?
                }
                Layer::Dense { name, bias, .. } => {
                    let w = self.var_of(vars, &format!("{name}.weight"));
                    let b = bias.then(|| self.var_of(vars, &format!("{name}.bias")));
                    g.linear(x, w, b)?
                }
                Layer::BatchNorm { name, .. } => {
                    let normed = match mode {
                        Mode::Train => {
                            let (v, st) = g.batch_norm(x);
                            stats.push((name.clone(), st));
                            v
                        }
                        Mode::Eval => {
                            let mean = &self.buffers[&format!("{name}.running_mean")];
                            let var = &self.buffers[&format!("{name}.running_var")];
                            g.normalize_with(x, mean.data(), var.data())?
                        }
                    };
                    let gamma = self.var_of(vars, &format!("{name}.gamma"));
                    let beta = self.var_of(vars, &format!("{name}.beta"));
                    g.channel_affine(normed, gamma, beta)?
                }
                Layer::InstanceNorm => g.instance_norm(x),
                Layer::Relu => g.relu(x),
                Layer::LeakyRelu => g.leaky_relu(x, slope),
                Layer::Tanh => g.tanh(x),
                Layer::Flatten => {
                    let shape = g.value(x).shape();
                    let flat = [shape[0], shape[1..].iter().product()];
                    g.reshape(x, &flat)?
                }
                Layer::Unflatten { c, h, w } => {
                    let n = g.value(x).batch();
                    g.reshape(x, &[n, *c, *h, *w])?
                }
                Layer::Residual { body } => {
                    let y = self.run(body, g, vars, x, mode, stats)?;
                    g.add(x, y)?
                }
                Layer::SpatialMean => g.spatial_mean(x)?,
            };
        }
        Ok(x)
    }

    /// Gradients of every parameter, in parameter order; zero where the
    /// loss does not depend on a parameter.
    pub fn gradients(&self, g: &Graph<S>, grads: &Gradients<S>) -> Result<Vec<Tensor<S>>> {
        let vars = self.attached_vars(g)?;
        Ok(vars
            .iter()
            .zip(self.params.values())
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
            .collect())
    }

    /// Applies one optimizer step with the given gradients.
    pub fn apply(&mut self, opt: &mut Adam<S>, grads: &[Tensor<S>], lr: f64) {
        let mut refs: Vec<&mut Tensor<S>> = self.params.values_mut().collect();
        opt.step(&mut refs, grads, lr);
    }
}
