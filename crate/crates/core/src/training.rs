//! Losses and the three training phases.
//!
//! 1. [`train_cyclegan`]: translator `G1: X → Y` and restorer `F: Y → X`
//!    with patch discriminators `D1` (on X) and `D2` (on Y).
//! 2. [`train_generator`]: cover generator `G2` against dense discriminator
//!    `D3` on domain X.
//! 3. [`train_extractor`]: extractor `E` regressing the noise behind
//!    `G1(G2(z))`, with `G1` and `G2` frozen.
//!
//! The loss functions take an already-[attached](Network::attach) set of
//! networks and record on the caller's [`Graph`], so the same code serves
//! training (f32) and finite-difference checks (f64).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use grdh_autograd::{Adam, AdamConfig, Graph, Scalar, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, BitString, CodecParams};
use crate::data::{batches, DomainDataset};
use crate::nets::{self, ArchSpec, DiscriminatorHead, Mode, Network};
use crate::seed;
use crate::{Error, Result};

/// Probability clamp used by every adversarial loss.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Weight of the cycle-consistency term.
    pub lambda_cyc: f64,
    pub adam_beta1: f64,
    pub lr_decay_start: usize,
    /// Length of the linear decay to zero; 0 keeps the rate constant.
    pub lr_decay_steps: usize,
    pub seed: u64,
    /// Write checkpoints every this many steps; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Extractor phase: sample noise from codec-encodable values instead of
    /// the whole open cube.
    pub codec_noise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 16,
            steps: 1000,
            lambda_cyc: 10.0,
            adam_beta1: 0.5,
            lr_decay_start: 0,
            lr_decay_steps: 0,
            seed: 0,
            checkpoint_every: 0,
            codec_noise: false,
        }
    }
}

impl TrainConfig {
    /// Horse/zebra translation settings: batch 1, rate 2e-4.
    pub fn horse2zebra() -> Self {
        Self {
            batch_size: 1,
            ..Self::default()
        }
    }

    /// Man/woman translation settings: batch 1, rate 2e-3.
    pub fn man2woman() -> Self {
        Self {
            learning_rate: 2e-3,
            ..Self::horse2zebra()
        }
    }

    /// Extractor settings: mini-batch 100, rate 2e-4.
    pub fn extractor() -> Self {
        Self {
            batch_size: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate", "must be a positive number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.lambda_cyc.is_finite() && self.lambda_cyc >= 0.0) {
            return bad("lambda_cyc", "must be a nonnegative number");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate at a zero-based step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_steps == 0 || step < self.lr_decay_start {
            return self.learning_rate;
        }
        let done = (step - self.lr_decay_start) as f64 / self.lr_decay_steps as f64;
        self.learning_rate * (1.0 - done).max(0.0)
    }

    fn adam<S: Scalar>(&self) -> Adam<S> {
        Adam::new(AdamConfig {
            beta1: self.adam_beta1,
            ..AdamConfig::default()
        })
    }

    fn writes_checkpoint_at(&self, step: usize) -> bool {
        self.checkpoint_every > 0 && step % self.checkpoint_every == 0
    }
}

/// `-mean log sigmoid(logits)` with clamped probabilities.
pub fn real_loss<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var> {
    Ok(g.bce_with_logits(logits, 1.0, PROB_EPS)?)
}

/// `-mean log(1 - sigmoid(logits))` with clamped probabilities.
pub fn fake_loss<S: Scalar>(g: &mut Graph<S>, logits: Var) -> Result<Var> {
    Ok(g.bce_with_logits(logits, 0.0, PROB_EPS)?)
}

/// Discriminator objective from its logits on real and generated batches.
pub fn discriminator_loss<S: Scalar>(g: &mut Graph<S>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let r = real_loss(g, real_logits)?;
    let f = fake_loss(g, fake_logits)?;
    Ok(g.add(r, f)?)
}

#[derive(Clone, Copy, Debug)]
pub struct GanLosses {
    pub generator: Var,
    pub discriminator: Var,
}

/// Adversarial losses of a generator/discriminator pair on one batch.
/// Both networks must be attached to `g`.
pub fn gan_loss<S: Scalar>(
    g: &mut Graph<S>,
    disc: &mut Network<S>,
    gen: &mut Network<S>,
    real: Var,
    noise: Var,
    mode: Mode,
) -> Result<GanLosses> {
    let fake = gen.forward(g, noise, mode)?;
    let real_logits = disc.forward(g, real, mode)?;
    let fake_logits = disc.forward(g, fake, mode)?;
    let discriminator = discriminator_loss(g, real_logits, fake_logits)?;
    let generator = real_loss(g, fake_logits)?;
    Ok(GanLosses { generator, discriminator })
}

/// Mean absolute reconstruction error in both directions.
pub fn cycle_consistency<S: Scalar>(
    g: &mut Graph<S>,
    x_rec: Var,
    x: &Tensor<S>,
    y_rec: Var,
    y: &Tensor<S>,
) -> Result<Var> {
    let a = g.mean_abs_error(x_rec, x)?;
    let b = g.mean_abs_error(y_rec, y)?;
    Ok(g.add(a, b)?)
}

/// Generator-side terms of the cycle objective.
#[derive(Clone, Copy, Debug)]
pub struct CycleTerms {
    /// Adversarial term of `G1` against `D2`.
    pub adv_xy: Var,
    /// Adversarial term of `F` against `D1`.
    pub adv_yx: Var,
    pub cycle: Var,
    /// `adv_xy + adv_yx + lambda * cycle`.
    pub total: Var,
    pub fake_y: Var,
    pub fake_x: Var,
}

/// Records the translator objective. All four networks must be attached.
#[allow(clippy::too_many_arguments)]
pub fn cycle_objective<S: Scalar>(
    g: &mut Graph<S>,
    g1: &mut Network<S>,
    f: &mut Network<S>,
    d1: &mut Network<S>,
    d2: &mut Network<S>,
    x: Var,
    y: Var,
    lambda_cyc: f64,
) -> Result<CycleTerms> {
    if !(lambda_cyc >= 0.0) {
        return Err(Error::Parameter(format!("lambda_cyc {lambda_cyc} must be >= 0")));
    }
    let (xt, yt) = (g.value(x).clone(), g.value(y).clone());
    let fake_y = g1.forward(g, x, Mode::Train)?;
    let fake_x = f.forward(g, y, Mode::Train)?;
    let x_rec = f.forward(g, fake_y, Mode::Train)?;
    let y_rec = g1.forward(g, fake_x, Mode::Train)?;
    let ly = d2.forward(g, fake_y, Mode::Train)?;
    let lx = d1.forward(g, fake_x, Mode::Train)?;
    let adv_xy = real_loss(g, ly)?;
    let adv_yx = real_loss(g, lx)?;
    let cycle = cycle_consistency(g, x_rec, &xt, y_rec, &yt)?;
    let adv = g.add(adv_xy, adv_yx)?;
    let weighted = g.scale(cycle, S::from_f64_lossy(lambda_cyc));
    let total = g.add(adv, weighted)?;
    Ok(CycleTerms {
        adv_xy,
        adv_yx,
        cycle,
        total,
        fake_y,
        fake_x,
    })
}

/// Squared distance between predicted and true noise, summed over
/// components and averaged over the batch.
pub fn noise_regression_loss<S: Scalar>(g: &mut Graph<S>, predicted: Var, noise: &Tensor<S>) -> Result<Var> {
    Ok(g.sum_sq_error_mean(predicted, noise)?)
}

/// Extractor objective on a noise batch. `G1` and `G2` run as frozen
/// inference-mode functions, so only `E` (which must be attached) receives
/// gradients.
pub fn extractor_loss<S: Scalar>(
    g: &mut Graph<S>,
    e: &mut Network<S>,
    g1: &Network<S>,
    g2: &Network<S>,
    noise: &Tensor<S>,
    mode: Mode,
) -> Result<Var> {
    let marked = g1.infer(&g2.infer(noise)?)?;
    let x = g.input(marked);
    let pred = e.forward(g, x, mode)?;
    noise_regression_loss(g, pred, noise)
}

/// Per-step loss series plus run bookkeeping.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub series: IndexMap<String, Vec<f64>>,
    pub seed: u64,
    pub steps: usize,
    /// Not part of equality or of any written file.
    pub wall_clock: Duration,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.series == other.series && self.seed == other.seed && self.steps == other.steps
    }
}

impl TrainReport {
    fn new(seed: u64, names: &[&str]) -> Self {
        Self {
            series: names.iter().map(|n| (n.to_string(), Vec::new())).collect(),
            seed,
            ..Self::default()
        }
    }

    fn record(&mut self, values: &[f64]) {
        for (s, &v) in self.series.values_mut().zip(values) {
            s.push(v);
        }
        self.steps += 1;
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.series.get(name).map(Vec::as_slice)
    }

    /// Mean of a series over a step range, clipped to the recorded length.
    pub fn mean(&self, name: &str, range: std::ops::Range<usize>) -> Option<f64> {
        let s = self.get(name)?;
        let part = &s[range.start.min(s.len())..range.end.min(s.len())];
        (!part.is_empty()).then(|| part.iter().sum::<f64>() / part.len() as f64)
    }

    /// Tab-separated series: header row, then one line per step.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step");
        for name in self.series.keys() {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for i in 0..self.steps {
            out.push_str(&i.to_string());
            for s in self.series.values() {
                out.push('\t');
                out.push_str(&format!("{}", s[i]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Where a training phase writes its artifacts.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    fn save(&self, named: &[(&str, &Network)]) -> Result<()> {
        for (name, net) in named {
            nets::save_checkpoint(net, &self.0.join(name))?;
        }
        Ok(())
    }
}

fn save_all(out: Option<&OutputDir>, named: &[(&str, &Network)], report: &TrainReport) -> Result<()> {
    if let Some(out) = out {
        out.save(named)?;
        report.write_tsv(&out.0.join("losses.tsv"))?;
    }
    Ok(())
}

fn set_step(nets: &mut [&mut Network], step: usize) {
    for n in nets {
        n.meta.step = step as u64;
    }
}

/// Widths of the translation-phase networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorArch {
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Stride-2 stages in G1 and F. Zero keeps the trunk at full resolution.
    pub downsamplings: usize,
    pub disc_channels: usize,
}

impl Default for TranslatorArch {
    fn default() -> Self {
        Self {
            base_channels: 8,
            residual_blocks: 2,
            downsamplings: 0,
            disc_channels: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CycleGanOutput {
    pub g1: Network,
    pub f: Network,
    pub d1: Network,
    pub d2: Network,
    pub report: TrainReport,
}

fn check_domains(x: &DomainDataset, y: &DomainDataset) -> Result<usize> {
    let sx = x.image_shape().ok_or_else(|| Error::Config("domain X is empty".into()))?;
    let sy = y.image_shape().ok_or_else(|| Error::Config("domain Y is empty".into()))?;
    if sx != sy {
        return Err(Error::Shape(format!("domain X images are {sx:?}, domain Y images are {sy:?}")));
    }
    if sx[0] != sx[1] || sx[2] != 3 {
        return Err(Error::Shape(format!("expected square RGB images, got {sx:?}")));
    }
    Ok(sx[0])
}

/// Translation phase. Each step takes one generator-side step on the
/// cycle objective, then one discriminator step on the fakes it produced.
pub fn train_cyclegan(
    x: &DomainDataset,
    y: &DomainDataset,
    arch: &TranslatorArch,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<CycleGanOutput> {
    cfg.validate()?;
    let size = check_domains(x, y)?;
    let s = cfg.seed;
    let spec = ArchSpec::translator(size, arch.base_channels, arch.residual_blocks).with_downsamplings(arch.downsamplings);
    let mut g1 = Network::build(spec.clone(), seed::derive(s, 1))?;
    let mut f = Network::build(spec, seed::derive(s, 2))?;
    let patch = ArchSpec::discriminator(size, arch.disc_channels, DiscriminatorHead::Patch);
    let mut d1 = Network::build(patch.clone(), seed::derive(s, 3))?;
    let mut d2 = Network::build(patch, seed::derive(s, 4))?;
    let mut xs = batches(x, cfg.batch_size, seed::rng(seed::derive(s, 10)))?;
    let mut ys = batches(y, cfg.batch_size, seed::rng(seed::derive(s, 11)))?;
    let (mut opt_g1, mut opt_f, mut opt_d1, mut opt_d2) = (cfg.adam(), cfg.adam(), cfg.adam(), cfg.adam());
    let mut report = TrainReport::new(s, &["adv_xy", "adv_yx", "cycle", "total", "d1", "d2"]);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let bx = xs.next().expect("endless stream").images;
        let by = ys.next().expect("endless stream").images;

        let mut g = Graph::new();
        g1.attach(&mut g, true);
        f.attach(&mut g, true);
        d1.attach(&mut g, false);
        d2.attach(&mut g, false);
        let (xv, yv) = (g.input(bx.clone()), g.input(by.clone()));
        let t = cycle_objective(&mut g, &mut g1, &mut f, &mut d1, &mut d2, xv, yv, cfg.lambda_cyc)?;
        let grads = g.backward(t.total)?;
        let gg1 = g1.gradients(&g, &grads)?;
        let gf = f.gradients(&g, &grads)?;
        g1.apply(&mut opt_g1, &gg1, lr);
        f.apply(&mut opt_f, &gf, lr);
        let fake_y = g.value(t.fake_y).clone();
        let fake_x = g.value(t.fake_x).clone();
        let terms = [t.adv_xy, t.adv_yx, t.cycle, t.total].map(|v| g.scalar(v));

        let mut g = Graph::new();
        d1.attach(&mut g, true);
        d2.attach(&mut g, true);
        let (rx, fx, ry, fy) = (g.input(bx), g.input(fake_x), g.input(by), g.input(fake_y));
        let (lrx, lfx) = (d1.forward(&mut g, rx, Mode::Train)?, d1.forward(&mut g, fx, Mode::Train)?);
        let (lry, lfy) = (d2.forward(&mut g, ry, Mode::Train)?, d2.forward(&mut g, fy, Mode::Train)?);
        let l1 = discriminator_loss(&mut g, lrx, lfx)?;
        let l2 = discriminator_loss(&mut g, lry, lfy)?;
        let both = g.add(l1, l2)?;
        let grads = g.backward(both)?;
        let gd1 = d1.gradients(&g, &grads)?;
        let gd2 = d2.gradients(&g, &grads)?;
        d1.apply(&mut opt_d1, &gd1, lr);
        d2.apply(&mut opt_d2, &gd2, lr);

        report.record(&[terms[0], terms[1], terms[2], terms[3], g.scalar(l1), g.scalar(l2)]);
        set_step(&mut [&mut g1, &mut f, &mut d1, &mut d2], step + 1);
        if cfg.writes_checkpoint_at(step + 1) {
            save_all(out, &[("g1", &g1), ("f", &f), ("d1", &d1), ("d2", &d2)], &report)?;
        }
    }
    report.wall_clock = start.elapsed();
    save_all(out, &[("g1", &g1), ("f", &f), ("d1", &d1), ("d2", &d2)], &report)?;
    Ok(CycleGanOutput { g1, f, d1, d2, report })
}

/// Widths of the generation-phase networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorArch {
    pub base_channels: usize,
    pub disc_channels: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self {
            base_channels: 16,
            disc_channels: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub g2: Network,
    pub d3: Network,
    pub report: TrainReport,
}

/// Uniform noise on the open cube `(-1, 1)^L`.
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, batch: usize, latent_dim: usize) -> Tensor<f32> {
    Tensor::from_fn([batch, latent_dim], |_| loop {
        let v: f32 = rng.random_range(-1.0..1.0);
        if v != -1.0 {
            break v;
        }
    })
}

/// Noise made of codec encodings of random messages at full capacity.
pub fn codec_noise<R: Rng + ?Sized>(rng: &mut R, batch: usize, params: &CodecParams) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(batch * params.latent_dim());
    for _ in 0..batch {
        let bits = BitString::from_bits((0..params.capacity_bits()).map(|_| rng.random::<bool>()));
        data.extend(codec::encode(&bits, params, rng)?.to_f32());
    }
    Ok(Tensor::new([batch, params.latent_dim()], data)?)
}

/// Generation phase: alternating discriminator and generator steps on the
/// adversarial objective, non-saturating generator loss.
pub fn train_generator(
    x: &DomainDataset,
    latent_dim: usize,
    arch: &GeneratorArch,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<GeneratorOutput> {
    cfg.validate()?;
    let size = check_domains(x, x)?;
    let s = cfg.seed;
    let mut g2 = Network::build(ArchSpec::generator(latent_dim, size, arch.base_channels), seed::derive(s, 1))?;
    let mut d3 = Network::build(
        ArchSpec::discriminator(size, arch.disc_channels, DiscriminatorHead::Dense),
        seed::derive(s, 2),
    )?;
    let mut noise_rng = seed::rng(seed::derive(s, 3));
    let mut xs = batches(x, cfg.batch_size, seed::rng(seed::derive(s, 10)))?;
    let (mut opt_g, mut opt_d) = (cfg.adam(), cfg.adam());
    let mut report = TrainReport::new(s, &["d_loss", "g_loss"]);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let real = xs.next().expect("endless stream").images;
        let z = uniform_noise(&mut noise_rng, real.batch(), latent_dim);

        let mut g = Graph::new();
        g2.attach(&mut g, true);
        d3.attach(&mut g, true);
        let zv = g.input(z);
        let fake = g2.forward(&mut g, zv, Mode::Train)?;
        let fake_const = g.input(g.value(fake).clone());
        let rv = g.input(real);
        let lr_real = d3.forward(&mut g, rv, Mode::Train)?;
        let lr_fake = d3.forward(&mut g, fake_const, Mode::Train)?;
        let d_loss = discriminator_loss(&mut g, lr_real, lr_fake)?;
        let grads = g.backward(d_loss)?;
        let gd = d3.gradients(&g, &grads)?;
        d3.apply(&mut opt_d, &gd, lr);

        d3.attach(&mut g, false);
        let logits = d3.forward(&mut g, fake, Mode::Train)?;
        let g_loss = real_loss(&mut g, logits)?;
        let grads = g.backward(g_loss)?;
        let gg = g2.gradients(&g, &grads)?;
        g2.apply(&mut opt_g, &gg, lr);

        report.record(&[g.scalar(d_loss), g.scalar(g_loss)]);
        set_step(&mut [&mut g2, &mut d3], step + 1);
        if cfg.writes_checkpoint_at(step + 1) {
            save_all(out, &[("g2", &g2), ("d3", &d3)], &report)?;
        }
    }
    report.wall_clock = start.elapsed();
    save_all(out, &[("g2", &g2), ("d3", &d3)], &report)?;
    Ok(GeneratorOutput { g2, d3, report })
}

#[derive(Clone, Debug)]
pub struct ExtractorOutput {
    pub e: Network,
    pub report: TrainReport,
}

/// Checks that `G2` feeds `G1` and returns `(size, latent_dim)`.
pub fn check_chain(g1: &Network, g2: &Network) -> Result<(usize, usize)> {
    let (ArchSpec::Generator { latent_dim, size, .. }, ArchSpec::Translator { size: ts, .. }) = (g2.spec(), g1.spec())
    else {
        return Err(Error::Incompatible(format!(
            "expected a generator and a translator, got {} and {}",
            g2.arch_id(),
            g1.arch_id()
        )));
    };
    if size != ts {
        return Err(Error::Incompatible(format!("generator emits {size}x{size} images, translator takes {ts}x{ts}")));
    }
    Ok((*size, *latent_dim))
}

/// Extraction phase. `codec` is required when `cfg.codec_noise` is set.
pub fn train_extractor(
    g1: &Network,
    g2: &Network,
    base_channels: usize,
    codec: Option<&CodecParams>,
    cfg: &TrainConfig,
    out: Option<&OutputDir>,
) -> Result<ExtractorOutput> {
    cfg.validate()?;
    let (size, latent_dim) = check_chain(g1, g2)?;
    let codec = match (cfg.codec_noise, codec) {
        (false, _) => None,
        (true, Some(c)) if c.latent_dim() == latent_dim => Some(c),
        (true, Some(c)) => {
            return Err(Error::Incompatible(format!(
                "codec latent_dim {} differs from generator latent_dim {latent_dim}",
                c.latent_dim()
            )))
        }
        (true, None) => return Err(Error::Config("codec_noise: set but no codec parameters given".into())),
    };
    let s = cfg.seed;
    let mut e = Network::build(ArchSpec::extractor(size, latent_dim, base_channels), seed::derive(s, 1))?;
    e.meta.codec = codec.copied();
    let mut noise_rng = seed::rng(seed::derive(s, 2));
    let mut opt = cfg.adam();
    let mut report = TrainReport::new(s, &["loss"]);
    let start = Instant::now();
    for step in 0..cfg.steps {
        let z = match codec {
            Some(c) => codec_noise(&mut noise_rng, cfg.batch_size, c)?,
            None => uniform_noise(&mut noise_rng, cfg.batch_size, latent_dim),
        };
        let mut g = Graph::new();
        e.attach(&mut g, true);
        let loss = extractor_loss(&mut g, &mut e, g1, g2, &z, Mode::Train)?;
        let grads = g.backward(loss)?;
        let ge = e.gradients(&g, &grads)?;
        e.apply(&mut opt, &ge, cfg.lr_at(step));
        report.record(&[g.scalar(loss)]);
        e.meta.step = step as u64 + 1;
        if cfg.writes_checkpoint_at(step + 1) {
            save_all(out, &[("e", &e)], &report)?;
        }
    }
    report.wall_clock = start.elapsed();
    save_all(out, &[("e", &e)], &report)?;
    Ok(ExtractorOutput { e, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            lr_decay_start: 10,
            lr_decay_steps: 4,
            ..TrainConfig::default()
        };
        let got: Vec<f64> = [0, 9, 10, 11, 13, 14, 100].iter().map(|&s| cfg.lr_at(s)).collect();
        assert_eq!(got, vec![1.0, 1.0, 1.0, 0.75, 0.25, 0.0, 0.0]);
        assert_eq!(TrainConfig::default().lr_at(1_000_000), 2e-4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { lambda_cyc: -1.0, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        assert_eq!(TrainConfig::man2woman().learning_rate, 2e-3);
        assert_eq!(TrainConfig::horse2zebra().learning_rate, 2e-4);
        assert_eq!(TrainConfig::extractor().batch_size, 100);
    }

    #[test]
    fn constant_half_discriminator() {
        let mut g = Graph::<f64>::new();
        let zero = g.input(Tensor::zeros([4, 1]));
        let l = discriminator_loss(&mut g, zero, zero).unwrap();
        assert!((g.scalar(l) - (-2.0 * 0.5f64.ln())).abs() < 1e-12);
        assert!((g.scalar(l) - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_loss_near_zero() {
        let mut g = Graph::<f64>::new();
        let r = g.input(Tensor::full([2, 1], 40.0));
        let f = g.input(Tensor::full([2, 1], -40.0));
        let l = discriminator_loss(&mut g, r, f).unwrap();
        assert!(g.scalar(l) < 1e-6);
        assert!(g.scalar(l).is_finite());
    }

    #[test]
    fn extractor_worked_example() {
        let mut g = Graph::<f64>::new();
        let pred = g.input(Tensor::new([1, 2], vec![0.4, -0.4]).unwrap());
        let z = Tensor::new([1, 2], vec![0.5, -0.5]).unwrap();
        let l = noise_regression_loss(&mut g, pred, &z).unwrap();
        assert!((g.scalar(l) - 0.02).abs() < 1e-12);
        let exact = g.input(z.clone());
        let l = noise_regression_loss(&mut g, exact, &z).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn report_tsv_layout() {
        let mut r = TrainReport::new(3, &["a", "b"]);
        r.record(&[1.0, 2.0]);
        r.record(&[0.5, 0.25]);
        assert_eq!(r.to_tsv(), "step\ta\tb\n0\t1\t2\n1\t0.5\t0.25\n");
        assert_eq!(r.mean("a", 0..2), Some(0.75));
        assert_eq!(r.mean("a", 5..9), None);
    }

    #[test]
    fn uniform_noise_stays_open() {
        let mut rng = seed::rng(1);
        let z = uniform_noise(&mut rng, 50, 20);
        assert!(z.data().iter().all(|v| v.abs() < 1.0));
    }
}
