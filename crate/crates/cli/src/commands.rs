use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use grdh::codec::{BitString, CodecParams, NoiseVector};
use grdh::data::{load_image_folder, synth_domains, Domain, DomainDataset, ImageTensor};
use grdh::metrics::{self, EvalOptions, ExtractorChoice, Models};
use grdh::nets::{load_checkpoint, Network};
use grdh::pipeline::{self, KeyMaterial, OracleExtractor};
use grdh::seed::{self, phase};
use grdh::training::{self, OutputDir, TrainConfig};
use grdh::Error;

use crate::config::RunConfig;
use crate::{Cli, CodecArgs, Command, EvalArgs, HideArgs, RevealArgs, TrainArgs};

const DEFAULT_OUT: &str = "runs";

/// Directory layout under the output root.
struct Layout {
    root: PathBuf,
}

impl Layout {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn translator(&self) -> PathBuf {
        self.root.join("translator")
    }
    fn generator(&self) -> PathBuf {
        self.root.join("generator")
    }
    fn extractor(&self) -> PathBuf {
        self.root.join("extractor")
    }
    fn keys(&self) -> PathBuf {
        self.root.join("keys")
    }
    fn hide(&self) -> PathBuf {
        self.root.join("hide")
    }
    fn reveal(&self) -> PathBuf {
        self.root.join("reveal")
    }
    fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

/// Sidecar holding the true noise of a marked image, for the oracle
/// extractor.
fn noise_sidecar(marked: &Path) -> PathBuf {
    marked.with_extension("noise.txt")
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let root = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let layout = Layout { root };
    match &cli.command {
        Command::TrainTranslator(a) | Command::TrainGenerator(a) | Command::TrainExtractor(a) => apply_steps(&mut cfg, &cli.command, a),
        Command::Hide(a) => apply_codec(&mut cfg, &a.codec),
        Command::Reveal(a) => apply_codec(&mut cfg, &a.codec),
        Command::Evaluate(a) | Command::SweepK(a) | Command::SweepDelta(a) => {
            apply_codec(&mut cfg, &a.codec);
            if let Some(n) = a.n {
                cfg.evaluate.n_messages = n;
            }
        }
        Command::SynthData => {}
    }
    cfg.validate()?;
    match &cli.command {
        Command::SynthData => synth_data(&cfg, &layout),
        Command::TrainTranslator(_) => train_translator(&cfg, &layout),
        Command::TrainGenerator(_) => train_generator(&cfg, &layout),
        Command::TrainExtractor(_) => train_extractor(&cfg, &layout),
        Command::Hide(a) => hide(&cfg, &layout, a),
        Command::Reveal(a) => reveal(&cfg, &layout, a),
        Command::Evaluate(a) => evaluate(&cfg, &layout, a),
        Command::SweepK(a) => sweep(&cfg, &layout, a, true),
        Command::SweepDelta(a) => sweep(&cfg, &layout, a, false),
    }
}

fn apply_steps(cfg: &mut RunConfig, cmd: &Command, a: &TrainArgs) {
    let Some(steps) = a.steps else { return };
    match cmd {
        Command::TrainTranslator(_) => cfg.translator.train.steps = steps,
        Command::TrainGenerator(_) => cfg.generator.train.steps = steps,
        _ => cfg.extractor.train.steps = steps,
    }
}

fn apply_codec(cfg: &mut RunConfig, a: &CodecArgs) {
    if let Some(k) = a.k {
        cfg.codec.k = k;
    }
    if let Some(d) = a.delta {
        cfg.codec.delta = d;
    }
}

fn domains(cfg: &RunConfig) -> Result<(DomainDataset, DomainDataset)> {
    match (&cfg.data.x_dir, &cfg.data.y_dir) {
        (Some(x), Some(y)) => {
            let (xs, rx) = load_image_folder(x, cfg.image_size, Domain::X)?;
            let (ys, ry) = load_image_folder(y, cfg.image_size, Domain::Y)?;
            log::info!("loaded {} + {} images, skipped {} + {}", rx.loaded, ry.loaded, rx.skipped.len(), ry.skipped.len());
            Ok((xs, ys))
        }
        _ => Ok(synth_domains(
            cfg.style()?,
            cfg.data.n,
            cfg.image_size,
            seed::for_phase(cfg.seed, phase::DATA),
        )?),
    }
}

fn synth_data(cfg: &RunConfig, l: &Layout) -> Result<String> {
    let (x, y) = synth_domains(cfg.style()?, cfg.data.n, cfg.image_size, seed::for_phase(cfg.seed, phase::DATA))?;
    x.save_folder(&l.data().join("x"))?;
    y.save_folder(&l.data().join("y"))?;
    Ok(format!(
        "synth-data: {} + {} images ({}x{}, {}) -> {}",
        x.len(),
        y.len(),
        cfg.image_size,
        cfg.image_size,
        cfg.data.style,
        l.data().display()
    ))
}

fn phase_config(base: &TrainConfig, master: u64, offset: u64) -> TrainConfig {
    TrainConfig {
        seed: seed::for_phase(master, offset),
        ..base.clone()
    }
}

fn last(report: &training::TrainReport, name: &str) -> String {
    match report.get(name).and_then(|s| s.last()) {
        Some(v) => format!("{v:.4}"),
        None => "-".into(),
    }
}

fn train_translator(cfg: &RunConfig, l: &Layout) -> Result<String> {
    let (x, y) = domains(cfg)?;
    let tc = phase_config(&cfg.translator.train, cfg.seed, phase::TRANSLATOR);
    let out = OutputDir(l.translator());
    let r = training::train_cyclegan(&x, &y, &cfg.translator_arch(), &tc, Some(&out))?;
    Ok(format!(
        "train-translator: {} steps, cycle {} total {} -> {}",
        r.report.steps,
        last(&r.report, "cycle"),
        last(&r.report, "total"),
        out.0.display()
    ))
}

fn train_generator(cfg: &RunConfig, l: &Layout) -> Result<String> {
    let (x, _) = domains(cfg)?;
    let tc = phase_config(&cfg.generator.train, cfg.seed, phase::GENERATOR);
    let out = OutputDir(l.generator());
    let r = training::train_generator(&x, cfg.latent_dim, &cfg.generator_arch(), &tc, Some(&out))?;
    Ok(format!(
        "train-generator: {} steps, d_loss {} g_loss {} -> {}",
        r.report.steps,
        last(&r.report, "d_loss"),
        last(&r.report, "g_loss"),
        out.0.display()
    ))
}

fn load(dir: PathBuf) -> Result<Network> {
    load_checkpoint(&dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn train_extractor(cfg: &RunConfig, l: &Layout) -> Result<String> {
    let g1 = load(l.translator().join("g1"))?;
    let f = load(l.translator().join("f"))?;
    let g2 = load(l.generator().join("g2"))?;
    let codec = cfg.codec()?;
    let tc = phase_config(&cfg.extractor.train, cfg.seed, phase::EXTRACTOR);
    let out = OutputDir(l.extractor());
    let r = training::train_extractor(&g1, &g2, cfg.extractor_channels(), Some(&codec), &tc, Some(&out))?;
    let key = KeyMaterial::new(r.e, f, codec)?;
    pipeline::export_key_material(&key, &l.keys())?;
    Ok(format!(
        "train-extractor: {} steps, loss {} -> {}; keys -> {}",
        r.report.steps,
        last(&r.report, "loss"),
        out.0.display(),
        l.keys().display()
    ))
}

fn message(a: &HideArgs) -> Result<BitString> {
    let bits = match (&a.message_hex, &a.message_file) {
        (Some(hex), _) => BitString::from_hex(hex).map_err(|e| Error::Config(format!("--message-hex: {e}")))?,
        (None, Some(p)) => BitString::from_bytes(&fs::read(p).map_err(|e| Error::Config(format!("--message-file {}: {e}", p.display())))?),
        (None, None) => return Err(Error::Config("one of --message-hex or --message-file is required".into()).into()),
    };
    match a.message_bits {
        Some(n) if n > bits.len() => {
            Err(Error::Config(format!("--message-bits {n} exceeds the {} bits supplied", bits.len())).into())
        }
        Some(n) => Ok(bits.truncated(n)),
        None => Ok(bits),
    }
}

fn hide(cfg: &RunConfig, l: &Layout, a: &HideArgs) -> Result<String> {
    let codec = cfg.codec()?;
    let msg = message(a)?;
    if msg.len() > codec.capacity_bits() {
        return Err(Error::Capacity {
            bits: msg.len(),
            capacity: codec.capacity_bits(),
        }
        .into());
    }
    let g1 = load(l.translator().join("g1"))?;
    let g2 = load(l.generator().join("g2"))?;
    let mut rng = seed::rng(seed::for_phase(cfg.seed, phase::HIDE));
    let r = pipeline::hide(&msg, &g1, &g2, &codec, &mut rng)?;
    let dir = l.hide();
    mkdir(&dir)?;
    let marked = dir.join("marked.png");
    r.marked.save_png(&marked)?;
    r.cover.save_png(&dir.join("cover.png"))?;
    let noise: Vec<String> = r.noise.values().iter().map(|v| format!("{v:e}")).collect();
    write(&noise_sidecar(&marked), &(noise.join("\n") + "\n"))?;
    write(&dir.join("message.txt"), &format!("{msg}\n"))?;
    Ok(format!(
        "hide: {} bits (capacity {}, k={}, delta={}) -> {}",
        msg.len(),
        codec.capacity_bits(),
        codec.k(),
        codec.delta(),
        marked.display()
    ))
}

fn read_noise(path: &Path) -> Result<NoiseVector> {
    let text = fs::read_to_string(path).with_context(|| format!("reading oracle noise {}", path.display()))?;
    let values = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(NoiseVector::new(values)?)
}

fn reveal(cfg: &RunConfig, l: &Layout, a: &RevealArgs) -> Result<String> {
    let marked_path = a.marked.clone().unwrap_or_else(|| l.hide().join("marked.png"));
    let keys = a.keys.clone().unwrap_or_else(|| l.keys());
    let marked = ImageTensor::load_png(&marked_path)?;
    let out = l.reveal();
    mkdir(&out)?;
    let mut lines = Vec::new();
    if !a.restore_only {
        let (bits, codec) = if a.oracle_extractor {
            let mut codec = match pipeline::read_codec(&keys.join(pipeline::CODEC_FILE)) {
                Ok(c) => c,
                Err(_) => cfg.codec()?,
            };
            codec = override_codec(codec, &a.codec)?;
            let oracle = OracleExtractor {
                noise: read_noise(&noise_sidecar(&marked_path))?,
            };
            let n = a.message_bits.unwrap_or(codec.capacity_bits());
            (pipeline::reveal_with(&marked, &oracle, &codec, n)?, codec)
        } else {
            let mut key = pipeline::import_extraction_key(&keys)?;
            key.codec = override_codec(key.codec, &a.codec)?;
            let n = a.message_bits.unwrap_or(key.codec.capacity_bits());
            (pipeline::reveal_message(&marked, &key, n)?, key.codec)
        };
        write(&out.join("message.txt"), &format!("{bits}\n"))?;
        lines.push(format!("reveal: {} bits (k={}): {bits}", bits.len(), codec.k()));
    }
    if !a.extract_only {
        let key = pipeline::import_restoration_key(&keys)?;
        let restored = pipeline::restore_cover(&marked, &key)?;
        let path = out.join("restored.png");
        restored.save_png(&path)?;
        lines.push(format!("restore: cover -> {}", path.display()));
    }
    Ok(lines.join("\n"))
}

fn override_codec(codec: CodecParams, a: &CodecArgs) -> Result<CodecParams> {
    let mut c = codec;
    if let Some(k) = a.k {
        c = c.with_k(k).map_err(|e| Error::Config(format!("--k: {e}")))?;
    }
    if let Some(d) = a.delta {
        c = c.with_delta(d).map_err(|e| Error::Config(format!("--delta: {e}")))?;
    }
    Ok(c)
}

struct Loaded {
    g1: Network,
    g2: Network,
    f: Network,
    e: Option<Network>,
}

fn load_models(l: &Layout, oracle: bool) -> Result<Loaded> {
    let g1 = load(l.translator().join("g1"))?;
    let g2 = load(l.generator().join("g2"))?;
    let f = load(l.translator().join("f"))?;
    let e = if oracle { None } else { Some(load(l.extractor().join("e"))?) };
    Ok(Loaded { g1, g2, f, e })
}

fn eval_options(cfg: &RunConfig, a: &EvalArgs) -> EvalOptions {
    EvalOptions {
        n_messages: cfg.evaluate.n_messages,
        seed: seed::for_phase(cfg.seed, phase::EVALUATE),
        float_path: a.float_path || cfg.evaluate.float_path,
        extractor: if a.oracle_extractor {
            ExtractorChoice::Oracle
        } else {
            ExtractorChoice::Trained
        },
    }
}

fn evaluate(cfg: &RunConfig, l: &Layout, a: &EvalArgs) -> Result<String> {
    let m = load_models(l, a.oracle_extractor)?;
    let models = Models {
        g1: &m.g1,
        g2: &m.g2,
        extractor: m.e.as_ref(),
        restorer: &m.f,
    };
    let report = metrics::evaluate_pipeline(&models, &cfg.codec()?, &eval_options(cfg, a))?;
    report.write(&l.eval())?;
    Ok(format!("evaluate: {} -> {}", report.one_line(), l.eval().display()))
}

fn sweep(cfg: &RunConfig, l: &Layout, a: &EvalArgs, over_k: bool) -> Result<String> {
    let m = load_models(l, a.oracle_extractor)?;
    let models = Models {
        g1: &m.g1,
        g2: &m.g2,
        extractor: m.e.as_ref(),
        restorer: &m.f,
    };
    let opts = eval_options(cfg, a);
    let codec = cfg.codec()?;
    let (table, name) = if over_k {
        (metrics::sweep_k(&models, &codec, &cfg.evaluate.k_values, &opts)?, "sweep_k.tsv")
    } else {
        (metrics::sweep_delta(&models, &codec, &cfg.evaluate.deltas, &opts)?, "sweep_delta.tsv")
    };
    mkdir(&l.eval())?;
    let path = l.eval().join(name);
    table.write(&path)?;
    let cells: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{}={:.4}", r.value, r.report.accuracy_mean))
        .collect();
    Ok(format!(
        "sweep-{}: {} (spread {:.4}) -> {}",
        if over_k { "k" } else { "delta" },
        cells.join(" "),
        table.spread(),
        path.display()
    ))
}
