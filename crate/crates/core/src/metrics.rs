//! Bit accuracy, PSNR and the parameter sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::codec::{BitString, CodecParams};
use crate::data::ImageTensor;
use crate::nets::Network;
use crate::pipeline::{self, NoiseExtractor, OracleExtractor, RestorationKey};
use crate::seed;
use crate::{Error, Result};

/// Fraction of positions where two equal-length bit strings agree. Two
/// empty strings agree completely.
pub fn bit_accuracy(sent: &BitString, received: &BitString) -> Result<f64> {
    if sent.len() != received.len() {
        return Err(Error::Shape(format!(
            "bit strings differ in length: {} vs {}",
            sent.len(),
            received.len()
        )));
    }
    if sent.is_empty() {
        return Ok(1.0);
    }
    let same = sent.bits().iter().zip(received.bits()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / sent.len() as f64)
}

/// Peak signal-to-noise ratio in dB over the byte representation
/// (peak 255). Identical images give `f64::INFINITY`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("images differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ba, bb) = (a.to_bytes(), b.to_bytes());
    let sse: f64 = ba.iter().zip(&bb).map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / ba.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// PSNR as written in tables: `inf` for identical images.
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// The trained networks an evaluation runs on.
#[derive(Clone, Copy, Debug)]
pub struct Models<'a> {
    pub g1: &'a Network,
    pub g2: &'a Network,
    /// May be absent when evaluating with the oracle extractor.
    pub extractor: Option<&'a Network>,
    pub restorer: &'a Network,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorChoice {
    Trained,
    /// Replace the extractor with the true noise of each trial.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub n_messages: usize,
    pub seed: u64,
    /// Skip the 8-bit quantization of the marked image.
    pub float_path: bool,
    pub extractor: ExtractorChoice,
}

impl EvalOptions {
    pub fn new(n_messages: usize, seed: u64) -> Self {
        Self {
            n_messages,
            seed,
            float_path: false,
            extractor: ExtractorChoice::Trained,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialRecord {
    pub index: usize,
    pub seed: u64,
    pub accuracy: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_trials: usize,
    pub accuracy_mean: f64,
    /// Mean over trials with finite PSNR; NaN when every trial matched
    /// exactly.
    pub psnr_mean_db: f64,
    pub exact_matches: usize,
    pub trials: Vec<TrialRecord>,
    pub codec: CodecParams,
    pub seed: u64,
    pub float_path: bool,
    pub oracle: bool,
    pub model_ids: Vec<String>,
}

impl EvalReport {
    /// Per-trial table: header row, one line per trial.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("trial\tseed\taccuracy\tpsnr_db\n");
        for t in &self.trials {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{}", t.index, t.seed, t.accuracy, format_db(t.psnr_db));
        }
        out
    }

    /// `key = value` summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_trials = {}", self.n_trials);
        let _ = writeln!(out, "accuracy_mean = {:.6}", self.accuracy_mean);
        let _ = writeln!(out, "psnr_mean_db = {}", format_db(self.psnr_mean_db));
        let _ = writeln!(out, "exact_matches = {}", self.exact_matches);
        let _ = writeln!(out, "k = {}", self.codec.k());
        let _ = writeln!(out, "delta = {}", self.codec.delta());
        let _ = writeln!(out, "latent_dim = {}", self.codec.latent_dim());
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "float_path = {}", self.float_path);
        let _ = writeln!(out, "oracle_extractor = {}", self.oracle);
        let _ = writeln!(out, "models = \"{}\"", self.model_ids.join(","));
        out
    }

    pub fn one_line(&self) -> String {
        format!(
            "n={} k={} delta={} accuracy={:.4} psnr={} dB exact={}",
            self.n_trials,
            self.codec.k(),
            self.codec.delta(),
            self.accuracy_mean,
            format_db(self.psnr_mean_db),
            self.exact_matches
        )
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [("trials.tsv", self.to_tsv()), ("summary.toml", self.summary())] {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Runs `n_messages` full-capacity random messages through hide → reveal
/// and hide → restore. Trial `i` uses seed `derive(seed, i)` for both its
/// message and its encoding draw.
pub fn evaluate_pipeline(models: &Models<'_>, codec: &CodecParams, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.n_messages == 0 {
        return Err(Error::Config("n_messages must be at least 1".into()));
    }
    let key = RestorationKey::new(models.restorer.clone())?;
    let trained = match (opts.extractor, models.extractor) {
        (ExtractorChoice::Oracle, _) => None,
        (ExtractorChoice::Trained, Some(e)) => {
            pipeline::ExtractionKey::new(e.clone(), *codec).map_err(|e| Error::Incompatible(e.to_string()))?;
            Some(e)
        }
        (ExtractorChoice::Trained, None) => {
            return Err(Error::Incompatible("no extractor given for a trained-extractor evaluation".into()))
        }
    };
    let mut trials = Vec::with_capacity(opts.n_messages);
    for index in 0..opts.n_messages {
        let trial_seed = seed::derive(opts.seed, index as u64);
        let mut rng = seed::rng(trial_seed);
        let message = BitString::from_bits((0..codec.capacity_bits()).map(|_| rng.random::<bool>()));
        let hidden = pipeline::hide(&message, models.g1, models.g2, codec, &mut rng)?;
        let received = if opts.float_path {
            hidden.marked.clone()
        } else {
            hidden.marked.quantized()
        };
        let oracle;
        let extractor: &dyn NoiseExtractor = match trained {
            Some(e) => e,
            None => {
                oracle = OracleExtractor { noise: hidden.noise.clone() };
                &oracle
            }
        };
        let bits = pipeline::reveal_with(&received, extractor, codec, message.len())?;
        let restored = pipeline::restore_cover(&received, &key)?;
        trials.push(TrialRecord {
            index,
            seed: trial_seed,
            accuracy: bit_accuracy(&message, &bits)?,
            psnr_db: psnr(&restored, &hidden.cover)?,
        });
    }
    let n = trials.len();
    let accuracy_mean = trials.iter().map(|t| t.accuracy).sum::<f64>() / n as f64;
    let finite: Vec<f64> = trials.iter().map(|t| t.psnr_db).filter(|v| v.is_finite()).collect();
    let psnr_mean_db = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mut model_ids = vec![models.g1.arch_id(), models.g2.arch_id(), models.restorer.arch_id()];
    if let Some(e) = trained {
        model_ids.push(e.arch_id());
    }
    Ok(EvalReport {
        n_trials: n,
        accuracy_mean,
        psnr_mean_db,
        exact_matches: n - finite.len(),
        trials,
        codec: *codec,
        seed: opts.seed,
        float_path: opts.float_path,
        oracle: opts.extractor == ExtractorChoice::Oracle,
        model_ids,
    })
}

/// Default group sizes swept.
pub const DEFAULT_K_GRID: [u32; 5] = [1, 2, 3, 4, 5];

/// Default gaps swept: 0.01 to 0.1 in steps of 0.01.
pub fn default_delta_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub report: EvalReport,
}

/// One evaluation per swept parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub parameter: &'static str,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.report.accuracy_mean).collect()
    }

    /// Largest minus smallest accuracy.
    pub fn spread(&self) -> f64 {
        let acc = self.accuracies();
        let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = acc.iter().copied().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!("{}\taccuracy_mean\tpsnr_mean_db\texact_matches\tn\n", self.parameter);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{}\t{}\t{}",
                r.value,
                r.report.accuracy_mean,
                format_db(r.report.psnr_mean_db),
                r.report.exact_matches,
                r.report.n_trials
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Accuracy per group size `k` at the gap of `base`.
pub fn sweep_k(models: &Models<'_>, base: &CodecParams, k_values: &[u32], opts: &EvalOptions) -> Result<SweepTable> {
    if k_values.is_empty() {
        return Err(Error::Config("k sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &k in k_values {
        if k > 5 {
            log::warn!("k = {k} is beyond the usual 1..=5 range");
        }
        let codec = base.with_k(k)?;
        rows.push(SweepRow {
            value: f64::from(k),
            report: evaluate_pipeline(models, &codec, opts)?,
        });
    }
    Ok(SweepTable { parameter: "k", rows })
}

/// Accuracy per gap `delta` at the group size of `base`.
pub fn sweep_delta(models: &Models<'_>, base: &CodecParams, deltas: &[f64], opts: &EvalOptions) -> Result<SweepTable> {
    if deltas.is_empty() {
        return Err(Error::Config("delta sweep needs at least one value".into()));
    }
    let codecs = deltas.iter().map(|&d| base.with_delta(d)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (codec, &d) in codecs.iter().zip(deltas) {
        rows.push(SweepRow {
            value: d,
            report: evaluate_pipeline(models, codec, opts)?,
        });
    }
    Ok(SweepTable { parameter: "delta", rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let a: BitString = "110101100".parse().unwrap();
        let b: BitString = "110101101".parse().unwrap();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&a, &a.complement()).unwrap(), 0.0);
        assert!((bit_accuracy(&a, &b).unwrap() - 8.0 / 9.0).abs() < 1e-15);
        assert!(bit_accuracy(&a, &b.truncated(3)).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::from_bytes(2, 2, 3, &[100; 12]).unwrap();
        let b = ImageTensor::from_bytes(2, 2, 3, &[101; 12]).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let want = 10.0 * (255.0f64.powi(2)).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!((want - 48.13).abs() < 0.01);
        assert_eq!(format_db(f64::INFINITY), "inf");
    }

    #[test]
    fn default_grids() {
        let d = default_delta_grid();
        assert_eq!(d.len(), 10);
        assert_eq!(d[0], 0.01);
        assert_eq!(d[9], 0.1);
    }
}
