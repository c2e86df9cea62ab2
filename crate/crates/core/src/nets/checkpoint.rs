//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest              TOML: architecture, tensor list, step, seed, codec
//! <dir>/<tensor name>.bin     u32 LE rank, u32 LE dims, f32 LE row-major values
//! ```

use std::fs;
use std::path::Path;

use grdh_autograd::Tensor;
use serde::{Deserialize, Serialize};

use super::{ArchSpec, NetMeta, Network};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch_id: String,
    pub image_size: usize,
    pub latent_dim: Option<usize>,
    /// Whether inference uses running normalization statistics rather than
    /// per-batch ones.
    pub running_stats: bool,
    pub arch: ArchSpec,
    pub meta: NetMeta,
    pub tensors: Vec<TensorEntry>,
}

fn blob_bytes(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 * (1 + t.rank() + t.numel()));
    out.extend((t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

fn parse_blob(name: &str, bytes: &[u8]) -> Result<Tensor<f32>> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        param: name.to_string(),
        reason,
    };
    let word = |i: usize| -> Option<[u8; 4]> { bytes.get(4 * i..4 * i + 4).map(|s| s.try_into().unwrap()) };
    let rank = word(0).map(u32::from_le_bytes).ok_or_else(|| corrupt("missing header".into()))? as usize;
    let shape = (1..=rank)
        .map(|i| word(i).map(|w| u32::from_le_bytes(w) as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| corrupt("truncated header".into()))?;
    let numel: usize = shape.iter().product();
    let body = &bytes[4 * (1 + rank)..];
    if body.len() != 4 * numel {
        return Err(corrupt(format!("expected {} value bytes, found {}", 4 * numel, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
}

fn manifest_of(net: &Network<f32>) -> Manifest {
    let entry = |name: &String, t: &Tensor<f32>, kind| TensorEntry {
        name: name.clone(),
        kind,
        shape: t.shape().to_vec(),
        file: format!("{name}.bin"),
    };
    let tensors = net
        .params()
        .iter()
        .map(|(n, t)| entry(n, t, TensorKind::Param))
        .chain(net.buffers().iter().map(|(n, t)| entry(n, t, TensorKind::Buffer)))
        .collect();
    Manifest {
        arch_id: net.arch_id(),
        image_size: net.spec().image_size(),
        latent_dim: net.spec().latent_dim(),
        running_stats: net.uses_running_stats(),
        arch: net.spec().clone(),
        meta: net.meta.clone(),
        tensors,
    }
}

/// Writes `net` to `dir`, creating it if needed and overwriting earlier
/// contents of the same names.
pub fn save_checkpoint(net: &Network<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_of(net);
    let text = toml::to_string(&manifest).map_err(|e| Error::Validation(e.to_string()))?;
    for entry in &manifest.tensors {
        let t = match entry.kind {
            TensorKind::Param => &net.params()[&entry.name],
            TensorKind::Buffer => &net.buffers()[&entry.name],
        };
        let path = dir.join(&entry.file);
        fs::write(&path, blob_bytes(t)).map_err(|e| Error::io(path, e))?;
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint, checking the manifest against the architecture it
/// declares and every blob against the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Network<f32>> {
    let manifest = read_manifest(dir)?;
    let mut net = Network::<f32>::zeroed(manifest.arch.clone())?;
    let expect = manifest_of(&net);
    let mismatch = |what: &str| Error::Validation(format!("{}: manifest {what} disagrees with its architecture", dir.display()));
    if manifest.arch_id != expect.arch_id {
        return Err(mismatch("arch_id"));
    }
    if manifest.image_size != expect.image_size {
        return Err(mismatch("image_size"));
    }
    if manifest.latent_dim != expect.latent_dim {
        return Err(mismatch("latent_dim"));
    }
    if manifest.running_stats != expect.running_stats {
        return Err(mismatch("running_stats"));
    }
    if manifest.tensors.len() != expect.tensors.len() {
        return Err(mismatch("tensor list"));
    }
    for want in &expect.tensors {
        let got = manifest
            .tensors
            .iter()
            .find(|t| t.name == want.name)
            .ok_or_else(|| Error::Validation(format!("{}: manifest lacks tensor `{}`", dir.display(), want.name)))?;
        if got.shape != want.shape || got.kind != want.kind {
            return Err(Error::Validation(format!(
                "{}: tensor `{}` declared {:?}, architecture needs {:?}",
                dir.display(),
                want.name,
                got.shape,
                want.shape
            )));
        }
        let path = dir.join(&got.file);
        let bytes = fs::read(&path).map_err(|e| Error::CorruptCheckpoint {
            param: want.name.clone(),
            reason: format!("{}: {e}", path.display()),
        })?;
        let t = parse_blob(&want.name, &bytes)?;
        if t.shape() != want.shape.as_slice() {
            return Err(Error::CorruptCheckpoint {
                param: want.name.clone(),
                reason: format!("blob shape {:?} differs from manifest {:?}", t.shape(), want.shape),
            });
        }
        match want.kind {
            TensorKind::Param => net.params_mut()[&want.name] = t,
            TensorKind::Buffer => net.buffers_mut()[&want.name] = t,
        }
    }
    net.meta = manifest.meta;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::build_discriminator;
    use crate::nets::DiscriminatorHead;

    #[test]
    fn blob_round_trip() {
        let t = Tensor::new([2, 3], vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap();
        let bytes = blob_bytes(&t);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        assert_eq!(parse_blob("w", &bytes).unwrap(), t);
        match parse_blob("w", &bytes[..bytes.len() - 1]) {
            Err(Error::CorruptCheckpoint { param, .. }) => assert_eq!(param, "w"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_directory_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn manifest_is_readable_text() {
        let dir = tempfile::tempdir().unwrap();
        let d = build_discriminator(16, 2, DiscriminatorHead::Dense, 1).unwrap();
        save_checkpoint(&d, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("arch_id = \"dense-discriminator/s16-c2\""));
        assert!(text.contains("running_stats = true"));
    }
}
