//! Versioned binary checkpoint container.
//!
//! ```text
//! magic "CFSYNCKP" | version u32 | meta_len u64 | meta (JSON)
//! count u32 | count x { name_len u16, name, group_len u16, group,
//!                       dtype u8, ndim u8, dims u64 x ndim, data LE }
//! ```
//!
//! Codec weights live in the same container next to the model weights;
//! their names already carry the `codec.` prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{ParamGroup, ParamStore};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CFSYNCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Codec,
    Model,
}

/// Metadata header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub version: u32,
    pub codec: CodecConfig,
    pub codec_frozen: bool,
    pub latent_std: f64,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    /// Hash of `model` when present, otherwise of `codec`.
    pub config_hash: String,
    /// Training phase that produced the weights (0 for untrained or base).
    #[serde(default)]
    pub phase: u8,
    #[serde(default)]
    pub step: usize,
    #[serde(default)]
    pub seed: u64,
}

struct Array<'a, T> {
    name: &'a str,
    group: ParamGroup,
    value: &'a Tensor<T>,
}

fn codec_hash(cfg: &CodecConfig) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(cfg).expect("config serializes");
    crate::nn::checksum_hex(&Sha256::digest(&json))
}

fn write_container<T: Scalar>(path: &Path, meta: &CheckpointMeta, arrays: &[Array<'_, T>]) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let meta_json = serde_json::to_vec(meta).map_err(|e| Error::format("checkpoint metadata", e.to_string()))?;
    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(meta_json.len() as u64).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.write_u32::<LittleEndian>(arrays.len() as u32).map_err(io)?;
    for a in arrays {
        for s in [a.name, a.group.name()] {
            w.write_u16::<LittleEndian>(s.len() as u16).map_err(io)?;
            w.write_all(s.as_bytes()).map_err(io)?;
        }
        w.write_u8(T::DTYPE.tag()).map_err(io)?;
        let shape = a.value.shape();
        w.write_u8(shape.len() as u8).map_err(io)?;
        for &d in shape {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in a.value.data() {
            match T::DTYPE {
                DType::F32 => w.write_f32::<LittleEndian>(v.to_f32().unwrap_or(f32::NAN)),
                DType::F64 => w.write_f64::<LittleEndian>(v.f64()),
            }
            .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct LoadedArray<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
}

fn read_container<T: Scalar>(path: &Path) -> Result<(CheckpointMeta, Vec<LoadedArray<T>>)> {
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingCheckpoint(path.display().to_string())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::format("checkpoint", format!("{}: {reason}", path.display()));
    let short = |e: std::io::Error| bad(format!("truncated ({e})"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(short)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>().map_err(short)? as usize;
    if meta_len > 1 << 24 {
        return Err(bad("metadata too large".into()));
    }
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf).map_err(short)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_buf).map_err(|e| bad(format!("metadata: {e}")))?;
    let count = r.read_u32::<LittleEndian>().map_err(short)?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut strs = [String::new(), String::new()];
        for s in &mut strs {
            let len = r.read_u16::<LittleEndian>().map_err(short)? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf).map_err(short)?;
            *s = String::from_utf8(buf).map_err(|_| bad("non-UTF-8 name".into()))?;
        }
        let [name, group] = strs;
        let group = ParamGroup::from_name(&group).ok_or_else(|| bad(format!("unknown group {group}")))?;
        let dtype = DType::from_tag(r.read_u8().map_err(short)?).ok_or_else(|| bad("unknown dtype".into()))?;
        let ndim = r.read_u8().map_err(short)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<LittleEndian>().map_err(short)? as usize);
        }
        let n: usize = shape.iter().product();
        if n > 1 << 28 {
            return Err(bad(format!("array {name} too large")));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match dtype {
                DType::F32 => r.read_f32::<LittleEndian>().map_err(short)? as f64,
                DType::F64 => r.read_f64::<LittleEndian>().map_err(short)?,
            };
            data.push(T::c(v));
        }
        arrays.push(LoadedArray {
            name,
            group,
            value: Tensor::new(&shape, data)?,
        });
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes".into()));
    }
    Ok((meta, arrays))
}

fn arrays_of<T: Scalar>(store: &ParamStore<T>) -> impl Iterator<Item = Array<'_, T>> {
    store.entries().map(|(name, group, value)| Array { name, group, value })
}

/// Fills `store` from loaded arrays; every parameter must be present
/// exactly once with a matching shape and group.
fn fill_store<T: Scalar>(store: &mut ParamStore<T>, arrays: Vec<LoadedArray<T>>, path: &Path) -> Result<()> {
    let mut seen = vec![false; store.len()];
    for a in arrays {
        let id = store
            .find(&a.name)
            .ok_or_else(|| Error::format("checkpoint", format!("{}: unexpected array {}", path.display(), a.name)))?;
        if store.group(id) != a.group {
            return Err(Error::format("checkpoint", format!("{}: group mismatch for {}", path.display(), a.name)));
        }
        store.set(id, a.value)?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = store.ids().nth(i).map(|id| store.name(id).to_string()).unwrap_or_default();
        return Err(Error::format("checkpoint", format!("{}: missing array {name}", path.display())));
    }
    Ok(())
}

pub fn save_codec<T: Scalar>(path: &Path, codec: &Codec<T>) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Codec,
        version: VERSION,
        codec: codec.config.clone(),
        codec_frozen: codec.frozen,
        latent_std: codec.latent_std,
        model: None,
        config_hash: codec_hash(&codec.config),
        phase: 0,
        step: 0,
        seed: 0,
    };
    let arrays: Vec<_> = arrays_of(&codec.store).collect();
    write_container(path, &meta, &arrays)
}

/// Loads a codec from either a codec or a model checkpoint.
pub fn load_codec<T: Scalar>(path: &Path) -> Result<Codec<T>> {
    let (meta, arrays) = read_container::<T>(path)?;
    let mut codec = Codec::new(meta.codec.clone(), 0)?;
    let arrays = arrays.into_iter().filter(|a| codec.store.find(&a.name).is_some()).collect();
    fill_store(&mut codec.store, arrays, path)?;
    codec.latent_std = meta.latent_std;
    codec.frozen = meta.codec_frozen;
    Ok(codec)
}

/// Provenance fields stamped into a model checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainingStamp {
    pub step: usize,
    pub seed: u64,
}

pub fn save_model<T: Scalar>(path: &Path, model: &Model<T>, stamp: TrainingStamp) -> Result<()> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Model,
        version: VERSION,
        codec: model.codec.config.clone(),
        codec_frozen: model.codec.frozen,
        latent_std: model.codec.latent_std,
        model: Some(model.config.clone()),
        config_hash: model.config.hash(),
        phase: model.trained_phase,
        step: stamp.step,
        seed: stamp.seed,
    };
    let arrays: Vec<_> = arrays_of(&model.codec.store).chain(arrays_of(&model.store)).collect();
    write_container(path, &meta, &arrays)
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    // Reading as f32 keeps this cheap; values are discarded.
    read_container::<f32>(path).map(|(m, _)| m)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let (meta, arrays) = read_container::<T>(path)?;
    let config = match (&meta.kind, &meta.model) {
        (CheckpointKind::Model, Some(c)) => c.clone(),
        _ => return Err(Error::format("checkpoint", format!("{} holds no model weights", path.display()))),
    };
    if config.hash() != meta.config_hash {
        return Err(Error::format("checkpoint", format!("{}: config hash mismatch", path.display())));
    }
    let mut model = Model::new(config, 0)?;
    let (codec_arrays, model_arrays): (Vec<_>, Vec<_>) =
        arrays.into_iter().partition(|a| model.codec.store.find(&a.name).is_some());
    fill_store(&mut model.codec.store, codec_arrays, path)?;
    fill_store(&mut model.store, model_arrays, path)?;
    model.codec.latent_std = meta.latent_std;
    model.codec.frozen = meta.codec_frozen;
    model.trained_phase = meta.phase;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut m = Model::<f32>::new(ModelConfig::default(), 9).unwrap();
        m.codec.latent_std = 1.7;
        m.codec.frozen = true;
        m.trained_phase = 1;
        save_model(&p, &m, TrainingStamp { step: 3, seed: 4 }).unwrap();
        let (back, meta) = load_model::<f32>(&p).unwrap();
        assert_eq!(back.store.checksum(), m.store.checksum());
        assert_eq!(back.codec.checksum(), m.codec.checksum());
        assert_eq!(back.codec.latent_std, 1.7);
        assert!(back.codec.frozen);
        assert_eq!(back.trained_phase, 1);
        assert_eq!((meta.phase, meta.step, meta.seed), (1, 3, 4));
        assert_eq!(meta.config_hash, m.config.hash());
        let codec = load_codec::<f32>(&p).unwrap();
        assert_eq!(codec.checksum(), m.codec.checksum());
    }

    #[test]
    fn rejects_missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.ckpt");
        assert!(matches!(load_codec::<f32>(&p), Err(Error::MissingCheckpoint(_))));
        std::fs::write(&p, b"CFSYNCKP\x01\x00").unwrap();
        assert!(matches!(load_codec::<f32>(&p), Err(Error::Format { .. })));
        std::fs::write(&p, b"garbage!").unwrap();
        assert!(load_codec::<f32>(&p).is_err());
    }

    #[test]
    fn codec_checkpoint_is_not_a_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = Codec::<f64>::new(CodecConfig::default(), 1).unwrap();
        save_codec(&p, &c).unwrap();
        assert!(load_model::<f64>(&p).is_err());
        let back = load_codec::<f64>(&p).unwrap();
        assert_eq!(back.checksum(), c.checksum());
    }
}
