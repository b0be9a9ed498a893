//! Model checkpoint files.
//!
//! Layout: the common preamble (magic `NFBCKPT\0`, version, TOML header)
//! followed by every parameter and then every batch-norm buffer, in the
//! order of the header's `tensors` list, as little-endian values of the
//! header's `dtype`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Freeze, Model, ModelDims};
use super::real::Real;
use super::Module;
use crate::binio::{read_exact, read_preamble, write_atomic, write_preamble};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"NFBCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub buffer: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub init_seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub stage: String,
    pub dims: ModelDims,
    pub tensors: Vec<TensorEntry>,
}

/// Training progress recorded alongside the weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub init_seed: u64,
    pub step: u64,
    pub epoch: u64,
    pub stage: String,
}

fn entries<T: Real>(model: &mut Model<T>) -> Vec<TensorEntry> {
    let mut out = Vec::new();
    model.visit_params(&mut |p| {
        out.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            buffer: false,
        })
    });
    model.visit_buffers(&mut |p| {
        out.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            buffer: true,
        })
    });
    out
}

pub fn write_checkpoint<T: Real, W: Write>(w: &mut W, model: &mut Model<T>, meta: &CheckpointMeta) -> Result<()> {
    let header = CheckpointHeader {
        dtype: T::TAG.to_string(),
        init_seed: meta.init_seed,
        step: meta.step,
        epoch: meta.epoch,
        stage: meta.stage.clone(),
        dims: model.dims.clone(),
        tensors: entries(model),
    };
    write_preamble(w, MAGIC, VERSION, &toml::to_string(&header)?)?;
    let mut res = Ok(());
    let mut emit = |v: &[T]| {
        if res.is_ok() {
            res = w.write_all(&T::to_le_bytes_vec(v));
        }
    };
    model.visit_params(&mut |p| emit(&p.value));
    model.visit_buffers(&mut |p| emit(&p.value));
    res?;
    Ok(())
}

pub fn save<T: Real>(path: &Path, model: &mut Model<T>, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, |w| write_checkpoint(w, model, meta))
}

pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<(Model<T>, CheckpointHeader)> {
    let text = read_preamble(r, MAGIC, VERSION, "checkpoint")?;
    let header: CheckpointHeader = toml::from_str(&text)?;
    if header.dtype != T::TAG {
        return Err(Error::Format(format!(
            "checkpoint stores {} values, requested {}",
            header.dtype,
            T::TAG
        )));
    }
    let mut model = Model::<T>::new(&header.dims, &mut ChaCha8Rng::seed_from_u64(header.init_seed))?;
    if entries(&mut model) != header.tensors {
        return Err(Error::DimensionMismatch(
            "checkpoint tensor list does not match the model built from its dimensions".into(),
        ));
    }
    let width = std::mem::size_of::<T>();
    let mut res = Ok(());
    let mut fill = |v: &mut Vec<T>| {
        if res.is_err() {
            return;
        }
        let mut buf = vec![0u8; v.len() * width];
        match read_exact(r, &mut buf, "checkpoint") {
            Ok(()) => *v = T::from_le_bytes_slice(&buf),
            Err(e) => res = Err(e),
        }
    };
    model.visit_params(&mut |p| fill(&mut p.value));
    model.visit_buffers(&mut |p| fill(&mut p.value));
    res?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    model.freeze = Freeze::none();
    Ok((model, header))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, SystemConfig};
    use crate::nn::{Mode, ModelConfig};

    fn model() -> Model<f32> {
        let dims = ModelDims::new(&SystemConfig::preset(Preset::Desk), &ModelConfig::preset(Preset::Desk));
        Model::new(&dims, &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let mut m = model();
        // Move the running statistics away from their initial values.
        let n = 4 * 5;
        let x: Vec<f32> = (0..n * m.dims.frame_len()).map(|i| (i as f32 * 0.37).sin()).collect();
        m.forward(&x, 4, 5, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let meta = CheckpointMeta {
            init_seed: 7,
            step: 12,
            epoch: 3,
            stage: "pretrain".into(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &mut m, &meta).unwrap();
        let (mut back, header) = read_checkpoint::<f32, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(header.step, 12);
        assert_eq!(header.stage, "pretrain");
        let mut a = Vec::new();
        m.visit_params(&mut |p| a.push(p.value.clone()));
        m.visit_buffers(&mut |p| a.push(p.value.clone()));
        let mut b = Vec::new();
        back.visit_params(&mut |p| b.push(p.value.clone()));
        back.visit_buffers(&mut |p| b.push(p.value.clone()));
        assert_eq!(a, b);
        let mut again = Vec::new();
        write_checkpoint(&mut again, &mut back, &meta).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_and_wrong_dtype_rejected() {
        let mut m = model();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &mut m, &CheckpointMeta::default()).unwrap();
        assert!(matches!(
            read_checkpoint::<f32, _>(&mut &buf[..buf.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(read_checkpoint::<f64, _>(&mut buf.as_slice()).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint::<f32, _>(&mut bad.as_slice()),
            Err(Error::BadMagic { .. })
        ));
    }
}
