//! Versioned binary model files.
//!
//! Layout (all little-endian):
//!   magic "SGNN" | version u32 | kind u32 | [blinder extras] |
//!   layer count u32 | per layer: in u32, out u32, activation u8 |
//!   per layer: matrix f64s then bias f64s.
//!
//! Kind 1 marks a similarity encoder (SECRET: the gateway must never expose
//! these files or their contents to clients). Kind 2 is a blinder net and
//! carries its extra header fields (noise dim, distance target, weight).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::net::{Activation, LayerSpec, LayerWeights, NetModel};
use crate::numerics::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGNN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModelKind {
    Plain,
    SecretEncoder,
    Blinder {
        noise_dim: u32,
        distance_target: f64,
        weight: f64,
    },
}

impl ModelKind {
    fn tag(&self) -> u32 {
        match self {
            ModelKind::Plain => 0,
            ModelKind::SecretEncoder => 1,
            ModelKind::Blinder { .. } => 2,
        }
    }
}

pub fn write_model<W: Write>(w: &mut W, model: &NetModel, kind: &ModelKind) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&kind.tag().to_le_bytes())?;
    if let ModelKind::Blinder {
        noise_dim,
        distance_target,
        weight,
    } = kind
    {
        w.write_all(&noise_dim.to_le_bytes())?;
        w.write_all(&distance_target.to_le_bytes())?;
        w.write_all(&weight.to_le_bytes())?;
    }
    w.write_all(&(model.layers().len() as u32).to_le_bytes())?;
    for spec in model.layers() {
        w.write_all(&(spec.input_dim as u32).to_le_bytes())?;
        w.write_all(&(spec.output_dim as u32).to_le_bytes())?;
        w.write_all(&[spec.activation.tag()])?;
    }
    for lw in model.weights() {
        for v in lw.matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in lw.bias.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<(NetModel, ModelKind)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = match read_u32(r)? {
        0 => ModelKind::Plain,
        1 => ModelKind::SecretEncoder,
        2 => {
            let noise_dim = read_u32(r)?;
            let distance_target = read_f64(r)?;
            let weight = read_f64(r)?;
            ModelKind::Blinder {
                noise_dim,
                distance_target,
                weight,
            }
        }
        t => return Err(Error::Format(format!("unknown model kind {t}"))),
    };
    let n_layers = read_u32(r)? as usize;
    if n_layers > 1024 {
        return Err(Error::Format("implausible layer count".into()));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let input_dim = read_u32(r)? as usize;
        let output_dim = read_u32(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        layers.push(LayerSpec {
            input_dim,
            output_dim,
            activation: Activation::from_tag(tag[0])?,
        });
    }
    let mut weights = Vec::with_capacity(n_layers);
    for spec in &layers {
        let m = read_f64_vec(r, spec.input_dim * spec.output_dim)?;
        let b = read_f64_vec(r, spec.output_dim)?;
        weights.push(LayerWeights {
            matrix: Tensor::new(m, vec![spec.input_dim, spec.output_dim])
                .map_err(|e| Error::Format(format!("corrupt weights: {e}")))?,
            bias: Tensor::new(b, vec![spec.output_dim])
                .map_err(|e| Error::Format(format!("corrupt weights: {e}")))?,
        });
    }
    let model = NetModel::new(layers, weights).map_err(|e| Error::Format(format!("inconsistent model: {e}")))?;
    Ok((model, kind))
}

pub fn save_model(path: &std::path::Path, model: &NetModel, kind: &ModelKind) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut f, model, kind)
}

pub fn load_model(path: &std::path::Path) -> Result<(NetModel, ModelKind)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut f)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_model() -> NetModel {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        NetModel::init(
            vec![
                LayerSpec { input_dim: 3, output_dim: 5, activation: Activation::Relu },
                LayerSpec { input_dim: 5, output_dim: 2, activation: Activation::SoftmaxLogits },
            ],
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_plain() {
        let model = sample_model();
        let mut buf = Vec::new();
        write_model(&mut buf, &model, &ModelKind::Plain).unwrap();
        assert_eq!(&buf[..4], MAGIC);
        let (back, kind) = read_model(&mut &buf[..]).unwrap();
        assert_eq!(back, model);
        assert_eq!(kind, ModelKind::Plain);
    }

    #[test]
    fn round_trip_blinder_header() {
        let model = sample_model();
        let kind = ModelKind::Blinder { noise_dim: 8, distance_target: 1.25, weight: 1.0 };
        let mut buf = Vec::new();
        write_model(&mut buf, &model, &kind).unwrap();
        let (_, back) = read_model(&mut &buf[..]).unwrap();
        assert_eq!(back, kind);
    }

    #[test]
    fn bad_magic_rejected() {
        let model = sample_model();
        let mut buf = Vec::new();
        write_model(&mut buf, &model, &ModelKind::Plain).unwrap();
        buf[0] = b'X';
        assert!(read_model(&mut &buf[..]).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let model = sample_model();
        let mut buf = Vec::new();
        write_model(&mut buf, &model, &ModelKind::Plain).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_model(&mut &buf[..]).is_err());
    }
}
