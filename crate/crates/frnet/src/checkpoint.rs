//! Binary named-tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FRN1" | version u32 | tensor count u32
//! per tensor:  name len u32 | name utf-8 | rank u32 | dims u32 each | f32 data
//! trailer:     config len u32 | config utf-8 (key = value lines)
//! ```
//!
//! Saving and loading round-trip every tensor bit-exactly; unknown
//! versions are rejected.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::refine::{CieLayer, FrnetParams, IeuParams, Variant};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"FRN1";
pub const VERSION: u32 = 1;

/// Writes the parameter set plus a config echo. The echo must contain at
/// least `variant` and `n_fields`; [`save_with_config`] adds them.
pub fn save(path: &Path, params: &ModelParams<f32>, config_echo: &str) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let tensors = params.visit();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let echo = config_echo.as_bytes();
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo)?;
    w.flush()?;
    Ok(())
}

/// Convenience wrapper appending the model facts the loader needs.
pub fn save_with_config(
    path: &Path,
    params: &ModelParams<f32>,
    user_echo: &str,
) -> Result<()> {
    let echo = format!(
        "{user_echo}variant = {}\nn_fields = {}\nn_features = {}\n",
        params.variant.id(),
        params.dims.n_fields,
        params.dims.n_features,
    );
    save(path, params, &echo)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Data(format!("checkpoint truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a checkpoint back into a parameter set plus its config echo.
pub fn load(path: &Path) -> Result<(ModelParams<f32>, String)> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{} is not a checkpoint", path.display())))?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{} has wrong magic bytes",
            path.display()
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let count = read_u32(&mut r, "tensor count")?;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Data("checkpoint truncated in a tensor name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, "dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::Data(format!("checkpoint truncated in tensor `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let echo_len = read_u32(&mut r, "config length")? as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)
        .map_err(|_| Error::Data("checkpoint truncated in the config echo".into()))?;
    let echo = String::from_utf8(echo)
        .map_err(|_| Error::Data("config echo is not UTF-8".into()))?;

    let params = rebuild(tensors, &echo)?;
    Ok((params, echo))
}

fn take(tensors: &mut BTreeMap<String, Tensor<f32>>, name: &str) -> Result<Tensor<f32>> {
    tensors
        .remove(name)
        .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor `{name}`")))
}

fn rebuild(
    mut tensors: BTreeMap<String, Tensor<f32>>,
    echo: &str,
) -> Result<ModelParams<f32>> {
    let kv = parse_kv(echo);
    let variant = kv
        .get("variant")
        .ok_or_else(|| Error::Data("config echo lacks `variant`".into()))
        .and_then(|v| Variant::parse(v))?;
    let n_fields: usize = kv
        .get("n_fields")
        .ok_or_else(|| Error::Data("config echo lacks `n_fields`".into()))?
        .parse()
        .map_err(|_| Error::Data("bad `n_fields` in config echo".into()))?;

    let embed = take(&mut tensors, "embed")?;
    let linear_w = take(&mut tensors, "linear_w")?;
    let bias = take(&mut tensors, "bias")?;
    if embed.shape().len() != 2 {
        return Err(Error::Data("embedding table must be rank 2".into()));
    }
    let (n_features, embed_dim) = (embed.shape()[0], embed.shape()[1]);

    let frnet = if variant.uses_refiner() {
        let read_ieu = |tensors: &mut BTreeMap<String, Tensor<f32>>,
                        prefix: &str|
         -> Result<IeuParams<f32>> {
            let w_q = take(tensors, &format!("{prefix}.w_q"))?;
            let w_k = take(tensors, &format!("{prefix}.w_k"))?;
            let w_v = take(tensors, &format!("{prefix}.w_v"))?;
            let w_p = take(tensors, &format!("{prefix}.w_p"))?;
            let mut cie = Vec::new();
            let mut i = 0;
            while tensors.contains_key(&format!("{prefix}.cie.{i}.w")) {
                cie.push(CieLayer {
                    w: take(tensors, &format!("{prefix}.cie.{i}.w"))?,
                    b: take(tensors, &format!("{prefix}.cie.{i}.b"))?,
                    slope: take(tensors, &format!("{prefix}.cie.{i}.slope"))?,
                });
                i += 1;
            }
            Ok(IeuParams { w_q, w_k, w_v, w_p, cie })
        };
        Some(FrnetParams {
            ieu_w: read_ieu(&mut tensors, "ieu_w")?,
            ieu_g: read_ieu(&mut tensors, "ieu_g")?,
        })
    } else {
        None
    };
    if let Some(stray) = tensors.keys().next() {
        return Err(Error::Data(format!(
            "checkpoint holds unexpected tensor `{stray}`"
        )));
    }

    let (attn_dim, cie_hidden) = match &frnet {
        Some(p) => {
            let hidden = p.ieu_w.cie[..p.ieu_w.cie.len().saturating_sub(1)]
                .iter()
                .map(|l| l.w.shape()[0])
                .collect();
            (p.ieu_w.w_q.shape()[1], hidden)
        }
        None => (embed_dim, vec![]),
    };
    let params = ModelParams {
        dims: ModelDims {
            n_features,
            n_fields,
            embed_dim,
            attn_dim,
            cie_hidden,
        },
        variant,
        embed,
        linear_w,
        bias,
        frnet,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(n: usize, f: usize, d: usize) -> ModelDims {
        ModelDims {
            n_features: n,
            n_fields: f,
            embed_dim: d,
            attn_dim: d,
            cie_hidden: vec![6],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.frn");
        let mut params = ModelParams::<f32>::init(dims(9, 3, 4), Variant::GATED_BIT, 99);
        // Values that stress exactness.
        params.bias.data_mut()[0] = f32::MIN_POSITIVE;
        params.linear_w.data_mut()[0] = -0.0;
        params.linear_w.data_mut()[1] = 1.0e-38;
        save_with_config(&path, &params, "").unwrap();
        let (loaded, echo) = load(&path).unwrap();
        assert!(echo.contains("n_fields = 3"));
        for ((na, ta), (nb, tb)) in params.visit().iter().zip(loaded.visit().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (x, y) in ta.data().iter().zip(tb.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "tensor {na}");
            }
        }
        assert_eq!(loaded.variant, params.variant);
        assert_eq!(loaded.dims, params.dims);
    }

    #[test]
    fn plain_fm_round_trips_without_refiner() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fm.frn");
        let params = ModelParams::<f32>::init(dims(5, 2, 3), Variant::FM, 1);
        save_with_config(&path, &params, "lr = 0.001\n").unwrap();
        let (loaded, echo) = load(&path).unwrap();
        assert!(loaded.frnet.is_none());
        assert!(echo.contains("lr = 0.001"));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.frn");
        let params = ModelParams::<f32>::init(dims(5, 2, 3), Variant::FM, 1);
        save_with_config(&path, &params, "").unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 2; // bump the version field
        std::fs::write(&path, bytes).unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.frn");
        let params = ModelParams::<f32>::init(dims(5, 2, 3), Variant::FM, 1);
        save_with_config(&path, &params, "").unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).is_err());
    }
}
