//! Checkpoint format: one compact JSON header line describing parameter
//! names, shapes, and dtype, a single `\n`, then the raw little-endian
//! scalar payloads concatenated in header order. No timestamps or other
//! environment-dependent bytes, so identical parameters produce identical
//! files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DiffError;
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    params: Vec<HeaderParam>,
}

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
}

/// Serialize a parameter set to `path`.
pub fn save<R: Real>(params: &ParamSet<R>, path: &Path) -> Result<(), DiffError> {
    let header = Header {
        dtype: R::DTYPE.to_string(),
        params: params
            .iter()
            .map(|(_, p)| HeaderParam { name: p.name.clone(), shape: p.value.shape().to_vec() })
            .collect(),
    };
    let mut out = BufWriter::new(File::create(path)?);
    let hjson = serde_json::to_string(&header).map_err(|e| DiffError::Format(e.to_string()))?;
    out.write_all(hjson.as_bytes())?;
    out.write_all(b"\n")?;
    let mut payload = Vec::with_capacity(params.total_len() * R::BYTES);
    for (_, p) in params.iter() {
        for &v in p.value.iter() {
            v.write_le(&mut payload);
        }
    }
    out.write_all(&payload)?;
    out.flush()?;
    Ok(())
}

/// Load a parameter set saved by [`save`]. Names and registration order come
/// from the file.
pub fn load<R: Real>(path: &Path) -> Result<ParamSet<R>, DiffError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| DiffError::Format(format!("bad header: {e}")))?;
    if header.dtype != R::DTYPE {
        return Err(DiffError::DtypeMismatch {
            found: header.dtype,
            expected: R::DTYPE.to_string(),
        });
    }
    let mut offset = nl + 1;
    let mut ps = ParamSet::new();
    for hp in header.params {
        let n: usize = hp.shape.iter().product();
        let need = n * R::BYTES;
        if offset + need > bytes.len() {
            return Err(DiffError::Format(format!(
                "payload truncated at parameter `{}`",
                hp.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(R::read_le(&bytes[offset + i * R::BYTES..]));
        }
        offset += need;
        ps.add(hp.name, Tensor::new(hp.shape, data));
    }
    if offset != bytes.len() {
        return Err(DiffError::Format(format!(
            "{} trailing payload bytes",
            bytes.len() - offset
        )));
    }
    Ok(ps)
}

/// Copy values from a checkpoint into an existing, structurally identical
/// parameter set (same names, same shapes; order may differ).
pub fn load_into<R: Real>(params: &mut ParamSet<R>, path: &Path) -> Result<(), DiffError> {
    let loaded = load::<R>(path)?;
    if loaded.len() != params.len() {
        return Err(DiffError::ParamSetMismatch(format!(
            "checkpoint has {} parameters, model has {}",
            loaded.len(),
            params.len()
        )));
    }
    for (_, p) in loaded.iter() {
        let id = params
            .id_of(&p.name)
            .ok_or_else(|| DiffError::ParamSetMismatch(format!("unexpected parameter `{}`", p.name)))?;
        if params.get(id).shape() != p.value.shape() {
            return Err(DiffError::ParamShape {
                name: p.name.clone(),
                found: p.value.shape().to_vec(),
                expected: params.get(id).shape().to_vec(),
            });
        }
        *params.get_mut(id) = p.value.clone();
    }
    Ok(())
}

/// Parameter names stored in a checkpoint, in payload order.
pub fn stored_names(path: &Path) -> Result<Vec<String>, DiffError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DiffError::Format("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| DiffError::Format(format!("bad header: {e}")))?;
    Ok(header.params.into_iter().map(|p| p.name).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("diffcore-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("a.w", Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, 1e-20, -0.5]));
        ps.add("a.b", Tensor::from_vec(vec![0.25, 0.125]));
        let path = tmpfile("roundtrip.ckpt");
        save(&ps, &path).unwrap();
        let back: ParamSet<f32> = load(&path).unwrap();
        assert_eq!(back.len(), 2);
        let id = back.id_of("a.w").unwrap();
        assert_eq!(back.get(id).shape(), &[2, 3]);
        assert_eq!(back.get(id).data(), ps.get(ps.id_of("a.w").unwrap()).data());
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("x", Tensor::from_vec(vec![1.0]));
        let path = tmpfile("dtype.ckpt");
        save(&ps, &path).unwrap();
        match load::<f64>(&path) {
            Err(DiffError::DtypeMismatch { found, expected }) => {
                assert_eq!(found, "f32");
                assert_eq!(expected, "f64");
            }
            other => panic!("expected DtypeMismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn identical_params_produce_identical_files() {
        let mut ps: ParamSet<f32> = ParamSet::new();
        ps.add("p", Tensor::from_vec(vec![0.1, 0.2, 0.3]));
        let p1 = tmpfile("ident1.ckpt");
        let p2 = tmpfile("ident2.ckpt");
        save(&ps, &p1).unwrap();
        save(&ps, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
