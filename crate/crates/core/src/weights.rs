//! Weight snapshots: a length-prefixed JSON shape manifest followed by all
//! tensor data as flat little-endian 32-bit floats, in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save<S: Scalar>(params: &[(String, Tensor<S>)], path: &Path) -> Result<()> {
    let manifest: Vec<ManifestEntry> = params
        .iter()
        .map(|(name, t)| ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    let mut buf = Vec::new();
    for (_, t) in params {
        for v in t.data().iter() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    file.write_all(&buf)?;
    Ok(())
}

/// Load a snapshot into an existing parameter set. Every parameter must be
/// present in the file with a matching shape.
pub fn load<S: Scalar>(params: &[(String, Tensor<S>)], path: &Path) -> Result<()> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let mlen = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; mlen];
    file.read_exact(&mut manifest_bytes)?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&manifest_bytes)?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;

    let mut offset = 0usize;
    let mut stored: std::collections::HashMap<String, (Vec<usize>, Vec<f32>)> =
        std::collections::HashMap::new();
    for entry in &manifest {
        let n: usize = entry.shape.iter().product();
        if offset + 4 * n > rest.len() {
            return Err(Error::contract("weight snapshot truncated"));
        }
        let mut vals = Vec::with_capacity(n);
        for i in 0..n {
            let b = &rest[offset + 4 * i..offset + 4 * i + 4];
            vals.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        offset += 4 * n;
        stored.insert(entry.name.clone(), (entry.shape.clone(), vals));
    }

    for (name, t) in params {
        let Some((shape, vals)) = stored.get(name) else {
            return Err(Error::contract(format!("snapshot misses parameter {name:?}")));
        };
        if shape != t.shape() {
            return Err(Error::dim(format!(
                "snapshot shape {:?} for {name:?}, model wants {:?}",
                shape,
                t.shape()
            )));
        }
        t.set_data(vals.iter().map(|&v| S::from_f64(v as f64)).collect())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = std::env::temp_dir().join(format!("mono3d-weights-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("snap.bin");

        let a = Tensor::<f32>::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 9.0, -4.25]).unwrap();
        let b = Tensor::<f32>::from_vec(&[4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        save(&params, &path).unwrap();

        let a2 = Tensor::<f32>::zeros(&[2, 3]);
        let b2 = Tensor::<f32>::zeros(&[4]);
        let params2 = vec![("a".to_string(), a2.clone()), ("b".to_string(), b2.clone())];
        load(&params2, &path).unwrap();
        assert_eq!(a.to_vec(), a2.to_vec());
        assert_eq!(b.to_vec(), b2.to_vec());

        let bad = vec![("c".to_string(), Tensor::<f32>::zeros(&[1]))];
        assert!(load(&bad, &path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
