//! Binary checkpoint format: magic `MEGA`, version, config block
//! (N, S, D, B_e, B_d, G, K as u32), then one record per parameter
//! (name length, name bytes, shape rank, dims, little-endian f64 values).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MegaModel, ModelConfig};

const MAGIC: &[u8; 4] = b"MEGA";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, model: &MegaModel) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    let cfg = &model.cfg;
    for v in [
        VERSION,
        cfg.n_tokens as u32,
        cfg.codebook_size as u32,
        cfg.dim as u32,
        cfg.enc_blocks as u32,
        cfg.dec_blocks as u32,
        cfg.keypoints as u32, // G: conditioning tokens
        cfg.keypoints as u32, // K: keypoints
        model.params.len() as u32,
    ] {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    for (name, tensor) in model.params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(bytes).map_err(io_err)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io_err)?;
        }
        for v in &tensor.data {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

/// Load and validate a checkpoint. `heads` is not part of the stored config
/// block and must come from the run configuration.
pub fn load_checkpoint(path: &Path, heads: usize) -> Result<MegaModel> {
    let corrupt = |reason: String| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| corrupt("short read on magic".into()))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)
            .map_err(|_| corrupt("short read".into()))?;
        Ok(u32::from_le_bytes(b))
    };
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r)? as usize;
    let s = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    let b_e = read_u32(&mut r)? as usize;
    let b_d = read_u32(&mut r)? as usize;
    let g = read_u32(&mut r)? as usize;
    let k = read_u32(&mut r)? as usize;
    if g != k {
        return Err(corrupt(format!("G = {g} differs from K = {k}")));
    }
    let n_params = read_u32(&mut r)? as usize;

    let cfg = ModelConfig {
        n_tokens: n,
        codebook_size: s,
        dim: d,
        enc_blocks: b_e,
        dec_blocks: b_d,
        heads,
        keypoints: k,
    };
    // Fresh layout with the stored config; every named tensor must match.
    let mut model = MegaModel::new(cfg, 0)?;
    if n_params != model.params.len() {
        return Err(corrupt(format!(
            "parameter count {n_params}, layout expects {}",
            model.params.len()
        )));
    }
    for i in 0..n_params {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1024 {
            return Err(corrupt("unreasonable name length".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| corrupt("short read on name".into()))?;
        let name = String::from_utf8(name).map_err(|_| corrupt("bad name".into()))?;
        if name != model.params.name(i) {
            return Err(corrupt(format!(
                "parameter {i} named `{name}`, layout expects `{}`",
                model.params.name(i)
            )));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != model.params.value(i).shape {
            return Err(corrupt(format!(
                "parameter `{name}` has shape {:?}, layout expects {:?}",
                shape,
                model.params.value(i).shape
            )));
        }
        let len: usize = shape.iter().product();
        let mut buf = vec![0u8; 8 * len];
        r.read_exact(&mut buf)
            .map_err(|_| corrupt(format!("short read in `{name}`")))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.value_mut(i).data = data;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(corrupt("trailing bytes".into()));
    }
    Ok(model)
}

/// Check a loaded checkpoint against the run configuration, field by field.
pub fn validate_config(model: &MegaModel, expected: &ModelConfig) -> Result<()> {
    let found = &model.cfg;
    let fields = [
        ("n", found.n_tokens, expected.n_tokens),
        ("s", found.codebook_size, expected.codebook_size),
        ("d", found.dim, expected.dim),
        ("b_e", found.enc_blocks, expected.enc_blocks),
        ("b_d", found.dec_blocks, expected.dec_blocks),
        ("k", found.keypoints, expected.keypoints),
    ];
    for (name, got, want) in fields {
        if got != want {
            return Err(Error::CheckpointMismatch {
                field: name.to_string(),
                found: got as u32,
                expected: want as u32,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("megackpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let cfg = ModelConfig {
            n_tokens: 6,
            codebook_size: 10,
            dim: 16,
            enc_blocks: 2,
            dec_blocks: 1,
            heads: 2,
            keypoints: 4,
        };
        let model = MegaModel::new(cfg, 42).unwrap();
        let path = tmpfile("rt.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let loaded = load_checkpoint(&path, cfg.heads).unwrap();
        assert_eq!(loaded.cfg, cfg);
        for i in 0..model.params.len() {
            assert_eq!(model.params.name(i), loaded.params.name(i));
            assert_eq!(model.params.value(i).data, loaded.params.value(i).data);
        }
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = ModelConfig {
            n_tokens: 6,
            codebook_size: 10,
            dim: 16,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            keypoints: 4,
        };
        let model = MegaModel::new(cfg, 1).unwrap();
        let path = tmpfile("trunc.ckpt");
        save_checkpoint(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        assert!(matches!(
            load_checkpoint(&path, cfg.heads),
            Err(Error::CorruptCheckpoint { .. })
        ));
        std::fs::remove_file(path).unwrap();
    }

    #[test]
    fn config_mismatch_names_the_field() {
        let cfg = ModelConfig {
            n_tokens: 6,
            codebook_size: 10,
            dim: 16,
            enc_blocks: 1,
            dec_blocks: 1,
            heads: 2,
            keypoints: 4,
        };
        let model = MegaModel::new(cfg, 1).unwrap();
        let mut wanted = cfg;
        wanted.n_tokens = 54;
        let err = validate_config(&model, &wanted).unwrap_err();
        match err {
            Error::CheckpointMismatch { field, found, expected } => {
                assert_eq!(field, "n");
                assert_eq!(found, 6);
                assert_eq!(expected, 54);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let path = tmpfile("bad.ckpt");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(
            load_checkpoint(&path, 2),
            Err(Error::CorruptCheckpoint { .. })
        ));
        std::fs::remove_file(path).unwrap();
    }
}
