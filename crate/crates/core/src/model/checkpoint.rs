//! Binary checkpoint files. Fixed little-endian layout:
//!
//! `"DCD1" | u32 version | u8 role | u32 json_len | config json |
//!  u32 tensor_count | { u16 name_len | name | u8 ndim | u32 dims.. | f32 values.. }*`
//!
//! Tensors are stored in lexicographic name order, so writing the same
//! parameters twice yields byte-identical files.

use super::EncoderConfig;
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{CdError, CdResult};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DCD1";
const VERSION: u32 = 1;

/// Which network a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Encoder,
    AlignHead,
    Decoder,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::AlignHead => "align-head",
            Role::Decoder => "decoder",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::AlignHead => 1,
            Role::Decoder => 2,
        }
    }

    fn from_u8(byte: u8) -> CdResult<Self> {
        match byte {
            0 => Ok(Role::Encoder),
            1 => Ok(Role::AlignHead),
            2 => Ok(Role::Decoder),
            other => Err(CdError::CheckpointFormat(format!(
                "unknown role byte {other}"
            ))),
        }
    }
}

/// A network's parameters plus the architecture that shaped them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub role: Role,
    pub config: EncoderConfig,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn new(role: Role, config: EncoderConfig, params: ParamSet<f32>) -> Self {
        Self {
            version: VERSION,
            role,
            config,
            params,
        }
    }
}

fn truncated(what: &str) -> CdError {
    CdError::CheckpointFormat(format!("file truncated reading {what}"))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> CdResult<()> {
    r.read_exact(buf).map_err(|_| truncated(what))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> CdResult<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16<R: Read>(r: &mut R, what: &str) -> CdResult<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, what)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u8<R: Read>(r: &mut R, what: &str) -> CdResult<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b, what)?;
    Ok(b[0])
}

/// Writes a checkpoint; same inputs always produce byte-identical files.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> CdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[ckpt.role.to_u8()])?;

    let json = serde_json::to_vec(&ckpt.config)
        .map_err(|e| CdError::CheckpointFormat(format!("config serialization: {e}")))?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;

    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for (name, tensor) in ckpt.params.iter() {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(CdError::CheckpointFormat(format!(
                "parameter name '{name}' too long"
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(CdError::CheckpointFormat(format!(
                "tensor '{name}' has too many dimensions"
            )));
        }
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            if d > u32::MAX as usize {
                return Err(CdError::CheckpointFormat(format!(
                    "tensor '{name}' dimension {d} exceeds u32"
                )));
            }
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads any checkpoint, whatever its role.
pub fn load_checkpoint(path: &Path) -> CdResult<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CdError::CheckpointFormat(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CdError::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let role = Role::from_u8(read_u8(&mut r, "role")?)?;

    let json_len = read_u32(&mut r, "config length")? as usize;
    let mut json = vec![0u8; json_len];
    read_exact(&mut r, &mut json, "config json")?;
    let config: EncoderConfig = serde_json::from_slice(&json)
        .map_err(|e| CdError::CheckpointFormat(format!("config json: {e}")))?;
    config.validate()?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut params = ParamSet::new();
    for i in 0..count {
        let name_len = read_u16(&mut r, "tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes, "tensor name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| {
            CdError::CheckpointFormat(format!("tensor {i} name is not utf-8"))
        })?;
        let ndim = read_u8(&mut r, "tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, "tensor dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 4];
        for _ in 0..numel {
            read_exact(&mut r, &mut b, &format!("values of '{name}'"))?;
            data.push(f32::from_le_bytes(b));
        }
        params.insert(name, Tensor::new(shape, data)?)?;
    }

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CdError::CheckpointFormat(
            "trailing bytes after last tensor".into(),
        ));
    }

    Ok(Checkpoint {
        version,
        role,
        config,
        params,
    })
}

/// Reads a checkpoint and insists it holds the given network.
pub fn load_checkpoint_expecting(path: &Path, role: Role) -> CdResult<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.role != role {
        return Err(CdError::RoleMismatch {
            expected: role.name().to_string(),
            found: ckpt.role.name().to_string(),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_align_head, init_encoder};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            stage_channels: [4, 6, 8],
            descriptor_dim: 8,
            patch_size: 32,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let cfg = small_cfg();
        let params = init_encoder::<f32>(&cfg, 77).unwrap();
        let ckpt = Checkpoint::new(Role::Encoder, cfg.clone(), params);
        save_checkpoint(&path, &ckpt).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.version, 1);
        assert_eq!(loaded.role, Role::Encoder);
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.params.len(), ckpt.params.len());
        for ((na, ta), (nb, tb)) in ckpt.params.iter().zip(loaded.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // saving the loaded copy reproduces the file byte for byte
        let path2 = dir.path().join("enc2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn header_layout_is_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("head.ckpt");
        let cfg = small_cfg();
        let params = init_align_head::<f32>(&cfg, 3).unwrap();
        save_checkpoint(&path, &Checkpoint::new(Role::AlignHead, cfg.clone(), params)).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DCD1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 1); // align-head role byte
        let json_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let parsed: EncoderConfig = serde_json::from_slice(&bytes[13..13 + json_len]).unwrap();
        assert_eq!(parsed, cfg);
        let count_at = 13 + json_len;
        assert_eq!(
            u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap()),
            4 // h.c1.{w,b}, h.c2.{w,b}
        );
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let cfg = small_cfg();
        let params = init_align_head::<f32>(&cfg, 3).unwrap();
        save_checkpoint(&path, &Checkpoint::new(Role::AlignHead, cfg, params)).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, CdError::CheckpointFormat(_)), "{err}");

        bytes[0] = b'D';
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let cfg = small_cfg();
        let params = init_align_head::<f32>(&cfg, 3).unwrap();
        save_checkpoint(&path, &Checkpoint::new(Role::AlignHead, cfg, params)).unwrap();

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn role_checking() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ckpt");
        let cfg = small_cfg();
        let params = init_align_head::<f32>(&cfg, 3).unwrap();
        save_checkpoint(&path, &Checkpoint::new(Role::AlignHead, cfg, params)).unwrap();

        assert!(load_checkpoint_expecting(&path, Role::AlignHead).is_ok());
        let err = load_checkpoint_expecting(&path, Role::Decoder).unwrap_err();
        match err {
            CdError::RoleMismatch { expected, found } => {
                assert_eq!(expected, "decoder");
                assert_eq!(found, "align-head");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(Path::new("/nonexistent/nope.ckpt")).unwrap_err();
        assert!(matches!(err, CdError::Io(_)));
    }
}
