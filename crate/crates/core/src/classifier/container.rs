//! Model file layout:
//!
//! ```text
//! "PSSM" | u32 LE version | u32 LE header length | JSON header | f32 LE params
//! ```
//!
//! The header holds the layer list, `input_channels`, the tensor names and
//! shapes in payload order, and optionally the PSS config the model was
//! trained with. The payload must hold exactly the number of floats the
//! shapes imply.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Architecture, MicroCnnModel, TensorSpec};
use crate::error::{Error, Result};
use crate::pss::PssConfig;

pub const MODEL_MAGIC: &[u8; 4] = b"PSSM";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: serde_json::Value,
    input_channels: usize,
    tensors: Vec<TensorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pss_config: Option<PssConfig>,
}

pub fn write_model(model: &MicroCnnModel, pss_config: Option<&PssConfig>, mut w: impl Write) -> Result<()> {
    let arch = model.architecture();
    let header = Header {
        architecture: arch.layers(),
        input_channels: arch.input_channels,
        tensors: arch.tensors(),
        pss_config: pss_config.copied(),
    };
    let json = serde_json::to_vec(&header).expect("plain struct");
    let mut buf = Vec::with_capacity(12 + json.len() + 4 * model.params().len());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io("<model>", e))
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Format(format!("truncated model file while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4, what)?.try_into().unwrap()))
}

pub fn read_model(mut bytes: &[u8]) -> Result<(MicroCnnModel, Option<PssConfig>)> {
    if take(&mut bytes, 4, "magic")? != MODEL_MAGIC {
        return Err(Error::Format("bad magic, not a model file".into()));
    }
    let version = read_u32(&mut bytes, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let header_len = read_u32(&mut bytes, "header length")? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len, "header")?)
        .map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let arch = Architecture::from_layers(&header.architecture)?;
    if arch.input_channels != header.input_channels {
        return Err(Error::Format(format!(
            "input_channels {} disagrees with layer list ({})",
            header.input_channels, arch.input_channels
        )));
    }
    let expected = arch.tensors();
    if expected.len() != header.tensors.len()
        || expected
            .iter()
            .zip(&header.tensors)
            .any(|(a, b)| a.name != b.name || a.shape != b.shape)
    {
        return Err(Error::Format("tensor list does not match architecture".into()));
    }
    let n = arch.param_count();
    if bytes.len() != 4 * n {
        return Err(Error::Format(format!(
            "payload holds {} bytes, shapes need {} floats ({} bytes)",
            bytes.len(),
            n,
            4 * n
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let model = MicroCnnModel::from_params(arch, params)?;
    if let Some(cfg) = &header.pss_config {
        cfg.validate()?;
        if cfg.stacked_channels() != arch.input_channels {
            return Err(Error::Format("stored PSS config does not match input_channels".into()));
        }
    }
    Ok((model, header.pss_config))
}

pub fn save_model(model: &MicroCnnModel, pss_config: Option<&PssConfig>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_model(model, pss_config, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MicroCnnModel, Option<PssConfig>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_model(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MicroCnnModel {
        MicroCnnModel::new(Architecture::reference(6), 11).unwrap()
    }

    fn bytes(m: &MicroCnnModel, cfg: Option<&PssConfig>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(m, cfg, &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let cfg = PssConfig {
            patch_size: 16,
            n_full: 1,
            n_half: 0,
            include_whole: true,
        };
        let (back, stored) = read_model(&bytes(&m, Some(&cfg))).unwrap();
        assert_eq!(stored, Some(cfg));
        assert_eq!(back.params(), m.params());
        let input: Vec<u8> = (0..16 * 16 * 6).map(|i| (i * 37 % 256) as u8).collect();
        let a = m.forward_stacked(&input, 16).unwrap();
        let b = back.forward_stacked(&input, 16).unwrap();
        assert_eq!(a.map(f32::to_bits), b.map(f32::to_bits));
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let good = bytes(&m, None);
        for cut in [0, 3, 8, 11, 20, good.len() - 1] {
            assert!(matches!(read_model(&good[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut extra = good.clone();
        extra.extend_from_slice(&0f32.to_le_bytes());
        assert!(matches!(read_model(&extra), Err(Error::Format(_))));
        let short = &good[..good.len() - 4];
        assert!(matches!(read_model(short), Err(Error::Format(_))));
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(read_model(&magic), Err(Error::Format(_))));
        let mut version = good;
        version[4] = 9;
        assert!(matches!(read_model(&version), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_shape_disagreement() {
        let m = model();
        let good = bytes(&m, None);
        let header_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&good[12..12 + header_len]).unwrap();
        let edited = header.replacen("[3,3,6,16]", "[3,3,6,17]", 1);
        assert_ne!(edited, header);
        let mut buf = good[..8].to_vec();
        buf.extend_from_slice(&(edited.len() as u32).to_le_bytes());
        buf.extend_from_slice(edited.as_bytes());
        buf.extend_from_slice(&good[12 + header_len..]);
        assert!(matches!(read_model(&buf), Err(Error::Format(_))));
    }
}
