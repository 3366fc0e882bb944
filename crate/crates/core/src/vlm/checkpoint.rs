//! Named-tensor checkpoint format, shared by the VLM ("TVLM1") and the
//! unlearning modules ("CGUL1").
//!
//! Layout: magic bytes, u32 LE parameter count, then per parameter
//! `{u32 LE name length, name bytes, u8 rank, rank x u32 LE dims,
//! u8 frozen flag, little-endian f32 payload}`. Round-trips bit-exactly.

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::{ParamSet, Tensor};

pub const TVLM_MAGIC: &[u8; 5] = b"TVLM1";

pub fn write_params(path: &Path, magic: &[u8; 5], set: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for (name, t) in set.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(!t.requires_grad() as u8);
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CoreError::io(parent.display().to_string(), e))?;
    }
    fs::write(path, buf).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn read_params(path: &Path, magic: &[u8; 5]) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let err = |reason: &str| CoreError::Parse {
        path: path.display().to_string(),
        line: 0,
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(err("truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 5)? != magic {
        return Err(err("bad magic"));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| err("non-utf8 parameter name"))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let frozen = take(&mut pos, 1)?[0] != 0;
        let numel: usize = shape.iter().product();
        let payload = take(&mut pos, numel * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::from_vec(&shape, data)?;
        t.set_requires_grad(!frozen);
        out.push((name, t));
    }
    if pos != bytes.len() {
        return Err(err("trailing bytes after last parameter"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::{init_vlm, VLMConfig, VLMParams};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = VLMConfig::with_vocab(20);
        let mut params = init_vlm(&cfg, 5).unwrap();
        params.set.get_mut("projector.w").unwrap().set_requires_grad(false);
        let dir = std::env::temp_dir().join(format!("cagul-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.tvlm");
        params.save(&path).unwrap();
        let loaded = VLMParams::load(&path, &cfg).unwrap();
        assert_eq!(loaded.set.content_hash(), params.set.content_hash());
        // save again: identical bytes
        let path2 = dir.join("m2.tvlm");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn forward_after_round_trip_is_bit_identical() {
        let cfg = VLMConfig::with_vocab(20);
        let params = init_vlm(&cfg, 5).unwrap();
        let ds = crate::dataset::generate(2, 4, 1, 5).unwrap();
        let zv = params
            .encode_image(ds.images.values().next().unwrap())
            .unwrap();
        let before = params.forward(&zv, &[4, 5], &[6], false).unwrap();

        let dir = std::env::temp_dir().join(format!("cagul-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.tvlm");
        params.save(&path).unwrap();
        let loaded = VLMParams::load(&path, &cfg).unwrap();
        let zv2 = loaded
            .encode_image(ds.images.values().next().unwrap())
            .unwrap();
        let after = loaded.forward(&zv2, &[4, 5], &[6], false).unwrap();
        let bits = |t: &crate::tensor::Tensor| {
            t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&before.logits), bits(&after.logits));
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let cfg = VLMConfig::with_vocab(20);
        let params = init_vlm(&cfg, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("cagul-ckpt3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.tvlm");
        write_params(&path, b"XXXX1", &params.set).unwrap();
        assert!(read_params(&path, TVLM_MAGIC).is_err());
        std::fs::remove_dir_all(dir).unwrap();
    }
}
