//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "DESKLMCK"
//! version    u32
//! config     u32 length + UTF-8 key=value text
//! tensors    u32 count, then per tensor:
//!              u32 name length + UTF-8 name
//!              u32 rank + u32 extents
//!              f32 values, row-major
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, Parameters};
use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DESKLMCK";
pub const VERSION: u32 = 1;

pub fn write_model<W: Write>(w: &mut W, model: &Model<f32>) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_str(w, &model.config().to_key_values().render())?;
    write_tensors(w, model.params().iter())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<Model<f32>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kv = KeyValues::parse(&read_str(r)?)?;
    let config = ModelConfig::from_key_values(&kv, &ModelConfig::desk(1))?;
    let params = Parameters::from_named(read_tensors(r)?);
    Model::new(config, params)
}

pub fn save(path: impl AsRef<Path>, model: &Model<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model<f32>> {
    read_model(&mut BufReader::new(File::open(path)?))
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, len_u32(s.len())?)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

pub(crate) fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor<f32>)>,
) -> Result<()> {
    write_u32(w, len_u32(tensors.len())?)?;
    for (name, t) in tensors {
        write_str(w, name)?;
        write_u32(w, len_u32(t.shape().len())?)?;
        for &d in t.shape() {
            write_u32(w, len_u32(d)?)?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub(crate) fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name = read_str(r)?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut cfg = ModelConfig::desk(13);
        cfg.variant = Variant::Pia;
        cfg.use_cache = true;
        cfg.cache_len = 16;
        cfg.tie_embeddings = false;
        let model = Model::<f32>::init(cfg, 9).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), model.config());
        for ((na, a), (nb, b)) in model.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn rejects_corruption() {
        let model = Model::<f32>::init(ModelConfig::desk(5), 1).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(Error::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_model(&mut &truncated[..]).is_err());
    }
}
