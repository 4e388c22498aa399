//! Binary checkpoint format.
//!
//! Layout (little endian): magic `TCK1`, the descriptor (`u32` in/out
//! channels, `u32` width count and widths, `u32` kernel, `u32` convs per
//! level, `f64` leaky slope), `u32` tensor count, then per tensor a `u32`
//! name length and UTF-8 name, `u32` rank, `u64` dims and raw `f64` values.

use std::fs;
use std::path::Path;

use super::net::{Descriptor, NetworkParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCK1";

pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let d = params.descriptor();
    let mut out = Vec::new();
    let u32_ = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(MAGIC);
    u32_(&mut out, d.in_channels);
    u32_(&mut out, d.out_channels);
    u32_(&mut out, d.widths.len());
    for &w in &d.widths {
        u32_(&mut out, w);
    }
    u32_(&mut out, d.kernel);
    u32_(&mut out, d.convs_per_level);
    out.extend_from_slice(&d.leaky_slope.to_le_bytes());
    u32_(&mut out, params.tensors().len());
    for (name, t) in params.tensors() {
        u32_(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32_(&mut out, t.shape().len());
        for &s in t.shape() {
            out.extend_from_slice(&(s as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap())).map_err(|e| e.to_string())
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<NetworkParams, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let in_channels = r.u32()?;
    let out_channels = r.u32()?;
    let n_widths = r.u32()?;
    if n_widths > 64 {
        return Err(format!("implausible depth {n_widths}"));
    }
    let widths = (0..n_widths).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
    let descriptor = Descriptor {
        in_channels,
        out_channels,
        widths,
        kernel: r.u32()?,
        convs_per_level: r.u32()?,
        leaky_slope: r.f64()?,
    };
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| e.to_string())?;
        let rank = r.u32()?;
        if rank > 8 {
            return Err(format!("tensor {name} has implausible rank {rank}"));
        }
        let shape = (0..rank).map(|_| r.u64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or("tensor size overflows")?;
        if n > (bytes.len() - r.pos) / 8 {
            return Err(format!("tensor {name} is truncated"));
        }
        let data = (0..n).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    NetworkParams::from_parts(descriptor, tensors).map_err(|e| e.to_string())
}

pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|reason| Error::Format { path: path.to_path_buf(), reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let d = Descriptor { widths: vec![4, 8], convs_per_level: 2, ..Descriptor::default() };
        let mut p = NetworkParams::init(d, 3).unwrap();
        p.tensors_mut()[1].1.data_mut()[0] = -0.0;
        p.tensors_mut()[0].1.data_mut()[1] = f64::MIN_POSITIVE / 3.0;
        let back = decode_checkpoint(&encode_checkpoint(&p)).unwrap();
        assert_eq!(back.descriptor(), p.descriptor());
        for ((na, a), (nb, b)) in p.tensors().iter().zip(back.tensors()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let p = NetworkParams::init(Descriptor { widths: vec![2], ..Descriptor::default() }, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&p, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), p);

        let bytes = encode_checkpoint(&p);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"XXXX").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        fs::write(&path, &bytes[..10]).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { path: p2, .. }) => assert_eq!(p2, path),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
