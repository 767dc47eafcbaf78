//! Parameter checkpoints: one text header line, then a binary body of named
//! tensors (`u32` name length, name bytes, `u32` rank, `u64` dims, little-endian
//! `f64` values).

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TGDPARM1";

pub fn write_params<W: Write>(mut out: W, header: &str, params: &ParamSet) -> Result<()> {
    writeln!(out, "{}", header.trim_end())?;
    out.write_all(MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (_, p) in params.iter() {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&(p.value.ndim() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Returns the header line and the stored parameters.
pub fn read_params<R: Read>(input: R) -> Result<(String, ParamSet)> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Contract("not a parameter checkpoint".into()));
    }
    let count = read_u32(&mut reader)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = read_u32(&mut reader)? as usize;
        let mut name = vec![0u8; len];
        reader.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Contract(e.to_string()))?;
        let rank = read_u32(&mut reader)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            reader.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 8];
            reader.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        params.add(name, Tensor::new(shape, data)?)?;
    }
    Ok((header.trim_end().to_string(), params))
}

pub fn save(path: &Path, header: &str, params: &ParamSet) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_params(f, header, params)
}

pub fn load(path: &Path) -> Result<(String, ParamSet)> {
    read_params(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamSet::new();
        params
            .add("a", Tensor::vector(vec![0.1, -3.5e-300, f64::MIN_POSITIVE]))
            .unwrap();
        params.add("delta", Tensor::scalar(0.1)).unwrap();
        params
            .add("W", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut buf = Vec::new();
        write_params(&mut buf, "# tgd train seed=3", &params).unwrap();
        let (header, back) = read_params(&buf[..]).unwrap();
        assert_eq!(header, "# tgd train seed=3");
        for (_, p) in params.iter() {
            let q = back.by_name(&p.name).unwrap();
            assert_eq!(p.value.shape(), q.value.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.value), bits(&q.value));
        }
    }
}
