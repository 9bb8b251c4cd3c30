//! Binary parameter and tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! checkpoint:  "SLPT" u32:version { u64:name_len name u64:rank u64:dims[rank] f32:data[..] }*
//! tensor file: "SLPT" u32:version u64:rank u64:dims[rank] f32:data[..]
//! ```
//!
//! Optimizer moments are stored as extra entries named `<param>/m` and
//! `<param>/v`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::diffcore::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SLPT";
pub const FORMAT_VERSION: u32 = 1;

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_header(w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected SLPT".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    Ok(())
}

fn write_body<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    write_u64(w, t.rank() as u64)?;
    for &d in t.shape() {
        write_u64(w, d as u64)?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for &x in t.data() {
        buf.extend_from_slice(&(x.to_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_body<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    let rank = read_u64(r)? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let numel: usize = shape.iter().product();
    let mut buf = vec![0u8; numel * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor<T: Real>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    write_header(w)?;
    write_body(w, t)
}

pub fn read_tensor<T: Real>(r: &mut impl Read) -> Result<Tensor<T>> {
    read_header(r)?;
    read_body(r)
}

pub fn save_tensor<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Real>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

pub fn write_params<T: Real>(
    w: &mut impl Write,
    store: &ParamStore<T>,
    with_optimizer: bool,
) -> Result<()> {
    write_header(w)?;
    let mut entry = |name: &str, t: &Tensor<T>| -> Result<()> {
        write_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_body(w, t)
    };
    for (name, e) in store.iter() {
        entry(name, &e.value)?;
    }
    if with_optimizer {
        for (name, e) in store.iter() {
            entry(&format!("{name}/m"), &e.m)?;
            entry(&format!("{name}/v"), &e.v)?;
        }
    }
    Ok(())
}

/// Reads a checkpoint; `/m` and `/v` entries restore the optimizer moments.
pub fn read_params<T: Real>(r: &mut impl Read) -> Result<ParamStore<T>> {
    read_header(r)?;
    let mut store = ParamStore::new();
    let mut moments = Vec::new();
    loop {
        let mut len = [0u8; 8];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let len = u64::from_le_bytes(len) as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let t = read_body(r)?;
        if name.ends_with("/m") || name.ends_with("/v") {
            moments.push((name, t));
        } else {
            store.insert(name, t)?;
        }
    }
    for (name, t) in moments {
        let (base, which) = name.split_at(name.len() - 2);
        let e = store
            .get_mut(base)
            .ok_or_else(|| Error::Format(format!("moment `{name}` without parameter")))?;
        if t.shape() != e.value.shape() {
            return Err(Error::Format(format!("moment `{name}` has wrong shape")));
        }
        if which == "/m" {
            e.m = t;
        } else {
            e.v = t;
        }
    }
    Ok(store)
}

pub fn save_params<T: Real>(path: impl AsRef<Path>, store: &ParamStore<T>, with_optimizer: bool) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, store, with_optimizer)?;
    w.flush()?;
    Ok(())
}

pub fn load_params<T: Real>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    read_params(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((seed as f64 + i as f64) * 0.37).sin() as f32).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn params_roundtrip_with_moments() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.w", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        s.insert("b", Tensor::scalar(0.5)).unwrap();
        s.get_mut("a.w").unwrap().m = Tensor::full(&[2, 2], 0.25);
        let mut buf = Vec::new();
        write_params(&mut buf, &s, true).unwrap();
        assert_eq!(&buf[..4], b"SLPT");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), FORMAT_VERSION);
        let back: ParamStore<f32> = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.value("a.w"), s.value("a.w"));
        assert_eq!(back.get("a.w").unwrap().m, s.get("a.w").unwrap().m);
        assert_eq!(back.value("b").unwrap().item(), 0.5);
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOPE\x01\x00\x00\x00".to_vec();
        assert!(read_tensor::<f32>(&mut buf.as_slice()).is_err());
    }
}
