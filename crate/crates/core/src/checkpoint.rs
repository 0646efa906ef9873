//! Flat binary container for named tensors.
//!
//! Layout: a 5-byte magic string, then records until end of file. Each
//! record is `name_len: u64`, the UTF-8 name bytes, `rank: u64`, `rank`
//! dimensions as `u64`, and the data as `f64`. Every integer and float is
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 5] = b"QREG1";
pub const DATASET_MAGIC: &[u8; 5] = b"QDAT1";

pub fn write_records<W: Write>(mut w: W, magic: &[u8; 5], records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(magic)?;
    for (name, t) in records {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u64::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::Data("truncated record".into())
    } else {
        Error::Io(e)
    }
}

/// Reads every record, checking the magic string first.
pub fn read_records<R: Read>(mut r: R, magic: &[u8; 5]) -> Result<Vec<(String, Tensor)>> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(truncated)?;
    if &head != magic {
        return Err(Error::Data(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head),
            String::from_utf8_lossy(magic)
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut len = [0u8; 8];
        // a clean end of file may only fall between records
        match r.read(&mut len[..1])? {
            0 => break,
            _ => r.read_exact(&mut len[1..]).map_err(truncated)?,
        }
        let name_len = u64::from_le_bytes(len) as usize;
        if name_len > 1 << 20 {
            return Err(Error::Data(format!("implausible name length {name_len}")));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Data("record name is not UTF-8".into()))?;
        let rank = read_u64(&mut r)? as usize;
        if rank > 16 {
            return Err(Error::Data(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(truncated)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Data(format!("{name}: {e}")))?;
        records.push((name, t));
    }
    Ok(records)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_records(BufWriter::new(file), MODEL_MAGIC, &model.state_dict())
}

/// Loads a checkpoint into a model of the same architecture.
pub fn load_model(model: &mut Model, path: impl AsRef<Path>) -> Result<()> {
    let file = File::open(path)?;
    let records = read_records(BufReader::new(file), MODEL_MAGIC)?;
    model.load_state(&records)
}
