//! `MFT1` raw tensor files: magic, `u32` rank, `rank × u32` dims, then the
//! row-major `f32` payload. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"MFT1";

/// Largest rank accepted when reading; guards against garbage headers.
const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(tensor: &Tensor, mut sink: W) -> std::io::Result<()> {
    sink.write_all(TENSOR_MAGIC)?;
    write_shape_and_payload(tensor, &mut sink)
}

pub(crate) fn write_shape_and_payload<W: Write>(tensor: &Tensor, sink: &mut W) -> std::io::Result<()> {
    sink.write_all(&(tensor.rank() as u32).to_le_bytes())?;
    for &d in tensor.shape() {
        sink.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut bytes = Vec::with_capacity(tensor.numel() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&bytes)
}

pub fn read_tensor<R: Read>(mut source: R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(&mut source, &mut magic, "tensor magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(format!(
            "bad tensor magic {magic:?}, expected {TENSOR_MAGIC:?}"
        )));
    }
    read_shape_and_payload(&mut source, "tensor")
}

pub(crate) fn read_u32<R: Read>(source: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(source, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated stream while reading {what}")),
        _ => Error::io(what, e),
    })
}

pub(crate) fn read_shape_and_payload<R: Read>(source: &mut R, what: &str) -> Result<Tensor> {
    let rank = read_u32(source, what)?;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(format!("{what}: unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(read_u32(source, what)? as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::format(format!("{what}: invalid dims {shape:?}")))?;
    let mut bytes = vec![0u8; numel * 4];
    read_exact(source, &mut bytes, what)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn write_tensor_file(tensor: &Tensor, path: &Path) -> Result<()> {
    let display = path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(&display, e))?;
    let mut sink = BufWriter::new(file);
    write_tensor(tensor, &mut sink).map_err(|e| Error::io(&display, e))?;
    sink.flush().map_err(|e| Error::io(&display, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let tensor = read_tensor(&mut reader)?;
    let mut rest = [0u8; 1];
    if reader.read(&mut rest).map_err(|e| Error::io(path.display().to_string(), e))? != 0 {
        return Err(Error::format(format!("{}: trailing bytes after tensor", path.display())));
    }
    Ok(tensor)
}
