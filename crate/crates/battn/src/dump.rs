//! Binary tensor container.
//!
//! Frame layout: 8-byte magic `BATTNDMP`, little-endian `u32` header length,
//! UTF-8 JSON header `{"dtype": "...", "shape": [...], "name": "..."}`, then
//! the row-major payload in little-endian order. Checkpoints concatenate
//! many frames and finish with a `BATTNMAN` manifest frame that uses the
//! same envelope with a JSON payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"BATTNDMP";
pub const MANIFEST_MAGIC: &[u8; 8] = b"BATTNMAN";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DumpHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub name: String,
}

/// A tensor read back from disk, with the payload precision it was written
/// in.
#[derive(Debug, Clone)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<E: Element>(&self) -> Tensor<E> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor<E: Element, W: Write>(w: &mut W, name: &str, t: &Tensor<E>) -> Result<()> {
    let header = DumpHeader {
        dtype: E::DTYPE.name().to_string(),
        shape: t.shape().to_vec(),
        name: name.to_string(),
    };
    let hjson = serde_json::to_vec(&header)?;
    let io = |e| Error::io(format!("writing tensor dump {name:?}"), e);
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_all(&(hjson.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&hjson).map_err(io)?;
    for &x in t.data() {
        w.write_all(&x.to_le_bytes_vec()).map_err(io)?;
    }
    Ok(())
}

/// Writes a manifest frame (same envelope, JSON payload, no shape).
pub fn write_manifest<W: Write>(w: &mut W, json: &[u8]) -> Result<()> {
    let io = |e| Error::io("writing checkpoint manifest".to_string(), e);
    w.write_all(MANIFEST_MAGIC).map_err(io)?;
    w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(json).map_err(io)?;
    Ok(())
}

/// One frame of a dump stream.
pub enum Frame {
    Tensor(DumpHeader, DynTensor),
    Manifest(Vec<u8>),
}

/// Reads the next frame, or `None` at clean end-of-stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>> {
    let mut magic = [0u8; 8];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(Error::io("reading dump magic", e)),
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4).map_err(|e| Error::io("reading dump header length", e))?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf).map_err(|e| Error::io("reading dump header", e))?;

    if &magic == MANIFEST_MAGIC {
        return Ok(Some(Frame::Manifest(hbuf)));
    }
    if &magic != TENSOR_MAGIC {
        return Err(Error::BadDump(format!("unknown magic {magic:?}")));
    }
    let header: DumpHeader = serde_json::from_slice(&hbuf)?;
    let n: usize = header.shape.iter().product();
    let dtype = DType::parse(&header.dtype)
        .ok_or_else(|| Error::BadDump(format!("unknown dtype {:?}", header.dtype)))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut payload = vec![0u8; n * width];
    r.read_exact(&mut payload)
        .map_err(|e| Error::io(format!("reading payload of {:?}", header.name), e))?;
    let tensor = match dtype {
        DType::F32 => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            DynTensor::F32(Tensor::from_vec(header.shape.clone(), data)?)
        }
        DType::F64 => {
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect();
            DynTensor::F64(Tensor::from_vec(header.shape.clone(), data)?)
        }
    };
    Ok(Some(Frame::Tensor(header, tensor)))
}

/// Convenience: write one tensor to its own file.
pub fn save_tensor<E: Element>(path: &std::path::Path, name: &str, t: &Tensor<E>) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(format!("creating {path:?}"), e))?,
    );
    write_tensor(&mut f, name, t)?;
    f.flush().map_err(|e| Error::io(format!("flushing {path:?}"), e))
}

/// Convenience: read a single-tensor file.
pub fn load_tensor(path: &std::path::Path) -> Result<(DumpHeader, DynTensor)> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::io(format!("opening {path:?}"), e))?,
    );
    match read_frame(&mut f)? {
        Some(Frame::Tensor(h, t)) => Ok((h, t)),
        Some(Frame::Manifest(_)) => Err(Error::BadDump("expected tensor, found manifest".into())),
        None => Err(Error::BadDump("empty dump file".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_round_trip_is_bit_identical() {
        let t = Tensor::<f64>::from_fn(&[3, 5], |i| (i as f64).sin() * 1e3);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "probe/q", &t).unwrap();
        assert_eq!(&buf[..8], TENSOR_MAGIC);
        let mut r = std::io::Cursor::new(buf);
        match read_frame(&mut r).unwrap().unwrap() {
            Frame::Tensor(h, DynTensor::F64(back)) => {
                assert_eq!(h.name, "probe/q");
                assert_eq!(h.dtype, "f64");
                assert_eq!(back.shape(), t.shape());
                // compare raw bits, not float equality
                let bits: Vec<u64> = t.data().iter().map(|x| x.to_bits()).collect();
                let back_bits: Vec<u64> = back.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(bits, back_bits);
            }
            _ => panic!("wrong frame type"),
        }
    }

    #[test]
    fn f32_round_trip_preserves_dtype() {
        let t = Tensor::<f32>::from_fn(&[4], |i| i as f32 * 0.3);
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w", &t).unwrap();
        let mut r = std::io::Cursor::new(buf);
        match read_frame(&mut r).unwrap().unwrap() {
            Frame::Tensor(h, t2) => {
                assert_eq!(h.dtype, "f32");
                assert!(matches!(t2, DynTensor::F32(_)));
            }
            _ => panic!("wrong frame type"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "x", &Tensor::<f64>::zeros(&[2])).unwrap();
        buf[0] = b'Z';
        let mut r = std::io::Cursor::new(buf);
        assert!(read_frame(&mut r).is_err());
    }

    #[test]
    fn stream_of_frames_ends_cleanly() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "a", &Tensor::<f64>::zeros(&[2])).unwrap();
        write_manifest(&mut buf, b"{\"steps\":3}").unwrap();
        let mut r = std::io::Cursor::new(buf);
        assert!(matches!(read_frame(&mut r).unwrap(), Some(Frame::Tensor(..))));
        match read_frame(&mut r).unwrap() {
            Some(Frame::Manifest(m)) => assert_eq!(m, b"{\"steps\":3}"),
            _ => panic!("expected manifest"),
        }
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
