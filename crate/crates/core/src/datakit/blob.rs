//! `GSRG` tensor blobs.
//!
//! ```text
//! "GSRG" | version u16 | dtype u8 | ndim u8 | dims u64 × ndim | payload
//! ```
//!
//! Many blobs may be concatenated in one file; readers address them by the
//! byte offset of their magic.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::DataError;
use crate::autodiff::{Real, Tensor};

pub const BLOB_MAGIC: &[u8; 4] = b"GSRG";
pub const BLOB_VERSION: u16 = 1;

/// Refuse headers describing more than this many elements before
/// allocating anything.
const MAX_ELEMENTS: u64 = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
    U16 = 4,
}

impl Dtype {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::F32),
            2 => Some(Self::F64),
            3 => Some(Self::U8),
            4 => Some(Self::U16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 => 8,
            Self::U8 => 1,
            Self::U16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl BlobData {
    pub fn dtype(&self) -> Dtype {
        match self {
            Self::F32(_) => Dtype::F32,
            Self::F64(_) => Dtype::F64,
            Self::U8(_) => Dtype::U8,
            Self::U16(_) => Dtype::U16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::U8(v) => v.len(),
            Self::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    shape: Vec<usize>,
    data: BlobData,
}

impl Blob {
    pub fn new(shape: Vec<usize>, data: BlobData) -> Result<Self, String> {
        if shape.len() > u8::MAX as usize {
            return Err(format!("{} dimensions", shape.len()));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(format!("shape {shape:?} holds {n} elements, data has {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let data = match T::DTYPE_CODE {
            1 => BlobData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect()),
            _ => BlobData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
        };
        Self {
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &BlobData {
        &self.data
    }

    pub fn into_data(self) -> BlobData {
        self.data
    }

    pub fn encoded_len(&self) -> usize {
        8 + 8 * self.shape.len() + self.data.len() * self.data.dtype().size()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(BLOB_MAGIC);
        out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
        out.push(self.data.dtype() as u8);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            BlobData::U8(v) => out.extend_from_slice(v),
            BlobData::U16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    /// Decodes the blob starting at `offset`; returns it with its end offset.
    pub fn decode(bytes: &[u8], offset: u64, path: &str) -> Result<(Self, u64), DataError> {
        let mut cur = Cursor { bytes, pos: offset, start: offset, path };
        let magic = cur.take(4)?;
        if magic != BLOB_MAGIC {
            return Err(DataError::BadMagic {
                path: path.into(),
                offset,
                found: magic.to_vec(),
                expected: BLOB_MAGIC,
            });
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().expect("2 bytes"));
        if version != BLOB_VERSION {
            return Err(DataError::Version {
                path: path.into(),
                offset,
                found: version,
                supported: BLOB_VERSION,
            });
        }
        let code = cur.take(1)?[0];
        let dtype = Dtype::from_code(code).ok_or(DataError::Dtype {
            path: path.into(),
            offset,
            code,
        })?;
        let ndim = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut n: u64 = 1;
        for _ in 0..ndim {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().expect("8 bytes"));
            n = n.checked_mul(d).filter(|&n| n <= MAX_ELEMENTS).ok_or_else(|| DataError::Corrupt {
                path: path.into(),
                offset,
                msg: "element count overflows".into(),
            })?;
            shape.push(d as usize);
        }
        let payload = cur.take(n * dtype.size() as u64)?;
        let data = match dtype {
            Dtype::F32 => BlobData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::F64 => BlobData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            Dtype::U8 => BlobData::U8(payload.to_vec()),
            Dtype::U16 => BlobData::U16(payload.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect()),
        };
        Ok((Self { shape, data }, cur.pos))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: u64,
    start: u64,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64) -> Result<&'a [u8], DataError> {
        let available = (self.bytes.len() as u64).saturating_sub(self.pos);
        if n > available {
            return Err(DataError::Truncated {
                path: self.path.into(),
                offset: self.start,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos as usize..(self.pos + n) as usize];
        self.pos += n;
        Ok(s)
    }
}

/// Appends blobs to a file and reports the offset of each.
pub struct BlobWriter {
    out: BufWriter<File>,
    path: PathBuf,
    pos: u64,
}

impl BlobWriter {
    pub fn create(path: &Path) -> Result<Self, DataError> {
        let f = File::create(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
            pos: 0,
        })
    }

    pub fn append(&mut self, blob: &Blob) -> Result<u64, DataError> {
        let at = self.pos;
        let bytes = blob.encode();
        self.out.write_all(&bytes).map_err(|e| DataError::io(&self.path, e))?;
        self.pos += bytes.len() as u64;
        Ok(at)
    }

    pub fn finish(mut self) -> Result<(), DataError> {
        self.out.flush().map_err(|e| DataError::io(&self.path, e))
    }
}

/// A blob file held in memory.
#[derive(Debug, Clone)]
pub struct BlobFile {
    path: String,
    bytes: Vec<u8>,
}

impl BlobFile {
    pub fn open(path: &Path) -> Result<Self, DataError> {
        let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
        Ok(Self::from_bytes(path.display().to_string(), bytes))
    }

    pub fn from_bytes(path: impl Into<String>, bytes: Vec<u8>) -> Self {
        Self {
            path: path.into(),
            bytes,
        }
    }

    pub fn path(&self) -> &str {
        &self.path
    }

    pub fn read_at(&self, offset: u64) -> Result<Blob, DataError> {
        Blob::decode(&self.bytes, offset, &self.path).map(|(b, _)| b)
    }

    /// Every blob in the file, in order, with its offset.
    pub fn read_all(&self) -> Result<Vec<(u64, Blob)>, DataError> {
        let mut out = Vec::new();
        let mut at = 0;
        while at < self.bytes.len() as u64 {
            let (b, end) = Blob::decode(&self.bytes, at, &self.path)?;
            out.push((at, b));
            at = end;
        }
        Ok(out)
    }

    fn shape_error(&self, offset: u64, expected: &[usize], found: &[usize]) -> DataError {
        DataError::Shape {
            path: self.path.clone(),
            offset,
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    /// A float matrix of the declared shape, converted to `T`.
    pub fn read_matrix<T: Real>(&self, offset: u64, rows: usize, cols: usize) -> Result<Tensor<T>, DataError> {
        let b = self.read_at(offset)?;
        if b.shape != [rows, cols] {
            return Err(self.shape_error(offset, &[rows, cols], &b.shape));
        }
        let data: Vec<T> = match b.data {
            BlobData::F32(v) => v.into_iter().map(|x| T::lit(x as f64)).collect(),
            BlobData::F64(v) => v.into_iter().map(T::lit).collect(),
            other => {
                return Err(DataError::Dtype {
                    path: self.path.clone(),
                    offset,
                    code: other.dtype() as u8,
                })
            }
        };
        Ok(Tensor::matrix(rows, cols, data).expect("shape checked"))
    }

    /// A class-id grid of the declared shape; `u8` maps are widened.
    pub fn read_classes(&self, offset: u64, h: usize, w: usize) -> Result<Vec<u16>, DataError> {
        let b = self.read_at(offset)?;
        if b.shape != [h, w] {
            return Err(self.shape_error(offset, &[h, w], &b.shape));
        }
        match b.data {
            BlobData::U16(v) => Ok(v),
            BlobData::U8(v) => Ok(v.into_iter().map(u16::from).collect()),
            other => Err(DataError::Dtype {
                path: self.path.clone(),
                offset,
                code: other.dtype() as u8,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_blob(rng: &mut ChaCha8Rng) -> Blob {
        let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..6)).collect();
        let n = shape.iter().product();
        let data = match rng.random_range(0..4) {
            0 => BlobData::F32((0..n).map(|_| f32::from_bits(rng.random())).collect()),
            1 => BlobData::F64((0..n).map(|_| f64::from_bits(rng.random())).collect()),
            2 => BlobData::U8((0..n).map(|_| rng.random()).collect()),
            _ => BlobData::U16((0..n).map(|_| rng.random()).collect()),
        };
        Blob::new(shape, data).unwrap()
    }

    /// Compares payload bits so NaNs round-trip too.
    fn same_bits(a: &Blob, b: &Blob) -> bool {
        a.encode() == b.encode()
    }

    #[test]
    fn file_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gsrg");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blobs: Vec<Blob> = (0..30).map(|_| random_blob(&mut rng)).collect();
        let mut w = BlobWriter::create(&path).unwrap();
        let offsets: Vec<u64> = blobs.iter().map(|b| w.append(b).unwrap()).collect();
        w.finish().unwrap();
        let f = BlobFile::open(&path).unwrap();
        for (b, &o) in blobs.iter().zip(&offsets) {
            assert!(same_bits(b, &f.read_at(o).unwrap()));
        }
        let all = f.read_all().unwrap();
        assert_eq!(all.iter().map(|(o, _)| *o).collect::<Vec<_>>(), offsets);
    }

    #[test]
    fn header_layout() {
        let b = Blob::new(vec![2, 1], BlobData::U16(vec![0x0102, 0x0304])).unwrap();
        let e = b.encode();
        assert_eq!(&e[..4], b"GSRG");
        assert_eq!(&e[4..8], &[1, 0, 4, 2]);
        assert_eq!(&e[8..16], &2u64.to_le_bytes());
        assert_eq!(&e[24..], &[2, 1, 4, 3]);
        assert_eq!(e.len(), b.encoded_len());
    }

    #[test]
    fn distinct_corruption_errors() {
        let b = Blob::new(vec![3], BlobData::F32(vec![1.0, 2.0, 3.0])).unwrap();
        let mut bytes = vec![0u8; 5];
        bytes.extend(b.encode());
        let ok = BlobFile::from_bytes("x", bytes.clone());
        assert!(ok.read_at(5).is_ok());

        let mut bad = bytes.clone();
        bad[5] = b'X';
        assert!(matches!(BlobFile::from_bytes("x", bad).read_at(5), Err(DataError::BadMagic { offset: 5, .. })));
        let mut bad = bytes.clone();
        bad[9] = 9;
        assert!(matches!(BlobFile::from_bytes("x", bad).read_at(5), Err(DataError::Version { found: 9, .. })));
        let mut bad = bytes.clone();
        bad[11] = 7;
        assert!(matches!(BlobFile::from_bytes("x", bad).read_at(5), Err(DataError::Dtype { code: 7, .. })));
        let cut = BlobFile::from_bytes("x", bytes[..bytes.len() - 1].to_vec());
        match cut.read_at(5) {
            Err(e @ DataError::Truncated { .. }) => assert!(e.to_string().contains("x at offset 5")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ok.read_matrix::<f32>(5, 1, 3), Err(DataError::Shape { .. })));
        assert!(matches!(ok.read_classes(5, 3, 1), Err(DataError::Shape { .. })));
    }

    #[test]
    fn typed_reads() {
        let t = Tensor::matrix(2, 2, vec![1.5f32, -2.0, 0.25, 8.0]).unwrap();
        let f = BlobFile::from_bytes("m", Blob::from_tensor(&t).encode());
        assert_eq!(f.read_matrix::<f32>(0, 2, 2).unwrap(), t);
        assert_eq!(f.read_matrix::<f64>(0, 2, 2).unwrap(), t.cast::<f64>());
        assert!(matches!(f.read_classes(0, 2, 2), Err(DataError::Dtype { code: 1, .. })));
        let s = BlobFile::from_bytes("s", Blob::new(vec![1, 2], BlobData::U8(vec![3, 200])).unwrap().encode());
        assert_eq!(s.read_classes(0, 1, 2).unwrap(), vec![3, 200]);
    }

    proptest! {
        #[test]
        fn bit_flips_never_panic(seed in any::<u64>(), flips in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let blobs: Vec<Blob> = (0..3).map(|_| random_blob(&mut rng)).collect();
            let mut bytes: Vec<u8> = blobs.iter().flat_map(|b| b.encode()).collect();
            for _ in 0..flips {
                let i = rng.random_range(0..bytes.len());
                bytes[i] ^= 1 << rng.random_range(0..8);
            }
            let cut = rng.random_range(0..=bytes.len());
            for data in [bytes.clone(), bytes[..cut].to_vec()] {
                let f = BlobFile::from_bytes("fuzz", data);
                let _ = f.read_all();
                let _ = f.read_matrix::<f32>(0, 2, 2);
                let _ = f.read_classes(0, 2, 2);
            }
        }
    }
}
